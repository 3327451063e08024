"""Dense float64 tensor ops with hand-written backward passes.

Feature maps are numpy arrays laid out ``(N, C, X, Y, Z)`` (or ``(N, C, H, W)``
for images); a leading batch axis is optional for the public conv functions.
Convolutions are accumulated one kernel offset at a time: each offset is a
strided view of the (padded) input contracted against a ``C_out x C_in`` weight
slice, which keeps memory at the size of the output.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np


def glorot_uniform(shape, fan_in, fan_out, rng):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _batched(x, nd):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == nd + 1:
        return x[None], True
    if x.ndim != nd + 2:
        raise ValueError(f"expected {nd + 1}- or {nd + 2}-dimensional input, got shape {x.shape}")
    return x, False


def _spatial_sum_axes(nd):
    return [0] + list(range(2, nd + 2))


def _conv_out_shape(spatial, k, stride, pad):
    out = []
    for s, kk in zip(spatial, k):
        if s + 2 * pad < kk:
            raise ValueError(f"input extent {s} with padding {pad} smaller than kernel {kk}")
        out.append((s + 2 * pad - kk) // stride + 1)
    return out


def _window(offset, n, stride):
    return tuple(slice(o, o + stride * (m - 1) + 1, stride) for o, m in zip(offset, n))


def convnd(x, w, b, stride=1, pad=0):
    """Cross-correlation with zero padding; ``w`` is ``(C_out, C_in, *k)``."""
    nd = w.ndim - 2
    x, squeeze = _batched(x, nd)
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, weights expect {w.shape[1]}")
    k = w.shape[2:]
    out = _conv_out_shape(x.shape[2:], k, stride, pad)
    xp = np.pad(x, [(0, 0), (0, 0)] + [(pad, pad)] * nd) if pad else x
    yt = np.zeros((w.shape[0], x.shape[0], *out))
    lead = (slice(None), slice(None))
    for off in itertools.product(*(range(kk) for kk in k)):
        xs = xp[lead + _window(off, out, stride)]
        yt += np.tensordot(w[lead + off], xs, axes=([1], [1]))
    y = np.moveaxis(yt, 0, 1) + np.asarray(b).reshape((1, -1) + (1,) * nd)
    y = np.ascontiguousarray(y)
    return y[0] if squeeze else y


def convnd_backward(dy, x, w, stride=1, pad=0):
    """Gradients ``(dx, dw, db)`` of :func:`convnd`."""
    nd = w.ndim - 2
    x, squeeze = _batched(x, nd)
    dy, _ = _batched(dy, nd)
    k = w.shape[2:]
    out = dy.shape[2:]
    xp = np.pad(x, [(0, 0), (0, 0)] + [(pad, pad)] * nd) if pad else x
    dxt = np.zeros((x.shape[1], x.shape[0]) + xp.shape[2:])
    dw = np.zeros_like(w, dtype=np.float64)
    axes = _spatial_sum_axes(nd)
    lead = (slice(None), slice(None))
    for off in itertools.product(*(range(kk) for kk in k)):
        win = _window(off, out, stride)
        dw[lead + off] = np.tensordot(dy, xp[lead + win], axes=(axes, axes))
        dxt[lead + win] += np.tensordot(w[lead + off], dy, axes=([0], [1]))
    dx = np.moveaxis(dxt, 0, 1)
    if pad:
        dx = dx[lead + (slice(pad, -pad),) * nd]
    dx = np.ascontiguousarray(dx)
    db = dy.sum(axis=tuple(axes))
    return (dx[0] if squeeze else dx), dw, db


def upconvnd(x, w, b, stride=2):
    """Transposed convolution; ``w`` is ``(C_in, C_out, *k)``.

    Input index ``i`` feeds outputs ``i*stride .. i*stride + k - 1``; the output
    extent is ``(n - 1) * stride + k`` with nothing cropped.
    """
    nd = w.ndim - 2
    x, squeeze = _batched(x, nd)
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"input has {x.shape[1]} channels, weights expect {w.shape[0]}")
    k = w.shape[2:]
    if stride < 1 or any(kk < stride for kk in k):
        raise ValueError("upconv needs stride >= 1 and kernel >= stride")
    n = x.shape[2:]
    out = [(m - 1) * stride + kk for m, kk in zip(n, k)]
    yt = np.zeros((w.shape[1], x.shape[0], *out))
    lead = (slice(None), slice(None))
    for off in itertools.product(*(range(kk) for kk in k)):
        yt[lead + _window(off, n, stride)] += np.tensordot(w[lead + off], x, axes=([0], [1]))
    y = np.moveaxis(yt, 0, 1) + np.asarray(b).reshape((1, -1) + (1,) * nd)
    y = np.ascontiguousarray(y)
    return y[0] if squeeze else y


def upconvnd_backward(dy, x, w, stride=2):
    nd = w.ndim - 2
    x, squeeze = _batched(x, nd)
    dy, _ = _batched(dy, nd)
    k = w.shape[2:]
    n = x.shape[2:]
    dxt = np.zeros((x.shape[1], x.shape[0], *n))
    dw = np.zeros_like(w, dtype=np.float64)
    axes = _spatial_sum_axes(nd)
    lead = (slice(None), slice(None))
    for off in itertools.product(*(range(kk) for kk in k)):
        dys = dy[lead + _window(off, n, stride)]
        dw[lead + off] = np.tensordot(x, dys, axes=(axes, axes))
        dxt += np.tensordot(w[lead + off], dys, axes=([1], [1]))
    dx = np.ascontiguousarray(np.moveaxis(dxt, 0, 1))
    db = dy.sum(axis=tuple(axes))
    return (dx[0] if squeeze else dx), dw, db


def conv3d(x, w, b, stride=1, pad=0):
    if w.ndim != 5:
        raise ValueError("conv3d weights must be (C_out, C_in, k, k, k)")
    return convnd(x, w, b, stride, pad)


def conv3d_backward(dy, x, w, stride=1, pad=0):
    return convnd_backward(dy, x, w, stride, pad)


def conv2d(x, w, b, stride=1, pad=0):
    if w.ndim != 4:
        raise ValueError("conv2d weights must be (C_out, C_in, k, k)")
    return convnd(x, w, b, stride, pad)


def conv2d_backward(dy, x, w, stride=1, pad=0):
    return convnd_backward(dy, x, w, stride, pad)


def upconv3d(x, w, b, stride=2):
    if w.ndim != 5:
        raise ValueError("upconv3d weights must be (C_in, C_out, k, k, k)")
    return upconvnd(x, w, b, stride)


def upconv3d_backward(dy, x, w, stride=2):
    return upconvnd_backward(dy, x, w, stride)


def fully_connected(x, w, b):
    """``y = x @ w.T + b`` for ``x`` of shape ``(in,)`` or ``(N, in)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"input size {x.shape[-1]} does not match weights {w.shape}")
    return x @ w.T + b


def fully_connected_backward(dy, x, w):
    x = np.asarray(x, dtype=np.float64)
    dy2 = np.atleast_2d(dy)
    x2 = np.atleast_2d(x)
    dw = dy2.T @ x2
    db = dy2.sum(axis=0)
    dx = dy @ w
    return dx, dw, db


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, y):
    """Gradient through ReLU given its *output* ``y``."""
    return dy * (y > 0)


def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, targets):
    """Per-item cross-entropy and its gradient ``softmax - one_hot``.

    ``logits`` has shape ``(..., K)`` and ``targets`` integer shape ``(...)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    z = logits - logits.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    grad = np.exp(logp)
    np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], -1) - 1.0, -1)
    return -picked, grad


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected ADAM update, applied to ``params`` in place."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name in sorted(params):
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def _linear_weights(n_src, n_dst):
    src = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    src = np.clip(src, 0.0, n_src - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_src - 1)
    return i0, i1, src - i0


def trilinear_upsample(grid, target):
    """Resample a ``(D, H, W)`` array to ``target`` with cell-centre alignment."""
    out = np.asarray(grid, dtype=np.float64)
    if out.ndim != 3 or len(target) != 3:
        raise ValueError("trilinear_upsample works on 3D grids")
    for axis, n_dst in enumerate(target):
        n_src = out.shape[axis]
        if n_dst % n_src:
            raise ValueError(f"target {n_dst} is not a multiple of source {n_src}")
        i0, i1, w = _linear_weights(n_src, n_dst)
        shape = [1, 1, 1]
        shape[axis] = n_dst
        w = w.reshape(shape)
        out = np.take(out, i0, axis=axis) * (1.0 - w) + np.take(out, i1, axis=axis) * w
    return out


def relative_error(analytic, numeric, floor=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_difference_check(loss_fn, params, grads, delta=1e-5, max_entries=None, rng=None, skip_kinks=False,
                            tol=1e-4):
    """Largest relative error between ``grads`` and central differences.

    ``loss_fn()`` must read the arrays in ``params`` (they are perturbed in
    place and restored). With ``max_entries`` only that many randomly chosen
    entries per array are probed. With ``skip_kinks`` an entry that exceeds
    ``tol`` is left out when its one-sided differences disagree, i.e. a ReLU
    switches inside the probe interval and the loss is not differentiable
    there; use :func:`gradient_check` to also get the number skipped.
    """
    return gradient_check(loss_fn, params, grads, delta, max_entries, rng, skip_kinks, tol)[0]


def gradient_check(loss_fn, params, grads, delta=1e-5, max_entries=None, rng=None, skip_kinks=False, tol=1e-4):
    """``(worst relative error, entries checked, entries skipped)``."""
    worst = 0.0
    checked = skipped = 0
    rng = rng if rng is not None else np.random.default_rng(0)
    f0 = loss_fn() if skip_kinks else None
    for name in sorted(params):
        p = params[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        g = np.asarray(grads[name]).reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + delta
            up = loss_fn()
            flat[i] = orig - delta
            down = loss_fn()
            flat[i] = orig
            num = (up - down) / (2 * delta)
            err = float(relative_error(g[i], num))
            if skip_kinks and err > tol:
                right, left = (up - f0) / delta, (f0 - down) / delta
                if abs(right - left) > 1e-3 * max(abs(right), abs(left), 1e-6):
                    skipped += 1
                    continue
            checked += 1
            worst = max(worst, err)
    return worst, checked, skipped
