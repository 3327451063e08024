"""Voxel data in and out: binvox, interior filling, toy shapes, images, manifests."""

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage


class ParseError(ValueError):
    """Malformed input file; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (at byte {offset})")


# -- binvox --------------------------------------------------------------------

BINVOX_MAGIC = b"#binvox 1"


@dataclass
class BinvoxHeader:
    dims: tuple
    translate: str = "0 0 0"
    scale: str = "1"


def _rle_encode(flat):
    """Greedy (value, count) pairs with counts capped at 255."""
    flat = np.asarray(flat, dtype=np.uint8)
    if flat.size == 0:
        return b""
    change = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], change])
    lengths = np.diff(np.concatenate([starts, [flat.size]]))
    values = flat[starts]
    full, rest = np.divmod(lengths, 255)
    reps = full + (rest > 0)
    counts = np.full(int(reps.sum()), 255, dtype=np.uint8)
    ends = np.cumsum(reps) - 1
    counts[ends[rest > 0]] = rest[rest > 0]
    out = np.empty((counts.size, 2), dtype=np.uint8)
    out[:, 0] = np.repeat(values, reps)
    out[:, 1] = counts
    return out.tobytes()


def write_binvox(grid, header=None):
    """Encode a boolean ``(X, Y, Z)`` grid; voxel order is x slowest, then z, y fastest."""
    grid = np.asarray(grid, dtype=bool)
    if grid.ndim != 3:
        raise ValueError("binvox grids are 3-dimensional")
    header = header or BinvoxHeader(grid.shape)
    if tuple(header.dims) != grid.shape:
        raise ValueError(f"header dims {header.dims} do not match grid {grid.shape}")
    d = header.dims
    text = (
        f"#binvox 1\ndim {d[0]} {d[1]} {d[2]}\ntranslate {header.translate}\n"
        f"scale {header.scale}\ndata\n"
    )
    return text.encode("ascii") + _rle_encode(grid.transpose(0, 2, 1).ravel())


def read_binvox(data, with_header=False):
    """Decode binvox bytes into a boolean ``(X, Y, Z)`` grid."""
    data = bytes(data)
    if not data.startswith(BINVOX_MAGIC + b"\n"):
        raise ParseError("bad magic, expected '#binvox 1'", 0)
    pos = len(BINVOX_MAGIC) + 1
    dims = translate = scale = None
    while True:
        end = data.find(b"\n", pos)
        if end < 0:
            raise ParseError("header not terminated by a 'data' line", pos)
        try:
            line = data[pos:end].decode("ascii").strip()
        except UnicodeDecodeError:
            raise ParseError("non-ASCII header line", pos) from None
        line_at = pos
        pos = end + 1
        if line == "data":
            break
        key, _, rest = line.partition(" ")
        if key == "dim":
            try:
                dims = tuple(int(v) for v in rest.split())
            except ValueError:
                raise ParseError(f"bad dim line {line!r}", line_at) from None
            if len(dims) != 3 or min(dims) < 1:
                raise ParseError(f"bad dim line {line!r}", line_at)
        elif key == "translate":
            translate = rest
        elif key == "scale":
            scale = rest
        elif line and not line.startswith("#"):
            raise ParseError(f"unexpected header line {line!r}", line_at)
    if dims is None:
        raise ParseError("missing dim line", pos)
    n = dims[0] * dims[1] * dims[2]
    body = np.frombuffer(data, dtype=np.uint8, offset=pos)
    if body.size % 2:
        raise ParseError("truncated run-length pair", len(data) - 1)
    pairs = body.reshape(-1, 2)
    values, counts = pairs[:, 0], pairs[:, 1].astype(np.int64)
    bad = np.flatnonzero((counts == 0) | (values > 1))
    if bad.size:
        raise ParseError("run with zero count or non-binary value", pos + 2 * int(bad[0]))
    total = np.cumsum(counts)
    if total.size == 0 or total[-1] < n:
        raise ParseError(f"data ends after {0 if total.size == 0 else int(total[-1])} of {n} voxels", len(data))
    if total[-1] > n:
        over = int(np.searchsorted(total, n, side="left"))
        at = pos + 2 * (over if total[over] > n else over + 1)
        raise ParseError(f"run-length data exceeds dim {dims}", at)
    flat = np.repeat(values.astype(bool), counts)
    grid = flat.reshape(dims[0], dims[2], dims[1]).transpose(0, 2, 1).copy()
    if with_header:
        return grid, BinvoxHeader(dims, translate or "0 0 0", scale or "1")
    return grid


def load_binvox(path):
    return read_binvox(Path(path).read_bytes())


def save_binvox(path, grid, header=None):
    Path(path).write_bytes(write_binvox(grid, header))


# -- interior filling ------------------------------------------------------------


def fill_interior(grid):
    """Fill every empty voxel not 6-connected to the volume boundary."""
    grid = np.asarray(grid, dtype=bool)
    # the default structuring element of binary_fill_holes is the 6-neighbourhood
    return ndimage.binary_fill_holes(grid)


# -- toy shapes --------------------------------------------------------------------

TOY_FAMILIES = ("sphere", "box", "cylinder", "union")


def _centres(resolution):
    r = resolution
    ax = [(np.arange(n) + 0.5) / n for n in (r, r, r)]
    return np.meshgrid(*ax, indexing="ij", sparse=True)


def primitive_mask(prim, resolution):
    """Rasterise one primitive (unit-cube coordinates) at voxel centres."""
    x, y, z = _centres(resolution)
    c = prim["center"]
    dx, dy, dz = x - c[0], y - c[1], z - c[2]
    kind = prim["type"]
    if kind == "sphere":
        r = np.broadcast_to(prim["radius"], (3,))
        return (dx / r[0]) ** 2 + (dy / r[1]) ** 2 + (dz / r[2]) ** 2 <= 1.0
    if kind == "box":
        h = prim["half"]
        return (np.abs(dx) <= h[0]) & (np.abs(dy) <= h[1]) & (np.abs(dz) <= h[2])
    if kind == "cylinder":
        # axis along z
        return (dx ** 2 + dy ** 2 <= prim["radius"] ** 2) & (np.abs(dz) <= prim["half_height"])
    raise ValueError(f"unknown primitive {kind!r}")


def rasterize(prims, resolution):
    out = np.zeros((resolution,) * 3, dtype=bool)
    for p in prims:
        out |= primitive_mask(p, resolution)
    return out


def toy_primitives(kind, seed, params=None):
    """Random primitive list for a toy shape; ``params`` overrides fields."""
    rng = np.random.default_rng(seed)
    centre = 0.5 + rng.uniform(-0.03, 0.03, 3)
    if kind == "sphere":
        prims = [{"type": "sphere", "center": centre, "radius": rng.uniform(0.24, 0.40, 3)}]
    elif kind == "box":
        prims = [{"type": "box", "center": centre, "half": rng.uniform(0.16, 0.36, 3)}]
    elif kind == "cylinder":
        prims = [{"type": "cylinder", "center": centre, "radius": rng.uniform(0.2, 0.36),
                  "half_height": rng.uniform(0.2, 0.4)}]
    elif kind in ("union", "union-of-primitives"):
        # a car-like body with a cabin and four round "wheels"
        body = rng.uniform([0.30, 0.18, 0.08], [0.40, 0.26, 0.12])
        bc = centre + [0, 0, -0.05]
        cab = body * rng.uniform([0.4, 0.7, 0.8], [0.7, 0.95, 1.2])
        cc = bc + [rng.uniform(-0.1, 0.1), 0, body[2] + cab[2]]
        prims = [{"type": "box", "center": bc, "half": body}, {"type": "box", "center": cc, "half": cab}]
        wr = rng.uniform(0.06, 0.09)
        for sx in (-1, 1):
            for sy in (-1, 1):
                prims.append({"type": "sphere", "center": bc + [sx * 0.7 * body[0], sy * body[1], -body[2]],
                              "radius": np.array([wr, 0.04, wr])})
    else:
        raise ValueError(f"unknown toy shape kind {kind!r}")
    if params:
        for k, v in params.items():
            prims[0][k] = np.asarray(v, dtype=np.float64)
    return prims


def synth_toy_shape(kind, params=None, seed=0, resolution=32):
    """Deterministic solid toy shape as a boolean ``resolution**3`` grid."""
    return rasterize(toy_primitives(kind, seed, params), resolution)


def toy_corpus(n=64, resolution=32, seed=0):
    """``n`` shapes cycling through the four families; returns ``(ids, grids)``."""
    ids, grids = [], []
    base = np.random.SeedSequence(seed)
    for i, child in enumerate(base.spawn(n)):
        kind = TOY_FAMILIES[i % len(TOY_FAMILIES)]
        ids.append(f"{kind}-{i:03d}")
        grids.append(synth_toy_shape(kind, seed=child, resolution=resolution))
    return ids, np.stack(grids)


def scene_primitives(index):
    """Four fixed multi-part scenes with thin features (rods and plates)."""
    rng = np.random.default_rng(1000 + index)
    prims = []
    # a ground plate with a few blocks and spheres on top
    plate = 0.012 + 0.004 * index
    prims.append({"type": "box", "center": [0.5, 0.5, 0.12], "half": [0.42, 0.42, plate]})
    for _ in range(2 + index % 2):
        h = rng.uniform(0.06, 0.14, 3)
        c = rng.uniform(0.25, 0.75, 3)
        c[2] = 0.12 + plate + h[2]
        prims.append({"type": "box", "center": c, "half": h})
    for _ in range(2):
        r = rng.uniform(0.07, 0.12)
        c = rng.uniform(0.25, 0.75, 3)
        c[2] = rng.uniform(0.35, 0.7)
        prims.append({"type": "sphere", "center": c, "radius": np.array([r, r, r])})
    # thin vertical rods, about one voxel at 64^3
    for _ in range(3):
        c = rng.uniform(0.15, 0.85, 3)
        c[2] = 0.5
        prims.append({"type": "cylinder", "center": c, "radius": rng.uniform(0.008, 0.014),
                      "half_height": rng.uniform(0.2, 0.35)})
    return prims


def toy_scene(index, resolution):
    return rasterize(scene_primitives(index), resolution)


def downsample_majority(grid, factor):
    g = np.asarray(grid, dtype=np.float64)
    n = g.shape[0] // factor
    return g.reshape(n, factor, n, factor, n, factor).mean(axis=(1, 3, 5)) >= 0.5


def shift_grid(grid, shift, axis=2):
    """Translate along ``axis``; voxels shifted out are dropped, new ones empty."""
    grid = np.asarray(grid)
    out = np.zeros_like(grid)
    n = grid.shape[axis]
    if abs(shift) >= n:
        return out
    src = [slice(None)] * grid.ndim
    dst = [slice(None)] * grid.ndim
    if shift >= 0:
        src[axis], dst[axis] = slice(0, n - shift), slice(shift, n)
    else:
        src[axis], dst[axis] = slice(-shift, n), slice(0, n + shift)
    out[tuple(dst)] = grid[tuple(src)]
    return out


# -- images ------------------------------------------------------------------------


def _pnm_tokens(data, count, pos):
    tokens = []
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ParseError("truncated P5 header", pos)
        tok = data[start:pos]
        if not tok.isdigit():
            raise ParseError(f"bad P5 header field {tok!r}", start)
        tokens.append(int(tok))
    return tokens, pos


def parse_pgm(data):
    """P5 bytes to a ``(1, H, W)`` float array in [0, 1]."""
    data = bytes(data)
    if data[:2] != b"P5":
        raise ParseError("bad magic, expected 'P5'", 0)
    (w, h, maxval), pos = _pnm_tokens(data, 3, 2)
    if not 0 < maxval < 65536 or w < 1 or h < 1:
        raise ParseError("bad P5 dimensions or maxval", 2)
    pos += 1  # single whitespace after maxval
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    need = w * h * np.dtype(dtype).itemsize
    if len(data) - pos < need:
        raise ParseError("truncated P5 pixel data", len(data))
    pix = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos)
    return (pix.astype(np.float64) / maxval).reshape(1, h, w)


def format_pgm(image, maxval=255):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    h, w = img.shape
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    body = q.astype(np.uint8 if maxval < 256 else ">u2").tobytes()
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + body


def read_image(path):
    return parse_pgm(Path(path).read_bytes())


def write_image(path, image, maxval=255):
    Path(path).write_bytes(format_pgm(image, maxval))


def render_view(grid, size=32, axis=0):
    """Shaded orthographic depth view of a voxel grid as a ``(1, size, size)`` image.

    The first occupied voxel along ``axis`` is shaded by depth (near = bright).
    """
    g = np.moveaxis(np.asarray(grid, dtype=bool), axis, 0)
    n = g.shape[0]
    hit = g.any(axis=0)
    depth = np.argmax(g, axis=0)
    img = np.where(hit, 1.0 - 0.7 * depth / max(n - 1, 1), 0.0)
    f = img.shape[0] // size
    if f > 1:
        img = img[: f * size, : f * size].reshape(size, f, size, f).mean(axis=(1, 3))
    return img[None]


# -- one-hot -------------------------------------------------------------------------


def one_hot(index, n):
    if not 0 <= index < n:
        raise ValueError(f"id {index} out of range for {n} classes")
    v = np.zeros(n)
    v[index] = 1.0
    return v


# -- manifests -------------------------------------------------------------------------


@dataclass
class ManifestRecord:
    id: str
    path: str
    image: str = None
    split: str = "train"


@dataclass
class DatasetManifest:
    """Sample list with a train/test assignment.

    ``path`` entries may contain ``{res}``, substituted with the requested
    resolution so one manifest can address several voxelizations.
    """

    records: list
    onehot_dim: int = 0
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ParseError("duplicate sample ids in manifest")
        if not self.onehot_dim:
            self.onehot_dim = len(self.records)

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def index_of(self, sample_id):
        for i, r in enumerate(self.records):
            if r.id == sample_id:
                return i
        raise KeyError(sample_id)

    def voxel_path(self, record, resolution=None):
        p = record.path.replace("{res}", str(resolution)) if resolution is not None else record.path
        return self.root / p

    def image_path(self, record):
        return None if record.image is None else self.root / record.image


def make_split(records, ratio=0.8, seed=0):
    """Deterministic shuffled split; ``round(ratio * n)`` records go to train."""
    records = list(records)
    n_train = int(round(ratio * len(records)))
    order = np.random.default_rng(seed).permutation(len(records))
    train = set(order[:n_train].tolist())
    return [
        ManifestRecord(r.id, r.path, r.image, "train" if i in train else "test")
        for i, r in enumerate(records)
    ]


_DIRECTIVE = re.compile(r"^#(\w+)\s*(.*)$")


def parse_manifest(text, root="."):
    """Lines ``id<TAB>path[<TAB>image]``; ``#split train|test`` and ``#onehot N`` directives."""
    records, split, onehot = [], "train", 0
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        m = _DIRECTIVE.match(line)
        if m:
            key, val = m.group(1), m.group(2).strip()
            if key == "split":
                if val not in ("train", "test"):
                    raise ParseError(f"line {lineno}: unknown split {val!r}")
                split = val
            elif key == "onehot":
                if not val.isdigit():
                    raise ParseError(f"line {lineno}: bad #onehot value {val!r}")
                onehot = int(val)
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3) or not parts[0]:
            raise ParseError(f"line {lineno}: expected id<TAB>path[<TAB>image]")
        records.append(ManifestRecord(parts[0], parts[1], parts[2] if len(parts) == 3 else None, split))
    return DatasetManifest(records, onehot, Path(root))


def load_manifest(path):
    path = Path(path)
    return parse_manifest(path.read_text(), path.parent)


def format_manifest(manifest):
    lines = [f"#onehot {manifest.onehot_dim}"]
    for name in ("train", "test"):
        lines.append(f"#split {name}")
        for r in manifest.split(name):
            lines.append("\t".join([r.id, r.path] + ([r.image] if r.image else [])))
    return "\n".join(lines) + "\n"


def write_manifest(path, manifest):
    Path(path).write_text(format_manifest(manifest))
