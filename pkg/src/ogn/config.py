"""Declarative network and schedule descriptions, JSON on disk.

A network is ``encoder -> dense block -> octree blocks``. Layer dicts use
``type`` in ``conv3d | conv2d | fc`` (encoder) and ``upconv | conv`` (dense and
octree blocks). Octree-side channel counts may be omitted and are then filled
by the width rule: the outermost octree block gets ``outer`` channels and every
up-convolution closer to the input adds ``step``.
"""

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

from .layers import ConfigError, LayerSpec, compute_halo, validate_block

REGIMES = ("known", "known+pred", "pred")


@dataclass
class NetworkConfig:
    name: str
    input_kind: str  # "voxels" | "onehot" | "image"
    input_shape: list
    encoder: list = field(default_factory=list)
    dense: dict = field(default_factory=dict)
    blocks: list = field(default_factory=list)
    channel_rule: dict = field(default_factory=lambda: {"outer": 32, "step": 16})
    notes: str = ""

    @classmethod
    def from_dict(cls, d):
        known = {k: copy.deepcopy(v) for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        cfg = cls(**known)
        cfg.resolve()
        return cfg

    def to_dict(self):
        return asdict(self)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def resolve(self):
        """Fill omitted channel counts and validate the whole chain."""
        if self.input_kind not in ("voxels", "onehot", "image"):
            raise ConfigError(f"unknown input kind {self.input_kind!r}")
        outer = self.channel_rule.get("outer", 32)
        step = self.channel_rule.get("step", 16)
        n_blocks = len(self.blocks)
        dense_layers = self.dense.get("layers", [])
        ups_left = sum(1 for layer in dense_layers if layer["type"] == "upconv")
        width = outer + step * (n_blocks + ups_left)
        self.dense.setdefault("channels", width)
        for layer in dense_layers:
            if layer["type"] == "upconv":
                ups_left -= 1
            layer.setdefault("out", outer + step * (n_blocks + ups_left))
        for i, block in enumerate(self.blocks):
            for layer in block:
                layer.setdefault("out", outer + step * (n_blocks - 1 - i))
        self.validate()
        return self

    # -- derived geometry -------------------------------------------------

    def encoder_output(self):
        """Shape after the encoder: ``("vector", n)`` or ``("grid", C, *spatial)``."""
        if self.input_kind == "onehot":
            shape = ("vector", self.input_shape[0])
        else:
            shape = ("grid",) + tuple(self.input_shape)
        for layer in self.encoder:
            t = layer["type"]
            if t == "fc":
                shape = ("vector", layer["out"])
            elif t in ("conv3d", "conv2d"):
                nd = 3 if t == "conv3d" else 2
                if shape[0] != "grid" or len(shape) - 2 != nd:
                    raise ConfigError(f"{t} layer applied to {shape}")
                k, s = layer["k"], layer.get("stride", 1)
                p = layer.get("pad", (k - 1) // 2)
                spatial = tuple((n + 2 * p - k) // s + 1 for n in shape[2:])
                if min(spatial) < 1:
                    raise ConfigError(f"{t} layer shrinks the input to nothing")
                shape = ("grid", layer["out"]) + spatial
            else:
                raise ConfigError(f"unknown encoder layer type {t!r}")
        return shape

    def dense_input(self):
        return tuple(self.dense["input_resolution"]), self.dense["channels"]

    def base_resolution(self):
        res, _ = self.dense_input()
        for layer in self.dense.get("layers", []):
            if layer["type"] == "upconv":
                res = tuple(r * layer.get("stride", 2) for r in res)
        return res

    def base_channels(self):
        layers = self.dense.get("layers", [])
        return layers[-1]["out"] if layers else self.dense["channels"]

    def block_specs(self):
        specs = []
        c_in = self.base_channels()
        for block in self.blocks:
            layers = []
            for layer in block:
                kind = layer["type"]
                stride = layer.get("stride", 2 if kind == "upconv" else 1)
                layers.append(LayerSpec(kind, layer["k"], stride, c_in, layer["out"]))
                c_in = layer["out"]
            specs.append(layers)
        return specs

    def halos(self):
        return [compute_halo(b) for b in self.block_specs()]

    @property
    def n_levels(self):
        return len(self.blocks) + 1

    def output_resolution(self):
        return tuple(d << len(self.blocks) for d in self.base_resolution())

    def validate(self):
        enc = self.encoder_output()
        res, ch = self.dense_input()
        if enc[0] == "vector":
            need = ch
            for r in res:
                need *= r
            if self.encoder and self.encoder[-1]["type"] == "fc" and enc[1] != need:
                raise ConfigError(
                    f"last FC has {enc[1]} units, dense block needs {need} = {res} x {ch}"
                )
            if not self.encoder and enc[1] != need:
                raise ConfigError("input vector does not match the dense block input")
        else:
            if enc[1] != ch or tuple(enc[2:]) != res:
                raise ConfigError(f"encoder output {enc[1:]} does not match dense input {ch}, {res}")
        for layer in self.dense.get("layers", []):
            if layer["type"] not in ("upconv", "conv"):
                raise ConfigError(f"unknown dense layer type {layer['type']!r}")
            if layer["type"] == "conv" and layer["k"] % 2 == 0:
                raise ConfigError("dense convolutions must be odd-sized")
        for block in self.block_specs():
            validate_block(block)
        self.halos()


def load_network_config(source):
    """Preset name or path to a JSON file."""
    if isinstance(source, NetworkConfig):
        return source
    if isinstance(source, dict):
        return NetworkConfig.from_dict(source)
    path = Path(source)
    if path.suffix == ".json" and path.exists():
        d = json.loads(path.read_text())
    else:
        d = load_preset(str(source))
    if "network" in d:
        d = d["network"]
    return NetworkConfig.from_dict(d)


def preset_names():
    files = resources.files("ogn.presets").iterdir()
    return sorted(p.name[:-5] for p in files if p.name.endswith(".json"))


def load_preset(name):
    try:
        text = resources.files("ogn.presets").joinpath(f"{name}.json").read_text()
    except FileNotFoundError:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}") from None
    return json.loads(text)


def scaled_drops(total_steps):
    """Drop thresholds at 30% and 70% of a run (merged when they coincide)."""
    return sorted({int(round(0.3 * total_steps)), int(round(0.7 * total_steps))})


@dataclass
class TrainSchedule:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_drops: list = field(default_factory=lambda: [30000, 70000])
    lr_factor: float = 0.1
    total_steps: int = 100000
    batch_size: int = 16
    regime: str = "known+pred"
    finetune_steps: int = 0
    checkpoint_every: int = 0

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown schedule keys: {sorted(unknown)}")
        s = cls(**d)
        s.validate()
        return s

    def to_dict(self):
        return asdict(self)

    def validate(self):
        if any(b <= a for a, b in zip(self.lr_drops, self.lr_drops[1:])):
            raise ConfigError("lr drop thresholds must be strictly increasing")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}")
        if self.total_steps < 0 or self.finetune_steps < 0 or self.batch_size < 1:
            raise ConfigError("step counts must be non-negative and batch size positive")

    @classmethod
    def scaled(cls, total_steps, **kw):
        """Learning-rate drops at 30% and 70% of ``total_steps``."""
        return cls(total_steps=total_steps, lr_drops=scaled_drops(total_steps), **kw)

    def lr_at(self, step):
        """Learning rate of main-phase step ``step`` (0-based)."""
        n = sum(1 for d in self.lr_drops if step >= d)
        return self.lr * self.lr_factor ** n

    @property
    def final_lr(self):
        return self.lr * self.lr_factor ** len(self.lr_drops)


def load_schedule(source):
    if isinstance(source, TrainSchedule):
        return source
    if isinstance(source, dict):
        return TrainSchedule.from_dict(source)
    d = json.loads(Path(source).read_text())
    return TrainSchedule.from_dict(d.get("schedule", d))
