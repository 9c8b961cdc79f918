"""Declarative convnet descriptions, the VGG-family presets and parameter counting."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from functools import lru_cache
from importlib import resources

POSE_DIM = 7
PARAM_KINDS = ("conv", "fc")
KINDS = ("conv", "relu", "lrn", "maxpool", "fc", "dropout")


class ArchError(ValueError):
    pass


def _pad4(pad) -> tuple:
    if isinstance(pad, int):
        return (pad, pad, pad, pad)
    pad = tuple(int(p) for p in pad)
    if len(pad) != 4:
        raise ArchError(f"pad must be an int or [top, bottom, left, right], got {pad}")
    return pad


@dataclass(frozen=True)
class LayerSpec:
    """One layer. Fully-connected layers are convolutions whose kernel covers the whole input map."""

    kind: str
    name: str = ""
    out_depth: int = 0
    in_depth: int = 0
    kernel: tuple = (1, 1)
    stride: int = 1
    pad: tuple = (0, 0, 0, 0)
    bias: bool = True
    rate: float = 0.0
    lrn: tuple = (5, 2.0, 1e-4, 0.75)  # size, kappa, alpha, beta

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ArchError(f"unknown layer kind {self.kind!r}")
        k = self.kernel
        object.__setattr__(self, "kernel", (k, k) if isinstance(k, int) else tuple(k))
        object.__setattr__(self, "pad", _pad4(self.pad))
        object.__setattr__(self, "lrn", tuple(self.lrn))
        if self.kind == "lrn" and self.lrn[0] % 2 == 0:
            raise ArchError("LRN window size must be odd")

    @property
    def has_params(self) -> bool:
        return self.kind in PARAM_KINDS

    @property
    def weight_shape(self) -> tuple:
        return (*self.kernel, self.in_depth, self.out_depth)

    def count_params(self) -> int:
        if not self.has_params:
            return 0
        kh, kw = self.kernel
        return kh * kw * self.in_depth * self.out_depth + (self.out_depth if self.bias else 0)


def output_hw(h: int, w: int, layer: LayerSpec) -> tuple:
    if layer.kind not in ("conv", "maxpool", "fc"):
        return h, w
    pt, pb, pl, pr = layer.pad
    kh, kw = layer.kernel
    ho = (h + pt + pb - kh) // layer.stride + 1
    wo = (w + pl + pr - kw) // layer.stride + 1
    if ho < 1 or wo < 1:
        raise ArchError(f"layer {layer.name or layer.kind} shrinks a {h}x{w} map to nothing")
    return ho, wo


@dataclass(frozen=True)
class ArchSpec:
    name: str
    layers: tuple
    input_side: int = 224
    head_dim: int = POSE_DIM

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    @property
    def in_channels(self) -> int:
        return self.param_layers[0].in_depth

    @property
    def param_layers(self) -> list:
        return [l for l in self.layers if l.has_params]

    def validate(self):
        params = self.param_layers
        if not params:
            raise ArchError(f"{self.name}: no parameterized layers")
        names = [l.name for l in params]
        if len(set(names)) != len(names) or "" in names:
            raise ArchError(f"{self.name}: parameterized layers need unique names, got {names}")
        depth = params[0].in_depth
        h = w = self.input_side
        for l in self.layers:
            if l.has_params and l.in_depth != depth:
                raise ArchError(f"{self.name}: layer {l.name} expects depth {l.in_depth}, receives {depth}")
            if l.kind == "fc" and l.kernel != (h, w):
                raise ArchError(f"{self.name}: fc layer {l.name} kernel {l.kernel} != input map {(h, w)}")
            h, w = output_hw(h, w, l)
            if l.has_params:
                depth = l.out_depth
        if (h, w) != (1, 1) or params[-1].kind != "fc":
            raise ArchError(f"{self.name}: network must end in a fully-connected layer")
        if depth != self.head_dim:
            raise ArchError(f"{self.name}: final output {depth} != head_dim {self.head_dim}")

    def shapes(self, side: int | None = None) -> list:
        """Output shape (H, W, C) after every layer for a ``side x side`` input."""
        h = w = side or self.input_side
        c = self.in_channels
        out = []
        for l in self.layers:
            h, w = output_hw(h, w, l)
            if l.has_params:
                c = l.out_depth
            out.append((h, w, c))
        return out

    def to_dict(self) -> dict:
        return {"name": self.name, "input_side": self.input_side, "head_dim": self.head_dim,
                "layers": [asdict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d) -> "ArchSpec":
        return cls(d["name"], tuple(LayerSpec(**l) for l in d["layers"]), int(d["input_side"]),
                   int(d["head_dim"]))


def count_params(arch: ArchSpec) -> int:
    return sum(l.count_params() for l in arch.layers)


@lru_cache(maxsize=None)
def _preset_table() -> dict:
    text = resources.files("cnnmap").joinpath("data/architectures.json").read_text()
    return json.loads(text)["presets"]


def preset_names() -> list:
    return list(_preset_table())


def expand_layers(table: list, in_channels: int, side: int, head_dim: int) -> list:
    """Chain a raw layer table: fill input depths and size fc kernels to the incoming map."""
    layers = []
    depth, h, w = in_channels, side, side
    for raw in table:
        raw = dict(raw)
        kind = raw.pop("kind")
        kw = {"kind": kind, "name": raw.get("name", "")}
        if kind in PARAM_KINDS:
            out = head_dim if raw["out"] == "head" else int(raw["out"])
            kw.update(out_depth=out, in_depth=depth)
            if kind == "conv":
                kw.update(kernel=raw["kernel"], stride=raw.get("stride", 1), pad=raw.get("pad", 0))
            else:
                kw.update(kernel=(h, w))
            kw["bias"] = raw.get("bias", True)
        elif kind == "maxpool":
            kw.update(kernel=raw["kernel"], stride=raw.get("stride", 1), pad=raw.get("pad", 0))
        elif kind == "lrn":
            kw["lrn"] = (raw.get("size", 5), raw.get("kappa", 2.0), raw.get("alpha", 1e-4),
                         raw.get("beta", 0.75))
        elif kind == "dropout":
            kw["rate"] = float(raw.get("rate", 0.5))
        layer = LayerSpec(**kw)
        h, w = output_hw(h, w, layer)
        if layer.has_params:
            depth = layer.out_depth
        layers.append(layer)
    return layers


def preset(name: str, in_channels: int = 3, side: int | None = None, head_dim: int = POSE_DIM) -> ArchSpec:
    """Expand a named architecture for ``in_channels`` inputs.

    Only the first convolution's depth depends on ``in_channels``; the
    last fully-connected layer emits ``head_dim`` values (the 7-vector
    pose by default, 1000 for the original classifiers).
    """
    table = _preset_table()
    if name not in table:
        raise ArchError(f"unknown architecture {name!r}; known: {list(table)}")
    if in_channels < 1:
        raise ArchError(f"in_channels must be >= 1, got {in_channels}")
    entry = table[name]
    side = side or entry["input_side"]
    return ArchSpec(name, tuple(expand_layers(entry["layers"], in_channels, side, head_dim)), side, head_dim)


def conv1_delta(arch: ArchSpec, n: int, n_ref: int = 3) -> int:
    """Parameter difference caused by changing the input depth from ``n_ref`` to ``n``."""
    first = arch.param_layers[0]
    kh, kw = first.kernel
    return (n - n_ref) * kh * kw * first.out_depth


def with_head(arch: ArchSpec, head_dim: int) -> ArchSpec:
    layers = list(arch.layers)
    i = max(k for k, l in enumerate(layers) if l.has_params)
    layers[i] = replace(layers[i], out_depth=head_dim)
    return ArchSpec(arch.name, tuple(layers), arch.input_side, head_dim)
