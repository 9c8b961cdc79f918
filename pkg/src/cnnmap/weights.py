"""Language-neutral weight containers.

A container is two files: a UTF-8 text manifest and a raw binary blob.
The manifest holds ``key = value`` lines::

    format = cnnmap-weights
    version = 1
    data_file = model.bin
    data_bytes = 123456
    data_sha256 = <hex digest of the blob>
    array.conv1.weight = dtype=float32 offset=0 shape=11,11,3,64
    meta.arch = {...json...}
    meta.channel_means = [0.48, 0.45, 0.40]

Arrays are little-endian, C-ordered, stored back to back at the given
byte offsets. ``dtype`` is ``float32`` (the default for exchange) or
``float64`` (for exact round trips of double-precision models).
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .archs import ArchSpec
from .network import Model, param_names

FORMAT = "cnnmap-weights"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class ContainerError(ValueError):
    pass


class ChecksumError(ContainerError):
    pass


@dataclass
class WeightContainer:
    arrays: dict
    meta: dict = field(default_factory=dict)

    @property
    def container_id(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.arrays):
            a = self.arrays[name]
            h.update(name.encode())
            h.update(str(a.dtype).encode())
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]

    @property
    def channel_means(self):
        return self.meta.get("channel_means")

    @classmethod
    def from_model(cls, model: Model, dtype=None) -> "WeightContainer":
        dt = np.dtype(dtype) if dtype is not None else model.dtype
        arrays = {k: np.asarray(model.params[k], dtype=dt) for k in param_names(model.arch)}
        meta = {"arch": model.arch.to_dict(), "provenance": model.provenance}
        if model.input_config is not None:
            meta["input_config"] = model.input_config.to_dict()
            if model.input_config.channel_means is not None:
                meta["channel_means"] = list(model.input_config.channel_means)
        return cls(arrays, meta)


def save_container(container: WeightContainer, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    bin_path = path.with_suffix(".bin")
    blob = bytearray()
    lines = [f"format = {FORMAT}", f"version = {VERSION}", f"data_file = {bin_path.name}"]
    entries = []
    for name, a in container.arrays.items():
        key = str(a.dtype)
        if key not in _DTYPES:
            raise ContainerError(f"{name}: unsupported dtype {a.dtype}")
        raw = np.ascontiguousarray(a, dtype=_DTYPES[key]).tobytes()
        shape = ",".join(str(s) for s in a.shape)
        entries.append(f"array.{name} = dtype={key} offset={len(blob)} shape={shape}")
        blob += raw
    lines += [f"data_bytes = {len(blob)}", f"data_sha256 = {hashlib.sha256(blob).hexdigest()}"]
    lines += entries
    lines += [f"meta.{k} = {json.dumps(v, sort_keys=True)}" for k, v in sorted(container.meta.items())]
    bin_path.write_bytes(bytes(blob))
    path.write_text("\n".join(lines) + "\n")
    return path


def load_container(path) -> WeightContainer:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ContainerError(f"cannot read {path}: {e}") from e
    head, arrays_spec, meta = {}, {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ContainerError(f"{path}:{lineno}: expected 'key = value'")
        key, value = key.strip(), value.strip()
        if key.startswith("array."):
            fields = dict(item.split("=", 1) for item in value.split())
            arrays_spec[key[6:]] = fields
        elif key.startswith("meta."):
            meta[key[5:]] = json.loads(value)
        else:
            head[key] = value
    if head.get("format") != FORMAT:
        raise ContainerError(f"{path}: not a {FORMAT} manifest")
    bin_path = path.parent / head["data_file"]
    try:
        blob = bin_path.read_bytes()
    except OSError as e:
        raise ContainerError(f"cannot read {bin_path}: {e}") from e
    if len(blob) != int(head["data_bytes"]) or hashlib.sha256(blob).hexdigest() != head["data_sha256"]:
        raise ChecksumError(f"{bin_path}: checksum mismatch (file truncated or corrupted)")
    arrays = {}
    for name, f in arrays_spec.items():
        dt = np.dtype(_DTYPES[f["dtype"]])
        shape = tuple(int(s) for s in f["shape"].split(",") if s)
        n = int(np.prod(shape, dtype=np.int64))
        off = int(f["offset"])
        arrays[name] = np.frombuffer(blob, dtype=dt, count=n, offset=off).reshape(shape).astype(dt.newbyteorder("="))
    return WeightContainer(arrays, meta)


def export_weights(model: Model, path, dtype=None) -> Path:
    """Write ``model`` to a container at ``path`` (manifest) plus ``path.with_suffix('.bin')``."""
    return save_container(WeightContainer.from_model(model, dtype), path)


def import_weights(source, arch: ArchSpec | None = None) -> Model:
    """Rebuild a model from a container path or object.

    The architecture comes from the manifest unless ``arch`` is given.
    Arrays the architecture does not use are ignored with a warning;
    missing or misshapen arrays are errors.
    """
    from .inputs import InputConfig

    c = source if isinstance(source, WeightContainer) else load_container(source)
    if arch is None:
        if "arch" not in c.meta:
            raise ContainerError("container has no architecture; pass arch explicitly")
        arch = ArchSpec.from_dict(c.meta["arch"])
    names = param_names(arch)
    missing = [n for n in names if n not in c.arrays]
    if missing:
        raise ContainerError(f"container lacks arrays {missing}")
    extras = sorted(set(c.arrays) - set(names))
    if extras:
        warnings.warn(f"ignoring unused arrays in container: {extras}", stacklevel=2)
    params = {n: c.arrays[n].copy() for n in names}
    cfg = InputConfig.from_dict(c.meta["input_config"]) if "input_config" in c.meta else None
    prov = dict(c.meta.get("provenance", {}))
    prov["imported_from"] = c.container_id
    try:
        return Model(arch, params, prov, cfg)
    except ValueError as e:
        raise ContainerError(str(e)) from e
