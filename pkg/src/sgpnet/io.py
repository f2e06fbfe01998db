"""File formats: SGT tensors, 8-bit PGM maps, parameter checkpoints."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autograd import Param

_DTYPES = {"f32": "<f4", "f64": "<f8"}


class FormatError(ValueError):
    pass


def write_sgt(path, array, dtype: str = "f32") -> None:
    """JSON header line, then raw little-endian row-major values."""
    if dtype not in _DTYPES:
        raise FormatError(f"unsupported dtype {dtype!r}")
    a = np.array(array, dtype=np.float64, order="C")  # keeps 0-d shapes
    header = {"shape": list(a.shape), "dtype": dtype, "order": "row-major"}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(a.astype(_DTYPES[dtype]).tobytes())


def read_sgt(path) -> np.ndarray:
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: bad SGT header") from exc
        if header.get("order", "row-major") != "row-major":
            raise FormatError(f"{path}: only row-major order is supported")
        dt = _DTYPES.get(header.get("dtype"))
        if dt is None:
            raise FormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
        shape = tuple(int(s) for s in header["shape"])
        data = np.frombuffer(fh.read(), dtype=dt)
    if data.size != int(np.prod(shape)):
        raise FormatError(f"{path}: {data.size} values for shape {shape}")
    return data.astype(np.float64).reshape(shape)


def to_uint8(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    lo, hi = float(m.min()), float(m.max())
    if hi <= lo:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.round((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, m) -> None:
    """Binary P5 greyscale, min-max normalised to 0..255."""
    img = to_uint8(m)
    if img.ndim != 2:
        raise FormatError(f"PGM needs a 2-D map, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise FormatError(f"{path}: not a P5 PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def save_checkpoint(params, directory) -> None:
    """One f64 SGT per parameter plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = []
    for p in params:
        fname = p.name + ".sgt"
        write_sgt(d / fname, p.value, dtype="f64")
        manifest.append({"name": p.name, "shape": list(p.value.shape), "frozen": p.frozen,
                         "file": fname})
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_checkpoint(params, directory) -> None:
    """Overwrite ``params`` in place from a checkpoint directory."""
    d = Path(directory)
    manifest = {e["name"]: e for e in json.loads((d / "manifest.json").read_text())}
    for p in params:
        if p.name not in manifest:
            raise FormatError(f"checkpoint lacks parameter {p.name!r}")
        entry = manifest[p.name]
        value = read_sgt(d / entry["file"])
        if value.shape != p.value.shape:
            raise FormatError(f"{p.name}: checkpoint shape {value.shape} != {p.value.shape}")
        p.value[...] = value
        p.frozen = bool(entry.get("frozen", False))
        p.requires_grad = not p.frozen


def read_checkpoint(directory) -> dict[str, Param]:
    d = Path(directory)
    out = {}
    for e in json.loads((d / "manifest.json").read_text()):
        out[e["name"]] = Param(e["name"], read_sgt(d / e["file"]), frozen=e["frozen"])
    return out
