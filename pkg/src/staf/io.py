"""Binary and JSON containers for signals, ensembles and measurements.

Binary layout::

    b"STAF1\\n" | uint32 little-endian header length | UTF-8 JSON header | payload

The header holds ``{kind, field, m, n, sigma, seed}``; the payload is row-major
little-endian float64, with complex entries interleaved as (re, im).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .core import Field, MeasurementSet, SensingEnsemble, Signal

MAGIC = b"STAF1\n"


def _header_and_data(obj) -> tuple[dict, np.ndarray]:
    if isinstance(obj, Signal):
        return ({"kind": "signal", "field": obj.field.value, "m": 1, "n": obj.n,
                 "sigma": 0.0, "seed": None}, obj.entries)
    if isinstance(obj, SensingEnsemble):
        return ({"kind": "ensemble", "field": obj.field.value, "m": obj.m, "n": obj.n,
                 "sigma": 0.0, "seed": None}, obj.rows)
    if isinstance(obj, MeasurementSet):
        return ({"kind": "measurements", "field": Field.REAL.value, "m": obj.m, "n": 1,
                 "sigma": obj.noise_sigma, "seed": obj.seed_meta}, obj.psi)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _flat(data: np.ndarray) -> np.ndarray:
    data = np.ascontiguousarray(data)
    if np.iscomplexobj(data):
        return data.astype("<c16").view("<f8").ravel()
    return data.astype("<f8").ravel()


def _build(header: dict, flat: np.ndarray):
    fld = Field(header["field"])
    if fld is Field.COMPLEX:
        flat = np.ascontiguousarray(flat, dtype="<f8").view("<c16")
    kind = header["kind"]
    if kind == "signal":
        return Signal(flat.reshape(header["n"]))
    if kind == "ensemble":
        return SensingEnsemble(flat.reshape(header["m"], header["n"]))
    if kind == "measurements":
        return MeasurementSet(flat.reshape(header["m"]), float(header["sigma"]),
                              header.get("seed") or {})
    raise ValueError(f"unknown container kind {kind!r}")


def save_binary(obj, path) -> None:
    header, data = _header_and_data(obj)
    raw = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(_flat(data).tobytes())


def load_binary(path):
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise ValueError(f"{path}: not a STAF container")
    off = len(MAGIC)
    (hlen,) = struct.unpack_from("<I", buf, off)
    off += 4
    header = json.loads(buf[off:off + hlen].decode("utf-8"))
    flat = np.frombuffer(buf, dtype="<f8", offset=off + hlen).copy()
    return _build(header, flat)


def to_json(obj) -> str:
    header, data = _header_and_data(obj)
    header["data"] = _flat(data).tolist()
    return json.dumps(header)


def from_json(text: str):
    header = json.loads(text)
    return _build(header, np.asarray(header.pop("data"), dtype=np.float64))
