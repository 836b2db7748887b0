"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"PNDCKPT\\0"
    u32       format version (1)
    4 bytes   endianness tag b"LE\\0\\0"
    u64       header length H
    H bytes   UTF-8 JSON header, keys sorted:
              {"config": ..., "param_count": N, "arrays": [{"name", "dtype", "shape"}, ...],
               "meta": {...}}
    ...       raw little-endian array data, concatenated in header order

Model parameters come first, in ``state_dict`` registration order, followed
by any extra arrays (optimizer moments) the caller supplies.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np
import torch

from .denoiser import Denoiser, DenoiserConfig

MAGIC = b"PNDCKPT\x00"
VERSION = 1
ENDIAN_TAG = b"LE\x00\x00"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4", "uint8": "u1"}


class CheckpointError(ValueError):
    pass


def _dumps_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_arrays(fh: BinaryIO, magic: bytes, header: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    header = dict(header)
    header["arrays"] = [{"name": n, "dtype": str(a.dtype), "shape": list(a.shape)} for n, a in arrays]
    blob = _dumps_json(header)
    fh.write(magic + struct.pack("<I", VERSION) + ENDIAN_TAG + struct.pack("<Q", len(blob)) + blob)
    for name, a in arrays:
        if str(a.dtype) not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {a.dtype} for {name}")
        fh.write(np.ascontiguousarray(a, dtype=_DTYPES[str(a.dtype)]).tobytes())


def read_arrays(fh: BinaryIO, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    head = fh.read(len(magic) + 16)
    if len(head) < len(magic) + 16 or head[: len(magic)] != magic:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = struct.unpack("<I", head[len(magic) : len(magic) + 4])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if head[len(magic) + 4 : len(magic) + 8] != ENDIAN_TAG:
        raise CheckpointError("unexpected endianness tag")
    (n,) = struct.unpack("<Q", head[len(magic) + 8 :])
    header = json.loads(fh.read(n).decode("utf-8"))
    arrays = {}
    for spec in header["arrays"]:
        dt = np.dtype(_DTYPES[spec["dtype"]])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        raw = fh.read(count * dt.itemsize)
        if len(raw) != count * dt.itemsize:
            raise CheckpointError(f"truncated data for {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(raw, dtype=dt).astype(spec["dtype"]).reshape(spec["shape"])
    return header, arrays


def model_arrays(model: Denoiser) -> list[tuple[str, np.ndarray]]:
    return [(k, v.detach().cpu().numpy()) for k, v in model.state_dict().items()]


def save_checkpoint(
    target: str | Path | BinaryIO,
    model: Denoiser,
    meta: dict | None = None,
    extra: list[tuple[str, np.ndarray]] | None = None,
) -> bytes:
    """Serialize ``model`` (plus optional metadata and arrays); returns the bytes written."""
    buf = io.BytesIO()
    header = {"config": model.cfg.to_dict(), "param_count": model.param_count(), "meta": meta or {}}
    write_arrays(buf, MAGIC, header, model_arrays(model) + list(extra or []))
    data = buf.getvalue()
    if isinstance(target, (str, Path)):
        Path(target).write_bytes(data)
    else:
        target.write(data)
    return data


def load_checkpoint(
    source: str | Path | BinaryIO | bytes, config: DenoiserConfig | None = None
) -> tuple[Denoiser, dict, dict[str, np.ndarray]]:
    """Rebuild a model; returns ``(model, meta, extra_arrays)``.

    A ``config`` that disagrees with the echoed one raises :class:`CheckpointError`.
    """
    if isinstance(source, (bytes, bytearray)):
        fh = io.BytesIO(source)
    elif isinstance(source, (str, Path)):
        fh = io.BytesIO(Path(source).read_bytes())
    else:
        fh = source
    header, arrays = read_arrays(fh, MAGIC)
    stored = DenoiserConfig.from_dict(header["config"])
    if config is not None and config != stored:
        raise CheckpointError(f"checkpoint config {stored} does not match requested {config}")
    model = Denoiser(stored)
    state = model.state_dict()
    if model.param_count() != header["param_count"]:
        raise CheckpointError("parameter count mismatch between header and config")
    dtype = None
    loaded = {}
    for name, ref in state.items():
        if name not in arrays:
            raise CheckpointError(f"missing parameter {name}")
        a = arrays.pop(name)
        if tuple(a.shape) != tuple(ref.shape):
            raise CheckpointError(f"shape mismatch for {name}: {a.shape} vs {tuple(ref.shape)}")
        loaded[name] = torch.from_numpy(a.copy())
        dtype = dtype or loaded[name].dtype
    if dtype is not None and dtype != torch.float32:
        model = model.to(dtype)
    model.load_state_dict(loaded)
    return model, header.get("meta", {}), arrays
