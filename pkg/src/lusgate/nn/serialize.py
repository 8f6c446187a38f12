"""Versioned single-file model container.

Layout (all text lines are UTF-8, ``\\n`` terminated)::

    lusgate-model v1
    spec-hash <16 hex>
    spec-bytes <n>
    <n bytes of canonical spec text>
    meta <json>
    arrays <count>
    array <layer> <slot> <dtype> <d0>x<d1>...   followed by raw little-endian data
    ...

Weights round-trip bit-exactly.
"""
from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np

from .engine import ModelParams, param_shapes
from .spec import parse_spec

MAGIC = "lusgate-model v1"


class ModelFormatError(ValueError):
    pass


def _readline(buf: io.BytesIO) -> str:
    line = buf.readline()
    if not line.endswith(b"\n"):
        raise ModelFormatError("truncated model file")
    return line[:-1].decode()


def dumps_model(params: ModelParams) -> bytes:
    out = io.BytesIO()
    spec_text = params.spec.canonical().encode()
    out.write(f"{MAGIC}\nspec-hash {params.spec_hash}\nspec-bytes {len(spec_text)}\n".encode())
    out.write(spec_text)
    meta = json.dumps(params.train_meta, sort_keys=True, separators=(",", ":"))
    out.write(f"meta {meta}\n".encode())
    slots = [(i, j, a) for i, w in enumerate(params.weights) for j, a in enumerate(w)]
    out.write(f"arrays {len(slots)}\n".encode())
    for i, j, a in slots:
        dt = a.dtype.newbyteorder("<")
        dims = "x".join(str(d) for d in a.shape)
        out.write(f"array {i} {j} {dt.str} {dims}\n".encode())
        out.write(np.ascontiguousarray(a, dtype=dt).tobytes())
    return out.getvalue()


def loads_model(data: bytes) -> ModelParams:
    try:
        return _loads(data)
    except ModelFormatError:
        raise
    except (ValueError, IndexError, TypeError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"malformed model file: {exc}") from None


def _loads(data: bytes) -> ModelParams:
    buf = io.BytesIO(data)
    head = _readline(buf)
    if head != MAGIC:
        raise ModelFormatError(f"unrecognised model header {head!r}")
    spec_hash = _readline(buf).split(" ", 1)[1]
    n = int(_readline(buf).split(" ", 1)[1])
    spec = parse_spec(buf.read(n).decode())
    if spec.hash() != spec_hash:
        raise ModelFormatError("spec hash does not match spec text")
    meta = json.loads(_readline(buf).split(" ", 1)[1])
    count = int(_readline(buf).split(" ", 1)[1])
    shapes = param_shapes(spec)
    weights: list[list[np.ndarray]] = [[] for _ in shapes]
    for _ in range(count):
        _, i, j, dt, dims = _readline(buf).split(" ")
        shape = tuple(int(d) for d in dims.split("x"))
        dtype = np.dtype(dt)
        nbytes = dtype.itemsize * int(np.prod(shape))
        raw = buf.read(nbytes)
        if len(raw) != nbytes:
            raise ModelFormatError("truncated weight array")
        weights[int(i)].append(np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("=")))
    params = ModelParams(spec, tuple(tuple(w) for w in weights), meta)
    params.validate()
    return params


def save_model(params: ModelParams, path) -> Path:
    path = Path(path)
    path.write_bytes(dumps_model(params))
    return path


def load_model(path) -> ModelParams:
    return loads_model(Path(path).read_bytes())
