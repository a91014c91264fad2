"""Binary checkpoint format for model parameters.

Layout (little-endian): magic ``VILCKPT1``, 32-byte sha256 digest of the
canonical config JSON, uint32 entry count, then per entry uint32 name
length, UTF-8 name, uint32 rank, ``rank`` uint32 extents and the float32
payload in C order.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError

MAGIC = b"VILCKPT1"


def config_digest(config: dict) -> bytes:
    return hashlib.sha256(json.dumps(config, sort_keys=True, separators=(",", ":")).encode()).digest()


def _model_arrays(model) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in model.named_parameters()}


def save_arrays(path, arrays: dict[str, np.ndarray], config: dict) -> None:
    """Write ``arrays`` atomically (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, config_digest(config), struct.pack("<I", len(arrays))]
    for name, a in arrays.items():
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        chunks.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_arrays(path) -> tuple[bytes, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ConfigError(f"{path}: not a VILCKPT1 checkpoint")
    digest = buf[8:40]
    (count,) = struct.unpack_from("<I", buf, 40)
    off = 44
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            name = buf[off + 4:off + 4 + n].decode()
            off += 4 + n
            (rank,) = struct.unpack_from("<I", buf, off)
            shape = struct.unpack_from(f"<{rank}I", buf, off + 4)
            off += 4 + 4 * rank
            size = int(np.prod(shape, dtype=np.int64)) * 4
            if off + size > len(buf):
                raise ConfigError(f"{path}: truncated payload for {name}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=off).reshape(shape).copy()
            off += size
    except struct.error as e:
        raise ConfigError(f"{path}: truncated checkpoint ({e})") from None
    if off != len(buf):
        raise ConfigError(f"{path}: {len(buf) - off} trailing bytes")
    return digest, out


def save_checkpoint(model, path) -> None:
    save_arrays(path, _model_arrays(model), model.cfg.to_dict())


def load_checkpoint(model, path, strict_config: bool = True) -> None:
    """Copy parameters from ``path`` into ``model`` (cast to the model's dtype)."""
    digest, arrays = load_arrays(path)
    if strict_config and digest != config_digest(model.cfg.to_dict()):
        raise ConfigError(f"{path}: checkpoint was written for a different model config")
    names = dict(model.named_parameters())
    if set(arrays) != set(names):
        missing, extra = sorted(set(names) - set(arrays)), sorted(set(arrays) - set(names))
        raise ConfigError(f"{path}: parameter names differ (missing {missing[:3]}, unexpected {extra[:3]})")
    for k, a in arrays.items():
        t = names[k]
        if a.shape != t.shape:
            raise DimensionError(f"{k}: checkpoint shape {a.shape} vs model {t.shape}")
        t.data = a.astype(t.dtype)
        t.grad = None
