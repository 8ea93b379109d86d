"""Trained-model container: layer chain, config, and float32 parameters.

The file carries everything needed to rebuild a ModelSpec without re-running
the constructor, so folded models (whose layer list differs from the built
one) round-trip too. Little-endian, versioned, strict loads.
"""

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .arch import LayerSpec, ModelSpec, QanaConfig
from .errors import ModelFileError

MAGIC = b"QANA"
VERSION = 1

_TUPLE_FIELDS = ("input_shape", "block_channels")


def _plain(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    return value


def _w_json(out, obj):
    blob = json.dumps({k: _plain(v) for k, v in obj.items()},
                      sort_keys=True).encode("utf-8")
    out.append(struct.pack("<I", len(blob)))
    out.append(blob)


def _w_str(out, s):
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise ModelFileError(f"string too long to serialize ({len(b)} bytes)")
    out.append(struct.pack("<H", len(b)))
    out.append(b)


def save_model(path, model: ModelSpec, params: dict, metadata: dict = None):
    out = [MAGIC, struct.pack("<I", VERSION)]
    _w_json(out, asdict(model.config))
    _w_json(out, metadata or {})
    out.append(struct.pack("<I", len(model.layers)))
    for layer in model.layers:
        _w_str(out, layer.kind)
        _w_str(out, layer.name)
        _w_json(out, layer.meta)
    out.append(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = np.asarray(params[name])
        if arr.dtype != np.float32:
            raise ModelFileError(
                f"parameter {name!r} has dtype {arr.dtype}; model files hold float32")
        _w_str(out, name)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(out))


class _Reader:
    def __init__(self, buf, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise ModelFileError(
                f"{self.path}: truncated (needed {n} bytes at offset "
                f"{self.pos}, have {len(self.buf) - self.pos})")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")

    def json_block(self):
        (n,) = self.unpack("<I")
        raw = self.take(n)
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ModelFileError(f"{self.path}: corrupt JSON block ({exc})") from exc

    def done(self):
        if self.pos != len(self.buf):
            raise ModelFileError(f"{self.path}: {len(self.buf) - self.pos} "
                                 "trailing bytes after the last record")


def load_model(path):
    """Read a model file back as (ModelSpec, params, metadata)."""
    path = Path(path)
    if not path.exists():
        raise ModelFileError(f"model file missing: {path}")
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != MAGIC:
        raise ModelFileError(f"{path}: bad magic, not a model file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise ModelFileError(f"{path}: unsupported model version {version} "
                             f"(this build reads {VERSION})")
    raw_cfg = r.json_block()
    try:
        cfg = QanaConfig(**{k: tuple(v) if k in _TUPLE_FIELDS else v
                            for k, v in raw_cfg.items()})
    except TypeError as exc:
        raise ModelFileError(f"{path}: config block does not describe a "
                             f"network ({exc})") from exc
    metadata = r.json_block()
    (n_layers,) = r.unpack("<I")
    layers = []
    for _ in range(n_layers):
        kind = r.string()
        name = r.string()
        layers.append(LayerSpec(kind, name, r.json_block()))
    (n_params,) = r.unpack("<I")
    params = {}
    for _ in range(n_params):
        name = r.string()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw = r.take(count * 4)
        params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    r.done()
    return ModelSpec(cfg, layers), params, metadata
