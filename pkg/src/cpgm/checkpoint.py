"""Single-file model checkpoints.

Layout, all integers little-endian::

    8 bytes   magic b"CPGM0001"
    u32 + n   model kind tag (utf-8)
    u32 + n   config echo (utf-8 JSON, sorted keys)
    u32       number of parameter records
    records   parameters, sorted by name
    u32       number of buffer records
    records   buffers (batch-norm running statistics), sorted by name

A record is ``u32 + n`` name, ``u32`` rank, ``rank x u64`` dimensions and
the float64 values in C order. The same model and config always yield the
same bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from cpgm.aae import AaeConfig, CPGMAae
from cpgm.errors import FormatError
from cpgm.ladder_vae import CPGMVae, VaeConfig

MAGIC = b"CPGM0001"
KINDS = {
    "cpgm_vae": (VaeConfig, CPGMVae),
    "cpgm_aae": (AaeConfig, CPGMAae),
    "variant1": (AaeConfig, CPGMAae),
    "variant2": (AaeConfig, CPGMAae),
}


def _config_json(config):
    return json.dumps(config.to_dict(), sort_keys=True)


def _pack_str(text):
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _pack_array(name, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    out = [_pack_str(name), struct.pack("<I", arr.ndim)]
    out += [struct.pack("<Q", d) for d in arr.shape]
    out.append(arr.tobytes())
    return b"".join(out)


def to_bytes(model):
    chunks = [MAGIC, _pack_str(model.kind), _pack_str(_config_json(model.config))]
    names = sorted(model.params)
    chunks.append(struct.pack("<I", len(names)))
    chunks += [_pack_array(n, model.params[n].data) for n in names]
    names = sorted(model.buffers)
    chunks.append(struct.pack("<I", len(names)))
    chunks += [_pack_array(n, model.buffers[n]) for n in names]
    return b"".join(chunks)


class _Reader:
    def __init__(self, raw):
        self.raw, self.pos = raw, 0

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise FormatError(
                f"truncated checkpoint: {what} needs {n} bytes at offset {self.pos}, "
                f"file has {len(self.raw)}"
            )
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def string(self, what):
        return self.take(self.u32(what), what).decode("utf-8")

    def array(self):
        name = self.string("record name")
        rank = self.u32(f"rank of {name}")
        shape = tuple(struct.unpack("<Q", self.take(8, f"shape of {name}"))[0] for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(self.take(8 * count, f"values of {name}"), dtype="<f8")
        return name, data.reshape(shape).astype(np.float64)


def from_bytes(raw):
    """Rebuild a model from :func:`to_bytes` output."""
    r = _Reader(bytes(raw))
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    kind = r.string("kind tag")
    if kind not in KINDS:
        raise FormatError(f"unknown model kind {kind!r}")
    config_cls, model_cls = KINDS[kind]
    config = config_cls(**json.loads(r.string("config")))
    model = model_cls(config)
    for target, label in ((model.params, "parameter"), (model.buffers, "buffer")):
        count = r.u32(f"{label} count")
        if count != len(target):
            raise FormatError(f"{count} {label} records, model expects {len(target)}")
        for _ in range(count):
            name, arr = r.array()
            if name not in target:
                raise FormatError(f"unexpected {label} {name!r}")
            dest = target[name].data if label == "parameter" else target[name]
            if dest.shape != arr.shape:
                raise FormatError(f"{label} {name!r} has shape {arr.shape}, expected {dest.shape}")
            dest[...] = arr
    if r.pos != len(r.raw):
        raise FormatError(f"{len(r.raw) - r.pos} trailing bytes after offset {r.pos}")
    return model


def save(model, path):
    Path(path).write_bytes(to_bytes(model))


def load(path):
    return from_bytes(Path(path).read_bytes())
