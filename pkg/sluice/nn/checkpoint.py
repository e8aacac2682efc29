"""FFDC1 checkpoint files

layout: magic, little-endian u64 header length, UTF-8 JSON header
(metadata + ordered parameter manifest of name/shape/offset), then the
parameter arrays as little-endian float64, in manifest order.
"""
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..constants import CHECKPOINT_MAGIC
from ..exceptions import ConfigurationError
from .layers import ParamStore

_LEN = struct.Struct("<Q")
_DTYPE = np.dtype("<f8")


@dataclass
class Checkpoint:
    meta: dict = field(default_factory=dict)
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_store(cls, store: ParamStore, meta: dict) -> "Checkpoint":
        return cls(dict(meta), {k: v.copy() for k, v in store.arrays().items()})

    def to_bytes(self) -> bytes:
        manifest, offset = [], 0
        for name, arr in self.arrays.items():
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size * _DTYPE.itemsize
        header = json.dumps(
            {"meta": self.meta, "params": manifest},
            sort_keys=True,
            separators=(",", ":"),
        ).encode("utf-8")
        body = b"".join(
            np.ascontiguousarray(a, dtype=_DTYPE).tobytes()
            for a in self.arrays.values()
        )
        return CHECKPOINT_MAGIC + _LEN.pack(len(header)) + header + body

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if not buf.startswith(CHECKPOINT_MAGIC):
            raise ConfigurationError("not an FFDC1 checkpoint")
        start = len(CHECKPOINT_MAGIC)
        (hlen,) = _LEN.unpack_from(buf, start)
        start += _LEN.size
        header = json.loads(buf[start : start + hlen].decode("utf-8"))
        data_start = start + hlen
        arrays = {}
        for entry in header["params"]:
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            arr = np.frombuffer(
                buf, dtype=_DTYPE, count=count, offset=data_start + entry["offset"]
            )
            arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
        return cls(header["meta"], arrays)

    def save(self, path: Path) -> Path:
        Path(path).write_bytes(self.to_bytes())
        return Path(path)

    @classmethod
    def load(cls, path: Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
