"""Flat keyed parameter storage and its binary file format.

Per-key metadata is derived from the last path segment of the key so that
it survives the binary round trip without a side file:

* ``running_mean`` / ``running_var`` / ``fixed*`` -- not trainable
* ``eta`` / ``alpha*`` -- trainable, excluded from weight decay
* anything else -- trainable with weight decay
"""

from __future__ import annotations

import struct
from typing import Iterator, Mapping

import numpy as np

from .errors import SerializationError

MAGIC = b"PTRDSH01"
_MAGIC_PREFIX = b"PTRDSH"


def _leaf(key: str) -> str:
    return key.rsplit("/", 1)[-1]


def is_trainable_key(key: str) -> bool:
    leaf = _leaf(key)
    return not (leaf in ("running_mean", "running_var") or leaf.startswith("fixed"))


def is_decayed_key(key: str) -> bool:
    leaf = _leaf(key)
    return is_trainable_key(key) and not (leaf == "eta" or leaf.startswith("alpha"))


class ParameterStore:
    """Mapping from string key to float64 arrays.

    Arrays are treated as immutable: updates replace the entry, so copies
    are shallow and cheap.
    """

    def __init__(self, entries: Mapping[str, np.ndarray] | None = None):
        self._values: dict[str, np.ndarray] = {}
        for k, v in (entries or {}).items():
            self[k] = v

    def __getitem__(self, key) -> np.ndarray:
        return self._values[key]

    def __setitem__(self, key, value):
        arr = np.array(value, dtype=np.float64)
        arr.setflags(write=False)
        self._values[key] = arr

    def __delitem__(self, key):
        del self._values[key]

    def __contains__(self, key):
        return key in self._values

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def keys(self):
        return self._values.keys()

    def items(self):
        return self._values.items()

    def get(self, key, default=None):
        return self._values.get(key, default)

    def copy(self) -> "ParameterStore":
        new = ParameterStore()
        new._values = dict(self._values)
        return new

    def trainable(self, key) -> bool:
        return is_trainable_key(key)

    def decays(self, key) -> bool:
        return is_decayed_key(key)

    @property
    def metadata(self) -> dict[str, dict[str, bool]]:
        return {k: {"trainable": is_trainable_key(k), "decay": is_decayed_key(k)} for k in self._values}

    def trainable_keys(self) -> list[str]:
        return [k for k in self._values if is_trainable_key(k)]

    def count(self) -> int:
        """Total number of scalars stored."""
        return int(sum(v.size for v in self._values.values()))

    def subset(self, keys) -> "ParameterStore":
        new = ParameterStore()
        new._values = {k: self._values[k] for k in keys}
        return new

    # -- binary format ---------------------------------------------------

    def to_bytes(self) -> bytes:
        out = [MAGIC]
        for key in sorted(self._values):
            arr = self._values[key]
            kb = key.encode("utf-8")
            out.append(struct.pack("<I", len(kb)))
            out.append(kb)
            out.append(struct.pack("<I", arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParameterStore":
        if len(data) < len(MAGIC):
            raise SerializationError("truncated payload: missing header")
        head = data[: len(MAGIC)]
        if head != MAGIC:
            if head.startswith(_MAGIC_PREFIX):
                raise SerializationError(f"unsupported parameter file version {head.decode('ascii', 'replace')!r}")
            raise SerializationError("bad magic: not a parameter file")
        pos = len(MAGIC)
        entries = {}

        def take(n):
            nonlocal pos
            if pos + n > len(data):
                raise SerializationError("truncated payload")
            chunk = data[pos: pos + n]
            pos += n
            return chunk

        while pos < len(data):
            (klen,) = struct.unpack("<I", take(4))
            try:
                key = take(klen).decode("utf-8")
            except UnicodeDecodeError as exc:
                raise SerializationError("corrupt key encoding") from exc
            (rank,) = struct.unpack("<I", take(4))
            dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if rank else 1
            payload = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims)
            entries[key] = payload.astype(np.float64)
        return cls(entries)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParameterStore":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
