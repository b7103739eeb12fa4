"""Named parameter registry and its binary file format.

File layout (little-endian)::

    magic   b"KGPS"
    version u32
    count   u32
    count x { name_len u16, name utf-8, rows u32, cols u32, rows*cols f64 }

Records are written in insertion order.
"""

import struct

import numpy as np

from .tensor import Tensor

MAGIC = b"KGPS"
VERSION = 1


class ConfigurationError(KeyError):
    pass


class ParameterFormatError(ValueError):
    pass


def uniform_init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class ParameterStore:
    def __init__(self):
        self._entries = {}

    def __contains__(self, name):
        return name in self._entries

    def __getitem__(self, name):
        try:
            return self._entries[name]
        except KeyError:
            raise ConfigurationError(f"missing parameter {name!r}") from None

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def names(self, prefix=""):
        return [n for n in self._entries if n.startswith(prefix)]

    def items(self):
        return self._entries.items()

    def add(self, name, value):
        if name in self._entries:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        if not np.all(np.isfinite(t.data)):
            raise ValueError(f"parameter {name!r} has non-finite entries")
        self._entries[name] = t
        return t

    def replace(self, name, value):
        """Swap in a new value (possibly of a new shape), keeping the slot order."""
        t = Tensor(value, requires_grad=True, name=name)
        if name not in self._entries:
            raise ConfigurationError(f"missing parameter {name!r}")
        self._entries[name] = t
        return t

    def zero_grad(self):
        for t in self._entries.values():
            t.zero_grad()

    def copy(self):
        out = ParameterStore()
        for name, t in self._entries.items():
            out.add(name, t.data.copy())
        return out

    def snapshot(self, prefix=""):
        return {n: t.data.copy() for n, t in self._entries.items() if n.startswith(prefix)}

    def to_bytes(self):
        chunks = [MAGIC, struct.pack("<II", VERSION, len(self._entries))]
        for name, t in self._entries.items():
            raw = name.encode("utf-8")
            chunks.append(struct.pack("<H", len(raw)))
            chunks.append(raw)
            chunks.append(struct.pack("<II", *t.shape))
            chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob):
        if blob[:4] != MAGIC:
            raise ParameterFormatError("not a parameter file (bad magic)")
        try:
            version, count = struct.unpack_from("<II", blob, 4)
            if version != VERSION:
                raise ParameterFormatError(f"unsupported parameter file version {version}")
            pos = 12
            store = cls()
            for _ in range(count):
                (nlen,) = struct.unpack_from("<H", blob, pos)
                pos += 2
                name = blob[pos:pos + nlen].decode("utf-8")
                pos += nlen
                rows, cols = struct.unpack_from("<II", blob, pos)
                pos += 8
                nbytes = 8 * rows * cols
                if pos + nbytes > len(blob):
                    raise ParameterFormatError(f"truncated record {name!r}")
                data = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=pos)
                pos += nbytes
                store.add(name, data.reshape(rows, cols).astype(np.float64))
        except struct.error as exc:
            raise ParameterFormatError(f"truncated parameter file: {exc}") from None
        if pos != len(blob):
            raise ParameterFormatError("trailing bytes after last record")
        return store

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
