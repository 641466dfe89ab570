"""Binary container shared by checkpoints and prior-bank files.

Layout::

    b"PPEFT1\\n"
    b"<header byte length>\\n"
    header: UTF-8, one JSON object per line, in payload order
    payload: little-endian float32 tensors, concatenated
    CRC32 of the payload, 4 bytes little-endian

Header lines are ``{"kind": "tensor", "name", "shape", "dtype", "trainable"}``,
``{"kind": "strings", "name", "values"}`` or ``{"kind": "field", "name", "value"}``.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PPEFT1\n"


class ContainerError(ValueError):
    pass


@dataclass
class Container:
    tensors: dict = field(default_factory=dict)  # name -> (array, trainable)
    strings: dict = field(default_factory=dict)  # name -> list[str]
    fields: dict = field(default_factory=dict)  # name -> str

    def add_tensor(self, name, array, trainable=False):
        if name in self.tensors:
            raise ContainerError(f"duplicate tensor {name!r}")
        self.tensors[name] = (np.asarray(array, dtype=np.float32), bool(trainable))

    def array(self, name) -> np.ndarray:
        return self.tensors[name][0]


def dumps(c: Container) -> bytes:
    header, payload = [], []
    for name, (arr, trainable) in c.tensors.items():
        header.append({"kind": "tensor", "name": name, "shape": list(arr.shape),
                       "dtype": "f32", "trainable": trainable})
        payload.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    for name, values in c.strings.items():
        header.append({"kind": "strings", "name": name, "values": list(values)})
    for name, value in c.fields.items():
        header.append({"kind": "field", "name": name, "value": str(value)})
    head = "".join(json.dumps(h, sort_keys=True, ensure_ascii=False) + "\n" for h in header).encode()
    body = b"".join(payload)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    return MAGIC + f"{len(head)}\n".encode() + head + body + crc.to_bytes(4, "little")


def loads(raw: bytes) -> Container:
    if not raw.startswith(MAGIC):
        raise ContainerError("bad magic")
    try:
        return _parse(raw)
    except ContainerError:
        raise
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as e:
        raise ContainerError(f"malformed container: {e}") from None


def _parse(raw: bytes) -> Container:
    pos = len(MAGIC)
    nl = raw.index(b"\n", pos)
    hlen = int(raw[pos:nl])
    if len(raw) < nl + 1 + hlen + 4:
        raise ContainerError("truncated container")
    head = raw[nl + 1 : nl + 1 + hlen].decode()
    body = raw[nl + 1 + hlen : -4]
    crc = int.from_bytes(raw[-4:], "little")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ContainerError("CRC mismatch: payload corrupted")
    c = Container()
    off = 0
    for line in head.splitlines():
        h = json.loads(line)
        if h["kind"] == "tensor":
            if h["dtype"] != "f32":
                raise ContainerError(f"unsupported dtype {h['dtype']}")
            n = int(np.prod(h["shape"], dtype=np.int64))
            arr = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(h["shape"])
            off += 4 * n
            c.tensors[h["name"]] = (arr.astype(np.float32), bool(h["trainable"]))
        elif h["kind"] == "strings":
            c.strings[h["name"]] = list(h["values"])
        elif h["kind"] == "field":
            c.fields[h["name"]] = h["value"]
        else:
            raise ContainerError(f"unknown header kind {h['kind']!r}")
    if off != len(body):
        raise ContainerError("payload length does not match header")
    return c


def save(path, c: Container) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(c))
    return path


def load(path) -> Container:
    return loads(Path(path).read_bytes())
