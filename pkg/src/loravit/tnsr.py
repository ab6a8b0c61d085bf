"""Binary tensor serialization.

TNSR blob layout: magic bytes 54 4E 53 52, u8 dtype code (0 = float32,
1 = float64), u8 ndim, ndim x u64 little-endian dimensions, then the
row-major little-endian payload.

Checkpoint container layout: u32 entry count, then per entry a u16 name
length, the UTF-8 name bytes, and one TNSR blob.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ParseError
from .autograd import Tensor

MAGIC = b"TNSR"

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def encode_tensor(t: Tensor) -> bytes:
    data = np.ascontiguousarray(t.data)
    code = _DTYPE_CODES[data.dtype]
    header = MAGIC + struct.pack("<BB", code, data.ndim)
    dims = struct.pack(f"<{data.ndim}Q", *data.shape) if data.ndim else b""
    payload = data.astype(_CODE_DTYPES[code], copy=False).tobytes(order="C")
    return header + dims + payload


def decode_tensor(buf: bytes, offset: int = 0):
    """Decode one TNSR blob at ``offset``; returns (tensor, next_offset)."""
    if len(buf) < offset + 6:
        raise ParseError("truncated TNSR header", offset=offset)
    if buf[offset:offset + 4] != MAGIC:
        raise ParseError("bad TNSR magic", offset=offset)
    code, ndim = struct.unpack_from("<BB", buf, offset + 4)
    if code not in _CODE_DTYPES:
        raise ParseError(f"unknown TNSR dtype code {code}", offset=offset + 4)
    pos = offset + 6
    if len(buf) < pos + 8 * ndim:
        raise ParseError("truncated TNSR dimension list", offset=pos)
    shape = struct.unpack_from(f"<{ndim}Q", buf, pos) if ndim else ()
    pos += 8 * ndim
    dtype = _CODE_DTYPES[code]
    count = 1
    for s in shape:
        count *= s
    nbytes = count * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise ParseError("truncated TNSR payload", offset=pos)
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(shape)
    native = np.dtype(np.float32) if code == 0 else np.dtype(np.float64)
    return Tensor(arr.astype(native, copy=True)), pos + nbytes


def write_tensor(path, t: Tensor):
    with open(path, "wb") as fh:
        fh.write(encode_tensor(t))


def read_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        buf = fh.read()
    tensor, end = decode_tensor(buf)
    if end != len(buf):
        raise ParseError("trailing bytes after TNSR payload", offset=end)
    return tensor


def write_container(path, entries):
    """Write named tensors; ``entries`` is an ordered (name -> Tensor) map."""
    chunks = [struct.pack("<I", len(entries))]
    for name, tensor in entries.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ParseError(f"entry name too long: {name!r}")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(encode_tensor(tensor))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_container(path):
    """Read a checkpoint container back into an ordered name->Tensor dict."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4:
        raise ParseError("truncated container header", offset=0)
    (count,) = struct.unpack_from("<I", buf, 0)
    pos = 4
    entries: dict[str, Tensor] = {}
    for _ in range(count):
        if len(buf) < pos + 2:
            raise ParseError("truncated entry name length", offset=pos)
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if len(buf) < pos + name_len:
            raise ParseError("truncated entry name", offset=pos)
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        if name in entries:
            raise ParseError(f"duplicate entry name {name!r}", offset=pos)
        tensor, pos = decode_tensor(buf, pos)
        entries[name] = tensor
    if pos != len(buf):
        raise ParseError("trailing bytes after last entry", offset=pos)
    return entries
