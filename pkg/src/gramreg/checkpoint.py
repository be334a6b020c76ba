"""Binary checkpoints of a NetworkState.

Layout (all integers little-endian)::

    b"GRAMREG1"  magic
    u8           format version (1)
    u8           precision: 4 = single, 8 = double
    u32          block count
    blocks:
        u16 name length, utf-8 name
        u8  kind: 0 = float array, 1 = utf-8 text
        u8  ndim, then ndim x u32 extents          (float arrays only)
        u64 payload length, payload bytes          (IEEE-754 LE for arrays)

Blocks are ``param/<name>``, ``momentum/<name>`` and one ``meta`` text block
holding the network spec, epoch counter and RNG state as JSON.
"""

import json
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"GRAMREG1"
VERSION = 1
_PRECISION_BYTE = {"single": 4, "double": 8}
_BYTE_PRECISION = {v: k for k, v in _PRECISION_BYTE.items()}


def _encode_array(name, arr, dtype):
    arr = np.ascontiguousarray(arr, dtype=dtype.newbyteorder("<"))
    nb = name.encode("utf-8")
    out = [struct.pack("<H", len(nb)), nb, struct.pack("<BB", 0, arr.ndim)]
    out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    payload = arr.tobytes()
    out.append(struct.pack("<Q", len(payload)))
    out.append(payload)
    return b"".join(out)


def _encode_text(name, text):
    nb = name.encode("utf-8")
    payload = text.encode("utf-8")
    return b"".join([struct.pack("<H", len(nb)), nb, struct.pack("<B", 1), struct.pack("<Q", len(payload)), payload])


def dumps(state):
    from .tensor import precision_of

    precision = precision_of(state.net.dtype)
    dtype = np.dtype(state.net.dtype)
    blocks = [_encode_text("meta", json.dumps(state.meta(), sort_keys=True))]
    for name, p in state.net.named_params().items():
        blocks.append(_encode_array(f"param/{name}", p, dtype))
    for name, v in state.velocity.items():
        blocks.append(_encode_array(f"momentum/{name}", v, dtype))
    header = MAGIC + struct.pack("<BBI", VERSION, _PRECISION_BYTE[precision], len(blocks))
    return header + b"".join(blocks)


class _Reader:
    def __init__(self, data, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse(data, path="<bytes>"):
    """Decode checkpoint bytes into ``(precision, meta, params, momentum)``."""
    r = _Reader(data, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, pbyte, count = r.unpack("<BBI")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if pbyte not in _BYTE_PRECISION:
        raise FormatError(f"{path}: unknown precision byte {pbyte}")
    precision = _BYTE_PRECISION[pbyte]
    dtype = np.dtype(np.float32 if precision == "single" else np.float64).newbyteorder("<")
    meta, params, momentum = None, {}, {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (kind,) = r.unpack("<B")
        if kind == 1:
            (plen,) = r.unpack("<Q")
            text = r.take(plen).decode("utf-8")
            if name == "meta":
                meta = json.loads(text)
            continue
        if kind != 0:
            raise FormatError(f"{path}: unknown block kind {kind} in {name!r}")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        (plen,) = r.unpack("<Q")
        if plen != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise FormatError(f"{path}: block {name!r} has inconsistent length")
        arr = np.frombuffer(r.take(plen), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        section, _, key = name.partition("/")
        if section == "param":
            params[key] = arr
        elif section == "momentum":
            momentum[key] = arr
        else:
            raise FormatError(f"{path}: unknown block {name!r}")
    if r.pos != len(data):
        raise FormatError(f"{path}: trailing bytes after last block")
    if meta is None:
        raise FormatError(f"{path}: missing meta block")
    return precision, meta, params, momentum


def save_checkpoint(state, path):
    with open(path, "wb") as fh:
        fh.write(dumps(state))


def load_checkpoint(path, precision=None):
    """Load a NetworkState; ``precision`` (if given) must match the file's exactly."""
    from .train import NetworkState

    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise FormatError(f"{path}: cannot read checkpoint ({e.strerror})") from None
    file_precision, meta, params, momentum = parse(data, path)
    if precision is not None and precision != file_precision:
        raise FormatError(
            f"{path}: checkpoint precision is {file_precision}, run expects {precision}; refusing to cast"
        )
    return NetworkState.from_parts(file_precision, meta, params, momentum, path)
