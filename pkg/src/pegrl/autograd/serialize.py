"""Versioned binary checkpoint file for network parameters.

Layout (little-endian throughout):
    magic   6 bytes  b"PEGRL\\0"
    version u32
    tag     u16 length + utf-8 bytes   (model variant tag)
    count   u32
    per parameter:
        name   u16 length + utf-8 bytes
        ndim   u8, then ndim x u32 extents
        offset u64   (bytes from the start of the payload)
    payload: raw float32 values, parameters in manifest order
"""

import struct
from collections import OrderedDict

import numpy as np

from pegrl.errors import FormatError

MAGIC = b"PEGRL\0"
VERSION = 1


def save_checkpoint(path, variant_tag, params):
    """Write named parameters; params is an iterable of objects with
    .name/.data or an OrderedDict name -> ndarray."""
    if isinstance(params, dict):
        items = list(params.items())
    else:
        items = [(p.name, p.data) for p in params]

    header = bytearray()
    header += MAGIC
    header += struct.pack("<I", VERSION)
    tag = variant_tag.encode()
    header += struct.pack("<H", len(tag)) + tag
    header += struct.pack("<I", len(items))
    payload = bytearray()
    for name, arr in items:
        arr32 = np.ascontiguousarray(arr, dtype=np.float32)
        nb = name.encode()
        header += struct.pack("<H", len(nb)) + nb
        header += struct.pack("<B", arr32.ndim)
        header += struct.pack(f"<{arr32.ndim}I", *arr32.shape)
        header += struct.pack("<Q", len(payload))
        payload += arr32.tobytes()
    with open(path, "wb") as f:
        f.write(bytes(header) + bytes(payload))


def load_checkpoint(path):
    """Read a checkpoint back; returns (variant_tag, OrderedDict name -> float32 array)."""
    with open(path, "rb") as f:
        raw = f.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(raw):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=off)
        piece = raw[off:off + n]
        off += n
        return piece

    if take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=6)
    (tlen,) = struct.unpack("<H", take(2, "tag length"))
    tag = take(tlen, "tag").decode()
    (count,) = struct.unpack("<I", take(4, "parameter count"))
    manifest = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode()
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        (p_off,) = struct.unpack("<Q", take(8, "offset"))
        manifest.append((name, shape, p_off))
    payload_start = off
    params = OrderedDict()
    for name, shape, p_off in manifest:
        n_bytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        start = payload_start + p_off
        if start + n_bytes > len(raw):
            raise FormatError(f"truncated payload for parameter {name!r}", offset=start)
        arr = np.frombuffer(raw, dtype="<f4", count=n_bytes // 4, offset=start)
        params[name] = arr.reshape(shape).copy()
    return tag, params


def assign_parameters(params, loaded):
    """Copy loaded arrays into Parameter objects by name."""
    for p in params:
        if p.name not in loaded:
            raise FormatError(f"checkpoint is missing parameter {p.name!r}")
        arr = loaded[p.name]
        if arr.shape != p.data.shape:
            raise FormatError(
                f"checkpoint parameter {p.name!r} has shape {arr.shape}, expected {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
