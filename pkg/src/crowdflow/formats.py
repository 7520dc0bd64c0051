"""Binary file formats for density maps, segmentation masks and flow fields.

All formats share the same layout: 4 magic bytes, little-endian uint32
height, uint32 width, then row-major little-endian float32 payload.
Density maps (``DMAP``) and masks (``SMSK``) store one float per pixel,
flow files (``FLO2``) store interleaved (u, v) pairs.
"""

import struct

import numpy as np

DENSITY_MAGIC = b"DMAP"
MASK_MAGIC = b"SMSK"
FLOW_MAGIC = b"FLO2"

_HEADER = struct.Struct("<4sII")


class FormatError(ValueError):
    """Raised when a binary file does not conform to its format."""


def _write_grid(path, magic, values):
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 2:
        raise FormatError(f"expected a 2D grid, got shape {values.shape}")
    h, w = values.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(magic, h, w))
        f.write(values.tobytes())


def _read_grid(path, magic):
    with open(path, "rb") as f:
        header = f.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise FormatError(f"{path}: truncated header")
        got_magic, h, w = _HEADER.unpack(header)
        if got_magic != magic:
            raise FormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
        payload = f.read()
    expected = h * w * 4
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).copy()


def write_density(path, values):
    _write_grid(path, DENSITY_MAGIC, values)


def read_density(path):
    return _read_grid(path, DENSITY_MAGIC)


def write_mask(path, values):
    _write_grid(path, MASK_MAGIC, values)


def read_mask(path):
    return _read_grid(path, MASK_MAGIC)


def write_flow(path, u, v):
    """Write a flow field as interleaved (u, v) float32 pairs."""
    u = np.asarray(u, dtype=np.float32)
    v = np.asarray(v, dtype=np.float32)
    if u.ndim != 2 or u.shape != v.shape:
        raise FormatError(f"u/v shape mismatch: {u.shape} vs {v.shape}")
    h, w = u.shape
    interleaved = np.empty((h, w, 2), dtype="<f4")
    interleaved[..., 0] = u
    interleaved[..., 1] = v
    with open(path, "wb") as f:
        f.write(_HEADER.pack(FLOW_MAGIC, h, w))
        f.write(interleaved.tobytes())


def read_flow(path):
    """Read a flow file, returning (u, v) arrays."""
    with open(path, "rb") as f:
        header = f.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise FormatError(f"{path}: truncated header")
        got_magic, h, w = _HEADER.unpack(header)
        if got_magic != FLOW_MAGIC:
            raise FormatError(f"{path}: bad magic {got_magic!r}, expected {FLOW_MAGIC!r}")
        payload = f.read()
    expected = h * w * 2 * 4
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    interleaved = np.frombuffer(payload, dtype="<f4").reshape(h, w, 2)
    return interleaved[..., 0].copy(), interleaved[..., 1].copy()
