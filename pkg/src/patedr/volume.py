"""Dense 3D volumes, binary masks, cubic blocking, norm clipping and Dice.

Voxel data is row-major over ``(nx, ny, nz)``: x is the slowest axis and z
the fastest. Block order follows the same convention.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

Dims = tuple[int, int, int]


class FormatError(ValueError):
    """Malformed binary or text file. ``offset`` names the byte or field at fault."""

    def __init__(self, message: str, offset: Union[int, str, None] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at {'byte ' if isinstance(offset, int) else 'field '}{offset})"
        super().__init__(message)


def _check_dims(dims: Sequence[int]) -> Dims:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise ValueError(f"dims must be three positive integers, got {dims}")
    return dims  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class Volume:
    """Real-valued voxel grid, stored as a read-only float64 array."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, order="C")
        if arr.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {arr.shape}")
        _check_dims(arr.shape)
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_flat(cls, dims: Sequence[int], values) -> "Volume":
        dims = _check_dims(dims)
        values = np.asarray(values)
        if values.size != math.prod(dims):
            raise ValueError(f"expected {math.prod(dims)} values for dims {dims}, got {values.size}")
        return cls(values.reshape(dims))

    @classmethod
    def zeros(cls, dims: Sequence[int]) -> "Volume":
        return cls(np.zeros(_check_dims(dims)))

    @property
    def dims(self) -> Dims:
        return tuple(self.data.shape)  # type: ignore[return-value]

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    @property
    def size(self) -> int:
        return self.data.size

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"{type(self).__name__}(dims={self.dims})"


class BinaryMask(Volume):
    """Volume whose voxels are exactly 0 or 1, stored as uint8."""

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"mask data must be 3D, got shape {arr.shape}")
        _check_dims(arr.shape)
        if arr.dtype != np.bool_ and not np.all((arr == 0) | (arr == 1)):
            raise ValueError("mask voxels must be 0 or 1")
        arr = np.array(arr, dtype=np.uint8, order="C")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def threshold(cls, vol: Union[Volume, np.ndarray], level: float = 0.5) -> "BinaryMask":
        data = vol.data if isinstance(vol, Volume) else np.asarray(vol)
        return cls(data >= level)

    def as_volume(self) -> Volume:
        return Volume(self.data.astype(np.float64))

    @property
    def count(self) -> int:
        return int(self.data.sum(dtype=np.int64))


@dataclass(frozen=True)
class BlockGrid:
    """Tiling of a volume into cubes of edge ``block_edge`` after zero-padding."""

    block_edge: int
    volume_dims: Dims

    def __post_init__(self):
        if int(self.block_edge) <= 0:
            raise ValueError("block_edge must be positive")
        object.__setattr__(self, "block_edge", int(self.block_edge))
        object.__setattr__(self, "volume_dims", _check_dims(self.volume_dims))

    @property
    def padded_dims(self) -> Dims:
        e = self.block_edge
        return tuple(-(-n // e) * e for n in self.volume_dims)  # type: ignore[return-value]

    @property
    def blocks_per_axis(self) -> Dims:
        return tuple(p // self.block_edge for p in self.padded_dims)  # type: ignore[return-value]

    @property
    def num_blocks(self) -> int:
        return math.prod(self.blocks_per_axis)

    @property
    def block_size(self) -> int:
        return self.block_edge**3

    @property
    def num_voxels(self) -> int:
        return math.prod(self.volume_dims)

    @property
    def clip_radius(self) -> float:
        """Per-block norm bound so that all blocks together have norm at most one.

        Equals ``sqrt(block_edge**3 / d)`` when the dims divide evenly; with
        padding, d is the padded voxel count so the bound still holds.
        """
        return math.sqrt(1.0 / self.num_blocks)


def block_split(v: Volume, g: BlockGrid) -> np.ndarray:
    """Split ``v`` into a ``(num_blocks, block_edge**3)`` array of flat blocks.

    The volume is zero-padded up to the grid. Blocks are ordered
    lexicographically by block coordinate with x slowest; voxels inside a
    block are row-major.
    """
    if v.dims != g.volume_dims:
        raise ValueError(f"volume dims {v.dims} do not match grid dims {g.volume_dims}")
    e = g.block_edge
    bx, by, bz = g.blocks_per_axis
    padded = np.zeros(g.padded_dims)
    nx, ny, nz = v.dims
    padded[:nx, :ny, :nz] = v.data
    tiles = padded.reshape(bx, e, by, e, bz, e).transpose(0, 2, 4, 1, 3, 5)
    return tiles.reshape(g.num_blocks, g.block_size).copy()


def block_merge(blocks, g: BlockGrid) -> Volume:
    """Inverse of :func:`block_split`; padding voxels are discarded."""
    blocks = np.asarray(blocks, dtype=np.float64)
    if blocks.shape != (g.num_blocks, g.block_size):
        raise ValueError(
            f"expected blocks of shape {(g.num_blocks, g.block_size)}, got {blocks.shape}"
        )
    e = g.block_edge
    bx, by, bz = g.blocks_per_axis
    padded = blocks.reshape(bx, by, bz, e, e, e).transpose(0, 3, 1, 4, 2, 5).reshape(g.padded_dims)
    nx, ny, nz = g.volume_dims
    return Volume(padded[:nx, :ny, :nz])


def clip_to_ball(x, radius: float) -> np.ndarray:
    """Scale ``x`` onto the l2 ball of ``radius`` if it lies outside.

    Works on a single vector or row-wise on a 2D array.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    # Guard against the rescaled norm landing a rounding error above radius.
    scale = np.where(norms > radius, radius / np.where(norms > 0, norms, 1.0), 1.0)
    out = x * scale
    over = np.linalg.norm(out, axis=-1, keepdims=True) > radius
    if np.any(over):
        out = np.where(over, out * (1 - 4 * np.finfo(float).eps), out)
    return out


def dice(a, b) -> float:
    """Dice overlap 2|A∩B| / (|A| + |B|); two empty masks score 1."""
    a = np.asarray(a.data if isinstance(a, Volume) else a) != 0
    b = np.asarray(b.data if isinstance(b, Volume) else b) != 0
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


# VOLB file format: magic, version, dtype, three LE u32 dims, raw row-major data.
VOLB_MAGIC = b"VOLB"
VOLB_VERSION = 1
_VOLB_DTYPES = {0: np.dtype("u1"), 1: np.dtype("<f4"), 2: np.dtype("<f8")}
_VOLB_HEADER = struct.Struct("<4sBB3I")


def encode_volb(v: Volume, dtype_code: int | None = None) -> bytes:
    if dtype_code is None:
        dtype_code = 0 if isinstance(v, BinaryMask) else 2
    if dtype_code not in _VOLB_DTYPES:
        raise ValueError(f"unknown VOLB dtype code {dtype_code}")
    if dtype_code == 0 and not np.all((v.data == 0) | (v.data == 1)):
        raise ValueError("u8 VOLB files hold binary masks only")
    header = _VOLB_HEADER.pack(VOLB_MAGIC, VOLB_VERSION, dtype_code, *v.dims)
    return header + np.ascontiguousarray(v.data, dtype=_VOLB_DTYPES[dtype_code]).tobytes()


def decode_volb(buf: bytes) -> Volume:
    if len(buf) < _VOLB_HEADER.size:
        raise FormatError("truncated VOLB header", len(buf))
    magic, version, code, nx, ny, nz = _VOLB_HEADER.unpack_from(buf)
    if magic != VOLB_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VOLB_VERSION:
        raise FormatError(f"unsupported VOLB version {version}", 4)
    if code not in _VOLB_DTYPES:
        raise FormatError(f"unknown dtype byte {code:#04x}", 5)
    if 0 in (nx, ny, nz):
        raise FormatError("zero dimension", 6)
    dtype = _VOLB_DTYPES[code]
    expected = _VOLB_HEADER.size + nx * ny * nz * dtype.itemsize
    if len(buf) != expected:
        raise FormatError(f"expected {expected} bytes, file has {len(buf)}", min(len(buf), expected))
    data = np.frombuffer(buf, dtype=dtype, offset=_VOLB_HEADER.size).reshape(nx, ny, nz)
    if code == 0:
        if not np.all(data <= 1):
            bad = int(np.argmax(data.reshape(-1) > 1))
            raise FormatError("mask voxel not in {0,1}", _VOLB_HEADER.size + bad)
        return BinaryMask(data)
    if not np.all(np.isfinite(data)):
        bad = int(np.argmax(~np.isfinite(data.reshape(-1))))
        raise FormatError("non-finite voxel", _VOLB_HEADER.size + bad * dtype.itemsize)
    return Volume(data)


def write_volb(path, v: Volume, dtype_code: int | None = None) -> None:
    Path(path).write_bytes(encode_volb(v, dtype_code))


def read_volb(path) -> Volume:
    return decode_volb(Path(path).read_bytes())
