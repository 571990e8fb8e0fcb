"""Orthonormal separable 3D DWT and sparse coefficient codes.

Volumes are zero-padded so every axis is a multiple of ``2**levels``. Inside
the padded grid each 1D stage is a periodised filter bank, which keeps the
analysis operator exactly orthogonal for any filter length. Coefficients use
the usual in-place (Mallat) layout: after each level the approximation band
occupies the low-index corner of the cube.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .mechanisms import NoiseSeed, SvtConfig, svt_select
from .volume import Dims, FormatError, Volume

_S3 = math.sqrt(3.0)
FILTERS = {
    "haar": (1 / math.sqrt(2), 1 / math.sqrt(2)),
    "db4": tuple(c / (4 * math.sqrt(2)) for c in (1 + _S3, 3 + _S3, 3 - _S3, 1 - _S3)),
}


@dataclass(frozen=True)
class WaveletSpec:
    filter: str = "haar"
    levels: int = 1

    def __post_init__(self):
        if self.filter not in FILTERS:
            raise ValueError(f"unknown filter {self.filter!r}; choose from {sorted(FILTERS)}")
        if self.levels < 1:
            raise ValueError("levels must be positive")

    def padded_dims(self, dims: Sequence[int]) -> Dims:
        q = 2**self.levels
        return tuple(-(-int(n) // q) * q for n in dims)  # type: ignore[return-value]


@lru_cache(maxsize=64)
def analysis_matrix(filter_name: str, n: int) -> np.ndarray:
    """Orthogonal ``n x n`` single-level analysis operator; lowpass rows first."""
    if n % 2:
        raise ValueError("analysis length must be even")
    h = np.array(FILTERS[filter_name])
    g = np.array([(-1) ** k * h[len(h) - 1 - k] for k in range(len(h))])
    w = np.zeros((n, n))
    half = n // 2
    for i in range(half):
        for k in range(len(h)):
            w[i, (2 * i + k) % n] += h[k]
            w[half + i, (2 * i + k) % n] += g[k]
    w.setflags(write=False)
    return w


def _apply_axes(cube: np.ndarray, filter_name: str, inverse: bool) -> np.ndarray:
    for axis in range(3):
        w = analysis_matrix(filter_name, cube.shape[axis])
        op = w.T if inverse else w
        cube = np.moveaxis(np.tensordot(op, cube, axes=([1], [axis])), 0, axis)
    return cube


def _padded(v: Volume, spec: WaveletSpec) -> np.ndarray:
    out = np.zeros(spec.padded_dims(v.dims))
    nx, ny, nz = v.dims
    out[:nx, :ny, :nz] = v.data
    return out


def dwt_forward(v: Volume, spec: WaveletSpec) -> np.ndarray:
    """Flat coefficient vector of the zero-padded volume."""
    coeffs = _padded(v, spec)
    shape = np.array(coeffs.shape)
    for _ in range(spec.levels):
        sl = tuple(slice(0, s) for s in shape)
        coeffs[sl] = _apply_axes(coeffs[sl], spec.filter, inverse=False)
        shape //= 2
    return coeffs.reshape(-1)


def dwt_inverse(coeffs, spec: WaveletSpec, dims: Sequence[int]) -> Volume:
    padded = spec.padded_dims(dims)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.size != math.prod(padded):
        raise ValueError(f"expected {math.prod(padded)} coefficients for dims {tuple(dims)}, got {coeffs.size}")
    cube = coeffs.reshape(padded).copy()
    for level in reversed(range(spec.levels)):
        sl = tuple(slice(0, s // 2**level) for s in padded)
        cube[sl] = _apply_axes(cube[sl], spec.filter, inverse=True)
    nx, ny, nz = dims
    return Volume(cube[:nx, :ny, :nz])


@dataclass(frozen=True)
class SparseCode:
    """Selected ``(index, value)`` coefficient pairs out of ``total`` coefficients."""

    entries: tuple[tuple[int, float], ...]
    total: int

    def __post_init__(self):
        entries = tuple(sorted((int(i), float(v)) for i, v in self.entries))
        idx = [i for i, _ in entries]
        if len(set(idx)) != len(idx):
            raise ValueError("duplicate coefficient index in sparse code")
        if idx and (idx[0] < 0 or idx[-1] >= self.total):
            raise ValueError("coefficient index out of range")
        object.__setattr__(self, "entries", entries)

    def __len__(self):
        return len(self.entries)

    def dense(self) -> np.ndarray:
        out = np.zeros(self.total)
        for i, v in self.entries:
            out[i] = v
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# total={self.total}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "value"])
        for i, v in self.entries:
            w.writerow([i, repr(v)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SparseCode":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("# total="):
            raise FormatError("missing '# total=<n>' header line", "line 1")
        try:
            total = int(lines[0][len("# total="):])
        except ValueError:
            raise FormatError("unparseable total", "line 1") from None
        if len(lines) < 2 or lines[1].strip() != "index,value":
            raise FormatError("expected 'index,value' header", "line 2")
        entries = []
        for lineno, row in enumerate(csv.reader(lines[2:]), start=3):
            if not row:
                continue
            try:
                entries.append((int(row[0]), float(row[1])))
            except (ValueError, IndexError):
                raise FormatError(f"bad row {row!r}", f"line {lineno}") from None
        try:
            return cls(tuple(entries), total)
        except ValueError as e:
            raise FormatError(str(e), "entries") from None


def top_coefficients(coeffs, count: int) -> SparseCode:
    """Non-private code keeping the ``count`` largest-magnitude coefficients."""
    coeffs = np.asarray(coeffs, dtype=np.float64).reshape(-1)
    count = max(0, min(int(count), coeffs.size))
    idx = np.argsort(-np.abs(coeffs), kind="stable")[:count]
    return SparseCode(tuple((int(i), float(coeffs[i])) for i in idx), coeffs.size)


def dwt_private_encode(
    teacher_volumes: Iterable[Volume], cfg: SvtConfig, spec: WaveletSpec, seed: NoiseSeed
) -> SparseCode:
    """Average the teachers' volumes, transform, and release coefficients by SVT.

    Teachers must already be clipped to unit norm; by orthonormality each
    coefficient of the mean then moves by at most ``1/K``.
    """
    vols = list(teacher_volumes)
    if not vols:
        raise ValueError("need at least one teacher volume")
    if any(np.linalg.norm(v.flat) > 1 + 1e-9 for v in vols):
        raise ValueError("teacher volumes must be clipped to unit norm")
    mean = Volume(np.mean([v.data for v in vols], axis=0))
    coeffs = dwt_forward(mean, spec)
    return SparseCode(tuple(svt_select(coeffs, cfg, seed)), coeffs.size)


def sparse_decode(code: SparseCode, spec: WaveletSpec, dims: Sequence[int]) -> Volume:
    expected = math.prod(spec.padded_dims(dims))
    if code.total != expected:
        raise ValueError(f"code covers {code.total} coefficients, dims need {expected}")
    return dwt_inverse(code.dense(), spec, dims)
