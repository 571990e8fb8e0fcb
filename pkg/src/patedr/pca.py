"""Blocked, uncentered PCA encoder with its analytic error model.

The covariance estimate is the uncentered second-moment matrix
``1/(M-1) sum_i y_i y_i^T`` over block vectors pooled from every training
volume; no mean is subtracted. One set of components is shared by all block
positions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .volume import BlockGrid, FormatError, Volume, block_merge, block_split, clip_to_ball

EIGENVALUE_TOLERANCE = 1e-10


def second_moment_eigh(samples) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of ``1/(M-1) sum y y^T`` for the rows of ``samples``.

    Returns ``(eigenvalues, vectors)`` with eigenvalues sorted non-increasing
    and clamped at zero, and eigenvectors as rows. Each eigenvector's first
    entry of non-negligible magnitude is made positive.
    """
    samples = np.asarray(samples, dtype=np.float64)
    m = samples.shape[0]
    if m < 2:
        raise ValueError("need at least two samples")
    cov = samples.T @ samples / (m - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals, kind="stable")[::-1]
    vals = vals[order]
    vecs = vecs[:, order].T.copy()
    if vals.size and vals[-1] < -EIGENVALUE_TOLERANCE * max(1.0, abs(vals[0])):
        raise ArithmeticError(f"covariance has a negative eigenvalue {vals[-1]}")
    vals = np.clip(vals, 0.0, None)
    for row in vecs:
        lead = np.flatnonzero(np.abs(row) > 1e-12)
        if lead.size and row[lead[0]] < 0:
            row *= -1
    return vals, vecs


@dataclass(frozen=True, eq=False)
class PcaModel:
    block_grid: BlockGrid
    components: np.ndarray  # (num_components, block_edge**3), orthonormal rows
    eigenvalues: np.ndarray  # full spectrum, non-increasing

    def __post_init__(self):
        comps = np.atleast_2d(np.asarray(self.components, dtype=np.float64))
        if comps.shape[1] != self.block_grid.block_size:
            raise ValueError("component length does not match block size")
        comps.setflags(write=False)
        vals = np.asarray(self.eigenvalues, dtype=np.float64)
        vals.setflags(write=False)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "eigenvalues", vals)

    @property
    def num_components(self) -> int:
        return self.components.shape[0]

    @property
    def clip_radius(self) -> float:
        return self.block_grid.clip_radius

    @property
    def code_length(self) -> int:
        return self.num_components * self.block_grid.num_blocks

    def truncated(self, num_components: int) -> "PcaModel":
        if not 0 <= num_components <= self.components.shape[0]:
            raise ValueError("cannot keep more components than the model holds")
        return PcaModel(self.block_grid, self.components[:num_components], self.eigenvalues)


def pca_fit(
    masks: Sequence[Volume], block_edge: int, num_components: int | None = None
) -> PcaModel:
    """Fit shared block components on clipped blocks pooled from ``masks``.

    ``num_components=None`` keeps the full basis.
    """
    if len(masks) < 2:
        raise ValueError("pca_fit needs at least two volumes")
    grid = BlockGrid(block_edge, masks[0].dims)
    blocks = np.concatenate([block_split(m, grid) for m in masks])
    blocks = clip_to_ball(blocks, grid.clip_radius)
    vals, vecs = second_moment_eigh(blocks)
    if num_components is None:
        num_components = grid.block_size
    if not 0 <= num_components <= grid.block_size:
        raise ValueError(f"num_components must be in [0, {grid.block_size}]")
    return PcaModel(grid, vecs[:num_components], vals)


def encode_blocks(blocks, m: PcaModel) -> np.ndarray:
    return clip_to_ball(blocks, m.clip_radius) @ m.components.T


def pca_encode(v: Volume, m: PcaModel) -> np.ndarray:
    """Clip each block to the per-block radius and project onto the components."""
    if v.dims != m.block_grid.volume_dims:
        raise ValueError(f"volume dims {v.dims} do not match model dims {m.block_grid.volume_dims}")
    return encode_blocks(block_split(v, m.block_grid), m).reshape(-1)


def pca_decode(z, m: PcaModel) -> Volume:
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if z.size != m.code_length:
        raise ValueError(f"code length {z.size} does not match model code length {m.code_length}")
    blocks = z.reshape(m.block_grid.num_blocks, m.num_components) @ m.components
    return block_merge(blocks, m.block_grid)


def predicted_pca_loss(eigenvalues, num_components: int, sigma: float) -> float:
    """Expected squared error: discarded variance plus noise in kept directions."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if not 0 <= num_components <= lam.size:
        raise ValueError("num_components out of range")
    return float(lam[num_components:].sum() + num_components * sigma**2)


def choose_num_components(eigenvalues, sigma: float) -> int:
    """Keep exactly the directions whose variance strictly exceeds the noise variance."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if np.any(np.diff(lam) > 0):
        raise ValueError("eigenvalues must be sorted non-increasing")
    return int(np.count_nonzero(lam > sigma**2))


# PCAM: magic, three u32 dims, u32 block_edge, u32 num_components, u32 spectrum length,
# then f64 eigenvalues and row-major f64 components, all little-endian.
_PCAM_HEADER = struct.Struct("<4s6I")


def save_pca(path, m: PcaModel) -> None:
    g = m.block_grid
    header = _PCAM_HEADER.pack(
        b"PCAM", *g.volume_dims, g.block_edge, m.num_components, m.eigenvalues.size
    )
    Path(path).write_bytes(
        header + m.eigenvalues.astype("<f8").tobytes() + m.components.astype("<f8").tobytes()
    )


def load_pca(path) -> PcaModel:
    buf = Path(path).read_bytes()
    if len(buf) < _PCAM_HEADER.size:
        raise FormatError("truncated PCAM header", len(buf))
    magic, nx, ny, nz, edge, ncomp, nvals = _PCAM_HEADER.unpack_from(buf)
    if magic != b"PCAM":
        raise FormatError(f"bad magic {magic!r}", 0)
    if edge == 0:
        raise FormatError("zero block edge", 16)
    grid = BlockGrid(edge, (nx, ny, nz))
    expected = _PCAM_HEADER.size + 8 * (nvals + ncomp * grid.block_size)
    if len(buf) != expected:
        raise FormatError(f"expected {expected} bytes, file has {len(buf)}", min(len(buf), expected))
    off = _PCAM_HEADER.size
    vals = np.frombuffer(buf, "<f8", nvals, off)
    comps = np.frombuffer(buf, "<f8", ncomp * grid.block_size, off + 8 * nvals)
    return PcaModel(grid, comps.reshape(ncomp, grid.block_size), vals)
