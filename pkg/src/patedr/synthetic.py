"""Synthetic segmentation masks and simulated teachers.

Masks are unions of randomly rotated ellipsoids. A simulated teacher corrupts
the ground truth by a partial morphological dilation or erosion of the
boundary followed by independent voxel flips.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import BinaryMask, Dims, _check_dims


@dataclass(frozen=True)
class SyntheticMaskSpec:
    dims: Dims = (16, 16, 16)
    num_blobs: tuple[int, int] = (1, 2)
    semi_axes: tuple[float, float] = (3.0, 6.0)
    # Fraction of each axis kept free of blob centres.
    margin: float = 0.35
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", _check_dims(self.dims))
        object.__setattr__(self, "num_blobs", tuple(int(n) for n in self.num_blobs))
        object.__setattr__(self, "semi_axes", tuple(float(a) for a in self.semi_axes))
        lo, hi = self.num_blobs
        if not 0 <= lo <= hi:
            raise ValueError("num_blobs must be a nondecreasing nonnegative range")
        if not 0 < self.semi_axes[0] <= self.semi_axes[1]:
            raise ValueError("semi_axes must be a positive nondecreasing range")


def rasterize_ellipsoid(dims, center, semi_axes, rotation=None) -> np.ndarray:
    """Boolean grid of voxel centres inside or on the ellipsoid."""
    grid = np.stack(np.meshgrid(*(np.arange(n) for n in dims), indexing="ij"), axis=-1)
    offset = grid - np.asarray(center, dtype=np.float64)
    if rotation is not None:
        offset = offset @ np.asarray(rotation)
    # The slack keeps voxels on the surface inside after a rotation's rounding.
    return np.sum((offset / np.asarray(semi_axes, dtype=np.float64)) ** 2, axis=-1) <= 1.0 + 1e-9


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


def gen_masks(spec: SyntheticMaskSpec, count: int) -> list[BinaryMask]:
    """``count`` reproducible masks; mask i depends only on ``(spec.seed, i)``."""
    return [gen_mask(spec, i) for i in range(count)]


def gen_mask(spec: SyntheticMaskSpec, index: int) -> BinaryMask:
    rng = np.random.default_rng([spec.seed, index])
    dims = np.array(spec.dims)
    out = np.zeros(spec.dims, dtype=bool)
    for _ in range(rng.integers(spec.num_blobs[0], spec.num_blobs[1] + 1)):
        center = rng.uniform(spec.margin * (dims - 1), (1 - spec.margin) * (dims - 1))
        axes = rng.uniform(spec.semi_axes[0], spec.semi_axes[1], 3)
        out |= rasterize_ellipsoid(spec.dims, center, axes, _random_rotation(rng))
    return BinaryMask(out)


_BALL = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class SimulatedTeacher:
    """Deterministic mask corrupter standing in for a trained teacher model.

    ``morph_radius`` > 0 dilates, < 0 erodes; ``morph_prob`` is the fraction
    of the affected boundary band that actually changes. ``flip_rate`` flips
    every voxel independently afterwards.
    """

    morph_radius: int = 0
    morph_prob: float = 1.0
    flip_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.morph_prob <= 1 or not 0 <= self.flip_rate <= 1:
            raise ValueError("probabilities must lie in [0, 1]")

    @property
    def is_exact(self) -> bool:
        return self.morph_radius == 0 and self.flip_rate == 0

    def predict(self, mask: BinaryMask, input_index: int = 0) -> BinaryMask:
        truth = mask.data.astype(bool)
        if self.is_exact:
            return BinaryMask(truth)
        rng = np.random.default_rng([self.seed, input_index])
        out = truth.copy()
        if self.morph_radius:
            op = ndimage.binary_dilation if self.morph_radius > 0 else ndimage.binary_erosion
            moved = op(truth, structure=_BALL, iterations=abs(self.morph_radius)) != truth
            out ^= moved & (rng.random(truth.shape) < self.morph_prob)
        if self.flip_rate:
            out ^= rng.random(truth.shape) < self.flip_rate
        return BinaryMask(out)


def default_teachers(k: int, seed: int, flip_rate: float = 0.003, morph_prob: float = 0.7) -> list[SimulatedTeacher]:
    """Alternating dilating and eroding teachers with light voxel noise."""
    return [
        SimulatedTeacher(
            morph_radius=1 if i % 2 == 0 else -1,
            morph_prob=morph_prob,
            flip_rate=flip_rate,
            seed=int(np.random.SeedSequence([seed, i]).generate_state(1)[0]),
        )
        for i in range(k)
    ]


def simulate_teacher_predictions(mask: BinaryMask, teachers, input_index: int = 0) -> list[BinaryMask]:
    if len(teachers) < 1:
        raise ValueError("need at least one teacher")
    return [t.predict(mask, input_index) for t in teachers]
