"""Regular lattice on the unit square, distances and kernel weights."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DegenerateBandwidthError, InvalidArgumentError


class KernelId(str, Enum):
    GAUSSIAN = "gaussian"
    EPANECHNIKOV = "epanechnikov"


@dataclass(frozen=True)
class Lattice:
    grid_size: int
    coords: np.ndarray  # (n, 2), x varies fastest

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def spacing(self) -> float:
        return 1.0 / (self.grid_size - 1)


@dataclass(frozen=True)
class KernelWeights:
    W: np.ndarray
    eff_n: float
    h: float
    s0: tuple[float, float]
    kernel_id: KernelId


def build_lattice(grid_size: int) -> Lattice:
    """Cartesian grid of ``grid_size`` equispaced values per axis on [0, 1]^2."""
    if int(grid_size) != grid_size or grid_size < 2:
        raise InvalidArgumentError(f"grid_size must be an integer >= 2, got {grid_size!r}")
    axis = np.linspace(0.0, 1.0, int(grid_size))
    xx, yy = np.meshgrid(axis, axis)
    coords = np.column_stack([xx.ravel(), yy.ravel()])
    coords.setflags(write=False)
    return Lattice(int(grid_size), coords)


def distance_matrix(lattice: Lattice) -> np.ndarray:
    d = cdist(lattice.coords, lattice.coords)
    d = np.minimum(d, d.T)
    np.fill_diagonal(d, 0.0)
    return d


def _profile(u, kernel_id):
    if kernel_id is KernelId.GAUSSIAN:
        return np.exp(-0.5 * u * u)
    return np.maximum(1.0 - u * u, 0.0)


def kernel_weights_at(coords, s0, h, kernel_id=KernelId.GAUSSIAN) -> KernelWeights:
    """Normalized weights for arbitrary site coordinates (used for n=1 and tests)."""
    kernel_id = KernelId(kernel_id)
    if not h > 0:
        raise InvalidArgumentError(f"bandwidth must be positive, got {h!r}")
    s0 = (float(s0[0]), float(s0[1]))
    if not (0.0 <= s0[0] <= 1.0 and 0.0 <= s0[1] <= 1.0):
        raise InvalidArgumentError(f"reference point {s0} lies outside the unit square")
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    dist = np.hypot(coords[:, 0] - s0[0], coords[:, 1] - s0[1])
    raw = _profile(dist / h, kernel_id)
    if np.all(raw < 1e-300):
        raise DegenerateBandwidthError(
            f"all kernel weights vanish for h={h} with the {kernel_id.value} kernel"
        )
    W = raw / raw.sum()
    W.setflags(write=False)
    return KernelWeights(W, effective_sample_size(W), float(h), s0, kernel_id)


def kernel_weights(lattice: Lattice, s0=(0.5, 0.5), h: float = 0.5, kernel_id="gaussian") -> KernelWeights:
    """Kernel weights around ``s0``, proportional to the kernel profile at ``|s - s0| / h``.

    The profile's normalizing constant cancels, so none is applied.
    """
    return kernel_weights_at(lattice.coords, s0, h, kernel_id)


def effective_sample_size(W) -> float:
    """Kish effective sample size ``1 / sum(W^2)``."""
    W = np.asarray(W, dtype=float)
    ss = float(np.sum(W * W))
    if ss == 0.0:
        raise InvalidArgumentError("weight vector is identically zero")
    if np.any(W < 0):
        raise InvalidArgumentError("weights must be nonnegative")
    return 1.0 / ss
