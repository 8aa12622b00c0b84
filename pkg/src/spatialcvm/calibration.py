"""Exact discrete covariance of smoothed copula indicators and its calibration.

Under a Gaussian copula with exponential spatial correlation, the covariance
between the kernel-smoothed indicators at two thresholds is a weighted sum,
over lattice site pairs, of orthant probabilities of the latent field at the
two sites minus the product of the single-site probabilities.  Site pairs are
grouped by distance so each distinct distance needs one batch of orthant
evaluations.
"""

from __future__ import annotations

import hashlib
import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    CalibrationFailedError,
    DegenerateCalibrationError,
    InvalidArgumentError,
)
from .lattice import KernelWeights, build_lattice, distance_matrix, kernel_weights
from .mvn import DEFAULT_SEED, DEFAULT_TOL, bvn_cdf, orthant_batch, std_normal_cdf, std_normal_quantile

CACHE_FORMAT_VERSION = 1
EIGEN_THRESHOLD = 1e-10
WEIGHT_SUM_FLOOR = 1e-12


@dataclass(frozen=True)
class ThresholdGrid:
    p: int
    M_per_dim: int
    probs: np.ndarray
    latent: np.ndarray  # (M, p)
    copula_thresholds: np.ndarray  # (M, p)

    @property
    def M(self) -> int:
        return self.latent.shape[0]


def build_threshold_grid(p: int, M_per_dim: int, lo: float = 0.02, hi: float = 0.98) -> ThresholdGrid:
    """Equispaced copula thresholds on [lo, hi]; first coordinate varies fastest."""
    if p not in (1, 2):
        raise InvalidArgumentError(f"p must be 1 or 2, got {p!r}")
    if M_per_dim < 1:
        raise InvalidArgumentError(f"M_per_dim must be positive, got {M_per_dim!r}")
    probs = np.linspace(lo, hi, M_per_dim) if M_per_dim > 1 else np.array([lo])
    if np.any(np.diff(probs) <= 0) or probs[0] <= 0 or probs[-1] >= 1:
        raise InvalidArgumentError("threshold probabilities must be strictly increasing inside (0, 1)")
    mesh = np.meshgrid(*([probs] * p), indexing="ij")
    # first coordinate fastest: reverse axis order before flattening
    cop = np.column_stack([m.transpose().ravel() for m in mesh]) if p > 1 else probs[:, None]
    latent = std_normal_quantile(cop)
    return ThresholdGrid(p, int(M_per_dim), probs, latent, cop)


@dataclass(frozen=True)
class CopulaModel:
    phi: float
    rho: float = 0.5

    def __post_init__(self):
        if not self.phi > 0:
            raise InvalidArgumentError(f"phi must be positive, got {self.phi!r}")
        if not -1.0 < self.rho < 1.0:
            raise InvalidArgumentError(f"rho must lie in (-1, 1), got {self.rho!r}")


def within_site_corr(rho: float, p: int) -> np.ndarray:
    R = np.full((p, p), float(rho))
    np.fill_diagonal(R, 1.0)
    return R


def marginal_orthant_probs(grid: ThresholdGrid, rho: float) -> np.ndarray:
    if grid.p == 1:
        return std_normal_cdf(grid.latent[:, 0])
    return bvn_cdf(grid.latent[:, 0], grid.latent[:, 1], rho)


def distance_groups(dist: np.ndarray, quantum: float | None = None):
    """Distinct distances and the index of each entry's group.

    With ``quantum=None`` distances are grouped by exact equality; otherwise
    they are rounded to multiples of ``quantum`` first.
    """
    flat = np.asarray(dist, dtype=float).ravel()
    if quantum is None:
        values, inverse = np.unique(flat, return_inverse=True)
        return values, inverse
    keys = np.round(flat / quantum).astype(np.int64)
    _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    return flat[first], inverse


def _pair_index(M):
    r, s = np.triu_indices(M)
    return r, s


def _distance_block(d, phi, rho, p, latent, marg, r_idx, s_idx, tol):
    rho_s = np.exp(-d / phi)
    R = np.kron(np.array([[1.0, rho_s], [rho_s, 1.0]]), within_site_corr(rho, p))
    uppers = np.hstack([latent[r_idx], latent[s_idx]])
    try:
        prob = orthant_batch(uppers, R, tol=tol)
    except Exception as exc:
        for q in range(uppers.shape[0]):
            try:
                orthant_batch(uppers[q:q + 1], R, tol=tol)
            except Exception:
                raise CalibrationFailedError(
                    f"orthant probability failed at d={d!r}, r={r_idx[q]}, s={s_idx[q]}: {exc}"
                ) from exc
        raise CalibrationFailedError(f"orthant probability failed at d={d!r}: {exc}") from exc
    return np.clip(prob, 0.0, 1.0) - marg[r_idx] * marg[s_idx]


def exact_gamma(
    model: CopulaModel,
    grid: ThresholdGrid,
    dist: np.ndarray,
    weights: KernelWeights,
    tol: float = DEFAULT_TOL,
    quantum: float | None = None,
    threads: int | None = 1,
) -> np.ndarray:
    """Covariance matrix of the eff_n-scaled smoothed copula over the threshold grid."""
    W = np.asarray(weights.W)
    n = W.size
    if dist.shape != (n, n):
        raise InvalidArgumentError(f"distance matrix shape {dist.shape} does not match {n} weights")
    values, inverse = distance_groups(dist, quantum)
    wsum = np.bincount(inverse, weights=np.outer(W, W).ravel(), minlength=values.size)
    active = [g for g in range(values.size) if wsum[g] >= WEIGHT_SUM_FLOOR]

    M = grid.M
    marg = marginal_orthant_probs(grid, model.rho)
    r_idx, s_idx = _pair_index(M)

    def block(g):
        cov = _distance_block(values[g], model.phi, model.rho, grid.p, grid.latent, marg, r_idx, s_idx, tol)
        return wsum[g] * cov

    if threads is None or threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(block, active))
    else:
        parts = [block(g) for g in active]

    upper = np.zeros(r_idx.size)
    for part in parts:  # fixed order keeps the sum independent of thread count
        upper += part
    gamma = np.zeros((M, M))
    gamma[r_idx, s_idx] = upper
    gamma[s_idx, r_idx] = upper
    return gamma * weights.eff_n


def contrast_matrix(K: int) -> np.ndarray:
    return np.eye(K) - np.full((K, K), 1.0 / K)


def satterthwaite_params(gamma, K: int, dense: bool = False):
    """Moment-matched scale ``a`` and df ``nu`` for the contrast quadratic form.

    Returns ``(a, nu, eigenvalues)`` with the retained eigenvalues of
    ``C (x) gamma`` divided by ``K * M`` and sorted in descending order.
    By default the spectrum is assembled from ``gamma`` alone, since the
    centering matrix has eigenvalue 1 with multiplicity K - 1 and a single 0;
    ``dense=True`` eigensolves the full Kronecker product instead.
    """
    if K < 2:
        raise InvalidArgumentError(f"K must be at least 2, got {K!r}")
    G = np.asarray(gamma, dtype=float)
    G = 0.5 * (G + G.T)
    M = G.shape[0]
    if dense:
        S = np.kron(contrast_matrix(K), G)
        S = 0.5 * (S + S.T)
        eig = np.linalg.eigvalsh(S)
    else:
        eig = np.repeat(np.linalg.eigvalsh(G), K - 1)
    eig = eig[eig > EIGEN_THRESHOLD] / (K * M)
    if eig.size == 0:
        raise DegenerateCalibrationError("no eigenvalue of the contrast covariance exceeds 1e-10")
    eig = np.sort(eig)[::-1]
    s1 = eig.sum()
    s2 = np.sum(eig * eig)
    return float(s2 / s1), float(s1 * s1 / s2), eig


@dataclass(frozen=True)
class CalibrationConfig:
    grid_size: int = 20
    h: float = 0.5
    s0: tuple[float, float] = (0.5, 0.5)
    kernel_id: str = "gaussian"
    phi: float = 0.2
    rho: float = 0.5
    p: int = 2
    M_per_dim: int = 5
    K: int = 3
    tol: float = DEFAULT_TOL
    seed: int = DEFAULT_SEED
    quantum: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "s0", tuple(float(v) for v in self.s0))
        object.__setattr__(self, "grid_size", int(self.grid_size))
        object.__setattr__(self, "p", int(self.p))
        object.__setattr__(self, "M_per_dim", int(self.M_per_dim))
        object.__setattr__(self, "K", int(self.K))
        object.__setattr__(self, "seed", int(self.seed))
        for name in ("h", "phi", "rho", "tol"):
            object.__setattr__(self, name, float(getattr(self, name)))

    def as_dict(self) -> dict:
        d = asdict(self)
        d["s0"] = list(self.s0)
        return d

    def key(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:32]


@dataclass(frozen=True)
class CalibrationResult:
    config: CalibrationConfig
    gamma: np.ndarray
    eigenvalues: np.ndarray
    a: float
    nu: float
    version: str = field(default=__version__, compare=False)

    def to_record(self) -> dict:
        return {
            "format_version": CACHE_FORMAT_VERSION,
            "artifact_version": self.version,
            "metadata": self.config.as_dict(),
            "M": int(self.gamma.shape[0]),
            "gamma": [float(v) for v in self.gamma.ravel()],
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "a": self.a,
            "nu": self.nu,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_record(), indent=1)

    @classmethod
    def from_record(cls, rec: dict) -> "CalibrationResult":
        if rec.get("format_version") != CACHE_FORMAT_VERSION:
            raise InvalidArgumentError(f"unsupported calibration format {rec.get('format_version')!r}")
        M = int(rec["M"])
        meta = dict(rec["metadata"])
        meta["s0"] = tuple(meta["s0"])
        return cls(
            config=CalibrationConfig(**meta),
            gamma=np.asarray(rec["gamma"], dtype=float).reshape(M, M),
            eigenvalues=np.asarray(rec["eigenvalues"], dtype=float),
            a=float(rec["a"]),
            nu=float(rec["nu"]),
            version=rec.get("artifact_version", __version__),
        )

    @classmethod
    def load(cls, path) -> "CalibrationResult":
        with open(path) as fh:
            return cls.from_record(json.load(fh))


class CalibrationCache:
    """Directory of calibration records, one JSON file per configuration hash."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.hits = 0
        self.misses = 0

    def path_for(self, config: CalibrationConfig) -> Path:
        return self.directory / f"calib-{config.key()}.json"

    def get(self, config: CalibrationConfig) -> CalibrationResult | None:
        path = self.path_for(config)
        try:
            result = CalibrationResult.load(path)
        except (OSError, ValueError, KeyError, TypeError):
            self.misses += 1
            return None
        if result.config != config:
            self.misses += 1
            return None
        self.hits += 1
        return result

    def put(self, result: CalibrationResult) -> None:
        path = self.path_for(result.config)
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_text(result.dumps())
            os.replace(tmp, path)
        except OSError as exc:
            warnings.warn(f"could not write calibration cache {path}: {exc}", RuntimeWarning, stacklevel=2)


def calibrate(config: CalibrationConfig, cache: CalibrationCache | None = None, threads: int | None = 1) -> CalibrationResult:
    """Build the threshold grid and weights, compute gamma and (a, nu)."""
    if cache is not None:
        hit = cache.get(config)
        if hit is not None:
            return hit
    lattice = build_lattice(config.grid_size)
    weights = kernel_weights(lattice, config.s0, config.h, config.kernel_id)
    grid = build_threshold_grid(config.p, config.M_per_dim)
    model = CopulaModel(config.phi, config.rho)
    gamma = exact_gamma(model, grid, distance_matrix(lattice), weights,
                        tol=config.tol, quantum=config.quantum, threads=threads)
    a, nu, eig = satterthwaite_params(gamma, config.K)
    result = CalibrationResult(config, gamma, eig, a, nu)
    if cache is not None:
        cache.put(result)
        # serve the round-tripped record so cached and fresh results are identical
        return CalibrationResult.from_record(json.loads(result.dumps()))
    return result
