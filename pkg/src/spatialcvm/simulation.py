"""Log-normal spatial field generation and the Monte Carlo size/power study."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .baselines import anova_oneway, kruskal_wallis, kw_multivariate, manova_pillai
from .calibration import (
    CalibrationCache,
    CalibrationConfig,
    build_threshold_grid,
    calibrate,
    within_site_corr,
)
from .errors import CalibrationFailedError, DegenerateCalibrationError, InvalidArgumentError, SimulationSetupError
from .lattice import Lattice, build_lattice, distance_matrix, kernel_weights
from .mvn import DEFAULT_SEED, DEFAULT_TOL
from .rank_test import FieldDataset, run_test_prepared

log = logging.getLogger(__name__)

JITTER = 1e-8
METHODS = ("CvM", "KW", "ANOVA", "MANOVA")


def build_site_covariance(dist, phi: float, rho: float, p: int) -> np.ndarray:
    """Separable covariance exp(-d/phi) (x) R_w, site-major with variables fastest."""
    if not phi > 0:
        raise InvalidArgumentError(f"phi must be positive, got {phi!r}")
    sigma_s = np.exp(-np.asarray(dist, dtype=float) / phi)
    return np.kron(sigma_s, within_site_corr(rho, p))


def cholesky_jittered(sigma) -> np.ndarray:
    S = np.asarray(sigma, dtype=float)
    try:
        return np.linalg.cholesky(S + JITTER * np.eye(S.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise SimulationSetupError(f"Cholesky factorization failed after jitter: {exc}") from exc


def field_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent stream for a (seed, key...) tuple; order of use never matters."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def simulate_fields(L, K: int, delta: float, seed: int, lattice: Lattice, p: int, key=(0,)) -> FieldDataset:
    """K independent log-normal fields; field 0 has its latent mean shifted by ``delta``.

    Field ``k`` draws from the stream ``(seed, *key, k)``.
    """
    n = lattice.n
    if L.shape != (n * p, n * p):
        raise InvalidArgumentError(f"factor shape {L.shape} does not match n*p={n * p}")
    Z = np.column_stack([field_rng(seed, *key, k).standard_normal(n * p) for k in range(K)])
    latent = L @ Z
    latent[:, 0] += delta
    values = np.exp(latent.T.reshape(K, n, p))
    return FieldDataset(values, lattice)


@dataclass(frozen=True)
class SimulationConfig:
    K: int = 3
    grid_size: int = 20
    p: int = 2
    n_replicates: int = 500
    alpha: float = 0.05
    phis: tuple[float, ...] = (0.01, 0.2, 0.5)
    deltas: tuple[float, ...] = (0.0, 0.15, 0.30, 0.45)
    rho: float = 0.5
    h: float = 0.5
    s0: tuple[float, float] = (0.5, 0.5)
    M_per_dim: int = 5
    seed: int = DEFAULT_SEED
    methods: tuple[str, ...] | None = None
    kernel_id: str = "gaussian"
    tol: float = DEFAULT_TOL

    def __post_init__(self):
        object.__setattr__(self, "phis", tuple(float(v) for v in self.phis))
        object.__setattr__(self, "deltas", tuple(float(v) for v in self.deltas))
        object.__setattr__(self, "s0", tuple(float(v) for v in self.s0))
        if self.methods is None:
            default = ("CvM", "KW", "ANOVA") if self.p == 1 else ("CvM", "KW", "MANOVA")
            object.__setattr__(self, "methods", default)
        else:
            object.__setattr__(self, "methods", tuple(self.methods))
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise InvalidArgumentError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
        if self.n_replicates < 1:
            raise InvalidArgumentError("n_replicates must be at least 1")
        if not 0 < self.alpha < 1:
            raise InvalidArgumentError("alpha must lie in (0, 1)")
        if any(d < 0 for d in self.deltas):
            raise InvalidArgumentError("deltas must be nonnegative")

    def calibration_config(self, phi: float) -> CalibrationConfig:
        return CalibrationConfig(
            grid_size=self.grid_size, h=self.h, s0=self.s0, kernel_id=self.kernel_id,
            phi=phi, rho=self.rho, p=self.p, M_per_dim=self.M_per_dim, K=self.K,
            tol=self.tol, seed=self.seed,
        )

    def as_dict(self) -> dict:
        d = asdict(self)
        for k in ("phis", "deltas", "s0", "methods"):
            d[k] = list(d[k])
        return d


@dataclass(frozen=True)
class ResultRow:
    phi: float
    delta: float
    method: str
    rejection_rate: float
    n_effective_replicates: int
    n_failed: int = 0


@dataclass
class ResultsTable:
    rows: list[ResultRow] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    def rate(self, phi, delta, method) -> float:
        for r in self.rows:
            if r.phi == phi and r.delta == delta and r.method == method:
                return r.rejection_rate
        raise KeyError((phi, delta, method))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["phi", "delta", "method", "rejection_rate"])
        for r in self.rows:
            w.writerow([_fmt(r.phi), _fmt(r.delta), r.method, _fmt(r.rejection_rate)])
        return buf.getvalue()


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _method_pvalue(method, data, calib, grid, weights):
    groups = list(data.values)
    if method == "CvM":
        return run_test_prepared(data, calib.a, calib.nu, grid, weights).p_value
    if method == "KW":
        return kw_multivariate(groups) if data.p > 1 else kruskal_wallis([g[:, 0] for g in groups]).pvalue
    if method == "ANOVA":
        if data.p != 1:
            raise InvalidArgumentError("ANOVA applies to univariate data")
        return anova_oneway([g[:, 0] for g in groups]).pvalue
    return manova_pillai(groups).pvalue


def replicate_pvalues(config: SimulationConfig, L, lattice, calib, grid, weights, delta, key) -> np.ndarray:
    """p-values of every configured method for one replicate; NaN where a method failed."""
    data = simulate_fields(L, config.K, delta, config.seed, lattice, config.p, key=key)
    out = np.full(len(config.methods), np.nan)
    for m, method in enumerate(config.methods):
        try:
            out[m] = _method_pvalue(method, data, calib, grid, weights)
        except Exception as exc:  # a failing method drops out of that replicate only
            log.debug("method %s failed at %s: %s", method, key, exc)
    return out


def monte_carlo(
    config: SimulationConfig,
    cache: CalibrationCache | None = None,
    threads: int | None = 1,
    calibration_threads: int | None = 1,
) -> ResultsTable:
    lattice = build_lattice(config.grid_size)
    dist = distance_matrix(lattice)
    weights = kernel_weights(lattice, config.s0, config.h, config.kernel_id)
    grid = build_threshold_grid(config.p, config.M_per_dim)
    table = ResultsTable()
    block = {}

    for i, phi in enumerate(config.phis):
        try:
            calib = calibrate(config.calibration_config(phi), cache=cache, threads=calibration_threads)
        except (CalibrationFailedError, DegenerateCalibrationError) as exc:
            msg = f"phi={phi}: calibration failed: {exc}"
            log.error(msg)
            table.errors.append(msg)
            continue
        L = cholesky_jittered(build_site_covariance(dist, phi, config.rho, config.p))
        for j, delta in enumerate(config.deltas):
            log.info("phi=%g delta=%g", phi, delta)

            def one(r, i=i, j=j, delta=delta):
                return replicate_pvalues(config, L, lattice, calib, grid, weights, delta, (i, j, r))

            reps = range(config.n_replicates)
            if threads is None or threads > 1:
                with ThreadPoolExecutor(max_workers=threads) as pool:
                    pm = np.array(list(pool.map(one, reps)))
            else:
                pm = np.array([one(r) for r in reps])
            for m, method in enumerate(config.methods):
                col = pm[:, m]
                ok = ~np.isnan(col)
                n_ok = int(ok.sum())
                rate = float(np.mean(col[ok] < config.alpha)) if n_ok else float("nan")
                block[(i, j, m)] = ResultRow(phi, delta, method, rate, n_ok, int((~ok).sum()))

    # phi fastest, then delta, then method
    for m in range(len(config.methods)):
        for j in range(len(config.deltas)):
            for i in range(len(config.phis)):
                if (i, j, m) in block:
                    table.rows.append(block[(i, j, m)])
    return table
