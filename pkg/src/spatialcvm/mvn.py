"""Normal distribution primitives and low-dimensional orthant probabilities.

Bivariate probabilities use Genz's double-precision refinement of the
Drezner-Wesolowsky method.  Three- and four-dimensional probabilities are
reduced to one-dimensional integrals with Plackett's identity: the
correlation matrix is moved along a straight path from a block-diagonal
matrix (where the probability factors into low-dimensional pieces) to the
target, and the derivative along the path is a sum of bivariate densities
times conditional normal probabilities of the remaining coordinates.  The
path integral is evaluated with Gauss-Legendre rules of doubling order, so
results are deterministic and do not depend on a random seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import special

from .errors import InvalidArgumentError, UnsupportedDimensionError

DEFAULT_TOL = 1e-6
DEFAULT_SEED = 20260301
MAX_DIM = 4

_TWO_PI = 2.0 * np.pi
_PSD_TOL = 1e-10
_UNIT_CORR_TOL = 1e-12


def std_normal_cdf(x):
    """Standard normal CDF; accepts scalars or arrays, including +/-inf."""
    out = special.ndtr(x)
    return float(out) if np.ndim(out) == 0 else out


def std_normal_quantile(p):
    """Inverse of :func:`std_normal_cdf` on the open interval (0, 1)."""
    arr = np.asarray(p, dtype=float)
    if np.any(~((arr > 0.0) & (arr < 1.0))):
        raise InvalidArgumentError(f"probability must lie in (0, 1), got {p!r}")
    out = special.ndtri(arr)
    return float(out) if out.ndim == 0 else out


def chi2_survival(x, nu):
    """Upper tail P(X > x) of a chi-square with ``nu`` (possibly fractional) df."""
    if nu <= 0:
        raise InvalidArgumentError(f"degrees of freedom must be positive, got {nu!r}")
    xa = np.maximum(np.asarray(x, dtype=float), 0.0)
    out = special.gammaincc(0.5 * nu, 0.5 * xa)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# bivariate normal
# ---------------------------------------------------------------------------

def _half_rule(n):
    x, w = leggauss(n)
    keep = x > 0
    return x[keep], w[keep]


_BVN_RULES = [_half_rule(6), _half_rule(12), _half_rule(20)]


def _bvn_moderate(h, k, r, xs, ws):
    hk = h * k
    hs = 0.5 * (h * h + k * k)
    asr = 0.5 * np.arcsin(r)
    nodes = np.concatenate([1.0 - xs, 1.0 + xs])
    weights = np.concatenate([ws, ws])
    sn = np.sin(asr[:, None] * nodes[None, :])
    terms = np.exp((sn * hk[:, None] - hs[:, None]) / (1.0 - sn * sn))
    return (terms @ weights) * asr / _TWO_PI + special.ndtr(-h) * special.ndtr(-k)


def _bvn_strong(h, k, r):
    xs, ws = _BVN_RULES[2]
    neg = r < 0
    k = np.where(neg, -k, k)
    hk = h * k
    bvn = np.zeros_like(h)

    inner = np.abs(r) < 1.0
    if np.any(inner):
        hi, ki, ri, hki = h[inner], k[inner], r[inner], hk[inner]
        as_ = (1.0 - ri) * (1.0 + ri)
        a = np.sqrt(as_)
        bs = (hi - ki) ** 2
        asr = -0.5 * (bs / as_ + hki)
        c = (4.0 - hki) / 8.0
        d = (12.0 - hki) / 80.0
        val = np.where(
            asr > -100.0,
            a * np.exp(asr) * (1.0 - c * (bs - as_) * (1.0 - d * bs) / 3.0 + c * d * as_ * as_),
            0.0,
        )
        b = np.sqrt(bs)
        sp = np.sqrt(_TWO_PI) * special.ndtr(-b / a)
        val = np.where(
            hki > -100.0,
            val - np.exp(-0.5 * hki) * sp * b * (1.0 - c * bs * (1.0 - d * bs) / 3.0),
            val,
        )
        a = 0.5 * a
        nodes = np.concatenate([1.0 - xs, 1.0 + xs])
        weights = np.concatenate([ws, ws])
        xsq = (a[:, None] * nodes[None, :]) ** 2
        asr_n = -0.5 * (bs[:, None] / xsq + hki[:, None])
        ok = asr_n > -100.0
        spn = 1.0 + c[:, None] * xsq * (1.0 + 5.0 * d[:, None] * xsq)
        rs = np.sqrt(1.0 - xsq)
        ep = np.exp(-0.5 * hki[:, None] * xsq / (1.0 + rs) ** 2) / rs
        contrib = np.where(ok, np.exp(np.where(ok, asr_n, 0.0)) * (spn - ep), 0.0)
        bvn[inner] = (a * (contrib @ weights) - val) / _TWO_PI

    out = np.empty_like(bvn)
    pos = ~neg
    out[pos] = bvn[pos] + special.ndtr(-np.maximum(h[pos], k[pos]))
    hn, kn, bn = h[neg], k[neg], bvn[neg]
    span = np.where(hn < 0, special.ndtr(kn) - special.ndtr(hn), special.ndtr(-hn) - special.ndtr(-kn))
    out[neg] = np.where(hn >= kn, -bn, span - bn)
    return out


def bvn_upper(h, k, r):
    """P(X > h, Y > k) for standard bivariate normal with correlation ``r``.

    Vectorized over broadcastable ``h``, ``k`` and ``r``.  Absolute error is
    around 1e-15 for finite arguments.
    """
    h, k, r = np.broadcast_arrays(
        np.asarray(h, dtype=float), np.asarray(k, dtype=float), np.asarray(r, dtype=float)
    )
    shape = h.shape
    h, k, r = h.ravel().copy(), k.ravel().copy(), np.clip(r.ravel(), -1.0, 1.0)
    out = np.zeros(h.shape)

    finite = np.isfinite(h) & np.isfinite(k)
    # one limit at -inf: the event reduces to a single marginal tail
    h_lo = (h == -np.inf) & (k != np.inf)
    k_lo = (k == -np.inf) & (h != np.inf)
    out[h_lo] = special.ndtr(-k[h_lo])
    out[k_lo & ~h_lo] = special.ndtr(-h[k_lo & ~h_lo])

    absr = np.abs(r)
    bands = [absr < 0.3, (absr >= 0.3) & (absr < 0.75), (absr >= 0.75) & (absr < 0.925)]
    for band, (xs, ws) in zip(bands, _BVN_RULES):
        m = finite & band
        if np.any(m):
            out[m] = _bvn_moderate(h[m], k[m], r[m], xs, ws)
    m = finite & (absr >= 0.925)
    if np.any(m):
        out[m] = _bvn_strong(h[m], k[m], r[m])
    return np.clip(out, 0.0, 1.0).reshape(shape)


def bvn_cdf(a, b, r):
    """P(X <= a, Y <= b) for standard bivariate normal with correlation ``r``."""
    out = bvn_upper(-np.asarray(a, dtype=float), -np.asarray(b, dtype=float), r)
    return float(out) if out.ndim == 0 else out


def bvn_density(a, b, r):
    """Standard bivariate normal density at (a, b); requires |r| < 1."""
    om = 1.0 - r * r
    q = (a * a - 2.0 * r * a * b + b * b) / om
    return np.exp(-0.5 * q) / (_TWO_PI * np.sqrt(om))


# ---------------------------------------------------------------------------
# correlation validation and degenerate reduction
# ---------------------------------------------------------------------------

def check_correlation(corr, dim=None) -> np.ndarray:
    """Validate a correlation matrix and return it as a float array."""
    R = np.atleast_2d(np.asarray(corr, dtype=float))
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise InvalidArgumentError(f"correlation matrix must be square, got shape {R.shape}")
    d = R.shape[0]
    if dim is not None and d != dim:
        raise InvalidArgumentError(f"correlation matrix is {d}x{d}, expected {dim}x{dim}")
    if d > MAX_DIM:
        raise UnsupportedDimensionError(f"dimension {d} exceeds the supported maximum {MAX_DIM}")
    if not np.all(np.isfinite(R)):
        raise InvalidArgumentError("correlation matrix has non-finite entries")
    if np.max(np.abs(R - R.T)) > 1e-12:
        raise InvalidArgumentError("correlation matrix is not symmetric")
    if np.max(np.abs(np.diag(R) - 1.0)) > 1e-12:
        raise InvalidArgumentError("correlation matrix must have unit diagonal")
    if np.any(np.abs(R) > 1.0 + 1e-12):
        raise InvalidArgumentError("correlations must lie in [-1, 1]")
    if d > 1 and np.linalg.eigvalsh(R).min() < -_PSD_TOL:
        raise InvalidArgumentError("correlation matrix is not positive semidefinite")
    return np.clip(R, -1.0, 1.0)


def _merge_perfect(R, U):
    """Collapse coordinate pairs with correlation +1 into one (min of limits).

    ``U`` has shape (Q, d).  Returns the reduced (R, U).
    """
    keep = list(range(R.shape[0]))
    U = U.copy()
    changed = True
    while changed:
        changed = False
        for a_i, i in enumerate(keep):
            for j in keep[a_i + 1:]:
                if R[i, j] >= 1.0 - _UNIT_CORR_TOL:
                    U[:, i] = np.minimum(U[:, i], U[:, j])
                    keep.remove(j)
                    changed = True
                    break
            if changed:
                break
    return R[np.ix_(keep, keep)], U[:, keep]


def _find_antipodal(R):
    d = R.shape[0]
    for i in range(d):
        for j in range(i + 1, d):
            if R[i, j] <= -1.0 + _UNIT_CORR_TOL:
                return i, j
    return None


# ---------------------------------------------------------------------------
# Plackett path integration for dimensions 3 and 4
# ---------------------------------------------------------------------------

def _block_prob(R, U):
    d = R.shape[0]
    if d == 1:
        return special.ndtr(U[:, 0])
    return bvn_cdf(U[:, 0], U[:, 1], R[0, 1])


def _plackett(R, U, tol):
    """Orthant probabilities for a batch of limits ``U`` (Q, d), d in {3, 4}."""
    d = R.shape[0]
    A = list(range(d // 2))
    B = list(range(d // 2, d))
    base = _block_prob(R[np.ix_(A, A)], U[:, A]) * _block_prob(R[np.ix_(B, B)], U[:, B])

    pairs = [(i, j) for i in A for j in B if R[i, j] != 0.0]
    if not pairs:
        return base
    R0 = R.copy()
    R0[np.ix_(A, B)] = 0.0
    R0[np.ix_(B, A)] = 0.0
    delta = R - R0

    def integrand(t):
        Rt = R0 + t * delta
        total = np.zeros(U.shape[0])
        for i, j in pairs:
            rest = [m for m in range(d) if m not in (i, j)]
            ij = [i, j]
            S = Rt[np.ix_(ij, ij)]
            C = Rt[np.ix_(rest, ij)]
            coef = np.linalg.solve(S, C.T).T
            cov = Rt[np.ix_(rest, rest)] - coef @ C.T
            sd = np.sqrt(np.maximum(np.diag(cov), 1e-300))
            mean = U[:, ij] @ coef.T
            z = (U[:, rest] - mean) / sd
            if len(rest) == 1:
                cond = special.ndtr(z[:, 0])
            else:
                rc = np.clip(cov[0, 1] / (sd[0] * sd[1]), -1.0, 1.0)
                cond = bvn_cdf(z[:, 0], z[:, 1], rc)
            dens = bvn_density(U[:, i], U[:, j], S[0, 1])
            total += delta[i, j] * dens * cond
        return total

    def rule(n):
        x, w = leggauss(n)
        t = 0.5 * (x + 1.0)
        acc = np.zeros(U.shape[0])
        for tk, wk in zip(t, w):
            acc += 0.5 * wk * integrand(tk)
        return acc

    n = 8
    prev = rule(n)
    while True:
        n *= 2
        cur = rule(n)
        if np.max(np.abs(cur - prev)) <= 0.1 * tol or n >= 1024:
            return base + cur
        prev = cur


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------

def _orthant_rows(R, U, tol):
    """Orthant probabilities for finite limits under a validated ``R``."""
    R, U = _merge_perfect(R, U)
    d = R.shape[0]
    anti = _find_antipodal(R) if d > 1 else None
    if anti is not None:
        # Z_j = -Z_i: the event is {-u_j <= Z_i <= u_i} intersected with the rest
        i, j = anti
        keep = [m for m in range(d) if m != j]
        Rk = R[np.ix_(keep, keep)]
        upper = U[:, keep]
        lower = U[:, keep].copy()
        pos = keep.index(i)
        lower[:, pos] = -U[:, j]
        p_hi = _orthant_rows(Rk, upper, tol)
        p_lo = _orthant_rows(Rk, lower, tol)
        return np.where(-U[:, j] < U[:, i], np.maximum(p_hi - p_lo, 0.0), 0.0)
    if d == 1:
        return special.ndtr(U[:, 0])
    if d == 2:
        return bvn_cdf(U[:, 0], U[:, 1], R[0, 1])
    return _plackett(R, U, tol)


def orthant_batch(uppers, corr, tol=DEFAULT_TOL):
    """P(Z <= u) for every row ``u`` of ``uppers`` under one correlation matrix.

    Rows may contain infinite limits; those rows are handled one at a time.
    Results are clamped to [0, 1].
    """
    U = np.atleast_2d(np.asarray(uppers, dtype=float))
    R = check_correlation(corr, dim=U.shape[1])
    if not 0.0 < tol <= 1e-2:
        raise InvalidArgumentError(f"tol must lie in (0, 1e-2], got {tol!r}")
    out = np.empty(U.shape[0])
    finite = np.all(np.isfinite(U), axis=1)
    if np.any(finite):
        out[finite] = _orthant_rows(R, U[finite], tol)
    for q in np.flatnonzero(~finite):
        u = U[q]
        if np.any(u == -np.inf) or np.any(np.isnan(u)):
            out[q] = 0.0
            continue
        idx = np.flatnonzero(np.isfinite(u))
        if idx.size == 0:
            out[q] = 1.0
        else:
            out[q] = _orthant_rows(R[np.ix_(idx, idx)], u[idx][None, :], tol)[0]
    return np.clip(out, 0.0, 1.0)


def mvn_cdf(upper: Sequence[float], corr, tol: float = DEFAULT_TOL, seed: int = DEFAULT_SEED) -> float:
    """P(Z <= upper) for Z ~ N(0, corr) with dimension at most 4.

    The integration is deterministic; ``seed`` is accepted for interface
    stability and recorded by callers but does not change the result.
    """
    u = np.atleast_1d(np.asarray(upper, dtype=float))
    if u.ndim != 1:
        raise InvalidArgumentError("upper must be a vector")
    if u.size > MAX_DIM:
        raise UnsupportedDimensionError(f"dimension {u.size} exceeds the supported maximum {MAX_DIM}")
    return float(orthant_batch(u[None, :], corr, tol=tol)[0])


@dataclass(frozen=True)
class OrthantQuery:
    upper: tuple[float, ...]
    corr: np.ndarray = field(repr=False)
    tol: float = DEFAULT_TOL
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if not 0.0 < self.tol <= 1e-2:
            raise InvalidArgumentError(f"tol must lie in (0, 1e-2], got {self.tol!r}")
        object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))
        object.__setattr__(self, "corr", check_correlation(self.corr, dim=len(self.upper)))

    def probability(self) -> float:
        return mvn_cdf(self.upper, self.corr, tol=self.tol, seed=self.seed)
