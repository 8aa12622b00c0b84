"""Classical non-spatial tests: Kruskal-Wallis, one-way ANOVA, Pillai MANOVA."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special
from scipy.stats import rankdata

from .errors import InvalidArgumentError, SingularDesignError
from .mvn import chi2_survival


@dataclass(frozen=True)
class BaselineResult:
    statistic: float
    pvalue: float
    df: tuple[float, ...]


def f_survival(F, d1, d2):
    """P(X > F) for an F(d1, d2) variable, via the regularized incomplete beta."""
    if F <= 0:
        return 1.0
    if np.isinf(F):
        return 0.0
    return float(special.betainc(0.5 * d2, 0.5 * d1, d2 / (d2 + d1 * F)))


def _as_groups(groups):
    out = [np.asarray(g, dtype=float).ravel() for g in groups]
    if len(out) < 2:
        raise InvalidArgumentError("need at least two groups")
    if any(g.size == 0 for g in out):
        raise InvalidArgumentError("every group must be nonempty")
    return out


def _as_columns(g):
    m = np.asarray(g, dtype=float)
    return m[:, None] if m.ndim == 1 else m


def kruskal_wallis(groups) -> BaselineResult:
    """Kruskal-Wallis H with the usual tie correction."""
    groups = _as_groups(groups)
    K = len(groups)
    sizes = np.array([g.size for g in groups])
    N = sizes.sum()
    if N < K + 1:
        raise InvalidArgumentError(f"need at least K+1={K + 1} observations, got {N}")
    ranks = rankdata(np.concatenate(groups))
    bounds = np.cumsum(sizes)[:-1]
    rank_sums = np.array([r.sum() for r in np.split(ranks, bounds)])
    H = 12.0 / (N * (N + 1)) * np.sum(rank_sums**2 / sizes) - 3.0 * (N + 1)
    _, counts = np.unique(ranks, return_counts=True)
    correction = 1.0 - np.sum(counts**3 - counts) / (N**3 - N)
    if correction <= 0:
        return BaselineResult(0.0, 1.0, (K - 1,))
    H /= correction
    return BaselineResult(float(H), chi2_survival(H, K - 1), (K - 1,))


def kw_multivariate(groups) -> float:
    """Bonferroni-combined per-variable Kruskal-Wallis p-value.

    ``groups`` is a sequence of (n_k, p) arrays.
    """
    mats = [_as_columns(g) for g in groups]
    p = mats[0].shape[1]
    pvals = [kruskal_wallis([m[:, j] for m in mats]).pvalue for j in range(p)]
    return bonferroni(pvals)


def bonferroni(pvals) -> float:
    pvals = np.asarray(pvals, dtype=float)
    return float(min(1.0, pvals.min() * pvals.size))


def anova_oneway(groups) -> BaselineResult:
    groups = _as_groups(groups)
    K = len(groups)
    allv = np.concatenate(groups)
    N = allv.size
    if N <= K:
        raise InvalidArgumentError("need more observations than groups")
    grand = allv.mean()
    ss_between = sum(g.size * (g.mean() - grand) ** 2 for g in groups)
    ss_within = sum(np.sum((g - g.mean()) ** 2) for g in groups)
    df1, df2 = K - 1, N - K
    means = np.array([g.mean() for g in groups])
    if np.all(means == means[0]):
        return BaselineResult(0.0, 1.0, (df1, df2))
    # tiny relative threshold: identical groups leave round-off in ss_between
    scale = np.sum((allv - grand) ** 2)
    if ss_within <= 1e-14 * max(scale, 1e-300):
        if ss_between > 1e-14 * max(scale, 1e-300):
            return BaselineResult(np.inf, 0.0, (df1, df2))
        return BaselineResult(0.0, 1.0, (df1, df2))
    F = (ss_between / df1) / (ss_within / df2)
    return BaselineResult(float(F), f_survival(F, df1, df2), (df1, df2))


def sscp_matrices(groups):
    """Between-group (H) and within-group (E) sums of squares and cross products."""
    mats = [np.asarray(g, dtype=float) for g in groups]
    allv = np.vstack(mats)
    grand = allv.mean(axis=0)
    p = allv.shape[1]
    H = np.zeros((p, p))
    E = np.zeros((p, p))
    for m in mats:
        dm = m.mean(axis=0) - grand
        H += m.shape[0] * np.outer(dm, dm)
        c = m - m.mean(axis=0)
        E += c.T @ c
    return H, E


def manova_pillai(groups) -> BaselineResult:
    """One-way MANOVA with Pillai's trace and its F approximation.

    ``statistic`` is the trace; ``df`` holds (approx F, df1, df2).
    """
    mats = [_as_columns(g) for g in groups]
    K = len(mats)
    if K < 2:
        raise InvalidArgumentError("need at least two groups")
    p = mats[0].shape[1]
    N = sum(m.shape[0] for m in mats)
    if N - K <= p:
        raise InvalidArgumentError(f"need N - K > p, got N={N}, K={K}, p={p}")
    H, E = sscp_matrices(mats)
    T = H + E
    if np.linalg.cond(T) > 1e12:
        raise SingularDesignError("total SSCP matrix is singular")
    V = float(np.trace(np.linalg.solve(T, H)))
    q = K - 1
    s = min(p, q)
    m = 0.5 * (abs(p - q) - 1)
    n = 0.5 * (N - K - p - 1)
    df1 = s * (2 * m + s + 1)
    df2 = s * (2 * n + s + 1)
    if V <= 0:
        return BaselineResult(max(V, 0.0), 1.0, (0.0, df1, df2))
    F = np.inf if V >= s else (2 * n + s + 1) / (2 * m + s + 1) * V / (s - V)
    return BaselineResult(V, f_survival(F, df1, df2), (float(F), df1, df2))
