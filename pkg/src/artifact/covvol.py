"""Channel subsets ranked by covariance volume, and what corruption does to it.

The selector is a pivoted partial Cholesky on the pooled-feature
covariance: each step takes the channel with the largest residual variance
and deflates the rest, which is exactly the greedy maximizer of the subset
log-determinant. A brute-force enumerator serves as the oracle at desk
sizes. The admissible-volume side computes Gram determinants restricted to
the hyperplane orthogonal to the coefficient vector, and a synthetic
rank-one-plus-residual ensemble ties the two objectives together
experimentally. Corruption indicators (log-determinant, trace, effective
rank, MMD) quantify how feature geometry collapses under noise.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .tensorops import check_finite, cholesky_lower, logdet_psd, orthonormal_complement, sym_eigen

SEVERITY_SIGMA = (0.0, 0.05, 0.1, 0.2, 0.3, 0.4)


def centered_covariance(h):
    """(1/N) (H - mean)^T (H - mean) over feature rows."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] < 2:
        raise ValueError("need a 2-d feature matrix with at least two rows")
    check_finite("features", h)
    d = h - h.mean(axis=0)
    return (d.T @ d) / h.shape[0]


@dataclass(frozen=True)
class SelectionResult:
    indices: tuple
    pivots: tuple
    logdet: float
    truncated: bool = False

    def __post_init__(self):
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("selected indices must be distinct")


def greedy_select(sigma, k):
    """Pivoted partial Cholesky: argmax residual variance, then deflate.

    Ties break toward the lowest channel index. If every remaining pivot
    falls below 1e-12 the selection stops early and says so; the summed
    log pivots equal the selected submatrix log-determinant.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    n = sigma.shape[0]
    if sigma.ndim != 2 or sigma.shape[1] != n:
        raise ValueError("covariance must be square")
    if not 1 <= k <= n:
        raise ValueError(f"k must be in 1..{n}")
    work = (sigma + sigma.T) / 2.0
    chosen = []
    pivots = []
    for _ in range(k):
        diag = work.diagonal().copy()
        diag[chosen] = -np.inf
        best = int(np.argmax(diag))
        if diag[best] <= 1e-12:
            return SelectionResult(
                indices=tuple(chosen),
                pivots=tuple(pivots),
                logdet=float(sum(math.log(p) for p in pivots)),
                truncated=True,
            )
        chosen.append(best)
        pivots.append(float(diag[best]))
        col = work[:, best].copy()
        work = work - np.outer(col, col) / col[best]
    return SelectionResult(
        indices=tuple(chosen),
        pivots=tuple(pivots),
        logdet=float(sum(math.log(p) for p in pivots)),
    )


def subset_logdet(sigma, subset):
    sub = np.asarray(sigma)[np.ix_(subset, subset)]
    try:
        return logdet_psd(sub)
    except ValueError:
        return -math.inf


def brute_force_select(sigma, k):
    """Exhaustive argmax of the subset log-determinant; ties keep the
    lexicographically first subset."""
    sigma = np.asarray(sigma, dtype=np.float64)
    n = sigma.shape[0]
    if math.comb(n, k) > 10**6:
        raise ValueError("subset count exceeds the brute-force budget")
    best = None
    best_val = -math.inf
    for subset in itertools.combinations(range(n), k):
        val = subset_logdet(sigma, subset)
        if val > best_val:
            best, best_val = subset, val
    return SelectionResult(indices=best, pivots=(), logdet=float(best_val))


def gap_energy_select(h, k):
    """Baseline: top-k channels by mean squared feature value."""
    h = np.asarray(h, dtype=np.float64)
    energy = (h * h).mean(axis=0)
    order = np.argsort(-energy, kind="stable")[:k]
    sigma = centered_covariance(h)
    return SelectionResult(
        indices=tuple(int(i) for i in order),
        pivots=tuple(float(energy[i]) for i in order),
        logdet=float(subset_logdet(sigma, tuple(order))),
    )


def admissible_volume(delta, c, basis=None):
    """Gram-determinant volume of the residual span restricted to the
    hyperplane orthogonal to the coefficient vector.

    Any orthonormal basis of that hyperplane gives the same value; the
    default is the deterministic Householder complement.
    """
    delta = np.asarray(delta, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64).ravel()
    if delta.ndim != 2 or delta.shape[1] != c.size:
        raise ValueError("delta must have one column per coefficient")
    if c.size < 2:
        raise ValueError("need at least two channels")
    if basis is None:
        basis = orthonormal_complement(c)
    else:
        basis = np.asarray(basis, dtype=np.float64)
        if basis.shape != (c.size, c.size - 1):
            raise ValueError("basis must have one column fewer than channels")
        if np.abs(basis.T @ c).max() > 1e-9 * max(np.linalg.norm(c), 1.0):
            raise ValueError("basis must be orthogonal to the coefficients")
    gram = basis.T @ (delta.T @ delta) @ basis
    lam, _ = sym_eigen((gram + gram.T) / 2.0)
    return float(np.sqrt(np.prod(np.clip(lam, 0.0, None))))


@dataclass(frozen=True)
class H1Ensemble:
    background: np.ndarray
    coefficients: np.ndarray
    residuals: np.ndarray  # columns are per-channel residual directions

    def __post_init__(self):
        dots = self.residuals.T @ self.background
        if np.abs(dots).max() > 1e-9:
            raise ValueError("residuals must be orthogonal to the background")


def make_h1_ensemble(channels, dim, rng, theorem_conditions=True):
    """Synthetic rank-one-plus-residual family.

    With the theorem-conditions flag the coefficients have unit magnitude
    and the residual directions unit norm (the non-degeneracy regime); off
    the flag both vary wildly, for the reported-not-asserted ablation.
    """
    b = rng.standard_normal(dim)
    b /= np.linalg.norm(b)
    res = rng.standard_normal((dim, channels))
    res -= np.outer(b, b @ res)
    res /= np.linalg.norm(res, axis=0)
    if theorem_conditions:
        coeff = rng.choice([-1.0, 1.0], size=channels)
    else:
        res = res * np.exp(rng.uniform(-2.0, 2.0, size=channels))
        coeff = rng.normal(0.0, 1.0, size=channels) * np.exp(rng.uniform(-1.5, 1.5, channels))
    return H1Ensemble(background=b, coefficients=coeff, residuals=res)


def ensemble_gap_features(ens, images, rng, background_scale=1.0):
    """Per-image features: shared scalar times coefficients plus the
    residual response to an isotropic field.

    background_scale is the std of the shared scalar; a dominant shared
    component is the regime the rank-one model describes.
    """
    b = background_scale * rng.standard_normal(images)
    zeta = rng.standard_normal((images, ens.background.size))
    return b[:, None] * ens.coefficients[None, :] + zeta @ ens.residuals


def rank_correlation(a, b):
    """Spearman correlation with average ranks on ties."""

    def ranks(v):
        v = np.asarray(v, dtype=np.float64)
        order = np.argsort(v, kind="stable")
        r = np.empty(v.size)
        r[order] = np.arange(1, v.size + 1, dtype=np.float64)
        for val in np.unique(v):
            hit = v == val
            if hit.sum() > 1:
                r[hit] = r[hit].mean()
        return r

    ra, rb = ranks(a), ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra @ ra) * (rb @ rb))
    if denom == 0.0:
        return 0.0
    return float((ra @ rb) / denom)


def duality_experiment(
    channels=8,
    k=3,
    trials=20,
    images=20000,
    dim=64,
    background_scale=3.0,
    theorem_conditions=True,
    seed=0,
    tie_tol=1e-9,
):
    """Volume objective vs covariance log-determinant over all subsets.

    Each trial draws a fresh ensemble, samples synthetic features, and
    enumerates every size-k subset under both objectives. Reports top-1
    agreement (exact volume ties are recorded as such), the subset-level
    rank correlation, and the logged conditioning ratio per subset. The
    feature count and background amplitude defaults are sized so sampling
    noise stays below the subset separation; the agreement claim only
    holds when the shared component dominates, which is the regime the
    rank-one model describes.
    """
    subsets = list(itertools.combinations(range(channels), k))
    runs = []
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        ens = make_h1_ensemble(channels, dim, rng, theorem_conditions=theorem_conditions)
        feats = ensemble_gap_features(ens, images, rng, background_scale=background_scale)
        sigma = centered_covariance(feats)
        vol_obj = np.empty(len(subsets))
        cov_obj = np.empty(len(subsets))
        rho = np.empty(len(subsets))
        for si, subset in enumerate(subsets):
            sel = list(subset)
            delta = ens.residuals[:, sel]
            coeff = ens.coefficients[sel]
            vol = admissible_volume(delta, coeff)
            vol_obj[si] = 2.0 * math.log(vol) if vol > 0.0 else -math.inf
            cov_obj[si] = subset_logdet(sigma, sel)
            gram = delta.T @ delta
            low = cholesky_lower(gram)
            solved = np.linalg.solve(low.T, np.linalg.solve(low, coeff))
            rho[si] = float(coeff @ solved / (coeff @ coeff))
        top_vol = int(np.argmax(vol_obj))
        top_cov = int(np.argmax(cov_obj))
        spread = np.sort(vol_obj)
        tied = spread[-1] - spread[0] <= tie_tol
        outcome = "tie" if tied else ("agree" if top_vol == top_cov else "disagree")
        runs.append(
            {
                "trial": t,
                "outcome": outcome,
                "volume_argmax": subsets[top_vol],
                "covariance_argmax": subsets[top_cov],
                "rank_correlation": rank_correlation(vol_obj, cov_obj),
                "rho_range": (float(rho.min()), float(rho.max())),
            }
        )
    agreed = sum(r["outcome"] != "disagree" for r in runs)
    return {
        "subsets": subsets,
        "trials": runs,
        "agreement_rate": agreed / len(runs),
        "mean_rank_correlation": float(np.mean([r["rank_correlation"] for r in runs])),
        "theorem_conditions": theorem_conditions,
    }


def effective_rank(sigma):
    """Exponential of the spectral entropy of the covariance."""
    lam, _ = sym_eigen(np.asarray(sigma, dtype=np.float64))
    lam = np.clip(lam, 0.0, None)
    total = lam.sum()
    if total <= 0.0:
        raise ValueError("covariance has no spectrum")
    p = lam[lam > 0.0] / total
    return float(np.exp(-(p * np.log(p)).sum()))


def mmd_distance(x, y):
    """Biased Gaussian-kernel V-statistic; bandwidth is the pooled median
    pairwise distance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pooled = np.vstack([x, y])
    sq = ((pooled[:, None, :] - pooled[None, :, :]) ** 2).sum(axis=2)
    tri = np.sqrt(sq[np.triu_indices(pooled.shape[0], k=1)])
    band = float(np.median(tri))
    if band == 0.0:
        return 0.0
    kern = np.exp(-sq / (2.0 * band * band))
    n, m = x.shape[0], y.shape[0]
    kxx = kern[:n, :n].mean()
    kyy = kern[n:, n:].mean()
    kxy = kern[:n, n:].mean()
    return float(np.sqrt(max(kxx + kyy - 2.0 * kxy, 0.0)))


def ood_indicators(h_clean, h_corrupt):
    """Geometry of the corrupted features, plus their distance from clean."""
    sigma = centered_covariance(h_corrupt)
    return {
        "logdet": logdet_psd(sigma),
        "trace": float(np.trace(sigma)),
        "effective_rank": effective_rank(sigma),
        "mmd": mmd_distance(h_clean, h_corrupt),
    }


def corrupt(x, severity, rng):
    """Additive Gaussian noise scaled to a fraction of the image's own std.

    The noise field is drawn at every severity, so a shared generator
    state yields the same pattern scaled differently across the grid.
    """
    if not 0 <= severity < len(SEVERITY_SIGMA):
        raise ValueError(f"severity must be in 0..{len(SEVERITY_SIGMA) - 1}")
    x = np.asarray(x, dtype=np.float64)
    noise = rng.standard_normal(x.shape)
    return x + SEVERITY_SIGMA[severity] * x.std() * noise


def severity_sweep(enc, images, seed=0, replicates=5):
    """Indicator table over the whole severity grid for one image batch.

    Each image keeps one noise realization per replicate, reused at every
    severity (only the amplitude changes), and the replicate feature rows
    pool into a single covariance per severity. Both choices are variance
    reduction: the indicator response to small amplitudes is weak, and
    independent redraws per grid point would drown it in estimator noise.
    """
    from .training import gap_features

    h_clean = gap_features(enc, images)
    rows = []
    for s in range(len(SEVERITY_SIGMA)):
        batches = []
        for r in range(replicates):
            noisy = [
                corrupt(x, s, np.random.default_rng([seed, r, i]))
                for i, x in enumerate(images)
            ]
            batches.append(gap_features(enc, noisy))
        ind = ood_indicators(h_clean, np.vstack(batches))
        rows.append({"severity": s, "sigma": SEVERITY_SIGMA[s], **ind})
    return rows
