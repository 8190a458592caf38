"""Class-directional reconstructions and the analyses built on them.

A linear probe turns per-channel inversions into a class image: each
channel's inversion enters with the probe's logit weight for that class.
Splitting the sum by weight sign gives the two hemispheres whose pointwise
sum is the class image exactly. On top of that sit the shared-background
extraction (Gram eigenvector, rank-one subtraction), region energy
rankings with causal feature ablation, and saliency faithfulness curves.
"""

import math
from dataclasses import dataclass

import numpy as np

from .lac import active_channel_cascades, cascade_apply
from .tensorops import sym_eigen
from .training import gap_features, probe_proba


@dataclass(frozen=True)
class ClassReconstruction:
    class_id: int
    weights: np.ndarray
    combined: np.ndarray
    positive: np.ndarray
    negative: np.ndarray


def class_reconstruction(enc, trace, params, probe, class_id):
    """Probe-weighted sum of per-channel inversions, split by weight sign.

    The weight on channel i is the derivative of the class logit with
    respect to that channel's pooled feature, which for a linear probe is
    just its weight row. Channels that are inactive or carry zero weight
    contribute to neither hemisphere; combined is positive + negative by
    construction, so hemisphere additivity is exact.
    """
    level = enc.levels - 1
    w = np.asarray(probe.weight[class_id], dtype=np.float64)
    idx, stack = active_channel_cascades(enc, trace, params, level)
    positive = np.zeros_like(stack[0])
    negative = np.zeros_like(stack[0])
    for row, c in enumerate(idx):
        if w[c] > 0.0:
            positive = positive + w[c] * stack[row]
        elif w[c] < 0.0:
            negative = negative + w[c] * stack[row]
    return ClassReconstruction(
        class_id=int(class_id),
        weights=w,
        combined=positive + negative,
        positive=positive,
        negative=negative,
    )


def mixed_seed_discrepancy(enc, trace, params, weights):
    """Relative gap between one cascade pass of the weighted seed and the
    weighted sum of per-channel cascades.

    For raw pullbacks the two coincide by linearity of the adjoint; the
    per-channel strips break that, because the mixed seed is normalized
    with the statistics of the mixture. Reported as a diagnostic, no
    exactness claim.
    """
    level = enc.levels - 1
    w = np.asarray(weights, dtype=np.float64)
    idx, stack = active_channel_cascades(enc, trace, params, level)
    per_channel = sum(w[c] * stack[row] for row, c in enumerate(idx))
    seed = w[:, None, None] * trace.levels[level]
    single = cascade_apply(enc, trace, params, level, seed)
    denom = np.linalg.norm(per_channel)
    if denom == 0.0:
        raise ValueError("weighted sum is identically zero")
    return float(np.linalg.norm(single - per_channel) / denom)


def fg_energy(xhat, mask):
    """Fraction of squared energy inside the mask, all planes pooled."""
    xhat = np.asarray(xhat, dtype=np.float64)
    sq = xhat * xhat
    total = float(sq.sum())
    if total == 0.0:
        return 0.0
    return float(sq[:, mask].sum() / total)


@dataclass(frozen=True)
class H1Report:
    gram: np.ndarray
    energy_fraction: float
    background: np.ndarray
    coefficients: np.ndarray
    residuals: np.ndarray
    pre_energy_variation: float
    post_energy_variation: float
    pre_cosine_range: tuple
    post_cosine_range: tuple


def _energy_variation(energies):
    mean = energies.mean()
    if mean == 0.0:
        return 0.0
    return float(energies.std() / mean)


def _cosine_range(rows):
    norms = np.sqrt((rows * rows).sum(axis=1))
    keep = rows[norms > 0.0] / norms[norms > 0.0, None]
    if keep.shape[0] < 2:
        return (math.nan, math.nan)
    cos = keep @ keep.T
    vals = cos[np.triu_indices(keep.shape[0], k=1)]
    return (float(vals.min()), float(vals.max()))


def gram_analysis(basis):
    """Shared-direction extraction from a stack of per-channel images.

    The leading Gram eigenvector assembles the common background image;
    projecting it out of every channel leaves the idiosyncratic residuals.
    The background sign is fixed so the coefficients sum nonnegative.
    """
    basis = np.asarray(basis, dtype=np.float64)
    if basis.ndim < 2:
        raise ValueError("basis must stack at least one image")
    flat = basis.reshape(basis.shape[0], -1)
    gram = flat @ flat.T
    gram = (gram + gram.T) / 2.0
    lam, vecs = sym_eigen(gram)
    scale = max(lam[0], 0.0)
    if lam[-1] < -1e-10 * max(scale, 1.0):
        raise ValueError("gram matrix is not positive semidefinite")
    total = lam.sum()
    if total <= 0.0:
        raise ValueError("every channel image is zero")
    background = (vecs[:, 0] @ flat).reshape(basis.shape[1:])
    background = background / np.linalg.norm(background)
    coefficients = flat @ background.ravel()
    if coefficients.sum() < 0.0:
        background = -background
        coefficients = -coefficients
    residuals = basis - coefficients.reshape((-1,) + (1,) * (basis.ndim - 1)) * background
    res_flat = residuals.reshape(basis.shape[0], -1)
    return H1Report(
        gram=gram,
        energy_fraction=float(lam[0] / total),
        background=background,
        coefficients=coefficients,
        residuals=residuals,
        pre_energy_variation=_energy_variation(gram.diagonal()),
        post_energy_variation=_energy_variation((res_flat * res_flat).sum(axis=1)),
        pre_cosine_range=_cosine_range(flat),
        post_cosine_range=_cosine_range(res_flat),
    )


def background_coefficient(weights, coefficients):
    """Inner product of probe weights with the background coefficients."""
    return float(np.asarray(weights, dtype=np.float64) @ np.asarray(coefficients, dtype=np.float64))


def ecr(basis, region):
    """Per-channel fraction of squared energy inside the region."""
    basis = np.asarray(basis, dtype=np.float64)
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise ValueError("region is empty")
    sq = basis * basis
    inside = sq[:, :, region].sum(axis=(1, 2))
    total = sq.sum(axis=tuple(range(1, basis.ndim)))
    out = np.zeros(basis.shape[0])
    nz = total > 0.0
    out[nz] = inside[nz] / total[nz]
    return out


def ecr_ranking(scores):
    """Channel order by descending score, ties broken by channel index."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


@dataclass(frozen=True)
class AblationCurve:
    order_name: str
    fractions: np.ndarray
    probabilities: np.ndarray
    std: np.ndarray = None

    def __post_init__(self):
        f = np.asarray(self.fractions, dtype=np.float64)
        if f[0] != 0.0 or f[-1] != 1.0 or np.any(np.diff(f) <= 0.0):
            raise ValueError("fractions must increase strictly from 0 to 1")
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.min() < 0.0 or p.max() > 1.0:
            raise ValueError("probabilities must lie in [0, 1]")


DEFAULT_FRACTIONS = tuple(np.round(np.linspace(0.0, 1.0, 11), 2))


def ablation_curve(probe, features, target_class, order, fractions=DEFAULT_FRACTIONS, name="custom"):
    """Mean target softmax as the top-ranked features are zeroed.

    At fraction r the first ceil(r*C) channels of the order are zeroed in
    every feature row before the probe runs.
    """
    features = np.asarray(features, dtype=np.float64)
    order = np.asarray(order)
    n_ch = features.shape[1]
    if sorted(order.tolist()) != list(range(n_ch)):
        raise ValueError("order must be a permutation of all channels")
    probs = []
    for frac in fractions:
        k = math.ceil(frac * n_ch)
        cut = features.copy()
        cut[:, order[:k]] = 0.0
        probs.append(float(probe_proba(probe, cut)[:, target_class].mean()))
    return AblationCurve(
        order_name=name,
        fractions=np.asarray(fractions, dtype=np.float64),
        probabilities=np.array(probs),
    )


def random_ablation_curve(probe, features, target_class, fractions=DEFAULT_FRACTIONS, orders=50, seed=0):
    """Mean and spread of the ablation curve over random channel orders."""
    rng = np.random.default_rng(seed)
    n_ch = np.asarray(features).shape[1]
    curves = np.stack(
        [
            ablation_curve(
                probe, features, target_class, rng.permutation(n_ch), fractions, name="random"
            ).probabilities
            for _ in range(orders)
        ]
    )
    return AblationCurve(
        order_name="random",
        fractions=np.asarray(fractions, dtype=np.float64),
        probabilities=curves.mean(axis=0),
        std=curves.std(axis=0),
    )


def saliency_map(xhat):
    """Per-pixel magnitude across planes."""
    xhat = np.asarray(xhat, dtype=np.float64)
    return np.sqrt((xhat * xhat).sum(axis=0))


def pixel_order(saliency):
    """Pixels by descending saliency; equal values keep row-major order."""
    return np.argsort(-np.asarray(saliency, dtype=np.float64).ravel(), kind="stable")


def insertion_deletion_curves(enc, probe, saliency, x, target_class, steps=100):
    """Target probability as salient pixels are revealed or removed.

    Insertion grows from the zero image by adding the most salient pixels
    first; deletion starts from the image and zeroes them in the same
    order. One batched encoder pass covers each curve.
    """
    x = np.asarray(x, dtype=np.float64)
    order = pixel_order(saliency)
    npix = order.size
    fractions = np.linspace(0.0, 1.0, steps + 1)
    counts = [math.ceil(f * npix) for f in fractions]
    flat = x.reshape(x.shape[0], -1)
    ins = np.zeros((len(counts),) + x.shape)
    dele = np.zeros((len(counts),) + x.shape)
    for t, k in enumerate(counts):
        pick = order[:k]
        frame = np.zeros_like(flat)
        frame[:, pick] = flat[:, pick]
        ins[t] = frame.reshape(x.shape)
        frame = flat.copy()
        frame[:, pick] = 0.0
        dele[t] = frame.reshape(x.shape)
    p_ins = probe_proba(probe, gap_features(enc, ins))[:, target_class]
    p_del = probe_proba(probe, gap_features(enc, dele))[:, target_class]
    return fractions, p_ins, p_del


def insertion_deletion_auc(enc, probe, saliency, x, target_class, steps=100):
    fractions, p_ins, p_del = insertion_deletion_curves(
        enc, probe, saliency, x, target_class, steps=steps
    )
    return (
        float(np.trapezoid(p_ins, fractions)),
        float(np.trapezoid(p_del, fractions)),
    )
