"""Normalization strips over the backward cascade.

Pulling a channel seed back through the encoder crosses one stage boundary
at a time. At each crossing a per-channel affine strip re-centers and
re-norms the signal, so what reaches pixel space is a scale-free basis
tensor instead of a raw gradient. This module owns the strip itself, the
full cascade, the weighted synthesis of per-channel bases, the exact
principal/offset decomposition of that synthesis, and the recorded-graph
backward pass used to train the strip parameters.

Shape conventions: site signals are (C, H, W) with per-channel groups of
n = H*W positions; the stem site treats each color plane as its own group.
"""

import math
from dataclasses import dataclass

import numpy as np

from .encoder import (
    active_union_field,
    channel_seed,
    dilate_one,
    pullback_to_pixels,
    raw_vjp,
    simplex_measure,
    stage_jvp,
    stage_pullback,
    stem_jvp,
    stem_pullback,
)
from .fileio import read_container, write_container
from .tensorops import project_zero_mean


def site_channels(enc):
    """Channels seen by each strip site.

    Boundary site b{j} strips the stage-j pullback output, which lives in
    the space below stage j; the stem site strips the color planes.
    """
    out = {"b0": enc.config.widths[0]}
    for j in range(1, enc.levels):
        out[f"b{j}"] = enc.config.widths[j - 1]
    out["stem"] = enc.config.input_channels
    return out


def cascade_sites(enc, l):
    """Sites crossed by a cascade sourced at level l, in application order."""
    if not 0 <= l < enc.levels:
        raise ValueError(f"level {l} out of range 0..{enc.levels - 1}")
    return tuple(f"b{j}" for j in range(l, -1, -1)) + ("stem",)


@dataclass(frozen=True)
class LACParams:
    """Per-site, per-channel affine pairs plus one shared variance guard."""

    gamma: dict
    beta: dict
    epsilon: float

    def __post_init__(self):
        object.__setattr__(
            self, "gamma", {s: np.asarray(v, dtype=np.float64) for s, v in self.gamma.items()}
        )
        object.__setattr__(
            self, "beta", {s: np.asarray(v, dtype=np.float64) for s, v in self.beta.items()}
        )
        if set(self.gamma) != set(self.beta):
            raise ValueError("gamma and beta must cover the same sites")
        for site, g in self.gamma.items():
            if g.ndim != 1 or g.shape != self.beta[site].shape:
                raise ValueError(f"site {site!r}: gamma and beta must be matching 1-d arrays")
        if not self.epsilon >= 0.0:
            raise ValueError("epsilon must be nonnegative")

    def copy(self):
        return LACParams(
            gamma={s: v.copy() for s, v in self.gamma.items()},
            beta={s: v.copy() for s, v in self.beta.items()},
            epsilon=self.epsilon,
        )


def init_params(enc, epsilon=1e-8):
    """Identity strips: gamma 1, beta 0 at every site."""
    counts = site_channels(enc)
    return LACParams(
        gamma={s: np.ones(c) for s, c in counts.items()},
        beta={s: np.zeros(c) for s, c in counts.items()},
        epsilon=epsilon,
    )


def groupnorm_strip(v, gamma, beta, eps):
    """One channel, scalar affine: gamma*sqrt(n)*(v - mean)/sqrt(||v - mean||^2 + n*eps) + beta.

    With eps = 0 the output has spatial mean exactly beta and offset norm
    exactly |gamma|*sqrt(n); a constant input is rejected because the
    direction is undefined.
    """
    v = np.asarray(v, dtype=np.float64)
    n = v.size
    u = v - v.mean()
    denom = math.sqrt(float((u * u).sum()) + n * eps)
    if denom == 0.0:
        raise ValueError("degenerate constant channel")
    return gamma * math.sqrt(n) * u / denom + beta


def strip_site(v, gamma, beta, eps):
    """All channels of one site at once.

    v is (..., C, H, W) with gamma/beta of shape (C,); leading axes are
    independent cascades sharing the site parameters. Each (channel, batch)
    group normalizes over its own n = H*W positions.
    """
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[-2] * v.shape[-1]
    u = v - v.mean(axis=(-2, -1), keepdims=True)
    sq = (u * u).sum(axis=(-2, -1), keepdims=True)
    if eps == 0.0 and np.any(sq == 0.0):
        dead = sorted({int(i[-1]) for i in np.argwhere(sq[..., 0, 0] == 0.0)})
        raise ValueError(f"degenerate constant channel: site position(s) {dead}")
    denom = np.sqrt(sq + n * eps)
    return gamma[:, None, None] * math.sqrt(n) * u / denom + beta[:, None, None]


def cascade_apply(enc, trace, params, l, seed, record=None):
    """Pull an h_l cotangent to pixel space, stripping at each site.

    record, when a list, receives {"site", "pre"} per strip in application
    order; cascade_param_grads replays it backward. The strip count is
    always l + 2 (one per boundary below the source, plus the stem). seed
    may carry leading batch axes; the sites are traversed once for the
    whole stack.
    """
    g = np.asarray(seed, dtype=np.float64)
    for j in range(l, -1, -1):
        g = stage_pullback(enc, trace, j, g)
        site = f"b{j}"
        if record is not None:
            record.append({"site": site, "pre": g})
        g = strip_site(g, params.gamma[site], params.beta[site], params.epsilon)
    g = stem_pullback(enc, trace, g)
    if record is not None:
        record.append({"site": "stem", "pre": g})
    return strip_site(g, params.gamma["stem"], params.beta["stem"], params.epsilon)


def cascade_invert(enc, trace, params, l, c, record=None):
    """Scale-free pixel basis for channel (l, c).

    An inactive channel is never normalized into noise: with eps > 0 the
    dead path resolves analytically to the stem offsets (constant planes);
    with eps = 0 it is rejected like any other degenerate channel.
    """
    if not 0 <= l < enc.levels:
        raise ValueError(f"level {l} out of range 0..{enc.levels - 1}")
    if not 0 <= c < enc.level_channels(l):
        raise ValueError(f"channel {c} out of range 0..{enc.level_channels(l) - 1} at level {l}")
    seed = channel_seed(trace, l, c)
    if not seed.any():
        if params.epsilon == 0.0:
            raise ValueError(f"degenerate constant channel: ({l}, {c}) is inactive")
        hw = enc.config.input_size
        return np.ones((enc.config.input_channels, hw, hw)) * params.beta["stem"][:, None, None]
    return cascade_apply(enc, trace, params, l, seed, record)


@dataclass(frozen=True)
class Reconstruction:
    """Weighted superposition of per-channel pixel bases at one level."""

    xhat: np.ndarray
    weights: np.ndarray
    active: np.ndarray
    terms: np.ndarray = None

    def __post_init__(self):
        if self.terms is not None and self.xhat.shape != self.terms.shape[1:]:
            raise ValueError("per-channel terms do not match the reconstruction shape")


def active_channel_cascades(enc, trace, params, l, record=None):
    """Every active channel of level l pulled down in one stacked traversal.

    Returns (channel indices, (A, planes, H, W) stack). The sites run once
    for the whole stack, so this is the fast path training and synthesis
    share; a stack of one is bit-identical to the single-channel cascade.
    """
    h = trace.level(l)
    idx = [c for c in range(h.shape[0]) if h[c].any()]
    if not idx:
        raise ValueError(f"degenerate input: every channel at level {l} is inactive")
    seeds = np.zeros((len(idx),) + h.shape)
    for row, c in enumerate(idx):
        seeds[row, c] = h[c]
    return idx, cascade_apply(enc, trace, params, l, seeds, record=record)


def synthesize(enc, trace, params, l, keep_terms=False):
    """Reconstruct at level l: sum of simplex-weighted channel bases.

    Inactive channels carry zero weight, so their basis never enters; the
    sum runs in fixed channel order and the returned xhat is exactly the
    sum of the per-channel terms.
    """
    e = simplex_measure(trace, l)
    h = trace.level(l)
    active = np.array([bool(h[c].any()) for c in range(h.shape[0])])
    hw = enc.config.input_size
    terms = np.zeros((h.shape[0], enc.config.input_channels, hw, hw))
    idx, stack = active_channel_cascades(enc, trace, params, l)
    for row, c in enumerate(idx):
        terms[c] = e[c] * stack[row]
    return Reconstruction(
        xhat=terms.sum(axis=0),
        weights=e,
        active=active,
        terms=terms if keep_terms else None,
    )


def grad_support_check(enc, trace, l, xhat, tol=1e-10, union=None):
    """Forward-difference support of a reconstruction vs the dilated field union.

    A pixel "moves" when either forward difference at it exceeds tol on any
    plane. Every moving pixel must lie in the one-pixel dilation of the
    level-l active-field union; the count of escapees is the violation
    figure the structural guarantee promises to be zero (when the nested
    precondition holds). Pass `union` to reuse an already computed
    active-field union; it is expensive and trace-determined.
    """
    if union is None:
        union = active_union_field(enc, trace, l)
    allowed = dilate_one(union)
    down = np.zeros_like(xhat)
    down[:, :-1, :] = xhat[:, 1:, :] - xhat[:, :-1, :]
    right = np.zeros_like(xhat)
    right[:, :, :-1] = xhat[:, :, 1:] - xhat[:, :, :-1]
    moving = ((np.abs(down) > tol) | (np.abs(right) > tol)).any(axis=0)
    violation_mask = moving & ~allowed
    return {
        "level": l,
        "violations": int(violation_mask.sum()),
        "moving_pixels": int(moving.sum()),
        "allowed_pixels": int(allowed.sum()),
        "violation_mask": violation_mask,
    }


@dataclass(frozen=True)
class FVDecomposition:
    """Split of a reconstruction into stripped directions plus constant offsets.

    principal + residual reproduces the synthesis; the residual is constant
    per plane, with sup-norm equal to `bound` (the weighted stem offsets).
    directions hold per-channel plane tensors with unit norm and zero mean
    when eps = 0; effective_weights fold the simplex weight into the stem
    gain gamma*sqrt(n). dc_errors measure, per channel, the gain-weighted
    distance between the direction the cascade realized and the centered
    unit direction of the raw pullback.
    """

    principal: np.ndarray
    residual: np.ndarray
    xhat: np.ndarray
    effective_weights: np.ndarray
    directions: np.ndarray
    bound: float
    dc_errors: np.ndarray


def fv_decompose(enc, trace, params, l):
    h = trace.level(l)
    e = simplex_measure(trace, l)
    num = h.shape[0]
    planes = enc.config.input_channels
    hw = enc.config.input_size
    n = hw * hw
    gain = params.gamma["stem"] * math.sqrt(n)
    offsets_beta = params.beta["stem"]

    rec = []
    idx, stack = active_channel_cascades(enc, trace, params, l, record=rec)
    entering = rec[-1]["pre"]
    seeds = np.zeros((len(idx),) + h.shape)
    for row, c in enumerate(idx):
        seeds[row, c] = h[c]
    raws = pullback_to_pixels(enc, trace, l, seeds)

    directions = np.zeros((num, planes, hw, hw))
    eff = np.zeros((num, planes))
    dc = np.full(num, np.nan)
    principal = np.zeros((planes, hw, hw))
    weight_on = 0.0
    for row, c in enumerate(idx):
        v = stack[row]
        for k in range(planes):
            if gain[k] != 0.0:
                directions[c, k] = (v[k] - offsets_beta[k]) / gain[k]
        eff[c] = e[c] * gain
        principal += eff[c][:, None, None] * directions[c]
        weight_on += e[c]
        acc = 0.0
        for k in range(planes):
            fu = project_zero_mean(entering[row, k].ravel())
            ru = project_zero_mean(raws[row, k].ravel())
            fn = math.sqrt(float(fu @ fu))
            rn = math.sqrt(float(ru @ ru))
            if fn == 0.0 or rn == 0.0:
                acc = np.nan
                break
            d = fu / fn - ru / rn
            acc += gain[k] ** 2 * float(d @ d)
        dc[c] = math.sqrt(acc) if not np.isnan(acc) else np.nan

    offsets = offsets_beta * weight_on
    residual = np.ones((planes, hw, hw)) * offsets[:, None, None]
    return FVDecomposition(
        principal=principal,
        residual=residual,
        xhat=principal + residual,
        effective_weights=eff,
        directions=directions,
        bound=float(np.max(np.abs(offsets))),
        dc_errors=dc,
    )


def path_moment_check(enc, trace, params, site):
    """Moments of every standardized signal arriving at one shared site.

    Before the affine is applied, a strip's internal signal is
    sqrt(n)*(v - mean)/sqrt(||v - mean||^2 + n*eps) per channel. For each
    source stage that crosses `site` and each active source channel, the
    per-site-channel mean and second moment of that signal are reported;
    with eps = 0 they are 0 and 1 identically, with eps > 0 the second
    moment contracts to var/(var + eps). Constant arrivals are flagged and
    excluded rather than standardized.
    """
    counts = site_channels(enc)
    if site not in counts:
        raise ValueError(f"unknown site {site!r}; expected one of {sorted(counts)}")
    start = 0 if site == "stem" else int(site[1:])
    eps = params.epsilon
    entries = []
    degenerate = []
    for l in range(start, enc.levels):
        h = trace.level(l)
        for c in range(h.shape[0]):
            if not h[c].any():
                continue
            rec = []
            try:
                cascade_apply(enc, trace, params, l, channel_seed(trace, l, c), rec)
            except ValueError:
                pass  # eps=0 rejection mid-cascade; whatever reached the site still counts
            pre = next((r["pre"] for r in rec if r["site"] == site), None)
            if pre is None:
                degenerate.append({"source_level": l, "channel": c, "site_channel": None})
                continue
            n = pre.shape[1] * pre.shape[2]
            u = pre - pre.mean(axis=(1, 2), keepdims=True)
            sq = (u * u).sum(axis=(1, 2))
            for i in range(pre.shape[0]):
                if sq[i] == 0.0:
                    degenerate.append({"source_level": l, "channel": c, "site_channel": i})
                    continue
                z = math.sqrt(n) * u[i] / math.sqrt(sq[i] + n * eps)
                entries.append(
                    {
                        "source_level": l,
                        "channel": c,
                        "site_channel": i,
                        "mean": float(z.mean()),
                        "second_moment": float((z * z).mean()),
                    }
                )
    return {
        "site": site,
        "epsilon": eps,
        "entries": entries,
        "degenerate": degenerate,
        "max_abs_mean": max((abs(x["mean"]) for x in entries), default=0.0),
        "max_second_moment_error": max(
            (abs(x["second_moment"] - 1.0) for x in entries), default=0.0
        ),
    }


def highfreq_fraction(field):
    """Energy fraction above a quarter of the sampling rate on either axis."""
    f = np.asarray(field, dtype=np.float64)
    spec = np.fft.fft2(f, axes=(-2, -1))
    power = (spec * spec.conj()).real
    band = (np.abs(np.fft.fftfreq(f.shape[-2]))[:, None] > 0.25) | (
        np.abs(np.fft.fftfreq(f.shape[-1]))[None, :] > 0.25
    )
    total = float(power.sum())
    if total == 0.0:
        return 0.0
    return float(power[..., band].sum() / total)


def spike_energy_ratio(enc, trace, l, c, params):
    """High-frequency energy fraction of the raw pullback vs its stripped
    counterpart for one channel; the pair quantifies what boundary
    crossings inject and what the strips remove."""
    return (
        highfreq_fraction(raw_vjp(enc, trace, l, c)),
        highfreq_fraction(cascade_invert(enc, trace, params, l, c)),
    )


def zero_grads(params):
    return {
        "gamma": {s: np.zeros_like(v) for s, v in params.gamma.items()},
        "beta": {s: np.zeros_like(v) for s, v in params.beta.items()},
    }


def strip_site_vjp(pre, gamma, eps, g):
    """Backward of strip_site through its input at the recorded pre-strip signal."""
    n = pre.shape[-2] * pre.shape[-1]
    u = pre - pre.mean(axis=(-2, -1), keepdims=True)
    denom = np.sqrt((u * u).sum(axis=(-2, -1), keepdims=True) + n * eps)
    centered = g - g.mean(axis=(-2, -1), keepdims=True)
    inner = (u * g).sum(axis=(-2, -1), keepdims=True)
    return gamma[:, None, None] * math.sqrt(n) / denom * (centered - u * inner / (denom * denom))


def strip_param_grads(pre, eps, g):
    """d(strip output)/d(gamma, beta) contracted with cotangent g.

    The gamma gradient is the inner product of g with the standardized
    signal; the beta gradient is the plain sum of g over the group. Leading
    batch axes accumulate into the shared per-channel parameters.
    """
    c = pre.shape[-3]
    n = pre.shape[-2] * pre.shape[-1]
    u = pre - pre.mean(axis=(-2, -1), keepdims=True)
    denom = np.sqrt((u * u).sum(axis=(-2, -1), keepdims=True) + n * eps)
    zhat = math.sqrt(n) * u / denom
    dgamma = (zhat * g).sum(axis=(-2, -1)).reshape(-1, c).sum(axis=0)
    dbeta = g.sum(axis=(-2, -1)).reshape(-1, c).sum(axis=0)
    return dgamma, dbeta


def cascade_param_grads(enc, trace, params, record, g_out, grads=None):
    """Replay one recorded cascade backward, accumulating affine gradients.

    g_out is the loss cotangent at the cascade's pixel output. Between
    strips the cotangent moves through the transpose of the stage pullback,
    which is the masked forward linearization. Pass grads to accumulate
    across several cascades.
    """
    if grads is None:
        grads = zero_grads(params)
    g = np.asarray(g_out, dtype=np.float64)
    for i, entry in enumerate(reversed(record)):
        site = entry["site"]
        pre = entry["pre"]
        dg, db = strip_param_grads(pre, params.epsilon, g)
        grads["gamma"][site] += dg
        grads["beta"][site] += db
        if i + 1 < len(record):
            g = strip_site_vjp(pre, params.gamma[site], params.epsilon, g)
            if site == "stem":
                g = stem_jvp(enc, trace, g)
            else:
                g = stage_jvp(enc, trace, int(site[1:]), g)
    return grads


def save_params(path, params):
    sections = {}
    for site, v in params.gamma.items():
        sections[f"gamma/{site}"] = v
    for site, v in params.beta.items():
        sections[f"beta/{site}"] = v
    write_container(path, sections, meta={"kind": "lac_params", "epsilon": params.epsilon})


def load_params(path):
    sections, meta = read_container(path)
    if meta.get("kind") != "lac_params":
        raise ValueError(f"{path} does not hold strip parameters")
    gamma = {}
    beta = {}
    for name, arr in sections.items():
        group, site = name.split("/", 1)
        {"gamma": gamma, "beta": beta}[group][site] = arr
    return LACParams(gamma=gamma, beta=beta, epsilon=float(meta["epsilon"]))
