"""Self-attention head over deepest-stage tokens, with pixel visualization.

The deepest feature map flattens into a token sequence, runs through a
small stack of single-head pre-norm attention blocks, and is read out by
a linear classifier on the pooled tokens. Any scalar readout of the
stack (block energy, per-token energy, a logit) becomes a pixel image by
taking its gradient with respect to the feature map and feeding that
gradient through the already-trained corrector cascade. The cascade is
never retrained and its parameters are never touched.

Forward and reverse passes are written out by hand so the gradient seeds
stay exact.
"""

import math
from dataclasses import dataclass

import numpy as np

from .fileio import read_container, write_container
from .lac import cascade_apply
from .tensorops import check_finite
from .training import LinearProbe, probe_accuracy, softmax_rows

TOKEN_EPS = 1e-8


@dataclass(frozen=True)
class AttentionHead:
    """Projection stack: wq/wk/wv are (blocks, dim, dim). Single head only."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    heads: int = 1
    trained: bool = False

    def __post_init__(self):
        for name in ("wq", "wk", "wv"):
            w = getattr(self, name)
            check_finite(name, w)
            if w.ndim != 3 or w.shape[1] != w.shape[2]:
                raise ValueError(f"{name} must be (blocks, dim, dim), got {w.shape}")
            if w.shape != self.wq.shape:
                raise ValueError("projection stacks disagree in shape")
        if self.wq.shape[0] < 1:
            raise ValueError("need at least one block")
        if self.heads != 1:
            raise ValueError("only single-head attention is supported")

    @property
    def blocks(self):
        return int(self.wq.shape[0])

    @property
    def dim(self):
        return int(self.wq.shape[1])


def init_head(dim, blocks=3, rng=None):
    """Small random projections; 1/sqrt(dim) keeps pre-softmax scores order one."""
    rng = np.random.default_rng(0) if rng is None else rng
    scale = 1.0 / math.sqrt(dim)
    wq, wk, wv = (rng.standard_normal((blocks, dim, dim)) * scale for _ in range(3))
    return AttentionHead(wq=wq, wk=wk, wv=wv)


def tokens_from_features(h):
    """(C, H, W) -> (H*W, C); token r*W + s carries the channel vector at (r, s)."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 3:
        raise ValueError(f"expected a (C, H, W) feature map, got shape {h.shape}")
    c, hh, ww = h.shape
    return h.reshape(c, hh * ww).T.copy()


def features_from_tokens(tokens, shape):
    """Inverse of tokens_from_features for the given (C, H, W) shape."""
    c, hh, ww = shape
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.shape != (hh * ww, c):
        raise ValueError(f"tokens shaped {tokens.shape}, expected ({hh * ww}, {c})")
    return tokens.T.reshape(c, hh, ww).copy()


def token_norm(x, eps=TOKEN_EPS):
    """Zero-mean unit-variance per token vector: the strip's form, no affine."""
    x = np.asarray(x, dtype=np.float64)
    u = x - x.mean(axis=-1, keepdims=True)
    var = (u * u).mean(axis=-1, keepdims=True)
    return u / np.sqrt(var + eps)


def _token_norm_backward(gn, normed, x, eps):
    u = x - x.mean(axis=-1, keepdims=True)
    sigma = np.sqrt((u * u).mean(axis=-1, keepdims=True) + eps)
    inner = (gn * normed).mean(axis=-1, keepdims=True)
    return (gn - gn.mean(axis=-1, keepdims=True) - normed * inner) / sigma


def block_forward(wq, wk, wv, tokens, eps=TOKEN_EPS):
    """One pre-norm block: x + softmax(QK^T/sqrt(d)) V over the normed tokens.

    Accepts (T, d) or batched (..., T, d). Returns (out, cache); the cache
    holds everything block_backward replays, including the projections.
    """
    x = np.asarray(tokens, dtype=np.float64)
    d = x.shape[-1]
    n = token_norm(x, eps)
    q = n @ wq
    k = n @ wk
    v = n @ wv
    scores = np.einsum("...td,...ud->...tu", q, k) / math.sqrt(d)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=-1, keepdims=True)
    out = x + np.einsum("...tu,...ud->...td", attn, v)
    cache = {
        "x": x, "n": n, "q": q, "k": k, "v": v, "attn": attn,
        "wq": wq, "wk": wk, "wv": wv, "eps": eps,
    }
    return out, cache


def block_backward(cache, gout):
    """VJP of block_forward. Returns (g_tokens, g_wq, g_wk, g_wv).

    Parameter gradients are summed over any leading batch axes.
    """
    x, n, q, k, v, attn = (cache[t] for t in ("x", "n", "q", "k", "v", "attn"))
    d = x.shape[-1]
    gout = np.asarray(gout, dtype=np.float64)
    gv = np.einsum("...tu,...td->...ud", attn, gout)
    gattn = np.einsum("...td,...ud->...tu", gout, v)
    # softmax rows: ds = (da - <da, a>) * a, then undo the 1/sqrt(d) scale
    gscores = (gattn - (gattn * attn).sum(axis=-1, keepdims=True)) * attn
    gscores = gscores / math.sqrt(d)
    gq = np.einsum("...tu,...ud->...td", gscores, k)
    gk = np.einsum("...tu,...td->...ud", gscores, q)
    gn = gq @ cache["wq"].T + gk @ cache["wk"].T + gv @ cache["wv"].T
    gx = gout + _token_norm_backward(gn, n, x, cache["eps"])
    flat = n.reshape(-1, d)
    gwq = flat.T @ gq.reshape(-1, d)
    gwk = flat.T @ gk.reshape(-1, d)
    gwv = flat.T @ gv.reshape(-1, d)
    return gx, gwq, gwk, gwv


def stack_forward(head, tokens, eps=TOKEN_EPS):
    """Run every block. Returns (per-block outputs, per-block caches)."""
    outputs, caches = [], []
    cur = np.asarray(tokens, dtype=np.float64)
    if cur.shape[-1] != head.dim:
        raise ValueError(f"token dim {cur.shape[-1]} does not match head dim {head.dim}")
    for i in range(head.blocks):
        cur, cache = block_forward(head.wq[i], head.wk[i], head.wv[i], cur, eps)
        outputs.append(cur)
        caches.append(cache)
    return outputs, caches


def attention_forward(head, tokens, eps=TOKEN_EPS):
    outputs, _ = stack_forward(head, tokens, eps)
    return outputs[-1]


def stack_backward(caches, block, gout):
    """Backpropagate from the output of `block` to the input tokens.

    Returns (g_tokens, grads) with grads[i] = (g_wq, g_wk, g_wv) for blocks
    0..block; blocks above `block` do not participate.
    """
    if not 0 <= block < len(caches):
        raise ValueError(f"block {block} out of range 0..{len(caches) - 1}")
    grads = [None] * (block + 1)
    g = gout
    for i in range(block, -1, -1):
        g, gwq, gwk, gwv = block_backward(caches[i], g)
        grads[i] = (gwq, gwk, gwv)
    return g, grads


@dataclass(frozen=True)
class ReadoutSeed:
    """Feature-map cotangent plus the tag saying which scalar produced it."""

    seed: np.ndarray
    kind: tuple

    def __post_init__(self):
        check_finite("seed", self.seed)
        if self.seed.ndim != 3:
            raise ValueError("seed must be shaped like a (C, H, W) feature map")
        if not self.kind or self.kind[0] not in ("layer", "token", "logit"):
            raise ValueError(f"unknown readout kind {self.kind!r}")


def readout_seed(head, trace, kind, probe=None, eps=TOKEN_EPS):
    """Gradient of a stack scalar with respect to the deepest feature map.

    kind is ("layer", l) for half the squared Frobenius norm of block l's
    output, ("token", l, t) for half the squared norm of its row t, or
    ("logit", c) for logit c of the linear readout over the pooled final
    tokens (requires probe).
    """
    h = trace.levels[-1]
    tokens = tokens_from_features(h)
    outputs, caches = stack_forward(head, tokens, eps)
    tag = tuple(kind)
    if tag[0] in ("layer", "token"):
        block = tag[1]
        if not 0 <= block < head.blocks:
            raise ValueError(f"block {block} out of range 0..{head.blocks - 1}")
    if tag[0] == "layer":
        g = outputs[block]
    elif tag[0] == "token":
        t = tag[2]
        if not 0 <= t < tokens.shape[0]:
            raise ValueError(f"token {t} out of range 0..{tokens.shape[0] - 1}")
        g = np.zeros_like(outputs[block])
        g[t] = outputs[block][t]
    elif tag[0] == "logit":
        if probe is None:
            raise ValueError("logit readouts need the linear probe")
        c = tag[1]
        if not 0 <= c < probe.weight.shape[0]:
            raise ValueError(f"class {c} out of range 0..{probe.weight.shape[0] - 1}")
        block = len(outputs) - 1
        g = np.broadcast_to(
            probe.weight[c] / tokens.shape[0], outputs[block].shape
        ).copy()
    else:
        raise ValueError(f"unknown readout kind {tag!r}")
    gtokens, _ = stack_backward(caches, block, g)
    return ReadoutSeed(seed=features_from_tokens(gtokens, h.shape), kind=tag)


def attend_visualize(enc, trace, params, seed):
    """Feed a feature-map cotangent through the trained cascade, unchanged.

    Identical path to the per-channel inversion, including the analytic
    short-circuit for an all-zero seed (constant offset planes when the
    strip is regularized, rejection when it is not).
    """
    arr = seed.seed if isinstance(seed, ReadoutSeed) else np.asarray(seed, dtype=np.float64)
    deepest = trace.levels[-1]
    if arr.shape != deepest.shape:
        raise ValueError(f"seed shaped {arr.shape}, deepest map is {deepest.shape}")
    if not arr.any():
        if params.epsilon == 0.0:
            raise ValueError("degenerate zero seed with eps = 0")
        hw = enc.config.input_size
        return np.ones((enc.config.input_channels, hw, hw)) * params.beta["stem"][:, None, None]
    return cascade_apply(enc, trace, params, enc.levels - 1, arr)


def attention_features(head, feature_maps, eps=TOKEN_EPS):
    """Pooled final-block tokens for a batch of deepest maps: (N, dim)."""
    tokens = np.stack([tokens_from_features(h) for h in feature_maps])
    outputs, _ = stack_forward(head, tokens, eps)
    return outputs[-1].mean(axis=1)


def train_attention(
    feature_maps,
    labels,
    blocks=3,
    iters=300,
    lr=0.2,
    ridge=1e-3,
    seed=0,
    num_classes=None,
    eps=TOKEN_EPS,
):
    """Fit the attention stack plus linear readout on frozen deepest maps.

    Same machinery as the plain probe: full-batch gradient descent with a
    proximal ridge shrink, fixed iteration count, deterministic. Returns
    (head, probe, report).
    """
    labels = np.asarray(labels)
    tokens = np.stack([tokens_from_features(h) for h in feature_maps])
    n_img, n_tok, dim = tokens.shape
    if n_img != labels.shape[0]:
        raise ValueError("feature map count and label count disagree")
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    onehot = np.zeros((n_img, k))
    onehot[np.arange(n_img), labels] = 1.0
    head = init_head(dim, blocks, np.random.default_rng(seed))
    wq, wk, wv = head.wq.copy(), head.wk.copy(), head.wv.copy()
    w = np.zeros((k, dim))
    b = np.zeros(k)
    shrink = 1.0 + lr * ridge
    loss_first = loss_final = None
    for _ in range(iters):
        cur = AttentionHead(wq=wq, wk=wk, wv=wv)
        outputs, caches = stack_forward(cur, tokens, eps)
        pooled = outputs[-1].mean(axis=1)
        p = softmax_rows(pooled @ w.T + b)
        loss_final = float(-np.log(p[np.arange(n_img), labels] + 1e-300).mean())
        if loss_first is None:
            loss_first = loss_final
        glogit = (p - onehot) / n_img
        gw = glogit.T @ pooled
        gb = glogit.sum(axis=0)
        gtokens_out = np.repeat((glogit @ w)[:, None, :], n_tok, axis=1) / n_tok
        _, grads = stack_backward(caches, blocks - 1, gtokens_out)
        w = (w - lr * gw) / shrink
        b = (b - lr * gb) / shrink
        for i, (gwq, gwk, gwv) in enumerate(grads):
            wq[i] = (wq[i] - lr * gwq) / shrink
            wk[i] = (wk[i] - lr * gwk) / shrink
            wv[i] = (wv[i] - lr * gwv) / shrink
    head = AttentionHead(wq=wq, wk=wk, wv=wv, trained=True)
    probe = LinearProbe(weight=w, bias=b)
    features = attention_features(head, feature_maps, eps)
    report = {
        "accuracy": probe_accuracy(probe, features, labels),
        "iterations": iters,
        "blocks": blocks,
        "ridge": ridge,
        "classes": k,
        "loss_first": loss_first,
        "loss_final": loss_final,
    }
    return head, probe, report


def token_grid(fields, pad=1, normalize=False):
    """Tile per-token pixel tensors into the token lattice, row-major.

    fields must have square count (the lattice side is sqrt(len)); each
    entry is one (C, H, W) tensor. With normalize each tile is scaled to
    unit max magnitude so faint tokens stay visible.
    """
    count = len(fields)
    side = math.isqrt(count)
    if side * side != count:
        raise ValueError(f"{count} tiles do not form a square lattice")
    first = np.asarray(fields[0], dtype=np.float64)
    c, hh, ww = first.shape
    grid = np.zeros((c, side * hh + (side - 1) * pad, side * ww + (side - 1) * pad))
    for t, field in enumerate(fields):
        tile = np.asarray(field, dtype=np.float64)
        if tile.shape != first.shape:
            raise ValueError("tiles disagree in shape")
        if normalize:
            peak = np.abs(tile).max()
            if peak > 0.0:
                tile = tile / peak
        r, s = divmod(t, side)
        grid[:, r * (hh + pad):r * (hh + pad) + hh, s * (ww + pad):s * (ww + pad) + ww] = tile
    return grid


def save_head(path, head):
    write_container(
        path,
        {"wq": head.wq, "wk": head.wk, "wv": head.wv},
        meta={"kind": "attention", "heads": head.heads, "trained": bool(head.trained)},
    )


def load_head(path):
    sections, meta = read_container(path)
    if meta.get("kind") != "attention":
        raise ValueError(f"{path} does not hold an attention head")
    return AttentionHead(
        wq=sections["wq"], wk=sections["wk"], wv=sections["wv"],
        heads=int(meta.get("heads", 1)), trained=bool(meta.get("trained", False)),
    )
