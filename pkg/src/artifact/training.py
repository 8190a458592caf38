"""Synthetic scenes, the reconstruction objective, and strip training.

Scenes are smooth shared-background images with one crisp class shape
painted on top. The background comes from a small basis fixed by the scene
config's seed, so different draws share low-frequency structure; a random
global sign flip keeps the pixel distribution symmetric about zero, and
every plane is re-centered to exact zero mean.

Training fits only the strip affines: the encoder stays frozen, the loss
is the L1 gap between the image and the deepest-level reconstruction, and
gradients come from replaying the recorded cascade backward.
"""

import math
from dataclasses import dataclass

import numpy as np

from .encoder import forward, forward_levels, simplex_measure
from .fileio import csv_text, read_container, write_container, write_csv
from .lac import active_channel_cascades, cascade_param_grads, init_params, zero_grads
from .tensorops import check_finite, gap

SHAPES = ("disk", "square", "triangle", "cross")

CLASS_COLORS = np.array(
    [
        [0.9, -0.45, -0.45],
        [-0.45, 0.9, -0.45],
        [-0.45, -0.45, 0.9],
        [0.65, 0.65, -0.6],
    ]
)


@dataclass(frozen=True)
class SceneConfig:
    num_classes: int = 4
    background_basis: int = 6
    texture_freq: tuple = (1.0, 3.0)
    area_band: tuple = (0.1, 0.4)
    sign_flip: bool = True
    seed: int = 0
    size: int = 32

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must be in 2..{len(SHAPES)} (one distinct shape each)")
        if self.background_basis < 1:
            raise ValueError("background_basis must be positive")
        lo, hi = self.area_band
        if not 0.0 < lo < hi < 1.0:
            raise ValueError("area_band must satisfy 0 < lo < hi < 1")

    def to_dict(self):
        return {
            "num_classes": self.num_classes,
            "background_basis": self.background_basis,
            "texture_freq": list(self.texture_freq),
            "area_band": list(self.area_band),
            "sign_flip": self.sign_flip,
            "seed": self.seed,
            "size": self.size,
        }


@dataclass(frozen=True)
class SceneSample:
    x: np.ndarray
    mask: np.ndarray
    label: int

    def __post_init__(self):
        if not self.mask.any():
            raise ValueError("foreground mask is empty")
        if float(np.abs(self.x.mean(axis=(1, 2))).max()) > 1e-12:
            raise ValueError("scene planes must have zero mean")


def background_fields(config):
    """The shared smooth basis, a pure function of the config."""
    rng = np.random.default_rng([config.seed, 101])
    grid = np.linspace(0.0, 1.0, config.size)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    fields = np.zeros((config.background_basis, 3, config.size, config.size))
    for i in range(config.background_basis):
        freq = rng.uniform(0.5, 2.0)
        theta = rng.uniform(0.0, 2.0 * math.pi)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        wave = np.sin(2.0 * math.pi * freq * (math.cos(theta) * yy + math.sin(theta) * xx) + phase)
        color = rng.uniform(-1.0, 1.0, size=3)
        fields[i] = color[:, None, None] * wave[None]
    return fields


def shape_mask(config, rng, shape):
    """Filled boolean mask for one foreground, area fraction inside the band."""
    size = config.size
    lo, hi = config.area_band
    rr = np.arange(size)[:, None]
    cc = np.arange(size)[None, :]
    for _ in range(100):
        target = rng.uniform(lo, hi) * size * size
        if shape == "disk":
            half = math.sqrt(target / math.pi)
        elif shape == "square":
            half = math.sqrt(target) / 2.0
        elif shape == "triangle":
            half = math.sqrt(target / 2.0)
        else:  # cross of two bars, thickness a third of the arm
            half = 3.0 * math.sqrt(target / 20.0)
        margin = min(half, size / 2.0 - 1.0)
        cy = rng.uniform(margin, size - margin)
        cx = rng.uniform(margin, size - margin)
        if shape == "disk":
            mask = (rr - cy) ** 2 + (cc - cx) ** 2 <= half * half
        elif shape == "square":
            mask = (np.abs(rr - cy) <= half) & (np.abs(cc - cx) <= half)
        elif shape == "triangle":
            top = cy - half
            mask = (rr >= top) & (rr <= cy + half) & (np.abs(cc - cx) <= (rr - top) / 2.0)
        else:
            t = half / 3.0
            horiz = (np.abs(rr - cy) <= t) & (np.abs(cc - cx) <= half)
            vert = (np.abs(rr - cy) <= half) & (np.abs(cc - cx) <= t)
            mask = horiz | vert
        frac = mask.sum() / (size * size)
        if lo <= frac <= hi:
            return mask
    raise RuntimeError(f"no {shape} mask landed in the area band after 100 draws")


def generate_scene(config, rng):
    """One sample: shared background, one class shape, exact zero-mean planes."""
    fields = background_fields(config)
    coeff = rng.normal(0.0, 1.0, size=len(fields)) / math.sqrt(len(fields))
    x = 0.6 * (coeff[:, None, None, None] * fields).sum(axis=0)
    label = int(rng.integers(config.num_classes))
    mask = shape_mask(config, rng, SHAPES[label])
    grid = np.linspace(0.0, 1.0, config.size)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    freq = rng.uniform(*config.texture_freq)
    theta = rng.uniform(0.0, 2.0 * math.pi)
    texture = 0.35 * np.sin(2.0 * math.pi * freq * (math.cos(theta) * yy + math.sin(theta) * xx))
    paint = CLASS_COLORS[label][:, None, None] * (1.0 + texture)[None]
    x = np.where(mask[None], paint, x)
    if config.sign_flip and rng.random() < 0.5:
        x = -x
    x = x - x.mean(axis=(1, 2), keepdims=True)
    return SceneSample(x=x, mask=mask, label=label)


def build_dataset(config, count, rng):
    return [generate_scene(config, rng) for _ in range(count)]


def save_dataset(path, samples):
    sections = {"labels": np.array([s.label for s in samples], dtype=np.float64)}
    for i, s in enumerate(samples):
        sections[f"image/{i:04d}"] = s.x
        sections[f"mask/{i:04d}"] = s.mask.astype(np.float64)
    write_container(path, sections, meta={"kind": "dataset", "count": len(samples)})


def load_dataset(path):
    sections, meta = read_container(path)
    if meta.get("kind") != "dataset":
        raise ValueError(f"{path} does not hold a dataset")
    labels = sections["labels"].astype(int)
    out = []
    for i in range(meta["count"]):
        out.append(
            SceneSample(
                x=sections[f"image/{i:04d}"],
                mask=sections[f"mask/{i:04d}"] > 0.5,
                label=int(labels[i]),
            )
        )
    return out


def reconstruction_loss(x, xhat):
    """Plain L1 gap, summed over planes and pixels."""
    return float(np.abs(np.asarray(x) - np.asarray(xhat)).sum())


def lac_gradients(enc, trace, params, x, level=None):
    """Exact reverse-mode d(loss)/d(strips) for one image; returns (grads, loss).

    The whole active-channel stack runs forward once with a tape, the L1
    subgradient (sign(0) = 0) is weighted per channel by the simplex
    measure, and one backward replay accumulates every site. With
    level=None the deepest level is used; a list of levels sums their
    losses (the multi-path diagnostic, never the default).
    """
    if level is None:
        level = enc.levels - 1
    levels = level if isinstance(level, (list, tuple)) else [level]
    grads = zero_grads(params)
    total = 0.0
    for l in levels:
        e = simplex_measure(trace, l)
        rec = []
        idx, stack = active_channel_cascades(enc, trace, params, l, record=rec)
        weights = np.array([e[c] for c in idx])
        xhat = (weights[:, None, None, None] * stack).sum(axis=0)
        residual = np.asarray(x) - xhat
        total += float(np.abs(residual).sum())
        g_out = -np.sign(residual)
        cotangents = weights[:, None, None, None] * g_out[None]
        cascade_param_grads(enc, trace, params, rec, cotangents, grads=grads)
    return grads, total


@dataclass
class TrainHistory:
    steps: list
    loss: list
    mean_abs_beta: list
    min_gamma: list
    checkpoints: dict
    touched: dict

    def row(self, i):
        return (self.steps[i], self.loss[i], self.mean_abs_beta[i], self.min_gamma[i])


HISTORY_HEADER = ("step", "loss", "mean_abs_beta", "min_gamma")


def history_rows(history):
    return [history.row(i) for i in range(len(history.steps))]


def history_csv_text(history):
    return csv_text(HISTORY_HEADER, history_rows(history))


def write_history_csv(path, history):
    write_csv(path, HISTORY_HEADER, history_rows(history))


def _stack_params(params):
    return (
        np.concatenate([params.beta[s] for s in sorted(params.beta)]),
        np.concatenate([params.gamma[s] for s in sorted(params.gamma)]),
    )


def train_lac(
    enc,
    dataset,
    steps=2000,
    lr=1e-2,
    betas=(0.9, 0.999),
    adam_eps=1e-8,
    epsilon=1e-8,
    level=None,
    multi_path=False,
    checkpoint_every=500,
):
    """Fit the strip affines with Adam on the deepest-path L1 objective.

    Starts at gamma 1, beta 0. Images cycle in dataset order; traces are
    cached per image since the encoder never moves. Single-threaded,
    fixed-order reductions: identical seeds give bit-identical histories.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    params = init_params(enc, epsilon=epsilon)
    target = list(range(enc.levels)) if multi_path else level
    traces = [forward(enc, s.x) for s in dataset]
    b1, b2 = betas
    m = zero_grads(params)
    v = zero_grads(params)
    touched = {s: np.zeros_like(g, dtype=bool) for s, g in params.gamma.items()}
    history = TrainHistory(
        steps=[], loss=[], mean_abs_beta=[], min_gamma=[], checkpoints={}, touched=touched
    )
    history.checkpoints[0] = params.copy()
    for step in range(1, steps + 1):
        i = (step - 1) % len(dataset)
        grads, loss = lac_gradients(enc, traces[i], params, dataset[i].x, level=target)
        for group, dest in (("gamma", params.gamma), ("beta", params.beta)):
            for site in sorted(dest):
                g = grads[group][site]
                if group == "gamma":
                    touched[site] |= g != 0.0
                mg = m[group][site]
                vg = v[group][site]
                mg[:] = b1 * mg + (1.0 - b1) * g
                vg[:] = b2 * vg + (1.0 - b2) * g * g
                mhat = mg / (1.0 - b1 ** step)
                vhat = vg / (1.0 - b2 ** step)
                dest[site][:] = dest[site] - lr * mhat / (np.sqrt(vhat) + adam_eps)
        beta_all, gamma_all = _stack_params(params)
        history.steps.append(step)
        history.loss.append(loss)
        history.mean_abs_beta.append(float(np.abs(beta_all).mean()))
        history.min_gamma.append(float(gamma_all.min()))
        if step % checkpoint_every == 0 or step == steps:
            history.checkpoints[step] = params.copy()
    return params, history


def loss_deciles(history):
    """Median loss over the first and last tenth of the run."""
    k = max(1, len(history.loss) // 10)
    return float(np.median(history.loss[:k])), float(np.median(history.loss[-k:]))


def gap_features(enc, images, level=None):
    """(N, C) matrix of pooled activations for probe work."""
    if level is None:
        level = enc.levels - 1
    xs = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    return gap(forward_levels(enc, xs, upto=level))


@dataclass(frozen=True)
class LinearProbe:
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        check_finite("probe weight", self.weight)
        check_finite("probe bias", self.bias)


def softmax_rows(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def probe_logits(probe, features):
    return np.asarray(features) @ probe.weight.T + probe.bias


def probe_proba(probe, features):
    return softmax_rows(probe_logits(probe, features))


def probe_predict(probe, features):
    return probe_logits(probe, features).argmax(axis=1)


def probe_accuracy(probe, features, labels):
    return float((probe_predict(probe, features) == np.asarray(labels)).mean())


def fit_linear_probe(features, labels, ridge=1e-3, iters=500, lr=0.5, num_classes=None):
    """Multinomial logistic regression by full-batch gradient descent.

    Softmax probabilities are the point: downstream ablation curves need
    them, so a least-squares fit would not do. Zero init, fixed iteration
    count, deterministic. The ridge term is applied as a proximal shrink
    so any penalty strength is stable, including the weights->0 limit.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n, _ = features.shape
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    # pooled activations are tiny, so descent runs on standardized copies
    # and the affine folds back into native coordinates at the end
    mu = features.mean(axis=0)
    sd = features.std(axis=0)
    sd = np.where(sd == 0.0, 1.0, sd)
    z = (features - mu) / sd
    w = np.zeros((k, features.shape[1]))
    b = np.zeros(k)
    for _ in range(iters):
        p = softmax_rows(z @ w.T + b)
        gw = (p - onehot).T @ z / n
        gb = (p - onehot).mean(axis=0)
        w = (w - lr * gw) / (1.0 + lr * ridge)
        b = (b - lr * gb) / (1.0 + lr * ridge)
    w = w / sd
    probe = LinearProbe(weight=w, bias=b - w @ mu)
    report = {
        "accuracy": probe_accuracy(probe, features, labels),
        "iterations": iters,
        "ridge": ridge,
        "classes": k,
    }
    return probe, report


def save_probe(path, probe):
    write_container(path, {"weight": probe.weight, "bias": probe.bias}, meta={"kind": "probe"})


def load_probe(path):
    sections, meta = read_container(path)
    if meta.get("kind") != "probe":
        raise ValueError(f"{path} does not hold a probe")
    return LinearProbe(weight=sections["weight"], bias=sections["bias"])
