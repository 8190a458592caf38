"""A small frozen ReLU CNN with explicit stage structure.

The network is stem + L stages. Every stage ends in a stride-1 "intra"
convolution whose ReLU output is that stage's feature level h_l; stages
after the first are entered through a stride-2 "transition" convolution.
Weights are He-scaled Gaussian draws, frozen at build time; there are no
biases, so X = 0 propagates to exactly zero everywhere and scaling the
input scales the stem's pre-activation linearly.

A forward pass records every ReLU activity mask. All backward operations
(stage pullbacks, channel-selective seeds, effective receptive fields)
replay those masks, which is what the containment guarantees quantify over.
"""

from dataclasses import dataclass, field

import numpy as np

from .fileio import read_container, write_container
from .tensorops import ConvLayer, check_finite, conv2d, conv2d_adjoint, gap, relu, relu_backward

EF_TOL = 1e-12


@dataclass(frozen=True)
class EncoderConfig:
    input_channels: int = 3
    input_size: int = 32
    widths: tuple = (8, 16, 32)
    kernel_size: int = 3
    seed: int = 0

    def __post_init__(self):
        if len(self.widths) < 1 or any(w < 1 for w in self.widths):
            raise ValueError("stage widths must be strictly positive")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.input_size < 2 ** len(self.widths):
            raise ValueError("input too small for the requested number of stride-2 maps")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def levels(self):
        return len(self.widths)

    def to_dict(self):
        return {
            "input_channels": self.input_channels,
            "input_size": self.input_size,
            "widths": list(self.widths),
            "kernel_size": self.kernel_size,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class Encoder:
    """Frozen layer stack. `segments[l]` lists the (name, layer) pairs crossing
    from level l-1 (the stem output for l=0) up to level l."""

    config: EncoderConfig
    stem: ConvLayer
    segments: tuple
    input_hw: dict = field(default_factory=dict)

    @property
    def levels(self):
        return self.config.levels

    def level_channels(self, l):
        return self.config.widths[l]

    def level_hw(self, l):
        s = self.config.input_size // 2 ** (l + 1)
        return (s, s)


def build_encoder(config=None, seed=None):
    """Deterministic frozen encoder; same (config, seed) gives identical bytes."""
    config = config or EncoderConfig()
    if seed is not None:
        config = EncoderConfig(**{**config.to_dict(), "seed": seed})
    rng = np.random.default_rng(config.seed)
    k = config.kernel_size
    pad = k // 2

    def draw(c_out, c_in, stride):
        std = np.sqrt(2.0 / (c_in * k * k))
        kernel = rng.standard_normal((c_out, c_in, k, k)) * std
        return ConvLayer(kernel=kernel, stride=stride, padding=pad)

    stem = draw(config.widths[0], config.input_channels, 2)
    segments = []
    input_hw = {}
    size = config.input_size
    input_hw["stem"] = (size, size)
    size //= 2
    prev = config.widths[0]
    for l, width in enumerate(config.widths):
        seg = []
        if l > 0:
            input_hw[f"trans_{l - 1}"] = (size, size)
            seg.append((f"trans_{l - 1}", draw(width, prev, 2)))
            size //= 2
        input_hw[f"intra_{l}"] = (size, size)
        seg.append((f"intra_{l}", draw(width, width, 1)))
        segments.append(tuple(seg))
        prev = width
    return Encoder(config=config, stem=stem, segments=tuple(segments), input_hw=input_hw)


@dataclass(frozen=True)
class ForwardTrace:
    """One forward pass: input, per-level activations, per-ReLU activity masks."""

    x: np.ndarray
    h_stem: np.ndarray
    levels: tuple
    masks: dict

    def level(self, l):
        return self.levels[l]


def forward(enc, x):
    x = check_finite("input", x)
    if x.shape != (enc.config.input_channels, enc.config.input_size, enc.config.input_size):
        raise ValueError(
            f"input shaped {x.shape}, encoder expects "
            f"({enc.config.input_channels}, {enc.config.input_size}, {enc.config.input_size})"
        )
    masks = {}
    h, masks["stem"] = relu(conv2d(x, enc.stem))
    h_stem = h
    levels = []
    for seg in enc.segments:
        for name, layer in seg:
            h, masks[name] = relu(conv2d(h, layer))
        levels.append(h)
    return ForwardTrace(x=x, h_stem=h_stem, levels=tuple(levels), masks=masks)


def forward_levels(enc, xs, upto):
    """Batched activations only, for finite-difference sweeps: (B, ...) -> h_upto."""
    h, _ = relu(conv2d(xs, enc.stem))
    for l, seg in enumerate(enc.segments):
        for _, layer in seg:
            h, _ = relu(conv2d(h, layer))
        if l == upto:
            return h
    raise ValueError(f"level {upto} out of range")


def stage_pullback(enc, trace, level, g):
    """Transpose of the level-(l-1) -> level-l map, using the recorded masks.

    Accepts a single tensor shaped like h_level or a batch with a leading
    axis. Linear in g by construction (masks are frozen by the trace).
    """
    if not 0 <= level < enc.levels:
        raise ValueError(f"level {level} out of range 0..{enc.levels - 1}")
    g = np.asarray(g, dtype=np.float64)
    for name, layer in reversed(enc.segments[level]):
        g = relu_backward(g, trace.masks[name])
        g = conv2d_adjoint(g, layer, enc.input_hw[name])
    return g


def stem_pullback(enc, trace, g):
    """Transpose of the pixel -> stem map; lands in pixel space."""
    g = relu_backward(np.asarray(g, dtype=np.float64), trace.masks["stem"])
    return conv2d_adjoint(g, enc.stem, enc.input_hw["stem"])


def pullback_to_pixels(enc, trace, l, g):
    for level in range(l, -1, -1):
        g = stage_pullback(enc, trace, level, g)
    return stem_pullback(enc, trace, g)


def stage_jvp(enc, trace, level, v):
    """Forward linearization of one stage under the recorded masks; the
    transpose of stage_pullback, needed when differentiating through a
    recorded backward cascade."""
    if not 0 <= level < enc.levels:
        raise ValueError(f"level {level} out of range 0..{enc.levels - 1}")
    v = np.asarray(v, dtype=np.float64)
    for name, layer in enc.segments[level]:
        v = np.where(trace.masks[name], conv2d(v, layer), 0.0)
    return v


def stem_jvp(enc, trace, v):
    """Forward linearization of the pixel -> stem map; transpose of stem_pullback."""
    v = conv2d(np.asarray(v, dtype=np.float64), enc.stem)
    return np.where(trace.masks["stem"], v, 0.0)


def channel_active(trace, l, c):
    return bool(trace.level(l)[c].any())


def channel_seed(trace, l, c):
    """Keep channel c of h_l, zero the rest: the gradient of half that
    channel's squared activation energy with respect to h_l."""
    h = trace.level(l)
    seed = np.zeros_like(h)
    seed[c] = h[c]
    return seed


def raw_vjp(enc, trace, l, c):
    """Pixel-space gradient of half the squared activation energy of (l, c)."""
    if not 0 <= l < enc.levels:
        raise ValueError(f"level {l} out of range 0..{enc.levels - 1}")
    if not 0 <= c < enc.level_channels(l):
        raise ValueError(f"channel {c} out of range 0..{enc.level_channels(l) - 1} at level {l}")
    return pullback_to_pixels(enc, trace, l, channel_seed(trace, l, c))


def simplex_measure(trace, l):
    """Per-channel share of mean absolute activation; nonnegative, sums to 1."""
    z = gap(np.abs(trace.level(l)))
    total = z.sum()
    if total == 0.0:
        raise ValueError(f"degenerate input: every channel at level {l} is inactive")
    e = z / total
    return e / e.sum()


def effective_field(enc, trace, l, c, chunk=128):
    """Pixels that causally reach some strictly positive activation of (l, c).

    Ground truth by construction: a one-hot seed is pulled back from every
    active position and the union of |gradient| > EF_TOL supports is taken.
    """
    h = trace.level(l)
    size = enc.config.input_size
    positions = np.argwhere(h[c] > 0)
    out = np.zeros((size, size), dtype=bool)
    if positions.size == 0:
        return out
    for start in range(0, len(positions), chunk):
        block = positions[start : start + chunk]
        seeds = np.zeros((len(block),) + h.shape)
        for b, (r, s) in enumerate(block):
            seeds[b, c, r, s] = 1.0
        back = pullback_to_pixels(enc, trace, l, seeds)
        out |= (np.abs(back) > EF_TOL).any(axis=(0, 1))
    return out


def active_union_field(enc, trace, l, chunk=128):
    """Union of effective fields over all channels with any positive activity."""
    h = trace.level(l)
    size = enc.config.input_size
    triples = np.argwhere(h > 0)  # (c, r, s)
    out = np.zeros((size, size), dtype=bool)
    for start in range(0, len(triples), chunk):
        block = triples[start : start + chunk]
        seeds = np.zeros((len(block),) + h.shape)
        for b, (c, r, s) in enumerate(block):
            seeds[b, c, r, s] = 1.0
        back = pullback_to_pixels(enc, trace, l, seeds)
        out |= (np.abs(back) > EF_TOL).any(axis=(0, 1))
    return out


def stem_effective_field(enc, trace, c, chunk=128):
    """Effective field of one stem channel, one convolution below level 0."""
    h = trace.h_stem
    size = enc.config.input_size
    positions = np.argwhere(h[c] > 0)
    out = np.zeros((size, size), dtype=bool)
    for start in range(0, len(positions), chunk):
        block = positions[start : start + chunk]
        seeds = np.zeros((len(block),) + h.shape)
        for b, (r, s) in enumerate(block):
            seeds[b, c, r, s] = 1.0
        back = stem_pullback(enc, trace, seeds)
        out |= (np.abs(back) > EF_TOL).any(axis=(0, 1))
    return out


def nested_ef_check(enc, trace, l, union=None):
    """Do all shallower effective fields sit inside the level-l active union?

    The stem layer counts as shallower than every level: anything reaching
    pixel space takes its last hop through active stem units, so the union
    must absorb their fields too. Returns (ok, report); the report lists,
    per shallow (layer, channel), how many pixels escape the union.
    Pass `union` to reuse a precomputed level-l active union.
    """
    if l == 0:
        return True, {"level": l, "violations": {}, "union_pixels": None}
    if union is None:
        union = active_union_field(enc, trace, l)
    violations = {}
    for k in range(l):
        for c in range(enc.level_channels(k)):
            ef = effective_field(enc, trace, k, c)
            escaped = int(np.count_nonzero(ef & ~union))
            if escaped:
                violations[f"{k}:{c}"] = escaped
    for c in range(trace.h_stem.shape[0]):
        ef = stem_effective_field(enc, trace, c)
        escaped = int(np.count_nonzero(ef & ~union))
        if escaped:
            violations[f"stem:{c}"] = escaped
    ok = not violations
    return ok, {
        "level": l,
        "violations": violations,
        "union_pixels": int(union.sum()),
    }


def dilate_one(mask):
    """One-pixel l1 dilation: every set pixel also claims its 4-neighbors."""
    m = np.asarray(mask, dtype=bool)
    out = m.copy()
    out[1:, :] |= m[:-1, :]
    out[:-1, :] |= m[1:, :]
    out[:, 1:] |= m[:, :-1]
    out[:, :-1] |= m[:, 1:]
    return out


def save_encoder(path, enc):
    sections = {"stem": enc.stem.kernel}
    for seg in enc.segments:
        for name, layer in seg:
            sections[name] = layer.kernel
    write_container(path, sections, meta={"kind": "encoder", "config": enc.config.to_dict()})


def load_encoder(path):
    sections, meta = read_container(path)
    if meta.get("kind") != "encoder":
        raise ValueError(f"{path}: container does not hold encoder weights")
    cfg = meta["config"]
    config = EncoderConfig(
        input_channels=cfg["input_channels"],
        input_size=cfg["input_size"],
        widths=tuple(cfg["widths"]),
        kernel_size=cfg["kernel_size"],
        seed=cfg["seed"],
    )
    rebuilt = build_encoder(config)
    pad = config.kernel_size // 2

    def with_kernel(layer, kernel):
        return ConvLayer(kernel=kernel, stride=layer.stride, padding=pad)

    stem = with_kernel(rebuilt.stem, sections["stem"])
    segments = tuple(
        tuple((name, with_kernel(layer, sections[name])) for name, layer in seg)
        for seg in rebuilt.segments
    )
    return Encoder(config=config, stem=stem, segments=segments, input_hw=rebuilt.input_hw)
