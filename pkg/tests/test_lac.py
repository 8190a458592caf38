"""Strip arithmetic, cascade structure, decompositions, recorded gradients.

Oracles first: a plain-Python per-channel strip reference, hand-frozen
strip values, finite differences through the whole cascade, and a spectral
comparison of stride-2 vs stride-1 adjoints.
"""

import math

import numpy as np
import pytest

from artifact.encoder import (
    ForwardTrace,
    build_encoder,
    channel_seed,
    forward,
    nested_ef_check,
    pullback_to_pixels,
    raw_vjp,
)
from artifact.lac import (
    LACParams,
    cascade_apply,
    cascade_invert,
    cascade_param_grads,
    cascade_sites,
    fv_decompose,
    grad_support_check,
    groupnorm_strip,
    highfreq_fraction,
    init_params,
    load_params,
    path_moment_check,
    save_params,
    site_channels,
    spike_energy_ratio,
    strip_site,
    synthesize,
    zero_grads,
)
from artifact.tensorops import ConvLayer, conv2d_adjoint


def reference_strip(v, gamma, beta, eps):
    """Loop-nest strip oracle in scalar arithmetic."""
    arr = np.asarray(v, dtype=np.float64)
    flat = [float(x) for x in arr.ravel()]
    n = len(flat)
    mean = sum(flat) / n
    u = [x - mean for x in flat]
    denom = math.sqrt(sum(y * y for y in u) + n * eps)
    return np.array([gamma * math.sqrt(n) * y / denom + beta for y in u]).reshape(arr.shape)


@pytest.fixture(scope="module")
def enc():
    return build_encoder(seed=5)


@pytest.fixture(scope="module")
def trace(enc):
    rng = np.random.default_rng(100)
    return forward(enc, 0.5 * rng.standard_normal((3, 32, 32)))


@pytest.fixture(scope="module")
def smooth_trace(enc):
    hw = enc.config.input_size
    yy, xx = np.meshgrid(np.linspace(0, 1, hw), np.linspace(0, 1, hw), indexing="ij")
    x = np.stack(
        [
            np.sin(2 * np.pi * (yy + 0.3)) + 0.2 * xx,
            np.cos(2 * np.pi * (xx * 1.5 - 0.1)) - 0.1 * yy,
            0.5 * np.sin(2 * np.pi * (yy - xx)) + 0.05,
        ]
    )
    return forward(enc, x)


def random_params(enc, eps, seed=7, beta_scale=0.05):
    rng = np.random.default_rng(seed)
    counts = site_channels(enc)
    return LACParams(
        gamma={s: rng.uniform(0.6, 1.4, c) for s, c in counts.items()},
        beta={s: beta_scale * rng.standard_normal(c) for s, c in counts.items()},
        epsilon=eps,
    )


def test_strip_hand_example():
    out = groupnorm_strip(np.array([1.0, 2.0, 3.0, 4.0]), 1.0, 0.0, 0.0)
    s5 = math.sqrt(5.0)
    np.testing.assert_allclose(out, [-3 / s5, -1 / s5, 1 / s5, 3 / s5], atol=1e-15)
    assert abs(np.linalg.norm(out) - 2.0) < 1e-14


def test_strip_zero_gamma_gives_constant():
    rng = np.random.default_rng(0)
    out = groupnorm_strip(rng.standard_normal(17), 0.0, 0.7, 0.0)
    np.testing.assert_array_equal(out, np.full(17, 0.7))


def test_strip_matches_reference():
    rng = np.random.default_rng(1)
    for _ in range(20):
        shape = tuple(rng.integers(2, 7, size=int(rng.integers(1, 4))))
        v = rng.standard_normal(shape)
        gamma, beta = rng.normal(), rng.normal()
        eps = float(rng.choice([0.0, 1e-8, 1e-2]))
        np.testing.assert_allclose(
            groupnorm_strip(v, gamma, beta, eps),
            reference_strip(v, gamma, beta, eps),
            atol=1e-13,
        )


def test_strip_fixed_magnitude_mean_and_direction():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(3, 60))
        v = rng.standard_normal(n)
        gamma = float(rng.normal())
        if gamma == 0.0:
            continue
        beta = float(rng.normal())
        out = groupnorm_strip(v, gamma, beta, 0.0)
        assert abs(np.linalg.norm(out - beta) - abs(gamma) * math.sqrt(n)) < 1e-12
        assert abs(out.mean() - beta) < 1e-12
        u = v - v.mean()
        w = out - out.mean()
        cos = float(u @ w / (np.linalg.norm(u) * np.linalg.norm(w)))
        assert abs(cos - math.copysign(1.0, gamma)) < 1e-12


def test_strip_constant_input():
    with pytest.raises(ValueError, match="degenerate constant channel"):
        groupnorm_strip(np.full(9, 3.3), 1.0, 0.0, 0.0)
    out = groupnorm_strip(np.full(9, 3.3), 1.0, 0.25, 1e-8)
    np.testing.assert_array_equal(out, np.full(9, 0.25))


def test_strip_second_moment_contraction():
    # with the guard active the second moment is exactly var/(var + eps)
    rng = np.random.default_rng(3)
    v = rng.standard_normal(40)
    for eps in (1e-8, 1e-3, 0.5):
        out = groupnorm_strip(v, 1.0, 0.0, eps)
        var = float(((v - v.mean()) ** 2).mean())
        assert abs((out * out).mean() - var / (var + eps)) < 1e-12
        assert abs(out.mean()) < 1e-12


def test_strip_site_matches_scalar_loop():
    rng = np.random.default_rng(4)
    v = rng.standard_normal((6, 5, 7))
    gamma = rng.uniform(0.5, 2.0, 6)
    beta = rng.standard_normal(6)
    for eps in (0.0, 1e-6):
        got = strip_site(v, gamma, beta, eps)
        for c in range(6):
            np.testing.assert_allclose(
                got[c], groupnorm_strip(v[c], gamma[c], beta[c], eps), atol=1e-13
            )


def test_strip_site_rejects_constant_channel():
    v = np.ones((2, 3, 3))
    v[0] += np.arange(9).reshape(3, 3)
    with pytest.raises(ValueError, match="degenerate constant channel"):
        strip_site(v, np.ones(2), np.zeros(2), 0.0)


def test_site_layout(enc):
    counts = site_channels(enc)
    assert counts == {"b0": 8, "b1": 8, "b2": 16, "stem": 3}
    assert sum(counts.values()) == 35
    assert cascade_sites(enc, 2) == ("b2", "b1", "b0", "stem")
    assert cascade_sites(enc, 0) == ("b0", "stem")
    with pytest.raises(ValueError):
        cascade_sites(enc, 3)


def test_init_params_identity(enc):
    params = init_params(enc)
    for site, n in site_channels(enc).items():
        np.testing.assert_array_equal(params.gamma[site], np.ones(n))
        np.testing.assert_array_equal(params.beta[site], np.zeros(n))
    assert params.epsilon == 1e-8


def test_params_validation(enc):
    counts = site_channels(enc)
    good = init_params(enc)
    with pytest.raises(ValueError, match="same sites"):
        LACParams(gamma={"b0": np.ones(8)}, beta={}, epsilon=0.0)
    with pytest.raises(ValueError, match="matching 1-d"):
        LACParams(
            gamma={s: np.ones(c) for s, c in counts.items()},
            beta={s: np.zeros(c + 1) for s, c in counts.items()},
            epsilon=0.0,
        )
    with pytest.raises(ValueError, match="nonnegative"):
        LACParams(gamma=good.gamma, beta=good.beta, epsilon=-1.0)
    twin = good.copy()
    twin.gamma["b0"][0] = 9.0
    assert good.gamma["b0"][0] == 1.0


def test_unstripped_traversal_is_the_raw_pullback(enc, trace):
    # ablating every strip leaves the bare pullback composition
    seed = channel_seed(trace, 2, 3)
    np.testing.assert_array_equal(
        pullback_to_pixels(enc, trace, 2, seed), raw_vjp(enc, trace, 2, 3)
    )


def test_cascade_depth_and_site_order(enc, trace):
    params = random_params(enc, 1e-8)
    for l in range(enc.levels):
        c = next(i for i in range(enc.level_channels(l)) if trace.level(l)[i].any())
        rec = []
        cascade_invert(enc, trace, params, l, c, record=rec)
        assert len(rec) == l + 2
        assert tuple(r["site"] for r in rec) == cascade_sites(enc, l)


def test_cascade_output_moments(enc, trace):
    params = random_params(enc, 0.0)
    v = cascade_invert(enc, trace, params, 2, 3)
    n = enc.config.input_size ** 2
    for k in range(3):
        gk = params.gamma["stem"][k]
        bk = params.beta["stem"][k]
        assert abs(v[k].mean() - bk) < 1e-12
        assert abs(np.linalg.norm(v[k] - bk) - abs(gk) * math.sqrt(n)) < 1e-10


def test_cascade_determinism(enc, trace):
    params = random_params(enc, 1e-8)
    a = cascade_invert(enc, trace, params, 1, 2)
    b = cascade_invert(enc, trace, params, 1, 2)
    np.testing.assert_array_equal(a, b)


def test_cascade_index_errors(enc, trace):
    params = init_params(enc)
    with pytest.raises(ValueError, match="level"):
        cascade_invert(enc, trace, params, 5, 0)
    with pytest.raises(ValueError, match="channel"):
        cascade_invert(enc, trace, params, 2, 99)


def dead_channel_trace(trace, l, c):
    levels = [lv.copy() for lv in trace.levels]
    levels[l][c] = 0.0
    return ForwardTrace(x=trace.x, h_stem=trace.h_stem, levels=tuple(levels), masks=trace.masks)


def test_inactive_channel_paths(enc, trace):
    dead = dead_channel_trace(trace, 2, 5)
    params = random_params(enc, 1e-8)
    v = cascade_invert(enc, dead, params, 2, 5)
    for k in range(3):
        np.testing.assert_array_equal(v[k], np.full((32, 32), params.beta["stem"][k]))
    with pytest.raises(ValueError, match="inactive"):
        cascade_invert(enc, dead, random_params(enc, 0.0), 2, 5)


def test_stacked_cascades_match_single(enc, trace):
    params = random_params(enc, 1e-8)
    from artifact.lac import active_channel_cascades

    idx, stack = active_channel_cascades(enc, trace, params, 1)
    assert idx == [c for c in range(16) if trace.level(1)[c].any()]
    for row, c in list(enumerate(idx))[:5]:
        np.testing.assert_allclose(
            stack[row], cascade_invert(enc, trace, params, 1, c), atol=1e-12
        )


def test_strip_site_batched_rows_match(enc):
    rng = np.random.default_rng(21)
    v = rng.standard_normal((4, 6, 5, 7))
    gamma = rng.uniform(0.5, 2.0, 6)
    beta = rng.standard_normal(6)
    got = strip_site(v, gamma, beta, 1e-8)
    for b in range(4):
        np.testing.assert_array_equal(got[b], strip_site(v[b], gamma, beta, 1e-8))


def test_synthesize_additivity(enc, trace):
    params = random_params(enc, 1e-8)
    rec = synthesize(enc, trace, params, 2, keep_terms=True)
    np.testing.assert_array_equal(rec.xhat, rec.terms.sum(axis=0))
    assert abs(rec.weights.sum() - 1.0) < 1e-15
    assert rec.active.any()
    plain = synthesize(enc, trace, params, 2)
    assert plain.terms is None
    np.testing.assert_array_equal(plain.xhat, rec.xhat)


def test_synthesize_single_active_channel(enc, trace):
    levels = [lv.copy() for lv in trace.levels]
    keep = 3
    for c in range(levels[2].shape[0]):
        if c != keep:
            levels[2][c] = 0.0
    lone = ForwardTrace(x=trace.x, h_stem=trace.h_stem, levels=tuple(levels), masks=trace.masks)
    params = random_params(enc, 1e-8)
    rec = synthesize(enc, lone, params, 2)
    np.testing.assert_array_equal(rec.xhat, cascade_invert(enc, lone, params, 2, keep))


def test_grad_support_containment(enc, smooth_trace):
    params = random_params(enc, 1e-8)
    for l in (1, 2):
        ok, report = nested_ef_check(enc, smooth_trace, l)
        assert ok, report
        rec = synthesize(enc, smooth_trace, params, l)
        check = grad_support_check(enc, smooth_trace, l, rec.xhat)
        assert check["violations"] == 0
        assert check["moving_pixels"] > 0


def test_fv_zero_beta(enc, trace):
    params = random_params(enc, 0.0)
    for site in params.beta:
        params.beta[site][:] = 0.0
    fv = fv_decompose(enc, trace, params, 2)
    np.testing.assert_array_equal(fv.residual, np.zeros_like(fv.residual))
    assert fv.bound == 0.0
    np.testing.assert_array_equal(fv.xhat, fv.principal)


def test_fv_decomposition_identity(enc, trace):
    params = random_params(enc, 0.0)
    fv = fv_decompose(enc, trace, params, 2)
    synth = synthesize(enc, trace, params, 2)
    np.testing.assert_allclose(fv.xhat, synth.xhat, atol=1e-12)
    np.testing.assert_array_equal(fv.xhat, fv.principal + fv.residual)
    # the residual is plane-constant by construction; its sup-norm is the bound
    for k in range(3):
        assert np.ptp(fv.residual[k]) == 0.0
    gap = float(np.abs(synth.xhat - fv.principal).max())
    assert abs(gap - fv.bound) < 1e-12


def test_fv_uniform_beta_residual(enc, trace):
    params = random_params(enc, 0.0)
    params.beta["stem"][:] = 0.1
    fv = fv_decompose(enc, trace, params, 2)
    assert abs(float(np.abs(fv.residual).max()) - 0.1) < 1e-12
    assert abs(fv.bound - 0.1) < 1e-12


def test_fv_effective_weights_and_directions(enc, trace):
    params = random_params(enc, 0.0)
    fv = fv_decompose(enc, trace, params, 2)
    n = enc.config.input_size ** 2
    active = [c for c in range(32) if trace.level(2)[c].any()]
    for c in active[:4]:
        for k in range(3):
            # unit planes when eps = 0
            assert abs(np.linalg.norm(fv.directions[c, k]) - 1.0) < 1e-10
            assert abs(fv.directions[c, k].mean()) < 1e-14
    gains = params.gamma["stem"] * math.sqrt(n)
    weights = synthesize(enc, trace, params, 2).weights
    np.testing.assert_allclose(fv.effective_weights[active], np.outer(weights[active], gains))


def test_fv_dc_errors(enc, trace):
    params = random_params(enc, 0.0)
    fv = fv_decompose(enc, trace, params, 2)
    n = enc.config.input_size ** 2
    cap = 2.0 * math.sqrt(float((params.gamma["stem"] ** 2).sum() * n)) + 1e-9
    for c in range(32):
        if trace.level(2)[c].any():
            assert np.isfinite(fv.dc_errors[c])
            assert 0.0 <= fv.dc_errors[c] <= cap
        else:
            assert np.isnan(fv.dc_errors[c])


def test_path_moments_exact(enc, trace):
    params = random_params(enc, 0.0)
    for site in ("stem", "b0", "b1", "b2"):
        report = path_moment_check(enc, trace, params, site)
        assert report["entries"], site
        assert report["max_abs_mean"] < 1e-12
        assert report["max_second_moment_error"] < 1e-12
    deep_only = path_moment_check(enc, trace, params, "b2")
    assert {e["source_level"] for e in deep_only["entries"]} == {2}
    everywhere = path_moment_check(enc, trace, params, "stem")
    assert {e["source_level"] for e in everywhere["entries"]} == {0, 1, 2}


def test_path_moments_with_guard(enc, trace):
    report = path_moment_check(enc, trace, random_params(enc, 1e-2), "b0")
    assert report["max_abs_mean"] < 1e-12
    for e in report["entries"]:
        assert 0.0 < e["second_moment"] < 1.0


def test_path_moments_unknown_site(enc, trace):
    with pytest.raises(ValueError, match="unknown site"):
        path_moment_check(enc, trace, init_params(enc), "b9")


def test_highfreq_band():
    assert highfreq_fraction(np.zeros((3, 16, 16))) == 0.0
    assert highfreq_fraction(np.ones((3, 16, 16))) == 0.0
    yy, xx = np.meshgrid(np.linspace(0, 1, 32), np.linspace(0, 1, 32), indexing="ij")
    smooth = np.sin(2 * np.pi * yy) + np.cos(2 * np.pi * xx)
    assert highfreq_fraction(smooth) < 0.05
    rng = np.random.default_rng(6)
    assert highfreq_fraction(rng.standard_normal((32, 32))) > 0.5
    # alternating sign pattern lives entirely at the folding frequency
    comb = np.ones((16, 16)) * np.where(np.arange(16) % 2 == 0, 1.0, -1.0)
    assert highfreq_fraction(comb) > 0.99


def test_stride2_adjoint_spectrally_elevated():
    rng = np.random.default_rng(7)
    kernel = rng.standard_normal((1, 1, 3, 3))
    s2 = ConvLayer(kernel=kernel, stride=2, padding=1)
    s1 = ConvLayer(kernel=kernel, stride=1, padding=1)
    yy, xx = np.meshgrid(np.linspace(0, 1, 8), np.linspace(0, 1, 8), indexing="ij")
    g = (np.sin(2 * np.pi * yy) + np.cos(2 * np.pi * xx))[None]
    lifted = conv2d_adjoint(g, s2, (16, 16))
    stayed = conv2d_adjoint(g, s1, (8, 8))
    assert highfreq_fraction(lifted) > highfreq_fraction(stayed)
    assert highfreq_fraction(lifted) > 0.2


def test_spike_energy_ratio_bounds(enc, trace):
    params = random_params(enc, 1e-8)
    raw_hf, lac_hf = spike_energy_ratio(enc, trace, 2, 3, params)
    assert 0.0 <= raw_hf <= 1.0
    assert 0.0 <= lac_hf <= 1.0
    again = spike_energy_ratio(enc, trace, 2, 3, params)
    assert (raw_hf, lac_hf) == again


def flatten_params(params):
    order = sorted(params.gamma)
    vec = np.concatenate(
        [params.gamma[s] for s in order] + [params.beta[s] for s in order]
    )
    return vec, order


def rebuild_params(vec, template):
    order = sorted(template.gamma)
    sizes = [template.gamma[s].size for s in order]
    gamma, beta = {}, {}
    pos = 0
    for s, k in zip(order, sizes):
        gamma[s] = vec[pos : pos + k].copy()
        pos += k
    for s, k in zip(order, sizes):
        beta[s] = vec[pos : pos + k].copy()
        pos += k
    return LACParams(gamma=gamma, beta=beta, epsilon=template.epsilon)


def test_cascade_param_grads_match_fd(enc, trace):
    params = random_params(enc, 1e-8, seed=11)
    c = next(i for i in range(enc.level_channels(2)) if trace.level(2)[i].any())
    seed = channel_seed(trace, 2, c)
    rng = np.random.default_rng(12)
    w = rng.standard_normal((3, 32, 32))

    rec = []
    cascade_apply(enc, trace, params, 2, seed, record=rec)
    grads = cascade_param_grads(enc, trace, params, rec, w)
    analytic, order = flatten_params(
        LACParams(gamma=grads["gamma"], beta=grads["beta"], epsilon=params.epsilon)
    )

    vec, _ = flatten_params(params)
    h = 1e-6
    fd = np.zeros_like(vec)
    for i in range(vec.size):
        up, dn = vec.copy(), vec.copy()
        up[i] += h
        dn[i] -= h
        f_up = float((w * cascade_apply(enc, trace, rebuild_params(up, params), 2, seed)).sum())
        f_dn = float((w * cascade_apply(enc, trace, rebuild_params(dn, params), 2, seed)).sum())
        fd[i] = (f_up - f_dn) / (2 * h)
    rel = np.abs(analytic - fd) / np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-8)
    assert rel.max() <= 1e-5, (rel.max(), order)


def test_grads_only_on_crossed_sites(enc, trace):
    params = random_params(enc, 1e-8)
    c = next(i for i in range(enc.level_channels(0)) if trace.level(0)[i].any())
    seed = channel_seed(trace, 0, c)
    rec = []
    cascade_apply(enc, trace, params, 0, seed, record=rec)
    rng = np.random.default_rng(13)
    grads = cascade_param_grads(enc, trace, params, rec, rng.standard_normal((3, 32, 32)))
    for site in ("b1", "b2"):
        np.testing.assert_array_equal(grads["gamma"][site], 0.0)
        np.testing.assert_array_equal(grads["beta"][site], 0.0)
    assert np.abs(grads["gamma"]["b0"]).max() > 0.0
    assert np.abs(grads["beta"]["stem"]).max() > 0.0


def test_grad_accumulation(enc, trace):
    params = random_params(enc, 1e-8)
    seed = channel_seed(trace, 1, 0)
    rec = []
    cascade_apply(enc, trace, params, 1, seed, record=rec)
    rng = np.random.default_rng(14)
    g1 = rng.standard_normal((3, 32, 32))
    g2 = rng.standard_normal((3, 32, 32))
    acc = cascade_param_grads(enc, trace, params, rec, g1)
    acc = cascade_param_grads(enc, trace, params, rec, g2, grads=acc)
    solo1 = cascade_param_grads(enc, trace, params, rec, g1)
    solo2 = cascade_param_grads(enc, trace, params, rec, g2)
    for group in ("gamma", "beta"):
        for site in acc[group]:
            np.testing.assert_allclose(
                acc[group][site], solo1[group][site] + solo2[group][site], atol=1e-12
            )


def test_zero_grads_layout(enc):
    params = init_params(enc)
    grads = zero_grads(params)
    for site, n in site_channels(enc).items():
        assert grads["gamma"][site].shape == (n,)
        assert not grads["beta"][site].any()


def test_params_container_roundtrip(tmp_path, enc):
    params = random_params(enc, 3e-7)
    path = tmp_path / "strips.bin"
    save_params(path, params)
    back = load_params(path)
    assert back.epsilon == params.epsilon
    for site in params.gamma:
        np.testing.assert_array_equal(back.gamma[site], params.gamma[site])
        np.testing.assert_array_equal(back.beta[site], params.beta[site])
