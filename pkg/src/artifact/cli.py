"""Batch front end: one JSON config in, images/CSV/JSON artifacts out.

Subcommands cover the whole pipeline (train, invert, verify, select,
ablate, attend). Every command is deterministic for a fixed config: the
global seed fans out to per-component streams by fixed labels, reports are
serialized with sorted keys and repr-exact floats, and wall-clock goes to
stdout only so reruns stay byte-identical.
"""

import argparse
import copy
import json
import os
import sys
import time

import numpy as np

from .attention import attend_visualize, readout_seed, save_head, token_grid
from .covvol import SEVERITY_SIGMA, centered_covariance, gap_energy_select, greedy_select
from .encoder import save_encoder
from .fileio import dump_json, write_csv, write_ppm
from .interference import (
    ablation_curve,
    class_reconstruction,
    ecr,
    ecr_ranking,
    random_ablation_curve,
)
from .lac import active_channel_cascades, cascade_invert, save_params, synthesize
from .training import SceneConfig, loss_deciles, save_probe, write_history_csv
from .verification import ABLATE_STREAM, Workspace, report_payload, run_checks

DEFAULTS = {
    "seed": 0,
    "output_dir": "runs",
    "encoder": {"seed": None},  # null falls back to the global seed
    "scene": {
        "num_classes": 4,
        "background_basis": 6,
        "texture_freq": [1.0, 3.0],
        "area_band": [0.1, 0.4],
        "sign_flip": True,
        "seed": 0,
        "size": 32,
    },
    "training": {
        "steps": 2000,
        "lr": 1e-2,
        "dataset_size": 64,
        "probe_ridge": 1e-3,
        "probe_iters": 500,
    },
    "lac_epsilon": 1e-8,
    "selection": {"k": 3},
    # the sigma grid itself is the fixed module constant; only the
    # replicate count is a knob
    "severity": {"replicates": 5},
    "ablation": {"target_class": 3, "random_orders": 50},
    "attention": {"blocks": 3, "iters": 300, "train": False},
}


class ConfigError(ValueError):
    """Config file violates the fixed key schema."""


class CommandError(ValueError):
    """Arguments are structurally valid but name something that is not there."""


def _coerce(value, default, dotted):
    if default is None:
        if value is None or (isinstance(value, int) and not isinstance(value, bool)):
            return value
        raise ConfigError(f"{dotted} must be an integer or null")
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{dotted} must be a boolean")
    if isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return int(value)
        raise ConfigError(f"{dotted} must be an integer")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{dotted} must be a number")
    if isinstance(default, str):
        if isinstance(value, str):
            return value
        raise ConfigError(f"{dotted} must be a string")
    if isinstance(default, list):
        if isinstance(value, list) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        ):
            return [float(v) for v in value]
        raise ConfigError(f"{dotted} must be a list of numbers")
    raise ConfigError(f"{dotted}: unsupported schema entry")


def _merge(raw, defaults, prefix=""):
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'top level'} must be an object")
    for key in raw:
        if key not in defaults:
            raise ConfigError(f"unknown config key: {prefix}{key}")
    merged = {}
    for key, default in defaults.items():
        dotted = prefix + key
        if key not in raw:
            merged[key] = copy.deepcopy(default)
        elif isinstance(default, dict):
            merged[key] = _merge(raw[key], default, dotted + ".")
        else:
            merged[key] = _coerce(raw[key], default, dotted)
    return merged


def load_config(path=None, seed=None, out_dir=None):
    """Schema-validated config: defaults, file overlay, then flag overrides."""
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: not valid JSON ({err})")
    cfg = _merge(raw, DEFAULTS)
    if seed is not None:
        cfg["seed"] = int(seed)
    if out_dir is not None:
        cfg["output_dir"] = str(out_dir)
    return cfg


def scene_config(cfg):
    sc = cfg["scene"]
    return SceneConfig(
        num_classes=sc["num_classes"],
        background_basis=sc["background_basis"],
        texture_freq=tuple(sc["texture_freq"]),
        area_band=tuple(sc["area_band"]),
        sign_flip=sc["sign_flip"],
        seed=sc["seed"],
        size=sc["size"],
    )


def make_workspace(cfg):
    ws = Workspace(
        seed=cfg["seed"],
        dataset_size=cfg["training"]["dataset_size"],
        train_steps=cfg["training"]["steps"],
        epsilon=cfg["lac_epsilon"],
        scene=scene_config(cfg),
        lr=cfg["training"]["lr"],
        probe_ridge=cfg["training"]["probe_ridge"],
        probe_iters=cfg["training"]["probe_iters"],
        attention_blocks=cfg["attention"]["blocks"],
        attention_iters=cfg["attention"]["iters"],
        severity_replicates=cfg["severity"]["replicates"],
        ablation_class=cfg["ablation"]["target_class"],
    )
    enc_seed = cfg["encoder"]["seed"]
    if enc_seed is not None and enc_seed != cfg["seed"]:
        from .encoder import build_encoder

        ws._cache["enc"] = build_encoder(seed=enc_seed)
    return ws


def _outdir(cfg):
    out = cfg["output_dir"]
    os.makedirs(out, exist_ok=True)
    return out


def _write_report(cfg, out, name, command, tables, artifacts):
    payload = {
        "command": command,
        "config": cfg,
        "tables": tables,
        "artifacts": sorted(artifacts),
    }
    path = os.path.join(out, name)
    dump_json(payload, path)
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(cfg, args):
    out = _outdir(cfg)
    ws = make_workspace(cfg)
    t0 = time.time()
    params, history = ws.trained
    probe, probe_report = ws.probe_fit
    artifacts = ["encoder.bin", "lac_params.bin", "history.csv", "probe.bin"]
    save_encoder(os.path.join(out, "encoder.bin"), ws.enc)
    save_params(os.path.join(out, "lac_params.bin"), params)
    write_history_csv(os.path.join(out, "history.csv"), history)
    save_probe(os.path.join(out, "probe.bin"), probe)
    first, last = loss_deciles(history)
    tables = {
        "training": {
            "units": {"loss": "summed absolute pixel error", "gamma": "gain", "beta": "offset"},
            "steps": ws.train_steps,
            "final_loss": history.loss[-1],
            "first_decile_median_loss": first,
            "last_decile_median_loss": last,
            "final_min_gamma": history.min_gamma[-1],
            "final_mean_abs_beta": history.mean_abs_beta[-1],
        },
        "probe": {
            "units": {"accuracy": "fraction of training scenes"},
            "accuracy": probe_report["accuracy"],
            "iterations": probe_report["iterations"],
            "ridge": probe_report["ridge"],
            "classes": probe_report["classes"],
        },
    }
    if cfg["attention"]["train"]:
        head, attn_probe, attn_report = ws.attention
        save_head(os.path.join(out, "attention.bin"), head)
        save_probe(os.path.join(out, "attention_probe.bin"), attn_probe)
        artifacts += ["attention.bin", "attention_probe.bin"]
        tables["attention"] = {
            "units": {"accuracy": "fraction of training scenes", "loss": "cross-entropy"},
            "accuracy": attn_report["accuracy"],
            "final_loss": attn_report["loss_final"],
            "iterations": attn_report["iterations"],
            "blocks": ws.attention_blocks,
        }
    artifacts.append("train_report.json")
    _write_report(cfg, out, "train_report.json", "train", tables, artifacts)
    print(f"trained {ws.train_steps} steps on {ws.dataset_size} scenes; "
          f"final loss {history.loss[-1]:.4f}, probe accuracy {probe_report['accuracy']:.3f}")
    print(f"artifacts in {out}: {', '.join(sorted(artifacts))}")
    print(f"wall-clock {time.time() - t0:.1f}s")
    return 0


def _parse_channels(spec, count, level):
    if spec == "active":
        return None  # resolved against the trace later
    picked = []
    for tok in spec.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            c = int(tok)
        except ValueError:
            raise CommandError(f"--channels expects integers, got {tok!r}")
        if not 0 <= c < count:
            raise CommandError(f"channel {c} out of range 0..{count - 1} at level {level}")
        picked.append(c)
    if not picked:
        raise CommandError("--channels named no channels")
    return picked


def cmd_invert(cfg, args):
    out = _outdir(cfg)
    ws = make_workspace(cfg)
    t0 = time.time()
    enc = ws.enc
    if not 0 <= args.image < ws.dataset_size:
        raise CommandError(f"image index {args.image} out of range 0..{ws.dataset_size - 1}")
    if args.level == "all":
        levels = list(range(enc.levels))
    else:
        try:
            lone = int(args.level)
        except ValueError:
            raise CommandError(f"--level expects an integer or 'all', got {args.level!r}")
        if not 0 <= lone < enc.levels:
            raise CommandError(f"level {lone} out of range 0..{enc.levels - 1}")
        levels = [lone]
    deep = levels[-1]
    channels = _parse_channels(args.channels, enc.level_channels(deep), deep)
    params = ws.params
    trace = ws.trace(args.image)
    scales = {}
    artifacts = []

    def emit(name, image):
        scales[name] = write_ppm(os.path.join(out, name), image)
        artifacts.append(name)

    for l in levels:
        emit(f"xhat_level{l}.ppm", synthesize(enc, trace, params, l).xhat)
    if channels is None:
        channels = [c for c in range(enc.level_channels(deep)) if trace.level(deep)[c].any()]
    for c in channels:
        emit(f"inversion_l{deep}_c{c}.ppm", cascade_invert(enc, trace, params, deep, c))
    if args.class_id is not None:
        classes = ws.probe.weight.shape[0]
        if not 0 <= args.class_id < classes:
            raise CommandError(f"class {args.class_id} out of range 0..{classes - 1}")
        rec = class_reconstruction(enc, trace, params, ws.probe, args.class_id)
        emit(f"class{args.class_id}_combined.ppm", rec.combined)
        emit(f"class{args.class_id}_positive.ppm", rec.positive)
        emit(f"class{args.class_id}_negative.ppm", rec.negative)
    sidecar = {
        "image": args.image,
        "label": int(ws.dataset[args.image].label),
        "levels": levels,
        "channels": channels,
        "units": {"scale": "max absolute raw value mapped to full pixel range"},
        "scales": scales,
    }
    dump_json(sidecar, os.path.join(out, "invert_scales.json"))
    artifacts.append("invert_scales.json")
    print(f"inverted image {args.image} at level(s) {levels}; {len(artifacts)} artifacts in {out}")
    print(f"wall-clock {time.time() - t0:.1f}s")
    return 0


def cmd_verify(cfg, args):
    out = _outdir(cfg)
    ws = make_workspace(cfg)
    patterns = [p.strip() for p in args.checks.split(",") if p.strip()] if args.checks else None
    t0 = time.time()
    try:
        results = run_checks(ws, patterns)
    except ValueError as err:
        raise CommandError(str(err))
    wall = time.time() - t0
    for r in results:
        mark = "PASS" if r.passed else "FAIL"
        print(f"[{mark}] {r.name}: {r.value:.6e} {r.comparison} {r.threshold:.3e} ({r.units})")
    payload = {"command": "verify", "config": cfg, **report_payload(results)}
    path = os.path.join(out, "verify_report.json")
    dump_json(payload, path)
    passed = sum(r.passed for r in results)
    # wall-clock stays on stdout; the serialized report must be byte-stable
    print(f"{passed}/{len(results)} checks passed; report at {path}; wall-clock {wall:.1f}s")
    return 0 if passed == len(results) else 1


def cmd_select(cfg, args):
    out = _outdir(cfg)
    ws = make_workspace(cfg)
    t0 = time.time()
    feats = ws.features
    sigma = centered_covariance(feats)
    k = cfg["selection"]["k"]
    if not 0 < k <= sigma.shape[0]:
        raise CommandError(f"selection k={k} out of range 1..{sigma.shape[0]} channels")
    if ws.dataset_size <= sigma.shape[0]:
        # fewer scenes than channels leaves the covariance singular and the
        # severity log-determinant undefined
        raise CommandError(
            f"severity table needs training.dataset_size > {sigma.shape[0]} channels; "
            f"got {ws.dataset_size}"
        )
    greedy = greedy_select(sigma, k)
    energy = gap_energy_select(feats, k)
    rows = [
        ("greedy_logdet", rank, ch, pv)
        for rank, (ch, pv) in enumerate(zip(greedy.indices, greedy.pivots))
    ] + [
        ("gap_energy", rank, ch, sc)
        for rank, (ch, sc) in enumerate(zip(energy.indices, energy.pivots))
    ]
    write_csv(os.path.join(out, "selection.csv"), ("method", "rank", "channel", "score"), rows)
    sweep = ws.severity
    write_csv(
        os.path.join(out, "severity.csv"),
        ("severity", "sigma_fraction", "logdet", "trace", "effective_rank", "mmd"),
        [
            (r["severity"], r["sigma"], r["logdet"], r["trace"], r["effective_rank"], r["mmd"])
            for r in sweep
        ],
    )
    duality = ws.duality
    tables = {
        "greedy": {
            "units": {"score": "pivot residual variance", "logdet": "nats"},
            "indices": list(greedy.indices),
            "logdet": greedy.logdet,
        },
        "gap_energy": {
            "units": {"score": "mean squared pooled feature"},
            "indices": list(energy.indices),
        },
        "duality": {
            "units": {"agreement_rate": "fraction of trials", "rank_correlation": "Spearman rho"},
            "agreement_rate": duality["agreement_rate"],
            "mean_rank_correlation": duality["mean_rank_correlation"],
            "trials": duality["trials"],
        },
        "severity": {
            "units": {"sigma_fraction": "noise std per unit image std"},
            "grid": list(SEVERITY_SIGMA),
            "rows": sweep,
        },
    }
    artifacts = ["selection.csv", "severity.csv", "select_report.json"]
    _write_report(cfg, out, "select_report.json", "select", tables, artifacts)
    print(f"greedy picks {list(greedy.indices)} (logdet {greedy.logdet:.4f}); "
          f"energy picks {list(energy.indices)}")
    print(f"artifacts in {out}; wall-clock {time.time() - t0:.1f}s")
    return 0


def cmd_ablate(cfg, args):
    out = _outdir(cfg)
    ws = make_workspace(cfg)
    t0 = time.time()
    enc = ws.enc
    target = cfg["ablation"]["target_class"]
    classes = int(ws.labels.max()) + 1
    if not 0 <= target < classes:
        raise CommandError(f"ablation target class {target} out of range 0..{classes - 1}")
    members = [i for i, s in enumerate(ws.dataset) if s.label == target]
    if not members:
        raise CommandError(f"no scenes of class {target} in the dataset")
    ref = members[0]
    trace = ws.trace(ref)
    level = enc.levels - 1
    idx, stack = active_channel_cascades(enc, trace, ws.params, level)
    basis = np.zeros((enc.level_channels(level),) + stack[0].shape)
    for row, c in enumerate(idx):
        basis[c] = stack[row]
    scores = ecr(basis, ws.dataset[ref].mask)
    order = ecr_ranking(scores)
    feats = ws.features[members]
    desc = ablation_curve(ws.probe, feats, target, order, name="descending")
    asc = ablation_curve(ws.probe, feats, target, order[::-1], name="ascending")
    rand = random_ablation_curve(
        ws.probe,
        feats,
        target,
        orders=cfg["ablation"]["random_orders"],
        seed=[cfg["seed"], ABLATE_STREAM],
    )
    write_csv(
        os.path.join(out, "ablation.csv"),
        ("fraction", "descending", "ascending", "random_mean", "random_std"),
        [
            (f, d, a, m, s)
            for f, d, a, m, s in zip(
                desc.fractions, desc.probabilities, asc.probabilities,
                rand.probabilities, rand.std,
            )
        ],
    )
    tables = {
        "ablation": {
            "units": {
                "fraction": "share of channels zeroed",
                "probability": "mean target softmax over test scenes",
            },
            "target_class": target,
            "reference_scene": ref,
            "test_scenes": len(members),
            "random_orders": cfg["ablation"]["random_orders"],
            "region_scores": scores,
            "ranking": order.tolist(),
        }
    }
    artifacts = ["ablation.csv", "ablate_report.json"]
    _write_report(cfg, out, "ablate_report.json", "ablate", tables, artifacts)
    print(f"class {target}: ranked {len(order)} channels from scene {ref}; "
          f"curves over {len(members)} scenes in {out}")
    print(f"wall-clock {time.time() - t0:.1f}s")
    return 0


def cmd_attend(cfg, args):
    out = _outdir(cfg)
    ws = make_workspace(cfg)
    t0 = time.time()
    enc = ws.enc
    if not 0 <= args.image < ws.dataset_size:
        raise CommandError(f"image index {args.image} out of range 0..{ws.dataset_size - 1}")
    head, attn_probe, report = ws.attention
    save_head(os.path.join(out, "attention.bin"), head)
    save_probe(os.path.join(out, "attention_probe.bin"), attn_probe)
    trace = ws.trace(args.image)
    scales = {}
    artifacts = ["attention.bin", "attention_probe.bin"]

    def emit(name, image):
        scales[name] = write_ppm(os.path.join(out, name), image)
        artifacts.append(name)

    for l in range(head.blocks):
        seed = readout_seed(head, trace, ("layer", l))
        emit(f"attend_layer{l}.ppm", attend_visualize(enc, trace, ws.params, seed))
    deepest = trace.levels[-1]
    tokens = deepest.shape[1] * deepest.shape[2]
    fields = [
        attend_visualize(
            enc, trace, ws.params, readout_seed(head, trace, ("token", head.blocks - 1, t))
        )
        for t in range(tokens)
    ]
    emit("attend_tokens.ppm", token_grid(fields, normalize=True))
    for c in range(attn_probe.weight.shape[0]):
        seed = readout_seed(head, trace, ("logit", c), probe=attn_probe)
        emit(f"attend_logit{c}.ppm", attend_visualize(enc, trace, ws.params, seed))
    sidecar = {
        "image": args.image,
        "label": int(ws.dataset[args.image].label),
        "units": {"scale": "max absolute raw value mapped to full pixel range"},
        "scales": scales,
    }
    dump_json(sidecar, os.path.join(out, "attend_scales.json"))
    artifacts.append("attend_scales.json")
    tables = {
        "attention": {
            "units": {"accuracy": "fraction of training scenes", "loss": "cross-entropy"},
            "accuracy": report["accuracy"],
            "final_loss": report["loss_final"],
            "iterations": report["iterations"],
            "blocks": head.blocks,
        }
    }
    artifacts.append("attend_report.json")
    _write_report(cfg, out, "attend_report.json", "attend", tables, artifacts)
    print(f"attention readouts for image {args.image}: {len(scales)} grids in {out}")
    print(f"wall-clock {time.time() - t0:.1f}s")
    return 0


COMMANDS = {
    "train": cmd_train,
    "invert": cmd_invert,
    "verify": cmd_verify,
    "select": cmd_select,
    "ablate": cmd_ablate,
    "attend": cmd_attend,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="artifact",
        description="Hallucination-free encoder inversion: training, inversion, "
        "verification, and analysis pipelines.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="JSON config file (fixed key schema)")
        p.add_argument("--out", metavar="DIR", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, metavar="N", help="global seed (overrides config)")

    common(sub.add_parser("train", help="fit strip affines and the linear probe"))

    invert = sub.add_parser("invert", help="emit reconstructions and channel inversions")
    common(invert)
    invert.add_argument("--image", type=int, default=0, metavar="N", help="dataset scene index")
    invert.add_argument("--level", default="all", metavar="L", help="level index or 'all'")
    invert.add_argument(
        "--channels", default="active", metavar="LIST",
        help="comma-separated channel indices, or 'active'",
    )
    invert.add_argument(
        "--class-id", type=int, default=None, metavar="C",
        help="also emit the class reconstruction and its hemispheres",
    )

    verify = sub.add_parser("verify", help="run the guarantee checks and report pass/fail")
    common(verify)
    verify.add_argument(
        "--checks", metavar="FILTER", default=None,
        help="comma-separated glob patterns over check names",
    )

    common(sub.add_parser("select", help="channel selection, duality report, severity table"))
    common(sub.add_parser("ablate", help="region-ranked feature ablation curves"))

    attend = sub.add_parser("attend", help="train the attention head and emit readout grids")
    common(attend)
    attend.add_argument("--image", type=int, default=0, metavar="N", help="dataset scene index")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, CommandError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
