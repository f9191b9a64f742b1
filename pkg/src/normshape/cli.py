"""Command-line pipeline driver.

Subcommands: synth, preprocess, train, score, fewshot, project, interp,
eval. Global flags: --config (JSON with flat dotted keys), --seed,
--threads (NORMSHAPE_THREADS as fallback), --out-dir, and repeatable
--set key=value overrides. Every run writes a manifest recording the
config hash, seed, and tool version; identical config + seed reruns
produce byte-identical outputs.

Exit codes: 0 success, 2 usage, 3 bad input, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, errors
from ._accel import set_threads
from .augment import AugmentRanges
from .detect import asm_fit, asm_project, fit_normative, volume_baseline_score, zero_shot_score
from .evaluate import (
    REPORT_HEADER,
    crossval_fewshot,
    interpolate_groups,
    pca_2d,
    report_from_scores,
    stratified_kfold,
    write_pgm_midslice,
)
from .optim import SgdSchedule
from .synth import AbnormalityParams, ShapeGenParams, gen_cohort
from .vae import VaeConfig, VaeParams, encode_batch, plan_total_steps, train
from .volume import MaskVolume, center_in_grid, load_mask, resample, save_mask, volume_mm3

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_BAD_INPUT = 3
EXIT_RUNTIME = 4

_BAD_INPUT_ERRORS = (
    errors.MalformedHeader,
    errors.SizeMismatch,
    errors.NonBinaryVoxel,
    errors.InvalidSpacing,
    errors.EmptyMask,
    errors.DoesNotFit,
    errors.DimMismatch,
    errors.LengthMismatch,
    errors.SingleClass,
    errors.EmptyCohort,
    errors.EmptyGroup,
    errors.InvalidK,
    errors.TooFewSamples,
    errors.ShapeMismatch,
    FileNotFoundError,
    NotADirectoryError,
    ValueError,
    json.JSONDecodeError,
)


def _parse_set(kv: str):
    if "=" not in kv:
        raise ValueError(f"--set expects key=value, got {kv!r}")
    key, raw = kv.split("=", 1)
    try:
        return key, json.loads(raw)
    except json.JSONDecodeError:
        return key, raw


def load_config(path, overrides):
    cfg = {}
    if path is not None:
        with open(path) as fh:
            cfg = json.load(fh)
        if not isinstance(cfg, dict):
            raise ValueError("config must be a JSON object of dotted keys")
    for kv in overrides or []:
        key, val = _parse_set(kv)
        cfg[key] = val
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: dict, seed: int) -> None:
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "version": __version__,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _load_dir(d) -> tuple[list, list]:
    """All .mvol masks under a directory, sorted by filename; (ids, masks)."""
    d = Path(d)
    if not d.is_dir():
        raise NotADirectoryError(f"not a directory: {d}")
    paths = sorted(d.glob("*.mvol"))
    if not paths:
        raise errors.EmptyCohort(f"no .mvol files in {d}")
    return [p.stem for p in paths], [load_mask(p) for p in paths]


def _req(cfg: dict, key: str):
    if key not in cfg:
        raise ValueError(f"config key {key} is required")
    return cfg[key]


def _tuple3(cfg, key, default, cast=int):
    v = cfg.get(key, default)
    t = tuple(cast(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"{key} must have 3 entries")
    return t


def _vae_config(cfg: dict) -> VaeConfig:
    channels = tuple(int(c) for c in cfg.get("model.channels", (8, 16, 32)))
    return VaeConfig(
        input_dims=_tuple3(cfg, "model.dims", (48, 32, 16)),
        spacing_mm=_tuple3(cfg, "model.spacing", (1.0, 1.0, 2.0), float),
        stages=len(channels),
        channels=channels,
        latent_dim=int(cfg.get("model.latent_dim", 32)),
        kl_warmup_steps=int(cfg.get("train.kl_warmup_steps", 100)),
    )


def _load_model(cfg: dict) -> VaeParams:
    path = cfg.get("model.path")
    if path is None:
        raise ValueError("config key model.path is required")
    return VaeParams.load(path, _vae_config(cfg))


def _write_scores_csv(path, rows):
    """rows: iterable of (id, label, score, method)."""
    with open(path, "w") as fh:
        fh.write("id,label,score,method\n")
        for rid, label, score, method in rows:
            fh.write(f"{rid},{label},{score:.6f},{method}\n")


def _read_scores_csv(path):
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "id,label,score,method":
            raise errors.MalformedHeader(f"bad scores CSV header: {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rid, label, score, method = line.split(",")
            rows.append((rid, int(label), float(score), method))
    return rows


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: dict, seed: int, out_dir: Path) -> int:
    n = int(cfg.get("synth.n", 20))
    kind = cfg.get("synth.kind", "healthy")
    if kind not in ("healthy", "abnormal"):
        raise ValueError(f"synth.kind must be healthy or abnormal, got {kind!r}")
    dims = _tuple3(cfg, "synth.dims", (48, 32, 16))
    base = ShapeGenParams()
    # scale the default tube geometry with the grid so small smoke-test
    # grids still fit a valid shape
    ratio = [d / b for d, b in zip(dims, base.grid_dims)]
    r_mean = float(np.mean(ratio))
    params = ShapeGenParams(
        grid_dims=dims,
        spacing_mm=_tuple3(cfg, "synth.spacing", (1.0, 1.0, 2.0), float),
        centerline_control_points=tuple(
            tuple(
                min(max(c * r, rad_max), n - 1 - rad_max)
                for c, r, n, rad_max in zip(
                    pt, ratio, dims, [max(base.radius_profile) * r_mean] * 3
                )
            )
            for pt in base.centerline_control_points
        ),
        radius_profile=tuple(r * r_mean for r in base.radius_profile),
        jitter_sd=float(cfg.get("synth.jitter_sd", 1.2 * r_mean)),
    )
    ab = None
    if kind == "abnormal":
        ab = AbnormalityParams(
            shrink_factor=float(cfg.get("synth.shrink_factor", 0.45)),
            volume_preserving=bool(cfg.get("synth.volume_preserving", True)),
        )
    masks = gen_cohort(n, params, ab, seed)
    label = 0 if kind == "healthy" else 1
    with open(out_dir / "cohort.csv", "w") as fh:
        fh.write("filename,label,seed,volume_mm3\n")
        for i, m in enumerate(masks):
            name = f"{kind}_{i:04d}.mvol"
            save_mask(m, out_dir / name)
            fh.write(f"{name},{label},{seed + i},{volume_mm3(m):.6f}\n")
    return EXIT_OK


def cmd_preprocess(cfg: dict, seed: int, out_dir: Path) -> int:
    ids, masks = _load_dir(_req(cfg, "preprocess.in_dir"))
    spacing = _tuple3(cfg, "preprocess.spacing", (1.0, 1.0, 2.0), float)
    dims = _tuple3(cfg, "preprocess.dims", (48, 32, 16))
    for rid, m in zip(ids, masks):
        out = center_in_grid(resample(m, spacing), dims)
        save_mask(out, out_dir / f"{rid}.mvol")
    return EXIT_OK


def cmd_train(cfg: dict, seed: int, out_dir: Path) -> int:
    _, masks = _load_dir(_req(cfg, "train.in_dir"))
    vcfg = _vae_config(cfg)
    epochs = int(cfg.get("train.epochs", 200))
    batch = int(cfg.get("train.batch_size", 8))
    accum = int(cfg.get("train.accum_steps", 5))
    total = plan_total_steps(int(round(0.8 * len(masks))), epochs, batch, accum)
    if "train.kl_warmup_steps" not in cfg:
        vcfg = dataclasses.replace(vcfg, kl_warmup_steps=max(1, total // 10))
    sched = SgdSchedule(
        lr0=float(cfg.get("train.lr0", 1e-4)),
        total_steps=total,
        power=float(cfg.get("train.power", 0.9)),
        momentum=float(cfg.get("train.momentum", 0.9)),
    )
    aug = AugmentRanges() if bool(cfg.get("train.augment", True)) else None
    log_lines = []

    def log(row):
        line = (
            f"epoch {row['epoch']} train_loss {row['train_loss']:.4f} "
            f"val_loss {row['val_loss']:.4f} val_dice {row['val_dice']:.4f} "
            f"lr {row['lr']:.6g}"
        )
        log_lines.append(line)
        print(line)

    params, history = train(
        masks,
        vcfg,
        sched,
        aug,
        split_seed=seed,
        epochs=epochs,
        batch_size=batch,
        accum_steps=accum,
        grad_clip_norm=float(cfg.get("train.grad_clip", 30.0)),
        log_fn=log,
    )
    params.save(out_dir / "model.nsckpt")
    with open(out_dir / "history.csv", "w") as fh:
        fh.write("epoch,train_loss,val_loss,val_dice,lr\n")
        for r in history.rows():
            fh.write(
                f"{r['epoch']},{r['train_loss']:.6f},{r['val_loss']:.6f},"
                f"{r['val_dice']:.6f},{r['lr']:.6g}\n"
            )
    return EXIT_OK


def _score_sets(cfg: dict):
    """Shared loading for score/fewshot/project/interp: model, train cohort
    latents, and labelled test latents/masks."""
    params = _load_model(cfg)
    _, train_masks = _load_dir(_req(cfg, "score.train_dir"))
    h_ids, h_masks = _load_dir(_req(cfg, "score.test_healthy_dir"))
    a_ids, a_masks = _load_dir(_req(cfg, "score.test_abnormal_dir"))
    train_z = encode_batch(params, train_masks)
    test_z = encode_batch(params, h_masks + a_masks)
    labels = np.array([0] * len(h_masks) + [1] * len(a_masks))
    ids = h_ids + a_ids
    return params, train_masks, train_z, h_masks + a_masks, test_z, ids, labels


def cmd_score(cfg: dict, seed: int, out_dir: Path) -> int:
    _, train_masks, train_z, test_masks, test_z, ids, labels = _score_sets(cfg)
    stats = fit_normative(train_z, train_masks)
    rows = []
    for rid, label, z in zip(ids, labels, test_z):
        rows.append((rid, int(label), zero_shot_score(z, stats), "zero_shot"))
    for rid, label, m in zip(ids, labels, test_masks):
        rows.append((rid, int(label), volume_baseline_score(m, stats), "volume"))
    if bool(cfg.get("score.asm", False)):
        k = int(cfg.get("score.asm_k", min(16, len(train_masks) - 1)))
        asm = asm_fit(train_masks, k)
        asm_train = np.stack([asm_project(asm, m) for m in train_masks])
        asm_stats = fit_normative(asm_train)
        for rid, label, m in zip(ids, labels, test_masks):
            rows.append(
                (rid, int(label), zero_shot_score(asm_project(asm, m), asm_stats), "asm_zero_shot")
            )
    _write_scores_csv(out_dir / "scores.csv", rows)
    return EXIT_OK


def cmd_fewshot(cfg: dict, seed: int, out_dir: Path) -> int:
    _, _, _, _, test_z, ids, labels = _score_sets(cfg)
    k_cfg = cfg.get("fewshot.k", "loo")
    k = len(labels) if k_cfg == "loo" else int(k_cfg)
    plan = stratified_kfold(labels, k, seed=seed)
    report = crossval_fewshot(
        test_z,
        labels,
        plan,
        lam=float(cfg.get("fewshot.lam", 0.01)),
        epochs=int(cfg.get("fewshot.epochs", 20)),
        seed=seed,
        reps=int(cfg.get("fewshot.reps", 10000)),
    )
    with open(out_dir / "report.csv", "w") as fh:
        fh.write(REPORT_HEADER + "\n")
        fh.write(report.summary_row() + "\n")
    return EXIT_OK


def cmd_project(cfg: dict, seed: int, out_dir: Path) -> int:
    _, _, _, _, test_z, ids, labels = _score_sets(cfg)
    coords = pca_2d(test_z)
    with open(out_dir / "pca.csv", "w") as fh:
        fh.write("id,label,p1,p2\n")
        for rid, label, (p1, p2) in zip(ids, labels, coords):
            fh.write(f"{rid},{int(label)},{p1:.6f},{p2:.6f}\n")
    return EXIT_OK


def cmd_interp(cfg: dict, seed: int, out_dir: Path) -> int:
    params, _, _, _, test_z, ids, labels = _score_sets(cfg)
    ts = cfg.get("interp.ts")
    ts = tuple(float(t) for t in ts) if ts is not None else None
    pairs = interpolate_groups(params, test_z[labels == 0], test_z[labels == 1], ts)
    with open(out_dir / "interp_volumes.csv", "w") as fh:
        fh.write("t,volume_mm3\n")
        for t, mask in pairs:
            write_pgm_midslice(mask, out_dir / f"interp_t{t:g}.pgm")
            fh.write(f"{t:g},{volume_mm3(mask):.6f}\n")
    return EXIT_OK


def cmd_eval(cfg: dict, seed: int, out_dir: Path) -> int:
    rows = _read_scores_csv(_req(cfg, "eval.scores_csv"))
    reps = int(cfg.get("eval.reps", 10000))
    methods = sorted({r[3] for r in rows})
    with open(out_dir / "report.csv", "w") as fh:
        fh.write(REPORT_HEADER + "\n")
        for method in methods:
            sub = [r for r in rows if r[3] == method]
            labels = np.array([r[1] for r in sub])
            scores = np.array([r[2] for r in sub])
            if labels.min() == labels.max():
                raise errors.SingleClass(
                    f"method {method}: only class {int(labels[0])} present in scores"
                )
            report = report_from_scores(method, scores, labels, reps=reps, seed=seed)
            fh.write(report.summary_row() + "\n")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "score": cmd_score,
    "fewshot": cmd_fewshot,
    "project": cmd_project,
    "interp": cmd_interp,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="normshape", description="Normative shape modelling pipeline."
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", help="JSON config file with flat dotted keys")
        p.add_argument("--seed", type=int, default=0, help="global random seed")
        p.add_argument("--threads", type=int, default=None, help="worker thread cap")
        p.add_argument("--out-dir", required=True, help="output directory")
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            dest="overrides",
            help="override a config key (repeatable)",
        )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        threads = args.threads
        if threads is None and os.environ.get("NORMSHAPE_THREADS"):
            threads = int(os.environ["NORMSHAPE_THREADS"])
        if threads is not None:
            set_threads(threads)
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        code = COMMANDS[args.command](cfg, args.seed, out_dir)
        write_manifest(out_dir, args.command, cfg, args.seed)
        return code
    except _BAD_INPUT_ERRORS as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except errors.NormshapeError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
