"""Command-line surface: train, eval, sample, diagnose, toy.

Run directory layout (fixed names for tooling): manifest.json,
checkpoints/, samples/, metrics.log. All commands are non-interactive and
exit non-zero on any error; config problems are reported all at once.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np
import torch

from . import metrics as M
from . import plotting
from .config import (
    ConfigError,
    ResolvedConfig,
    make_trainer,
    read_manifest,
    resolve_config,
    write_manifest,
)
from .consistency import ToyConfig, run_toy_experiment
from .data import ingest_dataset
from .feature_net import load_feature_network
from .trainer import (
    Trainer,
    append_metric_record,
    checkpoint_load,
    imgs_to_target,
    read_metric_records,
)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fpgan",
        description="GAN training against frozen multi-scale feature projections",
    )
    sub = parser.add_subparsers(dest="command")
    parser.set_defaults(command=None)

    p_train = sub.add_parser("train", help="run or resume a training run")
    _common_config_args(p_train)
    p_train.add_argument("--resume", default=None, help="checkpoint to resume from")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint or scan a run")
    _common_config_args(p_eval)
    p_eval.add_argument("--checkpoint", default=None)
    p_eval.add_argument("--scan", default=None, metavar="RUN_DIR",
                        help="evaluate every snapshot and report the best FID")
    p_eval.add_argument("--metrics", default="fid",
                        help="comma list from {fid,kid,pr,swd}")
    p_eval.add_argument("--n-generated", type=int, default=None,
                        help="override eval.n_generated")
    p_eval.set_defaults(func=cmd_eval)

    p_sample = sub.add_parser("sample", help="render image grids from checkpoints")
    p_sample.add_argument("--checkpoint", nargs="+", required=True)
    p_sample.add_argument("-n", type=int, default=16)
    p_sample.add_argument("--seed", type=int, default=0)
    p_sample.add_argument("--out", required=True,
                          help="grid file (single checkpoint) or directory")
    p_sample.add_argument("--raw-generator", action="store_true",
                          help="sample the live generator instead of the EMA copy")
    p_sample.set_defaults(func=cmd_sample)

    p_diag = sub.add_parser("diagnose", help="per-layer relative Fréchet distances")
    _common_config_args(p_diag)
    p_diag.add_argument("--run-dir", nargs="+", required=True)
    p_diag.add_argument("--baseline", default=None,
                        help="baseline FD file from an rgb_baseline run")
    p_diag.add_argument("--emit-baseline", default=None, metavar="PATH",
                        help="write the per-layer FD file instead of ratios")
    p_diag.add_argument("--n-eval", type=int, default=1024)
    p_diag.set_defaults(func=cmd_diagnose)

    p_toy = sub.add_parser("toy", help="run the consistency toy experiment")
    p_toy.add_argument("--out", required=True)
    p_toy.add_argument("--seed", type=int, default=0)
    p_toy.add_argument("--steps", type=int, default=None)
    p_toy.add_argument("--tolerance", type=float, default=None)
    p_toy.add_argument("--n-projections", type=int, default=None)
    p_toy.add_argument("--plots", action="store_true")
    p_toy.set_defaults(func=cmd_toy)
    return parser


def _common_config_args(p):
    p.add_argument("--config", default=None, help="YAML configuration file")
    p.add_argument("--seed", type=int, default=None, help="override the run seed")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("override", nargs="*",
                   help="dotted-path overrides, e.g. trainer.batch_size=16")


def _resolve(args) -> ResolvedConfig:
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return resolve_config(args.config, overrides)


# -- train ---------------------------------------------------------------------


def cmd_train(args) -> int:
    run_dir = Path(args.out or "run")
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run_dir / "samples").mkdir(parents=True, exist_ok=True)
    log_path = run_dir / "metrics.log"

    if args.resume:
        manifest = read_manifest(run_dir)
        resolved = ResolvedConfig(raw=manifest["config"])
        trainer = Trainer.load(args.resume, run_dir=run_dir)
        dataset = ingest_dataset(resolved.dataset_source())
    else:
        resolved = _resolve(args)
        dataset = ingest_dataset(resolved.dataset_source())
        write_manifest(run_dir, resolved, dataset.content_hash)
        trainer = make_trainer(resolved, run_dir=run_dir)

    run_cfg = trainer.run_cfg
    seed = resolved["seed"]
    snapshot_every = run_cfg.snapshot_imgs
    last_snapshot = trainer.imgs // snapshot_every
    records = []
    print(
        f"training to {run_cfg.total_imgs} Imgs "
        f"(batch {run_cfg.batch_size}, mode {run_cfg.mode}) in {run_dir}"
    )
    while trainer.imgs < run_cfg.total_imgs:
        real = dataset.batch_at(seed, trainer.step, run_cfg.batch_size)
        record = trainer.training_step(real)
        records.append(record)
        if trainer.imgs // snapshot_every > last_snapshot:
            last_snapshot = trainer.imgs // snapshot_every
            _snapshot(trainer, run_dir, log_path, record)
    _snapshot(trainer, run_dir, log_path, records[-1])
    plotting.save_loss_curves(records, run_dir / "loss_curves.png")
    print(f"done: {trainer.step} steps, {trainer.imgs} Imgs")
    return 0


def _snapshot(trainer: Trainer, run_dir: Path, log_path: Path, record: dict) -> None:
    ckpt = run_dir / "checkpoints" / f"ckpt_{trainer.imgs:010d}.fpck"
    trainer.save(ckpt)
    entry = dict(record)
    entry["checkpoint"] = ckpt.name
    entry["fingerprints"] = trainer.frozen_fingerprints()
    append_metric_record(log_path, entry)


# -- eval ----------------------------------------------------------------------


def _generate_images(
    trainer: Trainer, n: int, batch: int, seed: int, use_ema: bool = True
) -> torch.Tensor:
    chunks = []
    produced, chunk_idx = 0, 0
    while produced < n:
        b = min(batch, n - produced)
        chunks.append(trainer.sample_images(b, seed + chunk_idx, use_ema=use_ema))
        produced += b
        chunk_idx += 1
    return torch.cat(chunks)


def cmd_eval(args) -> int:
    resolved = _resolve(args)
    eval_cfg = resolved["eval"]
    n_generated = args.n_generated or eval_cfg["n_generated"]
    batch = eval_cfg["batch_size"]
    dataset = ingest_dataset(resolved.dataset_source())
    space = M.parse_feature_space(eval_cfg["feature_space"])
    cache_root = M.features.default_cache_root()

    real_stats = M.get_or_compute_real_stats(
        cache_root,
        dataset.content_hash,
        space,
        dataset.source.resolution,
        dataset.all_images,
    )

    if args.scan:
        return _eval_scan(args, resolved, dataset, space, real_stats,
                          n_generated, batch)
    if not args.checkpoint:
        raise ConfigError(["eval needs --checkpoint or --scan"])

    trainer = checkpoint_load(args.checkpoint)
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in wanted if m not in ("fid", "kid", "pr", "swd")]
    if unknown:
        raise ConfigError([f"unknown metrics {unknown}"])

    generated = _generate_images(trainer, n_generated, batch, resolved["seed"])
    report = M.MetricsReport(imgs=trainer.imgs)
    gen_feats = real_feats = None
    if {"fid", "kid", "pr"} & set(wanted):
        gen_feats = M.extract_features(space, generated, batch)
    if {"kid", "pr"} & set(wanted):
        real_feats = M.extract_features(space, dataset.all_images(), batch)
    if "fid" in wanted:
        report.fid = M.fid(gen_feats, real_stats, min_count=eval_cfg["min_count"])
    if "kid" in wanted:
        subset = min(
            eval_cfg["kid_subset_size"], gen_feats.shape[0], real_feats.shape[0]
        )
        report.kid = M.kid(
            real_feats, gen_feats, subset_size=subset,
            n_subsets=eval_cfg["kid_subsets"], seed=resolved["seed"],
        )
    if "pr" in wanted:
        p, r = M.precision_recall(real_feats, gen_feats, k=eval_cfg["pr_k"])
        report.precision, report.recall = p, r
    if "swd" in wanted:
        n = min(dataset.num_base_images, generated.shape[0])
        report.swd = M.swd(
            dataset.all_images(n).numpy(), generated[:n].numpy(),
            seed=resolved["seed"],
        )
    record = report.to_record()
    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent.parent
    append_metric_record(out_dir / "metrics.log", record)
    print(json.dumps(record, sort_keys=True))
    return 0


def _eval_scan(args, resolved, dataset, space, real_stats, n_generated, batch) -> int:
    run_dir = Path(args.scan)
    ckpts = sorted((run_dir / "checkpoints").glob("ckpt_*.fpck"))
    if not ckpts:
        raise ConfigError([f"no checkpoints under {run_dir}/checkpoints"])
    history = []
    for ckpt in ckpts:
        trainer = checkpoint_load(ckpt)
        generated = _generate_images(trainer, n_generated, batch, resolved["seed"])
        feats = M.extract_features(space, generated, batch)
        value = M.fid(feats, real_stats, min_count=None)
        history.append((trainer.imgs, value, ckpt.name))
        print(f"{ckpt.name}: imgs={trainer.imgs} fid={value:.4f}")
    best = min(history, key=lambda t: t[1])
    target = imgs_to_target([(imgs, fid) for imgs, fid, _ in history])
    out_dir = Path(args.out) if args.out else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "scan.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["checkpoint", "imgs", "fid"])
        for imgs, fid_v, name in history:
            writer.writerow([name, imgs, f"{fid_v:.6f}"])
    plotting.save_fid_curve(
        [(imgs, fid_v) for imgs, fid_v, _ in history], out_dir / "fid_vs_imgs.png"
    )
    summary = {
        "best_checkpoint": best[2],
        "best_fid": best[1],
        "best_imgs": best[0],
        "imgs_to_target": target,
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


# -- sample --------------------------------------------------------------------


def cmd_sample(args) -> int:
    multiple = len(args.checkpoint) > 1
    out = Path(args.out)
    if multiple:
        out.mkdir(parents=True, exist_ok=True)
    for ckpt in args.checkpoint:
        trainer = checkpoint_load(ckpt)
        # The same seed renders the same latents for every checkpoint, which
        # is the fixed-z tracking mode across snapshots.
        images = _generate_images(
            trainer, args.n, args.n, args.seed, use_ema=not args.raw_generator
        )
        target = out / f"{Path(ckpt).stem}.png" if multiple else out
        plotting.save_image_grid(images, target)
        print(f"wrote {target}")
    return 0


# -- diagnose ------------------------------------------------------------------


def _latest_checkpoint(run_dir: Path) -> Path:
    ckpts = sorted((run_dir / "checkpoints").glob("ckpt_*.fpck"))
    if not ckpts:
        raise ConfigError([f"no checkpoints under {run_dir}/checkpoints"])
    return ckpts[-1]


def _layer_fds(net, real_images, fake_images, batch: int) -> dict:
    real = M.layer_pooled_features(net, real_images, batch)
    fake = M.layer_pooled_features(net, fake_images, batch)
    return {
        str(layer): M.frechet_distance(
            M.gaussian_stats(real[layer]), M.gaussian_stats(fake[layer])
        )
        for layer in real
    }


def cmd_diagnose(args) -> int:
    resolved = _resolve(args)
    dataset = ingest_dataset(resolved.dataset_source())
    net = load_feature_network(resolved.feature_spec())
    batch = resolved["eval"]["batch_size"]
    n_eval = min(args.n_eval, dataset.num_base_images)
    real_images = dataset.all_images(n_eval)
    out_dir = Path(args.out or args.run_dir[0])
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for run in args.run_dir:
        run = Path(run)
        trainer = checkpoint_load(_latest_checkpoint(run))
        fake_images = _generate_images(trainer, n_eval, batch, resolved["seed"])
        fds = _layer_fds(net, real_images, fake_images, batch)
        mode = (
            trainer.projection_cfg.mode
            if trainer.projection_cfg is not None
            else "rgb_baseline"
        )
        levels = ",".join(str(l) for l in trainer.run_cfg.active_levels)
        rows.append({"run": run.name, "mode": mode, "levels": levels, "fds": fds})

    if args.emit_baseline:
        if len(rows) != 1:
            raise ConfigError(["--emit-baseline expects exactly one run dir"])
        payload = {
            "layer_fds": rows[0]["fds"],
            "feature_space": f"{net.spec.architecture_id}",
            "dataset_hash": dataset.content_hash,
        }
        Path(args.emit_baseline).write_text(json.dumps(payload, indent=2))
        print(f"wrote baseline FDs to {args.emit_baseline}")
        return 0

    if not args.baseline:
        raise ConfigError(["diagnose needs --baseline (or --emit-baseline)"])
    baseline = json.loads(Path(args.baseline).read_text())["layer_fds"]

    layer_names = list(baseline)
    with open(out_dir / "rel_fd.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["run", "mode", "levels"]
                        + [f"rel_fd_{l}" for l in layer_names])
        for row in rows:
            ratios = M.rel_fd(row["fds"], baseline)
            writer.writerow(
                [row["run"], row["mode"], row["levels"]]
                + [f"{ratios[l]:.4f}" for l in layer_names]
            )
            print(row["run"], row["mode"], row["levels"],
                  {l: round(ratios[l], 4) for l in layer_names})

    # Signed-logit series straight from each run's metric log.
    with open(out_dir / "signed_logits.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["run", "imgs", "signed_logit_fraction"])
        for run in args.run_dir:
            log = Path(run) / "metrics.log"
            if not log.exists():
                continue
            records = read_metric_records(log)
            for r in records:
                if "signed_logit_fraction" in r:
                    writer.writerow([Path(run).name, r["imgs"],
                                     r["signed_logit_fraction"]])
            plotting.save_signed_logit_plot(
                records, out_dir / f"signed_logits_{Path(run).name}.png"
            )
    print(f"wrote {out_dir / 'rel_fd.csv'}")
    return 0


# -- toy -----------------------------------------------------------------------


def cmd_toy(args) -> int:
    kwargs = {"seed": args.seed}
    for name in ("steps", "tolerance", "n_projections"):
        value = getattr(args, name)
        if value is not None:
            kwargs[name] = value
    cfg = ToyConfig(**kwargs)
    report = run_toy_experiment(cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report.to_record(), indent=2))
    with open(out_dir / "distances.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["projection", "wasserstein_1d", "tolerance", "passed"])
        for i, d in enumerate(report.distances):
            writer.writerow([i, f"{d:.6f}", report.tolerance, d < report.tolerance])
    if args.plots:
        plotting.save_marginal_plots(report, out_dir / "marginals.png")
        plotting.save_loss_curves(report.loss_curve, out_dir / "toy_losses.png")
    print(report.header)
    for i, d in enumerate(report.distances):
        print(f"projection {i}: W1 = {d:.4f} (tolerance {report.tolerance})")
    print("PASSED" if report.passed else "NOT CONVERGED")
    return 0


if __name__ == "__main__":
    sys.exit(main())
