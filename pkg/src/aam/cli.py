"""Command-line entry point.

Verbs: train, build-bank, sample (baseline / aam / sweep), eval,
sweep-report. Every command resolves its configuration (profile defaults,
optional config file, CLI overrides), writes the resolved snapshot next to
its outputs, and writes outputs atomically (temp file + rename).

Exit codes: 1 configuration, 2 I/O, 3 numerical.
"""
from __future__ import annotations

import argparse
import itertools
import os
import sys
import tempfile

import numpy as np

from . import anomaly, config as cfgmod, evaluate, sampler as samplermod, trainer
from .denoiser import Denoiser, load_checkpoint, save_checkpoint
from .errors import ConfigError, NumericalError
from .schedule import build_schedule

ARTIFACT_DIR_ENV = "AAM_ARTIFACT_DIR"
SHEET_COLUMNS = 4
SHEET_ROWS = 2  # 8-up contact sheets
PNG_UPSCALE = 4
EVAL_REFERENCE_CAP = 1000  # reference images used for the Frechet metric


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are configuration problems
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _atomic_save_npy(path: str, array: np.ndarray) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".npy.tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            np.save(f, array)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_contact_sheets(out_dir: str, images: np.ndarray, prefix: str) -> list[str]:
    """8-bit grayscale contact sheets, 8 images per sheet (2x4 grid)."""
    from PIL import Image

    os.makedirs(out_dir, exist_ok=True)
    per_sheet = SHEET_COLUMNS * SHEET_ROWS
    size = images.shape[-1]
    cell = size * PNG_UPSCALE
    paths = []
    for sheet_idx, lo in enumerate(range(0, images.shape[0], per_sheet)):
        chunk = images[lo:lo + per_sheet]
        canvas = np.zeros((SHEET_ROWS * cell, SHEET_COLUMNS * cell), dtype=np.uint8)
        for i, img in enumerate(chunk):
            gray = np.clip((img[0] + 1.0) * 127.5, 0, 255).astype(np.uint8)
            gray = np.repeat(np.repeat(gray, PNG_UPSCALE, axis=0), PNG_UPSCALE, axis=1)
            r, c = divmod(i, SHEET_COLUMNS)
            canvas[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell] = gray
        path = os.path.join(out_dir, f"{prefix}_sheet{sheet_idx:03d}.png")
        fd, tmp = tempfile.mkstemp(dir=out_dir, suffix=".png.tmp")
        os.close(fd)
        try:
            Image.fromarray(canvas, mode="L").save(tmp, format="PNG")
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        paths.append(path)
    return paths


def _resolve_out(args) -> str:
    if args.out:
        return args.out
    return os.environ.get(ARTIFACT_DIR_ENV, "artifacts")


def _load_config(args) -> cfgmod.RunConfig:
    overrides: dict[str, str] = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
        overrides["dataset.seed"] = str(args.seed)
        overrides["train.seed"] = str(args.seed)
    return cfgmod.load_run_config(args.config, args.profile, overrides)


def _write_snapshot(out_dir: str, cfg: cfgmod.RunConfig) -> None:
    _atomic_write_text(os.path.join(out_dir, "run_config.txt"), cfgmod.snapshot_text(cfg))


def _progress(label: str):
    def report(done: int, total: int, t: int) -> None:
        if done == total or done % 25 == 0:
            print(f"[{label}] step {done}/{total} (t={t})", file=sys.stderr, flush=True)

    return report


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _resolve_out(args)
    os.makedirs(out, exist_ok=True)
    _write_snapshot(out, cfg)
    print(f"generating dataset ({cfg.dataset.count} images)...", file=sys.stderr)
    dataset = trainer.generate_shapes_dataset(cfg.dataset)
    trainer.save_dataset(os.path.join(out, "dataset.bin"), dataset, cfg.dataset)
    schedule = build_schedule(cfg.train.total_steps)
    print(f"training for {cfg.train.steps} steps...", file=sys.stderr)
    result = trainer.train(dataset, cfg.train, schedule, cfg.denoiser_config())
    ckpt = os.path.join(out, "checkpoint.ckpt")
    save_checkpoint(result.model, ckpt)
    curve = "step,loss\n" + "\n".join(
        f"{i},{loss:.8g}" for i, loss in enumerate(result.losses)
    ) + "\n"
    _atomic_write_text(os.path.join(out, "loss_curve.csv"), curve)
    print(f"checkpoint: {ckpt}")
    print(f"final-100 mean loss: {result.losses[-100:].mean():.6f}")
    return 0


def _bank_t_grid(cfg: cfgmod.RunConfig) -> tuple[int, ...]:
    grid = cfg.bank_t_grid()
    if cfg.sampler.t1 > cfg.sampler.t2:
        for t in grid:
            if not (cfg.sampler.t2 <= t <= cfg.sampler.t1):
                raise ConfigError(
                    f"bank.t_grid entry {t} outside tuning window "
                    f"[{cfg.sampler.t2}, {cfg.sampler.t1}]"
                )
    return grid


def cmd_build_bank(args) -> int:
    cfg = _load_config(args)
    out = _resolve_out(args)
    os.makedirs(out, exist_ok=True)
    _write_snapshot(out, cfg)
    needed = cfg.bank.source_images + cfg.bank.holdout_images
    if cfg.dataset.count < needed:
        raise ConfigError(
            f"dataset.count={cfg.dataset.count} too small for bank.source_images+"
            f"bank.holdout_images={needed}"
        )
    model = load_checkpoint(args.checkpoint)
    schedule = build_schedule(cfg.sampler.total_steps)
    dataset = trainer.generate_shapes_dataset(cfg.dataset)
    src = dataset[: cfg.bank.source_images]
    holdout = dataset[cfg.bank.source_images: needed]
    t_grid = _bank_t_grid(cfg)
    print(f"extracting bank features (t_grid={list(t_grid)})...", file=sys.stderr)
    feats = anomaly.collect_bank_features(
        src, model, schedule, list(t_grid), cfg.bank.per_image, cfg.seed,
        max_batch=cfg.sampler.max_batch,
    )
    print(f"coreset over {feats.shape[0]} rows...", file=sys.stderr)
    bank = anomaly.build_memory_bank(
        feats,
        cfg.bank.coreset_fraction,
        cfg.seed,
        descriptor={
            "tap_indices": list(cfg.feature_taps),
            "image_size": cfg.dataset.image_size,
            "pooling": "avg3x3",
            "t_grid": list(t_grid),
            "source_images": cfg.bank.source_images,
        },
    )
    anomaly.calibrate(
        bank, holdout, model, schedule, list(t_grid), seed=cfg.seed + 1,
        max_batch=cfg.sampler.max_batch,
    )
    path = os.path.join(out, "bank.bin")
    anomaly.save_bank(bank, path)
    beta = bank.mask_threshold(cfg.sampler.beta_multiplier)
    print(f"bank: {path} rows={bank.features.shape[0]} dim={bank.dim}")
    print(f"mu_s={bank.mu_s:.6g} sigma_s={bank.sigma_s:.6g} beta={beta:.6g}")
    return 0


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    out = _resolve_out(args)
    os.makedirs(out, exist_ok=True)
    _write_snapshot(out, cfg)
    model = load_checkpoint(args.checkpoint)
    schedule = build_schedule(cfg.sampler.total_steps)
    count = cfg.sample_count

    if args.mode == "baseline":
        images = samplermod.baseline_sample(
            model, schedule, cfg.sampler.ddim_steps, count, cfg.seed,
            max_batch=cfg.sampler.max_batch,
        )
        _atomic_save_npy(os.path.join(out, "samples_baseline.npy"), images)
        save_contact_sheets(out, images, "baseline")
        print(f"baseline samples: {out}/samples_baseline.npy")
        return 0

    if args.mode == "aam":
        if not args.bank:
            raise ConfigError("--bank is required in aam mode")
        bank = anomaly.load_bank(args.bank)
        result = samplermod.sample(
            model, bank, schedule, cfg.sampler, count, cfg.seed,
            progress=_progress("aam"),
        )
        _atomic_save_npy(os.path.join(out, "samples_aam.npy"), result.images)
        save_contact_sheets(out, result.images, "aam")
        for i, state in enumerate(result.states):
            samplermod.write_trace(os.path.join(out, f"trace_{i:03d}.csv"), state)
        print(f"aam samples: {out}/samples_aam.npy ({len(result.states)} traces)")
        return 0

    # sweep: cartesian product of the per-resolution tau ladders
    if not cfg.sweep_taus:
        raise ConfigError("sweep mode needs sweep.tau.<resolution> ladders in the config")
    resolutions = sorted(cfg.sweep_taus)
    for setting in itertools.product(*(cfg.sweep_taus[r] for r in resolutions)):
        tau_map = dict(zip(resolutions, setting))
        label = "_".join(f"tau{r}-{v:g}" for r, v in tau_map.items())
        setting_dir = os.path.join(out, "sweep", label)
        os.makedirs(setting_dir, exist_ok=True)
        images = samplermod.fixed_tau_sample(
            model, schedule, cfg.sampler.ddim_steps, tau_map, count, cfg.seed,
            max_batch=cfg.sampler.max_batch,
        )
        _atomic_save_npy(os.path.join(setting_dir, "samples_sweep.npy"), images)
        save_contact_sheets(setting_dir, images, "sweep")
        print(f"sweep {label}: {setting_dir}/samples_sweep.npy")
    return 0


def _find_sample_files(directory: str) -> list[tuple[str, str]]:
    found = []
    for name in sorted(os.listdir(directory)):
        if name.startswith("samples_") and name.endswith(".npy"):
            found.append((name[len("samples_"):-len(".npy")], os.path.join(directory, name)))
    return found


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _resolve_out(args)
    os.makedirs(out, exist_ok=True)
    _write_snapshot(out, cfg)
    if os.path.isdir(args.generated):
        arms = _find_sample_files(args.generated)
        if not arms:
            raise ConfigError(f"no samples_*.npy files under {args.generated}")
    else:
        label = os.path.basename(args.generated).removesuffix(".npy").removeprefix("samples_")
        arms = [(label, args.generated)]
    model = load_checkpoint(args.checkpoint)
    reference = trainer.generate_shapes_dataset(cfg.dataset)[:EVAL_REFERENCE_CAP]
    fingerprint = cfgmod.sampler_fingerprint(cfg.sampler)
    csv_path = os.path.join(out, "results.csv")
    for label, path in arms:
        images = np.load(path)
        if args.label:
            label = args.label
        report = evaluate.evaluate_arm(images, reference, model, label, fingerprint)
        print(report.to_json_line())
        evaluate.append_report_csv(csv_path, report)
        print(
            f"{label}: n={report.sample_count} hallucination_rate="
            f"{report.hallucination_rate:.4f} frechet={report.frechet_distance:.4f}"
        )
    print(f"results appended to {csv_path}")
    return 0


def cmd_sweep_report(args) -> int:
    sweep_dir = os.path.join(args.sweep_dir, "sweep")
    if not os.path.isdir(sweep_dir):
        raise ConfigError(f"no sweep/ directory under {args.sweep_dir}")
    rows = []
    for label in sorted(os.listdir(sweep_dir)):
        path = os.path.join(sweep_dir, label, "samples_sweep.npy")
        if not os.path.exists(path):
            continue
        images = np.load(path)
        verdicts = [evaluate.detect_shape_hallucination(img) for img in images]
        rate = float(np.mean([v.is_hallucinated for v in verdicts]))
        rows.append((label, images.shape[0], rate))
    if not rows:
        raise ConfigError(f"no sweep outputs under {sweep_dir}")
    out = _resolve_out(args)
    os.makedirs(out, exist_ok=True)
    lines = ["setting,n,hal_rate"] + [f"{l},{n},{r:.6g}" for l, n, r in rows]
    _atomic_write_text(os.path.join(out, "sweep_report.csv"), "\n".join(lines) + "\n")
    width = max(len(l) for l, _, _ in rows)
    print(f"{'setting'.ljust(width)}  n    hal_rate")
    for label, n, rate in rows:
        print(f"{label.ljust(width)}  {n:<4d} {rate:.4f}")
    print(f"report: {os.path.join(out, 'sweep_report.csv')}")
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file (flat key = value)")
    p.add_argument("--profile", choices=sorted(cfgmod.PROFILES), help="built-in profile")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--threads", type=int, help="torch intra-op threads")
    p.add_argument("--out", help=f"output directory (default ${ARTIFACT_DIR_ENV} or ./artifacts)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aam", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="generate the dataset and train the denoiser")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build-bank", help="build and calibrate the memory bank")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_build_bank)

    p = sub.add_parser("sample", help="generate samples")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bank", help="memory bank file (required for aam mode)")
    p.add_argument("--mode", choices=["baseline", "aam", "sweep"], default="baseline")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="hallucination rate and Frechet metrics")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--generated", required=True, help="samples_*.npy file or directory")
    p.add_argument("--label", help="override the arm label")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-report", help="summarize a sweep run")
    _add_common(p)
    p.add_argument("--sweep-dir", required=True, help="directory passed to sample --mode sweep")
    p.set_defaults(func=cmd_sweep_report)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "threads", None):
            import torch

            torch.set_num_threads(args.threads)
        return args.func(args)
    except NumericalError as exc:
        print(f"error (numerical): {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error (I/O): {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError) as exc:
        print(f"error (config): {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
