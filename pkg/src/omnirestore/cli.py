"""Operator-facing command surface for the restoration pipeline.

Subcommands: ``degrade`` (synthetic dataset), ``train``, ``restore``,
``eval``, ``selftest``, and ``bench`` (selection-ratio sweep). Exit codes
are a stable contract: 0 success, 1 self-test failure, 2 usage or
validation problem, 3 I/O or checkpoint problem, 4 numeric abort. Every
command is deterministic for a fixed ``--seed``; artifacts are hash-stable
across repeated invocations.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import os
import sys
import time

import numpy as np

from .degrade import ALL_KINDS, MANIFEST_NAME, Kind, load_manifest, make_dataset
from .engine.flops import WallTimer
from .errors import (
    CheckpointCorruptError,
    CheckpointVersionError,
    ConfigError,
    ConfigMismatchError,
    NumericsError,
    ShapeError,
)
from .metrics import count_model_macs, evaluate_pairs, psnr
from .model import (
    Adam,
    Denoiser,
    ModelConfig,
    config_from_meta,
    load_model,
    restore,
    save_checkpoint,
    training_step,
)
from .pngio import load_png, save_png
from .reporting import save_bench_curve, save_kind_bars, save_loss_curve
from .selftest import all_passed, render_results, run_selftest

EXIT_OK = 0
EXIT_SELFTEST = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _fail(message: str) -> None:
    print(f"error: {message}", file=sys.stderr)


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _parse_kinds(raw: str) -> list[Kind]:
    if raw.strip() == "all":
        return list(ALL_KINDS)
    names = {k.value: k for k in ALL_KINDS}
    kinds = []
    for part in raw.split(","):
        part = part.strip()
        if part not in names:
            raise ConfigError(
                f"--kinds: unknown kind {part!r}; choose from "
                f"{sorted(names)} or 'all'")
        kinds.append(names[part])
    if not kinds:
        raise ConfigError("--kinds: empty list")
    return kinds


def _parse_split(raw: str) -> tuple[int, int]:
    parts = raw.split(":")
    if len(parts) != 2:
        raise ConfigError(f"--split: expected TRAIN:TEST, got {raw!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise ConfigError(f"--split: expected integers, got {raw!r}") from None


def _parse_gammas(raw: str) -> list[float]:
    values = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            value = float(part)
        except ValueError:
            raise ConfigError(f"--gammas: not a number: {part!r}") from None
        if not 0.0 < value <= 1.0:
            raise ConfigError(f"--gammas: ratio must lie in (0, 1], got {value}")
        values.append(value)
    if not values:
        raise ConfigError("--gammas: empty list")
    return values


def _read_config_file(path: str) -> dict[str, str]:
    entries = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(
                    f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            entries[key.strip()] = value.strip()
    return entries


def _build_config(config_path: str | None,
                  overrides: dict[str, str | None]) -> ModelConfig:
    """Defaults <- config file <- explicit flags, strictly validated."""
    flat = ModelConfig().to_flat()
    if config_path:
        entries = _read_config_file(config_path)
        unknown = sorted(set(entries) - set(flat))
        if unknown:
            raise ConfigError(f"{config_path}: unknown config keys {unknown}")
        flat.update(entries)
    flat.update({k: v for k, v in overrides.items() if v is not None})
    return ModelConfig.from_flat(flat)


def _config_overrides(args) -> dict[str, str | None]:
    return {
        "base_channels": None if args.base_channels is None else str(args.base_channels),
        "depth": None if args.depth is None else str(args.depth),
        "gamma": None if args.gamma is None else str(args.gamma),
        "prompt_mode": args.prompt_mode,
    }


def _load_split(data_dir: str, split: str):
    manifest = os.path.join(data_dir, MANIFEST_NAME)
    rows = [r for r in load_manifest(manifest) if r.split == split]
    if not rows:
        raise ConfigError(f"manifest {manifest} has no '{split}' rows")
    clean = np.stack([load_png(os.path.join(data_dir, r.clean_path))
                      for r in rows])
    degraded = np.stack([load_png(os.path.join(data_dir, r.degraded_path))
                         for r in rows])
    kinds = [r.kind.value for r in rows]
    return clean, degraded, kinds


def _run_training(model: Denoiser, clean: np.ndarray, degraded: np.ndarray,
                  schedule, steps: int, batch: int, lr: float, seed: int,
                  log_every: int = 0, on_step=None):
    """Seeded minibatch loop; returns the optimizer and (step, loss) history."""
    if steps < 1:
        raise ConfigError(f"--steps must be positive, got {steps}")
    if batch < 1:
        raise ConfigError(f"--batch must be positive, got {batch}")
    optimizer = Adam(list(model.named_parameters()), lr=lr)
    rng = np.random.default_rng([seed, 1])
    history = []
    for step in range(1, steps + 1):
        idx = rng.integers(0, clean.shape[0], size=batch)
        loss, _ = training_step(model, optimizer, clean[idx], degraded[idx],
                                schedule, rng)
        history.append((step, float(loss)))
        if log_every and step % log_every == 0:
            print(f"step={step} loss={float(loss):.6f}")
        if on_step is not None:
            on_step(step, optimizer)
    return optimizer, history


def _write_loss_csv(path: str, history, lr: float) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,loss,lr\n")
        for step, loss in history:
            fh.write(f"{step},{loss:.8e},{lr:.8e}\n")


def _png_names(directory: str) -> dict[str, str]:
    return {name: os.path.join(directory, name)
            for name in sorted(os.listdir(directory))
            if name.lower().endswith(".png")}


def _image_seed(base_seed: int, name: str) -> int:
    digest = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")
    return int(np.random.SeedSequence([base_seed, digest]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_degrade(args) -> int:
    kinds = _parse_kinds(args.kinds)
    split = _parse_split(args.split)
    manifest = make_dataset(args.n, split, seed=args.seed, out_dir=args.out,
                            size=args.size, kinds=kinds)
    rows = load_manifest(manifest)
    print(f"manifest={manifest}")
    for kind in kinds:
        print(f"kind.{kind.value}={sum(r.kind is kind for r in rows)}")
    print(f"train={sum(r.split == 'train' for r in rows)} "
          f"test={sum(r.split == 'test' for r in rows)}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _build_config(args.config, _config_overrides(args))
    clean, degraded, _ = _load_split(args.data, "train")
    model = Denoiser(config)
    schedule = config.schedule()
    os.makedirs(args.out, exist_ok=True)

    def maybe_checkpoint(step: int, optimizer: Adam) -> None:
        if args.save_every and step % args.save_every == 0 and step != args.steps:
            path = os.path.join(args.out, f"checkpoint_step_{step:06d}.ckpt")
            save_checkpoint(path, model, optimizer,
                            extra_meta={"trained_steps": str(step)})

    try:
        optimizer, history = _run_training(
            model, clean, degraded, schedule, steps=args.steps,
            batch=args.batch, lr=args.lr, seed=args.seed,
            log_every=args.log_every, on_step=maybe_checkpoint)
    except NumericsError as exc:
        report = os.path.join(args.out, "numerics_report.txt")
        with open(report, "w", encoding="utf-8") as fh:
            fh.write(f"{exc}\n")
            for stage, stats in (exc.stage_stats or {}).items():
                row = " ".join(f"{k}={v:.6g}" for k, v in stats.items())
                fh.write(f"stage={stage} {row}\n")
        _fail(f"{exc} (diagnostics: {report})")
        return EXIT_NUMERIC

    csv_path = os.path.join(args.out, "loss.csv")
    _write_loss_csv(csv_path, history, args.lr)
    figure = save_loss_curve(os.path.join(args.out, "loss.png"),
                             [h[0] for h in history], [h[1] for h in history])
    ckpt = os.path.join(args.out, "checkpoint.ckpt")
    save_checkpoint(ckpt, model, optimizer,
                    extra_meta={"trained_steps": str(args.steps)})
    print(f"checkpoint={ckpt}")
    print(f"loss_csv={csv_path}")
    print(f"loss_figure={figure}")
    print(f"final_loss={history[-1][1]:.6f}")
    return EXIT_OK


def cmd_restore(args) -> int:
    model, meta = load_model(args.ckpt)
    schedule = config_from_meta(meta).schedule()
    if os.path.isdir(args.in_path):
        files = _png_names(args.in_path)
        if not files:
            raise ConfigError(f"no PNG files under {args.in_path}")
    else:
        files = {os.path.basename(args.in_path): args.in_path}
    os.makedirs(args.out, exist_ok=True)

    start = time.perf_counter()
    for name, path in files.items():
        image = load_png(path)
        batch, _ = restore(model, image[None], schedule,
                           seed=_image_seed(args.seed, name), gamma=args.gamma)
        save_png(os.path.join(args.out, name), batch[0])
    elapsed = time.perf_counter() - start
    rate = len(files) / elapsed if elapsed > 0 else float("inf")
    print(f"restored={len(files)} seconds={elapsed:.2f} "
          f"images_per_sec={rate:.2f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = _png_names(args.pred)
    ref = _png_names(args.ref)
    orphans = sorted(set(pred) ^ set(ref))
    if orphans:
        for name in orphans:
            side = "prediction" if name in pred else "reference"
            _fail(f"unpaired {side} file: {name}")
        return EXIT_USAGE
    if not pred:
        raise ConfigError("no PNG pairs to evaluate")

    kinds = None
    if args.manifest:
        by_name = {os.path.basename(r.degraded_path): r.kind.value
                   for r in load_manifest(args.manifest)}
        kinds = [by_name.get(name, "unknown") for name in sorted(pred)]

    pairs = [(load_png(pred[name]), load_png(ref[name]))
             for name in sorted(pred)]
    report = evaluate_pairs(pairs, kinds=kinds)

    out_dir = args.out or args.pred
    os.makedirs(out_dir, exist_ok=True)
    text_path = os.path.join(out_dir, "report.txt")
    with open(text_path, "w", encoding="utf-8") as fh:
        fh.write(report.render_text())
    json_path = os.path.join(out_dir, "report.json")
    with open(json_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    figure = save_kind_bars(os.path.join(out_dir, "bars.png"), report)
    print(report.render_text(), end="")
    print(f"report={text_path}")
    print(f"report_json={json_path}")
    print(f"figure={figure}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    names = None if args.suites is None else \
        [p.strip() for p in args.suites.split(",") if p.strip()]
    results = run_selftest(names, seed=args.seed)
    print(render_results(results), end="")
    return EXIT_OK if all_passed(results) else EXIT_SELFTEST


def cmd_bench(args) -> int:
    gammas = _parse_gammas(args.gammas)
    config = _build_config(args.config, {
        "base_channels": None if args.base_channels is None else str(args.base_channels),
        "depth": None if args.depth is None else str(args.depth),
        "gamma": None,
        "prompt_mode": None,
    })
    os.makedirs(args.out, exist_ok=True)

    if args.data:
        data_dir = args.data
    else:
        data_dir = os.path.join(args.out, "data")
        make_dataset(args.n, (2, 1), seed=args.seed, out_dir=data_dir,
                     size=args.size)
    clean_tr, deg_tr, _ = _load_split(data_dir, "train")
    clean_te, deg_te, _ = _load_split(data_dir, "test")
    height, width = clean_te.shape[2:]

    rows = []
    for gamma in gammas:
        cfg = dataclasses.replace(config, gamma=gamma).validate()
        model = Denoiser(cfg)
        schedule = cfg.schedule()
        _run_training(model, clean_tr, deg_tr, schedule, steps=args.steps,
                      batch=args.batch, lr=args.lr, seed=args.seed)
        refine_macs = count_model_macs(model, height, width, gamma=gamma) \
            .scoped_total("route_refine")
        timer = WallTimer()
        with timer:
            restored, _ = restore(model, deg_te, schedule, seed=args.seed,
                                  gamma=gamma)
        route_seconds = timer.seconds.get("route_refine", 0.0)
        quality = float(np.mean([psnr(restored[i], clean_te[i])
                                 for i in range(clean_te.shape[0])]))
        rows.append((gamma, refine_macs, route_seconds, quality))
        print(f"gamma={gamma} refine_macs={refine_macs} "
              f"route_seconds={route_seconds:.4f} psnr_db={quality:.4f}")

    csv_path = os.path.join(args.out, "bench.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("gamma,refine_macs,route_seconds,psnr_db\n")
        for gamma, macs, secs, quality in rows:
            fh.write(f"{gamma},{macs},{secs:.6f},{quality:.6f}\n")
    figure = save_bench_curve(os.path.join(args.out, "bench.png"),
                              [r[0] for r in rows], [r[1] for r in rows],
                              [r[3] for r in rows])
    print(f"bench_csv={csv_path}")
    print(f"bench_figure={figure}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_model_flags(sub) -> None:
    sub.add_argument("--config", help="flat key=value model config file")
    sub.add_argument("--base-channels", type=int, dest="base_channels")
    sub.add_argument("--depth", type=int)
    sub.add_argument("--gamma", type=float,
                     help="channel selection ratio in (0, 1]")
    sub.add_argument("--prompt-mode", dest="prompt_mode",
                     choices=("both", "spatial", "frequency", "none"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="omnirestore",
        description="degradation-agnostic diffusion restoration toolkit")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("degrade", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True, help="samples per kind")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kinds", default="all")
    p.add_argument("--split", default="3:1", help="TRAIN:TEST ratio")
    p.set_defaults(func=cmd_degrade)

    p = commands.add_parser("train", help="train a restoration model")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="artifact directory")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--save-every", type=int, default=0, dest="save_every",
                   help="periodic checkpoint interval (0 = final only)")
    p.add_argument("--log-every", type=int, default=0, dest="log_every")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = commands.add_parser("restore", help="restore degraded images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", required=True, dest="in_path",
                   help="input PNG file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gamma", type=float, default=None,
                   help="override the trained selection ratio")
    p.set_defaults(func=cmd_restore)

    p = commands.add_parser("eval", help="score predictions against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--manifest", help="manifest for per-kind breakdown")
    p.add_argument("--out", help="report directory (default: --pred)")
    p.set_defaults(func=cmd_eval)

    p = commands.add_parser("selftest", help="run built-in verification suites")
    p.add_argument("--suites", help="comma-separated subset (default: all)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selftest)

    p = commands.add_parser("bench", help="selection-ratio sweep")
    p.add_argument("--out", required=True)
    p.add_argument("--gammas", required=True,
                   help="comma-separated selection ratios")
    p.add_argument("--data", help="dataset directory (default: synthesize)")
    p.add_argument("--steps", type=int, default=300,
                   help="fixed training budget per ratio")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=32,
                   help="synthesized image size")
    p.add_argument("--n", type=int, default=6,
                   help="synthesized samples per kind")
    p.add_argument("--config", help="flat key=value model config file")
    p.add_argument("--base-channels", type=int, dest="base_channels")
    p.add_argument("--depth", type=int)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ShapeError) as exc:
        _fail(str(exc))
        return EXIT_USAGE
    except (CheckpointCorruptError, CheckpointVersionError,
            ConfigMismatchError) as exc:
        _fail(str(exc))
        return EXIT_IO
    except OSError as exc:
        _fail(str(exc))
        return EXIT_IO
    except NumericsError as exc:
        _fail(str(exc))
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
