"""``nlab`` command line: prepare, train, detect-eval, report (and synth).

Exit codes: 0 success, 2 usage or input error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import dataset as ds
from . import evaluation as ev
from .detection import Decision, decide, detection_metrics, read_detection_dump
from .nn_core import NumericError
from .trainer import TrainingData, run_training

log = logging.getLogger("nlab")

DATA_DIR_ENV = "NLAB_DATA_DIR"
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _write_kv(path, pairs) -> None:
    with open(path, "w") as fh:
        fh.writelines(f"{k}={v}\n" for k, v in pairs)


def _read_kv(path) -> dict[str, str]:
    return dict(cfgmod.parse_lines(Path(path).read_text()))


def _floats(values) -> str:
    return ",".join(repr(float(v)) for v in values)


# ---------------------------------------------------------------------------


def cmd_prepare(dataset_dir, out_dir, split_spec: ds.SplitSpec, noise_rate: float, noise_seed: int,
                exclude_true: bool = False) -> Path:
    """Split, inject noise, and write the noise manifest plus split files."""
    if not 0.0 <= noise_rate <= 1.0:
        raise UsageError(f"noise rate must lie in [0, 1], got {noise_rate}")
    dataset_dir = Path(dataset_dir)
    try:
        pool, test = ds.load_cifar10(dataset_dir)
        train, val = ds.split(pool, split_spec)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    train = ds.inject_noise(train, noise_rate, noise_seed, exclude_true)
    mean, std = ds.channel_stats(train.images)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds.write_noise_manifest(out / "noise_manifest.csv", train)
    (out / "val_ids.txt").write_text("".join(f"{i}\n" for i in val.ids))
    _write_kv(out / "prepare.txt", [
        ("dataset_dir", str(dataset_dir.resolve())),
        ("train_count", split_spec.train_count),
        ("val_count", split_spec.val_count),
        ("split_seed", split_spec.seed),
        ("stratified", str(split_spec.stratified).lower()),
        ("noise_rate", repr(float(noise_rate))),
        ("noise_seed", noise_seed),
        ("exclude_true", str(exclude_true).lower()),
        ("noisy_count", int(train.is_noisy.sum())),
        ("mean", _floats(mean)),
        ("std", _floats(std)),
    ])
    return out


def load_prepared(prepared_dir, data_cfg: cfgmod.DataConfig | None = None) -> TrainingData:
    prepared_dir = Path(prepared_dir)
    meta = _read_kv(prepared_dir / "prepare.txt")
    pool, test = ds.load_cifar10(meta["dataset_dir"])
    manifest = ds.read_noise_manifest(prepared_dir / "noise_manifest.csv")
    train = pool.take(manifest["id"]).with_observed(manifest["observed_label"])
    val_ids = np.loadtxt(prepared_dir / "val_ids.txt", dtype=np.int64, ndmin=1)
    val = pool.take(val_ids)
    data_cfg = data_cfg or cfgmod.DataConfig()
    if data_cfg.subset:
        train = ds.balanced_subset(train, data_cfg.subset)
    if data_cfg.val_subset:
        val = val.take(np.arange(min(data_cfg.val_subset, len(val))))
    if data_cfg.test_subset:
        test = test.take(np.arange(min(data_cfg.test_subset, len(test))))
    mean = np.array(data_cfg.mean) if data_cfg.mean else np.array(
        [float(v) for v in meta["mean"].split(",")])
    std = np.array(data_cfg.std) if data_cfg.std else np.array(
        [float(v) for v in meta["std"].split(",")])
    return TrainingData(train, val, test, mean, std)


def cmd_train(config_path, overrides=(), out_dir=None, seed=None) -> Path:
    try:
        run_cfg = cfgmod.load(config_path, overrides) if config_path else cfgmod.loads("", overrides)
        if seed is not None:
            run_cfg = cfgmod.from_pairs([("seed", str(seed))], run_cfg)
    except (OSError, cfgmod.ConfigError) as exc:
        raise UsageError(str(exc)) from exc
    if not run_cfg.data.prepared_dir:
        raise UsageError("data.prepared_dir is not set")
    if out_dir is None:
        raise UsageError("--out is required")
    run_dir = Path(out_dir)
    if (run_dir / "manifest.txt").exists():
        raise UsageError(f"{run_dir} already holds a run")
    try:
        data = load_prepared(run_cfg.data.prepared_dir, run_cfg.data)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load prepared data: {exc}") from exc
    # pin normalization constants so the manifest alone reproduces the run
    run_cfg = cfgmod.from_pairs([("data.mean", _floats(data.mean)), ("data.std", _floats(data.std))],
                                run_cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "manifest.txt").write_text(cfgmod.dumps(run_cfg))
    run_training(run_cfg.train, data, run_dir)
    return run_dir


def _schedule_from_run(run_dir: Path):
    run_cfg = cfgmod.load(run_dir / "manifest.txt")
    return run_cfg.train.resolved_schedule()


def cmd_detect_eval(run_dir, epoch: int, out=None) -> dict:
    """Re-score all three decision rules from a stored detection dump."""
    run_dir = Path(run_dir)
    path = run_dir / "detection" / f"epoch_{epoch:03d}.csv"
    if not path.is_file():
        raise UsageError(f"no detection dump for epoch {epoch} in {run_dir}")
    try:
        dump = read_detection_dump(path)
        schedule = _schedule_from_run(run_dir)
    except (ValueError, OSError) as exc:
        raise UsageError(str(exc)) from exc
    out = out or sys.stdout
    rows, results = [], {}
    for d in Decision:
        _, clean = decide(d, dump["p_loss"], dump["p_conf"], schedule, epoch)
        m = detection_metrics(clean, dump["is_noisy_truth"])
        results[d.value] = m
        rows.append({"strategy": d.value, "clean_accuracy": m.accuracy,
                     "predicted_clean_fraction": m.predicted_clean_fraction,
                     "true_clean": m.true_clean, "false_clean": m.false_clean,
                     "true_noisy": m.true_noisy, "false_noisy": m.false_noisy})
        print(f"{d.value:10s} clean_accuracy={m.accuracy:.6f} "
              f"predicted_clean_fraction={m.predicted_clean_fraction:.6f}", file=out)
    ev.write_csv(run_dir / f"detect_eval_epoch_{epoch:03d}.csv",
                 ["strategy", "clean_accuracy", "predicted_clean_fraction", "true_clean",
                  "false_clean", "true_noisy", "false_noisy"], rows)
    return results


def load_run(run_dir) -> tuple[list[dict], ev.RunSummary]:
    run_dir = Path(run_dir)
    rows = ev.load_series(run_dir / "metrics.csv")
    summary = ev.summary_from_row(ev.read_csv(run_dir / "summary.csv")[0])
    return rows, summary


def cmd_report(run_dirs, out_dir) -> dict[str, Path]:
    runs = []
    for d in run_dirs:
        try:
            runs.append(load_run(d))
        except (OSError, IndexError, KeyError, ValueError) as exc:
            log.warning("skipping %s: %s", d, exc)
    if not runs:
        raise UsageError("no valid run directories")
    return ev.build_report(runs, out_dir)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="split, inject label noise, write manifests")
    sp.add_argument("--data", default=os.environ.get(DATA_DIR_ENV),
                    help=f"CIFAR-10 binary directory (default ${DATA_DIR_ENV})")
    sp.add_argument("--out", required=True)
    sp.add_argument("--train-count", type=int, default=45000)
    sp.add_argument("--val-count", type=int, default=5000)
    sp.add_argument("--noise-rate", type=float, default=0.4)
    sp.add_argument("--seed", type=int, default=0, help="split seed")
    sp.add_argument("--noise-seed", type=int, default=1)
    sp.add_argument("--stratified", action="store_true")
    sp.add_argument("--exclude-true", action="store_true",
                    help="never redraw the true class when relabeling")

    sp = sub.add_parser("train", help="run one training job")
    sp.add_argument("--config")
    sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)

    sp = sub.add_parser("detect-eval", help="re-score decision rules from a detection dump")
    sp.add_argument("run_dir")
    sp.add_argument("--epoch", type=int, required=True)

    sp = sub.add_parser("report", help="comparison table and series CSVs")
    sp.add_argument("run_dirs", nargs="+")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("synth", help="write a synthetic dataset in CIFAR-10 binary layout")
    sp.add_argument("--out", required=True)
    sp.add_argument("--per-batch", type=int, default=10000)
    sp.add_argument("--test", type=int, default=10000)
    sp.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "prepare":
            if not args.data:
                raise UsageError(f"--data not given and ${DATA_DIR_ENV} unset")
            cmd_prepare(args.data, args.out,
                        ds.SplitSpec(args.train_count, args.val_count, args.seed, args.stratified),
                        args.noise_rate, args.noise_seed, args.exclude_true)
        elif args.command == "train":
            cmd_train(args.config, args.override, args.out, args.seed)
        elif args.command == "detect-eval":
            cmd_detect_eval(args.run_dir, args.epoch)
        elif args.command == "report":
            cmd_report(args.run_dirs, args.out)
        elif args.command == "synth":
            from .synthetic import write_dataset
            write_dataset(args.out, args.per_batch, args.test, args.seed)
    except UsageError as exc:
        print(f"nlab {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"nlab {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
