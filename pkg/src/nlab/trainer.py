"""Training loop: warm-up, rotation augmentation, composite losses, lambda refresh.

Every objective is a per-sample weighting of the two cross-entropies,
``mean(w_class * CE_class + w_rot * CE_rot)``:

=============== ============== =====================
mode            w_class        w_rot
=============== ============== =====================
baseline        1              0
augmentation    1              0   (rotated inputs)
regularization  1              alpha * (1 - lambda)
separation      [lambda >= c]  [lambda < c]
=============== ============== =====================
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import dataset as ds
from .detection import (
    CleanPosterior,
    Decision,
    DetectionMetrics,
    TemperatureSchedule,
    collect_stats,
    run_detection,
    strategy_metrics,
    write_detection_dump,
)
from .evaluation import (
    Protocol,
    RunSummary,
    SERIES_COLUMNS,
    SUMMARY_COLUMNS,
    accuracies,
    accuracy,
    series_rows,
    summary_row,
    write_csv,
)
from .nn_core import (
    Architecture,
    SgdConfig,
    Sgd,
    TwoHeadNetwork,
    backward_and_step,
    save_checkpoint,
    weighted_loss,
)

log = logging.getLogger(__name__)


class Mode(str, Enum):
    BASELINE = "baseline"
    AUGMENTATION = "augmentation"
    REGULARIZATION = "regularization"
    SEPARATION = "separation"


@dataclass(frozen=True)
class TrainConfig:
    mode: Mode = Mode.REGULARIZATION
    decision: Decision = Decision.LOSS_ONLY
    reg_weight: float = 1.0
    cutoff: float = 0.5
    warmup_epochs: int = 0
    max_epochs: int = 30
    noise_rate: float = 0.0
    # total_epochs=0: the schedule spans max_epochs
    schedule: TemperatureSchedule = field(default_factory=lambda: TemperatureSchedule(total_epochs=0))
    sgd: SgdConfig = field(default_factory=SgdConfig)
    arch: Architecture = field(default_factory=Architecture)
    seed: int = 0
    fixed_lambda: float | None = None
    normalize_loss: bool = True
    track_detection: bool = False
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "decision", Decision(self.decision))
        if not 0 <= self.warmup_epochs <= self.max_epochs:
            raise ValueError("need 0 <= warmup_epochs <= max_epochs")
        if not 0.0 <= self.cutoff <= 1.0:
            raise ValueError("cutoff must lie in [0, 1]")
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be >= 0")
        if self.fixed_lambda is not None and not 0.0 <= self.fixed_lambda <= 1.0:
            raise ValueError("fixed_lambda must lie in [0, 1]")

    @property
    def uses_detection(self) -> bool:
        needs = self.mode in (Mode.REGULARIZATION, Mode.SEPARATION)
        return (needs and self.fixed_lambda is None) or self.track_detection

    @property
    def rotates(self) -> bool:
        return self.mode is not Mode.BASELINE

    @property
    def protocols(self) -> tuple[Protocol, ...]:
        if self.mode is Mode.BASELINE:
            return (Protocol.ONE_IMAGE,)
        return (Protocol.ONE_IMAGE, Protocol.FOUR_ROTATION)

    @property
    def run_name(self) -> str:
        return self.name or self.mode.value

    def resolved_schedule(self) -> TemperatureSchedule:
        if self.schedule.total_epochs == 0:
            return replace(self.schedule, total_epochs=self.max_epochs)
        return self.schedule


# ---------------------------------------------------------------------------
# objectives (batch means of per-sample values)


def _check_lambdas(lambdas) -> np.ndarray:
    lam = np.asarray(lambdas, dtype=np.float64)
    if lam.size and (lam.min() < 0 or lam.max() > 1):
        raise ValueError("lambda values must lie in [0, 1]")
    return lam


def loss_baseline(class_losses) -> float:
    return float(np.mean(class_losses))


def loss_regularization(class_losses, rot_losses, lambdas, alpha: float) -> float:
    lam = _check_lambdas(lambdas)
    return float(np.mean(np.asarray(class_losses) + alpha * (1.0 - lam) * np.asarray(rot_losses)))


def loss_separation(class_losses, rot_losses, lambdas, cutoff: float) -> float:
    lam = np.asarray(lambdas, dtype=np.float64)
    return float(np.mean(np.where(lam >= cutoff, class_losses, rot_losses)))


def objective_weights(mode: Mode, lambdas: np.ndarray, reg_weight: float = 1.0,
                      cutoff: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample (w_class, w_rot) for one training batch."""
    n = len(lambdas)
    mode = Mode(mode)
    if mode in (Mode.BASELINE, Mode.AUGMENTATION):
        return np.ones(n), np.zeros(n)
    if mode is Mode.REGULARIZATION:
        lam = _check_lambdas(lambdas)
        return np.ones(n), reg_weight * (1.0 - lam)
    clean = np.asarray(lambdas) >= cutoff
    return clean.astype(np.float64), (~clean).astype(np.float64)


# ---------------------------------------------------------------------------


@dataclass
class TrainingData:
    """Normalized arrays for one run; true labels used only for reporting."""

    train: ds.SampleSet
    val: ds.SampleSet
    test: ds.SampleSet | None = None
    mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    std: np.ndarray = field(default_factory=lambda: np.ones(3))
    dtype: type = np.float32

    def __post_init__(self):
        self.x_train = ds.normalize(self.train.images, self.mean, self.std, self.dtype)
        self.x_val = ds.normalize(self.val.images, self.mean, self.std, self.dtype)
        self.x_test = (None if self.test is None
                       else ds.normalize(self.test.images, self.mean, self.std, self.dtype))


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    val_acc: dict[str, float]
    detection: dict[str, DetectionMetrics] | None
    predicted_clean_fraction: float | None
    lambda_epoch: int | None  # detection pass whose lambdas this epoch trained on
    wall_time: float = 0.0


@dataclass
class TrainResult:
    net: TwoHeadNetwork
    reports: list[EpochReport]
    summary: RunSummary
    best_nets: dict[str, TwoHeadNetwork]
    batch_losses: list[float]


def _streams(seed: int, sgd_seed: int):
    init, order, rot = np.random.SeedSequence([seed, sgd_seed]).spawn(3)
    return (int(init.generate_state(1)[0]), np.random.default_rng(order), np.random.default_rng(rot))


def run_training(cfg: TrainConfig, data: TrainingData, run_dir=None) -> TrainResult:
    """Train one model; optionally persist metrics, detection dumps and checkpoints.

    Epochs [0, warmup) train plain CE on un-rotated inputs. The first
    detection pass happens once ``warmup`` epochs are complete (before epoch 0
    when there is no warm-up) and lambdas are refreshed after every later
    epoch. A degenerate mixture fit keeps the previous lambdas.
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        if cfg.uses_detection:
            (run_dir / "detection").mkdir(exist_ok=True)
    schedule = cfg.resolved_schedule()
    init_seed, order_rng, rot_rng = _streams(cfg.seed, cfg.sgd.seed)
    dtype = data.dtype
    net = TwoHeadNetwork.initialize(cfg.arch, seed=init_seed, dtype=dtype)
    opt = Sgd(cfg.sgd)
    if run_dir is not None:
        save_checkpoint(net, run_dir / "checkpoints" / "init.nlab")

    n = len(data.train)
    observed = data.train.observed_labels
    is_noisy = data.train.is_noisy
    lam = np.full(n, 1.0 if cfg.fixed_lambda is None else cfg.fixed_lambda)
    lambda_epoch: int | None = None
    last_detection: dict | None = None
    last_fraction: float | None = None

    def detect(t: int):
        nonlocal lam, lambda_epoch, last_detection, last_fraction
        stats = collect_stats(net, data.x_train, observed, data.train.ids, epoch=t)
        try:
            post = run_detection(stats, cfg.decision, schedule, cfg.normalize_loss)
        except ValueError as exc:
            log.warning("detection at epoch %d failed (%s); keeping previous lambdas", t, exc)
            return
        last_detection = strategy_metrics(post, is_noisy, schedule)
        last_fraction = float(post.is_clean.mean())
        if run_dir is not None:
            write_detection_dump(run_dir / "detection" / f"epoch_{t:03d}.csv", stats, post, is_noisy)
        if post.degenerate:
            log.warning("degenerate mixture at epoch %d; keeping previous lambdas", t)
            return
        if cfg.fixed_lambda is None:
            lam = post.lam.copy()
            lambda_epoch = t

    reports: list[EpochReport] = []
    batch_losses: list[float] = []
    best = {p.value: -1.0 for p in cfg.protocols}
    best_nets: dict[str, TwoHeadNetwork] = {}
    best_epoch: dict[str, int] = {}
    bs = cfg.sgd.batch_size

    if cfg.uses_detection and cfg.warmup_epochs == 0:
        detect(0)

    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        warm = epoch < cfg.warmup_epochs
        order = order_rng.permutation(n)
        rot_all = rot_rng.integers(0, 4, size=n) if (cfg.rotates and not warm) else np.zeros(n, int)
        epoch_lambda = lambda_epoch
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n, bs)):
            idx = order[start:start + bs]
            x = data.x_train[idx]
            rot = rot_all[idx]
            if cfg.rotates and not warm:
                x = ds.rotate_by_labels(x, rot)
            mode = Mode.BASELINE if warm else cfg.mode
            wc, wr = objective_weights(mode, lam[idx], cfg.reg_weight, cfg.cutoff)
            c_logits, r_logits = net.forward(x, keep_cache=True)
            bundle, d_class, d_rot = weighted_loss(c_logits, r_logits, observed[idx], rot, wc, wr)
            backward_and_step(net, opt, d_class, d_rot, epoch=epoch, batch=b)
            batch_losses.append(bundle.total)
            total += bundle.total * len(idx)
            count += len(idx)
        net._cache = {}

        done = epoch + 1
        if cfg.uses_detection and done >= cfg.warmup_epochs:
            detect(done)

        val_acc = accuracies(net, data.x_val, data.val.true_labels, cfg.protocols)
        for p, acc in val_acc.items():
            if acc > best[p]:
                best[p] = acc
                best_nets[p] = net.copy()
                best_epoch[p] = epoch
                if run_dir is not None:
                    save_checkpoint(net, run_dir / "checkpoints" / f"best_{p}.nlab")
        report = EpochReport(epoch, total / max(count, 1), val_acc, last_detection, last_fraction,
                             epoch_lambda, time.perf_counter() - t0)
        reports.append(report)
        if run_dir is not None:
            write_csv(run_dir / "metrics.csv", SERIES_COLUMNS, series_rows(reports))
        log.info("epoch %d loss %.4f val %s", epoch, report.train_loss,
                 " ".join(f"{k}={v:.2f}" for k, v in val_acc.items()))

    if run_dir is not None:
        save_checkpoint(net, run_dir / "checkpoints" / "final.nlab")
        with open(run_dir / "timings.csv", "w") as fh:
            fh.write("epoch,wall_time\n")
            fh.writelines(f"{r.epoch},{r.wall_time:.3f}\n" for r in reports)

    summary = RunSummary(cfg.run_name, cfg.decision.value)
    if reports:
        summary.best_val = {p: best[p] for p in best_nets}
        summary.best_epoch = dict(best_epoch)
        summary.final_val = dict(reports[-1].val_acc)
        if data.x_test is not None and len(data.test):
            summary.test_at_best = {
                p: accuracy(m, data.x_test, data.test.true_labels, p) for p, m in best_nets.items()
            }
    if run_dir is not None:
        write_csv(run_dir / "summary.csv", SUMMARY_COLUMNS, [summary_row(summary)])
    return TrainResult(net, reports, summary, best_nets, batch_losses)
