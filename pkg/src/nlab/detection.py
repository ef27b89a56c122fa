"""Noisy-label detection from per-sample loss and prediction confidence.

Two 1-D two-component Gaussian mixtures are fitted by EM, one on the
cross-entropy loss (clean = low-mean component) and one on the maximum
softmax probability (clean = high-mean component). Their clean posteriors
are combined by one of three decision rules: loss only, hard (minimum of
both) or elastic (LogSumExp smooth max -> min under a cosine-annealed
temperature).
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import expit

from .nn_core import TwoHeadNetwork, predict_confidence, softmax_cross_entropy

log = logging.getLogger(__name__)

THRESHOLD = 0.5
LOG_2PI = math.log(2 * math.pi)


class Feature(str, Enum):
    LOSS = "loss"
    CONFIDENCE = "confidence"


class Decision(str, Enum):
    LOSS_ONLY = "loss_only"
    HARD = "hard"
    ELASTIC = "elastic"


@dataclass
class PerSampleStats:
    ids: np.ndarray
    ce_loss: np.ndarray
    confidence: np.ndarray
    epoch: int
    flagged: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.ids)


def collect_stats(
    net: TwoHeadNetwork,
    images: np.ndarray,
    observed_labels: np.ndarray,
    ids: np.ndarray | None = None,
    epoch: int = 0,
    batch_size: int = 500,
) -> PerSampleStats:
    """One evaluation pass (no updates, no rotation) over normalized images."""
    n = len(images)
    ce = np.empty(n, dtype=np.float64)
    conf = np.empty(n, dtype=np.float64)
    for start in range(0, n, batch_size):
        sl = slice(start, start + batch_size)
        logits, _ = net.forward(images[sl])
        logits = logits.astype(np.float64)
        ce[sl] = softmax_cross_entropy(logits, observed_labels[sl])
        finite = np.all(np.isfinite(logits), axis=1)
        c = np.full(len(logits), np.nan)
        if finite.any():
            c[finite] = predict_confidence(logits[finite])[1]
        conf[sl] = c
    ids = np.arange(n) if ids is None else np.asarray(ids)
    bad = ~(np.isfinite(ce) & np.isfinite(conf))
    if bad.any():
        log.warning("epoch %d: %d samples with non-finite loss excluded from detection",
                    epoch, int(bad.sum()))
    return PerSampleStats(ids, ce, conf, epoch, flagged=ids[bad])


# ---------------------------------------------------------------------------
# Gaussian mixture


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    clean_component: int  # 0 or 1
    feature: Feature
    offset: float = 0.0  # fitted on (value - offset) / scale
    scale: float = 1.0
    log_likelihood: list[float] = field(default_factory=list)  # mean per-sample, one per iteration
    degenerate: bool = False
    n_iter: int = 0

    def transform(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.offset) / self.scale


def _component_logpdf(x, means, variances):
    x = np.asarray(x, dtype=np.float64)[..., None]
    return -0.5 * (LOG_2PI + np.log(variances) + (x - means) ** 2 / variances)


def _mean_loglik(x, w, mu, var) -> float:
    logp = np.log(w) + _component_logpdf(x, mu, var)
    return float(np.mean(np.logaddexp(logp[:, 0], logp[:, 1])))


def _em(x, w, mu, var, floor, max_iters, tol):
    trace = [_mean_loglik(x, w, mu, var)]
    it = 0
    for it in range(1, max_iters + 1):
        logp = np.log(w) + _component_logpdf(x, mu, var)
        r1 = expit(logp[:, 1] - logp[:, 0])
        resp = np.stack([1.0 - r1, r1], axis=1)
        nk = resp.sum(axis=0) + 1e-300
        w = nk / len(x)
        mu = (resp * x[:, None]).sum(axis=0) / nk
        var = np.maximum((resp * (x[:, None] - mu) ** 2).sum(axis=0) / nk, floor)
        trace.append(_mean_loglik(x, w, mu, var))
        if trace[-1] - trace[-2] < tol:
            break
    return w, mu, var, trace, it


def _median_split_init(x, floor):
    med = np.median(x)
    lo, hi = x[x <= med], x[x > med]
    if len(hi) == 0:  # heavy tie at the median
        lo, hi = x[x < med], x[x >= med]
    parts = [lo, hi]
    mu = np.array([p.mean() for p in parts])
    var = np.maximum(np.array([p.var() for p in parts]), floor)
    return np.array([0.5, 0.5]), mu, var


def _kmeans_init(x, floor, iters=50):
    centers = np.quantile(x, [0.1, 0.9])
    for _ in range(iters):
        assign = np.abs(x - centers[1]) < np.abs(x - centers[0])
        if assign.all() or not assign.any():
            break
        new = np.array([x[~assign].mean(), x[assign].mean()])
        if np.array_equal(new, centers):
            break
        centers = new
    assign = np.abs(x - centers[1]) < np.abs(x - centers[0])
    if assign.all() or not assign.any():
        return _median_split_init(x, floor)
    parts = [x[~assign], x[assign]]
    w = np.array([len(p) for p in parts], dtype=np.float64) / len(x)
    var = np.maximum(np.array([p.var() for p in parts]), floor)
    return w, centers, var


def fit_gmm_1d(
    values,
    feature: Feature | str = Feature.LOSS,
    max_iters: int = 200,
    tol: float = 1e-8,
    normalize: bool = False,
    floor_factor: float = 1e-6,
) -> GmmModel:
    """Fit a two-component Gaussian mixture by EM.

    Two initializations are tried (median split, then 1-D k-means from the
    10th/90th percentiles) and the fit with the higher final log-likelihood
    is kept. ``tol`` applies to the mean per-sample log-likelihood. With
    ``normalize`` the values are min-max scaled to [0, 1] first.
    """
    feature = Feature(feature)
    x = np.asarray(values, dtype=np.float64).ravel()
    x = x[np.isfinite(x)]
    if len(x) < 4:
        raise ValueError(f"need at least 4 finite values, got {len(x)}")
    offset, scale = 0.0, 1.0
    if normalize:
        lo, hi = float(x.min()), float(x.max())
        if hi > lo:
            offset, scale = lo, hi - lo
            x = (x - offset) / scale
    sample_var = float(x.var())
    if x.max() == x.min() or not sample_var > 0:
        log.warning("degenerate %s distribution (zero spread); posterior fixed at 0.5", feature.value)
        m = float(x.mean())
        return GmmModel(np.array([0.5, 0.5]), np.array([m, m]), np.array([1.0, 1.0]), 0, feature,
                        offset, scale, [], degenerate=True)
    floor = floor_factor * sample_var

    best = None
    for init in (_median_split_init, _kmeans_init):
        w, mu, var = init(x, floor)
        fit = _em(x, w, mu, var, floor, max_iters, tol)
        if best is None or fit[3][-1] > best[3][-1]:
            best = fit
    w, mu, var, trace, n_iter = best
    clean = int(np.argmin(mu)) if feature is Feature.LOSS else int(np.argmax(mu))
    return GmmModel(w, mu, var, clean, feature, offset, scale, trace, n_iter=n_iter)


def posterior_clean(gmm: GmmModel, value):
    """Responsibility of the clean component at ``value`` (raw feature units).

    Values beyond either component mean are evaluated at that mean, which
    makes the posterior monotone in the feature (between the two means the
    Gaussian log-ratio is already monotone). Returns a float for scalar input.
    """
    scalar = np.ndim(value) == 0
    if gmm.degenerate:
        out = np.full(np.shape(value), 0.5)
        return float(out) if scalar else out
    x = gmm.transform(value)
    x = np.clip(x, gmm.means.min(), gmm.means.max())
    logp = np.log(gmm.weights) + _component_logpdf(x, gmm.means, gmm.variances)
    c = gmm.clean_component
    out = expit(logp[..., c] - logp[..., 1 - c])
    return float(out) if scalar else out


# ---------------------------------------------------------------------------
# decision rules


def decide_loss_only(p_loss):
    lam = np.asarray(p_loss, dtype=np.float64)
    return lam, lam > THRESHOLD


def decide_hard(p_loss, p_conf):
    lam = np.minimum(p_loss, p_conf)
    return lam, lam > THRESHOLD


def smooth_combine(p_loss, p_conf, alpha: float, epsilon: float = 1e-3):
    """alpha * ln(mean(exp(p_loss/alpha), exp(p_conf/alpha))), clamped to [0, 1].

    Tends to max(p_loss, p_conf) as alpha -> 0+ and to the min as alpha -> 0-;
    inside |alpha| < epsilon the exact max (alpha > 0) or min is returned.
    """
    a = np.asarray(p_loss, dtype=np.float64)
    b = np.asarray(p_conf, dtype=np.float64)
    hi, lo = np.maximum(a, b), np.minimum(a, b)
    if abs(alpha) < epsilon:
        out = hi if alpha > 0 else lo
    elif alpha > 0:
        out = hi + alpha * np.log(0.5 * (1.0 + np.exp((lo - hi) / alpha)))
    else:
        out = lo + alpha * np.log(0.5 * (1.0 + np.exp((hi - lo) / alpha)))
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class TemperatureSchedule:
    alpha_start: float = 0.05
    alpha_end: float = -5e-4
    total_epochs: int = 100
    epsilon: float = 1e-3

    def __post_init__(self):
        if self.total_epochs < 0:
            raise ValueError("total_epochs must be >= 0")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


def temperature_at(schedule: TemperatureSchedule, epoch) -> float:
    """Cosine ramp from alpha_start (epoch 0) to alpha_end (epoch total_epochs)."""
    T = schedule.total_epochs
    if not 0 <= epoch <= T:
        raise ValueError(f"epoch {epoch} outside [0, {T}]")
    if epoch == T:
        return schedule.alpha_end
    if epoch == 0:
        return schedule.alpha_start
    a0, a1 = schedule.alpha_start, schedule.alpha_end
    return a1 + 0.5 * (a0 - a1) * (1.0 + math.cos(math.pi * epoch / T))


def decide_elastic(p_loss, p_conf, schedule: TemperatureSchedule, epoch):
    alpha = temperature_at(schedule, epoch)
    lam = np.asarray(smooth_combine(p_loss, p_conf, alpha, schedule.epsilon))
    return lam, lam > THRESHOLD


def decide(decision: Decision | str, p_loss, p_conf, schedule=None, epoch=0):
    decision = Decision(decision)
    if decision is Decision.LOSS_ONLY:
        return decide_loss_only(p_loss)
    if decision is Decision.HARD:
        return decide_hard(p_loss, p_conf)
    return decide_elastic(p_loss, p_conf, schedule, min(epoch, schedule.total_epochs))


# ---------------------------------------------------------------------------


@dataclass
class DetectionMetrics:
    accuracy: float
    predicted_clean_fraction: float
    true_clean: int  # predicted clean, label clean
    false_clean: int  # predicted clean, label noisy
    true_noisy: int
    false_noisy: int  # predicted noisy, label clean


def detection_metrics(is_clean, is_noisy) -> DetectionMetrics:
    is_clean = np.asarray(is_clean, dtype=bool)
    is_noisy = np.asarray(is_noisy, dtype=bool)
    n = len(is_clean)
    if n == 0:
        raise ValueError("no decisions to score")
    tc = int(np.sum(is_clean & ~is_noisy))
    fc = int(np.sum(is_clean & is_noisy))
    tn = int(np.sum(~is_clean & is_noisy))
    fn = int(np.sum(~is_clean & ~is_noisy))
    return DetectionMetrics((tc + tn) / n, float(is_clean.mean()), tc, fc, tn, fn)


@dataclass
class CleanPosterior:
    ids: np.ndarray
    p_loss: np.ndarray
    p_conf: np.ndarray
    lam: np.ndarray
    is_clean: np.ndarray
    decision: Decision
    epoch: int
    gmm_loss: GmmModel | None = None
    gmm_conf: GmmModel | None = None

    @property
    def degenerate(self) -> bool:
        return any(g is not None and g.degenerate for g in (self.gmm_loss, self.gmm_conf))


def run_detection(
    stats: PerSampleStats,
    decision: Decision | str,
    schedule: TemperatureSchedule | None = None,
    normalize_loss: bool = True,
) -> CleanPosterior:
    """Fit both mixtures on one stats pass and apply the decision rule.

    Samples with non-finite statistics are excluded from the fits and get
    lambda = 0.
    """
    decision = Decision(decision)
    ok = np.isfinite(stats.ce_loss) & np.isfinite(stats.confidence)
    gl = fit_gmm_1d(stats.ce_loss[ok], Feature.LOSS, normalize=normalize_loss)
    gc = fit_gmm_1d(stats.confidence[ok], Feature.CONFIDENCE)
    p_loss = np.zeros(len(stats))
    p_conf = np.zeros(len(stats))
    p_loss[ok] = posterior_clean(gl, stats.ce_loss[ok])
    p_conf[ok] = posterior_clean(gc, stats.confidence[ok])
    if decision is Decision.ELASTIC and schedule is None:
        raise ValueError("elastic decision needs a temperature schedule")
    lam, is_clean = decide(decision, p_loss, p_conf, schedule, stats.epoch)
    lam = np.where(ok, lam, 0.0)
    is_clean = is_clean & ok
    return CleanPosterior(stats.ids, p_loss, p_conf, lam, is_clean, decision, stats.epoch, gl, gc)


def strategy_metrics(post: CleanPosterior, is_noisy, schedule=None) -> dict[str, DetectionMetrics]:
    """Score all three strategies on the same pair of posteriors."""
    out = {}
    for d in Decision:
        if d is Decision.ELASTIC and schedule is None:
            continue
        _, clean = decide(d, post.p_loss, post.p_conf, schedule, post.epoch)
        out[d.value] = detection_metrics(clean, is_noisy)
    return out


DUMP_COLUMNS = ["epoch", "id", "ce_loss", "confidence", "p_loss", "p_conf", "lambda",
                "is_clean", "is_noisy_truth"]


def write_detection_dump(path, stats: PerSampleStats, post: CleanPosterior, is_noisy) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DUMP_COLUMNS)
        for i in range(len(stats)):
            w.writerow([
                stats.epoch, int(stats.ids[i]), f"{stats.ce_loss[i]:.6f}", f"{stats.confidence[i]:.6f}",
                f"{post.p_loss[i]:.6f}", f"{post.p_conf[i]:.6f}", f"{post.lam[i]:.6f}",
                int(post.is_clean[i]), int(is_noisy[i]),
            ])


def read_detection_dump(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty detection dump")
    cols = {k: np.array([r[k] for r in rows]) for k in DUMP_COLUMNS}
    out = {k: cols[k].astype(np.float64) for k in ("ce_loss", "confidence", "p_loss", "p_conf", "lambda")}
    out["epoch"] = cols["epoch"].astype(np.int64)
    out["id"] = cols["id"].astype(np.int64)
    out["is_clean"] = cols["is_clean"].astype(np.int64).astype(bool)
    out["is_noisy_truth"] = cols["is_noisy_truth"].astype(np.int64).astype(bool)
    return out
