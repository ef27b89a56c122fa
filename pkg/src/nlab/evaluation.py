"""Prediction protocols, accuracy and comparison report files."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .nn_core import TwoHeadNetwork, softmax


class Protocol(str, Enum):
    ONE_IMAGE = "one_image"
    FOUR_ROTATION = "four_rotation"


def class_probabilities(net: TwoHeadNetwork, x: np.ndarray, protocol=Protocol.ONE_IMAGE,
                        batch_size: int = 500) -> np.ndarray:
    """Class softmax for normalized (B, H, W, C) images.

    ``four_rotation`` averages the softmax vectors of the four quarter turns.
    """
    protocol = Protocol(protocol)
    if protocol is Protocol.FOUR_ROTATION and x.shape[1] != x.shape[2]:
        raise ValueError("four-rotation prediction needs square images")
    out = np.empty((len(x), net.arch.n_classes), dtype=np.float64)
    turns = range(4) if protocol is Protocol.FOUR_ROTATION else (0,)
    for start in range(0, len(x), batch_size):
        chunk = x[start:start + batch_size]
        acc = 0.0
        for k in turns:
            logits, _ = net.forward(np.rot90(chunk, k, axes=(1, 2)))
            acc = acc + softmax(logits.astype(np.float64))
        out[start:start + batch_size] = acc / len(turns)
    return out


def predict(net: TwoHeadNetwork, x: np.ndarray, protocol=Protocol.ONE_IMAGE) -> np.ndarray:
    """Predicted class per image; a single (H, W, C) image returns an int."""
    single = x.ndim == 3
    probs = class_probabilities(net, x[None] if single else x, protocol)
    labels = probs.argmax(axis=1)
    return int(labels[0]) if single else labels


def accuracy(net: TwoHeadNetwork, x: np.ndarray, true_labels: np.ndarray,
             protocol=Protocol.ONE_IMAGE) -> float:
    """Percent of images whose prediction equals the true label."""
    if len(x) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    return 100.0 * float(np.mean(predict(net, x, protocol) == np.asarray(true_labels)))


def accuracies(net: TwoHeadNetwork, x: np.ndarray, true_labels: np.ndarray, protocols,
               batch_size: int = 500) -> dict[str, float]:
    """Accuracy under several protocols; the un-rotated pass is shared."""
    protocols = [Protocol(p) for p in protocols]
    if len(x) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    true_labels = np.asarray(true_labels)
    four = Protocol.FOUR_ROTATION in protocols
    if four and x.shape[1] != x.shape[2]:
        raise ValueError("four-rotation prediction needs square images")
    one_hits = four_hits = 0
    for start in range(0, len(x), batch_size):
        chunk = x[start:start + batch_size]
        y = true_labels[start:start + batch_size]
        p0 = softmax(net.forward(chunk)[0].astype(np.float64))
        one_hits += int(np.sum(p0.argmax(1) == y))
        if four:
            acc = p0
            for k in (1, 2, 3):
                acc = acc + softmax(net.forward(np.rot90(chunk, k, axes=(1, 2)))[0].astype(np.float64))
            four_hits += int(np.sum((acc / 4).argmax(1) == y))
    hits = {Protocol.ONE_IMAGE: one_hits, Protocol.FOUR_ROTATION: four_hits}
    return {p.value: 100.0 * hits[p] / len(x) for p in protocols}


# ---------------------------------------------------------------------------
# reports


@dataclass
class RunSummary:
    name: str
    decision: str
    best_val: dict[str, float] = field(default_factory=dict)  # protocol -> percent
    test_at_best: dict[str, float] = field(default_factory=dict)
    final_val: dict[str, float] = field(default_factory=dict)
    best_epoch: dict[str, int] = field(default_factory=dict)


SERIES_COLUMNS = [
    "epoch", "train_loss", "val_acc_one_image", "val_acc_four_rotation",
    "predicted_clean_fraction", "lambda_epoch",
    "clean_acc_loss_only", "clean_acc_hard", "clean_acc_elastic",
    "clean_frac_loss_only", "clean_frac_hard", "clean_frac_elastic",
]

TABLE_COLUMNS = ["model", "decision", "val_one_image", "val_four_rotation",
                 "test_one_image", "test_four_rotation"]

SUMMARY_COLUMNS = ["name", "decision"] + [
    f"{kind}_{p.value}" for kind in ("best_val", "test_at_best", "final_val", "best_epoch")
    for p in Protocol
]


def fmt(value) -> str:
    """CSV cell: 6-decimal float, int, text, or blank for missing/NaN."""
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    return "" if math.isnan(value) else f"{value:.6f}"


def parse(cell: str, kind=float):
    return None if cell == "" else kind(cell)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row.get(c)) for c in columns])


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def series_rows(reports) -> list[dict]:
    rows = []
    for r in reports:
        row = {
            "epoch": r.epoch, "train_loss": r.train_loss,
            "val_acc_one_image": r.val_acc.get(Protocol.ONE_IMAGE.value),
            "val_acc_four_rotation": r.val_acc.get(Protocol.FOUR_ROTATION.value),
            "predicted_clean_fraction": r.predicted_clean_fraction,
            "lambda_epoch": r.lambda_epoch,
        }
        for name, m in (r.detection or {}).items():
            row[f"clean_acc_{name}"] = m.accuracy
            row[f"clean_frac_{name}"] = m.predicted_clean_fraction
        rows.append(row)
    return rows


def summary_row(s: RunSummary) -> dict:
    row = {"name": s.name, "decision": s.decision}
    for kind in ("best_val", "test_at_best", "final_val", "best_epoch"):
        for p in Protocol:
            row[f"{kind}_{p.value}"] = getattr(s, kind).get(p.value)
    return row


def summary_from_row(row: dict) -> RunSummary:
    s = RunSummary(row["name"], row["decision"])
    for kind in ("best_val", "test_at_best", "final_val", "best_epoch"):
        conv = int if kind == "best_epoch" else float
        for p in Protocol:
            v = parse(row.get(f"{kind}_{p.value}", ""), conv)
            if v is not None:
                getattr(s, kind)[p.value] = v
    return s


def _unique_names(names: list[str]) -> list[str]:
    seen: dict[str, int] = {}
    out = []
    for n in names:
        seen[n] = seen.get(n, 0) + 1
        out.append(n if seen[n] == 1 else f"{n}_{seen[n]}")
    return out


def build_report(runs, out_dir) -> dict[str, Path]:
    """Write per-run series CSVs and a one-row-per-run comparison table.

    ``runs`` is a sequence of (series_rows, RunSummary). Repeated run names
    are suffixed ``_2``, ``_3``... in input order.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = list(runs)
    if not runs:
        raise ValueError("no runs to report")
    names = _unique_names([s.name for _, s in runs])
    written = {}
    table = []
    for name, (rows, s) in zip(names, runs):
        path = out_dir / f"series_{name}.csv"
        write_csv(path, SERIES_COLUMNS, rows)
        written[f"series_{name}"] = path
        table.append({
            "model": name, "decision": s.decision,
            "val_one_image": s.best_val.get("one_image"),
            "val_four_rotation": s.best_val.get("four_rotation"),
            "test_one_image": s.test_at_best.get("one_image"),
            "test_four_rotation": s.test_at_best.get("four_rotation"),
        })
    path = out_dir / "table.csv"
    write_csv(path, TABLE_COLUMNS, table)
    written["table"] = path
    return written


def load_series(path) -> list[dict]:
    """Series CSV back into row dicts (numbers parsed, blanks -> None)."""
    rows = []
    for raw in read_csv(path):
        rows.append({k: parse(v, int if k in ("epoch", "lambda_epoch") else float)
                     for k, v in raw.items()})
    return rows
