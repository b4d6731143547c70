"""Frame-level expansion of predicted threads and the evaluation metrics.

Predicted (action, relative duration) sequences are expanded to per-frame
labels over the horizon by largest-remainder apportionment.  Accuracy is
mean-over-class: per-class frame statistics are pooled across the whole
evaluation split, then averaged over the classes present in the ground truth.
accuracy@k counts a frame as correct if any of the top-k ranked threads
matches it; MPTA@k is the mean of the individual per-thread accuracies; the
choice F1 is their harmonic mean.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np


class MetricError(ValueError):
    pass


def expand_thread(actions, rel_durations, horizon: int, fill_action: int) -> np.ndarray:
    """Per-frame labels for one thread via largest-remainder apportionment.

    Segment quotas are rel * horizon; every segment gets the floor of its
    quota and the leftover frames go to the largest fractional parts (ties to
    the earlier segment).  An empty prediction is filled with ``fill_action``.
    """
    if horizon < 0:
        raise MetricError("horizon must be >= 0")
    if len(actions) == 0:
        return np.full(horizon, fill_action, dtype=np.int64)
    rel = np.asarray(rel_durations, dtype=np.float64)
    if rel.shape[0] != len(actions):
        raise MetricError(f"{len(actions)} actions but {rel.shape[0]} durations")
    if rel.sum() <= 0:
        rel = np.full(len(actions), 1.0 / len(actions))
    else:
        rel = rel / rel.sum()
    raw = rel * horizon
    counts = np.floor(raw).astype(np.int64)
    leftover = horizon - int(counts.sum())
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:leftover]] += 1
    return np.repeat(np.asarray(actions, dtype=np.int64), counts)


def stack_thread_frames(threads, horizon: int, fill_action: int) -> np.ndarray:
    """K x H frame matrix from (actions, rel_durations) pairs in ranked order."""
    return np.stack([expand_thread(a, r, horizon, fill_action) for a, r in threads])


def per_class_accuracy(pred_frames, gt_frames, num_classes: int) -> dict[int, float]:
    pred = np.asarray(pred_frames)
    gt = np.asarray(gt_frames)
    if pred.shape != gt.shape:
        raise MetricError(f"length mismatch: {pred.shape} vs {gt.shape}")
    out = {}
    for c in range(num_classes):
        sel = gt == c
        if sel.any():
            out[c] = float((pred[sel] == c).mean())
    return out


def moc_accuracy(pred_frames, gt_frames, num_classes: int) -> float:
    """Mean over classes (present in the ground truth) of per-class frame accuracy."""
    per_class = per_class_accuracy(pred_frames, gt_frames, num_classes)
    if not per_class:
        return 0.0
    return float(np.mean(list(per_class.values())))


def accuracy_at_k(frame_preds, gt_frames, k: int, num_classes: int) -> float:
    """A frame counts as correct if any of the top-k ranked threads matches it."""
    preds = np.asarray(frame_preds)
    gt = np.asarray(gt_frames)
    if preds.ndim != 2 or preds.shape[1] != gt.shape[0]:
        raise MetricError(f"bad prediction matrix shape {preds.shape} for {gt.shape}")
    if not 1 <= k <= preds.shape[0]:
        raise MetricError(f"k={k} out of range for {preds.shape[0]} threads")
    any_hit = (preds[:k] == gt).any(axis=0)
    values = []
    for c in range(num_classes):
        sel = gt == c
        if sel.any():
            values.append(float(any_hit[sel].mean()))
    return float(np.mean(values)) if values else 0.0


def mean_per_thread_accuracy(frame_preds, gt_frames, k: int, num_classes: int) -> float:
    """Mean of the top-k threads' individual mean-over-class accuracies."""
    preds = np.asarray(frame_preds)
    if not 1 <= k <= preds.shape[0]:
        raise MetricError(f"k={k} out of range for {preds.shape[0]} threads")
    return float(np.mean([moc_accuracy(preds[j], gt_frames, num_classes)
                          for j in range(k)]))


def choice_f1(mpta: float, acc_k: float) -> float:
    """Harmonic mean of MPTA@k and accuracy@k (0 when both are 0)."""
    if mpta < 0 or acc_k < 0 or mpta > 1 or acc_k > 1:
        raise MetricError("choice F1 inputs must lie in [0, 1]")
    if mpta + acc_k == 0:
        return 0.0
    return 2.0 * mpta * acc_k / (mpta + acc_k)


# -- report ----------------------------------------------------------------------


@dataclass
class MetricsReport:
    label: str
    alpha: float
    beta: float
    k_threads: int
    acc_at_k: list[float]  # index k-1, k = 1..K
    mpta_at_k: list[float]
    choice_f1_at_k: list[float]
    per_class: dict[str, float] = field(default_factory=dict)  # top-1, by action name

    def to_json(self) -> str:
        return json.dumps({
            "label": self.label,
            "alpha": self.alpha,
            "beta": self.beta,
            "kThreads": self.k_threads,
            "accAtK": self.acc_at_k,
            "mptaAtK": self.mpta_at_k,
            "choiceF1": self.choice_f1_at_k,
            "perClass": self.per_class,
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        raw = json.loads(text)
        try:
            return cls(
                label=raw["label"], alpha=float(raw["alpha"]), beta=float(raw["beta"]),
                k_threads=int(raw["kThreads"]),
                acc_at_k=[float(x) for x in raw["accAtK"]],
                mpta_at_k=[float(x) for x in raw["mptaAtK"]],
                choice_f1_at_k=[float(x) for x in raw["choiceF1"]],
                per_class={str(k): float(v) for k, v in raw.get("perClass", {}).items()},
            )
        except KeyError as exc:
            raise MetricError(f"metrics JSON missing field {exc}") from exc

    def rows(self) -> list[dict]:
        return [
            {
                "label": self.label, "alpha": self.alpha, "beta": self.beta,
                "k": k + 1, "accAtK": self.acc_at_k[k], "mptaAtK": self.mpta_at_k[k],
                "choiceF1": self.choice_f1_at_k[k],
            }
            for k in range(len(self.acc_at_k))
        ]


REPORT_COLUMNS = ["label", "alpha", "beta", "k", "accAtK", "mptaAtK", "choiceF1"]


def reports_to_csv(reports: list[MetricsReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for report in reports:
        for row in report.rows():
            writer.writerow(row)
    return buf.getvalue()


def rows_from_csv(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != REPORT_COLUMNS:
        raise MetricError(f"unexpected report columns: {reader.fieldnames}")
    rows = []
    for raw in reader:
        rows.append({
            "label": raw["label"], "alpha": float(raw["alpha"]), "beta": float(raw["beta"]),
            "k": int(raw["k"]), "accAtK": float(raw["accAtK"]),
            "mptaAtK": float(raw["mptaAtK"]), "choiceF1": float(raw["choiceF1"]),
        })
    return rows
