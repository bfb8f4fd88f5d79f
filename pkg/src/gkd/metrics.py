"""Segmentation metrics, cross-domain GAP and the Frechet semantic distance.

All segmentation metrics pool pixels over a whole split.  Undefined values
(no positives for SE/F1, a single class for AUC) are reported as NaN.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import NumericError, ParameterError

COV_EPS = 1e-6
METRIC_NAMES = ("se", "acc", "auc", "f1", "miou")


@dataclass
class ConfusionCounts:
    """Running TP/FP/FN/TN reducer; ``+`` is associative so shards merge exactly."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @classmethod
    def from_arrays(cls, prediction, mask, threshold=0.5):
        prediction, mask = np.asarray(prediction), np.asarray(mask)
        if prediction.shape != mask.shape:
            raise ParameterError(f"prediction {prediction.shape} and mask {mask.shape} differ in shape")
        if not 0.0 < threshold < 1.0:
            raise ParameterError("threshold must lie in (0, 1)")
        pred = prediction > threshold
        truth = mask > 0.5
        tp = int(np.count_nonzero(pred & truth))
        fp = int(np.count_nonzero(pred & ~truth))
        fn = int(np.count_nonzero(~pred & truth))
        return cls(tp, fp, fn, truth.size - tp - fp - fn)

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    def metrics(self):
        pos = self.tp + self.fn
        se = self.tp / pos if pos else math.nan
        f1 = 2 * self.tp / (2 * self.tp + self.fp + self.fn) if pos else math.nan
        acc = (self.tp + self.tn) / self.total if self.total else math.nan
        fg_union = self.tp + self.fp + self.fn
        bg_union = self.tn + self.fp + self.fn
        ious = [self.tp / fg_union if fg_union else 1.0, self.tn / bg_union if bg_union else 1.0]
        return {"se": se, "acc": acc, "f1": f1, "miou": float(np.mean(ious))}


def confusion_metrics(prediction, mask, threshold=0.5):
    """SE, ACC, F1 and mIoU (mean of foreground and background IoU) at ``threshold``."""
    return ConfusionCounts.from_arrays(prediction, mask, threshold).metrics()


def auc(scores, labels):
    """ROC AUC from the Mann-Whitney rank statistic with midranks for ties."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel() > 0.5
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def gap(metric_a, metric_b):
    return abs(metric_a - metric_b)


def matrix_sqrt(m):
    """Symmetric PSD square root by eigendecomposition."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ParameterError(f"matrix_sqrt needs a square matrix, got {m.shape}")
    scale = max(np.linalg.norm(m), 1e-300)
    if np.abs(m - m.T).max() > 1e-6 * max(scale, 1.0):
        raise ParameterError("matrix_sqrt input is not symmetric")
    sym = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() < -1e-4 * scale:
        raise NumericError(f"matrix is indefinite (smallest eigenvalue {vals.min():.3g})")
    vals = np.clip(vals, 0.0, None)
    root = (vecs * np.sqrt(vals)) @ vecs.T
    return 0.5 * (root + root.T)


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    @classmethod
    def fit(cls, samples, eps=COV_EPS):
        x = np.asarray(samples, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        n, c = x.shape
        if n < 2:
            raise ParameterError("need at least 2 samples for a covariance")
        cov = np.cov(x, rowvar=False, ddof=1).reshape(c, c) + eps * np.eye(c)
        return cls(x.mean(axis=0), 0.5 * (cov + cov.T), n)


def frechet_distance(stats_x: GaussianStats, stats_y: GaussianStats):
    """Squared mean distance plus the covariance trace term between two Gaussians."""
    diff = stats_x.mean - stats_y.mean
    root_x = matrix_sqrt(stats_x.cov)
    cross = matrix_sqrt(root_x @ stats_y.cov @ root_x)
    value = float(diff @ diff + np.trace(stats_x.cov) + np.trace(stats_y.cov) - 2.0 * np.trace(cross))
    return value


def fsd(latents_model, latents_psae, eps=COV_EPS, require_full_rank=True):
    """Frechet semantic distance between model latents and mask-autoencoder latents.

    Returns the raw value (which may be a hair below zero from rounding);
    reports clamp it at 0.
    """
    x = np.asarray(latents_model, dtype=np.float64)
    y = np.asarray(latents_psae, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[1] != y.shape[1]:
        raise ParameterError(f"latent widths differ: {x.shape[1]} vs {y.shape[1]}")
    need = x.shape[1] + 1 if require_full_rank else 2
    for name, arr in (("model", x), ("psae", y)):
        if arr.shape[0] < need:
            raise ParameterError(f"{name} latents: need at least {need} samples, got {arr.shape[0]}")
    return frechet_distance(GaussianStats.fit(x, eps), GaussianStats.fit(y, eps))


@dataclass
class MetricsReport:
    model: str
    dataset: str
    se: float
    acc: float
    auc: float
    f1: float
    miou: float
    fsd: float = math.nan
    extra: dict = field(default_factory=dict)

    def values(self):
        return {k: getattr(self, k) for k in (*METRIC_NAMES, "fsd")}


def evaluate_predictions(predictions, masks, threshold=0.5):
    """Pooled SE/ACC/AUC/F1/mIoU for one split."""
    out = confusion_metrics(predictions, masks, threshold)
    out["auc"] = auc(predictions, masks)
    return out


def gap_row(row_a: MetricsReport, row_b: MetricsReport):
    vals = {k: gap(getattr(row_a, k), getattr(row_b, k)) for k in (*METRIC_NAMES, "fsd")}
    return MetricsReport(row_a.model, "GAP", **vals)


REPORT_COLUMNS = ("model", "dataset", *METRIC_NAMES, "fsd")


def _fmt(v):
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.4f}"


def reports_to_csv(rows, config_hash=""):
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in rows:
        writer.writerow([r.model, r.dataset, *(_fmt(getattr(r, k)) for k in (*METRIC_NAMES, "fsd"))])
    return buf.getvalue()


def reports_to_table(rows, config_hash=""):
    """Text table in the layout metric x (dataset A | dataset B | GAP)."""
    models = list(dict.fromkeys(r.model for r in rows))
    datasets = [d for d in dict.fromkeys(r.dataset for r in rows) if d != "GAP"] + ["GAP"]
    index = {(r.model, r.dataset): r for r in rows}
    metric_cols = [*METRIC_NAMES, "fsd"]
    head1 = f"{'Model':<18}" + "".join(f"| {m.upper():^{9 * len(datasets)}}" for m in metric_cols)
    head2 = f"{'Dataset':<18}" + "".join("| " + "".join(f"{d:>9}" for d in datasets) for _ in metric_cols)
    lines = [f"config_hash: {config_hash}", head1, head2, "-" * len(head2)]
    for m in models:
        cells = []
        for metric in metric_cols:
            vals = []
            for d in datasets:
                r = index.get((m, d))
                vals.append(f"{_fmt(getattr(r, metric)) if r else '':>9}")
            cells.append("| " + "".join(vals))
        lines.append(f"{m:<18}" + "".join(cells))
    return "\n".join(lines) + "\n"


def report_dict(r: MetricsReport):
    return asdict(r)
