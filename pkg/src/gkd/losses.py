"""Loss terms of the distillation pipeline.

Reductions are means over elements throughout, so the default weights keep
the same meaning at any latent width.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import torch

from .errors import NumericError, ParameterError
from .graphs import InterGraph, IntraGraph

PROB_CLAMP = 1e-7


@dataclass
class LossWeights:
    lambda_msan: float = 0.5
    alpha: float = 100.0
    beta: float = 100.0
    gamma: float = 0.5

    def __post_init__(self):
        for name in ("lambda_msan", "alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ParameterError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(a, b):
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    _same_shape(a, b, "l1_loss")
    return (a - b).abs().mean()


def ce_loss(prediction, mask):
    """Mean binary cross-entropy over all pixels of probability maps."""
    prediction, mask = torch.as_tensor(prediction), torch.as_tensor(mask)
    _same_shape(prediction, mask, "ce_loss")
    p = prediction.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(mask * torch.log(p) + (1.0 - mask) * torch.log1p(-p)).mean()


def kl_div(target_logits, approx_logits):
    """KL(softmax(target) || softmax(approx)) over the last axis, averaged over the rest."""
    t, q = torch.as_tensor(target_logits), torch.as_tensor(approx_logits)
    _same_shape(t, q, "kl_div")
    log_p = torch.log_softmax(t, dim=-1)
    log_q = torch.log_softmax(q, dim=-1)
    return (log_p.exp() * (log_p - log_q)).sum(-1).mean()


def msan_loss(feature, feature_rec, latent, latent_psae, weights=None):
    """Feature reconstruction plus ``lambda`` times the alignment to mask latents."""
    lam = (weights or LossWeights()).lambda_msan
    return l1_loss(feature, feature_rec) + lam * l1_loss(latent_psae, latent)


def _check_graphs(g_t, g_s, attr):
    a, b = getattr(g_t, attr), getattr(g_s, attr)
    if a.shape != b.shape:
        raise ParameterError(f"teacher/student graphs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")


def intra_loss(g_t: IntraGraph, g_s: IntraGraph):
    _check_graphs(g_t, g_s, "aug_nodes")
    # mean over anchor + K nodes of the per-node mean |diff|
    node_term = l1_loss(g_t.nodes.detach(), g_s.nodes)
    edge_term = l1_loss(g_t.edges.detach(), g_s.edges)
    return node_term + edge_term


def inter_loss(g_t: InterGraph, g_s: InterGraph):
    _check_graphs(g_t, g_s, "nodes")
    return kl_div(g_t.nodes.detach(), g_s.nodes) + l1_loss(g_t.edges.detach(), g_s.edges)


def dicd_loss(y_teacher, yrec_teacher, yrec_student):
    """Both cross-reconstructed predictions are pulled toward the teacher's own prediction."""
    target = torch.as_tensor(y_teacher).detach()
    return l1_loss(target, yrec_teacher) + l1_loss(target, yrec_student)


def total_loss(ce, intra, inter, dicd, weights=None):
    w = weights or LossWeights()
    for name, value in (("ce", ce), ("intra", intra), ("inter", inter), ("dicd", dicd)):
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise NumericError(f"loss term {name} is not finite ({v})")
    return ce + w.alpha * intra + w.beta * inter + w.gamma * dicd


LOSS_COLUMNS = ("phase", "step", "ce", "intra", "inter", "dicd", "total")


class LossLog:
    """In-memory per-step loss rows, written out as CSV."""

    def __init__(self):
        self.rows: list = []

    def append(self, phase, step, ce=0.0, intra=0.0, inter=0.0, dicd=0.0, total=0.0):
        vals = [float(v.detach()) if torch.is_tensor(v) else float(v) for v in (ce, intra, inter, dicd, total)]
        self.rows.append((phase, int(step), *vals))

    @staticmethod
    def _match(row, phase):
        return phase is None or row[0] == phase or row[0].startswith(phase + ":")

    def totals(self, phase=None):
        return [r[-1] for r in self.rows if self._match(r, phase)]

    def write_csv(self, path, phase=None, config_hash=None):
        path = Path(path)
        with path.open("w", newline="") as fh:
            if config_hash is not None:
                fh.write(f"# config_hash={config_hash}\n")
            writer = csv.writer(fh)
            writer.writerow(LOSS_COLUMNS)
            for r in self.rows:
                if self._match(r, phase):
                    writer.writerow([r[0], r[1], *(repr(v) for v in r[2:])])

    @staticmethod
    def read_csv(path):
        log = LossLog()
        with Path(path).open() as fh:
            lines = (line for line in fh if not line.startswith("#"))
            for row in csv.DictReader(lines):
                log.rows.append((row["phase"], int(row["step"]), *(float(row[c]) for c in LOSS_COLUMNS[2:])))
        return log
