"""Four-phase training: mask autoencoder, scratch teacher/student, alignment
headers, and distillation of a fresh student.

Each phase refuses to start without its prerequisite checkpoints, trains only
its own components, and verifies afterwards that every frozen component is
bitwise unchanged.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import nets as N
from .checkpoint import Checkpoint, has_checkpoint
from .errors import ConfigError, FrozenParameterMutated, ParameterError, TrainingDiverged
from .graphs import build_inter_graph, build_intra_graph
from .losses import LossLog, LossWeights, ce_loss, dicd_loss, inter_loss, intra_loss, l1_loss, msan_loss, total_loss
from .synthdata import TACTICS, make_coupling_bundle

log = logging.getLogger(__name__)

P1, P2, P3, P4 = "P1_psae", "P2_scratch", "P3_msan", "P4_distill"
PHASES = (P1, P2, P3, P4)
PREREQUISITES = {P1: (), P2: (), P3: (P1, P2), P4: (P1, P2, P3)}
FROZEN = {P1: frozenset(), P2: frozenset(), P3: frozenset({"teacher", "student", "psae"}),
          P4: frozenset({"teacher", "psae", "tan", "san"})}
TRAINED = {P1: ("psae",), P2: ("teacher", "student"), P3: ("tan", "san"), P4: ("distilled",)}
_PHASE_CODE = {p: i + 1 for i, p in enumerate(PHASES)}


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 0.003
    psae_batch_size: int = 4
    psae_bce_weight: float = 1.0
    epochs_psae: int = 60
    epochs_scratch: int = 30
    epochs_msan: int = 20
    epochs_distill: int = 30
    tactics: tuple = TACTICS
    seed: int = 0
    warm_start: bool = False
    node_mode: str = "self"

    def __post_init__(self):
        self.tactics = tuple(self.tactics)
        if self.batch_size < 1 or self.psae_batch_size < 1:
            raise ParameterError("batch sizes must be >= 1")
        if self.psae_bce_weight < 0:
            raise ParameterError("psae_bce_weight must be >= 0")
        if not self.lr > 0:
            raise ParameterError("lr must be > 0")
        if len(self.tactics) < 2 or len(set(self.tactics)) != len(self.tactics):
            raise ParameterError("need at least 2 distinct tactics")


@dataclass
class PhaseState:
    phase: str
    frozen: frozenset
    epoch: int = 0
    seed: int = 0


def _rng(seed, phase, *keys):
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, _PHASE_CODE[phase], *keys])


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _finite(value, phase, step, what=""):
    v = float(value.detach())
    if not math.isfinite(v):
        raise TrainingDiverged(phase, step, what)
    return v


def cross_reconstruct(tan: N.AlignmentHeader, san: N.AlignmentHeader, latent_teacher, latent_student):
    """Swap decoding headers: the student latent is rebuilt as a teacher
    bottleneck and the (detached) teacher latent as a student bottleneck."""
    rec_teacher = tan.decode(latent_student)
    rec_student = san.decode(latent_teacher.detach())
    return rec_teacher, rec_student


class Trainer:
    """Owns the networks and runs phases in dependency order.

    ``run_dir`` is optional; when given, every finished phase is written there
    and missing prerequisites are looked up there before failing.
    """

    def __init__(self, nets: N.GKDNets, data, config: TrainConfig, weights: LossWeights | None = None,
                 run_dir=None, meta=None):
        self.nets = nets
        self.data = data
        self.config = config
        self.weights = weights or LossWeights()
        self.run_dir = run_dir
        self.meta = dict(meta or {})
        self.completed: dict = {}
        self.log = LossLog()
        self.distilled: N.SegNet | None = None
        self._p2_partial: dict = {}

    # -- bookkeeping -------------------------------------------------------
    def require(self, phase):
        for pre in PREREQUISITES[phase]:
            if pre in self.completed:
                continue
            if has_checkpoint(self.run_dir, pre):
                self.restore(pre)
                continue
            raise ConfigError(f"phase {phase} requires a {pre} checkpoint, none found", missing_phase=pre)

    def restore(self, phase):
        ckpt = Checkpoint.load(self.run_dir, phase)
        self.load_checkpoint(ckpt)

    def load_checkpoint(self, ckpt: Checkpoint):
        for comp in ckpt.components():
            if comp == "distilled":
                self.distilled = self.nets.fresh_student(self.config.seed)
                ckpt.load_into(comp, self.distilled)
            else:
                ckpt.load_into(comp, self.nets.component(comp))
        self.completed[ckpt.phase] = ckpt

    def _finish(self, phase, modules):
        ckpt = Checkpoint.from_modules(phase, modules, {**self.meta, "seed": self.config.seed})
        if self.run_dir is not None:
            ckpt.save(self.run_dir)
            self.log.write_csv(self.run_dir / phase / "losses.csv", phase=phase,
                               config_hash=self.meta.get("config_hash"))
        self.completed[phase] = ckpt
        return ckpt

    def _begin(self, phase):
        state = PhaseState(phase, FROZEN[phase], seed=self.config.seed)
        untouched = [c for c in N.COMPONENTS if c not in TRAINED[phase]]
        snaps = {c: N.snapshot(self.nets.component(c)) for c in untouched}
        for c in FROZEN[phase]:
            N.freeze(self.nets.component(c))
        torch.manual_seed(self.config.seed * 10 + _PHASE_CODE[phase])
        return state, snaps

    def _verify_frozen(self, phase, snaps):
        for comp, snap in snaps.items():
            changed = N.changed_tensors(self.nets.component(comp), snap)
            if changed:
                raise FrozenParameterMutated(f"{phase}: component {comp} changed ({changed[0]})")

    def _optimizer(self, phase, modules):
        params = [p for m in modules for p in m.parameters()]
        frozen_ids = {id(p) for c in FROZEN[phase] for p in self.nets.component(c).parameters()}
        assert not any(id(p) in frozen_ids for p in params), f"{phase}: optimizer would update a frozen parameter"
        return torch.optim.Adam(params, lr=self.config.lr)

    @staticmethod
    def _step(opt, loss):
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

    def _train_split(self):
        return self.data["train_A"]

    # -- phases ------------------------------------------------------------
    def train_psae(self):
        phase = P1
        state, snaps = self._begin(phase)
        psae = self.nets.psae
        N.unfreeze(psae)
        opt = self._optimizer(phase, [psae])
        split = self._train_split()
        step = 0
        self.srec_history = []
        for epoch in range(self.config.epochs_psae):
            state.epoch = epoch
            for idx in _batches(len(split), self.config.psae_batch_size, _rng(self.config.seed, phase, epoch)):
                _, masks = split.batch(idx)
                y = torch.from_numpy(masks)
                rec = psae(y)
                srec = l1_loss(y, rec)
                # sigmoid + pure L1 stalls at the all-background mask; the CE term pulls it out
                aux = ce_loss(rec, y)
                loss = srec + self.config.psae_bce_weight * aux
                _finite(loss, phase, step)
                self._step(opt, loss)
                self.log.append(phase, step, ce=aux, total=loss)
                self.srec_history.append((epoch, float(srec.detach())))
                step += 1
        psae.eval()
        self._verify_frozen(phase, snaps)
        return self._finish(phase, {"psae": psae})

    def train_scratch(self, which):
        if which not in ("teacher", "student"):
            raise ParameterError(f"train_scratch trains 'teacher' or 'student', not {which!r}")
        phase = P2
        state, snaps = self._begin(phase)
        model = self.nets.component(which)
        N.unfreeze(model)
        opt = self._optimizer(phase, [model])
        split = self._train_split()
        step = 0
        tag = 0 if which == "teacher" else 1
        for epoch in range(self.config.epochs_scratch):
            state.epoch = epoch
            for idx in _batches(len(split), self.config.batch_size, _rng(self.config.seed, phase, tag, epoch)):
                images, masks = split.batch(idx)
                _, pred = model(torch.from_numpy(images))
                loss = ce_loss(pred, torch.from_numpy(masks))
                _finite(loss, phase, step, which)
                self._step(opt, loss)
                self.log.append(f"{phase}:{which}", step, ce=loss, total=loss)
                step += 1
        model.eval()
        self._verify_frozen(phase, snaps)
        self._p2_partial[which] = model
        if len(self._p2_partial) == 2:
            return self._finish(phase, {"teacher": self.nets.teacher, "student": self.nets.student})
        return None

    def _header_loss(self, header, feature, latent_psae, lam):
        latent = header.encode(feature)
        rec = header.decode(latent)
        return msan_loss(feature.data, rec.data, latent, latent_psae, LossWeights(lambda_msan=lam))

    def train_msan(self, lambda_msan=None):
        """Fit TAN and SAN to the frozen bottlenecks, regularized toward mask latents."""
        phase = P3
        self.require(phase)
        lam = self.weights.lambda_msan if lambda_msan is None else lambda_msan
        state, snaps = self._begin(phase)
        tan, san = self.nets.tan, self.nets.san
        N.unfreeze(tan)
        N.unfreeze(san)
        opt = self._optimizer(phase, [tan, san])
        split = self._train_split()
        step = 0
        for epoch in range(self.config.epochs_msan):
            state.epoch = epoch
            for idx in _batches(len(split), self.config.batch_size, _rng(self.config.seed, phase, epoch)):
                images, masks = split.batch(idx)
                x, y = torch.from_numpy(images), torch.from_numpy(masks)
                with torch.no_grad():
                    f_t = self.nets.teacher.encode(x)
                    f_s = self.nets.student.encode(x)
                    s_y = self.nets.psae.encode(y)
                loss_t = self._header_loss(tan, f_t, s_y, lam)
                loss_s = self._header_loss(san, f_s, s_y, lam)
                loss = loss_t + loss_s
                _finite(loss, phase, step)
                self._step(opt, loss)
                self.log.append(phase, step, total=loss)
                step += 1
        tan.eval()
        san.eval()
        self._verify_frozen(phase, snaps)
        return self._finish(phase, {"tan": tan, "san": san})

    def _bundles(self, split, idx, epoch):
        views = []
        for i in idx:
            sample = split.samples[i]
            bseed = int(_rng(self.config.seed, P4, epoch, sample.seed).integers(0, 2**31))
            bundle = make_coupling_bundle(sample, self.config.tactics, bseed)
            views.append(np.stack(bundle.augmented))
        return np.stack(views)  # (B, K, 1, H, W)

    def distill_step(self, student, images, masks, augmented=None):
        """One step of the distillation objective; returns the loss terms.

        ``augmented`` is ``(B, K, 1, H, W)``.  Terms whose weight is 0 are not
        computed and come back as 0.
        """
        w = self.weights
        nets = self.nets
        b = images.shape[0]
        need_graphs = augmented is not None and (w.alpha > 0 or w.beta > 0)
        x = images
        if need_graphs:
            k = augmented.shape[1]
            x = torch.cat([images, augmented.reshape(b * k, *images.shape[1:])], dim=0)
        feat_s = student.encode(x)
        anchor_skips = [s[:b] for s in feat_s.skips]
        pred_s = student.decode(feat_s.data[:b], anchor_skips)
        ce = ce_loss(pred_s, masks)
        zero = torch.zeros((), dtype=ce.dtype)
        intra = inter = dicd = zero
        if need_graphs or w.gamma > 0:
            with torch.no_grad():
                feat_t = nets.teacher.encode(x)
                lat_t = nets.tan.encode(feat_t)
            lat_s = nets.san.encode(feat_s)
            if need_graphs:
                lt_anchor, lt_aug = lat_t[:b], lat_t[b:].reshape(b, k, -1)
                ls_anchor, ls_aug = lat_s[:b], lat_s[b:].reshape(b, k, -1)
                if w.alpha > 0:
                    intra = intra_loss(build_intra_graph(lt_anchor, lt_aug, self.config.node_mode),
                                       build_intra_graph(ls_anchor, ls_aug, self.config.node_mode))
                if w.beta > 0:
                    inter = inter_loss(build_inter_graph(lt_aug), build_inter_graph(ls_aug))
            if w.gamma > 0:
                # cross distillation on anchors only
                with torch.no_grad():
                    t_skips = [s[:b] for s in feat_t.skips]
                    y_t = nets.teacher.decode(feat_t.data[:b], t_skips)
                rec_t, rec_s = cross_reconstruct(nets.tan, nets.san, lat_t[:b], lat_s[:b])
                yrec_t = nets.teacher.decode(rec_t.data, t_skips)
                yrec_s = student.decode(rec_s.data, anchor_skips)
                dicd = dicd_loss(y_t, yrec_t, yrec_s)
        return ce, intra, inter, dicd

    def distill_student(self):
        phase = P4
        self.require(phase)
        state, snaps = self._begin(phase)
        cfg = self.config
        student = self.nets.fresh_student(cfg.seed * 10 + _PHASE_CODE[phase])
        if cfg.warm_start:
            student.load_state_dict(self.nets.student.state_dict())
        student.train()
        self.distilled = student
        opt = self._optimizer(phase, [student])
        split = self._train_split()
        w = self.weights
        use_aug = w.alpha > 0 or w.beta > 0
        step = 0
        for epoch in range(cfg.epochs_distill):
            state.epoch = epoch
            for idx in _batches(len(split), cfg.batch_size, _rng(cfg.seed, phase, epoch)):
                images, masks = split.batch(idx)
                aug = torch.from_numpy(self._bundles(split, idx, epoch)) if use_aug else None
                ce, intra, inter, dicd = self.distill_step(student, torch.from_numpy(images), torch.from_numpy(masks), aug)
                for name, term in (("ce", ce), ("intra", intra), ("inter", inter), ("dicd", dicd)):
                    _finite(term, phase, step, name)
                loss = total_loss(ce, intra, inter, dicd, w)
                _finite(loss, phase, step, "total")
                self._step(opt, loss)
                self.log.append(phase, step, ce, intra, inter, dicd, loss)
                step += 1
        student.eval()
        self._verify_frozen(phase, snaps)
        return self._finish(phase, {"distilled": student})

    def run(self, phases=PHASES):
        """Run the requested phases in canonical order."""
        for phase in [p for p in PHASES if p in phases]:
            log.info("running %s", phase)
            if phase == P1:
                self.train_psae()
            elif phase == P2:
                self.train_scratch("teacher")
                self.train_scratch("student")
            elif phase == P3:
                self.train_msan()
            else:
                self.distill_student()
        return self.completed


# ---------------------------------------------------------------------------
# inference helpers used by evaluation

@torch.no_grad()
def predict(model: N.SegNet, split, batch_size=32):
    model.eval()
    preds, masks = [], []
    for start in range(0, len(split), batch_size):
        images, m = split.batch(range(start, min(start + batch_size, len(split))))
        _, p = model(torch.from_numpy(images))
        preds.append(p.numpy())
        masks.append(m)
    return np.concatenate(preds), np.concatenate(masks)


@torch.no_grad()
def latent_pairs(model: N.SegNet, header: N.AlignmentHeader, psae: N.SemanticAutoEncoder, split, batch_size=32):
    """Alignment-header latents of ``model`` and mask-autoencoder latents, one row per sample."""
    model.eval()
    header.eval()
    psae.eval()
    out_m, out_y = [], []
    for start in range(0, len(split), batch_size):
        images, masks = split.batch(range(start, min(start + batch_size, len(split))))
        feat = model.encode(torch.from_numpy(images))
        out_m.append(header.encode(feat).double().numpy())
        out_y.append(psae.encode(torch.from_numpy(masks)).double().numpy())
    return np.concatenate(out_m), np.concatenate(out_y)
