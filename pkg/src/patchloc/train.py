"""Two-phase weakly supervised training.

Phase 1 trains the backbone against the hinge losses on raw patch
probabilities; the pairwise refinement weights start at zero, where the
mean-field update is the identity, so it is skipped entirely. Phase 2
freezes the backbone (weights and normalization statistics) and trains the
refinement weights and its feature branch on the refined scores.

Both phases alternate weight epochs with closed-form threshold refits; an
epoch's fit pool is exactly the scores the model produced during that epoch.
Convergence is a patience rule: training stops once the relative epoch-loss
change stays under the tolerance for a run of consecutive epochs.

All randomness derives from per-purpose seed sequences off the run seed and
fold index, so repeated runs are byte-identical.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, BackboneWeights, forward_batch
from .checkpoint import save_checkpoint
from .config import RunConfig
from .crf import CrfParams, features_batch, refine_batch
from .losses import (Annotation, AnnotationBatch, LossConfig, ThresholdSet,
                     _log1mexp, _sig, compute_gamma, full_loss_batch)
from .synth import SynthDataset
from .tensor import AdamState, adam_step
from .thresholds import (ThresholdAccumulator, ThresholdFitConfig,
                         ThresholdFitResult, fit_thresholds)

# seed-sequence stream tags, offset by fold index
_STREAM_UNANNOTATED = 1000
_STREAM_SHUFFLE = 2000
_STREAM_INIT = 3000


def select_training_indices(dataset: SynthDataset, annotated_ids: Sequence[str],
                            unannotated_fraction: float, seed: int,
                            fold: int) -> np.ndarray:
    """Training pool: the given annotated samples plus a deterministic random
    fraction of the dataset's unannotated samples."""
    id_to_index = {s.id: i for i, s in enumerate(dataset.samples)}
    try:
        ann_idx = np.array([id_to_index[sid] for sid in annotated_ids], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"unknown sample id {exc.args[0]!r}") from exc
    un_pool = dataset.unannotated_indices()
    take = int(round(unannotated_fraction * len(un_pool)))
    rng = np.random.default_rng([seed, _STREAM_UNANNOTATED + fold])
    chosen = rng.permutation(un_pool)[:take]
    return np.sort(np.concatenate([ann_idx, chosen.astype(np.int64)]))


def _per_class_loss(zd: np.ndarray, batch: AnnotationBatch, th: ThresholdSet,
                    cfg: LossConfig) -> np.ndarray:
    """Per-class mean loss components of a batch, numpy forward only.

    Mirrors full_loss_batch so the logged columns sum to the scalar loss.
    """
    n, k = batch.y.shape
    cells = zd.shape[2] * zd.shape[3]
    gam = cfg.gamma_for(k)
    nb = batch.masks.sum(axis=(2, 3))
    nbar = cells - nb
    s_in = (zd * batch.masks).sum(axis=(2, 3))
    s_out = (zd * (1.0 - batch.masks)).sum(axis=(2, 3))
    s_all = zd.sum(axis=(2, 3))
    if cfg.family == "relu":
        ann = (np.maximum(0.0, th.tau[None, :] * nb - s_in) / np.maximum(nb, 1.0)
               + np.maximum(0.0, s_out - th.rho[None, :] * nbar) / np.maximum(nbar, 1.0))
        un = (batch.y * np.maximum(0.0, th.tau_hat[None, :] - s_all)
              + gam[None, :] * (1.0 - batch.y) * np.maximum(0.0, s_all - th.rho_hat[None, :]))
        per = cfg.lambda_ann * batch.a * ann + (1.0 - batch.a) * un
    elif cfg.family == "sigmoid":
        ann = -_sig(s_in - th.tau[None, :] * nb) * _sig(th.rho[None, :] * nbar - s_out)
        un = -(batch.y * _sig(s_all - th.tau_hat[None, :])
               + (1.0 - batch.y) * _sig(th.rho_hat[None, :] - s_all))
        per = cfg.lambda_ann * batch.a * ann + (1.0 - batch.a) * un
    else:
        zc = np.clip(zd, 1e-12, 1.0 - 1e-12)
        log_z = np.log(zc)
        log_1mz = np.log1p(-zc)
        ann_nll = -(batch.masks * log_z + (1.0 - batch.masks) * log_1mz).sum(axis=(2, 3))
        s = log_1mz.sum(axis=(2, 3))
        un = -batch.y * _log1mexp(s) - (1.0 - batch.y) * s
        per = cfg.lambda_ann * batch.a * ann_nll + (1.0 - batch.a) * un
    return per.sum(axis=0) / n


@dataclass
class EpochStats:
    epoch: int
    phase: int
    lr: float
    loss: float
    per_class: np.ndarray


class Trainer:
    """Owns the model, thresholds, optimizer, and the epoch loop for one fold.

    Exposes the alternation interface: run_weight_epoch() does one epoch of
    updates and returns its mean loss, threshold_observations() returns the
    fit pool that epoch produced, and ``thresholds`` is replaced by each
    refit.
    """

    def __init__(self, run_cfg: RunConfig, dataset: SynthDataset,
                 train_indices: Sequence[int], fold: int = 0):
        self.cfg = run_cfg
        self.fold = int(fold)
        self.bcfg = run_cfg.backbone_config()
        dc = dataset.config
        if (dc.input_side, dc.patch_grid, dc.classes) != (
                self.bcfg.input_side, self.bcfg.patch_grid, self.bcfg.classes):
            raise ValueError(
                f"dataset geometry ({dc.input_side},{dc.patch_grid},{dc.classes}) does not "
                f"match model ({self.bcfg.input_side},{self.bcfg.patch_grid},{self.bcfg.classes})")

        idx = np.asarray(train_indices, dtype=np.int64)
        if idx.size == 0:
            raise ValueError("empty training pool")
        self.images = np.stack([dataset.samples[i].image for i in idx])[:, None, :, :]
        self.annotations: List[Annotation] = [
            dataset.samples[i].annotation(self.bcfg.patch_grid) for i in idx]
        labels = np.stack([dataset.samples[i].labels for i in idx])
        self.loss_cfg = run_cfg.loss_config(compute_gamma(labels))
        self.fit_cfg = run_cfg.fit_config()

        rng = np.random.default_rng([run_cfg.seed, _STREAM_INIT + self.fold])
        self.weights = BackboneWeights(self.bcfg, rng)
        self.crf = CrfParams(classes=self.bcfg.classes, patch_grid=self.bcfg.patch_grid,
                             input_side=self.bcfg.input_side, rng=rng,
                             window=run_cfg.crf.window, iterations=run_cfg.crf.iterations,
                             feature_dim=run_cfg.crf.feature_dim,
                             bandwidth=run_cfg.crf.bandwidth)
        self.thresholds = ThresholdSet.initial(self.bcfg.classes, self.bcfg.patch_grid)

        self.phase = 1
        self.adam = self._make_adam(self.weights.params())
        self._epoch_index = 0
        self._acc = ThresholdAccumulator(self.bcfg.classes)
        self._frozen_probs: Optional[np.ndarray] = None
        self.history: List[EpochStats] = []

    def _make_adam(self, params) -> AdamState:
        t = self.cfg.train
        return AdamState(params, lr=t.lr, weight_decay=t.weight_decay, lr_decay=t.lr_decay)

    @property
    def count(self) -> int:
        return self.images.shape[0]

    def begin_phase(self, phase: int) -> None:
        if phase == self.phase and self._epoch_index > 0:
            return
        self.phase = phase
        if phase == 1:
            self.adam = self._make_adam(self.weights.params())
        elif phase == 2:
            for p in self.weights.params():
                p.requires_grad = False
            self._frozen_probs = self._backbone_probs(self.images)
            self.adam = self._make_adam(self.crf.params())
        else:
            raise ValueError(f"unknown phase {phase}")

    def _backbone_probs(self, images: np.ndarray) -> np.ndarray:
        """Eval-mode backbone probabilities, batched, outside any tape."""
        out = []
        b = self.cfg.train.batch_size
        for start in range(0, images.shape[0], b):
            chunk = T.constant(images[start:start + b])
            out.append(forward_batch(chunk, self.bcfg, self.weights, training=False).data)
        return np.concatenate(out, axis=0)

    def run_weight_epoch(self) -> float:
        """One epoch of optimizer updates; returns the mean per-example loss.

        Scores seen during the epoch feed both the loss and that epoch's
        threshold fit pool.
        """
        order = np.random.default_rng(
            [self.cfg.seed, _STREAM_SHUFFLE + self.fold, self._epoch_index]).permutation(self.count)
        b = self.cfg.train.batch_size
        params = self.adam.params
        acc = ThresholdAccumulator(self.bcfg.classes)
        lr_at_start = self.adam.lr
        total = 0.0
        per_class = np.zeros(self.bcfg.classes)
        for start in range(0, self.count, b):
            idx = order[start:start + b]
            batch = AnnotationBatch.stack([self.annotations[i] for i in idx])
            with T.Tape() as tape:
                if self.phase == 1:
                    imgs = T.constant(self.images[idx])
                    z = forward_batch(imgs, self.bcfg, self.weights, training=True)
                else:
                    p_const = T.constant(self._frozen_probs[idx])
                    feats = features_batch(T.constant(self.images[idx]), self.crf,
                                           training=True)
                    z = refine_batch(p_const, feats, self.crf)
                loss = full_loss_batch(z, batch, self.thresholds, self.loss_cfg)
                tape.backward(loss)
            adam_step(params, self.adam)
            T.zero_grads(params)
            n = idx.shape[0]
            total += loss.item() * n
            per_class += _per_class_loss(z.data, batch, self.thresholds, self.loss_cfg) * n
            for row, i in enumerate(idx):
                acc.add(z.data[row].transpose(1, 2, 0), self.annotations[i])
        self._acc = acc
        self.adam.decay_lr()
        mean = total / self.count
        self.history.append(EpochStats(epoch=self._epoch_index, phase=self.phase,
                                       lr=lr_at_start, loss=mean,
                                       per_class=per_class / self.count))
        self._epoch_index += 1
        return mean

    def threshold_observations(self) -> ThresholdAccumulator:
        return self._acc

    def fit_epoch_thresholds(self, freeze_tau_hat: bool = False) -> ThresholdFitResult:
        result = fit_thresholds(self._acc, self.thresholds, self.fit_cfg,
                                freeze_tau_hat=freeze_tau_hat)
        self.thresholds = result.thresholds
        return result

    def _train_phase(self, phase: int, epochs: int,
                     checkpoint_path=None) -> None:
        self.begin_phase(phase)
        t = self.cfg.train
        prev = None
        streak = 0
        for i in range(epochs):
            loss = self.run_weight_epoch()
            self.fit_epoch_thresholds(freeze_tau_hat=i + 1 < self.fit_cfg.warmup_epochs)
            if checkpoint_path is not None:
                self.save(checkpoint_path)
            if prev is not None:
                rel = abs(prev - loss) / max(abs(prev), 1e-12)
                streak = streak + 1 if rel < t.convergence_tol else 0
                if streak >= t.patience:
                    break
            prev = loss

    def fit(self, checkpoint_path=None) -> None:
        """Full two-phase run; checkpoints before the first epoch and after
        every epoch when given a path, so the file always holds the last
        completed state even when an epoch aborts."""
        t = self.cfg.train
        if checkpoint_path is not None:
            self.save(checkpoint_path)
        self._train_phase(1, t.phase1_epochs, checkpoint_path)
        if t.phase2_epochs > 0:
            self._train_phase(2, t.phase2_epochs, checkpoint_path)
        if checkpoint_path is not None:
            self.save(checkpoint_path)

    # -- persistence ---------------------------------------------------------

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = self.weights.state_dict()
        state.update(self.crf.state_dict())
        state.update(thresholds_to_state(self.thresholds))
        return state

    def save(self, path) -> None:
        tmp = str(path) + ".tmp"
        save_checkpoint(tmp, self.state_dict())
        os.replace(tmp, path)

    # -- inference -----------------------------------------------------------

    def predict_scores(self, images: np.ndarray) -> List[np.ndarray]:
        return predict_scores(images, self.bcfg, self.weights, self.crf,
                              batch_size=self.cfg.train.batch_size)


def thresholds_to_state(th: ThresholdSet) -> Dict[str, np.ndarray]:
    state = {}
    for k in range(th.tau.shape[0]):
        for name in ("tau", "rho", "tau_hat", "rho_hat"):
            state[f"thresholds.{k}.{name}"] = np.asarray(getattr(th, name)[k])
    return state


def thresholds_from_state(state: Dict[str, np.ndarray], classes: int,
                          grid: int) -> ThresholdSet:
    vals = {name: np.zeros(classes) for name in ("tau", "rho", "tau_hat", "rho_hat")}
    for k in range(classes):
        for name in vals:
            key = f"thresholds.{k}.{name}"
            if key not in state:
                raise KeyError(f"checkpoint missing tensor {key!r}")
            vals[name][k] = float(state[key])
    return ThresholdSet(vals["tau"], vals["rho"], vals["tau_hat"], vals["rho_hat"],
                        grid_cells=grid * grid)


def build_model(run_cfg: RunConfig, fold: int = 0) -> Tuple[BackboneWeights, CrfParams]:
    """Fresh model exactly as a Trainer for this fold would initialize it."""
    bcfg = run_cfg.backbone_config()
    rng = np.random.default_rng([run_cfg.seed, _STREAM_INIT + fold])
    weights = BackboneWeights(bcfg, rng)
    crf = CrfParams(classes=bcfg.classes, patch_grid=bcfg.patch_grid,
                    input_side=bcfg.input_side, rng=rng, window=run_cfg.crf.window,
                    iterations=run_cfg.crf.iterations, feature_dim=run_cfg.crf.feature_dim,
                    bandwidth=run_cfg.crf.bandwidth)
    return weights, crf


def load_model(run_cfg: RunConfig, state: Dict[str, np.ndarray],
               fold: int = 0) -> Tuple[BackboneWeights, CrfParams, ThresholdSet]:
    """Rebuild a trained model from a checkpoint's tensor dict."""
    weights, crf = build_model(run_cfg, fold)
    weights.load_state(state)
    crf.load_state(state)
    bcfg = run_cfg.backbone_config()
    th = thresholds_from_state(state, bcfg.classes, bcfg.patch_grid)
    return weights, crf, th


def predict_scores(images: np.ndarray, bcfg: BackboneConfig, weights: BackboneWeights,
                   crf: CrfParams, batch_size: int = 48) -> List[np.ndarray]:
    """Refined (P,P,K) score grids for a stack of (H,W) or (N,1,H,W) images."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[:, None, :, :]
    out: List[np.ndarray] = []
    for start in range(0, images.shape[0], batch_size):
        imgs = T.constant(images[start:start + batch_size])
        p = forward_batch(imgs, bcfg, weights, training=False)
        feats = features_batch(imgs, crf, training=False)
        z = refine_batch(p, feats, crf)
        out.extend(z.data[i].transpose(1, 2, 0) for i in range(z.data.shape[0]))
    return out
