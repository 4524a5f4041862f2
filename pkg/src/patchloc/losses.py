"""Loss functions for patch-grid localization with limited annotation.

Three families over the refined patch scores z:

* baseline: negative log of independent-patch product probabilities
  (log-domain by default; the raw product exists only to demonstrate its
  underflow).
* sigmoid: smooth indicator relaxations on patch-count sums; kept for the
  vanishing-gradient demonstration.
* relu: piecewise-linear hinges on the same sums, scaled so annotated and
  unannotated terms stay balanced and bounded. This is the training loss.

Thresholds are counts: tau/rho are box-relative fractions, tau_hat/rho_hat
absolute patch counts over the whole grid.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .backbone import PatchScores
from .tensor import Tensor


class AnnotationError(ValueError):
    pass


@dataclass
class Annotation:
    """Per-image labels y, box flags a, and patch-space box masks."""

    y: np.ndarray                  # (K,) 0/1
    a: np.ndarray                  # (K,) 0/1
    box_masks: np.ndarray          # (K,P,P) bool, nonempty wherever a=1

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int8)
        self.a = np.asarray(self.a, dtype=np.int8)
        self.box_masks = np.asarray(self.box_masks, dtype=bool)
        k = self.y.shape[0]
        if self.a.shape != (k,) or self.box_masks.shape[:1] != (k,):
            raise AnnotationError(f"inconsistent annotation shapes for K={k}")
        if self.box_masks.ndim != 3 or self.box_masks.shape[1] != self.box_masks.shape[2]:
            raise AnnotationError(f"box masks must be (K,P,P), got {self.box_masks.shape}")
        for kk in range(k):
            if self.a[kk] and not self.y[kk]:
                raise AnnotationError(f"class {kk}: annotated (a=1) but label y=0")
            if self.a[kk] and not self.box_masks[kk].any():
                raise AnnotationError(f"class {kk}: annotated but box mask empty")

    @property
    def classes(self) -> int:
        return self.y.shape[0]

    @property
    def grid(self) -> int:
        return self.box_masks.shape[1]


def annotation_from_boxes(y: Sequence[int], a: Sequence[int],
                          boxes: Iterable[Tuple[int, int, int, int, int]],
                          grid: int) -> Annotation:
    """Build an Annotation from (class, row0, col0, rows, cols) patch boxes.

    Multiple boxes of one class merge by mask union.
    """
    y = np.asarray(y, dtype=np.int8)
    masks = np.zeros((y.shape[0], grid, grid), dtype=bool)
    for k, r0, c0, rows, cols in boxes:
        if not (0 <= k < y.shape[0]):
            raise AnnotationError(f"box class {k} out of range")
        if r0 < 0 or c0 < 0 or rows < 1 or cols < 1 or r0 + rows > grid or c0 + cols > grid:
            raise AnnotationError(f"box ({r0},{c0},{rows},{cols}) outside {grid}x{grid} grid")
        masks[k, r0:r0 + rows, c0:c0 + cols] = True
    return Annotation(y=y, a=np.asarray(a, dtype=np.int8), box_masks=masks)


@dataclass
class ThresholdSet:
    """Per-class thresholds: box-relative tau/rho, absolute tau_hat/rho_hat."""

    tau: np.ndarray
    rho: np.ndarray
    tau_hat: np.ndarray
    rho_hat: np.ndarray
    grid_cells: int

    def __post_init__(self):
        for name in ("tau", "rho", "tau_hat", "rho_hat"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        k = self.tau.shape[0]
        if any(getattr(self, n).shape != (k,) for n in ("rho", "tau_hat", "rho_hat")):
            raise ValueError("threshold arrays must share one per-class shape")
        if np.any(self.tau < 0) or np.any(self.tau > 1) or np.any(self.rho < 0) or np.any(self.rho > 1):
            raise ValueError("relative thresholds must lie in [0,1]")
        if (np.any(self.tau_hat < 0) or np.any(self.tau_hat > self.grid_cells)
                or np.any(self.rho_hat < 0) or np.any(self.rho_hat > self.grid_cells)):
            raise ValueError(f"absolute thresholds must lie in [0,{self.grid_cells}]")

    @classmethod
    def initial(cls, classes: int, grid: int, tau: float = 0.7, rho: float = 0.1,
                tau_hat: float = 2.0, rho_hat: float = 1.0) -> "ThresholdSet":
        # tau starts above the 0.5 detection operating point: the annotated
        # hinge is only a floor, so under early global suppression box cells
        # settle at exactly tau and would otherwise pin just below detection.
        cells = grid * grid
        full = lambda v: np.full(classes, float(v))
        return cls(full(tau), full(rho), full(min(tau_hat, cells)), full(min(rho_hat, cells)),
                   grid_cells=cells)


@dataclass
class LossConfig:
    lambda_ann: float = 70.0
    gamma: np.ndarray = field(default_factory=lambda: np.array([1.0]))
    family: str = "relu"

    def __post_init__(self):
        self.gamma = np.atleast_1d(np.asarray(self.gamma, dtype=np.float64))
        if self.lambda_ann <= 0:
            raise ValueError("lambda_ann must be positive")
        if np.any(self.gamma <= 0):
            raise ValueError("gamma entries must be positive")
        if self.family not in ("baseline", "sigmoid", "relu"):
            raise ValueError(f"unknown loss family {self.family!r}")

    def gamma_for(self, classes: int) -> np.ndarray:
        if self.gamma.shape == (classes,):
            return self.gamma
        if self.gamma.shape == (1,):
            return np.full(classes, self.gamma[0])
        raise ValueError(f"gamma shape {self.gamma.shape} incompatible with K={classes}")


def compute_gamma(labels: np.ndarray, lo: float = 1e-3, hi: float = 1.0) -> np.ndarray:
    """Per-class positive/negative example ratio, clamped to [lo, hi]."""
    labels = np.asarray(labels)
    pos = labels.sum(axis=0).astype(np.float64)
    neg = labels.shape[0] - pos
    ratio = np.where(neg > 0, pos / np.maximum(neg, 1.0), hi)
    return np.clip(ratio, lo, hi)


# ---------------------------------------------------------------------------
# baseline product losses (Eqs. of the independent-patch model)


def baseline_ann_nll(p: PatchScores, k: int, box: np.ndarray,
                     raw_product: bool = False, dtype=np.float64) -> float:
    """Annotated NLL: -log( prod_b p * prod_bbar (1-p) ).

    Log-domain by default; raw_product multiplies the probabilities directly
    in the requested dtype so the underflow is observable. A zero probability
    inside the box yields +inf, never an exception.
    """
    box = np.asarray(box, dtype=bool)
    if not box.any():
        raise AnnotationError("baseline_ann_nll: empty box")
    pk = p.values[:, :, k]
    if raw_product:
        vals = np.concatenate([pk[box].ravel(), 1.0 - pk[~box].ravel()]).astype(dtype)
        prod = np.multiply.reduce(vals, dtype=dtype)
        with np.errstate(divide="ignore"):
            return float(-np.log(prod))
    with np.errstate(divide="ignore"):
        inside = np.log(pk[box])
        outside = np.log1p(-pk[~box])
    return float(-(inside.sum() + outside.sum()))


def baseline_un_prob(p: PatchScores, k: int) -> float:
    """Probability that at least one patch carries class k: 1 - prod(1-p)."""
    pk = p.values[:, :, k]
    return float(1.0 - np.exp(np.log1p(-np.minimum(pk, 1.0 - 1e-300)).sum()))


def _log1mexp(s: np.ndarray) -> np.ndarray:
    # log(1 - e^s) for s <= 0, stable on both branches
    s = np.minimum(s, -1e-300)
    out = np.empty_like(s)
    small = s < -math.log(2.0)
    out[small] = np.log1p(-np.exp(s[small]))
    out[~small] = np.log(-np.expm1(s[~small]))
    return out


# ---------------------------------------------------------------------------
# sigmoid relaxations (vanishing-gradient demonstration arm)


def _sig(v):
    return 1.0 / (1.0 + np.exp(-np.asarray(v, dtype=np.float64)))


def sigmoid_ann_loss(z: PatchScores, k: int, box: np.ndarray, tau: float, rho: float) -> float:
    """Smooth-indicator annotated loss: -sig(in-count margin)*sig(out-count margin)."""
    box = np.asarray(box, dtype=bool)
    if not box.any():
        raise AnnotationError("sigmoid_ann_loss: empty box")
    zk = z.values[:, :, k]
    s_in = zk[box].sum()
    s_out = zk[~box].sum()
    nb, nbar = box.sum(), (~box).sum()
    return float(-_sig(s_in - tau * nb) * _sig(rho * nbar - s_out))


def sigmoid_un_loss(z: PatchScores, k: int, y: int, tau_hat: float, rho_hat: float) -> float:
    s = z.values[:, :, k].sum()
    return float(-y * _sig(s - tau_hat) - (1 - y) * _sig(rho_hat - s))


def sigmoid_losses(z: PatchScores, ann: Annotation, th: ThresholdSet):
    """Per-class (L_ann, L_un) under the sigmoid relaxation; ann entries are 0
    for classes without a box."""
    k = ann.classes
    l_ann = np.zeros(k)
    l_un = np.zeros(k)
    for kk in range(k):
        if ann.a[kk]:
            l_ann[kk] = sigmoid_ann_loss(z, kk, ann.box_masks[kk], th.tau[kk], th.rho[kk])
        l_un[kk] = sigmoid_un_loss(z, kk, int(ann.y[kk]), th.tau_hat[kk], th.rho_hat[kk])
    return l_ann, l_un


# ---------------------------------------------------------------------------
# ReLU hinge losses (the training family)


def relu_ann_loss(z: PatchScores, k: int, box: np.ndarray, tau: float, rho: float) -> float:
    """|b|^-1 ReLU(tau|b| - sum_b z) + |bbar|^-1 ReLU(sum_bbar z - rho|bbar|)."""
    box = np.asarray(box, dtype=bool)
    nb = int(box.sum())
    nbar = int((~box).sum())
    if nb == 0 or nbar == 0:
        raise AnnotationError("relu_ann_loss: box must be a nonempty proper subset of the grid")
    zk = z.values[:, :, k]
    s_in = zk[box].sum()
    s_out = zk[~box].sum()
    return float(max(0.0, tau * nb - s_in) / nb + max(0.0, s_out - rho * nbar) / nbar)


def relu_un_loss(z: PatchScores, k: int, y: int, tau_hat: float, rho_hat: float,
                 gamma: float = 1.0) -> float:
    """y ReLU(tau_hat - sum z) + gamma (1-y) ReLU(sum z - rho_hat)."""
    s = z.values[:, :, k].sum()
    return float(y * max(0.0, tau_hat - s) + gamma * (1 - y) * max(0.0, s - rho_hat))


def full_loss(z: PatchScores, ann: Annotation, th: ThresholdSet, cfg: LossConfig) -> float:
    """Per-example loss: sum_k lambda_ann a^k L_ann^k + (1-a^k) L_un^k.

    The loss family selector picks the component definitions; the default
    relu family is the piecewise-linear training loss.
    """
    gam = cfg.gamma_for(ann.classes)
    total = 0.0
    for k in range(ann.classes):
        yk, ak = int(ann.y[k]), int(ann.a[k])
        if cfg.family == "relu":
            if ak:
                total += cfg.lambda_ann * relu_ann_loss(z, k, ann.box_masks[k],
                                                        th.tau[k], th.rho[k])
            else:
                total += relu_un_loss(z, k, yk, th.tau_hat[k], th.rho_hat[k], gam[k])
        elif cfg.family == "sigmoid":
            if ak:
                total += cfg.lambda_ann * sigmoid_ann_loss(z, k, ann.box_masks[k],
                                                           th.tau[k], th.rho[k])
            else:
                total += sigmoid_un_loss(z, k, yk, th.tau_hat[k], th.rho_hat[k])
        else:
            if ak:
                total += cfg.lambda_ann * baseline_ann_nll(z, k, ann.box_masks[k])
            else:
                s = np.log1p(-np.clip(z.values[:, :, k], None, 1.0 - 1e-12)).sum()
                log_pos = float(_log1mexp(np.atleast_1d(s))[0])
                total += -yk * log_pos - (1 - yk) * float(s)
    return float(total)


# ---------------------------------------------------------------------------
# batched differentiable losses (training path)


@dataclass
class AnnotationBatch:
    """Stacked annotations: y,a (N,K) and box masks (N,K,P,P) as float 0/1."""

    y: np.ndarray
    a: np.ndarray
    masks: np.ndarray

    @classmethod
    def stack(cls, anns: Sequence[Annotation]) -> "AnnotationBatch":
        y = np.stack([an.y for an in anns]).astype(np.float64)
        a = np.stack([an.a for an in anns]).astype(np.float64)
        masks = np.stack([an.box_masks for an in anns]).astype(np.float64)
        return cls(y=y, a=a, masks=masks)

    @property
    def count(self) -> int:
        return self.y.shape[0]


def _grid_sums(z: Tensor, batch: AnnotationBatch):
    s_in = T.masked_sum(z, batch.masks, axes=(2, 3))
    s_out = T.masked_sum(z, 1.0 - batch.masks, axes=(2, 3))
    s_all = T.tsum(z, axes=(2, 3))
    return s_in, s_out, s_all


def relu_loss_batch(z: Tensor, batch: AnnotationBatch, th: ThresholdSet,
                    cfg: LossConfig) -> Tensor:
    """Mean per-example relu-family loss over a batch of (N,K,P,P) scores."""
    n, k = batch.y.shape
    cells = z.data.shape[2] * z.data.shape[3]
    gam = cfg.gamma_for(k)
    nb = batch.masks.sum(axis=(2, 3))
    nbar = cells - nb
    nb_safe = np.maximum(nb, 1.0)
    nbar_safe = np.maximum(nbar, 1.0)
    s_in, s_out, s_all = _grid_sums(z, batch)

    w_ann = cfg.lambda_ann * batch.a / n
    ann_in = T.hadamard(T.relu(T.add(th.tau[None, :] * nb, T.mul(s_in, -1.0))), w_ann / nb_safe)
    ann_out = T.hadamard(T.relu(T.add(s_out, -th.rho[None, :] * nbar)), w_ann / nbar_safe)

    w_un = (1.0 - batch.a) / n
    un_pos = T.hadamard(T.relu(T.add(np.broadcast_to(th.tau_hat[None, :], (n, k)).copy(),
                                     T.mul(s_all, -1.0))), w_un * batch.y)
    un_neg = T.hadamard(T.relu(T.add(s_all, np.broadcast_to(-th.rho_hat[None, :], (n, k)).copy())),
                        w_un * (1.0 - batch.y) * gam[None, :])
    return T.tsum(T.add(T.add(ann_in, ann_out), T.add(un_pos, un_neg)))


def sigmoid_loss_batch(z: Tensor, batch: AnnotationBatch, th: ThresholdSet,
                       cfg: LossConfig) -> Tensor:
    n, k = batch.y.shape
    cells = z.data.shape[2] * z.data.shape[3]
    nb = batch.masks.sum(axis=(2, 3))
    nbar = cells - nb
    s_in, s_out, s_all = _grid_sums(z, batch)

    sig_in = T.sigmoid(T.add(s_in, -th.tau[None, :] * nb))
    sig_out = T.sigmoid(T.add(th.rho[None, :] * nbar, T.mul(s_out, -1.0)))
    ann = T.hadamard(T.hadamard(sig_in, sig_out), -cfg.lambda_ann * batch.a / n)

    sig_pos = T.sigmoid(T.add(s_all, np.broadcast_to(-th.tau_hat[None, :], (n, k)).copy()))
    sig_neg = T.sigmoid(T.add(np.broadcast_to(th.rho_hat[None, :], (n, k)).copy(),
                              T.mul(s_all, -1.0)))
    un = T.add(T.hadamard(sig_pos, -(1.0 - batch.a) * batch.y / n),
               T.hadamard(sig_neg, -(1.0 - batch.a) * (1.0 - batch.y) / n))
    return T.tsum(T.add(ann, un))


def baseline_loss_batch(z: Tensor, batch: AnnotationBatch, cfg: LossConfig,
                        clamp: float = 1e-12) -> Tensor:
    """Log-domain product loss over a batch, one fused differentiable op."""
    zd = np.clip(z.data, clamp, 1.0 - clamp)
    n = batch.count
    log_z = np.log(zd)
    log_1mz = np.log1p(-zd)
    ann_nll = -(batch.masks * log_z + (1.0 - batch.masks) * log_1mz).sum(axis=(2, 3))
    s = log_1mz.sum(axis=(2, 3))
    un_nll = -batch.y * _log1mexp(s) - (1.0 - batch.y) * s
    total = (cfg.lambda_ann * batch.a * ann_nll + (1.0 - batch.a) * un_nll).sum() / n

    def bwd(g):
        g = float(g)
        live = (z.data > clamp) & (z.data < 1.0 - clamp)
        d_ann = -batch.masks[...] / zd + (1.0 - batch.masks) / (1.0 - zd)
        # d un / d s, then d s / d z = -1/(1-z)
        es = np.exp(s)
        d_un_ds = batch.y * es / np.maximum(-np.expm1(s), 1e-300) - (1.0 - batch.y)
        dz = (cfg.lambda_ann * batch.a)[:, :, None, None] * d_ann
        dz += d_un_ds[:, :, None, None] * ((1.0 - batch.a)[:, :, None, None] / -(1.0 - zd))
        return ((g / n) * dz * live,)

    return T.apply_custom("baseline_loss", (z,), np.asarray(total), bwd)


def full_loss_batch(z: Tensor, batch: AnnotationBatch, th: ThresholdSet,
                    cfg: LossConfig) -> Tensor:
    if cfg.family == "relu":
        return relu_loss_batch(z, batch, th, cfg)
    if cfg.family == "sigmoid":
        return sigmoid_loss_batch(z, batch, th, cfg)
    return baseline_loss_batch(z, batch, cfg)


# ---------------------------------------------------------------------------
# numerical stability analyzer


@dataclass
class StabilityRow:
    grid: int
    p_value: float
    precision: str
    eq1_raw: float
    eq1_logdomain: float
    eq9_loss: float
    underflow: bool


def stability_report(grid_sizes: Sequence[int] = (5, 10, 20),
                     p_values: Sequence[float] = (0.1, 0.3, 0.5),
                     precisions: Sequence[str] = ("f32", "f64"),
                     tau: float = 0.5, rho: float = 0.25) -> List[StabilityRow]:
    """Raw product-loss underflow vs hinge-loss boundedness, per configuration.

    The product is the full-grid-box annotated probability at constant p; the
    hinge value is the normalized two-term loss at the same constant p, which
    is independent of the box split and bounded by tau + (1 - rho) <= 2.
    """
    rows = []
    for grid in grid_sizes:
        cells = grid * grid
        for p in p_values:
            for prec in precisions:
                dtype = np.float32 if prec == "f32" else np.float64
                raw = float(np.multiply.reduce(np.full(cells, p, dtype=dtype), dtype=dtype))
                logdom = cells * math.log(p)
                hinge = float(max(dtype(0.0), dtype(tau) - dtype(p))
                              + max(dtype(0.0), dtype(p) - dtype(rho)))
                rows.append(StabilityRow(grid=grid, p_value=p, precision=prec,
                                         eq1_raw=raw, eq1_logdomain=logdom,
                                         eq9_loss=hinge, underflow=(raw == 0.0)))
    return rows


def write_stability_csv(rows: Sequence[StabilityRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["P", "p_value", "precision", "eq1_raw", "eq1_logdomain",
                    "eq9_loss", "underflow_flag"])
        for r in rows:
            w.writerow([r.grid, r.p_value, r.precision, repr(r.eq1_raw),
                        repr(r.eq1_logdomain), repr(r.eq9_loss), int(r.underflow)])
