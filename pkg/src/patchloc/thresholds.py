"""Count-threshold fitting by exact breakpoint search.

The hinge losses compare patch-score sums against four per-class thresholds:
box-relative tau/rho on annotated images and absolute tau_hat/rho_hat on
whole grids. Joint gradient descent on thresholds and model drifts to the
degenerate solution (thresholds collapse, every hinge inactive), so training
alternates: model steps with thresholds frozen, then thresholds refit in
closed form against the current score sums.

Each fit solves a one-dimensional piecewise-linear program exactly: the
largest tau with total positive hinge at most eps, the smallest rho with
total negative hinge at most eps. ``degenerate_drift`` implements the
gradient-descent variant purely as a diagnostic of the failure direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .losses import Annotation, ThresholdSet
from .tensor import NonFiniteError


class AlternationError(RuntimeError):
    """Alternation aborted on a divergent loss; carries the round index."""

    def __init__(self, round_index: int, message: str):
        self.round_index = round_index
        super().__init__(f"alternation round {round_index}: {message}")


@dataclass
class ThresholdFitConfig:
    """Fit slack, clamp bounds, and the alternation schedule.

    eps is slack_fraction times the sample count of the individual fit.
    tau_hat never drops below tau_hat_min patches; rho_hat never exceeds
    rho_hat_max_fraction of the grid. The relative thresholds get analogous
    clamps so a bad epoch cannot zero out the annotated hinges.

    With monotone set, refits are additionally a ratchet: tau and tau_hat
    never decrease, rho and rho_hat never increase. Without it each refit
    simply tracks the current score distribution, which lets the joint
    system drift into the low-contrast regime the bounds exist to prevent.

    warmup_epochs delays the first applied tau_hat fit. Grid sums start
    near cells/2 at initialization and decay as the negative pressure bites,
    so an immediate up-only fit would freeze that transient and force
    inflated total mass on every positive image; tau, rho and rho_hat have
    no such failure direction and refit from the first epoch. rounds and
    tolerance drive the alternation loop (weight epoch, then refit, until
    the loss change falls under tolerance or the budget runs out).
    """

    slack_fraction: float = 0.02
    tau_hat_min: float = 1.0
    rho_hat_max_fraction: float = 0.25
    tau_rel_min: float = 0.1
    rho_rel_max: float = 0.25
    monotone: bool = True
    warmup_epochs: int = 6
    rounds: int = 12
    tolerance: float = 1e-3

    def __post_init__(self):
        if not (0.0 <= self.slack_fraction < 1.0):
            raise ValueError("slack_fraction must lie in [0,1)")
        if self.tau_hat_min < 0 or not (0.0 < self.rho_hat_max_fraction <= 1.0):
            raise ValueError("invalid absolute threshold bounds")
        if self.rounds < 0 or self.tolerance < 0:
            raise ValueError("rounds and tolerance must be nonnegative")
        if self.warmup_epochs < 1:
            raise ValueError("warmup_epochs must be at least 1")


def upper_threshold(samples: np.ndarray, eps: float) -> float:
    """Largest t with sum_i max(0, t - s_i) <= eps.

    The objective is piecewise linear and nondecreasing in t with breakpoints
    at the sorted samples, so the crossing segment is found by prefix sums.
    """
    s = np.sort(np.asarray(samples, dtype=np.float64))
    n = s.shape[0]
    if n == 0:
        raise ValueError("upper_threshold: no samples")
    prefix = np.concatenate([[0.0], np.cumsum(s)])
    for j in range(1, n + 1):
        t = (eps + prefix[j]) / j
        hi = s[j] if j < n else np.inf
        if s[j - 1] <= t <= hi:
            return float(t)
    return float(s[0])


def lower_threshold(samples: np.ndarray, eps: float) -> float:
    """Smallest t with sum_i max(0, s_i - t) <= eps."""
    s = np.sort(np.asarray(samples, dtype=np.float64))
    n = s.shape[0]
    if n == 0:
        raise ValueError("lower_threshold: no samples")
    suffix = np.concatenate([np.cumsum(s[::-1])[::-1], [0.0]])
    for j in range(n - 1, -1, -1):
        t = (suffix[j] - eps) / (n - j)
        lo = s[j - 1] if j > 0 else -np.inf
        if lo <= t <= s[j]:
            return float(t)
    return float(s[-1])


class ThresholdAccumulator:
    """Per-class score-sum observations gathered over a fit pool.

    * pos_sums: whole-grid sums on unannotated positives (fits tau_hat)
    * neg_sums: whole-grid sums on negatives (fits rho_hat)
    * box_fracs / out_fracs: box- and complement-relative means on annotated
      images (fit tau and rho)
    """

    def __init__(self, classes: int):
        self.classes = classes
        self.pos_sums: List[List[float]] = [[] for _ in range(classes)]
        self.neg_sums: List[List[float]] = [[] for _ in range(classes)]
        self.box_fracs: List[List[float]] = [[] for _ in range(classes)]
        self.out_fracs: List[List[float]] = [[] for _ in range(classes)]

    def add(self, scores: np.ndarray, ann: Annotation) -> None:
        """Fold one image's refined scores (P,P,K) into the observation pools."""
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape[2] != self.classes:
            raise ValueError(f"scores have {scores.shape[2]} classes, expected {self.classes}")
        totals = scores.sum(axis=(0, 1))
        for k in range(self.classes):
            if ann.a[k]:
                box = ann.box_masks[k]
                nb = int(box.sum())
                nbar = box.size - nb
                self.box_fracs[k].append(float(scores[:, :, k][box].sum() / nb))
                if nbar:
                    self.out_fracs[k].append(float(scores[:, :, k][~box].sum() / nbar))
            elif ann.y[k]:
                self.pos_sums[k].append(float(totals[k]))
            else:
                self.neg_sums[k].append(float(totals[k]))


@dataclass
class ThresholdFitResult:
    thresholds: ThresholdSet
    # per class: True where a pool was empty and the previous value was kept
    missing: Dict[str, np.ndarray] = field(default_factory=dict)


def fit_thresholds(acc: ThresholdAccumulator, prev: ThresholdSet,
                   cfg: Optional[ThresholdFitConfig] = None,
                   freeze_tau_hat: bool = False) -> ThresholdFitResult:
    """Closed-form refit of all four threshold families from observations.

    Ties resolve toward the larger tau / smaller rho (the least permissive
    feasible value). Classes with an empty pool keep their previous value and
    are flagged in the result. Under cfg.monotone a fit below the previous
    tau/tau_hat (or above the previous rho/rho_hat) is discarded in favor of
    the previous value, so thresholds only ever tighten. freeze_tau_hat
    keeps the previous tau_hat regardless of the pool; callers use it during
    warmup while the grid-sum distribution still carries the init transient.
    """
    cfg = cfg or ThresholdFitConfig()
    k = acc.classes
    cells = prev.grid_cells
    tau = prev.tau.copy()
    rho = prev.rho.copy()
    tau_hat = prev.tau_hat.copy()
    rho_hat = prev.rho_hat.copy()
    missing = {name: np.zeros(k, dtype=bool) for name in ("tau", "rho", "tau_hat", "rho_hat")}

    for kk in range(k):
        pools = (
            ("tau", acc.box_fracs[kk], upper_threshold, tau, (cfg.tau_rel_min, 1.0)),
            ("rho", acc.out_fracs[kk], lower_threshold, rho, (0.0, cfg.rho_rel_max)),
            ("tau_hat", acc.pos_sums[kk], upper_threshold, tau_hat,
             (cfg.tau_hat_min, float(cells))),
            ("rho_hat", acc.neg_sums[kk], lower_threshold, rho_hat,
             (0.0, cfg.rho_hat_max_fraction * cells)),
        )
        for name, pool, solver, target, (lo, hi) in pools:
            if name == "tau_hat" and freeze_tau_hat:
                continue
            if not pool:
                missing[name][kk] = True
                continue
            eps = cfg.slack_fraction * len(pool)
            value = float(np.clip(solver(np.asarray(pool), eps), lo, hi))
            if cfg.monotone:
                prev_value = target[kk]
                value = max(value, prev_value) if name in ("tau", "tau_hat") \
                    else min(value, prev_value)
            target[kk] = value

    fitted = ThresholdSet(tau, rho, tau_hat, rho_hat, grid_cells=cells)
    return ThresholdFitResult(thresholds=fitted, missing=missing)


def alternate(train_state, cfg: Optional[ThresholdFitConfig] = None):
    """The alternation loop: weight epoch with thresholds frozen, then a
    closed-form threshold refit, repeated to convergence or budget.

    ``train_state`` is duck-typed: ``run_weight_epoch()`` performs one epoch
    of model updates and returns its mean loss, ``threshold_observations()``
    returns a ThresholdAccumulator over the fit pool, and ``thresholds`` is
    the ThresholdSet attribute this loop replaces. With rounds=0 the state
    comes back untouched.
    """
    cfg = cfg or ThresholdFitConfig()
    prev_loss = None
    for rnd in range(cfg.rounds):
        epochs = cfg.warmup_epochs if rnd == 0 else 1
        loss = math.nan
        for _ in range(epochs):
            try:
                loss = float(train_state.run_weight_epoch())
            except NonFiniteError as exc:
                raise AlternationError(rnd, str(exc)) from exc
            if not math.isfinite(loss):
                raise AlternationError(rnd, f"loss diverged to {loss}")
        result = fit_thresholds(train_state.threshold_observations(),
                                train_state.thresholds, cfg)
        train_state.thresholds = result.thresholds
        if prev_loss is not None and abs(prev_loss - loss) <= cfg.tolerance * max(abs(prev_loss), 1e-12):
            break
        prev_loss = loss
    return train_state


def degenerate_drift(th: ThresholdSet, acc: ThresholdAccumulator,
                     lr: float = 0.05, steps: int = 100) -> ThresholdSet:
    """Diagnostic: gradient descent on the thresholds themselves.

    The hinge subgradients are one-sided, so tau and tau_hat only ever move
    down and rho and rho_hat only ever move up, collapsing toward the trivial
    all-hinges-inactive solution. Returned for inspection, never used in
    training.
    """
    tau = th.tau.copy()
    rho = th.rho.copy()
    tau_hat = th.tau_hat.copy()
    rho_hat = th.rho_hat.copy()
    cells = float(th.grid_cells)
    for _ in range(steps):
        for kk in range(th.tau.shape[0]):
            if acc.box_fracs[kk]:
                s = np.asarray(acc.box_fracs[kk])
                tau[kk] -= lr * float(np.mean(s < tau[kk]))
            if acc.out_fracs[kk]:
                s = np.asarray(acc.out_fracs[kk])
                rho[kk] += lr * float(np.mean(s > rho[kk]))
            if acc.pos_sums[kk]:
                s = np.asarray(acc.pos_sums[kk])
                tau_hat[kk] -= lr * float(np.mean(s < tau_hat[kk]))
            if acc.neg_sums[kk]:
                s = np.asarray(acc.neg_sums[kk])
                rho_hat[kk] += lr * float(np.mean(s > rho_hat[kk]))
    np.clip(tau, 0.0, 1.0, out=tau)
    np.clip(rho, 0.0, 1.0, out=rho)
    np.clip(tau_hat, 0.0, cells, out=tau_hat)
    np.clip(rho_hat, 0.0, cells, out=rho_hat)
    return ThresholdSet(tau, rho, tau_hat, rho_hat, grid_cells=th.grid_cells)
