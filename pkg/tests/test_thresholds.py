"""Exact piecewise-linear threshold fits: hand cases, an independent
bisection oracle, optimality certificates, the monotone ratchet, and the
alternation loop contract."""

import numpy as np
import pytest

from patchloc.losses import Annotation, ThresholdSet
from patchloc.tensor import NonFiniteError
from patchloc.thresholds import (AlternationError, ThresholdAccumulator,
                                 ThresholdFitConfig, alternate,
                                 degenerate_drift, fit_thresholds,
                                 lower_threshold, upper_threshold)

rng = np.random.default_rng(11)


def upper_hinge(samples, t):
    return float(np.maximum(t - np.asarray(samples), 0.0).sum())


def lower_hinge(samples, t):
    return float(np.maximum(np.asarray(samples) - t, 0.0).sum())


def bisect_upper(samples, eps, iters=80):
    """Independent oracle: binary search the largest feasible t."""
    lo = float(np.min(samples))
    hi = float(np.max(samples) + eps + 1.0)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if upper_hinge(samples, mid) <= eps:
            lo = mid
        else:
            hi = mid
    return lo


def bisect_lower(samples, eps, iters=80):
    lo = float(np.min(samples) - eps - 1.0)
    hi = float(np.max(samples))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if lower_hinge(samples, mid) <= eps:
            hi = mid
        else:
            lo = mid
    return hi


def test_upper_threshold_hand_cases():
    assert upper_threshold(np.array([2.5, 3.0]), 0.0) == pytest.approx(2.5)
    assert upper_threshold(np.array([2.5, 3.0]), 0.5) == pytest.approx(3.0)
    assert upper_threshold(np.array([2.5, 3.0]), 1.5) == pytest.approx(3.5)
    assert upper_threshold(np.array([4.0]), 0.25) == pytest.approx(4.25)


def test_lower_threshold_hand_cases():
    assert lower_threshold(np.array([0.2, 0.4]), 0.0) == pytest.approx(0.4)
    assert lower_threshold(np.array([0.2, 0.4]), 0.2) == pytest.approx(0.2)
    assert lower_threshold(np.array([0.2, 0.4]), 0.4) == pytest.approx(0.1)
    assert lower_threshold(np.array([4.0]), 0.25) == pytest.approx(3.75)


def test_solvers_mirror_each_other():
    for _ in range(50):
        s = rng.normal(size=rng.integers(1, 20))
        eps = float(rng.uniform(0, 3))
        assert lower_threshold(s, eps) == pytest.approx(-upper_threshold(-s, eps), abs=1e-12)


def test_solvers_empty_pool():
    with pytest.raises(ValueError):
        upper_threshold(np.array([]), 0.1)
    with pytest.raises(ValueError):
        lower_threshold(np.array([]), 0.1)


def test_upper_threshold_matches_bisection_oracle():
    for _ in range(200):
        n = int(rng.integers(1, 40))
        s = rng.normal(loc=rng.uniform(-5, 5), scale=rng.uniform(0.1, 3), size=n)
        eps = float(rng.uniform(0, 0.1) * n)
        t = upper_threshold(s, eps)
        assert abs(t - bisect_upper(s, eps)) <= 1e-9
        # optimality certificate: feasible at t, infeasible just above
        assert upper_hinge(s, t) <= eps + 1e-9
        assert upper_hinge(s, t + 1e-6) > eps


def test_lower_threshold_matches_bisection_oracle():
    for _ in range(200):
        n = int(rng.integers(1, 40))
        s = rng.normal(loc=rng.uniform(-5, 5), scale=rng.uniform(0.1, 3), size=n)
        eps = float(rng.uniform(0, 0.1) * n)
        t = lower_threshold(s, eps)
        assert abs(t - bisect_lower(s, eps)) <= 1e-9
        assert lower_hinge(s, t) <= eps + 1e-9
        assert lower_hinge(s, t - 1e-6) > eps


def test_upper_threshold_ties():
    # repeated samples collapse to one breakpoint
    s = np.array([1.0, 1.0, 1.0])
    assert upper_threshold(s, 0.0) == pytest.approx(1.0)
    assert upper_threshold(s, 0.3) == pytest.approx(1.1)


def _acc_with(classes=1, box=(), out=(), pos=(), neg=()):
    acc = ThresholdAccumulator(classes)
    acc.box_fracs[0] = list(box)
    acc.out_fracs[0] = list(out)
    acc.pos_sums[0] = list(pos)
    acc.neg_sums[0] = list(neg)
    return acc


def _prev(tau=0.5, rho=0.1, tau_hat=2.0, rho_hat=1.0, cells=64):
    return ThresholdSet([tau], [rho], [tau_hat], [rho_hat], grid_cells=cells)


def test_fit_uses_solvers_and_slack():
    acc = _acc_with(box=[0.6, 0.8], out=[0.05, 0.15], pos=[5.0, 7.0], neg=[0.5, 1.5])
    cfg = ThresholdFitConfig(slack_fraction=0.1, monotone=False)
    res = fit_thresholds(acc, _prev(), cfg)
    th = res.thresholds
    eps = 0.1 * 2
    assert th.tau[0] == pytest.approx(min(upper_threshold(np.array([0.6, 0.8]), eps), 1.0))
    assert th.rho[0] == pytest.approx(lower_threshold(np.array([0.05, 0.15]), eps))
    assert th.tau_hat[0] == pytest.approx(upper_threshold(np.array([5.0, 7.0]), eps))
    assert th.rho_hat[0] == pytest.approx(lower_threshold(np.array([0.5, 1.5]), eps))
    assert not any(m.any() for m in res.missing.values())


def test_fit_clamps():
    cfg = ThresholdFitConfig(slack_fraction=0.5, monotone=False,
                             tau_hat_min=1.0, rho_hat_max_fraction=0.25,
                             tau_rel_min=0.1, rho_rel_max=0.25)
    acc = _acc_with(box=[1.0, 1.0], out=[0.9, 0.9], pos=[0.01], neg=[60.0, 60.0])
    th = fit_thresholds(acc, _prev(), cfg).thresholds
    assert th.tau[0] == 1.0                       # solver exceeds 1, clamped
    assert th.rho[0] == 0.25                      # clamp keeps the out hinge alive
    assert th.tau_hat[0] == 1.0                   # floor: one patch of mass
    assert th.rho_hat[0] == pytest.approx(16.0)   # 0.25 * 64 cells


def test_fit_empty_pools_keep_previous():
    res = fit_thresholds(_acc_with(), _prev(tau=0.62, rho=0.07, tau_hat=3.5, rho_hat=0.8),
                         ThresholdFitConfig(monotone=False))
    th = res.thresholds
    assert (th.tau[0], th.rho[0], th.tau_hat[0], th.rho_hat[0]) == (0.62, 0.07, 3.5, 0.8)
    assert all(res.missing[nm][0] for nm in ("tau", "rho", "tau_hat", "rho_hat"))


def test_monotone_ratchet_directions():
    prev = _prev(tau=0.7, rho=0.05, tau_hat=30.0, rho_hat=0.6)
    acc = _acc_with(box=[0.4, 0.45], out=[0.2, 0.3], pos=[5.0, 6.0], neg=[2.0, 3.0])
    th = fit_thresholds(acc, prev, ThresholdFitConfig(monotone=True)).thresholds
    assert th.tau[0] == 0.7          # fit would drop tau; ratchet holds
    assert th.rho[0] == 0.05         # fit would raise rho; ratchet holds
    assert th.rho_hat[0] == 0.6      # fit would raise rho_hat; ratchet holds
    assert th.tau_hat[0] == 30.0     # fit would drop tau_hat; ratchet holds


def test_freeze_tau_hat_skips_only_that_family():
    prev = _prev(tau=0.5, rho=0.2, tau_hat=2.0, rho_hat=10.0)
    acc = _acc_with(box=[0.8, 0.82], out=[0.01, 0.02], pos=[20.0, 22.0], neg=[0.3])
    res = fit_thresholds(acc, prev, ThresholdFitConfig(monotone=True),
                         freeze_tau_hat=True)
    th = res.thresholds
    assert th.tau_hat[0] == 2.0      # frozen despite a pool far above
    assert th.tau[0] > 0.5 and th.rho[0] < 0.2 and th.rho_hat[0] < 10.0
    assert not res.missing["tau_hat"][0]


def test_monotone_allows_tightening():
    prev = _prev(tau=0.5, rho=0.2, tau_hat=2.0, rho_hat=10.0)
    acc = _acc_with(box=[0.8, 0.82], out=[0.01, 0.02], pos=[6.0], neg=[0.3])
    th = fit_thresholds(acc, prev, ThresholdFitConfig(monotone=True)).thresholds
    assert th.tau[0] > 0.5
    assert th.rho[0] < 0.2
    assert th.rho_hat[0] < 10.0


def test_accumulator_routes_by_annotation():
    masks = np.zeros((2, 4, 4), dtype=bool)
    masks[0, :2, :2] = True
    ann = Annotation(y=[1, 1], a=[1, 0], box_masks=masks)
    acc = ThresholdAccumulator(2)
    scores = np.zeros((4, 4, 2))
    scores[:2, :2, 0] = 0.9
    scores[3, 3, 0] = 0.12
    scores[:, :, 1] = 0.05
    acc.add(scores, ann)
    assert acc.box_fracs[0] == [pytest.approx(0.9)]
    assert acc.out_fracs[0] == [pytest.approx(0.12 / 12)]
    assert acc.pos_sums[0] == []
    assert acc.pos_sums[1] == [pytest.approx(0.05 * 16)]
    ann2 = Annotation(y=[0, 0], a=[0, 0], box_masks=np.zeros((2, 4, 4), dtype=bool))
    acc.add(scores, ann2)
    assert acc.neg_sums[1] == [pytest.approx(0.05 * 16)]


def test_accumulator_class_mismatch():
    acc = ThresholdAccumulator(3)
    ann = Annotation(y=[0], a=[0], box_masks=np.zeros((1, 2, 2), dtype=bool))
    with pytest.raises(ValueError):
        acc.add(np.zeros((2, 2, 1)), ann)


class _FakeTrainState:
    """Scripted losses; counts epochs so the schedule is observable."""

    def __init__(self, losses, classes=1, cells=16):
        self.losses = list(losses)
        self.epochs_run = 0
        self.fits_seen = 0
        self.thresholds = ThresholdSet([0.5], [0.1], [2.0], [1.0], grid_cells=cells)

    def run_weight_epoch(self):
        loss = self.losses[min(self.epochs_run, len(self.losses) - 1)]
        self.epochs_run += 1
        if loss is None:
            raise NonFiniteError("op 'conv2d' produced non-finite values")
        if isinstance(loss, float) and not np.isfinite(loss):
            return loss
        return float(loss)

    def threshold_observations(self):
        self.fits_seen += 1
        acc = ThresholdAccumulator(1)
        acc.pos_sums[0] = [4.0 + 0.1 * self.epochs_run]
        return acc


def test_alternate_runs_warmup_then_single_epochs():
    st = _FakeTrainState(losses=[10.0, 9.0, 8.0, 7.0, 6.0, 5.0])
    alternate(st, ThresholdFitConfig(rounds=3, warmup_epochs=2, tolerance=0.0))
    # round 0: two warmup epochs + fit; rounds 1-2: one epoch + fit each
    assert st.epochs_run == 4
    assert st.fits_seen == 3


def test_alternate_updates_thresholds():
    st = _FakeTrainState(losses=[10.0, 9.0])
    alternate(st, ThresholdFitConfig(rounds=2, warmup_epochs=1, tolerance=0.0))
    assert st.thresholds.tau_hat[0] != 2.0  # refit from the scripted pool


def test_alternate_converges_on_small_change():
    st = _FakeTrainState(losses=[10.0, 10.0005, 10.0006, 10.0007, 10.0008])
    alternate(st, ThresholdFitConfig(rounds=10, warmup_epochs=1, tolerance=1e-3))
    assert st.epochs_run == 2  # |10.0005-10|/10 < 1e-3 stops after round 1


def test_alternate_zero_rounds_untouched():
    st = _FakeTrainState(losses=[1.0])
    alternate(st, ThresholdFitConfig(rounds=0))
    assert st.epochs_run == 0
    assert st.thresholds.tau[0] == 0.5


def test_alternate_wraps_nonfinite():
    st = _FakeTrainState(losses=[10.0, None])
    with pytest.raises(AlternationError) as exc:
        alternate(st, ThresholdFitConfig(rounds=4, warmup_epochs=1, tolerance=0.0))
    assert exc.value.round_index == 1


def test_alternate_aborts_on_nan_loss():
    st = _FakeTrainState(losses=[float("nan")])
    with pytest.raises(AlternationError) as exc:
        alternate(st, ThresholdFitConfig(rounds=2, warmup_epochs=1))
    assert exc.value.round_index == 0


def test_degenerate_drift_collapses_thresholds():
    """With collapsed model scores the gradient path drives tau_hat to 0 and
    rho_hat to the full grid: the failure the closed-form fit exists to avoid."""
    cells = 16
    th = ThresholdSet([0.8], [0.05], [8.0], [2.0], grid_cells=cells)
    acc = _acc_with(box=[0.0], out=[1.0], pos=[0.0], neg=[float(cells)])
    out = degenerate_drift(th, acc, lr=0.05, steps=1000)
    assert out.tau_hat[0] == 0.0
    assert out.rho_hat[0] == float(cells)
    assert out.tau[0] == 0.0
    assert out.rho[0] == 1.0


def test_degenerate_drift_is_one_sided():
    # satisfied hinges leave thresholds untouched
    th = ThresholdSet([0.5], [0.2], [3.0], [5.0], grid_cells=16)
    acc = _acc_with(box=[0.9], out=[0.05], pos=[10.0], neg=[1.0])
    out = degenerate_drift(th, acc, lr=0.05, steps=50)
    assert out.tau[0] == 0.5 and out.rho[0] == 0.2
    assert out.tau_hat[0] == 3.0 and out.rho_hat[0] == 5.0


def test_fit_config_validation():
    with pytest.raises(ValueError):
        ThresholdFitConfig(slack_fraction=1.0)
    with pytest.raises(ValueError):
        ThresholdFitConfig(warmup_epochs=0)
    with pytest.raises(ValueError):
        ThresholdFitConfig(rho_hat_max_fraction=0.0)
