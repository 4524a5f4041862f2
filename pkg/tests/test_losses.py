"""Loss families: hand-frozen oracle values, scalar/batch agreement,
product-loss underflow, and the vanishing-gradient contrast."""

import numpy as np
import pytest

from patchloc import tensor as T
from patchloc.backbone import PatchScores
from patchloc.losses import (Annotation, AnnotationBatch, AnnotationError,
                             LossConfig, ThresholdSet, _log1mexp,
                             annotation_from_boxes, baseline_ann_nll,
                             baseline_loss_batch, baseline_un_prob,
                             compute_gamma, full_loss, full_loss_batch,
                             relu_ann_loss, relu_loss_batch, relu_un_loss,
                             sigmoid_ann_loss, sigmoid_loss_batch,
                             sigmoid_un_loss, stability_report,
                             write_stability_csv)
from fdcheck import gradcheck

rng = np.random.default_rng(7)


def _scores(values):
    return PatchScores(np.asarray(values, dtype=np.float64))


def test_relu_ann_loss_hand_value():
    # 4x4 grid, 2-cell box: s_in=1.4 vs 0.75*2 -> 0.1/2; s_out=1.8 vs 0.125*14 -> 0.05/14
    z = np.full((4, 4, 1), 0.1)
    box = np.zeros((4, 4), dtype=bool)
    box[0, 0] = box[0, 1] = True
    z[0, 0, 0], z[0, 1, 0] = 0.6, 0.8
    z[3, 3, 0] = 0.5
    got = relu_ann_loss(_scores(z), 0, box, tau=0.75, rho=0.125)
    assert got == pytest.approx(3.0 / 56.0, abs=1e-15)


def test_relu_ann_loss_zero_when_satisfied():
    z = np.zeros((4, 4, 1))
    box = np.zeros((4, 4), dtype=bool)
    box[1, 1] = True
    z[1, 1, 0] = 0.9
    assert relu_ann_loss(_scores(z), 0, box, tau=0.8, rho=0.05) == 0.0


def test_relu_ann_loss_rejects_degenerate_box():
    z = np.full((2, 2, 1), 0.5)
    with pytest.raises(AnnotationError):
        relu_ann_loss(_scores(z), 0, np.zeros((2, 2), dtype=bool), 0.5, 0.1)
    with pytest.raises(AnnotationError):
        relu_ann_loss(_scores(z), 0, np.ones((2, 2), dtype=bool), 0.5, 0.1)


def test_relu_un_loss_hand_values():
    z = np.zeros((2, 2, 1))
    z[0, 0, 0], z[0, 1, 0], z[1, 0, 0] = 0.7, 0.6, 0.9
    s = float(z.sum())  # 2.2
    ps = _scores(z)
    assert relu_un_loss(ps, 0, y=1, tau_hat=5.0, rho_hat=1.0) == pytest.approx(5.0 - s)
    assert relu_un_loss(ps, 0, y=0, tau_hat=5.0, rho_hat=1.0, gamma=0.25) == pytest.approx(0.25 * (s - 1.0))
    assert relu_un_loss(ps, 0, y=1, tau_hat=2.0, rho_hat=1.0) == 0.0
    assert relu_un_loss(ps, 0, y=0, tau_hat=5.0, rho_hat=3.0) == 0.0


def test_baseline_nll_log_domain_frozen():
    p = np.array([[0.8, 0.3], [0.25, 0.5]])[:, :, None]
    box = np.array([[True, False], [False, False]])
    got = baseline_ann_nll(_scores(p), 0, box)
    assert got == pytest.approx(1.5606477482646683, abs=1e-12)


def test_baseline_nll_raw_matches_log_when_representable():
    p = np.array([[0.8, 0.3], [0.25, 0.5]])[:, :, None]
    box = np.array([[True, False], [False, False]])
    log_dom = baseline_ann_nll(_scores(p), 0, box)
    raw64 = baseline_ann_nll(_scores(p), 0, box, raw_product=True, dtype=np.float64)
    raw32 = baseline_ann_nll(_scores(p), 0, box, raw_product=True, dtype=np.float32)
    assert raw64 == pytest.approx(log_dom, abs=1e-12)
    assert raw32 == pytest.approx(log_dom, abs=1e-5)


def test_baseline_nll_raw_underflows_but_log_survives():
    # 0.5^400 is 3.87e-121: fine in f64, zero in f32
    p = np.full((20, 20, 1), 0.5)
    box = np.zeros((20, 20), dtype=bool)
    box[:10] = True
    log_dom = baseline_ann_nll(_scores(p), 0, box)
    assert log_dom == pytest.approx(277.2588722239781, abs=1e-9)
    raw32 = baseline_ann_nll(_scores(p), 0, box, raw_product=True, dtype=np.float32)
    assert np.isinf(raw32)
    raw64 = baseline_ann_nll(_scores(p), 0, box, raw_product=True, dtype=np.float64)
    assert raw64 == pytest.approx(log_dom, rel=1e-10)


def test_baseline_un_prob_frozen():
    p = np.full((2, 2, 1), 0.3)
    assert baseline_un_prob(_scores(p), 0) == pytest.approx(0.7599, abs=1e-12)


def test_log1mexp_frozen_both_branches():
    pts = {-0.1: -2.3521684610440908, -0.5: -0.9327521295671886,
           -np.log(2.0): -0.6931471805599453, -3.0: -0.05106918094270159,
           -20.0: -2.061153624562735e-09, -50.0: -1.9287498479639178e-22}
    s = np.array(sorted(pts))
    got = _log1mexp(s)
    want = np.array([pts[v] for v in sorted(pts)])
    assert np.allclose(got, want, rtol=1e-12, atol=0)


def test_log1mexp_continuous_at_branch_point():
    b = -np.log(2.0)
    lo, hi = _log1mexp(np.array([b - 1e-9, b + 1e-9]))
    assert abs(hi - lo) < 1e-8


def test_sigmoid_ann_loss_at_exact_thresholds():
    # margins of zero on both sides: -sig(0)*sig(0) = -0.25
    z = np.full((2, 2, 1), 0.5)
    box = np.array([[True, False], [False, False]])
    got = sigmoid_ann_loss(_scores(z), 0, box, tau=0.5, rho=0.5)
    assert got == pytest.approx(-0.25, abs=1e-12)


def test_sigmoid_un_gradient_vanishes_where_relu_does_not():
    """At a 20-count violation the smooth loss gradient is ~2e-9 while the
    hinge keeps slope 1: the reason the hinge family trains and the smooth
    one stalls."""
    z0 = np.full((8, 8, 1), 0.1)  # sum 6.4, tau_hat 26.4 -> margin -20
    tau_hat = float(z0.sum() + 20.0)
    eps = 1e-5

    def sig_loss(v):
        z = z0.copy()
        z[0, 0, 0] = v
        return sigmoid_un_loss(_scores(z), 0, y=1, tau_hat=tau_hat, rho_hat=99.0)

    def relu_loss_fn(v):
        z = z0.copy()
        z[0, 0, 0] = v
        return relu_un_loss(_scores(z), 0, y=1, tau_hat=tau_hat, rho_hat=99.0)

    g_sig = (sig_loss(0.1 + eps) - sig_loss(0.1 - eps)) / (2 * eps)
    g_relu = (relu_loss_fn(0.1 + eps) - relu_loss_fn(0.1 - eps)) / (2 * eps)
    assert abs(g_sig) < 1e-8
    assert abs(g_sig) == pytest.approx(2.0611536139418493e-09, rel=1e-4)
    assert g_relu == pytest.approx(-1.0, abs=1e-9)


def test_compute_gamma_clamps():
    labels = np.array([[1, 0, 1], [0, 0, 1], [0, 0, 1], [0, 0, 1], [1, 0, 0]])
    gam = compute_gamma(labels)
    assert gam[0] == pytest.approx(2.0 / 3.0)
    assert gam[1] == pytest.approx(1e-3)   # no positives
    assert gam[2] == pytest.approx(1.0)    # 4/1 clamped down


def _random_annotation(k=3, grid=4, annotated=True):
    y = rng.integers(0, 2, size=k)
    a = np.zeros(k, dtype=int)
    masks = np.zeros((k, grid, grid), dtype=bool)
    if annotated:
        pos = np.flatnonzero(y)
        if pos.size == 0:
            y[0] = 1
            pos = np.array([0])
        kk = int(rng.choice(pos))
        a[kk] = 1
        r, c = rng.integers(0, grid - 1, size=2)
        masks[kk, r:r + 2, c:c + 2] = True
    return Annotation(y=y, a=a, box_masks=masks)


def _random_thresholds(k=3, grid=4):
    cells = grid * grid
    return ThresholdSet(tau=rng.uniform(0.4, 0.8, k), rho=rng.uniform(0.05, 0.2, k),
                        tau_hat=rng.uniform(1.0, 5.0, k), rho_hat=rng.uniform(0.5, 2.0, k),
                        grid_cells=cells)


@pytest.mark.parametrize("family", ["relu", "sigmoid", "baseline"])
def test_batch_loss_equals_mean_of_scalar_losses(family):
    k, grid, n = 3, 4, 5
    th = _random_thresholds(k, grid)
    anns = [_random_annotation(k, grid, annotated=(i % 2 == 0)) for i in range(n)]
    zs = rng.uniform(0.05, 0.95, size=(n, k, grid, grid))
    cfg = LossConfig(lambda_ann=70.0, gamma=compute_gamma(np.stack([a.y for a in anns])),
                     family=family)
    batch = AnnotationBatch.stack(anns)
    got = full_loss_batch(T.constant(zs), batch, th, cfg).item()
    want = np.mean([full_loss(_scores(zs[i].transpose(1, 2, 0)), anns[i], th, cfg)
                    for i in range(n)])
    assert got == pytest.approx(want, rel=1e-10)


@pytest.mark.parametrize("family", ["relu", "sigmoid", "baseline"])
def test_batch_loss_gradients(family):
    k, grid, n = 2, 4, 3
    th = _random_thresholds(k, grid)
    anns = [_random_annotation(k, grid, annotated=(i == 0)) for i in range(n)]
    cfg = LossConfig(lambda_ann=7.0, gamma=np.full(k, 0.5), family=family)
    batch = AnnotationBatch.stack(anns)
    zs = rng.uniform(0.1, 0.9, size=(n, k, grid, grid))
    builders = {"relu": relu_loss_batch, "sigmoid": sigmoid_loss_batch}
    if family == "baseline":
        build = lambda z: baseline_loss_batch(z, batch, cfg)
    else:
        build = lambda z: builders[family](z, batch, th, cfg)
    gradcheck(build, (zs,), tol=2e-4)


def test_full_loss_selects_annotated_vs_unannotated_terms():
    k, grid = 2, 4
    y = np.array([1, 1])
    a = np.array([1, 0])
    masks = np.zeros((k, grid, grid), dtype=bool)
    masks[0, 0:2, 0:2] = True
    ann = Annotation(y=y, a=a, box_masks=masks)
    th = ThresholdSet(tau=[0.9, 0.9], rho=[0.0, 0.0], tau_hat=[9.0, 9.0],
                      rho_hat=[0.0, 0.0], grid_cells=16)
    z = np.full((grid, grid, k), 0.25)
    cfg = LossConfig(lambda_ann=10.0, gamma=np.ones(k), family="relu")
    got = full_loss(_scores(z), ann, th, cfg)
    want = 10.0 * relu_ann_loss(_scores(z), 0, masks[0], 0.9, 0.0) \
        + relu_un_loss(_scores(z), 1, 1, 9.0, 0.0)
    assert got == pytest.approx(want, rel=1e-12)


def test_annotation_validation():
    with pytest.raises(AnnotationError):
        Annotation(y=[0], a=[1], box_masks=np.ones((1, 2, 2), dtype=bool))
    with pytest.raises(AnnotationError):
        Annotation(y=[1], a=[1], box_masks=np.zeros((1, 2, 2), dtype=bool))


def test_annotation_from_boxes_masks():
    ann = annotation_from_boxes([1, 1, 0], [1, 0, 0], [(0, 1, 2, 2, 1)], grid=4)
    assert ann.a.tolist() == [1, 0, 0]
    mask = np.zeros((4, 4), dtype=bool)
    mask[1:3, 2:3] = True
    assert np.array_equal(ann.box_masks[0], mask)
    assert not ann.box_masks[1].any()


def test_stability_report_shape_and_flags():
    rows = stability_report()
    assert len(rows) == 3 * 3 * 2
    by_key = {(r.grid, r.p_value, r.precision): r for r in rows}
    # 0.1^400 underflows even f64; 0.5^400 only underflows f32
    assert by_key[(20, 0.1, "f64")].underflow
    assert by_key[(20, 0.1, "f64")].eq1_logdomain == pytest.approx(400 * np.log(0.1))
    assert by_key[(20, 0.5, "f32")].underflow
    assert not by_key[(20, 0.5, "f64")].underflow
    assert by_key[(20, 0.5, "f64")].eq1_raw == pytest.approx(3.8725919148493185e-121, rel=1e-12)
    assert not by_key[(5, 0.5, "f64")].underflow
    for r in rows:
        assert 0.0 <= r.eq9_loss <= 2.0
        assert np.isfinite(r.eq9_loss) and np.isfinite(r.eq1_logdomain)
        assert r.underflow == (r.eq1_raw == 0.0)


def test_stability_csv_round_trip(tmp_path):
    import csv
    rows = stability_report()
    path = tmp_path / "stab.csv"
    write_stability_csv(rows, path)
    with open(path) as fh:
        got = list(csv.reader(fh))
    assert got[0] == ["P", "p_value", "precision", "eq1_raw", "eq1_logdomain",
                      "eq9_loss", "underflow_flag"]
    assert len(got) == len(rows) + 1
    assert float(got[1][3]) == rows[0].eq1_raw
