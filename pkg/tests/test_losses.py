import math

import numpy as np
import pytest
from scipy import integrate, stats

from evico import diffcore as dc
from evico import gradcheck
from evico import losses as L
from evico.errors import ConfigError, EmptyBatchError, InvalidLabelError, ShapeError
from evico.heads import evidential_head, vanilla_head


def pixel(values):
    """One-pixel ``[1,K,1,1]`` constant."""
    return dc.constant(np.asarray(values, dtype=np.float64).reshape(1, -1, 1, 1))


def one_label(k):
    return np.full((1, 1, 1), k)


def random_probs(rng, n, k, h, w):
    return rng.dirichlet(np.ones(k), size=(n, h, w)).transpose(0, 3, 1, 2)


# ------------------------------------------------------------------ CE

def test_ce_zero_for_matching_one_hot():
    y = np.array([[[0, 1], [1, 0]]])
    assert L.loss_ce(dc.constant(L.one_hot(y, 2)), y).item() == 0.0


def test_ce_uniform_is_log2():
    y = np.random.default_rng(0).integers(0, 2, size=(2, 3, 3))
    p = dc.constant(np.full((2, 2, 3, 3), 0.5))
    assert L.loss_ce(p, y).item() == pytest.approx(math.log(2.0), abs=1e-15)


def test_ce_matches_per_pixel_loop():
    rng = np.random.default_rng(1)
    p, y = random_probs(rng, 1, 3, 4, 4), rng.integers(0, 3, size=(1, 4, 4))
    expected = np.mean([-math.log(p[0, y[0, i, j], i, j]) for i in range(4) for j in range(4)])
    assert L.loss_ce(dc.constant(p), y).item() == pytest.approx(expected, abs=1e-12)


def test_ce_log_floor_keeps_saturated_softmax_finite():
    p = pixel([1.0, 0.0])
    assert L.loss_ce(p, one_label(1)).item() == pytest.approx(-math.log(L.CE_LOG_FLOOR))


def test_ce_rejects_bad_labels():
    with pytest.raises(InvalidLabelError):
        L.loss_ce(pixel([0.5, 0.5]), one_label(2))
    with pytest.raises(InvalidLabelError):
        L.loss_ce(pixel([0.5, 0.5]), one_label(-1))
    with pytest.raises(ShapeError):
        L.loss_ce(dc.constant(np.full((1, 2, 2, 2), 0.5)), np.zeros((1, 3, 3), dtype=int))


# ------------------------------------------------------------------ ECE

def test_ece_digamma_recurrence_values():
    assert L.loss_ece(pixel([2.0, 1.0]), one_label(0)).item() == pytest.approx(0.5, abs=1e-12)
    assert L.loss_ece(pixel([1.0, 1.0]), one_label(0)).item() == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("k", [2, 3, 4])
def test_ece_matches_monte_carlo_expectation(k):
    rng = np.random.default_rng(10 + k)
    alpha = rng.uniform(1.0, 6.0, size=k)
    y = int(rng.integers(k))
    samples = rng.dirichlet(alpha, size=1_000_000)
    mc = float(np.mean(-np.log(samples[:, y])))
    assert L.loss_ece(pixel(alpha), one_label(y)).item() == pytest.approx(mc, abs=1e-2)


def test_ece_nonnegative():
    rng = np.random.default_rng(3)
    alpha = 1.0 + rng.exponential(2.0, size=(2, 3, 4, 4))
    y = rng.integers(0, 3, size=(2, 4, 4))
    assert L.loss_ece(dc.constant(alpha), y).item() >= 0.0


# ------------------------------------------------------------------ KL

def test_kl_zero_without_off_true_evidence():
    assert L.loss_kl(pixel([7.0, 1.0, 1.0]), one_label(0)).item() == pytest.approx(0.0, abs=1e-12)


def test_kl_hand_value():
    # alpha = (5, 2), y = 0  ->  alpha_tilde = (1, 2)
    got = L.loss_kl(pixel([5.0, 2.0]), one_label(0)).item()
    assert got == pytest.approx(math.log(2.0) - 0.5, abs=1e-9)


def test_kl_increases_with_false_evidence():
    a = L.loss_kl(pixel([4.0, 2.0]), one_label(0)).item()
    b = L.loss_kl(pixel([4.0, 3.0]), one_label(0)).item()
    assert b > a > 0


def kl_beta_vs_uniform(a, b):
    dist = stats.beta(a, b)
    val, _ = integrate.quad(lambda p: dist.pdf(p) * dist.logpdf(p), 0.0, 1.0,
                            epsabs=1e-13, epsrel=1e-13, limit=200)
    return val


@pytest.mark.parametrize("false_alpha", [1.0, 1.3, 2.0, 4.7, 11.0])
@pytest.mark.parametrize("target", [0, 1])
def test_kl_matches_quadrature(false_alpha, target):
    alpha = [false_alpha, false_alpha]
    alpha[target] = 9.0  # removed by the target mask
    a_t = [1.0, 1.0]
    a_t[1 - target] = false_alpha
    expected = kl_beta_vs_uniform(*a_t)
    assert L.loss_kl(pixel(alpha), one_label(target)).item() == pytest.approx(expected, abs=1e-6)


# ------------------------------------------------------------------ ENC and schedules

def test_enc_annealing():
    alpha, y = pixel([5.0, 2.0]), one_label(0)
    ece, kl = L.loss_ece(alpha, y).item(), L.loss_kl(alpha, y).item()
    assert L.loss_enc(alpha, y, L.ScheduleState(t=0)).item() == ece
    assert L.lambda_kl(L.ScheduleState(t=75)) == 0.5
    assert L.loss_enc(alpha, y, L.ScheduleState(t=75)).item() == pytest.approx(ece + 0.5 * kl)
    assert L.lambda_kl(L.ScheduleState(t=1e6)) == 1.0


def test_lambda_con_values():
    assert L.lambda_con(L.ScheduleState(t=40)) == pytest.approx(0.1, abs=1e-15)
    assert L.lambda_con(L.ScheduleState(t=0)) == pytest.approx(0.1 * math.exp(-5.0), abs=1e-15)
    assert L.lambda_con(L.ScheduleState(t=0)) == pytest.approx(6.7379e-4, abs=1e-8)
    assert L.lambda_con(L.ScheduleState(t=80)) == 0.1


def test_schedules_monotone_and_bounded():
    ts = np.arange(0, 400)
    lk = [L.lambda_kl(L.ScheduleState(t=t)) for t in ts]
    lc = [L.lambda_con(L.ScheduleState(t=t)) for t in ts]
    assert all(0 <= v <= 1 for v in lk) and all(0 < v <= 0.1 for v in lc)
    assert np.all(np.diff(lk) >= 0) and np.all(np.diff(lc) >= 0)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        L.ScheduleState(t=-1)
    with pytest.raises(ConfigError):
        L.ScheduleState(kl_denominator=0)


# ------------------------------------------------------------------ consistency

def test_directed_consistency_values():
    g, s = pixel([1.0, 0.0]), pixel([0.5, 0.5])
    w = dc.constant(np.full((1, 1, 1, 1), 0.5))
    assert L.loss_consistency_directed(g, s, w).item() == pytest.approx(0.25, abs=1e-15)
    assert L.loss_consistency_directed(g, g, w).item() == 0.0
    zero = dc.constant(np.zeros((1, 1, 1, 1)))
    assert L.loss_consistency_directed(g, s, zero).item() == 0.0


def test_directed_consistency_shape_checks():
    with pytest.raises(ShapeError):
        L.loss_consistency_directed(pixel([1, 0]), pixel([1, 0, 0]), dc.constant(np.ones((1, 1, 1, 1))))
    with pytest.raises(ShapeError):
        L.loss_consistency_directed(pixel([1, 0]), pixel([0, 1]), dc.constant(np.ones((1, 2, 1, 1))))


def _two_head_logits(rng, n=1, k=2, h=4, w=4):
    return {"zv": rng.normal(size=(n, k, h, w)), "ze": rng.normal(size=(n, k, h, w))}


def test_con_is_twice_either_direction_and_zero_when_equal():
    rng = np.random.default_rng(4)
    z = _two_head_logits(rng, k=3)
    pv = vanilla_head(dc.constant(z["zv"]))
    ev = evidential_head(dc.constant(z["ze"]))
    con = L.loss_con(ev.prob, pv, ev.weight).item()
    assert con == pytest.approx(2 * L.loss_uegv(ev.prob, pv, ev.weight).item(), rel=1e-14)
    assert con == pytest.approx(2 * L.loss_uvge(ev.prob, pv, ev.weight).item(), rel=1e-14)
    assert L.loss_con(ev.prob, ev.prob, ev.weight).item() == 0.0


def _grads(fn, inputs):
    _, g = gradcheck.analytic_grads(fn, inputs)
    return g


def test_con_gradient_routing():
    rng = np.random.default_rng(5)
    z = _two_head_logits(rng)

    def parts(v):
        return vanilla_head(v["zv"]), evidential_head(v["ze"])

    def con(v):
        pv, ev = parts(v)
        return L.loss_con(ev.prob, pv, ev.weight)

    def uvge(v):
        pv, ev = parts(v)
        return L.loss_uvge(ev.prob, pv, ev.weight)

    def uegv(v):
        pv, ev = parts(v)
        return L.loss_uegv(ev.prob, pv, ev.weight)

    g_con, g_uvge, g_uegv = _grads(con, z), _grads(uvge, z), _grads(uegv, z)
    np.testing.assert_allclose(g_con["ze"], g_uvge["ze"], atol=1e-15)
    np.testing.assert_allclose(g_con["zv"], g_uegv["zv"], atol=1e-15)
    assert not g_uegv["ze"].any() and not g_uvge["zv"].any()
    # finite differences of UVGE alone (guide held fixed) reproduce the evidential gradient
    pv_fixed = vanilla_head(dc.constant(z["zv"])).value

    def uvge_fixed_guide(v):
        ev = evidential_head(v["ze"])
        w_fixed = dc.constant(evidential_head(dc.constant(z["ze"])).weight.value)
        return L.loss_consistency_directed(dc.constant(pv_fixed), ev.prob, w_fixed)

    num = gradcheck.numeric_grads(uvge_fixed_guide, {"ze": z["ze"]})
    assert gradcheck.compare(g_con, num).ok


def test_detached_guide_matches_constant_guide():
    rng = np.random.default_rng(6)
    z = _two_head_logits(rng)

    tape = dc.Tape()
    zv, ze = tape.leaf(z["zv"]), tape.leaf(z["ze"])
    ev = evidential_head(ze)
    grads = tape.backward(L.loss_uegv(ev.prob, vanilla_head(zv), ev.weight))
    assert not grads[ze].any()

    fixed = evidential_head(dc.constant(z["ze"]))
    tape2 = dc.Tape()
    zv2 = tape2.leaf(z["zv"])
    loss = L.loss_consistency_directed(fixed.prob, vanilla_head(zv2), fixed.weight)
    np.testing.assert_array_equal(grads[zv], tape2.backward(loss)[zv2])


def test_no_stop_gradient_reaches_guide():
    rng = np.random.default_rng(7)
    z = _two_head_logits(rng)

    def fn(v):
        ev = evidential_head(v["ze"])
        return L.loss_uegv(ev.prob, vanilla_head(v["zv"]), ev.weight, stop_gradient=False)

    g = _grads(fn, z)
    assert np.abs(g["ze"]).sum() > 0
    assert gradcheck.check(fn, z).ok


# ------------------------------------------------------------------ SEG / DC-Net

def test_seg_is_ce_plus_enc():
    rng = np.random.default_rng(8)
    z = _two_head_logits(rng, n=2, k=3)
    y = rng.integers(0, 3, size=(2, 4, 4))
    pv, ev = vanilla_head(dc.constant(z["zv"])), evidential_head(dc.constant(z["ze"]))
    sched = L.ScheduleState(t=30)
    seg = L.loss_seg(pv, ev.alpha, y, sched).item()
    parts = L.loss_ce(pv, y).item() + L.loss_enc(ev.alpha, y, sched).item()
    assert seg == pytest.approx(parts, abs=1e-12)


def test_seg_limit_with_confident_correct_predictions():
    z = np.zeros((1, 2, 1, 1))
    z[0, 0], z[0, 1] = 40.0, -40.0
    y = one_label(0)
    pv, ev = vanilla_head(dc.constant(z)), evidential_head(dc.constant(z))
    assert L.loss_ce(pv, y).item() < 1e-12
    assert L.loss_ece(ev.alpha, y).item() < 0.05
    assert L.loss_seg(pv, ev.alpha, y, L.ScheduleState(t=150)).item() < 0.05


def test_seg_empty_batch():
    empty = dc.constant(np.zeros((0, 2, 2, 2)))
    with pytest.raises(EmptyBatchError):
        L.loss_seg(empty, empty, np.zeros((0, 2, 2), dtype=int), L.ScheduleState())


def test_seg_gradient():
    rng = np.random.default_rng(9)
    z = _two_head_logits(rng)
    y = rng.integers(0, 2, size=(1, 4, 4))
    sched = L.ScheduleState(t=60)

    def fn(v):
        return L.loss_seg(vanilla_head(v["zv"]), evidential_head(v["ze"]).alpha, y, sched)

    assert gradcheck.check(fn, z).ok


def _batch(rng, n, n_lab, k=2):
    z = _two_head_logits(rng, n=n, k=k)
    y = rng.integers(0, k, size=(n_lab, 4, 4))
    return z, y


def test_dcnet_matches_manual_composition():
    rng = np.random.default_rng(10)
    z, y = _batch(rng, 4, 2, k=3)
    sched = L.ScheduleState(t=20)
    pv, ev = vanilla_head(dc.constant(z["zv"])), evidential_head(dc.constant(z["ze"]))
    total = L.loss_dcnet(pv, ev, y, sched).item()
    pv_l = vanilla_head(dc.constant(z["zv"][:2]))
    ev_l = evidential_head(dc.constant(z["ze"][:2]))
    manual = (L.loss_ce(pv_l, y).item() + L.loss_ece(ev_l.alpha, y).item()
              + L.lambda_kl(sched) * L.loss_kl(ev_l.alpha, y).item()
              + L.lambda_con(sched) * L.loss_con(ev.prob, pv, ev.weight).item())
    assert total == pytest.approx(manual, abs=1e-12)


def test_dcnet_without_unlabeled_samples():
    rng = np.random.default_rng(11)
    z, y = _batch(rng, 2, 2)
    pv, ev = vanilla_head(dc.constant(z["zv"])), evidential_head(dc.constant(z["ze"]))
    sched = L.ScheduleState(t=10)
    expected = L.loss_seg(pv, ev.alpha, y, sched).item() \
        + L.lambda_con(sched) * L.loss_con(ev.prob, pv, ev.weight).item()
    assert L.loss_dcnet(pv, ev, y, sched).item() == pytest.approx(expected, abs=1e-12)


def test_dcnet_zero_ramp_is_supervised_objective():
    rng = np.random.default_rng(12)
    z, y = _batch(rng, 4, 2)
    pv, ev = vanilla_head(dc.constant(z["zv"])), evidential_head(dc.constant(z["ze"]))
    sched = L.ScheduleState(t=10, con_amplitude=0.0)
    supervised = L.dcnet_terms(pv, ev, y, sched, L.LossToggles(True, True, False, False))
    full = L.dcnet_terms(pv, ev, y, sched)
    assert full.total.item() == supervised.total.item()


def test_dcnet_toggles_select_terms():
    rng = np.random.default_rng(13)
    z, y = _batch(rng, 4, 2)
    pv, ev = vanilla_head(dc.constant(z["zv"])), evidential_head(dc.constant(z["ze"]))
    sched = L.ScheduleState(t=40)
    only_ce = L.dcnet_terms(pv, ev, y, sched, L.LossToggles(True, False, False, False))
    assert only_ce.total.item() == only_ce.ce.item()
    uegv = L.dcnet_terms(pv, ev, y, sched, L.LossToggles(True, True, True, False))
    assert uegv.total.item() == pytest.approx(
        uegv.ce.item() + uegv.ece.item() + uegv.kl.item() * uegv.lambda_kl
        + 0.1 * uegv.uegv.item(), abs=1e-14)


def test_dcnet_empty_labeled_subset():
    rng = np.random.default_rng(14)
    z, _ = _batch(rng, 2, 0)
    pv, ev = vanilla_head(dc.constant(z["zv"])), evidential_head(dc.constant(z["ze"]))
    with pytest.raises(EmptyBatchError):
        L.loss_dcnet(pv, ev, np.zeros((0, 4, 4), dtype=int), L.ScheduleState())


def test_losses_finite_and_nonnegative():
    rng = np.random.default_rng(15)
    for _ in range(20):
        z, y = _batch(rng, 3, 2, k=3)
        for key in z:
            z[key] = z[key] * 6
        pv, ev = vanilla_head(dc.constant(z["zv"])), evidential_head(dc.constant(z["ze"]))
        terms = L.dcnet_terms(pv, ev, y, L.ScheduleState(t=100))
        for v in terms.values().values():
            assert math.isfinite(v) and v >= 0
