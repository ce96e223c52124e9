"""Attack suite tests: geometry, gradient estimators, and the
screening/verification control flow of the evaluation harness."""

import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from purifybench.attack import (REPORT_HEADER, AttackConfig, attack_loss,
                                bpda_eot_gradient_batch, evaluate_defense,
                                evaluate_transfer, grad_bpda_eot, grad_pgd,
                                project, random_init, step_direction,
                                write_report_csv)
from purifybench.rng import Rng
from purifybench.sampler import LangevinConfig

from helpers import LinearClassifier, StubEnergy, template_classifier


def _templates():
    t = np.zeros((4, 1, 4, 4))
    for c in range(4):
        t[c, 0, c, c] = 1.0
    return t


def _perfect_setup(m=3):
    """m natural images the template classifier labels perfectly."""
    t = _templates()
    return StubEnergy(), template_classifier(t), t[:m].copy(), np.arange(m)


# ------------------------------------------------------------ ball geometry

@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), eps=st.floats(0.01, 0.5),
       norm=st.sampled_from(["linf", "l2"]))
def test_project_lands_in_ball_and_hypercube(seed, eps, norm):
    rng = Rng(seed, "proj")
    center = rng.uniform((2, 1, 3, 3))
    x = center + rng.gaussian((2, 1, 3, 3))
    out = project(x, center, eps, norm)
    assert out.min() >= 0.0 and out.max() <= 1.0
    delta = (out - center).reshape(2, -1)
    if norm == "linf":
        assert np.abs(delta).max() <= eps + 1e-12
    else:
        assert np.sqrt((delta ** 2).sum(axis=1)).max() <= eps + 1e-9
    # projection is idempotent
    again = project(out, center, eps, norm)
    assert np.allclose(again, out, atol=1e-12)


def test_project_keeps_interior_points():
    center = np.full((1, 1, 2, 2), 0.5)
    x = center + 0.01
    for norm in ("linf", "l2"):
        assert np.array_equal(project(x, center, 0.1, norm), x)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), eps=st.floats(0.01, 0.5),
       norm=st.sampled_from(["linf", "l2"]))
def test_random_init_in_ball_and_hypercube(seed, eps, norm):
    center = Rng(seed, "c").uniform((1, 3, 3))
    x = random_init(center, eps, norm, Rng(seed, "i"))
    assert x.shape == center.shape
    assert x.min() >= 0.0 and x.max() <= 1.0
    assert np.array_equal(x, project(x, center, eps, norm))


def test_random_init_epsilon_zero_is_center():
    center = Rng(1, "c").uniform((1, 3, 3)) * 0.8 + 0.1
    for norm in ("linf", "l2"):
        assert np.allclose(random_init(center, 0.0, norm, Rng(2, "i")), center,
                           atol=1e-15)


def test_step_direction_linf_is_sign():
    g = np.array([[-2.0, 0.0, 3.0]])
    assert np.array_equal(step_direction(g, "linf"), [[-1.0, 0.0, 1.0]])


def test_step_direction_l2_unit_norm_and_zero_map():
    g = Rng(3, "g").gaussian((4, 1, 3, 3))
    d = step_direction(g, "l2")
    norms = np.sqrt((d.reshape(4, -1) ** 2).sum(axis=1))
    assert np.allclose(norms, 1.0, atol=1e-12)
    assert not step_direction(np.zeros((2, 5)), "l2").any()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), norm=st.sampled_from(["linf", "l2"]))
def test_step_direction_maximizes_inner_product(seed, norm):
    rng = Rng(seed, "sd")
    g = rng.gaussian((1, 12))
    best = float((step_direction(g, norm) * g).sum())
    for _ in range(20):
        cand = rng.gaussian((1, 12))
        cand = step_direction(cand, norm)   # a random feasible direction
        assert float((cand * g).sum()) <= best + 1e-9


# --------------------------------------------------------------- estimators

def test_bpda_eot_h1_k0_is_bitwise_pgd():
    clf = LinearClassifier(Rng(5, "w").gaussian((16, 4)))
    xs = Rng(6, "x").uniform((3, 1, 4, 4))
    ys = np.array([0, 2, 1])
    keys = np.zeros((3, 1), dtype=np.uint64)
    deltas, _, _ = bpda_eot_gradient_batch(StubEnergy(), clf, xs, ys, 1,
                                           LangevinConfig(steps=0), keys)
    assert np.array_equal(deltas, grad_pgd(clf, xs, ys))


def test_bpda_eot_duplicate_replicates_collapse_to_pgd():
    # with the identity transform every replicate is the same image, so the
    # replicate-summed gradient must equal the plain gradient for any H
    clf = LinearClassifier(Rng(7, "w").gaussian((16, 4)))
    xs = Rng(8, "x").uniform((2, 1, 4, 4))
    ys = np.array([1, 3])
    keys = np.zeros((2, 5), dtype=np.uint64)
    deltas, mean, per = bpda_eot_gradient_batch(StubEnergy(), clf, xs, ys, 5,
                                                LangevinConfig(steps=0), keys)
    assert np.allclose(deltas, grad_pgd(clf, xs, ys), atol=1e-12)
    assert np.allclose(mean, per[:, 0], atol=1e-12)


def test_grad_bpda_eot_single_matches_batch():
    ebm = StubEnergy()
    clf = LinearClassifier(Rng(9, "w").gaussian((16, 4)))
    x = Rng(10, "x").uniform((1, 4, 4))
    lcfg = LangevinConfig(tau=0.05, steps=3)
    rng = Rng(11, "g")
    delta, mean = grad_bpda_eot(ebm, clf, x, 2, 4, lcfg, rng)
    keys = np.array([[Rng(11, "g").spawn(h).key for h in range(4)]], dtype=np.uint64)
    deltas, means, _ = bpda_eot_gradient_batch(ebm, clf, x[None], np.array([2]),
                                               4, lcfg, keys)
    assert np.array_equal(delta, deltas[0])
    assert np.array_equal(mean, means[0])


def test_attack_loss_matches_manual_cross_entropy():
    logits = np.array([1.0, 3.0, 0.0, -1.0])
    z = logits - logits.max()
    expected = float(np.log(np.exp(z).sum()) - z[2])
    assert abs(attack_loss(logits, 2) - expected) < 1e-12


def test_attack_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(norm="l1")
    with pytest.raises(ValueError):
        AttackConfig(gradient="fgsm")
    with pytest.raises(ValueError):
        AttackConfig(epsilon=-0.1)
    with pytest.raises(ValueError):
        AttackConfig(alpha=0.0)
    with pytest.raises(ValueError):
        AttackConfig(h_adv=10, h_def=5)
    with pytest.raises(ValueError):
        AttackConfig(attacks=0)
    assert AttackConfig().gradient == "bpda_eot"


# ------------------------------------------------- evaluation control flow

def _cfg(**kw):
    base = dict(norm="linf", epsilon=0.0, alpha=0.01, attacks=3,
                h_adv=1, h_def=1, restarts=2, gradient="pgd")
    base.update(kw)
    return AttackConfig(**base)


def test_perfect_defense_epsilon_zero_all_defended():
    ebm, clf, imgs, labels = _perfect_setup()
    records, summary = evaluate_defense(ebm, clf, imgs, labels, _cfg(),
                                        LangevinConfig(steps=0), master_seed=1)
    assert summary["natural_acc"] == 1.0 and summary["robust_acc"] == 1.0
    for r in records:
        assert r.defended and r.break_step is None and r.break_restart is None


def test_natural_verification_failure_counts_as_broken():
    ebm, clf, imgs, labels = _perfect_setup()
    screened_ids = []

    def verify_hook(out, ids, restart, step):
        if restart == -1:
            out = out.copy()
            out[ids == 1] = 3          # misverify image 1 on the natural pass
        return out

    def screen_hook(out, ids, restart, n):
        screened_ids.extend(int(i) for i in ids)
        return out

    records, summary = evaluate_defense(ebm, clf, imgs, labels, _cfg(),
                                        LangevinConfig(steps=0), master_seed=1,
                                        verify_hook=verify_hook,
                                        screen_hook=screen_hook)
    rec = records[1]
    assert not rec.defended and rec.break_step == 0 and rec.break_restart == -1
    assert rec.predicted_natural == 3
    assert summary["natural_acc"] == pytest.approx(2 / 3)
    assert summary["robust_acc"] == pytest.approx(2 / 3)
    # a naturally-misclassified image is never attacked
    assert 1 not in screened_ids


def test_screen_flip_needs_verification_to_break():
    # screening says image 0 flipped at (restart 1, step 2); verification
    # confirms -> break recorded there and the image leaves the pool
    ebm, clf, imgs, labels = _perfect_setup()
    screen_calls = []

    def screen_hook(out, ids, restart, n):
        screen_calls.extend((int(i), restart, n) for i in ids)
        out = out.copy()
        out[(ids == 0) & (restart == 1) & (n == 2)] = 3
        return out

    def verify_hook(out, ids, restart, step):
        if restart == 1 and step == 2:
            out = out.copy()
            out[ids == 0] = 3
        return out

    records, summary = evaluate_defense(
        ebm, clf, imgs, labels, _cfg(restarts=3), LangevinConfig(steps=0),
        master_seed=1, screen_hook=screen_hook, verify_hook=verify_hook)
    rec = records[0]
    assert not rec.defended and rec.break_step == 2 and rec.break_restart == 1
    assert summary["robust_acc"] == pytest.approx(2 / 3)
    assert summary["natural_acc"] == 1.0
    # image 0 is screened up to the break and never afterwards
    calls0 = [(r, n) for i, r, n in screen_calls if i == 0]
    assert calls0 == [(0, 1), (0, 2), (0, 3), (0, 4), (1, 1), (1, 2)]


def test_screen_false_alarm_keeps_attacking():
    # screening flips but large-sample verification disagrees: no break,
    # and the attack continues through all steps and restarts
    ebm, clf, imgs, labels = _perfect_setup(m=1)
    verify_calls = []

    def screen_hook(out, ids, restart, n):
        out = out.copy()
        out[(restart == 0) & (n == 2)] = 3
        return out

    def verify_hook(out, ids, restart, step):
        if restart >= 0:
            verify_calls.append((restart, step))
        return out                      # real labels: still correct

    records, summary = evaluate_defense(ebm, clf, imgs, labels, _cfg(),
                                        LangevinConfig(steps=0), master_seed=1,
                                        screen_hook=screen_hook,
                                        verify_hook=verify_hook)
    assert records[0].defended and summary["robust_acc"] == 1.0
    assert verify_calls == [(0, 2)]     # verification only on screened flips


def test_screen_count_is_attacks_plus_one_per_restart():
    ebm, clf, imgs, labels = _perfect_setup(m=1)
    steps = []

    def screen_hook(out, ids, restart, n):
        steps.append((restart, n))
        return out

    cfg = _cfg(attacks=4, restarts=2)
    evaluate_defense(ebm, clf, imgs, labels, cfg, LangevinConfig(steps=0),
                     master_seed=1, screen_hook=screen_hook)
    expected = [(r, n) for r in range(2) for n in range(1, 6)]
    assert steps == expected            # N updates, N + 1 screens per restart


def test_keep_traces_records_every_screen():
    ebm, clf, imgs, labels = _perfect_setup(m=2)
    cfg = _cfg(attacks=2, restarts=1)
    records, _ = evaluate_defense(ebm, clf, imgs, labels, cfg,
                                  LangevinConfig(steps=0), master_seed=1,
                                  keep_traces=True)
    for rec in records:
        assert [(r, n) for r, n, _, _ in rec.trace] == [(0, 1), (0, 2), (0, 3)]
        for _, _, lab, loss in rec.trace:
            assert lab == rec.label and loss >= 0.0


def test_evaluate_defense_deterministic_and_chunk_invariant():
    ebm = StubEnergy()
    clf = LinearClassifier(Rng(20, "w").gaussian((16, 4)))
    imgs = Rng(21, "x").uniform((5, 1, 4, 4))
    labels = np.array([0, 1, 2, 3, 0])
    cfg = AttackConfig(norm="linf", epsilon=0.1, alpha=0.05, attacks=3,
                       h_adv=2, h_def=3, restarts=2, gradient="bpda_eot")
    lcfg = LangevinConfig(tau=0.05, steps=2)

    def run(max_chains):
        recs, summary = evaluate_defense(ebm, clf, imgs, labels, cfg, lcfg,
                                         master_seed=99, max_chains=max_chains)
        return [(r.image_id, r.defended, r.break_step, r.break_restart,
                 r.predicted_natural) for r in recs], summary

    a, sa = run(4096)
    b, sb = run(3)          # forces tiny verification/gradient chunks
    c, sc = run(4096)
    assert a == b == c and sa == sb == sc


def test_iterates_stay_in_feasible_set_via_trace_losses():
    # with epsilon > 0 the harness must keep iterates inside the ball; we
    # check indirectly: an l2 run completes without projection errors and
    # the report is well-formed
    ebm = StubEnergy()
    clf = LinearClassifier(Rng(30, "w").gaussian((16, 4)))
    imgs = Rng(31, "x").uniform((2, 1, 4, 4))
    labels = np.array([0, 1])
    cfg = AttackConfig(norm="l2", epsilon=0.5, alpha=0.2, attacks=2,
                       h_adv=1, h_def=2, restarts=1, gradient="bpda")
    records, summary = evaluate_defense(ebm, clf, imgs, labels, cfg,
                                        LangevinConfig(tau=0.05, steps=1),
                                        master_seed=7)
    assert len(records) == 2 and 0.0 <= summary["robust_acc"] <= 1.0


def test_write_report_csv_format(tmp_path):
    ebm, clf, imgs, labels = _perfect_setup(m=2)
    records, summary = evaluate_defense(ebm, clf, imgs, labels, _cfg(restarts=1),
                                        LangevinConfig(steps=0), master_seed=1)
    p = tmp_path / "report.csv"
    write_report_csv(p, records, summary)
    with open(p) as f:
        rows = list(csv.reader(f))
    assert rows[0] == REPORT_HEADER
    assert len(rows) == 3
    assert rows[1] == ["0", "0", "0", "1", "", ""]
    assert rows[2] == ["1", "1", "1", "1", "", ""]


def test_evaluate_transfer_ball_containment_and_summary():
    ebm = StubEnergy()
    clf = LinearClassifier(Rng(40, "w").gaussian((16, 4)))
    imgs = Rng(41, "x").uniform((3, 1, 4, 4))
    labels = np.array([0, 1, 2])
    cfg = AttackConfig(norm="linf", epsilon=0.1, alpha=0.04, attacks=5,
                       h_adv=1, h_def=2, restarts=1, gradient="pgd")
    adv, summary = evaluate_transfer(ebm, clf, imgs, labels, cfg,
                                     defense_steps=[0, 2], defense_tau=0.05,
                                     h_def=2, master_seed=3)
    assert adv.shape == imgs.shape
    assert np.abs(adv - imgs).max() <= cfg.epsilon + 1e-12
    assert adv.min() >= 0.0 and adv.max() <= 1.0
    for key in ("base_natural_acc", "base_adversarial_acc",
                "defense_natural_acc_k0", "defense_adversarial_acc_k0",
                "defense_natural_acc_k2", "defense_adversarial_acc_k2"):
        assert 0.0 <= summary[key] <= 1.0
    # K = 0 defense with the identity transform equals the base classifier
    assert summary["defense_natural_acc_k0"] == summary["base_natural_acc"]
    assert summary["defense_adversarial_acc_k0"] == summary["base_adversarial_acc"]
