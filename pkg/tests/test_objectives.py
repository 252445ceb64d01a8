"""Objectives: standardization, SFT, GRPO, GAL, pairing, and the routed step."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.special import expit

from dypo.errors import ConfigError, InputError, StateError
from dypo.gradcheck import check_dypo, check_gal, check_grpo, check_sft, make_instance
from dypo.grading import DifficultyGrade, grade
from dypo.objectives import (
    GroupRollout,
    MixConfig,
    build_pairs,
    dypo_step_loss,
    gal_loss_grad,
    grpo_loss_grad,
    grpo_policy_gradient,
    mixed_gradient,
    rollout_group,
    sft_loss_grad,
    standardize_advantages,
)
from dypo.policy import grad_norm, grad_scaled, log_prob, score
from dypo.seeding import substream
from dypo.tasks import TaskConfig, make_teacher_ensemble, reward, teacher_sample

TASK = TaskConfig()
CFG = MixConfig()


def _mid_instance(seed: int = 0, index: int = 0):
    return make_instance(seed, index, kind="mid")


def test_standardize_zero_spread():
    np.testing.assert_array_equal(standardize_advantages([1, 1, 1, 1], 1e-4), np.zeros(4))


def test_standardize_alternating():
    adv = standardize_advantages([1, 0, 1, 0], 1e-4)
    expected = 0.5 / (0.5 + 1e-4)
    np.testing.assert_allclose(adv, [expected, -expected, expected, -expected], atol=1e-15)
    assert expected == pytest.approx(0.99980004, abs=1e-8)


def test_standardize_recomputation_oracle():
    rng = substream(23, "std")
    for _ in range(200):
        r = rng.integers(0, 2, size=int(rng.integers(2, 12))).astype(float)
        xi = 10.0 ** rng.uniform(-6, -2)
        adv = standardize_advantages(r, xi)
        assert abs(adv.mean()) < 1e-12
        sigma = r.std()
        assert adv.std() == pytest.approx(sigma / (sigma + xi), abs=1e-9)
        assert adv.std() <= 1.0 + 1e-12


def test_standardize_preconditions():
    with pytest.raises(InputError):
        standardize_advantages([1.0], 1e-4)
    with pytest.raises(InputError):
        standardize_advantages([1.0, 0.0], 0.0)


def test_sft_single_teacher_matches_plain_nll():
    inst = _mid_instance(index=5)
    teacher = make_teacher_ensemble(TASK, 1, seed=0)
    report = sft_loss_grad(inst.params, inst.query, teacher, substream(3, "sft"))
    demo = teacher_sample(teacher[0], inst.query, substream(3, "sft"))
    # identical substream: the same single-teacher demo is drawn
    assert report.loss == -log_prob(inst.params, inst.query, demo)
    assert report.aux["teacher_index"] == 0.0


def test_sft_teacher_draw_is_uniform():
    inst = _mid_instance(index=6)
    teachers = make_teacher_ensemble(TASK, 4, seed=0)
    rng = substream(3, "hist")
    counts = np.zeros(4)
    n = 100_000
    for _ in range(n):
        counts[int(rng.integers(4))] += 1  # the same draw sft_loss_grad makes
    np.testing.assert_allclose(counts / n, 0.25, atol=0.01)
    # and the operation itself reports the drawn index
    rng = substream(3, "hist2")
    sampled = np.zeros(4)
    for _ in range(4000):
        sampled[int(sft_loss_grad(inst.params, inst.query, teachers, rng).aux["teacher_index"])] += 1
    np.testing.assert_allclose(sampled / 4000, 0.25, atol=0.03)


def test_sft_requires_teachers():
    inst = _mid_instance()
    with pytest.raises(ConfigError):
        sft_loss_grad(inst.params, inst.query, [], substream(3, "e"))


def test_sft_gradient_finite_differences():
    for i in range(15):
        assert check_sft(31, i) < 1e-6


def test_grpo_on_policy_identity():
    # params == ref: every ratio is 1 and the loss collapses to 0
    inst = _mid_instance(index=7)
    ref = inst.params.snapshot()
    for level in ("token", "trajectory"):
        for baseline in ("rollout", "ref"):
            cfg = MixConfig(ratio_level=level, ratio_baseline=baseline)
            report = grpo_loss_grad(inst.params, ref, inst.group, cfg)
            assert report.loss == pytest.approx(0.0, abs=1e-12)
            assert report.aux["mean_ratio"] == pytest.approx(1.0, abs=1e-12)


def test_grpo_zero_advantage_groups():
    inst = make_instance(41, 2, kind="hard")
    report = grpo_loss_grad(inst.params, inst.ref, inst.group, CFG)
    # policy-gradient term is exactly zero; only the KL penalty remains
    assert report.loss == pytest.approx(CFG.beta_kl * report.aux["kl_value"], abs=1e-15)
    kl_only = grad_scaled(report.gradient, 1.0)  # all gradient mass is KL
    assert grad_norm(kl_only) < CFG.beta_kl * 10


def test_grpo_needs_advantages():
    inst = _mid_instance(index=8)
    group = GroupRollout(query=inst.group.query, trajectories=inst.group.trajectories,
                         rewards=inst.group.rewards, advantages=None)
    with pytest.raises(StateError):
        grpo_loss_grad(inst.params, inst.ref, group, CFG)


@pytest.mark.parametrize("level", ["token", "trajectory"])
def test_grpo_gradient_finite_differences(level):
    cfg = MixConfig(ratio_level=level, ratio_baseline="ref")
    for i in range(15):
        assert check_grpo(37, i, cfg) < 1e-6


def test_grpo_policy_gradient_zero_for_flat_rewards():
    inst = make_instance(43, 1, kind="easy")
    assert grpo_policy_gradient(inst.params, inst.group) == {}


def test_grpo_policy_gradient_term_by_term_oracle():
    inst = _mid_instance(index=9)
    got = grpo_policy_gradient(inst.params, inst.group)
    expected: dict = {}
    k = inst.group.k
    for traj, adv in zip(inst.group.trajectories, inst.group.advantages):
        for ctx, vec in score(inst.params, inst.query, traj).items():
            expected[ctx] = expected.get(ctx, 0.0) + (adv / k) * vec
    assert set(got) == set(expected)
    for ctx in got:
        np.testing.assert_allclose(got[ctx], expected[ctx], rtol=1e-14, atol=1e-16)


def _group_with_split(n_succ: int, n_fail: int, seed: int = 0):
    """Mid group with the requested success/failure split, all trajectories distinct."""
    inst = make_instance(seed, 5, kind="mid")  # chain length 3: many demo styles
    q = inst.query
    teachers = make_teacher_ensemble(TASK, 6, seed=1)
    rng = substream(seed, "split")
    succ: dict = {q.ground_truth.tokens: q.ground_truth}
    while len(succ) < n_succ:
        demo = teacher_sample(teachers[int(rng.integers(6))], q, rng)
        succ.setdefault(demo.tokens, demo)
    fails: dict = {}
    while len(fails) < n_fail:
        t = rollout_group(inst.params, q, 2, rng, xi=1e-4, stop_token=TASK.stop,
                          t_max=14).trajectories[0]
        if reward(q, t) == 0:
            fails.setdefault(t.tokens, t)
    trajs = tuple(list(succ.values())[:n_succ] + list(fails.values())[:n_fail])
    rewards = tuple(reward(q, t) for t in trajs)
    group = GroupRollout(query=q, trajectories=trajs, rewards=rewards,
                         advantages=standardize_advantages(rewards, 1e-4))
    return inst, group


def test_build_pairs_full_product():
    inst, group = _group_with_split(3, 5)
    pairs = build_pairs(group, 100, substream(5, "p"))
    assert len(pairs) == 15
    assert all(reward(group.query, s) == 1 and reward(group.query, f) == 0 for s, f in pairs)


def test_build_pairs_cap():
    inst, group = _group_with_split(4, 4)
    pairs = build_pairs(group, 8, substream(5, "p2"))
    assert len(pairs) == 8
    keyed = {(s.tokens, f.tokens) for s, f in pairs}
    assert len(keyed) == 8


def test_build_pairs_subset_is_uniform():
    inst, group = _group_with_split(2, 2)
    inclusion: dict = {}
    n = 100_000
    for i in range(n):
        for s, f in build_pairs(group, 2, substream(5, "u", i)):
            key = (s.tokens, f.tokens)
            inclusion[key] = inclusion.get(key, 0) + 1
    # 4 pairs, 2 kept per draw: uniform inclusion probability 1/2
    freqs = np.array(list(inclusion.values())) / n
    assert len(inclusion) == 4
    se = np.sqrt(0.5 * 0.5 / n)
    np.testing.assert_allclose(freqs, 0.5, atol=4 * se)


def test_build_pairs_rejects_degenerate_groups():
    inst = make_instance(43, 1, kind="easy")
    with pytest.raises(StateError):
        build_pairs(inst.group, 8, substream(5, "x"))


def test_gal_anchors_at_reference():
    inst = _mid_instance(index=10)
    ref = inst.params.snapshot()
    report = gal_loss_grad(inst.params, ref, inst.pairs, inst.query, CFG)
    assert report.loss == pytest.approx(np.log(2.0), abs=1e-12)
    assert report.aux["weight_min"] == pytest.approx(0.5, abs=1e-12)
    assert report.aux["weight_max"] == pytest.approx(0.5, abs=1e-12)
    assert report.aux["eta"] == pytest.approx(0.25, abs=1e-12)
    assert report.aux["pair_count"] == len(inst.pairs)


def test_gal_saturation_annealing():
    # pushing the policy hard toward the successes drives eta and the
    # gradient norm below 1e-3 monotonically
    inst = _mid_instance(index=11)
    params = inst.params.copy()
    last_eta, last_norm = 1.0, np.inf
    for boost in (0.0, 2.0, 6.0, 14.0):
        boosted = inst.params.copy()
        for s, _ in inst.pairs:
            boosted.apply_update(score(inst.params, inst.query, s), boost)
        report = gal_loss_grad(boosted, inst.ref, inst.pairs, inst.query, CFG)
        assert report.aux["eta"] <= last_eta + 1e-12
        last_eta = report.aux["eta"]
        last_norm = grad_norm(report.gradient)
    assert last_eta < 1e-3
    assert last_norm < 1e-3


def test_gal_weights_strictly_bounded():
    for i in range(30):
        inst = _mid_instance(index=i)
        report = gal_loss_grad(inst.params, inst.ref, inst.pairs, inst.query, CFG)
        assert 0.0 < report.aux["weight_min"] <= report.aux["weight_max"] < 1.0


def test_gal_eta_matches_independent_recompute():
    inst = _mid_instance(index=12)
    report = gal_loss_grad(inst.params, inst.ref, inst.pairs, inst.query, CFG)
    ws = []
    for s, f in inst.pairs:
        d = (log_prob(inst.params, inst.query, s) - log_prob(inst.ref, inst.query, s)) \
            - (log_prob(inst.params, inst.query, f) - log_prob(inst.ref, inst.query, f))
        ws.append(1.0 - expit(CFG.beta_gal * d))
    assert report.aux["eta"] == pytest.approx(np.mean(np.square(ws)), abs=1e-15)


def test_gal_input_validation():
    inst = _mid_instance(index=13)
    with pytest.raises(InputError):
        gal_loss_grad(inst.params, inst.ref, [], inst.query, CFG)
    flipped = [(f, s) for s, f in inst.pairs]
    with pytest.raises(InputError):
        gal_loss_grad(inst.params, inst.ref, flipped, inst.query, CFG)


def test_gal_gradient_finite_differences():
    for i in range(15):
        assert check_gal(39, i) < 1e-6


def test_mixed_gradient_linearity_and_bounds():
    inst = _mid_instance(index=14)
    g = grpo_policy_gradient(inst.params, inst.group)
    half = mixed_gradient(g, {}, 0.5)
    for ctx in g:
        np.testing.assert_array_equal(half[ctx], 0.5 * g[ctx])
    with pytest.raises(ConfigError):
        mixed_gradient(g, {}, 0.0)
    with pytest.raises(ConfigError):
        mixed_gradient(g, {}, 1.0)


def test_mixed_gradient_near_one_limit():
    inst = _mid_instance(index=15)
    g_grpo = grpo_policy_gradient(inst.params, inst.group)
    g_gal = gal_loss_grad(inst.params, inst.ref, inst.pairs, inst.query, CFG).gradient
    mix = mixed_gradient(g_grpo, g_gal, 0.999)
    diff = mixed_gradient(mix, grad_scaled(g_grpo, 1.0), 0.5)  # 0.5(mix) + 0.5(grpo)
    # direct norm bound: ||mix - grpo|| = 0.001 ||gal - grpo||
    delta = {ctx: mix.get(ctx, 0.0) - g_grpo.get(ctx, np.zeros(TASK.vocab_size))
             for ctx in set(mix) | set(g_grpo)}
    assert grad_norm(delta) <= 0.001 * grad_norm(g_grpo) + 0.001 * grad_norm(g_gal) + 1e-12


def test_mixed_gradient_componentwise_oracle():
    inst = _mid_instance(index=16)
    a = grpo_policy_gradient(inst.params, inst.group)
    b = gal_loss_grad(inst.params, inst.ref, inst.pairs, inst.query, CFG).gradient
    mix = mixed_gradient(a, b, 0.3)
    for ctx in set(a) | set(b):
        expected = 0.3 * a.get(ctx, np.zeros(TASK.vocab_size)) \
            + 0.7 * b.get(ctx, np.zeros(TASK.vocab_size))
        np.testing.assert_array_equal(mix[ctx], expected)


def test_dypo_step_easy_contributes_nothing():
    inst = make_instance(47, 4, kind="easy")
    report = dypo_step_loss(inst.params, inst.ref, inst.query, inst.group,
                            inst.teachers, CFG, substream(5, "e"))
    assert report.loss == 0.0
    assert report.gradient == {}
    assert report.aux["grade"] == "easy"


def test_dypo_step_hard_scales_with_gamma():
    inst = make_instance(47, 5, kind="hard")
    cfg1 = MixConfig(gamma=1.0)
    cfg2 = MixConfig(gamma=2.0)
    r1 = dypo_step_loss(inst.params, inst.ref, inst.query, inst.group,
                        inst.teachers, cfg1, substream(5, "h"))
    r2 = dypo_step_loss(inst.params, inst.ref, inst.query, inst.group,
                        inst.teachers, cfg2, substream(5, "h"))
    assert r2.loss == pytest.approx(2.0 * r1.loss, rel=1e-15)
    for ctx in r1.gradient:
        np.testing.assert_allclose(r2.gradient[ctx], 2.0 * r1.gradient[ctx], rtol=1e-15)
    assert r1.aux["grade"] == "hard"


def test_dypo_step_mid_recomposition():
    inst = _mid_instance(index=17)
    rng_tag = substream(5, "m")
    report = dypo_step_loss(inst.params, inst.ref, inst.query, inst.group,
                            inst.teachers, CFG, rng_tag)
    pairs = build_pairs(inst.group, CFG.pair_cap, substream(5, "m"))
    grpo = grpo_loss_grad(inst.params, inst.ref, inst.group, CFG)
    gal = gal_loss_grad(inst.params, inst.ref, pairs, inst.query, CFG)
    manual_loss = CFG.alpha * grpo.loss + (1 - CFG.alpha) * gal.loss
    assert report.loss == pytest.approx(manual_loss, abs=1e-12)
    manual = mixed_gradient(grpo.gradient, gal.gradient, CFG.alpha)
    assert set(report.gradient) == set(manual)
    for ctx in manual:
        np.testing.assert_allclose(report.gradient[ctx], manual[ctx], atol=1e-12)
    assert report.aux["grade"] == "mid"


def test_dypo_gradient_finite_differences():
    cfg = MixConfig(ratio_baseline="ref")
    for i in range(15):
        assert check_dypo(53, i, cfg) < 1e-6


def test_grade_of_constructed_groups():
    assert grade(make_instance(1, 0, kind="easy").group.rewards) is DifficultyGrade.EASY
    assert grade(make_instance(1, 0, kind="hard").group.rewards) is DifficultyGrade.HARD
    assert grade(make_instance(1, 0, kind="mid").group.rewards) is DifficultyGrade.MID
