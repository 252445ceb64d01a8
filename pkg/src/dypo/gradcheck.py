"""Central finite-difference certification of every analytic gradient.

The checker perturbs each logit entry of the contexts a loss can touch,
re-evaluates the loss, and compares the resulting numeric gradient against
the analytic one. It only ever calls loss evaluation, never the gradient
code under test.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .objectives import (
    GroupRollout,
    MixConfig,
    dypo_step_loss,
    gal_loss_grad,
    grpo_loss_grad,
    sft_loss_grad,
    standardize_advantages,
)
from .policy import Context, Gradient, PolicyParams, Trajectory, sample_trajectory
from .seeding import substream
from .tasks import Query, TaskConfig, generate_query, make_teacher_ensemble, reward, teacher_sample


def numerical_gradient(f: Callable[[PolicyParams], float], params: PolicyParams,
                       contexts: Sequence[Context], eps: float = 1e-5) -> Gradient:
    """Central differences of f over every (context, token) logit entry."""
    grad: Gradient = {}
    for ctx in contexts:
        base = params.logits(ctx).copy()
        row = np.zeros(params.vocab_size)
        for tok in range(params.vocab_size):
            for sign in (1.0, -1.0):
                probe = params.copy()
                bumped = base.copy()
                bumped[tok] += sign * eps
                probe.set_logits(ctx, bumped)
                row[tok] += sign * f(probe)
        grad[ctx] = row / (2.0 * eps)
    return grad


def gradient_error(analytic: Gradient, numeric: Gradient) -> float:
    """Max absolute entry difference, relative to max(1, largest entry)."""
    contexts = set(analytic) | set(numeric)
    worst = 0.0
    scale = 1.0
    for ctx in contexts:
        a = analytic.get(ctx)
        n = numeric.get(ctx)
        if a is None:
            a = np.zeros_like(n)
        if n is None:
            n = np.zeros_like(a)
        worst = max(worst, float(np.max(np.abs(a - n))))
        scale = max(scale, float(np.max(np.abs(a))))
    return worst / scale


def _randomized_params(task: TaskConfig, query: Query, history: int,
                       rng: np.random.Generator, scale: float) -> PolicyParams:
    params = PolicyParams(task.vocab_size, history)
    contexts = [(query.query_id, ())]
    if history >= 1:
        contexts += [(query.query_id, (a,)) for a in range(task.vocab_size)]
    for ctx in contexts:
        params.set_logits(ctx, rng.normal(0.0, scale, task.vocab_size))
    return params


def _sample_failures(params: PolicyParams, query: Query, rng: np.random.Generator,
                     count: int, *, stop: int, t_max: int) -> list[Trajectory]:
    failures: list[Trajectory] = []
    for _ in range(200):
        traj = sample_trajectory(params, query, rng, stop_token=stop, t_max=t_max)
        if reward(query, traj) == 0:
            failures.append(traj)
            if len(failures) == count:
                break
    return failures


@dataclass
class GradCheckInstance:
    params: PolicyParams
    ref: PolicyParams
    query: Query
    group: GroupRollout
    pairs: list[tuple[Trajectory, Trajectory]]
    teachers: list
    contexts: list[Context]


def make_instance(seed: int, index: int, kind: str = "mid",
                  task: TaskConfig | None = None, t_max: int = 14) -> GradCheckInstance:
    """One random (params, ref, query, group) tuple for gradient checking.

    ``kind`` picks the group's reward pattern: mixed successes and failures,
    all failures, or all successes. The reference policy sits close to the
    params so token ratios stay strictly off the clip boundary.
    """
    rng = substream(seed, "gradcheck", index)
    task = task or TaskConfig()
    chain_len = 1 + index % 3
    query = generate_query(task, chain_len, rng, query_id=index)
    params = _randomized_params(task, query, 1, rng, scale=1.0)
    ref = params.copy()
    ref.apply_update({ctx: rng.normal(0.0, 0.02, task.vocab_size) for ctx in params.table},
                     1.0)
    ref = ref.snapshot()
    teachers = make_teacher_ensemble(task, 1 + index % 3, seed)
    successes = [query.ground_truth, teacher_sample(teachers[0], query, rng)]
    failures = _sample_failures(params, query, rng, 3, stop=task.stop, t_max=t_max)
    if kind == "easy" or not failures:
        trajs = successes
    elif kind == "hard":
        trajs = failures[:2] if len(failures) >= 2 else failures * 2
    else:
        trajs = successes + failures
    rewards = tuple(reward(query, t) for t in trajs)
    group = GroupRollout(query=query, trajectories=tuple(trajs), rewards=rewards,
                         advantages=standardize_advantages(rewards, 1e-4))
    pairs = [(s, f) for s in successes for f in failures][:3]
    contexts = [(query.query_id, ())] + [(query.query_id, (a,)) for a in range(task.vocab_size)]
    return GradCheckInstance(params=params, ref=ref, query=query, group=group,
                             pairs=pairs, teachers=teachers, contexts=contexts)


def _off_clip(inst: GradCheckInstance, cfg: MixConfig, margin: float) -> bool:
    lo = np.log1p(-cfg.epsilon_clip) + margin
    hi = np.log1p(cfg.epsilon_clip) - margin
    for traj in inst.group.trajectories:
        tokens = traj.tokens
        for t, tok in enumerate(tokens):
            ctx = (inst.query.query_id, tuple(tokens[max(0, t - 1):t]))
            delta = inst.params.log_probs(ctx)[tok] - inst.ref.log_probs(ctx)[tok]
            if not lo < delta < hi:
                return False
    return True


def check_sft(seed: int, index: int, eps: float = 1e-5) -> float:
    inst = make_instance(seed, index)
    draw = lambda: substream(seed, "gradcheck-sft", index)
    report = sft_loss_grad(inst.params, inst.query, inst.teachers, draw())
    numeric = numerical_gradient(
        lambda p: sft_loss_grad(p, inst.query, inst.teachers, draw()).loss,
        inst.params, inst.contexts, eps)
    return gradient_error(report.gradient, numeric)


def check_grpo(seed: int, index: int, cfg: MixConfig | None = None,
               eps: float = 1e-5) -> float:
    # the "ref" ratio baseline makes the surrogate a true function of the
    # parameters; the "rollout" baseline detaches the denominator by design
    cfg = cfg or MixConfig(ratio_baseline="ref")
    # resample until every token ratio is strictly off the clip kink
    for attempt in range(50):
        inst = make_instance(seed, index + 10_000 * attempt)
        if _off_clip(inst, cfg, margin=10 * eps):
            break
    report = grpo_loss_grad(inst.params, inst.ref, inst.group, cfg)
    numeric = numerical_gradient(
        lambda p: grpo_loss_grad(p, inst.ref, inst.group, cfg).loss,
        inst.params, inst.contexts, eps)
    return gradient_error(report.gradient, numeric)


def check_gal(seed: int, index: int, cfg: MixConfig | None = None,
              eps: float = 1e-5) -> float:
    cfg = cfg or MixConfig()
    inst = make_instance(seed, index)
    report = gal_loss_grad(inst.params, inst.ref, inst.pairs, inst.query, cfg)
    numeric = numerical_gradient(
        lambda p: gal_loss_grad(p, inst.ref, inst.pairs, inst.query, cfg).loss,
        inst.params, inst.contexts, eps)
    return gradient_error(report.gradient, numeric)


def check_dypo(seed: int, index: int, cfg: MixConfig | None = None,
               eps: float = 1e-5) -> float:
    cfg = cfg or MixConfig(ratio_baseline="ref")
    kind = ("mid", "hard", "easy")[index % 3]
    for attempt in range(50):
        inst = make_instance(seed, index + 10_000 * attempt, kind=kind)
        if kind != "mid" or _off_clip(inst, cfg, margin=10 * eps):
            break
    draw = lambda: substream(seed, "gradcheck-dypo", index)
    report = dypo_step_loss(inst.params, inst.ref, inst.query, inst.group,
                            inst.teachers, cfg, draw())
    numeric = numerical_gradient(
        lambda p: dypo_step_loss(p, inst.ref, inst.query, inst.group,
                                 inst.teachers, cfg, draw()).loss,
        inst.params, inst.contexts, eps)
    return gradient_error(report.gradient, numeric)


CHECKS = {
    "sft_loss_grad": check_sft,
    "grpo_loss_grad": check_grpo,
    "gal_loss_grad": check_gal,
    "dypo_step_loss": check_dypo,
}


def grad_check_suite(seed: int = 0, n_instances: int = 100) -> dict[str, float]:
    """Max relative finite-difference error per loss over random instances."""
    return {
        name: max(fn(seed, i) for i in range(n_instances))
        for name, fn in CHECKS.items()
    }
