"""Loss values and exact gradients for every optimization pathway.

Each objective returns a LossReport: scalar loss, sparse gradient over the
logit table, and named aux scalars. Gradients are exact for the reported
loss expression, which is what lets finite differences certify all of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, InputError, StateError
from .grading import DifficultyGrade, grade
from .policy import (
    Context,
    Gradient,
    PolicyParams,
    Trajectory,
    context_at,
    grad_accumulate,
    grad_scaled,
    kl_gradient,
    kl_to_reference,
    log_prob,
    sample_group,
    score,
    visited_contexts,
)
from .tasks import Query, TeacherOracle, reward, teacher_sample


@dataclass(frozen=True)
class MixConfig:
    """Coefficients of the unified objective and its RL constituents."""

    alpha: float = 0.5
    gamma: float = 1.0
    beta_gal: float = 1.0
    beta_kl: float = 0.01
    epsilon_clip: float = 0.2
    xi: float = 1e-4
    pair_cap: int = 64
    ratio_level: str = "trajectory"
    ratio_baseline: str = "rollout"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0,1), got {self.alpha}")
        if self.gamma <= 0:
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")
        if self.beta_gal <= 0:
            raise ConfigError(f"beta_gal must be > 0, got {self.beta_gal}")
        if self.beta_kl < 0:
            raise ConfigError(f"beta_kl must be >= 0, got {self.beta_kl}")
        if not 0.0 < self.epsilon_clip < 1.0:
            raise ConfigError(f"epsilon_clip must lie in (0,1), got {self.epsilon_clip}")
        if self.xi <= 0:
            raise ConfigError(f"xi must be > 0, got {self.xi}")
        if self.pair_cap < 1:
            raise ConfigError(f"pair_cap must be >= 1, got {self.pair_cap}")
        if self.ratio_level not in ("token", "trajectory"):
            raise ConfigError(f"ratio_level must be 'token' or 'trajectory', got {self.ratio_level!r}")
        if self.ratio_baseline not in ("rollout", "ref"):
            raise ConfigError(
                f"ratio_baseline must be 'rollout' or 'ref', got {self.ratio_baseline!r}")


@dataclass
class GroupRollout:
    """k rollouts for one query, with rewards and standardized advantages."""

    query: Query
    trajectories: tuple[Trajectory, ...]
    rewards: tuple[int, ...]
    advantages: np.ndarray | None = None

    def __post_init__(self):
        if len(self.trajectories) != len(self.rewards):
            raise InputError("trajectories and rewards must have equal length")
        if self.advantages is not None and len(self.advantages) != len(self.rewards):
            raise InputError("advantages length must match rewards")

    @property
    def k(self) -> int:
        return len(self.trajectories)


@dataclass
class LossReport:
    """Scalar loss plus exact gradient; the unit of all oracle comparisons."""

    loss: float
    gradient: Gradient
    aux: dict = field(default_factory=dict)


def standardize_advantages(rewards: Sequence[float], xi: float) -> np.ndarray:
    """Group-standardized advantages (R - mean) / (population std + xi)."""
    if len(rewards) < 2:
        raise InputError("advantage standardization needs a group of >= 2")
    if xi <= 0:
        raise InputError(f"xi must be > 0, got {xi}")
    r = np.asarray(rewards, dtype=np.float64)
    return (r - r.mean()) / (r.std() + xi)


def rollout_group(params: PolicyParams, query: Query, k: int, rng: np.random.Generator,
                  *, xi: float, stop_token: int, t_max: int) -> GroupRollout:
    """Sample k rollouts and populate rewards and standardized advantages."""
    trajs = sample_group(params, query, k, rng, stop_token=stop_token, t_max=t_max)
    rewards = tuple(reward(query, traj) for traj in trajs)
    return GroupRollout(
        query=query,
        trajectories=tuple(trajs),
        rewards=rewards,
        advantages=standardize_advantages(rewards, xi),
    )


def sft_loss_grad(params: PolicyParams, query: Query, teachers: Sequence[TeacherOracle],
                  rng: np.random.Generator) -> LossReport:
    """Negative log-likelihood of a demonstration drawn uniformly over teachers."""
    if len(teachers) == 0:
        raise ConfigError("sft_loss_grad needs at least one teacher")
    idx = int(rng.integers(len(teachers)))
    demo = teacher_sample(teachers[idx], query, rng)
    loss = -log_prob(params, query, demo)
    gradient = grad_scaled(score(params, query, demo), -1.0)
    return LossReport(loss=loss, gradient=gradient,
                      aux={"teacher_index": float(idx), "demo_len": float(len(demo))})


def _token_log_ratios(params: PolicyParams, ref: PolicyParams, query: Query,
                      traj: Trajectory) -> tuple[list[Context], np.ndarray]:
    qid = query.query_id
    ctxs = [context_at(qid, traj.tokens, t, params.history) for t in range(len(traj.tokens))]
    deltas = np.array([
        params.log_probs(ctx)[tok] - ref.log_probs(ctx)[tok]
        for ctx, tok in zip(ctxs, traj.tokens)
    ])
    return ctxs, deltas


def grpo_loss_grad(params: PolicyParams, ref: PolicyParams, group: GroupRollout,
                   cfg: MixConfig) -> LossReport:
    """Clipped surrogate loss with KL penalty, group-standardized advantages.

    Ratios follow cfg.ratio_level: per-token ratios clipped and averaged over
    trajectory tokens (default), or a single trajectory-level ratio. With the
    default cfg.ratio_baseline of "rollout" the ratio denominator is the
    policy that sampled the group, which with one update per step is the
    current policy, so every ratio is exactly 1 at evaluation; "ref" computes
    ratios against the frozen reference, making the surrogate a true function
    of the parameters (the form finite differences can certify). The KL
    penalty always anchors to the frozen reference. At clip kinks the
    unclipped branch wins, so the gradient is the exact one-sided derivative
    of the reported expression everywhere.
    """
    if group.advantages is None:
        raise StateError("group advantages are not populated")
    k = group.k
    if k < 2:
        raise InputError("grpo_loss_grad needs a group of >= 2")
    lo, hi = 1.0 - cfg.epsilon_clip, 1.0 + cfg.epsilon_clip
    surrogate = 0.0
    pg_grad: Gradient = {}
    ratio_sum = 0.0
    ratio_count = 0
    ratio_ref = params if cfg.ratio_baseline == "rollout" else ref
    for traj, adv in zip(group.trajectories, group.advantages):
        ctxs, deltas = _token_log_ratios(params, ratio_ref, group.query, traj)
        if cfg.ratio_level == "trajectory":
            rho = float(np.exp(deltas.sum()))
            unclipped = rho * adv
            clipped = min(max(rho, lo), hi) * adv
            surrogate += min(unclipped, clipped)
            ratio_sum += rho
            ratio_count += 1
            if unclipped <= clipped:
                sc = score(params, group.query, traj)
                grad_accumulate(pg_grad, sc, adv * rho)
        else:
            ratios = np.exp(deltas)
            unclipped = ratios * adv
            clipped = np.clip(ratios, lo, hi) * adv
            surrogate += float(np.minimum(unclipped, clipped).mean())
            ratio_sum += float(ratios.sum())
            ratio_count += len(ratios)
            inv_t = 1.0 / len(ratios)
            active = unclipped <= clipped
            for t, (ctx, tok) in enumerate(zip(ctxs, traj.tokens)):
                if not active[t]:
                    continue
                coef = adv * ratios[t] * inv_t
                row = pg_grad.get(ctx)
                if row is None:
                    row = np.zeros(params.vocab_size)
                    pg_grad[ctx] = row
                row -= coef * params.probs(ctx)
                row[tok] += coef
    contexts = visited_contexts(group.query.query_id, group.trajectories, params.history)
    kl_value = kl_to_reference(params, ref, contexts)
    loss = -surrogate / k + cfg.beta_kl * kl_value
    gradient = grad_scaled(pg_grad, -1.0 / k)
    if cfg.beta_kl > 0:
        grad_accumulate(gradient, kl_gradient(params, ref, contexts), cfg.beta_kl)
    return LossReport(loss=loss, gradient=gradient,
                      aux={"kl_value": kl_value, "mean_ratio": ratio_sum / ratio_count})


def grpo_policy_gradient(params: PolicyParams, group: GroupRollout) -> Gradient:
    """Unclipped advantage-weighted score estimator (1/k) sum A_i * score_i.

    This is the quantity whose variance the benches measure; it is returned
    separately from grpo_loss_grad so clipping and the KL term never leak
    into variance measurements.
    """
    if group.advantages is None:
        raise StateError("group advantages are not populated")
    grad: Gradient = {}
    inv_k = 1.0 / group.k
    for traj, adv in zip(group.trajectories, group.advantages):
        if adv == 0.0:
            continue
        grad_accumulate(grad, score(params, group.query, traj), inv_k * adv)
    if not grad:
        # all advantages zero: the estimator is exactly the zero vector
        return {}
    return grad


def build_pairs(group: GroupRollout, pair_cap: int, rng: np.random.Generator,
                ) -> list[tuple[Trajectory, Trajectory]]:
    """(success, failure) pairs from one Mid group.

    Full Cartesian product when it fits under pair_cap, otherwise a uniform
    random subset of exactly pair_cap distinct pairs.
    """
    if grade(group.rewards) is not DifficultyGrade.MID:
        raise StateError("pair construction requires a Mid-graded group")
    if pair_cap < 1:
        raise InputError(f"pair_cap must be >= 1, got {pair_cap}")
    successes = [t for t, r in zip(group.trajectories, group.rewards) if r == 1]
    failures = [t for t, r in zip(group.trajectories, group.rewards) if r == 0]
    n_pairs = len(successes) * len(failures)
    if n_pairs <= pair_cap:
        return [(s, f) for s in successes for f in failures]
    chosen = rng.choice(n_pairs, size=pair_cap, replace=False)
    n_f = len(failures)
    return [(successes[int(i) // n_f], failures[int(i) % n_f]) for i in chosen]


def gal_loss_grad(params: PolicyParams, ref: PolicyParams,
                  pairs: Sequence[tuple[Trajectory, Trajectory]], query: Query,
                  cfg: MixConfig) -> LossReport:
    """Pairwise contrastive alignment loss over (success, failure) rollouts.

    Per pair, d is the policy-vs-reference log-ratio margin between the
    successful and the failed trajectory and the loss is -log sigmoid(beta*d).
    The gradient weight 1 - sigmoid(beta*d) is strictly inside (0,1), which
    is what bounds and eventually anneals this estimator's variance.
    """
    if len(pairs) == 0:
        raise InputError("gal_loss_grad needs at least one pair")
    for win, lose in pairs:
        if reward(query, win) != 1 or reward(query, lose) != 0:
            raise InputError("each pair must be (reward-1, reward-0) in that order")
    beta = cfg.beta_gal
    score_cache: dict[tuple[int, ...], Gradient] = {}
    logr_cache: dict[tuple[int, ...], float] = {}

    def log_ratio(traj: Trajectory) -> float:
        hit = logr_cache.get(traj.tokens)
        if hit is None:
            hit = log_prob(params, query, traj) - log_prob(ref, query, traj)
            logr_cache[traj.tokens] = hit
        return hit

    def cached_score(traj: Trajectory) -> Gradient:
        hit = score_cache.get(traj.tokens)
        if hit is None:
            hit = score(params, query, traj)
            score_cache[traj.tokens] = hit
        return hit

    loss_total = 0.0
    gradient: Gradient = {}
    weights = np.empty(len(pairs))
    inv_m = 1.0 / len(pairs)
    for j, (win, lose) in enumerate(pairs):
        d = log_ratio(win) - log_ratio(lose)
        loss_total += float(np.logaddexp(0.0, -beta * d))  # -log sigmoid(beta d)
        w = float(expit(-beta * d))
        weights[j] = w
        coef = -beta * w * inv_m
        grad_accumulate(gradient, cached_score(win), coef)
        grad_accumulate(gradient, cached_score(lose), -coef)
    return LossReport(
        loss=loss_total * inv_m,
        gradient=gradient,
        aux={
            "eta": float(np.mean(weights**2)),
            "pair_count": float(len(pairs)),
            "weight_min": float(weights.min()),
            "weight_max": float(weights.max()),
        },
    )


def mixed_gradient(g_grpo: Gradient, g_gal: Gradient, alpha: float) -> Gradient:
    """Convex combination alpha * g_grpo + (1 - alpha) * g_gal."""
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0,1), got {alpha}")
    out = grad_scaled(g_grpo, alpha)
    return grad_accumulate(out, g_gal, 1.0 - alpha)


def dypo_step_loss(params: PolicyParams, ref: PolicyParams, query: Query,
                   group: GroupRollout, teachers: Sequence[TeacherOracle],
                   cfg: MixConfig, rng: np.random.Generator) -> LossReport:
    """Route one graded group to its pathway and return the dispatched report.

    Easy groups contribute exactly zero loss and gradient; Hard groups return
    gamma-scaled distillation; Mid groups return the alpha-mixture of the
    clipped surrogate and the pairwise alignment loss.
    """
    g = grade(group.rewards)
    if g is DifficultyGrade.EASY:
        return LossReport(loss=0.0, gradient={}, aux={"grade": g.value})
    if g is DifficultyGrade.HARD:
        sft = sft_loss_grad(params, query, teachers, rng)
        aux = dict(sft.aux)
        aux["grade"] = g.value
        return LossReport(loss=cfg.gamma * sft.loss,
                          gradient=grad_scaled(sft.gradient, cfg.gamma), aux=aux)
    pairs = build_pairs(group, cfg.pair_cap, rng)
    grpo = grpo_loss_grad(params, ref, group, cfg)
    gal = gal_loss_grad(params, ref, pairs, query, cfg)
    loss = cfg.alpha * grpo.loss + (1.0 - cfg.alpha) * gal.loss
    gradient = mixed_gradient(grpo.gradient, gal.gradient, cfg.alpha)
    aux = {"grade": g.value}
    aux.update(grpo.aux)
    aux.update(gal.aux)
    return LossReport(loss=loss, gradient=gradient, aux=aux)
