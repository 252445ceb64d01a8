"""End-to-end training loop: rollout, grade, dispatch, update, record.

One step samples a batch of queries from a fixed pool, rolls out k
trajectories per query, grades each group, dispatches per-query losses by
variant, averages gradients over dispatched queries, and applies a single
plain gradient-descent update. All randomness is derived from named
substreams of (seed, step, query-index), so a run is replayable from any
checkpoint and a concurrent reduction can only differ by float reassociation.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, TrainingAborted
from .grading import DifficultyGrade, grade
from .instrumentation import StepMetrics, write_metrics
from .objectives import (
    GroupRollout,
    LossReport,
    MixConfig,
    dypo_step_loss,
    grpo_loss_grad,
    rollout_group,
    sft_loss_grad,
)
from .policy import (
    Gradient,
    PolicyParams,
    grad_accumulate,
    grad_is_finite,
    grad_norm,
    grad_scaled,
    mean_step_entropy,
    visited_contexts,
)
from .seeding import substream
from .tasks import (
    BiasTestbedConfig,
    Query,
    TaskConfig,
    generate_query,
    make_teacher_ensemble,
    max_demo_len,
)

VARIANTS = ("dypo", "sft_only", "grpo_only")


def default_testbed() -> BiasTestbedConfig:
    return BiasTestbedConfig(dim=8, b_sys=(0.5,) + (0.0,) * 7, sigma_bias=1.0)


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    steps: int = 500
    batch_size: int = 2
    k: int = 8
    learning_rate: float = 0.5
    m_teachers: int = 2
    ref_refresh_period: int = 0
    t_max: int = 16
    history: int = 1
    init_syntax_logit: float = 2.0
    variant: str = "dypo"
    execution: str = "sequential"
    mix: MixConfig = field(default_factory=MixConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    testbed: BiasTestbedConfig = field(default_factory=default_testbed)

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.k < 2:
            raise ConfigError("k must be >= 2")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.m_teachers < 1:
            raise ConfigError("m_teachers must be >= 1")
        if self.ref_refresh_period < 0:
            raise ConfigError("ref_refresh_period must be >= 0")
        if self.history < 0:
            raise ConfigError("history must be >= 0")
        if self.init_syntax_logit < 0:
            raise ConfigError("init_syntax_logit must be >= 0")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.execution not in ("sequential", "threads"):
            raise ConfigError(f"execution must be 'sequential' or 'threads', got {self.execution!r}")
        if self.t_max < self.task.max_chain_len + 2:
            raise ConfigError("t_max too small for the longest ground truth")
        if self.t_max < max_demo_len(self.task, self.m_teachers):
            raise ConfigError("t_max too small for the longest teacher demonstration")


# --- strict JSON config schema ---------------------------------------------

_MIX_KEYS = ("alpha", "gamma", "beta_gal", "beta_kl", "epsilon_clip", "xi",
             "pair_cap", "ratio_level", "ratio_baseline")
_TASK_KEYS = ("family", "modulus", "min_chain_len", "max_chain_len", "pool_size")
_TESTBED_KEYS = ("dim", "b_sys", "sigma_bias", "tau_star")
_TOP_KEYS = ("seed", "steps", "batch_size", "k", "learning_rate", "m_teachers",
             "ref_refresh_period", "t_max", "history", "init_syntax_logit",
             "variant", "execution", "mix", "task", "testbed")


def _pick(data: dict, allowed: Sequence[str], prefix: str) -> dict:
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config field: {prefix}{unknown[0]}")
    return dict(data)


def train_config_from_dict(data: dict) -> TrainConfig:
    """Build a TrainConfig from a JSON document, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError("config document must be a JSON object")
    top = _pick(data, _TOP_KEYS, "")
    if "mix" in top:
        top["mix"] = MixConfig(**_pick(top["mix"], _MIX_KEYS, "mix."))
    if "task" in top:
        top["task"] = TaskConfig(**_pick(top["task"], _TASK_KEYS, "task."))
    if "testbed" in top:
        raw = _pick(top["testbed"], _TESTBED_KEYS, "testbed.")
        raw["b_sys"] = tuple(raw.get("b_sys", ()))
        raw["tau_star"] = tuple(raw.get("tau_star", ()))
        top["testbed"] = BiasTestbedConfig(**raw)
    return TrainConfig(**top)


def train_config_to_dict(cfg: TrainConfig) -> dict:
    out = {key: getattr(cfg, key) for key in _TOP_KEYS
           if key not in ("mix", "task", "testbed")}
    out["mix"] = {key: getattr(cfg.mix, key) for key in _MIX_KEYS}
    out["task"] = {key: getattr(cfg.task, key) for key in _TASK_KEYS}
    out["testbed"] = {"dim": cfg.testbed.dim, "b_sys": list(cfg.testbed.b_sys),
                      "sigma_bias": cfg.testbed.sigma_bias,
                      "tau_star": list(cfg.testbed.tau_star)}
    return out


def load_train_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return train_config_from_dict(data)


class QueryPool:
    """Fixed pool of queries with chain lengths cycling over the configured range.

    Recurring queries are what let the tabular policy learn across steps; the
    length mix keeps all three difficulty regimes reachable.
    """

    def __init__(self, task: TaskConfig, seed: int):
        self.task = task
        lengths = list(range(task.min_chain_len, task.max_chain_len + 1))
        self.queries = [
            generate_query(task, lengths[i % len(lengths)], substream(seed, "pool", i),
                           query_id=i)
            for i in range(task.pool_size)
        ]

    def __len__(self) -> int:
        return len(self.queries)

    def draw(self, rng: np.random.Generator) -> Query:
        return self.queries[int(rng.integers(len(self.queries)))]


def init_policy(config: TrainConfig, pool: QueryPool) -> PolicyParams:
    """Starting policy: uniform logits plus a syntax prior of configurable strength.

    The prior plays the role of a pretrained base model: it favors emitting a
    separator, an answer-position residue after it, and a stop after a
    residue, without encoding any answer. Strength 0 gives the uniform
    policy. With history order 1 the prior is written per last-token context;
    higher orders only receive the shared separator bias.
    """
    task = config.task
    b = config.init_syntax_logit
    base = np.zeros(task.vocab_size)
    base[task.separator] += 0.5 * b
    params = PolicyParams(task.vocab_size, config.history, default_logits=base)
    if b > 0 and config.history == 1:
        after_sep = base.copy()
        after_sep[:task.modulus] += b
        after_residue = base.copy()
        after_residue[task.stop] += b
        for query in pool.queries:
            params.set_logits((query.query_id, (task.separator,)), after_sep)
            for r in range(task.modulus):
                params.set_logits((query.query_id, (r,)), after_residue)
    return params


@dataclass
class Checkpoint:
    step: int
    params: PolicyParams
    ref: PolicyParams
    rng_state: dict
    metrics: list[StepMetrics]
    config: TrainConfig


@dataclass
class RunStats:
    """Run-level aggregates that do not fit the per-step CSV schema."""

    gal_weight_min: float = math.inf
    gal_weight_max: float = -math.inf
    dispatched_queries: int = 0


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[StepMetrics]
    snapshots: dict[int, tuple[PolicyParams, PolicyParams]]
    stats: RunStats


def _params_to_dict(params: PolicyParams) -> dict:
    return {
        "vocab_size": params.vocab_size,
        "history": params.history,
        "default_logits": [float(x) for x in params.default_logits],
        "table": [[ctx[0], list(ctx[1]), [float(x) for x in row]]
                  for ctx, row in params.table.items()],
    }


def _params_from_dict(data: dict, frozen: bool = False) -> PolicyParams:
    params = PolicyParams(int(data["vocab_size"]), int(data["history"]),
                          default_logits=data.get("default_logits"))
    for qid, hist, row in data["table"]:
        params.table[(int(qid), tuple(int(h) for h in hist))] = np.asarray(row, dtype=np.float64)
    params.frozen = frozen
    return params


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    doc = {
        "step": ckpt.step,
        "params": _params_to_dict(ckpt.params),
        "ref": _params_to_dict(ckpt.ref),
        "rng_state": ckpt.rng_state,
        "metrics": [vars(m) for m in ckpt.metrics],
        "config": train_config_to_dict(ckpt.config),
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_checkpoint(path: str | Path) -> Checkpoint:
    doc = json.loads(Path(path).read_text())
    return Checkpoint(
        step=int(doc["step"]),
        params=_params_from_dict(doc["params"]),
        ref=_params_from_dict(doc["ref"], frozen=True),
        rng_state=doc["rng_state"],
        metrics=[StepMetrics(**row) for row in doc["metrics"]],
        config=train_config_from_dict(doc["config"]),
    )


def _query_report(config: TrainConfig, params: PolicyParams, ref: PolicyParams,
                  pool: QueryPool, teachers, step: int, j: int,
                  query_index: int) -> tuple[int, GroupRollout, LossReport]:
    query = pool.queries[query_index]
    roll_rng = substream(config.seed, "rollout", step, j)
    obj_rng = substream(config.seed, "objective", step, j)
    group = rollout_group(params, query, config.k, roll_rng, xi=config.mix.xi,
                          stop_token=config.task.stop, t_max=config.t_max)
    if config.variant == "dypo":
        report = dypo_step_loss(params, ref, query, group, teachers, config.mix, obj_rng)
    elif config.variant == "sft_only":
        sft = sft_loss_grad(params, query, teachers, obj_rng)
        report = LossReport(loss=config.mix.gamma * sft.loss,
                            gradient=grad_scaled(sft.gradient, config.mix.gamma),
                            aux=dict(sft.aux, grade=grade(group.rewards).value))
    else:  # grpo_only
        report = grpo_loss_grad(params, ref, group, config.mix)
        report.aux["grade"] = grade(group.rewards).value
    return j, group, report


def train(config: TrainConfig, out_dir: str | Path | None = None,
          snapshot_steps: Sequence[int] = (),
          resume_from: Checkpoint | None = None) -> TrainResult:
    """Run the configured number of steps and return the final checkpoint.

    Deterministic under (config, sequential execution); resuming from a
    checkpoint continues the identical trajectory because every step draws
    from substreams named by the step index alone.
    """
    pool = QueryPool(config.task, config.seed)
    teachers = make_teacher_ensemble(config.task, config.m_teachers, config.seed)
    if resume_from is not None:
        params = resume_from.params.copy()
        ref = resume_from.ref.snapshot()
        metrics = list(resume_from.metrics)
        start = resume_from.step
    else:
        params = init_policy(config, pool)
        ref = params.snapshot()
        metrics = []
        start = 0
    snapshots: dict[int, tuple[PolicyParams, PolicyParams]] = {}
    stats = RunStats()
    wanted = set(snapshot_steps)
    if start in wanted:
        snapshots[start] = (params.snapshot(), ref.snapshot())

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    for step in range(start, config.steps):
        index_rng = substream(config.seed, "stream", step)
        indices = [int(i) for i in index_rng.integers(len(pool), size=config.batch_size)]
        jobs = list(enumerate(indices))
        results: list[tuple[int, GroupRollout, LossReport]] = []
        if config.execution == "threads" and config.batch_size > 1:
            with ThreadPoolExecutor(max_workers=min(8, config.batch_size)) as pool_exec:
                futures = [
                    pool_exec.submit(_query_report, config, params, ref, pool, teachers,
                                     step, j, qi)
                    for j, qi in jobs
                ]
                for fut in as_completed(futures):
                    results.append(fut.result())
        else:
            for j, qi in jobs:
                results.append(_query_report(config, params, ref, pool, teachers, step, j, qi))

        counts = {g: 0 for g in DifficultyGrade}
        reward_total = 0
        reward_n = 0
        entropy_ctxs: dict = {}
        total_grad: Gradient = {}
        dispatched = 0
        loss_sum = 0.0
        etas: list[float] = []
        kls: list[float] = []
        for _, group, report in results:
            g = grade(group.rewards)
            counts[g] += 1
            reward_total += sum(group.rewards)
            reward_n += group.k
            for ctx in visited_contexts(group.query.query_id, group.trajectories,
                                        config.history):
                entropy_ctxs.setdefault(ctx)
            include = (config.variant != "dypo") or (g is not DifficultyGrade.EASY)
            if include:
                dispatched += 1
                loss_sum += report.loss
                grad_accumulate(total_grad, report.gradient)
            if "eta" in report.aux:
                etas.append(report.aux["eta"])
                stats.gal_weight_min = min(stats.gal_weight_min, report.aux["weight_min"])
                stats.gal_weight_max = max(stats.gal_weight_max, report.aux["weight_max"])
            if "kl_value" in report.aux:
                kls.append(report.aux["kl_value"])

        mean_grad = grad_scaled(total_grad, 1.0 / dispatched) if dispatched else {}
        stats.dispatched_queries += dispatched
        if not (math.isfinite(loss_sum) and grad_is_finite(mean_grad)):
            ckpt = _make_checkpoint(step, params, ref, metrics, config)
            if out_path is not None:
                save_checkpoint(out_path / "abort_checkpoint.json", ckpt)
            raise TrainingAborted(f"non-finite loss or gradient at step {step}")

        row = StepMetrics(
            step=step,
            mean_reward=reward_total / reward_n,
            offline_ratio=counts[DifficultyGrade.HARD] / config.batch_size,
            mean_entropy=mean_step_entropy(params, entropy_ctxs),
            grad_norm=grad_norm(mean_grad),
            easy=counts[DifficultyGrade.EASY],
            hard=counts[DifficultyGrade.HARD],
            mid=counts[DifficultyGrade.MID],
            eta=float(np.mean(etas)) if etas else 0.0,
            kl=float(np.mean(kls)) if kls else 0.0,
        )
        metrics.append(row)

        params.apply_update(mean_grad, -config.learning_rate)
        if config.ref_refresh_period and (step + 1) % config.ref_refresh_period == 0:
            ref = params.snapshot()
        if (step + 1) in wanted:
            snapshots[step + 1] = (params.snapshot(), ref.snapshot())

    ckpt = _make_checkpoint(config.steps, params, ref, metrics, config)
    if out_path is not None:
        write_metrics(out_path / "metrics.csv", metrics)
        save_checkpoint(out_path / "checkpoint.json", ckpt)
    return TrainResult(checkpoint=ckpt, metrics=metrics, snapshots=snapshots, stats=stats)


def _make_checkpoint(step: int, params: PolicyParams, ref: PolicyParams,
                     metrics: list[StepMetrics], config: TrainConfig) -> Checkpoint:
    return Checkpoint(
        step=step,
        params=params.copy(),
        ref=ref.snapshot(),
        rng_state={"scheme": "named-substreams-v1", "seed": config.seed, "next_step": step},
        metrics=list(metrics),
        config=config,
    )


@dataclass
class EvalReport:
    pass_rate: float
    grade_counts: dict
    mean_entropy: float


def evaluate(params: PolicyParams, pool: QueryPool, n_queries: int, k: int,
             rng: np.random.Generator, *, xi: float = 1e-4,
             t_max: int = 16) -> EvalReport:
    """Roll out without updating; pass rate counts queries with any success."""
    if n_queries < 1:
        raise ConfigError("evaluate needs n_queries >= 1")
    passes = 0
    counts = {g.value: 0 for g in DifficultyGrade}
    entropy_ctxs: dict = {}
    for _ in range(n_queries):
        query = pool.draw(rng)
        group = rollout_group(params, query, k, rng, xi=xi,
                              stop_token=pool.task.stop, t_max=t_max)
        counts[grade(group.rewards).value] += 1
        passes += int(any(group.rewards))
        for ctx in visited_contexts(query.query_id, group.trajectories, params.history):
            entropy_ctxs.setdefault(ctx)
    return EvalReport(
        pass_rate=passes / n_queries,
        grade_counts=counts,
        mean_entropy=mean_step_entropy(params, entropy_ctxs),
    )


def run_comparison(config: TrainConfig, out_dir: str | Path | None = None,
                   variants: Sequence[str] = VARIANTS) -> dict[str, TrainResult]:
    """Train each variant on the identical seeded query stream.

    The query pool, per-step query indices, and all substream seeds are
    shared, so per-step metrics align across variants.
    """
    results: dict[str, TrainResult] = {}
    out_path = Path(out_dir) if out_dir is not None else None
    for variant in variants:
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        result = train(replace(config, variant=variant))
        results[variant] = result
        if out_path is not None:
            out_path.mkdir(parents=True, exist_ok=True)
            write_metrics(out_path / f"{variant}_metrics.csv", result.metrics)
    return results
