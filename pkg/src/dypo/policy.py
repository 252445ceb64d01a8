"""Contextual tabular softmax policy with exact log-probabilities and scores.

The policy is a logit table indexed by (query id, last-n generated tokens).
Absent contexts read as all-zero logits, i.e. a uniform distribution, so the
table only ever stores contexts that some update actually touched. Because
the softmax is tabular, every gradient used elsewhere in the package is
available in closed form and can be checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .errors import ConfigError, InputError, StateError

if TYPE_CHECKING:
    from .tasks import Query

# (query_id, history of the last n generated tokens)
Context = tuple[int, tuple[int, ...]]
# Sparse d/d(theta) vector: one dense row per touched context.
Gradient = dict[Context, np.ndarray]


@dataclass(frozen=True)
class Trajectory:
    """A generated token sequence; terminal iff it ended on the stop token."""

    tokens: tuple[int, ...]
    terminal: bool

    def __len__(self) -> int:
        return len(self.tokens)


class PolicyParams:
    """Logit table plus cached per-context distributions.

    Reads (probabilities, log-probabilities, sampling cdf) are cached per
    context; any mutation drops the cache. The table must therefore be
    treated as read-only while rollouts or loss evaluations are in flight;
    updates happen in a single-writer phase.
    """

    def __init__(self, vocab_size: int, history: int = 1,
                 table: dict[Context, np.ndarray] | None = None,
                 frozen: bool = False,
                 default_logits: Sequence[float] | None = None):
        if vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {vocab_size}")
        if history < 0:
            raise ConfigError(f"history order must be >= 0, got {history}")
        self.vocab_size = int(vocab_size)
        self.history = int(history)
        if default_logits is None:
            self.default_logits = np.zeros(self.vocab_size)
        else:
            self.default_logits = np.asarray(default_logits, dtype=np.float64).copy()
            if self.default_logits.shape != (self.vocab_size,):
                raise ConfigError("default_logits must have vocab_size entries")
            if not np.all(np.isfinite(self.default_logits)):
                raise ConfigError("default_logits entries must be finite")
        self.table: dict[Context, np.ndarray] = {}
        if table:
            for ctx, row in table.items():
                self.table[ctx] = np.asarray(row, dtype=np.float64).copy()
        self.frozen = frozen
        self._cache: dict[Context, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        self._default_dist: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    def logits(self, ctx: Context) -> np.ndarray:
        row = self.table.get(ctx)
        if row is None:
            return self.default_logits
        return row

    @staticmethod
    def _softmax_triplet(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        # max-shift keeps exp() in range for large logits
        shifted = x - x.max()
        expx = np.exp(shifted)
        total = expx.sum()
        probs = expx / total
        logp = shifted - np.log(total)
        return probs, logp, np.cumsum(probs)

    def _dist(self, ctx: Context) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        row = self.table.get(ctx)
        if row is None:
            # unmaterialized contexts all share the default distribution
            if self._default_dist is None:
                self._default_dist = self._softmax_triplet(self.default_logits)
            return self._default_dist
        hit = self._cache.get(ctx)
        if hit is not None:
            return hit
        entry = self._softmax_triplet(row)
        self._cache[ctx] = entry
        return entry

    def probs(self, ctx: Context) -> np.ndarray:
        return self._dist(ctx)[0]

    def log_probs(self, ctx: Context) -> np.ndarray:
        return self._dist(ctx)[1]

    def sampling_cdf(self, ctx: Context) -> np.ndarray:
        return self._dist(ctx)[2]

    def set_logits(self, ctx: Context, values: Sequence[float]) -> None:
        if self.frozen:
            raise StateError("cannot mutate a frozen policy snapshot")
        row = np.asarray(values, dtype=np.float64)
        if row.shape != (self.vocab_size,):
            raise InputError(f"logit row must have shape ({self.vocab_size},), got {row.shape}")
        if not np.all(np.isfinite(row)):
            raise InputError("logit entries must be finite")
        self.table[ctx] = row.copy()
        self._cache.pop(ctx, None)

    def apply_update(self, grad: Gradient, scale: float) -> None:
        """theta[ctx] += scale * grad[ctx] for every context in grad."""
        if self.frozen:
            raise StateError("cannot mutate a frozen policy snapshot")
        for ctx, vec in grad.items():
            row = self.table.get(ctx)
            if row is None:
                row = self.default_logits.copy()
                self.table[ctx] = row
            row += scale * vec
            self._cache.pop(ctx, None)

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.vocab_size, self.history, self.table, frozen=False,
                            default_logits=self.default_logits)

    def snapshot(self) -> "PolicyParams":
        """Frozen copy; log-probs under it are bit-identical across calls."""
        snap = self.copy()
        snap.frozen = True
        return snap


# A reference policy is just a frozen parameter snapshot.
ReferencePolicy = PolicyParams


def context_at(query_id: int, tokens: Sequence[int], t: int, history: int) -> Context:
    lo = max(0, t - history)
    return (query_id, tuple(tokens[lo:t]))


def step_contexts(query_id: int, tokens: Sequence[int], history: int) -> list[Context]:
    """Conditioning context for every generation step of a token sequence."""
    return [context_at(query_id, tokens, t, history) for t in range(len(tokens))]


def visited_contexts(query_id: int, trajectories: Iterable[Trajectory],
                     history: int) -> list[Context]:
    """Unique step contexts of a trajectory collection, in first-visit order."""
    seen: dict[Context, None] = {}
    for traj in trajectories:
        for ctx in step_contexts(query_id, traj.tokens, history):
            seen.setdefault(ctx)
    return list(seen)


def _check_tokens(params: PolicyParams, traj: Trajectory) -> None:
    if len(traj.tokens) == 0:
        raise InputError("trajectory must be nonempty")
    for tok in traj.tokens:
        if not 0 <= tok < params.vocab_size:
            raise InputError(f"token {tok} out of range [0, {params.vocab_size})")


def log_prob(params: PolicyParams, query: "Query", traj: Trajectory) -> float:
    """Autoregressive log-probability of ``traj`` given the query, in nats."""
    _check_tokens(params, traj)
    qid = query.query_id
    total = 0.0
    for t, tok in enumerate(traj.tokens):
        ctx = context_at(qid, traj.tokens, t, params.history)
        total += params.log_probs(ctx)[tok]
    return total


def score(params: PolicyParams, query: "Query", traj: Trajectory) -> Gradient:
    """Exact gradient of log_prob w.r.t. the logit table.

    Per visited context the softmax score is 1{a = a_t} - pi(a | ctx),
    accumulated over the steps that hit that context.
    """
    _check_tokens(params, traj)
    qid = query.query_id
    grad: Gradient = {}
    for t, tok in enumerate(traj.tokens):
        ctx = context_at(qid, traj.tokens, t, params.history)
        row = grad.get(ctx)
        if row is None:
            row = -params.probs(ctx).copy()
            grad[ctx] = row
        else:
            row -= params.probs(ctx)
        row[tok] += 1.0
    return grad


def sample_trajectory(params: PolicyParams, query: "Query", rng: np.random.Generator,
                      *, stop_token: int, t_max: int) -> Trajectory:
    """One autoregressive sample; stops on ``stop_token`` or after t_max tokens."""
    qid = query.query_id
    tokens: list[int] = []
    last = params.vocab_size - 1
    for t in range(t_max):
        ctx = context_at(qid, tokens, t, params.history)
        cdf = params.sampling_cdf(ctx)
        tok = int(np.searchsorted(cdf, rng.random(), side="right"))
        if tok > last:
            tok = last
        tokens.append(tok)
        if tok == stop_token:
            return Trajectory(tuple(tokens), terminal=True)
    return Trajectory(tuple(tokens), terminal=False)


def sample_group(params: PolicyParams, query: "Query", k: int, rng: np.random.Generator,
                 *, stop_token: int, t_max: int) -> list[Trajectory]:
    """k independent rollouts for one query; pure in (params, query, k, seed)."""
    if k < 2:
        raise ConfigError(f"group size must be >= 2, got {k}")
    if not 0 <= stop_token < params.vocab_size:
        raise ConfigError(f"stop token {stop_token} outside vocabulary")
    if t_max < 1:
        raise ConfigError(f"t_max must be >= 1, got {t_max}")
    return [sample_trajectory(params, query, rng, stop_token=stop_token, t_max=t_max)
            for _ in range(k)]


def mean_step_entropy(params: PolicyParams, contexts: Iterable[Context]) -> float:
    """Mean categorical entropy (nats) over the unique given contexts."""
    seen: dict[Context, None] = {}
    for ctx in contexts:
        seen.setdefault(ctx)
    if not seen:
        raise InputError("mean_step_entropy needs at least one visited context")
    total = 0.0
    for ctx in seen:
        probs, logp, _ = params._dist(ctx)
        total -= float(np.dot(probs, logp))
    return total / len(seen)


def kl_to_reference(params: PolicyParams, ref: PolicyParams,
                    contexts: Iterable[Context]) -> float:
    """Mean exact KL(pi_theta || pi_ref) over the unique given contexts."""
    if (params.vocab_size, params.history) != (ref.vocab_size, ref.history):
        raise ConfigError("policy and reference differ in vocabulary or history order")
    seen: dict[Context, None] = {}
    for ctx in contexts:
        seen.setdefault(ctx)
    if not seen:
        raise InputError("kl_to_reference needs at least one visited context")
    total = 0.0
    for ctx in seen:
        probs, logp, _ = params._dist(ctx)
        total += float(np.dot(probs, logp - ref.log_probs(ctx)))
    return total / len(seen)


def kl_gradient(params: PolicyParams, ref: PolicyParams,
                contexts: Sequence[Context]) -> Gradient:
    """Exact gradient of kl_to_reference over the same unique-context mean."""
    seen: dict[Context, None] = {}
    for ctx in contexts:
        seen.setdefault(ctx)
    grad: Gradient = {}
    inv = 1.0 / len(seen)
    for ctx in seen:
        probs, logp, _ = params._dist(ctx)
        diff = logp - ref.log_probs(ctx)
        kl = float(np.dot(probs, diff))
        grad[ctx] = inv * probs * (diff - kl)
    return grad


# --- sparse-gradient arithmetic -------------------------------------------

def grad_accumulate(into: Gradient, grad: Gradient, scale: float = 1.0) -> Gradient:
    """into += scale * grad, in place; returns into."""
    for ctx, vec in grad.items():
        row = into.get(ctx)
        if row is None:
            into[ctx] = scale * vec.copy() if scale != 1.0 else vec.copy()
        else:
            row += scale * vec
    return into


def grad_scaled(grad: Gradient, scale: float) -> Gradient:
    return {ctx: scale * vec for ctx, vec in grad.items()}


def grad_dot(a: Gradient, b: Gradient) -> float:
    if len(b) < len(a):
        a, b = b, a
    total = 0.0
    for ctx, vec in a.items():
        other = b.get(ctx)
        if other is not None:
            total += float(np.dot(vec, other))
    return total


def grad_sq_norm(grad: Gradient) -> float:
    return sum(float(np.dot(vec, vec)) for vec in grad.values())


def grad_norm(grad: Gradient) -> float:
    return float(np.sqrt(grad_sq_norm(grad)))


def grad_is_finite(grad: Gradient) -> bool:
    return all(np.all(np.isfinite(vec)) for vec in grad.values())
