"""Group-relative policy optimization with asymmetric clipping.

The objective over a group of G rollouts is

    (1 / sum_i |o_i|) * sum_i sum_t min(r_it * A_i,
                                        clip(r_it, 1-eps_low, 1+eps_high) * A_i)

with r_it = exp(new_logprob - old_logprob) and A_i the group-normalized
reward, constant across the tokens of rollout i. There is deliberately no
KL term anywhere in this module: no reference-policy input exists.

``grpo_gradient`` is the exact analytic ascent gradient with respect to a
tabular softmax policy's logits. Tokens whose ratio is clipped on the side
the min selects contribute zero gradient through the ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .policy import TabularPolicy
from .types import GroupRollout


@dataclass(frozen=True)
class ClipBounds:
    eps_low: float = 0.2
    eps_high: float = 0.28

    def __post_init__(self) -> None:
        if not (0 < self.eps_low <= self.eps_high < 1):
            raise ValueError("clip bounds must satisfy 0 < eps_low <= eps_high < 1")

    def to_dict(self) -> dict:
        return {"eps_low": self.eps_low, "eps_high": self.eps_high}

    @classmethod
    def from_dict(cls, d: dict) -> "ClipBounds":
        return cls(eps_low=float(d.get("eps_low", 0.2)), eps_high=float(d.get("eps_high", 0.28)))


@dataclass(frozen=True)
class AdvantageSpec:
    method: str = "group_normalized"
    std_floor: float = 1e-8

    def __post_init__(self) -> None:
        if self.method != "group_normalized":
            raise ValueError(f"unknown advantage method {self.method!r}")
        if not self.std_floor > 0:
            raise ValueError("std_floor must be > 0")


DEFAULT_BOUNDS = ClipBounds()
DEFAULT_ADVANTAGE = AdvantageSpec()


def group_advantages(rewards: Sequence[float], spec: AdvantageSpec = DEFAULT_ADVANTAGE) -> list[float]:
    """Group-normalized advantages (r - mean) / (population std + floor).

    Constant across all tokens of a rollout; the floor keeps G=2 groups
    with a tie from dividing by zero.
    """
    n = len(rewards)
    if n < 2:
        raise ValueError("degenerate group: need at least 2 rollouts")
    mean = sum(rewards) / n
    var = sum((r - mean) ** 2 for r in rewards) / n
    std = math.sqrt(var)
    return [(r - mean) / (std + spec.std_floor) for r in rewards]


def token_ratios(new_logprobs: Sequence[float], old_logprobs: Sequence[float]) -> list[float]:
    """Per-token probability ratios exp(new - old)."""
    if len(new_logprobs) != len(old_logprobs):
        raise ValueError("new/old logprob length mismatch")
    return [math.exp(n - o) for n, o in zip(new_logprobs, old_logprobs)]


def clipped_term(ratio: float, advantage: float, bounds: ClipBounds = DEFAULT_BOUNDS) -> float:
    """One token's contribution: min(ratio*A, clip(ratio)*A)."""
    clipped = min(max(ratio, 1.0 - bounds.eps_low), 1.0 + bounds.eps_high)
    return min(ratio * advantage, clipped * advantage)


def grpo_objective(
    group: GroupRollout,
    bounds: ClipBounds = DEFAULT_BOUNDS,
    spec: AdvantageSpec = DEFAULT_ADVANTAGE,
) -> tuple[float, list[list[float]]]:
    """Objective value plus the per-token terms for audit.

    Normalization is by the combined token count across the group, not by
    per-trajectory means.
    """
    advantages = group_advantages(group.rewards, spec)
    per_token: list[list[float]] = []
    total = 0.0
    n_tokens = 0
    for i in range(group.group_size):
        ratios = token_ratios(group.new_token_logprobs[i], group.old_token_logprobs[i])
        terms = [clipped_term(r, advantages[i], bounds) for r in ratios]
        per_token.append(terms)
        total += sum(terms)
        n_tokens += len(terms)
    if n_tokens == 0:
        raise ValueError("group rollout has no tokens")
    return total / n_tokens, per_token


def clip_fraction(group: GroupRollout, bounds: ClipBounds = DEFAULT_BOUNDS) -> float:
    """Fraction of tokens whose ratio lies outside [1-eps_low, 1+eps_high]."""
    clipped = 0
    n = 0
    for i in range(group.group_size):
        for r in token_ratios(group.new_token_logprobs[i], group.old_token_logprobs[i]):
            n += 1
            if r < 1.0 - bounds.eps_low or r > 1.0 + bounds.eps_high:
                clipped += 1
    return clipped / n if n else 0.0


def _gradient_flows(ratio: float, advantage: float, bounds: ClipBounds) -> bool:
    # The min picks the clipped (flat) branch strictly past the relevant
    # bound; on the bound itself both branches coincide and the ratio
    # branch's slope applies.
    if advantage > 0:
        return ratio <= 1.0 + bounds.eps_high
    if advantage < 0:
        return ratio >= 1.0 - bounds.eps_low
    return False


def _check_group_for_gradient(policy: TabularPolicy, group: GroupRollout) -> None:
    if group.state_ids is None:
        raise ValueError("group rollout carries no state_ids; cannot map tokens to policy states")
    g = group.group_size
    if len(group.state_ids) != g or len(group.old_token_logprobs) != g or len(group.new_token_logprobs) != g:
        raise ValueError("group arrays do not match trajectory count")
    for i in range(g):
        tokens = group.trajectories[i].tokens
        n = len(group.new_token_logprobs[i])
        if len(tokens) != n or len(group.state_ids[i]) != n or len(group.old_token_logprobs[i]) != n:
            raise ValueError(f"trajectory {i}: token/state/logprob lengths do not match")
        for t in range(n):
            s = group.state_ids[i][t]
            v = tokens[t].token_id
            if not (0 <= s < policy.n_states) or not (0 <= v < policy.vocab):
                raise ValueError(f"trajectory {i} token {t}: state/token outside policy table")


def grpo_gradient(
    policy: TabularPolicy,
    group: GroupRollout,
    bounds: ClipBounds = DEFAULT_BOUNDS,
    spec: AdvantageSpec = DEFAULT_ADVANTAGE,
) -> np.ndarray:
    """Exact ascent gradient of the objective w.r.t. the policy logits.

    The policy must reproduce the group's new-policy logprobs (they are
    recomputed here and checked); old logprobs stay fixed data.
    """
    advantages = group_advantages(group.rewards, spec)
    _check_group_for_gradient(policy, group)

    n_tokens = sum(len(row) for row in group.new_token_logprobs)
    if n_tokens == 0:
        raise ValueError("group rollout has no tokens")

    grad = np.zeros_like(policy.params)
    logprob_rows: dict[int, np.ndarray] = {}
    prob_rows: dict[int, np.ndarray] = {}
    for i in range(group.group_size):
        adv = advantages[i]
        tokens = group.trajectories[i].tokens
        for t in range(len(tokens)):
            s = group.state_ids[i][t]
            v = tokens[t].token_id
            if s not in logprob_rows:
                logprob_rows[s] = policy.log_probs_row(s)
                prob_rows[s] = np.exp(logprob_rows[s])
            new_lp = float(logprob_rows[s][v])
            stored = group.new_token_logprobs[i][t]
            if not math.isclose(new_lp, stored, rel_tol=1e-9, abs_tol=1e-6):
                raise ValueError(
                    f"trajectory {i} token {t}: policy logprob {new_lp} does not reproduce stored {stored}"
                )
            if adv == 0.0:
                continue
            ratio = math.exp(new_lp - group.old_token_logprobs[i][t])
            if not _gradient_flows(ratio, adv, bounds):
                continue
            coeff = adv * ratio / (n_tokens * policy.temperature)
            grad[s] -= coeff * prob_rows[s]
            grad[s, v] += coeff
    return grad


def objective_for_policy(
    policy: TabularPolicy,
    group: GroupRollout,
    bounds: ClipBounds = DEFAULT_BOUNDS,
    spec: AdvantageSpec = DEFAULT_ADVANTAGE,
) -> float:
    """Objective with new-policy logprobs recomputed from ``policy``.

    This is the function the finite-difference oracle perturbs.
    """
    group = regroup_for_policy(policy, group)
    value, _ = grpo_objective(group, bounds, spec)
    return value


def regroup_for_policy(policy: TabularPolicy, group: GroupRollout) -> GroupRollout:
    """Return the group with new_token_logprobs recomputed from ``policy``."""
    if group.state_ids is None:
        raise ValueError("group rollout carries no state_ids; cannot map tokens to policy states")
    new_rows = []
    for i in range(group.group_size):
        tokens = [ts.token_id for ts in group.trajectories[i].tokens]
        new_rows.append(tuple(policy.sequence_logprobs(group.state_ids[i], tokens)))
    return GroupRollout(
        sample_id=group.sample_id,
        trajectories=group.trajectories,
        old_token_logprobs=group.old_token_logprobs,
        new_token_logprobs=tuple(new_rows),
        rewards=group.rewards,
        state_ids=group.state_ids,
    )


def sgd_step(
    policy: TabularPolicy,
    gradient: np.ndarray,
    learning_rate: float,
    decay: float = 0.0,
    steps_taken: int = 0,
) -> TabularPolicy:
    """Ascent step: params += lr * gradient, with multiplicative lr decay.

    The effective rate is learning_rate * (1 - decay) ** steps_taken, so
    the n-th step (1-based) uses lr * (1 - decay)^(n-1).
    """
    if not learning_rate > 0:
        raise ValueError("learning_rate must be > 0")
    if not (0 <= decay < 1):
        raise ValueError("decay must be in [0, 1)")
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != policy.params.shape:
        raise ValueError("gradient shape does not match policy parameters")
    if not np.all(np.isfinite(gradient)):
        raise ValueError("non-finite gradient; step refused")
    lr = learning_rate * (1.0 - decay) ** steps_taken
    return policy.replace_params(policy.params + lr * gradient)
