"""Two-stage difficulty-aware training: partitioning, routing, and stage loops.

Stage 1 runs a fixed number of steps over the easy partition, round-robin,
with no routing. Stage 2 draws batches from the Active bucket only,
re-evaluates each drawn sample's pass rate from the same fresh rollouts
used for the update, routes it, and updates the policy using only samples
whose latest pass rate stayed strictly inside (0, active_upper). Samples
that reach a perfect pass rate are excluded permanently; the Review pool
(too easy for active updates, or currently hopeless at pass 0) is
re-evaluated every ``review_period`` steps.

Rollouts come from a caller-supplied sampler so the loops stay independent
of any particular environment; the toy environment provides one.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .answers import NormalizationPolicy
from .grpo import (
    AdvantageSpec,
    ClipBounds,
    clip_fraction,
    grpo_gradient,
    grpo_objective,
    regroup_for_policy,
    sgd_step,
)
from .policy import TabularPolicy
from .reward import RewardWeights, score
from .types import GroupRollout, RewardBreakdown, TableSample, Trajectory

STATE_VERSION = 1


class Bucket(str, Enum):
    EASY = "easy"
    HARD = "hard"
    ACTIVE = "active"
    REVIEW = "review"
    EXCLUDED = "excluded"


@dataclass(frozen=True)
class PassAtKConfig:
    k1: int = 32
    k2: int = 8
    partition_threshold: float = 0.6
    active_upper: float = 0.8
    exclude_at: float = 1.0

    def __post_init__(self) -> None:
        if not (0 < self.partition_threshold < 1):
            raise ValueError("partition_threshold must be in (0, 1)")
        if not (0 < self.active_upper <= self.exclude_at <= 1):
            raise ValueError("need 0 < active_upper <= exclude_at <= 1")
        if self.k1 < 1 or self.k2 < 1:
            raise ValueError("k1 and k2 must be >= 1")

    def to_dict(self) -> dict:
        return {
            "k1": self.k1,
            "k2": self.k2,
            "partition_threshold": self.partition_threshold,
            "active_upper": self.active_upper,
            "exclude_at": self.exclude_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PassAtKConfig":
        return cls(
            k1=int(d.get("k1", 32)),
            k2=int(d.get("k2", 8)),
            partition_threshold=float(d.get("partition_threshold", 0.6)),
            active_upper=float(d.get("active_upper", 0.8)),
            exclude_at=float(d.get("exclude_at", 1.0)),
        )


DEFAULT_PASS_K = PassAtKConfig()


def derive_seed(root: int, *parts: object) -> int:
    """Stable sub-seed derivation; avoids serializing RNG streams and makes
    resume-from-checkpoint bit-exact."""
    text = ":".join([str(root)] + [str(p) for p in parts])
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def pass_at_k(rollout_rewards: Sequence[RewardBreakdown]) -> float:
    """Empirical complete-rate over exactly k rollouts."""
    if not rollout_rewards:
        raise ValueError("pass@k of an empty rollout list")
    return sum(1 for b in rollout_rewards if b.complete == 1) / len(rollout_rewards)


def partition(
    samples: Sequence[TableSample],
    pass_values: Mapping[str, float],
    cfg: PassAtKConfig = DEFAULT_PASS_K,
) -> tuple[list[TableSample], list[TableSample]]:
    """Split into (easy, hard) by pass >= partition_threshold; the boundary
    value goes to easy. Disjoint and exhaustive by construction."""
    easy: list[TableSample] = []
    hard: list[TableSample] = []
    for s in samples:
        if s.id not in pass_values:
            raise ValueError(f"missing pass value for sample {s.id!r}")
        v = pass_values[s.id]
        if not (0.0 <= v <= 1.0):
            raise ValueError(f"pass value out of [0,1] for sample {s.id!r}: {v}")
        (easy if v >= cfg.partition_threshold else hard).append(s)
    return easy, hard


def route_sample(current: Bucket, pass_value: float, cfg: PassAtKConfig = DEFAULT_PASS_K) -> Bucket:
    """Stage-2 routing: perfect pass excludes forever, mid pass stays
    active, high-but-imperfect pass rests in review. Zero-pass samples go
    to review rather than the active set (they are barred from updates by
    the strict lower bound) and get retried at each review period."""
    if current == Bucket.EXCLUDED:
        raise ValueError("routing an excluded sample")
    if current not in (Bucket.ACTIVE, Bucket.REVIEW):
        raise ValueError(f"cannot route from bucket {current.value!r}")
    if not (0.0 <= pass_value <= 1.0):
        raise ValueError(f"pass value out of [0,1]: {pass_value}")
    if pass_value >= cfg.exclude_at:
        return Bucket.EXCLUDED
    if pass_value == 0.0:
        return Bucket.REVIEW
    if pass_value < cfg.active_upper:
        return Bucket.ACTIVE
    return Bucket.REVIEW


@dataclass
class SampleState:
    bucket: Bucket
    last_pass: Optional[float] = None
    history: list[tuple[int, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "bucket": self.bucket.value,
            "last_pass": self.last_pass,
            "history": [[s, p] for s, p in self.history],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SampleState":
        return cls(
            bucket=Bucket(d["bucket"]),
            last_pass=None if d.get("last_pass") is None else float(d["last_pass"]),
            history=[(int(s), float(p)) for s, p in d.get("history", [])],
        )


@dataclass
class CurriculumState:
    """Single-writer mutable state for the stage-2 loop."""

    stage: int
    seed: int
    samples: dict[str, SampleState]
    order: list[str]
    step: int = 0
    stage2_steps: int = 0
    cursor: int = 0

    def bucket_counts(self) -> dict[str, int]:
        counts = {b.value: 0 for b in (Bucket.ACTIVE, Bucket.REVIEW, Bucket.EXCLUDED)}
        for st in self.samples.values():
            if st.bucket.value in counts:
                counts[st.bucket.value] += 1
        return counts

    def to_dict(self) -> dict:
        return {
            "version": STATE_VERSION,
            "kind": "curriculum_state",
            "stage": self.stage,
            "seed": self.seed,
            "step": self.step,
            "stage2_steps": self.stage2_steps,
            "cursor": self.cursor,
            "order": list(self.order),
            "samples": {sid: st.to_dict() for sid, st in self.samples.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CurriculumState":
        if d.get("kind") != "curriculum_state":
            raise ValueError("not a curriculum state record")
        if d.get("version") != STATE_VERSION:
            raise ValueError(f"unsupported curriculum state version: {d.get('version')!r}")
        return cls(
            stage=int(d["stage"]),
            seed=int(d["seed"]),
            samples={str(sid): SampleState.from_dict(st) for sid, st in d["samples"].items()},
            order=[str(sid) for sid in d["order"]],
            step=int(d["step"]),
            stage2_steps=int(d["stage2_steps"]),
            cursor=int(d["cursor"]),
        )


@dataclass(frozen=True)
class TrainerConfig:
    steps: int
    batch_size: int
    rollouts_per_sample: int
    learning_rate: float
    decay: float = 0.0
    inner_epochs: int = 1
    review_period: int = 20
    seed: int = 0
    bounds: ClipBounds = ClipBounds()
    advantage: AdvantageSpec = AdvantageSpec()
    reward_weights: RewardWeights = RewardWeights()
    norm_policy: NormalizationPolicy = NormalizationPolicy()
    pass_k: PassAtKConfig = PassAtKConfig()

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.rollouts_per_sample < 2:
            raise ValueError("rollouts_per_sample must be >= 2 for group advantages")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.inner_epochs < 1:
            raise ValueError("inner_epochs must be >= 1")


@dataclass(frozen=True)
class SampledGroup:
    """One sample's fresh rollouts plus everything the gradient needs."""

    trajectories: tuple[Trajectory, ...]
    state_ids: tuple[tuple[int, ...], ...]
    logprobs: tuple[tuple[float, ...], ...]  # generation-time (old policy)


GroupSampler = Callable[[TabularPolicy, TableSample, int, int], SampledGroup]


@dataclass(frozen=True)
class StepMetrics:
    stage: int
    step: int
    mean_reward: float
    objective: float
    clip_fraction: float
    n_rollouts: int
    n_updated: int
    active: Optional[int] = None
    review: Optional[int] = None
    excluded: Optional[int] = None
    evaluated: tuple[tuple[str, float], ...] = ()
    updated_ids: tuple[str, ...] = ()
    skipped: bool = False
    terminated: bool = False

    def to_record(self) -> dict:
        rec: dict = {
            "kind": "step",
            "stage": self.stage,
            "step": self.step,
            "mean_reward": self.mean_reward,
            "objective": self.objective,
            "clip_fraction": self.clip_fraction,
            "n_rollouts": self.n_rollouts,
            "n_updated": self.n_updated,
        }
        if self.active is not None:
            rec["active"] = self.active
            rec["review"] = self.review
            rec["excluded"] = self.excluded
        if self.evaluated:
            rec["evaluated"] = [[sid, p] for sid, p in self.evaluated]
        if self.updated_ids:
            rec["updated_ids"] = list(self.updated_ids)
        if self.skipped:
            rec["skipped"] = True
        if self.terminated:
            rec["terminated"] = True
        return rec


def _build_group(
    policy: TabularPolicy, sample_id: str, sg: SampledGroup, rewards: Sequence[float]
) -> GroupRollout:
    base = GroupRollout(
        sample_id=sample_id,
        trajectories=sg.trajectories,
        old_token_logprobs=sg.logprobs,
        new_token_logprobs=sg.logprobs,
        rewards=tuple(rewards),
        state_ids=sg.state_ids,
    )
    return regroup_for_policy(policy, base)


def _grpo_update(
    policy: TabularPolicy,
    items: Sequence[tuple[str, SampledGroup, list[float]]],
    cfg: TrainerConfig,
    steps_taken: int,
) -> tuple[TabularPolicy, float, float]:
    """Apply cfg.inner_epochs ascent steps on the mean gradient over groups.

    Returns (policy, last-epoch mean objective, last-epoch clip fraction).
    All inner epochs of one training step share the step's decayed rate.
    """
    objective = 0.0
    clipped = 0.0
    for _ in range(cfg.inner_epochs):
        grads = []
        objs = []
        clips = []
        for sample_id, sg, rewards in items:
            group = _build_group(policy, sample_id, sg, rewards)
            grads.append(grpo_gradient(policy, group, cfg.bounds, cfg.advantage))
            obj, _ = grpo_objective(group, cfg.bounds, cfg.advantage)
            objs.append(obj)
            clips.append(clip_fraction(group, cfg.bounds))
        grad = np.mean(grads, axis=0)
        policy = sgd_step(policy, grad, cfg.learning_rate, cfg.decay, steps_taken)
        objective = float(np.mean(objs))
        clipped = float(np.mean(clips))
    return policy, objective, clipped


def stage1_run(
    easy: Sequence[TableSample],
    policy: TabularPolicy,
    cfg: TrainerConfig,
    sampler: GroupSampler,
    start_step: int = 0,
) -> tuple[TabularPolicy, list[StepMetrics]]:
    """Fixed-step training over the easy set, batches drawn round-robin.

    No routing happens here; every sample stays in play for all steps.
    """
    if not easy:
        raise ValueError("empty easy set")
    metrics: list[StepMetrics] = []
    n = len(easy)
    for step in range(cfg.steps):
        batch = [easy[(step * cfg.batch_size + j) % n] for j in range(cfg.batch_size)]
        items: list[tuple[str, SampledGroup, list[float]]] = []
        composites: list[float] = []
        for sample in batch:
            seed = derive_seed(cfg.seed, "stage1", step, sample.id)
            sg = sampler(policy, sample, cfg.rollouts_per_sample, seed)
            breakdowns = [score(t, sample, cfg.reward_weights, cfg.norm_policy) for t in sg.trajectories]
            rewards = [b.composite for b in breakdowns]
            composites.extend(rewards)
            items.append((sample.id, sg, rewards))
        policy, objective, clipped = _grpo_update(policy, items, cfg, steps_taken=step)
        metrics.append(
            StepMetrics(
                stage=1,
                step=start_step + step + 1,
                mean_reward=float(np.mean(composites)),
                objective=objective,
                clip_fraction=clipped,
                n_rollouts=len(composites),
                n_updated=len(items),
            )
        )
    return policy, metrics


def stage2_init(hard: Sequence[TableSample], seed: int, start_step: int = 0) -> CurriculumState:
    """All hard-pool samples start Active; first routing happens on first draw."""
    return CurriculumState(
        stage=2,
        seed=seed,
        samples={s.id: SampleState(Bucket.ACTIVE) for s in hard},
        order=[s.id for s in hard],
        step=start_step,
    )


def _draw_active(state: CurriculumState, batch_size: int) -> list[str]:
    n = len(state.order)
    if n == 0:
        return []
    batch: list[str] = []
    last_pos = None
    for offset in range(n):
        pos = (state.cursor + offset) % n
        sid = state.order[pos]
        if state.samples[sid].bucket == Bucket.ACTIVE:
            batch.append(sid)
            last_pos = pos
            if len(batch) == batch_size:
                break
    if last_pos is not None:
        state.cursor = (last_pos + 1) % n
    return batch


def stage2_step(
    state: CurriculumState,
    policy: TabularPolicy,
    samples_by_id: Mapping[str, TableSample],
    cfg: TrainerConfig,
    sampler: GroupSampler,
) -> tuple[CurriculumState, TabularPolicy, StepMetrics]:
    """One dynamic-filtering step; every invoked step counts, including ones
    whose whole batch got routed out of the active set."""
    if state.stage != 2:
        raise ValueError(f"stage2_step on stage-{state.stage} state")
    state.step += 1
    state.stage2_steps += 1
    batch_ids = _draw_active(state, cfg.batch_size)

    if not batch_ids:
        counts = state.bucket_counts()
        return (
            state,
            policy,
            StepMetrics(
                stage=2,
                step=state.step,
                mean_reward=0.0,
                objective=0.0,
                clip_fraction=0.0,
                n_rollouts=0,
                n_updated=0,
                active=counts["active"],
                review=counts["review"],
                excluded=counts["excluded"],
                skipped=True,
                terminated=True,
            ),
        )

    k2 = cfg.pass_k.k2
    evaluated: list[tuple[str, float]] = []
    items: list[tuple[str, SampledGroup, list[float]]] = []
    composites: list[float] = []
    for sid in batch_ids:
        sample = samples_by_id[sid]
        sg = sampler(policy, sample, k2, derive_seed(state.seed, "stage2", state.step, sid))
        breakdowns = [score(t, sample, cfg.reward_weights, cfg.norm_policy) for t in sg.trajectories]
        pv = pass_at_k(breakdowns)
        st = state.samples[sid]
        st.bucket = route_sample(st.bucket, pv, cfg.pass_k)
        st.last_pass = pv
        st.history.append((state.step, pv))
        evaluated.append((sid, pv))
        composites.extend(b.composite for b in breakdowns)
        if st.bucket == Bucket.ACTIVE:
            items.append((sid, sg, [b.composite for b in breakdowns]))

    if items:
        policy, objective, clipped = _grpo_update(policy, items, cfg, steps_taken=state.stage2_steps - 1)
        skipped = False
    else:
        objective, clipped = 0.0, 0.0
        skipped = True

    if cfg.review_period > 0 and state.stage2_steps % cfg.review_period == 0:
        for sid in state.order:
            st = state.samples[sid]
            if st.bucket != Bucket.REVIEW:
                continue
            sample = samples_by_id[sid]
            sg = sampler(policy, sample, k2, derive_seed(state.seed, "review", state.step, sid))
            breakdowns = [score(t, sample, cfg.reward_weights, cfg.norm_policy) for t in sg.trajectories]
            pv = pass_at_k(breakdowns)
            st.bucket = route_sample(Bucket.REVIEW, pv, cfg.pass_k)
            st.last_pass = pv
            st.history.append((state.step, pv))
            evaluated.append((sid, pv))

    counts = state.bucket_counts()
    return (
        state,
        policy,
        StepMetrics(
            stage=2,
            step=state.step,
            mean_reward=float(np.mean(composites)),
            objective=objective,
            clip_fraction=clipped,
            n_rollouts=len(composites),
            n_updated=len(items),
            active=counts["active"],
            review=counts["review"],
            excluded=counts["excluded"],
            evaluated=tuple(evaluated),
            updated_ids=tuple(sid for sid, _, _ in items),
            skipped=skipped,
        ),
    )


def stage2_run(
    state: CurriculumState,
    policy: TabularPolicy,
    samples: Sequence[TableSample],
    cfg: TrainerConfig,
    sampler: GroupSampler,
    steps: int,
) -> tuple[CurriculumState, TabularPolicy, list[StepMetrics]]:
    """Drive stage-2 for up to ``steps`` steps; an empty active pool ends the
    stage normally (reported, not an error)."""
    samples_by_id = {s.id: s for s in samples}
    metrics: list[StepMetrics] = []
    for _ in range(steps):
        state, policy, m = stage2_step(state, policy, samples_by_id, cfg, sampler)
        metrics.append(m)
        if m.terminated:
            break
    return state, policy, metrics


def checkpoint_state(state: CurriculumState) -> dict:
    """Persistable record; restore_state(checkpoint_state(s)) == s."""
    return state.to_dict()


def restore_state(record: dict) -> CurriculumState:
    if not isinstance(record, dict):
        raise ValueError("curriculum state record must be an object")
    return CurriculumState.from_dict(record)


def save_checkpoint(path: str, state: CurriculumState, policy: TabularPolicy) -> None:
    """Atomic write of state + policy; a failed write never clobbers an
    existing checkpoint."""
    record = {
        "version": STATE_VERSION,
        "kind": "stage2_checkpoint",
        "state": checkpoint_state(state),
        "policy": policy.to_dict(),
    }
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(record, f)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[CurriculumState, TabularPolicy]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            record = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ValueError(f"corrupted checkpoint {path}: {e}") from e
    if not isinstance(record, dict) or record.get("kind") != "stage2_checkpoint":
        raise ValueError(f"not a stage2 checkpoint: {path}")
    if record.get("version") != STATE_VERSION:
        raise ValueError(f"unsupported checkpoint version: {record.get('version')!r}")
    try:
        state = restore_state(record["state"])
        policy = TabularPolicy.from_dict(record["policy"])
    except (KeyError, TypeError) as e:
        raise ValueError(f"corrupted checkpoint {path}: {e}") from e
    return state, policy
