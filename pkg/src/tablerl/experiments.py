"""End-to-end desk-scale experiments on the toy environment.

Variants:
  two_stage              partition by pass@k1, stage-1 fixed steps on the
                         easy set, stage-2 dynamic filtering on the hard set
  one_stage              flat loop over the full pool at the stage-2 rate
                         for the same total step budget
  enhanced_grpo          flat loop, no KL, asymmetric clipping (the method)
  original_grpo_with_kl  flat loop, symmetric clipping plus a KL penalty
                         toward the frozen starting policy — comparison
                         baseline only, not part of the method

Gradient budgets are matched between compared variants so differences come
from scheduling and objective shape, not extra compute.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .answers import parse_output
from .curriculum import (
    PassAtKConfig,
    SampledGroup,
    StepMetrics,
    TrainerConfig,
    derive_seed,
    partition,
    stage1_run,
    stage2_init,
    stage2_run,
)
from .grpo import ClipBounds, clip_fraction, grpo_gradient, grpo_objective, regroup_for_policy, sgd_step
from .policy import TabularPolicy
from .reward import score
from .simenv import (
    ToyTask,
    evaluate_pass_values,
    generate_tasks,
    group_sampler,
    render_text,
    rollout,
    warm_start,
)
from .types import GroupRollout, TokenStats, Trajectory
from .uncertainty import fuse_select, majority_select, selection_accuracy

VARIANTS = ("two_stage", "one_stage", "enhanced_grpo", "original_grpo_with_kl")


@dataclass(frozen=True)
class ExperimentConfig:
    variant: str
    seed: int = 0
    n_tasks: int = 200
    heldout_tasks: int = 60
    vocab: int = 12
    stage1_steps: int = 20
    stage2_steps: int = 168
    batch_size: int = 16
    stage1_rollouts: int = 5
    stage1_lr: float = 40.0
    stage2_lr: float = 12.0
    decay: float = 0.01
    inner_epochs: int = 2
    review_period: int = 20
    kl_coeff: float = 1.0
    inference_temperature: float = 0.6
    pass_k: PassAtKConfig = PassAtKConfig()
    bounds: ClipBounds = ClipBounds()
    difficulty_mix: Optional[dict[int, float]] = None

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    @property
    def total_steps(self) -> int:
        return self.stage1_steps + self.stage2_steps

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "seed": self.seed,
            "n_tasks": self.n_tasks,
            "heldout_tasks": self.heldout_tasks,
            "vocab": self.vocab,
            "stage1_steps": self.stage1_steps,
            "stage2_steps": self.stage2_steps,
            "batch_size": self.batch_size,
            "stage1_rollouts": self.stage1_rollouts,
            "stage1_lr": self.stage1_lr,
            "stage2_lr": self.stage2_lr,
            "decay": self.decay,
            "inner_epochs": self.inner_epochs,
            "review_period": self.review_period,
            "kl_coeff": self.kl_coeff,
            "inference_temperature": self.inference_temperature,
            "pass_k": self.pass_k.to_dict(),
            "bounds": self.bounds.to_dict(),
            "difficulty_mix": self.difficulty_mix,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        kwargs = dict(d)
        if "pass_k" in kwargs and isinstance(kwargs["pass_k"], dict):
            kwargs["pass_k"] = PassAtKConfig.from_dict(kwargs["pass_k"])
        if "bounds" in kwargs and isinstance(kwargs["bounds"], dict):
            kwargs["bounds"] = ClipBounds.from_dict(kwargs["bounds"])
        if kwargs.get("difficulty_mix"):
            kwargs["difficulty_mix"] = {int(k): float(v) for k, v in kwargs["difficulty_mix"].items()}
        return cls(**kwargs)


@dataclass(frozen=True)
class ExperimentResult:
    variant: str
    seed: int
    steps: tuple[StepMetrics, ...]
    final_mean_reward: float
    pass_curve: dict[int, float]
    selections: tuple[dict, ...] = ()

    @property
    def pass_at_1(self) -> float:
        return self.pass_curve.get(1, 0.0)


def _stage_cfg(cfg: ExperimentConfig, stage: int) -> TrainerConfig:
    if stage == 1:
        return TrainerConfig(
            steps=cfg.stage1_steps,
            batch_size=cfg.batch_size,
            rollouts_per_sample=cfg.stage1_rollouts,
            learning_rate=cfg.stage1_lr,
            decay=0.0,
            inner_epochs=cfg.inner_epochs,
            seed=derive_seed(cfg.seed, "stage1"),
            bounds=cfg.bounds,
            pass_k=cfg.pass_k,
        )
    return TrainerConfig(
        steps=cfg.stage2_steps,
        batch_size=cfg.batch_size,
        rollouts_per_sample=cfg.pass_k.k2,
        learning_rate=cfg.stage2_lr,
        decay=cfg.decay,
        inner_epochs=cfg.inner_epochs,
        review_period=cfg.review_period,
        seed=derive_seed(cfg.seed, "stage2"),
        bounds=cfg.bounds,
        pass_k=cfg.pass_k,
    )


def _kl_terms(
    policy: TabularPolicy,
    group: GroupRollout,
    ref_logprobs: Sequence[Sequence[float]],
) -> tuple[float, np.ndarray]:
    """Value and ascent gradient of -(1/N) sum k3 with
    k3 = exp(ref - new) - (ref - new) - 1 (non-negative KL estimator)."""
    n_tokens = sum(len(r) for r in group.new_token_logprobs)
    grad = np.zeros_like(policy.params)
    value = 0.0
    prob_rows: dict[int, np.ndarray] = {}
    for i in range(group.group_size):
        for t, ts in enumerate(group.trajectories[i].tokens):
            s = group.state_ids[i][t]
            d = ref_logprobs[i][t] - group.new_token_logprobs[i][t]
            value += math.exp(d) - d - 1.0
            # d/dnew of -k3 is exp(d) - 1; route through the softmax.
            coeff = (math.exp(d) - 1.0) / (n_tokens * policy.temperature)
            if s not in prob_rows:
                prob_rows[s] = policy.probs_row(s)
            grad[s] -= coeff * prob_rows[s]
            grad[s, ts.token_id] += coeff
    return value / n_tokens, grad


def train_flat(
    policy: TabularPolicy,
    tasks: Sequence[ToyTask],
    steps: int,
    cfg: TrainerConfig,
    kl_coeff: float = 0.0,
    ref_policy: Optional[TabularPolicy] = None,
    start_step: int = 0,
) -> tuple[TabularPolicy, list[StepMetrics]]:
    """Single-stage GRPO over the full pool, optionally KL-penalized."""
    if kl_coeff > 0 and ref_policy is None:
        raise ValueError("KL penalty requires a reference policy")
    sampler = group_sampler(tasks)
    samples = [t.sample for t in tasks]
    by_id = {t.sample.id: t for t in tasks}
    metrics: list[StepMetrics] = []
    n = len(samples)
    for step in range(steps):
        batch = [samples[(step * cfg.batch_size + j) % n] for j in range(cfg.batch_size)]
        items: list[tuple[str, SampledGroup, list[float], list[list[float]]]] = []
        composites: list[float] = []
        for sample in batch:
            sg = sampler(policy, sample, cfg.rollouts_per_sample, derive_seed(cfg.seed, "flat", step, sample.id))
            breakdowns = [score(t, sample, cfg.reward_weights, cfg.norm_policy) for t in sg.trajectories]
            rewards = [b.composite for b in breakdowns]
            composites.extend(rewards)
            ref_lps: list[list[float]] = []
            if kl_coeff > 0:
                task = by_id[sample.id]
                for traj in sg.trajectories:
                    ref_lps.append(
                        ref_policy.sequence_logprobs(
                            [task.state_id] * len(traj.tokens), [ts.token_id for ts in traj.tokens]
                        )
                    )
            items.append((sample.id, sg, rewards, ref_lps))

        objective = 0.0
        clipped = 0.0
        for _ in range(cfg.inner_epochs):
            grads = []
            objs = []
            clips = []
            for sample_id, sg, rewards, ref_lps in items:
                base = GroupRollout(
                    sample_id=sample_id,
                    trajectories=sg.trajectories,
                    old_token_logprobs=sg.logprobs,
                    new_token_logprobs=sg.logprobs,
                    rewards=tuple(rewards),
                    state_ids=sg.state_ids,
                )
                group = regroup_for_policy(policy, base)
                grad = grpo_gradient(policy, group, cfg.bounds, cfg.advantage)
                obj, _ = grpo_objective(group, cfg.bounds, cfg.advantage)
                if kl_coeff > 0:
                    kl_value, kl_grad = _kl_terms(policy, group, ref_lps)
                    grad = grad + kl_coeff * kl_grad
                    obj = obj - kl_coeff * kl_value
                grads.append(grad)
                objs.append(obj)
                clips.append(clip_fraction(group, cfg.bounds))
            policy = sgd_step(policy, np.mean(grads, axis=0), cfg.learning_rate, cfg.decay, step)
            objective = float(np.mean(objs))
            clipped = float(np.mean(clips))

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


def final_mean_reward(policy: TabularPolicy, tasks: Sequence[ToyTask], k: int, seed: int) -> float:
    """Mean composite over k fresh rollouts per task, at training temperature."""
    total = 0.0
    count = 0
    for task in tasks:
        trajs = rollout(policy, task, k, seed=derive_seed(seed, "final", task.sample.id))
        for t in trajs:
            total += score(t, task.sample).composite
            count += 1
    return total / count if count else 0.0


def eval_pass_curve(
    policy: TabularPolicy,
    tasks: Sequence[ToyTask],
    k: int,
    seed: int,
    temperature: float,
) -> tuple[dict[int, float], list[tuple[ToyTask, list[Trajectory]]]]:
    """Corpus pass@j for j=1..k: fraction of tasks with >=1 complete rollout
    among the first j. Returns the rollouts too, for selection analysis."""
    per_task: list[tuple[ToyTask, list[Trajectory]]] = []
    firsts: list[list[int]] = []
    for task in tasks:
        trajs = rollout(policy, task, k, temperature=temperature, seed=derive_seed(seed, "eval", task.sample.id))
        per_task.append((task, trajs))
        firsts.append([score(t, task.sample).complete for t in trajs])
    curve = {}
    for j in range(1, k + 1):
        curve[j] = sum(1 for flags in firsts if any(flags[:j])) / len(firsts)
    return curve, per_task


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run one variant end to end on generated tasks; fully deterministic
    under the config seed."""
    train_tasks = generate_tasks(
        config.seed, config.n_tasks, config.difficulty_mix, state_offset=0, vocab=config.vocab
    )
    heldout = generate_tasks(
        derive_seed(config.seed, "heldout"),
        config.heldout_tasks,
        config.difficulty_mix,
        state_offset=config.n_tasks,
        vocab=config.vocab,
        id_prefix=f"held-{config.seed}",
    )
    policy = TabularPolicy.uniform(config.n_tasks + config.heldout_tasks, config.vocab)
    policy = warm_start(policy, list(train_tasks) + list(heldout))

    metrics: list[StepMetrics] = []
    if config.variant == "two_stage":
        pass_values = evaluate_pass_values(
            policy, train_tasks, config.pass_k.k1, derive_seed(config.seed, "split")
        )
        samples = [t.sample for t in train_tasks]
        easy, hard = partition(samples, pass_values, config.pass_k)
        sampler = group_sampler(train_tasks)
        policy, m1 = stage1_run(easy, policy, _stage_cfg(config, 1), sampler)
        metrics.extend(m1)
        state = stage2_init(hard, derive_seed(config.seed, "stage2"), start_step=config.stage1_steps)
        state, policy, m2 = stage2_run(state, policy, hard, _stage_cfg(config, 2), sampler, config.stage2_steps)
        metrics.extend(m2)
    elif config.variant in ("one_stage", "enhanced_grpo"):
        policy, metrics = train_flat(policy, train_tasks, config.total_steps, _stage_cfg(config, 2))
    else:  # original_grpo_with_kl: symmetric clipping + KL toward the start
        sym = ClipBounds(eps_low=config.bounds.eps_low, eps_high=config.bounds.eps_low)
        cfg2 = replace(_stage_cfg(config, 2), bounds=sym)
        policy, metrics = train_flat(
            policy,
            train_tasks,
            config.total_steps,
            cfg2,
            kl_coeff=config.kl_coeff,
            ref_policy=policy.copy(),
        )

    final = final_mean_reward(policy, train_tasks, config.pass_k.k2, derive_seed(config.seed, "finalmr"))
    curve, per_task = eval_pass_curve(
        policy, heldout, config.pass_k.k2, derive_seed(config.seed, "curve"), config.inference_temperature
    )
    selections = []
    for task, trajs in per_task:
        report = fuse_select(trajs)
        chosen = trajs[report.selected_index]
        selections.append(
            {
                "sample_id": task.sample.id,
                "answer": list(report.selected_answer),
                "correct": score(chosen, task.sample).complete,
                "fallback": report.fallback,
            }
        )
    return ExperimentResult(
        variant=config.variant,
        seed=config.seed,
        steps=tuple(metrics),
        final_mean_reward=final,
        pass_curve=curve,
        selections=tuple(selections),
    )


def moving_average(values: Sequence[float], window: int) -> list[float]:
    out = []
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out.append(sum(values[lo : i + 1]) / (i + 1 - lo))
    return out


def steps_to_reach(rewards: Sequence[float], target: float, window: int = 5) -> int:
    """First 1-based step whose trailing moving average meets the target;
    len(rewards)+1 when never reached."""
    ma = moving_average(rewards, window)
    for i, v in enumerate(ma):
        if v >= target:
            return i + 1
    return len(rewards) + 1


def paired_runs(
    variant_a: str, variant_b: str, base: ExperimentConfig, seeds: Sequence[int]
) -> list[tuple[ExperimentResult, ExperimentResult]]:
    out = []
    for s in seeds:
        ra = run_experiment(replace(base, variant=variant_a, seed=s))
        rb = run_experiment(replace(base, variant=variant_b, seed=s))
        out.append((ra, rb))
    return out


def plateau_comparison(result_a: ExperimentResult, result_b: ExperimentResult, window: int = 5) -> tuple[int, int]:
    """Steps each run needed to reach 95% of the weaker run's final
    moving-average reward."""
    ra = [m.mean_reward for m in result_a.steps]
    rb = [m.mean_reward for m in result_b.steps]
    fa = moving_average(ra, window)[-1]
    fb = moving_average(rb, window)[-1]
    target = 0.95 * min(fa, fb)
    return steps_to_reach(ra, target, window), steps_to_reach(rb, target, window)


def build_selection_benchmark(
    tasks: Sequence[ToyTask],
    n_rollouts: int = 8,
    minority_fraction: float = 0.3,
    seed: int = 0,
) -> list[tuple[list[Trajectory], list[str]]]:
    """Labeled selection cases with an engineered minority-correct fraction.

    In a minority-correct case the right answer appears in 1-2 rollouts but
    carries the highest confidence; majority voting picks the confident-
    looking wrong crowd. Remaining cases are ordinary majority-correct.
    """
    rng = np.random.default_rng(seed)
    n_min = round(minority_fraction * len(tasks))
    flags = [i < n_min for i in range(len(tasks))]
    rng.shuffle(flags)

    cases: list[tuple[list[Trajectory], list[str]]] = []
    for task, minority in zip(tasks, flags):
        gold_value = task.candidates[task.gold_slot]
        wrong_slots = [i for i in range(len(task.candidates)) if i != task.gold_slot]
        wrong_value = task.candidates[int(rng.choice(wrong_slots))]
        if minority:
            n_correct = int(rng.integers(1, 3))
            correct_confs = rng.uniform(0.85, 0.98, size=n_correct)
            wrong_confs = rng.uniform(0.3, 0.55, size=n_rollouts - n_correct)
        else:
            n_correct = int(rng.integers(max(5, n_rollouts // 2 + 1), n_rollouts))
            correct_confs = rng.uniform(0.6, 0.95, size=n_correct)
            wrong_confs = rng.uniform(0.25, 0.5, size=n_rollouts - n_correct)

        entries = [(gold_value, float(c)) for c in correct_confs]
        entries += [(wrong_value, float(c)) for c in wrong_confs]
        order = rng.permutation(len(entries))
        rollouts = []
        for idx in order:
            value, conf = entries[int(idx)]
            slot = task.candidates.index(value)
            lp = math.log(conf)
            text = render_text(task, slot)
            rollouts.append(
                Trajectory(
                    sample_id=task.sample.id,
                    text=text,
                    tokens=(TokenStats(token_id=slot, chosen_logprob=lp, topk_logprobs=((slot, lp),)),),
                    extracted=parse_output(text),
                    avg_logprob=lp,
                    avg_entropy=0.0,
                    confidence=conf,
                )
            )
        cases.append((rollouts, list(task.sample.gold_answers)))
    return cases


def selector_comparison(cases: Sequence[tuple[list[Trajectory], list[str]]]) -> tuple[float, float]:
    """(fusion accuracy, majority accuracy) over labeled cases."""

    def fused(rollouts: Sequence[Trajectory]) -> Trajectory:
        report = fuse_select(rollouts)
        return rollouts[report.selected_index]

    return selection_accuracy(cases, fused), selection_accuracy(cases, majority_select)
