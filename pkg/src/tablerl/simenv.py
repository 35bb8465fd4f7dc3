"""Deterministic toy table-QA environment over a tabular softmax policy.

Each task is a small generated table plus a lookup/aggregate question whose
gold answer a reference solver recomputes from the table. Every task owns
one policy state (one logit row); a rollout is a single answer-slot
decision rendered into the tagged think/answer text format, so the whole
pipeline — parsing, rewards, GRPO updates, routing, selection — runs on
exactly the same machinery as ingested data.

The candidate list always has exactly ``vocab`` entries, so the softmax
needs no per-task masking; task difficulty shows up through table size,
question kind, and (at experiment level) the warm-start strength on the
gold slot.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .answers import normalize_answer, parse_output
from .curriculum import SampledGroup, derive_seed
from .policy import TabularPolicy
from .types import Table, TableSample, TokenStats, Trajectory
from .uncertainty import annotate

DEFAULT_VOCAB = 12
DIFFICULTIES = (1, 2, 3, 4, 5)
# Warm-start logit on each task's gold slot, indexed by difficulty - 1.
# Mimics the post-SFT starting point: low difficulties mostly solvable.
DEFAULT_WARM_STRENGTHS = (3.5, 3.0, 1.5, 0.7, 0.0)

_NAME_POOL = (
    "alder", "birch", "cedar", "dahlia", "elm", "fern", "ginkgo", "hazel",
    "iris", "juniper", "kale", "laurel", "maple", "nettle", "oak", "poplar",
    "quince", "rowan", "sorrel", "tansy", "umber", "violet", "willow", "yarrow",
)


@dataclass(frozen=True)
class QuerySpec:
    """Structured question so the reference solver needs no text parsing."""

    kind: str  # lookup | argmax | sum | count_above
    column: int
    row_key: Optional[str] = None
    threshold: Optional[float] = None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "column": self.column, "row_key": self.row_key, "threshold": self.threshold}

    @classmethod
    def from_dict(cls, d: dict) -> "QuerySpec":
        return cls(
            kind=str(d["kind"]),
            column=int(d["column"]),
            row_key=None if d.get("row_key") is None else str(d["row_key"]),
            threshold=None if d.get("threshold") is None else float(d["threshold"]),
        )


@dataclass(frozen=True)
class ToyTask:
    sample: TableSample
    query: QuerySpec
    candidates: tuple[str, ...]
    gold_slot: int
    state_id: int
    difficulty: int

    def to_record(self) -> dict:
        # A task record is a canonical sample record plus a "toy" extension,
        # so tasks.jsonl doubles as an ingestible sample file.
        rec = self.sample.to_dict()
        rec["toy"] = {
            "query": self.query.to_dict(),
            "candidates": list(self.candidates),
            "gold_slot": self.gold_slot,
            "state_id": self.state_id,
            "difficulty": self.difficulty,
        }
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "ToyTask":
        toy = rec["toy"]
        sample_rec = {k: v for k, v in rec.items() if k != "toy"}
        return cls(
            sample=TableSample.from_dict(sample_rec),
            query=QuerySpec.from_dict(toy["query"]),
            candidates=tuple(str(c) for c in toy["candidates"]),
            gold_slot=int(toy["gold_slot"]),
            state_id=int(toy["state_id"]),
            difficulty=int(toy["difficulty"]),
        )


def solve_query(table: Table, query: QuerySpec) -> tuple[str, ...]:
    """Reference solver: recompute the gold answer from the table alone."""
    rows = table.body_rows()
    if query.kind == "lookup":
        for row in rows:
            if row[0] == query.row_key:
                return (normalize_answer(row[query.column]),)
        raise ValueError(f"lookup key {query.row_key!r} not in table")
    if query.kind == "argmax":
        best = max(rows, key=lambda r: float(r[query.column]))
        return (normalize_answer(best[0]),)
    if query.kind == "sum":
        total = sum(float(r[query.column]) for r in rows)
        return (normalize_answer(repr(total)),)
    if query.kind == "count_above":
        count = sum(1 for r in rows if float(r[query.column]) > query.threshold)
        return (normalize_answer(str(count)),)
    raise ValueError(f"unknown query kind {query.kind!r}")


def _question_text(query: QuerySpec, header: Sequence[str]) -> str:
    col = header[query.column]
    if query.kind == "lookup":
        return f"What is the {col} of {query.row_key}?"
    if query.kind == "argmax":
        return f"Which item has the highest {col}?"
    if query.kind == "sum":
        return f"What is the total {col} across all items?"
    return f"How many items have {col} greater than {query.threshold:g}?"


def _build_task(rng: np.random.Generator, difficulty: int, state_id: int, sample_id: str, vocab: int) -> ToyTask:
    n_rows = 2 + difficulty
    names = list(rng.choice(_NAME_POOL, size=n_rows, replace=False))
    values = list(rng.choice(np.arange(10, 99), size=n_rows, replace=False))
    header = ("item", "score")
    rows = [[str(n), str(int(v))] for n, v in zip(names, values)]
    table = Table.from_rows([list(header)] + rows, has_header=True)

    if difficulty <= 2:
        key = names[int(rng.integers(n_rows))]
        query = QuerySpec(kind="lookup", column=1, row_key=str(key))
    elif difficulty == 3:
        query = QuerySpec(kind="argmax", column=1)
    elif difficulty == 4:
        query = QuerySpec(kind="sum", column=1)
    else:
        threshold = float(int(np.median([int(v) for v in values])))
        query = QuerySpec(kind="count_above", column=1, threshold=threshold)

    gold = solve_query(table, query)
    gold_value = gold[0]

    # Distractors: plausible values of the same shape as the gold answer,
    # distinct after normalization.
    pool: list[str] = []
    if query.kind == "argmax":
        pool = [str(n) for n in names] + [n for n in _NAME_POOL if n not in names]
    elif query.kind == "lookup":
        pool = [str(int(v)) for v in values] + [str(int(rng.integers(10, 99))) for _ in range(3 * vocab)]
    elif query.kind == "sum":
        base = int(float(gold_value))
        pool = [str(base + d) for d in range(-vocab, vocab + 1)]
    else:
        pool = [str(i) for i in range(0, max(vocab + 1, n_rows + 2))]

    candidates = [gold_value]
    seen = {gold_value}
    order = list(rng.permutation(len(pool)))
    for idx in order:
        c = normalize_answer(pool[idx])
        if c not in seen:
            candidates.append(c)
            seen.add(c)
        if len(candidates) == vocab:
            break
    filler = 0
    while len(candidates) < vocab:  # exhausted pool; pad with synthetic values
        c = f"none-{filler}"
        filler += 1
        if c not in seen:
            candidates.append(c)
            seen.add(c)

    perm = rng.permutation(vocab)
    shuffled = [candidates[i] for i in perm]
    gold_slot = shuffled.index(gold_value)

    sample = TableSample(
        id=sample_id,
        table=table,
        question=_question_text(query, header),
        gold_answers=gold,
        source="synthetic",
        gold_answers_raw=gold,
    )
    return ToyTask(
        sample=sample,
        query=query,
        candidates=tuple(shuffled),
        gold_slot=gold_slot,
        state_id=state_id,
        difficulty=difficulty,
    )


def generate_tasks(
    seed: int,
    count: int,
    difficulty_mix: Optional[dict[int, float]] = None,
    state_offset: int = 0,
    vocab: int = DEFAULT_VOCAB,
    id_prefix: Optional[str] = None,
) -> list[ToyTask]:
    """Deterministic task list; every gold answer is verified against the
    reference solver before emission."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if vocab < 2:
        raise ValueError("vocab must be >= 2")
    mix = difficulty_mix or {d: 1.0 for d in DIFFICULTIES}
    levels = sorted(mix)
    if any(d not in DIFFICULTIES for d in levels):
        raise ValueError("difficulty levels must be in 1..5")
    weights = np.array([mix[d] for d in levels], dtype=np.float64)
    probs = weights / weights.sum()
    rng = np.random.default_rng(seed)
    prefix = id_prefix if id_prefix is not None else f"toy-{seed}"
    tasks: list[ToyTask] = []
    picked = rng.choice(levels, size=count, p=probs)
    for i in range(count):
        task = _build_task(rng, int(picked[i]), state_offset + i, f"{prefix}-{i:05d}", vocab)
        if solve_query(task.sample.table, task.query) != task.sample.gold_answers:
            raise AssertionError(f"reference solver disagrees on {task.sample.id}")
        tasks.append(task)
    return tasks


def render_text(task: ToyTask, slot: int) -> str:
    think = f"scan the table for: {task.sample.question}"
    payload = json.dumps({"answer": [task.candidates[slot]]})
    return f"<think>{think}</think><answer>{payload}</answer>"


def corrupt_text(text: str) -> str:
    # Dropping the closing answer tag breaks the tag grammar without
    # touching the payload, exercising the format-reward pathway.
    return text.replace("</answer>", "")


def rollout(
    policy: TabularPolicy,
    task: ToyTask,
    k: int,
    temperature: Optional[float] = None,
    seed: int = 0,
    corrupt_format_p: float = 0.0,
) -> list[Trajectory]:
    """Sample k single-decision trajectories with exact policy statistics.

    Chosen logprobs and the full top-k candidate list come from the
    policy's own (tempered) softmax; emitted text follows the tag grammar
    unless format corruption is switched on.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    logprobs = policy.log_probs_row(task.state_id, temperature)
    probs = np.exp(logprobs)
    probs = probs / probs.sum()
    slots = rng.choice(policy.vocab, size=k, p=probs)
    corrupt_draws = rng.random(k) if corrupt_format_p > 0 else None

    ranked = sorted(range(policy.vocab), key=lambda v: (-logprobs[v], v))
    topk = tuple((v, float(logprobs[v])) for v in ranked)

    out: list[Trajectory] = []
    entropy_k = max(2, policy.vocab)
    for j in range(k):
        slot = int(slots[j])
        text = render_text(task, slot)
        if corrupt_draws is not None and corrupt_draws[j] < corrupt_format_p:
            text = corrupt_text(text)
        stats = TokenStats(token_id=slot, chosen_logprob=float(logprobs[slot]), topk_logprobs=topk)
        traj = Trajectory(
            sample_id=task.sample.id,
            text=text,
            tokens=(stats,),
            extracted=parse_output(text),
        )
        out.append(annotate(traj, k=entropy_k))
    return out


def warm_start(
    policy: TabularPolicy,
    tasks: Sequence[ToyTask],
    strengths: Sequence[float] = DEFAULT_WARM_STRENGTHS,
) -> TabularPolicy:
    """Seed each task's gold slot with a difficulty-dependent logit."""
    if len(strengths) != len(DIFFICULTIES):
        raise ValueError("need one strength per difficulty level")
    params = policy.params.copy()
    for task in tasks:
        params[task.state_id, task.gold_slot] = strengths[task.difficulty - 1]
    return policy.replace_params(params)


def group_sampler(tasks: Sequence[ToyTask], corrupt_format_p: float = 0.0):
    """Adapter giving the curriculum loops fresh toy rollouts.

    Training generation runs at the policy's own temperature so the
    recorded logprobs are exactly the old-policy logprobs the ratio needs.
    """
    by_id = {t.sample.id: t for t in tasks}

    def sampler(policy: TabularPolicy, sample: TableSample, k: int, seed: int) -> SampledGroup:
        task = by_id[sample.id]
        trajs = rollout(policy, task, k, temperature=None, seed=seed, corrupt_format_p=corrupt_format_p)
        return SampledGroup(
            trajectories=tuple(trajs),
            state_ids=tuple((task.state_id,) * len(t.tokens) for t in trajs),
            logprobs=tuple(tuple(ts.chosen_logprob for ts in t.tokens) for t in trajs),
        )

    return sampler


def evaluate_pass_values(
    policy: TabularPolicy,
    tasks: Sequence[ToyTask],
    k: int,
    seed: int,
    label: str = "partition",
) -> dict[str, float]:
    """Per-task empirical complete-rate over k fresh rollouts."""
    from .curriculum import pass_at_k
    from .reward import score

    out: dict[str, float] = {}
    for task in tasks:
        trajs = rollout(policy, task, k, seed=derive_seed(seed, label, task.sample.id))
        breakdowns = [score(t, task.sample) for t in trajs]
        out[task.sample.id] = pass_at_k(breakdowns)
    return out
