"""Token-level confidence metrics and consistency-confidence fusion selection.

A trajectory's confidence is exp(avg_logprob) * (1 - avg_entropy), with
the entropy normalized to [0, 1] by ln(k) over renormalized top-k
candidates; an unbounded entropy would make the confidence formula
non-monotone (and negative), so the normalization is load-bearing.

Selection groups valid rollouts by normalized answer, scores each group by
a weighted sum of normalized consistency, average confidence, and maximum
confidence, and returns the highest-confidence member of the winning
group. The heavy maximum-confidence weight is what lets a high-quality
minority answer beat a confident-looking majority.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

from .answers import NormalizationPolicy, match_answers
from .types import Trajectory

ENTROPY_TOP_K = 20


@dataclass(frozen=True)
class FusionWeights:
    w_consistency: float = 0.25
    w_avg_conf: float = 0.2
    w_max_conf: float = 0.55

    def __post_init__(self) -> None:
        if min(self.w_consistency, self.w_avg_conf, self.w_max_conf) < 0:
            raise ValueError("fusion weights must be non-negative")
        total = self.w_consistency + self.w_avg_conf + self.w_max_conf
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"fusion weights must sum to 1, got {total}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.w_consistency, self.w_avg_conf, self.w_max_conf)

    def to_dict(self) -> dict:
        return {
            "w_consistency": self.w_consistency,
            "w_avg_conf": self.w_avg_conf,
            "w_max_conf": self.w_max_conf,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FusionWeights":
        return cls(
            w_consistency=float(d.get("w_consistency", 0.25)),
            w_avg_conf=float(d.get("w_avg_conf", 0.2)),
            w_max_conf=float(d.get("w_max_conf", 0.55)),
        )


DEFAULT_FUSION_WEIGHTS = FusionWeights()


def avg_logprob(t: Trajectory) -> float:
    """Arithmetic mean of the chosen-token logprobs."""
    if not t.tokens:
        raise ValueError("trajectory has no tokens")
    return sum(ts.chosen_logprob for ts in t.tokens) / len(t.tokens)


def avg_entropy(t: Trajectory, k: int = ENTROPY_TOP_K) -> float:
    """Mean per-step Shannon entropy over renormalized top-k candidates,
    normalized by ln(k) so the result lies in [0, 1]."""
    if k < 2:
        raise ValueError("entropy normalizer undefined for k < 2")
    if not t.tokens:
        raise ValueError("trajectory has no tokens")
    total = 0.0
    for ts in t.tokens:
        if not ts.topk_logprobs:
            raise ValueError("token has no top-k entries")
        lps = [lp for _, lp in ts.topk_logprobs[:k]]
        weights = [math.exp(lp) for lp in lps]
        z = sum(weights)
        h = 0.0
        for w in weights:
            p = w / z
            if p > 0:
                h -= p * math.log(p)
        total += h
    # Clamp away the 1-ulp overshoot a uniform distribution can produce.
    return min(1.0, max(0.0, total / (len(t.tokens) * math.log(k))))


def confidence(t: Trajectory) -> float:
    """exp(avg_logprob) * (1 - avg_entropy); both inputs must be present."""
    if t.avg_logprob is None or t.avg_entropy is None:
        raise ValueError("confidence requires avg_logprob and avg_entropy")
    return math.exp(t.avg_logprob) * (1.0 - t.avg_entropy)


def annotate(t: Trajectory, k: int = ENTROPY_TOP_K) -> Trajectory:
    """Return a copy with avg_logprob, avg_entropy, and confidence filled in."""
    lp = avg_logprob(t)
    ent = avg_entropy(t, k)
    t = replace(t, avg_logprob=lp, avg_entropy=ent)
    return replace(t, confidence=confidence(t))


def _traj_confidence(t: Trajectory) -> float:
    if t.confidence is not None:
        return t.confidence
    return confidence(t)


def answer_key(values: Sequence[str]) -> str:
    """Canonical grouping key: order-insensitive, exact-match after
    normalization (no semantic clustering)."""
    return json.dumps(sorted(values), ensure_ascii=False)


@dataclass(frozen=True)
class AnswerGroupStats:
    key: str
    answer_values: tuple[str, ...]
    indices: tuple[int, ...]
    consistency: int
    avg_conf: float
    max_conf: float
    norm_consistency: float
    norm_avg_conf: float
    norm_max_conf: float
    score: float

    def to_dict(self) -> dict:
        return {
            "key": self.key,
            "answer_values": list(self.answer_values),
            "indices": list(self.indices),
            "consistency": self.consistency,
            "avg_conf": self.avg_conf,
            "max_conf": self.max_conf,
            "norm_consistency": self.norm_consistency,
            "norm_avg_conf": self.norm_avg_conf,
            "norm_max_conf": self.norm_max_conf,
            "score": self.score,
        }


@dataclass(frozen=True)
class FusionReport:
    groups: tuple[AnswerGroupStats, ...]
    selected_key: str
    selected_answer: tuple[str, ...]
    selected_index: int
    n_valid: int
    n_dropped: int
    fallback: bool = False

    def to_dict(self) -> dict:
        return {
            "groups": [g.to_dict() for g in self.groups],
            "selected_key": self.selected_key,
            "selected_answer": list(self.selected_answer),
            "selected_index": self.selected_index,
            "n_valid": self.n_valid,
            "n_dropped": self.n_dropped,
            "fallback": self.fallback,
        }


def _collect_groups(rollouts: Sequence[Trajectory]) -> dict[str, list[tuple[int, float, tuple[str, ...]]]]:
    groups: dict[str, list[tuple[int, float, tuple[str, ...]]]] = {}
    for i, t in enumerate(rollouts):
        if t.extracted is None or not t.extracted.format_ok:
            continue
        key = answer_key(t.extracted.answer_values)
        groups.setdefault(key, []).append((i, _traj_confidence(t), t.extracted.answer_values))
    return groups


def _normalize(value: float, maximum: float) -> float:
    # A zero maximum yields 0, not an error, keeping the score total.
    return value / maximum if maximum > 0 else 0.0


def fuse_select(
    rollouts: Sequence[Trajectory],
    weights: FusionWeights = DEFAULT_FUSION_WEIGHTS,
) -> FusionReport:
    """Select the most credible answer group, then its most confident member.

    Ties on the fused score break toward higher max confidence, then
    higher consistency, then lexicographically smaller answer key.
    """
    if not rollouts:
        raise ValueError("no rollouts")
    groups = _collect_groups(rollouts)
    if not groups:
        raise ValueError("no valid answer")

    raw = []
    for key, members in groups.items():
        confs = [c for _, c, _ in members]
        raw.append((key, members, len(members), sum(confs) / len(confs), max(confs)))
    max_cons = max(r[2] for r in raw)
    max_avg = max(r[3] for r in raw)
    max_max = max(r[4] for r in raw)

    stats: list[AnswerGroupStats] = []
    for key, members, cons, avg_c, max_c in raw:
        n_cons = _normalize(cons, max_cons)
        n_avg = _normalize(avg_c, max_avg)
        n_max = _normalize(max_c, max_max)
        score = weights.w_consistency * n_cons + weights.w_avg_conf * n_avg + weights.w_max_conf * n_max
        stats.append(
            AnswerGroupStats(
                key=key,
                answer_values=members[0][2],
                indices=tuple(i for i, _, _ in members),
                consistency=cons,
                avg_conf=avg_c,
                max_conf=max_c,
                norm_consistency=n_cons,
                norm_avg_conf=n_avg,
                norm_max_conf=n_max,
                score=score,
            )
        )

    winner = sorted(stats, key=lambda g: (-g.score, -g.max_conf, -g.consistency, g.key))[0]
    members = groups[winner.key]
    sel_index, _, _ = max(members, key=lambda m: (m[1], -m[0]))
    n_valid = sum(len(m) for m in groups.values())
    return FusionReport(
        groups=tuple(stats),
        selected_key=winner.key,
        selected_answer=winner.answer_values,
        selected_index=sel_index,
        n_valid=n_valid,
        n_dropped=len(rollouts) - n_valid,
    )


def select_with_fallback(
    rollouts: Sequence[Trajectory],
    weights: FusionWeights = DEFAULT_FUSION_WEIGHTS,
) -> FusionReport:
    """fuse_select, falling back to the highest-avg-logprob rollout (flagged
    unverified) when every rollout is invalid."""
    try:
        return fuse_select(rollouts, weights)
    except ValueError as e:
        if "no valid answer" not in str(e):
            raise
    best = max(
        range(len(rollouts)),
        key=lambda i: (
            rollouts[i].avg_logprob if rollouts[i].avg_logprob is not None else -math.inf,
            -i,
        ),
    )
    return FusionReport(
        groups=(),
        selected_key="",
        selected_answer=(),
        selected_index=best,
        n_valid=0,
        n_dropped=len(rollouts),
        fallback=True,
    )


def majority_select(rollouts: Sequence[Trajectory]) -> Trajectory:
    """Baseline: most frequent valid answer wins; ties break by higher max
    confidence, then lexicographically smaller answer key."""
    if not rollouts:
        raise ValueError("no rollouts")
    groups = _collect_groups(rollouts)
    if not groups:
        raise ValueError("no valid answer")
    scored = [
        (key, members, len(members), max(c for _, c, _ in members)) for key, members in groups.items()
    ]
    key, members, _, _ = sorted(scored, key=lambda g: (-g[2], -g[3], g[0]))[0]
    sel_index, _, _ = max(members, key=lambda m: (m[1], -m[0]))
    return rollouts[sel_index]


def grid_weight_triples(grid_step: float) -> list[FusionWeights]:
    """All simplex-constrained weight triples on the grid."""
    if not 0 < grid_step <= 1:
        raise ValueError("grid step must be in (0, 1]")
    n = round(1.0 / grid_step)
    if abs(n * grid_step - 1.0) > 1e-9:
        raise ValueError("grid step must divide 1 evenly")
    out = []
    for i in range(n + 1):
        for j in range(n + 1 - i):
            k = n - i - j
            out.append(FusionWeights(i / n, j / n, k / n))
    return out


def selection_accuracy(
    runs: Sequence[tuple[Sequence[Trajectory], Sequence[str]]],
    select_fn: Callable[[Sequence[Trajectory]], Trajectory],
    policy: Optional[NormalizationPolicy] = None,
) -> float:
    """Fraction of labeled runs whose selected answer completely matches gold.

    Runs on which selection fails (all rollouts invalid) count as wrong.
    """
    if not runs:
        raise ValueError("no labeled runs")
    correct = 0
    for rollouts, gold in runs:
        try:
            chosen = select_fn(rollouts)
        except ValueError:
            continue
        if chosen.extracted is None:
            continue
        _, complete = match_answers(chosen.extracted.answer_values, gold, policy)
        correct += complete
    return correct / len(runs)


def calibrate_weights(
    runs: Sequence[tuple[Sequence[Trajectory], Sequence[str]]],
    grid_step: float = 0.05,
    policy: Optional[NormalizationPolicy] = None,
) -> FusionWeights:
    """Exhaustive grid search for the accuracy-maximizing weight triple.

    Ties break toward the default triple (0.25, 0.2, 0.55): the default
    itself if it is among the maximizers, else the maximizer nearest to it
    in Euclidean distance, then lexicographically smallest.
    """
    if not runs:
        raise ValueError("no labeled runs")
    candidates = grid_weight_triples(grid_step)
    default = DEFAULT_FUSION_WEIGHTS.as_tuple()

    def fuse_with(w: FusionWeights) -> Callable[[Sequence[Trajectory]], Trajectory]:
        def select(rollouts: Sequence[Trajectory]) -> Trajectory:
            report = fuse_select(rollouts, w)
            return rollouts[report.selected_index]

        return select

    scored = [(selection_accuracy(runs, fuse_with(w), policy), w) for w in candidates]
    best_acc = max(acc for acc, _ in scored)
    winners = [w for acc, w in scored if acc == best_acc]
    for w in winners:
        if w.as_tuple() == default:
            return w

    def tiebreak(w: FusionWeights) -> tuple[float, tuple[float, float, float]]:
        dist = math.dist(w.as_tuple(), default)
        return (dist, w.as_tuple())

    return min(winners, key=tiebreak)
