"""Composite reward: weighted format/partial/complete indicators.

Format failure gates the content indicators to zero — an output that
cannot be parsed cannot earn content credit — so under default weights the
only reachable composites are {0, 0.2, 0.5, 1.0}.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence, Union

from .answers import NormalizationPolicy, match_answers, parse_output
from .types import RewardBreakdown, TableSample, Trajectory


@dataclass(frozen=True)
class RewardWeights:
    w_format: float = 0.2
    w_partial: float = 0.3
    w_complete: float = 0.5

    def __post_init__(self) -> None:
        if min(self.w_format, self.w_partial, self.w_complete) < 0:
            raise ValueError("reward weights must be non-negative")
        total = self.w_format + self.w_partial + self.w_complete
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"reward weights must sum to 1, got {total}")

    def is_default(self) -> bool:
        return (self.w_format, self.w_partial, self.w_complete) == (0.2, 0.3, 0.5)

    def to_dict(self) -> dict:
        return {"w_format": self.w_format, "w_partial": self.w_partial, "w_complete": self.w_complete}

    @classmethod
    def from_dict(cls, d: dict) -> "RewardWeights":
        return cls(
            w_format=float(d.get("w_format", 0.2)),
            w_partial=float(d.get("w_partial", 0.3)),
            w_complete=float(d.get("w_complete", 0.5)),
        )


DEFAULT_WEIGHTS = RewardWeights()


def composite_from_indicators(
    fmt: int,
    partial: int,
    complete: int,
    weights: RewardWeights = DEFAULT_WEIGHTS,
) -> float:
    """Weighted sum with the gating rule applied (format=0 zeroes content)."""
    if fmt == 0:
        partial = complete = 0
    return weights.w_format * fmt + weights.w_partial * partial + weights.w_complete * complete


def score(
    trajectory: Trajectory,
    sample: TableSample,
    weights: RewardWeights = DEFAULT_WEIGHTS,
    policy: Optional[NormalizationPolicy] = None,
) -> RewardBreakdown:
    """Score one trajectory against its sample's gold answers.

    Uses the trajectory's pre-parsed extraction when present, otherwise
    parses the raw text. Unparsed and unparseable trajectories are legal
    inputs and earn zero.
    """
    parsed = trajectory.extracted
    if parsed is None:
        parsed = parse_output(trajectory.text, policy)
    fmt = 1 if parsed.format_ok else 0
    partial = complete = 0
    if fmt == 1:
        partial, complete = match_answers(parsed.answer_values, sample.gold_answers, policy)
    composite = composite_from_indicators(fmt, partial, complete, weights)
    return RewardBreakdown(format=fmt, partial=partial, complete=complete, composite=composite)


@dataclass(frozen=True)
class BatchScore:
    """One batch entry: a breakdown, or an error that did not stop the batch."""

    index: int
    sample_id: str
    breakdown: Optional[RewardBreakdown] = None
    error: Optional[str] = None

    def to_record(self) -> dict:
        rec: dict = {"index": self.index, "sample_id": self.sample_id}
        if self.breakdown is not None:
            rec.update(self.breakdown.to_dict())
        if self.error is not None:
            rec["error"] = self.error
        return rec


def score_batch(
    trajectories: Sequence[Trajectory],
    samples: Union[Mapping[str, TableSample], Iterable[TableSample]],
    weights: RewardWeights = DEFAULT_WEIGHTS,
    policy: Optional[NormalizationPolicy] = None,
) -> list[BatchScore]:
    """Elementwise scoring, order-preserving; bad sample ids become error
    entries while the rest of the batch proceeds."""
    if isinstance(samples, Mapping):
        by_id = dict(samples)
    else:
        by_id = {s.id: s for s in samples}
    out: list[BatchScore] = []
    for i, t in enumerate(trajectories):
        sample = by_id.get(t.sample_id)
        if sample is None:
            out.append(BatchScore(i, t.sample_id, error=f"unknown sample_id: {t.sample_id}"))
        else:
            out.append(BatchScore(i, t.sample_id, breakdown=score(t, sample, weights, policy)))
    return out
