"""Shared domain types: samples, rollouts, rewards, and rollout groups.

Everything here is a frozen dataclass meant to be treated as an immutable
value object: construct once, share freely across threads. Validation
helpers return lists of violation strings instead of raising, so malformed
records can flow through batch pipelines and be *reported* rather than
aborting the run.

The JSONL encodings produced by ``to_dict``/``from_dict`` are part of the
public contract; field names are stable. Reals are stored as 64-bit floats
and serialized as full-precision decimal text (Python's shortest
round-trip repr), so encode -> decode is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Optional

SOURCES = ("wtq_like", "hitab_like", "finqa_like", "synthetic")

# Canonical composite-reward weights; the breakdown invariant is defined
# against these. Runs using custom weights are marked in the manifest.
CANONICAL_REWARD_WEIGHTS = (0.2, 0.3, 0.5)


@dataclass(frozen=True)
class Table:
    """Rectangular grid of cell strings, optionally with a header row."""

    cells: tuple[tuple[str, ...], ...]
    has_header: bool = True

    @classmethod
    def from_rows(cls, rows: list[list[str]], has_header: bool = True) -> "Table":
        return cls(tuple(tuple(str(c) for c in row) for row in rows), has_header)

    @property
    def n_rows(self) -> int:
        return len(self.cells)

    @property
    def n_cols(self) -> int:
        return len(self.cells[0]) if self.cells else 0

    def is_rectangular(self) -> bool:
        return bool(self.cells) and all(len(r) == self.n_cols for r in self.cells)

    def body_rows(self) -> tuple[tuple[str, ...], ...]:
        return self.cells[1:] if self.has_header else self.cells

    def to_dict(self) -> dict:
        return {"cells": [list(r) for r in self.cells], "has_header": self.has_header}

    @classmethod
    def from_dict(cls, d: dict) -> "Table":
        return cls.from_rows(d["cells"], bool(d.get("has_header", True)))


@dataclass(frozen=True)
class TableSample:
    """One table + question + gold answers.

    ``gold_answers`` are stored pre-normalized; the raw originals are kept
    in the ``gold_answers_raw`` sidecar for audit.
    """

    id: str
    table: Table
    question: str
    gold_answers: tuple[str, ...]
    source: str = "synthetic"
    gold_answers_raw: Optional[tuple[str, ...]] = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "question": self.question,
            "table": self.table.to_dict(),
            "gold_answers": list(self.gold_answers),
            "gold_answers_raw": list(self.gold_answers_raw) if self.gold_answers_raw is not None else None,
            "source": self.source,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TableSample":
        raw = d.get("gold_answers_raw")
        return cls(
            id=str(d["id"]),
            table=Table.from_dict(d["table"]),
            question=str(d["question"]),
            gold_answers=tuple(str(a) for a in d["gold_answers"]),
            source=str(d.get("source", "synthetic")),
            gold_answers_raw=tuple(str(a) for a in raw) if raw is not None else None,
        )


@dataclass(frozen=True)
class TokenStats:
    """Per-token generation statistics ingested from the sampling process.

    ``topk_logprobs`` holds (token_id, logprob) pairs sorted descending by
    logprob and must include the chosen token.
    """

    token_id: int
    chosen_logprob: float
    topk_logprobs: tuple[tuple[int, float], ...]

    def to_dict(self) -> dict:
        return {
            "token_id": self.token_id,
            "chosen_logprob": self.chosen_logprob,
            "topk_logprobs": [[t, lp] for t, lp in self.topk_logprobs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TokenStats":
        return cls(
            token_id=int(d["token_id"]),
            chosen_logprob=float(d["chosen_logprob"]),
            topk_logprobs=tuple((int(t), float(lp)) for t, lp in d["topk_logprobs"]),
        )


@dataclass(frozen=True)
class ParsedAnswer:
    """Result of parsing the think/answer output format."""

    think_text: str
    answer_values: tuple[str, ...]
    format_ok: bool

    def to_dict(self) -> dict:
        return {
            "think_text": self.think_text,
            "answer_values": list(self.answer_values),
            "format_ok": self.format_ok,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParsedAnswer":
        return cls(
            think_text=str(d["think_text"]),
            answer_values=tuple(str(v) for v in d["answer_values"]),
            format_ok=bool(d["format_ok"]),
        )


@dataclass(frozen=True)
class RewardBreakdown:
    """Format/partial/complete indicators plus the weighted composite."""

    format: int
    partial: int
    complete: int
    composite: float

    def __post_init__(self) -> None:
        for name in ("format", "partial", "complete"):
            if getattr(self, name) not in (0, 1):
                raise ValueError(f"{name} indicator must be 0 or 1")
        if self.complete == 1 and self.partial != 1:
            raise ValueError("complete=1 requires partial=1")

    def to_dict(self) -> dict:
        return {
            "format": self.format,
            "partial": self.partial,
            "complete": self.complete,
            "composite": self.composite,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RewardBreakdown":
        return cls(
            format=int(d["format"]),
            partial=int(d["partial"]),
            complete=int(d["complete"]),
            composite=float(d["composite"]),
        )


@dataclass(frozen=True)
class Trajectory:
    """One rollout: raw text, per-token stats, extraction and scoring results.

    ``avg_entropy`` is stored already normalized to [0, 1], so the
    confidence invariant confidence = exp(avg_logprob) * (1 - avg_entropy)
    is closed-form checkable.
    """

    sample_id: str
    text: str
    tokens: tuple[TokenStats, ...] = ()
    extracted: Optional[ParsedAnswer] = None
    reward: Optional[RewardBreakdown] = None
    avg_logprob: Optional[float] = None
    avg_entropy: Optional[float] = None
    confidence: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "text": self.text,
            "tokens": [t.to_dict() for t in self.tokens],
            "extracted": self.extracted.to_dict() if self.extracted is not None else None,
            "reward": self.reward.to_dict() if self.reward is not None else None,
            "avg_logprob": self.avg_logprob,
            "avg_entropy": self.avg_entropy,
            "confidence": self.confidence,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        extracted = d.get("extracted")
        reward = d.get("reward")
        return cls(
            sample_id=str(d["sample_id"]),
            text=str(d["text"]),
            tokens=tuple(TokenStats.from_dict(t) for t in d.get("tokens", ())),
            extracted=ParsedAnswer.from_dict(extracted) if extracted is not None else None,
            reward=RewardBreakdown.from_dict(reward) if reward is not None else None,
            avg_logprob=_opt_float(d.get("avg_logprob")),
            avg_entropy=_opt_float(d.get("avg_entropy")),
            confidence=_opt_float(d.get("confidence")),
        )


@dataclass(frozen=True)
class GroupRollout:
    """A group of G rollouts for one sample, with old/new policy logprobs.

    ``state_ids`` names the policy softmax row that produced each token;
    it is required for analytic gradients but optional for objective-only
    evaluation of ingested groups.
    """

    sample_id: str
    trajectories: tuple[Trajectory, ...]
    old_token_logprobs: tuple[tuple[float, ...], ...]
    new_token_logprobs: tuple[tuple[float, ...], ...]
    rewards: tuple[float, ...]
    state_ids: Optional[tuple[tuple[int, ...], ...]] = None

    @property
    def group_size(self) -> int:
        return len(self.trajectories)

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "trajectories": [t.to_dict() for t in self.trajectories],
            "old_token_logprobs": [list(x) for x in self.old_token_logprobs],
            "new_token_logprobs": [list(x) for x in self.new_token_logprobs],
            "rewards": list(self.rewards),
            "state_ids": [list(x) for x in self.state_ids] if self.state_ids is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroupRollout":
        states = d.get("state_ids")
        return cls(
            sample_id=str(d["sample_id"]),
            trajectories=tuple(Trajectory.from_dict(t) for t in d["trajectories"]),
            old_token_logprobs=tuple(tuple(float(x) for x in row) for row in d["old_token_logprobs"]),
            new_token_logprobs=tuple(tuple(float(x) for x in row) for row in d["new_token_logprobs"]),
            rewards=tuple(float(r) for r in d["rewards"]),
            state_ids=tuple(tuple(int(s) for s in row) for row in states) if states is not None else None,
        )


def _opt_float(v: Any) -> Optional[float]:
    return None if v is None else float(v)


def validate_sample(s: TableSample) -> list[str]:
    """Check TableSample invariants; returns violation descriptors."""
    out: list[str] = []
    if not s.gold_answers:
        out.append("gold_answers is empty")
    for a in s.gold_answers:
        if not a.strip():
            out.append("gold answer empty after trimming")
            break
    if s.table.n_rows < 1:
        out.append("table has no rows")
    elif not s.table.is_rectangular():
        out.append("table rows have unequal column counts")
    if s.source not in SOURCES:
        out.append(f"unknown source {s.source!r}")
    return out


def validate_token_stats(ts: TokenStats) -> list[str]:
    out: list[str] = []
    if ts.chosen_logprob > 0:
        out.append("chosen_logprob > 0")
    if not ts.topk_logprobs:
        out.append("topk_logprobs is empty")
        return out
    if any(lp > 0 for _, lp in ts.topk_logprobs):
        out.append("top-k logprob > 0")
    lps = [lp for _, lp in ts.topk_logprobs]
    if any(lps[i] < lps[i + 1] for i in range(len(lps) - 1)):
        out.append("top-k list not sorted descending by logprob")
    if ts.token_id not in {t for t, _ in ts.topk_logprobs}:
        out.append("chosen token missing from top-k list")
    return out


def validate_trajectory(t: Trajectory) -> list[str]:
    """Check Trajectory invariants; empty list means all hold.

    Violations are data, not failures: callers decide whether to skip,
    repair, or abort.
    """
    out: list[str] = []
    for i, ts in enumerate(t.tokens):
        for v in validate_token_stats(ts):
            out.append(f"token {i}: {v}")
    stats_present = t.avg_logprob is not None or t.avg_entropy is not None
    if stats_present and not t.tokens:
        out.append("avg stats present but tokens is empty")
    if t.avg_logprob is not None and t.avg_logprob > 0:
        out.append("avg_logprob > 0")
    if t.avg_entropy is not None and not (0.0 <= t.avg_entropy <= 1.0):
        out.append("entropy out of [0,1]")
    if t.confidence is not None and t.confidence < 0:
        out.append("confidence < 0")
    if t.confidence is not None and t.avg_logprob is not None and t.avg_entropy is not None:
        expected = math.exp(t.avg_logprob) * (1.0 - t.avg_entropy)
        if not math.isclose(t.confidence, expected, rel_tol=1e-9, abs_tol=1e-12):
            out.append("confidence != exp(avg_logprob) * (1 - avg_entropy)")
    if t.reward is not None:
        wf, wp, wc = CANONICAL_REWARD_WEIGHTS
        expected_c = wf * t.reward.format + wp * t.reward.partial + wc * t.reward.complete
        if t.reward.composite != expected_c:
            out.append("reward composite does not match canonical weighted sum")
    return out


def validate_group(g: GroupRollout) -> list[str]:
    out: list[str] = []
    n = g.group_size
    if n < 2:
        out.append("degenerate group: fewer than 2 trajectories")
    if len(g.old_token_logprobs) != n or len(g.new_token_logprobs) != n:
        out.append("logprob array count does not match trajectory count")
        return out
    if len(g.rewards) != n:
        out.append("reward count does not match trajectory count")
    for i in range(n):
        if len(g.old_token_logprobs[i]) != len(g.new_token_logprobs[i]):
            out.append(f"trajectory {i}: old/new logprob length mismatch")
    if g.state_ids is not None:
        if len(g.state_ids) != n:
            out.append("state_ids count does not match trajectory count")
        else:
            for i in range(n):
                if len(g.state_ids[i]) != len(g.new_token_logprobs[i]):
                    out.append(f"trajectory {i}: state_ids length mismatch")
    return out
