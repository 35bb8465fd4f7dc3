"""Shared builders for test fixtures."""

from __future__ import annotations

import math

from tablerl.types import ParsedAnswer, Table, TableSample, TokenStats, Trajectory


def make_sample(sid: str = "s1", gold=("a",), question: str = "q?") -> TableSample:
    return TableSample(
        id=sid,
        table=Table.from_rows([["item", "score"], ["alpha", "3"]]),
        question=question,
        gold_answers=tuple(gold),
        source="synthetic",
    )


def tagged_text(values) -> str:
    import json

    return "<think>t</think><answer>" + json.dumps({"answer": list(values)}) + "</answer>"


def make_traj(
    sid: str = "s1",
    values=("a",),
    confidence: float | None = 0.5,
    valid: bool = True,
    avg_logprob: float | None = None,
) -> Trajectory:
    """Trajectory stub with a consistent single-token stats block."""
    if valid:
        text = tagged_text(values)
        extracted = ParsedAnswer(think_text="t", answer_values=tuple(values), format_ok=True)
    else:
        text = "<answer>broken"
        extracted = ParsedAnswer(think_text="", answer_values=(), format_ok=False)
    lp = avg_logprob
    if lp is None and confidence is not None:
        lp = math.log(confidence) if confidence > 0 else -30.0
    tokens = ()
    if lp is not None:
        tokens = (TokenStats(token_id=0, chosen_logprob=lp, topk_logprobs=((0, lp),)),)
    return Trajectory(
        sample_id=sid,
        text=text,
        tokens=tokens,
        extracted=extracted,
        avg_logprob=lp,
        avg_entropy=0.0 if lp is not None else None,
        confidence=confidence,
    )
