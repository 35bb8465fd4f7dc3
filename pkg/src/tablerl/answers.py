"""Output-format parsing, answer normalization, and gold matching.

The slow-thinking output contract is one ``<think>...</think>`` block
followed by one ``<answer>...</answer>`` block whose body is a JSON object
with an ``"answer"`` list of strings (scalars are promoted to one-element
lists). Anything else fails format; there is no error channel because a
failed parse is itself the signal the reward and selection layers consume.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from typing import Optional, Sequence

from .types import ParsedAnswer, TableSample, Trajectory

THINK_OPEN, THINK_CLOSE = "<think>", "</think>"
ANSWER_OPEN, ANSWER_CLOSE = "<answer>", "</answer>"

_INT_RE = re.compile(r"[+-]?\d+\Z")
_FLOAT_RE = re.compile(r"[+-]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?\Z")
# Thousands separators: 1-3 leading digits then comma-separated triples.
_SEPARATED_RE = re.compile(r"[+-]?\d{1,3}(?:,\d{3})+(?:\.\d*)?\Z")


@dataclass(frozen=True)
class NormalizationPolicy:
    """Knobs for answer-string canonicalization and numeric comparison."""

    case_fold: bool = True
    strip_whitespace: bool = True
    strip_thousands_separators: bool = True
    numeric_rel_tolerance: float = 1e-6
    percent_equivalence: bool = True

    def __post_init__(self) -> None:
        if self.numeric_rel_tolerance < 0:
            raise ValueError("numeric_rel_tolerance must be >= 0")

    def to_dict(self) -> dict:
        return {
            "case_fold": self.case_fold,
            "strip_whitespace": self.strip_whitespace,
            "strip_thousands_separators": self.strip_thousands_separators,
            "numeric_rel_tolerance": self.numeric_rel_tolerance,
            "percent_equivalence": self.percent_equivalence,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationPolicy":
        return cls(
            case_fold=bool(d.get("case_fold", True)),
            strip_whitespace=bool(d.get("strip_whitespace", True)),
            strip_thousands_separators=bool(d.get("strip_thousands_separators", True)),
            numeric_rel_tolerance=float(d.get("numeric_rel_tolerance", 1e-6)),
            percent_equivalence=bool(d.get("percent_equivalence", True)),
        )


DEFAULT_POLICY = NormalizationPolicy()

_INVALID = ParsedAnswer(think_text="", answer_values=(), format_ok=False)


def _find_all(text: str, token: str) -> list[int]:
    out, start = [], 0
    while True:
        i = text.find(token, start)
        if i < 0:
            return out
        out.append(i)
        start = i + len(token)


def parse_output(text: str, policy: Optional[NormalizationPolicy] = None) -> ParsedAnswer:
    """Parse the think/answer format; malformed input yields format_ok=False.

    Exactly one of each tag is required, in think-before-answer order;
    nested or duplicated tag pairs invalidate the format. The answer body
    must be a JSON object whose "answer" key maps to a non-empty list of
    scalars (a bare scalar is promoted to a one-element list). On success
    ``answer_values`` holds the normalized strings.
    """
    policy = policy if policy is not None else DEFAULT_POLICY
    positions = {}
    for tag in (THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE):
        found = _find_all(text, tag)
        if len(found) != 1:
            return _INVALID
        positions[tag] = found[0]
    to, tc = positions[THINK_OPEN], positions[THINK_CLOSE]
    ao, ac = positions[ANSWER_OPEN], positions[ANSWER_CLOSE]
    if not (to < tc < ao < ac):
        return _INVALID

    think_text = text[to + len(THINK_OPEN) : tc]
    payload = text[ao + len(ANSWER_OPEN) : ac]
    try:
        obj = json.loads(payload)
    except (json.JSONDecodeError, ValueError):
        return _INVALID
    if not isinstance(obj, dict) or "answer" not in obj:
        return _INVALID
    raw = obj["answer"]
    if isinstance(raw, (str, int, float, bool)):
        raw = [raw]
    if not isinstance(raw, list) or not raw:
        return _INVALID
    values: list[str] = []
    for v in raw:
        if isinstance(v, bool):
            values.append("true" if v else "false")
        elif isinstance(v, (str, int, float)):
            values.append(str(v))
        else:
            return _INVALID
    normalized = tuple(normalize_answer(v, policy) for v in values)
    return ParsedAnswer(think_text=think_text, answer_values=normalized, format_ok=True)


def _canonical_number(s: str) -> str:
    if _INT_RE.fullmatch(s):
        return str(int(s))  # exact at any magnitude; strips leading zeros
    v = float(s)
    if abs(v) < 1e16 and v == int(v):
        return str(int(v))
    return repr(v)


def _is_numeric_text(s: str, policy: NormalizationPolicy) -> bool:
    if _INT_RE.fullmatch(s) or _FLOAT_RE.fullmatch(s):
        return True
    return policy.strip_thousands_separators and bool(_SEPARATED_RE.fullmatch(s))


def normalize_answer(raw: str, policy: Optional[NormalizationPolicy] = None) -> str:
    """Deterministic, idempotent canonicalization of an answer string."""
    policy = policy if policy is not None else DEFAULT_POLICY
    s = raw
    if policy.strip_whitespace:
        s = " ".join(s.split())
    if policy.case_fold:
        s = s.casefold()
    if policy.percent_equivalence and s.endswith("%"):
        body = s[:-1].strip()
        if _is_numeric_text(body, policy):
            s = body
    if policy.strip_thousands_separators and _SEPARATED_RE.fullmatch(s):
        s = s.replace(",", "")
    if _FLOAT_RE.fullmatch(s):
        s = _canonical_number(s)
    return s


def values_equal(a: str, b: str, policy: Optional[NormalizationPolicy] = None) -> bool:
    """Equality of two *normalized* values, numeric-aware within tolerance."""
    if a == b:
        return True
    policy = policy if policy is not None else DEFAULT_POLICY
    if _FLOAT_RE.fullmatch(a) and _FLOAT_RE.fullmatch(b):
        return math.isclose(float(a), float(b), rel_tol=policy.numeric_rel_tolerance, abs_tol=0.0)
    return False


def _perfect_matching(pred: list[str], gold: list[str], policy: NormalizationPolicy) -> bool:
    # Tiny backtracking matcher; answer lists are short, so worst case is fine.
    if len(pred) != len(gold):
        return False
    used = [False] * len(gold)

    def place(i: int) -> bool:
        if i == len(pred):
            return True
        for j in range(len(gold)):
            if not used[j] and values_equal(pred[i], gold[j], policy):
                used[j] = True
                if place(i + 1):
                    return True
                used[j] = False
        return False

    return place(0)


def match_answers(
    pred: Sequence[str],
    gold: Sequence[str],
    policy: Optional[NormalizationPolicy] = None,
) -> tuple[int, int]:
    """Return (partial, complete) indicators for predictions vs gold.

    partial=1 iff any normalized prediction equals any normalized gold
    value; complete=1 iff the normalized multisets are equal. Matching is
    invariant under permutation of either list, and complete implies
    partial.
    """
    if not gold:
        raise ValueError("gold answers must be non-empty")
    if not pred:
        return (0, 0)
    policy = policy if policy is not None else DEFAULT_POLICY
    p = [normalize_answer(x, policy) for x in pred]
    g = [normalize_answer(x, policy) for x in gold]
    partial = 1 if any(values_equal(a, b, policy) for a in p for b in g) else 0
    complete = 1 if _perfect_matching(p, g, policy) else 0
    return (partial, complete)


def self_verify(
    generated: Trajectory,
    sample: TableSample,
    policy: Optional[NormalizationPolicy] = None,
) -> bool:
    """Demonstration filter: keep only well-formed, completely correct rollouts."""
    if generated.extracted is None:
        raise ValueError("trajectory has no extracted answer")
    parsed = generated.extracted
    if not parsed.format_ok:
        return False
    _, complete = match_answers(parsed.answer_values, sample.gold_answers, policy)
    return complete == 1
