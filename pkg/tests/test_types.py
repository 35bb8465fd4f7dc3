import json
import math
import random

import pytest

from tablerl.types import (
    GroupRollout,
    ParsedAnswer,
    RewardBreakdown,
    Table,
    TableSample,
    TokenStats,
    Trajectory,
    validate_group,
    validate_sample,
    validate_trajectory,
)

from util import make_sample, make_traj


def test_reward_breakdown_rejects_complete_without_partial():
    with pytest.raises(ValueError):
        RewardBreakdown(format=1, partial=0, complete=1, composite=0.7)


def test_reward_breakdown_rejects_non_binary_indicator():
    with pytest.raises(ValueError):
        RewardBreakdown(format=2, partial=0, complete=0, composite=0.0)


def test_validate_trajectory_consistent_confidence():
    lp, ent = -0.4, 0.3
    t = Trajectory(
        sample_id="s",
        text="",
        tokens=(TokenStats(0, lp, ((0, lp),)),),
        avg_logprob=lp,
        avg_entropy=ent,
        confidence=math.exp(lp) * (1 - ent),
    )
    assert validate_trajectory(t) == []


def test_validate_trajectory_entropy_bound():
    t = Trajectory(
        sample_id="s",
        text="",
        tokens=(TokenStats(0, -0.1, ((0, -0.1),)),),
        avg_logprob=-0.1,
        avg_entropy=1.2,
    )
    violations = validate_trajectory(t)
    assert any("entropy out of [0,1]" in v for v in violations)


def test_validate_trajectory_stats_without_tokens():
    t = Trajectory(sample_id="s", text="", tokens=(), avg_logprob=-0.1)
    violations = validate_trajectory(t)
    assert len(violations) == 1
    assert "tokens is empty" in violations[0]


def test_validate_trajectory_flags_inconsistent_confidence():
    t = Trajectory(
        sample_id="s",
        text="",
        tokens=(TokenStats(0, -0.4, ((0, -0.4),)),),
        avg_logprob=-0.4,
        avg_entropy=0.3,
        confidence=0.9,
    )
    assert any("confidence" in v for v in validate_trajectory(t))


def test_validate_token_stats_ordering_and_membership():
    bad_order = Trajectory(
        sample_id="s",
        text="",
        tokens=(TokenStats(0, -0.5, ((1, -1.0), (0, -0.5))),),
    )
    assert any("sorted" in v for v in validate_trajectory(bad_order))
    missing = Trajectory(sample_id="s", text="", tokens=(TokenStats(3, -0.5, ((0, -0.5),)),))
    assert any("missing from top-k" in v for v in validate_trajectory(missing))


def test_validate_sample_catches_ragged_table_and_empty_gold():
    ragged = TableSample(
        id="x",
        table=Table(cells=(("a", "b"), ("c",)), has_header=True),
        question="q",
        gold_answers=("a",),
    )
    assert any("unequal column" in v for v in validate_sample(ragged))
    empty = make_sample(gold=("  ",))
    assert any("empty after trimming" in v for v in validate_sample(empty))
    assert validate_sample(make_sample()) == []


def _random_trajectory(rng: random.Random, sid: str) -> Trajectory:
    n = rng.randint(1, 5)
    tokens = []
    for _ in range(n):
        lp = -rng.random() * 3
        extra = sorted((-rng.random() * 4 for _ in range(rng.randint(0, 3))), reverse=True)
        pairs = sorted(
            [(0, lp)] + [(i + 1, e) for i, e in enumerate(extra)], key=lambda p: (-p[1], p[0])
        )
        tokens.append(TokenStats(0, lp, tuple(pairs)))
    lp_avg = sum(t.chosen_logprob for t in tokens) / n
    ent = rng.random()
    return Trajectory(
        sample_id=sid,
        text=f"<think>{rng.random()}</think><answer>{{}}</answer>",
        tokens=tuple(tokens),
        extracted=ParsedAnswer("think", ("v",), True),
        reward=RewardBreakdown(1, 1, 0, 0.5),
        avg_logprob=lp_avg,
        avg_entropy=ent,
        confidence=math.exp(lp_avg) * (1 - ent),
    )


def test_serialization_round_trip_identity():
    rng = random.Random(7)
    for i in range(50):
        t = _random_trajectory(rng, f"s{i}")
        encoded = json.dumps(t.to_dict())
        assert Trajectory.from_dict(json.loads(encoded)) == t

    s = make_sample(gold=("1,234", "x"))
    assert TableSample.from_dict(json.loads(json.dumps(s.to_dict()))) == s

    g = GroupRollout(
        sample_id="s",
        trajectories=(make_traj(), make_traj(values=("b",))),
        old_token_logprobs=((-0.5,), (-0.25,)),
        new_token_logprobs=((-0.4,), (-0.3,)),
        rewards=(1.0, 0.2),
        state_ids=((0,), (0,)),
    )
    assert GroupRollout.from_dict(json.loads(json.dumps(g.to_dict()))) == g


def test_float_round_trip_is_exact():
    # Shortest-repr decimal text reproduces the exact double.
    values = [0.1, 1e-300, math.pi, -0.4549879947844751, 2.0 / 3.0]
    for v in values:
        assert json.loads(json.dumps(v)) == v


def test_validate_group_length_rules():
    t = make_traj()
    g = GroupRollout(
        sample_id="s",
        trajectories=(t, t),
        old_token_logprobs=((-0.5,), (-0.25, -0.1)),
        new_token_logprobs=((-0.4,), (-0.3,)),
        rewards=(1.0, 0.2),
    )
    assert any("length mismatch" in v for v in validate_group(g))
    single = GroupRollout(
        sample_id="s",
        trajectories=(t,),
        old_token_logprobs=((-0.5,),),
        new_token_logprobs=((-0.4,),),
        rewards=(1.0,),
    )
    assert any("degenerate" in v for v in validate_group(single))
