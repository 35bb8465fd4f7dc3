import math

import numpy as np
import pytest

from tablerl.grpo import (
    AdvantageSpec,
    ClipBounds,
    clipped_term,
    grpo_gradient,
    grpo_objective,
    group_advantages,
    objective_for_policy,
    sgd_step,
    token_ratios,
)
from tablerl.policy import TabularPolicy
from tablerl.types import GroupRollout, TokenStats, Trajectory

REWARD_LEVELS = (0.0, 0.2, 0.5, 0.7, 1.0)


def two_pass_mean_std(values):
    # Independent reimplementation: plain two-pass population statistics.
    mean = sum(values) / len(values)
    var = sum((v - mean) ** 2 for v in values) / len(values)
    return mean, math.sqrt(var)


class TestGroupAdvantages:
    def test_identical_rewards_zero(self):
        assert group_advantages([1.0, 1.0]) == [0.0, 0.0]

    def test_two_point_hand_oracle(self):
        adv = group_advantages([1.0, 0.0])
        # mean 0.5, population std 0.5 -> (0.5)/(0.5 + 1e-8)
        assert math.isclose(adv[0], 0.5 / (0.5 + 1e-8), rel_tol=0, abs_tol=1e-15)
        assert math.isclose(adv[0], 1.0, rel_tol=1e-7)
        assert math.isclose(adv[1], -1.0, rel_tol=1e-7)

    def test_matches_independent_mean_std(self):
        rewards = [0.2, 0.5, 1.0]
        mean, std = two_pass_mean_std(rewards)
        expected = [(r - mean) / (std + 1e-8) for r in rewards]
        got = group_advantages(rewards)
        assert all(abs(a - b) <= 1e-12 for a, b in zip(got, expected))

    def test_sum_near_zero(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            g = int(rng.integers(2, 9))
            rewards = [float(rng.choice(REWARD_LEVELS)) for _ in range(g)]
            adv = group_advantages(rewards)
            assert abs(sum(adv)) <= g * 1e-6

    def test_degenerate_group(self):
        with pytest.raises(ValueError, match="degenerate group"):
            group_advantages([1.0])


class TestTokenRatios:
    def test_identity_policy(self):
        assert token_ratios([-0.5, -1.0], [-0.5, -1.0]) == [1.0, 1.0]

    def test_log_two_difference(self):
        ratios = token_ratios([-0.5 + math.log(2)], [-0.5])
        assert math.isclose(ratios[0], 2.0, rel_tol=1e-12)

    def test_matches_exp_oracle(self):
        rng = np.random.default_rng(11)
        new = list(-rng.random(100) * 3)
        old = list(-rng.random(100) * 3)
        for r, n, o in zip(token_ratios(new, old), new, old):
            assert abs(r - math.exp(n - o)) <= 1e-12 * max(1.0, r)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            token_ratios([-0.5], [-0.5, -0.1])


def _stub_traj(sample_id, token_ids, logprobs):
    stats = tuple(
        TokenStats(token_id=v, chosen_logprob=lp, topk_logprobs=((v, lp),))
        for v, lp in zip(token_ids, logprobs)
    )
    return Trajectory(sample_id=sample_id, text="", tokens=stats)


def make_group(policy, states, tokens, old_shift, rewards, sample_id="g"):
    """Group whose new logprobs come from the policy exactly."""
    new = [policy.sequence_logprobs(s, t) for s, t in zip(states, tokens)]
    old = [[lp - d for lp, d in zip(row, shifts)] for row, shifts in zip(new, old_shift)]
    trajs = tuple(_stub_traj(sample_id, t, lp) for t, lp in zip(tokens, new))
    return GroupRollout(
        sample_id=sample_id,
        trajectories=trajs,
        old_token_logprobs=tuple(tuple(r) for r in old),
        new_token_logprobs=tuple(tuple(r) for r in new),
        rewards=tuple(rewards),
        state_ids=tuple(tuple(s) for s in states),
    )


class TestObjective:
    def test_identical_rewards_give_zero(self):
        policy = TabularPolicy.uniform(2, 3)
        g = make_group(policy, [[0], [1]], [[0], [1]], [[0.3], [-0.2]], [0.5, 0.5])
        value, terms = grpo_objective(g)
        assert value == 0.0
        assert all(t == 0.0 for row in terms for t in row)

    def test_unit_ratios_give_token_mean_of_advantages(self):
        policy = TabularPolicy.uniform(2, 3)
        states = [[0, 0, 1], [1, 0]]
        tokens = [[0, 1, 2], [2, 0]]
        g = make_group(policy, states, tokens, [[0.0] * 3, [0.0] * 2], [1.0, 0.0])
        adv = group_advantages(g.rewards)
        expected = (3 * adv[0] + 2 * adv[1]) / 5
        value, _ = grpo_objective(g)
        assert math.isclose(value, expected, rel_tol=1e-12)

    def test_single_token_clip_hand_case(self):
        # advantage +1, ratio 1.5, bounds (0.2, 0.28): clip(1.5, 0.8, 1.28)=1.28
        assert clipped_term(1.5, 1.0, ClipBounds(0.2, 0.28)) == 1.28

    def test_permutation_invariance(self):
        rng = np.random.default_rng(5)
        policy = TabularPolicy(rng.normal(size=(4, 5)))
        states = [[0, 1], [2], [3, 0, 1]]
        tokens = [[1, 2], [0], [4, 3, 2]]
        shifts = [[0.1, -0.2], [0.3], [-0.1, 0.2, 0.0]]
        rewards = [1.0, 0.2, 0.5]
        base, _ = grpo_objective(make_group(policy, states, tokens, shifts, rewards))
        perm = [2, 0, 1]
        permuted = make_group(
            policy,
            [states[i] for i in perm],
            [tokens[i] for i in perm],
            [shifts[i] for i in perm],
            [rewards[i] for i in perm],
        )
        value, _ = grpo_objective(permuted)
        assert math.isclose(value, base, rel_tol=1e-12)


class TestClippingSemantics:
    def test_positive_advantage_flat_above_high_bound(self):
        bounds = ClipBounds(0.2, 0.28)
        grid = np.linspace(0.01, 3.0, 600)
        terms = [clipped_term(float(r), 1.0, bounds) for r in grid]
        for a, b in zip(terms, terms[1:]):
            assert b >= a - 1e-15  # non-decreasing
        above = [t for r, t in zip(grid, terms) if r >= 1.28]
        assert all(t == above[0] for t in above)
        assert math.isclose(above[0], 1.28, rel_tol=1e-12)

    def test_negative_advantage_flat_below_low_bound(self):
        bounds = ClipBounds(0.2, 0.28)
        grid = np.linspace(0.01, 3.0, 600)
        terms = [clipped_term(float(r), -1.0, bounds) for r in grid]
        below = [t for r, t in zip(grid, terms) if r <= 0.8]
        assert all(t == below[0] for t in below)
        assert math.isclose(below[0], -0.8, rel_tol=1e-12)

    def test_symmetric_bounds_recover_ppo_clipping(self):
        sym = ClipBounds(0.2, 0.2)
        asym = ClipBounds(0.2, 0.28)
        for ratio in np.linspace(0.5, 1.6, 200):
            r = float(ratio)
            ppo = min(r * 1.0, min(max(r, 0.8), 1.2) * 1.0)
            assert clipped_term(r, 1.0, sym) == ppo
            # Asymmetry only changes terms for ratios in (1 + eps_low, 1 + eps_high]
            if not (1.2 < r <= 1.28 or r > 1.28):
                assert clipped_term(r, 1.0, asym) == clipped_term(r, 1.0, sym)

    def test_bounds_validation(self):
        with pytest.raises(ValueError):
            ClipBounds(0.3, 0.2)
        with pytest.raises(ValueError):
            ClipBounds(0.0, 0.2)


def random_instance(rng, max_g=4, max_len=6, max_vocab=8):
    """Random small instance with every token ratio kept away from the clip
    kinks so central differences stay valid."""
    bounds = ClipBounds(0.2, 0.28)
    while True:
        g = int(rng.integers(2, max_g + 1))
        vocab = int(rng.integers(3, max_vocab + 1))
        n_states = int(rng.integers(2, 7))
        temperature = float(rng.uniform(0.7, 1.3))
        policy = TabularPolicy(rng.normal(0, 1.0, size=(n_states, vocab)), temperature)
        lens = [int(rng.integers(1, max_len + 1)) for _ in range(g)]
        states = [[int(rng.integers(n_states)) for _ in range(n)] for n in lens]
        tokens = [[int(rng.integers(vocab)) for _ in range(n)] for n in lens]
        shifts = [[float(rng.uniform(-0.45, 0.45)) for _ in range(n)] for n in lens]
        rewards = [float(rng.choice(REWARD_LEVELS)) for _ in range(g)]
        if len(set(rewards)) < 2:
            continue
        adv = group_advantages(rewards)
        if min(abs(a) for a in adv) < 1e-3:
            continue
        group = make_group(policy, states, tokens, shifts, rewards)
        ok = True
        for i in range(g):
            for new, old in zip(group.new_token_logprobs[i], group.old_token_logprobs[i]):
                ratio = math.exp(new - old)
                if min(abs(ratio - 0.8), abs(ratio - 1.28)) < 5e-3:
                    ok = False
        if ok:
            return policy, group, bounds


def fd_gradient(policy, group, bounds, spec=AdvantageSpec(), h=1e-5):
    base = policy.params
    grad = np.zeros_like(base)
    for s in range(base.shape[0]):
        for v in range(base.shape[1]):
            plus = base.copy()
            plus[s, v] += h
            minus = base.copy()
            minus[s, v] -= h
            fp = objective_for_policy(TabularPolicy(plus, policy.temperature), group, bounds, spec)
            fm = objective_for_policy(TabularPolicy(minus, policy.temperature), group, bounds, spec)
            grad[s, v] = (fp - fm) / (2 * h)
    return grad


def max_relative_error(analytic, fd):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-6)
    return float(np.max(np.abs(analytic - fd) / denom))


class TestGradient:
    def test_zero_advantages_zero_gradient(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            policy = TabularPolicy(rng.normal(size=(3, 4)))
            g = make_group(policy, [[0], [1]], [[0], [1]], [[0.2], [-0.1]], [0.7, 0.7])
            value, _ = grpo_objective(g)
            grad = grpo_gradient(policy, g)
            assert value == 0.0
            assert np.all(grad == 0.0)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            policy, group, bounds = random_instance(rng)
            analytic = grpo_gradient(policy, group, bounds)
            numeric = fd_gradient(policy, group, bounds)
            assert max_relative_error(analytic, numeric) <= 1e-4

    def test_clipped_token_has_flat_objective(self):
        # One token pushed past 1 + eps_high with positive advantage: the
        # objective must be locally flat along that token's own logit.
        policy = TabularPolicy(np.zeros((1, 3)))
        bounds = ClipBounds(0.2, 0.28)
        new = policy.sequence_logprobs([0], [1])
        old = [new[0] - math.log(2.0)]  # ratio 2 > 1.28
        traj_hi = _stub_traj("g", [1], new)
        new2 = policy.sequence_logprobs([0], [2])
        traj_lo = _stub_traj("g", [2], new2)
        group = GroupRollout(
            sample_id="g",
            trajectories=(traj_hi, traj_lo),
            old_token_logprobs=(tuple(old), tuple(new2)),
            new_token_logprobs=(tuple(new), tuple(new2)),
            rewards=(1.0, 0.0),
            state_ids=((0,), (0,)),
        )
        analytic = grpo_gradient(policy, group, bounds)
        numeric = fd_gradient(policy, group, bounds)
        assert max_relative_error(analytic, numeric) <= 1e-4
        # The clipped positive-advantage token contributes nothing through
        # its ratio; only the negative-advantage token's terms remain.
        adv = group_advantages(group.rewards)
        p = policy.probs_row(0)
        expected = np.zeros((1, 3))
        coeff = adv[1] * 1.0 / 2.0  # ratio 1, two tokens total
        expected[0] -= coeff * p
        expected[0, 2] += coeff
        assert np.allclose(analytic, expected, atol=1e-12)

    def test_state_ids_required(self):
        policy = TabularPolicy.uniform(2, 3)
        g = make_group(policy, [[0], [1]], [[0], [1]], [[0.0], [0.0]], [1.0, 0.0])
        g = GroupRollout(
            sample_id=g.sample_id,
            trajectories=g.trajectories,
            old_token_logprobs=g.old_token_logprobs,
            new_token_logprobs=g.new_token_logprobs,
            rewards=g.rewards,
            state_ids=None,
        )
        with pytest.raises(ValueError, match="state_ids"):
            grpo_gradient(policy, g)

    def test_vocab_mismatch_rejected(self):
        policy = TabularPolicy.uniform(2, 3)
        g = make_group(policy, [[0], [1]], [[0], [1]], [[0.0], [0.0]], [1.0, 0.0])
        small = TabularPolicy.uniform(1, 3)
        with pytest.raises(ValueError, match="outside policy table"):
            grpo_gradient(small, g)


class TestSgdStep:
    def test_zero_gradient_unchanged(self):
        policy = TabularPolicy.uniform(2, 3)
        after = sgd_step(policy, np.zeros((2, 3)), learning_rate=1.0)
        assert np.array_equal(after.params, policy.params)

    def test_unit_lr_delta_equals_gradient(self):
        policy = TabularPolicy.uniform(2, 3)
        grad = np.arange(6, dtype=float).reshape(2, 3)
        after = sgd_step(policy, grad, learning_rate=1.0, decay=0.0)
        assert np.array_equal(after.params - policy.params, grad)

    def test_decay_schedule_closed_form(self):
        policy = TabularPolicy.uniform(1, 2)
        grad = np.ones((1, 2))
        lr, decay = 0.5, 0.01
        p1 = sgd_step(policy, grad, lr, decay, steps_taken=0)
        p2 = sgd_step(p1, grad, lr, decay, steps_taken=1)
        delta2 = p2.params - p1.params
        assert np.allclose(delta2, lr * 0.99 * grad)
        for n in (0, 1, 5, 17):
            pn = sgd_step(policy, grad, lr, decay, steps_taken=n)
            assert np.allclose(pn.params - policy.params, lr * (1 - decay) ** n * grad)

    def test_non_finite_gradient_refused(self):
        policy = TabularPolicy.uniform(1, 2)
        grad = np.array([[np.nan, 0.0]])
        with pytest.raises(ValueError, match="non-finite"):
            sgd_step(policy, grad, 0.1)

    def test_shape_mismatch_refused(self):
        policy = TabularPolicy.uniform(1, 2)
        with pytest.raises(ValueError):
            sgd_step(policy, np.zeros((2, 2)), 0.1)
