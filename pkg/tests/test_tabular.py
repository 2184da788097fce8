import math

import numpy as np
import pytest

from navmarl.sed import nonstationarity_bound
from navmarl.tabular import RingGame, kl_rows, random_policy


def test_fixture_shape_and_kernel():
    g = RingGame()
    assert g.n_states == 16 <= 16
    np.testing.assert_allclose(g.P.sum(axis=3), 1.0, atol=1e-15)
    # rewards are 1 (goal), -0.1 (step), -1.1 (collision off goal), 0 (collision on goal)
    assert g.r_max == pytest.approx(1.1)


def test_reward_table():
    g = RingGame()
    assert g.reward(0, 3) == 1.0
    assert g.reward(1, 2) == -0.1
    assert g.reward(2, 2) == pytest.approx(-1.1)
    assert g.reward(3, 3) == 0.0


def test_horizon_makes_truncation_negligible():
    g = RingGame()
    h = g.horizon_for(0.9)
    assert g.truncation_error(0.9, h) < 1e-6
    assert g.truncation_error(0.9, h - 2) >= 1e-6


def test_truncated_return_matches_linear_solve():
    g = RingGame()
    rng = np.random.default_rng(0)
    pi0, pi1 = random_policy(rng, 16), random_policy(rng, 16)
    T, r = g.joint_kernel(pi0, pi1)
    exact = np.linalg.solve(np.eye(16) - 0.9 * T, r)[g.s0]
    h = g.horizon_for(0.9)
    assert abs(g.external_return(pi0, pi1, 0.9, h) - exact) <= g.truncation_error(0.9, h)


def test_kl_rows():
    p = np.array([[0.5, 0.5, 0.0], [1.0, 0.0, 0.0], [0.2, 0.3, 0.5]])
    q = np.array([[0.25, 0.75, 0.0], [0.0, 1.0, 0.0], [0.2, 0.3, 0.5]])
    kl = kl_rows(p, q)
    assert kl[0] == pytest.approx(0.5 * math.log(2) + 0.5 * math.log(0.5 / 0.75))
    assert kl[1] == math.inf
    assert kl[2] == 0.0


def test_identical_policies_have_zero_gap():
    g = RingGame()
    rng = np.random.default_rng(3)
    pi0, pi1 = random_policy(rng, 16), random_policy(rng, 16)
    h = g.horizon_for(0.9)
    assert g.external_return(pi0, pi1, 0.9, h) == g.external_return(pi0.copy(), pi1, 0.9, h)
    assert nonstationarity_bound(g.max_abs_reward(pi0, pi1), float(kl_rows(pi0, pi0).max()), 0.9) == 0.0


def test_max_abs_reward_respects_support():
    g = RingGame(start=(0, 2))
    stay = np.zeros((16, 3))
    stay[:, 0] = 1.0
    # nobody moves: agent 1 sits on cell 2 forever, reward -0.1
    assert g.max_abs_reward(stay, stay) == pytest.approx(0.1)


def test_bound_can_fail_for_nearly_identical_policies():
    """The bound is linear in the KL divergence while the true change grows like its square root,
    so tiny perturbations of agent 0's policy can exceed it. Independent random pairs do not."""
    g = RingGame()
    gamma = 0.9
    h = g.horizon_for(gamma)
    rng = np.random.default_rng(0)
    violations = 0
    for _ in range(200):
        base = random_policy(rng, 16)
        pi1 = random_policy(rng, 16)
        noise = rng.normal(0, 1e-3, base.shape)
        near = np.clip(base + noise, 1e-9, None)
        near /= near.sum(axis=1, keepdims=True)
        lhs = g.external_return(near, pi1, gamma, h) - g.external_return(base, pi1, gamma, h)
        r = max(g.max_abs_reward(near, pi1), g.max_abs_reward(base, pi1))
        bound = nonstationarity_bound(r, float(kl_rows(near, base).max()), gamma)
        violations += lhs > bound + g.truncation_error(gamma, h)
    assert violations > 0
