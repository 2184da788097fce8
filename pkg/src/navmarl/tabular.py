"""Small fully observable two-agent game with exactly computable objectives.

Two agents walk on a ring of ``cells`` cells (joint state = both
positions, ``cells**2`` states). Each picks stay / clockwise /
counter-clockwise; a move succeeds with probability ``p_move`` and
otherwise the agent stays put. Only agent 1's reward is tracked (it is the
"external" agent while agent 0's policy changes): a small step cost away
from its goal cell, a bonus on it, and a penalty for sharing a cell with
agent 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

N_ACTIONS = 3
MOVES = (0, 1, -1)


@dataclass
class RingGame:
    cells: int = 4
    p_move: float = 0.9
    goal: int = 3
    start: tuple[int, int] = (0, 2)
    step_cost: float = 0.1
    goal_bonus: float = 1.0
    collision_penalty: float = 1.0

    def __post_init__(self):
        c = self.cells
        self.n_states = c * c
        # P[s, a0, a1, s'] and the external reward r1(s, a0, a1, s')
        self.P = np.zeros((self.n_states, N_ACTIONS, N_ACTIONS, self.n_states))
        self.R = np.zeros_like(self.P)
        for s in range(self.n_states):
            p0, p1 = divmod(s, c)
            for a0 in range(N_ACTIONS):
                for a1 in range(N_ACTIONS):
                    for ok0 in (True, False):
                        for ok1 in (True, False):
                            pr = self._success(a0, ok0) * self._success(a1, ok1)
                            if pr == 0.0:
                                continue
                            n0 = (p0 + MOVES[a0]) % c if ok0 else p0
                            n1 = (p1 + MOVES[a1]) % c if ok1 else p1
                            s2 = n0 * c + n1
                            self.P[s, a0, a1, s2] += pr
                            self.R[s, a0, a1, s2] = self.reward(n0, n1)
        self.s0 = self.start[0] * c + self.start[1]

    def _success(self, a: int, ok: bool) -> float:
        if a == 0:  # staying always "succeeds"
            return 1.0 if ok else 0.0
        return self.p_move if ok else 1.0 - self.p_move

    def reward(self, n0: int, n1: int) -> float:
        r = self.goal_bonus if n1 == self.goal else -self.step_cost
        if n0 == n1:
            r -= self.collision_penalty
        return r

    @property
    def r_max(self) -> float:
        return float(np.abs(self.R).max())

    def joint_kernel(self, pi0: np.ndarray, pi1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """State transition matrix and expected one-step external reward under a joint policy."""
        w = pi0[:, :, None] * pi1[:, None, :]  # (s, a0, a1)
        T = np.einsum("sab,sabt->st", w, self.P)
        r = np.einsum("sab,sabt,sabt->s", w, self.P, self.R)
        return T, r

    def horizon_for(self, gamma: float, tol: float = 1e-6) -> int:
        """Smallest H with gamma^H * r_max / (1 - gamma) < tol."""
        return max(1, math.ceil(math.log(tol * (1 - gamma) / self.r_max) / math.log(gamma)) + 1)

    def truncation_error(self, gamma: float, horizon: int) -> float:
        return gamma ** horizon * self.r_max / (1 - gamma)

    def external_return(self, pi0: np.ndarray, pi1: np.ndarray, gamma: float, horizon: int) -> float:
        """sum_{t<H} gamma^t E[r1_t] from the start state, by backward induction."""
        T, r = self.joint_kernel(pi0, pi1)
        v = np.zeros(self.n_states)
        for _ in range(horizon):
            v = r + gamma * T @ v
        return float(v[self.s0])

    def reachable(self, pi0: np.ndarray, pi1: np.ndarray) -> np.ndarray:
        T, _ = self.joint_kernel(pi0, pi1)
        seen = np.zeros(self.n_states, dtype=bool)
        seen[self.s0] = True
        frontier = [self.s0]
        while frontier:
            s = frontier.pop()
            for s2 in np.nonzero(T[s] > 0)[0]:
                if not seen[s2]:
                    seen[s2] = True
                    frontier.append(int(s2))
        return seen

    def max_abs_reward(self, pi0: np.ndarray, pi1: np.ndarray) -> float:
        """Largest |r1| on any transition with positive probability under the joint policy."""
        seen = self.reachable(pi0, pi1)
        w = pi0[:, :, None, None] * pi1[:, None, :, None] * self.P
        live = (w > 0) & seen[:, None, None, None]
        return float(np.abs(self.R[live]).max()) if live.any() else 0.0


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """KL(p[s] || q[s]) for every row s; +inf where q has no mass under p's support."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=1)


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int = N_ACTIONS,
                  concentration: float = 1.0) -> np.ndarray:
    return rng.dirichlet(np.full(n_actions, concentration), size=n_states)
