"""Per-agent trajectories, bootstrapped returns, advantages and DTW."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

from .errors import ContractViolation

PROVENANCES = ("agent", "expert")


@dataclass
class Trajectory:
    """One agent's (observation, action, reward, log-prob) sequence.

    ``times`` holds the global interaction-step index at which each action
    was taken; ``path`` the junctions visited (origin first, last junction
    reached last). ``terminated`` is true when the episode ended by arrival
    (or a dead end); false means it was cut at the time limit and the
    return is bootstrapped from ``final_observation``.
    """

    agent_id: int
    provenance: str
    observations: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    log_probs: list[float] = field(default_factory=list)
    times: list[int] = field(default_factory=list)
    path: list[int] = field(default_factory=list)
    final_observation: np.ndarray | None = None
    final_mask: np.ndarray | None = None
    terminated: bool = False
    arrived: bool = False
    travel_time: int = 0

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ContractViolation(f"unknown provenance {self.provenance!r}")
        object.__setattr__(self, "_provenance", self.provenance)

    def __setattr__(self, name, value):
        if name == "provenance" and "_provenance" in self.__dict__:
            raise AttributeError("provenance is immutable")
        super().__setattr__(name, value)

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def total_reward(self) -> float:
        return float(sum(self.rewards))

    def obs_array(self) -> np.ndarray:
        return np.array(self.observations)

    def mask_array(self) -> np.ndarray:
        return np.array(self.masks, dtype=bool)

    def validate(self) -> None:
        if not self.actions:
            raise ContractViolation(f"agent {self.agent_id}: empty trajectory")
        if not all(math.isfinite(r) for r in self.rewards):
            raise ContractViolation(f"agent {self.agent_id}: non-finite reward")


def bootstrapped_returns(rewards: Sequence[float], bootstrap_value: float, gamma: float,
                         terminated: bool = False) -> np.ndarray:
    """R_t = sum_k gamma^k r_{t+k} + gamma^(T-t) V(o_T), by backward recursion.

    The bootstrap term is dropped for terminated (arrived) trajectories.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ContractViolation(f"gamma must lie in [0, 1], got {gamma}")
    out = np.empty(len(rewards))
    running = 0.0 if terminated else float(bootstrap_value)
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def trajectory_returns(traj: Trajectory, value_net, gamma: float) -> np.ndarray:
    bootstrap = 0.0
    if not traj.terminated:
        v, _ = value_net.predict(traj.final_observation[None, :])
        bootstrap = float(v[0])
    return bootstrapped_returns(traj.rewards, bootstrap, gamma, traj.terminated)


def advantages(returns: Sequence[float], values: Sequence[float]) -> np.ndarray:
    returns = np.asarray(returns, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if returns.shape != values.shape:
        raise ContractViolation(f"length mismatch: {returns.shape} returns vs {values.shape} values")
    return returns - values


def _as_points(seq) -> np.ndarray:
    a = np.asarray(seq, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if len(a) == 0:
        raise ContractViolation("DTW needs non-empty sequences")
    return a


def dtw(a, b) -> tuple[float, int]:
    """Minimal alignment cost and the length of the optimal warping path.

    Local cost is the Euclidean distance between points. Among equal-cost
    alignments the shortest path is reported.
    """
    x, y = _as_points(a), _as_points(b)
    n, m = len(x), len(y)
    cost = np.sqrt(((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=2))
    acc = np.full((n + 1, m + 1), np.inf)
    length = np.zeros((n + 1, m + 1), dtype=np.int64)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            best, steps = acc[i - 1, j - 1], length[i - 1, j - 1]
            for pi, pj in ((i - 1, j), (i, j - 1)):
                c = acc[pi, pj]
                if c < best or (c == best and length[pi, pj] < steps):
                    best, steps = c, length[pi, pj]
            acc[i, j] = best + cost[i - 1, j - 1]
            length[i, j] = steps + 1
    return float(acc[n, m]), int(length[n, m])


def dtw_distance(a, b) -> float:
    return dtw(a, b)[0]


def dtw_normalized(a, b) -> float:
    """DTW cost divided by the warping-path length."""
    raw, steps = dtw(a, b)
    return raw / steps


def path_points(traj: Trajectory, network) -> np.ndarray:
    return np.array([network.coord(j) for j in traj.path], dtype=np.float64)


# -- trajectory log ------------------------------------------------------------


def trajectory_records(traj: Trajectory, epoch: int, episode: int = 0) -> Iterable[dict]:
    for k in range(len(traj)):
        yield {
            "epoch": epoch,
            "episode": episode,
            "agent_id": traj.agent_id,
            "provenance": traj.provenance,
            "step": k,
            "t": traj.times[k],
            "junction": traj.path[k],
            "action": traj.actions[k],
            "reward": traj.rewards[k],
            "log_prob": traj.log_probs[k],
            "observation": [float(v) for v in traj.observations[k]],
        }


def write_trajectory_log(fh: IO[str], trajs: Iterable[Trajectory], epoch: int, episode: int = 0) -> None:
    for traj in trajs:
        for rec in trajectory_records(traj, epoch, episode):
            fh.write(json.dumps(rec) + "\n")


def read_trajectory_log(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
