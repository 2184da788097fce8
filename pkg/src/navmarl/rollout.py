"""Episode runner shared by agent rollouts and instruction-driven rollouts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Protocol

import numpy as np

from .policy import PolicyNet, forward_policy, greedy_action, sample_action
from .sim import Observation, RoadNetEnv
from .trajectory import Trajectory


class Controller(Protocol):
    def act(self, obs: Observation, t: int) -> tuple[int, float]: ...


class PolicyController:
    """Samples (or, if ``greedy``, takes the mode of) the agent's policy."""

    def __init__(self, net: PolicyNet, rng: np.random.Generator | None = None, greedy: bool = False):
        self.net = net
        self.rng = rng
        self.greedy = greedy

    def distribution(self, obs: Observation):
        return forward_policy(self.net, obs.vector[None, :], obs.mask[None, :])

    def act(self, obs: Observation, t: int) -> tuple[int, float]:
        dist = self.distribution(obs)
        if self.greedy:
            return greedy_action(dist)
        return sample_action(dist, self.rng)


@dataclass
class EpisodeRecord:
    seed: int
    trajectories: dict[int, Trajectory]
    # step_rewards[t][i]: reward agent i received from interaction step t
    step_rewards: list[dict[int, float]] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.step_rewards)

    @property
    def n_decisions(self) -> int:
        return sum(len(tr) for tr in self.trajectories.values())

    def external_rewards(self, subset) -> list[float]:
        """Summed reward of agents outside ``subset`` at every interaction step."""
        inside = set(subset)
        return [
            sum(r for i, r in sorted(step.items()) if i not in inside) for step in self.step_rewards
        ]


def run_episode(env: RoadNetEnv, controllers: Mapping[int, Controller], seed: int,
                provenance: Mapping[int, str] | None = None) -> EpisodeRecord:
    provenance = provenance or {}
    n = env.scenario.n_agents
    trajs = {i: Trajectory(i, provenance.get(i, "agent")) for i in range(n)}
    awaiting = env.reset(seed)
    record = EpisodeRecord(seed, trajs)
    pending: set[int] = set()
    t = 0
    while not env.done:
        actions = {}
        for i in sorted(awaiting):
            obs = awaiting[i]
            a, lp = controllers[i].act(obs, t)
            tr = trajs[i]
            if not tr.path:
                tr.path.append(obs.junction)
            tr.observations.append(obs.vector)
            tr.masks.append(obs.mask)
            tr.actions.append(a)
            tr.log_probs.append(lp)
            tr.times.append(t)
            actions[i] = a
            pending.add(i)
        out = env.step(actions)
        rewards: dict[int, float] = {}
        for i, res in out.agents.items():
            tr = trajs[i]
            if i in pending:
                tr.rewards.append(res.reward)
                rewards[i] = res.reward
                pending.discard(i)
            if res.moved:
                tr.path.append(res.junction)
            if res.done:
                tr.terminated = not res.truncated
                tr.arrived = res.arrived
                tr.final_observation = res.observation.vector
                tr.final_mask = res.observation.mask
                tr.travel_time = out.time - env.scenario.od_pairs[i].departure
        record.step_rewards.append(rewards)
        awaiting = out.awaiting
        t += 1
    return record
