"""Discrete-time multi-agent navigation environment on a road network.

Each agent drives one vehicle from its origin to its destination. An
interaction step is one decision at a junction: the agent picks one of the
outgoing edges (masked slot index), then the simulator advances one-second
micro-steps until some agent reaches its next junction.

Edge speed slows with occupancy: ``max_speed / (1 + others / lanes)`` where
``others`` counts the other vehicles currently on the edge. Background
vehicles follow fixed free-flow shortest-time routes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ContractViolation
from .network import Edge, RoadNetwork, reachable, shortest_path_query

FORMAT_VERSION = 1
SENTINEL = -1.0
# Distances are snapped to this grid so per-step shaping telescopes exactly.
DISTANCE_QUANTUM = 2.0 ** -20
REGIMES = ("moderate", "congested")


class ScenarioError(ValueError):
    pass


class ActionMaskError(ContractViolation):
    """A chosen action was masked, out of range, or given for an agent not awaiting one."""


@dataclass(frozen=True)
class ODPair:
    origin: int
    destination: int
    departure: int = 0


@dataclass(frozen=True)
class Scenario:
    od_pairs: tuple[ODPair, ...]
    background_vehicle_count: int = 0
    regime: str = "moderate"
    t_max: int = 2400
    omega_d: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.t_max <= 0:
            raise ScenarioError(f"t_max must be positive, got {self.t_max}")
        if self.omega_d < 0:
            raise ScenarioError(f"omega_d must be nonnegative, got {self.omega_d}")
        if self.regime not in REGIMES:
            raise ScenarioError(f"unknown regime {self.regime!r}")
        if self.background_vehicle_count < 0:
            raise ScenarioError("background_vehicle_count must be nonnegative")
        if not self.od_pairs:
            raise ScenarioError("scenario has no agents")
        for i, od in enumerate(self.od_pairs):
            if od.origin == od.destination:
                raise ScenarioError(f"agent {i}: origin equals destination ({od.origin})")
            if od.departure < 0:
                raise ScenarioError(f"agent {i}: negative departure step")

    @property
    def n_agents(self) -> int:
        return len(self.od_pairs)

    def validate_for(self, network: RoadNetwork) -> None:
        destinations = {od.destination for od in self.od_pairs}
        for i, od in enumerate(self.od_pairs):
            for jid in (od.origin, od.destination):
                if jid not in network.junction_index:
                    raise ScenarioError(f"agent {i}: unknown junction {jid}")
            if od.destination not in reachable(network, od.origin):
                raise ScenarioError(
                    f"agent {i}: destination {od.destination} unreachable from {od.origin}"
                )
        traps = [s for s in network.sinks() if s not in destinations]
        if traps:
            raise ScenarioError(f"dead-end junctions {traps} are not declared destinations")

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "agents": [
                {"origin": od.origin, "destination": od.destination, "departure": od.departure}
                for od in self.od_pairs
            ],
            "background_vehicles": self.background_vehicle_count,
            "regime": self.regime,
            "t_max": self.t_max,
            "omega_d": self.omega_d,
            "seed": self.seed,
        }


def scenario_from_dict(data: Mapping) -> Scenario:
    version = data.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ScenarioError(f"unsupported format_version {version!r}")
    try:
        agents = tuple(
            ODPair(int(a["origin"]), int(a["destination"]), int(a.get("departure", 0)))
            for a in data["agents"]
        )
        return Scenario(
            od_pairs=agents,
            background_vehicle_count=int(data.get("background_vehicles", 0)),
            regime=str(data.get("regime", "moderate")),
            t_max=int(data.get("t_max", 2400)),
            omega_d=float(data.get("omega_d", 1.0)),
            seed=int(data.get("seed", 0)),
        )
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"malformed scenario: {exc!r}") from exc


def load_scenario(path: str | Path) -> Scenario:
    return scenario_from_dict(json.loads(Path(path).read_text()))


def save_scenario(scenario: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario.to_dict(), indent=1) + "\n")


def quantize_distance(d: float) -> float:
    return round(d / DISTANCE_QUANTUM) * DISTANCE_QUANTUM


@dataclass
class Observation:
    vector: np.ndarray  # [junction, destination, (score, end junction) * m_out]
    mask: np.ndarray  # bool, length m_out

    @property
    def junction(self) -> int:
        return int(self.vector[0])

    @property
    def destination(self) -> int:
        return int(self.vector[1])

    def key(self) -> bytes:
        return self.vector.tobytes() + self.mask.tobytes()


@dataclass
class AgentStep:
    """Outcome of one completed transition (or termination) of one agent."""

    observation: Observation
    reward: float
    done: bool
    time_penalty: float = 0.0
    distance_shaping: float = 0.0
    terminal_bonus: float = 0.0
    arrived: bool = False
    moved: bool = False
    truncated: bool = False
    junction: int = -1


@dataclass
class StepOutcome:
    agents: dict[int, AgentStep]
    awaiting: dict[int, Observation]
    time: int


@dataclass
class _Vehicle:
    edge: Edge | None = None
    position: float = 0.0


@dataclass
class _Agent:
    od: ODPair
    status: str = "pending"  # pending | deciding | moving | done
    junction: int = -1
    decision_time: int = 0
    decision_distance: float = 0.0
    vehicle: _Vehicle = field(default_factory=_Vehicle)


@dataclass
class _Background:
    route: tuple[Edge, ...]
    departure: int
    leg: int = -1
    vehicle: _Vehicle = field(default_factory=_Vehicle)


class RoadNetEnv:
    """Multi-agent environment; one instance owns all of its mutable state."""

    def __init__(self, network: RoadNetwork, scenario: Scenario):
        scenario.validate_for(network)
        self.network = network
        self.scenario = scenario
        self.m_out = network.m_out
        self.terminal_bonus = scenario.t_max / 10
        self._occupancy: dict[int, int] = {}
        self._agents: list[_Agent] = []
        self._background: list[_Background] = []
        self.time = 0

    # -- estimates ---------------------------------------------------------

    def effective_speed(self, edge: Edge, others: int | None = None) -> float:
        if others is None:
            others = self._occupancy.get(edge.id, 0)
        return edge.max_speed / (1.0 + others / edge.lanes)

    def estimated_time(self, edge: Edge) -> float:
        return edge.length / self.effective_speed(edge)

    def edge_score(self, edge: Edge) -> float:
        if edge.length == 0:
            return 1.0
        return min(1.0, max(0.0, edge.free_flow_time / self.estimated_time(edge)))

    def distance_to_destination(self, junction: int, destination: int) -> float:
        return quantize_distance(self.network.euclidean(junction, destination))

    def observe(self, agent_id: int) -> Observation:
        agent = self._agents[agent_id]
        m = self.m_out
        vec = np.full(2 * m + 2, SENTINEL)
        mask = np.zeros(m, dtype=bool)
        vec[0] = agent.junction
        vec[1] = agent.od.destination
        if agent.status != "done":
            for slot, e in enumerate(self.network.out_edges[agent.junction]):
                vec[2 + 2 * slot] = self.edge_score(e)
                vec[3 + 2 * slot] = e.target
                mask[slot] = True
        return Observation(vec, mask)

    # -- lifecycle ---------------------------------------------------------

    def reset(self, seed: int | None = None) -> dict[int, Observation]:
        """Place agents at their origins and schedule background traffic."""
        sc = self.scenario
        rng = np.random.default_rng(sc.seed if seed is None else seed)
        self.time = 0
        self._occupancy = {}
        self._agents = []
        for od in sc.od_pairs:
            self._agents.append(_Agent(od=od, junction=od.origin))
        window = sc.t_max // 2 if sc.regime == "moderate" else sc.t_max // 4
        self._background = []
        routes: dict[tuple[int, int], tuple[Edge, ...]] = {}
        for _ in range(sc.background_vehicle_count):
            od = sc.od_pairs[int(rng.integers(len(sc.od_pairs)))]
            key = (od.origin, od.destination)
            if key not in routes:
                path = shortest_path_query(self.network, *key, metric="time")
                routes[key] = tuple(self.network.edge_index[e] for e in path.edges)
            departure = int(rng.integers(max(window, 1)))
            self._background.append(_Background(routes[key], departure))
        self._release(0)
        awaiting = self._awaiting()
        while not awaiting and self.time < sc.t_max:
            self._advance()
            awaiting = self._awaiting()
        return awaiting

    @property
    def done(self) -> bool:
        return all(a.status == "done" for a in self._agents)

    def agent_junction(self, agent_id: int) -> int:
        return self._agents[agent_id].junction

    def awaiting_agents(self) -> list[int]:
        return [i for i, a in enumerate(self._agents) if a.status == "deciding"]

    def _awaiting(self) -> dict[int, Observation]:
        return {i: self.observe(i) for i in self.awaiting_agents()}

    def step(self, joint_action: Mapping[int, int]) -> StepOutcome:
        """Apply one decision per awaiting agent and run until the next decision point."""
        if self.done:
            raise RuntimeError("episode is over; call reset()")
        expected = set(self.awaiting_agents())
        if set(joint_action) != expected:
            raise ActionMaskError(
                f"actions given for agents {sorted(joint_action)}, expected {sorted(expected)}"
            )
        for i in sorted(joint_action):
            agent = self._agents[i]
            slot = joint_action[i]
            edges = self.network.out_edges[agent.junction]
            if not (0 <= slot < self.m_out) or slot >= len(edges):
                raise ActionMaskError(
                    f"agent {i}: action {slot} is masked at junction {agent.junction}"
                )
        results: dict[int, AgentStep] = {}
        for i in sorted(joint_action):
            agent = self._agents[i]
            edge = self.network.out_edges[agent.junction][joint_action[i]]
            agent.decision_time = self.time
            agent.decision_distance = self.distance_to_destination(
                agent.junction, agent.od.destination
            )
            agent.status = "moving"
            agent.vehicle = _Vehicle(edge, 0.0)
            if edge.length == 0:
                self._agent_arrives(i, results)
            else:
                self._occupancy[edge.id] = self._occupancy.get(edge.id, 0) + 1

        while not results and not self.awaiting_agents() and self.time < self.scenario.t_max:
            results.update(self._advance())
        if self.time >= self.scenario.t_max:
            self._truncate(results)
        return StepOutcome(results, self._awaiting(), self.time)

    # -- internals ---------------------------------------------------------

    def _release(self, t: int) -> None:
        for a in self._agents:
            if a.status == "pending" and a.od.departure <= t:
                a.status = "deciding"
                a.junction = a.od.origin
        for bg in self._background:
            if bg.leg == -1 and bg.departure <= t:
                self._enter_next_leg(bg)

    def _enter_next_leg(self, bg: _Background) -> None:
        bg.leg += 1
        while bg.leg < len(bg.route) and bg.route[bg.leg].length == 0:
            bg.leg += 1
        if bg.leg >= len(bg.route):
            bg.vehicle = _Vehicle()
            return
        edge = bg.route[bg.leg]
        bg.vehicle = _Vehicle(edge, 0.0)
        self._occupancy[edge.id] = self._occupancy.get(edge.id, 0) + 1

    def _advance(self) -> dict[int, AgentStep]:
        """Move every vehicle by one second and resolve arrivals."""
        occupancy = dict(self._occupancy)
        moving: list[_Vehicle] = [bg.vehicle for bg in self._background if bg.vehicle.edge]
        moving += [a.vehicle for a in self._agents if a.status == "moving"]
        for v in moving:
            e = v.edge
            v.position += self.effective_speed(e, occupancy[e.id] - 1)
        self.time += 1
        for bg in self._background:
            v = bg.vehicle
            if v.edge is not None and v.position >= v.edge.length:
                self._occupancy[v.edge.id] -= 1
                self._enter_next_leg(bg)
        results: dict[int, AgentStep] = {}
        for i, a in enumerate(self._agents):
            v = a.vehicle
            if a.status == "moving" and v.position >= v.edge.length:
                self._occupancy[v.edge.id] -= 1
                self._agent_arrives(i, results)
        self._release(self.time)
        return results

    def _agent_arrives(self, i: int, results: dict[int, AgentStep]) -> None:
        a = self._agents[i]
        a.junction = a.vehicle.edge.target
        a.vehicle = _Vehicle()
        distance = self.distance_to_destination(a.junction, a.od.destination)
        time_penalty = -float(self.time - a.decision_time)
        # the weighted potential sits on the distance grid so shaping telescopes exactly for any omega_d
        w = self.scenario.omega_d
        shaping = quantize_distance(w * a.decision_distance) - quantize_distance(w * distance)
        arrived = a.junction == a.od.destination
        trapped = not arrived and not self.network.out_edges[a.junction]
        bonus = self.terminal_bonus if arrived else 0.0
        a.status = "done" if (arrived or trapped) else "deciding"
        results[i] = AgentStep(
            observation=self.observe(i),
            reward=time_penalty + shaping + bonus,
            done=a.status == "done",
            time_penalty=time_penalty,
            distance_shaping=shaping,
            terminal_bonus=bonus,
            arrived=arrived,
            moved=True,
            junction=a.junction,
        )

    def _truncate(self, results: dict[int, AgentStep]) -> None:
        for i, a in enumerate(self._agents):
            if a.status == "done":
                continue
            if i in results:
                results[i].done = True
                results[i].truncated = True
            elif a.status == "moving":
                # Mid-edge: distance is still measured from the edge's start junction.
                self._occupancy[a.vehicle.edge.id] -= 1
                a.vehicle = _Vehicle()
                penalty = -float(self.time - a.decision_time)
                results[i] = AgentStep(self.observe(i), penalty, True, time_penalty=penalty,
                                       truncated=True, junction=a.junction)
            else:
                results[i] = AgentStep(self.observe(i), 0.0, True, truncated=True,
                                       junction=a.junction)
            a.status = "done"
        for i, r in results.items():
            if r.done:
                r.observation = self.observe(i)
