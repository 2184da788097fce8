"""Expert demonstration machinery.

Agents in one subset follow oracle instructions while the rest act from
their current policies. Two diagnostics are computed from the resulting
rollouts and fed back to the oracle:

* reward-instruction pairs: interaction steps where the summed reward of
  the agents outside the subset drops below ``-max |r|`` seen in the plain
  policy rollout, attributed to the instruction active at that step;
* divergence-instruction pairs: per subset agent, the largest
  ``ln(1 / pi(u|o))`` over its demonstrated (observation, action) pairs,
  i.e. the KL from the point-mass "imitated" policy to the current one.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractViolation
from .instructions import Instruction
from .network import RoadNetwork, UnreachableError, shortest_path_query
from .policy import PolicyNet, forward_policy
from .rollout import EpisodeRecord, PolicyController, run_episode
from .sim import Observation, RoadNetEnv
from .trajectory import Trajectory

STEP_CAP = 200
REPORT_VERSION = 1


# -- partitioning --------------------------------------------------------------


@dataclass(frozen=True)
class AgentPartition:
    subsets: tuple[tuple[int, ...], ...]
    epoch: int = 0

    def subset_of(self, agent: int) -> int:
        for j, s in enumerate(self.subsets):
            if agent in s:
                return j
        raise KeyError(agent)


def partition_agents(agents: Sequence[int], m: int, rng: np.random.Generator,
                     epoch: int = 0) -> AgentPartition:
    """Uniformly random split into ``m`` disjoint subsets whose sizes differ by at most one."""
    agents = list(agents)
    if not 1 <= m <= len(agents):
        raise ContractViolation(f"need 1 <= m <= n, got m={m}, n={len(agents)}")
    order = [agents[k] for k in rng.permutation(len(agents))]
    subsets = tuple(tuple(sorted(part)) for part in np.array_split(np.array(order), m))
    return AgentPartition(tuple(tuple(int(a) for a in s) for s in subsets), epoch)


# -- instruction compilation -----------------------------------------------------


class CompileError(ValueError):
    pass


@dataclass(frozen=True)
class AgentState:
    junction: int
    origin: int
    destination: int


@dataclass
class CompiledInstruction:
    instruction: Instruction
    actions: list[int]
    value: Any = None
    truncated: bool = False


def _node(network: RoadNetwork, value) -> int:
    if isinstance(value, float) and not value.is_integer():
        raise CompileError(f"node id {value} is not an integer")
    node = int(value)
    if node not in network.junction_index:
        raise CompileError(f"unknown junction {node}")
    return node


def compile_instruction(instr: Instruction, state: AgentState, network: RoadNetwork,
                        edge_time: Callable | None = None, step_cap: int = STEP_CAP) -> CompiledInstruction:
    """Turn one command into per-junction edge choices (slot indices).

    Query verbs produce no actions; their answer is returned in ``value``.
    Sequences longer than ``step_cap`` are cut and flagged.
    """
    verb, args = instr.verb, instr.args
    if verb in ("move_to_by_shortest_path", "move_to_by_shortest_time"):
        target = _node(network, args[0])
        metric = "distance" if verb == "move_to_by_shortest_path" else "time"
        try:
            path = shortest_path_query(network, state.junction, target, metric, edge_time)
        except UnreachableError as exc:
            raise CompileError(str(exc)) from exc
        actions = [network.slot_of(j, e) for j, e in zip(path.junctions, path.edges)]
        truncated = len(actions) > step_cap
        return CompiledInstruction(instr, actions[:step_cap], True, truncated)
    if verb == "get_origin":
        return CompiledInstruction(instr, [], state.origin)
    if verb == "get_destination":
        return CompiledInstruction(instr, [], state.destination)
    if verb in ("get_shortest_dist", "get_shortest_time"):
        target = _node(network, args[0])
        metric = "distance" if verb == "get_shortest_dist" else "time"
        try:
            cost = shortest_path_query(network, state.junction, target, metric, edge_time).cost
        except UnreachableError as exc:
            raise CompileError(str(exc)) from exc
        return CompiledInstruction(instr, [], cost)
    if verb == "get_nearest_node":
        return CompiledInstruction(instr, [], network.nearest_junction(float(args[0]), float(args[1])))
    if verb == "get_node_coord":
        return CompiledInstruction(instr, [], network.coord(_node(network, args[0])))
    raise CompileError(f"unknown verb {verb!r}")


# -- instruction execution ---------------------------------------------------------


@dataclass
class InstructionSpan:
    """Interaction steps ``[start, end)`` during which ``instruction`` drove the agent."""

    index: int
    instruction: Instruction
    start: int
    end: int | None = None
    truncated: bool = False

    def contains(self, t: int) -> bool:
        return self.start <= t < (self.end if self.end is not None else math.inf)


class InstructionController:
    """Executes an agent's instruction list, then falls back to its policy.

    Every action is scored by the agent's current policy so the recorded
    log-probabilities can be reused for the divergence diagnostic.
    """

    def __init__(self, agent_id: int, instructions: Sequence[Instruction], fallback: PolicyController,
                 env: RoadNetEnv, step_cap: int = STEP_CAP):
        self.agent_id = agent_id
        self.instructions = list(instructions)
        self.fallback = fallback
        self.env = env
        self.step_cap = step_cap
        self.spans: list[InstructionSpan] = []
        self.failures: list[tuple[int, Instruction, str]] = []
        self.answers: list[tuple[Instruction, Any]] = []
        self.policy_steps = 0
        self._next = 0
        self._queue: list[int] = []
        self._open: InstructionSpan | None = None
        self._abandoned = False

    def _state(self, obs: Observation) -> AgentState:
        od = self.env.scenario.od_pairs[self.agent_id]
        return AgentState(obs.junction, od.origin, od.destination)

    def _refill(self, obs: Observation, t: int) -> InstructionSpan | None:
        while not self._queue and not self._abandoned and self._next < len(self.instructions):
            k = self._next
            instr = self.instructions[k]
            self._next += 1
            try:
                compiled = compile_instruction(instr, self._state(obs), self.env.network,
                                               self.env.estimated_time, self.step_cap)
            except CompileError as exc:
                self.failures.append((k, instr, str(exc)))
                self._abandoned = True
                return None
            if not compiled.actions:
                self.answers.append((instr, compiled.value))
                continue
            self._queue = list(compiled.actions)
            return InstructionSpan(k, instr, t, truncated=compiled.truncated)
        return None

    def act(self, obs: Observation, t: int) -> tuple[int, float]:
        new_span = self._refill(obs, t)
        if new_span is not None or not self._queue:
            self.close(t)
        if new_span is not None:
            self._open = new_span
            self.spans.append(new_span)
        dist = self.fallback.distribution(obs)
        if self._queue:
            a = self._queue.pop(0)
            return a, float(dist.log_probs[0, a])
        self.policy_steps += 1
        return self.fallback.act(obs, t)

    def close(self, t: int) -> None:
        if self._open is not None:
            self._open.end = t
            self._open = None


@dataclass
class ExpertRollout:
    subset: tuple[int, ...]
    record: EpisodeRecord
    spans: dict[int, list[InstructionSpan]]
    failures: dict[int, list[tuple[int, Instruction, str]]]

    @property
    def trajectories(self) -> dict[int, Trajectory]:
        return {i: self.record.trajectories[i] for i in self.subset}


def mixed_rollout(subset: Iterable[int], instructions: Mapping[int, Sequence[Instruction]],
                  policies: Mapping[int, PolicyNet], env: RoadNetEnv, seed: int,
                  rng: np.random.Generator, step_cap: int = STEP_CAP) -> ExpertRollout:
    """One episode with ``subset`` on instructions and everyone else on their policies."""
    subset = tuple(sorted(subset))
    controllers: dict = {}
    for i in range(env.scenario.n_agents):
        pc = PolicyController(policies[i], rng)
        if i in subset:
            controllers[i] = InstructionController(i, instructions.get(i, ()), pc, env, step_cap)
        else:
            controllers[i] = pc
    record = run_episode(env, controllers, seed, {i: "expert" for i in subset})
    spans, failures = {}, {}
    for i in subset:
        c = controllers[i]
        # the agent stops acting after its final reward arrives
        last = max((t for t, step in enumerate(record.step_rewards) if i in step), default=-1)
        c.close(last + 1 if record.trajectories[i].terminated else record.n_steps)
        spans[i] = c.spans
        failures[i] = c.failures
    return ExpertRollout(subset, record, spans, failures)


# -- diagnostics ---------------------------------------------------------------------


@dataclass(frozen=True)
class RewardPair:
    magnitude: float
    instruction: Instruction
    timestep: int
    agent_id: int
    instruction_index: int


@dataclass(frozen=True)
class DivergenceEntry:
    agent_id: int
    kl_max: float
    timestep: int
    step_index: int
    instruction: Instruction | None
    instruction_index: int | None

    @property
    def infinite(self) -> bool:
        return math.isinf(self.kl_max)


def _active(spans: Sequence[InstructionSpan], t: int) -> InstructionSpan | None:
    for s in spans:
        if s.contains(t):
            return s
    return None


def _as_items(rewards) -> list[tuple[int, float]]:
    if isinstance(rewards, Mapping):
        return [(int(t), float(r)) for t, r in rewards.items()]
    return [(int(t), float(r)) for t, r in enumerate(rewards)]


def reward_volatility_pairs(expert_external: Sequence[float] | Mapping[int, float],
                            agent_external: Iterable[float],
                            spans: Mapping[int, Sequence[InstructionSpan]]) -> list[RewardPair]:
    """Reward-instruction pairs, largest magnitude first.

    ``expert_external`` maps interaction step -> external-agent reward in
    the instruction rollout; ``agent_external`` are the external rewards of
    the plain policy rollout (only their maximum magnitude matters).
    """
    expert_items = _as_items(expert_external)
    agent_values = [float(r) for r in agent_external]
    if not expert_items or not agent_values:
        raise ContractViolation("reward volatility needs non-empty rollouts")
    threshold = max(abs(r) for r in agent_values)
    pairs = []
    for t, r in expert_items:
        if r < -threshold:
            for agent in sorted(spans):
                span = _active(spans[agent], t)
                if span is not None:
                    pairs.append(RewardPair(abs(r), span.instruction, t, agent, span.index))
    pairs.sort(key=lambda p: (-p.magnitude, p.timestep, p.agent_id))
    return pairs


def policy_divergence_pairs(trajectories: Mapping[int, Trajectory], log_prob_fns: Mapping[int, Callable],
                            spans: Mapping[int, Sequence[InstructionSpan]] | None = None) -> list[DivergenceEntry]:
    """Per agent, the max over demonstrated steps of ``ln(1/pi(u|o))`` and its argmax.

    ``log_prob_fns[i](observations, masks, actions)`` returns the current
    policy's log-probabilities. A zero-probability demonstrated action gives
    ``+inf`` (a masking bug signal) at the offending step.
    """
    spans = spans or {}
    out = []
    for agent in sorted(trajectories):
        tr = trajectories[agent]
        if len(tr) == 0:
            continue
        lp = np.asarray(log_prob_fns[agent](tr.obs_array(), tr.mask_array(), np.array(tr.actions)))
        with np.errstate(divide="ignore"):
            div = -lp
        k = int(np.argmax(div))
        t_star = tr.times[k]
        span = _active(spans.get(agent, ()), t_star)
        out.append(DivergenceEntry(
            agent, float(div[k]), t_star, k,
            span.instruction if span else None, span.index if span else None,
        ))
    return out


def policy_log_prob_fn(net: PolicyNet) -> Callable:
    def fn(obs, masks, actions):
        return forward_policy(net, obs, masks).log_prob(actions)
    return fn


def nonstationarity_bound(max_abs_external_reward: float, kl_sum: float, gamma: float) -> float:
    """sqrt(2) / (1 - gamma)^2 * max|r_ext| * sum_k D_KL^max."""
    if not 0.0 <= gamma < 1.0:
        raise ContractViolation(f"bound undefined for gamma={gamma}")
    if max_abs_external_reward < 0 or kl_sum < 0:
        raise ContractViolation("bound inputs must be nonnegative")
    if kl_sum == 0 or max_abs_external_reward == 0:
        return 0.0
    return math.sqrt(2.0) / (1.0 - gamma) ** 2 * max_abs_external_reward * kl_sum


# -- feedback report ---------------------------------------------------------------


@dataclass
class TrajectorySummary:
    agent_id: int
    subset: int
    path: list[int]
    total_reward: float
    arrived: bool
    travel_time: int
    steps: int
    policy_steps: int = 0
    failures: list[str] = field(default_factory=list)


@dataclass
class RviDiagnostic:
    agent_id: int
    timestep: int
    magnitude: float
    instruction: str
    junction: int


@dataclass
class PdiDiagnostic:
    agent_id: int
    timestep: int
    kl: float
    instruction: str
    junction: int


@dataclass
class SubsetReport:
    index: int
    agents: list[int]
    rvi: list[RviDiagnostic]
    pdi: list[PdiDiagnostic]
    max_abs_external_reward: float
    kl_sum: float
    bound: float


@dataclass
class FeedbackReport:
    epoch: int
    subsets: list[SubsetReport]
    expert_trajectories: list[TrajectorySummary]
    format_version: int = REPORT_VERSION

    @property
    def no_violations(self) -> bool:
        return all(not s.rvi and not s.pdi for s in self.subsets)

    def entries(self) -> list[RviDiagnostic | PdiDiagnostic]:
        rvi = sorted((d for s in self.subsets for d in s.rvi), key=lambda d: (-d.magnitude, d.timestep))
        pdi = sorted((d for s in self.subsets for d in s.pdi), key=lambda d: (-d.kl, d.timestep))
        return [*rvi, *pdi]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["status"] = "no violations" if self.no_violations else "violations"
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeedbackReport":
        subsets = [
            SubsetReport(
                s["index"], list(s["agents"]),
                [RviDiagnostic(**r) for r in s["rvi"]],
                [PdiDiagnostic(**p) for p in s["pdi"]],
                s["max_abs_external_reward"], s["kl_sum"], s["bound"],
            )
            for s in d["subsets"]
        ]
        summaries = [TrajectorySummary(**t) for t in d["expert_trajectories"]]
        return cls(d["epoch"], subsets, summaries, d.get("format_version", REPORT_VERSION))

    @classmethod
    def from_json(cls, text: str) -> "FeedbackReport":
        return cls.from_dict(json.loads(text))


@dataclass
class SubsetResult:
    """Everything computed for one subset in one demonstration round."""

    index: int
    rollout: ExpertRollout
    reward_pairs: list[RewardPair]
    divergence: list[DivergenceEntry]
    max_abs_external_reward: float
    kl_sum: float
    bound: float

    @property
    def attributed_divergence(self) -> list[DivergenceEntry]:
        return [d for d in self.divergence if d.instruction is not None]


def evaluate_subset(index: int, rollout: ExpertRollout, agent_record: EpisodeRecord,
                    policies: Mapping[int, PolicyNet], gamma: float) -> SubsetResult:
    expert_ext = rollout.record.external_rewards(rollout.subset)
    agent_ext = agent_record.external_rewards(rollout.subset)
    pairs = reward_volatility_pairs(expert_ext or [0.0], agent_ext or [0.0], rollout.spans)
    fns = {i: policy_log_prob_fn(policies[i]) for i in rollout.subset}
    divergence = policy_divergence_pairs(rollout.trajectories, fns, rollout.spans)
    max_abs = max((abs(r) for r in [*expert_ext, *agent_ext]), default=0.0)
    kl_sum = float(sum(d.kl_max for d in divergence))
    bound = nonstationarity_bound(max_abs, kl_sum, gamma)
    return SubsetResult(index, rollout, pairs, divergence, max_abs, kl_sum, bound)


def summarize(result: SubsetResult) -> list[TrajectorySummary]:
    out = []
    controllers_failures = result.rollout.failures
    for i, tr in sorted(result.rollout.trajectories.items()):
        out.append(TrajectorySummary(
            i, result.index, list(tr.path), tr.total_reward, tr.arrived, tr.travel_time, len(tr),
            sum(1 for k in range(len(tr)) if _active(result.rollout.spans[i], tr.times[k]) is None),
            [f"{instr}: {msg}" for _, instr, msg in controllers_failures.get(i, [])],
        ))
    return out


def build_feedback_report(results: Sequence[SubsetResult], epoch: int = 0) -> FeedbackReport:
    """Collect every subset's pair sets into one report, worst entries first."""
    if not results:
        raise ContractViolation("feedback report needs at least one processed subset")
    subsets, summaries = [], []
    for res in results:
        trajs = res.rollout.trajectories
        rvi = [
            RviDiagnostic(p.agent_id, p.timestep, p.magnitude, str(p.instruction),
                          _junction_at(trajs[p.agent_id], p.timestep))
            for p in res.reward_pairs
        ]
        pdi = [
            PdiDiagnostic(d.agent_id, d.timestep, d.kl_max, str(d.instruction),
                          trajs[d.agent_id].path[d.step_index])
            for d in sorted(res.attributed_divergence, key=lambda d: (-d.kl_max, d.timestep))
        ]
        subsets.append(SubsetReport(res.index, list(res.rollout.subset), rvi, pdi,
                                    res.max_abs_external_reward, res.kl_sum, res.bound))
        summaries.extend(summarize(res))
    return FeedbackReport(epoch, subsets, summaries)


def _junction_at(tr: Trajectory, t: int) -> int:
    """Junction of the agent's latest decision at or before interaction step ``t``."""
    k = int(np.searchsorted(np.array(tr.times), t, side="right")) - 1
    return tr.path[max(k, 0)] if tr.path else -1
