"""Prompt construction and context-window management for the instruction oracle.

The templates below are written for this package; they describe the task
in plain terms and are not copies of any published prompt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from ..errors import ContractViolation
from ..instructions import INTERFACE_DOCS, VERBS, signature
from ..network import RoadNetwork
from ..sed import FeedbackReport, TrajectorySummary
from ..sim import Scenario

TOKEN_BUDGET = 10_000
TRIGGER = "Generate the instruction program for every agent now."


def estimate_tokens(text: str) -> int:
    """Whitespace word count times 1.3, rounded up."""
    return math.ceil(len(text.split()) * 1.3)


@dataclass
class Turn:
    user: str
    assistant: str


@dataclass
class PromptContext:
    """System prompt, a rolling history of (prompt, reply) turns and the pending user message.

    The system prompt is never dropped; history goes oldest first whenever
    the full message list would exceed ``budget`` estimated tokens.
    """

    system: str
    current: str = TRIGGER
    history: list[Turn] = field(default_factory=list)
    budget: int = TOKEN_BUDGET
    evicted: int = 0

    def __post_init__(self):
        self._check_base()

    def _check_base(self) -> None:
        base = estimate_tokens(self.system) + estimate_tokens(self.current)
        if base > self.budget:
            raise ContractViolation(f"system prompt plus current message need {base} tokens, budget is {self.budget}")

    def token_count(self) -> int:
        return sum(estimate_tokens(m["content"]) for m in self.messages())

    def _evict(self) -> None:
        while self.history and self.token_count() > self.budget:
            self.history.pop(0)
            self.evicted += 1

    def messages(self) -> list[dict[str, str]]:
        msgs = [{"role": "system", "content": self.system}]
        for turn in self.history:
            msgs.append({"role": "user", "content": turn.user})
            msgs.append({"role": "assistant", "content": turn.assistant})
        msgs.append({"role": "user", "content": self.current})
        return msgs

    def record_reply(self, reply: str) -> None:
        """Move the pending message and its reply into the history."""
        self.history.append(Turn(self.current, reply))
        self.current = TRIGGER
        self._evict()

    def ask(self, message: str) -> None:
        self.current = message
        self._check_base()
        self._evict()


def describe_network(network: RoadNetwork) -> str:
    lines = ["Junctions (id: x, y in meters):"]
    lines += [f"  {j.id}: {j.x:g}, {j.y:g}" for j in network.junctions]
    lines.append("Directed roads (from -> to, length m, speed limit m/s, lanes):")
    lines += [f"  {e.source} -> {e.target}, {e.length:g}, {e.max_speed:g}, {e.lanes}" for e in network.edges]
    return "\n".join(lines)


def describe_agents(scenario: Scenario) -> str:
    lines = ["Agents (id: origin -> destination, departure time s):"]
    lines += [f"  {i}: {od.origin} -> {od.destination}, departs at {od.departure}"
              for i, od in enumerate(scenario.od_pairs)]
    return "\n".join(lines)


def describe_interfaces() -> str:
    return "\n".join(f"  {signature(v)}: {INTERFACE_DOCS[v]}" for v in VERBS)


OUTPUT_RULES = """\
Reply with one line per agent inside a single fenced code block:
  agent <id>: <call>; <call>; ...
Use only the functions listed above with literal numeric arguments. Node ids
are integers. Movement calls run in order starting from the agent's origin;
query calls return values but do not move the agent. No other syntax is
accepted."""


def system_prompt(scenario: Scenario, network: RoadNetwork) -> str:
    return "\n\n".join([
        "You plan routes for vehicles in a road network. Each vehicle should reach its "
        "destination quickly without creating congestion that slows the other vehicles. "
        "A road's travel speed drops as more vehicles share it, in proportion to its lane count.",
        describe_network(network),
        describe_agents(scenario),
        "Available functions:\n" + describe_interfaces(),
        OUTPUT_RULES,
    ])


def _feedback_entries(report: FeedbackReport) -> list[str]:
    out = []
    for d in report.entries():
        if hasattr(d, "magnitude"):
            out.append(f"RVI agent {d.agent_id} step {d.timestep} near junction {d.junction}: "
                       f"other agents' reward dropped to -{d.magnitude:.3f} while running `{d.instruction}`")
        else:
            out.append(f"PDI agent {d.agent_id} step {d.timestep} at junction {d.junction}: "
                       f"policy divergence {d.kl:.4f} while running `{d.instruction}`")
    return out


def feedback_prompt(report: FeedbackReport, summaries: Sequence[TrajectorySummary] | None = None) -> str:
    """Revision request listing every flagged instruction, worst first."""
    summaries = report.expert_trajectories if summaries is None else summaries
    parts = [f"Results of your previous program (epoch {report.epoch})."]
    parts.append("Trajectories:")
    for s in summaries:
        state = "arrived" if s.arrived else "did not arrive"
        parts.append(f"  agent {s.agent_id}: path {' '.join(map(str, s.path))}; reward {s.total_reward:.2f}; "
                     f"{state}; travel time {s.travel_time} s")
        for f in s.failures:
            parts.append(f"    failed: {f}")
    entries = _feedback_entries(report)
    if entries:
        parts.append("Flagged instructions (worst first):")
        parts += [f"  {k + 1}. {e}" for k, e in enumerate(entries)]
        parts.append(
            "RVI entries mark instructions during which the other agents lost much more reward than "
            "under their own policies; reroute these agents away from the shared congested roads. "
            "PDI entries mark instructions the learners find very unlikely; prefer routes closer to "
            "what the agents already do. Revise the flagged instructions and keep the rest."
        )
    else:
        parts.append("No violations were found. Keep the program unless a shorter route exists.")
    parts.append(OUTPUT_RULES)
    return "\n".join(parts)


def build_prompts(scenario: Scenario, network: RoadNetwork, feedback: FeedbackReport | None = None,
                  summaries: Sequence[TrajectorySummary] | None = None,
                  context: PromptContext | None = None, budget: int = TOKEN_BUDGET) -> PromptContext:
    """Create the context (initial prompt) or queue a feedback prompt on an existing one."""
    if context is None:
        context = PromptContext(system_prompt(scenario, network), TRIGGER, budget=budget)
    if feedback is not None:
        context.ask(feedback_prompt(feedback, summaries))
    return context
