"""Static execution check: does each program line parse and compile?"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..network import RoadNetwork
from ..sed import AgentState, CompileError, compile_instruction
from ..sim import Scenario
from .dsl import InstructionProgram


@dataclass
class ExecutionReport:
    total_lines: int
    executable_lines: int
    compile_errors: list[tuple[int, int, str]] = field(default_factory=list)  # (line, agent, message)

    @property
    def rate(self) -> float:
        return self.executable_lines / self.total_lines if self.total_lines else 0.0


def _end_junction(network: RoadNetwork, start: int, actions: list[int]) -> int:
    j = start
    for slot in actions:
        j = network.out_edges[j][slot].target
    return j


def execution_report(program: InstructionProgram, scenario: Scenario, network: RoadNetwork) -> ExecutionReport:
    """Lines that parse and whose every instruction compiles, over all statement lines.

    Each agent's position is tracked from its origin through its move
    instructions in order; a failed instruction leaves the position where
    it was.
    """
    bad_lines = {d.line for d in program.diagnostics}
    errors = []
    for agent in sorted(program.instructions):
        if agent >= len(scenario.od_pairs):
            lines = sorted(set(program.line_numbers[agent]))
            bad_lines.update(lines)
            errors.extend((ln, agent, "unknown agent") for ln in lines)
            continue
        od = scenario.od_pairs[agent]
        pos = od.origin
        for instr, ln in zip(program.instructions[agent], program.line_numbers[agent]):
            try:
                compiled = compile_instruction(instr, AgentState(pos, od.origin, od.destination), network)
            except CompileError as exc:
                bad_lines.add(ln)
                errors.append((ln, agent, str(exc)))
                continue
            pos = _end_junction(network, pos, compiled.actions)
    return ExecutionReport(program.statement_lines, program.statement_lines - len(bad_lines), errors)

