"""Deterministic stand-in oracle: send every agent along its fastest free-flow route."""

from __future__ import annotations

import time

from ..instructions import Instruction
from ..network import RoadNetwork, reachable
from ..sim import Scenario
from .dsl import Diagnostic, InstructionProgram, format_program
from .prompts import PromptContext


def scripted_plan(scenario: Scenario, network: RoadNetwork) -> InstructionProgram:
    instructions: dict[int, list[Instruction]] = {}
    diagnostics = []
    for i, od in enumerate(scenario.od_pairs):
        if od.origin == od.destination:
            instructions[i] = []
        elif od.destination not in reachable(network, od.origin):
            diagnostics.append(Diagnostic(i + 1, 1, f"agent {i}: destination {od.destination} unreachable"))
        else:
            instructions[i] = [Instruction("move_to_by_shortest_time", (od.destination,))]
    text = format_program(instructions)
    prog = InstructionProgram(instructions, text, diagnostics)
    prog.statement_lines = sum(1 for v in instructions.values() if v)
    for i, v in instructions.items():
        prog.line_numbers[i] = [i + 1] * len(v)
    return prog


class ScriptedOracle:
    """Replies with ``scripted_plan`` regardless of the prompt."""

    kind = "scripted"

    def __init__(self, scenario: Scenario, network: RoadNetwork):
        self.scenario = scenario
        self.network = network
        self.calls = 0
        self.last_inference_s = 0.0

    def generate(self, context: PromptContext) -> str:
        t0 = time.perf_counter()
        self.calls += 1
        reply = "```\n" + format_program(scripted_plan(self.scenario, self.network).instructions) + "```\n"
        self.last_inference_s = time.perf_counter() - t0
        return reply
