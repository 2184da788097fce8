from .dsl import Diagnostic, InstructionProgram, format_program, parse_program
from .execution import ExecutionReport, execution_report
from .llm import HttpOracle, OracleEndpoint, OracleUnavailable, llm_generate
from .prompts import PromptContext, build_prompts, estimate_tokens
from .scripted import ScriptedOracle, scripted_plan

__all__ = [
    "Diagnostic", "InstructionProgram", "format_program", "parse_program",
    "ExecutionReport", "execution_report",
    "HttpOracle", "OracleEndpoint", "OracleUnavailable", "llm_generate",
    "PromptContext", "build_prompts", "estimate_tokens",
    "ScriptedOracle", "scripted_plan",
]
