"""Instruction language the oracle replies in.

Grammar (EBNF)::

    program     = { line , newline } ;
    line        = blank | comment | agent_line ;
    comment     = [ ws ] , "#" , { any char } ;
    agent_line  = [ ws ] , "agent" , ws , int , [ ws ] , ":" , [ ws ] ,
                  call , { [ ws ] , ";" , [ ws ] , call } , [ [ ws ] , ";" ] , [ ws ] , [ comment ] ;
    call        = verb , [ ws ] , "(" , [ ws ] , [ arg , { [ ws ] , "," , [ ws ] , arg } ] , [ ws ] , ")" ;
    verb        = letter , { letter | digit | "_" } ;
    arg         = [ "-" ] , digits , [ "." , digits ] , [ exponent ] ;
    int         = digits ;

Node arguments must be integer literals; coordinate arguments may be any
number. If the text contains a fenced code block, only the first block is
read. Errors are reported per line and never stop the remaining lines.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from ..instructions import VERBS, Instruction

_FENCE = re.compile(r"```[^\n]*\n(.*?)(?:```|\Z)", re.S)
_NUMBER = re.compile(r"-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?")
_IDENT = re.compile(r"[A-Za-z][A-Za-z0-9_]*")
_WS = re.compile(r"[ \t]*")


@dataclass(frozen=True)
class Diagnostic:
    line: int
    column: int
    message: str

    def __str__(self) -> str:
        return f"{self.line}:{self.column}: {self.message}"


@dataclass
class InstructionProgram:
    instructions: dict[int, list[Instruction]] = field(default_factory=dict)
    source: str = ""
    diagnostics: list[Diagnostic] = field(default_factory=list)
    statement_lines: int = 0  # non-blank, non-comment lines
    line_numbers: dict[int, list[int]] = field(default_factory=dict)  # source line of each instruction

    @property
    def good_lines(self) -> int:
        return self.statement_lines - len({d.line for d in self.diagnostics})

    @property
    def parse_rate(self) -> float:
        return self.good_lines / self.statement_lines if self.statement_lines else 0.0

    def for_agent(self, agent: int) -> list[Instruction]:
        return self.instructions.get(agent, [])


class _LineError(Exception):
    def __init__(self, column: int, message: str):
        self.column = column
        self.message = message


class _Cursor:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def skip_ws(self) -> None:
        self.pos = _WS.match(self.text, self.pos).end()

    def at_end(self) -> bool:
        self.skip_ws()
        return self.pos >= len(self.text) or self.text[self.pos] == "#"

    def expect(self, ch: str, what: str | None = None) -> None:
        self.skip_ws()
        if self.pos < len(self.text) and self.text[self.pos] == ch:
            self.pos += 1
            return
        found = repr(self.text[self.pos]) if self.pos < len(self.text) else "end of line"
        raise _LineError(self.pos + 1, f"expected {what or repr(ch)}, found {found}")

    def peek(self, ch: str) -> bool:
        self.skip_ws()
        return self.pos < len(self.text) and self.text[self.pos] == ch

    def match(self, pattern: re.Pattern, what: str) -> tuple[str, int]:
        self.skip_ws()
        m = pattern.match(self.text, self.pos)
        if not m:
            found = repr(self.text[self.pos]) if self.pos < len(self.text) else "end of line"
            raise _LineError(self.pos + 1, f"expected {what}, found {found}")
        self.pos = m.end()
        return m.group(0), m.start() + 1


def _number(token: str) -> int | float:
    if re.fullmatch(r"-?\d+", token):
        return int(token)
    return float(token)


def _parse_call(cur: _Cursor) -> Instruction:
    verb, col = cur.match(_IDENT, "instruction name")
    if verb not in VERBS:
        raise _LineError(col, f"unknown verb {verb!r}")
    kinds = VERBS[verb].arg_kinds
    cur.expect("(")
    args: list[int | float] = []
    arg_cols: list[int] = []
    if not cur.peek(")"):
        while True:
            tok, acol = cur.match(_NUMBER, "number")
            args.append(_number(tok))
            arg_cols.append(acol)
            if cur.peek(","):
                cur.expect(",")
                continue
            break
    cur.expect(")", "',' or ')'")
    if len(args) != len(kinds):
        raise _LineError(col, f"arity mismatch: {verb} takes {len(kinds)} argument(s), got {len(args)}")
    for a, kind, acol in zip(args, kinds, arg_cols):
        if kind == "node" and not isinstance(a, int):
            raise _LineError(acol, f"node id must be an integer, got {a!r}")
        if kind == "node" and a < 0:
            raise _LineError(acol, f"node id must be nonnegative, got {a}")
    return Instruction(verb, tuple(args))


def _parse_line(text: str, n_agents: int | None) -> tuple[int, list[Instruction]]:
    cur = _Cursor(text)
    kw, col = cur.match(_IDENT, "'agent'")
    if kw != "agent":
        raise _LineError(col, f"expected 'agent', found {kw!r}")
    tok, col = cur.match(re.compile(r"\d+(?![\w.])"), "agent id")
    agent = int(tok)
    if n_agents is not None and agent >= n_agents:
        raise _LineError(col, f"agent id {agent} out of range (have {n_agents} agents)")
    cur.expect(":")
    calls = [_parse_call(cur)]
    while cur.peek(";"):
        cur.expect(";")
        if cur.at_end():
            break
        calls.append(_parse_call(cur))
    if not cur.at_end():
        raise _LineError(cur.pos + 1, f"unexpected {cur.text[cur.pos]!r}, expected ';' or end of line")
    return agent, calls


def extract_code(text: str) -> str:
    m = _FENCE.search(text)
    return m.group(1) if m else text


def parse_program(text: str, n_agents: int | None = None) -> InstructionProgram:
    """Parse oracle output into per-agent instruction lists.

    Never raises on malformed input: each bad line yields one diagnostic
    and contributes nothing. Line numbers refer to ``text`` itself (inside
    a fenced block they are offset accordingly).
    """
    if not isinstance(text, str):
        text = str(text)
    body = text
    offset = 0
    m = _FENCE.search(text)
    if m:
        body = m.group(1)
        offset = text.count("\n", 0, m.start(1))
    prog = InstructionProgram(source=text)
    for k, raw in enumerate(body.splitlines(), start=1 + offset):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        prog.statement_lines += 1
        try:
            agent, calls = _parse_line(raw, n_agents)
        except _LineError as exc:
            prog.diagnostics.append(Diagnostic(k, exc.column, exc.message))
            continue
        prog.instructions.setdefault(agent, []).extend(calls)
        prog.line_numbers.setdefault(agent, []).extend([k] * len(calls))
    return prog


def format_program(instructions: dict[int, list[Instruction]]) -> str:
    lines = []
    for agent in sorted(instructions):
        calls = instructions[agent]
        if calls:
            lines.append(f"agent {agent}: " + "; ".join(str(c) for c in calls))
    return "\n".join(lines) + ("\n" if lines else "")
