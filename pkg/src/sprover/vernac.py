"""Sentence chopping and the surface command language.

A document is cut into spans, the smallest protocol-visible units: one
command per span, terminated by a period followed by whitespace or end of
text.  Periods inside nested ``(* .. *)`` comments or double-quoted strings
(with ``""`` escaping) never terminate.  Parsing a span yields exactly one
command or a positioned error; there is no notion of a partial command.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

from . import engine
from .kernel import (Atom, Conj, DefApp, Disj, Falsity, Formula, Impl, Truth,
                     FALSITY, TRUTH)
from .engine import TacticAst


class ParseError(Exception):
    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} (at {pos})")
        self.message = message
        self.pos = pos


# ---------------------------------------------------------------------------
# Spans

@dataclass(frozen=True)
class Span:
    id: int
    text: str
    offset: int
    broken: Optional[str] = None  # scan-level defect, e.g. unterminated comment

    @property
    def end(self) -> int:
        return self.offset + len(self.text)


def chop(text: str) -> list[Span]:
    """Cut a document into command spans.

    Spans cover the non-blank text; whitespace between sentences belongs to
    no span.  A trailing segment that contains code but no terminator (or an
    unterminated comment/string) becomes a span flagged as broken.
    """
    spans: list[Span] = []
    i = 0
    n = len(text)
    start: Optional[int] = None  # first non-blank char of the current segment
    has_code = False
    depth = 0
    in_string = False

    def emit(end: int, broken: Optional[str] = None) -> None:
        nonlocal start, has_code
        assert start is not None
        spans.append(Span(len(spans), text[start:end], start, broken))
        start = None
        has_code = False

    while i < n:
        c = text[i]
        if in_string:
            if c == '"':
                if i + 1 < n and text[i + 1] == '"':
                    i += 2
                    continue
                in_string = False
            i += 1
            continue
        if depth > 0:
            if c == '(' and i + 1 < n and text[i + 1] == '*':
                depth += 1
                i += 2
                continue
            if c == '*' and i + 1 < n and text[i + 1] == ')':
                depth -= 1
                i += 2
                continue
            i += 1
            continue
        if c == '(' and i + 1 < n and text[i + 1] == '*':
            if start is None:
                start = i
            depth = 1
            i += 2
            continue
        if c.isspace():
            i += 1
            continue
        if start is None:
            start = i
        if c == '"':
            in_string = True
            has_code = True
            i += 1
            continue
        if c == '.' and (i + 1 >= n or text[i + 1].isspace()):
            emit(i + 1)
            i += 1
            continue
        has_code = True
        i += 1

    if start is not None:
        if in_string:
            emit(n, "unterminated string literal")
        elif depth > 0:
            emit(n, "unterminated comment")
        elif has_code:
            emit(n, "missing '.' terminator")
        # else: trailing blanks/comments only, no span
    return spans


# ---------------------------------------------------------------------------
# Command syntax

GLOBAL = "global"
BRANCH = "branch"
TACTIC = "tactic"
MERGE = "merge"
QUERY = "query"

Classification = str


@dataclass(frozen=True)
class DefinitionCmd:
    name: str
    params: tuple[str, ...]
    body: Formula


@dataclass(frozen=True)
class AxiomCmd:
    name: str
    statement: Formula


@dataclass(frozen=True)
class TheoremCmd:
    name: str
    statement: Formula


@dataclass(frozen=True)
class HintCmd:
    kind: str  # "resolve" | "unfold"
    names: tuple[str, ...]


@dataclass(frozen=True)
class TacticCmd:
    tactic: TacticAst


@dataclass(frozen=True)
class QedCmd:
    pass


@dataclass(frozen=True)
class CheckCmd:
    formula: Formula


@dataclass(frozen=True)
class PrintCmd:
    name: str


@dataclass(frozen=True)
class RequireCmd:
    module: str


CommandAst = Union[DefinitionCmd, AxiomCmd, TheoremCmd, HintCmd, TacticCmd,
                   QedCmd, CheckCmd, PrintCmd, RequireCmd]


def classify(ast: CommandAst) -> Classification:
    """Total classification driving DAG construction."""
    if isinstance(ast, (DefinitionCmd, AxiomCmd, HintCmd, RequireCmd)):
        return GLOBAL
    if isinstance(ast, TheoremCmd):
        return BRANCH
    if isinstance(ast, TacticCmd):
        return TACTIC
    if isinstance(ast, QedCmd):
        return MERGE
    if isinstance(ast, (CheckCmd, PrintCmd)):
        return QUERY
    raise TypeError(f"not a command: {ast!r}")


# ---------------------------------------------------------------------------
# Lexer

_SYMBOLS = (":=", "->", "/\\", "\\/", "(", ")", ",", ":", ".", "~")
_RESERVED_FORMULA = {"True", "False", "Prop"}


@dataclass(frozen=True)
class _Token:
    kind: str  # "ident" | "int" | symbol text | "eof"
    value: str
    pos: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    i = 0
    n = len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c == '(' and i + 1 < n and text[i + 1] == '*':
            depth = 1
            i += 2
            while i < n and depth:
                if text.startswith("(*", i):
                    depth += 1
                    i += 2
                elif text.startswith("*)", i):
                    depth -= 1
                    i += 2
                else:
                    i += 1
            if depth:
                raise ParseError("unterminated comment", n)
            continue
        matched = False
        for sym in _SYMBOLS:
            if text.startswith(sym, i):
                tokens.append(_Token(sym, sym, i))
                i += len(sym)
                matched = True
                break
        if matched:
            continue
        if c.isalpha() or c == '_':
            j = i + 1
            while j < n and (text[j].isalnum() or text[j] in "_'"):
                j += 1
            tokens.append(_Token("ident", text[i:j], i))
            i = j
            continue
        if c.isdigit():
            j = i + 1
            while j < n and text[j].isdigit():
                j += 1
            tokens.append(_Token("int", text[i:j], i))
            i = j
            continue
        raise ParseError(f"unexpected character {c!r}", i)
    tokens.append(_Token("eof", "", n))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def cur(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        tok = self.cur
        self.i += 1
        return tok

    def fail(self, message: str):
        raise ParseError(message, self.cur.pos)

    def eat(self, kind: str) -> _Token:
        if self.cur.kind != kind:
            self.fail(f"expected {kind!r}")
        return self.advance()

    def at_ident(self, word: Optional[str] = None) -> bool:
        return self.cur.kind == "ident" and (word is None or self.cur.value == word)

    def eat_name(self) -> str:
        if self.cur.kind != "ident":
            self.fail("expected a name")
        if self.cur.value in _RESERVED_FORMULA:
            self.fail(f"{self.cur.value} is reserved")
        return self.advance().value

    # -- formulas -----------------------------------------------------------

    def formula(self) -> Formula:
        left = self._disj()
        if self.cur.kind == "->":
            self.advance()
            return Impl(left, self.formula())
        return left

    def _disj(self) -> Formula:
        left = self._conj()
        if self.cur.kind == "\\/":
            self.advance()
            return Disj(left, self._disj())
        return left

    def _conj(self) -> Formula:
        left = self._neg()
        if self.cur.kind == "/\\":
            self.advance()
            return Conj(left, self._conj())
        return left

    def _neg(self) -> Formula:
        if self.cur.kind == "~":
            self.advance()
            return Impl(self._neg(), FALSITY)
        return self._application()

    def _application(self) -> Formula:
        head = self._atom()
        if isinstance(head, Atom):
            args = []
            while self.cur.kind == "(" or self.cur.kind == "ident":
                args.append(self._atom())
            if args:
                return DefApp(head.name, tuple(args))
        return head

    def _atom(self) -> Formula:
        tok = self.cur
        if tok.kind == "ident":
            self.advance()
            if tok.value == "True":
                return TRUTH
            if tok.value == "False":
                return FALSITY
            if tok.value == "Prop":
                self.fail("Prop is reserved")
            return Atom(tok.value)
        if tok.kind == "(":
            self.advance()
            inner = self.formula()
            self.eat(")")
            return inner
        self.fail("expected a formula")

    # -- tactics ------------------------------------------------------------

    def tactic(self, allow_par: bool = True) -> TacticAst:
        tok = self.cur
        if tok.kind != "ident":
            self.fail("expected a tactic")
        word = tok.value
        if word == "par":
            self.advance()
            self.eat(":")
            if not allow_par:
                self.fail("par: may not be nested")
            return engine.Par(self.tactic(allow_par=False))
        if word == "Proof":
            self.advance()
            return engine.ProofMarker()
        if word == "intro":
            self.advance()
            if self.cur.kind == "ident":
                return engine.Intro(self.advance().value)
            return engine.Intro()
        if word == "intros":
            self.advance()
            return engine.Intros()
        if word == "apply":
            self.advance()
            return engine.Apply(self.eat_name())
        if word == "exact":
            self.advance()
            return engine.Exact(self.eat_name())
        if word == "split":
            self.advance()
            return engine.Split()
        if word == "left":
            self.advance()
            return engine.Left()
        if word == "right":
            self.advance()
            return engine.Right()
        if word == "assumption":
            self.advance()
            return engine.Assumption()
        if word == "unfold":
            self.advance()
            names = [self.eat_name()]
            while self.cur.kind == ",":
                self.advance()
                names.append(self.eat_name())
            return engine.Unfold(tuple(names))
        if word == "auto":
            self.advance()
            if self.cur.kind == "int":
                return engine.Auto(int(self.advance().value))
            return engine.Auto()
        if word == "idtac":
            self.advance()
            return engine.Idtac()
        if word == "fail":
            self.advance()
            return engine.Fail()
        self.fail(f"unknown command {word}")

    # -- commands -----------------------------------------------------------

    def params(self) -> tuple[str, ...]:
        names: list[str] = []
        while self.cur.kind == "(":
            self.advance()
            group = [self.eat_name()]
            while self.cur.kind == "ident" and self.cur.value != "Prop":
                group.append(self.eat_name())
            self.eat(":")
            if not (self.cur.kind == "ident" and self.cur.value == "Prop"):
                self.fail("expected Prop")
            self.advance()
            self.eat(")")
            names.extend(group)
        return tuple(names)

    def command(self) -> CommandAst:
        tok = self.cur
        if tok.kind != "ident":
            self.fail("expected a command")
        word = tok.value
        if word == "Definition":
            self.advance()
            name = self.eat_name()
            params = self.params()
            self.eat(":=")
            body = self.formula()
            ast: CommandAst = DefinitionCmd(name, params, body)
        elif word == "Axiom":
            self.advance()
            name = self.eat_name()
            self.eat(":")
            ast = AxiomCmd(name, self.formula())
        elif word == "Theorem":
            self.advance()
            name = self.eat_name()
            self.eat(":")
            ast = TheoremCmd(name, self.formula())
        elif word == "Hint":
            self.advance()
            if self.at_ident("Resolve"):
                kind = "resolve"
            elif self.at_ident("Unfold"):
                kind = "unfold"
            else:
                self.fail("expected Resolve or Unfold")
            self.advance()
            names = [self.eat_name()]
            while self.cur.kind == "ident":
                names.append(self.eat_name())
            ast = HintCmd(kind, tuple(names))
        elif word == "Qed":
            self.advance()
            ast = QedCmd()
        elif word == "Check":
            self.advance()
            ast = CheckCmd(self.formula())
        elif word == "Print":
            self.advance()
            ast = PrintCmd(self.eat_name())
        elif word == "Require":
            self.advance()
            ast = RequireCmd(self.eat_name())
        else:
            ast = TacticCmd(self.tactic())
        self.eat(".")
        self.eat("eof")
        return ast


def parse(span: Span) -> CommandAst:
    """Parse one span into its command; raises ParseError on failure."""
    if span.broken is not None:
        raise ParseError(span.broken, len(span.text))
    return _Parser(span.text).command()


# ---------------------------------------------------------------------------
# Rendering (used by goal display and query printers)

_PREC_IMPL = 1
_PREC_DISJ = 2
_PREC_CONJ = 3
_PREC_ATOM = 5


def format_formula(formula: Formula, parent: int = 0) -> str:
    if isinstance(formula, Truth):
        return "True"
    if isinstance(formula, Falsity):
        return "False"
    if isinstance(formula, Atom):
        return formula.name
    if isinstance(formula, DefApp):
        args = " ".join(format_formula(a, _PREC_ATOM) for a in formula.args)
        text = f"{formula.name} {args}" if args else formula.name
        return f"({text})" if parent >= _PREC_ATOM else text
    if isinstance(formula, Impl):
        text = (f"{format_formula(formula.lhs, _PREC_IMPL + 1)} -> "
                f"{format_formula(formula.rhs, _PREC_IMPL)}")
        return f"({text})" if parent > _PREC_IMPL else text
    if isinstance(formula, Disj):
        text = (f"{format_formula(formula.lhs, _PREC_DISJ + 1)} \\/ "
                f"{format_formula(formula.rhs, _PREC_DISJ)}")
        return f"({text})" if parent > _PREC_DISJ else text
    if isinstance(formula, Conj):
        text = (f"{format_formula(formula.lhs, _PREC_CONJ + 1)} /\\ "
                f"{format_formula(formula.rhs, _PREC_CONJ)}")
        return f"({text})" if parent > _PREC_CONJ else text
    raise TypeError(f"not a formula: {formula!r}")


def format_goal(goal: engine.Goal) -> str:
    lines = [f"{name} : {format_formula(f)}" for name, f in goal.hypotheses]
    lines.append("=" * 24)
    lines.append(format_formula(goal.conclusion))
    return "\n".join(lines)


def command_names(ast: CommandAst) -> list[str]:
    """Every name a command mentions, in source order (for hyperlinking)."""
    names: list[str] = []

    def from_formula(f: Formula) -> None:
        if isinstance(f, Atom):
            names.append(f.name)
        elif isinstance(f, (Impl, Conj, Disj)):
            from_formula(f.lhs)
            from_formula(f.rhs)
        elif isinstance(f, DefApp):
            names.append(f.name)
            for a in f.args:
                from_formula(a)

    def from_tactic(t: TacticAst) -> None:
        if isinstance(t, (engine.Apply, engine.Exact)):
            names.append(t.name)
        elif isinstance(t, engine.Unfold):
            names.extend(t.names)
        elif isinstance(t, engine.Par):
            from_tactic(t.inner)

    if isinstance(ast, DefinitionCmd):
        from_formula(ast.body)
    elif isinstance(ast, (AxiomCmd, TheoremCmd)):
        from_formula(ast.statement)
    elif isinstance(ast, HintCmd):
        names.extend(ast.names)
    elif isinstance(ast, TacticCmd):
        from_tactic(ast.tactic)
    elif isinstance(ast, CheckCmd):
        from_formula(ast.formula)
    elif isinstance(ast, PrintCmd):
        names.append(ast.name)
    return names
