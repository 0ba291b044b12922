"""Problem files and the expression language.

Grammar of field expressions::

    expr     := term (('+' | '-') term)*
    term     := factor (('*' | '/') factor)*
    factor   := base ('^' exponent)?
    base     := number | ident | '(' expr ')' | '-' factor
    exponent := ['+' | '-'] number | ident | '(' expr ')'

An exponent must reduce to a real constant once bound parameters are
substituted; it is folded at parse time.  Problem files are TOML documents
with the sections ``problem``, ``field`` (or ``field.quasi`` plus
``field.residual``), ``params``, ``analysis`` and the optional ``derived``.
"""

from __future__ import annotations

import re
import sys
from importlib import resources
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .errors import (
    DimensionMismatch,
    ExprSyntaxError,
    MissingSection,
    NonLiteralExponent,
    ParseError,
    UnknownIdentifier,
)
from .vf_core import (
    Const,
    Div,
    Expr,
    Mul,
    Neg,
    Param,
    Pow,
    QhType,
    Sum,
    Var,
    VectorField,
    ZERO,
    auto_split,
    compile_exprs,
    format_number,
    variables,
)

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised only on 3.10
    import tomli as tomllib


_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)


@dataclass
class _Tok:
    kind: str
    text: str
    pos: int


def tokenize(text: str) -> list[_Tok]:
    toks, pos = [], 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            bad = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise ExprSyntaxError(f"unexpected character {text[bad]!r}", bad,
                                  ["number", "identifier", "operator"])
        kind = m.lastgroup
        start = m.start(kind)
        toks.append(_Tok(kind, m.group(kind), start))
        pos = m.end()
    toks.append(_Tok("end", "", len(text)))
    return toks


class _Parser:
    def __init__(self, text: str, vars: Sequence[str], params: Mapping[str, float]):
        self.toks = tokenize(text)
        self.i = 0
        self.vars = {name: k for k, name in enumerate(vars)}
        self.params = params

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def take(self) -> _Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def at(self, *ops: str) -> bool:
        return self.tok.kind == "op" and self.tok.text in ops

    def expect(self, op: str) -> None:
        if not self.at(op):
            raise ExprSyntaxError(f"unexpected {self.tok.text or 'end of input'!r}",
                                  self.tok.pos, [repr(op)])
        self.take()

    def parse(self) -> Expr:
        e = self.expr()
        if self.tok.kind != "end":
            raise ExprSyntaxError(f"unexpected {self.tok.text!r}", self.tok.pos,
                                  ["operator", "end of input"])
        return e

    def expr(self) -> Expr:
        terms = [self.term()]
        while self.at("+", "-"):
            op = self.take().text
            t = self.term()
            terms.append(Neg(t) if op == "-" else t)
        return terms[0] if len(terms) == 1 else Sum(tuple(terms))

    def term(self) -> Expr:
        e = self.factor()
        while self.at("*", "/"):
            op = self.take().text
            rhs = self.factor()
            e = Mul(e, rhs) if op == "*" else Div(e, rhs)
        return e

    def factor(self) -> Expr:
        if self.at("-"):
            self.take()
            return Neg(self.factor())
        b = self.base()
        if self.at("^"):
            self.take()
            return Pow(b, self.exponent())
        return b

    def base(self) -> Expr:
        t = self.tok
        if t.kind == "num":
            self.take()
            return Const(float(t.text))
        if t.kind == "ident":
            self.take()
            if t.text in self.vars:
                return Var(self.vars[t.text], t.text)
            if t.text in self.params:
                return Param(t.text)
            raise UnknownIdentifier(f"unknown identifier {t.text!r} at position {t.pos}")
        if self.at("("):
            self.take()
            e = self.expr()
            self.expect(")")
            return e
        raise ExprSyntaxError(f"unexpected {t.text or 'end of input'!r}", t.pos,
                              ["number", "identifier", "'('", "'-'"])

    def exponent(self) -> float:
        start = self.tok.pos
        sign = 1.0
        if self.at("+", "-"):
            sign = -1.0 if self.take().text == "-" else 1.0
        t = self.tok
        if t.kind == "num":
            self.take()
            return sign * float(t.text)
        if t.kind == "ident" or self.at("("):
            e = self.base()
            if variables(e):
                raise NonLiteralExponent(
                    f"exponent at position {start} depends on a state variable")
            return sign * compile_exprs([e], self.params)([])[0]
        raise ExprSyntaxError(f"unexpected {t.text or 'end of input'!r}", t.pos,
                              ["number", "'('"])


def parse_expr(text: str, vars: Sequence[str], params: Mapping[str, float] | None = None) -> Expr:
    return _Parser(text, vars, params or {}).parse()


# ---------------------------------------------------------------------------
# printing (round-trips through parse_expr)
# ---------------------------------------------------------------------------

_SUM, _TERM, _FACTOR, _BASE = range(4)


def _num(x: float) -> str:
    s = format_number(abs(x))
    return s if x >= 0 else f"(-{s})"


def format_expr(e: Expr) -> str:
    return _fmt(e, _SUM)


def _paren(s: str) -> str:
    return f"({s})"


def _fmt(e: Expr, level: int) -> str:
    if isinstance(e, Const):
        return _num(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Param):
        return e.name
    if isinstance(e, Sum):
        parts = [_fmt(e.terms[0], _TERM)]
        for t in e.terms[1:]:
            if isinstance(t, Neg):
                parts.append(" - " + _fmt(t.arg, _TERM))
            else:
                parts.append(" + " + _fmt(t, _TERM))
        s = "".join(parts)
        return s if level <= _SUM else _paren(s)
    if isinstance(e, Neg):
        s = "-" + _fmt(e.arg, _FACTOR)
        return s if level <= _FACTOR else _paren(s)
    if isinstance(e, (Mul, Div)):
        op = "*" if isinstance(e, Mul) else "/"
        s = _fmt(e.left, _TERM) + op + _fmt(e.right, _FACTOR)
        return s if level <= _TERM else _paren(s)
    if isinstance(e, Pow):
        b = e.base
        bs = _fmt(b, _BASE) if isinstance(b, (Var, Param)) or (
            isinstance(b, Const) and b.value >= 0) else _paren(_fmt(b, _SUM))
        p = format_number(e.exponent)
        if e.exponent < 0:
            p = _paren(p)
        s = f"{bs}^{p}"
        return s if level <= _FACTOR else _paren(s)
    raise TypeError(f"unknown node {e!r}")


# ---------------------------------------------------------------------------
# problem files
# ---------------------------------------------------------------------------

@dataclass
class ProblemSpec:
    name: str
    vars: list
    alpha: list
    k: float
    field: VectorField
    params: dict
    seeds: list = field(default_factory=list)
    order: int = 3
    bind: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    derived: dict = field(default_factory=dict)
    source: str = ""


_ANALYSIS_OPTIONS = ("tol_newton", "tau_hyp", "tau_cluster", "grid_L", "grid_points")


def _section(doc: dict, name: str) -> dict:
    if name not in doc or not isinstance(doc[name], dict):
        raise MissingSection(f"missing section [{name}]")
    return doc[name]


def _expr_table(table: dict, vars: list, params: dict, where: str) -> list[Expr]:
    out = []
    for v in vars:
        text = table.get(v)
        if text is None:
            raise MissingSection(f"[{where}] has no entry for variable {v!r}")
        try:
            out.append(parse_expr(str(text), vars, params))
        except ParseError as exc:
            raise exc.in_context(f"[{where}] {v}") from None
    extra = set(table) - set(vars) - {"quasi", "residual"}
    if extra:
        raise UnknownIdentifier(f"[{where}] entries for unknown variables {sorted(extra)}")
    return out


def _constant(value, params: Mapping[str, float], where: str) -> float:
    """A number, or a string holding a constant expression over known params."""
    if isinstance(value, bool):
        raise ParseError(f"{where}: expected a number")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            e = parse_expr(value, [], params)
        except ParseError as exc:
            raise exc.in_context(where) from None
        return float(compile_exprs([e], params)([])[0])
    raise ParseError(f"{where}: expected a number or a constant expression")


def parse_problem(text: str, overrides: Mapping[str, float] | None = None) -> ProblemSpec:
    """Parse a problem document; ``overrides`` replaces values in ``[params]``."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"malformed problem file: {exc}") from None
    prob = _section(doc, "problem")
    for key in ("vars", "alpha", "k"):
        if key not in prob:
            raise MissingSection(f"[problem] lacks {key!r}")
    vars = [str(v) for v in prob["vars"]]
    if len(set(vars)) != len(vars):
        raise ParseError("variable names must be distinct")
    params: dict[str, float] = {}
    overrides = dict(overrides or {})
    unknown = set(overrides) - set(doc.get("params", {}))
    if unknown:
        raise UnknownIdentifier(f"parameters {sorted(unknown)} are not declared in [params]")
    for p, v in doc.get("params", {}).items():
        params[str(p)] = float(overrides[p]) if p in overrides else _constant(v, params, f"params.{p}")
    alpha = [_constant(a, params, "problem.alpha") for a in prob["alpha"]]
    if len(alpha) != len(vars):
        raise DimensionMismatch(f"alpha has {len(alpha)} entries for {len(vars)} variables")
    k = _constant(prob["k"], params, "problem.k")
    clash = set(params) & set(vars)
    if clash:
        raise ParseError(f"names used both as variables and parameters: {sorted(clash)}")

    qh = QhType(tuple(alpha), k)
    fld = doc.get("field")
    if not isinstance(fld, dict):
        raise MissingSection("missing section [field]")
    if "quasi" in fld or "residual" in fld:
        quasi = _expr_table(_section(fld, "quasi"), vars, params, "field.quasi")
        res_tab = fld.get("residual", {})
        residual = ([ZERO] * len(vars) if not res_tab
                    else _expr_table(res_tab, vars, params, "field.residual"))
    else:
        quasi, residual = auto_split(_expr_table(fld, vars, params, "field"), qh, params)
    vf = VectorField(qh, tuple(quasi), tuple(residual), params, tuple(vars))

    analysis = doc.get("analysis", {})
    seeds = [[float(x) for x in s] for s in analysis.get("seeds", [])]
    for s in seeds:
        if len(s) != len(vars):
            raise DimensionMismatch(f"seed {s} has wrong length")
    derived = {name: parse_expr(str(t), vars, params)
               for name, t in doc.get("derived", {}).items()}
    return ProblemSpec(
        name=str(prob.get("name", "problem")),
        vars=vars, alpha=alpha, k=k, field=vf, params=params, seeds=seeds,
        order=int(analysis.get("order", 3)),
        bind={str(c): float(v) for c, v in analysis.get("bind", {}).items()},
        options={key: float(analysis[key]) for key in _ANALYSIS_OPTIONS if key in analysis},
        derived=derived, source=text,
    )


# ---------------------------------------------------------------------------
# bundled problems
# ---------------------------------------------------------------------------

def builtin_names() -> list[str]:
    folder = resources.files(__package__) / "problems"
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".toml"))


def builtin_text(name: str) -> str:
    if name not in builtin_names():
        raise UnknownIdentifier(f"unknown builtin problem {name!r}; try one of {builtin_names()}")
    return (resources.files(__package__) / "problems" / f"{name}.toml").read_text(encoding="utf-8")


def load_builtin(name: str, overrides: Mapping[str, float] | None = None) -> ProblemSpec:
    return parse_problem(builtin_text(name), overrides)
