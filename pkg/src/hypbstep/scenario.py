"""Scenario files: a flat key = value format with a small expression grammar.

Coefficient and initial-condition functions are quoted arithmetic
expressions over x (and y for the two-argument coefficient), e.g.

    g  = "2*(1-x)"
    f  = "cos(2*pi*x)+4*sin(2*pi*y)"
    u0 = "4*sin(pi*x)"

Grammar: + - * / ^ (right-associative, binds tightest), unary minus,
sin/cos/exp, the constant pi, parentheses.  Comments start with '#'.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kernels import DelayBounds


class ScenarioError(ValueError):
    """Malformed or invalid scenario content, with a location where known."""


class ExprEvalError(ValueError):
    """Runtime evaluation failure (division by zero, missing variable)."""


# --------------------------------------------------------------------------
# Expression trees
# --------------------------------------------------------------------------

_BINARY = {"+", "-", "*", "/", "^"}
_FUNCS = {"sin", "cos", "exp"}


@dataclass(frozen=True)
class Expr:
    kind: str  # "const" | "x" | "y" | binary op | function name
    value: float | None = None
    args: tuple["Expr", ...] = ()

    def variables(self) -> frozenset[str]:
        if self.kind in ("x", "y"):
            return frozenset((self.kind,))
        out: frozenset[str] = frozenset()
        for a in self.args:
            out |= a.variables()
        return out

    def __str__(self) -> str:
        return _render(self, 0)


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}


def _render(e: Expr, min_prec: int) -> str:
    """Minimal-parenthesis rendering that reparses to the identical tree.

    Targets parser-produced trees (numeric literals are nonnegative there;
    negation appears as subtraction from zero).
    """
    if e.kind == "const":
        v = float(e.value)
        return repr(int(v)) if v.is_integer() and abs(v) < 1e15 else repr(v)
    if e.kind in ("x", "y"):
        return e.kind
    if e.kind in _FUNCS:
        return f"{e.kind}({_render(e.args[0], 0)})"
    left, right = e.args
    prec = _PREC[e.kind]
    if e.kind == "^":
        ls, rs = _render(left, prec + 1), _render(right, prec)
    else:
        ls, rs = _render(left, prec), _render(right, prec + 1)
    text = f"{ls} {e.kind} {rs}" if e.kind in ("+", "-") else f"{ls}{e.kind}{rs}"
    return f"({text})" if prec < min_prec else text


class _Tokens:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.tokens: list[tuple[str, str, int]] = []
        self._scan()
        self.idx = 0

    def _scan(self) -> None:
        t, i, n = self.text, 0, len(self.text)
        while i < n:
            c = t[i]
            if c.isspace():
                i += 1
                continue
            if c.isdigit() or c == ".":
                j = i
                while j < n and (t[j].isdigit() or t[j] == "."):
                    j += 1
                if j < n and t[j] in "eE" and (j + 1 < n and (t[j + 1].isdigit() or t[j + 1] in "+-")):
                    j += 2
                    while j < n and t[j].isdigit():
                        j += 1
                self.tokens.append(("num", t[i:j], i))
                i = j
                continue
            if c.isalpha() or c == "_":
                j = i
                while j < n and (t[j].isalnum() or t[j] == "_"):
                    j += 1
                self.tokens.append(("name", t[i:j], i))
                i = j
                continue
            if c in "+-*/^()":
                self.tokens.append(("op", c, i))
                i += 1
                continue
            raise ScenarioError(f"column {i + 1}: unexpected character {c!r}")
        self.tokens.append(("end", "", n))

    def peek(self) -> tuple[str, str, int]:
        return self.tokens[self.idx]

    def next(self) -> tuple[str, str, int]:
        tok = self.tokens[self.idx]
        self.idx += 1
        return tok


def parse_expr(text: str) -> Expr:
    """Parse an expression string into a tree; raises ScenarioError with column."""
    toks = _Tokens(text)
    e = _parse_sum(toks)
    kind, val, pos = toks.peek()
    if kind != "end":
        raise ScenarioError(f"column {pos + 1}: unexpected {val!r}")
    return e


def _parse_sum(toks: _Tokens) -> Expr:
    e = _parse_product(toks)
    while True:
        kind, val, _ = toks.peek()
        if kind == "op" and val in ("+", "-"):
            toks.next()
            e = Expr(val, args=(e, _parse_product(toks)))
        else:
            return e


def _parse_product(toks: _Tokens) -> Expr:
    e = _parse_unary(toks)
    while True:
        kind, val, _ = toks.peek()
        if kind == "op" and val in ("*", "/"):
            toks.next()
            e = Expr(val, args=(e, _parse_unary(toks)))
        else:
            return e


def _parse_unary(toks: _Tokens) -> Expr:
    kind, val, _ = toks.peek()
    if kind == "op" and val == "-":
        toks.next()
        return Expr("-", args=(Expr("const", 0.0), _parse_unary(toks)))
    return _parse_power(toks)


def _parse_power(toks: _Tokens) -> Expr:
    base = _parse_atom(toks)
    kind, val, _ = toks.peek()
    if kind == "op" and val == "^":
        toks.next()
        return Expr("^", args=(base, _parse_unary(toks)))
    return base


def _parse_atom(toks: _Tokens) -> Expr:
    kind, val, pos = toks.next()
    if kind == "num":
        try:
            return Expr("const", float(val))
        except ValueError as exc:
            raise ScenarioError(f"column {pos + 1}: bad number {val!r}") from exc
    if kind == "name":
        if val == "pi":
            return Expr("const", math.pi)
        if val in ("x", "y"):
            return Expr(val)
        if val in _FUNCS:
            k, v, p = toks.next()
            if not (k == "op" and v == "("):
                raise ScenarioError(f"column {p + 1}: {val} needs parentheses")
            arg = _parse_sum(toks)
            k, v, p = toks.next()
            if not (k == "op" and v == ")"):
                raise ScenarioError(f"column {p + 1}: missing ')'")
            return Expr(val, args=(arg,))
        raise ScenarioError(f"column {pos + 1}: unknown name {val!r}")
    if kind == "op" and val == "(":
        e = _parse_sum(toks)
        k, v, p = toks.next()
        if not (k == "op" and v == ")"):
            raise ScenarioError(f"column {p + 1}: missing ')'")
        return e
    raise ScenarioError(f"column {pos + 1}: unexpected {val or 'end of expression'!r}")


def eval_expr(e: Expr, x, y=None):
    """Evaluate on scalars or numpy arrays; y must be supplied iff referenced."""
    if "y" in e.variables() and y is None:
        raise ExprEvalError("expression references y but no y value was supplied")
    return _eval(e, x, y)


def _eval(e: Expr, x, y):
    if e.kind == "const":
        return e.value
    if e.kind == "x":
        return x
    if e.kind == "y":
        return y
    if e.kind == "sin":
        return np.sin(_eval(e.args[0], x, y))
    if e.kind == "cos":
        return np.cos(_eval(e.args[0], x, y))
    if e.kind == "exp":
        return np.exp(_eval(e.args[0], x, y))
    a = _eval(e.args[0], x, y)
    b = _eval(e.args[1], x, y)
    if e.kind == "+":
        return a + b
    if e.kind == "-":
        return a - b
    if e.kind == "*":
        return a * b
    if e.kind == "/":
        if np.any(np.asarray(b) == 0):
            raise ExprEvalError("division by zero")
        return a / b
    if e.kind == "^":
        return a**b
    raise ExprEvalError(f"unknown node kind {e.kind!r}")


# --------------------------------------------------------------------------
# Scenario configuration
# --------------------------------------------------------------------------

MODES = ("adaptive", "nonadaptive-exact", "nonadaptive-mismatch")


@dataclass(frozen=True)
class ScenarioConfig:
    d_true: float
    bounds: DelayBounds
    d_hat0: float
    theta: float
    b1: float
    n_x: int
    n_d: int
    cfl: float
    t_final: float
    mode: str
    g_expr: Expr
    f_expr: Expr
    u0_expr: Expr
    v0_expr: Expr
    snapshot_stride: int = 50
    strict_stability: bool = False
    compat_printed_kernels: bool = False
    out_dir: str | None = None

    def g(self, x):
        return eval_expr(self.g_expr, x)

    def f(self, x, y):
        return eval_expr(self.f_expr, x, y)

    def u0(self, x):
        return eval_expr(self.u0_expr, x)

    def v0(self, x):
        return eval_expr(self.v0_expr, x)


_DEFAULTS = {
    "b1": "9.0",
    "n_x": "201",
    "n_d": "65",
    "cfl": "0.9",
    "snapshot_stride": "50",
    "strict_stability": "false",
    "compat_printed_kernels": "false",
}

_KEYS = {
    "mode",
    "d_true",
    "d_low",
    "d_high",
    "d_hat0",
    "theta",
    "b1",
    "n_x",
    "n_d",
    "cfl",
    "t_final",
    "g",
    "f",
    "u0",
    "v0",
    "snapshot_stride",
    "strict_stability",
    "compat_printed_kernels",
    "out_dir",
}

_EXPR_KEYS = ("g", "f", "u0", "v0")


def parse_scenario(text: str) -> ScenarioConfig:
    """Parse and validate a scenario file's contents."""
    raw: dict[str, str] = {}
    lines: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ScenarioError(f"line {lineno}: expected 'key = value'")
        key, _, value = body.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _KEYS:
            raise ScenarioError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ScenarioError(f"line {lineno}: duplicate key {key!r}")
        if not value:
            raise ScenarioError(f"line {lineno}: empty value for {key!r}")
        raw[key] = value
        lines[key] = lineno

    for key, default in _DEFAULTS.items():
        raw.setdefault(key, default)
    missing = sorted(
        k for k in _KEYS - {"out_dir"} if k not in raw
    )
    if missing:
        raise ScenarioError(f"missing required keys: {', '.join(missing)}")

    def where(key: str) -> str:
        return f"line {lines[key]}" if key in lines else f"default for {key!r}"

    def number(key: str) -> float:
        try:
            return float(raw[key])
        except ValueError as exc:
            raise ScenarioError(f"{where(key)}: {key} must be a number") from exc

    def integer(key: str) -> int:
        try:
            return int(raw[key])
        except ValueError as exc:
            raise ScenarioError(f"{where(key)}: {key} must be an integer") from exc

    def boolean(key: str) -> bool:
        v = raw[key].lower()
        if v in ("true", "yes", "1"):
            return True
        if v in ("false", "no", "0"):
            return False
        raise ScenarioError(f"{where(key)}: {key} must be true or false")

    def expression(key: str, allowed: set[str]) -> Expr:
        v = raw[key]
        if len(v) >= 2 and v[0] == v[-1] and v[0] in "\"'":
            v = v[1:-1]
        try:
            e = parse_expr(v)
        except ScenarioError as exc:
            raise ScenarioError(f"{where(key)}: {key}: {exc}") from exc
        extra = e.variables() - allowed
        if extra:
            raise ScenarioError(
                f"{where(key)}: {key} may not reference {', '.join(sorted(extra))}"
            )
        return e

    mode = raw["mode"]
    if mode not in MODES:
        raise ScenarioError(f"{where('mode')}: mode must be one of {', '.join(MODES)}")

    d_low, d_high = number("d_low"), number("d_high")
    if not (0.0 < d_low <= d_high):
        raise ScenarioError(
            f"{where('d_low')}: need 0 < d_low <= d_high, got [{d_low}, {d_high}]"
        )
    bounds = DelayBounds(d_low, d_high)

    d_true, d_hat0 = number("d_true"), number("d_hat0")
    if not (d_low <= d_true <= d_high):
        raise ScenarioError(
            f"{where('d_true')}: d_true = {d_true} violates the known delay "
            f"bounds [{d_low}, {d_high}]"
        )
    if not (d_low <= d_hat0 <= d_high):
        raise ScenarioError(
            f"{where('d_hat0')}: d_hat0 = {d_hat0} violates the known delay "
            f"bounds [{d_low}, {d_high}]"
        )

    theta = number("theta")
    if theta <= 0.0:
        raise ScenarioError(f"{where('theta')}: theta must be positive")
    b1 = number("b1")
    if b1 <= 2.0 * d_high:
        raise ScenarioError(
            f"{where('b1')}: b1 must exceed 2*D_bar = {2.0 * d_high}, got {b1}"
        )
    cfl = number("cfl")
    if not (0.0 < cfl <= 1.0):
        raise ScenarioError(f"{where('cfl')}: cfl must lie in (0, 1]")
    n_x = integer("n_x")
    if n_x < 11:
        raise ScenarioError(f"{where('n_x')}: n_x must be at least 11")
    n_d = integer("n_d")
    if n_d < 3:
        raise ScenarioError(f"{where('n_d')}: n_d must be at least 3")
    t_final = number("t_final")
    if t_final <= 0.0:
        raise ScenarioError(f"{where('t_final')}: t_final must be positive")
    stride = integer("snapshot_stride")
    if stride < 0:
        raise ScenarioError(f"{where('snapshot_stride')}: snapshot_stride must be >= 0")

    return ScenarioConfig(
        d_true=d_true,
        bounds=bounds,
        d_hat0=d_hat0,
        theta=theta,
        b1=b1,
        n_x=n_x,
        n_d=n_d,
        cfl=cfl,
        t_final=t_final,
        mode=mode,
        g_expr=expression("g", {"x"}),
        f_expr=expression("f", {"x", "y"}),
        u0_expr=expression("u0", {"x"}),
        v0_expr=expression("v0", {"x"}),
        snapshot_stride=stride,
        strict_stability=boolean("strict_stability"),
        compat_printed_kernels=boolean("compat_printed_kernels"),
        out_dir=raw.get("out_dir"),
    )


def load_scenario(path) -> ScenarioConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scenario(fh.read())
