"""Tiny arithmetic expression language for dynamics, costs and endpoint maps.

Grammar: numbers, declared identifiers, ``+ - * / ^``, unary minus,
parentheses, and calls to sin cos tan exp log sqrt abs max min.  Trees are
immutable; evaluation works on floats and on numpy arrays alike, so a parsed
expression can be evaluated over a whole trajectory in one call.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import EvaluationWarning, SchemaError

_FUNCS_1 = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
}
_FUNCS_2 = {"max": np.maximum, "min": np.minimum}

# Finite-difference steps: first derivatives use a central stencil plus one
# Richardson pass; second derivatives use a wider step to balance roundoff.
H_FD = 1e-6
H_HESS = 1e-4


@dataclass(frozen=True)
class SymbolTable:
    """Declared variable names: states x1..xn, controls u1..um, time t."""

    n: int
    m: int
    time_name: str = "t"
    state_prefix: str = "x"
    control_prefix: str = "u"
    extra: tuple = ()  # extra (name, kind, index) triples, e.g. endpoint vars

    def lookup(self, name):
        """Return ('state'|'control'|'time'|'extra_*', index) or None."""
        if name == self.time_name:
            return ("time", 0)
        for prefix, kind, count in (
            (self.state_prefix, "state", self.n),
            (self.control_prefix, "control", self.m),
        ):
            if name.startswith(prefix) and name[len(prefix):].isdigit():
                idx = int(name[len(prefix):]) - 1
                if 0 <= idx < count:
                    return (kind, idx)
        for ename, kind, idx in self.extra:
            if name == ename:
                return (kind, idx)
        return None


def endpoint_symbols(n):
    """Symbol table for endpoint functions of (x(0), x(T)): xi1.., xf1..."""
    extra = tuple(
        [(f"xi{i+1}", "initial", i) for i in range(n)]
        + [(f"xf{i+1}", "final", i) for i in range(n)]
    )
    return SymbolTable(n=0, m=0, extra=extra)


@dataclass(frozen=True)
class Node:
    kind: str  # 'const' | 'var' | 'neg' | 'bin' | 'call'
    value: float = 0.0
    name: str = ""
    var: tuple = ()  # (kind, index) for 'var'
    children: tuple = ()


class _Parser:
    def __init__(self, src, symbols):
        self.src = src
        self.symbols = symbols
        self.pos = 0

    def error(self, message):
        raise SchemaError("expr_syntax", f"{message} at offset {self.pos} in {self.src!r}")

    def peek(self):
        while self.pos < len(self.src) and self.src[self.pos].isspace():
            self.pos += 1
        return self.src[self.pos] if self.pos < len(self.src) else ""

    def expect(self, ch):
        if self.peek() != ch:
            self.error(f"expected {ch!r}")
        self.pos += 1

    def parse(self):
        tree = self.expr()
        if self.peek() != "":
            self.error(f"unexpected {self.src[self.pos]!r}")
        return tree

    def expr(self):
        node = self.term()
        while True:
            ch = self.peek()
            if ch == "+" or ch == "-":
                self.pos += 1
                rhs = self.term()
                node = Node("bin", name=ch, children=(node, rhs))
            else:
                return node

    def term(self):
        node = self.factor()
        while True:
            ch = self.peek()
            if ch == "*" or ch == "/":
                self.pos += 1
                rhs = self.factor()
                node = Node("bin", name=ch, children=(node, rhs))
            else:
                return node

    def factor(self):
        if self.peek() == "-":
            self.pos += 1
            return Node("neg", children=(self.factor(),))
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek() == "^":
            self.pos += 1
            exponent = self.factor()  # right associative, allows 2^-3
            return Node("bin", name="^", children=(base, exponent))
        return base

    def atom(self):
        ch = self.peek()
        if ch == "(":
            self.pos += 1
            node = self.expr()
            self.expect(")")
            return node
        if ch.isdigit() or ch == ".":
            return self.number()
        if ch.isalpha() or ch == "_":
            return self.identifier()
        self.error(f"unexpected {ch!r}" if ch else "unexpected end of input")

    def number(self):
        start = self.pos
        src = self.src
        while self.pos < len(src) and (src[self.pos].isdigit() or src[self.pos] == "."):
            self.pos += 1
        if self.pos < len(src) and src[self.pos] in "eE":
            probe = self.pos + 1
            if probe < len(src) and src[probe] in "+-":
                probe += 1
            if probe < len(src) and src[probe].isdigit():
                self.pos = probe
                while self.pos < len(src) and src[self.pos].isdigit():
                    self.pos += 1
        try:
            return Node("const", value=float(src[start:self.pos]))
        except ValueError:
            self.pos = start
            self.error("bad number literal")

    def identifier(self):
        start = self.pos
        src = self.src
        while self.pos < len(src) and (src[self.pos].isalnum() or src[self.pos] == "_"):
            self.pos += 1
        name = src[start:self.pos]
        if self.peek() == "(":
            self.pos += 1
            args = [self.expr()]
            while self.peek() == ",":
                self.pos += 1
                args.append(self.expr())
            self.expect(")")
            if name in _FUNCS_1 and len(args) == 1:
                return Node("call", name=name, children=tuple(args))
            if name in _FUNCS_2 and len(args) == 2:
                return Node("call", name=name, children=tuple(args))
            self.pos = start
            self.error(f"unknown function {name!r} or wrong arity")
        slot = self.symbols.lookup(name)
        if slot is None:
            self.pos = start
            raise SchemaError(
                "expr_unknown_identifier",
                f"unknown identifier {name!r} at offset {start} in {self.src!r}",
            )
        return Node("var", name=name, var=slot)


def parse_expression(src, symbols):
    """Parse ``src`` against ``symbols``; raises SchemaError with an offset."""
    if not src or not src.strip():
        raise SchemaError("expr_empty", "empty expression")
    return _Parser(src, symbols).parse()


def unparse(tree):
    """Render a tree back to source (fully parenthesized where needed)."""
    if tree.kind == "const":
        return repr(tree.value)
    if tree.kind == "var":
        return tree.name
    if tree.kind == "neg":
        return f"(-{unparse(tree.children[0])})"
    if tree.kind == "bin":
        a, b = tree.children
        return f"({unparse(a)} {tree.name} {unparse(b)})"
    args = ", ".join(unparse(c) for c in tree.children)
    return f"{tree.name}({args})"


def rename_vars(tree, mapping, symbols):
    """Rebind variables: mapping maps old name -> new name resolvable in symbols."""
    if tree.kind == "var":
        new_name = mapping.get(tree.name, tree.name)
        slot = symbols.lookup(new_name)
        if slot is None:
            raise SchemaError("expr_unknown_identifier", f"unknown identifier {new_name!r}")
        return Node("var", name=new_name, var=slot)
    if tree.children:
        return Node(
            tree.kind,
            value=tree.value,
            name=tree.name,
            var=tree.var,
            children=tuple(rename_vars(c, mapping, symbols) for c in tree.children),
        )
    return tree


def _eval_node(tree, lookup):
    if tree.kind == "const":
        return tree.value
    if tree.kind == "var":
        return lookup(tree.var)
    if tree.kind == "neg":
        return -_eval_node(tree.children[0], lookup)
    if tree.kind == "bin":
        a = _eval_node(tree.children[0], lookup)
        b = _eval_node(tree.children[1], lookup)
        if tree.name == "+":
            return a + b
        if tree.name == "-":
            return a - b
        if tree.name == "*":
            return a * b
        if tree.name == "/":
            with np.errstate(divide="ignore", invalid="ignore"):
                return np.divide(a, b)
        with np.errstate(invalid="ignore", over="ignore"):
            return np.power(a, b)
    fn = _FUNCS_1.get(tree.name) or _FUNCS_2.get(tree.name)
    with np.errstate(invalid="ignore", divide="ignore"):
        return fn(*(_eval_node(c, lookup) for c in tree.children))


def eval_expr(tree, state, control, t, extras=None):
    """Scalar evaluation; warns (EvaluationWarning) on a non-finite result."""

    def lookup(slot):
        kind, idx = slot
        if kind == "state":
            return state[idx]
        if kind == "control":
            return control[idx]
        if kind == "time":
            return t
        return extras[kind][idx]

    out = float(_eval_node(tree, lookup))
    if not np.isfinite(out):
        warnings.warn("expression evaluated to a non-finite value", EvaluationWarning)
    return out


def eval_many(tree, states, controls, ts, extras=None):
    """Vectorized evaluation: states (N,n), controls (N,m), ts (N,) -> (N,)."""
    states = np.asarray(states, dtype=float)
    N = states.shape[0]

    def lookup(slot):
        kind, idx = slot
        if kind == "state":
            return states[:, idx]
        if kind == "control":
            return np.asarray(controls, dtype=float)[:, idx]
        if kind == "time":
            return np.asarray(ts, dtype=float)
        return extras[kind][idx]

    out = _eval_node(tree, lookup)
    return np.broadcast_to(np.asarray(out, dtype=float), (N,)).copy()


_CODEGEN_FUNCS = {name: fn for name, fn in {**_FUNCS_1, **_FUNCS_2}.items()}


def _codegen(tree):
    if tree.kind == "const":
        return repr(tree.value)
    if tree.kind == "var":
        kind, idx = tree.var
        if kind == "state":
            return f"x[{idx}]"
        if kind == "control":
            return f"u[{idx}]"
        if kind == "time":
            return "t"
        return f"extras[{kind!r}][{idx}]"
    if tree.kind == "neg":
        return f"(-{_codegen(tree.children[0])})"
    if tree.kind == "bin":
        a, b = (_codegen(c) for c in tree.children)
        op = "**" if tree.name == "^" else tree.name
        return f"({a} {op} {b})"
    args = ", ".join(_codegen(c) for c in tree.children)
    return f"_fn_{tree.name}({args})"


def compile_exprs(trees):
    """Compile trees to one callable rhs(t, x, u) -> tuple of values.

    The generated code uses numpy ufuncs, so it accepts plain floats and
    arrays alike.  This is the hot path for trajectory integration; the
    tree-walking evaluator stays as the reference implementation.
    """
    body = ", ".join(_codegen(tr) for tr in trees)
    trailing = "," if len(trees) == 1 else ""
    src = f"def _rhs(t, x, u, extras=None):\n    return ({body}{trailing})\n"
    namespace = {f"_fn_{name}": fn for name, fn in _CODEGEN_FUNCS.items()}
    exec(compile(src, "<manoc-expr>", "exec"), namespace)
    return namespace["_rhs"]


def grad_state(tree, state, control, t, extras=None, h=H_FD):
    """d(expr)/d(state) by central differences with one Richardson pass."""
    state = np.asarray(state, dtype=float)
    n = state.shape[0]
    out = np.empty(n)
    for j in range(n):
        out[j] = _richardson_diff(
            lambda s, jj=j: _shift_eval(tree, state, jj, s, control, t, extras), h
        )
    return out


def _shift_eval(tree, state, j, delta, control, t, extras):
    shifted = state.copy()
    shifted[j] += delta
    return eval_expr(tree, shifted, control, t, extras)


def _richardson_diff(f, h):
    d1 = (f(h) - f(-h)) / (2.0 * h)
    d2 = (f(h / 2.0) - f(-h / 2.0)) / h
    return (4.0 * d2 - d1) / 3.0


def grad_state_many(tree, states, controls, ts, extras=None, h=H_FD):
    """Vectorized grad_state over a batch: returns (N, n)."""
    states = np.asarray(states, dtype=float)
    N, n = states.shape
    out = np.empty((N, n))
    for j in range(n):
        ej = np.zeros(n)
        ej[j] = 1.0

        def df(step):
            hi = eval_many(tree, states + step * ej, controls, ts, extras)
            lo = eval_many(tree, states - step * ej, controls, ts, extras)
            return (hi - lo) / (2.0 * step)

        out[:, j] = (4.0 * df(h / 2.0) - df(h)) / 3.0
    return out


def hess_state_many(tree, states, controls, ts, extras=None, h=H_HESS):
    """Vectorized state Hessian over a batch: returns (N, n, n), symmetrized."""
    states = np.asarray(states, dtype=float)
    N, n = states.shape
    out = np.empty((N, n, n))
    f0 = eval_many(tree, states, controls, ts, extras)
    shifts = []
    for j in range(n):
        ej = np.zeros(n)
        ej[j] = 1.0
        shifts.append(ej)
    for i in range(n):
        ei = shifts[i]
        fp = eval_many(tree, states + h * ei, controls, ts, extras)
        fm = eval_many(tree, states - h * ei, controls, ts, extras)
        out[:, i, i] = (fp - 2.0 * f0 + fm) / h**2
        for j in range(i + 1, n):
            ej = shifts[j]
            fpp = eval_many(tree, states + h * (ei + ej), controls, ts, extras)
            fpm = eval_many(tree, states + h * (ei - ej), controls, ts, extras)
            fmp = eval_many(tree, states - h * (ei - ej), controls, ts, extras)
            fmm = eval_many(tree, states - h * (ei + ej), controls, ts, extras)
            out[:, i, j] = out[:, j, i] = (fpp - fpm - fmp + fmm) / (4.0 * h**2)
    return out
