"""Scalar fields as expression trees with exact forward-mode gradients.

Trees are immutable and hash-consed structurally.  For speed, every field
(or bundle of fields) is compiled once into plain Python source: a scalar
variant built on ``math`` and a batched variant built on numpy.  A direct
tree interpreter is kept as an independent reference for tests and for kink
detection.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

UNARY = ("neg", "exp", "ln", "abs")
BINARY = ("+", "-", "*", "/", "^", "min", "max")
KINK_OPS = ("abs", "min", "max")


class Expr:
    __slots__ = ("op", "args", "value", "_hash")

    def __init__(self, op: str, args: tuple = (), value=None):
        self.op = op
        self.args = args
        self.value = value
        self._hash = hash((op, args, value))

    def __hash__(self):
        return self._hash

    def __eq__(self, other):
        return (isinstance(other, Expr) and self._hash == other._hash and self.op == other.op
                and self.value == other.value and self.args == other.args)

    def __repr__(self):
        return f"Expr({to_prefix(self)!r})"

    # arithmetic builds new trees
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __pow__(self, o):
        return power(self, o)

    def __neg__(self):
        return neg(self)

    @property
    def is_const(self) -> bool:
        return self.op == "const"


def const(c: float) -> Expr:
    return Expr("const", (), float(c))


def var(i: int) -> Expr:
    return Expr("x", (), int(i))


def dist(j: int) -> Expr:
    return Expr("d", (), int(j))


def lift(e) -> Expr:
    if isinstance(e, Expr):
        return e
    if isinstance(e, (int, float, np.floating, np.integer)):
        return const(float(e))
    raise TypeError(f"cannot lift {type(e).__name__} into an expression")


def _c(e: Expr, v: float) -> bool:
    return e.op == "const" and e.value == v


def add(a, b) -> Expr:
    a, b = lift(a), lift(b)
    if a.is_const and b.is_const:
        return const(a.value + b.value)
    if _c(a, 0.0):
        return b
    if _c(b, 0.0):
        return a
    return Expr("+", (a, b))


def sub(a, b) -> Expr:
    a, b = lift(a), lift(b)
    if a.is_const and b.is_const:
        return const(a.value - b.value)
    if _c(b, 0.0):
        return a
    if _c(a, 0.0):
        return neg(b)
    return Expr("-", (a, b))


def mul(a, b) -> Expr:
    a, b = lift(a), lift(b)
    if a.is_const and b.is_const:
        return const(a.value * b.value)
    if _c(a, 0.0) or _c(b, 0.0):
        return const(0.0)
    if _c(a, 1.0):
        return b
    if _c(b, 1.0):
        return a
    return Expr("*", (a, b))


def div(a, b) -> Expr:
    a, b = lift(a), lift(b)
    if a.is_const and b.is_const:
        return const(a.value / b.value)
    if _c(b, 1.0):
        return a
    if _c(a, 0.0):
        return const(0.0)
    return Expr("/", (a, b))


def power(a, b) -> Expr:
    a, b = lift(a), lift(b)
    if a.is_const and b.is_const:
        return const(a.value ** b.value)
    if _c(b, 1.0):
        return a
    if _c(b, 0.0):
        return const(1.0)
    return Expr("^", (a, b))


def neg(a) -> Expr:
    a = lift(a)
    if a.is_const:
        return const(-a.value)
    if a.op == "neg":
        return a.args[0]
    return Expr("neg", (a,))


def exp(a) -> Expr:
    a = lift(a)
    return const(math.exp(a.value)) if a.is_const else Expr("exp", (a,))


def log(a) -> Expr:
    a = lift(a)
    return const(math.log(a.value)) if a.is_const else Expr("ln", (a,))


def absolute(a) -> Expr:
    a = lift(a)
    return const(abs(a.value)) if a.is_const else Expr("abs", (a,))


def minimum(a, b) -> Expr:
    a, b = lift(a), lift(b)
    if a.is_const and b.is_const:
        return const(min(a.value, b.value))
    return Expr("min", (a, b))


def maximum(a, b) -> Expr:
    a, b = lift(a), lift(b)
    if a.is_const and b.is_const:
        return const(max(a.value, b.value))
    return Expr("max", (a, b))


def total(terms: Iterable) -> Expr:
    out = const(0.0)
    for t in terms:
        out = add(out, t)
    return out


# ---------------------------------------------------------------- traversal

def _postorder(roots: Sequence[Expr]) -> list:
    seen: set = set()
    order: list = []
    stack = [(r, False) for r in reversed(list(roots))]
    while stack:
        node, expanded = stack.pop()
        if node in seen:
            continue
        if expanded:
            seen.add(node)
            order.append(node)
            continue
        stack.append((node, True))
        for a in reversed(node.args):
            if a not in seen:
                stack.append((a, False))
    return order


def variables(e: Expr) -> tuple[set, set]:
    xs, ds = set(), set()
    for node in _postorder([e]):
        if node.op == "x":
            xs.add(node.value)
        elif node.op == "d":
            ds.add(node.value)
    return xs, ds


def substitute(e: Expr, mapping: dict) -> Expr:
    """Replace leaves; keys are ('x', i) or ('d', j)."""
    memo: dict = {}
    for node in _postorder([e]):
        if node.op in ("x", "d"):
            memo[node] = lift(mapping.get((node.op, node.value), node))
        elif node.op == "const":
            memo[node] = node
        else:
            args = [memo[a] for a in node.args]
            memo[node] = _rebuild(node.op, args)
    return memo[e]


_BUILDERS = {
    "+": add, "-": sub, "*": mul, "/": div, "^": power, "min": minimum, "max": maximum,
    "neg": neg, "exp": exp, "ln": log, "abs": absolute,
}


def _rebuild(op: str, args: list) -> Expr:
    return _BUILDERS[op](*args)


def disturbance_degree(e: Expr) -> float:
    """Polynomial degree in the disturbance leaves (inf when not polynomial)."""
    deg: dict = {}
    for node in _postorder([e]):
        op = node.op
        if op == "d":
            deg[node] = 1.0
        elif op in ("x", "const"):
            deg[node] = 0.0
        elif op in ("+", "-", "min", "max"):
            a, b = (deg[x] for x in node.args)
            if op in ("min", "max") and max(a, b) > 0:
                deg[node] = math.inf
            else:
                deg[node] = max(a, b)
        elif op == "neg":
            deg[node] = deg[node.args[0]]
        elif op == "*":
            deg[node] = deg[node.args[0]] + deg[node.args[1]]
        elif op == "/":
            deg[node] = deg[node.args[0]] if deg[node.args[1]] == 0 else math.inf
        elif op == "^":
            base, ex = node.args
            if deg[base] == 0 and deg[ex] == 0:
                deg[node] = 0.0
            elif ex.is_const and float(ex.value).is_integer() and ex.value >= 0:
                deg[node] = deg[base] * ex.value
            else:
                deg[node] = math.inf
        else:
            deg[node] = 0.0 if deg[node.args[0]] == 0 else math.inf
    return deg[e]


# ---------------------------------------------------------------- interpreter

def interpret(e: Expr, x, d=()) -> np.ndarray:
    """Reference evaluation by direct tree walk (numpy semantics)."""
    vals = _interpret_all([e], x, d)
    return vals[e]


def _interpret_all(roots, x, d):
    vals: dict = {}
    with np.errstate(all="ignore"):
        for node in _postorder(roots):
            op = node.op
            if op == "const":
                vals[node] = node.value
            elif op == "x":
                vals[node] = np.asarray(x[node.value], float)
            elif op == "d":
                vals[node] = np.asarray(d[node.value], float)
            else:
                a = [vals[t] for t in node.args]
                vals[node] = _NUMPY_OPS[op](*a)
    return vals


_NUMPY_OPS: dict[str, Callable] = {
    "+": np.add, "-": np.subtract, "*": np.multiply, "/": np.divide, "^": np.power,
    "min": np.minimum, "max": np.maximum, "neg": np.negative, "exp": np.exp,
    "ln": np.log, "abs": np.abs,
}


def kink_arguments(e: Expr, x, d=()) -> list:
    """Arguments whose sign selects a branch: |a| -> a, min/max(a, b) -> a - b."""
    nodes = [n for n in _postorder([e]) if n.op in KINK_OPS]
    if not nodes:
        return []
    vals = _interpret_all([e], x, d)
    out = []
    for n in nodes:
        if n.op == "abs":
            out.append(np.asarray(vals[n.args[0]], float))
        else:
            out.append(np.asarray(vals[n.args[0]] - vals[n.args[1]], float))
    return out


# ---------------------------------------------------------------- code generation

def _exp_inf(v):
    # overflow becomes inf, as with numpy, so an adaptive stepper can reject the stage
    try:
        return math.exp(v)
    except OverflowError:
        return math.inf


def _pow_inf(a, b):
    try:
        return math.pow(a, b)
    except OverflowError:
        return math.inf


_SCALAR_NS = {
    "_exp": _exp_inf, "_log": math.log, "_abs": abs, "_min": min, "_max": max,
    "_pow": _pow_inf, "_sel": lambda c, a, b: a if c else b,
    "_sign": lambda v: int(v > 0) - int(v < 0),
}
_VECTOR_NS = {
    "_exp": np.exp, "_log": np.log, "_abs": np.abs, "_min": np.minimum, "_max": np.maximum,
    "_pow": np.power, "_sel": np.where, "_sign": np.sign,
}


class _Emitter:
    def __init__(self):
        self.lines: list[str] = []
        self.count = 0

    def tmp(self, rhs: str) -> str:
        name = f"t{self.count}"
        self.count += 1
        self.lines.append(f"    {name} = {rhs}")
        return name


def _emit(roots: Sequence[Expr], grad_roots: Sequence[Expr]):
    """Source lines computing values of ``roots`` and x-gradients of ``grad_roots``."""
    em = _Emitter()
    val: dict = {}
    grad: dict = {}
    need_grad = set(_postorder(grad_roots))
    for node in _postorder(list(roots) + list(grad_roots)):
        op = node.op
        if op == "const":
            val[node] = repr(node.value)
            grad[node] = {}
            continue
        if op == "x":
            val[node] = f"x{node.value}"
            grad[node] = {node.value: "1.0"}
            continue
        if op == "d":
            val[node] = f"d{node.value}"
            grad[node] = {}
            continue
        args = [val[a] for a in node.args]
        if op in ("+", "-", "*", "/"):
            v = em.tmp(f"{args[0]} {op} {args[1]}")
        elif op == "^":
            v = em.tmp(f"_pow({args[0]}, {args[1]})")
        elif op == "min":
            v = em.tmp(f"_min({args[0]}, {args[1]})")
        elif op == "max":
            v = em.tmp(f"_max({args[0]}, {args[1]})")
        elif op == "neg":
            v = em.tmp(f"-{args[0]}")
        elif op == "exp":
            v = em.tmp(f"_exp({args[0]})")
        elif op == "ln":
            v = em.tmp(f"_log({args[0]})")
        elif op == "abs":
            v = em.tmp(f"_abs({args[0]})")
        else:  # pragma: no cover
            raise ValueError(op)
        val[node] = v
        if node not in need_grad:
            continue
        ga = [grad[a] for a in node.args]
        keys = set().union(*[set(g) for g in ga])
        g: dict = {}
        if op == "+":
            for k in keys:
                g[k] = em.tmp(" + ".join(gx[k] for gx in ga if k in gx))
        elif op == "-":
            for k in keys:
                lhs = ga[0].get(k)
                rhs = ga[1].get(k)
                g[k] = em.tmp(f"{lhs} - {rhs}" if lhs and rhs else (lhs or f"-{rhs}"))
        elif op == "neg":
            for k in keys:
                g[k] = em.tmp(f"-{ga[0][k]}")
        elif op == "*":
            a, b = args
            for k in keys:
                parts = []
                if k in ga[0]:
                    parts.append(f"{ga[0][k]} * {b}")
                if k in ga[1]:
                    parts.append(f"{a} * {ga[1][k]}")
                g[k] = em.tmp(" + ".join(parts))
        elif op == "/":
            b = args[1]
            for k in keys:
                num = ga[0].get(k, "0.0")
                if k in ga[1]:
                    g[k] = em.tmp(f"({num} - {v} * {ga[1][k]}) / {b}")
                else:
                    g[k] = em.tmp(f"{num} / {b}")
        elif op == "^":
            base, ex = node.args
            a, b = args
            if ex.is_const:
                c = ex.value
                if c == 2.0:
                    coef = em.tmp(f"2.0 * {a}")
                else:
                    coef = em.tmp(f"{c!r} * _pow({a}, {c - 1.0!r})")
                for k in ga[0]:
                    g[k] = em.tmp(f"{coef} * {ga[0][k]}")
            else:
                la = em.tmp(f"_log({a})")
                for k in keys:
                    parts = []
                    if k in ga[1]:
                        parts.append(f"{ga[1][k]} * {la}")
                    if k in ga[0]:
                        parts.append(f"{b} * {ga[0][k]} / {a}")
                    g[k] = em.tmp(f"{v} * ({' + '.join(parts)})")
        elif op == "exp":
            for k in keys:
                g[k] = em.tmp(f"{v} * {ga[0][k]}")
        elif op == "ln":
            for k in keys:
                g[k] = em.tmp(f"{ga[0][k]} / {args[0]}")
        elif op == "abs":
            s = em.tmp(f"_sign({args[0]})")
            for k in keys:
                g[k] = em.tmp(f"{s} * {ga[0][k]}")
        elif op in ("min", "max"):
            cmp = "<=" if op == "min" else ">="
            cond = em.tmp(f"{args[0]} {cmp} {args[1]}")
            for k in keys:
                g[k] = em.tmp(f"_sel({cond}, {ga[0].get(k, '0.0')}, {ga[1].get(k, '0.0')})")
        grad[node] = g
    return em.lines, val, grad


def _compile(roots: Sequence[Expr], grad_roots: Sequence[Expr], n: int, l: int, vector: bool):
    lines, val, grad = _emit(roots, grad_roots)
    head = ["def _fn(x, d):"]
    used_x = set()
    used_d = set()
    for r in list(roots) + list(grad_roots):
        xs, ds = variables(r)
        used_x |= xs
        used_d |= ds
    for i in sorted(used_x):
        head.append(f"    x{i} = x[{i}]")
    for j in sorted(used_d):
        head.append(f"    d{j} = d[{j}]")
    vals = ", ".join(val[r] for r in roots)
    grads = ", ".join("(" + ", ".join(grad[r].get(i, "0.0") for i in range(n)) + ",)" for r in grad_roots)
    grads = f"({grads},)" if grad_roots else "()"
    body = head + lines + [f"    return ({vals},), {grads}"]
    src = "\n".join(body)
    ns = dict(_VECTOR_NS if vector else _SCALAR_NS)
    exec(compile(src, "<compiled-field>", "exec"), ns)
    return ns["_fn"]


class FieldBundle:
    """Several fields compiled together so shared subexpressions run once.

    ``values`` returns a tuple of floats; ``values_and_grads`` additionally
    returns n-tuples of partials for the fields listed in ``with_grad``.
    The ``batch_*`` variants accept x of shape (n, N) and return arrays.
    """

    def __init__(self, exprs: Sequence[Expr], n: int, l: int = 0, with_grad: Sequence[int] = ()):
        self.exprs = tuple(lift(e) for e in exprs)
        self.n = n
        self.l = l
        self.with_grad = tuple(with_grad)
        grad_roots = [self.exprs[i] for i in self.with_grad]
        self._scalar = _compile(self.exprs, grad_roots, n, l, vector=False)
        self._vector = _compile(self.exprs, grad_roots, n, l, vector=True)

    def values_and_grads(self, x, d=()):
        return self._scalar(x, d)

    def batch_values_and_grads(self, X, Dm=()):
        X = np.asarray(X, float)
        N = X.shape[1]
        with np.errstate(all="ignore"):
            vals, grads = self._vector(X, Dm)
        V = np.empty((len(vals), N))
        for i, v in enumerate(vals):
            V[i] = v
        G = np.empty((len(grads), self.n, N))
        for i, g in enumerate(grads):
            for j, gj in enumerate(g):
                G[i, j] = gj
        return V, G


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Differentiable scalar function of state x (n entries) and disturbance d (l entries)."""

    expr: Expr
    n: int
    l: int = 0

    def __post_init__(self):
        object.__setattr__(self, "expr", lift(self.expr))
        xs, ds = variables(self.expr)
        if xs and max(xs) >= self.n:
            raise ValueError(f"field references x{max(xs)} but n = {self.n}")
        if ds and max(ds) >= self.l:
            raise ValueError(f"field references d{max(ds)} but l = {self.l}")
        object.__setattr__(self, "_bundle", None)

    @property
    def bundle(self) -> FieldBundle:
        if self._bundle is None:
            object.__setattr__(self, "_bundle", FieldBundle([self.expr], self.n, self.l, (0,)))
        return self._bundle

    def value(self, x, d=()) -> float:
        return self.bundle.values_and_grads(x, d)[0][0]

    def gradient(self, x, d=(), mode: str = "symbolic", h: float | None = None) -> np.ndarray:
        if mode == "symbolic":
            return np.array(self.bundle.values_and_grads(x, d)[1][0], float)
        if mode == "central":
            return central_difference(self, x, d, h)
        raise ValueError(f"unknown gradient mode {mode!r}")

    def batch(self, X, Dm=()):
        """(values (N,), gradients (n, N)) for states stacked as columns."""
        V, G = self.bundle.batch_values_and_grads(X, Dm)
        return V[0], G[0]

    def kinks(self, x, d=()) -> list:
        return kink_arguments(self.expr, x, d)

    @property
    def disturbance_affine(self) -> bool:
        return disturbance_degree(self.expr) <= 1

    def to_prefix(self):
        return to_prefix(self.expr)


def central_difference(field: ScalarField, x, d=(), h: float | None = None) -> np.ndarray:
    x = np.asarray(x, float)
    out = np.empty(field.n)
    for i in range(field.n):
        step = h if h is not None else 1e-6 * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        out[i] = (field.value(xp, d) - field.value(xm, d)) / (xp[i] - xm[i])
    return out


def is_smooth_point(field: ScalarField, x, d=(), tol: float = 1e-6) -> bool:
    """True when no kink argument is near zero at x or flips sign on the difference stencil."""
    x = np.asarray(x, float)
    base = [float(v) for v in field.kinks(x, d)]
    if any(abs(v) <= tol for v in base):
        return False
    for i in range(field.n):
        step = 1e-6 * max(1.0, abs(x[i]))
        for sgn in (1.0, -1.0):
            xs = x.copy()
            xs[i] += sgn * step
            for b, v in zip(base, field.kinks(xs, d)):
                if np.sign(b) != np.sign(float(v)):
                    return False
    return True


# ---------------------------------------------------------------- prefix JSON

_PREFIX_NAMES = {"+": "+", "-": "-", "*": "*", "/": "/", "^": "^", "min": "min", "max": "max",
                 "neg": "neg", "exp": "exp", "ln": "ln", "abs": "abs"}


def to_prefix(e: Expr):
    if e.op == "const":
        return e.value
    if e.op == "x":
        return f"x{e.value}"
    if e.op == "d":
        return f"d{e.value}"
    return [_PREFIX_NAMES[e.op]] + [to_prefix(a) for a in e.args]


def from_prefix(doc, names: dict | None = None) -> Expr:
    """Parse a prefix array; ``names`` maps extra symbol names to expressions."""
    if isinstance(doc, bool):
        raise ValueError("booleans are not expressions")
    if isinstance(doc, (int, float)):
        return const(float(doc))
    if isinstance(doc, str):
        if names and doc in names:
            return lift(names[doc])
        if len(doc) > 1 and doc[0] in "xd" and doc[1:].isdigit():
            return var(int(doc[1:])) if doc[0] == "x" else dist(int(doc[1:]))
        raise ValueError(f"unknown symbol {doc!r}")
    if isinstance(doc, list) and doc:
        op, rest = doc[0], doc[1:]
        args = [from_prefix(a, names) for a in rest]
        if op in ("+", "*") and len(args) >= 2:
            out = args[0]
            for a in args[1:]:
                out = _BUILDERS[op](out, a)
            return out
        if op == "-" and len(args) == 1:
            return neg(args[0])
        if op in ("-", "/", "^", "min", "max") and len(args) == 2:
            return _BUILDERS[op](*args)
        if op in UNARY and len(args) == 1:
            return _BUILDERS[op](args[0])
        raise ValueError(f"bad arity for operator {op!r}: {len(args)}")
    raise ValueError(f"cannot parse expression {doc!r}")


def scalar_function(doc) -> Callable[[np.ndarray], np.ndarray]:
    """Vectorized one-argument function from a prefix expression in the symbol 's'."""
    e = from_prefix(doc, {"s": var(0)})
    bundle = FieldBundle([e], 1, 0)

    def fn(s):
        arr = np.atleast_1d(np.asarray(s, float))
        vals, _ = bundle.batch_values_and_grads(arr[None, :])
        out = vals[0]
        return float(out[0]) if np.ndim(s) == 0 else out.reshape(np.shape(s))

    fn.prefix = doc
    return fn
