"""Small arithmetic expression language for model coefficients.

Coefficient functions (drifts, volatilities, jump sizes) arrive from config
files as strings like ``"0.2*x + 0.05"`` or ``"min(s, 120)"``. This module
parses them into evaluable objects with symbolic partial derivatives where
the expression is smooth, and supplies a finite-difference fallback where
it is not (min/max) or where the coefficient is a plain Python callable.

Grammar
-------
    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?
    atom   := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

Recognized names: variables ``t, x, s, zeta`` and functions
``exp, log, min, max``. ``^`` is right-associative exponentiation.
"""

import numpy as np

from .errors import DerivativeMissingError

VARIABLES = ("t", "x", "s", "zeta")
FUNCTIONS = ("exp", "log", "min", "max")

# finite-difference steps (relative to max(1, |point|))
FD_STEP = 1e-5          # first derivatives, central
FD_STEP2 = 2.5e-4       # second derivatives, central (balances round-off)


# ---------------------------------------------------------------------------
# tokenizer / parser
# ---------------------------------------------------------------------------

def _tokenize(src):
    tokens = []
    i, n = 0, len(src)
    while i < n:
        c = src[i]
        if c.isspace():
            i += 1
        elif c in "+-*/^(),":
            tokens.append((c, c))
            i += 1
        elif c.isdigit() or c == ".":
            j = i
            while j < n and (src[j].isdigit() or src[j] in ".eE" or
                             (src[j] in "+-" and j > i and src[j - 1] in "eE")):
                j += 1
            try:
                val = float(src[i:j])
            except ValueError:
                raise ValueError(f"bad number {src[i:j]!r} in {src!r}")
            tokens.append(("num", val))
            i = j
        elif c.isalpha() or c == "_":
            j = i
            while j < n and (src[j].isalnum() or src[j] == "_"):
                j += 1
            tokens.append(("name", src[i:j]))
            i = j
        else:
            raise ValueError(f"unexpected character {c!r} in {src!r}")
    tokens.append(("end", None))
    return tokens


class _Parser:
    def __init__(self, tokens, src):
        self.tokens = tokens
        self.pos = 0
        self.src = src

    def peek(self):
        return self.tokens[self.pos][0]

    def next(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind):
        tok = self.next()
        if tok[0] != kind:
            raise ValueError(f"expected {kind!r}, got {tok[0]!r} in {self.src!r}")
        return tok

    def parse(self):
        node = self.expr()
        self.expect("end")
        return node

    def expr(self):
        node = self.term()
        while self.peek() in ("+", "-"):
            op = self.next()[0]
            rhs = self.term()
            node = ("add" if op == "+" else "sub", node, rhs)
        return node

    def term(self):
        node = self.unary()
        while self.peek() in ("*", "/"):
            op = self.next()[0]
            rhs = self.unary()
            node = ("mul" if op == "*" else "div", node, rhs)
        return node

    def unary(self):
        if self.peek() == "-":
            self.next()
            return ("neg", self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek() == "^":
            self.next()
            return ("pow", base, self.unary())
        return base

    def atom(self):
        kind, val = self.next()
        if kind == "num":
            return ("num", val)
        if kind == "name":
            if self.peek() == "(":
                if val not in FUNCTIONS:
                    raise ValueError(f"unknown function {val!r} in {self.src!r}")
                self.next()
                args = [self.expr()]
                while self.peek() == ",":
                    self.next()
                    args.append(self.expr())
                self.expect(")")
                want = 1 if val in ("exp", "log") else 2
                if len(args) != want:
                    raise ValueError(f"{val} takes {want} argument(s)")
                return ("call", val, args)
            if val not in VARIABLES:
                raise ValueError(f"unknown name {val!r} in {self.src!r} "
                                 f"(variables are {', '.join(VARIABLES)})")
            return ("var", val)
        if kind == "(":
            node = self.expr()
            self.expect(")")
            return node
        raise ValueError(f"unexpected token {kind!r} in {self.src!r}")


# ---------------------------------------------------------------------------
# evaluation and symbolic differentiation
# ---------------------------------------------------------------------------

def _eval(node, env):
    op = node[0]
    if op == "num":
        return node[1]
    if op == "var":
        return env[node[1]]
    if op == "neg":
        return -_eval(node[1], env)
    if op == "add":
        return _eval(node[1], env) + _eval(node[2], env)
    if op == "sub":
        return _eval(node[1], env) - _eval(node[2], env)
    if op == "mul":
        return _eval(node[1], env) * _eval(node[2], env)
    if op == "div":
        return _eval(node[1], env) / _eval(node[2], env)
    if op == "pow":
        return _eval(node[1], env) ** _eval(node[2], env)
    fn = node[1]
    args = [_eval(a, env) for a in node[2]]
    if fn == "exp":
        return np.exp(args[0])
    if fn == "log":
        return np.log(args[0])
    if fn == "min":
        return np.minimum(args[0], args[1])
    return np.maximum(args[0], args[1])


def _variables(node, out):
    op = node[0]
    if op == "var":
        out.add(node[1])
    elif op == "neg":
        _variables(node[1], out)
    elif op in ("add", "sub", "mul", "div", "pow"):
        _variables(node[1], out)
        _variables(node[2], out)
    elif op == "call":
        for a in node[2]:
            _variables(a, out)


def _is_zero(node):
    return node[0] == "num" and node[1] == 0.0


def _is_one(node):
    return node[0] == "num" and node[1] == 1.0


def _add(a, b):
    if _is_zero(a):
        return b
    if _is_zero(b):
        return a
    if a[0] == "num" and b[0] == "num":
        return ("num", a[1] + b[1])
    return ("add", a, b)


def _sub(a, b):
    if _is_zero(b):
        return a
    if a[0] == "num" and b[0] == "num":
        return ("num", a[1] - b[1])
    if _is_zero(a):
        return ("neg", b)
    return ("sub", a, b)


def _mul(a, b):
    if _is_zero(a) or _is_zero(b):
        return ("num", 0.0)
    if _is_one(a):
        return b
    if _is_one(b):
        return a
    if a[0] == "num" and b[0] == "num":
        return ("num", a[1] * b[1])
    return ("mul", a, b)


def _div(a, b):
    if _is_zero(a):
        return ("num", 0.0)
    if _is_one(b):
        return a
    return ("div", a, b)


class _NonSmooth(Exception):
    """Internal marker: derivative crosses a min/max kink."""


def _diff(node, var):
    op = node[0]
    if op == "num":
        return ("num", 0.0)
    if op == "var":
        return ("num", 1.0 if node[1] == var else 0.0)
    if op == "neg":
        return ("neg", _diff(node[1], var))
    if op == "add":
        return _add(_diff(node[1], var), _diff(node[2], var))
    if op == "sub":
        return _sub(_diff(node[1], var), _diff(node[2], var))
    if op == "mul":
        a, b = node[1], node[2]
        return _add(_mul(_diff(a, var), b), _mul(a, _diff(b, var)))
    if op == "div":
        a, b = node[1], node[2]
        num = _sub(_mul(_diff(a, var), b), _mul(a, _diff(b, var)))
        return _div(num, _mul(b, b))
    if op == "pow":
        a, b = node[1], node[2]
        da, db = _diff(a, var), _diff(b, var)
        if _is_zero(db):
            # a^c -> c * a^(c-1) * a'
            if _is_zero(da):
                return ("num", 0.0)
            expo = _sub(b, ("num", 1.0))
            return _mul(_mul(b, ("pow", a, expo)), da)
        # general a^b = exp(b log a)
        term = _add(_mul(db, ("call", "log", [a])), _mul(b, _div(da, a)))
        return _mul(node, term)
    fn, args = node[1], node[2]
    if fn == "exp":
        return _mul(node, _diff(args[0], var))
    if fn == "log":
        return _div(_diff(args[0], var), args[0])
    # min/max: kink; only smooth if the variable does not enter at all
    inner = set()
    for a in args:
        _variables(a, inner)
    if var not in inner:
        return ("num", 0.0)
    raise _NonSmooth(fn)


# ---------------------------------------------------------------------------
# public wrappers
# ---------------------------------------------------------------------------

class Expression:
    """A parsed coefficient expression in the variables t, x, s, zeta."""

    def __init__(self, src):
        self.src = src
        self._ast = _Parser(_tokenize(src), src).parse()
        names = set()
        _variables(self._ast, names)
        self.variables = frozenset(names)

    @classmethod
    def _from_ast(cls, ast, src):
        obj = cls.__new__(cls)
        obj.src = src
        obj._ast = ast
        names = set()
        _variables(ast, names)
        obj.variables = frozenset(names)
        return obj

    def __call__(self, t=0.0, x=0.0, s=0.0, zeta=0.0):
        env = {"t": t, "x": x, "s": s, "zeta": zeta}
        return _eval(self._ast, env)

    def partial(self, var):
        """Symbolic partial derivative, or None when the expression is
        not differentiable in ``var`` (min/max kink)."""
        if var not in VARIABLES:
            raise ValueError(f"unknown variable {var!r}")
        try:
            ast = _diff(self._ast, var)
        except _NonSmooth:
            return None
        return Expression._from_ast(ast, f"d/d{var}[{self.src}]")

    def __repr__(self):
        return f"Expression({self.src!r})"


def _fd_env(t, x, s, zeta):
    return {"t": t, "x": x, "s": s, "zeta": zeta}


class Coefficient:
    """A model coefficient: a constant, an Expression, or a raw callable.

    Evaluation signature is always (t, x, s, zeta). Partial derivatives are
    symbolic when an Expression with a smooth dependence is wrapped, and
    central finite differences otherwise (step FD_STEP * max(1, |point|)).

    Parameters
    ----------
    fn : float | str | Expression | callable
        The coefficient. Strings are parsed. Callables must accept
        (t, x, s, zeta) keyword-free positional arguments.
    allow_fd : bool
        Permit the finite-difference fallback. When False, asking for a
        derivative that has no symbolic form raises DerivativeMissingError.
    """

    def __init__(self, fn, allow_fd=True):
        self.allow_fd = allow_fd
        if isinstance(fn, Coefficient):
            self._expr = fn._expr
            self._call = fn._call
            self._const = fn._const
            self.allow_fd = fn.allow_fd and allow_fd
            return
        self._expr = None
        self._call = None
        self._const = None
        if isinstance(fn, (int, float)):
            self._const = float(fn)
        elif isinstance(fn, str):
            self._expr = Expression(fn)
        elif isinstance(fn, Expression):
            self._expr = fn
        elif callable(fn):
            self._call = fn
        else:
            raise TypeError(f"cannot build a Coefficient from {type(fn)}")

    @property
    def is_constant(self):
        return self._const is not None or (
            self._expr is not None and not self._expr.variables)

    def depends_on(self, var):
        if self._const is not None:
            return False
        if self._expr is not None:
            return var in self._expr.variables
        return True  # unknown for raw callables: assume yes

    def __call__(self, t=0.0, x=0.0, s=0.0, zeta=0.0):
        if self._const is not None:
            return self._const
        if self._expr is not None:
            return self._expr(t, x, s, zeta)
        return self._call(t, x, s, zeta)

    def partial(self, var):
        """Return a callable (t, x, s, zeta) -> d(coefficient)/d(var)."""
        if self._const is not None:
            return lambda t=0.0, x=0.0, s=0.0, zeta=0.0: 0.0
        if self._expr is not None:
            dexpr = self._expr.partial(var)
            if dexpr is not None:
                return dexpr
        if not self.allow_fd:
            raise DerivativeMissingError(
                f"no analytic d/d{var} and finite differences disabled")
        return self._fd_partial(var)

    def _fd_partial(self, var):
        base = self.__call__

        def d(t=0.0, x=0.0, s=0.0, zeta=0.0):
            env = _fd_env(t, x, s, zeta)
            h = FD_STEP * max(1.0, abs(float(np.max(np.abs(env[var])))
                                       if np.ndim(env[var]) else abs(env[var])))
            hi = dict(env)
            lo = dict(env)
            hi[var] = env[var] + h
            lo[var] = env[var] - h
            return (base(**hi) - base(**lo)) / (2.0 * h)

        return d


class ScalarField:
    """A test function f(t, x, s) together with its partial derivatives.

    This is the object the Markov generators consume: it must supply
    d/dt, d/dx, d/ds and the second derivatives d2/dx2, d2/ds2, d2/dxds.
    Build one from an expression (symbolic derivatives), from a callable
    (finite differences), or from explicit per-derivative callables.
    """

    _PARTS = ("f", "t", "x", "s", "xx", "ss", "xs")

    def __init__(self, parts, allow_fd=True, label=""):
        self._parts = parts
        self.allow_fd = allow_fd
        self.label = label

    @classmethod
    def from_expression(cls, src):
        expr = src if isinstance(src, Expression) else Expression(src)
        if "zeta" in expr.variables:
            raise ValueError("test functions may not depend on zeta")
        parts = {"f": expr}
        first = {}
        for v in ("t", "x", "s"):
            first[v] = expr.partial(v)
            parts[v] = first[v]
        for key, (v1, v2) in (("xx", ("x", "x")), ("ss", ("s", "s")),
                              ("xs", ("x", "s"))):
            d1 = first[v1]
            parts[key] = d1.partial(v2) if d1 is not None else None
        return cls(parts, allow_fd=True, label=expr.src)

    @classmethod
    def from_callable(cls, fn, allow_fd=True, label=""):
        return cls({"f": fn}, allow_fd=allow_fd, label=label or getattr(
            fn, "__name__", "callable"))

    @classmethod
    def from_parts(cls, f, d_t=None, d_x=None, d_s=None, d_xx=None,
                   d_ss=None, d_xs=None, allow_fd=False, label=""):
        parts = {"f": f, "t": d_t, "x": d_x, "s": d_s,
                 "xx": d_xx, "ss": d_ss, "xs": d_xs}
        return cls({k: v for k, v in parts.items() if v is not None},
                   allow_fd=allow_fd, label=label)

    # -- evaluation --------------------------------------------------------

    def _call_part(self, part, t, x, s):
        fn = self._parts.get(part)
        if fn is None:
            return None
        if isinstance(fn, Expression):
            return fn(t, x, s)
        return fn(t, x, s)

    def value(self, t, x, s):
        out = self._call_part("f", t, x, s)
        if out is None:
            raise DerivativeMissingError("field has no value function")
        return out

    def _fd1(self, var, t, x, s):
        pt = {"t": t, "x": x, "s": s}
        h = FD_STEP * max(1.0, abs(pt[var]))
        hi, lo = dict(pt), dict(pt)
        hi[var] += h
        lo[var] -= h
        return (self.value(**hi) - self.value(**lo)) / (2.0 * h)

    def _fd2(self, var, t, x, s):
        pt = {"t": t, "x": x, "s": s}
        h = FD_STEP2 * max(1.0, abs(pt[var]))
        hi, lo = dict(pt), dict(pt)
        hi[var] += h
        lo[var] -= h
        return (self.value(**hi) - 2.0 * self.value(**pt)
                + self.value(**lo)) / (h * h)

    def _fd_cross(self, t, x, s):
        hx = FD_STEP2 * max(1.0, abs(x))
        hs = FD_STEP2 * max(1.0, abs(s))
        pp = self.value(t, x + hx, s + hs)
        pm = self.value(t, x + hx, s - hs)
        mp = self.value(t, x - hx, s + hs)
        mm = self.value(t, x - hx, s - hs)
        return (pp - pm - mp + mm) / (4.0 * hx * hs)

    def partial(self, part, t, x, s):
        """Evaluate one of the partials 't','x','s','xx','ss','xs'."""
        out = self._call_part(part, t, x, s)
        if out is not None:
            return out
        if not self.allow_fd:
            raise DerivativeMissingError(
                f"field {self.label!r}: partial {part!r} unavailable and "
                "finite differences disabled")
        if part in ("t", "x", "s"):
            return self._fd1(part, t, x, s)
        if part in ("xx", "ss"):
            return self._fd2(part[0], t, x, s)
        if part == "xs":
            return self._fd_cross(t, x, s)
        raise ValueError(f"unknown partial {part!r}")

    def __repr__(self):
        return f"ScalarField({self.label!r})"


def constant_field(c):
    """f(t,x,s) = c with all derivatives zero, exactly."""
    zero = Expression("0")
    parts = {"f": Expression(repr(float(c))), "t": zero, "x": zero,
             "s": zero, "xx": zero, "ss": zero, "xs": zero}
    return ScalarField(parts, allow_fd=False, label=f"const {c}")
