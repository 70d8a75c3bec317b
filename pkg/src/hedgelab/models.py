"""Market model specifications and their Markov generators.

Three model families are supported, all with a latent factor X and a traded
asset S observed by the hedger:

  * ``diffusion``       dS = S (mu1 dt + sigma1 dW1), X a correlated diffusion
  * ``pure_jump``       dS = S ∫ K1 N(dt,dz), no Brownian driver in S
  * ``jump_diffusion``  dS = S (mu1 dt + sigma1 dW1 + ∫ K1 N(dt,dz))

The jump measure N has a finite atomic compensator: marks z_1..z_m with
constant per-unit-time weights eta_j. Jumps move X by K0(z;t,x) and S by
relative size K1(z;t,x,s). The latent factor is either a diffusion
(dX = mu0 dt + sigma0 dW0, corr(W0,W1) = rho) or, in finite-state mode, a
continuous-time Markov chain on a listed state set with generator matrix Q.

Under the physical measure P the asset has drift; under the minimal
martingale measure (tag ``Pstar``) the Brownian drift is removed through
the premium process and the jump weights are tilted to eta*_j =
(1 - alpha_F * s * K1_j) * eta_j, making S a martingale. The premium
alpha_F is computed by the structure module; this module only consumes it.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import FilterStateError, MeasureSignError
from .expressions import Coefficient, ScalarField

MODEL_KINDS = ("diffusion", "pure_jump", "jump_diffusion")
MEASURE_P = "P"
MEASURE_PSTAR = "Pstar"

# snap tolerance for matching jumped x to a finite-state grid, relative
STATE_SNAP_TOL = 1e-6


def _as_measure(measure):
    if measure in (MEASURE_P, "p"):
        return MEASURE_P
    if measure in (MEASURE_PSTAR, "P*", "pstar", "Qstar"):
        return MEASURE_PSTAR
    raise ValueError(f"unknown measure tag {measure!r} (use 'P' or 'Pstar')")


# ---------------------------------------------------------------------------
# grids and mark spaces
# ---------------------------------------------------------------------------

class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_N = T with step dt = T / n_steps."""

    def __init__(self, horizon, n_steps):
        if horizon <= 0:
            raise ValueError("horizon must be positive")
        if int(n_steps) != n_steps or n_steps < 1:
            raise ValueError("n_steps must be a positive integer")
        self.horizon = float(horizon)
        self.n_steps = int(n_steps)
        self.dt = self.horizon / self.n_steps
        self.times = np.linspace(0.0, self.horizon, self.n_steps + 1)

    def refined(self, factor):
        """A grid on the same horizon with n_steps * factor steps."""
        return TimeGrid(self.horizon, self.n_steps * int(factor))

    def __len__(self):
        return self.n_steps + 1

    def __repr__(self):
        return f"TimeGrid(T={self.horizon}, n={self.n_steps})"


class MarkSpace:
    """Finite atomic jump-mark measure: marks z_j with weights eta_j >= 0.

    The weights are per-unit-time intensities and do not depend on the
    model state; state dependence of jumps enters only through the jump
    size coefficients K0 and K1 evaluated at each mark.
    """

    def __init__(self, marks=(), weights=()):
        self.marks = np.asarray(marks, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        if self.marks.shape != self.weights.shape or self.marks.ndim > 1:
            raise ValueError("marks and weights must be equal-length 1-d")
        if self.marks.ndim == 0:
            self.marks = self.marks.reshape(0)
            self.weights = self.weights.reshape(0)
        if np.any(self.weights < 0):
            raise ValueError("mark weights must be nonnegative")
        if not np.isfinite(self.weights).all():
            raise ValueError("mark weights must be finite")

    @property
    def m(self):
        return self.marks.size

    @property
    def total_intensity(self):
        return float(self.weights.sum())

    def __repr__(self):
        return f"MarkSpace(m={self.m}, total={self.total_intensity:.4g})"


EMPTY_MARKS = MarkSpace()


class PerMarkCoefficient:
    """Jump-size coefficient given per mark: one (t,x,s) item per atom.

    Wraps a list of Coefficients so that evaluation at zeta = marks[j]
    dispatches to item j. Evaluation at a zeta not on the mark grid is an
    error; jump coefficients only ever need mark-grid values.
    """

    def __init__(self, marks, items, allow_fd=True):
        self.marks = np.asarray(marks, dtype=float)
        self.items = [Coefficient(it, allow_fd=allow_fd) for it in items]
        if len(self.items) != self.marks.size:
            raise ValueError("one coefficient item per mark required")

    def _index(self, zeta):
        z = float(zeta)
        hits = np.nonzero(np.isclose(self.marks, z, rtol=0.0, atol=1e-12))[0]
        if hits.size == 0:
            raise ValueError(f"zeta={z} is not a mark of this coefficient")
        return int(hits[0])

    def __call__(self, t=0.0, x=0.0, s=0.0, zeta=0.0):
        return self.items[self._index(zeta)](t=t, x=x, s=s, zeta=zeta)

    def partial(self, var):
        parts = [it.partial(var) for it in self.items]

        def d(t=0.0, x=0.0, s=0.0, zeta=0.0):
            return parts[self._index(zeta)](t=t, x=x, s=s, zeta=zeta)

        return d

    def depends_on(self, var):
        return any(it.depends_on(var) for it in self.items)


def as_jump_coefficient(obj, marks, allow_fd=True):
    """Build a jump coefficient from a scalar, expression, callable, or a
    per-mark list thereof."""
    if isinstance(obj, PerMarkCoefficient):
        return obj
    if isinstance(obj, (list, tuple)):
        return PerMarkCoefficient(marks, obj, allow_fd=allow_fd)
    return Coefficient(obj, allow_fd=allow_fd)


# ---------------------------------------------------------------------------
# coefficients and model spec
# ---------------------------------------------------------------------------

@dataclass
class CoefficientSet:
    """Model coefficient functions with uniform (t, x, s, zeta) call shape.

    mu0, sigma0   latent-factor drift and volatility (diffusion X mode)
    mu1           asset relative drift (may depend on x: hidden drift)
    sigma1        asset volatility, (t, s) only; None for pure-jump models
    K0, K1        jump sizes for X and for S at each mark
    rho           correlation of the X- and S-Brownian drivers
    c1..c4        bound constants checked by validate_spec
    """

    mu0: object = 0.0
    sigma0: object = 1.0
    mu1: object = 0.0
    sigma1: Optional[object] = None
    K0: object = 0.0
    K1: object = 0.0
    rho: float = 0.0
    c1: float = 10.0
    c2: float = 1e-8
    c3: float = 10.0
    c4: float = 10.0

    def __post_init__(self):
        self.mu0 = Coefficient(self.mu0)
        self.sigma0 = Coefficient(self.sigma0)
        self.mu1 = Coefficient(self.mu1)
        if self.sigma1 is not None:
            self.sigma1 = Coefficient(self.sigma1)
        if not (-1.0 <= self.rho <= 1.0):
            raise ValueError("rho must lie in [-1, 1]")
        # K0/K1 are finalized by ModelSpec (needs the mark grid for lists)


@dataclass
class ModelSpec:
    """A complete market model: kind, coefficients, marks, starting point.

    In finite-state mode ``x_states`` lists the values the latent factor can
    take and ``x_generator`` is the chain generator matrix Q (rows sum to
    zero, off-diagonal entries nonnegative); mu0/sigma0/rho are unused then.
    """

    kind: str
    coefficients: CoefficientSet
    marks: MarkSpace = field(default_factory=MarkSpace)
    x0: float = 0.0
    s0: float = 1.0
    x_states: Optional[np.ndarray] = None
    x_generator: Optional[np.ndarray] = None
    # start-state law over x_states; None means a point mass at x0. A
    # non-degenerate prior is what makes the latent factor genuinely
    # hidden: the simulator draws X_0 from it and the filters start there.
    x0_prior: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"kind must be one of {MODEL_KINDS}")
        c = self.coefficients
        c.K0 = as_jump_coefficient(c.K0, self.marks.marks)
        c.K1 = as_jump_coefficient(c.K1, self.marks.marks)
        if self.x_states is not None:
            self.x_states = np.asarray(self.x_states, dtype=float)
            self.x_generator = np.asarray(self.x_generator, dtype=float)
        if self.x0_prior is not None:
            if self.x_states is None:
                raise ValueError("x0_prior needs finite-state mode")
            self.x0_prior = np.asarray(self.x0_prior, dtype=float)
            if self.x0_prior.shape != self.x_states.shape:
                raise ValueError("x0_prior shape mismatch")
            if np.any(self.x0_prior < 0) or \
                    abs(self.x0_prior.sum() - 1.0) > 1e-12:
                raise ValueError("x0_prior must be a probability vector")

    # -- structure queries ---------------------------------------------

    @property
    def has_brownian_s(self):
        return self.kind != "pure_jump"

    @property
    def has_jumps(self):
        return self.kind != "diffusion"

    @property
    def is_finite_state(self):
        return self.x_states is not None

    @property
    def n_states(self):
        return self.x_states.size if self.is_finite_state else 0

    def sigma1_at(self, t, s):
        if self.coefficients.sigma1 is None:
            return 0.0
        return self.coefficients.sigma1(t=t, x=0.0, s=s)

    def mu1_at(self, t, x, s):
        return self.coefficients.mu1(t=t, x=x, s=s)

    def k1_values(self, t, x, s):
        """Relative S jump sizes at every mark; shape (m,) + broadcast
        shape of (x, s)."""
        c = self.coefficients
        shape = np.broadcast_shapes(np.shape(x), np.shape(s))
        out = [np.broadcast_to(
            np.asarray(c.K1(t=t, x=x, s=s, zeta=z), dtype=float), shape)
            for z in self.marks.marks]
        return np.array(out) if out else np.zeros((0,) + shape)

    def k0_values(self, t, x):
        """X jump displacements at every mark; shape (m,) + shape of x."""
        c = self.coefficients
        shape = np.shape(x)
        out = [np.broadcast_to(
            np.asarray(c.K0(t=t, x=x, s=0.0, zeta=z), dtype=float), shape)
            for z in self.marks.marks]
        return np.array(out) if out else np.zeros((0,) + shape)

    def state_index(self, x):
        """Index of x in the finite state list, snapping within tolerance."""
        if not self.is_finite_state:
            raise FilterStateError("model has no finite state list")
        scale = max(1.0, float(np.max(np.abs(self.x_states))))
        d = np.abs(self.x_states - x)
        j = int(np.argmin(d))
        if d[j] > STATE_SNAP_TOL * scale:
            raise FilterStateError(
                f"x={x} is not within tolerance of any listed state")
        return j

    def snap_state(self, x):
        """Nearest listed state value (used for jumped X positions)."""
        if not self.is_finite_state:
            return x
        return float(self.x_states[np.argmin(np.abs(self.x_states - x))])


# ---------------------------------------------------------------------------
# claims
# ---------------------------------------------------------------------------

class ClaimSpec:
    """European payoff H(T, s) with the usual presets."""

    def __init__(self, payoff, label="custom"):
        self._payoff = payoff
        self.label = label

    def payoff(self, s):
        return self._payoff(np.asarray(s, dtype=float))

    @classmethod
    def call(cls, strike):
        return cls(lambda s: np.maximum(s - strike, 0.0), f"call(K={strike})")

    @classmethod
    def put(cls, strike):
        return cls(lambda s: np.maximum(strike - s, 0.0), f"put(K={strike})")

    @classmethod
    def digital(cls, strike):
        return cls(lambda s: (s >= strike).astype(float),
                   f"digital(K={strike})")

    @classmethod
    def identity(cls):
        return cls(lambda s: s, "identity")

    @classmethod
    def constant(cls, c):
        return cls(lambda s: np.full_like(np.asarray(s, dtype=float), c),
                   f"constant({c})")

    @property
    def monotone_direction(self):
        """+1 nondecreasing in s, -1 nonincreasing, 0 flat, None unknown."""
        kind = self.label.split("(")[0]
        return {"call": 1, "digital": 1, "identity": 1, "put": -1,
                "constant": 0}.get(kind)

    @classmethod
    def from_name(cls, name, strike=None, value=None):
        name = name.lower()
        if name == "call":
            return cls.call(strike)
        if name == "put":
            return cls.put(strike)
        if name == "digital":
            return cls.digital(strike)
        if name == "identity":
            return cls.identity()
        if name == "constant":
            return cls.constant(value)
        raise ValueError(f"unknown claim preset {name!r}")

    def __repr__(self):
        return f"ClaimSpec({self.label})"


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

class Violation:
    """One violated model condition with a witness point."""

    def __init__(self, condition, where):
        self.condition = condition
        self.where = where

    def __repr__(self):
        return f"Violation({self.condition} at {self.where})"

    def __str__(self):
        return f"{self.condition} at {self.where}"


def _scan_lattice(spec, horizon):
    ts = np.linspace(0.0, horizon, 5)
    if spec.is_finite_state:
        xs = spec.x_states
    else:
        step = 0.5 * max(1.0, abs(spec.x0))
        xs = spec.x0 + step * np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    ss = spec.s0 * np.array([0.25, 0.5, 1.0, 2.0, 4.0])
    return ts, xs, ss


def validate_spec(spec, horizon=1.0):
    """Scan the model conditions over a deterministic test lattice.

    The lattice is t in linspace(0, horizon, 5); x over the listed states
    (finite mode) or x0 +/- {1,2} half-scale steps; s over s0 times
    {1/4, 1/2, 1, 2, 4}; zeta over the mark grid. Violations are returned
    as data, one entry per condition and witness, not raised.
    """
    out = []
    c = spec.coefficients
    ts, xs, ss = _scan_lattice(spec, horizon)

    if spec.s0 <= 0:
        out.append(Violation("s0 <= 0", {"s0": spec.s0}))

    # kind / shape conditions
    if spec.kind == "diffusion" and spec.marks.m != 0:
        out.append(Violation("diffusion model must have no marks",
                             {"m": spec.marks.m}))
    if spec.kind != "diffusion" and spec.marks.m < 1:
        out.append(Violation("jump model needs at least one mark",
                             {"m": spec.marks.m}))
    if spec.kind == "pure_jump" and c.sigma1 is not None:
        out.append(Violation("pure_jump model must not set sigma1", {}))
    if spec.kind != "pure_jump" and c.sigma1 is None:
        out.append(Violation("sigma1 required for this model kind", {}))

    if np.any(spec.marks.weights < 0):
        j = int(np.argmin(spec.marks.weights))
        out.append(Violation("mark weight < 0", {"mark": j}))

    # finite-state generator
    if spec.is_finite_state:
        Q = spec.x_generator
        n = spec.n_states
        if Q is None or Q.shape != (n, n):
            out.append(Violation("x_generator missing or misshaped",
                                 {"shape": None if Q is None else Q.shape}))
        else:
            offdiag = Q - np.diag(np.diag(Q))
            if np.any(offdiag < -1e-12):
                out.append(Violation("x_generator off-diagonal < 0", {}))
            rows = np.abs(Q.sum(axis=1))
            if np.any(rows > 1e-10):
                out.append(Violation("x_generator rows do not sum to 0",
                                     {"max_row_sum": float(rows.max())}))

    # coefficient bounds on the lattice
    for t in ts:
        for x in xs:
            for s in ss:
                if c.sigma1 is not None:
                    v = float(c.sigma1(t=t, x=x, s=s))
                    if not (c.c2 < v < c.c3):
                        out.append(Violation(
                            f"sigma1={v:.6g} outside ({c.c2}, {c.c3})",
                            {"t": t, "x": x, "s": s}))
                v = float(c.mu1(t=t, x=x, s=s))
                if not v < c.c1:
                    out.append(Violation(
                        f"mu1={v:.6g} >= c1={c.c1}", {"t": t, "x": x, "s": s}))
                if not spec.is_finite_state:
                    v = float(c.sigma0(t=t, x=x, s=s))
                    if not v > 0:
                        out.append(Violation(
                            f"sigma0={v:.6g} <= 0", {"t": t, "x": x}))
                for j, z in enumerate(spec.marks.marks):
                    k1 = float(c.K1(t=t, x=x, s=s, zeta=z))
                    if not k1 < c.c4:
                        out.append(Violation(
                            f"K1={k1:.6g} >= c4={c.c4}",
                            {"t": t, "x": x, "s": s, "mark": j}))
                    if not 1.0 + k1 > 0:
                        out.append(Violation(
                            f"1 + K1 <= 0 at mark {j} (K1={k1:.6g})",
                            {"t": t, "x": x, "s": s, "mark": j}))
    return out


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def _jump_weights(spec, measure, t, x, s):
    """Mark weights for the generator: eta under P, tilted eta* under Pstar.

    The tilt uses the premium alpha_F from the structure module (imported
    lazily; structure depends on this module for types).
    """
    eta = spec.marks.weights
    if spec.marks.m == 0:
        return eta
    if measure == MEASURE_P:
        return eta
    from .structure import eta_star_weights
    return eta_star_weights(spec, t, x, s)


def apply_generator(spec, measure, f, t, x, s):
    """Evaluate the model generator on a test field f at (t, x, s).

    Under P this is the full generator of (X, S) including the asset drift
    and raw jump terms; under Pstar the Brownian drift is removed through
    the premium and the jump weights are tilted so that f(t,x,s) = s maps
    to zero. The field f must expose value and partials t, x, s, xx, ss,
    xs (see ScalarField); jump displacement terms evaluate f at the jumped
    point exactly, f(t, x + K0, s(1 + K1)).

    Raises MeasureSignError when a tilted weight is negative (the jump
    condition for the martingale density fails at this point) and
    DerivativeMissingError when f cannot supply a needed partial.
    """
    measure = _as_measure(measure)
    if not isinstance(f, ScalarField):
        f = ScalarField.from_callable(f)
    c = spec.coefficients
    out = f.partial("t", t, x, s)

    # latent-factor part
    if spec.is_finite_state:
        j = spec.state_index(x)
        fx = f.value(t, x, s)
        Q = spec.x_generator
        for k, y in enumerate(spec.x_states):
            if k == j:
                continue
            out += Q[j, k] * (f.value(t, float(y), s) - fx)
    else:
        out += (c.mu0(t=t, x=x, s=s) * f.partial("x", t, x, s)
                + 0.5 * c.sigma0(t=t, x=x, s=s) ** 2
                * f.partial("xx", t, x, s))

    # asset Brownian part
    sig1 = spec.sigma1_at(t, s)
    if spec.has_brownian_s:
        out += 0.5 * sig1 ** 2 * s ** 2 * f.partial("ss", t, x, s)
        if not spec.is_finite_state and c.rho != 0.0:
            out += (c.rho * c.sigma0(t=t, x=x, s=s) * sig1 * s
                    * f.partial("xs", t, x, s))
        if measure == MEASURE_P:
            out += c.mu1(t=t, x=x, s=s) * s * f.partial("s", t, x, s)
        # under Pstar the Brownian drift is absorbed exactly by the
        # compensated jump term below (and vanishes when there are no
        # jumps): no first-order s term appears.

    # jump part: raw under P (jumps carry their own drift), compensated
    # against s*K1*df/ds under Pstar with the tilted weights
    if spec.marks.m:
        weights = _jump_weights(spec, measure, t, x, s)
        if np.any(weights < 0):
            j = int(np.argmin(weights))
            raise MeasureSignError(
                f"tilted weight negative at mark {j} "
                f"(t={t}, x={x}, s={s}): {weights[j]:.6g}")
        fx = f.value(t, x, s)
        fs = f.partial("s", t, x, s) if measure == MEASURE_PSTAR else 0.0
        k0 = spec.k0_values(t, x)
        k1 = spec.k1_values(t, x, s)
        for j in range(spec.marks.m):
            if weights[j] == 0.0:
                continue
            xj = spec.snap_state(x + float(k0[j]))
            sj = s * (1.0 + float(k1[j]))
            term = f.value(t, xj, sj) - fx
            if measure == MEASURE_PSTAR:
                term -= s * float(k1[j]) * fs
            out += weights[j] * term
    return float(out)
