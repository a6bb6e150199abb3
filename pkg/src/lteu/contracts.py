"""Type grids, valuations, feasibility checks and the closed-form menu price.

Prices follow the envelope argument on a discrete type grid::

    price_k = theta_k * v_k - integral_{theta_1}^{theta_k} v(t) dt

with ``v`` linear between grid points, so the integral is the trapezoid
rule.  On a nondecreasing ``v`` this leaves zero rent to the lowest type
and makes every report other than the truth weakly worse.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.optimize import isotonic_regression

from .errors import ConfigError, FeasibilityError

EPS_IC = 1e-6
EPS_IR = 1e-6
EPS_ENV = 1e-8


@dataclass(frozen=True, eq=False)
class TypeGrid:
    types: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.types, dtype=float).reshape(-1)
        p = np.asarray(self.probs, dtype=float).reshape(-1)
        if t.size == 0 or t.size != p.size:
            raise ConfigError("types and probs must be non-empty and equally long")
        if np.any(np.diff(t) <= 0):
            raise ConfigError("types must be strictly increasing")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ConfigError("probs must be non-negative and sum to 1")
        object.__setattr__(self, "types", t)
        object.__setattr__(self, "probs", p)

    @property
    def bounds(self):
        return float(self.types[0]), float(self.types[-1])

    def __len__(self):
        return self.types.size

    def sample(self, rng, size):
        """Type indices drawn i.i.d. from ``probs``."""
        return rng.choice(self.types.size, size=size, p=self.probs)


@dataclass(frozen=True)
class Contract:
    alpha: float
    beta: float
    price: float

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ConfigError("alpha and beta must lie in [0, 1]")
        if self.alpha + self.beta > 1.0 + 1e-12:
            raise ConfigError("alpha + beta must not exceed 1")
        if self.price < 0:
            raise ConfigError("price must be non-negative")


DECLINED = Contract(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ValuationParams:
    eta_v: float
    r_req: float
    v_offset: float | None = None

    def __post_init__(self):
        if self.eta_v <= 0:
            raise ConfigError("eta_v must be positive")
        if self.r_req < 0:
            raise ConfigError("r_req must be non-negative")
        if self.v_offset is None:
            object.__setattr__(self, "v_offset", self.eta_v * self.r_req ** 2)


def valuation(rate, params):
    """Concave quadratic peaked at the required rate, floored at zero."""
    rate = np.asarray(rate, dtype=float)
    value = params.v_offset - params.eta_v * (rate - params.r_req) ** 2
    out = np.maximum(value, 0.0)
    return float(out) if out.ndim == 0 else out


def valuation_array(rate, r_req, eta_v):
    """Vectorised :func:`valuation` with the default offset ``eta * r_req**2``."""
    rate = np.asarray(rate, dtype=float)
    r_req = np.asarray(r_req, dtype=float)
    return np.maximum(eta_v * r_req ** 2 - eta_v * (rate - r_req) ** 2, 0.0)


@dataclass(frozen=True, eq=False)
class ExpectedQuantities:
    """Per-type expected valuation and price (and optionally cost)."""

    types: np.ndarray
    v_bar: np.ndarray
    pi_bar: np.ndarray
    c_bar: np.ndarray | None = None

    def __post_init__(self):
        for name in ("types", "v_bar", "pi_bar"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not (self.types.shape == self.v_bar.shape == self.pi_bar.shape):
            raise ValueError("types, v_bar and pi_bar must have the same shape")
        if not (np.all(np.isfinite(self.v_bar)) and np.all(np.isfinite(self.pi_bar))):
            raise ValueError("expected quantities must be finite")

    @property
    def u_bar(self):
        return self.types * self.v_bar - self.pi_bar


def expected_valuation(rate_of_profile, own_type, num_users, grid, params, samples, seed):
    """Monte-Carlo expected valuation over opponent type profiles.

    ``rate_of_profile(profile)`` maps a full type-index profile (the user
    under study is index 0, fixed to ``own_type``) to that user's rate.
    Returns ``(mean, standard_error)``.
    """
    if samples < 1:
        raise ValueError("samples must be at least 1")
    rng = np.random.default_rng(seed)
    values = np.empty(samples)
    for n in range(samples):
        profile = grid.sample(rng, num_users)
        profile[0] = own_type
        values[n] = valuation(rate_of_profile(profile), params)
    se = values.std(ddof=1) / math.sqrt(samples) if samples > 1 else 0.0
    return float(values.mean()), float(se)


def information_rent(v_bar, types):
    """Cumulative trapezoid integral of ``v_bar`` from the lowest type."""
    v = np.asarray(v_bar, dtype=float)
    return cumulative_trapezoid(v, np.asarray(types, dtype=float), axis=-1, initial=0.0)


def iron(v_bar, weights=None):
    """Closest nondecreasing sequence (pool-adjacent-violators), row-wise."""
    v = np.asarray(v_bar, dtype=float)
    if v.ndim == 1:
        return isotonic_regression(v, weights=weights, increasing=True).x
    return np.vstack([isotonic_regression(row, weights=weights, increasing=True).x for row in v])


def optimal_prices(v_bar, grid, ironing=True, weights=None):
    """Menu prices ``theta_k v_k - int_{theta_1}^{theta_k} v``; last axis indexes types.

    A decreasing ``v_bar`` is first ironed when ``ironing`` is set, otherwise
    :class:`FeasibilityError` is raised.  Returns ``(prices, v_used)``.
    """
    types = grid.types if isinstance(grid, TypeGrid) else np.asarray(grid, dtype=float)
    v = np.asarray(v_bar, dtype=float)
    if v.shape[-1] != types.size:
        raise ValueError("v_bar last axis must match the type grid")
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise FeasibilityError("expected valuations must be finite and non-negative")
    if np.any(np.diff(v, axis=-1) < 0):
        if not ironing:
            raise FeasibilityError("expected valuations are not nondecreasing in type")
        v = iron(v, weights)
        if np.any(np.diff(v, axis=-1) < -1e-12):
            raise FeasibilityError("ironing failed to produce monotone valuations")
        v = np.maximum.accumulate(v, axis=-1)
    prices = types * v - information_rent(v, types)
    return np.maximum(prices, 0.0), v


def build_menu(alphas, betas, prices):
    return [Contract(float(a), float(b), float(p)) for a, b, p in zip(alphas, betas, prices)]


@dataclass
class CheckReport:
    name: str
    ok: bool
    violations: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def __bool__(self):
        return self.ok

    def line(self):
        state = "PASS" if self.ok else "FAIL"
        extra = f" ({len(self.violations)} violations)" if self.violations else ""
        return f"{state} {self.name}{extra}"


def _scale(u):
    return max(1.0, float(np.max(np.abs(u)))) if np.size(u) else 1.0


def check_tibs(expected, tol=EPS_IC):
    """Every type weakly prefers its own contract over every other one."""
    t, v, pi = expected.types, expected.v_bar, expected.pi_bar
    own = t * v - pi
    # cross[k, j]: type k reporting j
    cross = t[:, None] * v[None, :] - pi[None, :]
    slack = tol * _scale(own)
    bad = np.argwhere(own[:, None] < cross - slack)
    violations = [(int(k), int(j), float(cross[k, j] - own[k])) for k, j in bad]
    return CheckReport("TIBS", not violations, violations, {"pairs": int(t.size ** 2)})


def check_iir(expected, tol=EPS_IR):
    """Expected utility of every type is non-negative."""
    u = expected.u_bar
    slack = tol * _scale(u)
    violations = [(int(k), float(u[k])) for k in np.flatnonzero(u < -slack)]
    return CheckReport("IIR", not violations, violations)


def check_ordering(expected, tol=EPS_IC):
    """Price and valuation chains are non-negative, nondecreasing and co-monotone."""
    v, pi = expected.v_bar, expected.pi_bar
    sv, sp = tol * _scale(v), tol * _scale(pi)
    violations = []
    if v.size and v[0] < -sv:
        violations.append(("valuation-negative", 0))
    if pi.size and pi[0] < -sp:
        violations.append(("price-negative", 0))
    for k in range(v.size - 1):
        dv, dp = v[k + 1] - v[k], pi[k + 1] - pi[k]
        if dv < -sv:
            violations.append(("valuation-decreasing", k))
        if dp < -sp:
            violations.append(("price-decreasing", k))
        # higher price iff higher valuation
        if (dp > sp and dv < -sv) or (dv > sv and dp < -sp):
            violations.append(("price-valuation-sign", k))
    return CheckReport("ordering", not violations, violations)


def check_feasibility_conditions(expected, tol_env=EPS_ENV):
    """The three equivalent feasibility conditions, each reported separately."""
    t, v, u = expected.types, expected.v_bar, expected.u_bar
    cond1 = bool(np.all(np.diff(v) >= -tol_env * _scale(v)))
    predicted = u[0] + information_rent(v, t)
    gap = np.abs(u - predicted)
    cond2 = bool(np.all(gap <= tol_env * _scale(u)))
    cond3 = bool(u[0] >= -tol_env * _scale(u)) if u.size else True
    violations = [name for name, ok in (("monotone", cond1), ("envelope", cond2),
                                        ("bottom-rent", cond3)) if not ok]
    return CheckReport("feasibility", not violations, violations,
                       {"monotone": cond1, "envelope": cond2, "bottom_rent": cond3,
                        "max_envelope_gap": float(gap.max()) if gap.size else 0.0})


def menu_to_json(menu, types=None):
    rows = []
    for k, c in enumerate(menu):
        row = {"type": k + 1, "alpha": c.alpha, "beta": c.beta, "price": c.price}
        if types is not None:
            row["theta"] = float(types[k])
        rows.append(row)
    return json.dumps({"contracts": rows}, indent=1)


def menu_from_json(text):
    doc = json.loads(text)
    rows = doc["contracts"] if isinstance(doc, dict) else doc
    rows = sorted(rows, key=lambda r: int(r["type"]))
    if [int(r["type"]) for r in rows] != list(range(1, len(rows) + 1)):
        raise ValueError("menu types must be 1..K without gaps")
    return [Contract(float(r["alpha"]), float(r["beta"]), float(r["price"])) for r in rows]
