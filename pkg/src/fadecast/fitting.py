"""Recover degradation parameters from an observed capacity curve.

The objective is the midpoint-rule approximation of the integrated squared
difference between the simulated and observed capacity, minimized by
multi-start Nelder-Mead over a normalized parameter box.

Plain random restarts stall on this objective: it is razor-sharp along t_p
(the plating switch) and has long soft valleys across (k, a0, b0, c).  But on
any capacity range above the end-of-life floor the lithium-loss gate is
exactly 1.0 in float64, so the model reduces to the closed form
C = (1 - a0*t - b0*q(t; c, t_p)) * exp(-k*t), linear in (a0, b0).  fit()
profiles that closed form over (k, c, t_p) to get a warm start inside the
global basin, then lets Nelder-Mead descend the true simulated objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .degradation import DEFAULT_STEP, DegradationParams, simulate
from .errors import ContractError, FitFailedError


@dataclass(frozen=True)
class ParamBounds:
    """Per-parameter (low, high) search ranges."""

    k: tuple[float, float] = (0.0, 0.02)
    a0: tuple[float, float] = (0.0, 0.01)
    b0: tuple[float, float] = (0.0, 0.1)
    c: tuple[float, float] = (0.1, 20.0)
    t_p: tuple[float, float] = (0.0, 40.0)

    def __post_init__(self):
        for name, (lo, hi) in self.items():
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
                raise ContractError(f"invalid bounds for {name}: ({lo}, {hi})")
        if self.c[0] <= 0:
            raise ContractError("lower bound for c must be positive")
        for name in ("k", "a0", "b0", "t_p"):
            if getattr(self, name)[0] < 0:
                raise ContractError(f"lower bound for {name} must be nonnegative")

    def items(self):
        return (("k", self.k), ("a0", self.a0), ("b0", self.b0),
                ("c", self.c), ("t_p", self.t_p))

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([self.k[0], self.a0[0], self.b0[0], self.c[0], self.t_p[0]])
        hi = np.array([self.k[1], self.a0[1], self.b0[1], self.c[1], self.t_p[1]])
        return lo, hi

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        lo, hi = self.as_arrays()
        return lo + rng.random((n, 5)) * (hi - lo)

    def scaled(self, factor: float) -> "ParamBounds":
        """Bounds with rate-like ranges (k, a0, b0, c) widened by `factor`."""
        return ParamBounds(k=(self.k[0], self.k[1] * factor),
                           a0=(self.a0[0], self.a0[1] * factor),
                           b0=(self.b0[0], self.b0[1] * factor),
                           c=(self.c[0] / factor, self.c[1] * factor),
                           t_p=self.t_p)

    def to_dict(self) -> dict[str, list[float]]:
        return {name: [lo, hi] for name, (lo, hi) in self.items()}

    @classmethod
    def from_dict(cls, d) -> "ParamBounds":
        return cls(**{name: (float(v[0]), float(v[1])) for name, v in d.items()})


DEFAULT_BOUNDS = ParamBounds()


@dataclass(frozen=True)
class FitResult:
    params: DegradationParams
    objective: float
    iterations: int
    converged: bool


def _validate_observed(t_obs: np.ndarray, c_obs: np.ndarray) -> None:
    if len(t_obs) != len(c_obs) or len(t_obs) < 2:
        raise ContractError("observed curve needs >= 2 (t, capacity) points")
    if np.any(np.diff(t_obs) <= 0):
        raise ContractError("observed time grid must be strictly increasing")
    if np.any(c_obs <= 0) or np.any(c_obs > 1.2):
        raise ContractError("observed capacity values must lie in (0, 1.2]")


def fit_objective(params: DegradationParams, t_obs, c_obs,
                  step: float = DEFAULT_STEP) -> float:
    """Midpoint-rule approximation of integral (C_sim - C_obs)^2 dt.

    Simulates over the observed span (no early stop), linearly interpolates
    the simulation onto the observed interval midpoints, and compares against
    the observed curve's own midpoint values.
    """
    t_obs = np.asarray(t_obs, dtype=np.float64)
    c_obs = np.asarray(c_obs, dtype=np.float64)
    _validate_observed(t_obs, c_obs)
    mids = 0.5 * (t_obs[:-1] + t_obs[1:])
    widths = np.diff(t_obs)
    obs_mid = 0.5 * (c_obs[:-1] + c_obs[1:])
    return _objective_core(params.as_array(), t_obs[0], t_obs[-1], mids,
                           widths, obs_mid, step)


def _objective_core(p: np.ndarray, t0: float, t1: float, mids, widths,
                    obs_mid, step: float) -> float:
    params = DegradationParams.from_array(p)
    curve = simulate(params, step=step, time_cap=max(t1 - t0, step),
                     capacity_floor=None)
    sim_mid = np.interp(mids - t0, curve.t, curve.capacity)
    diff = sim_mid - obs_mid
    return float(np.sum(diff * diff * widths))


def _logcosh(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return ax + np.log1p(np.exp(-2.0 * ax)) - np.log(2.0)


def _analytic_seed(t: np.ndarray, c_norm: np.ndarray, lo: np.ndarray,
                   hi: np.ndarray, freeze_c: float | None) -> np.ndarray:
    """Warm start from the gate-saturated closed form.

    Above the EOL floor, L stays below ~0.3 so tanh(100*(1-L)) is exactly 1.0
    and C = (1 - a0*t - b0*q)*exp(-k*t) with q the integrated plating switch.
    (a0, b0) then solve a 2x2 weighted least-squares problem for each
    (k, c, t_p), leaving a cheap smooth 3-D profile search.
    """
    def sse_for(k: float, c: float, tp: float):
        w = np.exp(-2.0 * k * t)
        y = 1.0 - c_norm * np.exp(k * t)
        dt = np.maximum(t - tp, 0.0)
        qv = 0.5 * (dt + _logcosh(c * dt) / c)
        a11 = np.sum(w * t * t)
        a12 = np.sum(w * t * qv)
        a22 = np.sum(w * qv * qv)
        b1 = np.sum(w * t * y)
        b2 = np.sum(w * qv * y)
        det = a11 * a22 - a12 * a12
        a0 = b0 = 0.0
        if det > 1e-300:
            a0 = (b1 * a22 - b2 * a12) / det
            b0 = (a11 * b2 - a12 * b1) / det
        if det <= 1e-300 or a0 < 0 or b0 < 0:
            # Nonnegativity active: best single-component fit wins.
            a0u = max(b1 / max(a11, 1e-300), 0.0)
            b0u = max(b2 / max(a22, 1e-300), 0.0)
            ra = np.sum(w * (y - a0u * t) ** 2)
            rb = np.sum(w * (y - b0u * qv) ** 2)
            a0, b0 = (a0u, 0.0) if ra <= rb else (0.0, b0u)
        r = y - a0 * t - b0 * qv
        return float(np.sum(w * r * r)), a0, b0

    tp_hi = min(hi[4], float(t[-1]))
    tp_lo = min(lo[4], tp_hi)
    c_grid = (freeze_c,) if freeze_c is not None else (0.5, 2.0, 8.0)
    best_val, best = np.inf, None
    for tp in np.linspace(tp_lo, tp_hi, 64):
        for k in np.linspace(lo[0], hi[0], 8):
            for c in c_grid:
                c = min(max(c, lo[3]), hi[3])
                s, a0, b0 = sse_for(k, c, tp)
                if s < best_val:
                    best_val, best = s, (k, a0, b0, c, tp)
    k, a0, b0, c, tp = best

    lo3 = np.array([lo[0], lo[3], tp_lo])
    hi3 = np.array([hi[0], hi[3], tp_hi])
    span3 = np.maximum(hi3 - lo3, 1e-12)
    x0 = np.clip((np.array([k, c, tp]) - lo3) / span3, 0.0, 1.0)

    def profile(v: np.ndarray) -> float:
        kk, cc, tt = lo3 + np.clip(v, 0.0, 1.0) * span3
        if freeze_c is not None:
            cc = min(max(freeze_c, lo3[1]), hi3[1])
        return sse_for(kk, cc, tt)[0]

    res = minimize(profile, x0, method="Nelder-Mead", bounds=[(0.0, 1.0)] * 3,
                   options=dict(maxfev=800, xatol=1e-10, fatol=1e-26,
                                adaptive=True))
    k, c, tp = lo3 + np.clip(res.x, 0.0, 1.0) * span3
    if freeze_c is not None:
        c = min(max(freeze_c, lo3[1]), hi3[1])
    _, a0, b0 = sse_for(k, c, tp)
    return np.clip(np.array([k, a0, b0, c, tp]), lo, hi)


def fit(t_obs, c_obs, bounds: ParamBounds = DEFAULT_BOUNDS, restarts: int = 8,
        seed: int = 0, step: float = DEFAULT_STEP, freeze_c: float | None = None,
        scan: int = 256, max_fev: int = 600) -> FitResult:
    """Best multi-start simplex fit of the degradation parameters.

    The observed capacity is rescaled so it starts at 1 before fitting.  The
    closed-form warm start plus `restarts` seeded random starts (picked from
    a uniform scan over the bounds box) each get a Nelder-Mead run in the
    normalized unit box; the incumbent is then polished by fresh-simplex
    restarts until the objective stops improving.  Deterministic given the
    seed.  `freeze_c` pins the knee sharpness instead of fitting it.
    """
    if restarts < 1:
        raise ContractError("restarts must be >= 1")
    t_obs = np.asarray(t_obs, dtype=np.float64)
    c_obs = np.asarray(c_obs, dtype=np.float64)
    _validate_observed(t_obs, c_obs)
    c_obs = c_obs / c_obs[0]

    mids = 0.5 * (t_obs[:-1] + t_obs[1:])
    widths = np.diff(t_obs)
    obs_mid = 0.5 * (c_obs[:-1] + c_obs[1:])
    lo, hi = bounds.as_arrays()
    span = hi - lo
    # Degenerate (zero-width) coordinates are held at their bound.
    free = span > 0
    if freeze_c is not None:
        free[3] = False

    def expand(x: np.ndarray) -> np.ndarray:
        p = lo.copy()
        if freeze_c is not None:
            p[3] = min(max(freeze_c, lo[3]), hi[3])
        p[free] = lo[free] + x[free] * span[free]
        return p

    nfev = 0

    def objective(x: np.ndarray) -> float:
        nonlocal nfev
        nfev += 1
        x = np.clip(x, 0.0, 1.0)
        return _objective_core(expand(x), t_obs[0], t_obs[-1], mids, widths,
                               obs_mid, step)

    def run_nm(x0: np.ndarray, fev: int, xatol: float) -> tuple[np.ndarray, float, bool]:
        idx = np.nonzero(free)[0]

        def f_sub(xs):
            x = x0.copy()
            x[idx] = xs
            return objective(x)

        res = minimize(f_sub, x0[idx], method="Nelder-Mead",
                       bounds=[(0.0, 1.0)] * len(idx),
                       options=dict(maxfev=fev, xatol=xatol, fatol=1e-22,
                                    adaptive=True))
        x = x0.copy()
        x[idx] = np.clip(res.x, 0.0, 1.0)
        return x, float(res.fun), bool(res.success)

    if not free.any():
        p = expand(np.zeros(5))
        val = objective(np.zeros(5))
        return FitResult(params=DegradationParams.from_array(p), objective=val,
                         iterations=nfev, converged=True)

    rng = np.random.default_rng(seed)
    n_scan = max(scan, restarts)
    scan_starts = rng.random((n_scan, 5))
    scan_starts[:, ~free] = 0.0
    scan_vals = np.array([objective(x) for x in scan_starts])
    order = np.argsort(scan_vals, kind="stable")[:restarts]

    seed_x = np.zeros(5)
    seed_x[free] = np.clip(
        (_analytic_seed(t_obs, c_obs, lo, hi, freeze_c)[free] - lo[free])
        / span[free], 0.0, 1.0)

    best_x, best_val, converged = None, np.inf, False
    failures: list[str] = []
    for x0 in [seed_x] + [scan_starts[i] for i in order]:
        try:
            x, val, success = run_nm(x0, max_fev, xatol=1e-8)
        except Exception as exc:  # pragma: no cover - defensive
            failures.append(str(exc))
            continue
        if val < best_val:
            best_x, best_val, converged = x, val, success
    if best_x is None:
        raise FitFailedError("all restarts failed: " + "; ".join(failures))

    # Fresh-simplex restarts at the incumbent keep descending the narrow
    # valley after a single run stalls.
    for _ in range(3):
        x, val, success = run_nm(best_x, max(max_fev, 1200), xatol=1e-10)
        improved = val < best_val
        if improved:
            best_x, best_val = x, val
            converged = converged or success
        if not improved or best_val < 1e-20:
            break

    params = DegradationParams.from_array(expand(np.clip(best_x, 0.0, 1.0)))
    return FitResult(params=params, objective=best_val, iterations=nfev,
                     converged=converged or best_val < 1e-16)
