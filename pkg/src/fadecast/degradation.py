"""Dimensionless capacity-fade model and its RK4 integration.

Capacity is the product of remaining active material and remaining lithium
inventory.  Active material decays exponentially; lithium loss is SEI growth
plus plating, where plating is gated on after an onset time t_p and shaped by
a knee-sharpness constant c.  Both lithium-loss rates are attenuated by a
tanh gate as the total inventory loss L approaches 1.

The time axis t is abstract (time or cycle count); unit mapping is the data
pipeline's concern.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Literal

import numpy as np
from numba import njit

from .errors import ContractError, IntegrationDivergedError, OutOfRangeError

PARAM_NAMES = ("k", "a0", "b0", "c", "t_p")

DEFAULT_STEP = 0.01
DEFAULT_TIME_CAP = 50.0
CAPACITY_FLOOR = 0.7

TERM_TIME_CAP = 0
TERM_FLOOR = 1
TERM_DIVERGED = 2

TerminatedBy = Literal["capacity_floor", "time_cap"]


@dataclass(frozen=True)
class DegradationParams:
    """The five rate constants defining one fade scenario.

    k: active-material decay rate; a0: typical SEI growth rate; b0: typical
    plating growth rate; c: knee sharpness; t_p: plating onset time.
    """

    k: float
    a0: float
    b0: float
    c: float
    t_p: float

    def __post_init__(self):
        vals = (self.k, self.a0, self.b0, self.c, self.t_p)
        if not all(math.isfinite(v) for v in vals):
            raise ContractError(f"non-finite degradation parameter: {vals}")
        if self.k < 0 or self.a0 < 0 or self.b0 < 0 or self.t_p < 0:
            raise ContractError(
                f"k, a0, b0, t_p must be nonnegative, got {vals}")
        if self.c <= 0:
            raise ContractError(f"knee sharpness c must be positive, got {self.c}")

    def as_array(self) -> np.ndarray:
        return np.array([self.k, self.a0, self.b0, self.c, self.t_p], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "DegradationParams":
        k, a0, b0, c, t_p = (float(x) for x in a)
        return cls(k=k, a0=a0, b0=b0, c=c, t_p=t_p)


@dataclass(frozen=True)
class SimState:
    """Instantaneous model state; C = (1-L)*M with L = S + P."""

    t: float
    M: float
    S: float
    P: float

    @property
    def L(self) -> float:
        return self.S + self.P

    @property
    def C(self) -> float:
        return (1.0 - self.L) * self.M


@dataclass(frozen=True)
class ModeReport:
    """Degradation-mode split at one time point."""

    t: float
    lam_fade: float   # 1 - M
    lli_fade: float   # L = S + P
    capacity: float   # (1 - L) * M


@njit(cache=True)
def _rates(t, m, s, p, k, a0, b0, c, t_p):
    # L is clamped to [0, 1] inside the gate only; S and P stay unclamped.
    l = s + p
    if l < 0.0:
        l = 0.0
    elif l > 1.0:
        l = 1.0
    gate = 0.5 * (1.0 + math.tanh(100.0 * (1.0 - l)))
    dm = -k * m
    ds = a0 * gate
    if t > t_p:
        dp = 0.5 * (b0 * gate) * (1.0 + math.tanh(c * (t - t_p)))
    else:
        dp = 0.0
    return dm, ds, dp


@njit(cache=True)
def _rk4_path(k, a0, b0, c, t_p, h, n_max, floor, use_floor):
    M = np.empty(n_max + 1)
    S = np.empty(n_max + 1)
    P = np.empty(n_max + 1)
    M[0] = 1.0
    S[0] = 0.0
    P[0] = 0.0
    m, s, p = 1.0, 0.0, 0.0
    n = 0
    term = TERM_TIME_CAP
    half = 0.5 * h
    sixth = h / 6.0
    for i in range(n_max):
        t = i * h
        dm1, ds1, dp1 = _rates(t, m, s, p, k, a0, b0, c, t_p)
        dm2, ds2, dp2 = _rates(t + half, m + half * dm1, s + half * ds1,
                               p + half * dp1, k, a0, b0, c, t_p)
        dm3, ds3, dp3 = _rates(t + half, m + half * dm2, s + half * ds2,
                               p + half * dp2, k, a0, b0, c, t_p)
        dm4, ds4, dp4 = _rates(t + h, m + h * dm3, s + h * ds3,
                               p + h * dp3, k, a0, b0, c, t_p)
        m = m + sixth * (dm1 + 2.0 * dm2 + 2.0 * dm3 + dm4)
        s = s + sixth * (ds1 + 2.0 * ds2 + 2.0 * ds3 + ds4)
        p = p + sixth * (dp1 + 2.0 * dp2 + 2.0 * dp3 + dp4)
        n = i + 1
        M[n] = m
        S[n] = s
        P[n] = p
        if not (math.isfinite(m) and math.isfinite(s) and math.isfinite(p)):
            term = TERM_DIVERGED
            break
        if use_floor and (1.0 - (s + p)) * m < floor:
            term = TERM_FLOOR
            break
    return M[: n + 1].copy(), S[: n + 1].copy(), P[: n + 1].copy(), term


@dataclass
class SimCurve:
    """One integrated trajectory sampled on the RK4 grid t = i*step."""

    params: DegradationParams
    step: float
    t: np.ndarray
    material: np.ndarray       # M
    sei_loss: np.ndarray       # S
    plating_loss: np.ndarray   # P
    terminated_by: TerminatedBy
    lithium_loss: np.ndarray = field(init=False)   # L = S + P
    capacity: np.ndarray = field(init=False)       # C = (1 - L) * M

    def __post_init__(self):
        self.lithium_loss = self.sei_loss + self.plating_loss
        self.capacity = (1.0 - self.lithium_loss) * self.material

    def __len__(self) -> int:
        return len(self.t)

    @property
    def t_end(self) -> float:
        return float(self.t[-1])

    def state(self, i: int) -> SimState:
        return SimState(t=float(self.t[i]), M=float(self.material[i]),
                        S=float(self.sei_loss[i]), P=float(self.plating_loss[i]))

    def states(self) -> Iterator[SimState]:
        for i in range(len(self.t)):
            yield self.state(i)


def derivatives(state: SimState, params: DegradationParams) -> tuple[float, float, float]:
    """Rate triple (dM, dS, dP) at the given state."""
    vals = (state.t, state.M, state.S, state.P)
    if not all(math.isfinite(v) for v in vals):
        raise ContractError(f"non-finite state: {vals}")
    dm, ds, dp = _rates(state.t, state.M, state.S, state.P,
                        params.k, params.a0, params.b0, params.c, params.t_p)
    return float(dm), float(ds), float(dp)


def simulate(params: DegradationParams, step: float = DEFAULT_STEP,
             time_cap: float = DEFAULT_TIME_CAP,
             capacity_floor: float | None = CAPACITY_FLOOR) -> SimCurve:
    """Integrate the model with classic RK4.

    Stops at the first full step where capacity drops below `capacity_floor`
    (pass None to disable), or at `time_cap`, whichever comes first.

    Raises IntegrationDivergedError if a non-finite state appears.
    """
    if step <= 0:
        raise ContractError(f"step must be positive, got {step}")
    if time_cap <= 0:
        raise ContractError(f"time_cap must be positive, got {time_cap}")
    n_max = int(math.ceil(time_cap / step - 1e-9))
    use_floor = capacity_floor is not None
    floor = capacity_floor if use_floor else 0.0
    M, S, P, term = _rk4_path(params.k, params.a0, params.b0, params.c,
                              params.t_p, step, n_max, floor, use_floor)
    if term == TERM_DIVERGED:
        raise IntegrationDivergedError(t=(len(M) - 1) * step)
    t = np.arange(len(M), dtype=np.float64) * step
    terminated: TerminatedBy = "capacity_floor" if term == TERM_FLOOR else "time_cap"
    return SimCurve(params=params, step=step, t=t, material=M,
                    sei_loss=S, plating_loss=P, terminated_by=terminated)


def quantify_modes(curve: SimCurve, at_t: float) -> ModeReport:
    """Degradation-mode split at the grid point nearest `at_t`.

    lam_fade = 1 - M (lost active material), lli_fade = L (lost lithium
    inventory), capacity = (1 - L) * M; the identity is exact because
    capacity is stored as that product.
    """
    t0, t1 = float(curve.t[0]), float(curve.t[-1])
    if not (t0 - 0.5 * curve.step <= at_t <= t1 + 0.5 * curve.step):
        raise OutOfRangeError(
            f"t={at_t:.6g} outside simulated range [{t0:.6g}, {t1:.6g}]")
    i = int(round((at_t - t0) / curve.step))
    i = min(max(i, 0), len(curve) - 1)
    return ModeReport(t=float(curve.t[i]),
                      lam_fade=1.0 - float(curve.material[i]),
                      lli_fade=float(curve.lithium_loss[i]),
                      capacity=float(curve.capacity[i]))


def crossing_time(curve: SimCurve, threshold: float) -> float | None:
    """First grid time where capacity drops below `threshold`, or None."""
    below = np.nonzero(curve.capacity < threshold)[0]
    if len(below) == 0:
        return None
    return float(curve.t[below[0]])
