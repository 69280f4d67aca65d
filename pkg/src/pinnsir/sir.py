"""SIR dynamics: RK4 forward solver, effective reproduction number, reduced model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "CompartmentSeries",
    "ReducedScaling",
    "RtSeries",
    "SirParams",
    "effective_reproduction",
    "reduced_closed_form",
    "reduced_residual",
    "sir_rhs",
    "sir_rk4_simulate",
]


@dataclass(frozen=True)
class SirParams:
    alpha: float
    beta: float
    N: float

    def __post_init__(self):
        if not self.N > 0:
            raise ValueError(f"population N must be positive, got {self.N}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"rates must be nonnegative, got alpha={self.alpha}, beta={self.beta}")


@dataclass
class CompartmentSeries:
    t: np.ndarray
    S: np.ndarray
    I: np.ndarray
    R: np.ndarray
    N: float

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.S = np.asarray(self.S, dtype=np.float64)
        self.I = np.asarray(self.I, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        n = len(self.t)
        if not (len(self.S) == len(self.I) == len(self.R) == n):
            raise ValueError("t, S, I, R must have equal lengths")
        if not self.N > 0:
            raise ValueError("population N must be positive")

    def __len__(self) -> int:
        return len(self.t)

    def stacked(self) -> np.ndarray:
        """(T, 3) array of S, I, R columns."""
        return np.column_stack([self.S, self.I, self.R])

    def conservation_error(self) -> float:
        return float(np.max(np.abs(self.S + self.I + self.R - self.N)) / self.N)


@dataclass
class RtSeries:
    t: np.ndarray
    rt: np.ndarray
    alpha_used: float

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.rt = np.asarray(self.rt, dtype=np.float64)
        if len(self.t) != len(self.rt):
            raise ValueError("t and rt must have equal lengths")
        if not np.all(np.isfinite(self.rt)):
            raise ValueError("rt must be finite")

    def __len__(self) -> int:
        return len(self.t)


@dataclass(frozen=True)
class ReducedScaling:
    """Window and scale of the reduced model: I(t) = c * I_s((t - t0) / (tf - t0))."""

    t0: float
    tf: float
    c: float
    alpha: float

    def __post_init__(self):
        if not self.tf > self.t0:
            raise ValueError(f"window must satisfy tf > t0, got [{self.t0}, {self.tf}]")
        if not self.c > 0:
            raise ValueError(f"scale c must be positive, got {self.c}")

    @property
    def length(self) -> float:
        return self.tf - self.t0

    def to_normalized_time(self, t):
        return (np.asarray(t, dtype=np.float64) - self.t0) / self.length

    @classmethod
    def from_series(cls, t, infected, alpha: float) -> "ReducedScaling":
        """Window spanning ``t`` with c set to the window maximum of ``infected``."""
        t = np.asarray(t, dtype=np.float64)
        return cls(float(t[0]), float(t[-1]), float(np.max(infected)), alpha)


def sir_rhs(state: np.ndarray, alpha: float, beta: float, N: float) -> np.ndarray:
    S, I, _ = state
    infection = beta * S * I / N
    recovery = alpha * I
    return np.array([-infection, infection - recovery, recovery])


def sir_rk4_simulate(params: SirParams, s0: float, i0: float, r0: float, days: int,
                     steps_per_day: int = 10) -> CompartmentSeries:
    """Classical RK4 on the SIR system, sampled once per day for days 0..days."""
    if min(s0, i0, r0) < 0:
        raise ValueError("initial compartments must be nonnegative")
    if abs(s0 + i0 + r0 - params.N) > 1e-9 * params.N:
        raise ValueError(f"initial compartments sum to {s0 + i0 + r0}, expected N={params.N}")
    if days < 1 or steps_per_day < 1:
        raise ValueError("days and steps_per_day must be >= 1")

    a, b, N = params.alpha, params.beta, params.N
    h = 1.0 / steps_per_day
    out = np.empty((days + 1, 3))
    y = np.array([s0, i0, r0], dtype=np.float64)
    out[0] = y
    for day in range(1, days + 1):
        for _ in range(steps_per_day):
            k1 = sir_rhs(y, a, b, N)
            k2 = sir_rhs(y + 0.5 * h * k1, a, b, N)
            k3 = sir_rhs(y + 0.5 * h * k2, a, b, N)
            k4 = sir_rhs(y + h * k3, a, b, N)
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[day] = y
    return CompartmentSeries(np.arange(days + 1, dtype=np.float64), out[:, 0], out[:, 1], out[:, 2], N)


def effective_reproduction(beta, alpha, S, N):
    """Rt = (beta / alpha) * (S / N)."""
    if np.any(np.asarray(alpha) == 0):
        raise ZeroDivisionError("recovery rate alpha must be nonzero")
    return (beta / alpha) * (np.asarray(S, dtype=np.float64) / N)


def reduced_residual(dIs_dts, alpha, t0, tf, rt, Is):
    """dI_s/dt_s - alpha (tf - t0) (Rt - 1) I_s."""
    return dIs_dts - alpha * (tf - t0) * (rt - 1.0) * Is


def reduced_closed_form(rt_const, alpha, t0, tf, Is0, ts):
    """Reduced-model solution for constant Rt."""
    return Is0 * np.exp(alpha * (tf - t0) * (rt_const - 1.0) * np.asarray(ts, dtype=np.float64))
