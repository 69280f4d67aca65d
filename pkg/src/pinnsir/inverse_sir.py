"""Time-independent (alpha, beta) identification with a three-output PINN."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import RegionDataset
from .net import (
    AdamState,
    LossTerms,
    Network,
    NetworkConfig,
    TrainConfig,
    TrainingError,
    adam_step,
    loss_gradient,
    net_forward,
    net_init,
    poly_lr,
)

__all__ = [
    "CompartmentScaling",
    "SirFitResult",
    "SirProblem",
    "constrain_rate",
    "fit_sir",
    "sir_data_loss",
    "sir_physics_loss",
]

log = logging.getLogger(__name__)

RAW_ALPHA = "raw_alpha"
RAW_BETA = "raw_beta"


def constrain_rate(raw):
    """Map an unconstrained latent to a rate in (-1, 1)."""
    return np.tanh(raw)


@dataclass(frozen=True)
class CompartmentScaling:
    """Affine map between counts and network units: X = shift + scale * u.

    ``population`` divides every compartment by N. ``range`` maps each
    compartment's observed [min, max] to [0, 1]; it keeps small compartments
    (I and R early in an outbreak are ~1e-6 N) at O(1) magnitude.
    """

    shift: np.ndarray
    scale: np.ndarray

    @classmethod
    def population(cls, N: float) -> "CompartmentScaling":
        return cls(np.zeros(3), np.full(3, float(N)))

    @classmethod
    def range(cls, observed: np.ndarray, N: float) -> "CompartmentScaling":
        lo = observed.min(axis=0)
        span = observed.max(axis=0) - lo
        span = np.where(span > 1e-12 * N, span, float(N))
        return cls(lo.astype(np.float64), span.astype(np.float64))

    @classmethod
    def build(cls, mode: str, observed: np.ndarray, N: float) -> "CompartmentScaling":
        if mode == "population":
            return cls.population(N)
        if mode == "range":
            return cls.range(observed, N)
        raise ValueError(f"unknown scaling mode {mode!r}")

    def to_units(self, counts: np.ndarray) -> np.ndarray:
        return (counts - self.shift) / self.scale

    def to_counts(self, units: np.ndarray) -> np.ndarray:
        return self.shift + self.scale * units


def sir_data_loss(pred, obs) -> float:
    """Mean over days of the summed squared S, I, R errors."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    if pred.shape != obs.shape:
        raise ValueError(f"prediction shape {pred.shape} != observation shape {obs.shape}")
    return float(np.sum((pred - obs) ** 2) / pred.shape[0])


@dataclass
class SirProblem:
    """Everything the composite SIR loss needs besides the network.

    ``times`` are normalized to [0, 1] over a window of ``window_days`` days;
    ``observed`` holds S, I, R in network units. The physics residual of each
    compartment is expressed in network units per normalized time, i.e. the
    per-day residual multiplied by window_days / scale.
    """

    times: np.ndarray
    observed: np.ndarray
    scaling: CompartmentScaling
    N: float
    window_days: float
    data_weight: float = 1.0
    physics_weight: float = 1.0
    fixed_alpha: float | None = None

    @classmethod
    def from_dataset(cls, dataset: RegionDataset, *, scaling: str = "range", data_weight: float = 1.0,
                     physics_weight: float = 1.0, fixed_alpha: float | None = None) -> "SirProblem":
        s = dataset.series
        if len(s) < 2:
            raise ValueError("need at least two observation days")
        counts = s.stacked()
        sc = CompartmentScaling.build(scaling, counts, s.N)
        window = float(s.t[-1] - s.t[0])
        return cls((s.t - s.t[0]) / window, sc.to_units(counts), sc, s.N, window,
                   data_weight, physics_weight, fixed_alpha)

    def rates(self, extras: dict[str, float]) -> tuple[float, float]:
        beta = float(np.tanh(extras[RAW_BETA]))
        alpha = self.fixed_alpha if self.fixed_alpha is not None else float(np.tanh(extras[RAW_ALPHA]))
        return alpha, beta

    def data_terms(self, u: np.ndarray) -> tuple[float, np.ndarray]:
        diff = u - self.observed
        n = u.shape[0]
        return float(np.sum(diff * diff) / n), 2.0 * diff / n

    def physics_terms(self, u, du, extras):
        """Physics loss and its partials w.r.t. u, du, raw_alpha, raw_beta."""
        alpha, beta = self.rates(extras)
        X = self.scaling.to_counts(u)
        S, I = X[:, 0], X[:, 1]
        kS, kI, kR = self.window_days / self.scaling.scale
        infection = beta * S * I / self.N
        recovery = alpha * I
        rS = du[:, 0] + kS * infection
        rI = du[:, 1] - kI * (infection - recovery)
        rR = du[:, 2] - kR * recovery
        m = u.shape[0]
        value = float(np.sum(rS * rS + rI * rI + rR * rR) / m)

        c = 2.0 / m
        g_inf = c * (rS * kS - rI * kI)  # dL/d(infection)
        g_rec = c * (rI * kI - rR * kR)  # dL/d(recovery)
        gS = g_inf * beta * I / self.N
        gI = g_inf * beta * S / self.N + g_rec * alpha
        gu = np.zeros_like(u)
        gu[:, 0] = gS * self.scaling.scale[0]
        gu[:, 1] = gI * self.scaling.scale[1]
        gdu = c * np.column_stack([rS, rI, rR])
        g_extras = {RAW_BETA: float(np.sum(g_inf * S * I / self.N)) * (1.0 - beta * beta)}
        if self.fixed_alpha is None:
            g_extras[RAW_ALPHA] = float(np.sum(g_rec * I)) * (1.0 - alpha * alpha)
        else:
            g_extras[RAW_ALPHA] = 0.0
        return value, gu, gdu, g_extras

    def __call__(self, u: np.ndarray, du: np.ndarray, extras: dict[str, float]) -> LossTerms:
        d_value, gu_data = self.data_terms(u)
        p_value, gu_phys, gdu, g_extras = self.physics_terms(u, du, extras)
        w0, w1 = self.data_weight, self.physics_weight
        return LossTerms(
            w0 * d_value + w1 * p_value,
            w0 * gu_data + w1 * gu_phys,
            w1 * gdu,
            {k: w1 * v for k, v in g_extras.items()},
            {"data": d_value, "physics": p_value},
        )


def sir_physics_loss(net: Network, collocation_times, raw_alpha: float, raw_beta: float, N: float, *,
                     scaling: CompartmentScaling | None = None, window_days: float = 1.0) -> float:
    """Mean squared SIR residual of ``net`` at the collocation times.

    With the default population scaling and a one-day window, the network
    outputs are S/N, I/N, R/N and time derivatives are per day.
    """
    from .net import net_forward_with_time_derivative

    scaling = scaling or CompartmentScaling.population(N)
    u, du = net_forward_with_time_derivative(net, np.atleast_1d(collocation_times))
    problem = SirProblem(np.atleast_1d(collocation_times), u, scaling, N, window_days)
    value, *_ = problem.physics_terms(u, du, {RAW_ALPHA: raw_alpha, RAW_BETA: raw_beta})
    return value


@dataclass
class SirFitResult:
    alpha_hat: float
    beta_hat: float
    final_data_loss: float
    final_physics_loss: float
    loss_history: np.ndarray
    seed: int
    warnings: list[str] = field(default_factory=list)
    network: Network | None = field(default=None, repr=False)
    problem: SirProblem | None = field(default=None, repr=False)

    def predict_counts(self, t_days=None) -> np.ndarray:
        """Network trajectory in counts at day offsets from the window start."""
        p = self.problem
        ts = p.times if t_days is None else np.asarray(t_days, dtype=np.float64) / p.window_days
        return p.scaling.to_counts(net_forward(self.network, ts))


def fit_sir(dataset: RegionDataset, net_config: NetworkConfig | None = None,
            train_config: TrainConfig | None = None, *, scaling: str = "range",
            fixed_alpha: float | None = None, rate_init: float = 0.1,
            keep_network: bool = True) -> SirFitResult:
    """Fit S, I, R and the SIR rates jointly by full-batch Adam.

    ``fixed_alpha`` pins the recovery rate to a known value and trains beta only.
    """
    net_config = net_config or NetworkConfig(output_dim=3)
    train_config = train_config or TrainConfig()
    train_config.validate()
    if train_config.stage1_iterations != 0:
        raise ValueError("fit_sir is single-stage; stage1_iterations must be 0")
    if net_config.output_dim != 3:
        raise ValueError("fit_sir needs a network with 3 outputs")

    problem = SirProblem.from_dataset(dataset, scaling=scaling,
                                      data_weight=train_config.data_loss_weight,
                                      physics_weight=train_config.physics_loss_weight,
                                      fixed_alpha=fixed_alpha)
    raw0 = math.atanh(rate_init)
    net = net_init(net_config, {RAW_ALPHA: raw0, RAW_BETA: raw0})
    state = AdamState.zeros_like(net.params)
    total = train_config.iterations
    history = np.empty(total)
    terms = None
    for it in range(total):
        try:
            terms, grad = loss_gradient(net, problem.times, problem)
        except TrainingError as exc:
            raise TrainingError(f"fit_sir: non-finite loss at iteration {it} ({exc.components})",
                                iteration=it, components=exc.components) from None
        history[it] = terms.value
        lr = poly_lr(it, total, train_config.initial_lr, train_config.lr_schedule_power)
        adam_step(state, net.params, grad, lr)

    terms, _ = loss_gradient(net, problem.times, problem)
    alpha_hat, beta_hat = problem.rates(net.extras)
    warnings = []
    if alpha_hat < 0 or beta_hat < 0:
        warnings.append(f"negative fitted rate (alpha={alpha_hat:.4g}, beta={beta_hat:.4g})")
    if np.ptp(dataset.series.I) == 0 and np.all(dataset.series.I == 0):
        warnings.append("no infections observed; rates are not identifiable")
    for w in warnings:
        log.warning("%s: %s", dataset.region_name, w)
    return SirFitResult(alpha_hat, beta_hat, terms.components["data"], terms.components["physics"],
                        history, net_config.seed, warnings,
                        net if keep_network else None, problem if keep_network else None)
