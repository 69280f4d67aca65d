"""Time-dependent Rt estimation with the reduced (infected-only) SIR model.

A two-output network predicts the scaled infected curve and Rt. Rt never
enters the data loss; it is identified only through the reduced ODE residual.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import RegionDataset
from .net import (
    AdamState,
    LossTerms,
    Network,
    NetworkConfig,
    TrainingError,
    adam_step,
    loss_gradient,
    net_forward,
    net_forward_with_time_derivative,
    net_init,
    poly_lr,
)
from .sir import ReducedScaling, RtSeries, reduced_residual

__all__ = [
    "NATIONAL_WEIGHTS",
    "STATE_WEIGHTS",
    "DEFAULT_WEIGHTS",
    "RtFitConfig",
    "RtFitResult",
    "RtProblem",
    "RtSummary",
    "fit_rt",
    "rt_data_loss",
    "rt_physics_loss",
    "summarize_rt",
]

log = logging.getLogger(__name__)

I_HEAD, RT_HEAD = 0, 1

# (w0, w1) loss weights used for the published country-level and state-level runs.
# In the scaled units used here they leave the residual almost unweighted, so the
# default leans harder on the physics term.
NATIONAL_WEIGHTS = (1e2, 1e-6)
STATE_WEIGHTS = (1e3, 4e-6)
DEFAULT_WEIGHTS = (1e2, 1e-2)


@dataclass(frozen=True)
class RtFitConfig:
    alpha: float = 1.0 / 14.0
    w0: float = DEFAULT_WEIGHTS[0]
    w1: float = DEFAULT_WEIGHTS[1]
    stage1_iters: int = 30_000
    stage2_iters: int = 20_000
    window: tuple[int, int] | None = None
    rt_init: float = 1.0
    initial_lr: float = 1e-3
    lr_schedule_power: float = 1.0

    def validate(self) -> None:
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.w0 < 0 or self.w1 < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ValueError("iteration counts must be nonnegative")
        if self.window is not None and not self.window[1] > self.window[0]:
            raise ValueError(f"empty window {self.window}")
        if not self.initial_lr > 0:
            raise ValueError("initial_lr must be positive")


@dataclass(frozen=True)
class RtSummary:
    days_above_one: int
    peak_rt: float
    alpha_used: float


def rt_data_loss(pred_I, obs_I) -> float:
    pred_I = np.asarray(pred_I, dtype=np.float64)
    obs_I = np.asarray(obs_I, dtype=np.float64)
    if pred_I.shape != obs_I.shape:
        raise ValueError(f"length mismatch: {pred_I.shape} vs {obs_I.shape}")
    return float(np.mean((pred_I - obs_I) ** 2))


@dataclass
class RtProblem:
    """Reduced-model loss on normalized time with I scaled by ``scaling.c``."""

    times: np.ndarray
    observed: np.ndarray
    scaling: ReducedScaling
    w0: float = 1.0
    w1: float = 1.0
    stage: int = 2
    days: np.ndarray | None = None

    @classmethod
    def from_dataset(cls, dataset: RegionDataset, config: RtFitConfig) -> "RtProblem":
        t = dataset.series.t
        I = dataset.series.I
        if config.window is not None:
            lo, hi = config.window
            if lo < 0 or hi >= len(t):
                raise ValueError(f"window {config.window} outside dataset of {len(t)} days")
            t, I = t[lo:hi + 1], I[lo:hi + 1]
        if not np.max(I) > 0:
            raise ValueError("infected series is identically zero; Rt is undefined")
        scaling = ReducedScaling.from_series(t, I, config.alpha)
        return cls(scaling.to_normalized_time(t), I / scaling.c, scaling, config.w0, config.w1, days=t)

    @property
    def rate(self) -> float:
        """alpha * (tf - t0): growth rate per unit normalized time at Rt = 2."""
        return self.scaling.alpha * self.scaling.length

    def physics_terms(self, y, dy):
        Is, rt = y[:, I_HEAD], y[:, RT_HEAD]
        s = self.scaling
        r = reduced_residual(dy[:, I_HEAD], s.alpha, s.t0, s.tf, rt, Is)
        m = y.shape[0]
        gr = 2.0 * r / m
        gy = np.zeros_like(y)
        gy[:, I_HEAD] = -gr * self.rate * (rt - 1.0)
        gy[:, RT_HEAD] = -gr * self.rate * Is
        gdy = np.zeros_like(dy)
        gdy[:, I_HEAD] = gr
        return float(np.sum(r * r) / m), gy, gdy

    def __call__(self, y: np.ndarray, dy: np.ndarray, extras: dict[str, float]) -> LossTerms:
        diff = y[:, I_HEAD] - self.observed
        m = y.shape[0]
        d_value = float(np.sum(diff * diff) / m)
        gy = np.zeros_like(y)
        gy[:, I_HEAD] = 2.0 * diff / m
        if self.stage == 1:
            return LossTerms(d_value, gy, np.zeros_like(dy), {}, {"data": d_value})
        p_value, gy_p, gdy = self.physics_terms(y, dy)
        return LossTerms(self.w0 * d_value + self.w1 * p_value, self.w0 * gy + self.w1 * gy_p,
                         self.w1 * gdy, {}, {"data": d_value, "physics": p_value})


def rt_physics_loss(net: Network, collocation_times, alpha: float, t0: float, tf: float) -> float:
    """Mean squared reduced-model residual of a two-output network."""
    y, dy = net_forward_with_time_derivative(net, np.atleast_1d(collocation_times))
    problem = RtProblem(np.atleast_1d(collocation_times), y[:, I_HEAD], ReducedScaling(t0, tf, 1.0, alpha))
    return problem.physics_terms(y, dy)[0]


def summarize_rt(series: RtSeries) -> RtSummary:
    if len(series) == 0:
        raise ValueError("empty Rt series")
    return RtSummary(int(np.sum(series.rt > 1.0)), float(np.max(series.rt)), series.alpha_used)


@dataclass
class RtFitResult:
    series: RtSeries
    summary: RtSummary
    fitted_I: np.ndarray
    stage1_data_loss: float
    final_data_loss: float
    final_physics_loss: float
    loss_history: np.ndarray
    seed: int
    network: Network | None = field(default=None, repr=False)
    problem: RtProblem | None = field(default=None, repr=False)


def _train(net: Network, problem: RtProblem, iterations: int, config: RtFitConfig, stage: int,
           history: np.ndarray, offset: int) -> None:
    problem.stage = stage
    state = AdamState.zeros_like(net.params)
    for it in range(iterations):
        try:
            terms, grad = loss_gradient(net, problem.times, problem)
        except TrainingError as exc:
            raise TrainingError(f"fit_rt: non-finite loss in stage {stage} at iteration {it} "
                                f"({exc.components})", iteration=it, stage=stage,
                                components=exc.components) from None
        history[offset + it] = terms.value
        adam_step(state, net.params, grad,
                  poly_lr(it, iterations, config.initial_lr, config.lr_schedule_power))


def fit_rt(dataset: RegionDataset, config: RtFitConfig | None = None,
           net_config: NetworkConfig | None = None, *, keep_network: bool = True) -> RtFitResult:
    """Two-stage fit: data loss only, then the weighted data + physics loss.

    Between stages the Rt head's output bias is shifted so that its mean over
    the window equals ``config.rt_init``. Each stage restarts Adam and the
    learning-rate schedule.
    """
    config = config or RtFitConfig()
    config.validate()
    net_config = net_config or NetworkConfig(output_dim=2, activation="relu")
    if net_config.output_dim != 2:
        raise ValueError("fit_rt needs a network with 2 outputs")
    problem = RtProblem.from_dataset(dataset, config)
    net = net_init(net_config)
    history = np.empty(config.stage1_iters + config.stage2_iters)

    _train(net, problem, config.stage1_iters, config, 1, history, 0)
    y = net_forward(net, problem.times)
    stage1_loss = rt_data_loss(y[:, I_HEAD], problem.observed)
    _, out_bias = net.layers[-1]
    out_bias[RT_HEAD] += config.rt_init - float(np.mean(y[:, RT_HEAD]))

    _train(net, problem, config.stage2_iters, config, 2, history, config.stage1_iters)
    problem.stage = 2
    y, dy = net_forward_with_time_derivative(net, problem.times)
    phys, _, _ = problem.physics_terms(y, dy)
    t_days = problem.days.copy()
    series = RtSeries(t_days, y[:, RT_HEAD], config.alpha)
    return RtFitResult(series, summarize_rt(series), y[:, I_HEAD] * problem.scaling.c, stage1_loss,
                       rt_data_loss(y[:, I_HEAD], problem.observed), phys, history, net_config.seed,
                       net if keep_network else None, problem if keep_network else None)
