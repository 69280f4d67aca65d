"""Fixed-topology MLP with exact time derivatives and exact loss gradients.

The network maps a scalar (normalized) time to a small output vector. A forward
pass propagates the value and its tangent d/dt together; the backward pass
differentiates through both, so losses that penalize ODE residuals get exact
parameter gradients, including the second-order terms from the tangent path.

All trainable quantities live in one flat float64 vector (weights, biases, then
named extra scalars) so the optimizer works on a single array.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ACTIVATIONS",
    "AdamState",
    "ConfigurationError",
    "LossTerms",
    "Network",
    "NetworkConfig",
    "ScheduleError",
    "TrainConfig",
    "TrainingError",
    "adam_step",
    "loss_gradient",
    "net_forward",
    "net_forward_with_time_derivative",
    "net_init",
    "parameter_count",
    "poly_lr",
]

ACTIVATIONS = ("tanh", "relu")


class ConfigurationError(ValueError):
    pass


class ScheduleError(ValueError):
    pass


class TrainingError(RuntimeError):
    """Raised when a loss becomes non-finite during training."""

    def __init__(self, message: str, *, iteration: int | None = None, stage: int | None = None,
                 components: dict[str, float] | None = None):
        super().__init__(message)
        self.iteration = iteration
        self.stage = stage
        self.components = dict(components or {})


@dataclass(frozen=True)
class NetworkConfig:
    output_dim: int = 3
    hidden_layers: int = 7
    hidden_width: int = 20
    activation: str = "tanh"
    seed: int = 0
    input_dim: int = 1

    def validate(self) -> None:
        if self.input_dim != 1:
            raise ConfigurationError(f"input_dim must be 1, got {self.input_dim}")
        if self.output_dim not in (2, 3):
            raise ConfigurationError(f"output_dim must be 2 or 3, got {self.output_dim}")
        if self.hidden_layers < 1:
            raise ConfigurationError(f"hidden_layers must be >= 1, got {self.hidden_layers}")
        if self.hidden_width < 1:
            raise ConfigurationError(f"hidden_width must be >= 1, got {self.hidden_width}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.output_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 10_000
    initial_lr: float = 1e-3
    lr_schedule_power: float = 1.0
    data_loss_weight: float = 1.0
    physics_loss_weight: float = 1.0
    stage1_iterations: int = 0

    def validate(self) -> None:
        if self.iterations < 0 or self.stage1_iterations < 0:
            raise ConfigurationError("iteration counts must be nonnegative")
        if self.iterations < self.stage1_iterations:
            raise ConfigurationError("iterations must be >= stage1_iterations")
        if not self.initial_lr > 0:
            raise ConfigurationError("initial_lr must be positive")
        if not self.lr_schedule_power > 0:
            raise ConfigurationError("lr_schedule_power must be positive")
        if self.data_loss_weight < 0 or self.physics_loss_weight < 0:
            raise ConfigurationError("loss weights must be nonnegative")


def parameter_count(config: NetworkConfig, n_extra: int = 0) -> int:
    return sum(i * o + o for i, o in config.layer_shapes()) + n_extra


class Network:
    """MLP parameters stored in one flat vector with per-layer views."""

    def __init__(self, config: NetworkConfig, params: np.ndarray, extra_names: Sequence[str] = ()):
        config.validate()
        self.config = config
        self.extra_names = tuple(extra_names)
        expected = parameter_count(config, len(self.extra_names))
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (expected,):
            raise ConfigurationError(f"expected {expected} parameters, got shape {params.shape}")
        self.params = params
        self.layers = _layer_views(config, self.params)

    @property
    def n_params(self) -> int:
        return self.params.size

    def extra_index(self, name: str) -> int:
        return self.params.size - len(self.extra_names) + self.extra_names.index(name)

    def get_extra(self, name: str) -> float:
        return float(self.params[self.extra_index(name)])

    def set_extra(self, name: str, value: float) -> None:
        if not np.isfinite(value):
            raise ConfigurationError(f"extra scalar {name!r} must be finite")
        self.params[self.extra_index(name)] = value

    @property
    def extras(self) -> dict[str, float]:
        return {name: self.get_extra(name) for name in self.extra_names}

    def copy(self) -> "Network":
        return Network(self.config, self.params.copy(), self.extra_names)

    def with_params(self, params: np.ndarray) -> "Network":
        return Network(self.config, np.array(params, dtype=np.float64), self.extra_names)

    def __repr__(self) -> str:
        c = self.config
        return (f"Network({c.hidden_layers}x{c.hidden_width} {c.activation}, out={c.output_dim}, "
                f"extras={list(self.extra_names)}, n_params={self.n_params})")


def _layer_views(config: NetworkConfig, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    views = []
    offset = 0
    for fan_in, fan_out in config.layer_shapes():
        w = flat[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = flat[offset:offset + fan_out]
        offset += fan_out
        views.append((w, b))
    return views


def net_init(config: NetworkConfig, extras: dict[str, float] | None = None) -> Network:
    """Glorot-uniform weights, zero biases, seeded by ``config.seed``."""
    config.validate()
    extras = dict(extras or {})
    rng = np.random.default_rng(config.seed)
    net = Network(config, np.zeros(parameter_count(config, len(extras))), tuple(extras))
    for w, _ in net.layers:
        fan_in, fan_out = w.shape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    for name, value in extras.items():
        net.set_extra(name, value)
    return net


def _as_times(t) -> tuple[np.ndarray, bool]:
    arr = np.asarray(t, dtype=np.float64)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr).ravel()
    if not np.all(np.isfinite(arr)):
        raise ValueError("network input time must be finite")
    return arr, scalar


def _activate(name: str, z: np.ndarray):
    """Return activation value and its first and second derivatives."""
    if name == "tanh":
        h = np.tanh(z)
        s1 = 1.0 - h * h
        return h, s1, -2.0 * h * s1
    h = np.maximum(z, 0.0)
    s1 = (z > 0.0).astype(np.float64)
    return h, s1, None


class _Tape:
    __slots__ = ("inputs", "s1", "s2dz")

    def __init__(self):
        self.inputs: list[np.ndarray] = []
        self.s1: list[np.ndarray] = []
        # act''(z) * dz/dt, or None when act'' vanishes (relu)
        self.s2dz: list[np.ndarray | None] = []


def _forward(net: Network, t: np.ndarray, tape: _Tape | None = None):
    m = t.size
    # rows [:m] carry values, rows [m:] carry d/dt tangents
    x = np.empty((2 * m, 1))
    x[:m, 0] = t
    x[m:, 0] = 1.0
    n_layers = len(net.layers)
    act = net.config.activation
    for k, (w, b) in enumerate(net.layers):
        if tape is not None:
            tape.inputs.append(x)
        z = x @ w
        z[:m] += b
        if k == n_layers - 1:
            return z[:m], z[m:]
        h, s1, s2 = _activate(act, z[:m])
        if tape is not None:
            tape.s1.append(s1)
            tape.s2dz.append(None if s2 is None else s2 * z[m:])
        z[m:] *= s1
        z[:m] = h
        x = z
    raise AssertionError("unreachable")


def net_forward(net: Network, t):
    """Network outputs at time(s) ``t``; shape (out,) for scalar t, else (M, out)."""
    arr, scalar = _as_times(t)
    y, _ = _forward(net, arr)
    return y[0] if scalar else y


def net_forward_with_time_derivative(net: Network, t):
    """Outputs and their exact derivative with respect to the input time."""
    arr, scalar = _as_times(t)
    y, dy = _forward(net, arr)
    if scalar:
        return y[0], dy[0]
    return y, dy


@dataclass
class LossTerms:
    """A loss value with its partials w.r.t. outputs, output tangents and extras.

    ``grad_outputs`` and ``grad_doutputs`` have the (M, out) shape of the network
    outputs; ``grad_extras`` maps extra-scalar names to partial derivatives.
    """

    value: float
    grad_outputs: np.ndarray
    grad_doutputs: np.ndarray
    grad_extras: dict[str, float] = field(default_factory=dict)
    components: dict[str, float] = field(default_factory=dict)


LossFn = Callable[[np.ndarray, np.ndarray, dict[str, float]], LossTerms]


def loss_gradient(net: Network, times, loss_fn: LossFn) -> tuple[LossTerms, np.ndarray]:
    """Evaluate ``loss_fn`` on the network at ``times`` and backpropagate.

    ``loss_fn(outputs, doutputs, extras)`` returns :class:`LossTerms`. The
    returned gradient is a flat array aligned with ``net.params``.
    """
    t, _ = _as_times(times)
    m = t.size
    tape = _Tape()
    y, dy = _forward(net, t, tape)
    terms = loss_fn(y, dy, net.extras)
    if not np.isfinite(terms.value):
        raise TrainingError(f"non-finite loss {terms.value}", components=terms.components)

    grad = np.zeros_like(net.params)
    gviews = _layer_views(net.config, grad)
    g = np.empty((2 * m, net.config.output_dim))
    g[:m] = terms.grad_outputs
    g[m:] = terms.grad_doutputs
    for k in range(len(net.layers) - 1, -1, -1):
        w, _ = net.layers[k]
        gw, gb = gviews[k]
        x = tape.inputs[k]
        gw[...] = x.T @ g
        gb[...] = g[:m].sum(axis=0)
        if k == 0:
            break
        gx = g @ w.T
        # back through the activation of layer k-1: h = act(z), dh = act'(z) dz
        s1, s2dz = tape.s1[k - 1], tape.s2dz[k - 1]
        g = gx
        if s2dz is not None:
            g[:m] = g[:m] * s1 + g[m:] * s2dz
        else:
            g[:m] *= s1
        g[m:] *= s1
    for name, value in terms.grad_extras.items():
        grad[net.extra_index(name)] += value
    return terms, grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    _buf: np.ndarray | None = field(default=None, repr=False, compare=False)

    @classmethod
    def zeros_like(cls, params: np.ndarray, **kwargs) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), **kwargs)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
    """One bias-corrected Adam update. Updates ``params`` and ``state`` in place."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, "
                         f"state {state.m.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    if state._buf is None or state._buf.shape != params.shape:
        state._buf = np.empty_like(params)
    buf = state._buf
    state.m *= b1
    np.multiply(grads, 1.0 - b1, out=buf)
    state.m += buf
    state.v *= b2
    np.multiply(grads, grads, out=buf)
    buf *= 1.0 - b2
    state.v += buf
    # m_hat / (sqrt(v_hat) + eps) with both corrections folded into scalars
    c1 = 1.0 - b1 ** state.step
    c2 = np.sqrt(1.0 - b2 ** state.step)
    np.sqrt(state.v, out=buf)
    buf += state.eps * c2
    np.divide(state.m, buf, out=buf)
    buf *= lr * c2 / c1
    params -= buf
    return params


def poly_lr(iteration: int, total: int, initial_lr: float, power: float = 1.0) -> float:
    if total <= 0 or iteration < 0 or iteration > total:
        raise ScheduleError(f"iteration {iteration} outside schedule of length {total}")
    return initial_lr * (1.0 - iteration / total) ** power
