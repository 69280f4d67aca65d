import datetime as dt

import numpy as np
import pytest

from pinnsir.data import RegionDataset, derive_susceptible_removed
from pinnsir.inverse_rt import (
    I_HEAD,
    RT_HEAD,
    RtFitConfig,
    RtProblem,
    fit_rt,
    rt_data_loss,
    rt_physics_loss,
    summarize_rt,
)
from pinnsir.net import NetworkConfig, loss_gradient, net_forward_with_time_derivative, net_init
from pinnsir.sir import ReducedScaling, RtSeries, reduced_closed_form

from conftest import central_fd, max_rel_err

ALPHA = 1 / 14


def _dataset(I, N=1e6, name="synthetic"):
    series = derive_susceptible_removed(np.asarray(I, dtype=float), ALPHA, N)
    dates = [dt.date(2020, 3, 1) + dt.timedelta(days=k) for k in range(len(I))]
    return RegionDataset(name, N, dates, series)


def _two_head_net(i_value, rt_value, hidden=2, width=4):
    net = net_init(NetworkConfig(output_dim=2, hidden_layers=hidden, hidden_width=width))
    net.params[:] = 0.0
    net.layers[-1][1][:] = [i_value, rt_value]
    return net


def test_rt_data_loss_examples():
    x = np.array([0.2, 0.5, 0.9])
    assert rt_data_loss(x, x) == 0.0
    assert rt_data_loss(x + 0.1, x) == pytest.approx(0.01)
    assert rt_data_loss([0.1, 0.3], [0.0, 0.0]) == pytest.approx(0.05)
    with pytest.raises(ValueError):
        rt_data_loss(x, x[:2])


def test_physics_residual_of_closed_form_trajectory():
    ts = np.linspace(0, 1, 41)
    t0, tf = 0.0, 120.0
    Is = reduced_closed_form(1.5, ALPHA, t0, tf, 0.01, ts)
    dIs = ALPHA * (tf - t0) * 0.5 * Is
    y = np.column_stack([Is, np.full_like(ts, 1.5)])
    dy = np.column_stack([dIs, np.zeros_like(ts)])
    problem = RtProblem(ts, Is, ReducedScaling(t0, tf, 1.0, ALPHA))
    value, _, _ = problem.physics_terms(y, dy)
    assert value < 1e-8
    wrong, _, _ = problem.physics_terms(np.column_stack([Is, np.full_like(ts, 1.2)]), dy)
    assert wrong > 1e-3


def test_physics_loss_vanishes_for_zero_infected_head():
    net = net_init(NetworkConfig(output_dim=2, hidden_layers=2, hidden_width=4, seed=1))
    w, b = net.layers[-1]
    w[:, I_HEAD] = 0.0
    b[I_HEAD] = 0.0
    assert rt_physics_loss(net, np.linspace(0, 1, 9), ALPHA, 0, 100) == 0.0


def test_physics_loss_vanishes_at_equilibrium():
    net = _two_head_net(0.4, 1.0)
    assert rt_physics_loss(net, np.linspace(0, 1, 9), ALPHA, 0, 100) == 0.0
    assert rt_physics_loss(_two_head_net(0.4, 1.3), np.linspace(0, 1, 9), ALPHA, 0, 100) > 0


def _problem(stage, w0=1e2, w1=1e-2):
    t = np.arange(30.0)
    I = 100 * np.exp(0.03 * t)
    problem = RtProblem.from_dataset(_dataset(I), RtFitConfig(w0=w0, w1=w1))
    problem.stage = stage
    return problem


@pytest.mark.parametrize("stage", [1, 2])
def test_loss_gradient_matches_finite_differences(stage):
    problem = _problem(stage, w0=1.0, w1=1.0)
    net = net_init(NetworkConfig(output_dim=2, hidden_layers=2, hidden_width=5, seed=4))
    _, grad = loss_gradient(net, problem.times, problem)

    def value(params):
        trial = net.with_params(params)
        y, dy = net_forward_with_time_derivative(trial, problem.times)
        return problem(y, dy, {}).value

    fd = central_fd(value, net.params, 1e-6)
    assert max_rel_err(grad, fd, floor=1e-6) < 1e-4


def _rt_head_grads(net, grad):
    w, b = net.with_params(grad).layers[-1]
    return w[:, RT_HEAD], b[RT_HEAD]


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_rt_head_receives_no_gradient_without_physics(activation):
    net = net_init(NetworkConfig(output_dim=2, activation=activation, seed=2))
    for stage, w1 in ((1, 1.0), (2, 0.0)):
        _, grad = loss_gradient(net, _problem(stage, w1=w1).times, _problem(stage, w1=w1))
        gw, gb = _rt_head_grads(net, grad)
        assert not np.any(gw) and gb == 0.0
    _, grad = loss_gradient(net, _problem(2).times, _problem(2))
    gw, gb = _rt_head_grads(net, grad)
    assert np.any(gw) or gb != 0.0


def test_summarize_rt_examples():
    s = summarize_rt(RtSeries(np.arange(3.0), np.array([0.9, 1.1, 1.0]), ALPHA))
    assert (s.days_above_one, s.peak_rt) == (1, 1.1)
    s = summarize_rt(RtSeries(np.arange(4.0), np.ones(4), ALPHA))
    assert (s.days_above_one, s.peak_rt) == (0, 1.0)
    with pytest.raises(ValueError):
        summarize_rt(RtSeries(np.array([]), np.array([]), ALPHA))


def test_config_and_input_validation():
    with pytest.raises(ValueError):
        fit_rt(_dataset(np.zeros(10)), RtFitConfig(stage1_iters=1, stage2_iters=1))
    with pytest.raises(ValueError):
        RtFitConfig(alpha=0.0).validate()
    with pytest.raises(ValueError):
        fit_rt(_dataset(np.full(10, 5.0)), RtFitConfig(window=(3, 40)))
    with pytest.raises(ValueError):
        fit_rt(_dataset(np.full(10, 5.0)), RtFitConfig(stage1_iters=1, stage2_iters=1),
               NetworkConfig(output_dim=3))


def test_short_fit_is_deterministic_and_shaped():
    d = _dataset(100 * np.exp(0.02 * np.arange(40.0)))
    cfg = RtFitConfig(stage1_iters=150, stage2_iters=100)
    a, b = fit_rt(d, cfg), fit_rt(d, cfg)
    assert a.loss_history.tobytes() == b.loss_history.tobytes()
    assert a.series.rt.tobytes() == b.series.rt.tobytes()
    assert len(a.series) == 40 and len(a.loss_history) == 250
    np.testing.assert_array_equal(a.series.t, np.arange(40.0))
    assert 0 <= a.summary.days_above_one <= 40


def test_window_restricts_fit():
    d = _dataset(100 * np.exp(0.02 * np.arange(40.0)))
    r = fit_rt(d, RtFitConfig(stage1_iters=50, stage2_iters=50, window=(10, 29)))
    np.testing.assert_array_equal(r.series.t, np.arange(10.0, 30.0))


@pytest.fixture(scope="module")
def flat_fit():
    return fit_rt(_dataset(np.full(60, 500.0), name="flat"), RtFitConfig())


@pytest.mark.slow
def test_flat_infected_peak_rt_near_one(flat_fit):
    assert flat_fit.summary.peak_rt <= 1.1


@pytest.mark.slow
def test_flat_infected_days_above_one(flat_fit):
    # strict count of rt > 1 on equilibrium data
    assert flat_fit.summary.days_above_one <= 0.05 * len(flat_fit.series)
