import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odeadj.likelihood import (
    HIV_POST,
    GaussianMetric,
    ObservationSet,
    PostProcessor,
    distance,
    distance_grad_state,
    distance_hess_state,
    evaluate_misfit,
    misfit,
    read_observations_csv,
    write_observations_csv,
)
from odeadj.models import exact_solution_linear, make_linear_diagonal

from conftest import linear_problem, regular_times


def test_observation_validation():
    obs = ObservationSet([1.0, 2.0], [[1.0, 2.0], [3.0, 4.0]])
    assert obs.n_obs == 2 and obs.dim == 2
    with pytest.raises(ValueError):
        obs.times[0] = 5.0
    for times in ([0.0, 1.0], [2.0, 1.0], [1.0, 1.0], [np.nan, 1.0]):
        with pytest.raises(ValueError):
            ObservationSet(times, [[1.0], [2.0]])
    with pytest.raises(ValueError):
        ObservationSet([1.0, 2.0], [[1.0]])
    with pytest.raises(ValueError):
        ObservationSet([1.0], [[np.inf]])
    obs.check_horizon(3.0)
    with pytest.raises(ValueError):
        obs.check_horizon(2.0)


def test_distance_examples():
    I2 = GaussianMetric.identity(2)
    assert distance(I2, [1.0, 2.0], [1.0, 2.0]) == 0.0
    assert distance(I2, [3.0, 4.0], [0.0, 0.0]) == 12.5
    assert np.isclose(distance(GaussianMetric(np.diag([4.0, 1.0])), [2.0, 1.0], [0.0, 0.0]), 1.0,
                      rtol=1e-15)
    with pytest.raises(ValueError):
        distance(I2, [1.0], [1.0])


def test_metric_construction_errors():
    with pytest.raises(ValueError):
        GaussianMetric([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ValueError):
        GaussianMetric([[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(ValueError):
        GaussianMetric(np.ones(3))


def test_grad_state_examples():
    I2 = GaussianMetric.identity(2)
    u = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    y = HIV_POST(u)
    assert np.array_equal(distance_grad_state(I2, HIV_POST, y, u), np.zeros(5))
    I3 = GaussianMetric.identity(3)
    r = np.array([0.5, -1.0, 2.0])
    uu = np.array([1.0, 1.0, 1.0])
    assert np.allclose(distance_grad_state(I3, PostProcessor.identity(3), uu + r, uu), -r)
    # residual (1, 2) in observation space
    y = HIV_POST(u) + np.array([1.0, 2.0])
    assert np.allclose(distance_grad_state(I2, HIV_POST, y, u), -np.array([1, 1, 1, 2, 2.0]))


def test_hess_state_examples():
    assert np.array_equal(distance_hess_state(GaussianMetric.identity(3), PostProcessor.identity(3)),
                          np.eye(3))
    H = distance_hess_state(GaussianMetric.identity(2), HIV_POST)
    ref = np.zeros((5, 5))
    ref[:3, :3] = 1.0
    ref[3:, 3:] = 1.0
    assert np.array_equal(H, ref)
    assert np.linalg.matrix_rank(H) <= 2
    assert np.all(np.linalg.eigvalsh(H) >= -1e-12)


def test_grad_and_hess_match_fd():
    rng = np.random.default_rng(4)
    A = rng.standard_normal((2, 2))
    metric = GaussianMetric(A @ A.T + np.eye(2))
    P = PostProcessor(rng.standard_normal((2, 4)))
    y = rng.standard_normal(2)
    u = rng.standard_normal(4)
    h = 1e-6
    fd = np.array([(distance(metric, y, P(u + h * e)) - distance(metric, y, P(u - h * e))) / (2 * h)
                   for e in np.eye(4)])
    g = distance_grad_state(metric, P, y, u)
    assert np.max(np.abs(g - fd)) / np.max(np.abs(g)) < 1e-8
    fdH = np.column_stack([(distance_grad_state(metric, P, y, u + h * e)
                            - distance_grad_state(metric, P, y, u - h * e)) / (2 * h)
                           for e in np.eye(4)])
    H = distance_hess_state(metric, P)
    assert np.max(np.abs(H - fdH)) / np.max(np.abs(H)) < 1e-8


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=6, max_size=6),
       st.lists(st.floats(-10, 10), min_size=6, max_size=6))
def test_post_processor_linear(a, b):
    P = PostProcessor(np.arange(12.0).reshape(2, 6) - 5)
    a, b = np.array(a), np.array(b)
    assert np.allclose(P(a + b), P(a) + P(b), rtol=1e-12, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2),
       st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2))
def test_distance_nonnegative(y, yhat):
    metric = GaussianMetric([[2.0, 0.3], [0.3, 1.0]])
    d = distance(metric, y, yhat)
    assert d >= 0.0
    if np.allclose(y, yhat, rtol=0, atol=0):
        assert d == 0.0


def test_misfit_examples():
    times = regular_times(5)
    th = np.array([-0.4, -0.9])
    model = make_linear_diagonal(th)
    obs = ObservationSet(times, exact_solution_linear(th, times))
    I2 = GaussianMetric.identity(2)
    res = evaluate_misfit(model, obs, I2, PostProcessor.identity(2), th)
    assert abs(res.value) < 1e-12
    assert res.loglik == -res.value
    # p = 1, theta = -0.1, single observation y = 1 at t = 1
    model1 = make_linear_diagonal([-0.1])
    obs1 = ObservationSet([1.0], [[1.0]])
    J = misfit(model1, obs1, GaussianMetric.identity(1), PostProcessor.identity(1), [-0.1])
    assert np.isclose(J, 0.5 * (1 - np.exp(-0.1)) ** 2, rtol=1e-9)
    prob = linear_problem(p=3, n_obs=4, seed=2)
    J1 = misfit(*prob.args)
    J2 = misfit(prob.model, prob.obs, GaussianMetric(2 * np.eye(3)), prob.post, prob.theta)
    assert np.isclose(J2, J1 / 2, rtol=1e-12)


def test_misfit_grid_independence():
    prob = linear_problem(p=3, n_obs=4, seed=7)
    J = misfit(*prob.args)
    # additional stop points elsewhere change the step grid, not the value
    from odeadj.integrator import integrate
    extra = np.union1d(prob.obs.times, [3.3, 41.0, 77.7])
    th = prob.theta
    res = integrate(lambda t, u: prob.model.rhs(t, u, th), prob.model.u0(th), (0, 100), stops=extra)
    idx = np.searchsorted(extra, prob.obs.times)
    J2 = sum(distance(prob.metric, y, u) for y, u in zip(prob.obs.values, res.stop_states[idx]))
    assert np.isclose(J, J2, rtol=1e-8)


def test_misfit_shape_checks():
    prob = linear_problem(p=3, n_obs=4)
    with pytest.raises(ValueError):
        misfit(prob.model, prob.obs, GaussianMetric.identity(2), prob.post, prob.theta)
    with pytest.raises(ValueError):
        misfit(prob.model.with_horizon(prob.obs.times[-1]), prob.obs, prob.metric, prob.post,
               prob.theta)


def test_observation_csv_roundtrip(tmp_path):
    obs = ObservationSet([0.5, 1.25, 3.0], [[1.0, 2.0], [0.1, 1e-20], [7.0, -3.5]])
    path = tmp_path / "obs.csv"
    write_observations_csv(path, obs)
    assert path.read_text().splitlines()[0] == "t,y1,y2"
    back = read_observations_csv(path)
    assert np.array_equal(back.times, obs.times)
    assert np.array_equal(back.values, obs.values)
    path.write_text("time,y1\n1,2\n")
    with pytest.raises(ValueError):
        read_observations_csv(path)
    path.write_text("t,y1\n2,2\n1,3\n")
    with pytest.raises(ValueError):
        read_observations_csv(path)
