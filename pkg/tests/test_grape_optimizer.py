import warnings

import numpy as np
import pytest

from control_model import PulseGrid, RobustnessTerm
from grape_optimizer import (
    ConstraintAuditWarning,
    LbfgsHistory,
    OptimizerConfig,
    armijo_search,
    audit_adjacency,
    enforce_constraints,
    initial_parameters,
    lbfgs_step,
    maximize_lbfgs,
    run_grape,
)
from robust_objective import FitnessConfig, total_fitness
from system_presets import original_x_pulse

TWO_PI = 2 * np.pi


def _concave_quadratic(A, b):
    def fun(x, need_gradient):
        value = float(b @ x - 0.5 * x @ A @ x)
        return value, (b - A @ x) if need_gradient else None, None
    return fun


def _spd(n, seed):
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return Q @ np.diag(np.linspace(1.0, 10.0, n)) @ Q.T


def test_history_rejects_negative_curvature():
    history = LbfgsHistory(memory=3)
    assert not history.add(np.array([1.0, 0.0]), np.array([-1.0, 0.0]))
    assert history.add(np.array([1.0, 0.0]), np.array([2.0, 0.0]))
    for _ in range(5):
        history.add(np.array([1.0, 1.0]), np.array([1.0, 1.0]))
    assert len(history) == 3
    history.clear()
    assert len(history) == 0


def test_empty_history_returns_gradient():
    g = np.array([0.3, -1.2, 4.0])
    assert np.array_equal(lbfgs_step(LbfgsHistory(), g), g)


def test_two_loop_recovers_inverse_hessian():
    A = _spd(5, 0)
    _, vectors = np.linalg.eigh(A)
    history = LbfgsHistory(memory=5)
    for k in range(5):
        s = vectors[:, k]
        assert history.add(s, A @ s)
    g = np.random.default_rng(1).normal(size=5)
    assert np.allclose(lbfgs_step(history, g), np.linalg.solve(A, g), rtol=1e-10, atol=1e-12)


def test_step_freezes_active_bounds():
    history = LbfgsHistory()
    x = np.array([1.0, -1.0, 0.0])
    g = np.array([2.0, -3.0, 1.0])
    d = lbfgs_step(history, g, x, (-1.0, 1.0))
    assert np.array_equal(d, [0.0, 0.0, 1.0])


def test_armijo_search_accepts_descent_free_step():
    A, b = np.eye(2), np.array([1.0, 0.0])
    fun = _concave_quadratic(A, b)
    cfg = OptimizerConfig(init_scale=1.0, progress=False)
    x = np.zeros(2)
    g = b - A @ x
    found = armijo_search(fun, x, fun(x, False)[0], g, g, 4.0, cfg, None)
    assert found is not None
    step, x_new, evaluation = found
    assert step == 1.0
    assert evaluation[0] > 0


def test_maximize_lbfgs_solves_quadratic():
    A = _spd(8, 2)
    b = np.random.default_rng(3).normal(size=8)
    cfg = OptimizerConfig(init_scale=1.0, max_inner_iters=200, progress=False)
    x, reason = maximize_lbfgs(_concave_quadratic(A, b), np.zeros(8), cfg)
    assert np.allclose(x, np.linalg.solve(A, b), atol=1e-6)
    assert reason in ("gradient_tolerance", "value_tolerance", "line_search_failed")


def test_maximize_lbfgs_respects_box():
    A = np.diag([1.0, 2.0, 4.0])
    b = np.array([3.0, -0.5, -8.0])
    cfg = OptimizerConfig(init_scale=1.0, max_inner_iters=200, progress=False)
    x, _ = maximize_lbfgs(_concave_quadratic(A, b), np.zeros(3), cfg, bounds=(-1.0, 1.0))
    assert np.allclose(x, [1.0, -0.25, -1.0], atol=1e-6)
    assert np.all(np.abs(x) <= 1.0)


def test_maximize_lbfgs_callback_and_budget():
    A = _spd(4, 4)
    b = np.ones(4)
    calls = []
    cfg = OptimizerConfig(init_scale=1.0, max_inner_iters=2, progress=False)
    _, reason = maximize_lbfgs(_concave_quadratic(A, b), np.zeros(4), cfg,
                               callback=lambda it, x, ev, gn, step: calls.append(it))
    assert reason == "max_iterations"
    assert calls == [0, 1, 2]


def test_optimizer_config_requires_a_scale():
    with pytest.raises(ValueError):
        OptimizerConfig()
    with pytest.raises(ValueError):
        OptimizerConfig(omega_max=1.0, lambda_decay=1.0)
    cfg = OptimizerConfig.from_dict({"omega_max": 10.0, "unused": 1})
    assert cfg.scale == 10.0
    assert cfg.initial_amplitude == pytest.approx(1.0)


def test_initial_parameters_are_seeded(qubit):
    cfg = OptimizerConfig(M=12, omega_max=5.0, rng_seed=42)
    a = initial_parameters(qubit.model, cfg)
    assert a.shape == (2, 12)
    assert np.array_equal(a, initial_parameters(qubit.model, cfg))
    assert np.max(np.abs(a)) <= 0.5


def test_enforce_constraints_clips_and_audits():
    pulse = PulseGrid(T=1.0, M=4, raw=[[0.0, 3.0, -3.0, 0.5]])
    cfg = OptimizerConfig(omega_max=2.0, adjacency_bound=1.0)
    with pytest.warns(ConstraintAuditWarning):
        clipped = enforce_constraints(pulse, cfg)
    assert np.array_equal(clipped.amplitudes, [[0.0, 2.0, -2.0, 0.5]])
    assert len(audit_adjacency(clipped, 1.0)) == 3
    assert audit_adjacency(clipped, None) == []


def test_enforce_constraints_leaves_valid_pulse():
    pulse = PulseGrid(T=1.0, M=3, raw=[[0.0, 0.5, 0.7]])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert enforce_constraints(pulse, OptimizerConfig(omega_max=1.0, adjacency_bound=1.0)) is pulse


def test_run_grape_reaches_x_gate(qubit):
    opt = OptimizerConfig(T=1e-6, M=20, omega_max=TWO_PI * 1e6, max_inner_iters=200,
                          rng_seed=3, progress=False)
    pulse, trace = run_grape(qubit.model, FitnessConfig(phi0_threshold=0.9999), opt)
    assert trace.status == "converged"
    assert trace.final_report.phi0 >= 0.9999
    assert np.max(np.abs(pulse.amplitudes)) <= TWO_PI * 1e6 * (1 + 1e-12)
    assert trace.iterations[0].iteration == 0
    phis = [rec.phi for rec in trace.iterations]
    assert all(b >= a for a, b in zip(phis, phis[1:]))
    assert trace.to_dict()["rounds"][0]["stop_reason"]


def test_run_grape_is_deterministic(qubit):
    opt = OptimizerConfig(T=1e-6, M=10, omega_max=TWO_PI * 1e6, max_inner_iters=15,
                          rng_seed=9, progress=False)
    cfg = FitnessConfig(robustness_terms=(RobustnessTerm(1, (qubit.noise("detuning"),), 1e10),))
    first, _ = run_grape(qubit.model, cfg, opt)
    second, _ = run_grape(qubit.model, cfg, opt)
    assert np.array_equal(first.raw, second.raw)


def test_run_grape_best_effort_decays_weights(qubit):
    opt = OptimizerConfig(T=1e-6, M=10, omega_max=TWO_PI * 1e6, max_inner_iters=1,
                          max_outer_rounds=3, lambda_decay=0.5, rng_seed=1, progress=False)
    cfg = FitnessConfig(robustness_terms=(RobustnessTerm(1, (qubit.noise("detuning"),), 1e10),),
                        phi0_threshold=0.999999999)
    _, trace = run_grape(qubit.model, cfg, opt)
    assert trace.status == "best_effort"
    weights = [r["weights"][0] for r in trace.rounds]
    assert weights == [1e10, 5e9, 2.5e9]


def test_run_grape_rejects_wrong_initial_shape(qubit):
    opt = OptimizerConfig(T=1e-6, M=10, omega_max=1.0, progress=False)
    with pytest.raises(ValueError, match="shape"):
        run_grape(qubit.model, FitnessConfig(), opt, initial_raw=np.zeros((1, 10)))


def test_run_grape_warm_start_keeps_optimum(qubit):
    base = original_x_pulse(qubit.params)
    opt = OptimizerConfig(T=base.T, M=base.M, omega_max=qubit.params.omega_max, max_inner_iters=5,
                          progress=False)
    pulse, trace = run_grape(qubit.model, FitnessConfig(), opt, initial_raw=base.raw)
    assert total_fitness(qubit.model, pulse, FitnessConfig()).phi0 == pytest.approx(1.0, abs=1e-12)
    assert trace.status == "converged"
