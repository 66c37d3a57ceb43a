import numpy as np
import pytest

from control_model import ControlChannel, PulseGrid, RobustnessTerm, SystemModel
from dense_math import PAULI_X, PAULI_Z, expm, kron
from robust_objective import (
    FitnessConfig,
    compensated_target,
    fidelity_with_local_z,
    gate_fidelity,
    gradient,
    leakage,
    local_z_matrix,
    local_z_phases,
    model_fidelity,
    total_fitness,
)
from system_presets import CZ_TARGET, TransmonCzParams, build_transmon_cz, original_x_pulse
from vanloan_propagation import GradientMode, propagate

TWO_PI = 2 * np.pi


def _fd_gradient(model, pulse, cfg, h, indices):
    values = []
    for c, m in indices:
        plus, minus = pulse.raw.copy(), pulse.raw.copy()
        plus[c, m] += h
        minus[c, m] -= h
        values.append((total_fitness(model, pulse.with_raw(plus), cfg).phi
                       - total_fitness(model, pulse.with_raw(minus), cfg).phi) / (2 * h))
    return np.array(values)


def _two_qubit_model(target=CZ_TARGET, local_z=True):
    return SystemModel(drift=np.zeros((4, 4)), channels=(ControlChannel(kron(PAULI_Z, np.eye(2))),),
                       subspace_isometry=np.eye(4), target=target, local_z=local_z)


def test_original_x_pulse_is_exact(qubit):
    pulse = original_x_pulse(qubit.params)
    report = total_fitness(qubit.model, pulse, FitnessConfig())
    assert report.phi0 == pytest.approx(1.0, abs=1e-12)
    assert report.phi == report.phi0
    assert report.leakage == pytest.approx(0.0, abs=1e-12)


def test_fidelity_is_global_phase_invariant(qubit):
    U = expm(-0.4j * PAULI_X)
    assert gate_fidelity(np.exp(0.9j) * U, qubit.model) == pytest.approx(gate_fidelity(U, qubit.model), abs=1e-15)


def test_leakage_of_level_swap():
    S = np.eye(3)[:, :2]
    model = SystemModel(drift=np.zeros((3, 3)), channels=(), subspace_isometry=S, target=np.eye(2))
    U = np.eye(3)[:, [0, 2, 1]].astype(complex)
    assert leakage(U, model) == pytest.approx(0.5)
    assert gate_fidelity(U, model) == pytest.approx(0.25)


def test_local_z_recovers_pure_phases():
    alpha, beta = 0.7, -2.1
    U_q = np.diag([1, np.exp(1j * alpha), np.exp(1j * beta), -np.exp(1j * (alpha + beta))])
    model = _two_qubit_model()
    assert fidelity_with_local_z(U_q, model) == pytest.approx(1.0, abs=1e-12)
    phases = local_z_phases(U_q, CZ_TARGET)
    compensated = local_z_matrix(phases) @ U_q
    assert np.allclose(compensated / compensated[0, 0], CZ_TARGET, atol=1e-7)


def test_local_z_without_optimization_uses_given_phases():
    U_q = np.diag([1, 1j, 1j, 1]).astype(complex)
    model = _two_qubit_model()
    assert fidelity_with_local_z(U_q, model, optimize_phases=False) == pytest.approx(0.25)
    fixed = fidelity_with_local_z(U_q, model, optimize_phases=False, phases=(-np.pi / 2, -np.pi / 2))
    assert fixed == pytest.approx(1.0, abs=1e-12)
    assert model_fidelity(U_q, model, phases=(-np.pi / 2, -np.pi / 2)) == pytest.approx(1.0, abs=1e-12)


def test_compensated_target_matches_phase_on_propagator():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
    U_q, _ = np.linalg.qr(X)
    phases = (0.3, -1.2)
    lhs = abs(np.trace(U_q @ compensated_target(CZ_TARGET, phases).conj().T))
    rhs = abs(np.trace(local_z_matrix(phases) @ U_q @ CZ_TARGET.conj().T))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_local_z_requires_two_qubits(qubit):
    with pytest.raises(ValueError):
        fidelity_with_local_z(np.eye(2), qubit.model)


def test_penalties_and_labels(qubit, random_pulse):
    detuning = qubit.noise("detuning")
    pulse = random_pulse(2, 20, 1e-6, TWO_PI * 5e5, seed=1)
    terms = (RobustnessTerm(1, (detuning,), 1e11), RobustnessTerm(1, (detuning,), 0.0))
    report = total_fitness(qubit.model, pulse, FitnessConfig(robustness_terms=terms))
    assert list(report.penalties) == ["D1(detuning)", "D1(detuning)#2"]
    assert report.penalties["D1(detuning)#2"] == 0.0
    assert report.phi == pytest.approx(report.phi0 - report.penalties["D1(detuning)"], abs=1e-15)
    assert report.derivative_norms["D1(detuning)"] > 0


def test_fitness_config_validation():
    with pytest.raises(ValueError):
        FitnessConfig(phi0_threshold=1.0)
    with pytest.raises(ValueError):
        FitnessConfig(threads=0)
    with pytest.raises(ValueError):
        FitnessConfig(gradient_mode="approximate")
    scaled = FitnessConfig(robustness_terms=()).scaled(0.5)
    assert scaled.weights == []


@pytest.mark.parametrize("sigma", [0.0, 1.5])
def test_qubit_gradient_matches_finite_difference(qubit, random_pulse, sigma):
    n = qubit.noises
    terms = (
        RobustnessTerm(1, (n["detuning"],), 1e11),
        RobustnessTerm(2, (n["detuning"], n["rabi"]), 1e11),
        RobustnessTerm(2, (n["dephasing"],), 1e24),
    )
    cfg = FitnessConfig(robustness_terms=terms)
    pulse = random_pulse(2, 12, 1e-6, TWO_PI * 1e6, seed=2, smoothing_sigma=sigma)
    analytic = gradient(qubit.model, pulse, cfg)
    indices = [(0, 0), (0, 5), (1, 3), (1, 11), (0, 11)]
    h = 1e-6 * TWO_PI * 1e6
    numeric = _fd_gradient(qubit.model, pulse, cfg, h, indices)
    picked = np.array([analytic[c, m] for c, m in indices])
    scale = np.max(np.abs(numeric))
    assert np.max(np.abs(picked - numeric)) < 1e-5 * scale


def test_threaded_gradient_matches_serial(qubit, random_pulse):
    n = qubit.noises
    terms = (RobustnessTerm(1, (n["detuning"],), 1e11), RobustnessTerm(2, (n["dephasing"],), 1e24))
    pulse = random_pulse(2, 10, 1e-6, TWO_PI * 1e6, seed=3)
    serial = gradient(qubit.model, pulse, FitnessConfig(robustness_terms=terms))
    threaded = gradient(qubit.model, pulse, FitnessConfig(robustness_terms=terms, threads=4))
    assert np.allclose(serial, threaded, rtol=0, atol=1e-12 * np.max(np.abs(serial)))


def test_first_order_gradient_is_close_on_fine_grids(qubit, random_pulse):
    n = qubit.noises
    terms = (RobustnessTerm(1, (n["detuning"],), 1e11),)
    pulse = random_pulse(2, 100, 1e-6, TWO_PI * 3e5, seed=4)
    exact = gradient(qubit.model, pulse, FitnessConfig(robustness_terms=terms))
    approx = gradient(qubit.model, pulse, FitnessConfig(robustness_terms=terms,
                                                        gradient_mode=GradientMode.FIRST_ORDER))
    assert np.linalg.norm(approx - exact) < 0.1 * np.linalg.norm(exact)


def test_transmon_gradient_with_local_z_matches_finite_difference():
    system = build_transmon_cz(TransmonCzParams(levels=3, M=16))
    p = system.params
    n = system.noises
    terms = (
        RobustnessTerm(1, (n["coupling"],), 1e13),
        RobustnessTerm(2, (n["coupling"], n["anharmonicity"]), 1e28),
        RobustnessTerm(2, (n["qubit_frequency"],), 1e28),
    )
    cfg = FitnessConfig(robustness_terms=terms)
    rng = np.random.default_rng(6)
    pulse = PulseGrid(T=p.T, M=p.M, raw=p.u_on * rng.uniform(0.6, 1.1, size=(1, p.M)))
    analytic = gradient(system.model, pulse, cfg)
    indices = [(0, 0), (0, 7), (0, 15)]
    numeric = _fd_gradient(system.model, pulse, cfg, 1e-5 * abs(p.u_on), indices)
    picked = np.array([analytic[c, m] for c, m in indices])
    assert np.max(np.abs(picked - numeric)) < 1e-4 * np.max(np.abs(numeric))


def test_transmon_local_z_uses_model_mode():
    system = build_transmon_cz(TransmonCzParams(levels=3, M=10))
    pulse = PulseGrid(T=system.params.T, M=10, raw=np.zeros((1, 10)))
    U = propagate(system.model, pulse).total
    assert model_fidelity(U, system.model) == pytest.approx(fidelity_with_local_z(U, system.model))
    assert model_fidelity(U, system.model) >= gate_fidelity(U, system.model)
