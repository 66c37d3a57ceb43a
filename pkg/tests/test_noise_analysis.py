import math
import warnings

import numpy as np
import pytest
from scipy.integrate import trapezoid

from control_model import PulseGrid, SystemModel
from dense_math import PAULI_Z
from noise_analysis import (
    FitResidualWarning,
    PSDKind,
    PSDModel,
    QuadratureWarning,
    StaticMode,
    SweepAxis,
    autocorr_from_psd,
    default_omega_grid,
    filter_function,
    mc_noise_fidelity,
    overlap_infidelity,
    psd_value,
    quasi_static_sweep,
    robust_region_fraction,
    sample_trajectories,
)
from robust_objective import FitnessConfig, total_fitness
from system_presets import QubitParams, build_qubit_x, original_x_pulse

TWO_PI = 2 * np.pi


def test_psd_kind_names():
    assert PSDKind.from_name("1/f") is PSDKind.ONE_OVER_F
    assert PSDKind.from_name("Lorentzian") is PSDKind.LORENTZIAN
    with pytest.raises(ValueError):
        PSDKind.from_name("white")


def test_psd_model_validation():
    with pytest.raises(ValueError):
        PSDModel.lorentzian(0.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        PSDModel.one_over_f(10.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        PSDModel.lorentzian(0.0, 1.0, -1.0)


def test_lorentzian_expansion_is_exact():
    fit = autocorr_from_psd(PSDModel.lorentzian(5.0, 2.0, 1.0))
    assert list(fit) == [(0.5, complex(-2.0, 5.0)), (0.5, complex(-2.0, -5.0))]
    assert fit.residual == 0.0
    centered = autocorr_from_psd(PSDModel.lorentzian(0.0, 2.0, 1.0))
    assert len(centered) == 1
    assert centered[0] == (1.0, -2.0)


def test_lorentzian_psd_closed_form():
    A, w0, rms = 3.0, 10.0, 0.7
    psd = PSDModel.lorentzian(w0, A, rms)
    omega = np.array([w0 - 3 * A, w0, w0 + 3 * A, -w0])
    expected = rms ** 2 * (A / (A ** 2 + (omega - w0) ** 2) + A / (A ** 2 + (omega + w0) ** 2))
    assert np.allclose(psd_value(psd, omega), expected, rtol=1e-10)


def test_psd_normalization_matches_rms():
    psd = PSDModel.lorentzian(0.0, 1.0, 2.0)
    omega = np.linspace(-2000.0, 2000.0, 400001)
    assert trapezoid(psd_value(psd, omega), omega) / TWO_PI == pytest.approx(4.0, rel=1e-3)


def test_one_over_f_level_and_band():
    low, high, rms = TWO_PI * 1e2, TWO_PI * 1e6, 3.0
    psd = PSDModel.one_over_f(low, high, rms)
    omega = np.array([low / 2, low * 10, -low * 10, high * 2])
    S = psd_value(psd, omega)
    level = math.pi * rms ** 2 / math.log(high / low)
    assert S[0] == 0.0 and S[3] == 0.0
    assert S[1] == pytest.approx(level / (low * 10))
    assert S[2] == S[1]


def test_one_over_f_fit_is_flat_in_band():
    low, high = TWO_PI * 1e2, TWO_PI * 1e6
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FitResidualWarning)
        fit = autocorr_from_psd(PSDModel.one_over_f(low, high, 1.0))
    assert sum(a for a, _ in fit).real == pytest.approx(1.0, abs=1e-12)
    assert all(b.real < 0 and b.imag == 0 for _, b in fit)
    expansion = PSDModel.exp_sum(fit.terms, 1.0)
    omega = np.geomspace(2 * low, high / 2, 200)
    flat = psd_value(expansion, omega) * omega
    assert np.max(np.abs(flat / np.median(flat) - 1.0)) < 0.1


def test_one_over_f_fit_reports_residual():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FitResidualWarning)
        fit = autocorr_from_psd(PSDModel.one_over_f(TWO_PI * 1e4, TWO_PI * 1e8, 1.0))
    assert fit.residual >= 0.0
    assert (fit.warning is None) == (fit.residual <= 0.05)


def test_zero_rms_trajectories_are_zero():
    rng = np.random.default_rng(0)
    out = sample_trajectories(((1.0, -1.0),), 0.0, 10, 0.1, rng, count=3)
    assert out.shape == (3, 10)
    assert not np.any(out)


def test_real_rate_trajectory_statistics():
    rng = np.random.default_rng(1)
    gamma, dt, rms = 2.0, 0.1, 1.5
    x = sample_trajectories(((1.0, -gamma),), rms, 6, dt, rng, count=100000)
    var = np.mean(x[:, 0] ** 2)
    assert var == pytest.approx(rms ** 2, rel=0.02)
    lag = np.mean(x[:, 0] * x[:, 5])
    assert lag == pytest.approx(rms ** 2 * math.exp(-gamma * 5 * dt), rel=0.05)
    # stationary: later samples carry the same variance
    assert np.mean(x[:, 5] ** 2) == pytest.approx(rms ** 2, rel=0.02)


def test_lorentzian_pair_trajectory_statistics():
    rng = np.random.default_rng(2)
    A, w0, rms, K = 1.0, 2.0, 1.0, 20000
    fit = autocorr_from_psd(PSDModel.lorentzian(w0, A, rms))
    dt = 0.1 / A
    x = sample_trajectories(fit.terms, rms, 11, dt, rng, count=K)
    products = x[:, 0] * x[:, 10]
    expected = rms ** 2 * math.exp(-1.0) * math.cos(w0 / A)
    sigma = np.std(products) / math.sqrt(K)
    assert abs(products.mean() - expected) < 4 * sigma
    assert np.mean(x[:, 0] ** 2) == pytest.approx(rms ** 2, rel=0.05)


def test_negative_weight_is_rejected():
    with pytest.raises(ValueError):
        sample_trajectories(((1.5, -1.0), (-0.5, -2.0)), 1.0, 5, 0.1, np.random.default_rng(0))


def test_mc_without_noise_returns_noise_free_fidelity(qubit, random_pulse):
    pulse = random_pulse(2, 16, 1e-6, TWO_PI * 1e6, seed=5)
    noises = list(qubit.noises.values())
    mean, stderr = mc_noise_fidelity(qubit.model, pulse, noises, 50, np.random.default_rng(0), progress=False)
    assert mean == pytest.approx(total_fitness(qubit.model, pulse, FitnessConfig()).phi0, abs=1e-15)
    assert stderr == 0.0


def test_mc_fixed_static_noise_is_deterministic(qubit):
    pulse = original_x_pulse(qubit.params)
    noises = [qubit.noise("detuning").with_strength(TWO_PI * 5e4)]
    mean, stderr = mc_noise_fidelity(qubit.model, pulse, noises, 10, np.random.default_rng(0), progress=False)
    assert stderr == 0.0
    assert 0.0 < mean < 1.0


def test_mc_rejects_empty_ensemble(qubit):
    with pytest.raises(ValueError):
        mc_noise_fidelity(qubit.model, original_x_pulse(qubit.params), [], 0, np.random.default_rng(0))


def test_mc_threads_do_not_change_results(qubit):
    pulse = original_x_pulse(qubit.params)
    noises = [qubit.noise("dephasing").with_strength(TWO_PI * 3e4),
              qubit.noise("rabi").with_strength(0.02)]
    serial = mc_noise_fidelity(qubit.model, pulse, noises, 40, np.random.default_rng(11),
                               static_mode=StaticMode.GAUSSIAN, progress=False)
    threaded = mc_noise_fidelity(qubit.model, pulse, noises, 40, np.random.default_rng(11),
                                 static_mode=StaticMode.GAUSSIAN, threads=4, progress=False)
    assert serial == threaded
    assert serial[1] > 0


def test_sweep_center_equals_noise_free_fidelity(qubit):
    pulse = original_x_pulse(qubit.params)
    axis = SweepAxis.linspace(qubit.noise("detuning"), -TWO_PI * 1e5, TWO_PI * 1e5, 5)
    grid = quasi_static_sweep(qubit.model, pulse, [axis], progress=False)
    assert grid.fidelity.shape == (5,)
    assert grid.fidelity[2] == pytest.approx(1.0, abs=1e-12)
    assert np.all((grid.fidelity >= 0) & (grid.fidelity <= 1 + 1e-12))
    assert grid.fidelity[0] == pytest.approx(grid.fidelity[4], abs=1e-12)
    assert len(grid.rows()) == 5


def test_two_axis_sweep_and_robust_fraction(qubit):
    pulse = original_x_pulse(qubit.params)
    axes = [SweepAxis.linspace(qubit.noise("detuning"), -TWO_PI * 2e4, TWO_PI * 2e4, 3),
            SweepAxis.linspace(qubit.noise("rabi"), -0.01, 0.01, 3)]
    grid = quasi_static_sweep(qubit.model, pulse, axes, progress=False)
    assert grid.fidelity.shape == (3, 3)
    assert grid.rows()[4][:2] == (0.0, 0.0)
    assert robust_region_fraction(grid, 0.0) == 1.0
    assert robust_region_fraction(grid, 1.0 - 1e-12) == pytest.approx(1 / 9)


def test_sweep_rejects_time_dependent_axis(qubit):
    with pytest.raises(ValueError):
        SweepAxis(qubit.noise("dephasing"), [0.0, 1.0])
    with pytest.raises(ValueError):
        quasi_static_sweep(qubit.model, original_x_pulse(qubit.params), [], progress=False)


def test_free_evolution_filter_function_closed_form():
    p = QubitParams(T=1.0, M=50)
    system = build_qubit_x(p)
    pulse = PulseGrid(T=1.0, M=50, raw=np.zeros((2, 50)))
    omega = np.array([0.7, 3.1, 11.0, 40.0])
    table = filter_function(system.model, pulse, 0.5 * PAULI_Z, omega)
    dt = pulse.dt
    x = omega * dt / 2
    expected = np.sin(omega / 2) ** 2 * (x / np.sin(x)) ** 2
    assert np.allclose(table.values, expected, rtol=1e-10)
    assert np.allclose(table.over_omega_sq * omega ** 2, table.values)
    assert table.metadata["pauli_words"] == ["X", "Y", "Z"]


def test_identity_component_is_optional(qubit):
    pulse = original_x_pulse(qubit.params)
    omega = np.array([1e5, 1e6])
    without = filter_function(qubit.model, pulse, np.eye(2), omega)
    with_identity = filter_function(qubit.model, pulse, np.eye(2), omega, include_identity=True)
    assert np.allclose(without.values, 0.0, atol=1e-20)
    assert np.all(with_identity.values > 0)


def test_overlap_with_silent_noise_is_one(qubit):
    pulse = original_x_pulse(qubit.params)
    table = filter_function(qubit.model, pulse, qubit.noise("dephasing"), default_omega_grid())
    assert overlap_infidelity(qubit.psd_for("dephasing", 0.0), table) == 1.0
    zero = filter_function(qubit.model, pulse, np.zeros((2, 2)), default_omega_grid())
    assert not np.any(zero.values)
    assert overlap_infidelity(qubit.psd_for("dephasing", 1e4), zero) == 1.0


def test_coarse_grid_raises_quadrature_warning(qubit):
    pulse = original_x_pulse(qubit.params)
    omega = np.geomspace(1e3, 1e9, 7)
    table = filter_function(qubit.model, pulse, qubit.noise("dephasing"), omega)
    with pytest.warns(QuadratureWarning):
        overlap_infidelity(PSDModel.lorentzian(TWO_PI * 1e6, TWO_PI * 1e4, 1e4), table)


def test_default_grid_clips_to_band():
    grid = default_omega_grid(PSDModel.one_over_f(TWO_PI * 1e4, TWO_PI * 1e6, 1.0), points=50)
    assert grid[0] == pytest.approx(TWO_PI * 1e4)
    assert grid[-1] == pytest.approx(TWO_PI * 1e6)
    with pytest.raises(ValueError):
        default_omega_grid(omega_min=10.0, omega_max=1.0)


def test_filter_function_needs_one_or_two_qubits():
    qutrit = SystemModel(drift=np.diag([0.0, 1.0, 3.0]), channels=(), subspace_isometry=np.eye(3),
                         target=np.eye(3))
    with pytest.raises(ValueError, match="dim_q"):
        filter_function(qutrit, PulseGrid(T=1.0, M=2, raw=np.zeros((0, 2))), np.eye(3), [1.0])


def test_filter_function_rejects_mismatched_operator(qubit):
    with pytest.raises(ValueError, match="shape"):
        filter_function(qubit.model, original_x_pulse(qubit.params), np.eye(3), [1.0])


def test_mc_infidelity_is_second_order_in_rms(qubit):
    pulse = original_x_pulse(qubit.params)
    deficits = []
    for rms in (TWO_PI * 1e4, TWO_PI * 5e3):
        noise = qubit.noise("dephasing").with_strength(rms)
        mean, _ = mc_noise_fidelity(qubit.model, pulse, [noise], 2000, np.random.default_rng(4), progress=False)
        deficits.append(1.0 - mean)
    assert deficits[0] / deficits[1] == pytest.approx(4.0, rel=0.15)


def test_overlap_agrees_with_monte_carlo_for_weak_dephasing(qubit):
    pulse = original_x_pulse(qubit.params)
    rms = TWO_PI * 1e4
    noise = qubit.noise("dephasing").with_strength(rms)
    psd = qubit.psd_for("dephasing", rms)
    table = filter_function(qubit.model, pulse, noise, default_omega_grid(psd, points=800))
    predicted = 1.0 - overlap_infidelity(psd, table)
    mean, stderr = mc_noise_fidelity(qubit.model, pulse, [noise], 2000, np.random.default_rng(21), progress=False)
    measured = 1.0 - mean
    assert measured == pytest.approx(predicted, rel=0.2)
    assert stderr < 0.1 * measured
