import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import sici
from sklearn.linear_model import LinearRegression
from tqdm import tqdm

from control_model import (
    NoiseChannel,
    PulseGrid,
    SystemModel,
    hamiltonian_at,
    noise_operator_at,
    validate_expansion,
)
from dense_math import CMatrix, dagger, expm, pauli_basis
from robust_objective import local_z_phases, model_fidelity, project
from vanloan_propagation import perturbed_propagate, propagate

FIT_RESIDUAL_LIMIT = 0.05
QUADRATURE_LIMIT = 0.10
DEFAULT_OMEGA_RANGE = (2 * np.pi * 1e2, 2 * np.pi * 1e8)
DEFAULT_OMEGA_POINTS = 400

Expansion = Tuple[Tuple[complex, complex], ...]


class FitResidualWarning(UserWarning):
    """Exponential-sum fit of a correlation function is poor"""


class QuadratureWarning(UserWarning):
    """Frequency grid is too coarse for the overlap integral"""


class PSDKind(Enum):
    LORENTZIAN = "lorentzian"
    ONE_OVER_F = "one_over_f"
    EXP_SUM = "exp_sum"

    @staticmethod
    def from_name(name: str) -> 'PSDKind':
        key = str(name).strip().lower().replace("-", "_").replace("1/f", "one_over_f")
        for kind in PSDKind:
            if kind.value == key:
                return kind
        raise ValueError(f"Unknown PSD kind: {name}")


class StaticMode(Enum):
    """Static noise in ensembles: fixed offset at the strength, or Gaussian with that width"""
    FIXED = "fixed"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class PSDModel:
    kind: PSDKind
    rms: float
    center: float = 0.0
    width: float = 0.0
    omega_low: float = 0.0
    omega_high: float = 0.0
    terms: Expansion = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", PSDKind(self.kind))
        if self.rms < 0:
            raise ValueError(f"rms must be >= 0, got {self.rms}")
        if self.kind is PSDKind.LORENTZIAN and not self.width > 0:
            raise ValueError(f"Lorentzian width must be positive, got {self.width}")
        if self.kind is PSDKind.ONE_OVER_F and not 0 < self.omega_low < self.omega_high:
            raise ValueError(f"1/f band needs 0 < omega_low < omega_high, got "
                             f"[{self.omega_low}, {self.omega_high}]")
        if self.kind is PSDKind.EXP_SUM:
            object.__setattr__(self, "terms", validate_expansion(self.terms))

    @classmethod
    def lorentzian(cls, center: float, width: float, rms: float) -> 'PSDModel':
        return cls(PSDKind.LORENTZIAN, rms, center=center, width=width)

    @classmethod
    def one_over_f(cls, omega_low: float, omega_high: float, rms: float) -> 'PSDModel':
        return cls(PSDKind.ONE_OVER_F, rms, omega_low=omega_low, omega_high=omega_high)

    @classmethod
    def exp_sum(cls, terms: Sequence[Tuple[complex, complex]], rms: float) -> 'PSDModel':
        return cls(PSDKind.EXP_SUM, rms, terms=tuple(terms))

    def with_rms(self, rms: float) -> 'PSDModel':
        return PSDModel(self.kind, rms, self.center, self.width, self.omega_low, self.omega_high, self.terms)

    def to_dict(self) -> Dict:
        data = {"kind": self.kind.value, "rms": self.rms}
        if self.kind is PSDKind.LORENTZIAN:
            data.update(center=self.center, width=self.width)
        elif self.kind is PSDKind.ONE_OVER_F:
            data.update(omega_low=self.omega_low, omega_high=self.omega_high)
        else:
            data["terms"] = [[a.real, a.imag, b.real, b.imag] for a, b in self.terms]
        return data


@dataclass(frozen=True)
class AutocorrelationFit:
    """Exponential expansion of a normalized correlation function"""
    terms: Expansion
    residual: float = 0.0
    warning: Optional[str] = None

    def __iter__(self):
        return iter(self.terms)

    def __len__(self) -> int:
        return len(self.terms)

    def __getitem__(self, index):
        return self.terms[index]


def _one_over_f_correlation(tau: np.ndarray, omega_low: float, omega_high: float) -> np.ndarray:
    """Normalized correlation of a band-limited 1/f spectrum"""
    tau = np.asarray(tau, dtype=float)
    out = np.ones_like(tau)
    pos = tau > 0
    ci_high = sici(omega_high * tau[pos])[1]
    ci_low = sici(omega_low * tau[pos])[1]
    out[pos] = (ci_high - ci_low) / math.log(omega_high / omega_low)
    return out


def _fit_one_over_f(psd: PSDModel) -> AutocorrelationFit:
    low, high = psd.omega_low, psd.omega_high
    n_rates = max(1, int(math.ceil(2 * math.log10(high / low)))) + 1
    rates = np.geomspace(low, high, n_rates)
    omega = np.geomspace(low, high, 20 * n_rates)
    # relative error of the Lorentzian sum against 1/omega, so every decade weighs the same
    basis = 2 * rates[None, :] / (rates[None, :] ** 2 + omega[:, None] ** 2) * omega[:, None]
    reg = LinearRegression(positive=True, fit_intercept=False)
    reg.fit(basis, np.ones_like(omega))
    weights = np.asarray(reg.coef_, dtype=float)
    if not weights.sum() > 0:
        raise ValueError("1/f fit produced no positive weights")
    weights = weights / weights.sum()
    terms = tuple((complex(a), complex(-g)) for a, g in zip(weights, rates) if a > 0)

    tau = np.concatenate([[0.0], np.geomspace(0.01 / high, 10.0 / low, 400)])
    fitted = sum(a.real * np.exp(b.real * tau) for a, b in terms)
    residual = float(np.max(np.abs(fitted - _one_over_f_correlation(tau, low, high))))
    message = None
    if residual > FIT_RESIDUAL_LIMIT:
        message = f"1/f exponential fit residual {residual:.3f} exceeds {FIT_RESIDUAL_LIMIT:.0%} of zero lag"
        warnings.warn(message, FitResidualWarning)
    return AutocorrelationFit(terms, residual, message)


def autocorr_from_psd(psd: PSDModel) -> AutocorrelationFit:
    """
    Exponential expansion Σ a_i e^{b_i τ} of the normalized autocorrelation.

    Lorentzians map exactly onto a conjugate pair (a single real term when
    centered at zero); 1/f bands use a non-negative fit with one real rate
    per half decade.
    """
    if psd.kind is PSDKind.LORENTZIAN:
        if psd.center == 0:
            return AutocorrelationFit(((1.0 + 0j, complex(-psd.width)),))
        return AutocorrelationFit((
            (0.5 + 0j, complex(-psd.width, psd.center)),
            (0.5 + 0j, complex(-psd.width, -psd.center)),
        ))
    if psd.kind is PSDKind.ONE_OVER_F:
        return _fit_one_over_f(psd)
    return AutocorrelationFit(psd.terms)


def psd_value(psd: PSDModel, omega) -> np.ndarray:
    """Two-sided S(ω) with (1/2π)∫S dω = rms²"""
    omega = np.asarray(omega, dtype=float)
    if psd.kind is PSDKind.ONE_OVER_F:
        level = math.pi * psd.rms ** 2 / math.log(psd.omega_high / psd.omega_low)
        w = np.abs(omega)
        inside = (w >= psd.omega_low) & (w <= psd.omega_high)
        return np.where(inside, level / np.where(inside, w, 1.0), 0.0)
    terms = autocorr_from_psd(psd).terms
    total = np.zeros(omega.shape, dtype=complex)
    for a, b in terms:
        total = total - a * (1.0 / (b - 1j * omega) + 1.0 / (b + 1j * omega))
    return psd.rms ** 2 * total.real


def _groups(expansion: Sequence[Tuple[complex, complex]]) -> List[Tuple[str, complex, complex]]:
    groups = []
    for a, b in validate_expansion(expansion):
        if abs(b.imag) <= 1e-9 * max(1.0, abs(b)):
            if a.real < 0:
                raise ValueError(f"negative spectral weight {a.real} for rate {b.real}")
            groups.append(("real", complex(a.real), complex(b.real)))
        elif b.imag > 0:
            groups.append(("pair", a, b))
    return groups


def _pair_realization(a: complex, b: complex, dt: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Two-state recursion x' = Φx + w whose first component has
    correlation 2 Re(a e^{bτ}) at lags kΔt.

    Returns:
        (Φ, factor of stationary covariance, factor of step noise covariance)
    """
    gamma, nu = -b.real, b.imag
    alpha, beta = a.real, a.imag
    A = np.array([[-gamma, -nu], [nu, -gamma]])
    P0 = np.array([[2 * alpha, 2 * beta], [2 * beta, 0.0]])
    D0 = -(A @ P0 + P0 @ A.T)
    d11 = D0[0, 0]
    x = (gamma * d11 / nu - D0[0, 1]) / nu
    P = P0 + np.array([[0.0, 0.0], [0.0, x]])
    D = -(A @ P + P @ A.T)
    tol = 1e-10 * max(1.0, float(np.max(np.abs(D))))
    if np.min(np.linalg.eigvalsh(D)) < -tol or np.min(np.linalg.eigvalsh(P)) < -1e-12:
        raise ValueError(f"autocorrelation pair ({a}, {b}) has negative spectral weight")
    theta = nu * dt
    Phi = math.exp(-gamma * dt) * np.array([[math.cos(theta), -math.sin(theta)],
                                            [math.sin(theta), math.cos(theta)]])
    Q = P - Phi @ P @ Phi.T
    return Phi, _psd_factor(P), _psd_factor(0.5 * (Q + Q.T))


def _psd_factor(C: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(C)
    return V * np.sqrt(np.clip(w, 0.0, None))


def sample_trajectories(expansion, rms: float, M: int, dt: float,
                        rng: np.random.Generator, count: int = 1) -> np.ndarray:
    """
    Stationary Gaussian sequences at segment spacing dt with
    correlation rms² Σ a_i e^{b_i τ}.

    Returns:
        Array of shape (count, M)
    """
    out = np.zeros((count, M))
    groups = _groups(tuple(expansion))
    if rms == 0:
        return out
    for kind, a, b in groups:
        if kind == "real":
            decay = math.exp(b.real * dt)
            var = a.real
            x = rng.standard_normal(count) * math.sqrt(var)
            step = math.sqrt(max(var * (1.0 - decay ** 2), 0.0))
            for m in range(M):
                out[:, m] += x
                x = decay * x + step * rng.standard_normal(count)
        else:
            Phi, L0, Lq = _pair_realization(a, b, dt)
            x = rng.standard_normal((count, 2)) @ L0.T
            for m in range(M):
                out[:, m] += x[:, 0]
                x = x @ Phi.T + rng.standard_normal((count, 2)) @ Lq.T
    return rms * out


def sample_trajectory(expansion, rms: float, M: int, dt: float, rng: np.random.Generator) -> np.ndarray:
    return sample_trajectories(expansion, rms, M, dt, rng, 1)[0]


def _noise_free_phases(model: SystemModel, pulse: PulseGrid) -> Optional[Tuple[float, float]]:
    if not model.local_z:
        return None
    return local_z_phases(project(propagate(model, pulse).total, model), model.target)


def _stable_mean(values: np.ndarray) -> Tuple[float, float]:
    K = len(values)
    if np.all(values == values[0]):
        return float(values[0]), 0.0
    mean = math.fsum(values) / K
    if K == 1:
        return mean, 0.0
    var = math.fsum((values - mean) ** 2) / (K - 1)
    return mean, math.sqrt(var / K)


def mc_noise_fidelity(model: SystemModel, pulse: PulseGrid, noises: Sequence[NoiseChannel], K: int,
                      rng: np.random.Generator, static_mode: StaticMode = StaticMode.FIXED,
                      threads: int = 1, progress: bool = True) -> Tuple[float, float]:
    """
    Ensemble-averaged gate fidelity under sampled noise.

    Args:
        noises: Channels with their strengths; static ones use static_mode
        K: Number of realizations
        rng: Master generator; each realization gets its own spawned stream
        threads: Worker threads for realizations

    Returns:
        (mean fidelity, standard error)
    """
    if K < 1:
        raise ValueError(f"number of realizations must be >= 1, got {K}")
    static_mode = StaticMode(static_mode)
    phases = _noise_free_phases(model, pulse)
    active = [n for n in noises if n.strength > 0]
    randomized = any(not n.is_static for n in active) or (
        static_mode is StaticMode.GAUSSIAN and active)
    seeds = np.random.SeedSequence(int(rng.integers(2 ** 63))).spawn(K)

    def realization(seed) -> float:
        child = np.random.default_rng(seed)
        offsets = {}
        for noise in active:
            if noise.is_static:
                value = noise.strength if static_mode is StaticMode.FIXED else child.normal(0.0, noise.strength)
                offsets[noise] = value
            else:
                offsets[noise] = sample_trajectory(noise.autocorrelation, noise.strength,
                                                   pulse.M, pulse.dt, child)
        return model_fidelity(perturbed_propagate(model, pulse, offsets), model, phases)

    if not randomized:
        value = realization(seeds[0])
        return value, 0.0

    values = np.empty(K)
    with tqdm(total=K, desc="Noise realizations", disable=not progress) as pbar:
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                for k, value in enumerate(pool.map(realization, seeds)):
                    values[k] = value
                    pbar.update(1)
        else:
            for k, seed in enumerate(seeds):
                values[k] = realization(seed)
                pbar.update(1)
        pbar.set_postfix({"mean": f"{values.mean():.6f}"})
    return _stable_mean(values)


@dataclass(frozen=True, eq=False)
class SweepAxis:
    noise: NoiseChannel
    values: np.ndarray

    def __post_init__(self):
        if not self.noise.is_static:
            raise ValueError(f"sweep axis {self.noise.name} must be a static noise")
        values = np.array(self.values, dtype=float).ravel()
        if values.size == 0:
            raise ValueError(f"sweep axis {self.noise.name} has no values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def linspace(cls, noise: NoiseChannel, start: float, stop: float, count: int) -> 'SweepAxis':
        return cls(noise, np.linspace(start, stop, int(count)))


@dataclass
class SweepGrid:
    axes: Tuple[SweepAxis, ...]
    fidelity: np.ndarray

    def rows(self) -> List[Tuple[float, ...]]:
        """Row-major (axis values..., fidelity) tuples"""
        rows = []
        for index in np.ndindex(*self.fidelity.shape):
            coords = tuple(float(ax.values[i]) for ax, i in zip(self.axes, index))
            rows.append(coords + (float(self.fidelity[index]),))
        return rows


def quasi_static_sweep(model: SystemModel, pulse: PulseGrid, noise_axes: Sequence[SweepAxis],
                       progress: bool = True) -> SweepGrid:
    """Deterministic fidelity grid over fixed offsets of one or two static noises"""
    axes = tuple(noise_axes)
    if not 1 <= len(axes) <= 2:
        raise ValueError(f"sweeps take one or two axes, got {len(axes)}")
    for ax in axes:
        if not ax.noise.is_static:
            raise ValueError(f"sweep axis {ax.noise.name} must be a static noise")
    phases = _noise_free_phases(model, pulse)
    shape = tuple(len(ax.values) for ax in axes)
    grid = np.empty(shape)
    with tqdm(total=int(np.prod(shape)), desc="Sweep", disable=not progress) as pbar:
        for index in np.ndindex(*shape):
            offsets = {}
            for ax, i in zip(axes, index):
                offsets[ax.noise] = offsets.get(ax.noise, 0.0) + ax.values[i]
            grid[index] = model_fidelity(perturbed_propagate(model, pulse, offsets), model, phases)
            pbar.update(1)
    return SweepGrid(axes, grid)


def robust_region_fraction(grid: SweepGrid, threshold: float) -> float:
    """Share of sweep points with fidelity >= threshold"""
    return float(np.mean(grid.fidelity >= threshold))


@dataclass
class FilterFunctionTable:
    omega_grid: np.ndarray
    values: np.ndarray
    over_omega_sq: np.ndarray
    metadata: Dict = field(default_factory=dict)

    def rows(self, psd: Optional[PSDModel] = None) -> List[Tuple[float, float, float, float]]:
        """(ω, F, S, S·F/ω²) per grid point; S is zero without a PSD"""
        S = psd_value(psd, self.omega_grid) if psd is not None else np.zeros_like(self.omega_grid)
        return [(float(w), float(f), float(s), float(s * g))
                for w, f, s, g in zip(self.omega_grid, self.values, S, self.over_omega_sq)]


def default_omega_grid(psd: Optional[PSDModel] = None, points: int = DEFAULT_OMEGA_POINTS,
                       omega_min: float = DEFAULT_OMEGA_RANGE[0],
                       omega_max: float = DEFAULT_OMEGA_RANGE[1]) -> np.ndarray:
    """Log-spaced grid, clipped to a band-limited PSD's support"""
    if psd is not None and psd.kind is PSDKind.ONE_OVER_F:
        omega_min = max(omega_min, psd.omega_low)
        omega_max = min(omega_max, psd.omega_high)
    if not 0 < omega_min < omega_max:
        raise ValueError(f"empty frequency range [{omega_min}, {omega_max}]")
    return np.geomspace(omega_min, omega_max, int(points))


def filter_function(model: SystemModel, pulse: PulseGrid, noise_operator: Union[CMatrix, NoiseChannel],
                    omega_grid, include_identity: bool = False) -> FilterFunctionTable:
    """
    Control filter function F(ω) = Σ_k |R_k(ω)|² from toggling-frame Pauli components.

    Args:
        noise_operator: Full-space operator, or a noise channel (control-proportional allowed)
        omega_grid: Angular frequencies (rad/s)
        include_identity: Keep the identity Pauli word, which only adds a global phase
    """
    d = model.dim_q
    if d not in (2, 4):
        raise ValueError(f"filter functions need dim_q of 2 or 4, got {d}")
    omega = np.asarray(omega_grid, dtype=float)
    words = pauli_basis(1 if d == 2 else 2)
    if not include_identity:
        words = words[1:]
    P = np.array([mat for _, mat in words])
    S = model.subspace_isometry

    if isinstance(noise_operator, NoiseChannel):
        def operator_at(m):
            return noise_operator_at(model, pulse, m, noise_operator)
        name = noise_operator.name
    else:
        fixed = np.asarray(noise_operator, dtype=complex)
        if fixed.shape != model.drift.shape:
            raise ValueError(f"noise operator shape {fixed.shape} does not match {model.drift.shape}")

        def operator_at(m):
            return fixed
        name = "operator"

    X = np.empty((len(words), pulse.M))
    U = np.eye(model.dim_full, dtype=complex)
    for m in range(pulse.M):
        H = hamiltonian_at(model, pulse, m)
        U_mid = expm(-0.5j * pulse.dt * H) @ U
        E_q = dagger(S) @ dagger(U_mid) @ operator_at(m) @ U_mid @ S
        X[:, m] = np.real(np.einsum("ij,kji->k", E_q, P)) / d
        U = expm(-1j * pulse.dt * H) @ U

    t = (np.arange(pulse.M) + 0.5) * pulse.dt
    integral = pulse.dt * (X @ np.exp(1j * np.outer(t, omega)))
    over_sq = np.sum(np.abs(integral) ** 2, axis=0)
    values = omega ** 2 * over_sq
    metadata = {"noise": name, "T": pulse.T, "M": pulse.M, "pauli_words": [w for w, _ in words]}
    return FilterFunctionTable(omega, values, over_sq, metadata)


def overlap_infidelity(psd: PSDModel, ff: FilterFunctionTable) -> float:
    """
    Fidelity estimate 1 - (1/2π)∫ S(ω) F(ω)/ω² dω over the real line,
    folded onto the positive grid of the table.
    """
    omega = ff.omega_grid
    S = psd_value(psd, omega) + psd_value(psd, -omega)
    integrand = S * ff.over_omega_sq
    if not np.any(integrand):
        return 1.0
    integral = trapezoid(integrand, omega) / (2 * np.pi)
    if len(omega) >= 5:
        coarse = trapezoid(integrand[::2], omega[::2]) / (2 * np.pi)
        if abs(coarse - integral) > QUADRATURE_LIMIT * abs(integral):
            warnings.warn(f"overlap quadrature changes by {abs(coarse - integral) / abs(integral):.1%} "
                          f"on a grid of half the density", QuadratureWarning)
    return 1.0 - float(integral)
