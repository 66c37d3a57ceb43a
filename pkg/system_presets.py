import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import erf
from tqdm import tqdm

from control_model import (
    CarrierSample,
    ControlChannel,
    ControlProportional,
    FixedOperator,
    NoiseChannel,
    NoiseKind,
    PulseGrid,
    SystemModel,
)
from dense_math import (
    PAULI_X,
    PAULI_Y,
    PAULI_Z,
    basis_isometry,
    embed_operator,
    expm,
    kron,
    ladder_ops,
)
from noise_analysis import AutocorrelationFit, PSDModel, autocorr_from_psd
from robust_objective import fidelity_with_local_z, gate_fidelity
from vanloan_propagation import propagate

TWO_PI = 2 * np.pi
LAMB_DICKE_LIMIT = 0.2
CZ_TARGET = np.diag([1, 1, 1, -1]).astype(complex)


def _params_from_dict(cls, data: Dict):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"Unknown {cls.__name__} field(s): {', '.join(unknown)}")
    return cls(**data)


@dataclass
class IonMsParams:
    """Two ions sharing two motional modes, driven near the red/blue sidebands of mode 1"""
    nu1: float = TWO_PI * 2e6
    nu2: float = TWO_PI * 2 * math.sqrt(2) * 1e6
    eta: float = 0.1
    detuning_ratio: float = 0.983
    n_phonon: Tuple[int, int] = (6, 3)
    rabi: float = TWO_PI * 0.1275e6
    T: Optional[float] = None
    M: Optional[int] = None
    samples_per_period: int = 20
    detuning_center: float = TWO_PI * 2e4
    detuning_width: float = TWO_PI * 2e4

    def __post_init__(self):
        self.n_phonon = tuple(int(n) for n in self.n_phonon)
        if len(self.n_phonon) != 2 or min(self.n_phonon) < 2:
            raise ValueError(f"phonon truncation must be two levels >= 2, got {self.n_phonon}")
        if not 0 < self.eta < 0.3:
            raise ValueError(f"Lamb-Dicke parameter must lie in (0, 0.3), got {self.eta}")
        if self.samples_per_period < 2:
            raise ValueError(f"samples_per_period must be >= 2, got {self.samples_per_period}")

    @property
    def omega(self) -> float:
        """Laser detuning from the qubit frequency"""
        return self.detuning_ratio * self.nu1

    @property
    def delta(self) -> float:
        return self.nu1 - self.omega

    def ms_time(self, rabi: Optional[float] = None) -> float:
        """T_MS = πδ / (2η²Ω²)"""
        rabi = self.rabi if rabi is None else rabi
        if self.delta <= 0:
            raise ValueError(f"sideband detuning must be positive, got {self.delta}")
        if rabi <= 0:
            raise ValueError(f"Rabi frequency must be positive, got {rabi}")
        return math.pi * self.delta / (2 * self.eta ** 2 * rabi ** 2)

    def segments_for(self, duration: float) -> int:
        return max(1, int(math.ceil(duration * self.omega / TWO_PI * self.samples_per_period)))

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["n_phonon"] = list(self.n_phonon)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'IonMsParams':
        return _params_from_dict(cls, data)


@dataclass
class TransmonCzParams:
    """Two capacitively coupled transmons, qubit 1 frequency-tuned"""
    omega1: float = TWO_PI * 7.5e9
    omega2: float = TWO_PI * 6.5e9
    alpha1: float = -TWO_PI * 300e6
    alpha2: float = -TWO_PI * 300e6
    J: float = TWO_PI * 25e6
    levels: int = 4
    T: float = 22e-9
    M: int = 220
    u_on: Optional[float] = None
    rise_center: float = 62.5e-9
    rise_width: float = 11.1e-9
    original_T: Optional[float] = None
    flux_noise_low: float = TWO_PI * 1e4
    flux_noise_high: float = TWO_PI * 1e8

    def __post_init__(self):
        if int(self.levels) != self.levels or self.levels < 3:
            raise ValueError(f"transmon truncation must be >= 3 levels, got {self.levels}")
        if self.alpha1 >= 0 or self.alpha2 >= 0:
            raise ValueError("transmon anharmonicities must be negative")
        if self.u_on is None:
            self.u_on = self.omega2 - self.omega1 - self.alpha2

    @property
    def dt(self) -> float:
        return self.T / self.M

    def duration_guess(self) -> float:
        """Ramp centres plus one full |11> <-> |20> exchange"""
        return 2 * self.rise_center + math.pi / (math.sqrt(2) * self.J)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'TransmonCzParams':
        return _params_from_dict(cls, data)


@dataclass
class QubitParams:
    """Resonantly driven single qubit with detuning and amplitude errors"""
    T: float = 1e-6
    M: int = 40
    omega_max: float = TWO_PI * 1e6
    dephasing_rate: float = TWO_PI * 1e5

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'QubitParams':
        return _params_from_dict(cls, data)


@dataclass(frozen=True, eq=False)
class PresetSystem:
    name: str
    model: SystemModel
    noises: Dict[str, NoiseChannel]
    params: object
    psds: Dict[str, PSDModel] = field(default_factory=dict)
    pulse_defaults: Dict = field(default_factory=dict)
    fits: Dict[str, AutocorrelationFit] = field(default_factory=dict)

    def noise(self, name: str) -> NoiseChannel:
        if name not in self.noises:
            raise ValueError(f"Unknown noise '{name}' for preset {self.name}; "
                             f"available: {', '.join(self.noises)}")
        return self.noises[name]

    def with_strengths(self, strengths: Dict[str, float]) -> Dict[str, NoiseChannel]:
        """Noise channels with the given strengths, others at zero"""
        return {name: n.with_strength(strengths.get(name, 0.0)) for name, n in self.noises.items()}

    def psd_for(self, name: str, rms: float) -> PSDModel:
        if name not in self.psds:
            raise ValueError(f"noise '{name}' of preset {self.name} has no spectrum")
        return self.psds[name].with_rms(rms)

    def fit_diagnostics(self) -> Dict[str, Dict]:
        """Residual and warning of each correlation expansion, by noise name"""
        return {name: {"fit_residual": fit.residual, "fit_warning": fit.warning}
                for name, fit in sorted(self.fits.items())}

    def fit_warnings(self) -> Dict[str, str]:
        return {name: fit.warning for name, fit in sorted(self.fits.items()) if fit.warning}


def _ms_target() -> np.ndarray:
    return expm(1j * np.pi / 4 * kron(PAULI_Y, PAULI_Y))


def build_ion_ms(p: Optional[IonMsParams] = None) -> PresetSystem:
    """
    Mølmer–Sørensen gate model: qubits ⊗ mode 1 ⊗ mode 2.

    One control channel per ion, cos(ωt)[σ_x^k + η Σ_j (a_j + a_j†) σ_y^k],
    with the motional modes projected onto their ground state.
    """
    p = p or IonMsParams()
    n1, n2 = p.n_phonon
    dims = [2, 2, n1, n2]
    a1, _ = ladder_ops(n1)
    a2, _ = ladder_ops(n2)
    A1 = embed_operator(a1, 2, dims)
    A2 = embed_operator(a2, 3, dims)
    n_op1 = A1.conj().T @ A1
    drift = p.nu1 * n_op1 + p.nu2 * (A2.conj().T @ A2)
    motion = (A1 + A1.conj().T) + (A2 + A2.conj().T)

    channels = []
    for k in range(2):
        sx = embed_operator(PAULI_X, k, dims)
        sy = embed_operator(PAULI_Y, k, dims)
        channels.append(ControlChannel(sx + p.eta * motion @ sy, carrier=p.omega, name=f"ion{k + 1}"))

    model = SystemModel(
        drift=drift,
        channels=tuple(channels),
        subspace_isometry=basis_isometry(dims, [2, 2]),
        target=_ms_target(),
        carrier_sample=CarrierSample.MIDPOINT,
        name="ion_ms",
    )
    psd = PSDModel.lorentzian(p.detuning_center, p.detuning_width, rms=0.0)
    fit = autocorr_from_psd(psd)
    sz = 0.5 * (embed_operator(PAULI_Z, 0, dims) + embed_operator(PAULI_Z, 1, dims))
    noises = {
        "rabi": NoiseChannel("rabi", NoiseKind.STATIC, ControlProportional()),
        "motional": NoiseChannel("motional", NoiseKind.STATIC, FixedOperator(n_op1)),
        "detuning": NoiseChannel("detuning", NoiseKind.TIME_DEPENDENT, FixedOperator(sz),
                                 autocorrelation=fit.terms),
    }
    T = p.T if p.T is not None else p.ms_time()
    M = p.M if p.M is not None else p.segments_for(T)
    defaults = {"T": T, "M": M, "omega_max": 2 * p.rabi}
    return PresetSystem("ion_ms", model, noises, p, {"detuning": psd}, defaults,
                        fits={"detuning": fit})


def original_ms_pulse(p: Optional[IonMsParams] = None, M: Optional[int] = None) -> PulseGrid:
    """Constant drive u₁ = u₂ = Ω for T_MS"""
    p = p or IonMsParams()
    if p.delta <= 0:
        raise ValueError(f"sideband detuning must be positive, got {p.delta}")
    T = p.ms_time()
    M = M if M is not None else p.segments_for(T)
    return PulseGrid.from_amplitudes(T, np.full((2, M), p.rabi))


def ms_effective_check(p: IonMsParams, rabi: float, duration: Optional[float] = None,
                       conjugate: bool = False) -> float:
    """
    Fidelity between the simulated gate and exp(i η²Ω²t/(2δ) σ_yσ_y).

    Args:
        p: Ion parameters (truncation and sampling are taken from here)
        rabi: Constant drive amplitude Ω
        duration: Evolution time, default T_MS(Ω)/10 where the motion disentangles
        conjugate: Compare against the opposite-sign effective Hamiltonian instead

    Returns:
        Projected gate fidelity
    """
    if rabi < 0:
        raise ValueError(f"Rabi frequency must be >= 0, got {rabi}")
    ratio = p.eta * rabi / p.delta
    if ratio >= LAMB_DICKE_LIMIT:
        raise ValueError(f"eta*Omega/delta = {ratio:.3f} is outside the perturbative regime (< {LAMB_DICKE_LIMIT})")
    if duration is None:
        duration = p.ms_time(rabi) / 10
    if not duration > 0:
        raise ValueError(f"duration must be positive, got {duration}")
    system = build_ion_ms(p)
    M = p.segments_for(duration)
    pulse = PulseGrid.from_amplitudes(duration, np.full((2, M), rabi))
    theta = p.eta ** 2 * rabi ** 2 * duration / (2 * p.delta)
    if conjugate:
        theta = -theta
    target = expm(1j * theta * kron(PAULI_Y, PAULI_Y))
    return gate_fidelity(propagate(system.model, pulse).total, system.model, target)


def build_transmon_cz(p: Optional[TransmonCzParams] = None) -> PresetSystem:
    """
    CZ gate model for two transmons tuned through the |11> - |20> crossing.

    The only control shifts the frequency of transmon 1; fidelity is taken
    after single-qubit Z compensation.
    """
    p = p or TransmonCzParams()
    dims = [p.levels, p.levels]
    a, _ = ladder_ops(p.levels)
    A1 = embed_operator(a, 0, dims)
    A2 = embed_operator(a, 1, dims)
    A1d, A2d = A1.conj().T, A2.conj().T
    n1 = A1d @ A1
    kerr1 = 0.5 * A1d @ A1d @ A1 @ A1
    kerr2 = 0.5 * A2d @ A2d @ A2 @ A2
    exchange = (A1 - A1d) @ (A2 - A2d)
    drift = (p.omega1 * n1 + p.omega2 * (A2d @ A2)
             + p.alpha1 * kerr1 + p.alpha2 * kerr2 - p.J * exchange)

    model = SystemModel(
        drift=drift,
        channels=(ControlChannel(n1, name="flux1"),),
        subspace_isometry=basis_isometry(dims, [2, 2]),
        target=CZ_TARGET,
        carrier_sample=CarrierSample.MIDPOINT,
        local_z=True,
        name="transmon_cz",
    )
    psd = PSDModel.one_over_f(p.flux_noise_low, p.flux_noise_high, rms=0.0)
    fit = autocorr_from_psd(psd)
    noises = {
        "coupling": NoiseChannel("coupling", NoiseKind.STATIC, FixedOperator(exchange)),
        "anharmonicity": NoiseChannel("anharmonicity", NoiseKind.STATIC, FixedOperator(kerr1)),
        "qubit_frequency": NoiseChannel("qubit_frequency", NoiseKind.TIME_DEPENDENT, FixedOperator(n1),
                                        autocorrelation=fit.terms),
    }
    defaults = {"T": p.T, "M": p.M, "omega_max": abs(p.u_on) * 1.5}
    return PresetSystem("transmon_cz", model, noises, p, {"qubit_frequency": psd}, defaults,
                        fits={"qubit_frequency": fit})


def trapezoid_pulse(p: TransmonCzParams, T: Optional[float] = None, M: Optional[int] = None) -> PulseGrid:
    """
    u(t) = (u_on/2)[erf((t−t′)/σ) − erf((t+t′−T)/σ)] at segment midpoints.

    Without T the trapezoid uses its own duration (original_T, else the
    ramp-plus-exchange guess), not the optimization grid p.T; M then
    follows the time step p.dt.
    """
    if T is None:
        T = p.original_T if p.original_T is not None else p.duration_guess()
        M = max(1, int(round(T / p.dt))) if M is None else M
    M = p.M if M is None else M
    if not p.rise_width > 0:
        raise ValueError(f"rise width must be positive, got {p.rise_width}")
    if not 0 < p.rise_center < T:
        raise ValueError(f"rise centre {p.rise_center} must lie inside (0, {T})")
    t = (np.arange(M) + 0.5) * (T / M)
    u = 0.5 * p.u_on * (erf((t - p.rise_center) / p.rise_width)
                        - erf((t + p.rise_center - T) / p.rise_width))
    return PulseGrid.from_amplitudes(T, u[None, :])


def calibrate_trapezoid_duration(p: TransmonCzParams, span: float = 0.2, scan_points: int = 41,
                                 progress: bool = True) -> float:
    """
    Duration of the trapezoid that maximizes the compensated CZ fidelity.

    Scans [guess(1−span), guess(1+span)] at the ROC time step and polishes
    the best scan point with a bounded scalar search.
    """
    system = build_transmon_cz(p)
    guess = p.duration_guess()
    M = max(1, int(round(guess / p.dt)))
    lo, hi = guess * (1 - span), guess * (1 + span)

    def fidelity(T: float) -> float:
        pulse = trapezoid_pulse(p, T=T, M=M)
        return fidelity_with_local_z(propagate(system.model, pulse).total, system.model)

    grid = np.unique(np.append(np.linspace(lo, hi, scan_points), guess))
    values = []
    for T in tqdm(grid, desc="Calibrating trapezoid", disable=not progress):
        values.append(fidelity(T))
    best = int(np.argmax(values))
    left = grid[max(best - 1, 0)]
    right = grid[min(best + 1, len(grid) - 1)]
    best_T, best_value = float(grid[best]), values[best]
    if right > left:
        res = minimize_scalar(lambda T: -fidelity(T), bounds=(left, right), method="bounded",
                              options={"xatol": 1e-13})
        if -res.fun > best_value:
            best_T = float(res.x)
    return best_T


def original_cz_pulse(p: Optional[TransmonCzParams] = None, progress: bool = False) -> PulseGrid:
    """Trapezoid on its own calibrated duration, sampled at the ROC time step"""
    p = p or TransmonCzParams()
    T = p.original_T if p.original_T is not None else calibrate_trapezoid_duration(p, progress=progress)
    return trapezoid_pulse(p, T=T, M=max(1, int(round(T / p.dt))))


def build_qubit_x(p: Optional[QubitParams] = None) -> PresetSystem:
    """Single qubit X gate with σ_x/2 and σ_y/2 controls"""
    p = p or QubitParams()
    sz = 0.5 * PAULI_Z
    model = SystemModel(
        drift=np.zeros((2, 2), dtype=complex),
        channels=(ControlChannel(0.5 * PAULI_X, name="x"), ControlChannel(0.5 * PAULI_Y, name="y")),
        subspace_isometry=np.eye(2, dtype=complex),
        target=PAULI_X,
        name="qubit_x",
    )
    psd = PSDModel.lorentzian(0.0, p.dephasing_rate, rms=0.0)
    fit = autocorr_from_psd(psd)
    noises = {
        "detuning": NoiseChannel("detuning", NoiseKind.STATIC, FixedOperator(sz)),
        "rabi": NoiseChannel("rabi", NoiseKind.STATIC, ControlProportional()),
        "dephasing": NoiseChannel("dephasing", NoiseKind.TIME_DEPENDENT, FixedOperator(sz),
                                  autocorrelation=fit.terms),
    }
    defaults = {"T": p.T, "M": p.M, "omega_max": p.omega_max}
    return PresetSystem("qubit_x", model, noises, p, {"dephasing": psd}, defaults,
                        fits={"dephasing": fit})


def original_x_pulse(p: Optional[QubitParams] = None) -> PulseGrid:
    """Square π pulse on the σ_x/2 channel"""
    p = p or QubitParams()
    amps = np.zeros((2, p.M))
    amps[0] = np.pi / p.T
    return PulseGrid.from_amplitudes(p.T, amps, omega_max=p.omega_max)


PRESETS: Dict[str, Dict[str, Callable]] = {
    "ion_ms": {"params": IonMsParams, "build": build_ion_ms, "original": original_ms_pulse},
    "transmon_cz": {"params": TransmonCzParams, "build": build_transmon_cz, "original": original_cz_pulse},
    "qubit_x": {"params": QubitParams, "build": build_qubit_x, "original": original_x_pulse},
}


def load_preset(name: str, overrides: Optional[Dict] = None) -> PresetSystem:
    if name not in PRESETS:
        raise ValueError(f"Unknown preset '{name}'; available: {', '.join(PRESETS)}")
    entry = PRESETS[name]
    params = entry["params"].from_dict(dict(overrides or {}))
    return entry["build"](params)


def original_pulse(system: PresetSystem) -> PulseGrid:
    """Baseline pulse of a preset built from its own parameters"""
    return PRESETS[system.name]["original"](system.params)
