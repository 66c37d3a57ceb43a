from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter1d

from dense_math import CMatrix, as_square, is_hermitian, is_unitary

EXPANSION_TOL = 1e-9
SMOOTHING_TRUNCATE = 4.0


class NoiseKind(Enum):
    STATIC = "static"
    TIME_DEPENDENT = "time_dependent"

    @staticmethod
    def from_name(name: str) -> 'NoiseKind':
        """Accept 'static', 'time_dependent' or 'time-dependent'"""
        key = str(name).strip().lower().replace("-", "_")
        for kind in NoiseKind:
            if kind.value == key:
                return kind
        raise ValueError(f"Unknown noise kind: {name}")


class CarrierSample(Enum):
    """Where inside a segment carrier and correlation factors are sampled"""
    MIDPOINT = "midpoint"
    END = "end"


def _frozen_array(A, dtype=complex) -> np.ndarray:
    A = np.array(A, dtype=dtype)
    A.setflags(write=False)
    return A


@dataclass(frozen=True, eq=False)
class ControlChannel:
    """Control generator, optionally modulated by cos(carrier * t)"""
    generator: CMatrix
    carrier: Optional[float] = None
    name: str = ""

    def __post_init__(self):
        gen = as_square(self.generator, "control generator")
        if not is_hermitian(gen):
            raise ValueError(f"control generator {self.name or ''} is not Hermitian")
        object.__setattr__(self, "generator", _frozen_array(gen))

    def at(self, t: float) -> CMatrix:
        if self.carrier is None:
            return self.generator
        return np.cos(self.carrier * t) * self.generator


@dataclass(frozen=True, eq=False)
class SystemModel:
    drift: CMatrix
    channels: Tuple[ControlChannel, ...]
    subspace_isometry: CMatrix
    target: CMatrix
    carrier_sample: CarrierSample = CarrierSample.MIDPOINT
    local_z: bool = False
    name: str = "custom"

    def __post_init__(self):
        drift = as_square(self.drift, "drift")
        if not is_hermitian(drift):
            raise ValueError("drift Hamiltonian is not Hermitian")
        S = np.asarray(self.subspace_isometry, dtype=complex)
        if S.ndim != 2 or S.shape[0] != drift.shape[0]:
            raise ValueError(f"isometry shape {S.shape} does not match dim_full {drift.shape[0]}")
        if np.linalg.norm(S.conj().T @ S - np.eye(S.shape[1])) > 1e-12:
            raise ValueError("subspace isometry columns are not orthonormal")
        target = as_square(self.target, "target")
        if target.shape[0] != S.shape[1]:
            raise ValueError(f"target dimension {target.shape[0]} does not match dim_q {S.shape[1]}")
        if not is_unitary(target, 1e-12):
            raise ValueError("target gate is not unitary")
        channels = tuple(self.channels)
        for ch in channels:
            if ch.generator.shape != drift.shape:
                raise ValueError(f"channel {ch.name} has shape {ch.generator.shape}, expected {drift.shape}")
        object.__setattr__(self, "drift", _frozen_array(drift))
        object.__setattr__(self, "subspace_isometry", _frozen_array(S))
        object.__setattr__(self, "target", _frozen_array(target))
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "carrier_sample", CarrierSample(self.carrier_sample))

    @property
    def dim_full(self) -> int:
        return self.drift.shape[0]

    @property
    def dim_q(self) -> int:
        return self.subspace_isometry.shape[1]

    @property
    def n_channels(self) -> int:
        return len(self.channels)


@lru_cache(maxsize=16)
def _jacobian_cached(M: int, sigma: float, truncate: float) -> np.ndarray:
    J = gaussian_filter1d(np.eye(M), sigma, axis=0, mode="reflect", truncate=truncate)
    J.setflags(write=False)
    return J


def smoothing_jacobian(M: int, sigma_s: float, truncate: float = SMOOTHING_TRUNCATE) -> np.ndarray:
    """d(amplitudes)/d(raw) for one channel, an M x M matrix"""
    if sigma_s < 0:
        raise ValueError(f"smoothing width must be >= 0, got {sigma_s}")
    if sigma_s == 0:
        return np.eye(M)
    return _jacobian_cached(int(M), float(sigma_s), float(truncate))


def smooth_pulse(raw, sigma_s: float, truncate: float = SMOOTHING_TRUNCATE) -> np.ndarray:
    """
    Gaussian smoothing of raw per-channel parameters.

    Args:
        raw: Array of shape (channels, M) or (M,)
        sigma_s: Kernel width in segments, 0 disables smoothing
        truncate: Kernel half-width in units of sigma_s

    Returns:
        Smoothed amplitudes with the same shape as raw
    """
    raw = np.asarray(raw, dtype=float)
    if sigma_s < 0:
        raise ValueError(f"smoothing width must be >= 0, got {sigma_s}")
    if sigma_s == 0:
        return raw.copy()
    return gaussian_filter1d(raw, sigma_s, axis=-1, mode="reflect", truncate=truncate)


@dataclass(frozen=True, eq=False)
class PulseGrid:
    """Piecewise-constant amplitudes (rad/s) on M segments of length T/M"""
    T: float
    M: int
    raw: np.ndarray
    smoothing_sigma: float = 0.0
    omega_max: Optional[float] = None
    amplitudes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"pulse duration must be positive, got {self.T}")
        if int(self.M) != self.M or self.M < 1:
            raise ValueError(f"segment count must be a positive integer, got {self.M}")
        raw = np.array(self.raw, dtype=float)
        if raw.ndim == 1:
            raw = raw[None, :]
        if raw.ndim != 2 or raw.shape[1] != self.M:
            raise ValueError(f"pulse parameters shape {raw.shape} does not match M={self.M}")
        if not np.all(np.isfinite(raw)):
            raise ValueError("pulse parameters contain non-finite values")
        if self.omega_max is not None and not self.omega_max > 0:
            raise ValueError(f"omega_max must be positive, got {self.omega_max}")
        raw.setflags(write=False)
        amps = smooth_pulse(raw, self.smoothing_sigma)
        amps.setflags(write=False)
        object.__setattr__(self, "M", int(self.M))
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "raw", raw)
        object.__setattr__(self, "amplitudes", amps)

    @property
    def dt(self) -> float:
        return self.T / self.M

    @property
    def n_channels(self) -> int:
        return self.raw.shape[0]

    @classmethod
    def from_amplitudes(cls, T: float, amplitudes, omega_max: Optional[float] = None) -> 'PulseGrid':
        amplitudes = np.atleast_2d(np.asarray(amplitudes, dtype=float))
        return cls(T=T, M=amplitudes.shape[1], raw=amplitudes, omega_max=omega_max)

    def with_raw(self, raw) -> 'PulseGrid':
        return PulseGrid(T=self.T, M=self.M, raw=raw, smoothing_sigma=self.smoothing_sigma,
                         omega_max=self.omega_max)

    def to_dict(self) -> Dict:
        return {
            "T": self.T,
            "M": self.M,
            "smoothing_sigma": float(self.smoothing_sigma),
            "omega_max": None if self.omega_max is None else float(self.omega_max),
            "raw": self.raw.tolist(),
            "amplitudes": self.amplitudes.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'PulseGrid':
        return cls(T=data["T"], M=data["M"], raw=data["raw"],
                   smoothing_sigma=data.get("smoothing_sigma", 0.0),
                   omega_max=data.get("omega_max"))


@dataclass(frozen=True, eq=False)
class FixedOperator:
    matrix: CMatrix

    def __post_init__(self):
        mat = as_square(self.matrix, "noise operator")
        if not is_hermitian(mat):
            raise ValueError("noise operator is not Hermitian")
        object.__setattr__(self, "matrix", _frozen_array(mat))


@dataclass(frozen=True)
class ControlProportional:
    """Noise operator equal to the control Hamiltonian (drift excluded)"""


OperatorSpec = Union[FixedOperator, ControlProportional]


def validate_expansion(terms: Sequence[Tuple[complex, complex]]) -> Tuple[Tuple[complex, complex], ...]:
    """Check normalization, decay and conjugate pairing of an autocorrelation expansion"""
    terms = tuple((complex(a), complex(b)) for a, b in terms)
    if not terms:
        raise ValueError("time-dependent noise needs at least one autocorrelation term")
    total = sum(a for a, _ in terms)
    if abs(total.real - 1.0) > EXPANSION_TOL:
        raise ValueError(f"autocorrelation weights must sum to 1 at zero lag, got {total.real:.12g}")
    for a, b in terms:
        if b.real > 0:
            raise ValueError(f"autocorrelation rate {b} grows in time")
        scale = max(1.0, abs(b))
        if abs(b.imag) <= EXPANSION_TOL * scale:
            if abs(a.imag) > EXPANSION_TOL:
                raise ValueError(f"real rate {b} paired with complex weight {a}")
            continue
        partners = [
            (a2, b2) for a2, b2 in terms
            if abs(b2 - b.conjugate()) <= EXPANSION_TOL * scale
            and abs(a2 - a.conjugate()) <= EXPANSION_TOL * max(1.0, abs(a))
        ]
        if not partners:
            raise ValueError(f"complex term ({a}, {b}) has no conjugate partner")
    return terms


@dataclass(frozen=True, eq=False)
class NoiseChannel:
    name: str
    kind: NoiseKind
    operator: OperatorSpec
    strength: float = 0.0
    autocorrelation: Tuple[Tuple[complex, complex], ...] = ()

    def __post_init__(self):
        kind = self.kind if isinstance(self.kind, NoiseKind) else NoiseKind.from_name(self.kind)
        object.__setattr__(self, "kind", kind)
        if self.strength < 0:
            raise ValueError(f"noise strength must be >= 0, got {self.strength}")
        if kind is NoiseKind.STATIC:
            if self.autocorrelation:
                raise ValueError(f"static noise {self.name} cannot carry autocorrelation terms")
        else:
            object.__setattr__(self, "autocorrelation", validate_expansion(self.autocorrelation))

    @property
    def is_static(self) -> bool:
        return self.kind is NoiseKind.STATIC

    @property
    def control_proportional(self) -> bool:
        return isinstance(self.operator, ControlProportional)

    def with_strength(self, strength: float) -> 'NoiseChannel':
        return NoiseChannel(self.name, self.kind, self.operator, strength, self.autocorrelation)

    def to_dict(self) -> Dict:
        return {
            "name": self.name,
            "kind": self.kind.value,
            "operator": "control" if self.control_proportional else "fixed",
            "strength": float(self.strength),
            "autocorrelation": [[a.real, a.imag, b.real, b.imag] for a, b in self.autocorrelation],
        }


@dataclass(frozen=True)
class RobustnessTerm:
    order: int
    noises: Tuple[NoiseChannel, ...]
    weight: float

    def __post_init__(self):
        noises = tuple(self.noises)
        object.__setattr__(self, "noises", noises)
        if self.order not in (1, 2):
            raise ValueError(f"robustness order must be 1 or 2, got {self.order}")
        if self.weight < 0:
            raise ValueError(f"robustness weight must be >= 0, got {self.weight}")
        if any(not n.is_static for n in noises):
            if self.order != 2 or len(noises) != 1:
                raise ValueError("a time-dependent noise only enters a second-order self term")
        elif len(noises) != self.order:
            raise ValueError(f"order-{self.order} static term needs {self.order} noises, got {len(noises)}")

    @property
    def time_dependent(self) -> bool:
        return not self.noises[0].is_static

    @property
    def label(self) -> str:
        return f"D{self.order}(" + ",".join(n.name for n in self.noises) + ")"

    def with_weight(self, weight: float) -> 'RobustnessTerm':
        return RobustnessTerm(self.order, self.noises, weight)


def _check_segment(pulse: PulseGrid, m: int) -> None:
    if not 0 <= m < pulse.M:
        raise ValueError(f"segment index {m} out of range [0, {pulse.M})")


def sample_time(model: SystemModel, pulse: PulseGrid, m: int) -> float:
    """Sampling time of segment m (0-based)"""
    _check_segment(pulse, m)
    if model.carrier_sample is CarrierSample.END:
        return (m + 1) * pulse.dt
    return (m + 0.5) * pulse.dt


def channel_generator_at(model: SystemModel, pulse: PulseGrid, m: int, channel: int) -> CMatrix:
    """g_c(t_m) = dH[m]/du[c][m]"""
    return model.channels[channel].at(sample_time(model, pulse, m))


def control_hamiltonian_at(model: SystemModel, pulse: PulseGrid, m: int) -> CMatrix:
    if pulse.n_channels != model.n_channels:
        raise ValueError(f"pulse has {pulse.n_channels} channels, model has {model.n_channels}")
    t = sample_time(model, pulse, m)
    H = np.zeros_like(model.drift)
    for c, ch in enumerate(model.channels):
        H = H + pulse.amplitudes[c, m] * ch.at(t)
    return H


def hamiltonian_at(model: SystemModel, pulse: PulseGrid, m: int) -> CMatrix:
    return model.drift + control_hamiltonian_at(model, pulse, m)


def noise_operator_at(model: SystemModel, pulse: PulseGrid, m: int, noise: NoiseChannel) -> CMatrix:
    if noise.control_proportional:
        return control_hamiltonian_at(model, pulse, m)
    E = noise.operator.matrix
    if E.shape != model.drift.shape:
        raise ValueError(f"noise {noise.name} has shape {E.shape}, expected {model.drift.shape}")
    return E


def noise_operator_derivative(model: SystemModel, pulse: PulseGrid, m: int,
                              noise: NoiseChannel, channel: int) -> CMatrix:
    if noise.control_proportional:
        return channel_generator_at(model, pulse, m, channel)
    return np.zeros_like(model.drift)


def _assemble(diagonal: CMatrix, supers: List[CMatrix]) -> CMatrix:
    n = diagonal.shape[0]
    K = len(supers) + 1
    B = np.zeros((K * n, K * n), dtype=complex)
    for k in range(K):
        B[k * n:(k + 1) * n, k * n:(k + 1) * n] = diagonal
    for k, E in enumerate(supers):
        B[k * n:(k + 1) * n, (k + 1) * n:(k + 2) * n] = E
    return B


def build_block_static(model: SystemModel, pulse: PulseGrid, m: int,
                       noises: Sequence[NoiseChannel], channel: Optional[int] = None) -> CMatrix:
    """
    Upper-bidiagonal Van Loan generator for static noises.

    Args:
        model: Controlled system
        pulse: Pulse grid
        m: Segment index
        noises: Ordered static noise channels E_1..E_N
        channel: When given, return dB[m]/du[channel][m] instead of B[m]

    Returns:
        Square block matrix of size (N+1)*dim_full
    """
    for noise in noises:
        if not noise.is_static:
            raise ValueError(f"noise {noise.name} is time-dependent; use build_block_timedep")
    if channel is None:
        diagonal = hamiltonian_at(model, pulse, m)
        supers = [noise_operator_at(model, pulse, m, n) for n in noises]
    else:
        diagonal = channel_generator_at(model, pulse, m, channel)
        supers = [noise_operator_derivative(model, pulse, m, n, channel) for n in noises]
    return _assemble(diagonal, supers)


def build_block_timedep(model: SystemModel, pulse: PulseGrid, m: int, noise: NoiseChannel,
                        term: int, channel: Optional[int] = None) -> CMatrix:
    """Three-block generator with e^{b t} E and e^{-b t} E on the superdiagonal"""
    if noise.is_static:
        raise ValueError(f"noise {noise.name} is static; use build_block_static")
    if not 0 <= term < len(noise.autocorrelation):
        raise ValueError(f"autocorrelation term {term} out of range for {noise.name}")
    _, b = noise.autocorrelation[term]
    t = sample_time(model, pulse, m)
    if channel is None:
        diagonal = hamiltonian_at(model, pulse, m)
        E = noise_operator_at(model, pulse, m, noise)
    else:
        diagonal = channel_generator_at(model, pulse, m, channel)
        E = noise_operator_derivative(model, pulse, m, noise, channel)
    return _assemble(diagonal, [np.exp(b * t) * E, np.exp(-b * t) * E])
