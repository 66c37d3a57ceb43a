from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from control_model import PulseGrid, RobustnessTerm, SystemModel, smoothing_jacobian
from dense_math import CMatrix, dagger, frob_norm_sq
from vanloan_propagation import (
    AugmentedPropagation,
    GradientMode,
    plain_chain,
    vanloan_terms,
)

PHASE_GRID = 64
# exponents of (phi_1, phi_2) on the diagonal |00>, |01>, |10>, |11>
_LOCAL_Z_EXPONENTS = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)


@dataclass
class FitnessConfig:
    """Robustness terms and fidelity settings for Φ = Φ₀ − Σ λ‖D‖²"""
    robustness_terms: Tuple[RobustnessTerm, ...] = ()
    phi0_threshold: float = 0.999
    gradient_mode: GradientMode = GradientMode.EXACT
    threads: int = 1

    def __post_init__(self):
        self.robustness_terms = tuple(self.robustness_terms)
        self.gradient_mode = GradientMode.from_name(self.gradient_mode)
        if not 0.0 < self.phi0_threshold < 1.0:
            raise ValueError(f"phi0_threshold must lie in (0, 1), got {self.phi0_threshold}")
        if self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")

    def scaled(self, factor: float) -> 'FitnessConfig':
        """Copy with every weight multiplied by factor"""
        return FitnessConfig(
            robustness_terms=tuple(t.with_weight(t.weight * factor) for t in self.robustness_terms),
            phi0_threshold=self.phi0_threshold,
            gradient_mode=self.gradient_mode,
            threads=self.threads,
        )

    @property
    def weights(self) -> List[float]:
        return [t.weight for t in self.robustness_terms]


@dataclass
class FitnessReport:
    phi0: float
    penalties: Dict[str, float]
    phi: float
    leakage: float
    derivative_norms: Dict[str, float] = field(default_factory=dict)
    phases: Optional[Tuple[float, float]] = None
    gradient: Optional[np.ndarray] = None

    def to_dict(self) -> Dict:
        return {
            "phi0": float(self.phi0),
            "phi": float(self.phi),
            "leakage": float(self.leakage),
            "penalties": {k: float(v) for k, v in self.penalties.items()},
            "derivative_norms": {k: float(v) for k, v in self.derivative_norms.items()},
            "local_z_phases": None if self.phases is None else [float(p) for p in self.phases],
        }


def project(total: CMatrix, model: SystemModel) -> CMatrix:
    """U_q = S† U S"""
    total = np.asarray(total)
    if total.shape != (model.dim_full, model.dim_full):
        raise ValueError(f"propagator shape {total.shape} does not match dim_full {model.dim_full}")
    S = model.subspace_isometry
    return dagger(S) @ total @ S


def _fidelity_q(U_q: CMatrix, target: CMatrix) -> float:
    if U_q.shape != target.shape:
        raise ValueError(f"projected propagator {U_q.shape} does not match target {target.shape}")
    d = target.shape[0]
    tau = np.trace(U_q @ dagger(target))
    return max(float(abs(tau) ** 2) / d ** 2, 0.0)


def gate_fidelity(total: CMatrix, model: SystemModel, target: Optional[CMatrix] = None) -> float:
    """|Tr(U_q U_tar†)|² / d_q²"""
    return _fidelity_q(project(total, model), model.target if target is None else target)


def leakage(total: CMatrix, model: SystemModel) -> float:
    return 1.0 - frob_norm_sq(project(total, model)) / model.dim_q


def local_z_matrix(phases: Tuple[float, float]) -> CMatrix:
    phi1, phi2 = phases
    return np.diag(np.exp(1j * (_LOCAL_Z_EXPONENTS @ np.array([phi1, phi2]))))


def compensated_target(target: CMatrix, phases: Tuple[float, float]) -> CMatrix:
    """Target T' with |Tr(U_q T'†)| = |Tr(Z(φ) U_q T†)|"""
    return dagger(local_z_matrix(phases)) @ target


def _phase_objective(c: np.ndarray, phi: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    terms = c * np.exp(1j * (_LOCAL_Z_EXPONENTS @ phi))
    z = terms.sum()
    dz = 1j * (_LOCAL_Z_EXPONENTS.T @ terms)
    d2z = -np.einsum("kj,kl,k->jl", _LOCAL_Z_EXPONENTS, _LOCAL_Z_EXPONENTS, terms)
    value = float(abs(z) ** 2)
    grad = 2.0 * np.real(np.conj(z) * dz)
    hess = 2.0 * np.real(np.outer(dz, np.conj(dz)).T + np.conj(z) * d2z)
    return value, grad, hess


def local_z_phases(U_q: CMatrix, target: CMatrix) -> Tuple[float, float]:
    """
    Single-qubit Z phases maximizing the compensated two-qubit fidelity.

    Starts from the phases of the diagonal entries, compares against a
    64x64 grid scan and polishes the winner with Newton steps.
    """
    if U_q.shape != (4, 4) or target.shape != (4, 4):
        raise ValueError("local-Z compensation needs a two-qubit gate")
    c = np.diag(U_q @ dagger(target))

    candidates = [np.zeros(2)]
    if abs(c[0]) > 1e-12:
        guess = [np.angle(c[0]) - np.angle(c[2]) if abs(c[2]) > 1e-12 else 0.0,
                 np.angle(c[0]) - np.angle(c[1]) if abs(c[1]) > 1e-12 else 0.0]
        candidates.append(np.array(guess))
    grid = np.linspace(0.0, 2 * np.pi, PHASE_GRID, endpoint=False)
    p1, p2 = np.meshgrid(grid, grid, indexing="ij")
    z = c[0] + c[1] * np.exp(1j * p2) + c[2] * np.exp(1j * p1) + c[3] * np.exp(1j * (p1 + p2))
    best = np.unravel_index(np.argmax(np.abs(z)), z.shape)
    candidates.append(np.array([grid[best[0]], grid[best[1]]]))

    phi = max(candidates, key=lambda p: _phase_objective(c, p)[0])
    value, grad, hess = _phase_objective(c, phi)
    for _ in range(50):
        if np.max(np.abs(grad)) <= 1e-15 * max(value, 1.0):
            break
        step = np.linalg.lstsq(hess, grad, rcond=1e-12)[0]
        trial = phi - step
        trial_value, trial_grad, trial_hess = _phase_objective(c, trial)
        if trial_value < value - 1e-14 * max(value, 1.0):
            break
        phi, value, grad, hess = trial, trial_value, trial_grad, trial_hess
    phi = np.mod(phi + np.pi, 2 * np.pi) - np.pi
    return float(phi[0]), float(phi[1])


def fidelity_with_local_z(total: CMatrix, model: SystemModel, optimize_phases: bool = True,
                          phases: Optional[Tuple[float, float]] = None) -> float:
    """
    Two-qubit fidelity after local Z compensation.

    Args:
        total: Full-space propagator
        model: System with a two-qubit target
        optimize_phases: Search for the best phases; otherwise use `phases` (default zero)
        phases: Fixed (phi_1, phi_2) when not optimizing
    """
    if model.dim_q != 4:
        raise ValueError(f"local-Z compensation needs dim_q = 4, got {model.dim_q}")
    U_q = project(total, model)
    if optimize_phases:
        phases = local_z_phases(U_q, model.target)
    elif phases is None:
        phases = (0.0, 0.0)
    return _fidelity_q(U_q, compensated_target(model.target, phases))


def model_fidelity(total: CMatrix, model: SystemModel,
                   phases: Optional[Tuple[float, float]] = None) -> float:
    """Fidelity in the model's own mode; fixed phases skip the phase search"""
    if not model.local_z:
        return gate_fidelity(total, model)
    return fidelity_with_local_z(total, model, optimize_phases=phases is None, phases=phases)


def _term_labels(terms: Sequence[RobustnessTerm]) -> List[str]:
    labels, seen = [], {}
    for t in terms:
        count = seen.get(t.label, 0) + 1
        seen[t.label] = count
        labels.append(t.label if count == 1 else f"{t.label}#{count}")
    return labels


def _evaluate(model: SystemModel, pulse: PulseGrid, cfg: FitnessConfig,
              with_gradient: bool) -> FitnessReport:
    if pulse.n_channels != model.n_channels:
        raise ValueError(f"pulse has {pulse.n_channels} channels, model has {model.n_channels}")
    base = plain_chain(model, pulse)
    U = base.forward()
    U_q = project(U, model)
    phases = local_z_phases(U_q, model.target) if model.local_z else None
    target = model.target if phases is None else compensated_target(model.target, phases)
    d = model.dim_q
    tau = np.trace(U_q @ dagger(target))
    phi0 = max(float(abs(tau) ** 2) / d ** 2, 0.0)

    terms = cfg.robustness_terms
    result = vanloan_terms(model, pulse, terms, total=U, threads=cfg.threads)
    labels = _term_labels(terms)
    penalties, norms = {}, {}
    for label, t in zip(labels, terms):
        norms[label] = frob_norm_sq(result.derivatives[t])
        penalties[label] = t.weight * norms[label]
    phi = phi0 - sum(penalties.values())
    report = FitnessReport(phi0=phi0, penalties=penalties, phi=phi,
                           leakage=1.0 - frob_norm_sq(U_q) / d,
                           derivative_norms=norms, phases=phases)
    if not with_gradient:
        return report

    S = model.subspace_isometry
    jobs: List[Tuple[AugmentedPropagation, list]] = [
        (base, [(0, 0, 2.0 * tau * S @ target @ dagger(S) / d ** 2)])
    ]
    for t in terms:
        if t.weight == 0.0:
            continue
        D = result.derivatives[t]
        for probe in result.probes[t]:
            seed = (probe.row, probe.col, -2.0 * t.weight * np.conj(probe.coefficient) * D)
            for prop, seeds in jobs:
                if prop is probe.propagation:
                    seeds.append(seed)
                    break
            else:
                jobs.append((probe.propagation, [seed]))

    def run(job):
        prop, seeds = job
        return prop.adjoint_gradient(seeds, cfg.gradient_mode)

    if cfg.threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            parts = list(pool.map(run, jobs))
    else:
        parts = [run(job) for job in jobs]
    grad_u = np.zeros((model.n_channels, pulse.M))
    for part in parts:
        grad_u = grad_u + part

    J = smoothing_jacobian(pulse.M, pulse.smoothing_sigma)
    report.gradient = grad_u @ J
    return report


def total_fitness(model: SystemModel, pulse: PulseGrid, cfg: FitnessConfig,
                  with_gradient: bool = False) -> FitnessReport:
    """Φ₀, per-term penalties λ‖D‖² and Φ for one pulse"""
    return _evaluate(model, pulse, cfg, with_gradient)


def gradient(model: SystemModel, pulse: PulseGrid, cfg: FitnessConfig) -> np.ndarray:
    """dΦ/d(raw pulse parameters), shape (channels, M)"""
    return _evaluate(model, pulse, cfg, with_gradient=True).gradient
