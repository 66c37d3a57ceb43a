from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from control_model import (
    NoiseChannel,
    PulseGrid,
    RobustnessTerm,
    SystemModel,
    build_block_static,
    build_block_timedep,
    hamiltonian_at,
    noise_operator_at,
)
from dense_math import CMatrix, expm, expm_derivative

# generator(m, channel) returns G[m] for channel None, else dG[m]/du[channel][m]
Generator = Callable[[int, Optional[int]], CMatrix]


class GradientMode(Enum):
    EXACT = "exact"
    FIRST_ORDER = "first_order"

    @staticmethod
    def from_name(name: Union[str, 'GradientMode']) -> 'GradientMode':
        if isinstance(name, GradientMode):
            return name
        key = str(name).strip().lower().replace("-", "_")
        for mode in GradientMode:
            if mode.value == key:
                return mode
        raise ValueError(f"Unknown gradient mode: {name}")


@dataclass(frozen=True, eq=False)
class PropagationCache:
    """Segment propagators U_m and prefix products U(t_m) = U_m...U_0"""
    segment_propagators: np.ndarray
    prefix_products: np.ndarray
    total: CMatrix

    @property
    def M(self) -> int:
        return self.segment_propagators.shape[0]

    def before(self, m: int) -> CMatrix:
        """Propagator up to the start of segment m"""
        if m == 0:
            return np.eye(self.total.shape[0], dtype=complex)
        return self.prefix_products[m - 1]


def propagate(model: SystemModel, pulse: PulseGrid) -> PropagationCache:
    n = model.dim_full
    segments = np.empty((pulse.M, n, n), dtype=complex)
    prefix = np.empty((pulse.M, n, n), dtype=complex)
    U = np.eye(n, dtype=complex)
    for m in range(pulse.M):
        segments[m] = expm(-1j * pulse.dt * hamiltonian_at(model, pulse, m))
        U = segments[m] @ U
        prefix[m] = U
    for arr in (segments, prefix):
        arr.setflags(write=False)
    return PropagationCache(segments, prefix, prefix[-1])


class AugmentedPropagation:
    """
    Ordered product P = W_{M-1}...W_0 of block-segment exponentials
    W_m = expm(-i dt G[m]) together with adjoint gradients of linear
    functionals of its blocks.
    """

    def __init__(self, generator: Generator, M: int, dt: float, block_dim: int,
                 blocks: int, n_channels: int, label: str = ""):
        self.generator = generator
        self.M = M
        self.dt = dt
        self.block_dim = block_dim
        self.blocks = blocks
        self.n_channels = n_channels
        self.label = label
        self._product: Optional[CMatrix] = None

    @property
    def size(self) -> int:
        return self.block_dim * self.blocks

    def block(self, P: CMatrix, row: int, col: int) -> CMatrix:
        n = self.block_dim
        return P[row * n:(row + 1) * n, col * n:(col + 1) * n]

    def forward(self) -> CMatrix:
        if self._product is None:
            P = np.eye(self.size, dtype=complex)
            for m in range(self.M):
                P = expm(-1j * self.dt * self.generator(m, None)) @ P
            self._product = P
        return self._product

    def adjoint_gradient(self, seeds: Sequence[Tuple[int, int, CMatrix]],
                         mode: GradientMode = GradientMode.EXACT) -> np.ndarray:
        """
        Gradient of Σ_t Re Tr(S_t† P{r_t,c_t}) with respect to every u[c][m].

        Args:
            seeds: (row block, column block, S) triples, S of size block_dim
            mode: Exact segment derivative or the first-order insertion

        Returns:
            Array of shape (n_channels, M)
        """
        n, M = self.block_dim, self.M
        grad = np.zeros((self.n_channels, M))
        if not seeds:
            return grad
        cols = sorted({c for _, c, _ in seeds})
        slabs = {c: np.empty((M, self.size, n), dtype=complex) for c in cols}
        F = np.eye(self.size, dtype=complex)
        for m in range(M):
            for c in cols:
                slabs[c][m] = F[:, c * n:(c + 1) * n]
            F = expm(-1j * self.dt * self.generator(m, None)) @ F
        self._product = F

        rows = []
        for r, c, S in seeds:
            L = np.zeros((n, self.size), dtype=complex)
            L[:, r * n:(r + 1) * n] = np.conj(S).T
            rows.append([c, L])

        for m in reversed(range(M)):
            A = -1j * self.dt * self.generator(m, None)
            Q = sum(slabs[c][m] @ L for c, L in rows)
            W = None
            for ch in range(self.n_channels):
                dA = -1j * self.dt * self.generator(m, ch)
                if mode is GradientMode.EXACT:
                    W, dW = expm_derivative(A, dA)
                else:
                    if W is None:
                        W = expm(A)
                    dW = dA @ W
                grad[ch, m] = np.real(np.sum(Q.T * dW))
            if W is None:
                W = expm(A)
            for entry in rows:
                entry[1] = entry[1] @ W
        return grad


@dataclass
class BlockProbe:
    """One block of an augmented product, scaled by a coefficient"""
    propagation: AugmentedPropagation
    row: int
    col: int
    coefficient: complex = 1.0

    def value(self) -> CMatrix:
        P = self.propagation.forward()
        return self.coefficient * self.propagation.block(P, self.row, self.col)


@dataclass
class VanLoanResult:
    total: CMatrix
    derivatives: Dict[RobustnessTerm, CMatrix]
    probes: Dict[RobustnessTerm, List[BlockProbe]] = field(default_factory=dict)


def static_chain(model: SystemModel, pulse: PulseGrid,
                 noises: Sequence[NoiseChannel]) -> AugmentedPropagation:
    noises = list(noises)
    return AugmentedPropagation(
        lambda m, ch: build_block_static(model, pulse, m, noises, ch),
        pulse.M, pulse.dt, model.dim_full, len(noises) + 1, model.n_channels,
        label="static:" + ",".join(n.name for n in noises),
    )


def timedep_chain(model: SystemModel, pulse: PulseGrid, noise: NoiseChannel,
                  term: int) -> AugmentedPropagation:
    # TODO: balance each segment with diag(1, e^{b t_m}, 1) and bridge segments with
    # diag(1, e^{b dt}, 1); e^{±b t} blocks lose precision once |Re b|·T exceeds ~30
    return AugmentedPropagation(
        lambda m, ch: build_block_timedep(model, pulse, m, noise, term, ch),
        pulse.M, pulse.dt, model.dim_full, 3, model.n_channels,
        label=f"timedep:{noise.name}[{term}]",
    )


def plain_chain(model: SystemModel, pulse: PulseGrid) -> AugmentedPropagation:
    return static_chain(model, pulse, [])


def vanloan_static(model: SystemModel, pulse: PulseGrid, noises: Sequence[NoiseChannel]
                   ) -> Tuple[CMatrix, Dict[Tuple[int, ...], CMatrix]]:
    """
    Directional derivatives for an ordered list of static noises.

    Returns:
        U(T) and a map: (k,) -> first-order derivative for noise k,
        (k, k+1) -> ordered second-order block for the adjacent pair
    """
    chain = static_chain(model, pulse, noises)
    P = chain.forward()
    derivatives: Dict[Tuple[int, ...], CMatrix] = {}
    for k in range(len(noises)):
        derivatives[(k,)] = chain.block(P, k, k + 1)
        if k + 1 < len(noises):
            derivatives[(k, k + 1)] = chain.block(P, k, k + 2)
    return chain.block(P, 0, 0), derivatives


def vanloan_timedep(model: SystemModel, pulse: PulseGrid, noise: NoiseChannel) -> CMatrix:
    """Σ_i a_i times block (1,3) of the i-th correlation chain"""
    if noise.is_static:
        raise ValueError(f"noise {noise.name} is static")
    total = np.zeros((model.dim_full, model.dim_full), dtype=complex)
    for i, (a, _) in enumerate(noise.autocorrelation):
        chain = timedep_chain(model, pulse, noise, i)
        total = total + a * chain.block(chain.forward(), 0, 2)
    return total


def _term_probes(model: SystemModel, pulse: PulseGrid,
                 terms: Sequence[RobustnessTerm]) -> Dict[RobustnessTerm, List[BlockProbe]]:
    probes: Dict[RobustnessTerm, List[BlockProbe]] = {}
    first_order = [t for t in terms if t.order == 1]
    chain_noises: List[NoiseChannel] = []
    for t in first_order:
        if not any(t.noises[0] is n for n in chain_noises):
            chain_noises.append(t.noises[0])
    if chain_noises:
        chain = static_chain(model, pulse, chain_noises)
        for t in first_order:
            k = next(i for i, n in enumerate(chain_noises) if n is t.noises[0])
            probes[t] = [BlockProbe(chain, k, k + 1)]
    for t in terms:
        if t.order != 2:
            continue
        if t.time_dependent:
            noise = t.noises[0]
            probes[t] = [BlockProbe(timedep_chain(model, pulse, noise, i), 0, 2, a)
                         for i, (a, _) in enumerate(noise.autocorrelation)]
        else:
            probes[t] = [BlockProbe(static_chain(model, pulse, t.noises), 0, 2)]
    return probes


def _unique_propagations(probes: Mapping[RobustnessTerm, List[BlockProbe]]) -> List[AugmentedPropagation]:
    seen: List[AugmentedPropagation] = []
    for plist in probes.values():
        for p in plist:
            if not any(p.propagation is s for s in seen):
                seen.append(p.propagation)
    return seen


def vanloan_terms(model: SystemModel, pulse: PulseGrid, terms: Sequence[RobustnessTerm],
                  total: Optional[CMatrix] = None, threads: int = 1) -> VanLoanResult:
    """Directional derivative for every robustness term, sharing propagations where possible"""
    probes = _term_probes(model, pulse, terms)
    propagations = _unique_propagations(probes)
    if threads > 1 and len(propagations) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda p: p.forward(), propagations))
    else:
        for p in propagations:
            p.forward()
    derivatives = {}
    for t in terms:
        values = [p.value() for p in probes[t]]
        derivatives[t] = sum(values[1:], values[0])
    if total is None:
        total = propagate(model, pulse).total
    return VanLoanResult(total=total, derivatives=derivatives, probes=probes)


def perturbed_propagate(model: SystemModel, pulse: PulseGrid,
                        offsets: Mapping[NoiseChannel, Union[float, np.ndarray]]) -> CMatrix:
    """
    U_tot for H[m] + Σ_j ε_j[m] E_j[m].

    Args:
        offsets: Noise channel -> scalar offset or per-segment values of length M
    """
    n = model.dim_full
    values = []
    for noise, eps in offsets.items():
        eps = np.broadcast_to(np.asarray(eps, dtype=float), (pulse.M,))
        values.append((noise, eps))
    U = np.eye(n, dtype=complex)
    for m in range(pulse.M):
        H = hamiltonian_at(model, pulse, m)
        for noise, eps in values:
            if eps[m] != 0.0:
                H = H + eps[m] * noise_operator_at(model, pulse, m, noise)
        U = expm(-1j * pulse.dt * H) @ U
    return U
