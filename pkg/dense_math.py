import itertools
from functools import lru_cache
from typing import List, Tuple

import numpy as np
from scipy.linalg import expm as _scipy_expm
from scipy.linalg import expm_frechet

CMatrix = np.ndarray

PAULI_I = np.eye(2, dtype=complex)
PAULI_X = np.array([[0, 1], [1, 0]], dtype=complex)
PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
PAULI_Z = np.array([[1, 0], [0, -1]], dtype=complex)


def as_square(A, name: str = "matrix") -> CMatrix:
    """Return A as a finite complex square array or raise ValueError"""
    A = np.asarray(A, dtype=complex)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"{name} must be square, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} contains non-finite entries")
    return A


def expm(A) -> CMatrix:
    """Matrix exponential by scaling-and-squaring with degree-13 Padé"""
    A = np.asarray(A, dtype=complex)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("can only exponentiate square matrix")
    if not np.all(np.isfinite(A)):
        raise ValueError("can only exponentiate finite matrix")
    return _scipy_expm(A)


def expm_derivative(A, E) -> Tuple[CMatrix, CMatrix]:
    """
    Exponential of A and its derivative in direction E.

    The derivative is the (1,2) block of expm([[A, E], [0, A]]); scipy
    evaluates the same quantity without doubling the dimension.

    Returns:
        (expm(A), d/ds expm(A + sE) at s=0)
    """
    A = np.asarray(A, dtype=complex)
    E = np.asarray(E, dtype=complex)
    if A.shape != E.shape:
        raise ValueError(f"direction shape {E.shape} does not match {A.shape}")
    return expm_frechet(A, E, compute_expm=True)


def kron(*mats) -> CMatrix:
    """Kronecker product of one or more square matrices, left to right"""
    if not mats:
        raise ValueError("kron needs at least one matrix")
    result = as_square(mats[0])
    for M in mats[1:]:
        result = np.kron(result, as_square(M))
    return result


def dagger(A) -> CMatrix:
    return np.conj(np.asarray(A)).T


def frob_norm_sq(A) -> float:
    """Σ|A_ij|² = Tr(A†A)"""
    A = np.asarray(A)
    return float(np.vdot(A, A).real)


def is_hermitian(A, tol: float = 1e-12) -> bool:
    A = np.asarray(A)
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    return bool(np.max(np.abs(A - dagger(A)), initial=0.0) <= tol * scale)


def is_unitary(U, tol: float = 1e-10) -> bool:
    U = np.asarray(U)
    return bool(np.linalg.norm(dagger(U) @ U - np.eye(U.shape[0])) <= tol)


def ladder_ops(levels: int) -> Tuple[CMatrix, CMatrix]:
    """
    Truncated annihilation and creation operators.

    Args:
        levels: Number of retained Fock levels (>= 2)

    Returns:
        (a, a_dag) with a|n> = sqrt(n)|n-1>
    """
    if int(levels) != levels or levels < 2:
        raise ValueError(f"levels must be an integer >= 2, got {levels}")
    a = np.diag(np.sqrt(np.arange(1, int(levels), dtype=float)), k=1).astype(complex)
    return a, dagger(a)


def embed_operator(op, position: int, dims: List[int]) -> CMatrix:
    """Place op on subsystem `position` of a tensor product with identities elsewhere"""
    if not 0 <= position < len(dims):
        raise ValueError(f"position {position} outside {len(dims)} subsystems")
    op = as_square(op, "operator")
    if op.shape[0] != dims[position]:
        raise ValueError(f"operator dimension {op.shape[0]} does not match subsystem {dims[position]}")
    factors = [op if k == position else np.eye(d, dtype=complex) for k, d in enumerate(dims)]
    return kron(*factors)


def basis_isometry(dims: List[int], keep: List[int]) -> CMatrix:
    """
    Isometry from the product of the first len(keep) subsystems restricted
    to levels < keep[k], tensored with the ground state of the rest.
    """
    full = int(np.prod(dims))
    kept = [range(k) for k in keep] + [range(1)] * (len(dims) - len(keep))
    columns = []
    for index in itertools.product(*kept):
        columns.append(int(np.ravel_multi_index(index, dims)))
    S = np.zeros((full, len(columns)), dtype=complex)
    S[columns, np.arange(len(columns))] = 1.0
    return S


@lru_cache(maxsize=4)
def pauli_basis(n_qubits: int) -> Tuple[Tuple[str, CMatrix], ...]:
    """All 4**n Pauli words as (label, matrix), identity word first"""
    if n_qubits not in (1, 2):
        raise ValueError(f"Pauli basis supported for 1 or 2 qubits, got {n_qubits}")
    singles = {"I": PAULI_I, "X": PAULI_X, "Y": PAULI_Y, "Z": PAULI_Z}
    words = []
    for labels in itertools.product("IXYZ", repeat=n_qubits):
        mat = kron(*(singles[l] for l in labels))
        mat.setflags(write=False)
        words.append(("".join(labels), mat))
    return tuple(words)
