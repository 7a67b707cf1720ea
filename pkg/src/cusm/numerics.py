"""Complex linear-algebra substrate.

Deterministic Haar sampling, a trace-orthonormal Hermitian basis with a fixed
canonical ordering, SVD-based rank estimation, and a uniqueness-normalized
thin QR. Everything here is a pure function of its arguments; randomness
always enters through an explicit 64-bit seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateFactorizationError, InvalidDimensionError, NonHermitianError

DEFAULT_RANK_TOL = 1e-10
HERMITIAN_TOL = 1e-10


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Seeded generator; distinct streams give independent sequences for workers."""
    return np.random.default_rng([np.uint64(seed), np.uint64(stream)])


def ginibre(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Complex standard-normal matrix, entries ~ CN(0, 1)."""
    return (rng.standard_normal((rows, cols)) + 1j * rng.standard_normal((rows, cols))) / np.sqrt(2.0)


def thin_qr_unique(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR with the diagonal of R forced real and strictly positive.

    The positivity normalization makes the factorization unique, hence
    byte-deterministic for identical input. Requires rows >= cols and full
    column rank.
    """
    a = np.asarray(a, dtype=complex)
    if a.ndim != 2 or a.shape[0] < a.shape[1]:
        raise InvalidDimensionError(f"need rows >= cols, got shape {a.shape}")
    q, r = np.linalg.qr(a)
    d = np.diagonal(r).copy()
    smax = np.abs(d).max() if d.size else 0.0
    if smax == 0.0 or np.abs(d).min() <= 1e-10 * smax * max(a.shape):
        raise DegenerateFactorizationError("input is numerically rank-deficient")
    phases = d / np.abs(d)
    q = q * phases[None, :]
    r = phases.conj()[:, None] * r
    return q, r


def sample_haar_unitary(dim: int, seed: int, stream: int = 0) -> np.ndarray:
    """Haar-distributed unitary via QR of a Ginibre matrix.

    The positive-diagonal-R normalization of thin_qr_unique is exactly the
    phase correction that makes the QR output Haar rather than merely unitary.
    """
    if dim < 1:
        raise InvalidDimensionError(f"dim must be >= 1, got {dim}")
    rng = make_rng(seed, stream)
    q, _ = thin_qr_unique(ginibre(rng, dim, dim))
    return q


@dataclass(frozen=True)
class HermitianBasis:
    """Trace-orthonormal basis of the real vector space of dim x dim Hermitian matrices.

    Canonical order: the dim diagonal projectors e_j e_j^T first, then the
    real symmetrizers (e_j e_k^T + e_k e_j^T)/sqrt(2) for j < k in
    lexicographic order, then the imaginary antisymmetrizers
    (-i e_j e_k^T + i e_k e_j^T)/sqrt(2), same order.
    """

    dim: int
    elements: np.ndarray  # (dim**2, dim, dim) complex

    def __len__(self) -> int:
        return self.dim * self.dim


def hermitian_basis(dim: int) -> HermitianBasis:
    if dim < 1:
        raise InvalidDimensionError(f"dim must be >= 1, got {dim}")
    mats = np.zeros((dim * dim, dim, dim), dtype=complex)
    idx = 0
    for j in range(dim):
        mats[idx, j, j] = 1.0
        idx += 1
    s = 1.0 / np.sqrt(2.0)
    for j in range(dim):
        for k in range(j + 1, dim):
            mats[idx, j, k] = s
            mats[idx, k, j] = s
            idx += 1
    for j in range(dim):
        for k in range(j + 1, dim):
            mats[idx, j, k] = -1j * s
            mats[idx, k, j] = 1j * s
            idx += 1
    return HermitianBasis(dim=dim, elements=mats)


def vec_hermitian(a: np.ndarray, basis: HermitianBasis) -> np.ndarray:
    """Real coordinate vector of a Hermitian matrix, v_alpha = tr(E_alpha A)."""
    a = np.asarray(a, dtype=complex)
    if a.shape != (basis.dim, basis.dim):
        raise InvalidDimensionError(f"matrix shape {a.shape} does not match basis dim {basis.dim}")
    dev = np.abs(a - a.conj().T).max()
    if dev > HERMITIAN_TOL:
        raise NonHermitianError(f"matrix deviates from Hermitian by {dev:.3e}")
    # tr(E A) = sum_{jk} E_jk A_kj; real because both are Hermitian.
    return np.einsum("ajk,kj->a", basis.elements, a).real


def unvec_hermitian(v: np.ndarray, basis: HermitianBasis) -> np.ndarray:
    """Inverse of vec_hermitian: sum_alpha v_alpha E_alpha."""
    v = np.asarray(v, dtype=float)
    if v.shape != (basis.dim * basis.dim,):
        raise InvalidDimensionError(f"vector length {v.shape} does not match basis dim {basis.dim}")
    return np.einsum("a,ajk->jk", v, basis.elements)


def numerical_rank(a: np.ndarray, rel_tol: float = DEFAULT_RANK_TOL) -> int:
    """Number of singular values above rel_tol * sigma_max * max(rows, cols)."""
    if not 0.0 < rel_tol < 1.0:
        raise ValueError(f"rel_tol must be in (0, 1), got {rel_tol}")
    a = np.asarray(a)
    if a.size == 0:
        return 0
    sigma = np.linalg.svd(a, compute_uv=False)
    smax = sigma.max()
    if smax == 0.0:
        return 0
    return int(np.sum(sigma > rel_tol * smax * max(a.shape)))
