"""State evolution under learned Hermitian generators.

The state is a unit-norm complex vector. One step applies the Cayley
transform of the interaction Hamiltonian H = Phi Phi^dag + diag(delta):

    (I + i*dt/2 * H) psi_next = (I - i*dt/2 * H) psi

Unitarity of this update holds for any Hermitian H and any dt > 0, so the
norm is preserved to rounding. Two solvers are provided: a dense O(N^3)
reference and the O(N r^2) Woodbury fast path; the dense one exists so the
Woodbury algebra can always be cross-checked against it.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .exceptions import IllConditionedStepError, NonHermitianError, VocabularyError

GRAM_COND_FAIL = 1e12
GRAM_COND_WARN = 1e8
RENORM_INTERVAL = 64
RENORM_TRIGGER = 1e-12


@dataclass
class InteractionFactors:
    """Low-rank factor Phi (N x r) plus real diagonal shift delta (N)."""

    phi: np.ndarray
    delta: np.ndarray
    time_index: int = 0

    @property
    def dim(self) -> int:
        return self.phi.shape[0]

    @property
    def rank(self) -> int:
        return self.phi.shape[1]

    def materialize(self) -> np.ndarray:
        """Dense H = Phi Phi^dag + diag(delta); Hermitian by construction."""
        return self.phi @ self.phi.conj().T + np.diag(self.delta.astype(complex))


@dataclass
class CayleyStepReport:
    gram_condition: float
    residual: float
    renorm_delta: float
    warning: bool = False


def check_hermitian(h: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    h = np.asarray(h, dtype=complex)
    dev = np.abs(h - h.conj().T).max()
    if dev > tol:
        raise NonHermitianError(f"matrix deviates from Hermitian by {dev:.3e}")
    return h


def interaction_picture_factors(
    factors: InteractionFactors, frequencies: np.ndarray, t: int, dt: float
) -> InteractionFactors:
    """Conjugate the low-rank factor into the interaction picture at time t*dt.

    Row j of Phi picks up the phase exp(i * lambda_j * t * dt); delta is
    untouched because diagonal entries are invariant under the conjugation.
    """
    phase = np.exp(1j * np.asarray(frequencies) * (t * dt))
    return replace(factors, phi=phase[:, None] * factors.phi)


def cayley_step_dense(h: np.ndarray, psi: np.ndarray, dt: float) -> np.ndarray:
    """Reference Cayley step: direct dense solve, O(N^3)."""
    h = check_hermitian(h)
    n = h.shape[0]
    k = (0.5j * dt) * h
    rhs = psi - k @ psi
    return np.linalg.solve(np.eye(n) + k, rhs)


def cayley_step_woodbury(
    factors: InteractionFactors, psi: np.ndarray, dt: float
) -> tuple[np.ndarray, CayleyStepReport]:
    """Low-rank Cayley step at O(N r^2 + r^3) via the Woodbury identity.

    `factors` must already be in the interaction picture. Accepts psi of
    shape (N,) or a batch (N, B) sharing the same factors.
    """
    phi, delta = factors.phi, factors.delta
    c = 0.5j * dt
    d = 1.0 + c * delta          # diagonal of A; modulus > 0 always
    d_prime = 1.0 - c * delta

    if psi.ndim == 1:
        col = psi[:, None]
    else:
        col = psi
    # rhs b = D' psi - c * Phi (Phi^dag psi)
    b = d_prime[:, None] * col - c * (phi @ (phi.conj().T @ col))
    y = b / d[:, None]
    z = phi.conj().T @ y
    p = phi / d[:, None]
    gram = np.eye(factors.rank) + c * (phi.conj().T @ p)
    sig = np.linalg.svd(gram, compute_uv=False)
    cond = float(sig[0] / sig[-1]) if sig[-1] > 0 else np.inf
    if cond > GRAM_COND_FAIL:
        report = CayleyStepReport(gram_condition=cond, residual=np.nan, renorm_delta=np.nan)
        raise IllConditionedStepError(
            f"Gram matrix condition {cond:.3e} exceeds {GRAM_COND_FAIL:.0e}", report=report
        )
    w = np.linalg.solve(gram, z)
    out = y - c * (p @ w)

    resid = d[:, None] * out + c * (phi @ (phi.conj().T @ out)) - b
    residual = float(np.linalg.norm(resid, axis=0).max())
    norms = np.linalg.norm(out, axis=0)
    renorm_delta = float(np.abs(norms - np.linalg.norm(col, axis=0)).max())
    report = CayleyStepReport(
        gram_condition=cond,
        residual=residual,
        renorm_delta=renorm_delta,
        warning=cond > GRAM_COND_WARN,
    )
    if psi.ndim == 1:
        out = out[:, 0]
    return out, report


def _safeguard(psi: np.ndarray, step: int) -> np.ndarray:
    """Renormalize only on the safeguard schedule and only if drift is visible."""
    if step % RENORM_INTERVAL == 0:
        norm = np.linalg.norm(psi)
        if abs(norm - 1.0) > RENORM_TRIGGER:
            return psi / norm
    return psi


def evolve_fixed_unitaries(
    unitaries: dict[int, np.ndarray], psi0: np.ndarray, tokens
) -> list[np.ndarray]:
    """Apply one fixed unitary per token; returns all T+1 states."""
    trajectory = [np.asarray(psi0, dtype=complex)]
    for step, tok in enumerate(tokens, start=1):
        try:
            u = unitaries[tok]
        except KeyError as exc:
            raise VocabularyError(f"no unitary for token {tok!r}") from exc
        psi = _safeguard(u @ trajectory[-1], step)
        trajectory.append(psi)
    return trajectory


def evolve_full_model(model, tokens):
    """Forward pass of the full model in the interaction picture.

    At each step the generator network consumes (token embedding,
    Re/Im of the current interaction-picture state), its output factors are
    phase-conjugated into the interaction picture, and a Woodbury Cayley step
    advances the state. Returns (trajectory, factors, reports) with the
    interaction-picture factors actually used at each step, which is
    everything the current diagnostics and the backward pass need.
    """
    from .hamgen import generate_interaction, initial_state

    psi = initial_state(model.init)
    trajectory = [psi]
    factor_log: list[InteractionFactors] = []
    reports: list[CayleyStepReport] = []
    for step, tok in enumerate(tokens):
        factors = generate_interaction(model.mlp, model.embed.vectors[tok], psi, model.r)
        factors_ip = interaction_picture_factors(factors, model.frequencies, step, model.dt)
        factors_ip.time_index = step
        try:
            psi, report = cayley_step_woodbury(factors_ip, psi, model.dt)
        except IllConditionedStepError as exc:
            exc.step = step
            raise
        psi = _safeguard(psi, step + 1)
        trajectory.append(psi)
        factor_log.append(factors_ip)
        reports.append(report)
    return trajectory, factor_log, reports


def schrodinger_state(psi_ip: np.ndarray, frequencies: np.ndarray, t: int, dt: float) -> np.ndarray:
    """Undo the interaction picture: psi(t) = exp(-i H0 t) psi_I(t)."""
    return np.exp(-1j * np.asarray(frequencies) * (t * dt)) * psi_ip
