import numpy as np
import pytest

from cusm.dynamics import evolve_fixed_unitaries
from cusm.exceptions import InvalidDimensionError
from cusm.numerics import ginibre, hermitian_basis, make_rng, numerical_rank, vec_hermitian
from cusm.readout import born_probabilities
from cusm.septask import (
    RosmParams,
    basis_change_unitary,
    build_exact_cusm,
    build_ic_measurement,
    certificate_rank,
    check_separation_ranks,
    cusm_forward,
    load_task,
    make_task,
    n2_reference_config,
    random_rosm,
    rosm_forward,
    sample_general_position,
    save_task,
    softmax_rank_audit,
    target_table,
)


class TestIcMeasurement:
    def test_rank_and_identity(self):
        for n in (2, 3, 4):
            m = build_ic_measurement(n, seed=1)
            assert m.shape == (n, n * n)
            assert np.abs(m @ m.conj().T - np.eye(n)).max() < 1e-10
            basis = hermitian_basis(n)
            rows = np.stack([
                vec_hermitian(np.outer(m[:, k], m[:, k].conj()), basis)
                for k in range(n * n)
            ])
            assert numerical_rank(rows) == n * n

    def test_born_normalization(self):
        rng = make_rng(2)
        for n in (2, 3, 4):
            m = build_ic_measurement(n, seed=3)
            psi = ginibre(rng, n, 1)[:, 0]
            psi /= np.linalg.norm(psi)
            assert abs(born_probabilities(m, psi).sum() - 1.0) < 1e-12

    def test_linear_inversion(self):
        # informational completeness: a Hermitian matrix is recoverable from
        # its outcome functionals by least squares
        n = 2
        m = build_ic_measurement(n, seed=4)
        rng = make_rng(5)
        z = ginibre(rng, n, n)
        rho = z + z.conj().T
        basis = hermitian_basis(n)
        design = np.stack([
            vec_hermitian(np.outer(m[:, k], m[:, k].conj()), basis)
            for k in range(n * n)
        ])
        outcomes = np.array([
            np.trace(np.outer(m[:, k], m[:, k].conj()) @ rho).real
            for k in range(n * n)
        ])
        coeffs, *_ = np.linalg.lstsq(design, outcomes, rcond=None)
        assert np.abs(coeffs - vec_hermitian(rho, basis)).max() < 1e-10

    def test_small_n_rejected(self):
        with pytest.raises(InvalidDimensionError):
            build_ic_measurement(1, seed=0)


class TestGeneralPosition:
    def test_certificate_ranks(self):
        for n in (2, 3):
            for seed in range(5):
                states, unitaries, rank = sample_general_position(n, seed)
                assert rank == n * n
                assert np.abs(np.linalg.norm(states, axis=1) - 1.0).max() < 1e-12

    def test_orthonormal_contexts_degenerate(self):
        # standard-basis context states cannot reach full rank: for each
        # query the n projected states sum to the identity, and the identity
        # is shared across queries, leaving n - 1 independent relations
        for n in (2, 3):
            states = np.eye(n, dtype=complex)
            _, unitaries, _ = sample_general_position(n, seed=1)
            rank = certificate_rank(states, unitaries)
            assert rank <= n * n - (n - 1)


class TestN2Reference:
    def test_determinant(self):
        assert abs(n2_reference_config()["detR"] - (-0.25)) < 1e-12

    def test_density_matrices(self):
        ref = n2_reference_config()
        assert np.abs(ref["rho"]["rho00"] - np.diag([1.0, 0.0])).max() < 1e-14
        assert np.abs(ref["rho"]["rho10"] - 0.5 * np.array([[1, -1j], [1j, 1]])).max() < 1e-14
        assert np.abs(ref["rho"]["rho01"] - 0.5 * np.array([[1, 1], [1, 1]])).max() < 1e-14
        assert np.abs(ref["rho"]["rho11"] - 0.5 * np.array([[1, 1j], [-1j, 1]])).max() < 1e-14

    def test_reference_task(self):
        task = make_task(2, seed=0, reference=True)
        assert task.certificate_rank == 4
        with pytest.raises(InvalidDimensionError):
            make_task(3, seed=0, reference=True)


class TestTargetTable:
    def test_row_sums(self):
        task = make_task(2, seed=6)
        table = target_table(task)
        assert np.abs(table.pstar.sum(axis=1) - 1.0).max() < 1e-12

    def test_trace_formula_cross_check(self):
        task = make_task(3, seed=7)
        table = target_table(task)
        for i in range(3):
            for j in range(3):
                state = task.query_unitaries[j] @ task.context_states[i]
                rho = np.outer(state, state.conj())
                for k in range(task.v):
                    mk = np.outer(task.measurement[:, k], task.measurement[:, k].conj())
                    assert abs(table.pstar[i * 3 + j, k] - np.trace(mk @ rho).real) < 1e-13

    def test_ranks(self):
        for n in (2, 3):
            task = make_task(n, seed=8)
            report = check_separation_ranks(target_table(task), n)
            assert report["rank_P"] == n * n

    def test_degenerate_rows_detected(self):
        task = make_task(2, seed=9)
        table = target_table(task)
        table.pstar[1] = table.pstar[0]
        assert numerical_rank(table.pstar) < 4


class TestBasisChangeUnitary:
    def test_identity_when_equal(self):
        v = np.array([1.0, 0.0], dtype=complex)
        assert np.array_equal(basis_change_unitary(v, v), np.eye(2))

    def test_basis_to_basis(self):
        e0 = np.array([1.0, 0.0], dtype=complex)
        e1 = np.array([0.0, 1.0], dtype=complex)
        u = basis_change_unitary(e0, e1)
        assert np.abs(u @ e0 - e1).max() < 1e-14

    def test_random_pair(self):
        rng = make_rng(10)
        src = ginibre(rng, 5, 1)[:, 0]
        src /= np.linalg.norm(src)
        dst = ginibre(rng, 5, 1)[:, 0]
        dst /= np.linalg.norm(dst)
        u = basis_change_unitary(src, dst)
        assert np.abs(u.conj().T @ u - np.eye(5)).max() < 1e-12
        assert np.abs(u @ src - dst).max() < 1e-12


class TestExactCusm:
    def test_reproduces_targets(self):
        task = make_task(2, seed=0, reference=True)
        table = target_table(task)
        cusm = build_exact_cusm(task)
        for i in range(2):
            for j in range(2):
                probs = cusm_forward(cusm, task.sequence(i, j))[-1]
                assert np.abs(probs - table.pstar[i * 2 + j]).max() < 1e-12

    def test_filler_invariance(self):
        task = make_task(3, seed=11)
        cusm = build_exact_cusm(task)
        short = [0] + [task.filler_token] * 0 + [task.query_token(1)]
        long = [0] + [task.filler_token] * 100 + [task.query_token(1)]
        p_short = cusm_forward(cusm, short)[-1]
        p_long = cusm_forward(cusm, long)[-1]
        assert np.abs(p_short - p_long).max() < 1e-12

    def test_context_unitaries_hit_states(self):
        task = make_task(3, seed=12)
        cusm = build_exact_cusm(task)
        for i in range(3):
            assert np.abs(cusm.unitaries[i] @ cusm.psi0 - task.context_states[i]).max() < 1e-12

    def test_per_step_normalization(self):
        task = make_task(2, seed=13)
        cusm = build_exact_cusm(task)
        probs = cusm_forward(cusm, task.sequence(1, 0))
        assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-10

    def test_final_state_composition(self):
        task = make_task(2, seed=14)
        cusm = build_exact_cusm(task)
        tokens = task.sequence(1, 1)
        traj = evolve_fixed_unitaries(cusm.unitaries, cusm.psi0, tokens)
        expected = task.query_unitaries[1] @ task.context_states[1]
        assert np.abs(traj[-1] - expected).max() < 1e-12


class TestRosm:
    def test_uniform_with_zero_readout(self):
        task = make_task(2, seed=15)
        rosm = random_rosm(3, task, seed=1)
        rosm.out_weights = np.zeros_like(rosm.out_weights)
        rosm.bias = np.zeros_like(rosm.bias)
        probs = rosm_forward(rosm, task.sequence(0, 0))
        assert np.abs(probs - 0.25).max() < 1e-14

    def test_transitions_orthogonal_unit_state(self):
        task = make_task(2, seed=16)
        rosm = random_rosm(4, task, seed=2)
        h = rosm.h0
        assert abs(np.linalg.norm(h) - 1.0) < 1e-12
        for tok in range(5):
            q = rosm.transition(tok)
            assert np.abs(q.T @ q - np.eye(4)).max() < 1e-10
            h = q @ h
            assert abs(np.linalg.norm(h) - 1.0) < 1e-10

    def test_scalar_softmax(self):
        task = make_task(2, seed=17)
        rosm = RosmParams(
            h0=np.array([1.0]),
            generators={tok: np.zeros((1, 1)) for tok in range(5)},
            out_weights=np.array([[1.0], [-1.0], [0.0], [0.5]]),
            bias=np.zeros(4),
        )
        probs = rosm_forward(rosm, task.sequence(0, 0))[-1]
        logits = np.array([1.0, -1.0, 0.0, 0.5])
        expected = np.exp(logits) / np.exp(logits).sum()
        assert np.abs(probs - expected).max() < 1e-14

    def test_rank_audit_fuzz(self):
        task = make_task(2, seed=18)
        for k in range(100):
            d = [1, 2, 4][k % 3]
            rosm = random_rosm(d, task, seed=k)
            audit = softmax_rank_audit(rosm, task)
            assert audit["satisfied"]
            assert audit["bound"] == d + 2

    def test_large_d_trivially_satisfied(self):
        task = make_task(2, seed=19)
        rosm = random_rosm(4, task, seed=5)
        audit = softmax_rank_audit(rosm, task)
        assert audit["rank_Lbar"] <= 6


class TestSerialization:
    def test_bit_exact_roundtrip(self, tmp_path):
        task = make_task(3, seed=20, filler_length=4)
        path = str(tmp_path / "task.json")
        save_task(task, path)
        loaded = load_task(path)
        assert np.array_equal(task.context_states, loaded.context_states)
        assert np.array_equal(task.query_unitaries, loaded.query_unitaries)
        assert np.array_equal(task.measurement, loaded.measurement)
        assert (task.n, task.v, task.seed, task.filler_length) == (
            loaded.n, loaded.v, loaded.seed, loaded.filler_length)
        assert task.certificate_rank == loaded.certificate_rank
