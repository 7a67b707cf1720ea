import numpy as np
import pytest

from cusm.exceptions import ConfigurationError, DegenerateInitializationError
from cusm.hamgen import (
    InitialStateParams,
    MlpParams,
    generate_interaction,
    init_full_model,
    initial_state,
    load_model,
    merge_factor_grads,
    mlp_forward,
    save_model,
    split_factor_output,
)
from cusm.numerics import make_rng


class TestInitialState:
    def test_basis_vector(self):
        psi = initial_state(InitialStateParams(a=np.array([1.0, 0.0]), b=np.zeros(2)))
        assert np.array_equal(psi, np.array([1.0 + 0j, 0.0]))

    def test_complex_combination(self):
        psi = initial_state(InitialStateParams(a=np.array([1.0, 0.0]), b=np.array([0.0, 1.0])))
        assert np.abs(psi - np.array([1.0, 1j]) / np.sqrt(2.0)).max() < 1e-15

    def test_unit_norm(self):
        rng = make_rng(1)
        for _ in range(20):
            psi = initial_state(InitialStateParams(a=rng.standard_normal(5),
                                                   b=rng.standard_normal(5)))
            assert abs(np.linalg.norm(psi) - 1.0) < 1e-15

    def test_scale_invariance(self):
        rng = make_rng(2)
        a, b = rng.standard_normal(4), rng.standard_normal(4)
        p1 = initial_state(InitialStateParams(a=a, b=b))
        p2 = initial_state(InitialStateParams(a=3.0 * a, b=3.0 * b))
        assert np.abs(p1 - p2).max() < 1e-15

    def test_zero_rejected(self):
        with pytest.raises(DegenerateInitializationError):
            initial_state(InitialStateParams(a=np.zeros(3), b=np.zeros(3)))


class TestMlpForward:
    def test_zero_everything(self):
        mlp = MlpParams(weights=[np.zeros((3, 2)), np.zeros((4, 3))],
                        biases=[np.zeros(3), np.zeros(4)])
        assert np.array_equal(mlp_forward(mlp, np.zeros(2)), np.zeros(4))

    def test_single_identity_layer(self):
        mlp = MlpParams(weights=[np.eye(3)], biases=[np.zeros(3)])
        x = np.array([0.2, -1.0, 4.0])
        assert np.array_equal(mlp_forward(mlp, x), x)

    def test_scalar_recomputation(self):
        w0 = np.array([[0.5, -0.3], [1.2, 0.1]])
        b0 = np.array([0.05, -0.2])
        w1 = np.array([[2.0, -1.0]])
        b1 = np.array([0.7])
        mlp = MlpParams(weights=[w0, w1], biases=[b0, b1])
        x = np.array([0.9, -0.4])
        hidden = np.tanh(w0 @ x + b0)
        expected = w1 @ hidden + b1
        assert np.abs(mlp_forward(mlp, x) - expected).max() < 1e-14

    def test_width_mismatch(self):
        mlp = MlpParams(weights=[np.eye(3)], biases=[np.zeros(3)])
        with pytest.raises(ConfigurationError):
            mlp_forward(mlp, np.zeros(2))


class TestFactorLayout:
    def test_split_shapes(self):
        n, r = 3, 2
        out = np.arange(2 * n * r + n, dtype=float)
        f = split_factor_output(out, n, r)
        assert f.phi.shape == (n, r)
        assert f.delta.shape == (n,)
        # channel 0, row 0 holds the first (re, im) pair
        assert f.phi[0, 0] == 0.0 + 1.0j
        assert np.array_equal(f.delta, out[2 * n * r:])

    def test_merge_is_adjoint_of_split(self):
        # <merge(gp, gd), out> must equal Re<gp, phi> + <gd, delta>
        rng = make_rng(3)
        n, r = 4, 3
        out = rng.standard_normal(2 * n * r + n)
        f = split_factor_output(out, n, r)
        g_phi = rng.standard_normal((n, r)) + 1j * rng.standard_normal((n, r))
        g_delta = rng.standard_normal(n)
        merged = merge_factor_grads(g_phi, g_delta)
        lhs = merged @ out
        rhs = np.sum(np.real(np.conj(g_phi) * f.phi)) + g_delta @ f.delta
        assert abs(lhs - rhs) < 1e-12

    def test_bad_width(self):
        with pytest.raises(ConfigurationError):
            split_factor_output(np.zeros(7), 3, 2)


class TestGenerateInteraction:
    def test_zero_params(self):
        model = init_full_model(n=3, r=2, d=2, v=4, v_in=3, seed=0)
        for w in model.mlp.weights:
            w[:] = 0.0
        psi = initial_state(model.init)
        f = generate_interaction(model.mlp, model.embed.vectors[0], psi, model.r)
        assert np.abs(f.phi).max() == 0.0
        assert np.abs(f.delta).max() == 0.0

    def test_hermitian_over_many_draws(self):
        rng = make_rng(4)
        for draw in range(1000):
            model = init_full_model(n=3, r=2, d=2, v=4, v_in=3, seed=draw, hidden=[5])
            psi = initial_state(model.init)
            x = rng.standard_normal(2)
            f = generate_interaction(model.mlp, x, psi, model.r)
            h = f.materialize()
            assert np.abs(h - h.conj().T).max() < 1e-12


class TestSerialization:
    def test_roundtrip_exact(self, tmp_path):
        model = init_full_model(n=3, r=2, d=2, v=9, v_in=5, dt=0.5, seed=17)
        path = str(tmp_path / "model.json")
        save_model(model, path)
        loaded = load_model(path)
        assert np.array_equal(model.init.a, loaded.init.a)
        assert np.array_equal(model.frequencies, loaded.frequencies)
        assert np.array_equal(model.embed.vectors, loaded.embed.vectors)
        for w1, w2 in zip(model.mlp.weights, loaded.mlp.weights):
            assert np.array_equal(w1, w2)
        assert np.array_equal(model.meas_raw, loaded.meas_raw)
        assert (model.n, model.r, model.dt, model.seed) == (
            loaded.n, loaded.r, loaded.dt, loaded.seed)

    def test_bad_dims_rejected(self):
        with pytest.raises(ConfigurationError):
            init_full_model(n=0, r=1, d=1, v=1, v_in=1)
