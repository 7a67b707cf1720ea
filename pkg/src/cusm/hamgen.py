"""Learnable components that generate the dynamics.

The generator network g is a plain affine-tanh feedforward net mapping the
concatenation [embedding, Re(state), Im(state)] to 2*N*r + N real outputs:
the low-rank factor Phi (real/imag interleaved per entry, column-major over
channels) followed by the diagonal shift delta.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dynamics import InteractionFactors
from .exceptions import ConfigurationError, DegenerateInitializationError
from .numerics import ginibre, make_rng


@dataclass
class InitialStateParams:
    a: np.ndarray
    b: np.ndarray


@dataclass
class EmbeddingTable:
    vectors: np.ndarray  # (V_in, d) real


@dataclass
class MlpParams:
    """Affine-tanh-...-affine net; the final layer is linear."""

    weights: list = field(default_factory=list)  # layer l: (out_l, in_l)
    biases: list = field(default_factory=list)   # layer l: (out_l,)

    @property
    def in_width(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[0]


@dataclass
class FullModelParams:
    init: InitialStateParams
    frequencies: np.ndarray        # lambda, (N,) real
    embed: EmbeddingTable
    mlp: MlpParams
    meas_raw: np.ndarray           # (N, V) complex, pre-projection
    dt: float
    n: int
    r: int
    seed: int = 0

    @property
    def v(self) -> int:
        return self.meas_raw.shape[1]

    @property
    def d(self) -> int:
        return self.embed.vectors.shape[1]


def initial_state(params: InitialStateParams) -> np.ndarray:
    """psi(0) = (a + i b) / ||a + i b||."""
    vec = params.a + 1j * params.b
    norm = np.linalg.norm(vec)
    if norm < 1e-300:
        raise DegenerateInitializationError("initial-state parameter vector is zero")
    return vec / norm


def mlp_forward(mlp: MlpParams, x: np.ndarray) -> np.ndarray:
    y, _ = mlp_forward_cached(mlp, x)
    return y


def mlp_forward_cached(mlp: MlpParams, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Forward pass keeping per-layer inputs for the backward pass."""
    inputs = []
    h = np.asarray(x, dtype=float)
    last = len(mlp.weights) - 1
    for layer, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        if w.shape[1] != h.shape[0]:
            raise ConfigurationError(
                f"layer {layer} expects input width {w.shape[1]}, got {h.shape[0]}"
            )
        inputs.append(h)
        h = w @ h + b
        if layer != last:
            h = np.tanh(h)
    return h, inputs


def mlp_backward(mlp: MlpParams, inputs: list, g_out: np.ndarray):
    """Gradients of a scalar loss wrt weights, biases, and the input vector."""
    g_w = [None] * len(mlp.weights)
    g_b = [None] * len(mlp.biases)
    g = np.asarray(g_out, dtype=float)
    last = len(mlp.weights) - 1
    for layer in range(last, -1, -1):
        h_in = inputs[layer]
        if layer != last:
            # redo the pre-activation to form tanh'(z) = 1 - tanh(z)^2
            z = mlp.weights[layer] @ h_in + mlp.biases[layer]
            g = g * (1.0 - np.tanh(z) ** 2)
        g_w[layer] = np.outer(g, h_in)
        g_b[layer] = g.copy()
        g = mlp.weights[layer].T @ g
    return g_w, g_b, g


def split_factor_output(out: np.ndarray, n: int, r: int) -> InteractionFactors:
    """Fixed output layout: for channel a, then row j, (Re, Im) of Phi[j, a]; then delta."""
    if out.shape[0] != 2 * n * r + n:
        raise ConfigurationError(f"output width {out.shape[0]} != 2*N*r + N = {2 * n * r + n}")
    pairs = out[: 2 * n * r].reshape(r, n, 2)
    phi = (pairs[:, :, 0] + 1j * pairs[:, :, 1]).T  # (N, r)
    delta = out[2 * n * r :]
    return InteractionFactors(phi=phi, delta=delta.copy())


def merge_factor_grads(g_phi: np.ndarray, g_delta: np.ndarray) -> np.ndarray:
    """Adjoint of split_factor_output: complex Phi gradient back to real outputs."""
    r = g_phi.shape[1]
    n = g_phi.shape[0]
    pairs = np.empty((r, n, 2))
    pairs[:, :, 0] = g_phi.real.T
    pairs[:, :, 1] = g_phi.imag.T
    return np.concatenate([pairs.reshape(2 * n * r), g_delta])


def generate_interaction(
    mlp: MlpParams, embed_vec: np.ndarray, state: np.ndarray, r: int
) -> InteractionFactors:
    """Run the generator network on (embedding, Re/Im of state) and assemble (Phi, delta)."""
    n = state.shape[0]
    x = np.concatenate([embed_vec, state.real, state.imag])
    out = mlp_forward(mlp, x)
    return split_factor_output(out, n, r)


def init_mlp(in_width: int, out_width: int, hidden: list[int], seed: int) -> MlpParams:
    """Uniform(+-1/sqrt(fan_in)) weights; final layer scaled down so training
    starts near the free dynamics (small interaction keeps the Cayley solve
    well conditioned)."""
    rng = make_rng(seed, stream=101)
    widths = [in_width] + list(hidden) + [out_width]
    weights, biases = [], []
    for layer in range(len(widths) - 1):
        fan_in = widths[layer]
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(widths[layer + 1], widths[layer]))
        b = np.zeros(widths[layer + 1])
        if layer == len(widths) - 2:
            w = 0.01 * w
        weights.append(w)
        biases.append(b)
    return MlpParams(weights=weights, biases=biases)


def init_full_model(
    n: int,
    r: int,
    d: int,
    v: int,
    v_in: int,
    dt: float = 1.0,
    seed: int = 0,
    hidden: list[int] | None = None,
) -> FullModelParams:
    """Fresh model with the documented defaults (tanh MLP, 2 hidden layers of 4N)."""
    if min(n, r, d, v, v_in) < 1 or v < n:
        raise ConfigurationError(f"bad dims n={n} r={r} d={d} v={v} v_in={v_in}")
    rng = make_rng(seed, stream=100)
    if hidden is None:
        hidden = [4 * n, 4 * n]
    mlp = init_mlp(d + 2 * n, 2 * n * r + n, hidden, seed)
    return FullModelParams(
        init=InitialStateParams(a=rng.standard_normal(n), b=rng.standard_normal(n)),
        frequencies=np.linspace(-np.pi / 2, np.pi / 2, n),
        embed=EmbeddingTable(vectors=rng.standard_normal((v_in, d)) / np.sqrt(d)),
        mlp=mlp,
        meas_raw=ginibre(rng, n, v),
        dt=dt,
        n=n,
        r=r,
        seed=seed,
    )


def _c2l(z: np.ndarray) -> list:
    """Complex array -> nested lists of [re, im] pairs."""
    return np.stack([z.real, z.imag], axis=-1).tolist()


def _l2c(lst) -> np.ndarray:
    arr = np.asarray(lst, dtype=float)
    return arr[..., 0] + 1j * arr[..., 1]


def save_model(model: FullModelParams, path: str) -> None:
    """JSON checkpoint. Field order is fixed: dims, seed, dt, init a/b,
    frequencies, embedding, mlp layers in order, then meas_raw as [re, im]."""
    doc = {
        "schema_version": 1,
        "n": model.n,
        "r": model.r,
        "d": model.d,
        "v": model.v,
        "v_in": model.embed.vectors.shape[0],
        "seed": model.seed,
        "dt": model.dt,
        "init_a": model.init.a.tolist(),
        "init_b": model.init.b.tolist(),
        "frequencies": model.frequencies.tolist(),
        "embed": model.embed.vectors.tolist(),
        "mlp_weights": [w.tolist() for w in model.mlp.weights],
        "mlp_biases": [b.tolist() for b in model.mlp.biases],
        "meas_raw": _c2l(model.meas_raw),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_model(path: str) -> FullModelParams:
    with open(path) as fh:
        doc = json.load(fh)
    return FullModelParams(
        init=InitialStateParams(
            a=np.asarray(doc["init_a"], dtype=float),
            b=np.asarray(doc["init_b"], dtype=float),
        ),
        frequencies=np.asarray(doc["frequencies"], dtype=float),
        embed=EmbeddingTable(vectors=np.asarray(doc["embed"], dtype=float)),
        mlp=MlpParams(
            weights=[np.asarray(w, dtype=float) for w in doc["mlp_weights"]],
            biases=[np.asarray(b, dtype=float) for b in doc["mlp_biases"]],
        ),
        meas_raw=_l2c(doc["meas_raw"]),
        dt=float(doc["dt"]),
        n=int(doc["n"]),
        r=int(doc["r"]),
        seed=int(doc["seed"]),
    )
