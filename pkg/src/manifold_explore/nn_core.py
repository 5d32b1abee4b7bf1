"""Dense feed-forward noise-predictor network with exact derivatives.

Parameters live in one flat float64 vector. For every layer ``l`` (input
layer first) the layout is ``W_l`` in row-major order with shape
``(fan_out, fan_in)`` followed by the bias ``b_l`` of length ``fan_out``.

The network input is ``concat(x, embed(t))`` where ``embed`` is one of

* ``"none"``: no time features (used for purely spatial test networks),
* ``"scalar"``: the normalized time ``t`` appended as one feature,
* ``"sinusoidal"``: ``[t, sin(pi 2^j t), cos(pi 2^j t) for j = 0..k-1]``.

Batches use a mean reduction, so a duplicated batch has the same loss and
gradient as the original one.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

ACTIVATIONS = ("silu", "tanh", "identity")
TIME_EMBEDDINGS = ("none", "scalar", "sinusoidal")

CHECKPOINT_MAGIC = b"MXEXCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    """Shape of a noise-predictor MLP.

    ``input_dim`` counts state and time-embedding features together and must
    equal ``output_dim + embedding_dim``.
    """

    input_dim: int
    hidden_layers: tuple[int, ...]
    output_dim: int
    activation: str = "silu"
    time_embedding: str = "sinusoidal"
    n_frequencies: int = 8

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if not self.hidden_layers or any(h <= 0 for h in self.hidden_layers):
            raise ValueError("hidden_layers must be a non-empty list of positive widths")
        if self.output_dim <= 0 or self.input_dim <= 0:
            raise ValueError("input_dim and output_dim must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.time_embedding not in TIME_EMBEDDINGS:
            raise ValueError(f"unknown time embedding {self.time_embedding!r}")
        if self.input_dim != self.output_dim + self.embedding_dim:
            raise ValueError(
                f"input_dim={self.input_dim} but state dim {self.output_dim} + "
                f"embedding dim {self.embedding_dim} = {self.output_dim + self.embedding_dim}"
            )

    @classmethod
    def for_state(cls, state_dim, hidden_layers=(128, 128, 128), activation="silu",
                  time_embedding="sinusoidal", n_frequencies=8):
        emb = embedding_dim(time_embedding, n_frequencies)
        return cls(state_dim + emb, tuple(hidden_layers), state_dim, activation,
                   time_embedding, n_frequencies)

    @property
    def state_dim(self) -> int:
        return self.output_dim

    @property
    def embedding_dim(self) -> int:
        return embedding_dim(self.time_embedding, self.n_frequencies)

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        widths = [self.input_dim, *self.hidden_layers, self.output_dim]
        return [(widths[i + 1], widths[i]) for i in range(len(widths) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_layers": list(self.hidden_layers),
            "output_dim": self.output_dim,
            "activation": self.activation,
            "time_embedding": self.time_embedding,
            "n_frequencies": self.n_frequencies,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(d["input_dim"], tuple(d["hidden_layers"]), d["output_dim"],
                   d["activation"], d["time_embedding"], d.get("n_frequencies", 8))


def embedding_dim(kind: str, n_frequencies: int = 8) -> int:
    if kind == "none":
        return 0
    if kind == "scalar":
        return 1
    if kind == "sinusoidal":
        return 1 + 2 * n_frequencies
    raise ValueError(f"unknown time embedding {kind!r}")


def embed_time(spec: NetworkSpec, t, n: int) -> np.ndarray:
    """Time features of shape ``(n, embedding_dim)``."""
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    if spec.time_embedding == "none":
        return np.empty((n, 0))
    if spec.time_embedding == "scalar":
        return t[:, None].copy()
    freqs = np.pi * 2.0 ** np.arange(spec.n_frequencies)
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([t[:, None], np.sin(angles), np.cos(angles)], axis=1)


def unpack(params: np.ndarray, spec: NetworkSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views ``(W, b)`` into the flat parameter vector."""
    params = np.asarray(params)
    if params.shape != (spec.n_params,):
        raise ValueError(f"expected {spec.n_params} parameters, got shape {params.shape}")
    layers = []
    off = 0
    for o, i in spec.layer_shapes:
        W = params[off:off + o * i].reshape(o, i)
        off += o * i
        b = params[off:off + o]
        off += o
        layers.append((W, b))
    return layers


def init_network(spec: NetworkSpec, seed) -> np.ndarray:
    """Fan-in scaled Gaussian weights ``N(0, 1/fan_in)``, zero biases."""
    rng = np.random.default_rng(seed)
    params = np.zeros(spec.n_params)
    for W, _ in unpack(params, spec):
        W[...] = rng.standard_normal(W.shape) / np.sqrt(W.shape[1])
    return params


def _act(kind, z):
    if kind == "silu":
        s = 0.5 * (1.0 + np.tanh(0.5 * z))
        return z * s, s * (1.0 + z * (1.0 - s))
    if kind == "tanh":
        a = np.tanh(z)
        return a, 1.0 - a * a
    return z, np.ones_like(z)


def _as_batch(spec, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != spec.state_dim:
        raise ValueError(f"state must have trailing dimension {spec.state_dim}, got {x.shape}")
    return x2, single


def _forward_cache(params, spec, x2, t):
    n = x2.shape[0]
    h = np.concatenate([x2, embed_time(spec, t, n)], axis=1)
    layers = unpack(params, spec)
    inputs, derivs = [], []
    for l, (W, b) in enumerate(layers):
        inputs.append(h)
        z = h @ W.T + b
        if l == len(layers) - 1:
            return z, inputs, derivs, layers
        h, d = _act(spec.activation, z)
        derivs.append(d)


def forward(params, spec: NetworkSpec, x, t) -> np.ndarray:
    """Network output for a single state ``(d,)`` or a batch ``(n, d)``.

    ``t`` is normalized time in [0, 1], scalar or one value per row.
    """
    x2, single = _as_batch(spec, x)
    out = _forward_cache(params, spec, x2, t)[0]
    return out[0] if single else out


def _backward(spec, inputs, derivs, layers, dout):
    """Parameter gradient and input-cotangent for an output cotangent ``dout``."""
    grads = []
    g = dout
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        grads.append((g.T @ inputs[l], g.sum(axis=0)))
        g = g @ W
        if l > 0:
            g = g * derivs[l - 1]
    flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in reversed(grads)])
    return flat, g


def loss_and_grad(params, spec: NetworkSpec, x, t, target, weight=None):
    """Weighted mean squared error and its parameter gradient.

    loss = mean_i weight_i * ||forward(x_i, t_i) - target_i||^2
    """
    x2, _ = _as_batch(spec, x)
    target = np.asarray(target, dtype=np.float64).reshape(x2.shape[0], spec.output_dim)
    n = x2.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    w = np.ones(n) if weight is None else np.broadcast_to(np.asarray(weight, dtype=np.float64), (n,))
    if not (np.all(np.isfinite(x2)) and np.all(np.isfinite(target)) and np.all(np.isfinite(w))):
        raise FloatingPointError("non-finite value in batch inputs")
    out, inputs, derivs, layers = _forward_cache(params, spec, x2, t)
    r = out - target
    loss = float(np.mean(w * np.sum(r * r, axis=1)))
    grad, _ = _backward(spec, inputs, derivs, layers, (2.0 / n) * w[:, None] * r)
    return loss, grad


def grad_params(params, spec: NetworkSpec, x, t, target, weight=None) -> np.ndarray:
    return loss_and_grad(params, spec, x, t, target, weight)[1]


def input_vjp(params, spec: NetworkSpec, x, t, cotangent) -> np.ndarray:
    """``cotangent^T d forward / d x`` with time-embedding columns dropped."""
    x2, single = _as_batch(spec, x)
    cot = np.asarray(cotangent, dtype=np.float64)
    cot2 = cot[None, :] if cot.ndim == 1 else cot
    if cot2.shape != (x2.shape[0], spec.output_dim):
        raise ValueError(f"cotangent shape {cot.shape} does not match output ({x2.shape[0]}, {spec.output_dim})")
    _, inputs, derivs, layers = _forward_cache(params, spec, x2, t)
    g = cot2
    for l in range(len(layers) - 1, -1, -1):
        g = g @ layers[l][0]
        if l > 0:
            g = g * derivs[l - 1]
    g = g[:, :spec.state_dim]
    return g[0] if single else g


def forward_and_jacobian(params, spec: NetworkSpec, x, t):
    """Output ``(n, d_out)`` and state Jacobian ``(n, d_out, d)`` by forward-mode propagation."""
    x2, _ = _as_batch(spec, x)
    n, d = x2.shape
    h = np.concatenate([x2, embed_time(spec, t, n)], axis=1)
    # tangent[i, j, :] = d h_i / d x_j
    tangent = np.zeros((n, d, spec.input_dim))
    tangent[:, np.arange(d), np.arange(d)] = 1.0
    layers = unpack(params, spec)
    for l, (W, b) in enumerate(layers):
        z = h @ W.T + b
        tz = tangent @ W.T
        if l == len(layers) - 1:
            return z, np.swapaxes(tz, 1, 2)
        h, dz = _act(spec.activation, z)
        tangent = tz * dz[:, None, :]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, n_params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(np.zeros(n_params), np.zeros(n_params), 0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, params, grad, lr=None):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``.

    ``lr`` overrides the state's learning rate for this step only (schedules).
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.m.shape or np.shape(params) != state.m.shape:
        raise ValueError("params, grad and Adam moments must share one shape")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** step)
    v_hat = v / (1.0 - state.beta2 ** step)
    rate = state.lr if lr is None else lr
    new_params = params - rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, step=step)


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: np.ndarray
    meta: dict = field(default_factory=dict)


def dumps_checkpoint(spec: NetworkSpec, params, meta=None) -> bytes:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.n_params,):
        raise ValueError("parameter vector does not match spec")
    header = json.dumps({"network": spec.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    buf.write(params.astype("<f8").tobytes())
    return buf.getvalue()


def loads_checkpoint(blob: bytes) -> Checkpoint:
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", blob, off)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off += 8
    header = json.loads(blob[off:off + hlen].decode())
    off += hlen
    spec = NetworkSpec.from_dict(header["network"])
    params = np.frombuffer(blob, dtype="<f8", offset=off).astype(np.float64)
    if params.shape != (spec.n_params,):
        raise ValueError(f"checkpoint holds {params.size} parameters, spec needs {spec.n_params}")
    return Checkpoint(spec, params, header.get("meta", {}))


def save_checkpoint(path, spec: NetworkSpec, params, meta=None) -> None:
    Path(path).write_bytes(dumps_checkpoint(spec, params, meta))


def load_checkpoint(path) -> Checkpoint:
    return loads_checkpoint(Path(path).read_bytes())
