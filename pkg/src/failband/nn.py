"""Small feed-forward networks with hand-written backprop and Adam.

Everything here works on row-major batches: an input batch has shape
``(n, in_dim)`` and a single vector of shape ``(in_dim,)`` is promoted to a
batch of one.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

MAGIC = b"FBND"
FORMAT_VERSION = 1


class Activation(str, Enum):
    SMOOTH_RELU = "smooth_relu"
    TANH = "tanh"
    IDENTITY = "identity"

    @property
    def code(self) -> int:
        return _ACT_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "Activation":
        for act, c in _ACT_CODES.items():
            if c == code:
                return act
        raise ValueError(f"unknown activation code {code}")


_ACT_CODES = {Activation.SMOOTH_RELU: 0, Activation.TANH: 1, Activation.IDENTITY: 2}


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _act(act: Activation, z: np.ndarray) -> np.ndarray:
    if act is Activation.SMOOTH_RELU:
        return z * _sigmoid(z)
    if act is Activation.TANH:
        return np.tanh(z)
    return z


def _act_grad(act: Activation, z: np.ndarray) -> np.ndarray:
    if act is Activation.SMOOTH_RELU:
        sg = _sigmoid(z)
        return sg * (1.0 + z * (1.0 - sg))
    if act is Activation.TANH:
        return 1.0 - np.tanh(z) ** 2
    return np.ones_like(z)


@dataclass
class Mlp:
    """Fully connected network; hidden layers share one activation, output is linear.

    ``weights[i]`` has shape ``(layer_dims[i + 1], layer_dims[i])``.
    """

    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: Activation = Activation.SMOOTH_RELU

    def __post_init__(self) -> None:
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        self.activation = Activation(self.activation)
        if len(self.layer_dims) < 2:
            raise ValueError("an Mlp needs at least an input and an output dimension")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("number of weight/bias arrays does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.layer_dims[i + 1], self.layer_dims[i])
            if w.shape != expect or b.shape != (expect[0],):
                raise ValueError(f"layer {i}: got W{w.shape}, b{b.shape}, expected W{expect}")

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in storage order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "Mlp":
        return Mlp(
            self.layer_dims,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = np.atleast_2d(x)
        if h.shape[1] != self.in_dim:
            raise ValueError(f"input has dim {h.shape[1]}, network expects {self.in_dim}")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i < last:
                h = _act(self.activation, h)
        return h[0] if single else h

    __call__ = forward

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
        """Batch forward pass that keeps (layer input, pre-activation) pairs for :meth:`backward`."""
        h = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if h.shape[1] != self.in_dim:
            raise ValueError(f"input has dim {h.shape[1]}, network expects {self.in_dim}")
        cache = []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            cache.append((h, z))
            h = _act(self.activation, z) if i < last else z
        return h, cache

    def backward(
        self, cache: list[tuple[np.ndarray, np.ndarray]], grad_out: np.ndarray, want_input: bool = False
    ) -> list[np.ndarray] | tuple[list[np.ndarray], np.ndarray]:
        """Reverse pass given dL/d(output).

        Returns gradients in :meth:`params` order, and optionally dL/d(input).
        """
        g = np.atleast_2d(grad_out)
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))  # type: ignore[list-item]
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            h_in, z = cache[i]
            if i < last:
                g = g * _act_grad(self.activation, z)
            grads[2 * i] = g.T @ h_in
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0 or want_input:
                g = g @ self.weights[i]
        if want_input:
            return grads, g
        return grads


def init_mlp(
    layer_dims: Sequence[int],
    activation: Activation | str = Activation.SMOOTH_RELU,
    seed: int = 0,
) -> Mlp:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise ValueError(f"need at least 2 layer dims, got {dims}")
    if any(d < 1 for d in dims):
        raise ValueError(f"layer dims must be positive, got {dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return Mlp(tuple(dims), weights, biases, Activation(activation))


def loss_and_grad(
    mlp: Mlp, inputs: np.ndarray, targets: np.ndarray, loss: str = "mse"
) -> tuple[float, list[np.ndarray]]:
    """Mean over the batch of the squared error summed over output dims."""
    if loss != "mse":
        raise ValueError(f"unsupported loss {loss!r}")
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    out, cache = mlp.forward_cached(inputs)
    if targets.shape != out.shape:
        raise ValueError(f"targets shape {targets.shape} does not match output shape {out.shape}")
    n = out.shape[0]
    resid = out - targets
    value = float(np.sum(resid**2) / n)
    grads = mlp.backward(cache, 2.0 * resid / n)
    return value, grads


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_model(cls, mlp: Mlp, lr: float = 1e-3, **kw) -> "AdamState":
        return cls(
            lr=lr,
            m=[np.zeros_like(p) for p in mlp.params()],
            v=[np.zeros_like(p) for p in mlp.params()],
            **kw,
        )


def adam_step(mlp: Mlp, grads: Sequence[np.ndarray], state: AdamState) -> None:
    """In-place Adam update with bias correction."""
    params = mlp.params()
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ValueError("gradient/moment count does not match the parameters")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- binary model file -------------------------------------------------------


def write_mlp(mlp: Mlp, fh: BinaryIO) -> None:
    n_layers = len(mlp.weights)
    fh.write(MAGIC)
    fh.write(struct.pack("<IBI", FORMAT_VERSION, mlp.activation.code, n_layers))
    fh.write(struct.pack(f"<{n_layers + 1}I", *mlp.layer_dims))
    for w in mlp.weights:
        fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
    for b in mlp.biases:
        fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ValueError("truncated model file")
    return data


def read_mlp(fh: BinaryIO) -> Mlp:
    if _read_exact(fh, 4) != MAGIC:
        raise ValueError("not an FBND model (bad magic)")
    version, act_code, n_layers = struct.unpack("<IBI", _read_exact(fh, 9))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model version {version}")
    dims = struct.unpack(f"<{n_layers + 1}I", _read_exact(fh, 4 * (n_layers + 1)))
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        buf = _read_exact(fh, 8 * fan_in * fan_out)
        weights.append(np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(fan_out, fan_in))
    for fan_out in dims[1:]:
        buf = _read_exact(fh, 8 * fan_out)
        biases.append(np.frombuffer(buf, dtype="<f8").astype(np.float64))
    return Mlp(tuple(dims), weights, biases, Activation.from_code(act_code))


def save_mlp(mlp: Mlp, path: str | Path) -> None:
    with open(path, "wb") as fh:
        write_mlp(mlp, fh)


def load_mlp(path: str | Path) -> Mlp:
    with open(path, "rb") as fh:
        return read_mlp(fh)


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Yield index arrays covering a fresh permutation of ``range(n)``."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


# -- multi-section container ---------------------------------------------------
#
# Layout: b"FBNC", u32 version, u32 n_sections, then per section
#   u8 kind (0 = mlp, 1 = f64 array, 2 = utf-8 json), u16 name length, name,
#   u64 payload length, payload.
# Mlp payloads are the single-model format above, so sections can be cut out
# and read with read_mlp directly.

CONTAINER_MAGIC = b"FBNC"
_KIND_MLP, _KIND_ARRAY, _KIND_JSON = 0, 1, 2


def _encode_section(value) -> tuple[int, bytes]:
    if isinstance(value, Mlp):
        buf = io.BytesIO()
        write_mlp(value, buf)
        return _KIND_MLP, buf.getvalue()
    if isinstance(value, np.ndarray):
        arr = np.ascontiguousarray(value, dtype="<f8")
        head = struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
        return _KIND_ARRAY, head + arr.tobytes()
    return _KIND_JSON, json.dumps(value, sort_keys=True).encode("utf-8")


def save_container(path: str | Path, sections: dict) -> None:
    """Write named sections (Mlp, ndarray or JSON-able value) to one file."""
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(sections)))
        for name, value in sections.items():
            kind, payload = _encode_section(value)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<BH", kind, len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def load_container(path: str | Path) -> dict:
    out: dict = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CONTAINER_MAGIC:
            raise ValueError(f"{path}: not a model container (bad magic)")
        version, n = struct.unpack("<II", _read_exact(fh, 8))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        for _ in range(n):
            kind, name_len = struct.unpack("<BH", _read_exact(fh, 3))
            name = _read_exact(fh, name_len).decode("utf-8")
            (size,) = struct.unpack("<Q", _read_exact(fh, 8))
            payload = _read_exact(fh, size)
            if kind == _KIND_MLP:
                out[name] = read_mlp(io.BytesIO(payload))
            elif kind == _KIND_ARRAY:
                (ndim,) = struct.unpack_from("<I", payload)
                shape = struct.unpack_from(f"<{ndim}I", payload, 4)
                data = np.frombuffer(payload, dtype="<f8", offset=4 + 4 * ndim)
                out[name] = data.astype(np.float64).reshape(shape)
            elif kind == _KIND_JSON:
                out[name] = json.loads(payload.decode("utf-8"))
            else:
                raise ValueError(f"{path}: unknown section kind {kind}")
    return out
