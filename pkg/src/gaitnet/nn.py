"""Dense feed-forward networks with hand-written reverse mode and Adam.

Weight matrices are stored ``(out, in)`` so a layer computes ``x @ W.T + b``.
Networks are plain containers; ``forward`` returns an explicit
:class:`ForwardRecord` when gradients are needed, which keeps a trained
network free of hidden mutable state and shareable for inference.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    FormatError,
    FrozenNetworkError,
    NoForwardRecordError,
    NonFiniteError,
    ShapeError,
    VersionError,
)

HIDDEN_ACTIVATIONS = ("relu", "leaky_relu")
OUTPUT_ACTIVATIONS = ("linear", "sigmoid")
LEAKY_SLOPE = 0.01
LOG_SIGMA_MIN, LOG_SIGMA_MAX = -6.0, 2.0

WEIGHT_MAGIC = b"BGNW"
WEIGHT_VERSION = 1

Norm = tuple[np.ndarray, np.ndarray]


@dataclass
class Network:
    layers: list[tuple[np.ndarray, np.ndarray]]
    hidden_activation: str = "relu"
    output_activation: str = "linear"
    leaky_slope: float = LEAKY_SLOPE
    frozen: bool = False
    input_norm: Norm | None = None
    output_norm: Norm | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        for k, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {k}: weight {w.shape} / bias {b.shape} mismatch")
            if k and w.shape[1] != self.layers[k - 1][0].shape[0]:
                raise ShapeError(
                    f"layer {k} expects {w.shape[1]} inputs but layer {k - 1} "
                    f"produces {self.layers[k - 1][0].shape[0]}"
                )
        for name, norm, dim in (
            ("input_norm", self.input_norm, self.n_in),
            ("output_norm", self.output_norm, self.n_out),
        ):
            if norm is not None and (norm[0].shape != (dim,) or norm[1].shape != (dim,)):
                raise ShapeError(f"{name} must hold two vectors of length {dim}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.layers[0][0].shape[1]] + [w.shape[0] for w, _ in self.layers]

    @property
    def n_in(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def n_out(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def dtype(self) -> np.dtype:
        return self.layers[0][0].dtype

    def parameters(self) -> list[np.ndarray]:
        """Flat list ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        return [p for layer in self.layers for p in layer]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def param_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(p).tobytes() for p in self.parameters())

    def copy(self) -> "Network":
        def cp(norm):
            return None if norm is None else (norm[0].copy(), norm[1].copy())

        return Network(
            [(w.copy(), b.copy()) for w, b in self.layers],
            self.hidden_activation,
            self.output_activation,
            self.leaky_slope,
            self.frozen,
            cp(self.input_norm),
            cp(self.output_norm),
            json.loads(json.dumps(self.meta)),
        )

    def astype(self, dtype) -> "Network":
        out = self.copy()
        out.layers = [(w.astype(dtype), b.astype(dtype)) for w, b in out.layers]
        if out.input_norm is not None:
            out.input_norm = tuple(a.astype(dtype) for a in out.input_norm)
        if out.output_norm is not None:
            out.output_norm = tuple(a.astype(dtype) for a in out.output_norm)
        return out

    def check_finite(self) -> None:
        for k, p in enumerate(self.parameters()):
            if not np.all(np.isfinite(p)):
                raise NonFiniteError(f"non-finite value in parameter tensor {k}")


def mlp_new(
    layer_sizes: Sequence[int],
    hidden_act: str = "relu",
    output_act: str = "linear",
    seed: int = 0,
    dtype=np.float64,
) -> Network:
    """Glorot-uniform weights, zero biases; the same seed gives the same bytes."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ShapeError(f"invalid layer sizes {list(layer_sizes)}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype)
        layers.append((w, np.zeros(fan_out, dtype=dtype)))
    return Network(layers, hidden_act, output_act)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class ForwardRecord:
    """Intermediate values of one forward pass, consumed by :func:`backward`."""

    layer_inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]
    output: np.ndarray  # after output activation, before output de-normalization


MIN_KERNEL_ROWS = 64


def _hidden(net: Network, pre: np.ndarray) -> np.ndarray:
    if net.hidden_activation == "relu":
        return np.maximum(pre, 0)
    return np.where(pre > 0, pre, pre * net.leaky_slope)


def forward(net: Network, batch: np.ndarray, record: bool = False):
    """Evaluate the network on a ``(n, in)`` batch.

    Returns the ``(n, out)`` output, or ``(output, ForwardRecord)`` when
    ``record`` is true.
    """
    x = np.asarray(batch)
    if x.ndim != 2 or x.shape[1] != net.n_in:
        raise ShapeError(f"batch of shape {x.shape} does not fit input width {net.n_in}")
    x = x.astype(net.dtype, copy=False)
    n = len(x)
    if not record and 0 < n < MIN_KERNEL_ROWS:
        # small batches take a different BLAS kernel; pad so a row's result
        # never depends on how many rows it was evaluated with
        x = np.concatenate([x, np.zeros((MIN_KERNEL_ROWS - n, x.shape[1]), x.dtype)])
    if net.input_norm is not None:
        x = (x - net.input_norm[0]) / net.input_norm[1]
    inputs, pres = [], []
    a = x
    last = len(net.layers) - 1
    for k, (w, b) in enumerate(net.layers):
        inputs.append(a)
        z = a @ w.T + b
        pres.append(z)
        a = _hidden(net, z) if k < last else z
    if net.output_activation == "sigmoid":
        a = sigmoid(a)
    y = a
    if net.output_norm is not None:
        y = y * net.output_norm[1] + net.output_norm[0]
    if record:
        return y, ForwardRecord(inputs, pres, a)
    return y[:n]


def backward(
    net: Network,
    rec: ForwardRecord | None,
    upstream: np.ndarray,
    param_grads: bool = True,
):
    """Reverse-mode pass through a recorded forward computation.

    Returns ``(grads, input_grad)`` where ``grads`` is a list of ``(dW, db)``
    per layer (``None`` when ``param_grads`` is false). Frozen networks are
    handled identically: gradients flow through, nothing is modified.
    """
    if rec is None:
        raise NoForwardRecordError("backward() needs the record returned by forward(record=True)")
    g = np.asarray(upstream, dtype=net.dtype)
    if g.shape != rec.output.shape:
        raise ShapeError(f"upstream gradient {g.shape} does not match output {rec.output.shape}")
    if net.output_norm is not None:
        g = g * net.output_norm[1]
    if net.output_activation == "sigmoid":
        s = rec.output
        g = g * s * (1.0 - s)
    grads: list | None = [None] * len(net.layers) if param_grads else None
    for k in range(len(net.layers) - 1, -1, -1):
        w, _ = net.layers[k]
        if param_grads:
            grads[k] = (g.T @ rec.layer_inputs[k], g.sum(axis=0))
        g = g @ w
        if k > 0:
            pre = rec.pre_activations[k - 1]
            if net.hidden_activation == "relu":
                g = g * (pre > 0)
            else:
                g = g * np.where(pre > 0, 1.0, net.leaky_slope).astype(net.dtype)
    if net.input_norm is not None:
        g = g / net.input_norm[1]
    return grads, g


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_network(cls, net: Network, learning_rate: float = 1e-5, **kw) -> "AdamState":
        params = net.parameters()
        return cls(
            [np.zeros_like(p) for p in params],
            [np.zeros_like(p) for p in params],
            0,
            learning_rate,
            **kw,
        )


def adam_step(state: AdamState, net: Network, grads) -> None:
    """Apply one bias-corrected Adam update to ``net`` in place."""
    if net.frozen:
        raise FrozenNetworkError("refusing to update a frozen network")
    params = net.parameters()
    flat = [g for pair in grads for g in pair]
    if len(flat) != len(params):
        raise ShapeError(f"expected {len(params)} gradient tensors, got {len(flat)}")
    for k, (p, g) in enumerate(zip(params, flat)):
        if g.shape != p.shape:
            raise ShapeError(f"gradient {k} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(
                f"non-finite gradient in tensor {k} at step {state.step_count + 1}"
            )
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, flat, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    for k, p in enumerate(params):
        if not np.all(np.isfinite(p)):
            raise NonFiniteError(f"parameter tensor {k} became non-finite at step {t}")


def clamp_log_sigma(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clamp a raw log-sigma head; also returns the pass-through gradient mask."""
    clamped = np.clip(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    mask = (raw >= LOG_SIGMA_MIN) & (raw <= LOG_SIGMA_MAX)
    return clamped, mask


def reparam_sample(mu, log_sigma, noise):
    """``mu + exp(log_sigma) * noise``."""
    mu, log_sigma, noise = np.asarray(mu), np.asarray(log_sigma), np.asarray(noise)
    for a in (mu, log_sigma, noise):
        if not np.all(np.isfinite(a)):
            raise NonFiniteError("reparam_sample received non-finite input")
    return mu + np.exp(log_sigma) * noise


def reparam_backward(log_sigma, noise, upstream):
    """Gradients of a reparameterized draw w.r.t. ``(mu, log_sigma)``."""
    return upstream, upstream * np.exp(log_sigma) * noise


def kl_diag_gaussian(mu, log_sigma):
    """KL(N(mu, sigma^2) || N(0, I)), summed over the last axis."""
    mu, log_sigma = np.asarray(mu), np.asarray(log_sigma)
    # expm1 keeps the variance term exact (and non-negative) near log_sigma = 0
    var_term = np.maximum(np.expm1(2.0 * log_sigma) - 2.0 * log_sigma, 0.0)
    return 0.5 * np.sum(mu * mu + var_term, axis=-1)


def kl_diag_gaussian_grad(mu, log_sigma):
    return np.asarray(mu), np.exp(2.0 * np.asarray(log_sigma)) - 1.0


# ---------------------------------------------------------------------------
# weight files


def _norm_to_list(norm):
    return None if norm is None else [norm[0], norm[1]]


def weights_to_bytes(net: Network) -> bytes:
    header = {
        "layer_sizes": net.layer_sizes,
        "hidden_activation": net.hidden_activation,
        "leaky_slope": net.leaky_slope,
        "output_activation": net.output_activation,
        "dtype": np.dtype(net.dtype).name,
        "frozen": net.frozen,
        "has_input_norm": net.input_norm is not None,
        "has_output_norm": net.output_norm is not None,
        "meta": net.meta,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    arrays = net.parameters()
    for norm in (net.input_norm, net.output_norm):
        if norm is not None:
            arrays += list(norm)
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    body = WEIGHT_MAGIC + struct.pack("<II", WEIGHT_VERSION, len(hb)) + hb + payload
    return body + struct.pack("<I", zlib.crc32(body))


def weights_from_bytes(data: bytes, expected_sizes: Sequence[int] | None = None) -> Network:
    if len(data) < 12 or data[:4] != WEIGHT_MAGIC:
        raise FormatError("not a weight file (missing BGNW magic)")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != WEIGHT_VERSION:
        raise VersionError(
            f"weight file version {version} is not supported (this build reads version {WEIGHT_VERSION})"
        )
    if len(data) < 12 + hlen:
        raise FormatError(f"truncated weight file: header needs {12 + hlen} bytes, file has {len(data)}")
    try:
        header = json.loads(data[12 : 12 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt weight header: {exc}") from None
    sizes = header["layer_sizes"]
    n_floats = sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:]))
    n_floats += 2 * sizes[0] * header["has_input_norm"] + 2 * sizes[-1] * header["has_output_norm"]
    need = 12 + hlen + 8 * n_floats + 4
    if len(data) != need:
        raise FormatError(f"truncated or oversized weight file: expected {need} bytes, got {len(data)}")
    (crc,) = struct.unpack_from("<I", data, need - 4)
    if crc != zlib.crc32(data[: need - 4]):
        raise FormatError("weight file checksum mismatch (corrupt payload)")
    if expected_sizes is not None and list(expected_sizes) != list(sizes):
        raise ShapeError(f"weight file has layer sizes {sizes}, expected {list(expected_sizes)}")
    flat = np.frombuffer(data, dtype="<f8", count=n_floats, offset=12 + hlen)
    dtype = np.dtype(header["dtype"])
    pos = 0

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        out = flat[pos : pos + n].reshape(shape).astype(dtype)
        pos += n
        return out

    layers = [(take((o, i)), take((o,))) for i, o in zip(sizes[:-1], sizes[1:])]
    in_norm = (take((sizes[0],)), take((sizes[0],))) if header["has_input_norm"] else None
    out_norm = (take((sizes[-1],)), take((sizes[-1],))) if header["has_output_norm"] else None
    return Network(
        layers,
        header["hidden_activation"],
        header["output_activation"],
        header["leaky_slope"],
        header["frozen"],
        in_norm,
        out_norm,
        header["meta"],
    )


def save_weights(net: Network, path) -> None:
    Path(path).write_bytes(weights_to_bytes(net))


def load_weights(path, expected_sizes: Sequence[int] | None = None) -> Network:
    return weights_from_bytes(Path(path).read_bytes(), expected_sizes)
