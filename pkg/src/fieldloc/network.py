"""Fully connected tanh network with hand-written reverse-mode gradients.

The architecture is dense layers z = tanh(W h + b) with a linear (no
activation) output layer. Gradients are computed analytically so they can be
cross-checked against finite differences; no autodiff framework is involved.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from .dataset import NormStats

# Default architecture: 3 inputs -> 8 hidden layers of 16 units -> 3 outputs.
DEFAULT_HIDDEN_LAYERS = 8
DEFAULT_HIDDEN_UNITS = 16

_CHECKPOINT_MAGIC = b"FLDLOC01"


class ShapeMismatch(Exception):
    """Arrays do not conform to the network architecture."""


@dataclass
class LayerParams:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray  # (out,)


@dataclass
class NetworkParams:
    layers: list

    @property
    def layer_sizes(self) -> list:
        """[input_dim, layer-1 out, ..., output_dim]"""
        sizes = [self.layers[0].weights.shape[1]]
        sizes += [layer.weights.shape[0] for layer in self.layers]
        return sizes

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            [LayerParams(l.weights.copy(), l.biases.copy()) for l in self.layers]
        )


@dataclass
class ForwardTrace:
    """Per-layer inputs cached by forward() for backpropagation.

    layer_inputs[i] is the input to layer i; for i >= 1 it is also the tanh
    activation of layer i-1, which is all backward() needs since
    tanh'(z) = 1 - tanh(z)^2.
    """

    layer_inputs: list
    output: np.ndarray


def layer_sizes_for(
    hidden_layers: int = DEFAULT_HIDDEN_LAYERS,
    hidden_units: int = DEFAULT_HIDDEN_UNITS,
    inputs: int = 3,
    outputs: int = 3,
) -> list:
    return [inputs] + [hidden_units] * hidden_layers + [outputs]


def parameter_count(layer_sizes) -> int:
    return sum(
        n_in * n_out + n_out for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:])
    )


def init_params(seed: int, layer_sizes=None) -> NetworkParams:
    """Glorot-uniform weights, zero biases, deterministic by seed."""
    if layer_sizes is None:
        layer_sizes = layer_sizes_for()
    rng = np.random.default_rng(seed)
    layers = []
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(6.0 / (n_in + n_out))
        weights = rng.uniform(-bound, bound, size=(n_out, n_in))
        layers.append(LayerParams(weights, np.zeros(n_out)))
    return NetworkParams(layers)


def forward(params: NetworkParams, inputs):
    """Evaluate the network; accepts a (3,) vector or an (N, 3) batch.

    Returns (outputs, ForwardTrace). Hidden layers apply tanh, the output
    layer is affine.
    """
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != params.layers[0].weights.shape[1]:
        raise ShapeMismatch(
            f"input dim {h.shape[1]} != network input dim {params.layers[0].weights.shape[1]}"
        )
    # One-row batches are duplicated to two rows before the matmuls: BLAS
    # uses a different kernel for single rows, and per-sample outputs must be
    # identical whether evaluated singly or batched.
    padded = h.shape[0] == 1
    if padded:
        h = np.vstack([h, h])
    last = len(params.layers) - 1
    layer_inputs = []
    for i, layer in enumerate(params.layers):
        layer_inputs.append(h[:1] if padded else h)
        z = h @ layer.weights.T + layer.biases
        h = z if i == last else np.tanh(z)
    if padded:
        h = h[:1]
    trace = ForwardTrace(layer_inputs, h)
    return (h[0] if single else h), trace


def backward(params: NetworkParams, trace: ForwardTrace, output_gradient) -> NetworkParams:
    """Exact reverse-mode gradient w.r.t. every weight and bias.

    output_gradient holds d(scalar objective)/d(network output) per sample;
    the returned gradient is summed over the batch (callers fold any 1/C
    batch averaging into output_gradient).
    """
    g = np.asarray(output_gradient, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != trace.output.shape:
        raise ShapeMismatch(
            f"output gradient shape {g.shape} != forward output shape {trace.output.shape}"
        )
    delta = g
    grads = [None] * len(params.layers)
    for i in reversed(range(len(params.layers))):
        h_in = trace.layer_inputs[i]
        grads[i] = LayerParams(delta.T @ h_in, delta.sum(axis=0))
        if i > 0:
            # h_in is the tanh activation of layer i-1, so 1 - h_in^2 is its
            # activation derivative.
            delta = (delta @ params.layers[i].weights) * (1.0 - h_in * h_in)
    return NetworkParams(grads)


def flatten_params(params: NetworkParams) -> np.ndarray:
    chunks = []
    for layer in params.layers:
        chunks.append(layer.weights.ravel())
        chunks.append(layer.biases.ravel())
    return np.concatenate(chunks)


def unflatten_params(vector, layer_sizes) -> NetworkParams:
    v = np.asarray(vector, dtype=np.float64)
    expected = parameter_count(layer_sizes)
    if v.shape != (expected,):
        raise ShapeMismatch(f"expected a flat vector of {expected} parameters, got shape {v.shape}")
    layers = []
    offset = 0
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        weights = v[offset:offset + n_in * n_out].reshape(n_out, n_in).copy()
        offset += n_in * n_out
        biases = v[offset:offset + n_out].copy()
        offset += n_out
        layers.append(LayerParams(weights, biases))
    return NetworkParams(layers)


def save_checkpoint(path, params: NetworkParams, stats: NormStats) -> None:
    """Self-contained model file: architecture, parameters, and the
    normalization stats that were in force at train time.

    Layout: 8-byte magic, uint32 little-endian header length, JSON header,
    then the flat parameter vector as little-endian float64.
    """
    header = {
        "version": 1,
        "layer_sizes": params.layer_sizes,
        "stats": stats.as_mapping(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("ascii")
    blob = flatten_params(params).astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(blob)


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns (NetworkParams, NormStats)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint (bad magic {magic!r})")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("ascii"))
        if header.get("version") != 1:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        layer_sizes = header["layer_sizes"]
        count = parameter_count(layer_sizes)
        vector = np.frombuffer(fh.read(count * 8), dtype="<f8").astype(np.float64)
    params = unflatten_params(vector, layer_sizes)
    stats = NormStats.from_mapping(header["stats"])
    return params, stats
