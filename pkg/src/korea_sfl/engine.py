"""Minimal float64 MLP engine with an explicit client/server split.

Parameters of a network segment live in one flat vector laid out layer by
layer as ``W`` (``in_dim x out_dim``, row-major) followed by ``b``.  Forward
passes return their caches as values so the engine has no hidden state.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from korea_sfl import rng as rngs

ACTIVATIONS = ("relu", "identity")


class ContractError(ValueError):
    """Raised when an operation's precondition does not hold."""


class DivergenceError(RuntimeError):
    """Raised when training produces non-finite values."""

    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ContractError(f"layer dims must be positive, got {self.in_dim}x{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")

    @property
    def param_count(self) -> int:
        return self.in_dim * self.out_dim + self.out_dim


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    num_classes: int
    split_at: int

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if len(layers) < 2:
            raise ContractError("a split network needs at least two layers")
        for k in range(len(layers) - 1):
            if layers[k].out_dim != layers[k + 1].in_dim:
                raise ContractError(
                    f"layer {k} out_dim {layers[k].out_dim} != layer {k + 1} in_dim {layers[k + 1].in_dim}"
                )
        if layers[-1].out_dim != self.num_classes:
            raise ContractError(f"last out_dim {layers[-1].out_dim} != num_classes {self.num_classes}")
        if layers[-1].activation != "identity":
            raise ContractError("final layer must use identity activation")
        if not 1 <= self.split_at <= len(layers) - 1:
            raise ContractError(f"split_at must lie in [1, {len(layers) - 1}], got {self.split_at}")

    @classmethod
    def mlp(cls, dims: Sequence[int], split_at: int) -> "NetworkSpec":
        """ReLU MLP over ``dims`` (input, hidden..., classes) with identity logits."""
        dims = list(dims)
        if len(dims) < 3:
            raise ContractError("dims must list input, at least one hidden width, and classes")
        layers = tuple(
            LayerSpec(dims[k], dims[k + 1], "identity" if k == len(dims) - 2 else "relu")
            for k in range(len(dims) - 1)
        )
        return cls(layers, dims[-1], split_at)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def feature_dim(self) -> int:
        return self.layers[self.split_at - 1].out_dim

    def segment(self, side: str) -> tuple[LayerSpec, ...]:
        if side == "client":
            return self.layers[: self.split_at]
        if side == "server":
            return self.layers[self.split_at :]
        if side == "full":
            return self.layers
        raise ContractError(f"unknown side {side!r}")

    def param_count(self, side: str = "full") -> int:
        return sum(layer.param_count for layer in self.segment(side))

    @property
    def spec_hash(self) -> str:
        desc = [[l.in_dim, l.out_dim, l.activation] for l in self.layers] + [self.split_at]
        return hashlib.sha1(json.dumps(desc).encode()).hexdigest()[:12]

    def segment_hash(self, side: str) -> str:
        return f"{self.spec_hash}:{side}"


@dataclass(frozen=True)
class ParamVector:
    values: np.ndarray
    spec_hash: str

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class SplitModel:
    client_portion: ParamVector
    server_portion: ParamVector
    spec: NetworkSpec

    def __post_init__(self):
        total = len(self.client_portion) + len(self.server_portion)
        if total != self.spec.param_count("full"):
            raise ContractError(f"portions hold {total} params, spec needs {self.spec.param_count('full')}")

    def full(self) -> np.ndarray:
        return np.concatenate([self.client_portion.values, self.server_portion.values])


@dataclass(frozen=True)
class SegmentCache:
    """Per-layer inputs, pre-activations and weight views of one forward pass."""

    spec_hash: str
    inputs: tuple[np.ndarray, ...]
    pre: tuple[np.ndarray, ...]
    weights: tuple[np.ndarray, ...]
    activations: tuple[str, ...]


@dataclass(frozen=True)
class ServerCache:
    segment: SegmentCache
    labels: np.ndarray
    probs: np.ndarray


def _unpack(values: np.ndarray, layers: Sequence[LayerSpec]) -> list[tuple[np.ndarray, np.ndarray]]:
    out, pos = [], 0
    for layer in layers:
        nw = layer.in_dim * layer.out_dim
        w = values[pos : pos + nw].reshape(layer.in_dim, layer.out_dim)
        b = values[pos + nw : pos + nw + layer.out_dim]
        out.append((w, b))
        pos += nw + layer.out_dim
    return out


def _check_portion(portion: ParamVector, spec: NetworkSpec, side: str) -> None:
    expected = spec.param_count(side)
    if len(portion) != expected:
        raise ContractError(f"{side} portion has {len(portion)} params, expected {expected}")
    if portion.spec_hash != spec.segment_hash(side):
        raise ContractError(f"{side} portion is bound to {portion.spec_hash}, not {spec.segment_hash(side)}")


def _check_input(x: np.ndarray, dim: int, what: str) -> None:
    if x.ndim != 2 or x.shape[1] != dim:
        raise ContractError(f"{what} expected shape [B, {dim}], got {list(x.shape)}")


def _forward_segment(values, layers, x, spec_hash) -> tuple[np.ndarray, SegmentCache]:
    inputs, pre, weights = [], [], []
    h = x
    for (w, b), layer in zip(_unpack(values, layers), layers):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        weights.append(w)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
    cache = SegmentCache(spec_hash, tuple(inputs), tuple(pre), tuple(weights),
                         tuple(l.activation for l in layers))
    return h, cache


def _backward_segment(cache: SegmentCache, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (flat parameter gradient, gradient w.r.t. the segment input)."""
    parts = []
    d = grad_out
    for k in range(len(cache.pre) - 1, -1, -1):
        if cache.activations[k] == "relu":
            d = d * (cache.pre[k] > 0)
        gw = cache.inputs[k].T @ d
        gb = d.sum(axis=0)
        parts.append((gw.ravel(), gb))
        d = d @ cache.weights[k].T
    flat = np.concatenate([p for pair in reversed(parts) for p in pair])
    return flat, d


def _softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    probs = np.exp(shifted - lse[:, None])
    loss = float(np.mean(lse - shifted[np.arange(len(labels)), labels]))
    return loss, probs


def _check_labels(labels: np.ndarray, num_classes: int, rows: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (rows,):
        raise ContractError(f"expected {rows} labels, got shape {list(labels.shape)}")
    if rows and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"labels must lie in [0, {num_classes})")
    return labels.astype(np.int64, copy=False)


def forward_client(client_portion: ParamVector, spec: NetworkSpec, batch_x: np.ndarray):
    """Client-side forward pass; returns ``(features, cache)``."""
    _check_portion(client_portion, spec, "client")
    _check_input(batch_x, spec.input_dim, "batch_x")
    return _forward_segment(client_portion.values, spec.segment("client"), batch_x,
                            spec.segment_hash("client"))


def forward_server(server_portion: ParamVector, spec: NetworkSpec, features: np.ndarray, labels):
    """Server-side forward pass and mean softmax cross-entropy.

    Returns ``(loss, logits, cache)``.
    """
    _check_portion(server_portion, spec, "server")
    _check_input(features, spec.feature_dim, "features")
    labels = _check_labels(labels, spec.num_classes, features.shape[0])
    logits, seg = _forward_segment(server_portion.values, spec.segment("server"), features,
                                   spec.segment_hash("server"))
    loss, probs = _softmax_xent(logits, labels)
    return loss, logits, ServerCache(seg, labels, probs)


def backward_server(cache: ServerCache, labels=None) -> tuple[ParamVector, np.ndarray]:
    """Gradient of the mean loss w.r.t. the server portion and the input features."""
    if labels is not None and not np.array_equal(np.asarray(labels), cache.labels):
        raise ContractError("labels do not match the server cache")
    rows = cache.labels.shape[0]
    dlogits = cache.probs.copy()
    dlogits[np.arange(rows), cache.labels] -= 1.0
    dlogits /= rows
    flat, dfeat = _backward_segment(cache.segment, dlogits)
    return ParamVector(flat, cache.segment.spec_hash), dfeat


def backward_client(cache: SegmentCache, feature_grad: np.ndarray) -> ParamVector:
    rows = cache.inputs[0].shape[0]
    if feature_grad.shape != (rows, cache.pre[-1].shape[1]):
        raise ContractError(
            f"feature_grad shape {list(feature_grad.shape)} does not match cache "
            f"{[rows, cache.pre[-1].shape[1]]}"
        )
    flat, _ = _backward_segment(cache, feature_grad)
    return ParamVector(flat, cache.spec_hash)


def backward_split(caches: tuple[SegmentCache, ServerCache], labels):
    """Full split backward pass over matching client and server caches.

    Returns ``(server_grad, feature_grad, client_grad)``.
    """
    client_cache, server_cache = caches
    if client_cache.spec_hash.split(":")[0] != server_cache.segment.spec_hash.split(":")[0]:
        raise ContractError("client and server caches come from different networks")
    if client_cache.inputs[0].shape[0] != server_cache.labels.shape[0]:
        raise ContractError("client and server caches cover different batches")
    server_grad, feature_grad = backward_server(server_cache, labels)
    client_grad = backward_client(client_cache, feature_grad)
    return server_grad, feature_grad, client_grad


def forward_network(spec: NetworkSpec, full_values: np.ndarray, batch_x: np.ndarray, labels):
    """Unsplit forward pass over the concatenated ``client ⊕ server`` vector.

    Returns ``(loss, logits)``.
    """
    if full_values.shape != (spec.param_count("full"),):
        raise ContractError(f"full vector has shape {list(full_values.shape)}, "
                            f"expected [{spec.param_count('full')}]")
    _check_input(batch_x, spec.input_dim, "batch_x")
    labels = _check_labels(labels, spec.num_classes, batch_x.shape[0])
    logits, _ = _forward_segment(full_values, spec.layers, batch_x, spec.segment_hash("full"))
    loss, _ = _softmax_xent(logits, labels)
    return loss, logits


def forward_full(model: SplitModel, batch_x: np.ndarray, labels):
    return forward_network(model.spec, model.full(), batch_x, labels)


def sgd_step(portion: ParamVector, grad: ParamVector, eta: float) -> ParamVector:
    if len(portion) != len(grad):
        raise ContractError(f"portion length {len(portion)} != gradient length {len(grad)}")
    if not eta > 0:
        raise ContractError(f"eta must be positive, got {eta}")
    if not np.all(np.isfinite(grad.values)):
        raise DivergenceError("non-finite gradient entries")
    return ParamVector(portion.values - eta * grad.values, portion.spec_hash)


def init_params(spec: NetworkSpec, seed: int) -> SplitModel:
    """He-scaled normal weights (layer k drawn from stream ``(seed, init, k)``), zero biases."""
    chunks = []
    for k, layer in enumerate(spec.layers):
        gen = rngs.stream(seed, "init", k)
        gain = 2.0 if layer.activation == "relu" else 1.0
        w = gen.standard_normal((layer.in_dim, layer.out_dim)) * np.sqrt(gain / layer.in_dim)
        chunks.append(w.ravel())
        chunks.append(np.zeros(layer.out_dim))
    flat = np.concatenate(chunks)
    nc = spec.param_count("client")
    return SplitModel(
        ParamVector(flat[:nc].copy(), spec.segment_hash("client")),
        ParamVector(flat[nc:].copy(), spec.segment_hash("server")),
        spec,
    )


def split_full(spec: NetworkSpec, full: np.ndarray) -> SplitModel:
    nc = spec.param_count("client")
    if full.shape != (spec.param_count("full"),):
        raise ContractError(f"full vector has shape {list(full.shape)}")
    return SplitModel(
        ParamVector(full[:nc].copy(), spec.segment_hash("client")),
        ParamVector(full[nc:].copy(), spec.segment_hash("server")),
        spec,
    )


@dataclass(frozen=True)
class Evaluation:
    accuracy: float
    mean_loss: float
    per_class_recall: np.ndarray  # NaN marks classes absent from the dataset


def evaluate(model: SplitModel, dataset) -> Evaluation:
    """Accuracy, mean loss and per-class recall of ``model`` on ``dataset`` (``.x``/``.y``)."""
    x, y = dataset.x, np.asarray(dataset.y)
    if x.shape[0] == 0:
        raise ContractError("evaluation dataset is empty")
    loss, logits = forward_full(model, x, y)
    pred = logits.argmax(axis=1)
    correct = pred == y
    c = model.spec.num_classes
    totals = np.bincount(y, minlength=c)
    hits = np.bincount(y[correct], minlength=c)
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(totals > 0, hits / np.maximum(totals, 1), np.nan)
    return Evaluation(float(correct.mean()), loss, recall)
