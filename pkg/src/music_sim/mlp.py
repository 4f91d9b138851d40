"""Plain numpy multilayer perceptron with cut-point execution.

The model can run end to end (`forward` / `backward`) or as a chain of
contiguous layer segments (`split_forward` / `split_backward_*`) whose
composed result is numerically identical to the monolithic pass. The two
routes are coded independently on purpose: the segment path is what the
distributed protocols execute, the monolithic path is the reference they
are checked against.

Hidden layers use ReLU. The output layer is linear under squared error and
softmax under cross-entropy. Losses are mean-reduced over the batch:
squared error is 0.5/B * sum of squared residuals, cross-entropy is the
mean negative log-probability of the true class. In-memory math is double
precision; the 32-bit payload sizes only model what goes on the wire.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput, EmptyWidths, LengthMismatch, ShapeMismatch, StaleCache

LOSSES = ("ce", "mse")


@dataclass
class MlpModel:
    widths: tuple[int, ...]
    loss: str  # "ce" or "mse"
    weights: list[np.ndarray]  # weights[l] has shape (widths[l], widths[l+1])
    biases: list[np.ndarray]   # biases[l] has shape (widths[l+1],)

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @property
    def payload_bits(self) -> int:
        return 32 * self.param_count


@dataclass(frozen=True)
class CutSpec:
    """Half-open range [start, end) of weight-layer indices forming one segment."""

    start: int
    end: int

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ShapeMismatch(f"bad segment bounds [{self.start}, {self.end})")

    @property
    def num_layers(self) -> int:
        return self.end - self.start


@dataclass
class SmashedData:
    """Cut-point activations (client output) on their way to the next segment."""

    activations: np.ndarray          # (batch, cut width)
    batch_indices: np.ndarray | None = None
    labels: np.ndarray | None = None  # only on the path to the loss owner

    @property
    def payload_bits(self) -> int:
        bits = 32 * self.activations.size
        if self.labels is not None:
            bits += 32 * int(np.asarray(self.labels).size)
        return bits


@dataclass
class ParamDelta:
    """Full-model-shaped parameter gradient or update, with aggregation weight."""

    widths: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    sample_count: int = 1

    @property
    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @property
    def payload_bits(self) -> int:
        return 32 * self.param_count


@dataclass
class ForwardCache:
    """Intermediates one backward pass needs; tied to the exact model used."""

    model_ref: MlpModel = field(repr=False)
    segment: CutSpec
    layer_inputs: list[np.ndarray] = field(repr=False)     # activation fed to each layer
    pre_activations: list[np.ndarray] = field(repr=False)  # z of each layer
    prediction: np.ndarray | None = field(default=None, repr=False)


def init_model(widths, loss: str, seed: int) -> MlpModel:
    """Glorot-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases."""
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2:
        raise EmptyWidths(f"need at least input and output widths, got {widths!r}")
    if any(w < 1 for w in widths):
        raise EmptyWidths(f"layer widths must be >= 1, got {widths!r}")
    if loss not in LOSSES:
        raise ValueError(f"loss must be one of {LOSSES}, got {loss!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(widths=widths, loss=loss, weights=weights, biases=biases)


def clone(model: MlpModel) -> MlpModel:
    return MlpModel(widths=model.widths, loss=model.loss,
                    weights=[w.copy() for w in model.weights],
                    biases=[b.copy() for b in model.biases])


def _check_batch(x: np.ndarray, expected_dim: int):
    if x.ndim != 2:
        raise ShapeMismatch(f"expected a (batch, features) array, got shape {x.shape}")
    if x.shape[0] == 0:
        raise EmptyInput("batch is empty")
    if x.shape[1] != expected_dim:
        raise ShapeMismatch(f"expected {expected_dim} features, got {x.shape[1]}")


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _targets_for(model: MlpModel, labels: np.ndarray, batch: int) -> np.ndarray:
    """Labels as the loss expects them: class ids (ce) or one-hot rows (mse)."""
    labels = np.asarray(labels)
    if model.loss == "ce":
        flat = labels.astype(int).reshape(-1)
        if flat.shape[0] != batch:
            raise LengthMismatch(f"{flat.shape[0]} labels for batch of {batch}")
        return flat
    if labels.ndim == 1:
        return one_hot(labels, model.widths[-1])
    if labels.shape != (batch, model.widths[-1]):
        raise ShapeMismatch(f"targets {labels.shape} for batch of {batch}")
    return labels


def _output_grad(model: MlpModel, logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """dLoss/d(final pre-activation) for the mean-reduced losses."""
    batch = logits.shape[0]
    targets = _targets_for(model, labels, batch)
    if model.loss == "ce":
        grad = _softmax(logits)
        grad[np.arange(batch), targets] -= 1.0
        return grad / batch
    return (logits - targets) / batch


def batch_loss(model: MlpModel, cache: ForwardCache, labels: np.ndarray) -> float:
    """Mean-reduced loss of the batch a forward cache came from."""
    if cache.segment.end != model.num_layers:
        raise StaleCache("loss needs a cache that reaches the output layer")
    logits = cache.pre_activations[-1]
    batch = logits.shape[0]
    targets = _targets_for(model, labels, batch)
    if model.loss == "ce":
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return float(-np.mean(log_probs[np.arange(batch), targets]))
    residual = logits - targets
    return float(0.5 * np.sum(residual * residual) / batch)


# ---------------- monolithic pass ---------------- #

def forward(model: MlpModel, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Run the whole network; returns (prediction, cache for backward).

    The prediction is class probabilities under cross-entropy and the raw
    linear output under squared error.
    """
    _check_batch(x, model.widths[0])
    last = model.num_layers - 1
    layer_inputs, pre_activations = [], []
    a = x
    for l in range(model.num_layers):
        layer_inputs.append(a)
        z = a @ model.weights[l] + model.biases[l]
        pre_activations.append(z)
        if l < last:
            a = np.maximum(z, 0.0)
        else:
            a = _softmax(z) if model.loss == "ce" else z
    cache = ForwardCache(model_ref=model, segment=CutSpec(0, model.num_layers),
                         layer_inputs=layer_inputs, pre_activations=pre_activations,
                         prediction=a)
    return a, cache


def backward(model: MlpModel, cache: ForwardCache, labels: np.ndarray) -> ParamDelta:
    """Loss gradient for every parameter, from a full-network cache."""
    if cache.model_ref is not model:
        raise StaleCache("cache was built for a different set of parameters")
    if cache.segment.start != 0 or cache.segment.end != model.num_layers:
        raise StaleCache("cache covers a segment, not the whole network")
    last = model.num_layers - 1
    grad_w: list = [None] * model.num_layers
    grad_b: list = [None] * model.num_layers
    dz = _output_grad(model, cache.pre_activations[last], labels)
    for l in range(last, -1, -1):
        if l < last:
            dz = da * (cache.pre_activations[l] > 0.0)
        grad_w[l] = cache.layer_inputs[l].T @ dz
        grad_b[l] = dz.sum(axis=0)
        da = dz @ model.weights[l].T
    return ParamDelta(widths=model.widths, weights=grad_w, biases=grad_b)


# ---------------- split execution ---------------- #

def split_forward(model: MlpModel, segment: CutSpec,
                  x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Run only layers [segment.start, segment.end); `x` is the activation
    entering the first of those layers. The returned activation is what
    crosses the cut (or the prediction, if the segment ends the network)."""
    if segment.end > model.num_layers:
        raise ShapeMismatch(f"segment {segment} exceeds {model.num_layers} layers")
    _check_batch(x, model.widths[segment.start])
    last = model.num_layers - 1
    layer_inputs, pre_activations = [], []
    a = x
    for l in range(segment.start, segment.end):
        layer_inputs.append(a)
        z = a @ model.weights[l] + model.biases[l]
        pre_activations.append(z)
        if l < last:
            a = np.maximum(z, 0.0)
        else:
            a = _softmax(z) if model.loss == "ce" else z
    cache = ForwardCache(model_ref=model, segment=segment,
                         layer_inputs=layer_inputs, pre_activations=pre_activations,
                         prediction=a if segment.end == model.num_layers else None)
    return a, cache


def _segment_backprop(model: MlpModel, cache: ForwardCache,
                      dz_top: np.ndarray) -> tuple[ParamDelta, np.ndarray]:
    """Shared inner loop: from dLoss/dz of the segment's top layer down to
    dLoss/d(segment input). Returns a full-model-shaped delta with zeros
    outside the segment."""
    segment = cache.segment
    grad_w = [np.zeros_like(w) for w in model.weights]
    grad_b = [np.zeros_like(b) for b in model.biases]
    dz = dz_top
    for offset in range(segment.num_layers - 1, -1, -1):
        l = segment.start + offset
        if offset < segment.num_layers - 1:
            dz = da * (cache.pre_activations[offset] > 0.0)
        grad_w[l] = cache.layer_inputs[offset].T @ dz
        grad_b[l] = dz.sum(axis=0)
        da = dz @ model.weights[l].T
    delta = ParamDelta(widths=model.widths, weights=grad_w, biases=grad_b)
    return delta, da


def split_backward_server(model: MlpModel, server_cache: ForwardCache,
                          labels: np.ndarray) -> tuple[ParamDelta, np.ndarray]:
    """Backward through the loss-owning (final) segment.

    Returns the segment's parameter gradients (full-model-shaped, zeros
    elsewhere) and the gradient w.r.t. the received cut activations.
    """
    if server_cache.model_ref is not model:
        raise StaleCache("cache was built for a different set of parameters")
    if server_cache.segment.end != model.num_layers:
        raise StaleCache("the loss-owning segment must reach the output layer")
    dz_top = _output_grad(model, server_cache.pre_activations[-1], labels)
    return _segment_backprop(model, server_cache, dz_top)


def split_backward_client(model: MlpModel, cache: ForwardCache,
                          upstream_grad: np.ndarray) -> tuple[ParamDelta, np.ndarray]:
    """Backward through a non-final segment given dLoss/d(its output activation).

    Returns the segment gradients and dLoss/d(segment input) for the segment
    below (zero-size interest at the entry segment, where the input is data).
    """
    if cache.model_ref is not model:
        raise StaleCache("cache was built for a different set of parameters")
    if cache.segment.end == model.num_layers:
        raise StaleCache("final segment must backprop from labels, not upstream grads")
    # top layer of a non-final segment always feeds a ReLU
    dz_top = upstream_grad * (cache.pre_activations[-1] > 0.0)
    return _segment_backprop(model, cache, dz_top)


def contiguous_cuts(num_layers: int, boundaries) -> list[CutSpec]:
    """Split `num_layers` weight layers at the given interior boundaries.

    boundaries (2,) over 4 layers -> [CutSpec(0,2), CutSpec(2,4)].
    """
    interior = sorted(int(b) for b in boundaries)
    if any(not 0 < b < num_layers for b in interior):
        raise ShapeMismatch(f"cut indices {boundaries!r} out of range for {num_layers} layers")
    edges = [0, *interior, num_layers]
    if len(set(edges)) != len(edges):
        raise ShapeMismatch(f"cut indices {boundaries!r} contain duplicates")
    return [CutSpec(a, b) for a, b in zip(edges[:-1], edges[1:])]


# ---------------- updates and aggregation ---------------- #

def add_deltas(a: ParamDelta, b: ParamDelta) -> ParamDelta:
    if a.widths != b.widths:
        raise ShapeMismatch(f"delta widths differ: {a.widths} vs {b.widths}")
    return ParamDelta(widths=a.widths,
                      weights=[x + y for x, y in zip(a.weights, b.weights)],
                      biases=[x + y for x, y in zip(a.biases, b.biases)],
                      sample_count=a.sample_count + b.sample_count)


def sgd_step(model: MlpModel, grads: ParamDelta, lr: float) -> MlpModel:
    """Vanilla gradient step; returns a fresh model, inputs untouched."""
    if lr <= 0:
        raise ValueError(f"learning rate must be > 0, got {lr!r}")
    if grads.widths != model.widths:
        raise ShapeMismatch(f"gradient widths {grads.widths} vs model {model.widths}")
    return MlpModel(widths=model.widths, loss=model.loss,
                    weights=[w - lr * g for w, g in zip(model.weights, grads.weights)],
                    biases=[b - lr * g for b, g in zip(model.biases, grads.biases)])


def fed_avg(deltas: list[ParamDelta]) -> ParamDelta:
    """Sample-count-weighted elementwise mean of parameter deltas.

    Computed as first + sum(c_i * (delta_i - first)), which is the same
    weighted mean but returns identical inputs exactly unchanged.
    """
    if not deltas:
        raise EmptyInput("nothing to aggregate")
    widths = deltas[0].widths
    n_params = deltas[0].param_count
    for d in deltas[1:]:
        if d.widths != widths or d.param_count != n_params:
            raise LengthMismatch(f"cannot average widths {d.widths} with {widths}")
    total = float(sum(d.sample_count for d in deltas))
    if total <= 0:
        raise EmptyInput("all sample counts are zero")
    base = deltas[0]
    weights = [w.copy() for w in base.weights]
    biases = [b.copy() for b in base.biases]
    for d in deltas[1:]:
        c = d.sample_count / total
        for l in range(len(weights)):
            weights[l] += c * (d.weights[l] - base.weights[l])
            biases[l] += c * (d.biases[l] - base.biases[l])
    return ParamDelta(widths=widths, weights=weights, biases=biases,
                      sample_count=int(total))


def model_delta(new: MlpModel, old: MlpModel, sample_count: int = 1) -> ParamDelta:
    if new.widths != old.widths:
        raise ShapeMismatch(f"model widths differ: {new.widths} vs {old.widths}")
    return ParamDelta(widths=new.widths,
                      weights=[a - b for a, b in zip(new.weights, old.weights)],
                      biases=[a - b for a, b in zip(new.biases, old.biases)],
                      sample_count=sample_count)


def apply_delta(model: MlpModel, delta: ParamDelta) -> MlpModel:
    if delta.widths != model.widths:
        raise ShapeMismatch(f"delta widths {delta.widths} vs model {model.widths}")
    return MlpModel(widths=model.widths, loss=model.loss,
                    weights=[w + d for w, d in zip(model.weights, delta.weights)],
                    biases=[b + d for b, d in zip(model.biases, delta.biases)])


# ---------------- flattening and checkpoints ---------------- #

def flatten_params(model: MlpModel) -> np.ndarray:
    parts = []
    for w, b in zip(model.weights, model.biases):
        parts.append(w.reshape(-1))
        parts.append(b)
    return np.concatenate(parts)


def unflatten_params(widths, flat: np.ndarray, loss: str = "ce") -> MlpModel:
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2:
        raise EmptyWidths(f"need at least input and output widths, got {widths!r}")
    expected = sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
    flat = np.asarray(flat, dtype=np.float64).reshape(-1)
    if flat.size != expected:
        raise ShapeMismatch(f"expected {expected} parameters, got {flat.size}")
    weights, biases, pos = [], [], 0
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out).copy())
        pos += fan_in * fan_out
        biases.append(flat[pos:pos + fan_out].copy())
        pos += fan_out
    return MlpModel(widths=widths, loss=loss, weights=weights, biases=biases)


def save_checkpoint(model: MlpModel, path) -> None:
    """Shape manifest plus flat little-endian float32 parameters."""
    np.savez(path, widths=np.asarray(model.widths, dtype="<i8"),
             loss=np.asarray(model.loss),
             params=flatten_params(model).astype("<f4"))


def load_checkpoint(path) -> MlpModel:
    with np.load(path) as bundle:
        widths = tuple(int(w) for w in bundle["widths"])
        loss = str(bundle["loss"])
        flat = bundle["params"].astype(np.float64)
    return unflatten_params(widths, flat, loss=loss)


# ---------------- evaluation ---------------- #

def evaluate(model: MlpModel, x: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """(mean loss, classification accuracy) on a held-out set."""
    _, cache = forward(model, x)
    labels = np.asarray(labels).astype(int).reshape(-1)
    value = batch_loss(model, cache, labels)
    predicted = cache.pre_activations[-1].argmax(axis=1)
    return value, float(np.mean(predicted == labels))


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels).astype(int).reshape(-1)
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out
