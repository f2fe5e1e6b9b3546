"""Dense feedforward classifiers with exact reverse-mode gradients.

Everything is float64 numpy. A model is a list of (out x in) weight matrices
plus bias vectors; parameters and gradients travel as a single flat vector in
a fixed canonical order (layer 0 weights row-major, layer 0 biases, layer 1
weights, ...) so that gradient surgery is layout independent.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ParamVector = np.ndarray  # flat float64 vector in canonical layer order

ACTIVATIONS = ("relu", "tanh")
OUTPUT_HEADS = ("single_logit", "multi_logit")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description: layer sizes, hidden activation, output head."""

    layer_dims: tuple[int, ...]
    activation: str = "relu"
    output_head: str = "multi_logit"

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        if len(self.layer_dims) < 2:
            raise ValueError("layer_dims must list at least input and output sizes")
        if any(d < 1 for d in self.layer_dims):
            raise ValueError("all layer dims must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_head not in OUTPUT_HEADS:
            raise ValueError(f"unknown output head {self.output_head!r}")
        if self.output_head == "single_logit" and self.layer_dims[-1] != 1:
            raise ValueError("single_logit head requires a final layer dim of 1")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = self.layer_dims
        return [(dims[i + 1], dims[i]) for i in range(self.n_layers)]

    def param_count(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes())


@dataclass
class ModelState:
    """Concrete weights and biases for a ModelSpec."""

    spec: ModelSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    rng_seed: int = 0

    def validate(self) -> None:
        shapes = self.spec.layer_shapes()
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise ValueError("layer count does not match spec")
        for W, b, (o, i) in zip(self.weights, self.biases, shapes):
            if W.shape != (o, i) or b.shape != (o,):
                raise ValueError(f"layer shape mismatch: {W.shape}/{b.shape} vs ({o},{i})")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError("non-finite model parameters")


@dataclass
class ForwardCache:
    """Per-layer intermediates from one forward pass, reused by backprop.

    ``activations[0]`` is the input batch; ``activations[l]`` for l >= 1 is
    the post-activation output of hidden layer l-1. ``pre_activations[l]`` is
    the affine output of layer l; the last entry equals the logits.
    """

    activations: list[np.ndarray]
    pre_activations: list[np.ndarray]

    @property
    def batch_size(self) -> int:
        return self.activations[0].shape[0]


def init_params(spec: ModelSpec, seed: int) -> ModelState:
    """Glorot-uniform weights, zero biases; bitwise deterministic per seed."""
    rng = np.random.default_rng(int(seed) % 2**64)
    weights, biases = [], []
    for out_dim, in_dim in spec.layer_shapes():
        bound = np.sqrt(6.0 / (in_dim + out_dim))
        weights.append(rng.uniform(-bound, bound, size=(out_dim, in_dim)))
        biases.append(np.zeros(out_dim))
    return ModelState(spec=spec, weights=weights, biases=biases, rng_seed=int(seed))


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_derivative(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    # relu derivative taken as 0 at the kink
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    return 1.0 - a * a


def forward(model: ModelState, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Run the network on a batch (n x d); returns logits (n x l) and cache."""
    X = np.asarray(batch, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.spec.input_dim:
        raise ValueError(
            f"batch shape {X.shape} incompatible with input dim {model.spec.input_dim}"
        )
    activations = [X]
    pre_activations = []
    a = X
    last = model.spec.n_layers - 1
    for l, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ W.T + b
        pre_activations.append(z)
        if l < last:
            a = _activate(model.spec.activation, z)
            activations.append(a)
    return pre_activations[-1], ForwardCache(activations, pre_activations)


def _check_cache(model: ModelState, cache: ForwardCache, grad_logits: np.ndarray) -> np.ndarray:
    G = np.asarray(grad_logits, dtype=np.float64)
    n = cache.batch_size
    if G.shape != (n, model.spec.output_dim):
        raise ValueError(f"loss gradient shape {G.shape} does not match cache ({n} samples)")
    if len(cache.pre_activations) != model.spec.n_layers:
        raise ValueError("cache does not match model depth")
    if cache.activations[0].shape[1] != model.spec.input_dim:
        raise ValueError("cache input width does not match model")
    return G


def param_gradient(model: ModelState, cache: ForwardCache, loss_grad_logits: np.ndarray) -> ParamVector:
    """Mean-over-batch parameter gradient, flattened in canonical order.

    ``loss_grad_logits`` holds one row per sample: the derivative of that
    sample's loss with respect to its logits.
    """
    G = _check_cache(model, cache, loss_grad_logits)
    n = cache.batch_size
    delta = G / n
    grads_W: list[np.ndarray | None] = [None] * model.spec.n_layers
    grads_b: list[np.ndarray | None] = [None] * model.spec.n_layers
    for l in range(model.spec.n_layers - 1, -1, -1):
        grads_W[l] = delta.T @ cache.activations[l]
        grads_b[l] = delta.sum(axis=0)
        if l > 0:
            deriv = _activation_derivative(
                model.spec.activation, cache.pre_activations[l - 1], cache.activations[l]
            )
            delta = (delta @ model.weights[l]) * deriv
    return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(grads_W, grads_b)])


def input_gradient_batch(model: ModelState, cache: ForwardCache, loss_grad_logits: np.ndarray) -> np.ndarray:
    """Per-sample gradient of each sample's loss wrt its own input row (n x d)."""
    delta = _check_cache(model, cache, loss_grad_logits)
    for l in range(model.spec.n_layers - 1, 0, -1):
        deriv = _activation_derivative(
            model.spec.activation, cache.pre_activations[l - 1], cache.activations[l]
        )
        delta = (delta @ model.weights[l]) * deriv
    return delta @ model.weights[0]


def input_gradient(model: ModelState, x: np.ndarray, y, loss) -> np.ndarray:
    """Gradient of the pointwise loss at a single input x (length-d vector)."""
    from .losses import pointwise_loss_grad

    x = np.asarray(x, dtype=np.float64)
    logits, cache = forward(model, x[None, :])
    _, G = pointwise_loss_grad(loss, logits, np.asarray([y]))
    return input_gradient_batch(model, cache, G)[0]


def flatten(model: ModelState) -> ParamVector:
    """Copy all parameters into one flat vector in canonical order."""
    return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(model.weights, model.biases)])


def unflatten(spec: ModelSpec, vector: ParamVector) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Split a canonical flat vector back into per-layer weights and biases."""
    v = np.asarray(vector, dtype=np.float64)
    if v.ndim != 1 or v.size != spec.param_count():
        raise ValueError(f"vector length {v.size} does not match spec ({spec.param_count()})")
    weights, biases = [], []
    pos = 0
    for out_dim, in_dim in spec.layer_shapes():
        W = v[pos : pos + out_dim * in_dim].reshape(out_dim, in_dim).copy()
        pos += out_dim * in_dim
        b = v[pos : pos + out_dim].copy()
        pos += out_dim
        weights.append(W)
        biases.append(b)
    return weights, biases


def model_from_vector(spec: ModelSpec, vector: ParamVector, rng_seed: int = 0) -> ModelState:
    weights, biases = unflatten(spec, vector)
    return ModelState(spec=spec, weights=weights, biases=biases, rng_seed=rng_seed)


def sgd_step(
    params: ParamVector,
    grad: ParamVector,
    velocity: ParamVector,
    lr: float,
    momentum: float,
) -> tuple[ParamVector, ParamVector]:
    """One heavy-ball step: v' = momentum*v + g, p' = p - lr*v'."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    velocity = np.asarray(velocity, dtype=np.float64)
    if not (params.shape == grad.shape == velocity.shape):
        raise ValueError("params, grad and velocity must have equal lengths")
    if not (np.isfinite(lr) and lr >= 0.0):
        raise ValueError("lr must be finite and >= 0")
    if not (0.0 <= momentum < 1.0):
        raise ValueError("momentum must lie in [0, 1)")
    for name, arr in (("params", params), ("grad", grad), ("velocity", velocity)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in {name}")
    new_velocity = momentum * velocity + grad
    new_params = params - lr * new_velocity
    return new_params, new_velocity
