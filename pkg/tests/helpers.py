"""Shared test oracles: finite differences, a scalar-loop forward pass, and a
deterministic seven-segment digit image generator used where real handwritten
digit files are not available."""
from __future__ import annotations

import numpy as np

from caat import losses as losses_mod
from caat.model import ModelState, flatten, forward, model_from_vector, param_gradient


def scalar_forward(model: ModelState, x):
    """Pure-python re-implementation of the forward pass (no numpy matmul)."""
    a = [float(v) for v in x]
    n_layers = len(model.weights)
    for l, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = []
        for i in range(W.shape[0]):
            acc = float(b[i])
            for j in range(W.shape[1]):
                acc += float(W[i, j]) * a[j]
            z.append(acc)
        if l < n_layers - 1:
            if model.spec.activation == "relu":
                a = [max(v, 0.0) for v in z]
            else:
                a = [float(np.tanh(v)) for v in z]
        else:
            a = z
    return np.array(a)


def batch_loss_value(model: ModelState, X, Y, loss) -> float:
    """Mean pointwise loss over a batch, used as the scalar for FD checks."""
    logits, _ = forward(model, X)
    values, _ = losses_mod.pointwise_loss_grad(loss, logits, Y)
    return float(np.mean(values))


def pair_loss_value(model: ModelState, X, X_adv, Y, loss) -> float:
    logits_c, _ = forward(model, X)
    logits_a, _ = forward(model, X_adv)
    values, _, _ = losses_mod.pair_loss_grads(loss, logits_c, logits_a, Y)
    return float(np.mean(values))


def fd_param_gradient(model: ModelState, scalar_fn, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar_fn(model) over every parameter."""
    theta = flatten(model)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        bumped = theta.copy()
        bumped[i] = theta[i] + h
        f_plus = scalar_fn(model_from_vector(model.spec, bumped))
        bumped[i] = theta[i] - h
        f_minus = scalar_fn(model_from_vector(model.spec, bumped))
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def fd_input_gradient(fn, x, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of the input vector."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for j in range(x.size):
        xp = x.copy()
        xp[j] = x[j] + h
        f_plus = fn(xp)
        xp[j] = x[j] - h
        f_minus = fn(xp)
        grad[j] = (f_plus - f_minus) / (2.0 * h)
    return grad


def fd_scalar_gradient(fn, v, h: float = 1e-6) -> np.ndarray:
    """Finite differences of fn over a generic 1-d argument."""
    return fd_input_gradient(fn, v, h=h)


def rel_error(approx: np.ndarray, exact: np.ndarray) -> float:
    approx = np.asarray(approx, dtype=np.float64).ravel()
    exact = np.asarray(exact, dtype=np.float64).ravel()
    denom = max(float(np.linalg.norm(exact)), 1e-8)
    return float(np.linalg.norm(approx - exact)) / denom


def mean_param_gradient(model: ModelState, X, Y, loss) -> np.ndarray:
    logits, cache = forward(model, X)
    _, G = losses_mod.pointwise_loss_grad(loss, logits, Y)
    return param_gradient(model, cache, G)


# ---------------------------------------------------------------------------
# Seven-segment digit images (28x28), a deterministic stand-in corpus with the
# same file format and label layout as classic handwritten digit sets.
# ---------------------------------------------------------------------------

_SEGMENTS = {
    "A": ("h", 4, 8, 20),    # top bar:      row 4,  cols 8..20
    "G": ("h", 13, 8, 20),   # middle bar
    "D": ("h", 22, 8, 20),   # bottom bar
    "F": ("v", 8, 4, 14),    # top-left:     col 8,  rows 4..14
    "B": ("v", 19, 4, 14),   # top-right
    "E": ("v", 8, 13, 23),   # bottom-left
    "C": ("v", 19, 13, 23),  # bottom-right
}

_DIGIT_SEGMENTS = {
    0: "ABCDEF", 1: "BC", 2: "ABGED", 3: "ABGCD", 4: "FBGC",
    5: "AFGCD", 6: "AFGEDC", 7: "ABC", 8: "ABCDEFG", 9: "ABCFGD",
}


def render_digit(digit: int, rng: np.random.Generator) -> np.ndarray:
    """One noisy glyph: jittered position/thickness, faded and dropped segments,
    occasional distractor stroke, heavy pixel noise. The corruption keeps the
    classes genuinely overlapping so accuracies stay off the ceiling."""
    img = np.zeros((28, 28))
    dr = int(rng.integers(-3, 4))
    dc = int(rng.integers(-3, 4))
    for seg in _DIGIT_SEGMENTS[digit]:
        if rng.random() < 0.08:
            continue
        thickness = int(rng.integers(1, 4))
        intensity = 0.45 + 0.55 * rng.random()
        kind, pos, lo, hi = _SEGMENTS[seg]
        if kind == "h":
            img[pos + dr : pos + dr + thickness, lo + dc : hi + dc] = intensity
        else:
            img[lo + dr : hi + dr, pos + dc : pos + dc + thickness] = intensity
    if rng.random() < 0.3:
        r0, c0 = int(rng.integers(2, 24)), int(rng.integers(2, 24))
        if rng.random() < 0.5:
            img[r0 : r0 + 2, c0 : c0 + int(rng.integers(3, 8))] = 0.4 + 0.4 * rng.random()
        else:
            img[r0 : r0 + int(rng.integers(3, 8)), c0 : c0 + 2] = 0.4 + 0.4 * rng.random()
    img += rng.normal(0.0, 0.18, size=img.shape)
    return np.clip(img, 0.0, 1.0).reshape(-1)


def make_digit_arrays(n: int, seed: int, classes=tuple(range(10))):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, len(classes), size=n)
    labels = np.array([classes[i] for i in labels], dtype=np.int64)
    images = np.stack([render_digit(int(lbl), rng) for lbl in labels])
    return images, labels


def write_digit_idx(directory, n_train: int = 12000, n_test: int = 2000, seed: int = 0):
    """Write standard-named IDX train/test files full of rendered digits."""
    from caat.data import write_idx

    directory.mkdir(parents=True, exist_ok=True)
    train_x, train_y = make_digit_arrays(n_train, seed)
    test_x, test_y = make_digit_arrays(n_test, seed + 1)
    write_idx(directory / "train-images-idx3-ubyte", directory / "train-labels-idx1-ubyte",
              train_x, train_y, image_shape=(28, 28))
    write_idx(directory / "t10k-images-idx3-ubyte", directory / "t10k-labels-idx1-ubyte",
              test_x, test_y, image_shape=(28, 28))
    return directory
