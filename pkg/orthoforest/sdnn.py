"""Semi-parametric deep network: a nonlinear branch plus a linear parametric top layer.

The nonparametric inputs go through ``len(hidden)`` dense layers with activation σ;
the top layer is linear in the derived nodes of the last hidden layer concatenated
with the parametric inputs::

    V^L = σ(γ^L + χⁿ Γ^L), ..., V^1 = σ(γ^2 + V^2 Γ^2)
    f(χ) = β₀ + [V^1 ∥ χᵖ] · β

Forward and backward passes are plain numpy; training is minibatch Adam on the
weighted squared loss with L2 weight decay and early stopping on a held-out slice.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import DivergenceError, ShapeError
from .lasso import check_weights
from .rng import make_rng

log = logging.getLogger("orthoforest")

SdnnInputs = Tuple[np.ndarray, np.ndarray]  # (nonparametric, parametric)


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z, a):
    return (z > 0).astype(np.float64)


def _tanh_grad(z, a):
    return 1.0 - a * a


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _sigmoid_grad(z, a):
    return a * (1.0 - a)


ACTIVATIONS = {
    "relu": (_relu, _relu_grad),
    "tanh": (np.tanh, _tanh_grad),
    "sigmoid": (_sigmoid, _sigmoid_grad),
}


# ── Model ────────────────────────────────────────────────────

@dataclass(frozen=True)
class SdnnArchitecture:
    n_nonparametric: int
    n_parametric: int
    hidden: Tuple[int, ...] = (100, 100)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation '{self.activation}'")
        if self.n_nonparametric < 0 or self.n_parametric < 0 or any(h < 1 for h in self.hidden):
            raise ValueError(f"invalid architecture {self}")

    @property
    def layers(self) -> Tuple[int, ...]:
        """Hidden widths actually built; an empty nonparametric branch has none."""
        return self.hidden if self.n_nonparametric > 0 else ()

    @property
    def branch_width(self) -> int:
        return self.layers[-1] if self.layers else self.n_nonparametric

    @property
    def top_width(self) -> int:
        return self.branch_width + self.n_parametric


@dataclass
class SdnnModel:
    arch: SdnnArchitecture
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    top_coef: np.ndarray
    top_intercept: float
    weight_decay: float = 0.0

    def __post_init__(self):
        fan_in = self.arch.n_nonparametric
        if len(self.weights) != len(self.arch.layers) or len(self.biases) != len(self.arch.layers):
            raise ShapeError("layer count does not match the architecture")
        for W, b, width in zip(self.weights, self.biases, self.arch.layers):
            if W.shape != (fan_in, width) or b.shape != (width,):
                raise ShapeError(f"layer shape {W.shape}/{b.shape} does not chain from width {fan_in}")
            fan_in = width
        if self.top_coef.shape != (self.arch.top_width,):
            raise ShapeError(f"top layer needs {self.arch.top_width} coefficients, got {self.top_coef.shape}")

    # flat parameter order: (W, b) per hidden layer bottom-up, then top coef, intercept
    def flat(self) -> np.ndarray:
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts += [W.ravel(), b]
        parts += [self.top_coef, np.array([self.top_intercept])]
        return np.concatenate(parts)

    def with_flat(self, theta: np.ndarray) -> "SdnnModel":
        theta = np.asarray(theta, dtype=np.float64)
        weights, biases = [], []
        pos, fan_in = 0, self.arch.n_nonparametric
        for width in self.arch.layers:
            weights.append(theta[pos:pos + fan_in * width].reshape(fan_in, width))
            pos += fan_in * width
            biases.append(theta[pos:pos + width].copy())
            pos += width
            fan_in = width
        top = theta[pos:pos + self.arch.top_width].copy()
        pos += self.arch.top_width
        return SdnnModel(self.arch, [w.copy() for w in weights], biases, top, float(theta[pos]), self.weight_decay)

    @property
    def n_params(self) -> int:
        return len(self.flat())

    def predict(self, nonparametric: np.ndarray, parametric: np.ndarray) -> np.ndarray:
        out, _ = _forward(self, nonparametric, parametric)
        return out


def init_model(arch: SdnnArchitecture, seed: int, intercept: float = 0.0, weight_decay: float = 0.0) -> SdnnModel:
    """Uniform(±1/√fan_in) weights, zero biases."""
    rng = make_rng(seed, "sdnn-init")
    weights, biases = [], []
    fan_in = arch.n_nonparametric
    for width in arch.layers:
        limit = 1.0 / math.sqrt(max(fan_in, 1))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, width)))
        biases.append(np.zeros(width))
        fan_in = width
    limit = 1.0 / math.sqrt(max(arch.top_width, 1))
    top = rng.uniform(-limit, limit, size=arch.top_width)
    return SdnnModel(arch, weights, biases, top, float(intercept), weight_decay)


def _check_inputs(model: SdnnModel, nonparametric: np.ndarray, parametric: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(nonparametric, dtype=np.float64)
    p = np.asarray(parametric, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != model.arch.n_nonparametric:
        raise ShapeError(f"nonparametric input must be (n, {model.arch.n_nonparametric}), got {a.shape}")
    if p.ndim != 2 or p.shape[1] != model.arch.n_parametric or p.shape[0] != a.shape[0]:
        raise ShapeError(f"parametric input must be ({a.shape[0]}, {model.arch.n_parametric}), got {p.shape}")
    return a, p


def _forward(model: SdnnModel, nonparametric: np.ndarray, parametric: np.ndarray):
    a, p = _check_inputs(model, nonparametric, parametric)
    act, _ = ACTIVATIONS[model.arch.activation]
    cache = []
    for W, b in zip(model.weights, model.biases):
        z = a @ W + b
        out = act(z)
        cache.append((a, z, out))
        a = out
    top_in = np.hstack([a, p])
    return top_in @ model.top_coef + model.top_intercept, (cache, top_in)


def sdnn_forward(model: SdnnModel, wp: np.ndarray, wn: np.ndarray, x: np.ndarray) -> float:
    """Single-row evaluation; the nonparametric input is ``x ∥ wn``, the parametric one ``wp``."""
    nonparametric = np.concatenate([np.atleast_1d(x), np.atleast_1d(wn)]).astype(np.float64)
    parametric = np.atleast_1d(np.asarray(wp, dtype=np.float64))
    out, _ = _forward(model, nonparametric[None, :], parametric[None, :])
    return float(out[0])


def sdnn_loss_and_grad(
    model: SdnnModel,
    inputs: SdnnInputs,
    targets: np.ndarray,
    weights: np.ndarray,
    lam: float,
) -> Tuple[float, np.ndarray]:
    """Weighted mean squared error plus λ‖θ‖², and its gradient in flat order.

    The data term is Σ wᵢ rᵢ² / Σ wᵢ so the penalty keeps the same meaning at any
    weight scale or batch size.
    """
    out, (cache, top_in) = _forward(model, *inputs)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    total = w.sum()
    r = out - y
    theta = model.flat()
    loss = float(w @ (r * r) / total + lam * theta @ theta)

    d_out = 2.0 * w * r / total
    g_top = top_in.T @ d_out
    g_intercept = d_out.sum()
    grads: List[np.ndarray] = []
    _, act_grad = ACTIVATIONS[model.arch.activation]
    width = model.arch.branch_width
    d_a = np.outer(d_out, model.top_coef[:width])
    for (a_prev, z, a), W in zip(reversed(cache), reversed(model.weights)):
        d_z = d_a * act_grad(z, a)
        grads.append(d_z.sum(axis=0))
        grads.append((a_prev.T @ d_z).ravel())
        d_a = d_z @ W.T
    grads.reverse()
    flat_grad = np.concatenate(grads + [g_top, np.array([g_intercept])])
    return loss, flat_grad + 2.0 * lam * theta


def export_model(model: SdnnModel) -> Dict:
    return {
        "architecture": {
            "n_nonparametric": model.arch.n_nonparametric,
            "n_parametric": model.arch.n_parametric,
            "hidden": list(model.arch.hidden),
            "activation": model.arch.activation,
        },
        "weight_decay": model.weight_decay,
        "parameters": model.flat().tolist(),
    }


def import_model(doc: Dict) -> SdnnModel:
    a = doc["architecture"]
    arch = SdnnArchitecture(int(a["n_nonparametric"]), int(a["n_parametric"]), tuple(a["hidden"]), a["activation"])
    shell = init_model(arch, seed=0, weight_decay=float(doc.get("weight_decay", 0.0)))
    return shell.with_flat(np.asarray(doc["parameters"], dtype=np.float64))


# ── Training ─────────────────────────────────────────────────

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    lr_decay: float = 1.0          # multiplicative per epoch
    weight_decay: float = 1e-4
    patience: int = 10
    holdout_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs, batch_size and patience must be positive")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("lr must be positive and lr_decay in (0, 1]")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0 <= self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must be in [0, 1)")


def _weighted_mse(model: SdnnModel, inputs: SdnnInputs, y: np.ndarray, w: np.ndarray) -> float:
    r = model.predict(*inputs) - y
    return float(w @ (r * r) / w.sum())


def train_sdnn(
    data: Tuple[SdnnInputs, np.ndarray],
    weights: np.ndarray,
    arch: SdnnArchitecture,
    cfg: TrainConfig,
) -> SdnnModel:
    """Fit an SDNN by minibatch Adam; returns the parameters with the best held-out loss.

    The initial parameters are a candidate too, so the held-out weighted loss of the
    result is never worse than at initialization.
    """
    (nonparametric, parametric), targets = data
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    n = len(y)
    w = check_weights(weights, n)
    nonparametric = np.asarray(nonparametric, dtype=np.float64).reshape(n, arch.n_nonparametric)
    parametric = np.asarray(parametric, dtype=np.float64).reshape(n, arch.n_parametric)

    rng = make_rng(cfg.seed, "sdnn-train")
    order = rng.permutation(n)
    n_hold = int(round(cfg.holdout_fraction * n)) if n >= 10 else 0
    hold, train = order[:n_hold], order[n_hold:]
    if n_hold == 0 or w[hold].sum() <= 0:
        hold = train

    def view(idx):
        return (nonparametric[idx], parametric[idx]), y[idx], w[idx]

    hold_in, hold_y, hold_w = view(hold)
    model = init_model(arch, cfg.seed, intercept=float(w @ y / n), weight_decay=cfg.weight_decay)
    theta = model.flat()
    best_theta, best_loss = theta.copy(), _weighted_mse(model, hold_in, hold_y, hold_w)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr * cfg.lr_decay ** (epoch - 1)
        perm = train[rng.permutation(len(train))]
        for start in range(0, len(perm), cfg.batch_size):
            batch = perm[start:start + cfg.batch_size]
            b_in, b_y, b_w = view(batch)
            if b_w.sum() <= 0:
                continue
            loss, grad = sdnn_loss_and_grad(model, b_in, b_y, b_w, cfg.weight_decay)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}", epoch=epoch)
            step += 1
            m = beta1 * m + (1 - beta1) * grad
            v = beta2 * v + (1 - beta2) * grad * grad
            m_hat = m / (1 - beta1 ** step)
            v_hat = v / (1 - beta2 ** step)
            theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
            model = model.with_flat(theta)
        held = _weighted_mse(model, hold_in, hold_y, hold_w)
        if not np.isfinite(held):
            raise DivergenceError(f"non-finite held-out loss at epoch {epoch}", epoch=epoch)
        if held < best_loss:
            best_loss, best_theta, stale = held, theta.copy(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.debug("sdnn early stop at epoch %d (held-out %.6g)", epoch, best_loss)
                break
    return model.with_flat(best_theta)
