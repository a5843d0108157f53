"""Desk-scale training sanity check: full-batch gradient descent on a toy network."""
from __future__ import annotations

import numpy as np

from ..errors import ConfigError, DivergenceError
from ..model import ModelSpec, build, is_learnable
from .vjp import cross_entropy, model_vjp, network_forward

MAX_PARAMS = 200_000
MAX_SAMPLES = 64

# pinned after a first run: loss < 0.05 by step 10 on synthetic_dataset(seed=0)
PINNED_SEED = 0
PINNED_LR = 0.003


def synthetic_dataset(n: int = 16, classes: int = 2, resolution: int = 32, seed: int = 0, noise: float = 0.5):
    """Balanced labels; each image is a fixed per-class template plus Gaussian noise."""
    rng = np.random.default_rng(seed)
    templates = rng.standard_normal((classes, resolution, resolution, 3))
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    images = templates[labels] + noise * rng.standard_normal((n, resolution, resolution, 3))
    return images, labels


def micro_train(spec: ModelSpec, images: np.ndarray, labels: np.ndarray, steps: int = 200,
                lr: float = PINNED_LR, seed: int = PINNED_SEED, init: str = "fan_in") -> list[float]:
    """Plain full-batch gradient descent on softmax cross-entropy in float64.

    Returns ``steps + 1`` losses: the initial loss, then one per update.
    BN statistics stay frozen; only learnable weights move.
    """
    model = build(spec, seed=seed, dtype=np.float64, init=init)
    if model.num_parameters() > MAX_PARAMS:
        raise ConfigError(f"micro_train is for toy specs (<= {MAX_PARAMS:,} params), got {model.num_parameters():,}")
    if len(images) > MAX_SAMPLES:
        raise ConfigError(f"micro_train takes at most {MAX_SAMPLES} samples, got {len(images)}")
    if len(images) != len(labels):
        raise ConfigError(f"{len(images)} images but {len(labels)} labels")
    weights = {n: a.copy() for n, a in model.weights.items()}
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels)
    losses = []
    for step in range(steps + 1):
        logits = network_forward(spec, weights, x)
        loss, dlogits = cross_entropy(logits, y)
        if not np.isfinite(loss):
            raise DivergenceError(step, loss)
        losses.append(loss)
        if step == steps:
            break
        _, grads = model_vjp(spec, weights, x, dlogits)
        for name, g in grads.items():
            if is_learnable(name):
                weights[name] -= lr * g
    return losses
