"""Minibatch SGD on the symmetric InfoNCE loss for projectors."""
from __future__ import annotations

import warnings

import numpy as np

from .errors import NumericError
from .losses import infonce
from .numerics import Rng
from .projector import Projector, backward, forward


def sgd_infonce_epoch(p: Projector, image: np.ndarray, text: np.ndarray, lr: float,
                      batch: int, tau: float, rng: Rng):
    """One shuffled pass. Returns ``(new_projector, mean_batch_loss)``."""
    n = image.shape[0]
    order = rng.permutation(n)
    losses = []
    for start in range(0, n, batch):
        idx = order[start:start + batch]
        if idx.size < 2 and n >= 2:
            # a singleton tail batch carries no contrastive signal
            continue
        zv, zt, tape = forward(p, image[idx], text[idx])
        loss, d_zv, d_zt = infonce(zv, zt, tau)
        if not np.isfinite(loss):
            raise NumericError("non-finite InfoNCE during projector training")
        losses.append(loss)
        if lr == 0.0:
            continue
        grads = backward(p, tape, d_zv, d_zt, wrt="params").params
        p = p.map_tensors(lambda name, w: w - lr * grads[name])
    return p, float(np.mean(losses)) if losses else 0.0


def train_infonce(p: Projector, image: np.ndarray, text: np.ndarray, *, epochs: int,
                  lr: float, batch: int, tau: float, rng: Rng, on_epoch=None):
    """Train ``p`` for ``epochs`` passes; ``on_epoch(epoch, projector, loss)`` after each.

    Returns the final projector and the per-epoch mean losses.
    """
    n = image.shape[0]
    if batch > n:
        warnings.warn(f"batch {batch} exceeds dataset size {n}; clamping", stacklevel=2)
        batch = n
    history = []
    for epoch in range(1, epochs + 1):
        p, loss = sgd_infonce_epoch(p, image, text, lr, batch, tau, rng)
        history.append(loss)
        if on_epoch is not None:
            on_epoch(epoch, p, loss)
    return p, history
