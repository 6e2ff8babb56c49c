"""Local SGD shared by benign baseline clients, adversaries, and SPFL's first round."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DivergenceError
from .nn import Network, ParamVector

# (inputs, class indices) -> (inputs, class indices)
BatchTransform = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass
class Shard:
    """A client's local data: inputs in [0, 1] and integer class labels."""

    owner: int
    inputs: np.ndarray
    labels: np.ndarray
    source: str = ""

    def __len__(self) -> int:
        return len(self.labels)


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels)


def sgd_step(flat: torch.Tensor, loss: torch.Tensor, lr: float) -> torch.Tensor:
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss.item()}")
    (grad,) = torch.autograd.grad(loss, flat)
    return (flat - lr * grad).detach().requires_grad_(True)


def sgd_train(
    net: Network,
    params: ParamVector,
    shard: Shard,
    *,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    transform: BatchTransform | None = None,
) -> ParamVector:
    """Plain mini-batch SGD on cross-entropy; ``transform`` poisons each batch when set."""
    flat = torch.tensor(params.values, requires_grad=True)
    for _ in range(epochs):
        for idx in minibatches(len(shard), batch_size, rng):
            x, y = shard.inputs[idx], shard.labels[idx]
            if transform is not None:
                x, y = transform(x, y)
            logits, _ = net.apply(flat, torch.from_numpy(x))
            flat = sgd_step(flat, cross_entropy(logits, torch.from_numpy(y)), lr)
    return params.with_values(flat.detach().numpy().copy())
