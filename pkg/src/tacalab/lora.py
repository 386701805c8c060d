"""Low-rank adaptation of frozen weight matrices.

An adapter holds factors B (d x r) and A (r x k) plus a scale alpha; the
effective weight is W' = W + alpha * B @ A. B starts at zero so a fresh
adapter is exactly transparent, and only A and B ever receive gradients,
leaving the base weight untouched. The alpha scale is applied literally,
with no rank rescaling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DomainError, NumericError, ShapeError

INIT_STD = 0.02
ADAPTER_FORMAT = "tacalab-lora"
ADAPTER_VERSION = 1


@dataclass
class LoraAdapter:
    a: np.ndarray  # (rank, k)
    b: np.ndarray  # (d, rank)
    alpha: float
    rank: int

    def __post_init__(self):
        if self.a.ndim != 2 or self.b.ndim != 2:
            raise ShapeError("adapter factors must be 2-D")
        if self.a.shape[0] != self.rank or self.b.shape[1] != self.rank:
            raise ShapeError(
                f"factor shapes {self.b.shape} x {self.a.shape} do not match rank {self.rank}"
            )

    @property
    def frozen_base_dims(self) -> tuple[int, int]:
        return (self.b.shape[0], self.a.shape[1])

    def delta(self) -> np.ndarray:
        """The effective low-rank update alpha * B @ A."""
        return self.alpha * (self.b @ self.a)

    def num_trainable(self) -> int:
        return self.a.size + self.b.size


def init_lora(d: int, k: int, r: int, alpha: float, rng: np.random.Generator) -> LoraAdapter:
    """Zero-update initialization: B = 0, A ~ N(0, 0.02^2)."""
    if r < 1 or r > min(d, k):
        raise DomainError(f"rank {r} must satisfy 1 <= r <= min({d}, {k})")
    if alpha <= 0:
        raise DomainError(f"alpha must be positive, got {alpha}")
    a = rng.standard_normal((r, k)) * INIT_STD
    b = np.zeros((d, r))
    return LoraAdapter(a=a, b=b, alpha=float(alpha), rank=r)


def apply_lora(w: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """W + alpha * B @ A; the base weight is never modified."""
    if w.shape != adapter.frozen_base_dims:
        raise ShapeError(f"base weight {w.shape} != adapter dims {adapter.frozen_base_dims}")
    return w + adapter.delta()


def grads_from_weight_grad(
    adapter: LoraAdapter, grad_wprime: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Chain rule from d(loss)/dW' to the trainable factors.

    grad_A = alpha * B^T @ grad_W'      (rank, k)
    grad_B = alpha * grad_W' @ A^T      (d, rank)
    """
    if grad_wprime.shape != adapter.frozen_base_dims:
        raise ShapeError(
            f"weight grad {grad_wprime.shape} != adapter dims {adapter.frozen_base_dims}"
        )
    grad_a = adapter.alpha * (adapter.b.T @ grad_wprime)
    grad_b = adapter.alpha * (grad_wprime @ adapter.a.T)
    return grad_a, grad_b


def lora_grads(
    loss_fn: Callable[[np.ndarray, object], tuple[float, np.ndarray]],
    w: np.ndarray,
    adapter: LoraAdapter,
    inputs=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic factor gradients for a loss evaluated at W' = W + alpha*B*A.

    ``loss_fn(w_prime, inputs)`` returns (loss, d loss / d W'); the base W
    is treated as a constant, so no gradient for it is ever produced.
    """
    wprime = apply_lora(w, adapter)
    loss, grad_wprime = loss_fn(wprime, inputs)
    if not np.isfinite(loss):
        raise NumericError(f"loss is non-finite: {loss}")
    return grads_from_weight_grad(adapter, np.asarray(grad_wprime))


def merge(adapter: LoraAdapter, w: np.ndarray) -> np.ndarray:
    """Fold the adapter into the base weight for deployment."""
    return apply_lora(w, adapter)


def unmerge(adapter: LoraAdapter, w_merged: np.ndarray) -> np.ndarray:
    """Undo merge(); round-trips to the original weight within 1e-12."""
    if w_merged.shape != adapter.frozen_base_dims:
        raise ShapeError(f"merged weight {w_merged.shape} != adapter dims {adapter.frozen_base_dims}")
    return w_merged - adapter.delta()


def save_adapter(adapter: LoraAdapter, path) -> None:
    """JSON-of-arrays serialization, lossless in double precision."""
    d, k = adapter.frozen_base_dims
    doc = {
        "format": ADAPTER_FORMAT,
        "version": ADAPTER_VERSION,
        "d": d,
        "k": k,
        "r": adapter.rank,
        "alpha": adapter.alpha,
        "a": adapter.a.tolist(),
        "b": adapter.b.tolist(),
    }
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True)
    except OSError as exc:
        raise OSError(f"failed writing adapter to {path}: {exc}") from exc


def load_adapter(path) -> LoraAdapter:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise OSError(f"failed reading adapter from {path}: {exc}") from exc
    if doc.get("format") != ADAPTER_FORMAT or doc.get("version") != ADAPTER_VERSION:
        raise OSError(f"{path}: not a version-{ADAPTER_VERSION} {ADAPTER_FORMAT} file")
    adapter = LoraAdapter(
        a=np.array(doc["a"], dtype=np.float64),
        b=np.array(doc["b"], dtype=np.float64),
        alpha=float(doc["alpha"]),
        rank=int(doc["r"]),
    )
    if adapter.frozen_base_dims != (doc["d"], doc["k"]):
        raise OSError(f"{path}: header dims do not match stored factors")
    return adapter


class AdamW:
    """Decoupled-weight-decay Adam over a dict of parameter arrays.

    Parameters are updated in place; the slot buffers live per parameter
    name, so the same instance can be reused across steps.
    """

    def __init__(
        self,
        params: dict[str, np.ndarray],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        if lr <= 0:
            raise DomainError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p) for name, p in params.items()}
        self.v = {name: np.zeros_like(p) for name, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * update
