"""Dense numerical substrate: matrices, softmax, seeded RNG, finite differences.

Matrices are plain numpy ndarrays (row-major, float64 unless stated otherwise).
Randomness always flows through a Philox counter-based generator so that a
seed fully determines every draw sequence, on any platform. All functions are
pure; nothing here mutates its inputs.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import NumericError, ShapeError

DEFAULT_SEED = 42


def make_rng(seed: int = DEFAULT_SEED) -> np.random.Generator:
    """Seeded Philox generator; identical seed gives identical streams."""
    return np.random.Generator(np.random.Philox(seed))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two 2-D arrays with explicit shape checking."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Softmax along the last axis with per-row max subtraction.

    Accepts 2-D matrices or stacked (e.g. per-head 3-D) arrays. Raises
    NumericError on non-finite input; the max subtraction makes overflow
    impossible for finite input.
    """
    m = np.asarray(m)
    if not np.isfinite(m).all():
        raise NumericError("softmax_rows received non-finite input")
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def randn(shape: tuple[int, ...] | int, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """iid standard-normal array, reproducible per generator state."""
    if isinstance(shape, int):
        shape = (shape,)
    if any(int(s) <= 0 for s in shape):
        raise ShapeError(f"dimensions must be positive, got {shape}")
    return rng.standard_normal(shape, dtype=np.float64).astype(dtype, copy=False)


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function, entry by entry.

    This is the reference oracle used to validate every analytic gradient in
    the package; it must never share code with the paths it checks.
    """
    if eps <= 0:
        raise ShapeError(f"eps must be positive, got {eps}")
    x = np.array(x, dtype=np.float64)  # private copy; the caller's array is untouched
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + eps
        f_plus = float(f(x))
        flat_x[i] = orig - eps
        f_minus = float(f(x))
        flat_x[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"function returned non-finite value at entry {i}")
        flat_g[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    """Frobenius-norm relative error, guarded against a zero denominator."""
    actual = np.asarray(actual)
    expected = np.asarray(expected)
    if actual.shape != expected.shape:
        raise ShapeError(f"cannot compare shapes {actual.shape} and {expected.shape}")
    num = float(np.linalg.norm(actual - expected))
    den = float(np.linalg.norm(expected))
    return num / max(den, 1e-300)
