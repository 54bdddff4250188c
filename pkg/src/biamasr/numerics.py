"""Dense float64 primitives shared by every other module.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Randomness
comes from :func:`make_rng`, a Philox (counter-based) generator, so a seed
reproduces the same stream on every platform numpy supports.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient evaluation produces NaN/Inf."""


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox generator keyed on ``(seed, stream)``.

    Different ``stream`` values give statistically independent sequences for
    the same seed (used e.g. to keep unpaired text disjoint from paired data).
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream)])
    return np.random.Generator(np.random.Philox(ss))


def rng_state(rng: np.random.Generator) -> dict:
    """JSON-serialisable snapshot of a generator's state."""
    return _to_jsonable(rng.bit_generator.state)


def restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.Philox()
    bg.state = _from_jsonable(state)
    return np.random.Generator(bg)


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.asarray(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a shape check that reports both operands."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape[0]}x{a.shape[1]} @ {b.shape[0]}x{b.shape[1]}")
    return a @ b


def row_softmax(m: np.ndarray) -> np.ndarray:
    """Softmax over each row, stabilised by subtracting the row max."""
    m = np.asarray(m, dtype=np.float64)
    z = m - m.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def row_log_softmax(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    z = m - m.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def row_softmax_backward(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the logits of ``p = row_softmax(logits)``."""
    return p * (grad_p - (grad_p * p).sum(axis=-1, keepdims=True))


def xavier_init(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform matrix in ``±sqrt(6 / (rows + cols))``."""
    if rows < 1 or cols < 1:
        raise ValueError(f"xavier_init needs positive dims, got {rows}x{cols}")
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """Standard sin/cos positional table of shape ``(n, d)``."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d)
    rates = 1.0 / np.power(10000.0, (2 * (i // 2)) / d)
    ang = pos * rates[None, :]
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))


def finite_diff_grad(f: Callable[[np.ndarray], float], p: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at flat vector ``p``."""
    p = np.array(p, dtype=np.float64).ravel()
    grad = np.zeros_like(p)
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + step
        fp = f(p)
        p[i] = orig - step
        fm = f(p)
        p[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """``||a - n|| / max(||a||, ||n||)``; zero when both are (near) zero."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


class Affine:
    """``y = x @ w + b`` with an explicit backward."""

    def __init__(self, w: np.ndarray, b: np.ndarray):
        self.w = w
        self.b = b

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator) -> "Affine":
        return cls(xavier_init(d_in, d_out, rng), np.zeros(d_out))

    def params(self) -> dict[str, np.ndarray]:
        return {"w": self.w, "b": self.b}

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.w.shape[0]:
            raise ValueError(f"affine expects input dim {self.w.shape[0]}, got {x.shape[-1]}")
        return x @ self.w + self.b

    def backward(self, x: np.ndarray, grad_out: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        return grad_out @ self.w.T, {"w": x.T @ grad_out, "b": grad_out.sum(axis=0)}
