"""Bidirectional attention between speech frames and grapheme embeddings.

One score matrix ``a = x @ y.T`` is shared by both directions; a row softmax
of ``a`` maps every frame onto graphemes (``w12``) and a row softmax of
``a.T`` maps every grapheme onto frames (``w21``). There are no key/value
projections and no score scaling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from biamasr.numerics import as_matrix, row_softmax, row_softmax_backward


@dataclass
class BiamOutput:
    x: np.ndarray
    y: np.ndarray
    a: np.ndarray
    w12: np.ndarray
    w21: np.ndarray
    x_aligned: np.ndarray
    y_aligned: np.ndarray


def biam_forward(x: np.ndarray, y: np.ndarray) -> BiamOutput:
    """Align ``x`` (n1 x d) and ``y`` (n2 x d).

    Returns ``x_aligned = w21 @ x`` with n2 rows and ``y_aligned = w12 @ y``
    with n1 rows.
    """
    x = as_matrix(x, "x")
    y = as_matrix(y, "y")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"embedding dims differ: x is {x.shape[0]}x{x.shape[1]}, y is {y.shape[0]}x{y.shape[1]}")
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError(f"empty sequence: x has {x.shape[0]} rows, y has {y.shape[0]}")
    a = x @ y.T
    w12 = row_softmax(a)
    w21 = row_softmax(a.T)
    return BiamOutput(x, y, a, w12, w21, w21 @ x, w12 @ y)


def biam_backward(out: BiamOutput, grad_x_aligned: np.ndarray | None,
                  grad_y_aligned: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. ``x`` and ``y``; ``None`` means a zero upstream gradient."""
    gxa = np.zeros_like(out.x_aligned) if grad_x_aligned is None else np.asarray(grad_x_aligned, dtype=np.float64)
    gya = np.zeros_like(out.y_aligned) if grad_y_aligned is None else np.asarray(grad_y_aligned, dtype=np.float64)
    if gxa.shape != out.x_aligned.shape or gya.shape != out.y_aligned.shape:
        raise ValueError(f"upstream gradient shapes {gxa.shape}, {gya.shape} do not match "
                         f"aligned outputs {out.x_aligned.shape}, {out.y_aligned.shape}")
    # value paths
    gx = out.w21.T @ gxa
    gy = out.w12.T @ gya
    # score paths through the shared matrix
    ga = row_softmax_backward(out.w12, gya @ out.y.T)
    ga += row_softmax_backward(out.w21, gxa @ out.x.T).T
    gx += ga @ out.y
    gy += ga.T @ out.x
    return gx, gy


def monotonicity_score(w12: np.ndarray, band: float = 0.1, centered: bool = True) -> float:
    """Mean attention mass inside a diagonal band of half-width ``band``.

    Frame ``i`` and grapheme ``j`` are placed at the midpoints of their cells,
    ``(i + 0.5) / n1`` and ``(j + 0.5) / n2``, so a hard monotone alignment
    scores 1.0 whenever every frame centre lies within ``band`` of its
    grapheme's centre, whatever ``n1 / n2`` is. ``centered=False`` uses the
    left cell edges ``i / n1`` and ``j / n2`` instead, which drift apart
    inside long segments. Uniform attention scores about ``2 * band``.
    """
    w12 = as_matrix(w12, "w12")
    if not 0.0 < band < 1.0:
        raise ValueError(f"band must lie in (0, 1), got {band}")
    n1, n2 = w12.shape
    off = 0.5 if centered else 0.0
    i = (np.arange(n1)[:, None] + off) / n1
    j = (np.arange(n2)[None, :] + off) / n2
    inside = np.abs(j - i) <= band + 1e-12
    return float((w12 * inside).sum() / n1)
