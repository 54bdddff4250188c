"""Connectionist temporal classification in log space.

Blank is always class 0; labels are ``1..V``. ``ctc_bruteforce`` enumerates
every frame path and is the reference the dynamic program is tested against.
"""

from __future__ import annotations

import itertools

import numpy as np

from biamasr.numerics import as_matrix, row_log_softmax

BLANK = 0
_NEG_INF = -np.inf


class CTCUnreachableError(ValueError):
    """The target cannot be emitted in the given number of frames."""


def min_frames(target) -> int:
    """Fewest frames able to emit ``target``: one per label plus a blank between repeats."""
    t = list(target)
    return len(t) + sum(1 for a, b in zip(t, t[1:]) if a == b)


def _check_target(target, n_classes: int) -> np.ndarray:
    tgt = np.asarray(target, dtype=np.int64).reshape(-1)
    if tgt.size and (tgt.min() < 1 or tgt.max() >= n_classes):
        raise ValueError(f"target labels must lie in [1, {n_classes - 1}], got {tgt.tolist()}")
    return tgt


def _shift(v: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(v, _NEG_INF)
    out[k:] = v[:-k] if k else v
    return out


def ctc_loss(logits: np.ndarray, target) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``target`` and its gradient w.r.t. ``logits``.

    ``logits`` is T x (V+1), unnormalised, column 0 = blank. Raises
    :class:`CTCUnreachableError` when T is too short for the target.
    """
    logits = as_matrix(logits, "logits")
    T, C = logits.shape
    if T < 1:
        raise ValueError("ctc_loss needs at least one frame")
    tgt = _check_target(target, C)
    if T < min_frames(tgt):
        raise CTCUnreachableError(f"target of length {tgt.size} needs {min_frames(tgt)} frames, got {T}")

    lp = row_log_softmax(logits)
    ext = np.zeros(2 * tgt.size + 1, dtype=np.int64)
    ext[1::2] = tgt
    S = ext.size
    # transition s-2 -> s allowed for labels that differ from the label two back
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    emit = lp[:, ext]  # T x S
    alpha = np.full((T, S), _NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = np.logaddexp(prev, _shift(prev, 1))
        acc = np.where(skip, np.logaddexp(acc, _shift(prev, 2)), acc)
        alpha[t] = acc + emit[t]

    beta = np.full((T, S), _NEG_INF)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    skip_from = np.zeros(S, dtype=bool)
    skip_from[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        acc = np.logaddexp(nxt, _shift(nxt[::-1], 1)[::-1])
        acc = np.where(skip_from, np.logaddexp(acc, _shift(nxt[::-1], 2)[::-1]), acc)
        beta[t] = acc + emit[t]

    log_p = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    if not np.isfinite(log_p):
        raise CTCUnreachableError("target has zero probability")

    log_gamma = alpha + beta - emit - log_p
    occ = np.zeros((T, C))
    gamma = np.exp(log_gamma)
    for c in np.unique(ext):
        occ[:, c] = gamma[:, ext == c].sum(axis=1)
    grad = np.exp(lp) - occ
    return float(-log_p), grad


def ctc_bruteforce(logits: np.ndarray, target, max_paths: int = 10**6) -> float:
    """Reference CTC loss by enumerating all ``(V+1)**T`` frame paths."""
    logits = as_matrix(logits, "logits")
    T, C = logits.shape
    if C ** T > max_paths:
        raise ValueError(f"instance too large for enumeration: {C}^{T} paths")
    tgt = tuple(int(v) for v in _check_target(target, C))
    lp = row_log_softmax(logits)
    total = _NEG_INF
    for path in itertools.product(range(C), repeat=T):
        if collapse(path) == tgt:
            total = np.logaddexp(total, lp[np.arange(T), path].sum())
    if not np.isfinite(total):
        raise CTCUnreachableError("no frame path collapses to the target")
    return float(-total)


def collapse(path) -> tuple[int, ...]:
    """Merge repeated labels, then drop blanks."""
    out = []
    prev = None
    for p in path:
        p = int(p)
        if p != prev and p != BLANK:
            out.append(p)
        prev = p
    return tuple(out)


def ctc_greedy_decode(logits: np.ndarray) -> list[int]:
    """Best-path decoding: per-frame argmax, then :func:`collapse`."""
    logits = np.asarray(logits)
    if logits.shape[0] == 0:
        return []
    return list(collapse(np.argmax(logits, axis=1)))
