"""Alignment losses (cosine distance, masked LM, grapheme CTC) and their mix
with the ASR losses into the multimodal objective."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from biamasr.ctc import ctc_loss
from biamasr.numerics import Affine, NonFiniteError, as_matrix, row_log_softmax


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1
    lam: float = 0.3

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")


@dataclass(frozen=True)
class MaskPlan:
    positions: tuple[int, ...]
    rate: float = 0.2

    @classmethod
    def sample(cls, n: int, rng: np.random.Generator, rate: float = 0.2) -> "MaskPlan":
        """Mask ``round(rate * n)`` distinct positions, at least one if ``n > 0``."""
        if n == 0:
            return cls((), rate)
        k = min(n, max(1, int(round(rate * n))))
        picked = np.sort(rng.choice(n, size=k, replace=False))
        return cls(tuple(int(p) for p in picked), rate)

    def apply(self, graphemes, mask_id: int = 0) -> np.ndarray:
        out = np.array(graphemes, dtype=np.int64)
        out[list(self.positions)] = mask_id
        return out


@dataclass
class LossBreakdown:
    asr_ctc: float = 0.0
    asr_attention: float = 0.0
    cd: float = 0.0
    mlm: float = 0.0
    gctc: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def cosine_distance_loss(y_aligned: np.ndarray, x: np.ndarray):
    """Mean over rows of ``1 - cos(y_aligned[t], x[t])``.

    Returns ``(loss, grad_y_aligned, grad_x)``.
    """
    ya = as_matrix(y_aligned, "y_aligned")
    x = as_matrix(x, "x")
    if ya.shape != x.shape:
        raise ValueError(f"shape mismatch: y_aligned {ya.shape} vs x {x.shape}")
    n = ya.shape[0]
    if n == 0:
        raise ValueError("cosine distance of empty sequences")
    ny = np.linalg.norm(ya, axis=1)
    nx = np.linalg.norm(x, axis=1)
    for name, norms in (("y_aligned", ny), ("x", nx)):
        zero = np.flatnonzero(norms == 0.0)
        if zero.size:
            raise ValueError(f"zero-norm row {int(zero[0])} in {name}")
    uy = ya / ny[:, None]
    ux = x / nx[:, None]
    cos = (uy * ux).sum(axis=1)
    loss = float(np.mean(1.0 - cos))
    # d cos / d a = (u_b - cos * u_a) / |a|
    gy = -(ux - cos[:, None] * uy) / ny[:, None] / n
    gx = -(uy - cos[:, None] * ux) / nx[:, None] / n
    return loss, gy, gx


def mlm_loss(x_aligned: np.ndarray, graphemes, plan: MaskPlan, head: Affine):
    """Cross-entropy of ``head(x_aligned[p])`` against ``graphemes[p]`` over masked ``p``.

    The head has V outputs; grapheme ``g`` is class ``g - 1``. Returns
    ``(loss, grad_x_aligned, head_grads)``.
    """
    xa = as_matrix(x_aligned, "x_aligned")
    g = np.asarray(graphemes, dtype=np.int64).reshape(-1)
    if g.size != xa.shape[0]:
        raise ValueError(f"{g.size} graphemes for {xa.shape[0]} aligned rows")
    pos = np.asarray(plan.positions, dtype=np.int64)
    if g.size and pos.size == 0:
        raise ValueError("empty mask plan on a nonempty sequence")
    if pos.size and (pos.min() < 0 or pos.max() >= g.size):
        raise ValueError(f"mask positions {pos.tolist()} outside [0, {g.size})")
    rows = xa[pos]
    logits = head(rows)
    logp = row_log_softmax(logits)
    cls = g[pos] - 1
    k = pos.size
    loss = -float(logp[np.arange(k), cls].mean())
    gl = np.exp(logp)
    gl[np.arange(k), cls] -= 1.0
    gl /= k
    grows, hg = head.backward(rows, gl)
    gxa = np.zeros_like(xa)
    np.add.at(gxa, pos, grows)
    return loss, gxa, hg


def sampler_source(rng: np.random.Generator, rate: float = 0.5) -> str:
    """One coin flip: ``"x"`` with probability ``rate``, else ``"y_aligned"``."""
    return "x" if rng.random() < rate else "y_aligned"


def sampler(x: np.ndarray, y_aligned: np.ndarray, rng: np.random.Generator, rate: float = 0.5):
    """Fair per-utterance coin between the speech embedding and the aligned text.

    Returns ``(selected, source)`` where ``source`` is ``"x"`` or ``"y_aligned"``
    and ``selected`` is that input object itself.
    """
    if np.shape(x) != np.shape(y_aligned):
        raise ValueError(f"shape mismatch: x {np.shape(x)} vs y_aligned {np.shape(y_aligned)}")
    source = sampler_source(rng, rate)
    return (x if source == "x" else y_aligned), source


def gctc_loss(selected: np.ndarray, graphemes, head: Affine):
    """CTC of ``head(selected)`` against the grapheme sequence.

    Returns ``(loss, grad_selected, head_grads)``.
    """
    selected = as_matrix(selected, "selected")
    logits = head(selected)
    loss, glogits = ctc_loss(logits, graphemes)
    gsel, hg = head.backward(selected, glogits)
    return loss, gsel, hg


def total_loss(asr_ctc: float, asr_attention: float, cd: float, mlm: float, gctc: float,
               weights: LossWeights = LossWeights(), cd_enabled: bool = True) -> LossBreakdown:
    """``lam*ctc + (1-lam)*att + alpha*(cd*[cd_enabled] + mlm + gctc)``."""
    parts = dict(asr_ctc=asr_ctc, asr_attention=asr_attention, cd=cd, mlm=mlm, gctc=gctc)
    for name, v in parts.items():
        if not np.isfinite(v):
            raise NonFiniteError(f"non-finite loss component {name}={v}")
    ali = (cd if cd_enabled else 0.0) + mlm + gctc
    total = weights.lam * asr_ctc + (1.0 - weights.lam) * asr_attention + weights.alpha * ali
    return LossBreakdown(**{k: float(v) for k, v in parts.items()}, total=float(total))
