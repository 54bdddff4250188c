"""Edit distance and character (grapheme) error rate."""

from __future__ import annotations

import numpy as np


def levenshtein(hyp, ref) -> int:
    hyp = list(hyp)
    ref = list(ref)
    prev = np.arange(len(ref) + 1)
    for i, h in enumerate(hyp, start=1):
        cur = np.empty_like(prev)
        cur[0] = i
        for j, r in enumerate(ref, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return int(prev[-1])


def cer(hyps, refs) -> float:
    """Corpus-averaged per-utterance error rate ``edit(hyp, ref) / len(ref)``."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses for {len(refs)} references")
    if not refs:
        return 0.0
    rates = [levenshtein(h, r) / max(len(r), 1) for h, r in zip(hyps, refs)]
    return float(np.mean(rates))
