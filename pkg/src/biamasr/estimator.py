"""scikit-learn style wrapper around the staged trainer.

Speech inputs are ragged, so ``X`` is a list of ``(n_frames, d_in)`` arrays
(or a list of :class:`~biamasr.data.Utterance`) and ``y`` a list of grapheme
id sequences.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from biamasr.data import Utterance
from biamasr.metrics import cer
from biamasr.train import TrainConfig, evaluate, finetune_paired, pretrain_unpaired, train_paired

_DEFAULTS = TrainConfig()


def check_speech(X, n_features: int | None = None) -> list[np.ndarray]:
    """Validate a list of speech matrices; utterances contribute their ``speech``."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    out = []
    for k, item in enumerate(X):
        m = item.speech if isinstance(item, Utterance) else item
        if m is None:
            raise ValueError(f"item {k} has no speech features")
        m = check_array(m, dtype=np.float64, ensure_min_samples=1)
        if n_features is not None and m.shape[1] != n_features:
            raise ValueError(f"item {k} has {m.shape[1]} features, estimator was fitted with {n_features}")
        out.append(m)
    return out


def check_graphemes(y, vocab_size: int, n: int | None = None) -> list[list[int]]:
    """Validate grapheme sequences: non-empty integer ids in ``1..vocab_size``."""
    seqs = []
    for k, g in enumerate(y):
        g = [int(t) for t in g]
        if not g:
            raise ValueError(f"grapheme sequence {k} is empty")
        bad = [t for t in g if not 1 <= t <= vocab_size]
        if bad:
            raise ValueError(f"grapheme sequence {k} has ids outside 1..{vocab_size}: {bad[:5]}")
        seqs.append(g)
    if n is not None and len(seqs) != n:
        raise ValueError(f"{n} speech items but {len(seqs)} grapheme sequences")
    return seqs


def _paired(X, y, vocab_size: int) -> list[Utterance]:
    if y is None:
        if not all(isinstance(u, Utterance) for u in X):
            raise ValueError("y is required unless X is a list of Utterance")
        y = [u.graphemes for u in X]
    speech = check_speech(X)
    seqs = check_graphemes(y, vocab_size, len(speech))
    return [Utterance(f"fit{k:05d}", g, s) for k, (s, g) in enumerate(zip(speech, seqs))]


class BiamASR(BaseEstimator):
    """CTC/attention recognizer trained with the bidirectional alignment losses.

    ``fit`` runs paired training; when ``texts`` are given it then pretrains
    the decoder on them and fine-tunes on the paired data again.
    """

    def __init__(self, mode="biam_full", epochs=_DEFAULTS.epochs, lr=_DEFAULTS.lr, alpha=_DEFAULTS.alpha,
                 lam=_DEFAULTS.lam, vocab_size=_DEFAULTS.vocab_size, d_model=_DEFAULTS.d_model,
                 pretrain_epochs=_DEFAULTS.pretrain_epochs, finetune_epochs=_DEFAULTS.finetune_epochs,
                 heldout_fraction=0.0, seed=1):
        self.mode = mode
        self.epochs = epochs
        self.lr = lr
        self.alpha = alpha
        self.lam = lam
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.pretrain_epochs = pretrain_epochs
        self.finetune_epochs = finetune_epochs
        self.heldout_fraction = heldout_fraction
        self.seed = seed

    def _config(self) -> TrainConfig:
        return replace(_DEFAULTS, **self.get_params())

    def fit(self, X, y=None, texts=None):
        cfg = self._config()
        corpus = _paired(X, y, cfg.vocab_size)
        ckpt, history = train_paired(corpus, cfg)
        if texts is not None:
            ckpt = pretrain_unpaired(check_graphemes(texts, cfg.vocab_size), ckpt, cfg, history)
            ckpt = finetune_paired(corpus, ckpt, cfg, history)
        self.checkpoint_ = ckpt
        self.history_ = history
        self.model_ = ckpt.model()
        self.n_features_in_ = corpus[0].speech.shape[1]
        return self

    def predict(self, X) -> list[list[int]]:
        """Greedy CTC transcription of each speech matrix."""
        check_is_fitted(self)
        return [self.model_.transcribe(m) for m in check_speech(X, self.n_features_in_)]

    def transform(self, X) -> list[np.ndarray]:
        """Lower-stack speech embeddings, one ``(n_frames, d_model)`` array per item."""
        check_is_fitted(self)
        return [self.model_.speech_embedding(m) for m in check_speech(X, self.n_features_in_)]

    def align(self, X, y) -> list[np.ndarray]:
        """Speech-to-text attention ``w12`` for each paired item."""
        check_is_fitted(self)
        speech = check_speech(X, self.n_features_in_)
        seqs = check_graphemes(y, self.vocab_size, len(speech))
        return [self.model_.align(m, g).w12 for m, g in zip(speech, seqs)]

    def score(self, X, y=None) -> float:
        """``1 - CER`` of greedy decoding."""
        check_is_fitted(self)
        if y is None:
            y = [u.graphemes for u in X]
        refs = check_graphemes(y, self.vocab_size, len(X))
        return 1.0 - cer(self.predict(X), refs)

    def evaluate(self, X, y=None) -> dict:
        check_is_fitted(self)
        return evaluate(_paired(X, y, self.vocab_size), self.checkpoint_)
