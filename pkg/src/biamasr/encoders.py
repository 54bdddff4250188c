"""Toy encoder stacks and a single-head attention decoder.

Each layer is ``h <- h + dropout(tanh(h @ W + b))``. The speech encoder is
split into a lower stack (its output is the speech embedding fed to the
alignment block) and an upper stack (what unpaired text embeddings are fed
into during text-only pretraining).

Every component exposes ``params()`` (name -> the live array) and a
``backward`` that returns gradients keyed by the same names.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from biamasr.numerics import Affine, row_log_softmax, row_softmax, row_softmax_backward, sinusoidal_positions, xavier_init


def _dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    keep = 1.0 - rate
    return (rng.random(shape) < keep) / keep


class EncoderStack:
    """Optional input projection, optional positions, then residual tanh layers."""

    def __init__(self, layers: list[Affine], proj: Affine | None = None, positional: bool = False, dropout: float = 0.0):
        self.layers = layers
        self.proj = proj
        self.positional = positional
        self.dropout = dropout

    @classmethod
    def init(cls, d: int, n_layers: int, rng: np.random.Generator, d_in: int | None = None,
             positional: bool = False, dropout: float = 0.0) -> "EncoderStack":
        proj = Affine.init(d_in, d, rng) if d_in is not None else None
        layers = [Affine.init(d, d, rng) for _ in range(n_layers)]
        return cls(layers, proj, positional, dropout)

    @property
    def d_model(self) -> int:
        if self.proj is not None:
            return self.proj.w.shape[1]
        return self.layers[0].w.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        if self.proj is not None:
            out["proj.w"], out["proj.b"] = self.proj.w, self.proj.b
        for i, layer in enumerate(self.layers):
            out[f"layer{i}.w"], out[f"layer{i}.b"] = layer.w, layer.b
        return out

    def forward(self, h: np.ndarray, train: bool = False, rng: np.random.Generator | None = None):
        h = np.asarray(h, dtype=np.float64)
        if h.ndim != 2:
            raise ValueError(f"encoder input must be 2-D, got shape {h.shape}")
        cache = {"input": h, "layer_inputs": [], "acts": [], "masks": []}
        if self.proj is not None:
            if h.shape[1] != self.proj.w.shape[0]:
                raise ValueError(f"feature dim {h.shape[1]} does not match input projection {self.proj.w.shape[0]}")
            h = self.proj(h)
        elif self.layers and h.shape[1] != self.layers[0].w.shape[0]:
            raise ValueError(f"input dim {h.shape[1]} does not match model dim {self.layers[0].w.shape[0]}")
        if self.positional:
            h = h + sinusoidal_positions(h.shape[0], h.shape[1])
        for layer in self.layers:
            cache["layer_inputs"].append(h)
            a = np.tanh(layer(h))
            cache["acts"].append(a)
            if train and self.dropout > 0.0:
                mask = _dropout_mask(a.shape, self.dropout, rng)
                cache["masks"].append(mask)
                a = a * mask
            else:
                cache["masks"].append(None)
            h = h + a
        return h, cache

    def backward(self, grad_out: np.ndarray, cache) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        grads = {}
        g = grad_out
        for i in reversed(range(len(self.layers))):
            ga = g if cache["masks"][i] is None else g * cache["masks"][i]
            gz = ga * (1.0 - cache["acts"][i] ** 2)
            gin, lg = self.layers[i].backward(cache["layer_inputs"][i], gz)
            grads[f"layer{i}.w"], grads[f"layer{i}.b"] = lg["w"], lg["b"]
            g = g + gin
        if self.proj is not None:
            g, pg = self.proj.backward(cache["input"], g)
            grads["proj.w"], grads["proj.b"] = pg["w"], pg["b"]
        return g, grads


def encode_speech_lower(features: np.ndarray, stack: EncoderStack, train=False, rng=None) -> np.ndarray:
    return stack.forward(features, train, rng)[0]


def encode_speech_upper(x: np.ndarray, stack: EncoderStack, train=False, rng=None) -> np.ndarray:
    return stack.forward(x, train, rng)[0]


class TextEncoder:
    """Grapheme embedding lookup followed by an :class:`EncoderStack`.

    Table rows are indexed by token id. Id 0 is the CTC blank, which never
    occurs in text, so its row doubles as the MLM ``MASK`` embedding.
    """

    MASK = 0

    def __init__(self, table: np.ndarray, stack: EncoderStack):
        self.table = table
        self.stack = stack

    @classmethod
    def init(cls, vocab_size: int, d: int, n_layers: int, rng: np.random.Generator, dropout: float = 0.0) -> "TextEncoder":
        table = xavier_init(vocab_size + 1, d, rng)
        return cls(table, EncoderStack.init(d, n_layers, rng, positional=True, dropout=dropout))

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0] - 1

    def params(self) -> dict[str, np.ndarray]:
        out = {"table": self.table}
        out.update({f"stack.{k}": v for k, v in self.stack.params().items()})
        return out

    def forward(self, tokens, train: bool = False, rng=None):
        ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() > self.vocab_size):
            bad = int(ids[(ids < 0) | (ids > self.vocab_size)][0])
            raise ValueError(f"grapheme id {bad} outside vocabulary [1, {self.vocab_size}]")
        emb = self.table[ids]
        if ids.size == 0:
            return np.zeros((0, self.table.shape[1])), {"ids": ids, "stack": None}
        y, sc = self.stack.forward(emb, train, rng)
        return y, {"ids": ids, "stack": sc}

    def backward(self, grad_out: np.ndarray, cache) -> dict[str, np.ndarray]:
        gtab = np.zeros_like(self.table)
        if cache["stack"] is None:
            return {"table": gtab, **{f"stack.{k}": np.zeros_like(v) for k, v in self.stack.params().items()}}
        gemb, sg = self.stack.backward(grad_out, cache["stack"])
        np.add.at(gtab, cache["ids"], gemb)
        out = {"table": gtab}
        out.update({f"stack.{k}": v for k, v in sg.items()})
        return out


def encode_text(graphemes, enc: TextEncoder, train=False, rng=None) -> np.ndarray:
    return enc.forward(graphemes, train, rng)[0]


@dataclass
class _DecoderCache:
    enc: np.ndarray
    prev: np.ndarray
    gold: np.ndarray
    emb: np.ndarray
    q: np.ndarray
    attn: np.ndarray
    pre: np.ndarray
    h: np.ndarray
    logp: np.ndarray = field(repr=False)


class ToyDecoder:
    """Teacher-forced, single-head cross-attention decoder.

    Output classes: 0 is EOS, ``g`` in ``1..V`` is grapheme ``g``.
    Embedding rows: ``1..V`` graphemes, ``V+1`` BOS (row 0 is unused).
    """

    def __init__(self, table: np.ndarray, query: Affine, out: Affine, proj: Affine):
        self.table = table
        self.query = query
        self.out = out
        self.proj = proj

    @classmethod
    def init(cls, vocab_size: int, d: int, rng: np.random.Generator) -> "ToyDecoder":
        return cls(xavier_init(vocab_size + 2, d, rng), Affine.init(d, d, rng),
                   Affine.init(d, d, rng), Affine.init(d, vocab_size + 1, rng))

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0] - 2

    @property
    def bos(self) -> int:
        return self.vocab_size + 1

    def params(self) -> dict[str, np.ndarray]:
        return {"table": self.table, "query.w": self.query.w, "query.b": self.query.b,
                "out.w": self.out.w, "out.b": self.out.b, "proj.w": self.proj.w, "proj.b": self.proj.b}

    def forward(self, enc_out: np.ndarray, targets):
        enc_out = np.asarray(enc_out, dtype=np.float64)
        if enc_out.shape[0] == 0:
            raise ValueError("decoder needs a nonempty encoder output")
        tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
        if tgt.size == 0:
            raise ValueError("decoder targets must be nonempty")
        if tgt.min() < 1 or tgt.max() > self.vocab_size:
            raise ValueError(f"decoder target outside [1, {self.vocab_size}]")
        prev = np.concatenate([[self.bos], tgt])
        gold = np.concatenate([tgt, [0]])
        emb = self.table[prev]
        q = self.query(emb)
        scale = 1.0 / np.sqrt(enc_out.shape[1])
        attn = row_softmax(q @ enc_out.T * scale)
        ctx = attn @ enc_out
        pre = ctx + q
        h = np.tanh(self.out(pre))
        logits = self.proj(h)
        logp = row_log_softmax(logits)
        loss = -float(np.mean(logp[np.arange(gold.size), gold]))
        return loss, logits, _DecoderCache(enc_out, prev, gold, emb, q, attn, pre, h, logp)

    def backward(self, c: _DecoderCache) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        n = c.gold.size
        glogits = np.exp(c.logp)
        glogits[np.arange(n), c.gold] -= 1.0
        glogits /= n
        gh, gp = self.proj.backward(c.h, glogits)
        gz = gh * (1.0 - c.h ** 2)
        gpre, go = self.out.backward(c.pre, gz)
        gctx = gpre
        gq = gpre.copy()
        g_enc = c.attn.T @ gctx
        gattn = gctx @ c.enc.T
        gs = row_softmax_backward(c.attn, gattn) / np.sqrt(c.enc.shape[1])
        gq += gs @ c.enc
        g_enc += gs.T @ c.q
        gemb, gqp = self.query.backward(c.emb, gq)
        gtab = np.zeros_like(self.table)
        np.add.at(gtab, c.prev, gemb)
        grads = {"table": gtab, "query.w": gqp["w"], "query.b": gqp["b"],
                 "out.w": go["w"], "out.b": go["b"], "proj.w": gp["w"], "proj.b": gp["b"]}
        return g_enc, grads


def decode_teacher_forced(enc_out: np.ndarray, targets, dec: ToyDecoder) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of the decoder against ``targets + [EOS]``."""
    loss, logits, _ = dec.forward(enc_out, targets)
    return loss, logits
