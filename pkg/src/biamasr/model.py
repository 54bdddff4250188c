"""The full multimodal network and its per-utterance forward/backward."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from biamasr.biam import biam_backward, biam_forward
from biamasr.ctc import ctc_greedy_decode, ctc_loss
from biamasr.encoders import EncoderStack, TextEncoder, ToyDecoder
from biamasr.losses import LossWeights, MaskPlan, cosine_distance_loss, gctc_loss, mlm_loss, total_loss
from biamasr.numerics import Affine, make_rng

MODES = ("baseline", "grapheme_ctc_baseline", "biam_no_cd", "biam_full")
BIAM_MODES = ("biam_no_cd", "biam_full")

# Flipped off only by the gating-exactness test, which needs a build without
# any cosine-distance code on the training path.
_CD_PATH = True


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 10
    d_in: int = 8
    d_model: int = 16
    n_lower: int = 2
    n_upper: int = 2
    n_text: int = 2
    dropout: float = 0.1

    def as_dict(self) -> dict:
        return asdict(self)


class MultimodalModel:
    """Speech encoder (lower + upper), text encoder, ASR heads, decoder and
    the alignment heads (grapheme CTC, MLM)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = make_rng(seed, 100)
        d, V = cfg.d_model, cfg.vocab_size
        self.lower = EncoderStack.init(d, cfg.n_lower, rng, d_in=cfg.d_in, positional=True, dropout=cfg.dropout)
        self.upper = EncoderStack.init(d, cfg.n_upper, rng, dropout=cfg.dropout)
        self.text = TextEncoder.init(V, d, cfg.n_text, rng, dropout=cfg.dropout)
        self.decoder = ToyDecoder.init(V, d, rng)
        self.asr_head = Affine.init(d, V + 1, rng)
        self.gctc_head = Affine.init(d, V + 1, rng)
        self.mlm_head = Affine.init(d, V, rng)

    def _parts(self):
        return {"lower": self.lower, "upper": self.upper, "text": self.text, "decoder": self.decoder,
                "asr_head": self.asr_head, "gctc_head": self.gctc_head, "mlm_head": self.mlm_head}

    def params(self) -> dict[str, np.ndarray]:
        """Every trainable array, keyed ``<part>.<name>``, in a fixed order."""
        out = {}
        for pname, part in self._parts().items():
            for k, v in part.params().items():
                out[f"{pname}.{k}"] = v
        return out

    def load_params(self, values: dict[str, np.ndarray]) -> None:
        live = self.params()
        missing = set(live) - set(values)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, arr in live.items():
            src = np.asarray(values[k], dtype=np.float64)
            if src.shape != arr.shape:
                raise ValueError(f"parameter {k}: shape {src.shape}, expected {arr.shape}")
            arr[...] = src

    # -- inference -----------------------------------------------------------------

    def speech_embedding(self, speech: np.ndarray) -> np.ndarray:
        return self.lower.forward(speech)[0]

    def asr_logits(self, speech: np.ndarray) -> np.ndarray:
        x = self.lower.forward(speech)[0]
        return self.asr_head(self.upper.forward(x)[0])

    def transcribe(self, speech: np.ndarray) -> list[int]:
        return ctc_greedy_decode(self.asr_logits(speech))

    def align(self, speech: np.ndarray, graphemes):
        x = self.lower.forward(speech)[0]
        y = self.text.forward(graphemes)[0]
        return biam_forward(x, y)

    # -- training ------------------------------------------------------------------

    def forward_backward(self, speech, graphemes, *, mode: str = "biam_full", weights: LossWeights = LossWeights(),
                         cd_enabled: bool = True, plan: MaskPlan | None = None, source: str = "x",
                         train: bool = False, rng: np.random.Generator | None = None,
                         cd_stop_grad_x: bool = False, need_grads: bool = True):
        """Multimodal loss for one paired utterance.

        ``plan`` (MLM mask positions) and ``source`` (sampler pick, ``"x"`` or
        ``"y_aligned"``) are passed in so the loss is a deterministic function
        of the parameters. Returns ``(LossBreakdown, grads)``; grads only
        cover parts the mode touches.
        """
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        lam, alpha = weights.lam, weights.alpha
        grads: dict[str, np.ndarray] = {}

        x, c_low = self.lower.forward(speech, train, rng)
        h, c_up = self.upper.forward(x, train, rng)
        logits = self.asr_head(h)
        l_ctc, g_logits = ctc_loss(logits, graphemes)
        l_att, _, c_dec = self.decoder.forward(h, graphemes)

        l_cd = l_mlm = l_gctc = 0.0
        g_x = np.zeros_like(x)
        g_xa = g_ya = None
        out = c_text = None
        if mode == "grapheme_ctc_baseline" and alpha > 0:
            l_gctc, g_sel, g_gh = gctc_loss(x, graphemes, self.gctc_head)
            g_x += alpha * g_sel
            _put(grads, "gctc_head", g_gh, alpha)
        elif mode in BIAM_MODES and alpha > 0:
            if plan is None:
                raise ValueError("biam modes need a mask plan")
            y, c_text = self.text.forward(plan.apply(graphemes, TextEncoder.MASK), train, rng)
            out = biam_forward(x, y)
            g_xa = np.zeros_like(out.x_aligned)
            g_ya = np.zeros_like(out.y_aligned)
            if _CD_PATH and mode == "biam_full":
                if cd_enabled:
                    l_cd, g_cdy, g_cdx = cosine_distance_loss(out.y_aligned, x)
                    g_ya += alpha * g_cdy
                    if not cd_stop_grad_x:
                        g_x += alpha * g_cdx
                else:
                    # logged only; contributes nothing
                    l_cd = cosine_distance_loss(out.y_aligned, x)[0]
            l_mlm, g_mlm, g_mh = mlm_loss(out.x_aligned, graphemes, plan, self.mlm_head)
            g_xa += alpha * g_mlm
            _put(grads, "mlm_head", g_mh, alpha)
            selected = x if source == "x" else out.y_aligned
            l_gctc, g_sel, g_gh = gctc_loss(selected, graphemes, self.gctc_head)
            if source == "x":
                g_x += alpha * g_sel
            else:
                g_ya += alpha * g_sel
            _put(grads, "gctc_head", g_gh, alpha)

        breakdown = total_loss(l_ctc, l_att, l_cd, l_mlm, l_gctc, weights,
                               cd_enabled=cd_enabled and mode == "biam_full")
        if not need_grads:
            return breakdown, {}

        g_h, g_ah = self.asr_head.backward(h, lam * g_logits)
        _put(grads, "asr_head", g_ah)
        g_hdec, g_dec = self.decoder.backward(c_dec)
        g_h += (1.0 - lam) * g_hdec
        _put(grads, "decoder", g_dec, 1.0 - lam)
        if out is not None:
            g_xb, g_y = biam_backward(out, g_xa, g_ya)
            g_x += g_xb
            _put(grads, "text", self.text.backward(g_y, c_text))
        g_xu, g_upper = self.upper.backward(g_h, c_up)
        _put(grads, "upper", g_upper)
        g_x += g_xu
        _, g_lower = self.lower.backward(g_x, c_low)
        _put(grads, "lower", g_lower)
        return breakdown, grads

    def decoder_forward_backward(self, enc_in: np.ndarray, graphemes, *, train: bool = False, rng=None,
                                 need_upper_grads: bool = False):
        """Attention-decoder loss on ``upper(enc_in)``; used for text-only pretraining."""
        h, c_up = self.upper.forward(enc_in, train, rng)
        loss, _, c_dec = self.decoder.forward(h, graphemes)
        grads = {}
        g_h, g_dec = self.decoder.backward(c_dec)
        _put(grads, "decoder", g_dec)
        if need_upper_grads:
            _put(grads, "upper", self.upper.backward(g_h, c_up)[1])
        return loss, grads


def _put(grads: dict, prefix: str, part: dict, scale: float = 1.0) -> None:
    for k, v in part.items():
        key = f"{prefix}.{k}"
        v = v * scale if scale != 1.0 else v
        if key in grads:
            grads[key] = grads[key] + v
        else:
            grads[key] = v
