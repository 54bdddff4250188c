"""Finite-difference checks of every analytic gradient in the package.

Each check builds a small fixed instance, evaluates the analytic gradient,
and compares it array by array with :func:`finite_diff_grad`.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from biamasr.biam import biam_backward, biam_forward
from biamasr.ctc import ctc_loss
from biamasr.encoders import EncoderStack, TextEncoder, ToyDecoder
from biamasr.losses import LossWeights, MaskPlan, cosine_distance_loss, gctc_loss, mlm_loss
from biamasr.model import ModelConfig, MultimodalModel
from biamasr.numerics import Affine, finite_diff_grad, make_rng, relative_error, row_softmax, row_softmax_backward

TOLERANCE = 1e-3
STEP = 1e-4


@dataclass
class GradcheckResult:
    op: str
    worst_array: str
    rel_error: float
    n_arrays: int
    tol: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.rel_error)) and self.rel_error <= self.tol


def numeric_grads(loss_fn: Callable[[], float], arrays: dict[str, np.ndarray], step: float = STEP):
    """Central differences of ``loss_fn()`` w.r.t. each array, perturbed in place."""
    out = {}
    for name, arr in arrays.items():
        saved = arr.copy()

        def f(p, arr=arr):
            arr[...] = p.reshape(arr.shape)
            return loss_fn()

        out[name] = finite_diff_grad(f, saved.ravel(), step).reshape(arr.shape)
        arr[...] = saved
    return out


def _compare(op: str, analytic: dict, numeric: dict, tol: float) -> GradcheckResult:
    worst, worst_err = "", 0.0
    for name in numeric:
        err = relative_error(analytic.get(name, np.zeros_like(numeric[name])), numeric[name])
        if err > worst_err or not worst:
            worst, worst_err = name, err
    return GradcheckResult(op, worst, worst_err, len(numeric), tol)


# -- individual checks: each returns (loss_fn, arrays, analytic_fn) ---------------

def _softmax_case(rng):
    m = rng.standard_normal((4, 5))
    r = rng.standard_normal((4, 5))
    loss = lambda: float((r * row_softmax(m)).sum())
    grad = lambda: {"m": row_softmax_backward(row_softmax(m), r)}
    return loss, {"m": m}, grad


def _stack_arrays(prefix, stack):
    return {f"{prefix}.{k}": v for k, v in stack.params().items()}


def _lower_case(rng):
    stack = EncoderStack.init(4, 2, rng, d_in=3, positional=True)
    feats = rng.standard_normal((5, 3))
    r = rng.standard_normal((5, 4))
    loss = lambda: float((r * stack.forward(feats)[0]).sum())

    def grad():
        _, cache = stack.forward(feats)
        gin, g = stack.backward(r, cache)
        return {"features": gin, **{f"lower.{k}": v for k, v in g.items()}}

    return loss, {"features": feats, **_stack_arrays("lower", stack)}, grad


def _upper_case(rng):
    stack = EncoderStack.init(4, 2, rng)
    x = rng.standard_normal((5, 4))
    r = rng.standard_normal((5, 4))
    loss = lambda: float((r * stack.forward(x)[0]).sum())

    def grad():
        _, cache = stack.forward(x)
        gin, g = stack.backward(r, cache)
        return {"x": gin, **{f"upper.{k}": v for k, v in g.items()}}

    return loss, {"x": x, **_stack_arrays("upper", stack)}, grad


def _text_case(rng):
    enc = TextEncoder.init(5, 4, 2, rng)
    ids = [3, 1, 3, 0, 5]
    r = rng.standard_normal((5, 4))
    loss = lambda: float((r * enc.forward(ids)[0]).sum())

    def grad():
        _, cache = enc.forward(ids)
        return {f"text.{k}": v for k, v in enc.backward(r, cache).items()}

    return loss, {f"text.{k}": v for k, v in enc.params().items()}, grad


def _decoder_case(rng):
    dec = ToyDecoder.init(4, 4, rng)
    enc = rng.standard_normal((3, 4))
    tgt = [2, 4, 2]
    loss = lambda: dec.forward(enc, tgt)[0]

    def grad():
        g_enc, g = dec.backward(dec.forward(enc, tgt)[2])
        return {"enc_out": g_enc, **{f"decoder.{k}": v for k, v in g.items()}}

    return loss, {"enc_out": enc, **{f"decoder.{k}": v for k, v in dec.params().items()}}, grad


def _biam_case(rng):
    x = rng.standard_normal((5, 3))
    y = rng.standard_normal((3, 3))
    rx = rng.standard_normal((3, 3))
    ry = rng.standard_normal((5, 3))

    def loss():
        out = biam_forward(x, y)
        return float((rx * out.x_aligned).sum() + (ry * out.y_aligned).sum())

    def grad():
        gx, gy = biam_backward(biam_forward(x, y), rx, ry)
        return {"x": gx, "y": gy}

    return loss, {"x": x, "y": y}, grad


def _cd_case(rng):
    ya = rng.standard_normal((4, 3))
    x = rng.standard_normal((4, 3))
    loss = lambda: cosine_distance_loss(ya, x)[0]

    def grad():
        _, gy, gx = cosine_distance_loss(ya, x)
        return {"y_aligned": gy, "x": gx}

    return loss, {"y_aligned": ya, "x": x}, grad


def _mlm_case(rng):
    xa = rng.standard_normal((4, 4))
    head = Affine(rng.standard_normal((4, 5)), rng.standard_normal(5))
    g = [1, 5, 2, 5]
    plan = MaskPlan((1, 3))
    loss = lambda: mlm_loss(xa, g, plan, head)[0]

    def grad():
        _, gx, hg = mlm_loss(xa, g, plan, head)
        return {"x_aligned": gx, "head.w": hg["w"], "head.b": hg["b"]}

    return loss, {"x_aligned": xa, "head.w": head.w, "head.b": head.b}, grad


def _gctc_case(rng):
    sel = rng.standard_normal((6, 4))
    head = Affine(rng.standard_normal((4, 4)), rng.standard_normal(4))
    g = [1, 3, 3]
    loss = lambda: gctc_loss(sel, g, head)[0]

    def grad():
        _, gs, hg = gctc_loss(sel, g, head)
        return {"selected": gs, "head.w": hg["w"], "head.b": hg["b"]}

    return loss, {"selected": sel, "head.w": head.w, "head.b": head.b}, grad


def _ctc_case(rng):
    logits = rng.standard_normal((4, 4))
    tgt = [2, 3]
    loss = lambda: ctc_loss(logits, tgt)[0]
    grad = lambda: {"logits": ctc_loss(logits, tgt)[1]}
    return loss, {"logits": logits}, grad


def _full_chain_case(mode: str, source: str):
    def build(rng):
        cfg = ModelConfig(vocab_size=3, d_in=3, d_model=4, n_lower=1, n_upper=1, n_text=1, dropout=0.1)
        model = MultimodalModel(cfg, seed=int(rng.integers(1 << 30)))
        speech = rng.standard_normal((6, 3))
        g = [1, 3, 2]
        kw = dict(mode=mode, weights=LossWeights(0.1, 0.3), cd_enabled=True, plan=MaskPlan((1,)), source=source)
        loss = lambda: model.forward_backward(speech, g, need_grads=False, **kw)[0].total

        def grad():
            return dict(model.forward_backward(speech, g, **kw)[1])

        return loss, model.params(), grad

    return build


CHECKS: dict[str, Callable] = {
    "numerics.row_softmax": _softmax_case,
    "encoders.speech_lower": _lower_case,
    "encoders.speech_upper": _upper_case,
    "encoders.text": _text_case,
    "encoders.decoder_attention_ce": _decoder_case,
    "biam.biam_backward": _biam_case,
    "losses.cosine_distance": _cd_case,
    "losses.mlm": _mlm_case,
    "losses.gctc": _gctc_case,
    "ctc.ctc_loss": _ctc_case,
    "model.total_loss[biam_full,x]": _full_chain_case("biam_full", "x"),
    "model.total_loss[biam_full,y_aligned]": _full_chain_case("biam_full", "y_aligned"),
    "model.total_loss[grapheme_ctc_baseline]": _full_chain_case("grapheme_ctc_baseline", "x"),
}


def run_gradcheck(scope: str = "all", seed: int = 0, tol: float = TOLERANCE, step: float = STEP,
                  checks: dict[str, Callable] | None = None) -> list[GradcheckResult]:
    checks = CHECKS if checks is None else checks
    selected = {k: v for k, v in checks.items() if scope == "all" or k.split(".")[0] == scope}
    if not selected:
        raise ValueError(f"no gradient checks in scope {scope!r}; modules: "
                         f"{sorted({k.split('.')[0] for k in checks})}")
    results = []
    for name, build in selected.items():
        loss, arrays, grad = build(make_rng(seed, zlib.crc32(name.encode())))
        analytic = grad()
        numeric = numeric_grads(loss, arrays, step)
        results.append(_compare(name, analytic, numeric, tol))
    return results
