import numpy as np
import pytest

from biamasr.encoders import (
    EncoderStack,
    TextEncoder,
    ToyDecoder,
    decode_teacher_forced,
    encode_speech_lower,
    encode_speech_upper,
    encode_text,
)
from biamasr.gradcheck import numeric_grads
from biamasr.numerics import Affine, make_rng, relative_error


def test_lower_identity_configuration(rng):
    stack = EncoderStack([], proj=Affine(np.eye(4), np.zeros(4)), positional=False)
    feats = rng.standard_normal((5, 4))
    np.testing.assert_array_equal(encode_speech_lower(feats, stack), feats)


def test_lower_shape_and_determinism():
    feats = make_rng(1).standard_normal((5, 8))
    a = encode_speech_lower(feats, EncoderStack.init(16, 2, make_rng(3), d_in=8, positional=True))
    b = encode_speech_lower(feats, EncoderStack.init(16, 2, make_rng(3), d_in=8, positional=True))
    assert a.shape == (5, 16)
    np.testing.assert_array_equal(a, b)


def test_lower_dim_mismatch():
    with pytest.raises(ValueError, match="feature dim"):
        encode_speech_lower(np.zeros((3, 5)), EncoderStack.init(4, 1, make_rng(0), d_in=8))


def test_upper_identity_shape_determinism(rng):
    x = rng.standard_normal((6, 4))
    np.testing.assert_array_equal(encode_speech_upper(x, EncoderStack([], positional=False)), x)
    s1, s2 = EncoderStack.init(4, 2, make_rng(9)), EncoderStack.init(4, 2, make_rng(9))
    out = encode_speech_upper(x, s1)
    assert out.shape == (6, 4)
    np.testing.assert_array_equal(out, encode_speech_upper(x, s2))
    with pytest.raises(ValueError):
        encode_speech_upper(np.zeros((2, 3)), s1)


def test_text_empty_sequence():
    enc = TextEncoder.init(5, 4, 1, make_rng(0))
    assert encode_text([], enc).shape == (0, 4)


def test_text_repeated_token_rows_equal_table_row():
    table = make_rng(2).standard_normal((6, 4))
    enc = TextEncoder(table, EncoderStack([], positional=False))
    out = encode_text([3, 3], enc)
    np.testing.assert_array_equal(out, [table[3], table[3]])


def test_text_shape_and_oov():
    enc = TextEncoder.init(5, 4, 2, make_rng(0))
    assert encode_text([1, 2, 3, 4, 5, 1, 2], enc).shape == (7, 4)
    with pytest.raises(ValueError, match="outside vocabulary"):
        encode_text([6], enc)


def test_dropout_only_in_training():
    stack = EncoderStack.init(8, 2, make_rng(0), dropout=0.5)
    x = make_rng(1).standard_normal((4, 8))
    np.testing.assert_array_equal(stack.forward(x)[0], stack.forward(x)[0])
    assert not np.array_equal(stack.forward(x, train=True, rng=make_rng(2))[0], stack.forward(x)[0])


def test_dropout_backward_uses_mask():
    stack = EncoderStack.init(3, 2, make_rng(0), dropout=0.3)
    x = make_rng(1).standard_normal((4, 3))
    r = make_rng(2).standard_normal((4, 3))
    _, cache = stack.forward(x, train=True, rng=make_rng(5))
    gx, g = stack.backward(r, cache)

    def loss():
        return float((r * stack.forward(x, train=True, rng=make_rng(5))[0]).sum())

    num = numeric_grads(loss, {"x": x, "w": stack.layers[0].w})
    assert relative_error(gx, num["x"]) <= 1e-3
    assert relative_error(g["layer0.w"], num["w"]) <= 1e-3


def test_decoder_uniform_logits_entropy():
    V, d = 6, 4
    dec = ToyDecoder.init(V, d, make_rng(0))
    dec.proj.w[...] = 0.0
    dec.proj.b[...] = 0.0
    loss, logits = decode_teacher_forced(np.ones((3, d)), [1, 2, 3], dec)
    assert loss == pytest.approx(np.log(V + 1))
    assert logits.shape == (4, V + 1)


def test_decoder_loss_nonnegative_and_near_uniform_when_untrained():
    V, d = 10, 16
    rng = make_rng(7)
    losses = []
    for _ in range(100):
        dec = ToyDecoder.init(V, d, rng)
        enc = rng.standard_normal((int(rng.integers(3, 20)), d))
        tgt = [int(v) for v in rng.integers(1, V + 1, size=int(rng.integers(1, 8)))]
        loss = decode_teacher_forced(enc, tgt, dec)[0]
        assert loss >= 0
        losses.append(loss)
    assert abs(np.mean(losses) - np.log(V + 1)) <= 0.1 * np.log(V + 1)


def test_decoder_gradients():
    rng = make_rng(4)
    dec = ToyDecoder.init(5, 4, rng)
    enc = rng.standard_normal((3, 4))
    tgt = [1, 5]
    g_enc, g = dec.backward(dec.forward(enc, tgt)[2])
    arrays = {"enc": enc, **dec.params()}
    num = numeric_grads(lambda: dec.forward(enc, tgt)[0], arrays)
    assert relative_error(g_enc, num["enc"]) <= 1e-3
    for k in dec.params():
        assert relative_error(g[k], num[k]) <= 1e-3, k


def test_decoder_errors():
    dec = ToyDecoder.init(3, 4, make_rng(0))
    with pytest.raises(ValueError, match="nonempty encoder"):
        dec.forward(np.zeros((0, 4)), [1])
    with pytest.raises(ValueError, match="targets must be nonempty"):
        dec.forward(np.zeros((2, 4)), [])


def test_text_gradients_hit_only_used_rows():
    enc = TextEncoder.init(5, 4, 1, make_rng(0))
    _, cache = enc.forward([2, 4])
    g = enc.backward(np.ones((2, 4)), cache)
    assert not g["table"][[0, 1, 3, 5]].any()
    assert g["table"][2].any() and g["table"][4].any()
