import json

import numpy as np
import pytest

from biamasr.data import (
    CorpusFormatError,
    SynthConfig,
    load_jsonl,
    prototypes,
    render,
    save_jsonl,
    split_heldout,
    synth_corpus,
    unpaired_text_corpus,
)


def test_noiseless_fixed_duration():
    cfg = SynthConfig(noise=0.0, min_dur=2, max_dur=2, size=5)
    protos = prototypes(cfg)
    for u in synth_corpus(cfg):
        assert u.n_frames == 2 * len(u.graphemes)
        for k, g in enumerate(u.graphemes):
            np.testing.assert_array_equal(u.speech[2 * k], protos[g])
            np.testing.assert_array_equal(u.speech[2 * k + 1], protos[g])


def test_corpus_deterministic():
    cfg = SynthConfig(size=10, seed=5)
    assert synth_corpus(cfg) == synth_corpus(cfg)
    assert synth_corpus(cfg) != synth_corpus(SynthConfig(size=10, seed=6))


def test_alignment_partition_and_ranges():
    cfg = SynthConfig(size=50)
    for u in synth_corpus(cfg):
        durs = [e - s for s, e in u.alignment]
        assert u.n_frames == sum(durs)
        assert u.alignment[0][0] == 0 and u.alignment[-1][1] == u.n_frames
        assert all(b[0] == a[1] for a, b in zip(u.alignment, u.alignment[1:]))
        assert all(cfg.min_dur <= d <= cfg.max_dur for d in durs)
        assert cfg.min_len <= len(u.graphemes) <= cfg.max_len
        assert all(1 <= g <= cfg.vocab_size for g in u.graphemes)


def test_noiseless_reconstruction():
    cfg = SynthConfig(noise=0.0, size=20)
    protos = prototypes(cfg)
    for u in synth_corpus(cfg):
        frames, spans = render(u.graphemes, [e - s for s, e in u.alignment], protos)
        np.testing.assert_array_equal(frames, u.speech)
        assert spans == u.alignment


def test_unpaired_text():
    cfg = SynthConfig(size=100, seed=3)
    texts = unpaired_text_corpus(cfg)
    assert texts == unpaired_text_corpus(cfg)
    assert all(cfg.min_len <= len(t) <= cfg.max_len for t in texts)
    assert all(1 <= g <= cfg.vocab_size for t in texts for g in t)
    assert texts != [u.graphemes for u in synth_corpus(cfg)]


def test_jsonl_round_trip(tmp_path):
    corpus = synth_corpus(SynthConfig(size=10))
    path = tmp_path / "c.jsonl"
    save_jsonl(corpus, path)
    assert load_jsonl(path, vocab_size=10, d_in=8) == corpus


def test_jsonl_text_only_round_trip(tmp_path):
    texts = unpaired_text_corpus(SynthConfig(size=5))
    path = tmp_path / "t.jsonl"
    save_jsonl(texts, path)
    loaded = load_jsonl(path)
    assert [u.graphemes for u in loaded] == texts
    assert all(u.speech is None for u in loaded)


def test_jsonl_truncated_names_line(tmp_path):
    path = tmp_path / "c.jsonl"
    save_jsonl(synth_corpus(SynthConfig(size=3)), path)
    text = path.read_text()
    path.write_text(text[: len(text) - 40])
    with pytest.raises(CorpusFormatError, match=r":3: malformed JSON"):
        load_jsonl(path)


def test_jsonl_ragged_speech(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text(json.dumps({"id": "a", "graphemes": [1], "speech": [[0.0, 1.0], [1.0]]}) + "\n")
    with pytest.raises(CorpusFormatError, match=":1: speech frames have differing lengths"):
        load_jsonl(path)


def test_jsonl_unknown_grapheme(tmp_path):
    path = tmp_path / "c.jsonl"
    lines = [{"id": "a", "graphemes": [1, 2]}, {"id": "b", "graphemes": [0]}]
    path.write_text("\n".join(json.dumps(r) for r in lines) + "\n")
    with pytest.raises(CorpusFormatError, match=":2: unknown grapheme id 0"):
        load_jsonl(path)
    path.write_text(json.dumps({"id": "c", "graphemes": [11]}) + "\n")
    with pytest.raises(CorpusFormatError, match="unknown grapheme id 11"):
        load_jsonl(path, vocab_size=10)


def test_jsonl_wrong_dim(tmp_path):
    path = tmp_path / "c.jsonl"
    save_jsonl(synth_corpus(SynthConfig(size=2, d_in=4)), path)
    with pytest.raises(CorpusFormatError, match="speech dim 4, expected 8"):
        load_jsonl(path, d_in=8)


def test_split_heldout_last_tenth():
    items = list(range(200))
    train, held = split_heldout(items)
    assert held == list(range(180, 200)) and train == list(range(180))


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(vocab_size=1)
    with pytest.raises(ValueError):
        SynthConfig(min_dur=0)
    with pytest.raises(ValueError):
        SynthConfig(noise=-1)
