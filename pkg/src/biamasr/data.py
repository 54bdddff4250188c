"""Synthetic paired speech/text corpora and JSONL I/O.

A synthetic utterance is a grapheme sequence where each grapheme is held for
a random number of frames; every frame is that grapheme's fixed prototype
vector plus Gaussian noise. The frame spans are kept as a gold alignment.

JSONL schema, one record per line::

    {"id": str, "graphemes": [int], "speech": [[float]], "alignment": [[start, end]]}

``speech`` and ``alignment`` are optional (text-only records omit speech).
Grapheme ids are ``1..V``; 0 is the CTC blank and never appears.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from biamasr.numerics import make_rng

_PROTOTYPE_STREAM = 0
_PAIRED_STREAM = 1
_TEXT_STREAM = 2


class CorpusFormatError(ValueError):
    """Malformed corpus file; the message names the offending line."""


@dataclass
class Utterance:
    id: str
    graphemes: list[int]
    speech: np.ndarray | None = None
    alignment: list[tuple[int, int]] | None = None

    @property
    def n_frames(self) -> int:
        return 0 if self.speech is None else self.speech.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Utterance):
            return NotImplemented
        if (self.id, list(self.graphemes), self.alignment) != (other.id, list(other.graphemes), other.alignment):
            return False
        if self.speech is None or other.speech is None:
            return self.speech is None and other.speech is None
        return self.speech.shape == other.speech.shape and np.array_equal(self.speech, other.speech)


@dataclass
class SynthConfig:
    vocab_size: int = 10
    min_len: int = 3
    max_len: int = 8
    min_dur: int = 2
    max_dur: int = 5
    d_in: int = 8
    noise: float = 0.3
    size: int = 200
    seed: int = 1

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.min_dur < 1 or self.max_dur < self.min_dur:
            raise ValueError("need 1 <= min_dur <= max_dur")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


def prototypes(cfg: SynthConfig) -> np.ndarray:
    """Prototype table, row ``g`` for grapheme ``g`` (row 0 unused)."""
    rng = make_rng(cfg.seed, _PROTOTYPE_STREAM)
    return rng.standard_normal((cfg.vocab_size + 1, cfg.d_in))


def _sample_text(cfg: SynthConfig, rng: np.random.Generator) -> list[int]:
    n = int(rng.integers(cfg.min_len, cfg.max_len + 1))
    return [int(g) for g in rng.integers(1, cfg.vocab_size + 1, size=n)]


def render(graphemes, durations, protos: np.ndarray, noise: float = 0.0, rng=None):
    """Frames and gold spans for a grapheme sequence with given durations."""
    frames = np.repeat(protos[np.asarray(graphemes, dtype=np.int64)], durations, axis=0)
    if noise > 0:
        frames = frames + noise * rng.standard_normal(frames.shape)
    ends = np.cumsum(durations)
    spans = [(int(e - d), int(e)) for d, e in zip(durations, ends)]
    return frames, spans


def synth_corpus(cfg: SynthConfig) -> list[Utterance]:
    protos = prototypes(cfg)
    rng = make_rng(cfg.seed, _PAIRED_STREAM)
    corpus = []
    for k in range(cfg.size):
        text = _sample_text(cfg, rng)
        durs = rng.integers(cfg.min_dur, cfg.max_dur + 1, size=len(text))
        frames, spans = render(text, durs, protos, cfg.noise, rng)
        corpus.append(Utterance(f"utt{k:05d}", text, frames, spans))
    return corpus


def unpaired_text_corpus(cfg: SynthConfig) -> list[list[int]]:
    """Grapheme sequences from the paired text distribution on a separate stream."""
    rng = make_rng(cfg.seed, _TEXT_STREAM)
    return [_sample_text(cfg, rng) for _ in range(cfg.size)]


def split_heldout(corpus: list, fraction: float = 0.1) -> tuple[list, list]:
    """Train on the leading items, hold out the last ``fraction`` by index."""
    n_held = int(round(len(corpus) * fraction))
    if fraction > 0 and len(corpus) > 1:
        n_held = max(1, n_held)
    cut = len(corpus) - n_held
    return corpus[:cut], corpus[cut:]


def _record(u: Utterance) -> dict:
    rec = {"id": u.id, "graphemes": [int(g) for g in u.graphemes]}
    if u.speech is not None:
        rec["speech"] = [[float(v) for v in row] for row in u.speech]
    if u.alignment is not None:
        rec["alignment"] = [[int(s), int(e)] for s, e in u.alignment]
    return rec


def save_jsonl(corpus, path) -> None:
    """Write utterances (or bare grapheme lists) one JSON record per line."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for k, u in enumerate(corpus):
            if not isinstance(u, Utterance):
                u = Utterance(f"text{k:05d}", list(u))
            fh.write(json.dumps(_record(u), separators=(",", ":")) + "\n")


def load_jsonl(path, vocab_size: int | None = None, d_in: int | None = None) -> list[Utterance]:
    corpus = []
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            corpus.append(_parse_record(rec, f"{path}:{lineno}", vocab_size, d_in))
    return corpus


def _parse_record(rec, where: str, vocab_size, d_in) -> Utterance:
    if not isinstance(rec, dict) or "id" not in rec or "graphemes" not in rec:
        raise CorpusFormatError(f"{where}: record needs 'id' and 'graphemes'")
    g = rec["graphemes"]
    if not isinstance(g, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in g):
        raise CorpusFormatError(f"{where}: 'graphemes' must be a list of ints")
    for v in g:
        if v < 1 or (vocab_size is not None and v > vocab_size):
            raise CorpusFormatError(f"{where}: unknown grapheme id {v}")
    speech = None
    if rec.get("speech") is not None:
        rows = rec["speech"]
        if not isinstance(rows, list) or not rows or not all(isinstance(r, list) for r in rows):
            raise CorpusFormatError(f"{where}: 'speech' must be a nonempty list of frames")
        widths = {len(r) for r in rows}
        if len(widths) != 1:
            raise CorpusFormatError(f"{where}: speech frames have differing lengths {sorted(widths)}")
        width = widths.pop()
        if d_in is not None and width != d_in:
            raise CorpusFormatError(f"{where}: speech dim {width}, expected {d_in}")
        try:
            speech = np.array(rows, dtype=np.float64)
        except (TypeError, ValueError):
            raise CorpusFormatError(f"{where}: non-numeric speech values") from None
    alignment = None
    if rec.get("alignment") is not None:
        alignment = [tuple(int(v) for v in span) for span in rec["alignment"]]
        if speech is not None and not _is_partition(alignment, speech.shape[0]):
            raise CorpusFormatError(f"{where}: alignment does not partition [0, {speech.shape[0]})")
    return Utterance(str(rec["id"]), list(g), speech, alignment)


def _is_partition(spans, n: int) -> bool:
    pos = 0
    for s, e in spans:
        if s != pos or e <= s:
            return False
        pos = e
    return pos == n
