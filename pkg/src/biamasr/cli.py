"""Command-line entry point: ``biamasr <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import re
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from biamasr import __version__
from biamasr.ctc import CTCUnreachableError
from biamasr.data import CorpusFormatError, SynthConfig, load_jsonl, save_jsonl, split_heldout, synth_corpus, unpaired_text_corpus
from biamasr.gradcheck import run_gradcheck
from biamasr.numerics import NonFiniteError
from biamasr.train import Checkpoint, TrainConfig, evaluate, finetune_paired, pretrain_unpaired, train_paired, write_metrics_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3



class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- config handling ---------------------------------------------------------------

def _coerce(cls, key: str, raw: str):
    ftypes = {f.name: f.type for f in fields(cls)}
    if key not in ftypes:
        raise UsageError(f"unknown config key {key!r} for {cls.__name__}")
    t = ftypes[key] if isinstance(ftypes[key], str) else ftypes[key].__name__
    try:
        if t == "bool":
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
    except ValueError:
        raise UsageError(f"bad value {raw!r} for {key} ({t})") from None
    return raw


def _load_config(cls, path: str | None, overrides: list[str], base=None):
    values = asdict(base) if base is not None else {}
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError(f"config {path} must be a JSON object")
        values.update(doc)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        values[k.strip()] = _coerce(cls, k.strip(), v.strip())
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _prepare_run_dir(path: str, config) -> Path:
    run = Path(path)
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.json").write_text(json.dumps(asdict(config), indent=2, sort_keys=True) + "\n")
    versions = {"biamasr": __version__, "numpy": np.__version__, "python": platform.python_version()}
    (run / "versions.json").write_text(json.dumps(versions, indent=2, sort_keys=True) + "\n")
    return run


# -- alignment export --------------------------------------------------------------

def round_rows(w: np.ndarray, digits: int = 6) -> np.ndarray:
    """Round to ``digits`` significant digits, folding each row's rounding
    residual into its largest entry so rows still sum to 1."""
    fmt = f"%.{digits}g"
    out = np.vectorize(lambda v: float(fmt % v))(w) if w.size else w.copy()
    for i in range(out.shape[0]):
        k = int(np.argmax(out[i]))
        out[i, k] = float(fmt % (out[i, k] + 1.0 - out[i].sum()))
    return out


def write_alignment(w12: np.ndarray, prefix, frames_horizontal: bool = False, digits: int = 6) -> tuple[Path, Path]:
    """Write ``<prefix>.w12.csv`` (n1 rows) and ``<prefix>.w12.pgm`` (8-bit).

    The image has the CSV layout (header ``P5 n2 n1 255``, one pixel row
    per frame); ``frames_horizontal`` transposes it so frames run left to
    right as in the usual attention plots.
    """
    w = round_rows(np.asarray(w12, dtype=np.float64), digits)
    prefix = str(prefix)
    csv_path, pgm_path = Path(prefix + ".w12.csv"), Path(prefix + ".w12.pgm")
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    fmt = f"%.{digits}g"
    with open(csv_path, "w", encoding="utf-8") as fh:
        for row in w:
            fh.write(",".join(fmt % v for v in row) + "\n")
    img = np.clip(np.rint(255.0 * w), 0, 255).astype(np.uint8)
    if frames_horizontal:
        img = img.T
    header = f"P5 {img.shape[1]} {img.shape[0]} 255\n".encode("ascii")
    pgm_path.write_bytes(header + img.tobytes())
    return csv_path, pgm_path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError(f"{path} is not a binary PGM")
    width, height = int(m.group(1)), int(m.group(2))
    pixels = np.frombuffer(data, dtype=np.uint8, offset=m.end())
    return pixels[: width * height].reshape(height, width)


# -- commands ----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load_config(SynthConfig, args.config, args.set)
    save_jsonl(synth_corpus(cfg), args.out)
    print(f"wrote {cfg.size} paired utterances to {args.out}")
    if args.unpaired_out:
        save_jsonl(unpaired_text_corpus(cfg), args.unpaired_out)
        print(f"wrote {cfg.size} text-only sequences to {args.unpaired_out}")
    return EXIT_OK


def _train_config(args, base: TrainConfig | None = None) -> TrainConfig:
    return _load_config(TrainConfig, args.config, args.set, base)


def _load_corpus(path, cfg: TrainConfig):
    return load_jsonl(path, vocab_size=cfg.vocab_size)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    corpus = _load_corpus(args.corpus, cfg)
    run = _prepare_run_dir(args.run_dir, cfg)
    ckpt, history = train_paired(corpus, cfg)
    write_metrics_csv(history, run / "metrics.csv")
    ckpt.save(run / "checkpoint.npz")
    last = history[-1] if history else {}
    print(f"trained {cfg.epochs} epochs ({cfg.mode}); held-out cer {last.get('cer', float('nan')):.4f} "
          f"monotonicity {last.get('monotonicity', float('nan')):.4f}")
    return EXIT_OK


def cmd_pretrain_text(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    cfg = _train_config(args, ckpt.train_config)
    texts = [u.graphemes for u in load_jsonl(args.text, vocab_size=cfg.vocab_size)]
    run = _prepare_run_dir(args.run_dir, cfg)
    history: list[dict] = []
    out = pretrain_unpaired(texts, ckpt, cfg, history=history)
    write_metrics_csv(history, run / "metrics.csv")
    out.save(run / "checkpoint.npz")
    print(f"text-only pretraining: {cfg.pretrain_epochs} epochs on {len(texts)} sequences")
    return EXIT_OK


def cmd_finetune(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    cfg = _train_config(args, ckpt.train_config)
    corpus = _load_corpus(args.corpus, cfg)
    run = _prepare_run_dir(args.run_dir, cfg)
    history: list[dict] = []
    out = finetune_paired(corpus, ckpt, cfg, history=history)
    write_metrics_csv(history, run / "metrics.csv")
    out.save(run / "checkpoint.npz")
    print(f"fine-tuned {cfg.finetune_epochs} epochs; held-out cer {history[-1]['cer']:.4f}" if history else "no epochs")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    cfg = ckpt.train_config
    corpus = _load_corpus(args.corpus, cfg)
    if args.split == "heldout":
        corpus = split_heldout(corpus, cfg.heldout_fraction)[1]
    result = evaluate(corpus, ckpt)
    text = json.dumps(result, indent=2, sort_keys=True)
    print(text)
    if args.run_dir:
        run = Path(args.run_dir)
        run.mkdir(parents=True, exist_ok=True)
        (run / "eval.json").write_text(text + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    try:
        results = run_gradcheck(args.scope, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    width = max(len(r.op) for r in results)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.op:<{width}}  {status:<4}  rel_err={r.rel_error:.3e}  worst={r.worst_array}")
    failed = [r.op for r in results if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_export_alignment(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    corpus = _load_corpus(args.corpus, ckpt.train_config)
    match = [u for u in corpus if u.id == args.utterance_id]
    if not match or match[0].speech is None:
        raise LookupError(f"no paired utterance {args.utterance_id!r} in {args.corpus}")
    u = match[0]
    w12 = ckpt.model().align(u.speech, u.graphemes).w12
    csv_path, pgm_path = write_alignment(w12, args.out_prefix, frames_horizontal=args.frames_horizontal)
    print(f"wrote {csv_path} and {pgm_path} ({w12.shape[0]} frames x {w12.shape[1]} graphemes)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="biamasr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    sp = sub.add_parser("gen-data", help="write a synthetic paired corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--unpaired-out", help="also write text-only sequences here")
    with_config(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="paired multimodal training")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--run-dir", required=True)
    with_config(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("pretrain-text", help="text-only decoder pretraining")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--text", required=True, help="JSONL with grapheme records")
    sp.add_argument("--run-dir", required=True)
    with_config(sp)
    sp.set_defaults(func=cmd_pretrain_text)

    sp = sub.add_parser("finetune", help="paired fine-tuning from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--run-dir", required=True)
    with_config(sp)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("eval", help="held-out CER and alignment monotonicity")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--split", choices=("heldout", "all"), default="heldout")
    sp.add_argument("--run-dir")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    sp.add_argument("scope", nargs="?", default="all")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("export-alignment", help="dump w12 as CSV and PGM")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--utterance-id", required=True)
    sp.add_argument("--out-prefix", required=True)
    sp.add_argument("--frames-horizontal", action="store_true", help="transpose the image: speech frames left to right")
    sp.set_defaults(func=cmd_export_alignment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"biamasr: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusFormatError, CTCUnreachableError, OSError, LookupError) as exc:
        print(f"biamasr: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteError as exc:
        print(f"biamasr: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
