"""Staged training: paired multimodal training, text-only pretraining of the
decoder, and paired fine-tuning, plus held-out evaluation and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from biamasr.biam import monotonicity_score
from biamasr.ctc import CTCUnreachableError, min_frames
from biamasr.data import Utterance, split_heldout
from biamasr.losses import LossBreakdown, LossWeights, MaskPlan, sampler_source
from biamasr.metrics import cer as error_rate
from biamasr.model import BIAM_MODES, MODES, ModelConfig, MultimodalModel
from biamasr.numerics import NonFiniteError, make_rng, restore_rng, rng_state

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "asr_ctc", "asr_attention", "cd", "mlm", "gctc", "total", "monotonicity", "cer")
_TRAIN_STREAM = 7
_EVAL_STREAM = 8


class TrainingDiverged(NonFiniteError):
    pass


@dataclass
class TrainConfig:
    mode: str = "biam_full"
    epochs: int = 80
    cd_start_fraction: float = 0.875
    lr: float = 0.007
    finetune_lr: float = 0.0035
    pretrain_lr: float = 0.007
    pretrain_epochs: int = 10
    finetune_epochs: int = 10
    batch_size: int = 1
    alpha: float = 0.1
    lam: float = 0.3
    mask_rate: float = 0.2
    sampler_rate: float = 0.5
    replication: int = 2
    random_replication: bool = False
    unfreeze_upper: bool = False
    cd_stop_grad_x: bool = False
    optimizer: str = "sgd"
    clip_norm: float = 0.0
    heldout_fraction: float = 0.1
    band: float = 0.1
    seed: int = 1
    # model shape
    vocab_size: int = 10
    d_model: int = 16
    n_lower: int = 2
    n_upper: int = 2
    n_text: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not 0.0 <= self.cd_start_fraction <= 1.0:
            raise ValueError("cd_start_fraction must lie in [0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def weights(self) -> LossWeights:
        alpha = 0.0 if self.mode == "baseline" else self.alpha
        return LossWeights(alpha=alpha, lam=self.lam)

    def model_config(self, d_in: int) -> ModelConfig:
        return ModelConfig(self.vocab_size, d_in, self.d_model, self.n_lower, self.n_upper, self.n_text, self.dropout)

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict[str, np.ndarray]
    opt_state: dict[str, np.ndarray] = field(default_factory=dict)
    opt_step: int = 0
    epoch: int = 0
    stage: str = "init"
    rng: dict | None = None
    config_hash: str = ""

    def model(self) -> MultimodalModel:
        m = MultimodalModel(self.model_config)
        m.load_params(self.params)
        return m

    def save(self, path) -> None:
        meta = {"model_config": self.model_config.as_dict(), "train_config": self.train_config.as_dict(),
                "opt_step": self.opt_step, "epoch": self.epoch, "stage": self.stage, "rng": self.rng,
                "config_hash": self.config_hash, "param_names": list(self.params),
                "opt_names": list(self.opt_state)}
        arrays = {f"p{i}": v for i, v in enumerate(self.params.values())}
        arrays.update({f"o{i}": v for i, v in enumerate(self.opt_state.values())})
        buf = io.BytesIO()
        np.savez(buf, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(z["__meta__"].tobytes().decode())
            params = {k: z[f"p{i}"].copy() for i, k in enumerate(meta["param_names"])}
            opt = {k: z[f"o{i}"].copy() for i, k in enumerate(meta["opt_names"])}
        return cls(ModelConfig(**meta["model_config"]), TrainConfig.from_dict(meta["train_config"]), params, opt,
                   meta["opt_step"], meta["epoch"], meta["stage"], meta["rng"], meta["config_hash"])


class _Optimizer:
    """Plain SGD, or Adam with the usual defaults; updates arrays in place."""

    def __init__(self, kind: str, state: dict | None = None, step: int = 0, clip_norm: float = 0.0):
        self.kind = kind
        self.state = {k: np.array(v, dtype=np.float64) for k, v in (state or {}).items()}
        self.t = step
        self.clip_norm = clip_norm

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        scale = 1.0
        if self.clip_norm > 0:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for k, g in grads.items():
            g = g * scale if scale != 1.0 else g
            if self.kind == "sgd":
                params[k] -= lr * g
                continue
            m = self.state.setdefault(f"{k}.m", np.zeros_like(g))
            v = self.state.setdefault(f"{k}.v", np.zeros_like(g))
            m *= 0.9
            m += 0.1 * g
            v *= 0.999
            v += 0.001 * g * g
            mhat = m / (1 - 0.9 ** self.t)
            vhat = v / (1 - 0.999 ** self.t)
            params[k] -= lr * mhat / (np.sqrt(vhat) + 1e-8)


def _usable(corpus: list[Utterance]) -> tuple[list[Utterance], int]:
    keep = [u for u in corpus if u.speech is not None and len(u.graphemes) > 0
            and u.n_frames >= min_frames(u.graphemes)]
    return keep, len(corpus) - len(keep)


def _check_finite(b: LossBreakdown, utt_id: str) -> None:
    for k, v in b.as_dict().items():
        if not np.isfinite(v):
            raise TrainingDiverged(f"non-finite {k} loss on utterance {utt_id}")


def _mean_breakdown(items: list[LossBreakdown]) -> LossBreakdown:
    if not items:
        return LossBreakdown()
    keys = LossBreakdown().as_dict().keys()
    return LossBreakdown(**{k: float(np.mean([getattr(b, k) for b in items])) for k in keys})


def _heldout_metrics(model: MultimodalModel, held: list[Utterance], cfg: TrainConfig) -> tuple[float, float]:
    if not held:
        return float("nan"), float("nan")
    hyps = [model.transcribe(u.speech) for u in held]
    mono = [monotonicity_score(model.align(u.speech, u.graphemes).w12, cfg.band) for u in held]
    return float(np.mean(mono)), error_rate(hyps, [u.graphemes for u in held])


def _paired_epochs(model: MultimodalModel, train: list[Utterance], held: list[Utterance], cfg: TrainConfig,
                   opt: _Optimizer, rng: np.random.Generator, lr: float, epoch0: int, n_epochs: int,
                   cd_from: float, history: list[dict], callback=None) -> None:
    params = model.params()
    weights = cfg.weights
    for epoch in range(epoch0, epoch0 + n_epochs):
        cd_enabled = cfg.mode == "biam_full" and epoch >= cd_from
        order = rng.permutation(len(train))
        seen = []
        for start in range(0, len(order), cfg.batch_size):
            acc: dict[str, np.ndarray] = {}
            batch = order[start:start + cfg.batch_size]
            for idx in batch:
                u = train[idx]
                plan, source = None, "x"
                if cfg.mode in BIAM_MODES:
                    plan = MaskPlan.sample(len(u.graphemes), rng, cfg.mask_rate)
                    source = sampler_source(rng, cfg.sampler_rate)
                try:
                    b, g = model.forward_backward(u.speech, u.graphemes, mode=cfg.mode, weights=weights,
                                                  cd_enabled=cd_enabled, plan=plan, source=source, train=True,
                                                  rng=rng, cd_stop_grad_x=cfg.cd_stop_grad_x)
                except CTCUnreachableError:
                    log.warning("skipping unreachable utterance %s", u.id)
                    continue
                except NonFiniteError as e:
                    raise TrainingDiverged(f"{e} on utterance {u.id}") from e
                _check_finite(b, u.id)
                seen.append(b)
                for k, v in g.items():
                    acc[k] = acc[k] + v if k in acc else v.copy()
            if acc:
                n = len(batch)
                opt.step(params, {k: v / n for k, v in acc.items()}, lr)
        mono, cer_ = _heldout_metrics(model, held, cfg)
        mb = _mean_breakdown(seen)
        history.append({"epoch": epoch + 1, **mb.as_dict(), "monotonicity": mono, "cer": cer_})
        log.info("epoch %d total %.4f mono %.3f cer %.3f", epoch + 1, mb.total, mono, cer_)
        if callback is not None:
            callback(epoch + 1, model)


def train_paired(corpus: list[Utterance], cfg: TrainConfig, init: Checkpoint | None = None, callback=None):
    """Multimodal training on paired data; the last ``heldout_fraction`` is held out.

    The cosine-distance term joins from epoch ``cd_start_fraction * epochs``
    on. With ``init`` (a checkpoint saved by this function) training resumes
    at ``init.epoch`` and runs up to ``cfg.epochs``. Returns
    ``(Checkpoint, history)`` with one metrics dict per epoch run.
    ``callback(epoch, model)``, if given, runs after every epoch.
    """
    if not corpus:
        raise ValueError("empty corpus")
    train, held = split_heldout(corpus, cfg.heldout_fraction)
    train, skipped = _usable(train)
    if skipped:
        log.warning("skipped %d utterances that cannot be emitted by CTC", skipped)
    if not train:
        raise ValueError("no usable training utterances")
    d_in = train[0].speech.shape[1]
    if init is None:
        model = MultimodalModel(cfg.model_config(d_in), cfg.seed)
        rng = make_rng(cfg.seed, _TRAIN_STREAM)
        opt = _Optimizer(cfg.optimizer, clip_norm=cfg.clip_norm)
    else:
        model = init.model()
        rng = restore_rng(init.rng)
        opt = _Optimizer(cfg.optimizer, init.opt_state, init.opt_step, cfg.clip_norm)
    epoch0 = 0 if init is None else init.epoch
    if epoch0 > cfg.epochs:
        raise ValueError(f"checkpoint is at epoch {epoch0}, past the configured {cfg.epochs}")
    history: list[dict] = []
    _paired_epochs(model, train, held, cfg, opt, rng, cfg.lr, epoch0, cfg.epochs - epoch0,
                   cd_from=cfg.cd_start_fraction * cfg.epochs, history=history, callback=callback)
    ckpt = Checkpoint(model.cfg, cfg, _snapshot(model), dict(opt.state), opt.t, cfg.epochs, "paired",
                      rng_state(rng), cfg.digest())
    return ckpt, history


def finetune_paired(corpus: list[Utterance], ckpt: Checkpoint, cfg: TrainConfig | None = None,
                    history: list[dict] | None = None) -> Checkpoint:
    """Continue paired training from ``ckpt`` at ``finetune_lr``, all parameters trainable."""
    cfg = cfg or ckpt.train_config
    train, held = split_heldout(corpus, cfg.heldout_fraction)
    train, _ = _usable(train)
    model = ckpt.model()
    rng = restore_rng(ckpt.rng) if ckpt.rng else make_rng(cfg.seed, _TRAIN_STREAM)
    opt = _Optimizer(cfg.optimizer, ckpt.opt_state, ckpt.opt_step, cfg.clip_norm)
    hist = history if history is not None else []
    # the paired stage already passed its cd warm-up, so cd stays on throughout
    _paired_epochs(model, train, held, cfg, opt, rng, cfg.finetune_lr, ckpt.epoch, cfg.finetune_epochs,
                   cd_from=ckpt.epoch, history=hist)
    return Checkpoint(model.cfg, cfg, _snapshot(model), dict(opt.state), opt.t,
                      ckpt.epoch + cfg.finetune_epochs, "finetune", rng_state(rng), cfg.digest())


def replicate_rows(y: np.ndarray, factor: int = 2, rng: np.random.Generator | None = None) -> np.ndarray:
    """Repeat every row ``factor`` times, or 1-3 times at random when ``rng`` is given."""
    if rng is None:
        return np.repeat(y, factor, axis=0)
    return np.repeat(y, rng.integers(1, 4, size=y.shape[0]), axis=0)


def pretrain_unpaired(texts: list, ckpt: Checkpoint, cfg: TrainConfig | None = None,
                      history: list[dict] | None = None) -> Checkpoint:
    """Text-only pretraining: text embeddings, replicated, go through the upper
    speech stack into the decoder; only decoder parameters are updated
    (plus the upper stack when ``unfreeze_upper``)."""
    cfg = cfg or ckpt.train_config
    model = ckpt.model()
    rng = restore_rng(ckpt.rng) if ckpt.rng else make_rng(cfg.seed, _TRAIN_STREAM)
    params = model.params()
    trainable = ("decoder.", "upper.") if cfg.unfreeze_upper else ("decoder.",)
    # own optimizer state: the frozen parameters must not see stale moments
    opt = _Optimizer(cfg.optimizer, clip_norm=cfg.clip_norm)
    seqs = [list(t.graphemes) if isinstance(t, Utterance) else list(t) for t in texts]
    seqs = [s for s in seqs if s]
    for epoch in range(cfg.pretrain_epochs):
        order = rng.permutation(len(seqs))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            acc: dict[str, np.ndarray] = {}
            batch = order[start:start + cfg.batch_size]
            for idx in batch:
                g = seqs[idx]
                y = model.text.forward(g)[0]
                y2 = replicate_rows(y, cfg.replication, rng if cfg.random_replication else None)
                loss, grads = model.decoder_forward_backward(y2, g, train=True, rng=rng,
                                                             need_upper_grads=cfg.unfreeze_upper)
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"non-finite asr_attention loss on text item {idx}")
                losses.append(loss)
                for k, v in grads.items():
                    if k.startswith(trainable):
                        acc[k] = acc[k] + v if k in acc else v.copy()
            if acc:
                opt.step(params, {k: v / len(batch) for k, v in acc.items()}, cfg.pretrain_lr)
        if history is not None:
            row = {c: 0.0 for c in METRIC_COLUMNS}
            row.update(epoch=epoch + 1, asr_attention=float(np.mean(losses)) if losses else 0.0,
                       monotonicity=float("nan"), cer=float("nan"))
            row["total"] = row["asr_attention"]
            history.append(row)
    return Checkpoint(model.cfg, cfg, _snapshot(model), dict(ckpt.opt_state), ckpt.opt_step, ckpt.epoch,
                      "pretrain_unpaired", rng_state(rng), cfg.digest())


def evaluate(corpus: list[Utterance], ckpt: Checkpoint, cfg: TrainConfig | None = None) -> dict:
    """CER of greedy CTC decoding, mean alignment monotonicity and mean losses."""
    cfg = cfg or ckpt.train_config
    model = ckpt.model()
    usable, _ = _usable(corpus)
    rng = make_rng(cfg.seed, _EVAL_STREAM)
    breakdowns = []
    for u in usable:
        plan = MaskPlan.sample(len(u.graphemes), rng, cfg.mask_rate) if cfg.mode in BIAM_MODES else None
        source = sampler_source(rng, cfg.sampler_rate)
        b, _ = model.forward_backward(u.speech, u.graphemes, mode=cfg.mode, weights=cfg.weights,
                                      cd_enabled=cfg.mode == "biam_full", plan=plan, source=source,
                                      need_grads=False)
        breakdowns.append(b)
    mono, cer_ = _heldout_metrics(model, usable, cfg)
    return {"cer": cer_, "mean_monotonicity": mono, "loss": _mean_breakdown(breakdowns).as_dict(),
            "n_utterances": len(usable)}


def untrained_checkpoint(corpus: list[Utterance], cfg: TrainConfig) -> Checkpoint:
    return train_paired(corpus, replace(cfg, epochs=0))[0]


def _snapshot(model: MultimodalModel) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.params().items()}


def write_metrics_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in METRIC_COLUMNS[1:]])
