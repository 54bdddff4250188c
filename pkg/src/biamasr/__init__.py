"""Speech-text multimodal ASR training with a bidirectional attention module.

Desk-scale numpy implementation: toy encoders, the shared-attention alignment
block, CTC, the alignment loss suite and the staged training loop.
"""

from biamasr.biam import BiamOutput, biam_backward, biam_forward, monotonicity_score
from biamasr.ctc import CTCUnreachableError, ctc_bruteforce, ctc_greedy_decode, ctc_loss
from biamasr.data import SynthConfig, Utterance, load_jsonl, save_jsonl, synth_corpus, unpaired_text_corpus
from biamasr.estimator import BiamASR
from biamasr.losses import LossBreakdown, LossWeights, MaskPlan, total_loss
from biamasr.train import Checkpoint, TrainConfig, evaluate, finetune_paired, pretrain_unpaired, train_paired

__version__ = "0.1.0"

__all__ = [
    "BiamASR",
    "BiamOutput",
    "biam_forward",
    "biam_backward",
    "monotonicity_score",
    "CTCUnreachableError",
    "ctc_loss",
    "ctc_bruteforce",
    "ctc_greedy_decode",
    "SynthConfig",
    "Utterance",
    "synth_corpus",
    "unpaired_text_corpus",
    "load_jsonl",
    "save_jsonl",
    "LossWeights",
    "LossBreakdown",
    "MaskPlan",
    "total_loss",
    "TrainConfig",
    "Checkpoint",
    "train_paired",
    "pretrain_unpaired",
    "finetune_paired",
    "evaluate",
]
