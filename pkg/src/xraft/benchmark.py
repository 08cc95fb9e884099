"""Desk-scale efficacy experiment: pretrain, construct, fine-tune, compare.

The score is the combined-direction synthetic EPE on the held-out test
pairs, measured for the freshly constructed cross-modal model and again
after cycle-consistency fine-tuning.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable

import torch

from . import engine as E
from .evaluation import eval_synthetic_batch, mean_displacement
from .imaging import ColorMatrix, Modality
from .model import FlowPredictor, ModelConfig, RaftModel, build_xraft, frozen_copy, prepare_input, set_trainable
from .synth import SynthConfig, make_case, make_triplet
from .training import FinetuneResult, PretrainConfig, TrainConfig, finetune, pretrain


@dataclass
class EfficacyConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(max_batches=400))
    mode: str = "rgb"
    seed: int = 0


@dataclass
class EfficacyResult:
    initial_epe: float
    final_epe: float
    zero_epe: float  # predicting no motion at all
    identity_flow: float  # base model's mean flow on identical white inputs
    finetune: FinetuneResult
    seconds: float

    @property
    def reduction(self) -> float:
        return 1.0 - self.final_epe / self.initial_epe


def _zero(srcs, tgts):
    return torch.zeros(len(srcs), 2, *srcs[0].values.shape[-2:])


@torch.no_grad()
def identity_flow(model: RaftModel, cases, q: ColorMatrix) -> float:
    """Mean flow magnitude when source and target are the same white image."""
    x = torch.stack([prepare_input(E.as_engine(c.white.values), "rgb", q) for c in cases])
    flows = model(x, x, Modality.WHITE, Modality.WHITE)[-1]
    return sum(mean_displacement(f) for f in flows) / len(flows)


def run_efficacy(cfg: EfficacyConfig, log_fn: Callable[[str], None] | None = None) -> EfficacyResult:
    emit = log_fn or (lambda line: None)
    start = time.time()
    E.configure_determinism(1)
    q = ColorMatrix.default(cfg.synth.bands)
    synth = replace(cfg.synth, seed=cfg.seed)
    base = RaftModel(cfg.model, seed=cfg.seed)
    pretrain(base, synth, replace(cfg.pretrain, seed=cfg.seed), q)
    emit(f"pretrained {cfg.pretrain.steps} steps in {time.time() - start:.0f}s")

    triplets = [make_triplet(synth, i) for i in range(synth.triplets)]
    val = [make_case(synth, i, "val") for i in range(synth.val_pairs)]
    test = [make_case(synth, i, "test") for i in range(synth.test_pairs)]
    ident = identity_flow(base, test, q)

    model = build_xraft(base, cfg.mode, q)
    set_trainable(model)
    initial = eval_synthetic_batch(FlowPredictor(model, q), test, "both")
    zero = eval_synthetic_batch(_zero, test, "both")
    emit(f"test epe fresh {initial:.4f}, zero flow {zero:.4f}; identical-input mean flow {ident:.4f}")
    result = finetune(model, triplets, val, replace(cfg.train, seed=cfg.seed), q, frozen_copy(base), emit)
    final = eval_synthetic_batch(FlowPredictor(result.model, q), test, "both")
    emit(f"test epe tuned {final:.4f} (best val at batch {result.best_batch} of {result.batches_run})")
    return EfficacyResult(initial, final, zero, ident, result, time.time() - start)
