"""Supervised pretraining and masked flow-cycle-consistency fine-tuning."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

from . import engine as E
from .evaluation import SyntheticCase, eval_synthetic_batch
from .flow import combined_mask, compose, dark_mask, endpoint_norms, epe, occlusion_mask
from .imaging import ColorMatrix, Modality
from .model import FlowEstimator, FlowPredictor, RaftModel, XRaftModel, prepare_input, trainable_parameters
from .synth import SynthConfig, TrainingTriplet, pretrain_pair, stream_rng

log = logging.getLogger(__name__)

W, B = Modality.WHITE, Modality.BLUE


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 20
    learning_rate: float = 5e-5
    eps_o: float = 8.0
    eps_d: float = 0.07
    supervised_iterations: int = 3
    validate_every: int = 10
    patience: int = 20
    max_batches: int = 0  # 0: run until early stopping
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("batch_size", "learning_rate", "eps_o", "supervised_iterations", "validate_every", "patience"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.eps_d < 0 or self.max_batches < 0:
            raise ValueError("eps_d and max_batches must be non-negative")


@dataclass
class PretrainConfig:
    steps: int = 1500
    batch_size: int = 8
    learning_rate: float = 4e-4
    max_amplitude: float = 12.0
    sigma_range: tuple[float, float] = (6.0, 12.0)
    blue_fraction: float = 0.25
    clip_norm: float = 1.0
    seed: int = 0


def _check_loss(loss: torch.Tensor, where: str) -> None:
    value = loss.detach().item()
    if not math.isfinite(value):
        raise TrainingDivergedError(f"non-finite loss {value} at {where}")


def sequence_epe(flows: Sequence[torch.Tensor], gt: torch.Tensor) -> torch.Tensor:
    """Sum of per-iteration mean EPE, equally weighted."""
    return sum(epe(f, gt) for f in flows)


def pretrain(
    model: RaftModel,
    synth: SynthConfig,
    config: PretrainConfig,
    q: ColorMatrix,
    log_fn: Callable[[str], None] | None = None,
) -> list[float]:
    """Train every parameter on same-modality pairs with known deformations.

    Pairs are drawn on the fly from ``synth``'s seed; returns the loss trace.
    """
    for p in model.parameters():
        p.requires_grad_(True)
    params = trainable_parameters(model)
    opt = E.Adam(params, learning_rate=config.learning_rate)
    rng = stream_rng(config.seed, "order")
    trace = []
    for step in range(config.steps):
        srcs, tgts, gts = [], [], []
        for j in range(config.batch_size):
            index = step * config.batch_size + j
            mod = B if rng.random() < config.blue_fraction else W
            amp = float(rng.uniform(0.0, config.max_amplitude))
            sigma = float(rng.uniform(*config.sigma_range))
            s, t, f = pretrain_pair(synth, index, mod, amp, sigma)
            srcs.append(prepare_input(E.as_engine(s.values), "rgb", q))
            tgts.append(prepare_input(E.as_engine(t.values), "rgb", q))
            gts.append(E.as_engine(f))
        flows = model(torch.stack(srcs), torch.stack(tgts), W, W)
        loss = sequence_epe(flows, torch.stack(gts))
        _check_loss(loss, f"pretrain step {step}")
        opt.zero_grad()
        E.backward(loss)
        if config.clip_norm > 0:
            torch.nn.utils.clip_grad_norm_(params, config.clip_norm)
        opt.step()
        trace.append(loss.detach().item())
        if log_fn is not None:
            log_fn(f"pretrain {step} loss {trace[-1]:.6f}")
    return trace


@torch.no_grad()
def teacher_flow(triplet: TrainingTriplet, teacher: FlowEstimator | None, q: ColorMatrix) -> torch.Tensor:
    """White-to-white flow ``F_ac`` ``[2,H,W]`` from the frozen teacher or the stored file."""
    if triplet.provenance == "loaded-from-file":
        if triplet.teacher_flow_ac is None:
            raise ValueError("triplet claims a stored teacher flow but has none")
        return triplet.teacher_flow_ac
    if teacher is None:
        raise ValueError("no teacher model for a triplet without a stored flow")
    a = prepare_input(E.as_engine(triplet.image_a.values), "rgb", q)
    c = prepare_input(E.as_engine(triplet.image_c.values), "rgb", q)
    return teacher(a[None], c[None], W, W)[-1][0]


@dataclass
class CycleFlows:
    """Everything the masked cycle loss consumes, batched ``[N,...]``."""

    ab: Sequence[torch.Tensor]  # per-iteration white->blue
    bc: Sequence[torch.Tensor]  # per-iteration blue->white
    ba: torch.Tensor  # final-iteration blue->white (a frame)
    cb: torch.Tensor  # final-iteration white->blue (c frame)
    ac: torch.Tensor  # teacher a->c
    ca: torch.Tensor | None  # teacher c->a; without it the a-c occlusion check is skipped
    blue_cube: torch.Tensor  # HSI values of image b, for the dark mask


def cycle_mask(flows: CycleFlows, config: TrainConfig) -> torch.Tensor:
    """Combined supervision mask ``[N,1,H,W]`` built from final-iteration flows."""
    f_ab = flows.ab[-1].detach()
    f_bc = flows.bc[-1].detach()
    m_ab = occlusion_mask(f_ab, flows.ba.detach(), config.eps_o)
    m_bc = occlusion_mask(f_bc, flows.cb.detach(), config.eps_o)
    if flows.ca is None:
        m_ac = torch.ones_like(m_ab)
    else:
        m_ac = occlusion_mask(flows.ac, flows.ca, config.eps_o)
    m_db = dark_mask(flows.blue_cube, config.eps_d)
    return combined_mask(m_ac, m_ab, m_bc, m_db, f_ab)


def masked_cycle_loss(flows: CycleFlows, config: TrainConfig) -> tuple[torch.Tensor | None, int, torch.Tensor]:
    """Mean over usable triplets of the per-iteration masked cycle EPE sum.

    Returns ``(loss or None when every triplet is skipped, skipped count, mask)``.
    """
    mask = cycle_mask(flows, config)
    counts = mask.sum(dim=(1, 2, 3))
    usable = counts > 0
    skipped = int((~usable).sum())
    if not usable.any():
        return None, skipped, mask
    weights = mask.to(flows.ac.dtype)
    total = 0
    for k in range(min(config.supervised_iterations, len(flows.ab))):
        cycle = compose(flows.ab[k], flows.bc[k])
        norms = endpoint_norms(cycle, flows.ac.to(cycle.dtype)) * weights
        per_triplet = norms.sum(dim=(1, 2, 3))[usable] / counts[usable]
        total = total + per_triplet.mean()
    return total, skipped, mask


@dataclass
class TripletBatch:
    a: torch.Tensor
    b: torch.Tensor
    c: torch.Tensor
    blue_cube: torch.Tensor
    ac: torch.Tensor
    ca: torch.Tensor | None


def make_batch(
    triplets: Sequence[TrainingTriplet],
    mode: str,
    q: ColorMatrix,
    teacher_flows: Sequence[tuple[torch.Tensor, torch.Tensor | None]],
) -> TripletBatch:
    def stack(key: str) -> torch.Tensor:
        return torch.stack([prepare_input(E.as_engine(getattr(t, key).values), mode, q) for t in triplets])

    cas = [f[1] for f in teacher_flows]
    return TripletBatch(
        a=stack("image_a"),
        b=stack("image_b"),
        c=stack("image_c"),
        blue_cube=torch.stack([E.as_engine(t.image_b.values) for t in triplets]),
        ac=torch.stack([E.as_engine(f[0]) for f in teacher_flows]),
        ca=None if any(c is None for c in cas) else torch.stack([E.as_engine(c) for c in cas]),
    )


def cycle_loss(model: XRaftModel, batch: TripletBatch, config: TrainConfig) -> tuple[torch.Tensor | None, int]:
    """Masked flow-cycle loss for a batch of white-blue-white triplets.

    The two supervised legs run with gradients; the reverse legs used only
    for occlusion masks run without.
    """
    ab = model(batch.a, batch.b, W, B)
    bc = model(batch.b, batch.c, B, W)
    with torch.no_grad():
        ba = model(batch.b, batch.a, B, W)[-1]
        cb = model(batch.c, batch.b, W, B)[-1]
    flows = CycleFlows(ab, bc, ba, cb, batch.ac, batch.ca, batch.blue_cube)
    loss, skipped, _ = masked_cycle_loss(flows, config)
    return loss, skipped


@dataclass
class FinetuneResult:
    model: XRaftModel
    best_val: float
    best_batch: int
    batches_run: int
    val_history: list[tuple[int, float]] = field(default_factory=list)
    loss_history: list[tuple[int, float, int]] = field(default_factory=list)
    skipped_total: int = 0


def validation_epe(model: FlowEstimator, cases: Sequence[SyntheticCase], q: ColorMatrix) -> float:
    return eval_synthetic_batch(FlowPredictor(model, q), cases, "both")


def teacher_flows_for(
    triplets: Sequence[TrainingTriplet], teacher: FlowEstimator | None, q: ColorMatrix
) -> list[tuple[torch.Tensor, torch.Tensor | None]]:
    """``(F_ac, F_ca)`` per triplet; ``F_ca`` is ``None`` for stored flows without a teacher."""
    out = []
    for t in triplets:
        f_ac = teacher_flow(t, teacher, q)
        f_ca = None
        if teacher is not None:
            rev = TrainingTriplet(t.image_c, t.image_b, t.image_a)
            f_ca = teacher_flow(rev, teacher, q)
        out.append((f_ac, f_ca))
    return out


def finetune(
    model: XRaftModel,
    triplets: Sequence[TrainingTriplet],
    validation: Sequence[SyntheticCase],
    config: TrainConfig,
    q: ColorMatrix,
    teacher: FlowEstimator | None = None,
    log_fn: Callable[[str], None] | None = None,
) -> FinetuneResult:
    """Adam on the trainable parameters with periodic validation and early stopping.

    The caller chooses what is trainable (see :func:`xraft.model.set_trainable`).
    The returned model holds the parameters of the best validation point;
    the untrained model counts as the point at batch 0.
    """
    if not triplets:
        raise ValueError("no training triplets")
    emit = log_fn or (lambda line: None)
    params = trainable_parameters(model)
    opt = E.Adam(params, learning_rate=config.learning_rate)
    flows = teacher_flows_for(triplets, teacher, q)
    rng = stream_rng(config.seed, "order", 1)

    best_val = validation_epe(model, validation, q)
    best_state = copy.deepcopy(model.state_dict())
    best_batch = 0
    result = FinetuneResult(model, best_val, 0, 0, [(0, best_val)])
    emit(f"val 0 epe {best_val:.6f}")
    stale = 0
    batch_no = 0
    done = False
    while not done:
        order = rng.permutation(len(triplets))
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = make_batch([triplets[i] for i in idx], model.mode, q, [flows[i] for i in idx])
            loss, skipped = cycle_loss(model, batch, config)
            batch_no += 1
            result.skipped_total += skipped
            value = 0.0
            if loss is not None:
                _check_loss(loss, f"finetune batch {batch_no}")
                if params:
                    opt.zero_grad()
                    E.backward(loss)
                    opt.step()
                value = loss.detach().item()
            result.loss_history.append((batch_no, value, skipped))
            emit(f"batch {batch_no} loss {value:.6f} skipped {skipped}")
            if batch_no % config.validate_every == 0:
                val = validation_epe(model, validation, q)
                result.val_history.append((batch_no, val))
                emit(f"val {batch_no} epe {val:.6f}")
                if val < best_val:
                    best_val, best_batch, stale = val, batch_no, 0
                    best_state = copy.deepcopy(model.state_dict())
                else:
                    stale += 1
                if stale >= config.patience:
                    done = True
            if config.max_batches and batch_no >= config.max_batches:
                done = True
            if done:
                break
    model.load_state_dict(best_state)
    result.best_val, result.best_batch, result.batches_run = best_val, best_batch, batch_no
    return result
