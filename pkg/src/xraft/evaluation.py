"""Synthetic-deformation EPE, keypoint EPE, mask 1-IoU and registration renders.

Direction names follow the inference direction: ``"wb"`` infers white to
blue, ``"bw"`` blue to white and ``"both"`` is the arithmetic mean of the
two. For a direction with source ``S`` and target ``T`` the flow ``F_ST``
is evaluated on keypoints located in ``S`` and is used to pull the mask
annotated in ``T`` back into ``S``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from . import fileio
from .engine import ShapeError, Tensor, bilinear_sample
from .flow import DEFAULT_DISCREPANCY, discrepancy_mask, endpoint_norms, to_engine_flow, warp, warp_mask
from .imaging import ColorMatrix, HsiCube, Modality, render_rgb

DIRECTIONS = ("wb", "bw", "both")
METRICS = ("synthetic_epe", "keypoint_epe", "mask_1-iou")


@dataclass(frozen=True)
class DeformRecipe:
    seed: int = 0
    sigma: float = 8.0
    amplitude: float = 10.0

    def __post_init__(self) -> None:
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.amplitude < 0:
            raise ValueError(f"amplitude must be non-negative, got {self.amplitude}")


def gen_deformation(width: int, height: int, recipe: DeformRecipe) -> Tensor:
    """Smooth random field ``[2,H,W]`` (float64) whose largest vector has norm ``amplitude``."""
    rng = np.random.default_rng(np.random.PCG64(recipe.seed))
    noise = rng.standard_normal((2, height, width))
    smooth = np.stack([gaussian_filter(noise[i], recipe.sigma, mode="reflect") for i in range(2)])
    peak = np.sqrt((smooth**2).sum(axis=0)).max()
    if recipe.amplitude == 0 or peak == 0:
        return torch.zeros(2, height, width, dtype=torch.float64)
    return torch.from_numpy(smooth * (recipe.amplitude / peak))


def apply_deformation(cube: HsiCube, flow: Tensor) -> HsiCube:
    """Backward-warp every band: ``out(p) = cube(p + flow(p))``, zero outside."""
    values = cube.values
    if flow.shape[-2:] != values.shape[-2:]:
        raise ShapeError(f"flow {tuple(flow.shape)} does not match cube {tuple(values.shape)}")
    with torch.no_grad():
        f = flow.reshape(1, 2, *flow.shape[-2:]).to(torch.float64)
        out = warp(values.unsqueeze(0).to(torch.float64), f)[0]
    return HsiCube(out.to(values.dtype), cube.modality)


# A predictor maps batches of (source, target) cubes to flows [N,2,H,W].
Predictor = Callable[[Sequence[HsiCube], Sequence[HsiCube]], Tensor]


def _direction_roles(direction: str) -> tuple[Modality, Modality]:
    if direction == "wb":
        return Modality.WHITE, Modality.BLUE
    if direction == "bw":
        return Modality.BLUE, Modality.WHITE
    raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")


@dataclass
class SyntheticCase:
    """A low-motion white/blue pair plus the deformation applied to the source."""

    white: HsiCube
    blue: HsiCube
    recipe: DeformRecipe = field(default_factory=DeformRecipe)

    def ground_truth(self) -> Tensor:
        return gen_deformation(self.white.width, self.white.height, self.recipe)

    def sources_targets(self, direction: str) -> tuple[HsiCube, HsiCube, Tensor]:
        gt = self.ground_truth()
        src_mod, _ = _direction_roles(direction)
        src, tgt = (self.white, self.blue) if src_mod is Modality.WHITE else (self.blue, self.white)
        return apply_deformation(src, gt), tgt, gt


def eval_synthetic_batch(predictor: Predictor, cases: Sequence[SyntheticCase], direction: str) -> float:
    """Case-weighted mean EPE of ``predictor`` against the generated fields."""
    if direction == "both":
        return 0.5 * (
            eval_synthetic_batch(predictor, cases, "wb") + eval_synthetic_batch(predictor, cases, "bw")
        )
    if not cases:
        raise ValueError("no synthetic cases")
    triples = [c.sources_targets(direction) for c in cases]
    pred = predictor([t[0] for t in triples], [t[1] for t in triples])
    gt = torch.stack([t[2] for t in triples]).to(pred.dtype)
    per_case = endpoint_norms(pred.detach(), gt).mean(dim=(1, 2, 3))
    return float(per_case.mean())


def eval_synthetic(predictor: Predictor, pair: SyntheticCase, recipe: DeformRecipe | None = None,
                   direction: str = "both") -> float:
    if recipe is not None:
        pair = SyntheticCase(pair.white, pair.blue, recipe)
    return eval_synthetic_batch(predictor, [pair], direction)


def eval_keypoints(flow: Tensor, pairs: np.ndarray | Sequence[Sequence[float]]) -> float:
    """Mean distance between ``source + flow(source)`` and annotated targets.

    ``pairs`` rows are ``(x_src, y_src, x_dst, y_dst)``; the flow is sampled
    bilinearly at the sub-pixel source positions.
    """
    pts = np.asarray(pairs, dtype=np.float64).reshape(-1, 4)
    if len(pts) == 0:
        raise ValueError("no keypoints to evaluate")
    f = flow.detach().to(torch.float64).reshape(1, 2, *flow.shape[-2:])
    src = torch.from_numpy(pts[:, :2].T.copy()).reshape(1, 2, 1, -1)
    sampled = bilinear_sample(f, src).reshape(2, -1).T.numpy()
    err = pts[:, :2] + sampled - pts[:, 2:]
    return float(np.sqrt((err**2).sum(axis=1)).mean())


def eval_mask_iou(flow: Tensor, src_mask: Tensor, dst_mask: Tensor) -> float:
    """``1 - IoU(warp(src_mask, flow), dst_mask)``; zero when both are empty."""
    f = to_engine_flow(flow.detach()).to(torch.float64)
    src = torch.as_tensor(src_mask).bool().reshape(1, 1, *f.shape[-2:])
    dst = torch.as_tensor(dst_mask).bool().reshape(1, 1, *f.shape[-2:])
    moved = warp_mask(src, f)
    union = int((moved | dst).sum())
    if union == 0:
        return 0.0
    return 1.0 - int((moved & dst).sum()) / union


def render_registration(
    source: HsiCube,
    target: HsiCube,
    f_st: Tensor,
    f_ts: Tensor,
    q: ColorMatrix,
    threshold: float = DEFAULT_DISCREPANCY,
    path: str | os.PathLike | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Source resampled into the target frame, uncertain pixels painted grey.

    A target pixel is kept when the target->source flow agrees with the
    source->target flow within ``threshold`` pixels. Returns the ``[3,H,W]``
    image in [0, 1] and the boolean keep-mask ``[H,W]``.
    """
    f_ts64 = to_engine_flow(f_ts.detach()).to(torch.float64)
    f_st64 = to_engine_flow(f_st.detach()).to(torch.float64)
    with torch.no_grad():
        moved = warp(source.values.unsqueeze(0).to(torch.float64), f_ts64)[0]
        keep = discrepancy_mask(f_ts64, f_st64, threshold)[0, 0].numpy()
    image = render_rgb(HsiCube(moved, source.modality), q)
    image[:, ~keep] = 0.5
    if path is not None:
        fileio.write_ppm(path, image)
    return image, keep


# -- annotated pairs and the report ------------------------------------------------


@dataclass
class AnnotatedPair:
    """A white/blue pair with optional keypoints (white->blue rows) and masks."""

    white: HsiCube
    blue: HsiCube
    keypoints: np.ndarray | None = None
    mask_white: np.ndarray | None = None
    mask_blue: np.ndarray | None = None

    def keypoints_for(self, direction: str) -> np.ndarray:
        kp = np.asarray(self.keypoints, dtype=np.float64)
        return kp if direction == "wb" else kp[:, [2, 3, 0, 1]]

    def masks_for(self, direction: str) -> tuple[np.ndarray, np.ndarray]:
        """``(mask to propagate, reference mask)``: target's mask, source's mask."""
        if direction == "wb":
            return self.mask_blue, self.mask_white
        return self.mask_white, self.mask_blue


@dataclass
class EvalSet:
    synthetic: list[SyntheticCase] = field(default_factory=list)
    annotated: list[AnnotatedPair] = field(default_factory=list)


def _directional_scores(predictor: Predictor, eval_set: EvalSet, direction: str) -> dict[str, float | None]:
    scores: dict[str, float | None] = dict.fromkeys(METRICS)
    if eval_set.synthetic:
        scores["synthetic_epe"] = eval_synthetic_batch(predictor, eval_set.synthetic, direction)
    kp_pairs = [p for p in eval_set.annotated if p.keypoints is not None and len(p.keypoints)]
    mask_pairs = [p for p in eval_set.annotated if p.mask_white is not None and p.mask_blue is not None]
    needed = {id(p): p for p in kp_pairs + mask_pairs}.values()
    if needed:
        needed = list(needed)
        src_mod, _ = _direction_roles(direction)
        srcs = [p.white if src_mod is Modality.WHITE else p.blue for p in needed]
        tgts = [p.blue if src_mod is Modality.WHITE else p.white for p in needed]
        flows = dict(zip((id(p) for p in needed), predictor(srcs, tgts)))
        if kp_pairs:
            scores["keypoint_epe"] = float(
                np.mean([eval_keypoints(flows[id(p)], p.keypoints_for(direction)) for p in kp_pairs])
            )
        if mask_pairs:
            scores["mask_1-iou"] = float(
                np.mean([eval_mask_iou(flows[id(p)], *p.masks_for(direction)) for p in mask_pairs])
            )
    return scores


def evaluate_predictor(predictor: Predictor, eval_set: EvalSet) -> dict[str, dict[str, float | None]]:
    """Scores keyed by direction then metric; ``None`` marks absent annotations."""
    out = {d: _directional_scores(predictor, eval_set, d) for d in ("wb", "bw")}
    out["both"] = {
        m: None if out["wb"][m] is None else 0.5 * (out["wb"][m] + out["bw"][m]) for m in METRICS
    }
    return out


@dataclass
class ReportRow:
    model: str
    direction: str
    metric: str
    value: float | None
    std: float | None = None

    def format(self) -> str:
        if self.value is None:
            return f"{self.model}\t{self.direction}\t{self.metric}\tabsent"
        # repr keeps every digit so per-run rows can be re-aggregated exactly
        cells = [self.model, self.direction, self.metric, repr(float(self.value))]
        if self.std is not None:
            cells.append(repr(float(self.std)))
        return "\t".join(cells)


def eval_report(
    runs: dict[str, Sequence[Predictor]], eval_set: EvalSet
) -> tuple[list[ReportRow], list[ReportRow]]:
    """Metric table per model; ``std`` (sample, ddof=1) only with several runs.

    Returns ``(summary rows, per-run rows)``; per-run rows carry the run
    index in the model column as ``name#i``.
    """
    summary: list[ReportRow] = []
    per_run: list[ReportRow] = []
    for name, predictors in runs.items():
        results = [evaluate_predictor(p, eval_set) for p in predictors]
        for i, res in enumerate(results):
            for d in DIRECTIONS:
                for m in METRICS:
                    per_run.append(ReportRow(f"{name}#{i}", d, m, res[d][m]))
        for d in DIRECTIONS:
            for m in METRICS:
                vals = [r[d][m] for r in results]
                if any(v is None for v in vals):
                    summary.append(ReportRow(name, d, m, None))
                    continue
                mean = float(np.mean(vals))
                std = float(np.std(vals, ddof=1)) if len(vals) > 1 else None
                summary.append(ReportRow(name, d, m, mean, std))
    return summary, per_run


def format_report(rows: Sequence[ReportRow]) -> str:
    return "".join(row.format() + "\n" for row in rows)


def parse_report(text: str) -> list[ReportRow]:
    rows = []
    for line in text.splitlines():
        if not line.strip():
            continue
        cells = line.split("\t")
        if len(cells) < 4:
            raise ValueError(f"malformed report line: {line!r}")
        value = None if cells[3] == "absent" else float(cells[3])
        std = float(cells[4]) if len(cells) > 4 else None
        rows.append(ReportRow(cells[0], cells[1], cells[2], value, std))
    return rows


def read_keypoints(path: str | os.PathLike) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise fileio.FormatError(f"{path}:{lineno}: expected 4 numbers, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise fileio.FormatError(f"{path}:{lineno}: {exc}") from exc
    return np.asarray(rows, dtype=np.float64).reshape(-1, 4)


def write_keypoints(path: str | os.PathLike, pairs: np.ndarray) -> None:
    with open(path, "w") as fh:
        for row in np.asarray(pairs).reshape(-1, 4):
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def mean_displacement(flow: Tensor) -> float:
    return float(torch.linalg.vector_norm(flow.to(torch.float64), dim=0).mean())

