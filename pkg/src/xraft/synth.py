"""Seeded synthetic cross-modal datasets and their on-disk manifest.

Manifest lines (paths relative to the manifest's directory)::

    triplet <a> <b> <c> [teacher <flo>]
    val <white> <blue> deform <seed> <sigma> <amplitude> [flow <flo>]
    test <white> <blue> deform <seed> <sigma> <amplitude> [flow <flo>]
    annotated <white> <blue> [keypoints <txt>] [mask_white <pgm>] [mask_blue <pgm>] [flow_bw <flo>]

Every random draw comes from ``numpy.random.SeedSequence([seed, stream, index])``
so each item is reproducible on its own.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import fileio
from .evaluation import AnnotatedPair, DeformRecipe, EvalSet, SyntheticCase, apply_deformation, gen_deformation, \
    read_keypoints, write_keypoints
from .flow import warp_mask
from .imaging import DEFAULT_BANDS, HsiCube, Modality, ModalityRecipe, default_blue_mix, make_white_cube, \
    read_cube, synth_modality, write_cube

_STREAMS = {"scene": 1, "deform": 2, "blue": 3, "keypoints": 4, "mask": 5, "pretrain": 6, "mix": 7, "order": 8}


def stream_seed(seed: int, stream: str, index: int = 0) -> int:
    """Independent 63-bit seed for item ``index`` of a named stream."""
    ss = np.random.SeedSequence([seed, _STREAMS[stream], index])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def stream_rng(seed: int, stream: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.PCG64(np.random.SeedSequence([seed, _STREAMS[stream], index])))


@dataclass
class SynthConfig:
    size: int = 64
    bands: int = DEFAULT_BANDS
    triplets: int = 200
    val_pairs: int = 30
    test_pairs: int = 30
    annotated_pairs: int = 10
    keypoints_per_pair: int = 8
    # Motion between the three frames of a training triplet.
    triplet_sigma: float = 8.0
    triplet_amplitude: float = 6.0
    # Deformation applied to evaluation pairs.
    deform_sigma: float = 8.0
    deform_amplitude: float = 10.0
    attenuation: float = 0.3
    darkening_low: float = 0.2
    darkening_high: float = 1.0
    noise_sigma: float = 0.02
    seed: int = 0


def blue_recipe(cfg: SynthConfig, index: int, stream_offset: int = 0) -> ModalityRecipe:
    return ModalityRecipe(
        mix=default_blue_mix(cfg.bands, stream_seed(cfg.seed, "mix")),
        attenuation=cfg.attenuation,
        darkening=(cfg.darkening_low, cfg.darkening_high),
        noise_sigma=cfg.noise_sigma,
        seed=stream_seed(cfg.seed, "blue", stream_offset + index),
    )


def scene(cfg: SynthConfig, index: int) -> HsiCube:
    return make_white_cube(stream_rng(cfg.seed, "scene", index), cfg.size, cfg.size, cfg.bands)


@dataclass
class TrainingTriplet:
    """White ``a``, blue ``b``, white ``c`` of one scene under independent motion."""

    image_a: HsiCube
    image_b: HsiCube
    image_c: HsiCube
    teacher_flow_ac: torch.Tensor | None = None
    provenance: str = "computed-by-teacher"

    def __post_init__(self) -> None:
        shapes = {tuple(x.values.shape[1:]) for x in (self.image_a, self.image_b, self.image_c)}
        if len(shapes) != 1:
            raise ValueError(f"triplet images differ in size: {sorted(shapes)}")
        if self.image_a.modality != self.image_c.modality:
            raise ValueError("image_a and image_c must share a modality")


# Index offsets keep the scene streams of different splits disjoint.
_TRIPLET_BASE, _VAL_BASE, _TEST_BASE, _ANN_BASE = 0, 1_000_000, 2_000_000, 3_000_000


def make_triplet(cfg: SynthConfig, index: int) -> TrainingTriplet:
    idx = _TRIPLET_BASE + index
    base = scene(cfg, idx)
    moved = []
    for j in range(3):
        recipe = DeformRecipe(stream_seed(cfg.seed, "deform", 3 * idx + j), cfg.triplet_sigma, cfg.triplet_amplitude)
        moved.append(apply_deformation(base, gen_deformation(cfg.size, cfg.size, recipe)))
    blue = synth_modality(moved[1], blue_recipe(cfg, idx))
    return TrainingTriplet(moved[0], blue, moved[2])


def make_case(cfg: SynthConfig, index: int, split: str = "val") -> SyntheticCase:
    idx = (_VAL_BASE if split == "val" else _TEST_BASE) + index
    white = scene(cfg, idx)
    blue = synth_modality(white, blue_recipe(cfg, idx))
    recipe = DeformRecipe(stream_seed(cfg.seed, "deform", idx), cfg.deform_sigma, cfg.deform_amplitude)
    return SyntheticCase(white, blue, recipe)


def _ellipse(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    cy, cx = rng.uniform(0.3, 0.7, size=2) * (h, w)
    ry, rx = rng.uniform(0.12, 0.3, size=2) * (h, w)
    ys, xs = np.mgrid[0:h, 0:w]
    return ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0


def make_annotated(cfg: SynthConfig, index: int) -> tuple[AnnotatedPair, torch.Tensor]:
    """Annotated pair and its true blue->white flow.

    The blue frame is the white scene pulled along ``flow_bw``, so a blue
    pixel ``p`` shows the white content at ``p + flow_bw(p)``.
    """
    idx = _ANN_BASE + index
    white = scene(cfg, idx)
    recipe = DeformRecipe(stream_seed(cfg.seed, "deform", idx), cfg.deform_sigma, cfg.deform_amplitude)
    flow_bw = gen_deformation(cfg.size, cfg.size, recipe)
    blue = synth_modality(apply_deformation(white, flow_bw), blue_recipe(cfg, idx))
    rng = stream_rng(cfg.seed, "keypoints", idx)
    rows = []
    h = w = cfg.size
    fb = flow_bw.numpy()
    while len(rows) < cfg.keypoints_per_pair:
        xb, yb = (int(v) for v in rng.integers(2, (w - 2, h - 2)))
        xw, yw = xb + fb[0, yb, xb], yb + fb[1, yb, xb]
        if 0 <= xw <= w - 1 and 0 <= yw <= h - 1:
            rows.append([xw, yw, float(xb), float(yb)])
    mask_white = _ellipse(stream_rng(cfg.seed, "mask", idx), h, w)
    mask_blue = warp_mask(torch.from_numpy(mask_white)[None, None], flow_bw[None])[0, 0].numpy()
    pair = AnnotatedPair(white, blue, np.asarray(rows), mask_white, mask_blue)
    return pair, flow_bw


@dataclass
class Dataset:
    triplets: list[TrainingTriplet] = field(default_factory=list)
    val: list[SyntheticCase] = field(default_factory=list)
    test: list[SyntheticCase] = field(default_factory=list)
    annotated: list[AnnotatedPair] = field(default_factory=list)
    flows: dict[str, torch.Tensor] = field(default_factory=dict)

    def eval_set(self, split: str = "test") -> EvalSet:
        return EvalSet(list(self.test if split == "test" else self.val), list(self.annotated))


def generate(cfg: SynthConfig) -> Dataset:
    ds = Dataset()
    ds.triplets = [make_triplet(cfg, i) for i in range(cfg.triplets)]
    ds.val = [make_case(cfg, i, "val") for i in range(cfg.val_pairs)]
    ds.test = [make_case(cfg, i, "test") for i in range(cfg.test_pairs)]
    for i in range(cfg.annotated_pairs):
        pair, flow_bw = make_annotated(cfg, i)
        ds.annotated.append(pair)
        ds.flows[f"annotated{i}"] = flow_bw
    return ds


class OutputExistsError(FileExistsError):
    pass


def write_dataset(ds: Dataset, out: str | os.PathLike, force: bool = False) -> Path:
    """Write cubes, flows, keypoints, masks and ``manifest.txt`` under ``out``."""
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise OutputExistsError(f"{out}: output directory is not empty (use --force)")
    for sub in ("triplets", "eval", "annotated"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    lines = []
    for i, t in enumerate(ds.triplets):
        names = [f"triplets/{i:04d}_{k}.hsic" for k in "abc"]
        for name, cube in zip(names, (t.image_a, t.image_b, t.image_c)):
            write_cube(cube, out / name)
        line = "triplet " + " ".join(names)
        if t.teacher_flow_ac is not None:
            flo = f"triplets/{i:04d}_teacher_ac.flo"
            fileio.write_flo(out / flo, t.teacher_flow_ac.detach().numpy())
            line += f" teacher {flo}"
        lines.append(line)
    for split, cases in (("val", ds.val), ("test", ds.test)):
        for i, case in enumerate(cases):
            stem = f"eval/{split}_{i:04d}"
            write_cube(case.white, out / f"{stem}_white.hsic")
            write_cube(case.blue, out / f"{stem}_blue.hsic")
            fileio.write_flo(out / f"{stem}_gt.flo", case.ground_truth().numpy())
            r = case.recipe
            lines.append(
                f"{split} {stem}_white.hsic {stem}_blue.hsic deform {r.seed} {r.sigma!r} {r.amplitude!r}"
                f" flow {stem}_gt.flo"
            )
    for i, pair in enumerate(ds.annotated):
        stem = f"annotated/{i:04d}"
        write_cube(pair.white, out / f"{stem}_white.hsic")
        write_cube(pair.blue, out / f"{stem}_blue.hsic")
        line = f"annotated {stem}_white.hsic {stem}_blue.hsic"
        if pair.keypoints is not None:
            write_keypoints(out / f"{stem}_kp.txt", pair.keypoints)
            line += f" keypoints {stem}_kp.txt"
        if pair.mask_white is not None:
            fileio.write_pgm(out / f"{stem}_mask_white.pgm", pair.mask_white)
            line += f" mask_white {stem}_mask_white.pgm"
        if pair.mask_blue is not None:
            fileio.write_pgm(out / f"{stem}_mask_blue.pgm", pair.mask_blue)
            line += f" mask_blue {stem}_mask_blue.pgm"
        flow = ds.flows.get(f"annotated{i}")
        if flow is not None:
            fileio.write_flo(out / f"{stem}_gt_bw.flo", flow.numpy())
            line += f" flow_bw {stem}_gt_bw.flo"
        lines.append(line)
    (out / "manifest.txt").write_text("".join(line + "\n" for line in lines))
    return out / "manifest.txt"


def _options(tokens: list[str], allowed: set[str], where: str) -> dict[str, str]:
    if len(tokens) % 2:
        raise fileio.FormatError(f"{where}: dangling option {tokens[-1]!r}")
    opts = dict(zip(tokens[::2], tokens[1::2]))
    unknown = set(opts) - allowed
    if unknown:
        raise fileio.FormatError(f"{where}: unknown option(s) {sorted(unknown)}")
    return opts


def _flow_tensor(path: Path) -> torch.Tensor:
    return torch.from_numpy(fileio.read_flo(path))


def read_manifest(path: str | os.PathLike) -> Dataset:
    path = Path(path)
    root = path.parent
    ds = Dataset()
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        where = f"{path}:{lineno}"
        tokens = raw.split()
        if not tokens or tokens[0].startswith("#"):
            continue
        kind, rest = tokens[0], tokens[1:]
        if kind == "triplet":
            if len(rest) < 3:
                raise fileio.FormatError(f"{where}: triplet needs three cube paths")
            opts = _options(rest[3:], {"teacher"}, where)
            a, b, c = (read_cube(root / p) for p in rest[:3])
            t = TrainingTriplet(a, b, c)
            if "teacher" in opts:
                t.teacher_flow_ac = _flow_tensor(root / opts["teacher"])
                t.provenance = "loaded-from-file"
            ds.triplets.append(t)
        elif kind in ("val", "test"):
            if len(rest) < 2:
                raise fileio.FormatError(f"{where}: {kind} needs white and blue cube paths")
            white, blue = read_cube(root / rest[0]), read_cube(root / rest[1])
            tail = rest[2:]
            recipe = DeformRecipe()
            if tail[:1] == ["deform"]:
                if len(tail) < 4:
                    raise fileio.FormatError(f"{where}: deform needs seed, sigma and amplitude")
                try:
                    recipe = DeformRecipe(int(tail[1]), float(tail[2]), float(tail[3]))
                except ValueError as exc:
                    raise fileio.FormatError(f"{where}: {exc}") from exc
                tail = tail[4:]
            opts = _options(tail, {"flow"}, where)
            case = SyntheticCase(white, blue, recipe)
            (ds.val if kind == "val" else ds.test).append(case)
            if "flow" in opts:
                ds.flows[f"{kind}{len(ds.val if kind == 'val' else ds.test) - 1}"] = _flow_tensor(root / opts["flow"])
        elif kind == "annotated":
            if len(rest) < 2:
                raise fileio.FormatError(f"{where}: annotated needs white and blue cube paths")
            opts = _options(rest[2:], {"keypoints", "mask_white", "mask_blue", "flow_bw"}, where)
            pair = AnnotatedPair(read_cube(root / rest[0]), read_cube(root / rest[1]))
            if "keypoints" in opts:
                pair.keypoints = read_keypoints(root / opts["keypoints"])
            if "mask_white" in opts:
                pair.mask_white = fileio.read_pgm(root / opts["mask_white"])
            if "mask_blue" in opts:
                pair.mask_blue = fileio.read_pgm(root / opts["mask_blue"])
            if "flow_bw" in opts:
                ds.flows[f"annotated{len(ds.annotated)}"] = _flow_tensor(root / opts["flow_bw"])
            ds.annotated.append(pair)
        else:
            raise fileio.FormatError(f"{where}: unknown entry kind {kind!r}")
    return ds


def pretrain_pair(cfg: SynthConfig, index: int, modality: Modality,
                  amplitude: float, sigma: float) -> tuple[HsiCube, HsiCube, torch.Tensor]:
    """Same-modality ``(source, target, flow)`` with ``source = target`` pulled along ``flow``."""
    base = make_white_cube(stream_rng(cfg.seed, "pretrain", index), cfg.size, cfg.size, cfg.bands)
    if modality is Modality.BLUE:
        base = synth_modality(base, blue_recipe(cfg, index, stream_offset=10_000_000))
    recipe = DeformRecipe(stream_seed(cfg.seed, "deform", 10_000_000 + index), sigma, amplitude)
    flow = gen_deformation(cfg.size, cfg.size, recipe)
    return apply_deformation(base, flow), base, flow
