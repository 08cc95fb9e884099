"""``xraft`` command line: data generation, training, inference and evaluation."""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path
from typing import Sequence

import torch

from . import engine as E
from . import fileio
from .config import RunConfig, load_config
from .evaluation import (
    DIRECTIONS,
    EvalSet,
    eval_report,
    format_report,
    mean_displacement,
    render_registration,
)
from .flow import invert_flow
from .imaging import ColorMatrix, HsiCube, read_cube
from .model import (
    MODES,
    FlowEstimator,
    FlowPredictor,
    RaftModel,
    XRaftModel,
    build_xraft,
    frozen_copy,
    load_checkpoint,
    save_checkpoint,
    set_trainable,
)
from .synth import Dataset, OutputExistsError, generate, read_manifest, write_dataset
from .training import TrainingDivergedError, finetune, pretrain

PROG = "xraft"


class CliError(Exception):
    """A user-facing failure; the message is printed as the diagnostic line."""


def _prepare_out(out: str | None, force: bool, default: str) -> Path:
    path = Path(out or default)
    if path.exists() and not path.is_dir():
        raise CliError(f"{path}: output path exists and is not a directory")
    if path.exists() and any(path.iterdir()) and not force:
        raise OutputExistsError(f"{path}: output directory is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _need_file(path: str | None, what: str) -> Path:
    if path is None:
        raise CliError(f"missing --{what}")
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{p}: {what} file not found")
    return p


def _load_model(path: Path) -> FlowEstimator:
    model = load_checkpoint(path)
    model.eval()
    return model


def _predictor(model: FlowEstimator, path: Path, mode: str | None, q: ColorMatrix) -> FlowPredictor:
    if isinstance(model, XRaftModel):
        if mode is not None and mode != model.mode:
            raise CliError(f"{path}: checkpoint was built for mode {model.mode!r}, not {mode!r}")
        return FlowPredictor(model, q)
    if mode == "hsi":
        raise CliError(f"{path}: a base checkpoint cannot run in hsi mode")
    return FlowPredictor(model, q, mode or "rgb")


class _Logger:
    def __init__(self, path: Path, echo: bool) -> None:
        self.fh = path.open("a")
        self.echo = echo

    def __call__(self, line: str) -> None:
        self.fh.write(line + "\n")
        self.fh.flush()
        if self.echo:
            print(line, flush=True)

    def close(self) -> None:
        self.fh.close()


# -- commands --------------------------------------------------------------------------


def cmd_make_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out or "synth")
    ds = generate(cfg.synth_config())
    manifest = write_dataset(ds, out, force=args.force)
    (out / "run.cfg").write_text(cfg.to_text())
    print(f"wrote {manifest} ({len(ds.triplets)} triplets, {len(ds.val)} val, {len(ds.test)} test, "
          f"{len(ds.annotated)} annotated)")
    return 0


def cmd_pretrain(args, cfg: RunConfig, q: ColorMatrix) -> int:
    out = _prepare_out(args.out, args.force, "pretrain")
    model = RaftModel(cfg.model, seed=cfg.seed)
    log = _Logger(out / "pretrain.log", args.verbose)
    start = time.time()
    try:
        trace = pretrain(model, cfg.synth_config(), cfg.pretrain_config(), q, log)
    finally:
        log.close()
    save_checkpoint(model, out / "base.xrft")
    (out / "run.cfg").write_text(cfg.to_text())
    print(f"wrote {out / 'base.xrft'} after {len(trace)} steps in {time.time() - start:.0f}s"
          + (f", final loss {trace[-1]:.4f}" if trace else ""))
    return 0


def _dataset(path: Path) -> Dataset:
    return read_manifest(path)


def cmd_finetune(args, cfg: RunConfig, q: ColorMatrix) -> int:
    data = _need_file(args.data, "data")
    base_path = _need_file(args.base, "base")
    out = _prepare_out(args.out, args.force, "finetune")
    mode = args.mode or cfg.mode
    base = load_checkpoint(base_path)
    if not isinstance(base, RaftModel):
        raise CliError(f"{base_path}: expected a base (single-modality) checkpoint")
    ds = _dataset(data)
    if not ds.triplets:
        raise CliError(f"{data}: manifest lists no training triplets")
    if not ds.val:
        raise CliError(f"{data}: manifest lists no validation pairs")
    model = build_xraft(base, mode, q)
    set_trainable(model)
    log = _Logger(out / "train.log", args.verbose)
    start = time.time()
    try:
        result = finetune(model, ds.triplets, ds.val, cfg.train_config(), q, frozen_copy(base), log)
    finally:
        log.close()
    save_checkpoint(result.model, out / "xraft.xrft")
    (out / "run.cfg").write_text(cfg.to_text())
    first = result.val_history[0][1]
    print(f"wrote {out / 'xraft.xrft'}: val epe {first:.4f} -> {result.best_val:.4f} "
          f"(best at batch {result.best_batch} of {result.batches_run}, {time.time() - start:.0f}s)")
    return 0


def _read_pair(args) -> tuple[HsiCube, HsiCube]:
    return read_cube(_need_file(args.source, "source")), read_cube(_need_file(args.target, "target"))


def _check_channels(model: FlowEstimator, predictor: FlowPredictor, cube: HsiCube, path: str) -> None:
    want = model.cfg.in_channels
    have = cube.bands if predictor.mode == "hsi" else 3
    if predictor.mode != "hsi" and cube.bands != predictor.q.bands:
        raise CliError(f"{path}: cube has {cube.bands} bands but the colour matrix expects {predictor.q.bands}")
    if have != want:
        raise CliError(f"{path}: model expects {want} input channels, cube provides {have}")


def cmd_infer(args, cfg: RunConfig, q: ColorMatrix) -> int:
    model_path = _need_file(args.model, "model")
    source, target = _read_pair(args)
    out = _prepare_out(args.out, args.force, "infer")
    model = _load_model(model_path)
    pred = _predictor(model, model_path, args.mode, q)
    _check_channels(model, pred, source, args.source)
    _check_channels(model, pred, target, args.target)
    if source.values.shape[1:] != target.values.shape[1:]:
        raise CliError(f"{args.target}: size {tuple(target.values.shape[1:])} differs from source "
                       f"{tuple(source.values.shape[1:])}")
    f_st = pred([source], [target])[0]
    fileio.write_flo(out / "flow.flo", f_st.numpy())
    print(f"wrote {out / 'flow.flo'} (mean displacement {mean_displacement(f_st):.4f} px)")
    if args.render:
        f_ts = pred([target], [source])[0]
        _, keep = render_registration(source, target, f_st, f_ts, q, cfg.eval.threshold, out / "render.ppm")
        print(f"wrote {out / 'render.ppm'} ({100 * (1 - keep.mean()):.1f}% discarded)")
    return 0


def cmd_render(args, cfg: RunConfig, q: ColorMatrix) -> int:
    args.render = True
    return cmd_infer(args, cfg, q)


def _oracle(ds: Dataset):
    """Predictor returning stored or regenerated ground truth, keyed by the target cube."""
    table: dict[int, torch.Tensor] = {}
    for split, cases in (("val", ds.val), ("test", ds.test)):
        for i, case in enumerate(cases):
            gt = ds.flows.get(f"{split}{i}")
            gt = case.ground_truth() if gt is None else gt
            table[id(case.blue)] = gt
            table[id(case.white)] = gt
    for i, pair in enumerate(ds.annotated):
        bw = ds.flows.get(f"annotated{i}")
        if bw is not None:
            table[id(pair.white)] = bw
            table[id(pair.blue)] = invert_flow(bw)

    def predict(sources, targets):
        missing = [t for t in targets if id(t) not in table]
        if missing:
            raise CliError("oracle evaluation needs ground-truth flows for every pair in the manifest")
        return torch.stack([E.as_engine(table[id(t)]) for t in targets])

    return predict


def cmd_eval(args, cfg: RunConfig, q: ColorMatrix) -> int:
    data = _need_file(args.data, "data")
    if not args.model and not args.oracle:
        raise CliError("missing --model (or --oracle)")
    out = _prepare_out(args.out, args.force, "eval")
    ds = _dataset(data)
    split = args.split or cfg.eval.split
    eval_set = EvalSet(list(ds.test if split == "test" else ds.val), list(ds.annotated))
    runs: dict[str, list] = {}
    if args.oracle:
        runs["oracle"] = [_oracle(ds)]
    for spec in args.model or []:
        name, _, path = spec.rpartition("=")
        path, _, mode = path.partition("@")
        if mode and mode not in MODES:
            raise CliError(f"{spec}: unknown mode {mode!r}; choose from {MODES}")
        p = _need_file(path, "model")
        name = name or p.stem
        model = _load_model(p)
        runs.setdefault(name, []).append(_predictor(model, p, mode or args.mode, q))
    summary, per_run = eval_report(runs, eval_set)
    direction = args.direction
    if direction is not None:
        summary = [r for r in summary if r.direction == direction]
        per_run = [r for r in per_run if r.direction == direction]
    (out / "report.tsv").write_text(format_report(summary))
    (out / "per_run.tsv").write_text(format_report(per_run))
    sys.stdout.write(format_report(summary))
    return 0


# -- entry point ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' run configuration")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    common.add_argument("--mode", choices=MODES, help="input representation")
    common.add_argument("--matrix", help="colour matrix as a text file of 3 rows (default: built-in)")
    common.add_argument("-v", "--verbose", action="store_true", help="echo training log lines")

    parser = argparse.ArgumentParser(prog=PROG, description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("make-synth", parents=[common], help="generate the synthetic dataset")
    sub.add_parser("pretrain", parents=[common], help="train the single-modality base model")
    ft = sub.add_parser("finetune", parents=[common], help="cross-modal fine-tuning from a base checkpoint")
    ft.add_argument("--data", help="dataset manifest")
    ft.add_argument("--base", help="base checkpoint")
    for name, text in (("infer", "estimate flow between two cubes"), ("render", "registration render")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--model", help="checkpoint")
        p.add_argument("--source", help="source cube")
        p.add_argument("--target", help="target cube")
        if name == "infer":
            p.add_argument("--render", action="store_true", help="also write a registration render")
    ev = sub.add_parser("eval", parents=[common], help="metrics report")
    ev.add_argument("--data", help="dataset manifest")
    ev.add_argument("--model", action="append",
                    help="[name=]checkpoint[@mode]; repeat a name to aggregate several runs")
    ev.add_argument("--oracle", action="store_true", help="also score the stored ground-truth flows")
    ev.add_argument("--split", choices=("val", "test"), help="synthetic split (default: eval.split)")
    ev.add_argument("--direction", choices=DIRECTIONS, help="only report this direction")
    return parser


def _colour_matrix(path: str | None, bands: int) -> ColorMatrix:
    if path is None:
        return ColorMatrix.default(bands)
    import numpy as np

    try:
        return ColorMatrix(np.loadtxt(path, ndmin=2))
    except (OSError, ValueError) as exc:
        raise CliError(f"{path}: cannot read colour matrix ({exc})") from None


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    E.configure_determinism(1)
    try:
        cfg = load_config(args.config).with_seed(args.seed)
        q = _colour_matrix(args.matrix, cfg.synth.bands)
        command = args.command
        if command == "make-synth":
            return cmd_make_synth(args, cfg)
        handler = {"pretrain": cmd_pretrain, "finetune": cmd_finetune, "infer": cmd_infer,
                   "render": cmd_render, "eval": cmd_eval}[command]
        return handler(args, cfg, q)
    except (CliError, OutputExistsError, fileio.FormatError, E.ShapeError, E.ConfigError,
            TrainingDivergedError) as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        where = exc.filename or ""
        print(f"{PROG}: error: {where}: {exc.strerror or exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
