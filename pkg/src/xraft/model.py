"""RAFT-style flow estimator with a modality-pair encoder bank.

A :class:`RaftModel` holds one feature encoder and one context encoder and
stands in for an off-the-shelf single-modality network. An
:class:`XRaftModel` holds four of each, keyed by ``(own, other)`` modality,
and shares the correlation lookup and recurrent update block.
"""

from __future__ import annotations

import copy
import io
import os
import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
from torch import nn

from . import engine as E
from .engine import ShapeError, Tensor
from .fileio import FormatError
from .imaging import ColorMatrix, Modality, to_bbb, to_rgb

CHECKPOINT_MAGIC = b"XRFT"
CHECKPOINT_VERSION = 1

MODES = ("rgb", "bbb", "hsi")
PAIR_KEYS = ("WW", "BB", "WB", "BW")
CROSS_KEYS = ("WB", "BW")


def pair_key(own: Modality | str, other: Modality | str) -> str:
    """Bank key for encoding an ``own`` image whose counterpart is ``other``.

    Independent of source/target role.
    """
    return Modality.parse(own).letter + Modality.parse(other).letter


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    feature_dim: int = 64
    hidden_dim: int = 32
    context_dim: int = 32
    widths: tuple[int, int, int] = (24, 40, 64)
    downsample: int = 8
    corr_levels: int = 2
    corr_radius: int = 3
    iterations: int = 8

    def __post_init__(self) -> None:
        if self.downsample not in (4, 8):
            raise ValueError(f"downsample must be 4 or 8, got {self.downsample}")
        if self.corr_levels < 1 or self.corr_radius < 0 or self.iterations < 1:
            raise ValueError("corr_levels, iterations must be >= 1 and corr_radius >= 0")


class Conv(nn.Module):
    """Convolution with 'same' padding for odd kernels."""

    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, generator=None) -> None:
        super().__init__()
        fan_in = cin * k * k
        w = torch.randn(cout, cin, k, k, generator=generator) * np.sqrt(2.0 / fan_in)
        self.weight = nn.Parameter(w.to(torch.get_default_dtype()))
        self.bias = nn.Parameter(torch.zeros(cout))
        self.stride = stride
        self.padding = k // 2

    def forward(self, x: Tensor) -> Tensor:
        return E.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Encoder(nn.Module):
    """Six convolutions, instance-normalised, downsampling by 4 or 8."""

    def __init__(self, cfg: ModelConfig, out_dim: int, generator=None) -> None:
        super().__init__()
        c1, c2, c3 = cfg.widths
        last_stride = 2 if cfg.downsample == 8 else 1
        g = generator
        self.layers = nn.ModuleList(
            [
                Conv(cfg.in_channels, c1, 7, 2, g),
                Conv(c1, c1, 3, 1, g),
                Conv(c1, c2, 3, 2, g),
                Conv(c2, c2, 3, 1, g),
                Conv(c2, c3, 3, last_stride, g),
            ]
        )
        self.head = Conv(c3, out_dim, 1, 1, g)

    @property
    def first(self) -> Conv:
        return self.layers[0]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = E.relu(E.instance_norm(layer(x)))
        return self.head(x)


class ConvGRU(nn.Module):
    def __init__(self, hidden: int, inp: int, generator=None) -> None:
        super().__init__()
        self.convz = Conv(hidden + inp, hidden, 3, 1, generator)
        self.convr = Conv(hidden + inp, hidden, 3, 1, generator)
        self.convq = Conv(hidden + inp, hidden, 3, 1, generator)

    def forward(self, h: Tensor, x: Tensor) -> Tensor:
        hx = E.concat([h, x], axis=1)
        z = E.sigmoid(self.convz(hx))
        r = E.sigmoid(self.convr(hx))
        q = E.tanh(self.convq(E.concat([E.mul(r, h), x], axis=1)))
        return E.add(E.mul(E.sub(torch.ones_like(z), z), h), E.mul(z, q))


class UpdateBlock(nn.Module):
    """Motion encoder, recurrent cell and flow head; shared by all modality pairs."""

    def __init__(self, cfg: ModelConfig, generator=None) -> None:
        super().__init__()
        g = generator
        corr_ch = cfg.corr_levels * (2 * cfg.corr_radius + 1) ** 2
        self.convc1 = Conv(corr_ch, 64, 1, 1, g)
        self.convc2 = Conv(64, 48, 3, 1, g)
        self.convf1 = Conv(2, 32, 7, 1, g)
        self.convf2 = Conv(32, 16, 3, 1, g)
        self.conv = Conv(64, 46, 3, 1, g)
        self.gru = ConvGRU(cfg.hidden_dim, 48 + cfg.context_dim, g)
        self.head1 = Conv(cfg.hidden_dim, 64, 3, 1, g)
        self.head2 = Conv(64, 2, 3, 1, g)
        with torch.no_grad():
            self.head2.weight.mul_(0.1)

    def forward(self, net: Tensor, ctx: Tensor, corr: Tensor, flow: Tensor) -> tuple[Tensor, Tensor]:
        c = E.relu(self.convc2(E.relu(self.convc1(corr))))
        f = E.relu(self.convf2(E.relu(self.convf1(flow))))
        motion = E.concat([E.relu(self.conv(E.concat([c, f], axis=1))), flow], axis=1)
        net = self.gru(net, E.concat([motion, ctx], axis=1))
        delta = self.head2(E.relu(self.head1(net)))
        return net, delta


class CorrPyramid:
    """Dense correlation volume and its pooled levels, sampled around coordinates."""

    def __init__(self, fmap1: Tensor, fmap2: Tensor, levels: int, radius: int) -> None:
        n, _, h, w = fmap1.shape
        corr = E.correlation_volume(fmap1, fmap2).reshape(n * h * w, 1, h, w)
        self.levels = [corr]
        for _ in range(levels - 1):
            corr = E.avg_pool2(corr)
            self.levels.append(corr)
        self.radius = radius
        self.shape = (n, h, w)
        r = torch.arange(-radius, radius + 1, dtype=fmap1.dtype)
        dy, dx = torch.meshgrid(r, r, indexing="ij")
        self.delta = torch.stack([dx, dy]).reshape(1, 2, 2 * radius + 1, 2 * radius + 1)

    def __call__(self, coords: Tensor) -> Tensor:
        n, h, w = self.shape
        centre = coords.permute(0, 2, 3, 1).reshape(n * h * w, 2, 1, 1)
        out = []
        for i, corr in enumerate(self.levels):
            sampled = E.bilinear_sample(corr, centre / 2**i + self.delta)
            out.append(sampled.reshape(n, h, w, -1).permute(0, 3, 1, 2))
        return E.concat(out, axis=1)


class FlowEstimator(nn.Module):
    """Shared iterative machinery. Subclasses choose the encoders."""

    kind = "abstract"
    # Stop gradients through earlier coordinate estimates; off only for gradient checks.
    detach_coords = True

    def __init__(self, cfg: ModelConfig, seed: int = 0) -> None:
        super().__init__()
        self.cfg = cfg
        self.update = UpdateBlock(cfg, torch.Generator().manual_seed(seed + 1))

    def encoders(self, src_mod, tgt_mod) -> tuple[Encoder, Encoder, Encoder]:
        raise NotImplementedError

    def forward(
        self,
        source: Tensor,
        target: Tensor,
        src_mod: Modality | str = Modality.WHITE,
        tgt_mod: Modality | str = Modality.WHITE,
        iterations: int | None = None,
    ) -> list[Tensor]:
        """Per-iteration flow estimates ``[N,2,H,W]`` at input resolution."""
        cfg = self.cfg
        iterations = cfg.iterations if iterations is None else iterations
        if source.dim() == 3:
            source, target = source.unsqueeze(0), target.unsqueeze(0)
        if source.shape != target.shape:
            raise ShapeError(f"source {tuple(source.shape)} and target {tuple(target.shape)} differ")
        n, c, h, w = source.shape
        if c != cfg.in_channels:
            raise ShapeError(f"model expects {cfg.in_channels} input channels, got {c}")
        s = cfg.downsample
        if h % s or w % s:
            raise ShapeError(f"image size {h}x{w} is not divisible by {s}")
        if (h // s) % 2 ** (cfg.corr_levels - 1) or (w // s) % 2 ** (cfg.corr_levels - 1):
            raise ShapeError(f"feature grid {h // s}x{w // s} too small for {cfg.corr_levels} levels")
        fnet_src, fnet_tgt, cnet = self.encoders(src_mod, tgt_mod)
        source = E.as_engine(source)
        target = E.as_engine(target)
        corr = CorrPyramid(fnet_src(source), fnet_tgt(target), cfg.corr_levels, cfg.corr_radius)
        context = cnet(source)
        net = E.tanh(context[:, : cfg.hidden_dim])
        ctx = E.relu(context[:, cfg.hidden_dim :])
        coords0 = E.coords_grid(n, h // s, w // s)
        coords1 = coords0.clone()
        flows = []
        for _ in range(iterations):
            if self.detach_coords:
                coords1 = coords1.detach()
            flow = E.sub(coords1, coords0)
            net, delta = self.update(net, ctx, corr(coords1), flow)
            coords1 = E.add(coords1, delta)
            flows.append(s * E.upsample_bilinear(E.sub(coords1, coords0), s))
        return flows


class RaftModel(FlowEstimator):
    """Single-modality network: one feature and one context encoder."""

    kind = "base"

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0) -> None:
        super().__init__(cfg, seed)
        self.fnet = Encoder(cfg, cfg.feature_dim, torch.Generator().manual_seed(seed + 2))
        self.cnet = Encoder(cfg, cfg.hidden_dim + cfg.context_dim, torch.Generator().manual_seed(seed + 3))

    def encoders(self, src_mod, tgt_mod):
        return self.fnet, self.fnet, self.cnet


class XRaftModel(FlowEstimator):
    """Four feature and four context encoders keyed by modality pair."""

    kind = "xraft"

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0, mode: str = "rgb") -> None:
        super().__init__(cfg, seed)
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.feature_encoders = nn.ModuleDict()
        self.context_encoders = nn.ModuleDict()
        for i, key in enumerate(PAIR_KEYS):
            g = torch.Generator().manual_seed(seed + 10 + 2 * i)
            self.feature_encoders[key] = Encoder(cfg, cfg.feature_dim, g)
            self.context_encoders[key] = Encoder(cfg, cfg.hidden_dim + cfg.context_dim, g)

    def encoders(self, src_mod, tgt_mod):
        src_key = pair_key(src_mod, tgt_mod)
        tgt_key = pair_key(tgt_mod, src_mod)
        return self.feature_encoders[src_key], self.feature_encoders[tgt_key], self.context_encoders[src_key]

    def encode(self, image: Tensor, own, other, kind: str = "feature") -> Tensor:
        """Encode ``image`` with the bank slot for ``(own, other)``."""
        key = pair_key(own, other)
        bank = {"feature": self.feature_encoders, "context": self.context_encoders}.get(kind)
        if bank is None:
            raise ValueError(f"encoder kind must be 'feature' or 'context', got {kind!r}")
        if image.dim() == 3:
            image = image.unsqueeze(0)
        if image.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"model expects {self.cfg.in_channels} input channels, got {image.shape[1]}")
        return bank[key](E.as_engine(image))


def prepare_input(cube: Tensor, mode: str, q: ColorMatrix) -> Tensor:
    """Turn band-first cube values into what a model of ``mode`` consumes."""
    if mode == "hsi":
        return E.as_engine(cube)
    rgb = to_rgb(cube, q)
    return to_bbb(rgb) if mode == "bbb" else rgb


def init_cross_rgb(weights: Tensor) -> Tensor:
    """Move all input-channel weight onto the blue channel (index 2).

    Convolving the result with an RGB image equals convolving the original
    weights with the image's BBB projection.
    """
    if weights.dim() != 4 or weights.shape[1] != 3:
        raise ShapeError(f"expected weights [n,3,kh,kw], got {tuple(weights.shape)}")
    out = torch.zeros_like(weights)
    out[:, 2] = weights.sum(dim=1)
    return out


def lift_rgb_to_hsi(weights: Tensor, q: ColorMatrix) -> Tensor:
    """Fold the colour conversion into first-layer weights: ``C[n,c] = sum_i B[n,i] Q[i,c]``."""
    if weights.dim() != 4 or weights.shape[1] != 3:
        raise ShapeError(f"expected weights [n,3,kh,kw], got {tuple(weights.shape)}")
    qt = torch.as_tensor(q.q, dtype=weights.dtype)
    return torch.einsum("nihw,ic->nchw", weights, qt).contiguous()


def _set_first_layer(enc: Encoder, weight: Tensor) -> None:
    enc.first.weight = nn.Parameter(weight.detach().contiguous().clone())


def build_xraft(base: RaftModel, mode: str = "rgb", q: ColorMatrix | None = None) -> XRaftModel:
    """Clone a single-modality model into every bank slot and adapt first layers."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if base.cfg.in_channels != 3:
        raise ShapeError(f"base model must take 3-channel input, has {base.cfg.in_channels}")
    if mode == "hsi" and q is None:
        raise ValueError("hsi mode needs the colour matrix used for RGB conversion")
    cfg = replace(base.cfg, in_channels=q.bands if mode == "hsi" else 3)
    model = XRaftModel(cfg, mode=mode)
    model.update = copy.deepcopy(base.update)
    for key in PAIR_KEYS:
        for bank, src in ((model.feature_encoders, base.fnet), (model.context_encoders, base.cnet)):
            enc = copy.deepcopy(src)
            first = enc.first.weight.detach()
            if key in CROSS_KEYS and mode in ("rgb", "hsi"):
                first = init_cross_rgb(first)
            if mode == "hsi":
                first = lift_rgb_to_hsi(first, q)
            _set_first_layer(enc, first)
            bank[key] = enc
    set_trainable(model, "all")
    return model


TRAINABLE_POLICIES = ("cross-encoders", "all", "none")


def trainable_names(model: FlowEstimator, policy: str = "cross-encoders") -> list[str]:
    if policy not in TRAINABLE_POLICIES:
        raise ValueError(f"unknown policy {policy!r}; choose from {TRAINABLE_POLICIES}")
    names = []
    for name, _ in model.named_parameters():
        if policy == "all":
            names.append(name)
        elif policy == "cross-encoders":
            parts = name.split(".")
            if parts[0] in ("feature_encoders", "context_encoders") and parts[1] in CROSS_KEYS:
                names.append(name)
    return names


def set_trainable(model: FlowEstimator, policy: str = "cross-encoders") -> None:
    """Freeze everything except the parameters selected by ``policy``.

    The default leaves only the cross-modal feature and context encoders
    trainable.
    """
    keep = set(trainable_names(model, policy))
    for name, p in model.named_parameters():
        p.requires_grad_(name in keep)


def trainable_parameters(model: nn.Module) -> list[Tensor]:
    return [p for p in model.parameters() if p.requires_grad]


# -- checkpoints -------------------------------------------------------------

_KINDS = {"base": 0, "xraft": 1}
_MODE_CODES = {m: i for i, m in enumerate(MODES)}
_HYPER_FIELDS = [f.name for f in fields(ModelConfig) if f.name not in ("in_channels", "widths")]


def _put_str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def save_checkpoint(model: FlowEstimator, path: str | os.PathLike) -> None:
    """Write magic, version, input channels, hyperparameters, then named tensors."""
    cfg = model.cfg
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, cfg.in_channels))
    hyper = {name: getattr(cfg, name) for name in _HYPER_FIELDS}
    hyper.update({f"width{i}": v for i, v in enumerate(cfg.widths)})
    hyper["kind"] = _KINDS[model.kind]
    hyper["mode"] = _MODE_CODES[getattr(model, "mode", "rgb")]
    buf.write(struct.pack("<I", len(hyper)))
    for name, value in hyper.items():
        _put_str(buf, name)
        buf.write(struct.pack("<q", int(value)))
    params = list(model.named_parameters())
    buf.write(struct.pack("<I", len(params)))
    for name, p in params:
        _put_str(buf, name)
        data = p.detach().cpu().numpy().astype("<f4")
        buf.write(struct.pack("<I", data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(data.tobytes(order="C"))
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, buf: bytes, path) -> None:
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        missing = self.pos + n - len(self.buf)
        if missing > 0:
            raise FormatError(f"{self.path}: truncated {what}, missing {missing} byte(s)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, what: str) -> str:
        (n,) = self.unpack("<H", what)
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self.path}: corrupt {what}") from exc


def load_checkpoint(path: str | os.PathLike) -> FlowEstimator:
    r = _Reader(Path(path).read_bytes(), path)
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version, in_channels = r.unpack("<II", "header")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    (count,) = r.unpack("<I", "hyperparameter count")
    hyper = {}
    for _ in range(count):
        name = r.string("hyperparameter name")
        (hyper[name],) = r.unpack("<q", "hyperparameter value")
    try:
        kind = {v: k for k, v in _KINDS.items()}[hyper.pop("kind")]
        mode = MODES[hyper.pop("mode")]
        widths = tuple(hyper.pop(f"width{i}") for i in range(3))
        cfg = ModelConfig(in_channels=in_channels, widths=widths, **{k: hyper[k] for k in _HYPER_FIELDS})
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: corrupt hyperparameter block ({exc})") from exc
    model: FlowEstimator = RaftModel(cfg) if kind == "base" else XRaftModel(cfg, mode=mode)
    expected = dict(model.named_parameters())
    (count,) = r.unpack("<I", "parameter count")
    if count != len(expected):
        raise FormatError(f"{path}: {count} parameters stored, model has {len(expected)}")
    with torch.no_grad():
        for _ in range(count):
            name = r.string("parameter name")
            (ndim,) = r.unpack("<I", f"rank of {name}")
            shape = r.unpack(f"<{ndim}I", f"shape of {name}")
            if name not in expected or tuple(expected[name].shape) != shape:
                raise FormatError(f"{path}: unexpected parameter {name} with shape {shape}")
            nbytes = 4 * int(np.prod(shape))
            data = np.frombuffer(r.take(nbytes, f"data of {name}"), dtype="<f4").reshape(shape)
            expected[name].copy_(torch.from_numpy(data.copy()))
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: {len(r.buf) - r.pos} trailing byte(s)")
    return model


def clone_model(model: FlowEstimator) -> FlowEstimator:
    return copy.deepcopy(model)


def frozen_copy(model: FlowEstimator) -> FlowEstimator:
    """Detached copy with every parameter frozen, for use as a teacher."""
    teacher = copy.deepcopy(model)
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


def parameter_snapshot(model: nn.Module, names: Iterable[str] | None = None) -> dict[str, bytes]:
    params = dict(model.named_parameters())
    keys = params.keys() if names is None else names
    return {k: params[k].detach().cpu().numpy().tobytes() for k in keys}


class FlowPredictor:
    """Runs a model on lists of cubes, choosing encoders from the cube tags.

    ``mode`` defaults to the model's own; a base model is fed ``"rgb"``
    unless told otherwise (``"bbb"`` gives the greyscale baseline).
    """

    def __init__(self, model: FlowEstimator, q: ColorMatrix, mode: str | None = None,
                 iterations: int | None = None, chunk: int = 16) -> None:
        self.model = model
        self.q = q
        self.mode = mode or getattr(model, "mode", "rgb")
        self.iterations = iterations
        self.chunk = chunk

    def prepare(self, cubes) -> Tensor:
        return torch.stack([prepare_input(E.as_engine(c.values), self.mode, self.q) for c in cubes])

    @torch.no_grad()
    def __call__(self, sources, targets) -> Tensor:
        if len(sources) != len(targets):
            raise ValueError(f"{len(sources)} sources but {len(targets)} targets")
        groups: dict[tuple, list[int]] = {}
        for i, (s, t) in enumerate(zip(sources, targets)):
            groups.setdefault((s.modality, t.modality), []).append(i)
        result: list[Tensor | None] = [None] * len(sources)
        for (sm, tm), idx in groups.items():
            for start in range(0, len(idx), self.chunk):
                part = idx[start : start + self.chunk]
                src = self.prepare([sources[i] for i in part])
                tgt = self.prepare([targets[i] for i in part])
                flows = self.model(src, tgt, sm, tm, self.iterations)[-1]
                for j, i in enumerate(part):
                    result[i] = flows[j]
        return torch.stack(result)
