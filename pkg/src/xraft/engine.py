"""Differentiable array kernels and the Adam optimizer.

Arrays are ``torch.Tensor`` objects; torch's autograd tape records every
kernel below and replays it in reverse on :func:`backward`. The kernels that
carry the flow method (bilinear sampling with zero padding, the dense
correlation volume, block pooling) are written here in terms of plain
gathers and arithmetic so their gradients follow from the recorded graph.

Randomness: parameter initialisation draws from ``torch.Generator``
(Mersenne Twister, seeded explicitly); synthetic data draws from
``numpy.random.Generator`` with the PCG64 bit generator. Results are
bit-reproducible for a fixed seed within one build and thread count.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor

_PRECISIONS = {"float32": torch.float32, "float64": torch.float64}


class ShapeError(ValueError):
    """Raised when array dimensions are incompatible with a kernel."""


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up where finite values are required."""


class ConfigError(ValueError):
    """Raised on invalid optimizer or engine configuration."""


def set_precision(name: str) -> None:
    """Switch the engine-wide scalar type (``"float32"`` or ``"float64"``)."""
    if name not in _PRECISIONS:
        raise ConfigError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    torch.set_default_dtype(_PRECISIONS[name])


def get_precision() -> str:
    dtype = torch.get_default_dtype()
    return "float64" if dtype == torch.float64 else "float32"


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


def configure_determinism(threads: int = 1) -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(threads)


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Copy ``data`` into a new tensor of the current engine precision."""
    out = torch.as_tensor(np.asarray(data), dtype=torch.get_default_dtype()).clone()
    out.requires_grad_(requires_grad)
    return out


def as_engine(t: Tensor) -> Tensor:
    """Cast to the engine precision without copying when already matching."""
    dtype = torch.get_default_dtype()
    return t if t.dtype == dtype else t.to(dtype)


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not torch.isfinite(t).all():
        bad = int((~torch.isfinite(t)).sum())
        raise NonFiniteError(f"{what} holds {bad} non-finite value(s)")
    return t


def _require_rank(t: Tensor, rank: int, name: str) -> None:
    if t.dim() != rank:
        raise ShapeError(f"{name} must have {rank} dimensions, got shape {tuple(t.shape)}")


def conv2d(
    input: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation of ``input[N,Cin,H,W]`` with ``weight[Cout,Cin,kh,kw]``."""
    _require_rank(input, 4, "conv2d input")
    _require_rank(weight, 4, "conv2d weight")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    n, cin, h, w = input.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d weight expects {wcin} input channels, input has {cin}")
    if bias is not None and tuple(bias.shape) != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {tuple(bias.shape)}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} does not fit padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    return F.conv2d(input, weight, bias, stride=stride, padding=padding)


def bilinear_sample(input: Tensor, coords: Tensor) -> Tensor:
    """Sample ``input[N,C,H,W]`` at absolute pixel positions ``coords[N,2,Ho,Wo]``.

    ``coords[:, 0]`` is x (column), ``coords[:, 1]`` is y (row). Corners that
    fall outside the image read as zero. Differentiable in both arguments.
    """
    _require_rank(input, 4, "bilinear_sample input")
    _require_rank(coords, 4, "bilinear_sample coords")
    n, c, h, w = input.shape
    if coords.shape[0] != n or coords.shape[1] != 2:
        raise ShapeError(
            f"coords must have shape ({n},2,Ho,Wo), got {tuple(coords.shape)}"
        )
    ho, wo = coords.shape[2:]
    x = coords[:, 0].reshape(n, 1, ho * wo)
    y = coords[:, 1].reshape(n, 1, ho * wo)
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    fx = x - x0
    fy = y - y0
    x0i = x0.long()
    y0i = y0.long()
    flat = input.reshape(n, c, h * w)

    def corner(xi: Tensor, yi: Tensor) -> Tensor:
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).expand(n, c, ho * wo)
        return torch.gather(flat, 2, idx) * inside.to(input.dtype)

    out = (
        corner(x0i, y0i) * ((1 - fx) * (1 - fy))
        + corner(x0i + 1, y0i) * (fx * (1 - fy))
        + corner(x0i, y0i + 1) * ((1 - fx) * fy)
        + corner(x0i + 1, y0i + 1) * (fx * fy)
    )
    return out.reshape(n, c, ho, wo)


def coords_grid(n: int, h: int, w: int, dtype: torch.dtype | None = None) -> Tensor:
    """Identity coordinate grid ``[N,2,H,W]`` with x in channel 0."""
    dtype = dtype or torch.get_default_dtype()
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij"
    )
    return torch.stack([xs, ys]).unsqueeze(0).expand(n, 2, h, w).clone()


def correlation_volume(f1: Tensor, f2: Tensor) -> Tensor:
    """All-pairs dot products ``[N,H,W,H,W]`` scaled by ``1/sqrt(D)``."""
    _require_rank(f1, 4, "correlation f1")
    if f1.shape != f2.shape:
        raise ShapeError(f"feature maps differ: {tuple(f1.shape)} vs {tuple(f2.shape)}")
    d = f1.shape[1]
    return torch.einsum("ndhw,ndyx->nhwyx", f1, f2) / math.sqrt(d)


def avg_pool2(input: Tensor) -> Tensor:
    """Mean over non-overlapping 2x2 blocks."""
    _require_rank(input, 4, "avg_pool2 input")
    n, c, h, w = input.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    return input.reshape(n, c, h // 2, 2, w // 2, 2).mean(dim=(3, 5))


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return a + b


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return a - b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return a * b


def relu(x: Tensor) -> Tensor:
    return torch.relu(x)


def tanh(x: Tensor) -> Tensor:
    return torch.tanh(x)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    shapes = [tuple(t.shape) for t in tensors]
    ref = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(s, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}")
    return torch.cat(list(tensors), dim=axis)


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear resize by an integer factor (corner-aligned)."""
    _require_rank(x, 4, "upsample input")
    h, w = x.shape[2:]
    return F.interpolate(x, size=(h * factor, w * factor), mode="bilinear", align_corners=True)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + eps)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as exc:
        raise ShapeError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast") from exc


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.numel() != 1 or loss.dim() > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ShapeError("loss was not produced by recorded differentiable operations")
    loss.reshape(()).backward()


@dataclass
class AdamState:
    learning_rate: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: list[Tensor] = field(default_factory=list)
    second_moment: list[Tensor] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must lie in [0,1), got {self.beta1}, {self.beta2}")


@torch.no_grad()
def adam_step(
    params: Sequence[Tensor], grads: Sequence[Tensor | None], state: AdamState
) -> tuple[Sequence[Tensor], AdamState]:
    """One bias-corrected Adam update, applied in place.

    Parameters whose gradient is ``None`` keep their value and moments.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.first_moment:
        state.first_moment = [torch.zeros_like(p) for p in params]
        state.second_moment = [torch.zeros_like(p) for p in params]
    elif len(state.first_moment) != len(params):
        raise ShapeError("optimizer state was built for a different parameter list")
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1**t
    c2 = 1 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {tuple(g.shape)} != param shape {tuple(p.shape)}")
        m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
        denom = (v / c2).sqrt_().add_(state.epsilon)
        p.addcdiv_(m / c1, denom, value=-state.learning_rate)
    return params, state


class Adam:
    """Thin stateful wrapper over :func:`adam_step` for a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], learning_rate: float = 5e-5, **kwargs) -> None:
        self.params = list(params)
        self.state = AdamState(learning_rate=learning_rate, **kwargs)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)
