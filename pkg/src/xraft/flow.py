"""Flow-field semantics: backward warping, composition, endpoint error, masks.

Conventions: a flow field is a tensor ``[N,2,H,W]`` in pixels where source
pixel ``(x, y)`` corresponds to target position ``(x + u, y + v)``; channel 0
is ``u``. Validity masks are boolean tensors ``[N,1,H,W]``.
"""

from __future__ import annotations

import torch

from .engine import ShapeError, Tensor, as_engine, bilinear_sample, coords_grid

DEFAULT_EPS_O = 8.0
DEFAULT_EPS_D = 0.07
DEFAULT_DISCREPANCY = 3.0


class EmptyMaskError(ValueError):
    """No supervisable pixels remain under the mask."""


def _check_flow(flow: Tensor, name: str = "flow") -> None:
    if flow.dim() != 4 or flow.shape[1] != 2:
        raise ShapeError(f"{name} must have shape [N,2,H,W], got {tuple(flow.shape)}")


def _check_same_grid(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape[0] != b.shape[0] or a.shape[-2:] != b.shape[-2:]:
        raise ShapeError(f"{what}: spatial shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")


def sample_positions(flow: Tensor) -> Tensor:
    """Absolute target coordinates ``grid + flow``."""
    n, _, h, w = flow.shape
    return coords_grid(n, h, w, dtype=flow.dtype) + flow


def warp(entity: Tensor, flow: Tensor) -> Tensor:
    """Pull ``entity`` back along ``flow``: ``out(p) = entity(p + flow(p))``."""
    _check_flow(flow)
    _check_same_grid(entity, flow, "warp")
    return bilinear_sample(entity, sample_positions(flow))


def compose(f_ab: Tensor, f_bc: Tensor) -> Tensor:
    """Chain flows a->b and b->c into a->c: ``f_ab + warp(f_bc, f_ab)``."""
    _check_flow(f_ab, "f_ab")
    _check_flow(f_bc, "f_bc")
    _check_same_grid(f_ab, f_bc, "compose")
    return f_ab + warp(f_bc, f_ab)


def endpoint_norms(f_pred: Tensor, f_ref: Tensor) -> Tensor:
    """Per-pixel Euclidean distance ``[N,1,H,W]``; gradient is zero where equal."""
    _check_flow(f_pred, "f_pred")
    _check_flow(f_ref, "f_ref")
    if f_pred.shape != f_ref.shape:
        raise ShapeError(f"epe: {tuple(f_pred.shape)} vs {tuple(f_ref.shape)}")
    return torch.linalg.vector_norm(f_pred - f_ref, dim=1, keepdim=True)


def epe(f_pred: Tensor, f_ref: Tensor, mask: Tensor | None = None) -> Tensor:
    """Mean endpoint error, optionally restricted to ``mask``."""
    norms = endpoint_norms(f_pred, f_ref)
    if mask is None:
        return norms.mean()
    mask = mask.expand_as(norms)
    count = int(mask.sum())
    if count == 0:
        raise EmptyMaskError("no supervisable pixels")
    return (norms * mask.to(norms.dtype)).sum() / count


def forward_backward_residual(f_ij: Tensor, f_ji: Tensor) -> Tensor:
    """``||f_ij + warp(f_ji, f_ij)||`` per pixel, zero for a consistent pair."""
    return torch.linalg.vector_norm(compose(f_ij, f_ji), dim=1, keepdim=True)


def occlusion_mask(f_ij: Tensor, f_ji: Tensor, eps_o: float = DEFAULT_EPS_O) -> Tensor:
    if eps_o <= 0:
        raise ValueError(f"eps_o must be positive, got {eps_o}")
    with torch.no_grad():
        return forward_backward_residual(f_ij, f_ji) <= eps_o


def discrepancy_mask(f_ij: Tensor, f_ji: Tensor, threshold: float = DEFAULT_DISCREPANCY) -> Tensor:
    """Forward-backward agreement within ``threshold`` pixels (for rendering)."""
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    return occlusion_mask(f_ij, f_ji, threshold)


def dark_mask(cube, eps_d: float = DEFAULT_EPS_D) -> Tensor:
    """Pixels whose mean over all bands exceeds ``eps_d``.

    ``cube`` is an :class:`~xraft.imaging.HsiCube`, a ``[C,H,W]`` tensor or a
    batch ``[N,C,H,W]``; the result is always batched ``[N,1,H,W]``.
    """
    if eps_d < 0:
        raise ValueError(f"eps_d must be non-negative, got {eps_d}")
    values = cube if isinstance(cube, torch.Tensor) else cube.values
    if values.dim() == 3:
        values = values.unsqueeze(0)
    return values.mean(dim=1, keepdim=True) > eps_d


def warp_mask(mask: Tensor, flow: Tensor) -> Tensor:
    """Warp a boolean mask: bilinear on 0/1 values, re-binarised at 0.5.

    Pixels whose sample position leaves the image are invalid.
    """
    with torch.no_grad():
        flow = flow.detach()
        pos = sample_positions(flow)
        h, w = flow.shape[-2:]
        inside = (
            (pos[:, :1] >= 0) & (pos[:, :1] <= w - 1) & (pos[:, 1:] >= 0) & (pos[:, 1:] <= h - 1)
        )
        sampled = bilinear_sample(mask.to(flow.dtype), pos)
        return (sampled >= 0.5) & inside


def combined_mask(
    m_ac: Tensor, m_ab: Tensor, m_bc: Tensor, m_db: Tensor, f_ab: Tensor
) -> Tensor:
    """Supervision mask in image-a space; ``m_bc`` and ``m_db`` live in image b."""
    for m in (m_ab, m_bc, m_db):
        _check_same_grid(m_ac, m, "combined_mask")
    _check_same_grid(m_ac, f_ab, "combined_mask")
    return m_ac & m_ab & warp_mask(m_bc & m_db, f_ab)


def zero_flow(n: int, h: int, w: int) -> Tensor:
    return torch.zeros(n, 2, h, w, dtype=torch.get_default_dtype())


def to_engine_flow(flow: Tensor) -> Tensor:
    """Batch an unbatched ``[2,H,W]`` field and cast to engine precision."""
    if flow.dim() == 3:
        flow = flow.unsqueeze(0)
    _check_flow(flow)
    return as_engine(flow)


def invert_flow(flow: Tensor, iterations: int = 50) -> Tensor:
    """Approximate inverse field by fixed-point iteration ``g = -warp(f, g)``.

    Exact where the deformation is smooth and stays inside the image; near
    borders the zero padding of ``warp`` biases the result.
    """
    with torch.no_grad():
        f = to_engine_flow(flow.detach()).to(torch.float64)
        g = -f
        for _ in range(iterations):
            g = -warp(f, g)
    return g if flow.dim() == 4 else g[0]
