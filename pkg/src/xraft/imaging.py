"""Hyperspectral cubes, colour conversion and synthetic cross-modal data."""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from . import fileio
from .engine import ShapeError, Tensor, as_engine

DEFAULT_BANDS = 10


class Modality(enum.IntEnum):
    WHITE = 0
    BLUE = 1

    @property
    def letter(self) -> str:
        return "W" if self is Modality.WHITE else "B"

    @classmethod
    def parse(cls, text: "str | Modality") -> "Modality":
        if isinstance(text, Modality):
            return text
        key = str(text).strip().lower()
        if key in ("w", "white"):
            return cls.WHITE
        if key in ("b", "blue"):
            return cls.BLUE
        raise ValueError(f"unknown modality {text!r}")


@dataclass
class HsiCube:
    """Band-first intensity stack ``[C,H,W]`` with its acquisition modality."""

    values: Tensor
    modality: Modality = Modality.WHITE

    def __post_init__(self) -> None:
        if not isinstance(self.values, torch.Tensor):
            self.values = torch.as_tensor(np.asarray(self.values, dtype=np.float32))
        if self.values.dim() != 3:
            raise ShapeError(f"cube must be [bands,H,W], got {tuple(self.values.shape)}")
        self.modality = Modality(self.modality)

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


def _lobe(lam: np.ndarray, mu: float, s_lo: float, s_hi: float) -> np.ndarray:
    s = np.where(lam < mu, s_lo, s_hi)
    return np.exp(-0.5 * ((lam - mu) / s) ** 2)


def band_centers(bands: int = DEFAULT_BANDS, lo: float = 400.0, hi: float = 700.0) -> np.ndarray:
    return np.linspace(lo, hi, bands)


@dataclass
class ColorMatrix:
    """Linear map ``[3,C]`` from band intensities to (R, G, B)."""

    q: np.ndarray

    def __post_init__(self) -> None:
        self.q = np.asarray(self.q, dtype=np.float64)
        if self.q.ndim != 2 or self.q.shape[0] != 3:
            raise ShapeError(f"colour matrix must be [3,C], got {self.q.shape}")

    @property
    def bands(self) -> int:
        return self.q.shape[1]

    @classmethod
    def default(cls, bands: int = DEFAULT_BANDS) -> "ColorMatrix":
        """Piecewise-Gaussian colour matching curves sampled at even band centres.

        Lobe parameters are the single-lobe fits of Wyman, Sloan and Shirley
        (2013) to the CIE 1931 observer; rows are scaled to unit sum. This
        is a stand-in for an unpublished camera calibration.
        """
        lam = band_centers(bands)
        red = 1.056 * _lobe(lam, 599.8, 37.9, 31.0) + 0.362 * _lobe(lam, 442.0, 16.0, 26.7) \
            - 0.065 * _lobe(lam, 501.1, 20.4, 26.2)
        green = 0.821 * _lobe(lam, 568.8, 46.9, 40.5) + 0.286 * _lobe(lam, 530.9, 16.3, 31.1)
        blue = 1.217 * _lobe(lam, 437.0, 11.8, 36.0) + 0.681 * _lobe(lam, 459.0, 26.0, 13.8)
        q = np.clip(np.stack([red, green, blue]), 0.0, None)
        return cls(q / q.sum(axis=1, keepdims=True))

    @classmethod
    def identity(cls) -> "ColorMatrix":
        return cls(np.eye(3))

    def tensor(self) -> Tensor:
        return torch.as_tensor(self.q, dtype=torch.get_default_dtype())


def _values(cube: "HsiCube | Tensor") -> Tensor:
    return cube.values if isinstance(cube, HsiCube) else cube


def to_rgb(cube: "HsiCube | Tensor", q: ColorMatrix) -> Tensor:
    """Apply ``q`` per pixel. Accepts ``[C,H,W]`` or batched ``[N,C,H,W]``; unclamped."""
    values = as_engine(_values(cube))
    band_axis = values.dim() - 3
    if values.shape[band_axis] != q.bands:
        raise ShapeError(f"cube has {values.shape[band_axis]} bands, colour matrix expects {q.bands}")
    return torch.tensordot(q.tensor(), values.movedim(band_axis, 0), dims=1).movedim(0, band_axis)


def to_bbb(rgb: Tensor) -> Tensor:
    """Replicate the blue channel into all three channels."""
    axis = rgb.dim() - 3
    if rgb.shape[axis] != 3:
        raise ShapeError(f"to_bbb expects 3 channels, got {rgb.shape[axis]}")
    blue = rgb.narrow(axis, 2, 1)
    return torch.cat([blue, blue, blue], dim=axis)


def channel_mean(cube: "HsiCube | Tensor") -> Tensor:
    values = _values(cube)
    return values.mean(dim=values.dim() - 3, keepdim=True)


def smooth_noise(rng: np.random.Generator, h: int, w: int, sigma: float) -> np.ndarray:
    """Gaussian-smoothed white noise rescaled to [0, 1]."""
    field_ = gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
    lo, hi = field_.min(), field_.max()
    return (field_ - lo) / (hi - lo) if hi > lo else np.zeros_like(field_)


def make_white_cube(
    rng: np.random.Generator,
    height: int,
    width: int,
    bands: int = DEFAULT_BANDS,
    textures: int = 4,
    scales: tuple[float, ...] = (1.0, 2.0, 4.0),
) -> HsiCube:
    """Procedural scene: a few multi-scale textures, each with its own spectral bump."""
    latent = []
    for _ in range(textures):
        weights = rng.uniform(0.5, 1.0, size=len(scales))
        t = sum(wt * smooth_noise(rng, height, width, s) for wt, s in zip(weights, scales))
        latent.append(t / weights.sum())
    band_pos = np.arange(bands)
    centers = rng.uniform(0, bands - 1, size=textures)
    widths = rng.uniform(1.0, 3.0, size=textures)
    profiles = np.exp(-0.5 * ((band_pos[:, None] - centers[None]) / widths[None]) ** 2)
    profiles = 0.1 + 0.9 * profiles
    cube = np.einsum("ck,khw->chw", profiles, np.stack(latent)) / profiles.sum(axis=1)[:, None, None]
    return HsiCube(torch.as_tensor(cube.astype(np.float32)), Modality.WHITE)


@dataclass
class ModalityRecipe:
    """How a synthetic blue-light cube is derived from a white-light one.

    ``mix`` is a ``[C,C]`` band-mixing matrix (``None`` keeps the bands);
    ``darkening`` is the ``(low, high)`` range of a smooth multiplicative
    field (``None`` disables it).
    """

    mix: np.ndarray | None = None
    attenuation: float = 1.0
    darkening: tuple[float, float] | None = None
    darkening_sigma: float = 12.0
    noise_sigma: float = 0.0
    seed: int = 0

    @classmethod
    def identity(cls) -> "ModalityRecipe":
        return cls()

    @classmethod
    def blue_light(
        cls,
        seed: int = 0,
        bands: int = DEFAULT_BANDS,
        attenuation: float = 0.3,
        darkening: tuple[float, float] = (0.2, 1.0),
        noise_sigma: float = 0.02,
    ) -> "ModalityRecipe":
        return cls(
            mix=default_blue_mix(bands, seed),
            attenuation=attenuation,
            darkening=darkening,
            noise_sigma=noise_sigma,
            seed=seed,
        )


def default_blue_mix(bands: int = DEFAULT_BANDS, seed: int = 0) -> np.ndarray:
    """Non-negative band mix from a random orthogonal matrix, weighted toward low bands.

    Rows are output bands. Each row sums to its low-band bias weight, and
    the weights average to one so overall brightness is preserved before
    attenuation.
    """
    rng = np.random.default_rng(np.random.PCG64(seed))
    orth, _ = np.linalg.qr(rng.standard_normal((bands, bands)))
    mix = np.abs(orth)
    mix /= mix.sum(axis=1, keepdims=True)
    bias = np.exp(-np.arange(bands) / (bands / 3))
    bias *= bands / bias.sum()
    return mix * bias[:, None]


def synth_modality(cube: HsiCube, recipe: ModalityRecipe) -> HsiCube:
    """Blue-light counterpart of a white cube with the same geometry.

    Steps: band mix, global attenuation, smooth darkening field, additive
    Gaussian noise, then clipping at zero (intensities cannot be negative).
    """
    values = cube.values.detach().cpu().numpy().astype(np.float64)
    bands, h, w = values.shape
    rng = np.random.default_rng(np.random.PCG64(recipe.seed))
    if recipe.mix is not None:
        mix = np.asarray(recipe.mix, dtype=np.float64)
        if mix.shape != (bands, bands):
            raise ShapeError(f"mix must be [{bands},{bands}], got {mix.shape}")
        values = np.einsum("oc,chw->ohw", mix, values)
    values = values * recipe.attenuation
    if recipe.darkening is not None:
        lo, hi = recipe.darkening
        values = values * (lo + (hi - lo) * smooth_noise(rng, h, w, recipe.darkening_sigma))
    if recipe.noise_sigma > 0:
        values = values + rng.normal(0.0, recipe.noise_sigma, size=values.shape)
        values = np.clip(values, 0.0, None)
    return HsiCube(torch.as_tensor(values.astype(np.float32)), Modality.BLUE)


def write_cube(cube: HsiCube, path: str | os.PathLike) -> None:
    fileio.write_cube_file(path, cube.values.detach().cpu().numpy(), int(cube.modality))


def read_cube(path: str | os.PathLike) -> HsiCube:
    values, modality = fileio.read_cube_file(path)
    return HsiCube(torch.from_numpy(values), Modality(modality))


def render_rgb(cube: HsiCube, q: ColorMatrix) -> np.ndarray:
    """``[3,H,W]`` float image clamped to [0, 1] for display."""
    rgb = to_rgb(cube, q).detach().cpu().numpy()
    return np.clip(rgb, 0.0, 1.0)
