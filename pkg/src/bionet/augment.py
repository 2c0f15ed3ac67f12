"""Random geometric augmentation applied identically to image and target."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import Sample


@dataclass(frozen=True)
class AugmentConfig:
    """Sampling ranges: rotation/shear in degrees (symmetric), shift as a
    fraction of the image side (symmetric), zoom as a magnification amount
    ``z`` in ``[0, zoom]`` (scale ``1 + z``)."""

    rotation: float = 15.0
    shift: float = 0.05
    shear: float = 5.0
    zoom: float = 0.2
    hflip: bool = True
    vflip: bool = True
    fill_mode: str = "nearest"

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(rotation=0.0, shift=0.0, shear=0.0, zoom=0.0, hflip=False, vflip=False)


@dataclass(frozen=True)
class AugmentParams:
    rotation: float
    shift_y: float
    shift_x: float
    shear: float
    zoom: float
    hflip: bool
    vflip: bool


def sample_params(cfg: AugmentConfig, rng: np.random.Generator) -> AugmentParams:
    # a fixed number of draws per call keeps streams aligned across configs
    u = rng.uniform(-1.0, 1.0, size=4)
    z = rng.uniform(0.0, 1.0)
    flips = rng.random(2) < 0.5
    return AugmentParams(
        rotation=float(u[0] * cfg.rotation),
        shift_y=float(u[1] * cfg.shift),
        shift_x=float(u[2] * cfg.shift),
        shear=float(u[3] * cfg.shear),
        zoom=float(z * cfg.zoom),
        hflip=bool(flips[0] and cfg.hflip),
        vflip=bool(flips[1] and cfg.vflip),
    )


def affine_matrix(p: AugmentParams, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Output->input ``(matrix, offset)`` in (row, col) coordinates for scipy."""
    h, w = shape
    th, sh = math.radians(p.rotation), math.radians(p.shear)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    shear = np.array([[1.0, 0.0], [math.tan(sh), 1.0]])
    forward = rot @ shear * (1.0 + p.zoom)
    matrix = np.linalg.inv(forward)
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    shift = np.array([p.shift_y * h, p.shift_x * w])
    offset = centre - matrix @ (centre + shift)
    return matrix, offset


def _warp(a: np.ndarray, matrix, offset, order: int, mode: str) -> np.ndarray:
    if a.ndim == 2:
        return ndimage.affine_transform(a, matrix, offset, order=order, mode=mode)
    return np.stack([ndimage.affine_transform(c, matrix, offset, order=order, mode=mode) for c in a])


def apply_params(sample: Sample, p: AugmentParams, fill_mode: str = "nearest") -> Sample:
    image, target = sample.image, sample.target
    h, w = image.shape[-2:]
    matrix, offset = affine_matrix(p, (h, w))
    if not (np.allclose(matrix, np.eye(2), rtol=0, atol=1e-12) and np.allclose(offset, 0, rtol=0, atol=1e-9)):
        image = _warp(image, matrix, offset, 1, fill_mode)
        if sample.task == "segmentation":
            target = _warp(target, matrix, offset, 0, fill_mode)
        else:
            scale = target.shape[-1] // w
            tm, to = affine_matrix(p, target.shape[-2:]) if scale != 1 else (matrix, offset)
            target = _warp(target, tm, to, 1, fill_mode)
    if p.hflip:
        image, target = image[..., ::-1], target[..., ::-1]
    if p.vflip:
        image, target = image[..., ::-1, :], target[..., ::-1, :]
    return Sample(np.ascontiguousarray(image), np.ascontiguousarray(target), sample.id, sample.task)


def augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Draw one set of parameters from ``cfg`` and warp image and target with it.

    Images are interpolated bilinearly, masks by nearest neighbour; flips are
    exact array reversals.
    """
    return apply_params(sample, sample_params(cfg, rng), cfg.fill_mode)
