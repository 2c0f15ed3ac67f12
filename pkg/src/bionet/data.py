"""Samples, manifests, corner patches, super-resolution pairs and synthetic blobs.

Images are ``(C, H, W)`` float32 arrays in [0, 1]; segmentation targets are
``(H, W)`` integer class maps, super-resolution targets ``(C, H, W)`` images.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import DataError, DataIOError, ShapeError
from .seeding import substream

TASKS = ("segmentation", "superres")
MASK_THRESHOLD = 128


@dataclass
class Sample:
    image: np.ndarray
    target: np.ndarray
    id: str = ""
    task: str = "segmentation"

    def __post_init__(self):
        if self.task not in TASKS:
            raise DataError(f"unknown task {self.task!r}")
        if self.image.ndim != 3:
            raise ShapeError(f"sample image must be (C, H, W), got {self.image.shape}")
        h, w = self.image.shape[1:]
        if self.task == "segmentation":
            if self.target.shape != (h, w):
                raise DataError(f"{self.id}: mask {self.target.shape} does not match image {h}x{w}")
        else:
            th, tw = self.target.shape[-2:]
            if th % h or tw % w or th // h != tw // w:
                raise DataError(f"{self.id}: target {th}x{tw} is not a scale multiple of image {h}x{w}")


# --------------------------------------------------------------------------
# files


def read_png(path: str | os.PathLike) -> np.ndarray:
    """8-bit grayscale or RGB image as a ``(C, H, W)`` uint8 array."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataIOError(f"cannot read image {path}: {exc}") from exc
    if arr.dtype != np.uint8:
        raise DataError(f"{path}: expected an 8-bit image, got {arr.dtype}")
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def write_png(path: str | os.PathLike, arr: np.ndarray) -> None:
    """Write ``(H, W)`` or ``(C, H, W)`` uint8 data; C in {1, 3}."""
    arr = np.asarray(arr)
    if arr.ndim == 3:
        arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    try:
        Image.fromarray(np.ascontiguousarray(arr, dtype=np.uint8)).save(path, format="PNG")
    except OSError as exc:
        raise DataIOError(f"cannot write image {path}: {exc}") from exc


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def binarize_mask(raw: np.ndarray, strict: bool = True, source: str = "mask") -> np.ndarray:
    """Map an 8-bit mask to {0, 1}.

    ``strict`` rejects anything but 0/255; otherwise pixels >= 128 are foreground.
    """
    if strict:
        bad = ~np.isin(raw, (0, 255))
        if bad.any():
            raise DataError(f"{source}: mask values outside {{0, 255}}: {np.unique(raw[bad])[:5].tolist()}")
    return (raw >= MASK_THRESHOLD).astype(np.int64)


def load_sample(
    path_image: str | os.PathLike,
    path_target: str | os.PathLike,
    task: str = "segmentation",
    sample_id: str | None = None,
    strict: bool = True,
    sr_factor: int = 2,
) -> Sample:
    """Load an image/target pair.

    For ``superres`` the target is the high-resolution image. When the input
    path equals the target path the low-resolution input is synthesized with
    :func:`make_sr_pair`; a smaller input image is nearest-upsampled to the
    target size.
    """
    sid = sample_id or Path(path_image).stem
    img = read_png(path_image)
    if task == "segmentation":
        raw = read_png(path_target)
        if raw.shape[0] != 1:
            raise DataError(f"{path_target}: mask must be single-channel")
        if raw.shape[1:] != img.shape[1:]:
            raise DataError(f"{sid}: image {img.shape[1:]} and mask {raw.shape[1:]} sizes differ")
        mask = binarize_mask(raw[0], strict=strict, source=str(path_target))
        return Sample(img.astype(np.float32) / 255.0, mask, sid, task)
    if task == "superres":
        hr = read_png(path_target).astype(np.float32) / 255.0
        if Path(path_image) == Path(path_target):
            lr, _ = make_sr_pair(hr, sr_factor)
            return Sample(upsample_nearest(lr, sr_factor), hr, sid, task)
        x = img.astype(np.float32) / 255.0
        if x.shape[1] != hr.shape[1]:
            factor = hr.shape[1] // x.shape[1]
            if factor * x.shape[1] != hr.shape[1]:
                raise DataError(f"{sid}: input {x.shape[1:]} is not a scale divisor of target {hr.shape[1:]}")
            x = upsample_nearest(x, factor)
        return Sample(x, hr, sid, task)
    raise DataError(f"unknown task {task!r}")


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    image_path: str
    target_path: str
    split: str = "train"
    task: str = "segmentation"


class Manifest:
    """Ordered dataset listing: ``id<TAB>image<TAB>target<TAB>split<TAB>task`` per line.

    Relative paths resolve against the manifest's directory.
    """

    def __init__(self, records: Iterable[ManifestRecord], root: str | os.PathLike = "."):
        self.records = list(records)
        self.root = Path(root)
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise DataError(f"duplicate sample id {r.id!r} in manifest")
            seen.add(r.id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.root / path

    def split(self, name: str | None) -> "Manifest":
        if name is None:
            return self
        return Manifest([r for r in self.records if r.split == name], self.root)

    @classmethod
    def read(cls, path: str | os.PathLike) -> "Manifest":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise DataIOError(f"cannot read manifest {path}: {exc}") from exc
        records = []
        for n, line in enumerate(text.splitlines(), start=1):
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 5:
                raise DataError(f"{path}:{n}: expected 5 tab-separated fields, got {len(fields)}")
            records.append(ManifestRecord(*fields))
        return cls(records, path.parent)

    def write(self, path: str | os.PathLike) -> None:
        lines = [f"{r.id}\t{r.image_path}\t{r.target_path}\t{r.split}\t{r.task}" for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def load_samples(self, strict: bool = True) -> list[Sample]:
        samples = []
        for r in self.records:
            img, tgt = self.resolve(r.image_path), self.resolve(r.target_path)
            for p in (img, tgt):
                if not p.exists():
                    raise DataIOError(f"manifest entry {r.id!r}: file {p} does not exist")
            samples.append(load_sample(img, tgt, r.task, r.id, strict=strict))
        return samples


# --------------------------------------------------------------------------
# transforms


def corner_anchors(h: int, w: int, patch: int) -> list[tuple[int, int]]:
    return [(0, 0), (0, w - patch), (h - patch, 0), (h - patch, w - patch)]


def extract_corner_patches(image: np.ndarray, mask: np.ndarray, patch: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Four ``patch x patch`` crops anchored at the image corners (row-major order)."""
    h, w = image.shape[-2:]
    if mask.shape[-2:] != (h, w):
        raise ShapeError(f"image {h}x{w} and mask {mask.shape[-2:]} sizes differ")
    if patch < 1 or patch > h or patch > w:
        raise ShapeError(f"patch {patch} does not fit in a {h}x{w} image")
    return [
        (image[..., r:r + patch, c:c + patch].copy(), mask[..., r:r + patch, c:c + patch].copy())
        for r, c in corner_anchors(h, w, patch)
    ]


def corner_patch_samples(sample: Sample, patch: int) -> list[Sample]:
    pieces = extract_corner_patches(sample.image, sample.target, patch)
    return [Sample(img, tgt, f"{sample.id}_c{i}", sample.task) for i, (img, tgt) in enumerate(pieces)]


def make_sr_pair(hr: np.ndarray, factor: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Box-filter downsample ``hr`` by ``factor``; returns ``(lr, hr)``."""
    if factor < 1:
        raise ShapeError(f"factor must be >= 1, got {factor}")
    *lead, h, w = hr.shape
    if h % factor or w % factor:
        raise ShapeError(f"image {h}x{w} is not divisible by factor {factor}")
    blocks = hr.reshape(*lead, h // factor, factor, w // factor, factor)
    lr = blocks.mean(axis=(-3, -1), dtype=np.float64).astype(hr.dtype)
    return lr, hr


def upsample_nearest(image: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(image, factor, axis=-2), factor, axis=-1)


# --------------------------------------------------------------------------
# synthetic data

BLOB_BACKGROUND = 0.2
BLOB_FOREGROUND = 0.7


def synth_blobs(n: int, size: int, seed: int = 0, noise: float = 0.05) -> list[Sample]:
    """``n`` single-channel images with 3-8 bright ellipses on a dark background.

    Masks are the exact ellipse interiors. Semi-axes lie in
    ``[size/16, size/7]`` so eight disjoint ellipses cover at most ~51% of
    the image.
    """
    rng = substream(seed, "data")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    samples = []
    for i in range(n):
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(3, 9))):
            cy, cx = rng.uniform(0, size - 1, size=2)
            ay, ax = rng.uniform(max(1.5, size / 16), max(1.5, size / 7), size=2)
            theta = rng.uniform(0, np.pi)
            dy, dx = yy - round(cy), xx - round(cx)
            u = dx * np.cos(theta) + dy * np.sin(theta)
            v = -dx * np.sin(theta) + dy * np.cos(theta)
            mask |= (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
        image = np.where(mask, BLOB_FOREGROUND, BLOB_BACKGROUND)
        if noise > 0:
            image = image + rng.normal(0.0, noise, size=image.shape)
        image = np.clip(image, 0.0, 1.0).astype(np.float32)[None]
        samples.append(Sample(image, mask.astype(np.int64), f"blob{i:04d}"))
    return samples


def materialize(
    samples: Sequence[Sample], outdir: str | os.PathLike, split: str = "train", name: str = "manifest.tsv"
) -> Manifest:
    """Write samples as 8-bit PNG pairs plus a manifest; returns the manifest."""
    outdir = Path(outdir)
    try:
        (outdir / "images").mkdir(parents=True, exist_ok=True)
        (outdir / "targets").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create {outdir}: {exc}") from exc
    records = []
    for s in samples:
        img_rel = f"images/{s.id}.png"
        tgt_rel = f"targets/{s.id}.png"
        write_png(outdir / img_rel, to_uint8(s.image))
        if s.task == "segmentation":
            write_png(outdir / tgt_rel, (s.target > 0).astype(np.uint8) * 255)
        else:
            write_png(outdir / tgt_rel, to_uint8(s.target))
        records.append(ManifestRecord(s.id, img_rel, tgt_rel, split, s.task))
    manifest = Manifest(records, outdir)
    manifest.write(outdir / name)
    return manifest
