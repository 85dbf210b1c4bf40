"""Degradation models, paired-image loading, patch sampling and augmentation."""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import cv2
import numpy as np

from . import ops
from .model import DIHEDRAL_GROUP, dihedral
from .tensor import ShapeError, Tensor, no_grad

KINDS = ("BI", "BD", "DN")
IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm")


@dataclass
class DegradationSpec:
    kind: str = "BI"
    scale: int = 2
    blur_kernel_size: int = 7
    blur_sigma: float = 1.6
    noise_level: float = 30.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown degradation {self.kind!r}; choose from {KINDS}")
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        if self.blur_kernel_size < 1 or self.blur_kernel_size % 2 == 0:
            raise ValueError("blur_kernel_size must be a positive odd integer")
        if self.blur_sigma <= 0 or self.noise_level < 0:
            raise ValueError("blur_sigma must be > 0 and noise_level >= 0")

    @classmethod
    def bi(cls, scale: int = 2, seed: int = 0) -> "DegradationSpec":
        return cls("BI", scale=scale, seed=seed)

    @classmethod
    def bd(cls, seed: int = 0) -> "DegradationSpec":
        return cls("BD", scale=3, blur_kernel_size=7, blur_sigma=1.6, seed=seed)

    @classmethod
    def dn(cls, noise_level: float = 30.0, seed: int = 0) -> "DegradationSpec":
        return cls("DN", scale=3, noise_level=noise_level, seed=seed)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown degradation keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PairedSample:
    lq: Tensor
    hq: Tensor
    id: str


# ---------------------------------------------------------------------------
# degradation


def gaussian_kernel(size: int = 7, sigma: float = 1.6) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, size: int = 7, sigma: float = 1.6) -> np.ndarray:
    """Filter the last two axes with a normalised Gaussian, reflect padding."""
    k = gaussian_kernel(size, sigma)
    p = size // 2
    pad = [(0, 0)] * (img.ndim - 2) + [(p, p), (p, p)]
    xp = np.pad(img.astype(np.float64), pad, mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(xp, (size, size), axis=(-2, -1))
    return np.einsum("...ij,ij->...", win, k)


def sample_rng(seed: int, sample_id: str = "") -> np.random.Generator:
    """Per-sample generator derived from (seed, id)."""
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(sample_id.encode())])


def _down(img: np.ndarray, scale: int) -> np.ndarray:
    with no_grad():
        return ops.bicubic_resize(Tensor(img), 1 / scale if scale > 1 else 1).data


def degrade(hq: Tensor, spec: DegradationSpec, sample_id: str = "") -> Tensor:
    """Synthesise a low-quality observation of `hq` (N x C x H x W in [0, 1])."""
    data = np.asarray(hq.data if isinstance(hq, Tensor) else hq, dtype=np.float64)
    if data.ndim != 4:
        raise ShapeError(f"degrade expects N x C x H x W, got {data.shape}")
    h, w = data.shape[2:]
    if h % spec.scale or w % spec.scale:
        raise ShapeError(f"image {h}x{w} not divisible by scale {spec.scale}")
    if spec.kind == "BI":
        lq = _down(data, spec.scale)
    elif spec.kind == "BD":
        lq = _down(gaussian_blur(data, spec.blur_kernel_size, spec.blur_sigma), spec.scale)
    else:
        lq = _down(data, spec.scale)
        noise = sample_rng(spec.seed, sample_id).standard_normal(lq.shape)
        lq = lq + noise * (spec.noise_level / 255.0)
    return Tensor(np.clip(lq, 0.0, 1.0))


# ---------------------------------------------------------------------------
# colour


def rgb_to_y(img: Tensor | np.ndarray) -> np.ndarray:
    """BT.601 studio-swing luma of RGB data in [0, 1]; result in [16/255, 235/255]."""
    data = img.data if isinstance(img, Tensor) else np.asarray(img)
    if data.ndim != 4 or data.shape[1] != 3:
        raise ShapeError(f"rgb_to_y needs N x 3 x H x W, got {data.shape}")
    r, g, b = data[:, 0:1], data[:, 1:2], data[:, 2:3]
    return (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0


# ---------------------------------------------------------------------------
# patches and augmentation


def _scale_of(pair: PairedSample) -> int:
    lh, lw = pair.lq.shape[2:]
    hh, hw = pair.hq.shape[2:]
    if hh % lh or hw % lw or hh // lh != hw // lw:
        raise ShapeError(f"misaligned pair {pair.id}: lq {pair.lq.shape} vs hq {pair.hq.shape}")
    return hh // lh


def sample_patch(pair: PairedSample, lq_size: int, rng: np.random.Generator) -> PairedSample:
    """Aligned random crop: lq_size^2 from lq, (scale*lq_size)^2 from hq."""
    s = _scale_of(pair)
    lh, lw = pair.lq.shape[2:]
    if lh < lq_size or lw < lq_size:
        raise ShapeError(f"image {pair.id} ({lh}x{lw}) smaller than patch {lq_size}")
    y = int(rng.integers(0, lh - lq_size + 1))
    x = int(rng.integers(0, lw - lq_size + 1))
    lq = pair.lq.data[:, :, y:y + lq_size, x:x + lq_size]
    hq = pair.hq.data[:, :, s * y:s * (y + lq_size), s * x:s * (x + lq_size)]
    return PairedSample(Tensor(lq.copy()), Tensor(hq.copy()), pair.id)


def apply_dihedral(pair: PairedSample, k: int, flip: bool) -> PairedSample:
    return PairedSample(
        Tensor(np.ascontiguousarray(dihedral(pair.lq.data, k, flip))),
        Tensor(np.ascontiguousarray(dihedral(pair.hq.data, k, flip))),
        pair.id,
    )


def augment(pair: PairedSample, rng: np.random.Generator) -> PairedSample:
    """Apply one uniformly drawn flip/rotation to both images."""
    k, flip = DIHEDRAL_GROUP[int(rng.integers(0, len(DIHEDRAL_GROUP)))]
    return apply_dihedral(pair, k, flip)


# ---------------------------------------------------------------------------
# image I/O


def read_image(path: str | Path) -> Tensor:
    """Load 8/16-bit PNG or binary PPM/PGM as a 1 x C x H x W tensor in [0, 1]."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FileNotFoundError(f"cannot read image {path}")
    if img.dtype == np.uint8:
        maxval = 255.0
    elif img.dtype == np.uint16:
        maxval = 65535.0
    else:
        raise ValueError(f"unsupported pixel type {img.dtype} in {path}")
    if img.ndim == 2:
        img = img[:, :, None]
    elif img.shape[2] == 4:
        img = img[:, :, :3]
    if img.shape[2] == 3:
        img = img[:, :, ::-1]  # BGR -> RGB
    arr = img.astype(np.float64).transpose(2, 0, 1)[None] / maxval
    return Tensor(np.ascontiguousarray(arr))


def write_image(path: str | Path, img: Tensor | np.ndarray, bits: int = 8) -> None:
    """Write the first image of a batch, clipped to [0, 1] and rounded."""
    data = img.data if isinstance(img, Tensor) else np.asarray(img)
    if data.ndim == 4:
        data = data[0]
    maxval, dtype = (255.0, np.uint8) if bits == 8 else (65535.0, np.uint16)
    q = np.round(np.clip(data, 0.0, 1.0) * maxval).astype(dtype).transpose(1, 2, 0)
    if q.shape[2] == 3:
        q = q[:, :, ::-1]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), np.ascontiguousarray(q)):
        raise OSError(f"failed to write {path}")


def list_images(directory: str | Path) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"no such directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _as_rgb(t: Tensor) -> Tensor:
    if t.shape[1] == 1:
        return Tensor(np.repeat(t.data, 3, axis=1))
    return t


def load_pairs(root: str | Path, spec: DegradationSpec | None = None, crop_to_scale: bool = True) -> list[PairedSample]:
    """Load `root/hq/*` and either `root/lq/*` (matched by file name) or synthesise lq with `spec`.

    Grayscale files are replicated to three channels.
    """
    root = Path(root)
    hq_files = list_images(root / "hq")
    if not hq_files:
        raise FileNotFoundError(f"no images in {root / 'hq'}")
    lq_dir = root / "lq"
    pairs = []
    for f in hq_files:
        hq = _as_rgb(read_image(f))
        if lq_dir.is_dir():
            lq_path = lq_dir / f.name
            if not lq_path.exists():
                raise FileNotFoundError(f"missing lq counterpart {lq_path}")
            lq = _as_rgb(read_image(lq_path))
        else:
            if spec is None:
                raise ValueError(f"{root} has no lq/ directory and no degradation spec was given")
            if crop_to_scale:
                h, w = hq.shape[2:]
                hq = Tensor(hq.data[:, :, : h - h % spec.scale, : w - w % spec.scale].copy())
            lq = degrade(hq, spec, sample_id=f.stem)
        pairs.append(PairedSample(lq, hq, f.stem))
    return pairs


# ---------------------------------------------------------------------------
# synthetic images for desk-scale experiments


def synthetic_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Flat-shaded rectangles and discs over two faint gratings, 1 x 3 x size x size.

    Hard edges keep bicubic upsampling honest (about 32 dB at x2), so a
    restoration model has to learn something to beat it.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.empty((3, size, size))
    img[:] = rng.uniform(0.2, 0.8, size=3)[:, None, None]
    for _ in range(2):
        f = rng.uniform(0.05, 0.2)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * f * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        img += rng.uniform(0.03, 0.1, size=3)[:, None, None] * wave[None]
    for _ in range(rng.integers(4, 8)):
        colour = rng.uniform(0, 1, size=3)
        if rng.random() < 0.5:
            y0, x0 = rng.integers(0, size - 8, 2)
            h, w = rng.integers(6, 28, 2)
            mask = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
        else:
            cy, cx = rng.uniform(0, size, 2)
            r = rng.uniform(4, 16)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        img[:, mask] = colour[:, None]
    return np.clip(img, 0.0, 1.0)[None]


def synthetic_pairs(n: int, hq_size: int, spec: DegradationSpec, seed: int = 0) -> list[PairedSample]:
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        hq = Tensor(synthetic_image(rng, hq_size))
        sid = f"synth{i:03d}"
        pairs.append(PairedSample(degrade(hq, spec, sample_id=sid), hq, sid))
    return pairs


__all__ = [
    "DegradationSpec",
    "PairedSample",
    "degrade",
    "gaussian_kernel",
    "gaussian_blur",
    "rgb_to_y",
    "sample_patch",
    "augment",
    "apply_dihedral",
    "read_image",
    "write_image",
    "list_images",
    "load_pairs",
    "synthetic_image",
    "synthetic_pairs",
    "sample_rng",
]
