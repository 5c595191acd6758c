"""Image/mask ingestion, patch extraction, seeded patch sampling and a
synthetic fundus-like domain pair generator."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .nn_core import rng_for

IMAGE_EXTS = (".png", ".ppm", ".pgm", ".pnm")
PATCH_MAGIC = b"DASAPD1\n"


class ImageFormatError(ValueError):
    pass


@dataclass
class RasterImage:
    """Pixels as an (height, width, channels) float array in [0, 1]."""

    pixels: np.ndarray
    name: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"pixels must be HxW, HxWx1 or HxWx3, got {px.shape}")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass
class PatchDataset:
    patches: np.ndarray  # (N, K)
    labels: Optional[np.ndarray] = None
    source_tag: str = ""
    seed: int = 0
    origins: Optional[np.ndarray] = None  # (N, 3): image index, x, y

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=np.float64)
        if self.patches.ndim != 2:
            raise ValueError("patches must be a 2-D (N, K) array")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.patches):
                raise ValueError(f"{len(self.labels)} labels for {len(self.patches)} patches")

    @property
    def patch_dim(self) -> int:
        return self.patches.shape[1]

    def __len__(self):
        return len(self.patches)


@dataclass(frozen=True)
class ShiftSpec:
    channel_gain: tuple = (1.0, 1.0, 1.0)
    channel_bias: tuple = (0.0, 0.0, 0.0)
    noise_sigma: float = 0.0

    def __post_init__(self):
        if len(self.channel_gain) != 3 or len(self.channel_bias) != 3:
            raise ValueError("channel_gain and channel_bias need 3 entries")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    def is_identity(self) -> bool:
        return (
            tuple(self.channel_gain) == (1.0, 1.0, 1.0)
            and tuple(self.channel_bias) == (0.0, 0.0, 0.0)
            and self.noise_sigma == 0.0
        )


# ---------------------------------------------------------------- image I/O

def _read_netpbm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: truncated netpbm header")
        tokens.append(raw[start:pos])
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: only binary PGM (P5) / PPM (P6) are supported, got {magic!r}")
    width, height, maxval = (int(t) for t in tokens[1:])
    pos += 1  # single whitespace before raster
    channels = 3 if magic == b"P6" else 1
    dtype = ">u1" if maxval < 256 else ">u2"
    count = width * height * channels
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    return data.reshape(height, width, channels).astype(np.float64) / maxval


def load_image(path) -> RasterImage:
    """Load a PNG or binary PPM/PGM into [0, 1] floats (RGBA drops alpha)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if not path.is_file():
        raise ImageFormatError(f"{path}: no such file (expected one of {', '.join(IMAGE_EXTS)})")
    try:
        if suffix in (".ppm", ".pgm", ".pnm"):
            px = _read_netpbm(path)
        elif suffix == ".png":
            from PIL import Image

            with Image.open(path) as im:
                if im.mode in ("I;16", "I;16B", "I"):
                    px = np.asarray(im, dtype=np.float64) / 65535.0
                elif im.mode in ("1", "L", "LA"):
                    px = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
                else:
                    px = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        else:
            raise ImageFormatError(
                f"{path}: unsupported image format {suffix!r}; expected one of {', '.join(IMAGE_EXTS)}"
            )
    except ImageFormatError:
        raise
    except Exception as exc:
        raise ImageFormatError(
            f"{path}: could not decode image ({exc}); expected one of {', '.join(IMAGE_EXTS)}"
        ) from exc
    return RasterImage(px, name=path.stem)


def save_image(img, path, bit_depth: int = 8) -> None:
    """Write binary PGM/PPM (by channel count) at 8 or 16 bits per sample."""
    px = img.pixels if isinstance(img, RasterImage) else RasterImage(img).pixels
    if bit_depth not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    maxval = 255 if bit_depth == 8 else 65535
    q = np.rint(np.clip(px, 0.0, 1.0) * maxval).astype(">u1" if bit_depth == 8 else ">u2")
    magic = "P6" if px.shape[2] == 3 else "P5"
    header = f"{magic}\n{px.shape[1]} {px.shape[0]}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + q.tobytes())


def load_mask(path) -> np.ndarray:
    """Binary (H, W) mask: any pixel above half intensity is foreground."""
    px = load_image(path).pixels
    return (px.mean(axis=2) > 0.5).astype(np.uint8)


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTS)


@dataclass
class LabeledImage:
    image: RasterImage
    mask: Optional[np.ndarray] = None
    fov: Optional[np.ndarray] = None
    name: str = ""


def load_dataset_dir(root) -> list[LabeledImage]:
    """Read ``<root>/images``, ``<root>/masks`` and optional ``<root>/fov``,
    pairing files by stem, in filename order."""
    root = Path(root)
    img_dir = root / "images"
    if not img_dir.is_dir():
        raise FileNotFoundError(f"{root}: expected an images/ subdirectory")

    def by_stem(sub):
        d = root / sub
        return {p.stem: p for p in list_images(d)} if d.is_dir() else {}

    masks, fovs = by_stem("masks"), by_stem("fov")
    out = []
    for p in list_images(img_dir):
        mask = load_mask(masks[p.stem]) if p.stem in masks else None
        fov = load_mask(fovs[p.stem]) if p.stem in fovs else None
        out.append(LabeledImage(load_image(p), mask, fov, p.stem))
    if not out:
        raise FileNotFoundError(f"{img_dir}: no images found ({', '.join(IMAGE_EXTS)})")
    return out


# ---------------------------------------------------------------- patches

def valid_centers(height: int, width: int, side: int, fov=None) -> np.ndarray:
    """(x, y) centers whose side x side window lies inside the image and,
    if ``fov`` is given, whose center pixel is inside the field of view."""
    h = side // 2
    ys, xs = np.mgrid[h:max(height - h, h), h:max(width - h, h)]
    xs, ys = xs.ravel(), ys.ravel()
    if fov is not None:
        keep = np.asarray(fov, dtype=bool)[ys, xs]
        xs, ys = xs[keep], ys[keep]
    return np.stack([xs, ys], axis=1)


def _check_side(side):
    if side < 1 or side % 2 == 0:
        raise ValueError(f"patch side must be a positive odd number, got {side}")


def extract_patch(img: RasterImage, center, side: int) -> np.ndarray:
    """Flattened side x side window around (x, y): rows, then columns, then channels."""
    _check_side(side)
    x, y = center
    h = side // 2
    if x - h < 0 or y - h < 0 or x + h >= img.width or y + h >= img.height:
        raise ValueError(
            f"{side}x{side} window at (x={x}, y={y}) overflows {img.width}x{img.height} image"
        )
    return img.pixels[y - h:y + h + 1, x - h:x + h + 1, :].reshape(-1).copy()


def extract_patches(img: RasterImage, centers: np.ndarray, side: int) -> np.ndarray:
    """Vectorised :func:`extract_patch` over an (N, 2) array of centers."""
    _check_side(side)
    h = side // 2
    # windows: (H-s+1, W-s+1, C, s, s) -> (..., s, s, C)
    win = sliding_window_view(img.pixels, (side, side), axis=(0, 1))
    centers = np.asarray(centers)
    sel = win[centers[:, 1] - h, centers[:, 0] - h]
    return np.ascontiguousarray(sel.transpose(0, 2, 3, 1)).reshape(len(centers), -1)


def _as_labeled(item) -> LabeledImage:
    if isinstance(item, LabeledImage):
        return item
    if isinstance(item, RasterImage):
        return LabeledImage(item)
    img, *rest = item
    mask = rest[0] if rest else None
    fov = rest[1] if len(rest) > 1 else None
    return LabeledImage(img, mask, fov, img.name)


def sample_patches(images: Sequence, fraction: float, side: int, seed: int,
                   source_tag: str = "") -> PatchDataset:
    """Sample floor(fraction * #valid centers) patches per image, uniformly
    without replacement. Labels are the mask value at each patch center."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    chunks, labels, origins = [], [], []
    items = [_as_labeled(it) for it in images]
    have_masks = bool(items) and all(it.mask is not None for it in items)
    for i, it in enumerate(items):
        centers = valid_centers(it.image.height, it.image.width, side, it.fov)
        if len(centers) == 0:
            raise ValueError(f"image {i} ({it.name or 'unnamed'}) has no valid {side}x{side} centers")
        count = int(np.floor(fraction * len(centers)))
        pick = np.sort(rng_for(seed, i).choice(len(centers), size=count, replace=False))
        c = centers[pick]
        chunks.append(extract_patches(it.image, c, side))
        if have_masks:
            labels.append(np.asarray(it.mask)[c[:, 1], c[:, 0]].astype(np.int64))
        origins.append(np.column_stack([np.full(len(c), i), c]))
    if not chunks:
        raise ValueError("sample_patches needs at least one image")
    return PatchDataset(
        np.concatenate(chunks),
        np.concatenate(labels) if have_masks else None,
        source_tag,
        seed,
        np.concatenate(origins).astype(np.int64),
    )


def concat_datasets(parts: Sequence[PatchDataset], source_tag: str = "") -> PatchDataset:
    labels = None
    if all(p.labels is not None for p in parts):
        labels = np.concatenate([p.labels for p in parts])
    return PatchDataset(np.concatenate([p.patches for p in parts]), labels, source_tag,
                        parts[0].seed if parts else 0)


def save_patch_dataset(ds: PatchDataset, path) -> None:
    header = {
        "patch_dim": ds.patch_dim,
        "n": len(ds),
        "seed": int(ds.seed),
        "source_tag": ds.source_tag,
        "has_labels": ds.labels is not None,
        "has_origins": ds.origins is not None,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [PATCH_MAGIC, struct.pack("<Q", len(hb)), hb, ds.patches.astype("<f8").tobytes()]
    if ds.labels is not None:
        parts.append(ds.labels.astype("<i8").tobytes())
    if ds.origins is not None:
        parts.append(ds.origins.astype("<i8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_patch_dataset(path) -> PatchDataset:
    raw = Path(path).read_bytes()
    if not raw.startswith(PATCH_MAGIC):
        raise ValueError(f"{path}: not a DASAPD1 patch cache")
    pos = len(PATCH_MAGIC)
    (hl,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    h = json.loads(raw[pos:pos + hl])
    pos += hl
    n, k = h["n"], h["patch_dim"]
    patches = np.frombuffer(raw, "<f8", n * k, pos).reshape(n, k).astype(np.float64)
    pos += 8 * n * k
    labels = origins = None
    if h["has_labels"]:
        labels = np.frombuffer(raw, "<i8", n, pos).astype(np.int64)
        pos += 8 * n
    if h["has_origins"]:
        origins = np.frombuffer(raw, "<i8", 3 * n, pos).reshape(n, 3).astype(np.int64)
    return PatchDataset(patches, labels, h["source_tag"], h["seed"], origins)


# ---------------------------------------------------------------- synthetic domains

def _smooth_noise(rng, height, width, scale):
    field_ = ndimage.gaussian_filter(rng.standard_normal((height, width)), scale, mode="reflect")
    return field_ / (field_.std() + 1e-12)


def _vessel_tree(rng, height, width):
    """Meandering vessels entering from the border. Returns the binary mask and
    a soft darkness profile scaled by each vessel's own contrast."""
    n_vessels = int(rng.integers(5, 9))
    mask = np.zeros((height, width), dtype=bool)
    darkness = np.zeros((height, width))
    for _ in range(n_vessels):
        radius = rng.uniform(0.7, 2.2)
        strength = rng.uniform(0.5, 1.0)
        edge = rng.integers(4)
        t0 = rng.uniform(0.1, 0.9)
        x, y = [(t0 * width, 0.0), (t0 * width, height - 1.0), (0.0, t0 * height),
                (width - 1.0, t0 * height)][edge]
        heading = [np.pi / 2, -np.pi / 2, 0.0, np.pi][edge] + rng.uniform(-0.6, 0.6)
        centre = np.ones((height, width), dtype=bool)
        curvature = 0.0
        for _ in range(int(2.5 * max(height, width))):
            curvature = 0.8 * curvature + rng.normal(0, 0.025)
            heading += curvature
            x += np.cos(heading)
            y += np.sin(heading)
            xi, yi = int(round(x)), int(round(y))
            if not (0 <= xi < width and 0 <= yi < height):
                break
            centre[yi, xi] = False
        if centre.all():
            continue
        dist = ndimage.distance_transform_edt(centre)
        mask |= dist <= radius
        profile = strength * np.exp(-0.5 * (dist / (0.7 * radius + 0.5)) ** 2)
        darkness = np.maximum(darkness, profile)
    return mask, darkness


def _blobs(rng, height, width, count, r_lo, r_hi):
    yy, xx = np.mgrid[0:height, 0:width]
    out = np.zeros((height, width))
    for _ in range(count):
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        r = rng.uniform(r_lo, r_hi)
        out = np.maximum(out, rng.uniform(0.3, 1.0) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r)))
    return out


def _synth_image(seed: int, index: int, width: int, height: int):
    rng = rng_for(seed, 1000 + index)
    while True:
        mask, darkness = _vessel_tree(rng, height, width)
        if 0.0 < mask.mean() < 0.5:
            break
    yy, xx = np.mgrid[0:height, 0:width]
    r2 = ((xx - width / 2) ** 2 + (yy - height / 2) ** 2) / (0.5 * max(width, height)) ** 2
    illum = 1.0 - 0.35 * r2
    texture = 0.07 * _smooth_noise(rng, height, width, 3.0) + 0.04 * _smooth_noise(rng, height, width, 1.0)
    area = height * width / 4096.0
    spots = _blobs(rng, height, width, int(rng.poisson(2 * area)), 1.5, 4.0)
    bright = _blobs(rng, height, width, int(rng.poisson(2 * area)), 1.0, 3.0)
    base = np.array([0.72, 0.38, 0.18])
    contrast = np.array([0.25, 0.5, 0.4]) * rng.uniform(0.7, 1.1)
    spot_contrast = np.array([0.15, 0.35, 0.3])
    shade = (illum + texture)[:, :, None] * (1.0 - spot_contrast * spots[:, :, None])
    shade = shade * (1.0 + 0.25 * bright[:, :, None])
    px = base * shade * (1.0 - contrast * darkness[:, :, None])
    px += rng.normal(0.0, 0.012, px.shape)
    return np.clip(px, 0.0, 1.0), mask.astype(np.uint8)


def apply_shift(pixels: np.ndarray, shift: ShiftSpec, rng) -> np.ndarray:
    out = pixels * np.asarray(shift.channel_gain) + np.asarray(shift.channel_bias)
    if shift.noise_sigma > 0:
        out = out + rng.normal(0.0, shift.noise_sigma, out.shape)
    return np.clip(out, 0.0, 1.0)


def synth_domain_pair(n_images: int, width: int, height: int, seed: int,
                      shift: ShiftSpec, min_side: int = 15):
    """Generate ``n_images`` fundus-like RGB images with exact vessel masks.

    The target set is the same generative draw passed through ``shift``
    (per-channel gain/bias, Gaussian noise, clipping). Returns two lists of
    :class:`LabeledImage`: (source, target).
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    if width < min_side or height < min_side:
        raise ValueError(f"image dims {width}x{height} smaller than patch side {min_side}")
    source, target = [], []
    for i in range(n_images):
        px, mask = _synth_image(seed, i, width, height)
        name = f"{i:03d}"
        source.append(LabeledImage(RasterImage(px, name), mask, None, name))
        tpx = apply_shift(px, shift, rng_for(seed, 5000 + i))
        target.append(LabeledImage(RasterImage(tpx, name), mask.copy(), None, name))
    return source, target


def write_dataset_dir(items: Sequence[LabeledImage], root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for it in items:
        save_image(it.image, root / "images" / f"{it.name}.ppm")
        if it.mask is not None:
            save_image(np.asarray(it.mask, dtype=np.float64), root / "masks" / f"{it.name}.pgm")
        if it.fov is not None:
            (root / "fov").mkdir(exist_ok=True)
            save_image(np.asarray(it.fov, dtype=np.float64), root / "fov" / f"{it.name}.pgm")
