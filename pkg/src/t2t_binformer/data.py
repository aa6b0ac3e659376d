"""Document pairs: image I/O, tiling, augmentation and year-wise splits.

Intensities are floats in [0, 1]. Ground truth is bilevel with text = 0 and
background = 1. Degraded images are always ``3 x H x W``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import map_coordinates

TILE = 256
# Pillow reports both PGM and PPM as "PPM"
SUPPORTED_FORMATS = ("PNG", "PPM")


class DataError(Exception):
    pass


class ImageReadError(DataError, OSError):
    pass


class UnsupportedFormatError(DataError, ValueError):
    pass


class DimensionMismatchError(DataError, ValueError):
    pass


class ManifestError(DataError, ValueError):
    pass


class SplitError(DataError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


@dataclass
class DocumentPair:
    degraded: np.ndarray  # 3 x H x W
    gt: np.ndarray  # H x W, {0, 1}
    source_id: str = ""
    origin: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.degraded.shape[1:] != self.gt.shape:
            raise DimensionMismatchError(
                f"degraded {self.degraded.shape[1:]} and ground truth {self.gt.shape} differ")

    @property
    def shape(self) -> tuple[int, int]:
        return self.gt.shape


# ---------------------------------------------------------------------------
# image I/O


def read_image(path) -> np.ndarray:
    """Read a PNG/PGM/PPM file as a ``C x H x W`` float array in [0, 1]."""
    path = Path(path)
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError as e:
        raise ImageReadError(f"cannot read {path}: no such file") from e
    except UnidentifiedImageError as e:
        raise UnsupportedFormatError(f"{path}: not a supported image (PNG, PGM, PPM)") from e
    except OSError as e:
        raise ImageReadError(f"cannot read {path}: {e}") from e
    if img.format not in SUPPORTED_FORMATS:
        raise UnsupportedFormatError(f"{path}: format {img.format} is not supported (PNG, PGM, PPM)")

    if img.mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(img, dtype=np.float64) / 65535.0
        arr = arr[None]
    else:
        if img.mode in ("1", "L", "LA"):
            img = img.convert("L")
        elif img.mode != "RGB":
            img = img.convert("RGB")
        arr = np.asarray(img, dtype=np.float64) / 255.0
        arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
    return np.clip(arr, 0.0, 1.0)


def to_rgb(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 2:
        arr = arr[None]
    return np.repeat(arr, 3, axis=0) if arr.shape[0] == 1 else arr


def to_gray(arr: np.ndarray) -> np.ndarray:
    return arr.mean(axis=0) if arr.ndim == 3 else arr


def write_image(path, arr: np.ndarray) -> None:
    """Write ``H x W`` or ``C x H x W`` floats in [0, 1] as an 8-bit PNG."""
    a = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0)
    if a.ndim == 3:
        a = a[0] if a.shape[0] == 1 else a.transpose(1, 2, 0)
    Image.fromarray(np.round(a * 255.0).astype(np.uint8)).save(path, format="PNG")


def write_binary(path, binary: np.ndarray) -> None:
    Image.fromarray(np.where(binary > 0, 255, 0).astype(np.uint8)).save(path, format="PNG")


def load_pair(degraded_path, gt_path, source_id: Optional[str] = None) -> DocumentPair:
    degraded = to_rgb(read_image(degraded_path))
    gt = (to_gray(read_image(gt_path)) >= 0.5).astype(np.uint8)
    if degraded.shape[1:] != gt.shape:
        raise DimensionMismatchError(
            f"{degraded_path} is {degraded.shape[2]}x{degraded.shape[1]} but "
            f"{gt_path} is {gt.shape[1]}x{gt.shape[0]}")
    return DocumentPair(degraded, gt, source_id or Path(degraded_path).stem)


# ---------------------------------------------------------------------------
# tiling


def tile_array(arr: np.ndarray, size: int = TILE, fill: float = 1.0) -> list[tuple[int, int, np.ndarray]]:
    """Non-overlapping ``size`` grid over the last two axes, padded with ``fill``."""
    h, w = arr.shape[-2:]
    ph, pw = math.ceil(h / size) * size, math.ceil(w / size) * size
    pad = [(0, 0)] * (arr.ndim - 2) + [(0, ph - h), (0, pw - w)]
    padded = np.pad(arr, pad, constant_values=fill)
    return [(y, x, padded[..., y : y + size, x : x + size])
            for y in range(0, ph, size) for x in range(0, pw, size)]


def merge_tiles(tiles: Iterable[tuple[int, int, np.ndarray]], channels: Optional[int],
                h: int, w: int, size: int = TILE) -> np.ndarray:
    """Place tiles back on a canvas and crop to ``h x w``."""
    ph, pw = math.ceil(h / size) * size, math.ceil(w / size) * size
    shape = (ph, pw) if channels is None else (channels, ph, pw)
    canvas = np.ones(shape)
    for y, x, t in tiles:
        canvas[..., y : y + size, x : x + size] = t
    return canvas[..., :h, :w]


def tile_256(pair: DocumentPair, size: int = TILE) -> list[DocumentPair]:
    deg = tile_array(pair.degraded, size, fill=1.0)
    gt = tile_array(pair.gt, size, fill=1)
    return [DocumentPair(d, g, f"{pair.source_id}@{y},{x}", (y, x))
            for (y, x, d), (_, _, g) in zip(deg, gt)]


def merge_pairs(tiles: Sequence[DocumentPair], h: int, w: int, size: int = TILE) -> DocumentPair:
    deg = merge_tiles([(*t.origin, t.degraded) for t in tiles], 3, h, w, size)
    gt = merge_tiles([(*t.origin, t.gt) for t in tiles], None, h, w, size).astype(np.uint8)
    source = tiles[0].source_id.split("@")[0] if tiles else ""
    return DocumentPair(deg, gt, source)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentSpec:
    horizontal_flip: bool = True
    vertical_flip: bool = True
    rotations: tuple[int, ...] = (90, 180, 270)
    crop_size: int = 192
    crop_count: int = 2
    seed: int = 42

    def __post_init__(self):
        if any(r not in (90, 180, 270) for r in self.rotations):
            raise ValueError(f"rotations must be a subset of 90/180/270, got {self.rotations}")
        if self.crop_count and self.crop_size < 1:
            raise ValueError("crop size must be positive")


def flip_h(pair: DocumentPair) -> DocumentPair:
    return replace(pair, degraded=pair.degraded[:, :, ::-1].copy(), gt=pair.gt[:, ::-1].copy())


def flip_v(pair: DocumentPair) -> DocumentPair:
    return replace(pair, degraded=pair.degraded[:, ::-1, :].copy(), gt=pair.gt[::-1, :].copy())


def rotate90(pair: DocumentPair, times: int = 1) -> DocumentPair:
    """Counter-clockwise rotation by ``90 * times`` degrees."""
    return replace(pair, degraded=np.rot90(pair.degraded, times, axes=(1, 2)).copy(),
                   gt=np.rot90(pair.gt, times).copy())


def _source_coords(n_out: int, n_in: int) -> np.ndarray:
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def resize_bilinear(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    ys, xs = np.meshgrid(_source_coords(h, arr.shape[-2]), _source_coords(w, arr.shape[-1]), indexing="ij")
    return np.stack([map_coordinates(ch, [ys, xs], order=1, mode="nearest") for ch in arr])


def resize_nearest(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    iy = np.minimum((np.arange(h) + 0.5) * arr.shape[-2] / h, arr.shape[-2] - 1).astype(int)
    ix = np.minimum((np.arange(w) + 0.5) * arr.shape[-1] / w, arr.shape[-1] - 1).astype(int)
    return arr[..., iy[:, None], ix[None, :]]


def random_crop(pair: DocumentPair, size: int, rng: np.random.Generator) -> DocumentPair:
    """Crop ``size x size`` at a random offset and resize back to the tile size."""
    h, w = pair.shape
    if size > min(h, w):
        raise ValueError(f"crop size {size} exceeds tile {h}x{w}")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    deg = pair.degraded[:, y : y + size, x : x + size]
    gt = pair.gt[y : y + size, x : x + size]
    return replace(pair, degraded=np.clip(resize_bilinear(deg, h, w), 0.0, 1.0),
                   gt=resize_nearest(gt, h, w))


def augment(pair: DocumentPair, spec: AugmentSpec, rng: Optional[np.random.Generator] = None) -> list[DocumentPair]:
    """The original pair followed by each enabled transform of it."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    out = [pair]
    if spec.horizontal_flip:
        out.append(flip_h(pair))
    if spec.vertical_flip:
        out.append(flip_v(pair))
    for angle in spec.rotations:
        out.append(rotate90(pair, angle // 90))
    for _ in range(spec.crop_count):
        out.append(random_crop(pair, spec.crop_size, rng))
    return out


# ---------------------------------------------------------------------------
# manifests and splits


@dataclass
class ManifestEntry:
    year: str
    degraded: Path
    gt: Path


def read_manifest(path) -> list[ManifestEntry]:
    """Tab-separated ``year, degraded_path, gt_path`` lines; relative paths resolve
    against the manifest's directory. Blank lines and ``#`` comments are skipped."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.rstrip("\n").split("\t")
        if len(fields) != 3 or not all(f.strip() for f in fields):
            raise ManifestError(f"{path}:{lineno}: expected 'year<TAB>degraded<TAB>gt'")
        year, deg, gt = (f.strip() for f in fields)
        entries.append(ManifestEntry(year, path.parent / deg, path.parent / gt))
    if not entries:
        raise ManifestError(f"manifest {path} lists no pairs")
    return entries


def load_manifest(path) -> dict[str, list[DocumentPair]]:
    datasets: dict[str, list[DocumentPair]] = {}
    for e in read_manifest(path):
        pair = load_pair(e.degraded, e.gt, source_id=f"{e.year}/{e.degraded.stem}")
        datasets.setdefault(e.year, []).append(pair)
    return datasets


DIRECTIONS = ("test-on-one", "train-on-one")


def leave_one_out(datasets: dict[str, list[DocumentPair]], held_out_year: str,
                  direction: str = "test-on-one") -> tuple[list[DocumentPair], list[DocumentPair]]:
    """Year-wise split.

    ``test-on-one`` tests on ``held_out_year`` and trains on every other year;
    ``train-on-one`` is the reverse.
    """
    held_out_year = str(held_out_year)
    if held_out_year not in datasets:
        raise SplitError(f"unknown year {held_out_year!r}; available: {', '.join(sorted(datasets))}")
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    one = list(datasets[held_out_year])
    rest = [p for year in sorted(datasets) if year != held_out_year for p in datasets[year]]
    train, test = (rest, one) if direction == "test-on-one" else (one, rest)
    overlap = {p.source_id for p in train} & {p.source_id for p in test}
    if overlap:
        raise SplitError(f"source ids appear in both splits: {sorted(overlap)}")
    return train, test


# ---------------------------------------------------------------------------
# synthetic documents


def synthetic_gt(size: int = TILE, seed: int = 0, lines: int = 4, margin: int = 12,
                 glyph: tuple[int, int] = (7, 5), scale: int = 2, alphabet_size: int = 12) -> np.ndarray:
    """A clean bilevel "text" raster: rows of blocky glyphs from a random alphabet."""
    rng = np.random.default_rng(seed)
    gt = np.ones((size, size), dtype=np.uint8)
    gh, gw = glyph[0] * scale, glyph[1] * scale
    alphabet = [np.kron(rng.random(glyph) < 0.45, np.ones((scale, scale), dtype=bool))
                for _ in range(alphabet_size)]
    pitch = gh + (size - 2 * margin - lines * gh) // max(lines - 1, 1)
    y = margin
    for _ in range(lines):
        x = margin
        while x + gw <= size - margin and y + gh <= size:
            if rng.random() < 0.15:  # word gap
                x += gw
                continue
            g = alphabet[rng.integers(alphabet_size)]
            gt[y : y + gh, x : x + gw][g] = 0
            x += gw + 2
        y += pitch
    return gt


def degrade(gt: np.ndarray, seed: int = 0, noise: float = 0.03, blotches: int = 6) -> np.ndarray:
    """Aged-paper rendering of a bilevel page: stained background, faded ink,
    dark blotches and Gaussian noise, tinted to 3 channels."""
    rng = np.random.default_rng(seed)
    h, w = gt.shape
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    stain = 0.08 * np.sin(2 * np.pi * (yy * rng.uniform(0.5, 1.5) + rng.uniform()))
    stain += 0.06 * np.cos(2 * np.pi * (xx * rng.uniform(0.5, 1.5) + rng.uniform()))
    page = 0.82 + stain
    for _ in range(blotches):
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(0.03, 0.12)
        page -= rng.uniform(0.15, 0.35) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    ink = rng.uniform(0.15, 0.3)
    gray = np.where(gt == 0, ink, page) + rng.normal(0.0, noise, size=(h, w))
    tint = np.array([1.0, 0.95, 0.85])[:, None, None]
    return np.clip(gray[None] * tint, 0.0, 1.0)


def synthetic_pair(seed: int = 0, size: int = TILE, lines: int = 4) -> DocumentPair:
    gt = synthetic_gt(size, seed=seed, lines=lines)
    return DocumentPair(degrade(gt, seed=seed + 1), gt, f"synthetic-{seed}")


def write_synthetic_year(directory, year: str, count: int, size=(TILE, TILE), seed: int = 0) -> list[str]:
    """Write ``count`` synthetic pairs as PNGs; return manifest lines for them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    h, w = size
    for i in range(count):
        gt = synthetic_gt(max(h, w), seed=seed + i)[:h, :w]
        deg = degrade(gt, seed=seed + i + 1000)
        dname, gname = f"{year}_{i:02d}_in.png", f"{year}_{i:02d}_gt.png"
        write_image(directory / dname, deg)
        write_binary(directory / gname, gt)
        lines.append(f"{year}\t{dname}\t{gname}")
    return lines
