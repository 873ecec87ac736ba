"""Synthetic sea-land imagery, augmentation, PGM I/O and dataset manifests."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d, map_coordinates

SEA, LAND = 0, 1
TRANSLATION_RANGE = 8
SCALE_RANGE = (1.0, 1.5)


@dataclass
class Sample:
    image: np.ndarray   # (h, w) float64 in [0, 1]
    mask: np.ndarray    # (h, w) int64 class ids

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} differ")


# ---------------------------------------------------------------------------
# generation


def _value_noise(rng: np.random.Generator, size: int, octaves: int = 4) -> np.ndarray:
    """Multi-octave bilinear value noise, roughly in [-1, 1]."""
    out = np.zeros((size, size))
    amp, norm = 1.0, 0.0
    for o in range(1, octaves + 1):
        cells = 2**o + 1
        grid = rng.uniform(-1.0, 1.0, (cells, cells))
        coords = np.linspace(0, cells - 1, size)
        rr, cc = np.meshgrid(coords, coords, indexing="ij")
        out += amp * map_coordinates(grid, [rr, cc], order=1)
        norm += amp
        amp *= 0.5
    return out / norm


def _coastline(rng: np.random.Generator, size: int) -> np.ndarray:
    """Per-column sea depth (rows) from a smoothed random walk, kept in [size/4, 3*size/4]."""
    walk = np.cumsum(rng.normal(0.0, 0.04 * size, size))
    walk = gaussian_filter1d(walk - walk.mean(), sigma=size / 16, mode="nearest")
    base = rng.uniform(0.35, 0.65) * size
    return np.clip(base + walk, size / 4, 3 * size / 4)


def _stamp_ships(rng, image, mask, sea, size, count):
    rows, cols = np.mgrid[0:size, 0:size]
    for _ in range(count):
        ry, rx = rng.uniform(size / 48, size / 20, 2)
        theta = rng.uniform(0, np.pi)
        candidates = np.argwhere(sea)
        cy, cx = candidates[rng.integers(len(candidates))]
        dy, dx = rows - cy, cols - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        blob = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        blob &= sea
        image[blob] = rng.uniform(0.85, 0.95)
        mask[blob] = LAND


def _one_sample(rng: np.random.Generator, size: int, ship_probability: float) -> Sample:
    depth = _coastline(rng, size)
    rows = np.arange(size)[:, None]
    sea = rows < depth[None, :]

    phase = rng.uniform(0, 2 * np.pi)
    period = rng.uniform(size / 12, size / 6)
    waves = np.sin(2 * np.pi * rows / period + phase) * np.ones((1, size))
    sea_tex = 0.18 + 0.07 * _value_noise(rng, size) + 0.04 * waves
    land_tex = 0.6 + 0.18 * _value_noise(rng, size, octaves=5)

    image = np.where(sea, sea_tex, land_tex)
    mask = np.where(sea, SEA, LAND).astype(np.int64)
    if rng.random() < ship_probability:
        _stamp_ships(rng, image, mask, sea, size, int(rng.integers(1, 4)))

    k = int(rng.integers(4))
    image, mask = np.rot90(image, k), np.rot90(mask, k)
    return Sample(np.clip(np.ascontiguousarray(image), 0.0, 1.0), np.ascontiguousarray(mask))


def generate_synthetic(seed: int, count: int, size: int, ship_probability: float = 0.3) -> list[Sample]:
    """``count`` sea-land samples of ``size`` x ``size``; sample ``i`` depends only on (seed, i)."""
    if size <= 0 or size % 16:
        raise ValueError(f"size {size} must be a positive multiple of 16")
    if count < 1:
        raise ValueError("count must be >= 1")
    children = np.random.SeedSequence(seed).spawn(count)
    return [_one_sample(np.random.default_rng(c), size, ship_probability) for c in children]


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentDraw:
    flip_h: bool = False
    flip_v: bool = False
    shift: tuple[int, int] = (0, 0)    # (rows, cols)
    scale: float = 1.0


def draw_augmentation(rng: np.random.Generator) -> AugmentDraw:
    flip_h = bool(rng.random() < 0.5)
    flip_v = bool(rng.random() < 0.5)
    dy, dx = rng.integers(-TRANSLATION_RANGE, TRANSLATION_RANGE + 1, 2)
    scale = float(rng.uniform(*SCALE_RANGE))
    return AugmentDraw(flip_h, flip_v, (int(dy), int(dx)), scale)


def _translate(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    if dy == 0 and dx == 0:
        return a
    p = TRANSLATION_RANGE
    padded = np.pad(a, p, mode="reflect")
    h, w = a.shape
    return padded[p - dy:p - dy + h, p - dx:p - dx + w]


def _zoom_center(a: np.ndarray, scale: float, order: int) -> np.ndarray:
    """Upscale by ``scale`` about the center and crop back to the input size."""
    if scale == 1.0:
        return a
    h, w = a.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = [cy + (rr - cy) / scale, cx + (cc - cx) / scale]
    return map_coordinates(a, coords, order=order, mode="nearest")


def apply_augmentation(sample: Sample, draw: AugmentDraw) -> Sample:
    image, mask = sample.image, sample.mask
    if draw.flip_h:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if draw.flip_v:
        image, mask = image[::-1, :], mask[::-1, :]
    image, mask = _translate(image, *draw.shift), _translate(mask, *draw.shift)
    image = _zoom_center(image, draw.scale, order=1)
    mask = _zoom_center(mask, draw.scale, order=0)
    return Sample(np.ascontiguousarray(image, dtype=np.float64), np.ascontiguousarray(mask, dtype=np.int64))


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Random flips, [-8, 8] pixel translation and [1, 1.5] scaling."""
    return apply_augmentation(sample, draw_augmentation(rng))


# ---------------------------------------------------------------------------
# PGM


class PGMError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte {offset})")
        self.offset = offset


def encode_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    return np.rint(image * 255.0).astype(np.uint8)


def encode_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if not np.isin(mask, (SEA, LAND)).all():
        raise ValueError("mask values must be 0 or 1")
    return (mask.astype(np.uint8) * 255).astype(np.uint8)


def write_pgm(path, array: np.ndarray, mask: bool | None = None) -> None:
    """Binary P5 greyscale. Integer arrays are written as masks (0/255), floats as images."""
    array = np.asarray(array)
    if array.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {array.shape}")
    if mask is None:
        mask = np.issubdtype(array.dtype, np.integer) or array.dtype == bool
    raw = encode_mask(array) if mask else encode_image(array)
    h, w = raw.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + raw.tobytes())


def _parse_header(buf: bytes) -> tuple[int, int, int, int]:
    if buf[:2] != b"P5":
        raise PGMError(f"bad magic {buf[:2]!r}", 0)
    pos, fields = 2, []
    while len(fields) < 3:
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos == start and fields:
            raise PGMError("expected whitespace", pos)
        tok_start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if pos == tok_start:
            raise PGMError("expected a decimal header field", pos)
        fields.append(int(buf[tok_start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PGMError("header must end with a single whitespace byte", pos)
    w, h, maxval = fields
    if maxval != 255:
        raise PGMError(f"maxval {maxval} unsupported, only 255", tok_start)
    return w, h, maxval, pos + 1


def read_pgm_bytes(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    w, h, _, start = _parse_header(buf)
    need = w * h
    if len(buf) - start < need:
        raise PGMError(f"truncated payload: need {need} bytes, have {len(buf) - start}", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=start).reshape(h, w).copy()


def read_pgm(path, mask: bool = False) -> np.ndarray:
    """Inverse of :func:`write_pgm`: image values v/255, or class ids for masks."""
    raw = read_pgm_bytes(path)
    if mask:
        if not np.isin(raw, (0, 255)).all():
            raise ValueError(f"{path}: mask bytes must be 0 or 255")
        return (raw // 255).astype(np.int64)
    return raw.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# manifests

SPLITS = ("train", "val", "test")


def split_indices(count: int, val_fraction: float, test_fraction: float, seed: int) -> dict[str, list[int]]:
    order = np.random.default_rng(seed).permutation(count)
    n_val = int(round(count * val_fraction))
    n_test = int(round(count * test_fraction))
    if n_val + n_test >= count:
        raise ValueError("validation and test fractions leave no training samples")
    return {
        "train": sorted(order[n_val + n_test:].tolist()),
        "val": sorted(order[:n_val].tolist()),
        "test": sorted(order[n_val:n_val + n_test].tolist()),
    }


def write_dataset(out_dir, samples: list[Sample], splits: dict[str, list[int]]) -> Path:
    """PGM pairs under images/ and masks/ plus a tab-separated manifest; returns its path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for split in SPLITS:
        for i in splits.get(split, []):
            img, msk = f"images/{i:05d}.pgm", f"masks/{i:05d}.pgm"
            write_pgm(out / img, samples[i].image, mask=False)
            write_pgm(out / msk, samples[i].mask, mask=True)
            lines.append(f"{split}\t{img}\t{msk}\n")
    manifest = out / "manifest.tsv"
    manifest.write_text("".join(lines))
    return manifest


def read_manifest(path) -> dict[str, list[tuple[Path, Path]]]:
    """``split -> [(image_path, mask_path)]`` with paths resolved against the manifest's directory."""
    path = Path(path)
    base = path.parent
    out: dict[str, list[tuple[Path, Path]]] = {s: [] for s in SPLITS}
    seen = set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[0] not in SPLITS:
            raise ValueError(f"{path}:{lineno}: expected 'split<TAB>image<TAB>mask'")
        split, img, msk = parts
        for p in (img, msk):
            if p in seen:
                raise ValueError(f"{path}:{lineno}: {p} listed twice")
            seen.add(p)
        out[split].append((base / img, base / msk))
    return out


def load_split(manifest_path, split: str) -> list[Sample]:
    entries = read_manifest(manifest_path)[split]
    return [Sample(read_pgm(i), read_pgm(m, mask=True)) for i, m in entries]


def stack_batch(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """(n, 1, h, w) images and (n, h, w) labels."""
    images = np.stack([s.image for s in samples])[:, None]
    labels = np.stack([s.mask for s in samples])
    return images, labels
