"""MI augmentation: foreground-constrained random crops and dihedral flips.

Crops are sampled by rejection until at least 75% of their pixels are
foreground; the image is never resized, so the instance size stays constant
across crop sizes. The crop-count schedule keeps the sampled pixel budget
roughly equal to one whole image per epoch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FOREGROUND_MIN_FRACTION = 0.75


@dataclass(frozen=True)
class CropSpec:
    """Square crop at (row, col); fallback marks a best-effort crop that
    missed the foreground threshold after the resample budget ran out."""

    row: int
    col: int
    size: int
    fallback: bool = False


@dataclass
class AugmentConfig:
    crop_size: int
    mirror: bool = True
    rotate90: bool = True
    max_resample_attempts: int = 100


def _integral(mask: np.ndarray) -> np.ndarray:
    padded = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
    np.cumsum(np.cumsum(mask, axis=0), axis=1, out=padded[1:, 1:])
    return padded


def _window_sum(padded: np.ndarray, row: int, col: int, size: int) -> int:
    return int(
        padded[row + size, col + size]
        - padded[row, col + size]
        - padded[row + size, col]
        + padded[row, col]
    )


def sample_crop(mask: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> CropSpec:
    """Rejection-sample a crop position with >= 75% foreground pixels.

    Positions are uniform over all valid top-left offsets. If the budget of
    max_resample_attempts is exhausted the best candidate seen is returned
    with the fallback flag raised.
    """
    H, W = mask.shape
    size = cfg.crop_size
    if size > H or size > W:
        raise ValueError(f"crop size {size} exceeds image {H}x{W}")
    padded = _integral(mask)
    best = None
    best_count = -1
    for _ in range(cfg.max_resample_attempts):
        row = int(rng.integers(0, H - size + 1))
        col = int(rng.integers(0, W - size + 1))
        count = _window_sum(padded, row, col, size)
        if 4 * count >= 3 * size * size:
            return CropSpec(row, col, size)
        if count > best_count:
            best, best_count = (row, col), count
    return CropSpec(best[0], best[1], size, fallback=True)


def crop_count(crop_size: int, full_size: int) -> int:
    """Crops per image per epoch: ceil(full^2 / crop^2), 1 for the whole image.

    At crop_size == full_size the whole image is used and MI augmentation is
    disabled (the trainer skips crop sampling entirely in that case).
    """
    if crop_size <= 0 or crop_size > full_size:
        raise ValueError(f"crop size {crop_size} outside (0, {full_size}]")
    if crop_size == full_size:
        return 1
    return -(-(full_size * full_size) // (crop_size * crop_size))


def apply_dihedral(image: np.ndarray, mask: np.ndarray, mirror: bool, quarter_turns: int):
    """Horizontal mirror then k*90-degree rotation, identically on image and mask.

    Pure pixel permutations, no interpolation; inputs must be square.
    """
    if image.shape[0] != image.shape[1] or mask.shape[0] != mask.shape[1]:
        raise ValueError("dihedral transforms require square inputs")

    def transform(a: np.ndarray) -> np.ndarray:
        if mirror:
            a = a[:, ::-1]
        if quarter_turns % 4:
            a = np.rot90(a, quarter_turns % 4)
        return np.ascontiguousarray(a)

    return transform(image), transform(mask)


def extract_crop(image: np.ndarray, mask: np.ndarray, spec: CropSpec):
    """Pixel-exact square subwindow of image and mask; never resampled."""
    H, W = mask.shape
    if spec.row < 0 or spec.col < 0 or spec.row + spec.size > H or spec.col + spec.size > W:
        raise ValueError(f"crop {spec} out of bounds for image {H}x{W}")
    r, c, s = spec.row, spec.col, spec.size
    return image[r : r + s, c : c + s].copy(), mask[r : r + s, c : c + s].copy()


def foreground_fraction(mask: np.ndarray) -> float:
    return float(np.count_nonzero(mask)) / mask.size
