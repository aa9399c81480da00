"""Non-learned binarization: the fixed 0.5 cut and local-statistics thresholds.

Local statistics come from summed-area tables, so the per-pixel cost does not
depend on the window size. Windows are clipped at the image border.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

METHODS = ("mean", "niblack", "sauvola")


def fixed_threshold(prob) -> np.ndarray:
    """0 where prob < 0.5, 1 where prob >= 0.5."""
    p = np.asarray(getattr(prob, "data", prob))
    return (p >= np.float32(0.5)).astype(np.float32)


@dataclass(frozen=True)
class LocalStatConfig:
    method: str = "mean"
    window: int = 15
    k: float | None = None  # None picks the classical default for the method
    r: float = 0.5

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.window < 1 or self.window % 2 == 0:
            raise ContractError(f"window must be a positive odd integer, got {self.window}")
        if self.r <= 0:
            raise ContractError("r must be positive")

    @property
    def k_value(self) -> float:
        if self.k is not None:
            return self.k
        return -0.2 if self.method == "niblack" else 0.5


def integral_image(img, squared: bool = False) -> np.ndarray:
    """S[i, j] = sum of img[0..i, 0..j] (or of img**2), accumulated in float64."""
    a = np.asarray(getattr(img, "data", img), dtype=np.float64)
    if squared:
        a = a * a
    return a.cumsum(axis=0).cumsum(axis=1)


def _padded(table: np.ndarray) -> np.ndarray:
    out = np.zeros((table.shape[0] + 1, table.shape[1] + 1), dtype=np.float64)
    out[1:, 1:] = table
    return out


def window_sums(table: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    """(window sum, pixel count) for every centre, from one or more stacked integral images.

    ``table`` is (H, W) or (K, H, W); the count is always (H, W).
    """
    h, w = table.shape[-2:]
    half = window // 2
    k = 2 * half + 1
    # replicate the border rows/cols once so the clipped corner lookups become plain slices
    rows = np.clip(np.arange(-half, h + half + 1), 0, h)
    cols = np.clip(np.arange(-half, w + half + 1), 0, w)
    padded = np.zeros(table.shape[:-2] + (h + 1, w + 1), dtype=np.float64)
    padded[..., 1:, 1:] = table
    s = padded[..., rows[:, None], cols]
    total = s[..., k:k + h, k:k + w] - s[..., :h, k:k + w] - s[..., k:k + h, :w] + s[..., :h, :w]
    count = np.outer(rows[k:k + h] - rows[:h], cols[k:k + w] - cols[:w]).astype(np.float64)
    return total, count


def box_sum(table: np.ndarray, top: int, left: int, bottom: int, right: int) -> float:
    """Sum over rows top..bottom and cols left..right inclusive, four lookups."""
    s = _padded(table)
    return float(s[bottom + 1, right + 1] - s[top, right + 1] - s[bottom + 1, left] + s[top, left])


def local_mean_std(img, window: int) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(getattr(img, "data", img), dtype=np.float64)
    tables = np.stack([a, a * a]).cumsum(axis=1).cumsum(axis=2)
    (total, total_sq), count = window_sums(tables, window)
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    return mean, np.sqrt(var)


def threshold_surface(mean, std, cfg: LocalStatConfig) -> np.ndarray:
    k = cfg.k_value
    if cfg.method == "mean":
        return mean
    if cfg.method == "niblack":
        return mean + k * std
    return mean * (1.0 + k * (std / cfg.r - 1.0))


def local_stat_threshold(img, cfg: LocalStatConfig = LocalStatConfig()) -> np.ndarray:
    """Binary (H, W) float32 map: 1 where img >= the local threshold."""
    a = np.asarray(getattr(img, "data", img))
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ContractError(f"local_stat_threshold expects an (H, W) image, got {a.shape}")
    if cfg.window > min(a.shape):
        raise ContractError(f"window {cfg.window} exceeds image extent {a.shape}")
    mean, std = local_mean_std(a, cfg.window)
    t = threshold_surface(mean, std, cfg)
    return (a.astype(np.float64) >= t).astype(np.float32)
