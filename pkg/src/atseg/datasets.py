"""Synthetic tumour-like images, PGM (P5) I/O and deterministic splitting."""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, ParseError

NOISE_SIGMA = 0.05
BIAS_AMPLITUDE = 0.3


@dataclass
class Sample:
    image: np.ndarray  # float32 (1, H, W) in [0, 1]
    mask: np.ndarray  # float32 (1, H, W) in {0, 1}
    id: str
    source: str = ""

    def __post_init__(self):
        if self.image.shape != self.mask.shape or self.image.ndim != 3 or self.image.shape[0] != 1:
            raise ContractError(f"sample {self.id}: image {self.image.shape} / mask {self.mask.shape} mismatch")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ContractError(f"sample {self.id}: mask is not binary")

    @property
    def hw(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


def stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """Batch arrays (N, 1, H, W) for images and masks."""
    return (
        np.stack([s.image for s in samples]).astype(np.float32),
        np.stack([s.mask for s in samples]).astype(np.float32),
    )


# ---------------------------------------------------------------- synthetic


def bias_ramp(w: int) -> np.ndarray:
    """Smoothstep ramp from 0 at the left edge to BIAS_AMPLITUDE at the right edge."""
    u = np.linspace(0.0, 1.0, w)
    return BIAS_AMPLITUDE * (3 * u**2 - 2 * u**3)


def _ellipse(h, w, cy, cx, ry, rx, theta):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def synthetic_clean(h: int, w: int, rng: np.random.Generator, bias_field: bool):
    """Noise-free image, mask and background level for one sample."""
    background = rng.uniform(0.1, 0.25)
    img = np.full((h, w), background)
    mask = np.zeros((h, w), dtype=bool)
    rmin = max(1.5, min(h, w) / 16)
    rmax = max(2.5, min(h, w) / 6)
    for _ in range(int(rng.integers(1, 4))):
        ry, rx = rng.uniform(rmin, rmax, size=2)
        r = max(ry, rx)
        cy = rng.uniform(r, h - 1 - r)
        cx = rng.uniform(r, w - 1 - r)
        blob = _ellipse(h, w, cy, cx, ry, rx, rng.uniform(0, math.pi))
        if not blob.any():
            blob[int(round(cy)), int(round(cx))] = True
        level = background + rng.uniform(0.35, 0.5)
        img[blob] = np.maximum(img[blob], level)
        mask |= blob
    if bias_field:
        img = img + bias_ramp(w)[None, :]
    return img, mask, background


def gen_synthetic(n: int, h: int, w: int, seed: int, bias_field: bool = False) -> list[Sample]:
    """Dark background, 1-3 bright ellipses, Gaussian noise, optional intensity ramp.

    Sample ``i`` depends only on ``(seed, i, h, w, bias_field)``.
    """
    if n < 1 or h < 16 or w < 16:
        raise ContractError(f"gen_synthetic needs n >= 1 and h, w >= 16 (got n={n}, {h}x{w})")
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        img, mask, _ = synthetic_clean(h, w, rng, bias_field)
        img = np.clip(img + rng.normal(0.0, NOISE_SIGMA, size=img.shape), 0.0, 1.0)
        out.append(
            Sample(
                image=img.astype(np.float32)[None],
                mask=mask.astype(np.float32)[None],
                id=f"{i:05d}",
                source=f"synthetic:seed={seed}:index={i}:bias={int(bias_field)}",
            )
        )
    return out


# ---------------------------------------------------------------- PGM


def quantize(x: np.ndarray) -> np.ndarray:
    """Map [0,1] reals to bytes with round-half-up."""
    v = np.floor(np.asarray(x, dtype=np.float64) * 255.0 + 0.5)
    return np.clip(v, 0, 255).astype(np.uint8)


def dequantize(b: np.ndarray) -> np.ndarray:
    return (b.astype(np.float64) / 255.0).astype(np.float32)


def _header_token(buf: bytes, pos: int, what: str) -> tuple[int, int]:
    """Skip whitespace/comments, parse a decimal token. Returns (value, end)."""
    n = len(buf)
    while pos < n:
        if buf[pos] in b" \t\r\n\v\f":
            pos += 1
        elif buf[pos] == ord("#"):
            while pos < n and buf[pos] not in b"\r\n":
                pos += 1
        else:
            break
    if pos >= n:
        raise ParseError(f"unexpected end of header while reading {what}", pos)
    start = pos
    while pos < n and 48 <= buf[pos] <= 57:
        pos += 1
    if pos == start:
        raise ParseError(f"expected a decimal {what}, found byte {buf[pos]!r}", pos)
    if pos < n and buf[pos] not in b" \t\r\n\v\f#":
        raise ParseError(f"unexpected byte {bytes([buf[pos]])!r} after {what}", pos)
    return int(buf[start:pos]), pos


def decode_pgm(buf: bytes) -> np.ndarray:
    """Parse a binary 8-bit P5 image into a uint8 (H, W) array."""
    if len(buf) < 2 or buf[:2] != b"P5":
        raise ParseError("not a binary PGM: magic must be 'P5'", 0)
    if len(buf) < 3 or buf[2] not in b" \t\r\n\v\f":
        raise ParseError("magic must be followed by whitespace", 2)
    width, pos = _header_token(buf, 2, "width")
    height, pos = _header_token(buf, pos, "height")
    maxval, pos = _header_token(buf, pos, "maxval")
    if width == 0 or height == 0:
        raise ParseError(f"image extents must be positive, got {width}x{height}", pos)
    if maxval != 255:
        raise ParseError(f"only maxval 255 is supported, got {maxval}", pos)
    if pos >= len(buf) or buf[pos] not in b" \t\r\n\v\f":
        raise ParseError("missing single whitespace byte before the pixel payload", pos)
    pos += 1
    need = width * height
    have = len(buf) - pos
    if have < need:
        raise ParseError(f"truncated payload: need {need} bytes, found {have}", len(buf))
    if have > need:
        raise ParseError(f"{have - need} trailing byte(s) after the pixel payload", pos + need)
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(height, width)


def encode_pgm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def load_pgm(path) -> np.ndarray:
    """Read a P5 file as a float32 (1, H, W) array in [0, 1]."""
    path = Path(path)
    try:
        return dequantize(decode_pgm(path.read_bytes()))[None]
    except ParseError as e:
        raise ParseError(str(e), e.offset, path) from None


def save_pgm(image, path) -> None:
    a = np.asarray(getattr(image, "data", image))
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ContractError(f"save_pgm expects (H, W) or (1, H, W), got {a.shape}")
    Path(path).write_bytes(encode_pgm(quantize(a)))


def load_mask_pgm(path) -> np.ndarray:
    path = Path(path)
    raw = decode_pgm_file(path)
    bad = (raw != 0) & (raw != 255)
    if bad.any():
        idx = int(np.flatnonzero(bad.reshape(-1))[0])
        raise ParseError(f"mask pixel {idx} has value {int(raw.reshape(-1)[idx])}; masks use 0 and 255", path=path)
    return (raw == 255).astype(np.float32)[None]


def decode_pgm_file(path) -> np.ndarray:
    path = Path(path)
    try:
        return decode_pgm(path.read_bytes())
    except ParseError as e:
        raise ParseError(str(e), e.offset, path) from None


# ---------------------------------------------------------------- directories


def write_dataset(samples: Sequence[Sample], root) -> None:
    """Write ``images/<id>.pgm`` and ``masks/<id>.pgm`` under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_pgm(s.image, root / "images" / f"{s.id}.pgm")
        save_pgm(s.mask, root / "masks" / f"{s.id}.pgm")


def load_dataset(root) -> list[Sample]:
    """Pair ``images/*.pgm`` with ``masks/*.pgm`` by stem, sorted by id."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise ParseError("dataset directory must contain images/ and masks/", path=root)
    images = {p.stem: p for p in img_dir.glob("*.pgm")}
    masks = {p.stem: p for p in mask_dir.glob("*.pgm")}
    if set(images) != set(masks):
        missing = sorted(set(images) ^ set(masks))
        raise ParseError(f"images and masks do not pair up: {missing[:5]}", path=root)
    if not images:
        raise ParseError("dataset is empty", path=root)
    out = []
    shape = None
    for stem in sorted(images):
        img = load_pgm(images[stem])
        mask = load_mask_pgm(masks[stem])
        if img.shape != mask.shape:
            raise ParseError(f"{stem}: image {img.shape[1:]} and mask {mask.shape[1:]} differ", path=root)
        if shape is not None and img.shape != shape:
            raise ParseError(f"{stem}: size {img.shape[1:]} differs from {shape[1:]}", path=root)
        shape = img.shape
        out.append(Sample(img, mask, stem, str(images[stem])))
    return out


def corpus_fingerprint(root) -> tuple[int, str]:
    """(sample count, sha256 over every PGM file's relative path and bytes)."""
    root = Path(root)
    h = hashlib.sha256()
    files = sorted(
        p for sub in ("images", "masks") for p in (root / sub).glob("*.pgm")
    )
    for p in files:
        h.update(os.fsencode(p.relative_to(root).as_posix()) + b"\0")
        h.update(p.read_bytes())
    return len(list((root / "images").glob("*.pgm"))), h.hexdigest()


# ---------------------------------------------------------------- splitting


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fr = (self.train_frac, self.val_frac, self.test_frac)
        if min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ContractError(f"split fractions must be non-negative and sum to 1, got {fr}")


def split_counts(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    n_train = math.floor(spec.train_frac * n + 1e-9)
    n_val = math.floor(spec.val_frac * n + 1e-9)
    return n_train, n_val, n - n_train - n_val


def split_dataset(samples: Sequence[Sample], spec: SplitSpec = SplitSpec()):
    """Seeded shuffle, then contiguous train/val/test cut. Returns three lists."""
    n = len(samples)
    if n < 10:
        raise ContractError(f"split_dataset needs at least 10 samples, got {n}")
    order = np.random.default_rng(spec.seed).permutation(n)
    n_train, n_val, _ = split_counts(n, spec)
    shuffled = [samples[i] for i in order]
    return shuffled[:n_train], shuffled[n_train : n_train + n_val], shuffled[n_train + n_val :]
