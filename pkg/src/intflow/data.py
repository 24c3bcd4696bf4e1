"""Datasets and image file IO.

Ships a seeded synthetic 8x8 grayscale generator (smooth gradients, sine
patterns, low-frequency textures plus quantization-scale noise) so train
and codec workloads need no external downloads, an exact toy dataset over
a known joint PMF, and a minimal lossless raw-image container.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DomainError, StreamCorruptionError, StreamFormatError
from .grid import GridTensor


class ToyDataset:
    """Sampler and exact evaluator for a known joint PMF over pairs.

    Data points are (1, 1, 2)-shaped grids; evaluation enumerates the full
    support and weights per-sample bpd by the true probabilities, so the
    metric has no sampling noise.
    """

    def __init__(self, pmf: np.ndarray, bits: int) -> None:
        pmf = np.asarray(pmf, dtype=np.float64)
        n = 1 << bits
        if pmf.shape != (n, n):
            raise DomainError(f"pmf shape {pmf.shape} does not match {bits}-bit pairs")
        if abs(pmf.sum() - 1.0) > 1e-9 or np.any(pmf < 0):
            raise DomainError("pmf must be non-negative and sum to 1")
        self.bits = bits
        self.pmf = pmf
        self.probs = pmf.reshape(-1)
        first, second = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        self.support = np.stack([first.reshape(-1), second.reshape(-1)], axis=-1)

    @property
    def entropy_bpd(self) -> float:
        nz = self.probs[self.probs > 0]
        return float(-(nz * np.log2(nz)).sum()) / 2.0

    def sample_codes(self, rng: np.random.Generator, n: int) -> GridTensor:
        idx = rng.choice(self.probs.size, size=n, p=self.probs)
        return GridTensor(self.support[idx].reshape(n, 1, 1, 2), self.bits)

    def train_batch(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.sample_codes(rng, n).reals()

    def support_tensor(self) -> GridTensor:
        return GridTensor(self.support.reshape(-1, 1, 1, 2), self.bits)

    def eval_bpd(self, model) -> float:
        per_sample = model.nll_bpd_samples(self.support_tensor())
        return float((self.probs * per_sample).sum())


def _lattice(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    return np.meshgrid(ys, xs, indexing="ij")


def _synth_one(rng: np.random.Generator, kind: int, height: int, width: int) -> np.ndarray:
    yy, xx = _lattice(height, width)
    if kind == 0:
        angle = rng.uniform(0.0, 2.0 * np.pi)
        ramp = np.cos(angle) * xx + np.sin(angle) * yy
        img = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
    elif kind == 1:
        fx, fy = rng.uniform(0.5, 2.5, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        img = 0.5 + 0.5 * np.sin(2.0 * np.pi * (fx * xx + fy * yy) + phase)
    else:
        coarse = rng.uniform(size=(3, 3))
        rows = np.clip(yy * 2.0, 0.0, 2.0)
        cols = np.clip(xx * 2.0, 0.0, 2.0)
        r0 = np.floor(rows).astype(int).clip(0, 1)
        c0 = np.floor(cols).astype(int).clip(0, 1)
        fr, fc = rows - r0, cols - c0
        img = (
            coarse[r0, c0] * (1 - fr) * (1 - fc)
            + coarse[r0 + 1, c0] * fr * (1 - fc)
            + coarse[r0, c0 + 1] * (1 - fr) * fc
            + coarse[r0 + 1, c0 + 1] * fr * fc
        )
    low, high = rng.uniform(0.1, 0.35), rng.uniform(0.65, 0.95)
    return low + (high - low) * img


def synth_images(
    count: int,
    bits: int = 8,
    seed: int = 0,
    offset: int = 0,
    height: int = 8,
    width: int = 8,
) -> GridTensor:
    """Deterministic batch of synthetic grayscale images.

    Image ``i`` depends only on ``(seed, offset + i)``, so disjoint offset
    ranges give disjoint, reproducible held-out sets.
    """
    levels = 1 << bits
    codes = np.empty((count, height, width, 1), dtype=np.int64)
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence((seed, offset + i)))
        kind = int(rng.integers(3))
        img = _synth_one(rng, kind, height, width)
        img = img + rng.uniform(-1.0, 1.0, size=img.shape) * (1.5 / levels)
        quantized = np.floor(np.clip(img, 0.0, 1.0 - 1e-9) * levels).astype(np.int64)
        codes[i, :, :, 0] = quantized
    return GridTensor(codes, bits)


class SynthDataset:
    """Train/validation split over the synthetic generator."""

    def __init__(
        self,
        train_images: int = 512,
        bits: int = 8,
        seed: int = 0,
        val_fraction: float = 0.2,
        height: int = 8,
        width: int = 8,
    ) -> None:
        if not 0.0 <= val_fraction < 1.0:
            raise DomainError(f"val fraction must lie in [0, 1), got {val_fraction}")
        total = train_images
        n_val = int(round(total * val_fraction))
        all_images = synth_images(total, bits, seed, height=height, width=width)
        self.bits = bits
        self.seed = seed
        self.total_generated = total
        self.train_codes = all_images.codes[: total - n_val]
        self.val_codes = all_images.codes[total - n_val :]
        self._bin = 2.0**-bits

    def train_batch(self, rng: np.random.Generator, n: int) -> np.ndarray:
        idx = rng.integers(0, self.train_codes.shape[0], size=n)
        return self.train_codes[idx].astype(np.float64) * self._bin

    def val_tensor(self) -> GridTensor:
        return GridTensor(self.val_codes, self.bits)

    def heldout(self, count: int) -> GridTensor:
        """Images guaranteed disjoint from every split of this dataset."""
        return synth_images(
            count,
            self.bits,
            self.seed,
            offset=self.total_generated,
            height=self.train_codes.shape[1],
            width=self.train_codes.shape[2],
        )

    def eval_bpd(self, model) -> float:
        if self.val_codes.shape[0] == 0:
            raise DomainError("no validation split configured")
        return float(model.nll_bpd_samples(self.val_tensor()).mean())


# ---------------------------------------------------------------------------
# raw image container
# ---------------------------------------------------------------------------

_IMAGE_MAGIC = b"IDFI"
_IMAGE_VERSION = 1


def write_raw_image(path: str | Path, image: GridTensor) -> None:
    """Store one image (batch of 1) losslessly."""
    if image.batch != 1:
        raise DomainError("raw container holds exactly one image")
    codes = image.codes[0]
    if np.any(codes < 0) or np.any(codes >= 1 << image.bits):
        raise DomainError("codes outside the data alphabet")
    head = _IMAGE_MAGIC + struct.pack(
        "<HIIIB",
        _IMAGE_VERSION,
        image.width,
        image.height,
        image.channels,
        image.bits,
    )
    dtype = "<u1" if image.bits <= 8 else "<u2"
    Path(path).write_bytes(head + codes.astype(dtype).tobytes())


def read_raw_image(path: str | Path) -> GridTensor:
    raw = Path(path).read_bytes()
    if len(raw) < 19 or raw[:4] != _IMAGE_MAGIC:
        raise StreamFormatError("not a raw image container")
    version, width, height, channels, bits = struct.unpack_from("<HIIIB", raw, 4)
    if version != _IMAGE_VERSION:
        raise StreamFormatError(f"unsupported raw image version {version}")
    if not 1 <= bits <= 16:
        raise StreamFormatError(f"unsupported bit depth {bits}")
    dtype = "<u1" if bits <= 8 else "<u2"
    itemsize = 1 if bits <= 8 else 2
    expected = height * width * channels * itemsize
    body = raw[19:]
    if len(body) != expected:
        raise StreamCorruptionError(
            f"sample section holds {len(body)} bytes, expected {expected}"
        )
    codes = np.frombuffer(body, dtype=dtype).astype(np.int64)
    if np.any(codes >= 1 << bits):
        raise StreamCorruptionError("sample outside the declared alphabet")
    return GridTensor(codes.reshape(1, height, width, channels), bits)
