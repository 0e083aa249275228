"""Synthetic heterogeneous segmentation clients.

Each client is described by a :class:`DatasetSpec`. A sample is rendered
from a random shape (ellipse, radial blob or ring) as a soft foreground, then
passed through the client's intensity transform ``clip(gain * x**gamma +
bias)``, Gaussian noise and a background texture. Differences in these
parameters between clients play the role of acquisition-site domain shift.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, GenerationError
from .rng import stream

SHAPE_FAMILIES = ("ellipse", "blob", "ring")
TEXTURES = ("flat", "gradient", "speckle")
MIN_FOREGROUND, MAX_FOREGROUND = 0.02, 0.6
MAX_RETRIES = 100
BACKGROUND_LEVEL, FOREGROUND_LEVEL = 0.2, 0.8

SAMPLE_MAGIC = b"PFSD"
SAMPLE_VERSION = 1


@dataclass(frozen=True)
class DatasetSpec:
    client_id: str
    n_samples: int = 50
    shape_family: str = "ellipse"
    intensity: tuple = (1.0, 0.0, 1.0)  # gain, bias, gamma
    noise_sigma: float = 0.03
    background_texture: str = "flat"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "intensity", tuple(float(v) for v in self.intensity))
        if not self.client_id:
            raise ConfigError("client_id must be non-empty", "client_id")
        if self.n_samples < 10:
            raise ConfigError(f"n_samples must be at least 10, got {self.n_samples}", "n_samples")
        if self.shape_family not in SHAPE_FAMILIES:
            raise ConfigError(f"shape_family must be one of {SHAPE_FAMILIES}", "shape_family")
        if self.background_texture not in TEXTURES:
            raise ConfigError(f"background_texture must be one of {TEXTURES}", "background_texture")
        if len(self.intensity) != 3:
            raise ConfigError("intensity must be (gain, bias, gamma)", "intensity")
        if self.intensity[2] <= 0:
            raise ConfigError("gamma must be positive", "gamma")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative", "noise_sigma")

    @property
    def gain(self):
        return self.intensity[0]

    @property
    def bias(self):
        return self.intensity[1]

    @property
    def gamma(self):
        return self.intensity[2]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intensity"] = list(self.intensity)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(**d)


@dataclass
class Sample:
    image: np.ndarray  # (1, S, S) float64 in [0, 1]
    mask: np.ndarray  # (S, S) uint8 in {0, 1}
    downsampled_mask: np.ndarray = field(default=None)

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            np.array_equal(self.image, other.image)
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.downsampled_mask, other.downsampled_mask)
        )


def majority_pool(mask: np.ndarray, factor: int) -> np.ndarray:
    """Block-wise majority vote; a tied block counts as foreground."""
    s = mask.shape[0]
    if s % factor:
        raise ValueError(f"mask side {s} not divisible by {factor}")
    blocks = mask.reshape(s // factor, factor, s // factor, factor).astype(np.float64)
    return (blocks.mean(axis=(1, 3)) >= 0.5).astype(np.uint8)


# ---------------------------------------------------------------- rendering


def _signed_distance(family, rng, yy, xx):
    if family == "ellipse":
        cy, cx = rng.uniform(0.3, 0.7, size=2)
        a, b = rng.uniform(0.1, 0.3, size=2)
        theta = rng.uniform(0, math.pi)
        u = (xx - cx) * math.cos(theta) + (yy - cy) * math.sin(theta)
        v = -(xx - cx) * math.sin(theta) + (yy - cy) * math.cos(theta)
        return (1.0 - np.sqrt((u / a) ** 2 + (v / b) ** 2)) * min(a, b)
    cy, cx = rng.uniform(0.3, 0.7, size=2)
    rho = np.hypot(yy - cy, xx - cx)
    phi = np.arctan2(yy - cy, xx - cx)
    if family == "blob":
        r0 = rng.uniform(0.12, 0.28)
        amps = rng.uniform(0.0, 0.25, size=2)
        phases = rng.uniform(0, 2 * math.pi, size=2)
        radius = r0 * (1.0 + amps[0] * np.cos(2 * phi + phases[0]) + amps[1] * np.cos(3 * phi + phases[1]))
        return radius - rho
    outer = rng.uniform(0.18, 0.32)
    width = rng.uniform(0.06, 0.12)
    return np.minimum(rho - (outer - width), outer - rho)


def _texture(kind, rng, yy, xx):
    if kind == "flat":
        return np.zeros_like(yy)
    if kind == "gradient":
        angle = rng.uniform(0, 2 * math.pi)
        return 0.3 * ((xx - 0.5) * math.cos(angle) + (yy - 0.5) * math.sin(angle))
    coarse = rng.normal(0.0, 0.12, size=(yy.shape[0] // 4, yy.shape[1] // 4))
    return np.kron(coarse, np.ones((4, 4)))[: yy.shape[0], : yy.shape[1]]


def generate_sample(spec: DatasetSpec, index: int, image_size: int = 64, mask_scale: int = 4) -> Sample:
    rng = stream(spec.seed, "sample", spec.client_id, index)
    centers = (np.arange(image_size) + 0.5) / image_size
    yy, xx = np.meshgrid(centers, centers, indexing="ij")
    for _ in range(MAX_RETRIES):
        dist = _signed_distance(spec.shape_family, rng, yy, xx)
        mask = (dist > 0).astype(np.uint8)
        if MIN_FOREGROUND <= mask.mean() <= MAX_FOREGROUND:
            break
    else:
        raise GenerationError(f"{spec.client_id}[{index}]: foreground fraction out of range after {MAX_RETRIES} tries")
    soft = 1.0 / (1.0 + np.exp(-dist * image_size))
    clean = BACKGROUND_LEVEL + (FOREGROUND_LEVEL - BACKGROUND_LEVEL) * soft
    img = np.clip(spec.gain * clean**spec.gamma + spec.bias, 0.0, 1.0)
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    img = img + (1.0 - soft) * _texture(spec.background_texture, rng, yy, xx)
    img = np.clip(img, 0.0, 1.0)
    return Sample(img[None], mask, majority_pool(mask, mask_scale))


def generate_client(spec: DatasetSpec, image_size: int = 64, mask_scale: int = 4) -> list[Sample]:
    return [generate_sample(spec, i, image_size, mask_scale) for i in range(spec.n_samples)]


def split(dataset, train_fraction: float = 0.9, seed: int = 0):
    """Deterministic shuffled split; the test side gets round((1 - f) * n) items, at least one.

    Halves round up. The product is rounded to 9 decimals first so that
    ``1 - 0.9`` landing just under 0.1 does not turn 2.5 into 2.
    """
    n = len(dataset)
    if n < 10:
        raise ValueError(f"need at least 10 samples to split, got {n}")
    n_test = max(1, int(math.floor(round((1.0 - train_fraction) * n, 9) + 0.5)))
    order = stream(seed, "split").permutation(n)
    test_idx = sorted(order[:n_test].tolist())
    train_idx = sorted(order[n_test:].tolist())
    return [dataset[i] for i in train_idx], [dataset[i] for i in test_idx]


def stack_samples(samples) -> tuple[np.ndarray, np.ndarray]:
    """(N,1,S,S) images and (N,s,s) downsampled masks as float64."""
    images = np.stack([s.image for s in samples]).astype(np.float64)
    masks = np.stack([s.downsampled_mask for s in samples]).astype(np.float64)
    return images, masks


# ---------------------------------------------------------------- domain shift


def intensity_histogram(samples, bins: int = 32) -> np.ndarray:
    values = np.concatenate([s.image.ravel() for s in samples])
    hist, _ = np.histogram(values, bins=bins, range=(0.0, 1.0))
    return hist / hist.sum()


def histogram_distance(a, b, bins: int = 32) -> float:
    """Mean absolute difference between normalised intensity histograms."""
    return float(np.abs(intensity_histogram(a, bins) - intensity_histogram(b, bins)).mean())


def default_client_specs(n_samples: int = 40, seed: int = 0):
    """Four strongly shifted training sites plus one held-out site."""
    clients = [
        DatasetSpec("site_a", n_samples, "ellipse", (1.0, 0.0, 1.0), 0.03, "flat", seed),
        DatasetSpec("site_b", n_samples, "blob", (-0.9, 0.95, 1.0), 0.05, "gradient", seed + 1),
        DatasetSpec("site_c", n_samples, "ring", (0.6, 0.3, 2.0), 0.08, "speckle", seed + 2),
        DatasetSpec("site_d", n_samples, "ellipse", (1.2, -0.1, 0.5), 0.04, "speckle", seed + 3),
    ]
    unseen = DatasetSpec("site_unseen", n_samples, "blob", (0.8, 0.1, 1.5), 0.05, "gradient", seed + 4)
    return clients, unseen


# ---------------------------------------------------------------- PFSD files


def dumps_sample(sample: Sample) -> bytes:
    s = sample.mask.shape[0]
    image = np.ascontiguousarray(sample.image.reshape(s, s), dtype="<f8")
    return SAMPLE_MAGIC + struct.pack("<BI", SAMPLE_VERSION, s) + image.tobytes() + sample.mask.astype(np.uint8).tobytes()


def loads_sample(buf: bytes, mask_scale: int = 4) -> Sample:
    if len(buf) < 4:
        raise FormatError("truncated magic", len(buf))
    if buf[:4] != SAMPLE_MAGIC:
        raise FormatError("bad magic, expected PFSD", 0)
    if len(buf) < 9:
        raise FormatError("truncated header", len(buf))
    version, s = struct.unpack("<BI", buf[4:9])
    if version != SAMPLE_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    img_end = 9 + 8 * s * s
    if len(buf) < img_end:
        raise FormatError("truncated image data", len(buf))
    end = img_end + s * s
    if len(buf) < end:
        raise FormatError("truncated mask data", len(buf))
    if len(buf) > end:
        raise FormatError("trailing bytes after mask", end)
    image = np.frombuffer(buf[9:img_end], dtype="<f8").astype(np.float64).reshape(1, s, s)
    mask = np.frombuffer(buf[img_end:end], dtype=np.uint8).copy()
    bad = np.flatnonzero(mask > 1)
    if bad.size:
        raise FormatError(f"mask byte value {int(mask[bad[0]])} is not 0 or 1", img_end + int(bad[0]))
    mask = mask.reshape(s, s)
    return Sample(image, mask, majority_pool(mask, mask_scale))


def write_sample(path, sample: Sample) -> None:
    Path(path).write_bytes(dumps_sample(sample))


def read_sample(path, mask_scale: int = 4) -> Sample:
    return loads_sample(Path(path).read_bytes(), mask_scale)


def write_dataset(directory, spec: DatasetSpec, samples) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    for i, sample in enumerate(samples):
        write_sample(directory / f"sample_{i:04d}.pfsd", sample)
    return directory


def read_dataset(directory, mask_scale: int = 4):
    directory = Path(directory)
    spec = DatasetSpec.from_dict(json.loads((directory / "spec.json").read_text()))
    samples = [read_sample(p, mask_scale) for p in sorted(directory.glob("sample_*.pfsd"))]
    return spec, samples
