"""Turn straightened-vessel images into cube sequences for the model."""

from __future__ import annotations

import dataclasses
import math
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .phantom import ConfigError, MPRImage

# unit steps along the 6-neighbourhood, in (z, y, x) order
DIRECTIONS = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])


@dataclass
class SamplingConfig:
    stride: int = 5
    cube_side: int = 29
    max_seq_len: int = 30
    jitter_max: int = 3
    rotate: bool = True
    balance_trim: bool = True
    trim_margin: int = 10
    trim_target: float = 0.08
    seed: int = 0

    def validate(self) -> None:
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.cube_side < 3 or self.cube_side % 2 == 0:
            raise ConfigError(f"cube_side must be odd and >= 3, got {self.cube_side}")
        if self.max_seq_len < 1:
            raise ConfigError(f"max_seq_len must be >= 1, got {self.max_seq_len}")
        if self.jitter_max < 0:
            raise ConfigError(f"jitter_max must be >= 0, got {self.jitter_max}")
        if self.trim_margin < 0:
            raise ConfigError(f"trim_margin must be >= 0, got {self.trim_margin}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SamplingConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown sampling field(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class VolumeSequence:
    cubes: np.ndarray                      # (l, N, N, N)
    center_indices: list[int]
    labels: list[int]
    source_id: str = ""

    def __post_init__(self):
        if not len(self.cubes) == len(self.center_indices) == len(self.labels):
            raise ValueError("cubes, center_indices and labels must have equal length")

    def __len__(self) -> int:
        return len(self.center_indices)


@dataclass
class SequenceDataset:
    """Sequences grouped by source centerline.

    ``train`` holds (possibly trimmed and augmented) training sequences,
    ``eval`` the untouched full-centerline sequences used for validation
    and testing, and ``tracks`` the per-voxel ground-truth labels.
    """

    train: dict[str, list[VolumeSequence]] = field(default_factory=dict)
    eval: dict[str, list[VolumeSequence]] = field(default_factory=dict)
    tracks: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def source_ids(self) -> list[str]:
        return sorted(self.tracks)


def select_centers(image: MPRImage, stride: int) -> list[int]:
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    return list(range(0, image.centerline_length, stride))


def extract_cube(image: MPRImage, center, N: int, fill: float | None = None) -> np.ndarray:
    """Cube of side ``N`` centred on voxel ``center = (z, y, x)``.

    Voxels falling outside the image take ``fill`` (default: the image's
    background intensity).
    """
    if N % 2 == 0 or N < 1:
        raise ConfigError(f"cube side must be odd and positive, got {N}")
    vol = image.intensities
    center = np.asarray(center, dtype=int)
    if np.any(center < 0) or np.any(center >= vol.shape):
        raise ValueError(f"center {tuple(center)} lies outside image of shape {vol.shape}")
    fill = image.background if fill is None else fill
    r = N // 2
    out = np.full((N, N, N), fill, dtype=vol.dtype)
    src, dst = [], []
    for ax in range(3):
        lo, hi = center[ax] - r, center[ax] + r + 1
        slo, shi = max(lo, 0), min(hi, vol.shape[ax])
        src.append(slice(slo, shi))
        dst.append(slice(slo - lo, shi - lo))
    out[tuple(dst)] = vol[tuple(src)]
    return out


def jitter_center(center, jitter_max: int, rng: np.random.Generator, shape=None) -> np.ndarray:
    """Move ``center`` by 0..jitter_max voxels along one of the 6 axis
    directions, clamped to ``shape`` when given."""
    center = np.asarray(center, dtype=int)
    if jitter_max <= 0:
        return center.copy()
    d = DIRECTIONS[rng.integers(6)]
    k = int(rng.integers(0, jitter_max + 1))
    out = center + k * d
    if shape is not None:
        out = np.clip(out, 0, np.asarray(shape) - 1)
    return out


def rotate_cube(cube: np.ndarray, angle: float | None = None,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """Rotate every plane perpendicular to the centerline axis (axis 0) by
    the same angle (radians) about the cube's central axis. A missing angle
    is drawn uniformly from [0, 2*pi)."""
    if angle is None:
        if rng is None:
            raise ValueError("either angle or rng is required")
        angle = float(rng.uniform(0.0, 2.0 * math.pi))
    return kernels.rotate_slices(cube, angle)


def image_rng(seed: int, source_id: str) -> np.random.Generator:
    # one independent stream per image so results do not depend on processing order
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(source_id.encode())]))


def trim_candidate_runs(labels: list[int], margin: int) -> list[tuple[int, int]]:
    """Maximal runs ``[a, b)`` of negative centers lying >= ``margin``
    centers away from every positive center."""
    labels = np.asarray(labels)
    n = len(labels)
    pos = np.flatnonzero(labels)
    idx = np.arange(n)
    if len(pos):
        dist = np.min(np.abs(idx[:, None] - pos[None, :]), axis=1)
    else:
        dist = np.full(n, np.iinfo(np.int64).max)
    ok = (labels == 0) & (dist >= margin)
    runs, a = [], None
    for i in range(n + 1):
        if i < n and ok[i]:
            if a is None:
                a = i
        elif a is not None:
            runs.append((a, i))
            a = None
    return runs


def balance_trim(center_labels: dict[str, list[int]], margin: int, target: float) -> dict[str, np.ndarray]:
    """Keep-masks per source after dropping far-from-lesion negative runs.

    Runs are dropped longest first (ties by source id, then position)
    until the pooled positive fraction reaches ``target`` or no candidate
    runs remain.
    """
    keep = {sid: np.ones(len(lab), dtype=bool) for sid, lab in center_labels.items()}
    total = sum(len(lab) for lab in center_labels.values())
    positives = sum(int(np.sum(lab)) for lab in center_labels.values())
    if positives == 0:
        # the target is unreachable; trimming would only discard data
        warnings.warn("no positive centers; balance trimming skipped", stacklevel=2)
        return keep
    runs = [(b - a, sid, a, b) for sid in sorted(center_labels)
            for a, b in trim_candidate_runs(center_labels[sid], margin)]
    runs.sort(key=lambda r: (-r[0], r[1], r[2]))
    for size, sid, a, b in runs:
        if total > 0 and positives / total >= target:
            break
        keep[sid][a:b] = False
        total -= size
    return keep


def chunk(items: list, max_len: int) -> list[list]:
    return [items[i:i + max_len] for i in range(0, len(items), max_len)]


def _sequences_from_centers(image: MPRImage, centers: list[int], config: SamplingConfig,
                            augment: bool, rng: np.random.Generator | None) -> list[VolumeSequence]:
    c = image.axis
    N = config.cube_side
    out = []
    for part in chunk(centers, config.max_seq_len):
        cubes = np.empty((len(part), N, N, N), dtype=image.intensities.dtype)
        for j, z in enumerate(part):
            pos = np.array([z, c, c])
            if augment and config.jitter_max > 0:
                pos = jitter_center(pos, config.jitter_max, rng, image.intensities.shape)
            cube = extract_cube(image, pos, N)
            if augment and config.rotate:
                cube = rotate_cube(cube, rng=rng)
            cubes[j] = cube
        # labels always come from the un-jittered centerline voxel
        labels = [int(image.labels[z]) for z in part]
        out.append(VolumeSequence(cubes, list(part), labels, image.source_id))
    return out


def build_sequences(image: MPRImage, config: SamplingConfig, augment: bool = True,
                    keep: np.ndarray | None = None) -> list[VolumeSequence]:
    """Centers -> optional balance trim -> optional augmentation -> chunks of <= L.

    ``keep`` overrides the per-image trimming decision (used for
    dataset-level trimming); ``augment=False`` disables jitter and rotation.
    """
    config.validate()
    if image.centerline_length < 1:
        return []
    centers = select_centers(image, config.stride)
    if keep is None and config.balance_trim:
        labels = [int(image.labels[z]) for z in centers]
        keep = balance_trim({image.source_id: labels}, config.trim_margin,
                            config.trim_target)[image.source_id]
    if keep is not None:
        centers = [z for z, k in zip(centers, keep) if k]
    rng = image_rng(config.seed, image.source_id) if augment else None
    return _sequences_from_centers(image, centers, config, augment, rng)


def build_dataset(images: list[MPRImage], config: SamplingConfig,
                  augment_train: bool = True) -> SequenceDataset:
    """Training and evaluation sequences for every image.

    Balance trimming, when enabled, is decided on the pooled label counts of
    all images. Evaluation sequences cover every center and are never
    augmented.
    """
    config.validate()
    centers = {img.source_id: select_centers(img, config.stride) for img in images}
    keep = None
    if config.balance_trim:
        labels = {img.source_id: [int(img.labels[z]) for z in centers[img.source_id]] for img in images}
        keep = balance_trim(labels, config.trim_margin, config.trim_target)
    augment = augment_train and (config.jitter_max > 0 or config.rotate)
    ds = SequenceDataset()
    for img in images:
        sid = img.source_id
        k = keep[sid] if keep is not None else np.ones(len(centers[sid]), dtype=bool)
        ds.train[sid] = build_sequences(img, config, augment=augment, keep=k)
        ds.eval[sid] = build_sequences(img, config, augment=False,
                                       keep=np.ones(len(centers[sid]), dtype=bool))
        ds.tracks[sid] = np.asarray(img.labels, dtype=np.int8)
    return ds
