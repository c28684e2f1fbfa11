"""Synthetic straightened-vessel volumes with parametric plaques.

The vessel is a straight tube running along axis 0 of the volume. Each
cross-section holds a lumen disk, a thin wall ring and background; plaques
shrink the lumen disk eccentrically (the shrunken disk stays tangent to the
original lumen boundary) and fill the vacated crescent with plaque material.
"""

from __future__ import annotations

import dataclasses
import enum
import warnings
from dataclasses import dataclass, field

import numpy as np

SIGNIFICANT_THRESHOLD = 0.5
CALCIFIED_INTENSITY = 900.0


class ConfigError(ValueError):
    """Invalid configuration (maps to CLI exit code 2)."""


class PlaqueKind(str, enum.Enum):
    CALCIFIED = "calcified"
    NON_CALCIFIED = "non_calcified"


class PlaqueProfile(str, enum.Enum):
    RECTANGULAR = "rectangular"
    SMOOTH = "smooth"


@dataclass
class PlaqueSpec:
    start: int
    length: int
    max_narrowing: float
    kind: PlaqueKind = PlaqueKind.NON_CALCIFIED
    profile: PlaqueProfile = PlaqueProfile.RECTANGULAR
    # direction (radians) toward which the plaque bulges into the lumen
    angle: float = 0.0

    def __post_init__(self):
        self.kind = PlaqueKind(self.kind)
        self.profile = PlaqueProfile(self.profile)

    @property
    def stop(self) -> int:
        return self.start + self.length


@dataclass
class PhantomConfig:
    centerline_length: int = 150
    cross_section_size: int = 31
    lumen_radius: float = 4.0
    lumen_intensity: float = 350.0
    wall_intensity: float = 50.0
    background_intensity: float = -50.0
    calcified_intensity: float = CALCIFIED_INTENSITY
    noise_std: float = 0.0
    plaques: list[PlaqueSpec] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self.plaques = [p if isinstance(p, PlaqueSpec) else PlaqueSpec(**p) for p in self.plaques]

    def validate(self) -> None:
        if self.centerline_length < 1:
            raise ConfigError(f"centerline_length must be >= 1, got {self.centerline_length}")
        s = self.cross_section_size
        if s % 2 == 0:
            raise ConfigError(f"cross_section_size must be odd, got {s}")
        if s < 2 * self.lumen_radius + 3:
            raise ConfigError(
                f"cross_section_size {s} too small for lumen_radius {self.lumen_radius}"
                " (needs >= 2*lumen_radius+3)")
        if self.lumen_radius <= 0:
            raise ConfigError(f"lumen_radius must be > 0, got {self.lumen_radius}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        for i, p in enumerate(self.plaques):
            if p.start < 0 or p.length < 1 or p.stop > self.centerline_length:
                raise ConfigError(
                    f"plaques[{i}] span [{p.start},{p.stop}) outside centerline"
                    f" [0,{self.centerline_length})")
            if not 0.0 <= p.max_narrowing <= 1.0:
                raise ConfigError(f"plaques[{i}].max_narrowing must lie in [0,1], got {p.max_narrowing}")
        order = sorted(range(len(self.plaques)), key=lambda i: self.plaques[i].start)
        for a, b in zip(order, order[1:]):
            if self.plaques[b].start < self.plaques[a].stop:
                raise ConfigError(f"plaques[{a}] and plaques[{b}] overlap")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for p in d["plaques"]:
            p["kind"] = PlaqueKind(p["kind"]).value
            p["profile"] = PlaqueProfile(p["profile"]).value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown phantom field(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class MPRImage:
    """A straightened vessel volume shaped ``(length, size, size)``.

    The centerline is the central axis ``(z, c, c)`` with ``c = size // 2``.
    """

    intensities: np.ndarray
    narrowing: np.ndarray
    labels: np.ndarray
    config: PhantomConfig
    source_id: str = ""

    @property
    def centerline_length(self) -> int:
        return self.intensities.shape[0]

    @property
    def axis(self) -> int:
        return self.intensities.shape[1] // 2

    @property
    def background(self) -> float:
        return self.config.background_intensity


def narrowing_to_label(narrowing: float) -> int:
    """1 (significant) iff luminal narrowing is strictly above 50%."""
    if not 0.0 <= narrowing <= 1.0:
        raise ValueError(f"narrowing must lie in [0,1], got {narrowing}")
    return int(narrowing > SIGNIFICANT_THRESHOLD)


def narrowing_profile(config: PhantomConfig) -> np.ndarray:
    """Per-centerline-voxel narrowing fraction implied by the plaque list."""
    out = np.zeros(config.centerline_length)
    for p in config.plaques:
        z = np.arange(p.start, p.stop)
        if p.profile is PlaqueProfile.RECTANGULAR:
            out[z] = p.max_narrowing
        else:
            # raised cosine peaking at the plaque centre
            phase = (z - p.start + 0.5) / p.length
            out[z] = p.max_narrowing * 0.5 * (1.0 - np.cos(2.0 * np.pi * phase))
    return out


def generate_phantom(config: PhantomConfig, source_id: str = "") -> MPRImage:
    config.validate()
    n, s = config.centerline_length, config.cross_section_size
    c = s // 2
    R = config.lumen_radius
    yy, xx = np.meshgrid(np.arange(s) - c, np.arange(s) - c, indexing="ij")
    rho = np.hypot(yy, xx)

    narrowing = narrowing_profile(config)
    plaque_of = np.full(n, -1)
    for i, p in enumerate(config.plaques):
        plaque_of[p.start:p.stop] = i

    vessel = np.full((s, s), config.background_intensity)
    vessel[rho <= R + 1.0] = config.wall_intensity
    vessel[rho <= R] = config.lumen_intensity
    inside = rho <= R

    vol = np.empty((n, s, s))
    for z in range(n):
        sl = vessel.copy()
        k = plaque_of[z]
        if k >= 0 and narrowing[z] > 0:
            p = config.plaques[k]
            r = R * (1.0 - narrowing[z])
            shift = R - r
            # lumen centre moves away from the plaque side
            oy, ox = -shift * np.sin(p.angle), -shift * np.cos(p.angle)
            lumen = np.hypot(yy - oy, xx - ox) <= r
            plaque = inside & ~lumen
            if p.kind is PlaqueKind.CALCIFIED:
                sl[plaque] = config.calcified_intensity
            else:
                sl[plaque] = config.wall_intensity * 1.05
        vol[z] = sl

    if config.noise_std > 0:
        rng = np.random.default_rng(config.seed)
        vol += rng.normal(0.0, config.noise_std, size=vol.shape)
    labels = (narrowing > SIGNIFICANT_THRESHOLD).astype(np.int8)
    return MPRImage(vol.astype(np.float32), narrowing, labels, config, source_id)


def generate_dataset(configs: list[PhantomConfig], prefix: str = "img") -> list[MPRImage]:
    seeds = [cfg.seed for cfg in configs]
    if len(set(seeds)) != len(seeds):
        warnings.warn("duplicate phantom seeds: some images will share their noise realisation",
                      stacklevel=2)
    return [generate_phantom(cfg, f"{prefix}_{i:04d}") for i, cfg in enumerate(configs)]


def random_configs(count: int, seed: int = 0, *, length_range=(100, 150),
                   max_plaques: int = 3, noise_std: float = 20.0,
                   narrowing_range=(0.2, 0.95), plaque_length_range=(10, 40),
                   profile: str | None = PlaqueProfile.SMOOTH.value,
                   **overrides) -> list[PhantomConfig]:
    """Draw ``count`` phantom configs with random non-overlapping plaques.

    Plaque kinds alternate randomly between calcified and non-calcified;
    ``profile=None`` mixes rectangular and smooth profiles.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        length = int(rng.integers(length_range[0], length_range[1] + 1))
        plaques: list[PlaqueSpec] = []
        cursor = int(rng.integers(0, 15))
        for _ in range(int(rng.integers(0, max_plaques + 1))):
            plen = int(rng.integers(plaque_length_range[0], plaque_length_range[1] + 1))
            if cursor + plen > length:
                break
            plaques.append(PlaqueSpec(
                start=cursor, length=plen,
                max_narrowing=float(rng.uniform(*narrowing_range)),
                kind=PlaqueKind.CALCIFIED if rng.random() < 0.5 else PlaqueKind.NON_CALCIFIED,
                profile=profile if profile is not None else rng.choice(["rectangular", "smooth"]),
                angle=float(rng.uniform(0, 2 * np.pi)),
            ))
            cursor += plen + int(rng.integers(5, 40))
        out.append(PhantomConfig(centerline_length=length, noise_std=noise_std, plaques=plaques,
                                 seed=seed * 100003 + i, **overrides))
    return out
