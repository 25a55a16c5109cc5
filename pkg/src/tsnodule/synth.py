"""Synthetic longitudinal nodule phantoms matched to the published cohort statistics.

Each study is a pair of 64^3 CT volumes with one soft-edged spherical nodule.
Malignant nodules grow and gain density between the scans; benign ones do not.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import rng_for
from .volume import Volume

MIN_DIAMETER_MM = 5.0


@dataclass(frozen=True)
class Gaussian:
    mean: float
    sd: float


@dataclass(frozen=True)
class SynthConfig:
    n_studies: int = 161
    n_malignant: int = 103
    t1_diameter: Gaussian = Gaussian(10.96, 5.24)
    malignant_growth: Gaussian = Gaussian(4.1, 3.0)
    benign_growth: Gaussian = Gaussian(0.0, 0.8)
    core_hu: Gaussian = Gaussian(40.0, 20.0)
    malignant_density_gain_hu: float = 30.0
    background_hu: Gaussian = Gaussian(-850.0, 40.0)
    spacing_mm: float = 1.0
    dims: int = 64
    center_offset: int = 4
    center_jitter: int = 2
    interval_days: tuple[int, int] = (32, 2464)
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.n_malignant <= self.n_studies or self.n_studies < 1:
            raise ValueError("need 1 <= n_studies and 0 <= n_malignant <= n_studies")
        for name in ("t1_diameter", "malignant_growth", "benign_growth", "core_hu", "background_hu"):
            g = getattr(self, name)
            if isinstance(g, dict):
                g = Gaussian(**g)
            elif not isinstance(g, Gaussian):
                g = Gaussian(*g)
            object.__setattr__(self, name, g)
            if g.sd < 0:
                raise ValueError(f"{name}.sd must be non-negative")
        if self.spacing_mm <= 0 or self.dims < 8:
            raise ValueError("spacing must be positive and dims at least 8")
        if self.center_offset + self.center_jitter >= self.dims // 2:
            raise ValueError("center offsets would leave the volume")
        object.__setattr__(self, "interval_days", tuple(int(v) for v in self.interval_days))
        lo, hi = self.interval_days
        if not 0 < lo <= hi:
            raise ValueError("interval_days must be a positive range")


@dataclass(frozen=True)
class TimePoint:
    volume: str
    center_voxel: tuple[int, int, int]
    diameter_mm: float


@dataclass(frozen=True)
class NoduleStudy:
    study_id: str
    label: str
    t1: TimePoint
    t2: TimePoint
    interval_days: int

    def __post_init__(self):
        if self.label not in ("malignant", "benign"):
            raise ValueError(f"label must be 'malignant' or 'benign', got {self.label!r}")
        if self.interval_days < 1:
            raise ValueError("interval_days must be positive")
        for tp in (self.t1, self.t2):
            if tp.diameter_mm < MIN_DIAMETER_MM:
                raise ValueError(f"{self.study_id}: diameter {tp.diameter_mm} below {MIN_DIAMETER_MM} mm")

    @property
    def y(self) -> int:
        return int(self.label == "malignant")


def study_labels(cfg: SynthConfig) -> np.ndarray:
    """1 = malignant; exactly ``n_malignant`` ones placed by a seeded permutation."""
    order = rng_for(cfg.seed, "labels").permutation(cfg.n_studies)
    return (order < cfg.n_malignant).astype(np.int64)


def draw_growth(cfg: SynthConfig, malignant: bool, rng: np.random.Generator) -> float:
    """Raw diameter change before any clipping."""
    g = cfg.malignant_growth if malignant else cfg.benign_growth
    return float(rng.normal(g.mean, g.sd))


def render_nodule(background: np.ndarray, center_xyz, diameter_mm: float, core_hu: float,
                  spacing_mm: float) -> np.ndarray:
    """Blend a sphere into ``background`` with a 2 mm linear edge ramp."""
    n = background.shape[0]
    ax = np.arange(n) * spacing_mm
    cx, cy, cz = (c * spacing_mm for c in center_xyz)
    r = np.sqrt((ax[:, None, None] - cz) ** 2 + (ax[None, :, None] - cy) ** 2 + (ax[None, None, :] - cx) ** 2)
    s = np.clip((diameter_mm / 2 + 1.0 - r) / 2.0, 0.0, 1.0)
    return (background + (core_hu - background) * s).astype(np.float32)


def synthesize_study(cfg: SynthConfig, index: int):
    """Return ``(NoduleStudy, t1 Volume, t2 Volume)``; volume paths are relative names."""
    if not 0 <= index < cfg.n_studies:
        raise IndexError(f"study index {index} outside [0, {cfg.n_studies})")
    malignant = bool(study_labels(cfg)[index])
    rng = rng_for(cfg.seed, "study", index)
    d1 = max(MIN_DIAMETER_MM, float(rng.normal(cfg.t1_diameter.mean, cfg.t1_diameter.sd)))
    growth = draw_growth(cfg, malignant, rng)
    if malignant:
        growth = max(growth, 0.0)
    d2 = max(MIN_DIAMETER_MM, d1 + growth)
    core1 = float(rng.normal(cfg.core_hu.mean, cfg.core_hu.sd))
    core2 = core1 + (cfg.malignant_density_gain_hu if malignant else 0.0)
    mid = cfg.dims // 2
    c1 = tuple(int(v) for v in mid + rng.integers(-cfg.center_offset, cfg.center_offset + 1, 3))
    c2 = tuple(int(v) for v in np.add(c1, rng.integers(-cfg.center_jitter, cfg.center_jitter + 1, 3)))
    interval = int(rng.integers(cfg.interval_days[0], cfg.interval_days[1] + 1))
    shape = (cfg.dims,) * 3
    vols = []
    for t, (c, d, core) in enumerate(((c1, d1, core1), (c2, d2, core2)), start=1):
        bg = rng_for(cfg.seed, "background", index, t).normal(cfg.background_hu.mean, cfg.background_hu.sd, shape)
        vols.append(Volume(render_nodule(bg, c, d, core, cfg.spacing_mm), (cfg.spacing_mm,) * 3))
    sid = f"S{index:04d}"
    study = NoduleStudy(sid, "malignant" if malignant else "benign",
                        TimePoint(f"{sid}_t1.nvol", c1, d1), TimePoint(f"{sid}_t2.nvol", c2, d2), interval)
    return study, vols[0], vols[1]
