"""Procedural CT-like volumes with depth-sparse lesions.

* label 0 (normal): smooth low-frequency background plus noise.
* label 1 (common pneumonia): faint diffuse blobs whose cores span at least
  70% of the depth slices.
* label 2 (COVID-19): bright compact blobs confined to one contiguous band of
  at most ``sparsity`` x D slices, placed towards the periphery of the plane.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import ManifestRow, VolumeSample, split_folds, write_manifest, write_volume
from .errors import ConfigError


@dataclass(frozen=True)
class SynthConfig:
    # per-label counts: reference cohort class ratios, scaled down 12x
    counts: tuple = (79, 111, 110)
    geometry: tuple = (16, 64, 64)
    covid_lesions: tuple = (1, 3)
    covid_radius: tuple = (3.0, 5.0)
    covid_intensity: tuple = (0.45, 0.6)
    pneumonia_lesions: tuple = (2, 4)
    pneumonia_radius: tuple = (5.0, 9.0)
    pneumonia_intensity: tuple = (0.15, 0.25)
    sparsity: float = 0.25
    diffuse_coverage: float = 0.7
    noise: float = 0.03
    scans_per_patient: int = 2
    folds: int = 5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        object.__setattr__(self, "geometry", tuple(int(g) for g in self.geometry))
        if len(self.counts) != 3 or min(self.counts) < 1:
            raise ConfigError(f"counts must be three positive integers, got {self.counts}")
        if len(self.geometry) != 3 or min(self.geometry) < 1:
            raise ConfigError(f"geometry must be three positive extents, got {self.geometry}")
        if not 0 < self.sparsity <= 1:
            raise ConfigError(f"sparsity must lie in (0, 1], got {self.sparsity}")
        if not 0 < self.diffuse_coverage <= 1:
            raise ConfigError(f"diffuse_coverage must lie in (0, 1], got {self.diffuse_coverage}")
        d, h, w = self.geometry
        if max(self.covid_radius) * 4 > min(h, w) or max(self.pneumonia_radius) * 2 > min(h, w):
            raise ConfigError(f"geometry {self.geometry} too small for the configured lesion radii")
        if self.band_depth < 1:
            raise ConfigError(f"depth {d} too small for sparsity {self.sparsity}")
        if self.scans_per_patient < 1:
            raise ConfigError("scans_per_patient must be >= 1")

    @property
    def band_depth(self) -> int:
        return int(math.floor(self.sparsity * self.geometry[0]))


def _background(rng: np.random.Generator, geometry) -> np.ndarray:
    d, h, w = geometry
    zz, yy, xx = np.meshgrid(np.linspace(0, 1, d), np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    field_ = np.full(geometry, rng.uniform(0.2, 0.3))
    for _ in range(3):
        fz, fy, fx = rng.uniform(0.2, 1.5, size=3)
        phase = rng.uniform(0, 2 * np.pi)
        field_ += 0.04 * np.cos(2 * np.pi * (fz * zz + fy * yy + fx * xx) + phase)
    return field_


def _plane_blob(geometry, centre, radius) -> np.ndarray:
    _, h, w = geometry
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    r2 = (yy - centre[0]) ** 2 + (xx - centre[1]) ** 2
    return np.exp(-r2 / (2 * (radius / 1.5) ** 2))


def _covid_lesions(rng, cfg: SynthConfig):
    d, h, w = cfg.geometry
    band = cfg.band_depth
    d0 = int(rng.integers(0, d - band + 1))
    signal = np.zeros(cfg.geometry)
    mask = np.zeros(cfg.geometry, dtype=bool)
    zz = np.arange(d)
    for _ in range(int(rng.integers(cfg.covid_lesions[0], cfg.covid_lesions[1] + 1))):
        radius = rng.uniform(*cfg.covid_radius)
        amp = rng.uniform(*cfg.covid_intensity)
        # periphery: ring between 55% and 80% of the half-extent from the centre
        theta = rng.uniform(0, 2 * np.pi)
        rho = rng.uniform(0.55, 0.8)
        cy = (h - 1) / 2 + rho * (h / 2 - radius) * np.sin(theta)
        cx = (w - 1) / 2 + rho * (w / 2 - radius) * np.cos(theta)
        cz = rng.uniform(d0, d0 + band - 1)
        depth_profile = np.exp(-((zz - cz) ** 2) / (2 * max(band / 3, 0.5) ** 2))
        depth_profile[(zz < d0) | (zz >= d0 + band)] = 0.0
        blob = amp * depth_profile[:, None, None] * _plane_blob(cfg.geometry, (cy, cx), radius)[None]
        signal = np.maximum(signal, blob)
        mask |= blob > 0.5 * amp
    return signal, mask


def _pneumonia_lesions(rng, cfg: SynthConfig):
    d, h, w = cfg.geometry
    span = int(math.ceil(cfg.diffuse_coverage * d))
    signal = np.zeros(cfg.geometry)
    mask = np.zeros(cfg.geometry, dtype=bool)
    zz = np.arange(d)
    for _ in range(int(rng.integers(cfg.pneumonia_lesions[0], cfg.pneumonia_lesions[1] + 1))):
        radius = rng.uniform(*cfg.pneumonia_radius)
        amp = rng.uniform(*cfg.pneumonia_intensity)
        cy = rng.uniform(radius, h - 1 - radius)
        cx = rng.uniform(radius, w - 1 - radius)
        d0 = int(rng.integers(0, d - span + 1))
        # flat core over [d0, d0 + span) with soft shoulders outside it
        dist = np.maximum(np.maximum(d0 - zz, zz - (d0 + span - 1)), 0)
        depth_profile = np.exp(-(dist ** 2) / 2.0)
        blob = amp * depth_profile[:, None, None] * _plane_blob(cfg.geometry, (cy, cx), radius)[None]
        signal = np.maximum(signal, blob)
        mask |= blob > 0.5 * amp
    return signal, mask


def synth_sample(cfg: SynthConfig, label: int, index: int) -> VolumeSample:
    """One volume; the RNG stream is derived from (seed, label, index) alone."""
    rng = np.random.default_rng([cfg.seed, label, index])
    vol = _background(rng, cfg.geometry)
    mask = None
    if label == 1:
        signal, mask = _pneumonia_lesions(rng, cfg)
        vol = vol + signal
    elif label == 2:
        signal, mask = _covid_lesions(rng, cfg)
        vol = vol + signal
    vol = vol + rng.normal(0.0, cfg.noise, size=cfg.geometry)
    vox = np.clip(vol, 0.0, 1.0).astype(np.float32)[None]
    pid = f"L{label}P{index // cfg.scans_per_patient:05d}"
    return VolumeSample(vox, label, pid, None if mask is None else mask[None].astype(np.uint8))


def synth_generate(cfg: SynthConfig, out_dir, manifest_name: str = "manifest.csv") -> list[ManifestRow]:
    """Write every sample as ``<out_dir>/volumes/*.davl`` plus a manifest with patient-level folds."""
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    rows = []
    for label, count in enumerate(cfg.counts):
        for i in range(count):
            sample = synth_sample(cfg, label, i)
            rel = f"volumes/c{label}_{i:05d}.davl"
            write_volume(sample, out_dir / rel)
            rows.append(ManifestRow(rel, label, sample.patient_id))
    k = min(cfg.folds, len({r.patient_id for r in rows}))
    rows = split_folds(rows, k=k, seed=cfg.seed)
    write_manifest(rows, out_dir / manifest_name)
    return rows
