"""Class activation maps from the last feature volume and the linear head."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import ModelParams, network_forward
from .data import VolumeSample, trilinear, write_volume
from .errors import ShapeError
from .tensor import Tensor


@dataclass
class CamVolume:
    values: np.ndarray  # (D, H, W) in [0, 1]
    predicted_class: int
    sample_id: str = ""


def min_max(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    if hi <= lo:
        return np.zeros_like(m, dtype=np.float32)
    return ((m - lo) / (hi - lo)).astype(np.float32)


def cam_compute(features, head_weights, c: int, sample_id: str = "") -> CamVolume:
    """Sum of feature maps weighted by the head's row for class ``c``, min-max normalised."""
    f = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    w = np.asarray(head_weights.data if isinstance(head_weights, Tensor) else head_weights, dtype=np.float64)
    if f.ndim != 4:
        raise ShapeError(f"features must be (C, D, H, W), got {f.shape}")
    if w.ndim != 2 or w.shape[1] != f.shape[0]:
        raise ShapeError(f"head weights {w.shape} do not match {f.shape[0]} feature channels")
    if not 0 <= c < w.shape[0]:
        raise ShapeError(f"class {c} outside [0, {w.shape[0]})")
    raw = np.tensordot(w[c], f, axes=(0, 0))
    return CamVolume(min_max(raw), int(c), sample_id)


def upsample(values: np.ndarray, geometry: Sequence[int]) -> np.ndarray:
    """Stride-aligned trilinear upsample of a CAM to ``geometry``.

    With same padding, feature cell j of a network with total stride S is
    centred on input voxel S * j; beyond the last cell the map is held constant.
    """
    return np.clip(trilinear(values, geometry, align="stride"), 0, 1).astype(np.float32)


def sample_cams(params: ModelParams, samples: Sequence[VolumeSample], batch_size: int = 4):
    """Eval-mode CAM for the predicted class of each sample, upsampled to its geometry."""
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        x = np.stack([s.voxels for s in chunk])
        logits, feats = network_forward(params, Tensor(x), training=False)
        for s, lg, ft in zip(chunk, logits.data, feats.data):
            cam = cam_compute(ft, params.fc_weight, int(lg.argmax()), s.patient_id)
            cam.values = upsample(cam.values, s.geometry)
            out.append(cam)
    return out


def write_pgm(path, image: np.ndarray) -> None:
    """Binary 8-bit portable graymap; ``image`` holds values in [0, 1]."""
    pix = np.rint(np.clip(image, 0, 1) * 255).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic != b"P5" or maxval != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    # exactly one whitespace byte separates the header from the raster
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(h, w)


def cam_export(cam: CamVolume, geometry: Sequence[int], out_dir, stem: str = "cam") -> list[Path]:
    """Upsample to ``geometry`` and write ``<stem>.davl`` plus one ``<stem>_dNNN.pgm`` per depth slice."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    values = upsample(cam.values.astype(np.float32), geometry)
    paths = [out_dir / f"{stem}.davl"]
    write_volume(VolumeSample(values[None], cam.predicted_class, cam.sample_id), paths[0])
    for d, plane in enumerate(values):
        p = out_dir / f"{stem}_d{d:03d}.pgm"
        write_pgm(p, plane)
        paths.append(p)
    return paths
