"""Volume files, resizing, augmentation, manifests and patient-level folds.

DAVL layout (little-endian)::

    offset  size  field
    0       4     magic b"DAVL"
    4       2     u16 format version (1)
    6       12    u32 D, u32 H, u32 W
    18      1     u8 mask flag (0/1)
    19      4*DHW float32 voxels, D-major, W fastest
    ...     ceil(DHW/8) mask bits, LSB first (only when flag = 1)
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import (
    BadMagicError, ConfigError, InputError, TruncatedFileError, UnsupportedVersionError,
)

MAGIC = b"DAVL"
VERSION = 1
_HEADER = struct.Struct("<4sHIIIB")
HEADER_SIZE = _HEADER.size  # 19

LABELS = {0: "normal", 1: "common pneumonia", 2: "COVID-19"}
COVID = 2


@dataclass
class VolumeSample:
    voxels: np.ndarray  # (1, D, H, W) float32 in [0, 1]
    label: Optional[int] = None
    patient_id: str = ""
    lesion_mask: Optional[np.ndarray] = None  # (1, D, H, W) uint8 in {0, 1}

    def __post_init__(self):
        v = np.asarray(self.voxels, dtype=np.float32)
        if v.ndim == 3:
            v = v[None]
        if v.ndim != 4 or v.shape[0] != 1:
            raise InputError(f"voxels must have shape (1, D, H, W), got {v.shape}")
        if v.size and (v.min() < 0 or v.max() > 1 or not np.all(np.isfinite(v))):
            raise InputError("voxel intensities must lie in [0, 1]")
        self.voxels = v
        if self.lesion_mask is not None:
            m = np.asarray(self.lesion_mask)
            if m.ndim == 3:
                m = m[None]
            if m.shape != v.shape:
                raise InputError(f"mask shape {m.shape} differs from voxel shape {v.shape}")
            self.lesion_mask = (m != 0).astype(np.uint8)

    @property
    def geometry(self) -> tuple:
        return self.voxels.shape[1:]


# --------------------------------------------------------------------------
# DAVL files

def encode_volume(sample: VolumeSample) -> bytes:
    d, h, w = sample.geometry
    has_mask = sample.lesion_mask is not None
    parts = [_HEADER.pack(MAGIC, VERSION, d, h, w, int(has_mask)),
             sample.voxels.astype("<f4").tobytes()]
    if has_mask:
        parts.append(np.packbits(sample.lesion_mask.reshape(-1), bitorder="little").tobytes())
    return b"".join(parts)


def decode_volume(buf: bytes, label=None, patient_id: str = "") -> VolumeSample:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"not a DAVL file (magic {buf[:4]!r})")
    if len(buf) < HEADER_SIZE:
        raise TruncatedFileError(f"header needs {HEADER_SIZE} bytes, file has {len(buf)}")
    _, version, d, h, w, flag = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise UnsupportedVersionError(f"DAVL version {version} not supported (expected {VERSION})")
    if min(d, h, w) < 1 or flag not in (0, 1):
        raise TruncatedFileError(f"corrupt header: dims {(d, h, w)}, mask flag {flag}")
    n = d * h * w
    end = HEADER_SIZE + 4 * n
    mask_bytes = (n + 7) // 8 if flag else 0
    if len(buf) < end + mask_bytes:
        raise TruncatedFileError(f"expected {end + mask_bytes} bytes, file has {len(buf)}")
    voxels = np.frombuffer(buf, dtype="<f4", count=n, offset=HEADER_SIZE).astype(np.float32)
    mask = None
    if flag:
        bits = np.frombuffer(buf, dtype=np.uint8, count=mask_bytes, offset=end)
        mask = np.unpackbits(bits, count=n, bitorder="little").reshape(1, d, h, w)
    return VolumeSample(voxels.reshape(1, d, h, w), label, patient_id, mask)


def write_volume(sample: VolumeSample, path) -> None:
    Path(path).write_bytes(encode_volume(sample))


def read_volume(path, label=None, patient_id: str = "") -> VolumeSample:
    return decode_volume(Path(path).read_bytes(), label, patient_id)


# --------------------------------------------------------------------------
# resampling

def _linear_axis(a: np.ndarray, axis: int, n_out: int, align: str = "corner") -> np.ndarray:
    n_in = a.shape[axis]
    if n_in == n_out:
        return a
    if n_in == 1:
        return np.repeat(a, n_out, axis=axis)
    if align == "corner":
        pos = np.linspace(0.0, n_in - 1, n_out) if n_out > 1 else np.zeros(1)
    else:
        # output i samples input i * n_in / n_out, clamped past the last input
        pos = np.minimum(np.arange(n_out) * (n_in / n_out), n_in - 1)
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 2)
    frac = (pos - lo).astype(a.dtype)
    shape = [1] * a.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    return np.take(a, lo, axis=axis) * (1 - frac) + np.take(a, lo + 1, axis=axis) * frac


def trilinear(volume: np.ndarray, target: Sequence[int], align: str = "corner") -> np.ndarray:
    """Trilinear resampling of the last three axes.

    ``align="corner"`` maps first and last samples onto each other.
    ``align="stride"`` places input index j at output coordinate j * (n_out / n_in),
    which is where a same-padded strided network centres feature cell j.
    """
    if align not in ("corner", "stride"):
        raise ValueError(f"unknown alignment {align!r}")
    out = volume
    for k, n in enumerate(target):
        out = _linear_axis(out, volume.ndim - 3 + k, int(n), align)
    return out


def _nearest(volume: np.ndarray, target: Sequence[int]) -> np.ndarray:
    out = volume
    for k, n in enumerate(target):
        axis = volume.ndim - 3 + k
        n_in = out.shape[axis]
        idx = np.rint(np.linspace(0.0, n_in - 1, n)).astype(int) if n > 1 else np.zeros(1, int)
        out = np.take(out, idx, axis=axis)
    return out


def resize_volume(sample: VolumeSample, target: Sequence[int]) -> VolumeSample:
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1:
        raise ConfigError(f"target geometry must be three positive extents, got {target}")
    if target == sample.geometry:
        return sample
    vox = np.clip(trilinear(sample.voxels, target), 0.0, 1.0).astype(np.float32)
    mask = None if sample.lesion_mask is None else _nearest(sample.lesion_mask, target)
    return replace(sample, voxels=vox, lesion_mask=mask)


# --------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentToggles:
    flip: bool = True
    rotate: bool = True
    translate: bool = True
    scale: bool = True
    flip_p: float = 0.5
    max_rotation_deg: float = 10.0
    max_translation: float = 0.10
    scale_range: tuple = (0.9, 1.1)

    @classmethod
    def off(cls) -> "AugmentToggles":
        return cls(flip=False, rotate=False, translate=False, scale=False)

    @property
    def any(self) -> bool:
        return self.flip or self.rotate or self.translate or self.scale


def affine_resample(volume: np.ndarray, angle_deg: float, shift_hw: Sequence[float], scale: float,
                    order: int) -> np.ndarray:
    """Rotate in the (H, W) plane, scale isotropically about the centre and shift; zero fill."""
    from scipy import ndimage
    d, h, w = volume.shape[-3:]
    centre = np.array([(d - 1) / 2, (h - 1) / 2, (w - 1) / 2])
    a = math.radians(angle_deg)
    rot = np.array([[1, 0, 0], [0, math.cos(a), -math.sin(a)], [0, math.sin(a), math.cos(a)]])
    fwd = rot * scale
    inv = np.linalg.inv(fwd)
    shift = np.array([0.0, shift_hw[0], shift_hw[1]])
    # output o samples input at inv @ (o - centre - shift) + centre
    offset = centre - inv @ (centre + shift)
    out = np.empty_like(volume)
    for c in range(volume.shape[0]):
        out[c] = ndimage.affine_transform(volume[c], inv, offset=offset, order=order,
                                          mode="constant", cval=0.0)
    return out


def augment(sample: VolumeSample, rng: np.random.Generator, toggles: AugmentToggles) -> VolumeSample:
    """Random left-right flip, axial rotation, in-plane translation and isotropic scaling."""
    if not toggles.any:
        return sample
    vox, mask = sample.voxels, sample.lesion_mask
    # draws happen unconditionally so toggling one transform does not shift the others' streams
    flip = rng.random() < toggles.flip_p
    angle = rng.uniform(-toggles.max_rotation_deg, toggles.max_rotation_deg)
    frac = rng.uniform(-toggles.max_translation, toggles.max_translation, size=2)
    scale = rng.uniform(*toggles.scale_range)
    if toggles.flip and flip:
        vox = vox[..., ::-1]
        mask = None if mask is None else mask[..., ::-1]
    angle = angle if toggles.rotate else 0.0
    shift = frac * np.array(vox.shape[-2:]) if toggles.translate else np.zeros(2)
    scale = scale if toggles.scale else 1.0
    if angle != 0.0 or scale != 1.0 or np.any(shift != 0):
        vox = np.clip(affine_resample(vox, angle, shift, scale, order=1), 0.0, 1.0)
        if mask is not None:
            mask = affine_resample(mask.astype(np.float32), angle, shift, scale, order=0)
    return replace(sample, voxels=np.ascontiguousarray(vox, dtype=np.float32),
                   lesion_mask=None if mask is None else np.ascontiguousarray(mask))


# --------------------------------------------------------------------------
# manifests and folds

@dataclass
class ManifestRow:
    path: str
    label: int
    patient_id: str
    fold: int = -1


MANIFEST_HEADER = ["path", "label", "patient_id", "fold"]


def write_manifest(rows: Sequence[ManifestRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in rows:
            writer.writerow([r.path, r.label, r.patient_id, r.fold])


def read_manifest(path, check_files: bool = True) -> list[ManifestRow]:
    """Parse a manifest; relative paths are resolved against the manifest's directory."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise InputError(f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}, got {header}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != 4:
                raise InputError(f"{path}:{lineno}: expected 4 fields, got {len(rec)}")
            try:
                rows.append(ManifestRow(rec[0], int(rec[1]), rec[2], int(rec[3])))
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from None
    seen = set()
    for r in rows:
        if r.path in seen:
            raise InputError(f"{path}: duplicate path {r.path}")
        seen.add(r.path)
        if r.label not in LABELS:
            raise InputError(f"{path}: label {r.label} for {r.path} not in {sorted(LABELS)}")
        if check_files and not (path.parent / r.path).exists():
            raise InputError(f"{path}: missing volume file {r.path}")
    return rows


def split_folds(rows: Sequence[ManifestRow], k: int = 5, seed: int = 0) -> list[ManifestRow]:
    """Assign folds by patient: shuffled patients are dealt round-robin into k folds."""
    patients = sorted({r.patient_id for r in rows})
    if any(not r.patient_id for r in rows):
        raise InputError("every manifest row needs a patient_id")
    if k < 1 or k > len(patients):
        raise InputError(f"cannot split {len(patients)} patients into {k} folds")
    order = np.random.default_rng(seed).permutation(len(patients))
    fold_of = {patients[i]: pos % k for pos, i in enumerate(order)}
    return [replace(r, fold=fold_of[r.patient_id]) for r in rows]


def load_samples(rows: Sequence[ManifestRow], root, geometry: Optional[Sequence[int]] = None) -> list[VolumeSample]:
    root = Path(root)
    out = []
    for r in rows:
        s = read_volume(root / r.path, label=r.label, patient_id=r.patient_id)
        out.append(resize_volume(s, geometry) if geometry is not None else s)
    return out


def iterate_batches(samples: Sequence[VolumeSample], batch_size: int, rng: Optional[np.random.Generator] = None,
                    toggles: Optional[AugmentToggles] = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (volumes (N,1,D,H,W), labels (N,)); shuffled and augmented when ``rng`` is given."""
    order = np.arange(len(samples)) if rng is None else rng.permutation(len(samples))
    for start in range(0, len(order), batch_size):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        if rng is not None and toggles is not None:
            chunk = [augment(s, rng, toggles) for s in chunk]
        x = np.stack([s.voxels for s in chunk]).astype(np.float32)
        y = np.array([s.label for s in chunk], dtype=np.int64)
        yield x, y
