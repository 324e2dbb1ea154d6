"""Volumes, the VOL1 file format, resampling, candidates and synthetic phantoms."""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

AIR_HU = -1000.0
VOL_MAGIC = b"VOL1"
VOL_VERSION = 1
_HEADER = struct.Struct("<4sIIII3f")  # 32 bytes


class VolumeFormatError(ValueError):
    pass


@dataclass
class Volume:
    """HU voxels indexed ``[x, y, z]`` with spacing in mm."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"volume must be 3-D with positive extents, got {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


# ---------------------------------------------------------------------------
# VOL1 I/O


def volume_to_bytes(vol: Volume) -> bytes:
    nx, ny, nz = vol.shape
    head = _HEADER.pack(VOL_MAGIC, VOL_VERSION, nx, ny, nz, *vol.spacing)
    # z-major slice order: x varies fastest
    body = np.ascontiguousarray(vol.voxels.transpose(2, 1, 0), dtype="<f4").tobytes()
    return head + body


def volume_from_bytes(blob: bytes) -> Volume:
    if len(blob) < _HEADER.size:
        raise VolumeFormatError(f"truncated header: expected {_HEADER.size} bytes, got {len(blob)}")
    magic, version, nx, ny, nz, sx, sy, sz = _HEADER.unpack_from(blob, 0)
    if magic != VOL_MAGIC:
        raise VolumeFormatError(f"bad magic {magic!r} at byte offset 0")
    if version != VOL_VERSION:
        raise VolumeFormatError(f"unsupported version {version} at byte offset 4")
    expected = _HEADER.size + 4 * nx * ny * nz
    if len(blob) != expected:
        raise VolumeFormatError(f"expected {expected} bytes, got {len(blob)} (data starts at byte offset {_HEADER.size})")
    vox = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(nz, ny, nx).transpose(2, 1, 0)
    return Volume(np.ascontiguousarray(vox, dtype=np.float32), (sx, sy, sz))


def write_volume(path: str | os.PathLike, vol: Volume) -> None:
    with open(path, "wb") as fh:
        fh.write(volume_to_bytes(vol))


def read_volume(path: str | os.PathLike) -> Volume:
    with open(path, "rb") as fh:
        return volume_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# preprocessing


def resample_isotropic(vol: Volume) -> Volume:
    """Linear interpolation along z so the slice spacing equals the in-plane spacing.

    Output slice ``k`` sits at ``k * sx`` mm from the first input slice;
    positions beyond the last input slice take its value.
    """
    sx, sy, sz = vol.spacing
    if sx != sy:
        raise ValueError(f"in-plane spacing must be isotropic, got sx={sx}, sy={sy}")
    if sz == sx:
        return vol
    nz = vol.shape[2]
    new_nz = max(1, int(round(nz * sz / sx)))
    coord = np.minimum(np.arange(new_nz) * (sx / sz), nz - 1)
    lo = np.floor(coord).astype(np.int64)
    hi = np.minimum(lo + 1, nz - 1)
    frac = (coord - lo).astype(np.float64)
    v = vol.voxels.astype(np.float64)
    out = v[:, :, lo] * (1.0 - frac) + v[:, :, hi] * frac
    return Volume(out.astype(np.float32), (sx, sy, sx))


def extract_candidate(vol: Volume | np.ndarray, center: Sequence[int], extent: int, fill: float = AIR_HU) -> np.ndarray:
    """Cube ``[c - extent//2, c - extent//2 + extent)`` per axis, padded with ``fill``."""
    voxels = vol.voxels if isinstance(vol, Volume) else np.asarray(vol)
    center = tuple(int(c) for c in center)
    if len(center) != 3 or any(c < 0 or c >= n for c, n in zip(center, voxels.shape)):
        raise ValueError(f"center {center} outside volume of shape {voxels.shape}")
    out = np.full((extent,) * 3, fill, dtype=np.float32)
    src, dst = [], []
    for c, n in zip(center, voxels.shape):
        start = c - extent // 2
        lo, hi = max(start, 0), min(start + extent, n)
        src.append(slice(lo, hi))
        dst.append(slice(lo - start, hi - start))
    out[tuple(dst)] = voxels[tuple(src)]
    return out


def window_hu(x: np.ndarray, low: float, high: float) -> np.ndarray:
    """Clip to ``[low, high]`` and map linearly to ``[0, 1]``."""
    if high <= low:
        raise ValueError("window high must exceed low")
    return (np.clip(x, low, high) - low) / (high - low)


# fixed window used for supervised inputs: midpoints of the pretraining intervals
DEFAULT_WINDOW = (-1100.0, 700.0)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class Nodule:
    center: tuple[int, int, int]
    diameter_mm: float


@dataclass
class ScanManifest:
    scan_id: str
    spacing: tuple[float, float, float]
    nodules: list[Nodule] = field(default_factory=list)
    negatives: list[tuple[int, int, int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "scan_id": self.scan_id,
            "spacing": list(self.spacing),
            "nodules": [{"center": list(n.center), "diameter_mm": n.diameter_mm} for n in self.nodules],
            "negatives": [list(c) for c in self.negatives],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> ScanManifest:
        return cls(
            scan_id=d["scan_id"],
            spacing=tuple(d["spacing"]),
            nodules=[Nodule(tuple(n["center"]), float(n["diameter_mm"])) for n in d["nodules"]],
            negatives=[tuple(c) for c in d["negatives"]],
        )

    def nodule_boxes(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Inclusive voxel bounding boxes ``(lo, hi)`` of the nodules."""
        sp = np.asarray(self.spacing)
        boxes = []
        for n in self.nodules:
            r = np.ceil(n.diameter_mm / 2.0 / sp).astype(int)
            c = np.asarray(n.center)
            boxes.append((c - r, c + r))
        return boxes

    def candidates(self, extent: int) -> list[CandidateRegion]:
        out = [CandidateRegion(self.scan_id, tuple(n.center), extent, 1) for n in self.nodules]
        out += [CandidateRegion(self.scan_id, tuple(c), extent, 0) for c in self.negatives]
        return out


@dataclass(frozen=True)
class CandidateRegion:
    scan_id: str
    center: tuple[int, int, int]
    extent: int
    label: int

    def to_dict(self) -> dict:
        return {"scan_id": self.scan_id, "center": list(self.center), "label": self.label}


def write_candidate_manifest(path, candidates: Sequence[CandidateRegion]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([c.to_dict() for c in candidates], fh, indent=1)


def read_candidate_manifest(path, extent: int) -> list[CandidateRegion]:
    with open(path, encoding="utf-8") as fh:
        rows = json.load(fh)
    return [CandidateRegion(r["scan_id"], tuple(r["center"]), extent, int(r["label"])) for r in rows]


def region_box(center: Sequence[int], extent: int) -> tuple[np.ndarray, np.ndarray]:
    lo = np.asarray(center) - extent // 2
    return lo, lo + extent - 1


def boxes_intersect(a: tuple[np.ndarray, np.ndarray], b: tuple[np.ndarray, np.ndarray]) -> bool:
    return bool(np.all(a[0] <= b[1]) and np.all(b[0] <= a[1]))


# ---------------------------------------------------------------------------
# synthetic phantoms


@dataclass
class PhantomConfig:
    shape: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    background_hu: float = -850.0
    background_std: float = 60.0
    smoothing_sigma: float = 1.0
    vessel_count: int = 8
    vessel_radius: tuple[float, float] = (1.0, 2.0)
    vessel_hu: tuple[float, float] = (-100.0, 100.0)
    vessel_steps: int = 60
    nodule_count: int = 3
    nodule_diameter_mm: tuple[float, float] = (6.0, 9.0)
    nodule_hu: tuple[float, float] = (-100.0, 200.0)
    negative_count: int = 10
    candidate_extent: int = 12
    seed: int = 0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        for name in ("vessel_radius", "vessel_hu", "nodule_diameter_mm", "nodule_hu"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        extent_mm = min(n * s for n, s in zip(self.shape, self.spacing))
        if self.nodule_diameter_mm[1] >= extent_mm:
            raise ValueError("nodule diameter must be smaller than the volume")
        if self.nodule_diameter_mm[0] > self.nodule_diameter_mm[1]:
            raise ValueError("nodule diameter range is inverted")

    @classmethod
    def from_dict(cls, d: Mapping) -> PhantomConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown PhantomConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


class PlacementError(RuntimeError):
    pass


def _grid(shape):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")


def _stamp_tube(vol, mask, path, radius, spacing):
    """Mark voxels within ``radius`` mm of any point on ``path``."""
    sp = np.asarray(spacing)
    r_vox = np.ceil(radius / sp).astype(int) + 1
    for p in path:
        c = np.round(p).astype(int)
        lo = np.maximum(c - r_vox, 0)
        hi = np.minimum(c + r_vox + 1, vol.shape)
        if np.any(hi <= lo):
            continue
        sub = tuple(slice(a, b) for a, b in zip(lo, hi))
        gx, gy, gz = np.meshgrid(*(np.arange(a, b) for a, b in zip(lo, hi)), indexing="ij")
        d2 = ((gx - p[0]) * sp[0]) ** 2 + ((gy - p[1]) * sp[1]) ** 2 + ((gz - p[2]) * sp[2]) ** 2
        mask[sub] |= d2 <= radius**2


def generate_phantom_scan(cfg: PhantomConfig, scan_id: str = "scan_000") -> tuple[Volume, ScanManifest]:
    """Deterministic lung-like volume with vessels, nodules and labelled candidates."""
    rng = np.random.default_rng(cfg.seed)
    shape = cfg.shape
    sp = np.asarray(cfg.spacing)

    noise = ndimage.gaussian_filter(rng.standard_normal(shape), cfg.smoothing_sigma)
    noise /= noise.std() + 1e-12
    vol = cfg.background_hu + cfg.background_std * noise

    # vessels: random-walk tubes
    vessel_points = []
    for _ in range(cfg.vessel_count):
        radius = rng.uniform(*cfg.vessel_radius)
        hu = rng.uniform(*cfg.vessel_hu)
        pos = rng.uniform(0, np.asarray(shape) - 1)
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        path = []
        for _ in range(cfg.vessel_steps):
            path.append(pos.copy())
            direction = direction + 0.3 * rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            pos = np.clip(pos + direction, 0, np.asarray(shape) - 1)
        mask = np.zeros(shape, dtype=bool)
        _stamp_tube(vol, mask, path, radius, cfg.spacing)
        vol[mask] = hu + 15.0 * rng.standard_normal(int(mask.sum()))
        vessel_points += [tuple(np.round(p).astype(int)) for p in path]

    # nodules: soft-edged ellipsoids, mutually non-overlapping
    half = cfg.candidate_extent // 2
    nodules: list[Nodule] = []
    gx, gy, gz = _grid(shape)
    for _ in range(cfg.nodule_count):
        for _attempt in range(1000):
            diam = rng.uniform(*cfg.nodule_diameter_mm)
            r_vox = np.ceil(diam / 2.0 / sp).astype(int)
            lo = np.maximum(r_vox + 1, half)
            hi = np.asarray(shape) - np.maximum(r_vox + 1, cfg.candidate_extent - half)
            if np.any(hi <= lo):
                raise PlacementError("volume too small for requested nodules")
            c = np.array([rng.integers(a, b) for a, b in zip(lo, hi)])
            ok = all(
                np.linalg.norm((c - np.asarray(n.center)) * sp) > (diam + n.diameter_mm) / 2.0 + 2.0 for n in nodules
            )
            if ok:
                break
        else:
            raise PlacementError(f"could not place nodule {len(nodules) + 1} without overlap after 1000 attempts")
        axes = diam / 2.0 * rng.uniform(0.8, 1.2, size=3)
        hu = rng.uniform(*cfg.nodule_hu)
        r = np.sqrt(
            ((gx - c[0]) * sp[0] / axes[0]) ** 2 + ((gy - c[1]) * sp[1] / axes[1]) ** 2 + ((gz - c[2]) * sp[2] / axes[2]) ** 2
        )
        # soft edge: weight 1 inside, logistic falloff across the boundary
        w = 1.0 / (1.0 + np.exp((r - 1.0) / 0.08))
        tex = hu + 20.0 * rng.standard_normal(shape)
        vol = vol * (1.0 - w) + tex * w
        nodules.append(Nodule(tuple(int(v) for v in c), float(diam)))

    manifest = ScanManifest(scan_id, tuple(cfg.spacing), nodules, [])
    boxes = manifest.nodule_boxes()

    def admissible(center) -> bool:
        if any(ci < 0 or ci >= n for ci, n in zip(center, shape)):
            return False
        rb = region_box(center, cfg.candidate_extent)
        if any(boxes_intersect(rb, b) for b in boxes):
            return False
        return tuple(center) not in manifest.negatives

    if cfg.negative_count > 0 and vessel_points:
        order = rng.permutation(len(vessel_points))
        for i in order[:500]:
            if admissible(vessel_points[i]):
                manifest.negatives.append(tuple(int(v) for v in vessel_points[i]))
                break
    attempts = 0
    while len(manifest.negatives) < cfg.negative_count:
        attempts += 1
        if attempts > 1000 * max(cfg.negative_count, 1):
            raise PlacementError("could not place negative candidates outside nodule boxes")
        c = tuple(int(rng.integers(0, n)) for n in shape)
        if admissible(c):
            manifest.negatives.append(c)

    return Volume(vol.astype(np.float32), cfg.spacing), manifest


def write_manifest(path, manifest: ScanManifest) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest.to_dict(), fh, indent=1)


def read_manifest(path) -> ScanManifest:
    with open(path, encoding="utf-8") as fh:
        return ScanManifest.from_dict(json.load(fh))
