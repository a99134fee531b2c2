"""Rotated orthogonal-plane triplets and multi-scale 64x64 patch samples."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import kernels
from .volume import PAD_HU, NoduleRecord, Volume, world_to_voxel

PATCH_SIDE = 64
DEFAULT_SCALES = (10.0, 20.0, 40.0)
HU_MIN, HU_MAX = -1200.0, 400.0
SHIFT_SIGMA = 1.0 / (3.0 * np.sqrt(3.0))
N_SHIFTS = 3
N_FLIPS = 4  # none, vertical, horizontal, both

# canonical (u, v) in-plane axes: axial, coronal, sagittal
CANONICAL_FRAMES = np.array([
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
    [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
])


def theta_schedule(n: int) -> np.ndarray:
    """Rotation angles (k - 1) * pi / (2n) for k = 1..n."""
    if n < 1:
        raise ValueError(f"need at least one angle, got {n}")
    return np.arange(n) * np.pi / (2 * n)


def rotation_matrix(theta: float) -> np.ndarray:
    """R_z(theta) @ R_y(theta) @ R_x(theta): rotate about x, then y, then z."""
    c, s = np.cos(theta), np.sin(theta)
    rx = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    ry = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    return rz @ ry @ rx


@dataclass(frozen=True)
class PlaneTriplet:
    center: tuple
    frames: np.ndarray  # (3 views, 2 axes u/v, 3 components)
    theta: float

    def normals(self) -> np.ndarray:
        return np.cross(self.frames[:, 0], self.frames[:, 1])


def triplet_planes(q, theta: float) -> PlaneTriplet:
    if not np.isfinite(theta):
        raise ValueError("theta must be finite")
    frames = CANONICAL_FRAMES @ rotation_matrix(theta).T
    return PlaneTriplet(tuple(float(c) for c in q), frames, float(theta))


def normalize_intensity(hu):
    """Clamp to [-1200, 400] HU and map linearly onto [0, 1]."""
    return (np.clip(hu, HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)


def _catmull_rom(t):
    t = np.abs(t)
    return np.where(t <= 1, 1.5 * t**3 - 2.5 * t**2 + 1,
                    np.where(t < 2, -0.5 * t**3 + 2.5 * t**2 - 4 * t + 2, 0.0))


@lru_cache(maxsize=64)
def resize_matrix(n_in: int, n_out: int = PATCH_SIDE) -> np.ndarray:
    """(n_out, n_in) Catmull-Rom resampling weights, pixel-centre aligned, edge-clamped."""
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    base = np.floor(pos).astype(int)
    m = np.zeros((n_out, n_in))
    for off in (-1, 0, 1, 2):
        idx = base + off
        w = _catmull_rom(pos - idx)
        np.add.at(m, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), w)
    m.flags.writeable = False
    return m


def intermediate_size(v: Volume, d: float) -> int:
    step = min(v.spacing[0], v.spacing[1])
    return max(2, int(round(d / step)))


def extract_patch(v: Volume, frame, q, d: float, side=PATCH_SIDE) -> np.ndarray:
    """Normalised ``side x side`` patch of physical width ``d`` mm on the plane ``frame``.

    The plane is first sampled trilinearly on an n x n grid whose step is the
    finest in-plane voxel spacing, then resized with Catmull-Rom bicubic
    weights.  Rows run along the frame's v axis, columns along u.
    """
    if d <= 0:
        raise ValueError("patch size must be positive")
    frame = np.asarray(frame, dtype=np.float64)
    n = intermediate_size(v, d)
    offs = ((np.arange(n) + 0.5) / n - 0.5) * d
    pts = (np.asarray(q, dtype=np.float64)
           + offs[:, None, None] * frame[1]   # rows along v
           + offs[None, :, None] * frame[0])  # columns along u
    coords = np.ascontiguousarray(world_to_voxel(v, pts.reshape(-1, 3)))
    grid = kernels.trilinear(v.values, coords, PAD_HU).reshape(n, n)
    r = resize_matrix(n, side)
    return normalize_intensity(r @ grid @ r.T).astype(np.float32)


@dataclass
class MultiScaleSample:
    patches: np.ndarray  # (n_scales, 3 views, side, side) float32
    label: int
    theta: float
    aug: tuple = (0, 0)  # (shift index, flip index)
    scales: tuple = DEFAULT_SCALES
    source: NoduleRecord | None = None


def _patch_stack(v, center, theta, scales, side=PATCH_SIDE):
    tri = triplet_planes(center, theta)
    out = np.empty((len(scales), 3, side, side), dtype=np.float32)
    for s, d in enumerate(scales):
        for view in range(3):
            out[s, view] = extract_patch(v, tri.frames[view], center, d, side)
    return out


def extract_sample(v: Volume, rec: NoduleRecord, theta: float, scales=DEFAULT_SCALES) -> MultiScaleSample:
    scales = tuple(float(s) for s in scales)
    if not scales or min(scales) <= 0:
        raise ValueError("scales must be a non-empty list of positive sizes")
    return MultiScaleSample(_patch_stack(v, rec.center, theta, scales), rec.label, float(theta),
                            (0, 0), scales, rec)


def apply_flip(patches: np.ndarray, flip: int) -> np.ndarray:
    """Flip every patch of a sample the same way: 0 none, 1 vertical, 2 horizontal, 3 both."""
    if flip == 0:
        return patches
    if flip == 1:
        return np.ascontiguousarray(patches[..., ::-1, :])
    if flip == 2:
        return np.ascontiguousarray(patches[..., :, ::-1])
    if flip == 3:
        return np.ascontiguousarray(patches[..., ::-1, ::-1])
    raise ValueError(f"flip index {flip} not in 0..3")


def draw_shifts(rng_seed: int, n=N_SHIFTS) -> np.ndarray:
    """``n`` centre offsets (mm) from N(0, sigma^2 I), redrawn until inside the unit ball."""
    rng = np.random.default_rng(rng_seed)
    out = np.zeros((n, 3))
    for i in range(n):
        while True:
            s = rng.normal(0.0, SHIFT_SIGMA, size=3)
            if np.linalg.norm(s) <= 1.0:
                out[i] = s
                break
    return out


def augment_sample(v: Volume, rec: NoduleRecord, theta: float, rng_seed: int,
                   scales=DEFAULT_SCALES, only=None) -> list:
    """The 16 training views of one (nodule, angle): 4 centres x 4 flips.

    ``only`` optionally restricts output to a set of ``(shift, flip)`` tags,
    skipping extraction for the rest; the shifts drawn are unaffected.
    """
    scales = tuple(float(s) for s in scales)
    shifts = np.vstack([np.zeros(3), draw_shifts(rng_seed)])
    out = []
    for si, shift in enumerate(shifts):
        tags = [(si, f) for f in range(N_FLIPS) if only is None or (si, f) in only]
        if not tags:
            continue
        center = tuple(np.asarray(rec.center) + shift)
        base = _patch_stack(v, center, theta, scales)
        for tag in tags:
            out.append(MultiScaleSample(apply_flip(base, tag[1]), rec.label, float(theta), tag, scales, rec))
    return out


# ---------------------------------------------------------------- sample store

STORE_MAGIC = b"TPSS"
STORE_VERSION = 1


class StoreFormatError(ValueError):
    pass


class StoreMagicError(StoreFormatError):
    pass


class StoreVersionError(StoreFormatError):
    pass


class StoreTruncatedError(StoreFormatError):
    pass


@dataclass
class SampleStore:
    """Columnar in-memory store of multi-scale samples."""

    scales: tuple
    labels: np.ndarray  # (n,) uint8
    thetas: np.ndarray  # (n,) float64
    aug: np.ndarray  # (n, 2) uint8
    patches: np.ndarray  # (n, n_scales, 3, side, side) float32

    def __len__(self):
        return len(self.labels)

    @property
    def side(self):
        return self.patches.shape[-1]

    @classmethod
    def from_samples(cls, samples, scales=None) -> "SampleStore":
        scales = tuple(scales or (samples[0].scales if samples else DEFAULT_SCALES))
        side = samples[0].patches.shape[-1] if samples else PATCH_SIDE
        n = len(samples)
        patches = np.empty((n, len(scales), 3, side, side), dtype=np.float32)
        for i, s in enumerate(samples):
            patches[i] = s.patches
        return cls(scales,
                   np.array([s.label for s in samples], dtype=np.uint8),
                   np.array([s.theta for s in samples], dtype=np.float64),
                   np.array([s.aug for s in samples], dtype=np.uint8).reshape(n, 2),
                   patches)

    def select_scales(self, scales) -> "SampleStore":
        """View restricted to a subset of scales (e.g. the 40 mm stream for 1-scale models)."""
        idx = [self.scales.index(float(s)) for s in scales]
        return SampleStore(tuple(float(s) for s in scales), self.labels, self.thetas, self.aug,
                           self.patches[:, idx])

    def class_counts(self, n_classes=6):
        return np.bincount(self.labels, minlength=n_classes)


def _record_dtype(n_scales, side):
    return np.dtype([("label", "u1"), ("theta", "<f8"), ("shift", "u1"), ("flip", "u1"),
                     ("patches", "<f4", (n_scales, 3, side, side))])


def save_store(store: SampleStore, path) -> None:
    """Header (magic, version, count, scales, side) then fixed-size little-endian records."""
    n_scales = len(store.scales)
    head = STORE_MAGIC + struct.pack("<III", STORE_VERSION, len(store), n_scales)
    head += struct.pack(f"<{n_scales}d", *store.scales) + struct.pack("<I", store.side)
    rec = np.empty(len(store), dtype=_record_dtype(n_scales, store.side))
    rec["label"] = store.labels
    rec["theta"] = store.thetas
    rec["shift"] = store.aug[:, 0]
    rec["flip"] = store.aug[:, 1]
    rec["patches"] = store.patches
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(rec.tobytes())


def load_store(path) -> SampleStore:
    data = Path(path).read_bytes()
    if data[:4] != STORE_MAGIC:
        raise StoreMagicError(f"expected magic {STORE_MAGIC!r}, found {data[:4]!r}")
    if len(data) < 16:
        raise StoreTruncatedError("header is truncated")
    version, count, n_scales = struct.unpack_from("<III", data, 4)
    if version != STORE_VERSION:
        raise StoreVersionError(f"store version {version}, reader supports {STORE_VERSION}")
    pos = 16
    if len(data) < pos + 8 * n_scales + 4:
        raise StoreTruncatedError("header is truncated")
    scales = struct.unpack_from(f"<{n_scales}d", data, pos)
    pos += 8 * n_scales
    (side,) = struct.unpack_from("<I", data, pos)
    pos += 4
    dt = _record_dtype(n_scales, side)
    if len(data) - pos != count * dt.itemsize:
        raise StoreTruncatedError(
            f"header declares {count} samples ({count * dt.itemsize} bytes), payload has {len(data) - pos}")
    rec = np.frombuffer(data, dtype=dt, count=count, offset=pos)
    return SampleStore(tuple(scales), rec["label"].copy(), rec["theta"].copy(),
                       np.stack([rec["shift"], rec["flip"]], axis=1).astype(np.uint8),
                       np.ascontiguousarray(rec["patches"], dtype=np.float32))
