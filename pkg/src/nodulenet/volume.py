"""CT volumes: file I/O, world/voxel addressing, trilinear sampling, phantoms.

Volumes are stored as ``values[z, y, x]`` (x fastest in memory, matching the
on-disk acquisition order) in float32 HU.
"""

from __future__ import annotations

import csv
import logging
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels

log = logging.getLogger(__name__)

PAD_HU = -1200.0
DEFAULT_SPACING = (0.67, 0.67, 1.0)

LABELS = ("solid", "calcified", "part-solid", "non-solid", "perifissural", "spiculated")
NOT_A_NODULE = "not-a-nodule"
MIN_DIAMETER_MM = 4.0


class VolumeFormatError(ValueError):
    """Malformed volume header."""


class ElementCountError(VolumeFormatError):
    """Payload size disagrees with the declared dimensions."""


class ManifestError(ValueError):
    """Malformed manifest row; the message carries the line number."""


def parse_label(token: str, allow_not_nodule=False) -> int:
    """Map a label token to its class index (``not-a-nodule`` is index 6)."""
    t = token.strip().lower().replace("_", "-").replace(" ", "-")
    aliases = {"partsolid": "part-solid", "nonsolid": "non-solid", "ground-glass": "non-solid",
               "not-nodule": NOT_A_NODULE}
    t = aliases.get(t, t)
    if t in LABELS:
        return LABELS.index(t)
    if allow_not_nodule and t == NOT_A_NODULE:
        return len(LABELS)
    raise ValueError(f"unknown label {token!r}")


@dataclass(frozen=True)
class Volume:
    values: np.ndarray  # float32, shape (nz, ny, nx)
    spacing: tuple = DEFAULT_SPACING  # (sx, sy, sz) mm
    origin: tuple = (0.0, 0.0, 0.0)  # world mm of voxel (0, 0, 0)

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float32)
        if v.ndim != 3 or min(v.shape) < 2:
            raise ValueError(f"volume needs >= 2 voxels on every axis, got {v.shape}")
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3 or not all(np.isfinite(s) and s > 0 for s in sp):
            raise ValueError(f"spacing must be three positive finite values, got {self.spacing}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self):
        """Voxels per axis as (nx, ny, nz)."""
        nz, ny, nx = self.values.shape
        return (nx, ny, nz)

    @property
    def extent_mm(self):
        return tuple((d - 1) * s for d, s in zip(self.dims, self.spacing))

    @property
    def center(self):
        return tuple(o + e / 2 for o, e in zip(self.origin, self.extent_mm))


@dataclass(frozen=True)
class NoduleRecord:
    volume_id: str
    center: tuple  # world mm (x, y, z)
    label: int
    diameter_mm: float
    split: str = ""
    nodule_id: str = ""

    @property
    def label_name(self):
        return LABELS[self.label]

    @property
    def id(self):
        return self.nodule_id or self.volume_id


# ---------------------------------------------------------------- addressing


def world_to_voxel(v: Volume, p) -> np.ndarray:
    """Continuous voxel coordinates (x, y, z) of world point(s) ``p``."""
    p = np.asarray(p, dtype=np.float64)
    return (p - np.asarray(v.origin)) / np.asarray(v.spacing)


def voxel_to_world(v: Volume, c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return c * np.asarray(v.spacing) + np.asarray(v.origin)


def sample_trilinear(v: Volume, p) -> np.ndarray | float:
    """Trilinear HU at world point(s); points off the grid read ``PAD_HU``."""
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    coords = np.ascontiguousarray(world_to_voxel(v, p.reshape(-1, 3)))
    out = kernels.trilinear(v.values, coords, PAD_HU)
    return float(out[0]) if single else out.reshape(p.shape[:-1])


# ---------------------------------------------------------------- file I/O


def save_volume(v: Volume, path) -> Path:
    """Write a MetaImage header (``.mhd``) plus a raw int16 little-endian payload."""
    path = Path(path)
    if path.suffix != ".mhd":
        path = path.with_suffix(".mhd")
    raw = path.with_suffix(".raw")
    hu = v.values
    as_int = np.rint(hu)
    if not np.array_equal(as_int, hu) or hu.min() < -32768 or hu.max() > 32767:
        log.warning("%s: HU values rounded/clipped to int16 on save", path.name)
    raw.write_bytes(np.clip(as_int, -32768, 32767).astype("<i2").tobytes())
    nx, ny, nz = v.dims
    header = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        f"Offset = {' '.join(repr(o) for o in v.origin)}",
        f"ElementSpacing = {' '.join(repr(s) for s in v.spacing)}",
        f"DimSize = {nx} {ny} {nz}",
        "ElementType = MET_SHORT",
        f"ElementDataFile = {raw.name}",
    ]
    path.write_text("\n".join(header) + "\n")
    return path


def _parse_header(path: Path) -> dict:
    fields = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise VolumeFormatError(f"{path}:{lineno}: expected 'Key = value', got {line!r}")
        key, value = line.split("=", 1)
        fields[key.strip()] = value.strip()
    return fields


def load_volume(path, fmt="metaimage") -> Volume:
    """Read a volume written by :func:`save_volume`.

    ``fmt="raw+sidecar"`` accepts a ``.raw`` path and looks for the header
    next to it (same stem, ``.mhd``).
    """
    path = Path(path)
    if fmt == "raw+sidecar":
        path = path.with_suffix(".mhd")
    elif fmt != "metaimage":
        raise ValueError(f"unknown volume format {fmt!r}")
    if not path.exists():
        raise FileNotFoundError(path)
    h = _parse_header(path)
    for key in ("NDims", "DimSize", "ElementSpacing", "ElementType", "ElementDataFile"):
        if key not in h:
            raise VolumeFormatError(f"{path}: header lacks {key}")
    try:
        ndims = int(h["NDims"])
        dims = [int(t) for t in h["DimSize"].split()]
        spacing = [float(t) for t in h["ElementSpacing"].split()]
        origin = [float(t) for t in h.get("Offset", "0 0 0").split()]
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: {exc}") from None
    if ndims != 3 or len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
        raise VolumeFormatError(f"{path}: expected a 3-d image")
    if h["ElementType"] != "MET_SHORT":
        raise VolumeFormatError(f"{path}: only MET_SHORT payloads are supported, got {h['ElementType']}")
    if h.get("BinaryDataByteOrderMSB", "False").lower() == "true":
        raise VolumeFormatError(f"{path}: big-endian payloads are not supported")
    raw = path.parent / h["ElementDataFile"]
    if not raw.exists():
        raise FileNotFoundError(raw)
    data = np.frombuffer(raw.read_bytes(), dtype="<i2") if raw.stat().st_size % 2 == 0 else None
    expected = dims[0] * dims[1] * dims[2]
    if data is None or data.size != expected:
        got = raw.stat().st_size / 2
        raise ElementCountError(f"{raw}: header declares {expected} elements, payload holds {got:g}")
    nx, ny, nz = dims
    return Volume(data.reshape(nz, ny, nx).astype(np.float32), tuple(spacing), tuple(origin))


# ---------------------------------------------------------------- manifests

MANIFEST_FIELDS = ("volume_path", "x_mm", "y_mm", "z_mm", "label", "diameter_mm", "split")


def write_manifest(records, path, volume_paths=None) -> None:
    """One record per line; ``volume_paths`` maps volume_id to the stored path."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        for r in records:
            vp = volume_paths[r.volume_id] if volume_paths else r.volume_id
            w.writerow([vp, repr(r.center[0]), repr(r.center[1]), repr(r.center[2]),
                        r.label_name, repr(r.diameter_mm), r.split])


def parse_manifest(path, min_diameter=MIN_DIAMETER_MM):
    """Parse a manifest, dropping nodules below ``min_diameter``.

    Returns ``(records, n_dropped)``.  ``volume_id`` holds the volume path
    resolved against the manifest's directory.
    """
    path = Path(path)
    records = []
    dropped = 0
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return records, dropped
    start = 1 if rows[0] and rows[0][0].strip() == "volume_path" else 0
    seen = {}
    for lineno, row in enumerate(rows[start:], start + 1):
        if not row or not "".join(row).strip() or row[0].startswith("#"):
            continue
        if len(row) not in (6, 7):
            raise ManifestError(f"{path}:{lineno}: expected 6 or 7 fields, got {len(row)}")
        try:
            x, y, z, diam = float(row[1]), float(row[2]), float(row[3]), float(row[5])
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
        try:
            label = parse_label(row[4])
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
        split = row[6].strip() if len(row) == 7 else ""
        if split not in ("", "train", "validation", "test"):
            raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
        if diam < min_diameter:
            dropped += 1
            continue
        vol = row[0].strip()
        vol_path = str((path.parent / vol)) if not Path(vol).is_absolute() else vol
        stem = Path(vol).stem
        k = seen.get(stem, 0)
        seen[stem] = k + 1
        nid = stem if k == 0 else f"{stem}#{k}"
        records.append(NoduleRecord(vol_path, (x, y, z), label, diam, split, nid))
    if dropped:
        log.info("%s: dropped %d nodules with diameter < %g mm", path.name, dropped, min_diameter)
    return records, dropped


# ---------------------------------------------------------------- phantoms


@dataclass(frozen=True)
class PhantomSpec:
    label: int
    seed: int
    nodule_radius_mm: float = 5.0
    background_hu_mean: float = -850.0
    background_hu_std: float = 50.0
    clutter_density: float = 0.04  # vessels per cm^3
    dims: tuple = (64, 64, 48)  # (nx, ny, nz)
    spacing: tuple = DEFAULT_SPACING
    volume_id: str = field(default="")

    def __post_init__(self):
        if not 2.0 <= self.nodule_radius_mm <= 20.0:
            raise ValueError(f"nodule radius {self.nodule_radius_mm} mm outside [2, 20]")
        if self.clutter_density < 0:
            raise ValueError("clutter density must be non-negative")
        if not 0 <= self.label < len(LABELS):
            raise ValueError(f"label index {self.label} out of range")


# class-conditional HU: (mean, spread, clip_lo, clip_hi) of the per-phantom nodule mean
_NODULE_HU = {
    "solid": (-50.0, 80.0, -250.0, 150.0),
    "non-solid": (-525.0, 100.0, -680.0, -370.0),
    "calcified": (500.0, 150.0, 250.0, 900.0),
}
_INTERIOR_NOISE = 25.0
_FISSURE_HU = -600.0


def _draw_hu(rng, kind):
    mean, spread, lo, hi = _NODULE_HU[kind]
    return float(np.clip(rng.normal(mean, spread), lo, hi))


def _soft_inside(signed_dist, width=0.35):
    """Partial-volume weight: 1 deep inside (negative distance), 0 outside."""
    return 0.5 * (1.0 - np.tanh(signed_dist / width))


def _segment_distance(pts, a, b):
    ab = b - a
    t = np.clip(((pts - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(pts - (a + t[..., None] * ab), axis=-1), t


def _random_unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def generate_phantom(spec: PhantomSpec):
    """Render a synthetic chest-CT block with one class-conditional nodule.

    Returns ``(Volume, NoduleRecord)``.  Output is fully determined by the
    spec (including its seed); values are integral HU so the int16 file
    format round-trips exactly.
    """
    rng = np.random.default_rng(spec.seed)
    nx, ny, nz = spec.dims
    sp = np.asarray(spec.spacing, dtype=np.float64)
    extent = (np.asarray(spec.dims) - 1) * sp
    r = spec.nodule_radius_mm
    if 2 * r >= extent.min():
        raise ValueError(f"nodule diameter {2 * r} mm does not fit the {extent.min():.1f} mm volume")
    kind = LABELS[spec.label]
    center = extent / 2 + rng.uniform(-1.0, 1.0, size=3)

    zz, yy, xx = np.meshgrid(np.arange(nz) * sp[2], np.arange(ny) * sp[1], np.arange(nx) * sp[0],
                             indexing="ij")
    pts = np.stack([xx, yy, zz], axis=-1)
    rel = pts - center
    dist = np.linalg.norm(rel, axis=-1)

    hu = rng.normal(spec.background_hu_mean, spec.background_hu_std, size=dist.shape)

    # vessels: bright tubes that keep clear of the nodule
    volume_cm3 = float(np.prod(extent)) / 1000.0
    n_vessels = rng.poisson(spec.clutter_density * volume_cm3)
    for _ in range(n_vessels):
        direction = _random_unit(rng)
        for _attempt in range(20):
            anchor = rng.uniform(0, 1, size=3) * extent
            off = anchor - center
            perp = off - (off @ direction) * direction
            if np.linalg.norm(perp) > r + 2.5:
                break
        else:
            continue
        radius = rng.uniform(0.5, 1.5)
        a, b = anchor - direction * 200.0, anchor + direction * 200.0
        d, _ = _segment_distance(pts, a, b)
        w = _soft_inside(d - radius)
        hu = hu * (1 - w) + w * rng.uniform(-60.0, 40.0)

    if kind == "perifissural":
        # fissure: a 1 mm sheet through the nodule, spanning the whole block
        normal = _random_unit(rng)
        plane_d = np.abs(rel @ normal - rng.uniform(-0.5, 0.5) * r)
        w = _soft_inside(plane_d - 0.5, width=0.15)
        hu = hu * (1 - w) + w * _FISSURE_HU

    noise = rng.normal(0.0, _INTERIOR_NOISE, size=dist.shape)
    if kind in ("solid", "perifissural", "spiculated"):
        level = _draw_hu(rng, "solid")
    elif kind == "calcified":
        level = _draw_hu(rng, "calcified")
    else:
        level = _draw_hu(rng, "non-solid")
    w = _soft_inside(dist - r)
    hu = hu * (1 - w) + w * (level + noise)

    if kind == "part-solid":
        core_r = rng.uniform(0.3, 0.6) * r
        core_center = center + _random_unit(rng) * rng.uniform(0, 0.3) * (r - core_r)
        core_level = _draw_hu(rng, "solid")
        w = _soft_inside(np.linalg.norm(pts - core_center, axis=-1) - core_r)
        hu = hu * (1 - w) + w * (core_level + noise)

    if kind == "spiculated":
        near = dist <= 2.5 * r + 2.0
        local_pts, local_hu, local_noise = pts[near], hu[near], noise[near]
        for _ in range(int(rng.integers(6, 15))):
            u = _random_unit(rng)
            length = rng.uniform(0.5, 1.5) * r
            a, b = center + u * (0.8 * r), center + u * (r + length)
            d, t = _segment_distance(local_pts, a, b)
            thickness = rng.uniform(0.7, 1.2) * (1 - 0.6 * t)
            w = _soft_inside(d - thickness)
            local_hu = np.where(w > 0.01, local_hu * (1 - w) + w * (level + local_noise), local_hu)
        hu[near] = local_hu

    values = np.clip(np.rint(hu), -1200, 3000).astype(np.float32)
    vid = spec.volume_id or f"phantom_{kind}_{spec.seed}"
    vol = Volume(values, tuple(spec.spacing), (0.0, 0.0, 0.0))
    rec = NoduleRecord(vid, tuple(float(c) for c in center), spec.label, 2 * r, nodule_id=vid)
    return vol, rec


PHANTOM_RADIUS_RANGE = (2.5, 8.0)  # mm, so diameters span 5 to 16 mm


def phantom_specs(per_class, seed, split="", radius_range=PHANTOM_RADIUS_RANGE, **kw):
    """Class-balanced phantom specs: ``per_class`` of each label, radii drawn per nodule."""
    tag = zlib.crc32(split.encode())
    rng = np.random.default_rng(np.random.SeedSequence([seed, tag]))
    specs = []
    for label in range(len(LABELS)):
        for i in range(per_class):
            radius = float(rng.uniform(*radius_range))
            sub = int(rng.integers(2**31))
            vid = f"{split + '_' if split else ''}{LABELS[label]}_{i:04d}"
            specs.append(PhantomSpec(label, sub, nodule_radius_mm=round(radius, 3), volume_id=vid, **kw))
    return specs


def generate_phantom_set(splits, seed, **kw):
    """``splits`` maps split name to nodules per class; returns ``[(Volume, NoduleRecord)]``."""
    out = []
    for split, per_class in splits.items():
        for spec in phantom_specs(per_class, seed, split, **kw):
            vol, rec = generate_phantom(spec)
            out.append((vol, replace(rec, split=split)))
    return out
