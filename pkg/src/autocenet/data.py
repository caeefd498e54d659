"""Volume I/O, preprocessing, augmentation, phantoms, and fold planning.

Volumes are [nx, ny, nz] arrays with per-axis spacing in mm. The on-disk
".vol" format is a fixed 36-byte little-endian header followed by the
payload in x-fastest order.
"""

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DimensionError, VolumeFormatError
from .metrics import surface_mask

VOL_MAGIC = b"VOL1"
VOL_VERSION = 1
VOL_HEADER_SIZE = 36

WINDOW_LEVEL = 10.0
WINDOW_WIDTH = 700.0


def _check_grid(data, spacing):
    if data.ndim != 3 or any(d <= 0 for d in data.shape):
        raise DimensionError(f"volume dims must be positive 3-D, got {data.shape}")
    if len(spacing) != 3 or any(not s > 0 for s in spacing):
        raise DimensionError(f"spacing must be three positive values, got {spacing}")


@dataclass
class Volume:
    """Scalar intensity volume (HU before windowing, [0,1] after)."""
    data: np.ndarray
    spacing: tuple

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        _check_grid(self.data, self.spacing)

    @property
    def dims(self):
        return self.data.shape


@dataclass
class LabelVolume:
    """Binary segmentation mask on the same grid convention as Volume."""
    data: np.ndarray
    spacing: tuple

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.uint8:
            data = data.astype(np.uint8)
        bad = (data > 1)
        if bad.any():
            raise DimensionError("label volume must be binary")
        self.data = data
        self.spacing = tuple(float(s) for s in self.spacing)
        _check_grid(self.data, self.spacing)

    @property
    def dims(self):
        return self.data.shape


@dataclass
class ContourImage:
    """Binary map marking boundary voxels of a label volume."""
    data: np.ndarray


# ---------------------------------------------------------------------------
# .vol file format


def write_volume(volume, path):
    is_label = isinstance(volume, LabelVolume)
    nx, ny, nz = volume.data.shape
    header = VOL_MAGIC + struct.pack(
        "<IIIIfffB3x", VOL_VERSION, nx, ny, nz,
        np.float32(volume.spacing[0]), np.float32(volume.spacing[1]),
        np.float32(volume.spacing[2]), 1 if is_label else 0)
    payload = volume.data.ravel(order="F")
    payload = payload.astype("<u1" if is_label else "<f4", copy=False)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload.tobytes())


def read_volume(path):
    """Parse a .vol file into a Volume or LabelVolume by its dtype byte."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < VOL_HEADER_SIZE:
        raise VolumeFormatError("file shorter than header", len(buf))
    if buf[:4] != VOL_MAGIC:
        raise VolumeFormatError(f"bad magic {buf[:4]!r}", 0)
    version, nx, ny, nz = struct.unpack_from("<IIII", buf, 4)
    if version != VOL_VERSION:
        raise VolumeFormatError(f"unsupported format version {version}", 4)
    if min(nx, ny, nz) == 0 or max(nx, ny, nz) > 2 ** 16:
        raise VolumeFormatError(f"implausible dims {(nx, ny, nz)}", 8)
    spacing = struct.unpack_from("<fff", buf, 20)
    if any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise VolumeFormatError(f"invalid spacing {spacing}", 20)
    dtype_byte = buf[32]
    if dtype_byte not in (0, 1):
        raise VolumeFormatError(f"unknown dtype byte {dtype_byte}", 32)
    if buf[33:36] != b"\x00\x00\x00":
        raise VolumeFormatError("reserved bytes must be zero", 33)
    count = nx * ny * nz
    itemsize = 4 if dtype_byte == 0 else 1
    expected = VOL_HEADER_SIZE + count * itemsize
    if len(buf) != expected:
        raise VolumeFormatError(
            f"payload length {len(buf) - VOL_HEADER_SIZE} does not match "
            f"dims {(nx, ny, nz)} (expected {count * itemsize} bytes)",
            VOL_HEADER_SIZE)
    raw = np.frombuffer(buf, dtype="<f4" if dtype_byte == 0 else "<u1",
                        count=count, offset=VOL_HEADER_SIZE)
    data = raw.reshape((nx, ny, nz), order="F").copy()
    if dtype_byte == 1:
        bad = np.flatnonzero(data.ravel(order="F") > 1)
        if bad.size:
            raise VolumeFormatError(
                "label payload contains non-binary value",
                VOL_HEADER_SIZE + int(bad[0]))
        return LabelVolume(data, spacing)
    return Volume(data, spacing)


# ---------------------------------------------------------------------------
# preprocessing


def window_normalize(volume):
    """Clip HU to the fixed window and map it linearly onto [0, 1]."""
    lo = WINDOW_LEVEL - WINDOW_WIDTH / 2.0
    hi = WINDOW_LEVEL + WINDOW_WIDTH / 2.0
    data = (np.clip(volume.data, lo, hi) - lo) / (hi - lo)
    return Volume(data.astype(np.float32), volume.spacing)


def _resample_coords(src_dims, dst_dims):
    axes = [(np.arange(d, dtype=np.float64) + 0.5) * (s / d) - 0.5
            for s, d in zip(src_dims, dst_dims)]
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack(grid)


def resample(volume, target_dims):
    """Resample onto a new grid covering the same physical extent.

    Intensities interpolate trilinearly, labels by nearest neighbor;
    spacing is rescaled so extent is preserved.
    """
    target_dims = tuple(int(d) for d in target_dims)
    if any(d <= 0 for d in target_dims):
        raise DimensionError(f"target dims must be positive, got {target_dims}")
    src = volume.data.shape
    spacing = tuple(sp * (s / d)
                    for sp, s, d in zip(volume.spacing, src, target_dims))
    if target_dims == src:
        return type(volume)(volume.data.copy(), spacing)
    coords = _resample_coords(src, target_dims)
    if isinstance(volume, LabelVolume):
        out = ndimage.map_coordinates(volume.data, coords, order=0,
                                      mode="constant", cval=0.0)
        return LabelVolume(out.astype(np.uint8), spacing)
    out = ndimage.map_coordinates(volume.data.astype(np.float64), coords,
                                  order=1, mode="constant", cval=0.0)
    return Volume(out.astype(np.float32), spacing)


def extract_contour(label):
    """Boundary voxels of a binary label, 6-connectivity, border = background."""
    return ContourImage(surface_mask(label.data).astype(np.uint8))


# ---------------------------------------------------------------------------
# augmentation


def _rotation_matrix(angles):
    ax, ay, az = angles
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rx @ ry @ rz


def random_affine(volume, label, rng, probability=0.8, rotation_deg=10.0,
                  scale_range=(0.9, 1.1), translation_frac=0.05):
    """Apply one random affine to an image/label pair, or pass them through.

    The transform rotates about the volume center, scales isotropically,
    and translates by a fraction of the extent, in voxel coordinates.
    Out-of-bounds samples fill with 0.
    """
    if volume.data.shape != label.data.shape:
        raise DimensionError(
            f"image/label dims differ: {volume.data.shape} vs {label.data.shape}")
    if rng.random() >= probability:
        return volume, label
    dims = np.array(volume.data.shape, dtype=np.float64)
    angles = rng.uniform(-rotation_deg, rotation_deg, size=3) * np.pi / 180.0
    scale = rng.uniform(*scale_range)
    shift = rng.uniform(-translation_frac, translation_frac, size=3) * dims

    # map each output voxel back to its source: inverse rotation / scale
    center = (dims - 1.0) / 2.0
    matrix = _rotation_matrix(angles).T / scale
    offset = center - matrix @ (center + shift)
    img = ndimage.affine_transform(volume.data.astype(np.float64), matrix,
                                   offset=offset, order=1,
                                   mode="constant", cval=0.0)
    lab = ndimage.affine_transform(label.data, matrix, offset=offset,
                                   order=0, mode="constant", cval=0.0)
    return (Volume(img.astype(np.float32), volume.spacing),
            LabelVolume(lab.astype(np.uint8), label.spacing))


# ---------------------------------------------------------------------------
# synthetic phantoms


LIVER_MEAN_HU = 100.0
LIVER_STD_HU = 15.0


def _blob_mask(dims, center, radii, perturb=None):
    grids = np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims),
                        indexing="ij")
    level = 1.0
    for g, c, r in zip(grids, center, radii):
        level = level - ((g - c) / r) ** 2
    if perturb is not None:
        level = level + perturb(grids)
    return level > 0.0


def make_phantom(seed, dims=(32, 32, 16), spacing=(1.0, 1.0, 2.0),
                 with_info=False):
    """Deterministic synthetic CT-like case with an ambiguous neighbor.

    A smooth liver-like blob (ellipsoid bent by low-frequency harmonics)
    sits in soft-tissue background; a second unlabeled blob of nearly the
    same intensity touches it so the boundary is ambiguous on intensity
    alone. Foreground stays between 3% and 20% of the voxels.
    """
    dims = tuple(int(d) for d in dims)
    if any(d <= 0 or d % 4 for d in dims):
        raise ConfigurationError(
            f"phantom dims {dims} must be positive and divisible by 4")
    rng = np.random.default_rng(seed)
    dvec = np.array(dims, dtype=np.float64)

    center = dvec / 2.0 + rng.uniform(-0.08, 0.08, size=3) * dvec
    radii = dvec * rng.uniform(0.20, 0.30, size=3)
    waves = [(rng.integers(1, 3, size=3), rng.uniform(0.0, 2 * np.pi, size=3),
              rng.uniform(0.05, 0.18)) for _ in range(3)]

    def perturb(grids):
        total = 0.0
        for freq, phase, amp in waves:
            term = amp
            for g, d, f, ph in zip(grids, dvec, freq, phase):
                term = term * np.cos(2 * np.pi * f * g / d + ph)
            total = total + term
        return total

    # nudge radii until the foreground fraction is inside the target band
    lo_frac, hi_frac = 0.03, 0.20
    mask = _blob_mask(dims, center, radii, perturb)
    for _ in range(40):
        frac = mask.mean()
        if lo_frac <= frac <= hi_frac:
            break
        adjust = (0.10 / max(frac, 1e-4)) ** (1.0 / 3.0)
        radii = radii * np.clip(adjust, 0.8, 1.25)
        mask = _blob_mask(dims, center, radii, perturb)

    # ambiguous neighbor: a blob centered just outside the surface with a
    # mean intensity within one noise sigma of the liver mean
    blob = np.zeros(dims, dtype=bool)
    for _ in range(8):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        blob_radii = radii * rng.uniform(0.35, 0.55, size=3)
        surface_dist = 1.0 / np.sqrt((direction ** 2 / radii ** 2).sum())
        blob_center = center + direction * (surface_dist + 0.6 * blob_radii.mean())
        blob_center = np.clip(blob_center, 0.12 * dvec, 0.88 * dvec)
        blob = _blob_mask(dims, blob_center, blob_radii) & ~mask
        if blob.any():
            break
    blob_mean = LIVER_MEAN_HU + rng.uniform(-LIVER_STD_HU, LIVER_STD_HU)

    hu = np.full(dims, -80.0)
    hu += rng.normal(0.0, 10.0)  # per-case tissue shift
    hu[mask] = rng.normal(LIVER_MEAN_HU, LIVER_STD_HU, size=int(mask.sum()))
    hu[blob] = rng.normal(blob_mean, LIVER_STD_HU, size=int(blob.sum()))
    hu += rng.normal(0.0, 8.0, size=dims)

    volume = Volume(hu.astype(np.float32), spacing)
    label = LabelVolume(mask.astype(np.uint8), spacing)
    if with_info:
        info = {"blob_mask": blob, "blob_mean_hu": float(blob_mean),
                "liver_mean_hu": LIVER_MEAN_HU, "liver_std_hu": LIVER_STD_HU}
        return volume, label, info
    return volume, label


# ---------------------------------------------------------------------------
# fold planning


@dataclass
class FoldPlan:
    seed: int
    mode: str
    test: list
    folds: list       # (train_ids, val_ids) pairs
    fractions: list   # training-fraction schedule; empty for two_fold

    def all_cases(self):
        out = list(self.test)
        seen = set(out)
        for train, val in self.folds:
            for cid in list(train) + list(val):
                if cid not in seen:
                    seen.add(cid)
                    out.append(cid)
        return out


def plan_folds(case_ids, seed, mode="two_fold", test_fraction=4.0 / 9.0,
               fractions=(0.1, 0.3, 0.5, 0.7, 0.9)):
    """Shuffle cases, hold out a test set, and split the remaining pool.

    two_fold: the pool is halved into two folds; each fold trains once
    while the other validates. nfold_fractions: nested training subsets of
    the pool at each requested fraction, with the rest of the pool as
    validation.
    """
    case_ids = list(case_ids)
    if len(set(case_ids)) != len(case_ids):
        raise ConfigurationError("case ids must be unique")
    rng = np.random.default_rng(seed)
    order = [case_ids[i] for i in rng.permutation(len(case_ids))]
    n_test = int(len(order) * test_fraction + 0.5)
    test, pool = order[:n_test], order[n_test:]

    if mode == "two_fold":
        if len(pool) < 2:
            raise ConfigurationError(
                f"two_fold needs at least 2 pool cases, got {len(pool)}")
        half = len(pool) // 2
        fold0, fold1 = pool[:half], pool[half:]
        return FoldPlan(seed=seed, mode=mode, test=test,
                        folds=[(fold0, fold1), (fold1, fold0)], fractions=[])

    if mode == "nfold_fractions":
        if len(pool) < 2 or not test:
            raise ConfigurationError(
                f"nfold_fractions needs a test set and >= 2 pool cases, "
                f"got test={len(test)} pool={len(pool)}")
        folds = []
        for frac in fractions:
            if not 0.0 < frac <= 1.0:
                raise ConfigurationError(f"invalid training fraction {frac}")
            k = max(1, int(len(pool) * frac + 0.5))
            folds.append((pool[:k], pool[k:]))
        return FoldPlan(seed=seed, mode=mode, test=test, folds=folds,
                        fractions=list(fractions))

    raise ConfigurationError(f"unknown fold mode {mode!r}")


# ---------------------------------------------------------------------------
# slice export for quick visual checks


def write_pgm(path, image):
    """8-bit binary PGM (P5) writer for a 2-D array."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise DimensionError(f"PGM export needs a 2-D image, got {img.shape}")
    if img.dtype != np.uint8:
        lo, hi = float(img.min()), float(img.max())
        scale = 255.0 / (hi - lo) if hi > lo else 0.0
        img = ((img - lo) * scale).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(img.tobytes())


def slice_to_pgm(volume, path, axis=2, index=None):
    """Write one slice of a volume (middle slice by default)."""
    if index is None:
        index = volume.data.shape[axis] // 2
    sl = np.take(volume.data, index, axis=axis)
    write_pgm(path, sl)
