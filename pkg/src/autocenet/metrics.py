"""Overlap and spacing-aware surface-distance metrics.

Surface distances run on voxel-center point clouds in millimeters. The fast
path uses a KD-tree; every distance function also has an all-pairs oracle
mode that the fast path must match, which the tests enforce.
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionError, UndefinedMetricError


@dataclass
class SurfacePointSet:
    """Boundary voxel centers in mm, in lexicographic index order."""
    points: np.ndarray  # (n, 3) float64

    def __len__(self):
        return len(self.points)


@dataclass
class MetricsReport:
    dsc: float
    precision: float
    sensitivity: float
    hd: float          # None when a surface is empty
    hd95: float
    assd: float
    tp: int
    fp: int
    fn: int

    @property
    def distances_defined(self):
        return self.hd is not None


def surface_mask(fg):
    """Foreground voxels with at least one background 6-neighbor.

    The volume border counts as background, so a blob touching the edge
    still has a surface there.
    """
    fg = np.asarray(fg, dtype=bool)
    p = np.pad(fg, 1, constant_values=False)
    interior = (p[2:, 1:-1, 1:-1] & p[:-2, 1:-1, 1:-1]
                & p[1:-1, 2:, 1:-1] & p[1:-1, :-2, 1:-1]
                & p[1:-1, 1:-1, 2:] & p[1:-1, 1:-1, :-2])
    return fg & ~interior


def confusion_counts(pred, gt):
    """Voxelwise (tp, fp, fn, tn) between two binary label volumes."""
    if pred.data.shape != gt.data.shape:
        raise DimensionError(
            f"label dims differ: {pred.data.shape} vs {gt.data.shape}")
    p = pred.data.astype(bool)
    g = gt.data.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = p.size - tp - fp - fn
    return tp, fp, fn, tn


def f1_precision_sensitivity(tp, fp, fn):
    """Harmonic-mean overlap score with its two factors.

    Empty prediction and empty ground truth count as a perfect match; a
    mismatch against an empty side scores zero.
    """
    if tp + fp == 0 and tp + fn == 0:
        return 1.0, 1.0, 1.0
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    s = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2.0 * p * s / (p + s) if p + s > 0 else 0.0
    return f1, p, s


def extract_surface(label):
    """Surface point cloud of a binary label volume, voxel centers in mm."""
    mask = surface_mask(label.data)
    idx = np.argwhere(mask)  # lexicographic by construction
    spacing = np.asarray(label.spacing, dtype=np.float64)
    return SurfacePointSet(points=idx.astype(np.float64) * spacing)


def _nearest_distances(src, dst, oracle):
    """d(p, dst) for every p in src; oracle mode is all-pairs brute force."""
    if oracle:
        out = np.empty(len(src), dtype=np.float64)
        for i in range(0, len(src), 256):
            chunk = src[i:i + 256]
            d2 = ((chunk[:, None, :] - dst[None, :, :]) ** 2).sum(axis=2)
            out[i:i + 256] = np.sqrt(d2.min(axis=1))
        return out
    dists, _ = cKDTree(dst).query(src)
    return dists


def _require_nonempty(a, b):
    if len(a) == 0 or len(b) == 0:
        raise UndefinedMetricError(
            "surface distance undefined for an empty surface")


def _nearest_rank(dists, percentile):
    """Nearest-rank quantile: rank ceil(q*n), so q=1 is the maximum."""
    n = len(dists)
    rank = int(np.ceil(percentile * n))
    rank = min(max(rank, 1), n)
    return float(np.sort(dists)[rank - 1])


def hausdorff(a, b, percentile=1.0, oracle=False):
    """Symmetric directed-percentile surface distance in mm."""
    _require_nonempty(a, b)
    if not 0.0 < percentile <= 1.0:
        raise ValueError(f"percentile must be in (0, 1], got {percentile}")
    d_ab = _nearest_rank(_nearest_distances(a.points, b.points, oracle), percentile)
    d_ba = _nearest_rank(_nearest_distances(b.points, a.points, oracle), percentile)
    return max(d_ab, d_ba)


def assd(a, b, oracle=False):
    """Average symmetric surface distance in mm."""
    _require_nonempty(a, b)
    d_ab = _nearest_distances(a.points, b.points, oracle)
    d_ba = _nearest_distances(b.points, a.points, oracle)
    return float((d_ab.sum() + d_ba.sum()) / (len(a) + len(b)))


def evaluate(pred, gt, oracle=False):
    """Full per-case report; distances are None when a surface is empty."""
    if pred.data.shape != gt.data.shape:
        raise DimensionError(
            f"label dims differ: {pred.data.shape} vs {gt.data.shape}")
    if tuple(pred.spacing) != tuple(gt.spacing):
        raise DimensionError(
            f"spacings differ: {pred.spacing} vs {gt.spacing}")
    tp, fp, fn, _ = confusion_counts(pred, gt)
    f1, p, s = f1_precision_sensitivity(tp, fp, fn)
    sa = extract_surface(pred)
    sb = extract_surface(gt)
    try:
        hd = hausdorff(sa, sb, 1.0, oracle)
        hd95 = hausdorff(sa, sb, 0.95, oracle)
        mean_sd = assd(sa, sb, oracle)
    except UndefinedMetricError:
        hd = hd95 = mean_sd = None
    return MetricsReport(dsc=f1, precision=p, sensitivity=s,
                         hd=hd, hd95=hd95, assd=mean_sd,
                         tp=tp, fp=fp, fn=fn)


def percent_reduction(old, new):
    """Relative improvement of new over old, as a fraction of old."""
    if old == 0:
        raise ValueError("percent reduction undefined for old == 0")
    return (old - new) / old


# ---------------------------------------------------------------------------
# CSV report serialization

CSV_HEADER = ["case", "dsc", "precision", "sensitivity",
              "hd_mm", "hd95_mm", "assd_mm", "tp", "fp", "fn"]


def _cell(value):
    return "NA" if value is None else repr(value)


def write_report_csv(path, rows):
    """rows: iterable of (case_id, MetricsReport)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for case, r in rows:
            writer.writerow([case, _cell(r.dsc), _cell(r.precision),
                             _cell(r.sensitivity), _cell(r.hd), _cell(r.hd95),
                             _cell(r.assd), r.tp, r.fp, r.fn])


def read_report_csv(path):
    """Inverse of write_report_csv; returns list of (case_id, MetricsReport)."""
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected report header: {header}")
        for rec in reader:
            case = rec[0]
            vals = [None if v == "NA" else float(v) for v in rec[1:7]]
            tp, fp, fn = (int(v) for v in rec[7:10])
            rows.append((case, MetricsReport(dsc=vals[0], precision=vals[1],
                                             sensitivity=vals[2], hd=vals[3],
                                             hd95=vals[4], assd=vals[5],
                                             tp=tp, fp=fp, fn=fn)))
    return rows
