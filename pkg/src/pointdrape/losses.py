"""Training objective and evaluation metrics for the drape model.

The fitting target is a point cloud, so the data term is a bidirectional
squared chamfer distance: predicted points pulled toward their nearest
ground-truth points and vice versa. Correspondences are recomputed from the
current prediction on every call and then held fixed inside the
differentiable graph; at a correspondence switchover both candidates are
equidistant, so the loss value stays continuous.

Normals get an L1 consistency term against the ground-truth normal at each
predicted point's nearest neighbour. Two squared-norm regularizers keep the
model honest: one on predicted displacements (the decoder should explain
geometry with small offsets from the body, not large ones) and one on the
per-outfit feature tensors (so an outfit code stays near the origin of the
learned feature space, which is what makes fitting a fresh code for an
unseen outfit well behaved).

Evaluation helpers recompute the same quantities in float64 without the
tape and aggregate them into a plain-text report.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import kernels, ops
from .engine.tensor import DimensionError, Tensor
from .formats import FormatError

__all__ = [
    "NNIndex",
    "chamfer_l2",
    "normal_consistency",
    "displacement_reg",
    "garment_reg",
    "LossWeights",
    "total_loss",
    "EvalRecord",
    "eval_cloud",
    "summarize",
    "write_report",
    "read_report",
]


class NNIndex:
    """Exact nearest-neighbour index over a fixed reference cloud.

    Builds the uniform grid once; ``query`` then returns, for each query
    point, the index of the nearest reference point and the squared
    distance to it. Results are bitwise identical to a brute-force scan
    (ties break to the lowest reference index).
    """

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise DimensionError(f"reference cloud must be (N,3), non-empty, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("reference cloud contains non-finite values")
        self.points = pts
        self._grid = kernels.build_grid(pts)

    def __len__(self):
        return self.points.shape[0]

    def query(self, queries):
        q = np.asarray(queries, dtype=np.float64)
        if q.ndim != 2 or q.shape[1] != 3:
            raise DimensionError(f"queries must be (M,3), got {q.shape}")
        return kernels.nn_query(self._grid, q)


def _as_points(t, name):
    if not isinstance(t, Tensor):
        raise DimensionError(f"{name} must be a Tensor")
    if t.data.ndim != 2 or t.data.shape[1] != 3:
        raise DimensionError(f"{name} must be (M,3), got {t.data.shape}")
    if t.data.shape[0] == 0:
        raise DimensionError(f"{name} is empty")
    return t


def chamfer_l2(pred, gt_index):
    """Bidirectional squared chamfer between predicted and reference points.

    mean_i min_j |x_i - y_j|^2  +  mean_j min_i |x_i - y_j|^2

    pred is an (M,3) Tensor; gt_index an NNIndex over the (N,3) reference.
    Both directions differentiate with respect to pred: the forward term
    through the gathered differences, the reverse term through a scatter of
    each reference point's nearest predicted row. Returns
    (loss, idx_fwd, idx_rev) where idx_fwd[i] is the reference row nearest
    pred[i] (reused by the normal term) and idx_rev[j] the predicted row
    nearest reference[j].
    """
    pred = _as_points(pred, "pred")
    gt = gt_index.points
    idx_fwd, _ = gt_index.query(pred.data)
    target = Tensor(gt[idx_fwd].astype(pred.data.dtype))
    diff = ops.sub(pred, target)
    fwd = ops.reduce_mean(ops.reduce_sum(ops.mul(diff, diff), axis=1))

    pred_grid = kernels.build_grid(pred.data)
    idx_rev, _ = kernels.nn_query(pred_grid, gt)
    matched = ops.gather_rows(pred, idx_rev)
    diff_r = ops.sub(matched, Tensor(gt.astype(pred.data.dtype)))
    rev = ops.reduce_mean(ops.reduce_sum(ops.mul(diff_r, diff_r), axis=1))
    return ops.add(fwd, rev), idx_fwd, idx_rev


def _check_unit_rows(arr, name, tol=1e-3):
    norms = np.linalg.norm(np.asarray(arr, dtype=np.float64), axis=1)
    bad = np.abs(norms - 1.0) > tol
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(
            f"{name} rows must be unit length within {tol}; "
            f"row {i} has norm {norms[i]:.6f}"
        )


def normal_consistency(pred_normals, gt_normals, idx_fwd):
    """L1 normal consistency: mean_i |n_pred[i] - n_gt[match(i)]|_1.

    The sum runs over the 3 components, the mean over predicted points.
    Both inputs must hold unit rows; idx_fwd comes from chamfer_l2 so the
    comparison uses the same correspondence as the data term.
    """
    pred_normals = _as_points(pred_normals, "pred_normals")
    gt = np.asarray(gt_normals)
    if gt.ndim != 2 or gt.shape[1] != 3:
        raise DimensionError(f"gt_normals must be (N,3), got {gt.shape}")
    _check_unit_rows(pred_normals.data, "pred_normals")
    _check_unit_rows(gt, "gt_normals")
    idx = np.asarray(idx_fwd, dtype=np.int64)
    if idx.shape != (pred_normals.data.shape[0],):
        raise DimensionError(
            f"idx_fwd must have one entry per predicted row, got {idx.shape}"
        )
    target = Tensor(gt[idx].astype(pred_normals.data.dtype))
    diff = ops.abs_(ops.sub(pred_normals, target))
    return ops.reduce_mean(ops.reduce_sum(diff, axis=1))


def displacement_reg(disp):
    """Mean squared norm of the predicted displacements: mean_i |r_i|^2."""
    disp = _as_points(disp, "disp")
    return ops.reduce_mean(ops.reduce_sum(ops.mul(disp, disp), axis=1))


def garment_reg(garments):
    """Mean over outfits of the squared Frobenius norm of each feature tensor.

    (1/C) * sum_m |G_m|^2 over the full bank, regardless of which outfits
    appear in the current batch: the pull toward the origin applies to every
    code the model owns.
    """
    if not garments:
        raise DimensionError("garment_reg needs at least one feature tensor")
    total = None
    for g in garments:
        sq = ops.reduce_sum(ops.mul(g, g))
        total = sq if total is None else ops.add(total, sq)
    return ops.scale(total, 1.0 / len(garments))


@dataclass(frozen=True)
class LossWeights:
    """Weights for the combined objective.

    The normal weight starts at zero and is raised partway through training
    (the trainer owns that schedule); the values here are the full-scale
    defaults for the remaining terms.
    """

    data: float = 2.0e4
    normal: float = 0.0
    disp: float = 2.0e3
    garment: float = 1.0

    def validate(self):
        for name in ("data", "normal", "disp", "garment"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")
        return self


def total_loss(data_term, normal_term, disp_term, garment_term, weights):
    """Weighted sum of the four scalar terms.

    normal_term may be None while its weight is zero (the term is skipped
    entirely, which also skips its graph); every other term is required.
    """
    weights.validate()
    out = ops.scale(data_term, weights.data)
    if weights.normal != 0.0:
        if normal_term is None:
            raise ValueError("normal weight is nonzero but no normal term given")
        out = ops.add(out, ops.scale(normal_term, weights.normal))
    elif normal_term is not None:
        out = ops.add(out, ops.scale(normal_term, 0.0))
    out = ops.add(out, ops.scale(disp_term, weights.disp))
    out = ops.add(out, ops.scale(garment_term, weights.garment))
    return out


# ---------------------------------------------------------------------------
# evaluation (no tape, float64)


@dataclass(frozen=True)
class EvalRecord:
    """Per-example evaluation result, in native units (m^2 and unitless L1)."""

    outfit: str
    pose: str
    chamfer: float
    normal_l1: float


def eval_cloud(pred_points, pred_normals, gt_points, gt_normals, gt_index=None):
    """Float64 chamfer + normal L1 for one example; returns (chamfer, normal).

    Same formulas as the training terms. Pass a prebuilt NNIndex over
    gt_points to skip rebuilding it per call.
    """
    xp = np.asarray(pred_points, dtype=np.float64)
    yp = np.asarray(gt_points, dtype=np.float64)
    if gt_index is None:
        gt_index = NNIndex(yp)
    idx_fwd, d2_fwd = gt_index.query(xp)
    rev_grid = kernels.build_grid(xp)
    _, d2_rev = kernels.nn_query(rev_grid, yp)
    chamfer = float(d2_fwd.mean() + d2_rev.mean())

    nx = np.asarray(pred_normals, dtype=np.float64)
    ny = np.asarray(gt_normals, dtype=np.float64)
    _check_unit_rows(nx, "pred_normals")
    _check_unit_rows(ny, "gt_normals")
    normal = float(np.abs(nx - ny[idx_fwd]).sum(axis=1).mean())
    return chamfer, normal


def summarize(records):
    """Aggregate per-example records into overall and per-outfit statistics.

    Returns a dict with keys "overall" and one per outfit name; every value
    is a dict with mean/median/max for both metrics plus the sample count.
    Scaled convenience entries report chamfer * 1e4 and normal * 1e1, the
    conventional units for quoting these numbers.
    """
    if not records:
        raise ValueError("no evaluation records to summarize")

    def stats(rows):
        ch = np.array([r.chamfer for r in rows], dtype=np.float64)
        nm = np.array([r.normal_l1 for r in rows], dtype=np.float64)
        return {
            "count": len(rows),
            "chamfer_mean": float(ch.mean()),
            "chamfer_median": float(np.median(ch)),
            "chamfer_max": float(ch.max()),
            "normal_mean": float(nm.mean()),
            "normal_median": float(np.median(nm)),
            "normal_max": float(nm.max()),
            "chamfer_mean_x1e4": float(ch.mean() * 1e4),
            "normal_mean_x1e1": float(nm.mean() * 1e1),
        }

    out = {"overall": stats(records)}
    for outfit in sorted({r.outfit for r in records}):
        out[outfit] = stats([r for r in records if r.outfit == outfit])
    return out


def write_report(path, records):
    """Write per-example rows plus aggregate blocks as plain text."""
    summary = summarize(records)
    lines = ["REPORT v1", f"records {len(records)}"]
    for r in records:
        lines.append(f"row {r.outfit} {r.pose} {r.chamfer!r} {r.normal_l1!r}")
    for name in summary:
        s = summary[name]
        lines.append(
            f"aggregate {name} count {s['count']} "
            f"chamfer_mean {s['chamfer_mean']!r} chamfer_median {s['chamfer_median']!r} "
            f"chamfer_max {s['chamfer_max']!r} normal_mean {s['normal_mean']!r} "
            f"normal_median {s['normal_median']!r} normal_max {s['normal_max']!r}"
        )
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def read_report(path):
    """Parse a report file back into (records, summary)."""
    with open(path, "r", encoding="ascii") as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != "REPORT v1":
        raise FormatError(f"{path}: missing REPORT v1 header")
    if len(lines) < 2 or not lines[1].startswith("records "):
        raise FormatError(f"{path}: missing records count on line 2")
    try:
        count = int(lines[1].split()[1])
    except (IndexError, ValueError):
        raise FormatError(f"{path}: bad records count on line 2") from None
    records = []
    for k, line in enumerate(lines[2 : 2 + count]):
        parts = line.split()
        if len(parts) != 5 or parts[0] != "row":
            raise FormatError(f"{path} line {k + 3}: expected 'row outfit pose chamfer normal'")
        try:
            records.append(
                EvalRecord(parts[1], parts[2], float(parts[3]), float(parts[4]))
            )
        except ValueError:
            raise FormatError(f"{path} line {k + 3}: bad numeric field") from None
    if len(records) != count:
        raise FormatError(f"{path}: expected {count} rows, found {len(records)}")
    return records, summarize(records)
