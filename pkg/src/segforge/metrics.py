"""Segmentation accuracy metrics: overlap (DSC) and boundary (NSD) scores.

NSD rests on an exact Euclidean distance transform computed with the
separable lower-envelope (parabola) algorithm; distances stay in squared
form internally so tolerance comparisons are exact.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bundle import CaseBundle
from .errors import ValidationError

logger = logging.getLogger(__name__)


@dataclass
class MetricRecord:
    """One scored (case, target) pair for one algorithm."""

    algorithm: str
    case: str
    modality: str
    label: int
    dsc: float
    nsd: float
    runtime_s: float


def dsc(gt: np.ndarray, pred: np.ndarray) -> float:
    """Dice overlap 2|G&P|/(|G|+|P|); both empty -> 1, one empty -> 0."""
    gt = np.asarray(gt, dtype=bool)
    pred = np.asarray(pred, dtype=bool)
    if gt.shape != pred.shape:
        raise ValidationError(f"shape mismatch {gt.shape} vs {pred.shape}")
    n_gt = int(gt.sum())
    n_pred = int(pred.sum())
    if n_gt == 0 and n_pred == 0:
        return 1.0
    if n_gt == 0 or n_pred == 0:
        return 0.0
    inter = int(np.count_nonzero(gt & pred))
    return 2.0 * inter / (n_gt + n_pred)


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a face-adjacent background or image-border neighbor."""
    mask = np.asarray(mask, dtype=bool)
    all_fg_neighbors = np.ones(mask.shape, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    core = tuple(slice(1, -1) for _ in range(mask.ndim))
    for ax in range(mask.ndim):
        for step in (-1, 1):
            idx = list(core)
            idx[ax] = slice(1 + step, padded.shape[ax] - 1 + step)
            all_fg_neighbors &= padded[tuple(idx)]
    return mask & ~all_fg_neighbors


def _envelope_1d(f: np.ndarray, w: float) -> np.ndarray:
    """Lower envelope of parabolas w*(q-v)^2 + f[v] along one line.

    Sites with infinite f are skipped; a line with no finite site stays
    infinite. Arithmetic mirrors the brute-force oracle term order.
    """
    n = f.size
    out = np.empty(n, dtype=np.float64)
    finite = np.flatnonzero(np.isfinite(f))
    if finite.size == 0:
        out[:] = np.inf
        return out
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1, dtype=np.float64)
    k = 0
    v[0] = finite[0]
    z[0] = -np.inf
    z[1] = np.inf
    for q in finite[1:]:
        fq = f[q] + w * (q * q)
        while True:
            vk = v[k]
            s = (fq - (f[vk] + w * (vk * vk))) / (2.0 * w * (q - vk))
            if s > z[k]:
                break
            k -= 1
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d = q - v[k]
        out[q] = (d * d) * w + f[v[k]]
    return out


def squared_distance_map(mask: np.ndarray, spacing) -> np.ndarray:
    """Exact squared Euclidean distance to the mask's voxel set.

    Separable pass per axis; spacing weights each axis by spacing^2.
    An empty mask yields +inf everywhere.
    """
    mask = np.asarray(mask, dtype=bool)
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != mask.ndim:
        raise ValidationError("spacing length must match mask dimensionality")
    if any(s <= 0 for s in spacing):
        raise ValidationError("spacing must be strictly positive")
    f = np.where(mask, 0.0, np.inf)
    for ax in range(mask.ndim):
        w = spacing[ax] * spacing[ax]
        moved = np.moveaxis(f, ax, -1)
        lines = moved.reshape(-1, mask.shape[ax])
        for i in range(lines.shape[0]):
            lines[i] = _envelope_1d(lines[i], w)
        f = np.moveaxis(lines.reshape(moved.shape), -1, ax)
    return f


def distance_map(mask: np.ndarray, spacing) -> np.ndarray:
    """Exact Euclidean distances in physical units (sqrt of the squared map)."""
    return np.sqrt(squared_distance_map(mask, spacing))


def _union_bbox(a: np.ndarray, b: np.ndarray) -> tuple[slice, ...]:
    union = a | b
    slices = []
    for ax in range(union.ndim):
        proj = np.any(union, axis=tuple(i for i in range(union.ndim) if i != ax))
        nz = np.flatnonzero(proj)
        slices.append(slice(int(nz[0]), int(nz[-1]) + 1))
    return tuple(slices)


def nsd(gt: np.ndarray, pred: np.ndarray, tau: float, spacing) -> float:
    """Normalized surface distance at tolerance tau (physical units).

    Boundary voxels of each mask are counted as matched when their exact
    distance to the other mask's boundary is <= tau; the score is the
    matched fraction over both boundaries.
    """
    gt = np.asarray(gt, dtype=bool)
    pred = np.asarray(pred, dtype=bool)
    if gt.shape != pred.shape:
        raise ValidationError(f"shape mismatch {gt.shape} vs {pred.shape}")
    if tau < 0:
        raise ValidationError("tau must be non-negative")
    if not gt.any() and not pred.any():
        return 1.0
    if not gt.any() or not pred.any():
        return 0.0
    b_gt = boundary_mask(gt)
    b_pred = boundary_mask(pred)
    # distances are intrinsic to the boundary sets, so computing inside the
    # union bounding box is exact for queries inside it
    box = _union_bbox(b_gt, b_pred)
    b_gt_c = b_gt[box]
    b_pred_c = b_pred[box]
    dsq_to_gt = squared_distance_map(b_gt_c, spacing)
    dsq_to_pred = squared_distance_map(b_pred_c, spacing)
    tau_sq = float(tau) * float(tau)
    matched = int(np.count_nonzero(dsq_to_gt[b_pred_c] <= tau_sq))
    matched += int(np.count_nonzero(dsq_to_pred[b_gt_c] <= tau_sq))
    return matched / (int(b_pred.sum()) + int(b_gt.sum()))


def default_tau(spacing, ndim: int) -> float:
    """2x the max in-plane spacing (3D) or 2 pixels in physical units (2D)."""
    spacing = tuple(float(s) for s in spacing)
    if ndim == 3:
        return 2.0 * max(spacing[1:])
    return 2.0 * max(spacing)


def resolve_tau(case: CaseBundle, tau_policy=None) -> float:
    """tau_policy may be None, a number, a modality->tau mapping, or a callable."""
    if tau_policy is None:
        return default_tau(case.spacing, len(case.spatial_shape))
    if callable(tau_policy):
        return float(tau_policy(case))
    if isinstance(tau_policy, dict):
        if case.modality in tau_policy:
            return float(tau_policy[case.modality])
        return default_tau(case.spacing, len(case.spatial_shape))
    return float(tau_policy)


def evaluate_submission(
    algorithm: str,
    predictions: dict,
    references: list[CaseBundle],
    tau_policy=None,
) -> list[MetricRecord]:
    """Score every (case, target): one MetricRecord per reference instance.

    ``predictions`` maps case id to an object with ``masks`` (label ->
    binary mask) and ``runtime_seconds``. Missing targets or missing
    cases score 0/0 with a warning; predictions for unknown case ids are
    an error.
    """
    ref_ids = {c.id for c in references}
    unknown = set(predictions) - ref_ids
    if unknown:
        raise ValidationError(f"predictions reference unknown case ids: {sorted(unknown)}")
    records: list[MetricRecord] = []
    for case in references:
        record = predictions.get(case.id)
        if record is None:
            logger.warning("no prediction for case %s; scoring 0", case.id)
        tau = resolve_tau(case, tau_policy)
        runtime = float(record.runtime_seconds) if record is not None else 0.0
        for label in range(1, case.num_instances + 1):
            gt = case.reference == label
            pred = record.masks.get(label) if record is not None else None
            if pred is None:
                if record is not None:
                    logger.warning("case %s: no prediction for target %d", case.id, label)
                d, s = 0.0, 0.0
            else:
                if pred.shape != gt.shape:
                    raise ValidationError(
                        f"case {case.id} target {label}: prediction shape "
                        f"{pred.shape} != reference {gt.shape}"
                    )
                d = dsc(gt, pred)
                s = nsd(gt, pred, tau, case.spacing)
            records.append(
                MetricRecord(
                    algorithm=algorithm,
                    case=case.id,
                    modality=case.modality,
                    label=label,
                    dsc=d,
                    nsd=s,
                    runtime_s=runtime,
                )
            )
    return records


CSV_COLUMNS = ["algorithm", "case", "modality", "label", "dsc", "nsd", "runtime_s"]


def write_metrics_csv(records: list[MetricRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow(
                [r.algorithm, r.case, r.modality, r.label, repr(r.dsc), repr(r.nsd), repr(r.runtime_s)]
            )


def read_metrics_csv(path: str | Path) -> list[MetricRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise ValidationError(f"metrics csv missing columns: {sorted(missing)}")
        for row in reader:
            records.append(
                MetricRecord(
                    algorithm=row["algorithm"],
                    case=row["case"],
                    modality=row["modality"],
                    label=int(row["label"]),
                    dsc=float(row["dsc"]),
                    nsd=float(row["nsd"]),
                    runtime_s=float(row["runtime_s"]),
                )
            )
    return records


def check_metric_bounds(record: MetricRecord) -> None:
    if not (0.0 <= record.dsc <= 1.0 and 0.0 <= record.nsd <= 1.0):
        raise ValidationError(f"metric out of bounds: {record}")
    if record.runtime_s < 0:
        raise ValidationError(f"negative runtime: {record}")
