"""Reconstruction error metrics (reported in centimeters)."""

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError

SCHEMA_VERSION = 1


def _pair(pred, gt):
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ShapeError(f"point sets must have equal (n, dim) shapes, got {pred.shape} vs {gt.shape}")
    return pred, gt


def per_point_error(pred, gt):
    pred, gt = _pair(pred, gt)
    return np.linalg.norm(pred - gt, axis=1)


def mpjpe(pred, gt):
    """Mean per-joint Euclidean error; inputs in meters, result in cm."""
    return float(per_point_error(pred, gt).mean() * 100)


def pve(pred_vertices, gt_vertices):
    """Mean per-vertex Euclidean error; inputs in meters, result in cm."""
    return float(per_point_error(pred_vertices, gt_vertices).mean() * 100)


def similarity_align(pred, gt):
    """Least-squares similarity transform (R, t, s) taking ``pred`` onto ``gt``.

    Closed form via the SVD of the cross-covariance, with the reflection
    guard.  Returns the aligned copy of ``pred``.
    """
    pred, gt = _pair(pred, gt)
    mp, mg = pred.mean(axis=0), gt.mean(axis=0)
    P, G = pred - mp, gt - mg
    var_p = (P ** 2).sum() / P.shape[0]
    if P.shape[0] < 3 or np.linalg.matrix_rank(P, tol=1e-9 * max(1.0, np.abs(P).max())) < min(2, P.shape[1]):
        raise NumericError("similarity alignment needs >= 3 non-collinear points")
    cov = G.T @ P / P.shape[0]
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(P.shape[1])
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[-1, -1] = -1
    R = U @ D @ Vt
    s = np.trace(np.diag(S) @ D) / var_p
    return s * P @ R.T + mg


def pa_mpjpe(pred, gt):
    """MPJPE after optimal rotation, translation and uniform scale (cm)."""
    return mpjpe(similarity_align(pred, gt), gt)


@dataclass
class EvalReport:
    mpjpe_cm: float
    pve_cm: float
    pa_mpjpe_cm: float
    n_samples: int = 1
    per_joint_cm: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)  # (sample_id, mpjpe, pve, pa_mpjpe)
    label: str = ""

    def __post_init__(self):
        for name in ("mpjpe_cm", "pve_cm", "pa_mpjpe_cm"):
            v = getattr(self, name)
            if not (np.isnan(v) or v >= 0):
                raise ShapeError(f"{name} must be >= 0, got {v}")

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "label": self.label,
            "n_samples": self.n_samples,
            "mpjpe_cm": self.mpjpe_cm,
            "pve_cm": self.pve_cm,
            "pa_mpjpe_cm": self.pa_mpjpe_cm,
            "pa_mpjpe_note": "Procrustes-aligned MPJPE (similarity transform)",
            "per_joint_cm": self.per_joint_cm,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "mpjpe_cm", "pve_cm", "pa_mpjpe_cm"])
        for sid, a, b, c in self.rows:
            w.writerow([sid, f"{a:.6f}", f"{b:.6f}", f"{c:.6f}"])
        return buf.getvalue()


def evaluate(samples, joint_names=None, label=""):
    """Aggregate metrics over ``(sample_id, pred_j, gt_j, pred_v, gt_v)`` tuples.

    ``pred_v``/``gt_v`` may be None, in which case PVE is reported as NaN.
    """
    samples = list(samples)
    if not samples:
        raise ShapeError("evaluate needs at least one sample")
    rows, per_joint = [], []
    for sid, pj, gj, pv, gv in samples:
        e = per_point_error(pj, gj) * 100
        per_joint.append(e)
        v = pve(pv, gv) if pv is not None else float("nan")
        rows.append((sid, float(e.mean()), v, pa_mpjpe(pj, gj)))
    arr = np.array([r[1:] for r in rows])
    names = joint_names or [str(i) for i in range(len(per_joint[0]))]
    pj_mean = np.mean(per_joint, axis=0)
    return EvalReport(mpjpe_cm=float(arr[:, 0].mean()),
                      pve_cm=float(np.mean(arr[:, 1])) if not np.all(np.isnan(arr[:, 1])) else float("nan"),
                      pa_mpjpe_cm=float(arr[:, 2].mean()), n_samples=len(rows),
                      per_joint_cm={n: float(v) for n, v in zip(names, pj_mean)}, rows=rows, label=label)
