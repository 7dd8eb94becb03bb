"""Region and boundary similarity scores for mask sequences.

J is intersection-over-union of one object's binary mask. F is the
boundary F-measure: precision/recall of 4-connected boundary pixels
matched within a pixel-distance tolerance (default: 0.8% of the image
diagonal, rounded up). Sequences are scored per object over frames
2..T (the first frame is the given reference), then averaged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .idmask import MaskMap


def default_boundary_tolerance(height, width) -> int:
    return int(math.ceil(0.008 * math.hypot(height, width)))


def _binary(mask: MaskMap, obj: int) -> np.ndarray:
    return mask.values == obj


def j_score(pred: MaskMap, gt: MaskMap, obj: int) -> float:
    """Intersection over union; 1 when both masks are empty, 0 when
    exactly one is."""
    if pred.values.shape != gt.values.shape:
        raise DimensionError(f"mask shapes differ: {pred.values.shape} vs {gt.values.shape}")
    p, g = _binary(pred, obj), _binary(gt, obj)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def boundary_pixels(binary: np.ndarray) -> np.ndarray:
    """Mask pixels with a 4-neighbor outside the mask; the image border
    counts as outside. Returns an [k, 2] array of (y, x) coordinates."""
    b = np.asarray(binary, dtype=bool)
    if not b.any():
        return np.zeros((0, 2), dtype=np.intp)
    inner = np.zeros_like(b)
    inner[1:-1, 1:-1] = (b[1:-1, 1:-1] & b[:-2, 1:-1] & b[2:, 1:-1]
                         & b[1:-1, :-2] & b[1:-1, 2:])
    return np.argwhere(b & ~inner)


def _coverage_fraction(points: np.ndarray, targets: np.ndarray, tol: float) -> float:
    """Fraction of `points` within Euclidean distance tol of any target."""
    if len(points) == 0:
        return 0.0
    if len(targets) == 0:
        return 0.0
    d2 = ((points[:, None, :] - targets[None, :, :]) ** 2).sum(axis=2)
    return float((d2.min(axis=1) <= tol * tol).mean())


def f_score(pred: MaskMap, gt: MaskMap, obj: int, tol_radius=None) -> float:
    """Boundary F-measure: 2PR/(P+R) of boundary pixels matched within
    ``tol_radius``; 1 when both masks are empty, 0 when P+R is 0."""
    if pred.values.shape != gt.values.shape:
        raise DimensionError(f"mask shapes differ: {pred.values.shape} vs {gt.values.shape}")
    if tol_radius is None:
        tol_radius = default_boundary_tolerance(*pred.values.shape)
    p, g = _binary(pred, obj), _binary(gt, obj)
    if not p.any() and not g.any():
        return 1.0
    bp, bg = boundary_pixels(p), boundary_pixels(g)
    precision = _coverage_fraction(bp, bg, tol_radius)
    recall = _coverage_fraction(bg, bp, tol_radius)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class EvalReport:
    objects: list                     # object ids in scoring order
    per_object_j: dict                # id -> mean J over evaluated frames
    per_object_f: dict
    per_frame: list = field(default_factory=list)   # (frame idx, {obj: (j, f)})

    @property
    def j_mean(self):
        return float(np.mean([self.per_object_j[o] for o in self.objects])) if self.objects else 1.0

    @property
    def f_mean(self):
        return float(np.mean([self.per_object_f[o] for o in self.objects])) if self.objects else 1.0

    @property
    def jf_mean(self):
        return (self.j_mean + self.f_mean) / 2.0

    def rows(self):
        """Flat rows for CSV: (scope, object, J, F, J&F)."""
        out = []
        for frame_idx, scores in self.per_frame:
            for o, (j, f) in sorted(scores.items()):
                out.append((f"frame{frame_idx}", o, j, f, (j + f) / 2))
        for o in self.objects:
            j, f = self.per_object_j[o], self.per_object_f[o]
            out.append(("object-mean", o, j, f, (j + f) / 2))
        out.append(("overall", "", self.j_mean, self.f_mean, self.jf_mean))
        return out

    def format_table(self):
        lines = [f"{'scope':<14}{'object':>7}{'J':>9}{'F':>9}{'J&F':>9}"]
        for scope, o, j, f, jf in self.rows():
            lines.append(f"{scope:<14}{str(o):>7}{j:>9.4f}{f:>9.4f}{jf:>9.4f}")
        return "\n".join(lines)


def evaluate_sequence(preds, gts, tol_radius=None, objects=None) -> EvalReport:
    """Score predictions against truth, skipping the reference frame.

    Objects default to the labels of the first ground-truth mask (the
    annotated reference).
    """
    if len(preds) != len(gts):
        raise DimensionError(f"{len(preds)} predictions vs {len(gts)} ground-truth masks")
    if objects is None:
        objects = gts[0].labels()
    objects = list(objects)
    per_frame = []
    js = {o: [] for o in objects}
    fs = {o: [] for o in objects}
    for idx in range(1, len(gts)):
        scores = {}
        for o in objects:
            j = j_score(preds[idx], gts[idx], o)
            f = f_score(preds[idx], gts[idx], o, tol_radius)
            js[o].append(j)
            fs[o].append(f)
            scores[o] = (j, f)
        per_frame.append((idx, scores))
    return EvalReport(objects,
                      {o: float(np.mean(js[o])) if js[o] else 1.0 for o in objects},
                      {o: float(np.mean(fs[o])) if fs[o] else 1.0 for o in objects},
                      per_frame)
