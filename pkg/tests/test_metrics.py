import math

import numpy as np
import pytest

from gatedprop.errors import DimensionError
from gatedprop.idmask import MaskMap
from gatedprop.metrics import (boundary_pixels, default_boundary_tolerance, evaluate_sequence,
                               f_score, j_score)


def mask_with(rect=None, value=1, size=(12, 12), base=None):
    m = np.zeros(size, np.uint8) if base is None else base.copy()
    if rect is not None:
        y0, x0, y1, x1 = rect
        m[y0:y1, x0:x1] = value
    return MaskMap(m)


def j_oracle(pred, gt, obj):
    """Brute-force pixel loop."""
    inter = union = 0
    for y in range(pred.values.shape[0]):
        for x in range(pred.values.shape[1]):
            p = pred.values[y, x] == obj
            g = gt.values[y, x] == obj
            inter += p and g
            union += p or g
    if union == 0:
        return 1.0
    return inter / union


def boundary_oracle(binary):
    """Explicit 4-neighbor scan, image border counts as outside."""
    h, w = binary.shape
    out = []
    for y in range(h):
        for x in range(w):
            if not binary[y, x]:
                continue
            nb = [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)]
            if any(not (0 <= yy < h and 0 <= xx < w) or not binary[yy, xx] for yy, xx in nb):
                out.append((y, x))
    return out


def f_oracle(pred, gt, obj, tol):
    """Explicit distance enumeration over boundary pixel pairs."""
    bp = boundary_oracle(pred.values == obj)
    bg = boundary_oracle(gt.values == obj)
    if not bp and not bg:
        return 1.0

    def covered(points, targets):
        if not points or not targets:
            return 0.0
        hits = 0
        for (y, x) in points:
            if min(math.hypot(y - ty, x - tx) for ty, tx in targets) <= tol:
                hits += 1
        return hits / len(points)

    p, r = covered(bp, bg), covered(bg, bp)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


class TestJScore:
    def test_identical_nonempty(self):
        m = mask_with((2, 2, 6, 6))
        assert j_score(m, m, 1) == 1.0

    def test_disjoint_equal_area(self):
        a = mask_with((0, 0, 2, 2))
        b = mask_with((5, 5, 7, 7))
        assert j_score(a, b, 1) == 0.0

    def test_half_overlapping_rectangles(self):
        # area 8 each, intersection 4, union 12 -> exactly 1/3
        a = mask_with((0, 0, 2, 4))
        b = mask_with((0, 2, 2, 6))
        assert j_score(a, b, 1) == pytest.approx(1.0 / 3.0)

    def test_both_empty_is_one_single_empty_is_zero(self):
        empty = mask_with(None)
        full = mask_with((1, 1, 3, 3))
        assert j_score(empty, empty, 1) == 1.0
        assert j_score(empty, full, 1) == 0.0
        assert j_score(full, empty, 1) == 0.0

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        a = MaskMap(rng.integers(0, 2, (8, 8)).astype(np.uint8))
        b = MaskMap(rng.integers(0, 2, (8, 8)).astype(np.uint8))
        assert j_score(a, b, 1) == j_score(b, a, 1)

    def test_matches_pixel_loop_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            a = MaskMap(rng.integers(0, 3, (9, 7)).astype(np.uint8))
            b = MaskMap(rng.integers(0, 3, (9, 7)).astype(np.uint8))
            for obj in (1, 2):
                assert j_score(a, b, obj) == pytest.approx(j_oracle(a, b, obj))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            j_score(mask_with(None, size=(4, 4)), mask_with(None, size=(5, 5)), 1)


class TestBoundary:
    def test_boundary_of_solid_rectangle(self):
        b = np.zeros((8, 8), bool)
        b[2:6, 2:7] = True
        got = {tuple(p) for p in boundary_pixels(b)}
        assert got == set(boundary_oracle(b))
        assert (4, 4) not in got  # interior pixel

    def test_border_touching_mask_counts_as_boundary(self):
        b = np.ones((3, 3), bool)
        got = {tuple(p) for p in boundary_pixels(b)}
        assert got == {(y, x) for y in range(3) for x in range(3)} - {(1, 1)}


class TestFScore:
    def test_identical(self):
        m = mask_with((2, 2, 7, 8))
        assert f_score(m, m, 1, tol_radius=1) == 1.0

    def test_far_apart_is_zero(self):
        a = mask_with((0, 0, 2, 2), size=(16, 16))
        b = mask_with((12, 12, 14, 14), size=(16, 16))
        assert f_score(a, b, 1, tol_radius=1) == 0.0

    def test_one_pixel_offset_within_tolerance(self):
        a = mask_with((3, 3, 7, 7))
        b = mask_with((4, 3, 8, 7))  # shifted down by 1
        assert f_score(a, b, 1, tol_radius=1) == 1.0

    def test_empty_conventions(self):
        empty = mask_with(None)
        full = mask_with((1, 1, 4, 4))
        assert f_score(empty, empty, 1) == 1.0
        assert f_score(empty, full, 1) == 0.0

    def test_monotone_in_tolerance(self):
        rng = np.random.default_rng(2)
        a = MaskMap((rng.random((10, 10)) > 0.6).astype(np.uint8))
        b = MaskMap((rng.random((10, 10)) > 0.6).astype(np.uint8))
        scores = [f_score(a, b, 1, tol_radius=t) for t in (0, 1, 2, 3, 5)]
        assert all(s1 <= s2 + 1e-12 for s1, s2 in zip(scores, scores[1:]))

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        a = MaskMap((rng.random((9, 9)) > 0.5).astype(np.uint8))
        b = MaskMap((rng.random((9, 9)) > 0.5).astype(np.uint8))
        assert f_score(a, b, 1, 2) == pytest.approx(f_score(b, a, 1, 2))

    def test_matches_distance_enumeration_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(8):
            a = MaskMap((rng.random((8, 8)) > 0.55).astype(np.uint8))
            b = MaskMap((rng.random((8, 8)) > 0.55).astype(np.uint8))
            for tol in (1, 2):
                assert f_score(a, b, 1, tol) == pytest.approx(f_oracle(a, b, 1, tol))

    def test_default_tolerance_follows_diagonal(self):
        assert default_boundary_tolerance(48, 48) == 1
        assert default_boundary_tolerance(480, 854) == int(math.ceil(0.008 * math.hypot(480, 854)))


class TestEvaluateSequence:
    def test_perfect_predictions(self):
        gts = [mask_with((1, 1, 5, 5)) for _ in range(4)]
        rep = evaluate_sequence(gts, gts)
        assert rep.j_mean == 1.0 and rep.f_mean == 1.0 and rep.jf_mean == 1.0

    def test_all_background_predictions(self):
        gts = [mask_with((1, 1, 5, 5)) for _ in range(3)]
        preds = [mask_with(None) for _ in range(3)]
        rep = evaluate_sequence(preds, gts)
        assert rep.j_mean == 0.0 and rep.f_mean == 0.0

    def test_reference_frame_excluded(self):
        gts = [mask_with((1, 1, 5, 5)), mask_with((1, 1, 5, 5))]
        preds = [mask_with(None), mask_with((1, 1, 5, 5))]  # frame 1 wrong but ignored
        rep = evaluate_sequence(preds, gts)
        assert rep.jf_mean == 1.0

    def test_two_object_case_matches_hand_tally(self):
        # object 1: J = 1/3 then 1.0; object 2: exact both frames
        gt1 = mask_with((0, 0, 2, 4), value=1)
        gt1.values[6:8, 6:8] = 2
        pred1 = mask_with((0, 2, 2, 6), value=1)
        pred1.values[6:8, 6:8] = 2
        gt2 = gt1
        pred2 = gt1
        rep = evaluate_sequence([mask_with(None), pred1, pred2],
                                [mask_with(None, base=gt1.values), gt1, gt2],
                                tol_radius=1)
        assert rep.per_object_j[1] == pytest.approx((1.0 / 3.0 + 1.0) / 2.0)
        assert rep.per_object_j[2] == 1.0
        assert rep.j_mean == pytest.approx((rep.per_object_j[1] + 1.0) / 2.0)
        assert rep.jf_mean == pytest.approx((rep.j_mean + rep.f_mean) / 2.0)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            evaluate_sequence([mask_with(None)], [mask_with(None), mask_with(None)])

    def test_table_and_rows(self):
        gts = [mask_with((1, 1, 4, 4)) for _ in range(3)]
        rep = evaluate_sequence(gts, gts)
        table = rep.format_table()
        assert "overall" in table and "J&F" in table
        assert rep.rows()[-1][0] == "overall"
