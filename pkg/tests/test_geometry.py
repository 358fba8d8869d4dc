from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shiftvar.geometry import (
    EvalScores,
    GeometryError,
    ParseError,
    Quad,
    ShiftCurve,
    convex_clip,
    delta_hmean,
    format_detections,
    intersection_area,
    iou,
    is_convex,
    match_and_score,
    parse_detections,
    parse_icdar,
    polygon_area,
    pooled_scores,
)

from conftest import random_convex_quad, raster_iou

MINI = Path(__file__).parent / "data" / "mini"


def rect(x1, y1, x2, y2, text="t"):
    return Quad.from_rect(x1, y1, x2, y2, text)


# -- parsing ---------------------------------------------------------------


def test_parse_ic13_rect():
    (q,) = parse_icdar('10,10,50,30,"word"', "ic13-rect")
    np.testing.assert_array_equal(q.points, [(10, 10), (50, 10), (50, 30), (10, 30)])
    assert q.transcription == "word" and not q.dont_care


def test_parse_ic13_variants():
    quads = parse_icdar('38 43 920 215 "Tiredness"\n1,2,3,4,plain\n5,6,7,8,"###"\n', "ic13-rect")
    assert [q.transcription for q in quads] == ["Tiredness", "plain", "###"]
    assert [q.dont_care for q in quads] == [False, False, True]


def test_parse_ic15_quad():
    (q,) = parse_icdar("0,0,10,0,10,10,0,10,###", "ic15-quad")
    assert q.dont_care and q.area == 100.0
    (q,) = parse_icdar("﻿1,1,5,1,5,4,1,4,a,b,c\n", "ic15-quad")
    assert q.transcription == "a,b,c"


def test_parse_empty():
    assert parse_icdar("", "ic15-quad") == []
    assert parse_icdar("\n\n", "ic13-rect") == []


@pytest.mark.parametrize("text,lineno", [
    ("0,0,10,0,10,10,0,10,a\n0,0,10,x,10,10,0,10,b", 2),
    ("0,0,10,0,10,10,-1,10,a", 1),
    ("0,0,10,0,10\n", 1),
])
def test_parse_errors_carry_line_number(text, lineno):
    with pytest.raises(ParseError) as exc:
        parse_icdar(text, "ic15-quad")
    assert exc.value.lineno == lineno


def test_parse_detections_roundtrip():
    dets = parse_detections("1,2,3,2,3,4,1,4,0.93\n5.5,0,9,0,9,3,5.5,3\n")
    assert len(dets) == 2
    again = parse_detections(format_detections(dets))
    assert all(a == b for a, b in zip(dets, again))
    with pytest.raises(ParseError):
        parse_detections("1,2,3\n")


# -- polygons --------------------------------------------------------------


def test_polygon_area():
    square = [(0, 0), (1, 0), (1, 1), (0, 1)]
    assert polygon_area(square) == 1.0
    assert polygon_area([(0, 0), (4, 0), (0, 3)]) == 6.0
    assert polygon_area(square[::-1]) == 1.0
    with pytest.raises(GeometryError):
        polygon_area([(0, 0), (1, 1)])


def test_convex_clip():
    sq = np.array([(0, 0), (1, 0), (1, 1), (0, 1)], float)
    assert polygon_area(convex_clip(sq, sq)) == pytest.approx(1.0, abs=1e-9)
    assert len(convex_clip(sq, sq + 5)) == 0
    assert polygon_area(convex_clip(sq, sq + (0.5, 0))) == pytest.approx(0.5, abs=1e-12)
    # clip winding does not matter
    assert polygon_area(convex_clip(sq, (sq + (0.5, 0))[::-1])) == pytest.approx(0.5, abs=1e-12)


def test_is_convex():
    assert is_convex([(0, 0), (2, 0), (2, 1), (0, 1)])
    assert not is_convex([(0, 0), (2, 0), (1, 0.2), (1, 2)])  # dart
    assert not is_convex([(0, 0), (2, 2), (2, 0), (0, 2)])  # bowtie


def test_iou_examples():
    a = rect(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, rect(20, 20, 30, 30)) == 0.0
    b = rect(5, 0, 15, 10)
    assert iou(a, b) == pytest.approx(1 / 3, abs=1e-12)
    assert raster_iou(a.points, b.points) == pytest.approx(1 / 3, abs=1e-3)


def test_iou_rejects_degenerate_and_nonconvex():
    with pytest.raises(GeometryError):
        iou(Quad([(0, 0), (1, 1), (2, 2), (3, 3)]), rect(0, 0, 1, 1))
    with pytest.raises(GeometryError):
        iou(Quad([(0, 0), (2, 2), (2, 0), (0, 2)]), rect(0, 0, 1, 1))


def test_iou_matches_raster_oracle():
    r = np.random.default_rng(7)
    for _ in range(60):
        a, b = random_convex_quad(r), random_convex_quad(r)
        assert abs(iou(a, b) - raster_iou(a, b)) < 0.02


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_iou_symmetric_bounded_and_intersection_bounded(seed):
    r = np.random.default_rng(seed)
    a, b = random_convex_quad(r), random_convex_quad(r)
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou(b, a), abs=1e-12)
    assert iou(a, a) == 1.0
    inter = intersection_area(a, b)
    assert inter <= min(polygon_area(a), polygon_area(b)) + 1e-9


# -- scoring ---------------------------------------------------------------


def test_scores_hmean_formula():
    s = EvalScores.from_counts(3, 4, 6)
    assert s.precision == 0.75 and s.recall == 0.5
    assert s.hmean == pytest.approx(2 * 0.75 * 0.5 / 1.25)
    assert EvalScores.from_counts(0, 0, 0).hmean == 1.0
    empty_det = EvalScores.from_counts(0, 0, 5)
    assert (empty_det.precision, empty_det.recall, empty_det.hmean) == (0.0, 0.0, 0.0)
    no_gt = EvalScores.from_counts(0, 2, 0)
    assert (no_gt.precision, no_gt.recall, no_gt.hmean) == (0.0, 1.0, 0.0)


def test_match_identical_sets():
    gts = [rect(0, 0, 10, 10), rect(20, 0, 30, 5)]
    s = match_and_score(gts, [Quad(g.points) for g in gts])
    assert (s.precision, s.recall, s.hmean) == (1.0, 1.0, 1.0)


def test_match_split_detection():
    gt = [rect(0, 0, 20, 10)]
    dets = [rect(0, 0, 12, 10), rect(1, 0, 20, 10)]
    assert all(iou(gt[0], d) >= 0.5 for d in dets)
    s = match_and_score(gt, dets)
    assert (s.true_positives, s.precision, s.recall) == (1, 0.5, 1.0)
    assert s.hmean == pytest.approx(2 / 3)


def test_match_dont_care_discards_detection():
    gt = [rect(0, 0, 20, 20, "###")]
    s = match_and_score(gt, [rect(2, 2, 10, 10)])
    assert (s.num_detections, s.num_ground_truth, s.hmean) == (0, 0, 1.0)


def test_match_is_one_to_one_greedy_by_iou():
    gts = [rect(0, 0, 10, 10), rect(4, 0, 14, 10)]
    # det 0 overlaps gt 0 best; det 1 would prefer gt 0 too but must take gt 1
    dets = [rect(0, 0, 10, 10), rect(3, 0, 13, 10)]
    s = match_and_score(gts, dets)
    assert s.true_positives == 2


def test_iou_threshold_validation():
    with pytest.raises(ValueError):
        match_and_score([], [], 0.0)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_match_invariant_under_permutation(seed):
    r = np.random.default_rng(seed)
    gts = [Quad(random_convex_quad(r, 6), dont_care=bool(r.random() < 0.2)) for _ in range(r.integers(0, 5))]
    dets = [Quad(random_convex_quad(r, 6)) for _ in range(r.integers(0, 6))]
    base = match_and_score(gts, dets)
    pg, pd = r.permutation(len(gts)), r.permutation(len(dets))
    other = match_and_score([gts[i] for i in pg], [dets[i] for i in pd])
    assert base == other
    assert base.true_positives <= min(base.num_detections, base.num_ground_truth)


def _frac(s):
    return float(Fraction(s))


def test_golden_mini_dataset():
    """Three images scored against frozen hand-computed values.

    A: d0 = g0 (IoU 1), d1 overlaps g1 by 80/120 = 2/3, d2 is far away -> TP 2 of 3 dets.
    B: d0 inside g0 with IoU 64/100; d1 lies wholly in the ### box and is dropped;
       d2 covers the ### box by exactly 50% of its area, so it is kept and unmatched.
    C: one word, two halves each with IoU 110/200 = 0.55 -> only one can match.
    """
    lines = [line for line in (MINI / "golden.csv").read_text().splitlines() if not line.startswith("#")]
    header = lines[0].split(",")
    golden = {row[0]: dict(zip(header, row)) for row in (line.split(",") for line in lines[1:])}
    per_image = []
    for name in "ABC":
        gts = parse_icdar((MINI / f"gt_{name}.txt").read_text(encoding="utf-8"), "ic15-quad")
        dets = parse_detections((MINI / f"det_{name}.txt").read_text())
        s = match_and_score(gts, dets)
        per_image.append(s)
        g = golden[name]
        assert (s.true_positives, s.num_detections, s.num_ground_truth) == (int(g["tp"]), int(g["num_det"]), int(g["num_gt"]))
        assert s.precision == pytest.approx(_frac(g["precision"]), abs=1e-12)
        assert s.recall == pytest.approx(_frac(g["recall"]), abs=1e-12)
        assert s.hmean == pytest.approx(_frac(g["hmean"]), abs=1e-12)
    total = pooled_scores(per_image)
    g = golden["total"]
    assert (total.true_positives, total.num_detections, total.num_ground_truth) == (4, 7, 4)
    assert total.hmean == pytest.approx(_frac(g["hmean"]), abs=1e-12)


# -- delta hmean -----------------------------------------------------------


def curve_of(hmeans):
    return ShiftCurve({s: EvalScores(h, h, h, 0, 0, 0) for s, h in hmeans.items()})


def test_delta_hmean_examples():
    c = curve_of({-1: 0.75, 0: 0.80, 1: 0.85})
    assert delta_hmean(c, 0) == 0.0
    assert delta_hmean(c, 1) == pytest.approx(0.10, abs=1e-15)
    flat = curve_of({s: 0.6 for s in range(-3, 4)})
    assert all(delta_hmean(flat, r) == 0.0 for r in range(4))
    with pytest.raises(ValueError):
        delta_hmean(c, 2)


def test_shift_curve_requires_contiguous_shifts():
    with pytest.raises(ValueError):
        curve_of({-1: 0.5, 1: 0.5})
    assert len(curve_of({-2: 0, -1: 0, 0: 0, 1: 0, 2: 0})) == 5


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=7, max_size=7))
def test_delta_hmean_monotone(values):
    c = curve_of(dict(zip(range(-3, 4), values)))
    d = [delta_hmean(c, r) for r in range(4)]
    assert d[0] == 0.0
    assert all(a <= b for a, b in zip(d, d[1:]))
