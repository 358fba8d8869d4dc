"""ICDAR box parsing, convex polygon IoU, localization matching, and the HMean spread.

Polygons are (n, 2) float64 arrays of (x, y) in image coordinates (y down).
Matching follows the IC15 localization protocol: don't-care boxes ("###")
swallow the detections that mostly fall inside them, and detections are
paired one-to-one with ground truth at an IoU threshold.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

DONT_CARE = "###"
AREA_EPS = 1e-12


class ParseError(ValueError):
    def __init__(self, lineno: int, msg: str, source: str = "<text>"):
        self.lineno = lineno
        self.source = source
        super().__init__(f"{source}:{lineno}: {msg}")


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Quad:
    points: np.ndarray
    transcription: str = ""
    dont_care: bool = False

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_rect(cls, x1, y1, x2, y2, transcription="", dont_care=None):
        if dont_care is None:
            dont_care = transcription == DONT_CARE
        return cls([(x1, y1), (x2, y1), (x2, y2), (x1, y2)], transcription, dont_care)

    @property
    def area(self) -> float:
        return polygon_area(self.points)

    def translated(self, dx: float, dy: float) -> "Quad":
        return Quad(self.points + (dx, dy), self.transcription, self.dont_care)

    def bounds(self):
        """(xmin, ymin, xmax, ymax)."""
        lo = self.points.min(axis=0)
        hi = self.points.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def __eq__(self, other):
        if not isinstance(other, Quad):
            return NotImplemented
        return (np.array_equal(self.points, other.points)
                and self.transcription == other.transcription
                and self.dont_care == other.dont_care)

    def __hash__(self):
        return hash((self.points.tobytes(), self.transcription, self.dont_care))


# ---------------------------------------------------------------------------
# parsing

_NUM = r"-?\d+(?:\.\d+)?"


def _coords(fields: Sequence[str], lineno: int, source: str) -> list[float]:
    out = []
    for f in fields:
        f = f.strip()
        try:
            v = float(f)
        except ValueError:
            raise ParseError(lineno, f"non-numeric coordinate {f!r}", source) from None
        if not np.isfinite(v):
            raise ParseError(lineno, f"non-finite coordinate {f!r}", source)
        if v < 0:
            raise ParseError(lineno, f"negative coordinate {f!r}", source)
        out.append(v)
    return out


def _transcription(raw: str) -> str:
    raw = raw.strip()
    if len(raw) >= 2 and raw[0] == raw[-1] == '"':
        raw = raw[1:-1]
    return raw


def _lines(text: str):
    if text.startswith("﻿"):
        text = text[1:]
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if line:
            yield lineno, line


def parse_icdar(text: str, fmt: str = "ic15-quad", source: str = "<text>") -> list[Quad]:
    """Parse a ground-truth file.

    ``ic13-rect``: ``x1,y1,x2,y2,"transcription"`` (whitespace-separated lines
    as in the original 2013 release are accepted too).
    ``ic15-quad``: ``x1,y1,x2,y2,x3,y3,x4,y4,transcription``.
    The transcription may itself contain commas and may be quoted.
    """
    quads = []
    if fmt == "ic13-rect":
        ncoord = 4
    elif fmt == "ic15-quad":
        ncoord = 8
    else:
        raise ValueError(f"unknown ground-truth format {fmt!r}")
    for lineno, line in _lines(text):
        if "," in line:
            parts = line.split(",", ncoord)
        else:
            parts = line.split(None, ncoord)
        if len(parts) < ncoord + 1:
            raise ParseError(lineno, f"expected {ncoord} coordinates and a transcription", source)
        vals = _coords(parts[:ncoord], lineno, source)
        text_ = _transcription(parts[ncoord])
        if fmt == "ic13-rect":
            x1, y1, x2, y2 = vals
            if x2 <= x1 or y2 <= y1:
                raise ParseError(lineno, "rectangle has non-positive extent", source)
            quads.append(Quad.from_rect(x1, y1, x2, y2, text_))
        else:
            quads.append(Quad(np.reshape(vals, (4, 2)), text_, text_ == DONT_CARE))
    return quads


def parse_detections(text: str, source: str = "<text>") -> list[Quad]:
    """Detection lines ``x1,y1,...,x4,y4[,score]``; the score is ignored."""
    quads = []
    for lineno, line in _lines(text):
        parts = [p for p in line.split(",")]
        if len(parts) not in (8, 9):
            raise ParseError(lineno, f"expected 8 coordinates and an optional score, got {len(parts)} fields", source)
        vals = _coords(parts[:8], lineno, source)
        if len(parts) == 9 and not re.fullmatch(_NUM + r"(?:[eE][-+]?\d+)?", parts[8].strip()):
            raise ParseError(lineno, f"non-numeric score {parts[8]!r}", source)
        quads.append(Quad(np.reshape(vals, (4, 2))))
    return quads


def format_detections(quads: Iterable[Quad]) -> str:
    lines = []
    for q in quads:
        lines.append(",".join(f"{v:g}" for v in q.points.reshape(-1)))
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# polygon geometry


def _signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_area(poly) -> float:
    poly = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    if len(poly) < 3:
        raise GeometryError(f"polygon needs at least 3 vertices, got {len(poly)}")
    return abs(_signed_area(poly))


def is_convex(poly) -> bool:
    """True for convex polygons in either winding; collinear vertices allowed."""
    poly = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    e = np.roll(poly, -1, axis=0) - poly
    cross = e[:, 0] * np.roll(e[:, 1], -1) - e[:, 1] * np.roll(e[:, 0], -1)
    scale = max(float(np.abs(e).max(initial=0.0)) ** 2, 1.0)
    cross = cross[np.abs(cross) > 1e-12 * scale]
    if not (np.all(cross > 0) or np.all(cross < 0)):
        return False
    # a star polygon turns the same way at every vertex but winds more than once
    angles = np.arctan2(e[:, 1], e[:, 0])
    turn = np.diff(np.concatenate([angles, angles[:1]]))
    turn = (turn + np.pi) % (2 * np.pi) - np.pi
    return abs(abs(turn.sum()) - 2 * np.pi) < 1e-6


def convex_clip(subject, clip) -> np.ndarray:
    """Sutherland-Hodgman: the part of ``subject`` inside the convex ``clip`` polygon.

    Returns an (m, 2) array, empty when the polygons do not overlap.
    """
    out = [tuple(p) for p in np.asarray(subject, dtype=np.float64).reshape(-1, 2)]
    clip = np.asarray(clip, dtype=np.float64).reshape(-1, 2)
    if _signed_area(clip) < 0:
        clip = clip[::-1]

    for i in range(len(clip)):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % len(clip)]

        def side(p):
            return (bx - ax) * (p[1] - ay) - (by - ay) * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_cross_point(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_cross_point(prev, cur, sp, sc))
            prev, sp = cur, sc
    if len(out) < 3:
        return np.zeros((0, 2))
    return np.array(out)


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def _validated(q) -> np.ndarray:
    pts = q.points if isinstance(q, Quad) else np.asarray(q, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 3 or polygon_area(pts) <= AREA_EPS:
        raise GeometryError(f"degenerate polygon {pts.tolist()}")
    if not is_convex(pts):
        raise GeometryError(f"non-convex polygon {pts.tolist()}")
    return pts


def intersection_area(a, b) -> float:
    pa, pb = _validated(a), _validated(b)
    inter = convex_clip(pa, pb)
    if len(inter) < 3:
        return 0.0
    # clipping noise must not push the overlap above either operand
    return min(polygon_area(inter), polygon_area(pa), polygon_area(pb))


def iou(a, b) -> float:
    pa, pb = _validated(a), _validated(b)
    inter = intersection_area(pa, pb)
    union = polygon_area(pa) + polygon_area(pb) - inter
    return float(min(max(inter / union, 0.0), 1.0))


# ---------------------------------------------------------------------------
# scoring


@dataclass(frozen=True)
class EvalScores:
    precision: float
    recall: float
    hmean: float
    true_positives: int
    num_detections: int
    num_ground_truth: int

    @classmethod
    def from_counts(cls, tp: int, num_det: int, num_gt: int) -> "EvalScores":
        """Edge cases: nothing to find and nothing found scores 1/1/1; with no
        ground truth, recall is 1 and any detection drives precision to 0."""
        if num_gt == 0:
            recall = 1.0
            precision = 1.0 if num_det == 0 else 0.0
        else:
            recall = tp / num_gt
            precision = tp / num_det if num_det else 0.0
        hmean = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        return cls(precision, recall, hmean, tp, num_det, num_gt)

    def __add__(self, other: "EvalScores") -> "EvalScores":
        return EvalScores.from_counts(self.true_positives + other.true_positives,
                                      self.num_detections + other.num_detections,
                                      self.num_ground_truth + other.num_ground_truth)


def match_and_score(gts: Sequence[Quad], dets: Sequence[Quad], iou_thresh: float = 0.5,
                    dont_care_overlap: float = 0.5) -> EvalScores:
    """Score one image with one-to-one matching.

    Detections covering a don't-care box by more than ``dont_care_overlap`` of
    their own area are dropped; don't-care boxes are not counted. Remaining
    pairs with IoU >= ``iou_thresh`` are accepted greedily by descending IoU,
    ties going to the lower ground-truth index, then the lower detection index.
    """
    if not 0 < iou_thresh <= 1:
        raise ValueError(f"iou_thresh must be in (0, 1], got {iou_thresh}")
    care = [g for g in gts if not g.dont_care]
    ignored = [g for g in gts if g.dont_care]
    kept = []
    for d in dets:
        area = polygon_area(_validated(d))
        if any(intersection_area(d, g) > dont_care_overlap * area for g in ignored):
            continue
        kept.append(d)

    pairs = []
    for gi, g in enumerate(care):
        for di, d in enumerate(kept):
            v = iou(g, d)
            if v >= iou_thresh:
                pairs.append((-v, gi, di))
    pairs.sort()
    gt_used, det_used = set(), set()
    tp = 0
    for _, gi, di in pairs:
        if gi in gt_used or di in det_used:
            continue
        gt_used.add(gi)
        det_used.add(di)
        tp += 1
    return EvalScores.from_counts(tp, len(kept), len(care))


def pooled_scores(per_image: Iterable[EvalScores]) -> EvalScores:
    """Micro-average: sum counts over images, then derive P/R/HMean."""
    tp = det = gt = 0
    for s in per_image:
        tp += s.true_positives
        det += s.num_detections
        gt += s.num_ground_truth
    return EvalScores.from_counts(tp, det, gt)


class ShiftCurve:
    """Dataset-level scores for each horizontal shift in ``[-r, r]``."""

    def __init__(self, entries: Mapping[int, EvalScores] | Iterable[tuple[int, EvalScores]]):
        items = sorted(dict(entries).items())
        shifts = [s for s, _ in items]
        if not shifts:
            raise ValueError("shift curve is empty")
        r = max(abs(s) for s in shifts)
        if shifts != list(range(-r, r + 1)):
            raise ValueError(f"shifts must be contiguous and symmetric, got {shifts}")
        self.entries = items
        self.r = r

    def __getitem__(self, shift: int) -> EvalScores:
        return dict(self.entries)[shift]

    def __len__(self):
        return len(self.entries)

    def hmeans(self) -> dict[int, float]:
        return {s: sc.hmean for s, sc in self.entries}

    def baseline_deviation(self, r: int) -> tuple[float, float]:
        """(min, max) of HMean(s) - HMean(0) over |s| <= r."""
        h = self.hmeans()
        vals = [h[s] - h[0] for s in range(-r, r + 1)]
        return min(vals), max(vals)


def delta_hmean(curve, r: int) -> float:
    """Best minus worst HMean over all shifts with ``|s| <= r``.

    ``curve`` is a :class:`ShiftCurve` or a ``{shift: hmean}`` mapping.
    """
    h = curve.hmeans() if isinstance(curve, ShiftCurve) else dict(curve)
    if r < 0:
        raise ValueError(f"r must be non-negative, got {r}")
    missing = [s for s in range(-r, r + 1) if s not in h]
    if missing:
        raise ValueError(f"curve does not cover shifts {missing}")
    vals = [h[s] for s in range(-r, r + 1)]
    return max(vals) - min(vals)
