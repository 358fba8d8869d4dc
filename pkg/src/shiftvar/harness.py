"""Shifted-crop benchmark: letterbox, admissibility, crops, detectors, and the sweep.

Each sample is letterboxed to ``(H + 2r, W + 2r)`` and cut into ``2r + 1``
crops of size ``(H, W)`` whose windows start at ``x = r + s`` for
``s in [-r, r]`` (``y = r`` throughout). Samples whose boxes would leave any
crop are excluded. Detections from every crop are matched against the
translated ground truth, and counts are pooled per shift across samples.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy import ndimage

from .geometry import (
    EvalScores,
    GeometryError,
    Quad,
    ShiftCurve,
    convex_clip,
    match_and_score,
    parse_detections,
    parse_icdar,
    polygon_area,
    pooled_scores,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# binary PNM images


def _pnm_tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    tokens, i = [], 2
    while len(tokens) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError("truncated PNM header")
        tokens.append(int(data[i:j]))
        i = j
    return tokens, i + 1  # single whitespace byte ends the header


def read_pnm(path) -> np.ndarray:
    """Load an 8-bit binary P5 (H, W) or P6 (H, W, 3) image as uint8."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: not a binary PGM/PPM file (magic {magic!r})")
    (w, h, maxval), start = _pnm_tokens(data, 3)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    n = w * h * channels
    pix = np.frombuffer(data, dtype=np.uint8, count=n, offset=start)
    return pix.reshape((h, w) if channels == 1 else (h, w, 3)).copy()


def write_pnm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write image of shape {img.shape} as PNM")
    h, w = img.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + img.tobytes())


# ---------------------------------------------------------------------------
# dataset


@dataclass
class DatasetSample:
    image: np.ndarray  # float32 (H, W) or (H, W, 3), values in [0, 1]
    ground_truth: list[Quad]
    id: str

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


def load_manifest(path, gt_format: str = "ic15-quad") -> list[DatasetSample]:
    """Read ``<image-path>\\t<gt-path>`` lines; relative paths resolve against the manifest."""
    path = Path(path)
    base = path.parent
    samples = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected '<image>\\t<ground truth>'")
        img_path, gt_path = (base / p.strip() for p in parts)
        image = read_pnm(img_path).astype(np.float32) / 255.0
        gts = parse_icdar(gt_path.read_text(encoding="utf-8-sig"), gt_format, str(gt_path))
        samples.append(DatasetSample(image, gts, img_path.stem))
    return samples


@dataclass(frozen=True)
class ShiftConfig:
    r: int = 16
    target_h: int = 256
    target_w: int = 256
    iou_thresh: float = 0.5

    def __post_init__(self):
        if self.r < 0:
            raise ValueError(f"r must be >= 0, got {self.r}")
        if self.target_h < 1 or self.target_w < 1:
            raise ValueError("target size must be positive")


# ---------------------------------------------------------------------------
# geometry of the crops


@dataclass(frozen=True)
class Letterbox:
    scale: float
    offset_x: int
    offset_y: int
    new_h: int
    new_w: int


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment and clamped borders."""
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape[:2]

    def axis(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo).astype(np.float32)

    y0, y1, fy = axis(out_h, h)
    x0, x1, fx = axis(out_w, w)
    if img.ndim == 3:
        fy, fx = fy[:, None, None], fx[None, :, None]
    else:
        fy, fx = fy[:, None], fx[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def letterbox_resize(sample: DatasetSample, out_h: int, out_w: int):
    """Scale to fit ``(out_h, out_w)`` keeping aspect, centre on black.

    Returns ``(resized_sample, Letterbox)``. Box vertices follow the same
    scale and offset as the pixels.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    h, w = sample.height, sample.width
    scale = min(out_h / h, out_w / w)
    nh = min(out_h, max(1, int(round(h * scale))))
    nw = min(out_w, max(1, int(round(w * scale))))
    oy, ox = (out_h - nh) // 2, (out_w - nw) // 2
    canvas_shape = (out_h, out_w) + sample.image.shape[2:]
    canvas = np.zeros(canvas_shape, dtype=np.float32)
    canvas[oy:oy + nh, ox:ox + nw] = bilinear_resize(sample.image, nh, nw)
    sx, sy = nw / w, nh / h
    boxes = [Quad(q.points * (sx, sy) + (ox, oy), q.transcription, q.dont_care)
             for q in sample.ground_truth]
    return DatasetSample(canvas, boxes, sample.id), Letterbox(scale, ox, oy, nh, nw)


def sample_admissible(sample: DatasetSample, r: int, target) -> bool:
    """True iff every box stays inside the crop window for all shifts in [-r, r].

    Windows span ``[r + s, r + s + W] x [r, r + H]``, so the condition reduces
    to x-extent within ``[2r, W]`` and y-extent within ``[r, H + r]``.
    """
    th, tw = target
    for q in sample.ground_truth:
        xmin, ymin, xmax, ymax = q.bounds()
        if xmin < 2 * r or xmax > tw or ymin < r or ymax > th + r:
            return False
    return True


@dataclass
class ShiftedCrop:
    shift: int
    image: np.ndarray
    boxes: list[Quad]


def generate_crops(sample: DatasetSample, r: int, target=None) -> list[ShiftedCrop]:
    """Cut ``2r + 1`` windows; crop ``s`` starts at column ``r + s``, row ``r``."""
    if target is None:
        target = (sample.height - 2 * r, sample.width - 2 * r)
    th, tw = target
    if sample.height != th + 2 * r or sample.width != tw + 2 * r:
        raise ValueError(f"sample {sample.id!r} is {sample.height}x{sample.width}, "
                         f"expected {th + 2 * r}x{tw + 2 * r}")
    if not sample_admissible(sample, r, target):
        raise ValueError(f"sample {sample.id!r} is not admissible for r={r}")
    crops = []
    for s in range(-r, r + 1):
        x0 = r + s
        img = sample.image[r:r + th, x0:x0 + tw]
        boxes = [q.translated(-x0, -r) for q in sample.ground_truth]
        crops.append(ShiftedCrop(s, img, boxes))
    return crops


# ---------------------------------------------------------------------------
# detectors


class Detector(Protocol):
    def __call__(self, sample_id: str, shift: int, image: np.ndarray) -> list[Quad]: ...


def extract_boxes(score_map: np.ndarray, threshold: float = 0.5) -> list[Quad]:
    """Axis-aligned boxes around 4-connected regions with score > ``threshold``.

    Boxes use pixel-edge coordinates: a region covering rows ``a..b-1`` and
    columns ``c..d-1`` becomes the rectangle ``(c, a)-(d, b)``.
    """
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    labels, n = ndimage.label(np.asarray(score_map) > threshold)
    boxes = []
    for sl in ndimage.find_objects(labels):
        ys, xs = sl
        boxes.append(Quad.from_rect(xs.start, ys.start, xs.stop, ys.stop, dont_care=False))
    return boxes


class ToyDetector:
    """Runs a toy heatmap model on the crop and boxes its thresholded score map."""

    def __init__(self, model, threshold: float = 0.5):
        self.model = model
        self.threshold = threshold

    def __call__(self, sample_id, shift, image):
        img = np.asarray(image, dtype=np.float32)
        if img.ndim == 3:
            img = img.mean(axis=2)
        score = self.model.predict(img[None, None])[0, 0]
        return extract_boxes(score, self.threshold)


class FileDetector:
    """Reads precomputed detections from ``<root>/<sample-id>/shift_<s>.txt``."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, sample_id: str, shift: int) -> Path:
        return self.root / sample_id / f"shift_{shift}.txt"

    def __call__(self, sample_id, shift, image):
        p = self.path(sample_id, shift)
        return parse_detections(p.read_text(encoding="utf-8-sig"), str(p))


class DetectorError(RuntimeError):
    def __init__(self, sample_id: str, shift: int, cause: BaseException):
        self.sample_id = sample_id
        self.shift = shift
        super().__init__(f"detector failed on sample {sample_id!r} at shift {shift}: {cause}")


def clip_to_crop(q: Quad, h: int, w: int) -> Quad | None:
    """Clip a detection to the crop rectangle; None if nothing with area is left."""
    xmin, ymin, xmax, ymax = q.bounds()
    if xmin >= 0 and ymin >= 0 and xmax <= w and ymax <= h:
        return q
    rect = [(0, 0), (w, 0), (w, h), (0, h)]
    pts = convex_clip(q.points, rect)
    if len(pts) < 3 or polygon_area(pts) <= 1e-9:
        return None
    return Quad(pts, q.transcription, q.dont_care)


# ---------------------------------------------------------------------------
# sweep


@dataclass
class SweepReport:
    curve: ShiftCurve
    per_sample: dict[str, dict[int, EvalScores]] = field(default_factory=dict)
    excluded: list[str] = field(default_factory=list)
    num_samples: int = 0

    @property
    def num_admissible(self) -> int:
        return len(self.per_sample)


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        threads = int(os.environ.get("EQUIVAR_THREADS", "1") or 1)
    return max(1, int(threads))


def run_sweep(dataset: Sequence[DatasetSample], detector: Callable, config: ShiftConfig,
              threads: int | None = None) -> SweepReport:
    r, th, tw = config.r, config.target_h, config.target_w
    prepared = []
    excluded = []
    for sample in dataset:
        resized, _ = letterbox_resize(sample, th + 2 * r, tw + 2 * r)
        if sample_admissible(resized, r, (th, tw)):
            prepared.append(resized)
        else:
            excluded.append(sample.id)
    if not prepared:
        raise ValueError(f"no admissible samples for r={r} (all {len(dataset)} excluded)")
    log.info("%d of %d samples admissible at r=%d", len(prepared), len(dataset), r)

    jobs = [(sample, crop) for sample in prepared for crop in generate_crops(sample, r, (th, tw))]

    def score(job):
        sample, crop = job
        try:
            dets = detector(sample.id, crop.shift, crop.image)
        except Exception as exc:  # noqa: BLE001 - reported with its location
            raise DetectorError(sample.id, crop.shift, exc) from exc
        clipped = [c for c in (clip_to_crop(d, th, tw) for d in dets) if c is not None]
        try:
            return match_and_score(crop.boxes, clipped, config.iou_thresh)
        except GeometryError as exc:
            raise DetectorError(sample.id, crop.shift, exc) from exc

    n_threads = resolve_threads(threads)
    if n_threads > 1:
        with ThreadPoolExecutor(n_threads) as pool:
            results = list(pool.map(score, jobs))
    else:
        results = [score(j) for j in jobs]

    per_sample: dict[str, dict[int, EvalScores]] = {}
    for (sample, crop), sc in zip(jobs, results):
        per_sample.setdefault(sample.id, {})[crop.shift] = sc
    curve = ShiftCurve({
        s: pooled_scores(per_sample[smp.id][s] for smp in prepared) for s in range(-r, r + 1)
    })
    return SweepReport(curve, per_sample, excluded, len(dataset))
