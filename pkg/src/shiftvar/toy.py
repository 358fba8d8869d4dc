"""Synthetic glyph experiment: render, train, sweep, and measure oscillation."""
from __future__ import annotations

import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .downsample import DownsampleBlock, DownsampleStrategy
from .tensor import (
    Adam,
    Conv2d,
    DEFAULT_DTYPE,
    Layer,
    ReLU,
    Sequential,
    Sigmoid,
    UpsampleNearest,
    check_finite,
    load_checkpoint,
    mse_loss,
    save_checkpoint,
    seeded_rng,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GlyphSample:
    image: np.ndarray   # (1, S, S)
    target: np.ndarray  # (1, S, S)
    center: tuple[int, int]  # (x, y)


def render_glyph(canvas: int, center, glyph_size: int = 15, stroke: int = 2) -> np.ndarray:
    """Binary 'x' glyph on a black ``canvas`` x ``canvas`` image, shape (1, S, S).

    A pixel is lit when it lies within the glyph's half-extent and its centre is
    within ``stroke / 2`` of either diagonal through ``center``.
    """
    cx, cy = center
    half = glyph_size // 2
    if cx - half < 0 or cy - half < 0 or cx + half >= canvas or cy + half >= canvas:
        raise ValueError(f"glyph of size {glyph_size} at {center} does not fit a {canvas}px canvas")
    ys, xs = np.mgrid[0:canvas, 0:canvas]
    dx, dy = xs - cx, ys - cy
    inside = (np.abs(dx) <= half) & (np.abs(dy) <= half)
    reach = stroke / 2.0 * np.sqrt(2.0)
    on = inside & ((np.abs(dx - dy) <= reach) | (np.abs(dx + dy) <= reach))
    return on.astype(DEFAULT_DTYPE)[None]


def render_target(canvas: int, center, sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    cx, cy = center
    ys, xs = np.mgrid[0:canvas, 0:canvas]
    d2 = (xs - cx) ** 2 + (ys - cy) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma)).astype(DEFAULT_DTYPE)[None]


def glyph_positions(canvas: int, glyph_size: int, spacing: int = 1) -> list[int]:
    """Coordinates along one axis where the glyph fits and ``coord % spacing == 0``."""
    half = glyph_size // 2
    return [p for p in range(half, canvas - half) if p % spacing == 0]


def make_training_set(canvas: int, spacing: int = 4, rng=None, glyph_size: int = 15,
                      stroke: int = 2, sigma: float | None = None) -> list[GlyphSample]:
    if spacing < 1:
        raise ValueError(f"spacing must be >= 1, got {spacing}")
    sigma = glyph_size / 4.0 if sigma is None else sigma
    coords = glyph_positions(canvas, glyph_size, spacing)
    samples = [
        GlyphSample(render_glyph(canvas, (x, y), glyph_size, stroke),
                    render_target(canvas, (x, y), sigma), (x, y))
        for y in coords for x in coords
    ]
    if rng is not None:
        order = rng.permutation(len(samples))
        samples = [samples[i] for i in order]
    return samples


class ToyModel(Sequential):
    """stem -> 2 downsampling blocks -> 2 convs -> nearest x4 -> 1x1 head -> sigmoid.

    ``downsample=False`` builds the stride-1 control: the blocks become plain
    3x3 stride-1 convolutions and the upsampler is dropped.
    """

    def __init__(self, strategy="strided_conv", channels: int = 8, seed: int = 0,
                 downsample: bool = True, mode: str = "zero",
                 head_bias: float = -4.0):
        if isinstance(strategy, str):
            strategy = DownsampleStrategy.parse(strategy)
        self.strategy = strategy
        self.channels = channels
        self.seed = seed
        self.downsample = downsample
        self.mode = mode
        rng = seeded_rng(seed)
        c = channels

        def block(name):
            if downsample:
                return (name, DownsampleBlock(strategy, c, c, rng=rng, mode=mode))
            return (name, Conv2d(c, c, 3, rng=rng, mode=mode))

        layers = [
            ("stem", Conv2d(1, c, 3, rng=rng, mode=mode)), ("stem_act", ReLU()),
            block("down1"), ("down1_act", ReLU()),
            block("down2"), ("down2_act", ReLU()),
            ("conv1", Conv2d(c, c, 3, rng=rng, mode=mode)), ("conv1_act", ReLU()),
            ("conv2", Conv2d(c, c, 3, rng=rng, mode=mode)), ("conv2_act", ReLU()),
        ]
        if downsample:
            layers.append(("up", UpsampleNearest(4)))
        layers += [("head", Conv2d(c, 1, 1, rng=rng, mode=mode)), ("out", Sigmoid())]
        super().__init__(layers)
        # start near the mostly-zero target so early steps don't kill the ReLUs
        self.layers[-2][1].bias.value[...] = head_bias

    @property
    def stride(self) -> int:
        return 4 if self.downsample else 1

    def describe(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "channels": self.channels,
            "seed": self.seed,
            "downsample": self.downsample,
            "mode": self.mode,
        }

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Forward pass on a (N, 1, H, W) batch without touching this model's caches."""
        import copy

        return copy.deepcopy(self).forward(images.astype(DEFAULT_DTYPE, copy=False))

    def save(self, f) -> None:
        meta = "\n".join(f"{k}={v}" for k, v in self.describe().items())
        save_checkpoint(f, self.params(), meta)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        self.save(buf)
        return buf.getvalue()

    @classmethod
    def load(cls, f) -> "ToyModel":
        meta, arrays = load_checkpoint(f)
        cfg = dict(line.split("=", 1) for line in meta.splitlines() if line)
        model = cls(cfg["strategy"], int(cfg["channels"]), int(cfg["seed"]),
                    cfg["downsample"] == "True", cfg["mode"])
        for name, p in model.params():
            if name not in arrays:
                raise ValueError(f"checkpoint is missing parameter {name!r}")
            if arrays[name].shape != p.shape:
                raise ValueError(f"parameter {name!r}: shape {arrays[name].shape} != {p.shape}")
            p.value[...] = arrays[name]
        return model


@dataclass
class TrainConfig:
    iters: int = 1500
    batch: int = 8
    lr: float = 1e-3
    seed: int = 0
    loss_threshold: float = 0.01


@dataclass
class TrainResult:
    model: ToyModel
    losses: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        # average of the tail smooths out batch-to-batch noise
        tail = self.losses[-50:]
        return float(np.mean(tail)) if tail else float("nan")


def train(model: Layer, data, config: TrainConfig) -> TrainResult:
    """Minimise per-pixel MSE to the Gaussian targets with Adam.

    Batches are drawn from successive seeded permutations of ``data``.
    Raises ``FloatingPointError`` if the loss diverges.
    """
    if not data:
        raise ValueError("training set is empty")
    rng = seeded_rng(config.seed)
    images = np.stack([s.image for s in data]).astype(DEFAULT_DTYPE)
    targets = np.stack([s.target for s in data]).astype(DEFAULT_DTYPE)
    params = [p for _, p in model.params()]
    opt = Adam(params, lr=config.lr)
    losses = []
    order = rng.permutation(len(data))
    cursor = 0
    for it in range(config.iters):
        if cursor + config.batch > len(order):
            order = rng.permutation(len(data))
            cursor = 0
        idx = order[cursor:cursor + config.batch]
        cursor += config.batch
        pred = model.forward(images[idx])
        loss, grad = mse_loss(pred, targets[idx])
        if not np.isfinite(loss):
            raise FloatingPointError(f"loss diverged at iteration {it}: {loss}")
        model.backward(grad.astype(DEFAULT_DTYPE))
        for p in params:
            check_finite(p.grad, f"backward pass (iteration {it})")
        opt.step()
        losses.append(loss)
        if it % 250 == 0:
            log.debug("iter %d loss %.6f", it, loss)
    return TrainResult(model, losses)


@dataclass
class ShiftSweepResult:
    positions: list[int]
    responses: list[float]
    canvas: int | None = None

    def rows(self):
        return list(zip(self.positions, self.responses))


def shift_sweep(model: ToyModel, canvas: int, y: int | None = None, glyph_size: int = 15,
                stroke: int = 2, threads: int = 1, chunk: int = 16) -> ShiftSweepResult:
    """Slide the glyph one pixel at a time along row ``y`` and record the peak score."""
    y = canvas // 2 if y is None else y
    xs = glyph_positions(canvas, glyph_size)
    images = np.stack([render_glyph(canvas, (x, y), glyph_size, stroke) for x in xs])
    batches = [images[i:i + chunk] for i in range(0, len(xs), chunk)]

    def peak(batch):
        return model.predict(batch).reshape(len(batch), -1).max(axis=1)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            peaks = list(pool.map(peak, batches))
    else:
        peaks = [peak(b) for b in batches]
    responses = [float(v) for v in np.concatenate(peaks)]
    return ShiftSweepResult(xs, responses, canvas)


@dataclass(frozen=True)
class OscillationStats:
    amplitude: float
    mean: float
    dominant_period: int

    def as_dict(self):
        return asdict(self)


def oscillation_stats(sweep, length: int | None = None) -> OscillationStats:
    """Peak-to-peak amplitude, mean, and dominant period of a response sequence.

    The mean-subtracted sequence is zero-padded to ``length`` (the sweep's canvas
    size by default, else the sequence length) and the period is ``length / k``
    rounded, where ``k`` is the non-DC DFT bin of largest magnitude (lowest bin on
    ties). Sweeping a whole canvas keeps periods that divide the canvas on exact
    bins. A flat sequence reports period 0.
    """
    if isinstance(sweep, ShiftSweepResult):
        length = length or sweep.canvas
        sweep = sweep.responses
    r = np.asarray(sweep, dtype=np.float64)
    if r.size < 8:
        raise ValueError(f"need at least 8 sweep samples, got {r.size}")
    n = max(length or r.size, r.size)
    amplitude = float(r.max() - r.min())
    mean = float(r.mean())
    if amplitude == 0.0:
        return OscillationStats(0.0, mean, 0)
    mag = np.abs(np.fft.rfft(r - mean, n=n))
    k = int(np.argmax(mag[1:])) + 1
    return OscillationStats(amplitude, mean, int(round(n / k)))
