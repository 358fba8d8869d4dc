# %% [markdown]
# # Shift evaluation on a synthetic dataset
#
# Build a few images of white "words" on black, then score two mock detectors
# over horizontal shifts of up to 8 px. One is a pure function of the pixels,
# so its scores cannot depend on the shift. The other snaps box edges to a
# 8 px grid in absolute crop coordinates, which is the kind of position
# dependence a strided network has.

# %%
import numpy as np

from shiftvar.geometry import Quad, delta_hmean
from shiftvar.harness import DatasetSample, ShiftConfig, extract_boxes, run_sweep

r, th, tw = 8, 48, 96
rng = np.random.default_rng(0)
dataset = []
for i in range(5):
    img = np.zeros((th + 2 * r, tw + 2 * r), np.float32)
    gts = []
    for _ in range(3):
        w, h = rng.integers(8, 20), rng.integers(5, 10)
        x, y = rng.integers(2 * r, tw - w), rng.integers(r, th + r - h)
        img[y:y + h, x:x + w] = 1.0
        gts.append(Quad.from_rect(x, y, x + w, y + h, "word"))
    dataset.append(DatasetSample(img, gts, f"img{i}"))
config = ShiftConfig(r, th, tw)

# %%
def pixel_detector(sample_id, shift, image):
    return extract_boxes(image, 0.5)


def grid_detector(sample_id, shift, image):
    out = []
    for q in extract_boxes(image, 0.5):
        x1, y1, x2, y2 = q.bounds()
        x1, x2 = 8 * np.floor(x1 / 8), 8 * np.ceil(x2 / 8)
        out.append(Quad.from_rect(x1, y1, min(x2, tw), y2))
    return out


for name, det in (("pixel", pixel_detector), ("grid", grid_detector)):
    curve = run_sweep(dataset, det, config).curve
    h = curve.hmeans()
    print(f"{name:5s} HMean(0) {h[0]:.3f}  Delta HMean(r) for r = 0..{r}:",
          [round(delta_hmean(curve, k), 3) for k in range(r + 1)])
