import numpy as np
import pytest

ACCEPTANCE_LINES = []


def record(criterion, ok, detail=""):
    """Log one acceptance line; printed in the terminal summary."""
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_conv2d(x, w, b, stride, pad, mode="zero"):
    """Direct nested-loop cross-correlation, used as an oracle."""
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b_ in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for cc in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                yy = i * stride + di - pad
                                xx = j * stride + dj - pad
                                if mode == "circular":
                                    yy %= h
                                    xx %= wd
                                elif not (0 <= yy < h and 0 <= xx < wd):
                                    continue
                                acc += x[b_, cc, yy, xx] * w[o, cc, di, dj]
                    out[b_, o, i, j] = acc
    return out


def central_diff(f, arr, step=1e-5):
    """Numeric gradient of scalar ``f()`` w.r.t. ``arr`` (modified in place and restored)."""
    g = np.zeros_like(arr)
    flat, gf = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * step)
    return g


def _inside_convex(poly, px, py):
    """Boolean mask of grid points inside a convex polygon (either winding)."""
    poly = np.asarray(poly, dtype=float)
    signs = []
    for i in range(len(poly)):
        ax, ay = poly[i]
        bx, by = poly[(i + 1) % len(poly)]
        signs.append((bx - ax) * (py - ay) - (by - ay) * (px - ax))
    signs = np.stack(signs)
    return (signs >= 0).all(axis=0) | (signs <= 0).all(axis=0)


def raster_iou(a, b, step=0.01):
    """IoU by counting cell centres of a ``step`` grid inside each polygon."""
    pts = np.vstack([a, b])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    xs = np.arange(lo[0] + step / 2, hi[0], step)
    ys = np.arange(lo[1] + step / 2, hi[1], step)
    px, py = np.meshgrid(xs, ys)
    ina, inb = _inside_convex(a, px, py), _inside_convex(b, px, py)
    union = (ina | inb).sum()
    return (ina & inb).sum() / union if union else 0.0


def random_convex_quad(r, span=3.0):
    """Four points on a randomly placed circle, sorted by angle: always convex."""
    c = r.uniform(0, span, 2)
    rad = r.uniform(0.3, span / 2)
    ang = np.sort(r.uniform(0, 2 * np.pi, 4))
    while np.diff(np.concatenate([ang, ang[:1] + 2 * np.pi])).max() > np.pi * 0.95:
        ang = np.sort(r.uniform(0, 2 * np.pi, 4))
    return np.stack([c[0] + rad * np.cos(ang), c[1] + rad * np.sin(ang)], axis=1)
