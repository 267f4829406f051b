"""Independent reference implementations used as test oracles.

None of these import the code paths they check.
"""
import itertools
import math

import numpy as np
import torch
import torch.nn.functional as F


def cubic(x, a=-0.5):
    x = abs(x)
    if x <= 1:
        return (a + 2) * x**3 - (a + 3) * x**2 + 1
    if x < 2:
        return a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a
    return 0.0


def direct_bicubic(img, out_h, out_w, a=-0.5):
    """Pixel-by-pixel 2-D cubic convolution with edge clamping (no clamping of values)."""
    h, w, c = img.shape
    out = np.zeros((out_h, out_w, c))
    sy, sx = out_h / h, out_w / w
    ky, kx = (1 / sy if sy < 1 else 1.0), (1 / sx if sx < 1 else 1.0)
    for i in range(out_h):
        cy = (i + 0.5) / sy - 0.5
        for j in range(out_w):
            cx = (j + 0.5) / sx - 0.5
            acc = np.zeros(c)
            total = 0.0
            for m in range(math.floor(cy - 2 * ky), math.ceil(cy + 2 * ky) + 1):
                wy = cubic((m - cy) / ky, a)
                if wy == 0:
                    continue
                for n in range(math.floor(cx - 2 * kx), math.ceil(cx + 2 * kx) + 1):
                    wgt = wy * cubic((n - cx) / kx, a)
                    if wgt == 0:
                        continue
                    acc += wgt * img[min(max(m, 0), h - 1), min(max(n, 0), w - 1)]
                    total += wgt
            out[i, j] = acc / total
    return out


def brute_force_thresholds(probs, truth, grid):
    """Exhaustive per-class F1 maximiser; earliest grid value wins ties."""
    probs = np.asarray(probs, dtype=float)
    truth = np.asarray(truth).astype(bool)
    result = []
    for c in range(probs.shape[1]):
        if not truth[:, c].any():
            result.append(0.5)
            continue
        best, best_t = -1.0, None
        for t in grid:
            tp = fp = fn = 0
            for p, y in zip(probs[:, c], truth[:, c]):
                hit = p >= t
                tp += hit and y
                fp += hit and not y
                fn += (not hit) and y
            f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
            if f1 > best:
                best, best_t = f1, t
        result.append(best_t)
    return np.array(result)


def f1_grid_bruteforce_single(probs, truth, grid):
    return brute_force_thresholds(np.asarray(probs)[:, None], np.asarray(truth)[:, None], grid)[0]


VGG_PLAN = (64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M", 512, 512, 512, 512)


def straight_vgg_features(weights, biases, x):
    """conv5_4 pre-activation by walking a flat list of (weight, bias) pairs."""
    mean = torch.tensor([0.485, 0.456, 0.406], dtype=x.dtype).view(1, 3, 1, 1)
    std = torch.tensor([0.229, 0.224, 0.225], dtype=x.dtype).view(1, 3, 1, 1)
    h = (x - mean) / std
    k = 0
    convs = sum(1 for p in VGG_PLAN if p != "M")
    for p in VGG_PLAN:
        if p == "M":
            h = F.max_pool2d(h, 2)
            continue
        h = F.conv2d(h, weights[k], biases[k], padding=1)
        k += 1
        if k < convs:
            h = torch.relu(h)
    return h


def central_difference(fn, x, h=1e-3, coords=None):
    """Central finite differences of scalar ``fn`` w.r.t. float64 array ``x``."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    grads = {}
    for i in coords:
        old = flat[i]
        flat[i] = old + h
        up = float(fn(x))
        flat[i] = old - h
        down = float(fn(x))
        flat[i] = old
        grads[i] = (up - down) / (2 * h)
    return grads


def rot90_by_hand(a):
    """Counter-clockwise quarter turn of an (H, W, C) array by explicit indexing."""
    h, w = a.shape[:2]
    out = np.empty((w, h) + a.shape[2:], a.dtype)
    for i, j in itertools.product(range(h), range(w)):
        out[w - 1 - j, i] = a[i, j]
    return out
