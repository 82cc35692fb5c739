"""Slow, loop-based reference implementations used as test oracles.

They deliberately avoid the package's vectorized code paths.
"""

import math

import numpy as np


def tv_bruteforce(img):
    """img: (N, H, W, C) float64 array."""
    n, h, w, c = img.shape
    total = 0.0
    for b in range(n):
        sv = sh = 0.0
        for y in range(h):
            for x in range(w):
                for k in range(c):
                    if y + 1 < h:
                        sv += (img[b, y + 1, x, k] - img[b, y, x, k]) ** 2
                    if x + 1 < w:
                        sh += (img[b, y, x + 1, k] - img[b, y, x, k]) ** 2
        total += sv / ((h - 1) * w * c) + sh / (h * (w - 1) * c)
    return total / n


def gaussian_taps_2d(size, sigma):
    r = size // 2
    taps = np.zeros((size, size))
    for i in range(size):
        for j in range(size):
            taps[i, j] = math.exp(-((i - r) ** 2 + (j - r) ** 2) / (2 * sigma**2))
    return taps / taps.sum()


def _reflect(i, n):
    # mirror about the edge sample, without repeating it
    while i < 0 or i >= n:
        i = -i if i < 0 else 2 * (n - 1) - i
    return i


def blur_bruteforce(img, size=21, sigma=3.0):
    """(H, W, C) image blurred with reflect boundary, by shifting and summing."""
    h, w, c = img.shape
    taps = gaussian_taps_2d(size, sigma)
    r = size // 2
    rows = np.array([[_reflect(y + dy, h) for dy in range(-r, r + 1)] for y in range(h)])
    cols = np.array([[_reflect(x + dx, w) for dx in range(-r, r + 1)] for x in range(w)])
    out = np.zeros_like(img)
    for i in range(size):
        for j in range(size):
            out += taps[i, j] * img[rows[:, i]][:, cols[:, j]]
    return out


def color_loss_bruteforce(a, b, size=21, sigma=3.0):
    diffs = [blur_bruteforce(a[i], size, sigma) - blur_bruteforce(b[i], size, sigma) for i in range(len(a))]
    return float(np.mean(np.square(diffs)))


def psnr_bruteforce(a, b):
    a = np.clip(a, 0, 1)
    b = np.clip(b, 0, 1)
    se = 0.0
    for v, u in zip(a.ravel(), b.ravel()):
        se += (float(v) - float(u)) ** 2
    mse = se / a.size
    return 100.0 if mse < 1e-10 else 10 * math.log10(1.0 / mse)


def ssim_bruteforce(a, b, size=11, sigma=1.5):
    """Mean SSIM over valid 11x11 windows of the BT.601 luma."""
    a, b = np.clip(a, 0, 1), np.clip(b, 0, 1)
    x = 0.299 * a[..., 0] + 0.587 * a[..., 1] + 0.114 * a[..., 2]
    y = 0.299 * b[..., 0] + 0.587 * b[..., 1] + 0.114 * b[..., 2]
    w = gaussian_taps_2d(size, sigma)
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for i in range(x.shape[0] - size + 1):
        for j in range(x.shape[1] - size + 1):
            px, py = x[i : i + size, j : j + size], y[i : i + size, j : j + size]
            mx, my = (w * px).sum(), (w * py).sum()
            vx = (w * (px - mx) ** 2).sum()
            vy = (w * (py - my) ** 2).sum()
            cov = (w * (px - mx) * (py - my)).sum()
            vals.append(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def central_difference(f, x, eps=1e-6, n_probe=None, rng=None):
    """Numerical gradient of scalar f at float64 array x (all or a random subset of coordinates)."""
    flat = x.reshape(-1)
    idx = np.arange(flat.size) if n_probe is None else rng.choice(flat.size, n_probe, replace=False)
    grad = {}
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = f(x)
        flat[i] = old - eps
        fm = f(x)
        flat[i] = old
        grad[int(i)] = (fp - fm) / (2 * eps)
    return grad
