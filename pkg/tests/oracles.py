"""Independent slow reference implementations used by several test modules."""
import itertools
import math

import numpy as np


def gauss(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2
    w = np.exp(-r ** 2 / (2 * sigma ** 2))
    return w / w.sum()


def naive_ssim(x, y, size=11, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2):
    """Windowed SSIM by explicit loops over every valid window position (2D or 3D)."""
    g = gauss(size, sigma)
    win = g
    for _ in range(x.ndim - 1):
        win = np.multiply.outer(win, g)
    vals = []
    ranges = [range(s - size + 1) for s in x.shape]
    for pos in itertools.product(*ranges):
        sl = tuple(slice(p, p + size) for p in pos)
        a, b = x[sl], y[sl]
        ma, mb = (win * a).sum(), (win * b).sum()
        va = (win * (a - ma) ** 2).sum()
        vb = (win * (b - mb) ** 2).sum()
        cov = (win * (a - ma) * (b - mb)).sum()
        vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def naive_sobel(img, eps=0.0):
    """Sobel magnitude with replicated borders, one pixel at a time."""
    H, W = img.shape
    kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], float)
    ky = kx.T
    out = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            gx = gy = 0.0
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    v = img[min(max(i + di, 0), H - 1), min(max(j + dj, 0), W - 1)]
                    gx += kx[di + 1, dj + 1] * v
                    gy += ky[di + 1, dj + 1] * v
            out[i, j] = np.sqrt(gx * gx + gy * gy + eps)
    return out


def naive_forward_diff3(v, eps=0.0):
    D, H, W = v.shape
    out = np.zeros_like(v)
    for d, h, w in itertools.product(range(D), range(H), range(W)):
        gd = v[d + 1, h, w] - v[d, h, w] if d + 1 < D else 0.0
        gh = v[d, h + 1, w] - v[d, h, w] if h + 1 < H else 0.0
        gw = v[d, h, w + 1] - v[d, h, w] if w + 1 < W else 0.0
        out[d, h, w] = np.sqrt(gd * gd + gh * gh + gw * gw + eps)
    return out


def naive_entropy(img, bins=256):
    q = np.clip(np.floor(np.asarray(img).ravel() * bins), 0, bins - 1).astype(int)
    counts = {}
    for v in q:
        counts[v] = counts.get(v, 0) + 1
    n = q.size
    return -sum(c / n * np.log2(c / n) for c in counts.values())


def naive_scan(u, delta, A, B, C, D):
    """Selective-scan recurrence written out per step, channel and state entry."""
    L, d = u.shape
    n = A.shape[1]
    h = [[0.0] * n for _ in range(d)]
    y = np.zeros((L, d))
    for t in range(L):
        for i in range(d):
            acc = 0.0
            for j in range(n):
                h[i][j] = math.exp(delta[t, i] * A[i, j]) * h[i][j] + delta[t, i] * B[t, j] * u[t, i]
                acc += C[t, j] * h[i][j]
            y[t, i] = acc + D[i] * u[t, i]
    return y
