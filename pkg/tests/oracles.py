"""Slow, obviously-correct reference implementations used only by the tests."""

import itertools

import numpy as np


def conv3d_naive(x, w, b):
    """Valid 3-D convolution by nested loops; x (B,T,H,W,C), w (kt,kh,kw,C,F)."""
    B, T, H, W, C = x.shape
    kt, kh, kw, _, F = w.shape
    out = np.zeros((B, T - kt + 1, H - kh + 1, W - kw + 1, F))
    for n, t, i, j, f in itertools.product(range(B), range(out.shape[1]), range(out.shape[2]), range(out.shape[3]), range(F)):
        acc = b[f]
        for a, c, d, ch in itertools.product(range(kt), range(kh), range(kw), range(C)):
            acc += x[n, t + a, i + c, j + d, ch] * w[a, c, d, ch, f]
        out[n, t, i, j, f] = acc
    return out


def dense_naive(x, w, b):
    out = np.zeros((x.shape[0], w.shape[1]))
    for n in range(x.shape[0]):
        for j in range(w.shape[1]):
            s = b[j]
            for i in range(x.shape[1]):
                s += x[n, i] * w[i, j]
            out[n, j] = s
    return out


def maxpool_naive(x, window):
    pt, ph, pw = window
    B, T, H, W, C = x.shape
    out = np.full((B, T // pt, H // ph, W // pw, C), -np.inf)
    for n, t, i, j, c in itertools.product(range(B), range(T // pt), range(H // ph), range(W // pw), range(C)):
        for a, d, e in itertools.product(range(pt), range(ph), range(pw)):
            out[n, t, i, j, c] = max(out[n, t, i, j, c], x[n, t * pt + a, i * ph + d, j * pw + e, c])
    return out


def two_pass(values):
    """Mean and sample variance by the textbook two-pass formula."""
    v = [float(x) for x in values]
    mean = sum(v) / len(v)
    return mean, sum((x - mean) ** 2 for x in v) / (len(v) - 1)


def pairwise_auc(labels, scores):
    """Probability a random positive outranks a random negative; ties count one half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else (0.5 if p == q else 0.0)
    return total / (len(pos) * len(neg))


def block_mean(values, factor):
    h, w = values.shape
    out = np.zeros((h // factor, w // factor))
    for i in range(h // factor):
        for j in range(w // factor):
            s = 0.0
            for a in range(factor):
                for b in range(factor):
                    s += values[i * factor + a, j * factor + b]
            out[i, j] = s / (factor * factor)
    return out


def threshold_oracle(times, power, bin_minutes, halflife_days, margin_db):
    """Per-bin weighted mean of daily medians, written with plain loops."""
    days = {}
    for t, p in zip(times, power):
        day = int(t) // 86400
        b = (int(t) % 86400) // (bin_minutes * 60)
        days.setdefault((day, b), []).append(float(p))
    newest = max(d for d, _ in days)
    out = []
    for b in range(1440 // bin_minutes):
        num = den = 0.0
        for (d, bb), vals in days.items():
            if bb != b:
                continue
            wgt = 0.5 ** ((newest - d) / halflife_days)
            num += wgt * float(np.median(vals))
            den += wgt
        out.append(num / den - margin_db)
    return np.array(out)


def labels_bruteforce(times, power, threshold_fn, step_minutes, horizon_minutes, window_minutes=5):
    """Exhaustive scan over every instant and every sample of every window."""
    step = step_minutes * 60
    first, last = int(times[0]), int(times[-1])
    t = -(-first // step) * step
    rows = []
    while t + horizon_minutes * 60 <= last:
        cur = [p for ts, p in zip(times, power) if t - window_minutes * 60 < ts <= t]
        if cur:
            cmin = min(cur)
            clab = cmin < threshold_fn(t)
            fut = any(p < threshold_fn(ts) for ts, p in zip(times, power) if t < ts <= t + horizon_minutes * 60)
            rows.append((t, cmin, clab, fut))
        t += step
    return rows
