"""Independent slow reference implementations used by the tests."""

import math
from collections import Counter

import numpy as np


def conv2d_full_oracle(x, y):
    """z(i, j) = sum_m sum_n x(m, n) y(i - m, j - n), every index with overlap."""
    h, w = len(x), len(x[0])
    a, b = len(y), len(y[0])
    z = [[0.0] * (w + b - 1) for _ in range(h + a - 1)]
    for i in range(h + a - 1):
        for j in range(w + b - 1):
            s = 0.0
            for m in range(h):
                for n in range(w):
                    if 0 <= i - m < a and 0 <= j - n < b:
                        s += x[m][n] * y[i - m][j - n]
            z[i][j] = s
    return np.array(z)


def conv2d_valid_oracle(x, y):
    """Positions where the flipped kernel lies entirely inside x."""
    h, w = len(x), len(x[0])
    a, b = len(y), len(y[0])
    out = np.zeros((h - a + 1, w - b + 1))
    for i in range(h - a + 1):
        for j in range(w - b + 1):
            s = 0.0
            for p in range(a):
                for q in range(b):
                    s += x[i + p][j + q] * y[a - 1 - p][b - 1 - q]
            out[i, j] = s
    return out


def partition_oracle(timestamps, values, start, end, n=200):
    """Frame-by-frame bin membership, then fill empties from the left (or the first filled bin)."""
    members = [[] for _ in range(n)]
    for t, row in zip(timestamps, values):
        if t < start or t > end:
            continue
        k = int(math.floor((t - start) * n / (end - start)))
        if k >= n:
            k = n - 1
        members[k].append(row)
    d = np.asarray(values).shape[1]
    avg = [np.mean(m, axis=0) if m else None for m in members]
    filled = [k for k in range(n) if avg[k] is not None]
    out = np.zeros((n, d))
    if not filled:
        return out
    for k in range(n):
        prev = [f for f in filled if f <= k]
        out[k] = avg[prev[-1]] if prev else avg[filled[0]]
    return out


def interpolation_oracle(t, column):
    """Linear interpolation between the nearest valid neighbours, edges held."""
    out = list(column)
    valid = [i for i, v in enumerate(column) if not math.isnan(v)]
    if not valid:
        return [0.0] * len(column)
    for i, v in enumerate(column):
        if not math.isnan(v):
            continue
        left = [k for k in valid if k < i]
        right = [k for k in valid if k > i]
        if not left:
            out[i] = column[right[0]]
        elif not right:
            out[i] = column[left[-1]]
        else:
            l, r = left[-1], right[0]
            out[i] = column[l] + (column[r] - column[l]) * (t[i] - t[l]) / (t[r] - t[l])
    return out


def vote_oracle(seq):
    counts = Counter(seq)
    best = max(counts.values())
    return min(k for k, c in counts.items() if c == best)


def counting_accuracy(tp, tn, fp, fn, rng):
    """Build a shuffled prediction list with these counts and count matches."""
    pairs = [(1, 1)] * tp + [(0, 0)] * tn + [(1, 0)] * fp + [(0, 1)] * fn
    order = rng.permutation(len(pairs))
    correct = sum(1 for k in order if pairs[k][0] == pairs[k][1])
    return correct / len(pairs)


def numeric_grad(f, x, step=1e-4):
    """Central differences of scalar f over every entry of the float64 array x."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        hi = f()
        x[idx] = orig - step
        lo = f()
        x[idx] = orig
        g[idx] = (hi - lo) / (2 * step)
    return g
