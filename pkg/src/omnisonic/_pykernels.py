"""Pure-Python fallbacks for the compiled kernels in ``_ckernels.pyx``."""
import numpy as np


def levenshtein(a, b) -> int:
    m, n = len(a), len(b)
    row = list(range(n + 1))
    for i in range(1, m + 1):
        prev = row[0]
        row[0] = i
        ai = a[i - 1]
        for j in range(1, n + 1):
            tmp = row[j]
            if ai == b[j - 1]:
                row[j] = prev
            else:
                row[j] = min(prev, row[j], row[j - 1]) + 1
            prev = tmp
    return row[n]


def resonator(x, gain, a1, a2) -> np.ndarray:
    out = np.empty(len(x), dtype=np.float64)
    y1 = y2 = 0.0
    xs, gs, c1, c2 = x.tolist(), gain.tolist(), a1.tolist(), a2.tolist()
    for k in range(len(xs)):
        y = gs[k] * xs[k] + c1[k] * y1 + c2[k] * y2
        out[k] = y
        y2 = y1
        y1 = y
    return out
