"""Independent reference computations used as test oracles.

Everything here is written the slow, obvious way (loops over points, direct
formulas) and shares no code with the package beyond plain numpy.
"""

from __future__ import annotations

import math

import numpy as np


# ---------------------------------------------------------------- calculus


def finite_difference_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to every entry of ``x`` (in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def rel_error(a, b, floor: float = 1e-6) -> float:
    """Max abs difference over the larger magnitude.

    The denominator is floored so that gradients that vanish in exact
    arithmetic (attention key biases: softmax cancels a per-row constant)
    are judged on an absolute scale instead of amplifying rounding noise.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


# --------------------------------------------------------------- dominance


def brute_dominates(a, b, directions) -> bool:
    better = False
    for x, y, d in zip(a, b, directions):
        if d == "max":
            x, y = -x, -y
        if x > y:
            return False
        if x < y:
            better = True
    return better


def brute_fronts(points, directions=("max", "min")) -> list[set[int]]:
    """Peel non-dominated layers one at a time with an all-pairs check."""
    remaining = set(range(len(points)))
    fronts = []
    while remaining:
        layer = {i for i in remaining
                 if not any(brute_dominates(points[j], points[i], directions)
                            for j in remaining if j != i)}
        fronts.append(layer)
        remaining -= layer
    return fronts


def brute_crowding(front) -> list[float]:
    n = len(front)
    dist = [0.0] * n
    if n <= 2:
        return [math.inf] * n
    for j in range(len(front[0])):
        order = sorted(range(n), key=lambda i: (front[i][j], i))
        lo, hi = front[order[0]][j], front[order[-1]][j]
        dist[order[0]] = math.inf
        dist[order[-1]] = math.inf
        for pos in range(1, n - 1):
            i = order[pos]
            if hi > lo and dist[i] != math.inf:
                dist[i] += (front[order[pos + 1]][j] - front[order[pos - 1]][j]) / (hi - lo)
    return dist


def brute_knee(points) -> int:
    """Farthest point from the chord between the min-f2 and max-f2 ends, after min-max scaling."""
    P = [list(map(float, p)) for p in points]
    lo = [min(p[k] for p in P) for k in range(2)]
    hi = [max(p[k] for p in P) for k in range(2)]
    Z = [[(p[k] - lo[k]) / ((hi[k] - lo[k]) or 1.0) for k in range(2)] for p in P]
    a = min(Z, key=lambda z: z[1])
    b = max(Z, key=lambda z: z[1])
    best, best_d = 0, -1.0
    for i, z in enumerate(Z):
        num = abs((b[0] - a[0]) * (z[1] - a[1]) - (b[1] - a[1]) * (z[0] - a[0]))
        den = math.hypot(b[0] - a[0], b[1] - a[1])
        d = num / den if den else 0.0
        if d > best_d + 1e-12:
            best, best_d = i, d
    return best


# ----------------------------------------------------------------- scoring


def brute_score(R1, R2, W) -> float:
    total = 0.0
    for r1, r2, w in zip(np.ravel(R1), np.ravel(R2), np.ravel(W)):
        total += 0.5 * (r1 - w) ** 2 + 0.5 * (r2 - w) ** 2
    return total


def brute_mat(scores, N) -> list[float]:
    out = []
    for t in range(len(scores)):
        window = scores[max(0, t - N + 1): t + 1]
        out.append(sum(window) / len(window))
    return out


def brute_rolling(series, W) -> tuple[list[float], list[float]]:
    mu, sd = [], []
    for t in range(len(series)):
        window = series[max(0, t - W + 1): t + 1]
        m = sum(window) / len(window)
        mu.append(m)
        sd.append(math.sqrt(sum((v - m) ** 2 for v in window) / len(window)))
    return mu, sd


def brute_median(values) -> float:
    s = sorted(values)
    n = len(s)
    return s[n // 2] if n % 2 else 0.5 * (s[n // 2 - 1] + s[n // 2])


def brute_mpot(base, scores, alpha, window) -> list[float]:
    out = []
    for t in range(len(scores)):
        recent = scores[max(0, t - window + 1): t + 1]
        med = brute_median(recent)
        mad = brute_median([abs(v - med) for v in recent])
        out.append(base + alpha * mad)
    return out


def brute_confusion(decisions, labels, adjust: bool):
    d = list(map(int, decisions))
    y = list(map(int, labels))
    if adjust:
        t = 0
        while t < len(y):
            if y[t]:
                s = t
                while t < len(y) and y[t]:
                    t += 1
                if any(d[s:t]):
                    d[s:t] = [1] * (t - s)
            else:
                t += 1
    tp = sum(1 for a, b in zip(d, y) if a and b)
    fp = sum(1 for a, b in zip(d, y) if a and not b)
    fn = sum(1 for a, b in zip(d, y) if not a and b)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def brute_eacs(rows, w=(0.4, 0.4, 0.2)) -> list[float]:
    fmax = max(r[0] for r in rows)
    tmax = max(r[1] for r in rows)
    pmax = max(r[2] for r in rows)
    return [w[0] * f / fmax + w[1] * (1 - t / tmax) + w[2] * (1 - p / pmax) for f, t, p in rows]


# ----------------------------------------------------------------- attention


def straight_attention(x_q, x_kv, Wq, bq, Wk, bk, Wv, bv, Wo, bo, n_heads):
    """Single window, explicit loop over heads and positions."""
    d = Wq.shape[1]
    dh = d // n_heads
    Q = x_q @ Wq + bq
    K = x_kv @ Wk + bk
    V = x_kv @ Wv + bv
    heads = []
    for h in range(n_heads):
        q = Q[:, h * dh:(h + 1) * dh]
        k = K[:, h * dh:(h + 1) * dh]
        v = V[:, h * dh:(h + 1) * dh]
        out = np.zeros((len(q), dh))
        for i in range(len(q)):
            logits = np.array([q[i] @ k[j] for j in range(len(k))]) / math.sqrt(dh)
            w = np.exp(logits - logits.max())
            w /= w.sum()
            out[i] = sum(w[j] * v[j] for j in range(len(k)))
        heads.append(out)
    return np.concatenate(heads, axis=1) @ Wo + bo
