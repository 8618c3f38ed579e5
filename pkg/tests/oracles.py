"""Brute-force scalar reference implementations used as independent test oracles.

Everything here is deliberately loop-based and shares no code with the
vectorised kernels under test.
"""

import math

import numpy as np


def conv2d_loops(x, w, b, stride=1, padding=0):
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = float(b[o]) if b is not None else 0.0
                    for c in range(C):
                        for di in range(kh):
                            for dj in range(kw):
                                r = i * stride + di - padding
                                s = j * stride + dj - padding
                                if 0 <= r < H and 0 <= s < W:
                                    acc += float(x[n, c, r, s]) * float(w[o, c, di, dj])
                    out[n, o, i, j] = acc
    return out


def maxpool_loops(x, k=2, stride=2):
    B, C, H, W = x.shape
    Ho, Wo = (H - k) // stride + 1, (W - k) // stride + 1
    out = np.zeros((B, C, Ho, Wo))
    for n in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    best = -math.inf
                    for di in range(k):
                        for dj in range(k):
                            best = max(best, float(x[n, c, i * stride + di, j * stride + dj]))
                    out[n, c, i, j] = best
    return out


def linear_loops(x, w, b):
    out = np.zeros((x.shape[0], w.shape[0]))
    for n in range(x.shape[0]):
        for o in range(w.shape[0]):
            out[n, o] = float(b[o]) + sum(float(x[n, d]) * float(w[o, d]) for d in range(x.shape[1]))
    return out


def sq_dist_loops(a, b):
    out = np.zeros((a.shape[0], b.shape[0]))
    for q in range(a.shape[0]):
        for n in range(b.shape[0]):
            out[q, n] = sum((float(a[q, d]) - float(b[n, d])) ** 2 for d in range(a.shape[1]))
    return out


def softmax_scalar(row):
    m = max(float(v) for v in row)
    es = [math.exp(float(v) - m) for v in row]
    s = math.fsum(es)
    return [e / s for e in es]


def cross_entropy_scalar(logits, targets):
    total = []
    for row, t in zip(logits, targets):
        m = max(float(v) for v in row)
        lse = m + math.log(math.fsum(math.exp(float(v) - m) for v in row))
        total.append(lse - float(row[t]))
    return math.fsum(total) / len(total)


def bce_scalar(p, y, eps=1e-7):
    terms = []
    for pi, yi in zip(np.ravel(p), np.ravel(y)):
        pc = min(max(float(pi), eps), 1 - eps)
        terms.append(-(yi * math.log(pc) + (1 - yi) * math.log(1 - pc)))
    return math.fsum(terms) / len(terms)


def batchnorm_loops(x, gamma, beta, eps=1e-5):
    B, C, H, W = x.shape
    out = np.zeros_like(x, dtype=np.float64)
    for c in range(C):
        vals = [float(x[n, c, i, j]) for n in range(B) for i in range(H) for j in range(W)]
        mu = math.fsum(vals) / len(vals)
        var = math.fsum((v - mu) ** 2 for v in vals) / len(vals)
        for n in range(B):
            for i in range(H):
                for j in range(W):
                    out[n, c, i, j] = gamma[c] * (x[n, c, i, j] - mu) / math.sqrt(var + eps) + beta[c]
    return out


def adam_scalar(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Run the Adam recurrence on one scalar over a sequence of gradients."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        theta = theta - lr * mh / (math.sqrt(vh) + eps)
    return theta


def macro_metrics_scalar(cm):
    """Precision/recall/F1 per class from a confusion matrix, by hand arithmetic."""
    n = len(cm)
    ps, rs, fs = [], [], []
    for k in range(n):
        tp = cm[k][k]
        col = sum(cm[i][k] for i in range(n))
        row = sum(cm[k][j] for j in range(n))
        if col == 0 and row == 0:
            continue
        p = tp / col if col else 0.0
        r = tp / row if row else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        ps.append(p)
        rs.append(r)
        fs.append(f)
    total = sum(sum(r) for r in cm)
    acc = sum(cm[k][k] for k in range(n)) / total
    return acc, sum(ps) / len(ps), sum(rs) / len(rs), sum(fs) / len(fs)


def top_singular_power_iteration(M, iters=2000, seed=0):
    """First singular triple of M by power iteration on M^T M in float64."""
    M = np.asarray(M, dtype=np.float64)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(M.shape[1])
    v /= np.linalg.norm(v)
    for _ in range(iters):
        w = M.T @ (M @ v)
        nw = np.linalg.norm(w)
        if nw == 0:
            break
        v = w / nw
    sigma = np.linalg.norm(M @ v)
    u = M @ v / sigma if sigma > 0 else np.zeros(M.shape[0])
    return u, sigma, v
