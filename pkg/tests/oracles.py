"""Slow, obviously-correct reference computations used by the tests."""

import math

import numpy as np
import torch


def _ridders(f, x, h, shrink=1.4, rows=12):
    """Derivative of scalar ``f`` at ``x``: central differences at steps h, h/shrink, ...
    Richardson-extrapolated, returning the estimate with the smallest internal error."""
    s2 = shrink * shrink
    prev = [(f(x + h) - f(x - h)) / (2 * h)]
    best, err = prev[0], math.inf
    for _ in range(1, rows):
        h /= shrink
        row = [(f(x + h) - f(x - h)) / (2 * h)]
        fac = s2
        for j in range(1, len(prev) + 1):
            row.append((row[j - 1] * fac - prev[j - 1]) / (fac - 1))
            fac *= s2
            e = max(abs(row[j] - row[j - 1]), abs(row[j] - prev[j - 1]))
            if e <= err:
                best, err = row[j], e
        if abs(row[-1] - prev[-1]) >= 2 * err:
            break  # extrapolation has stopped improving
        prev = row
    return best


def central_difference(fn, tensor, h=1e-3):
    """Numerical gradient of scalar ``fn()`` w.r.t. every entry of ``tensor`` (perturbed in place).

    Each entry uses extrapolated central differences, so the step adapts to the local
    curvature instead of trading truncation against cancellation at one fixed eps.
    """
    grad = torch.zeros_like(tensor)
    flat, gflat = tensor.data.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()

            def f(v):
                flat[i] = v
                return float(fn())

            gflat[i] = _ridders(f, orig, h)
            flat[i] = orig
    return grad


def relative_error(a, b):
    a, b = torch.as_tensor(a).double(), torch.as_tensor(b).double()
    scale = max(a.norm().item(), b.norm().item(), 1e-8)
    return (a - b).norm().item() / scale


def gradient_errors(fn, tensors):
    """Relative error between autograd and central differences for each tensor."""
    for t in tensors:
        t.grad = None
    fn().backward()
    analytic = [t.grad.detach().clone() for t in tensors]
    return [relative_error(a, central_difference(fn, t)) for a, t in zip(analytic, tensors)]


def matmul_loops(A, B):
    A, B = np.asarray(A, dtype=np.float64), np.asarray(B, dtype=np.float64)
    out = np.zeros((A.shape[0], B.shape[1]))
    for i in range(A.shape[0]):
        for j in range(B.shape[1]):
            out[i, j] = sum(A[i, k] * B[k, j] for k in range(A.shape[1]))
    return out


def bce_loops(p, y, w=None):
    total = 0.0
    for i in range(len(p)):
        for j in range(len(p[i])):
            wj = 1.0 if w is None else w[j]
            total -= wj * y[i][j] * math.log(p[i][j]) + (1 - y[i][j]) * math.log(1 - p[i][j])
    return total


def contrastive_loops(Z, Y, tau, squared=False):
    """Double loop over anchors and partners, written straight from the pairwise definition."""
    Z, Y = np.asarray(Z, dtype=np.float64), np.asarray(Y, dtype=np.int64)
    b = len(Z)

    def dist(i, j):
        sq = sum((Z[i][t] - Z[j][t]) ** 2 for t in range(Z.shape[1]))
        return sq if squared else math.sqrt(sq)

    total = 0.0
    for i in range(b):
        others = [k for k in range(b) if k != i]
        shared = {k: int(sum(Y[i][t] * Y[k][t] for t in range(Y.shape[1]))) for k in others}
        denom_c = sum(shared.values())
        if denom_c == 0:
            continue
        denom = sum(math.exp(-dist(i, k) / tau) for k in others)
        for j in others:
            beta = shared[j] / denom_c
            total -= beta * math.log(math.exp(-dist(i, j) / tau) / denom)
    return total


def knn_bruteforce(z, keys, values, k, tau):
    """Sort every key by (distance, index), keep k, softmax over negative distances."""
    ranked = sorted(((math.dist(z, h), i) for i, h in enumerate(keys)))
    chosen = ranked[:k]
    weights = [math.exp(-d / tau) for d, _ in chosen]
    s = sum(weights)
    alpha = [w / s for w in weights]
    pred = [sum(a * values[i][j] for a, (_, i) in zip(alpha, chosen)) for j in range(len(values[0]))]
    return [i for _, i in chosen], alpha, pred


def confusion_recount(pred, gold):
    """Per-label TP/FP/FN by explicit iteration, then P/R/F1 and macro means."""
    n, l = len(gold), len(gold[0])
    ps, rs, fs = [], [], []
    for j in range(l):
        tp = fp = fn = 0
        for i in range(n):
            if pred[i][j] and gold[i][j]:
                tp += 1
            elif pred[i][j]:
                fp += 1
            elif gold[i][j]:
                fn += 1
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        ps.append(p)
        rs.append(r)
        fs.append(f)
    return math.fsum(ps) / l, math.fsum(rs) / l, math.fsum(fs) / l, fs
