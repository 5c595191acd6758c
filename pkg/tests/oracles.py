"""Independent reference computations used by the tests.

Deliberately written with explicit Python loops and ``math`` so they share no
code path with the vectorised implementation they check.
"""

import math

import numpy as np


def sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def naive_affine_sigmoid(w, b, x):
    out = []
    for j in range(len(b)):
        acc = b[j]
        for k in range(len(x)):
            acc += w[j][k] * x[k]
        out.append(sig(acc))
    return out


def naive_ae_cost(ae, batch, beta, rho, gates=None):
    """Mean squared reconstruction + beta * sum_j |rho - mean_n y_nj|, by hand."""
    J = len(ae.b)
    ys, total = [], 0.0
    for p in batch:
        y = naive_affine_sigmoid(ae.w, ae.b, p)
        ys.append(y)
        ys_g = [y[j] * (1.0 if gates is None else gates[j]) for j in range(J)]
        p_hat = naive_affine_sigmoid(ae.w_dec, ae.b_dec, ys_g)
        total += sum((p[k] - p_hat[k]) ** 2 for k in range(len(p)))
    n = len(batch)
    penalty = sum(abs(rho - sum(y[j] for y in ys) / n) for j in range(J))
    return total / n + beta * penalty


def central_difference(f, arrays, step=1e-5):
    """Numerical gradient of scalar ``f()`` w.r.t. every entry of each array,
    perturbing the arrays in place."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + step
            fp = f()
            a[idx] = orig - step
            fm = f()
            a[idx] = orig
            g[idx] = (fp - fm) / (2 * step)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-6):
    err = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        err = max(err, float(np.max(np.abs(a - n) / denom)))
    return err


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    twice = 0
    for p in pos:
        for q in neg:
            twice += 2 if p > q else (1 if p == q else 0)
    return twice / (2 * len(pos) * len(neg))
