"""Reference computations kept apart from the package code paths they check."""
import math

import numpy as np
import torch

from metalgan.netcore import flatten_params, load_params


def central_differences(net, loss_fn, step=1e-5):
    """d loss / d theta for every parameter of ``net`` by (f(x+h) - f(x-h)) / 2h."""
    theta = flatten_params(net)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        t = theta.copy()
        t[i] = theta[i] + step
        load_params(net, t)
        with torch.no_grad():
            up = float(loss_fn())
        t[i] = theta[i] - step
        load_params(net, t)
        with torch.no_grad():
            down = float(loss_fn())
        grad[i] = (up - down) / (2 * step)
    load_params(net, theta)
    return grad


def relative_error(analytic, numeric, floor=1e-8):
    """Per-entry |a - n| / max(|a|, |n|, floor)."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def bce(p, y):
    return -(y * math.log(p) + (1 - y) * math.log(1 - p))


def brute_force_inception_score(probs, n_splits):
    """Loop-level exp(mean KL(p(y|x) || p(y))) per split, returned as (mean, std)."""
    n = len(probs)
    # np.array_split puts the larger chunks first; mirror that layout
    sizes = [n // n_splits + (1 if i < n % n_splits else 0) for i in range(n_splits)]
    scores, start = [], 0
    for size in sizes:
        part = probs[start : start + size]
        start += size
        c = len(part[0])
        marginal = [sum(row[j] for row in part) / len(part) for j in range(c)]
        kls = []
        for row in part:
            kl = 0.0
            for j in range(c):
                if row[j] > 0:
                    kl += row[j] * (math.log(row[j]) - math.log(marginal[j]))
            kls.append(kl)
        scores.append(math.exp(sum(kls) / len(kls)))
    mean = sum(scores) / len(scores)
    std = math.sqrt(sum((s - mean) ** 2 for s in scores) / len(scores))
    return mean, std
