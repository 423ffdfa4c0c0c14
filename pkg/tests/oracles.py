"""Independent reference implementations used to check the fast paths."""

import math

import mpmath
import numpy as np
import torch


def pairwise_auc(scores, labels):
    """O(n^2) Mann-Whitney: fraction of (pos, neg) pairs ranked correctly, ties count half."""
    scores = list(map(float, scores))
    labels = list(map(bool, labels))
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def bce_mp(logits, targets, weights, mask=None, dps=50):
    """Weighted BCE mean evaluated term by term in high precision."""
    mpmath.mp.dps = dps
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n, k = logits.shape
    cols = [j for j in range(k) if mask is None or mask[j]]
    acc = mpmath.mpf(0)
    for i in range(n):
        for j in cols:
            x = mpmath.mpf(logits[i, j])
            s = 1 / (1 + mpmath.exp(-x))
            acc += -(mpmath.mpf(weights[j]) * targets[i, j] * mpmath.log(s)
                     + (1 - targets[i, j]) * mpmath.log(1 - s))
    return float(acc / (n * len(cols)))


def backbone_param_count(cfg, in_channels=None, first=0, last=None):
    """Closed-form parameter count of the dense backbone (BN has 2 params per channel)."""
    last = cfg.n_blocks if last is None else last
    total = 0
    if first == 0:
        ch = cfg.initial_channels
        total += (in_channels or cfg.input_channels) * ch * cfg.stem_kernel ** 2
        if cfg.stem_pool:
            total += 2 * ch
    else:
        ch = in_channels
    g, inner = cfg.growth_rate, cfg.bn_size * cfg.growth_rate
    for b in range(first, last):
        for _ in range(cfg.layers_per_block[b]):
            total += 2 * ch + ch * inner + 2 * inner + inner * g * 9
            ch += g
        if b < cfg.n_blocks - 1:
            out = int(ch * cfg.compression)
            total += 2 * ch + ch * out
            ch = out
        else:
            total += 2 * ch
    return total, ch


def finite_difference_check(loss_fn, params, n_params=10, step=1e-3, seed=0):
    """Compare autograd against central differences on a random parameter subset.

    Returns (relative error over the subset, analytic, numeric), with the
    relative error ||a - n|| / max(||a||, ||n||).
    """
    flat = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    rng = np.random.default_rng(seed)
    picks = [flat[k] for k in rng.choice(len(flat), n_params, replace=False)]
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = np.array([params[i].grad.reshape(-1)[j].item() for i, j in picks])
    numeric = []
    with torch.no_grad():
        for i, j in picks:
            view = params[i].view(-1)
            orig = view[j].item()
            view[j] = orig + step
            up = loss_fn().item()
            view[j] = orig - step
            down = loss_fn().item()
            view[j] = orig
            numeric.append((up - down) / (2 * step))
    numeric = np.array(numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-300)
    return float(np.linalg.norm(analytic - numeric) / scale), analytic, numeric


def hand_t(d):
    d = [float(x) for x in d]
    n = len(d)
    mean = sum(d) / n
    sd = math.sqrt(sum((x - mean) ** 2 for x in d) / (n - 1))
    return mean / (sd / math.sqrt(n))
