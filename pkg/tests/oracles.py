"""Reference computations used to check the library, written without it."""

import math

import numpy as np
import torch


def dense_attention(q_tokens_src, v_tokens_src, wq, bq, wk, bk, wv, bv):
    """softmax(Q K^T / sqrt(d)) V with explicit loops over query rows; float64 numpy."""
    q = q_tokens_src @ wq.T + bq
    k = q_tokens_src @ wk.T + bk
    v = v_tokens_src @ wv.T + bv
    d = q.shape[-1]
    n = q.shape[0]
    out = np.zeros((n, v.shape[1]))
    attn = np.zeros((n, n))
    for i in range(n):
        logits = np.array([np.dot(q[i], k[j]) / math.sqrt(d) for j in range(n)])
        e = np.exp(logits - logits.max())
        attn[i] = e / e.sum()
        out[i] = sum(attn[i, j] * v[j] for j in range(n))
    return out, attn


def conv2d_direct(x, w, b, padding=1):
    """Plain cross-correlation, x [C, H, W], w [O, C, kh, kw]."""
    c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((c, h + 2 * padding, wd + 2 * padding))
    xp[:, padding:padding + h, padding:padding + wd] = x
    out = np.zeros((o, h, wd))
    for oc in range(o):
        for i in range(h):
            for j in range(wd):
                out[oc, i, j] = np.sum(xp[:, i:i + kh, j:j + kw] * w[oc]) + b[oc]
    return out


def batchnorm_train(x, gamma, beta, eps):
    """Batch-statistics normalization over (N, H, W), x [N, C, H, W]."""
    mean = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gamma[None, :, None, None] + beta[None, :, None, None]


def central_fd_grads(loss_fn, params, step=1e-6):
    """Central finite differences of a scalar loss for every element of every parameter."""
    grads = {}
    with torch.no_grad():
        for name, p in params.items():
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + step
                up = loss_fn().item()
                flat[i] = old - step
                down = loss_fn().item()
                flat[i] = old
                gflat[i] = (up - down) / (2 * step)
            grads[name] = g
    return grads


def relative_error(a, b):
    a, b = np.asarray(a, np.float64).ravel(), np.asarray(b, np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def iou_bruteforce(pred, gt, num_classes, ignore=255):
    """Per-class IoU by counting pixels one by one; NaN when a class is absent from both."""
    inter = [0] * num_classes
    union = [0] * num_classes
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        if g == ignore:
            continue
        p, g = int(p), int(g)
        if p == g:
            inter[p] += 1
            union[p] += 1
        else:
            union[p] += 1
            union[g] += 1
    return np.array([inter[c] / union[c] if union[c] else np.nan for c in range(num_classes)])


def band_bruteforce(mask, r):
    """Mask pixels with an off-mask pixel (or the outside of the image) within chessboard distance r."""
    h, w = mask.shape
    band = np.zeros_like(mask, dtype=bool)
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            hit = False
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    yy, xx = y + dy, x + dx
                    if not (0 <= yy < h and 0 <= xx < w) or not mask[yy, xx]:
                        hit = True
                        break
                if hit:
                    break
            band[y, x] = hit
    return band


def boundary_iou_bruteforce(pred, gt, num_classes, r, ignore=255):
    valid = gt != ignore
    out = []
    for c in range(num_classes):
        g = gt == c
        p = (pred == c) & valid
        if not g.any() and not p.any():
            out.append(np.nan)
            continue
        gb, pb = band_bruteforce(g, r), band_bruteforce(p, r)
        inter = sum(1 for a, b in zip(gb.ravel(), pb.ravel()) if a and b)
        union = sum(1 for a, b in zip(gb.ravel(), pb.ravel()) if a or b)
        out.append(inter / union if union else np.nan)
    return np.array(out)
