"""Independent reference implementations used as test oracles.

The block oracle works on an explicit list of active (visible) sites in
float64, the way a submanifold sparse convolution would: outputs exist only
at active sites and only active neighbours contribute. Metric oracles are
plain Python loops.
"""

from __future__ import annotations

import math

import numpy as np
import torch


def _np(t):
    return t.detach().double().cpu().numpy()


def gelu(x):
    return 0.5 * x * (1.0 + np.vectorize(math.erf)(x / math.sqrt(2.0)))


def layer_norm(x, w, b, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def sparse_block(block, feats: np.ndarray, visible: np.ndarray) -> np.ndarray:
    """One backbone block evaluated only at visible sites.

    ``feats`` (C, H, W) float64, ``visible`` (H, W) bool. Returns (C, H, W)
    with zeros at non-visible sites.
    """
    c, h, w = feats.shape
    sites = list(zip(*np.nonzero(visible)))
    active = set(sites)
    kw = _np(block.dwconv.weight)[:, 0]  # (C, 7, 7)
    kb = _np(block.dwconv.bias)
    r = kw.shape[-1] // 2
    conv = np.zeros((len(sites), c))
    for n, (i, j) in enumerate(sites):
        acc = kb.copy()
        for di in range(-r, r + 1):
            for dj in range(-r, r + 1):
                if (i + di, j + dj) in active:
                    acc += kw[:, di + r, dj + r] * feats[:, i + di, j + dj]
        conv[n] = acc
    hdn = layer_norm(conv, _np(block.norm.weight), _np(block.norm.bias), block.norm.eps)
    hdn = gelu(hdn @ _np(block.pwconv1.weight).T + _np(block.pwconv1.bias))
    gx = np.sqrt((hdn**2).sum(0))  # response over active sites only
    nx = gx / (gx.mean() + block.grn.eps)
    hdn = _np(block.grn.gamma).reshape(-1) * (hdn * nx) + _np(block.grn.beta).reshape(-1) + hdn
    hdn = hdn @ _np(block.pwconv2.weight).T + _np(block.pwconv2.bias)
    out = np.zeros_like(feats)
    for n, (i, j) in enumerate(sites):
        out[:, i, j] = feats[:, i, j] + hdn[n]
    return out


def _conv(x, conv, vis_in=None):
    """Zero-fill, dense convolution (float64)."""
    t = torch.from_numpy(x if vis_in is None else x * vis_in)[None]
    w = conv.weight.detach().double()
    b = None if conv.bias is None else conv.bias.detach().double()
    return torch.nn.functional.conv2d(t, w, b, stride=conv.stride, padding=conv.padding, groups=conv.groups)[0].numpy()


def _ln2d(x, norm):
    return layer_norm(x.transpose(1, 2, 0), _np(norm.weight), _np(norm.bias), norm.eps).transpose(2, 0, 1)


def encoder_oracle(encoder, x: torch.Tensor, mask: torch.Tensor) -> list[np.ndarray]:
    """Per-sample pyramid from zero-fill -> dense conv -> re-mask, with sparse blocks.

    ``x`` (C, H, W) one sample; ``mask`` (N,) bool, True = masked.
    """
    cfg = encoder.cfg
    h = x.shape[-1]
    g = h // cfg.patch_size
    patch_vis = ~mask.numpy().reshape(g, g)

    def vis(res):
        f = res // g
        return np.kron(patch_vis, np.ones((f, f), dtype=bool))

    xs = _np(x)
    stem = encoder.stem
    s = cfg.stem_stride
    pyramid = []
    if cfg.stem_kind == "modified":
        full = _conv(xs, stem.conv, vis(h)) * vis(h)
        pyramid.append(full)
        y = full if s == 1 else _conv(full, stem.down)
    else:
        y = _conv(xs, stem.conv, vis(h))
    res = h // s
    y = _ln2d(y, stem.norm) * vis(res)
    for i, stage in enumerate(encoder.stages):
        if i > 0:
            res //= 2
            ln, conv = encoder.downsample[i - 1]
            y = _conv(_ln2d(y, ln), conv) * vis(res)
        for blk in stage:
            y = sparse_block(blk, y, vis(res))
        pyramid.append(y)
    return pyramid


# --- metrics ------------------------------------------------------------------


def micro_f1_loop(pred, labels):
    tp = fp = fn = 0
    for prow, lrow in zip(pred, labels):
        for p, t in zip(prow, lrow):
            tp += int(p and t)
            fp += int(p and not t)
            fn += int(t and not p)
    return 1.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)


def accuracy_loop(pred, labels):
    return sum(int(p == t) for p, t in zip(pred, labels)) / len(pred)


def macro_iou_loop(pred, labels, k):
    ious = []
    for c in range(k):
        tp = fp = fn = 0
        for p, t in zip(np.ravel(pred), np.ravel(labels)):
            tp += int(p == c and t == c)
            fp += int(p == c and t != c)
            fn += int(p != c and t == c)
        if tp + fp + fn:
            ious.append(tp / (tp + fp + fn))
    return sum(ious) / len(ious)
