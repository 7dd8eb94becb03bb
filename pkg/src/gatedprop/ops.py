"""Attention and gating primitives for the propagation layers.

The central object is the correlation map: row-stochastic attention
weights from current-frame query tokens to key tokens of one or more
stored frames. Both branches of a propagation layer consume the same
map, so it is materialized once and passed around explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass
class CorrMap:
    """Dense attention weights [n_query x n_key]; each row sums to 1."""

    weights: Tensor
    query_frame: int = -1
    key_frames: tuple = ()


@dataclass
class WindowCorrMap:
    """Attention restricted to a per-query window of key positions.

    weights[p, j] attends to key row index[p, j]; positions with
    valid[p, j] = False carry exactly zero weight. ``mirror`` marks a
    centered same-grid window (fast scatter-free backward).
    """

    weights: Tensor
    index: np.ndarray
    valid: np.ndarray
    query_frame: int = -1
    key_frames: tuple = ()
    grid: tuple = None              # (h, w, lam) for centered same-grid windows


def corr(q: Tensor, k: Tensor, query_frame=-1, key_frames=()) -> CorrMap:
    """Scaled-dot-product matching map: softmax(q k^T / sqrt(C_k)) per row."""
    if q.data.ndim != 2 or k.data.ndim != 2 or q.shape[1] != k.shape[1]:
        raise DimensionError(f"corr: channel dims {q.shape} vs {k.shape}")
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    return CorrMap(T.softmax_rows(scores), query_frame, tuple(key_frames))


def corr_windowed(q: Tensor, k: Tensor, index, valid, query_frame=-1, key_frames=(),
                  grid=None) -> WindowCorrMap:
    """Matching map over per-query key windows; out-of-bounds keys are
    excluded from the softmax rather than attended with zero features."""
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"corr_windowed: channel dims {q.shape} vs {k.shape}")
    scores = T.scale(T.gather_dot(q, k, index, valid, grid=grid), 1.0 / math.sqrt(q.shape[1]))
    return WindowCorrMap(T.softmax_rows(scores, valid=valid), np.asarray(index), np.asarray(valid),
                         query_frame, tuple(key_frames), grid)


def aggregate(cmap, v: Tensor) -> Tensor:
    """Attention-weighted sum of value rows under a dense or windowed map."""
    if isinstance(cmap, WindowCorrMap):
        return T.gather_mix(cmap.weights, v, cmap.index, cmap.valid, grid=cmap.grid)
    return T.matmul(cmap.weights, v)


# re-exported tensor ops so callers have one namespace for the math
silu = T.silu
layer_norm = T.layer_norm
depthwise_conv2d = T.depthwise_conv2d


def gated_propagation(u: Tensor, cmap, v: Tensor, w_out: Tensor, dw_kernel, spatial) -> Tensor:
    """Gate an attention readout, mix it locally, and project it back.

    out = reshape(F_dw(reshape(silu(u) * aggregate(cmap, v), HxWxC_v)), n x C_v) @ w_out
    where F_dw is a per-channel conv (identity when dw_kernel is None,
    the kernel-size-0 configuration).
    """
    h, w = spatial
    n = u.shape[0]
    if n != h * w:
        raise DimensionError(f"gated_propagation: {n} tokens vs {h}x{w} grid")
    gated = T.mul(T.silu(u), aggregate(cmap, v))
    if dw_kernel is not None:
        gated = T.reshape(T.depthwise_conv2d(T.reshape(gated, (h, w, gated.shape[1])), dw_kernel),
                          (n, gated.shape[1]))
    return T.matmul(gated, w_out)


_window_cache: dict = {}


def window_index(h: int, w: int, lam: int):
    """Key indices and validity of the lam x lam neighborhood per grid cell.

    Returns (index [h*w, lam*lam], valid [h*w, lam*lam]); invalid entries
    are clamped to 0 and must be masked. Cached per (h, w, lam).
    """
    if lam % 2 == 0 or lam < 1:
        raise ConfigError(f"window size must be odd and positive, got {lam}")
    key = (h, w, lam)
    hit = _window_cache.get(key)
    if hit is not None:
        return hit
    r = lam // 2
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy, dx = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    ny = ys.reshape(-1, 1) + dy.reshape(1, -1)
    nx = xs.reshape(-1, 1) + dx.reshape(1, -1)
    valid = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
    index = np.where(valid, ny * w + nx, 0).astype(np.intp)
    _window_cache[key] = (index, valid)
    return index, valid
