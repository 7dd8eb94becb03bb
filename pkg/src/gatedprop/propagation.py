"""Propagation layers: the dual-branch gated module and the coupled
multi-head baseline.

One gated layer runs three propagation sites in configurable order:

* self: matching over the current frame; identity tokens act as a
  positional signal in the keys but the predicted mask is never encoded.
* long-term (lt): matching against all memorized frames; the identity
  branch reuses the visual branch's attention map and reads mask
  encodings through it.
* short-term (st): the same computation restricted to a window around
  each location in the previous frame.

Each site is wrapped pre-norm with a residual per branch. Parameters are
per-site (nothing shared across sites); within a site the key projection
is shared by both branches and by the query/key roles.

The baseline layer is the coupled single-stream block: multi-head
attention at every site, mask encodings added into the values, and a
feed-forward tail.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor


@dataclass
class BranchState:
    """Per-frame token state of both branches at one layer boundary."""

    visual: Tensor                  # [n, C]
    id: Optional[Tensor]            # [n, C]; None for the coupled baseline
    layer: int = 0
    frame: int = 0


@dataclass
class KeySource:
    """Token material a site attends to (memory frames or the previous frame)."""

    visual: Tensor                  # [m, C]
    id: Optional[Tensor]            # [m, C]
    id_enc: Optional[Tensor]        # [m, C_v] mask encoding, None for self keys
    frames: tuple = ()


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias)


@dataclass
class SiteParams:
    """All trainable tensors of one propagation site of a gated layer."""

    w_k: Tensor                     # [C or 2C, C_k], shared by branches and q/k roles
    w_v: Tensor                     # [C, C_v] visual values
    w_u: Tensor                     # [C, C_v] visual gate
    w_o: Tensor                     # [C_v, C] visual output
    w_v_bar: Tensor                 # [C, C_v] id values
    w_u_bar: Tensor                 # [C, C_v] id gate
    w_o_bar: Tensor                 # [C_v, C] id output
    dw: Optional[Tensor]            # [ks, ks, C_v] or None (kernel size 0)
    dw_bar: Optional[Tensor]
    ln_vis: LayerNormParams
    ln_id: LayerNormParams

    def named(self, prefix):
        out = {f"{prefix}.w_k": self.w_k, f"{prefix}.w_v": self.w_v,
               f"{prefix}.w_u": self.w_u, f"{prefix}.w_o": self.w_o,
               f"{prefix}.w_v_bar": self.w_v_bar, f"{prefix}.w_u_bar": self.w_u_bar,
               f"{prefix}.w_o_bar": self.w_o_bar,
               f"{prefix}.ln_vis.g": self.ln_vis.gain, f"{prefix}.ln_vis.b": self.ln_vis.bias,
               f"{prefix}.ln_id.g": self.ln_id.gain, f"{prefix}.ln_id.b": self.ln_id.bias}
        if self.dw is not None:
            out[f"{prefix}.dw"] = self.dw
            out[f"{prefix}.dw_bar"] = self.dw_bar
        return out


def _param(rng, shape, dtype, scale=None):
    fan_in = shape[0] if len(shape) > 1 else shape[0]
    if scale is None:
        scale = 1.0 / math.sqrt(fan_in)
    data = (rng.standard_normal(shape) * scale).astype(T.DTYPES[dtype])
    return Tensor(data, requires_grad=True)


def _delta_kernel(ks, channels, dtype):
    k = np.zeros((ks, ks, channels), dtype=T.DTYPES[dtype])
    k[ks // 2, ks // 2, :] = 1.0  # identity mixing at init
    return Tensor(k, requires_grad=True)


def _ln(channels, dtype):
    return LayerNormParams(
        Tensor(np.ones(channels, dtype=T.DTYPES[dtype]), requires_grad=True),
        Tensor(np.zeros(channels, dtype=T.DTYPES[dtype]), requires_grad=True))


def init_site(cfg, key_in, rng, dtype=None) -> SiteParams:
    c, ck, cv = cfg.channels, cfg.match_dim, cfg.prop_dim
    dtype = dtype or cfg.dtype
    ks = cfg.dw_kernel
    return SiteParams(
        w_k=_param(rng, (key_in, ck), dtype),
        w_v=_param(rng, (c, cv), dtype),
        w_u=_param(rng, (c, cv), dtype),
        w_o=_param(rng, (cv, c), dtype),
        w_v_bar=_param(rng, (c, cv), dtype),
        w_u_bar=_param(rng, (c, cv), dtype),
        w_o_bar=_param(rng, (cv, c), dtype),
        dw=_delta_kernel(ks, cv, dtype) if ks else None,
        dw_bar=_delta_kernel(ks, cv, dtype) if ks else None,
        ln_vis=_ln(c, dtype),
        ln_id=_ln(c, dtype),
    )


def _key_in(cfg, site):
    both = cfg.self_keys == "vis+id" if site == "self" else cfg.ltst_keys == "vis+id"
    return 2 * cfg.channels if both else cfg.channels


# ---------------------------------------------------------------------
# dual-branch gated sites


def _queries_and_keys(cur_v, cur_i, src_v, src_i, w_k, both):
    if both:
        q_in = T.concat_channels(cur_v, cur_i)
        k_in = q_in if src_v is cur_v and src_i is cur_i else T.concat_channels(src_v, src_i)
    else:
        q_in, k_in = cur_v, src_v
    q = T.matmul(q_in, w_k)
    k = q if k_in is q_in else T.matmul(k_in, w_k)
    return q, k


def _dual_outputs(state, p, cmap, v_vis, v_id, nv, ni, spatial, capture, tag):
    """Both branches read out through the one shared attention map, so the
    gate/aggregate/conv stage runs fused over concatenated channels; the
    branch outputs are split only for their separate output projections."""
    h, w = spatial
    n = nv.shape[0]
    cv = v_vis.shape[1]
    if n != h * w:
        raise DimensionError(f"propagation: {n} tokens vs {h}x{w} grid")
    agg = ops.aggregate(cmap, T.concat_channels(v_vis, v_id))
    gate = T.silu(T.concat_channels(T.matmul(nv, p.w_u), T.matmul(ni, p.w_u_bar)))
    gated = T.mul(gate, agg)
    if p.dw is not None:
        kernel = T.concat([p.dw, p.dw_bar], axis=2)
        gated = T.reshape(T.depthwise_conv2d(T.reshape(gated, (h, w, 2 * cv)), kernel), (n, 2 * cv))
    out_vis = T.matmul(T.slice_cols(gated, 0, cv), p.w_o)
    out_id = T.matmul(T.slice_cols(gated, cv, 2 * cv), p.w_o_bar)
    if capture is not None:
        capture[tag] = {"cmap_vis": cmap, "cmap_id": cmap,
                        "out_vis": out_vis.data.copy(), "out_id": out_id.data.copy()}
    return BranchState(T.add(state.visual, out_vis), T.add(state.id, out_id),
                       state.layer, state.frame)


def self_propagate(state: BranchState, p: SiteParams, cfg, spatial, capture=None) -> BranchState:
    """Current-frame propagation; identity tokens join the matching keys
    (config ``self_keys``) but identity values come from the id branch only."""
    nv = p.ln_vis(state.visual)
    ni = p.ln_id(state.id)
    q, k = _queries_and_keys(nv, ni, nv, ni, p.w_k, cfg.self_keys == "vis+id")
    cmap = ops.corr(q, k, query_frame=state.frame, key_frames=(state.frame,))
    v_vis = T.matmul(nv, p.w_v)
    v_id = T.matmul(ni, p.w_v_bar)
    return _dual_outputs(state, p, cmap, v_vis, v_id, nv, ni, spatial, capture, "self")


def lt_propagate(state: BranchState, mem: KeySource, p: SiteParams, cfg, spatial,
                 capture=None) -> BranchState:
    """Non-local propagation from the memorized frames. One attention map is
    computed from visual matching and consumed by both branches; identity
    values carry the stored mask encodings."""
    if mem is None or mem.visual.shape[0] == 0:
        raise ContractError("long-term propagation requires at least one memorized frame")
    nv = p.ln_vis(state.visual)
    ni = p.ln_id(state.id)
    mv = p.ln_vis(mem.visual)
    mi = p.ln_id(mem.id)
    q, k = _queries_and_keys(nv, ni, mv, mi, p.w_k, cfg.ltst_keys == "vis+id")
    cmap = ops.corr(q, k, query_frame=state.frame, key_frames=mem.frames)
    v_vis = T.matmul(mv, p.w_v)
    v_id = T.add(T.matmul(mi, p.w_v_bar), mem.id_enc)
    return _dual_outputs(state, p, cmap, v_vis, v_id, nv, ni, spatial, capture, "lt")


def st_propagate(state: BranchState, prev: KeySource, p: SiteParams, cfg, spatial,
                 capture=None) -> BranchState:
    """Long-term propagation restricted to a window x window neighborhood in
    the previous frame; out-of-frame positions are excluded from the softmax."""
    if cfg.window % 2 == 0:
        raise ConfigError(f"window must be odd, got {cfg.window}")
    h, w = spatial
    if prev.visual.shape[0] != h * w:
        raise DimensionError("previous frame token count does not match the grid")
    idx, valid = ops.window_index(h, w, cfg.window)
    nv = p.ln_vis(state.visual)
    ni = p.ln_id(state.id)
    pv = p.ln_vis(prev.visual)
    pi = p.ln_id(prev.id)
    q, k = _queries_and_keys(nv, ni, pv, pi, p.w_k, cfg.ltst_keys == "vis+id")
    cmap = ops.corr_windowed(q, k, idx, valid, query_frame=state.frame, key_frames=prev.frames,
                             grid=(h, w, cfg.window))
    v_vis = T.matmul(pv, p.w_v)
    v_id = T.add(T.matmul(pi, p.w_v_bar), prev.id_enc)
    return _dual_outputs(state, p, cmap, v_vis, v_id, nv, ni, spatial, capture, "st")


@dataclass
class GpmLayer:
    """One dual-branch gated propagation layer (self + long-term + short-term,
    no feed-forward tail)."""

    site_self: SiteParams
    site_lt: SiteParams
    site_st: SiteParams

    @classmethod
    def create(cls, cfg, rng, dtype=None):
        return cls(init_site(cfg, _key_in(cfg, "self"), rng, dtype),
                   init_site(cfg, _key_in(cfg, "lt"), rng, dtype),
                   init_site(cfg, _key_in(cfg, "st"), rng, dtype))

    def named(self, prefix):
        out = {}
        out.update(self.site_self.named(f"{prefix}.self"))
        out.update(self.site_lt.named(f"{prefix}.lt"))
        out.update(self.site_st.named(f"{prefix}.st"))
        return out

    def forward(self, state: BranchState, mem: Optional[KeySource], prev: Optional[KeySource],
                cfg, spatial, capture=None) -> BranchState:
        """Sites run in cfg.order; lt is skipped when no memory exists yet and
        st when there is no previous frame (the very first frame)."""
        for site in cfg.order:
            if site == "self":
                state = self_propagate(state, self.site_self, cfg, spatial, capture)
            elif site == "lt":
                if mem is not None and mem.visual.shape[0] > 0:
                    state = lt_propagate(state, mem, self.site_lt, cfg, spatial, capture)
            elif site == "st":
                if prev is not None:
                    state = st_propagate(state, prev, self.site_st, cfg, spatial, capture)
        return state


# ---------------------------------------------------------------------
# coupled multi-head baseline


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Standard head-split attention: per-head scaled matching over full
    key rows, concatenated back along channels."""
    ck, cv = q.shape[1], v.shape[1]
    if ck % heads or cv % heads:
        raise ConfigError(f"heads={heads} must divide key dim {ck} and value dim {cv}")
    dk, dv = ck // heads, cv // heads
    outs = []
    for hh in range(heads):
        qh = T.slice_cols(q, hh * dk, (hh + 1) * dk)
        kh = T.slice_cols(k, hh * dk, (hh + 1) * dk)
        vh = T.slice_cols(v, hh * dv, (hh + 1) * dv)
        outs.append(T.matmul(ops.corr(qh, kh).weights, vh))
    return outs[0] if heads == 1 else T.concat(outs, axis=1)


def multi_head_attention_windowed(q: Tensor, k: Tensor, v: Tensor, heads: int,
                                  idx, valid, grid=None) -> Tensor:
    ck, cv = q.shape[1], v.shape[1]
    if ck % heads or cv % heads:
        raise ConfigError(f"heads={heads} must divide key dim {ck} and value dim {cv}")
    if grid is not None:
        # all heads share one shift pass over the window offsets
        scores = T.scale(T.window_scores_heads(q, k, grid, heads),
                         1.0 / math.sqrt(ck // heads))
        attn = T.softmax_rows(scores, valid=np.repeat(valid, heads, axis=0))
        return T.window_mix_heads(attn, v, grid, heads)
    dk, dv = ck // heads, cv // heads
    outs = []
    for hh in range(heads):
        qh = T.slice_cols(q, hh * dk, (hh + 1) * dk)
        kh = T.slice_cols(k, hh * dk, (hh + 1) * dk)
        vh = T.slice_cols(v, hh * dv, (hh + 1) * dv)
        cmap = ops.corr_windowed(qh, kh, idx, valid)
        outs.append(ops.aggregate(cmap, vh))
    return outs[0] if heads == 1 else T.concat(outs, axis=1)


@dataclass
class LsttSiteParams:
    w_k: Tensor                     # [C, C_k]
    w_v: Tensor                     # [C, C_v]
    w_o: Tensor                     # [C_v, C]
    ln: LayerNormParams

    def named(self, prefix):
        return {f"{prefix}.w_k": self.w_k, f"{prefix}.w_v": self.w_v, f"{prefix}.w_o": self.w_o,
                f"{prefix}.ln.g": self.ln.gain, f"{prefix}.ln.b": self.ln.bias}


@dataclass
class LsttLayer:
    """Coupled single-stream baseline block: multi-head attention at all
    three sites plus a feed-forward tail, pre-norm residual throughout."""

    site_self: LsttSiteParams
    site_lt: LsttSiteParams
    site_st: LsttSiteParams
    ln_ffn: LayerNormParams
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def create(cls, cfg, rng, dtype=None):
        c, ck, cv = cfg.channels, cfg.match_dim, cfg.prop_dim
        dtype = dtype or cfg.dtype

        def site():
            return LsttSiteParams(_param(rng, (c, ck), dtype), _param(rng, (c, cv), dtype),
                                  _param(rng, (cv, c), dtype), _ln(c, dtype))

        zeros = np.zeros(4 * c, dtype=T.DTYPES[dtype])
        return cls(site(), site(), site(), _ln(c, dtype),
                   _param(rng, (c, 4 * c), dtype), Tensor(zeros.copy(), requires_grad=True),
                   _param(rng, (4 * c, c), dtype),
                   Tensor(np.zeros(c, dtype=T.DTYPES[dtype]), requires_grad=True))

    def named(self, prefix):
        out = {}
        out.update(self.site_self.named(f"{prefix}.self"))
        out.update(self.site_lt.named(f"{prefix}.lt"))
        out.update(self.site_st.named(f"{prefix}.st"))
        out.update({f"{prefix}.ffn.ln.g": self.ln_ffn.gain, f"{prefix}.ffn.ln.b": self.ln_ffn.bias,
                    f"{prefix}.ffn.w1": self.w1, f"{prefix}.ffn.b1": self.b1,
                    f"{prefix}.ffn.w2": self.w2, f"{prefix}.ffn.b2": self.b2})
        return out

    def self_site(self, x: Tensor, cfg) -> Tensor:
        p = self.site_self
        nx = p.ln(x)
        att = multi_head_attention(T.matmul(nx, p.w_k), T.matmul(nx, p.w_k),
                                   T.matmul(nx, p.w_v), cfg.heads)
        return T.add(x, T.matmul(att, p.w_o))

    def lt_site(self, x: Tensor, mem: Optional[KeySource], cfg) -> Tensor:
        if mem is None or mem.visual.shape[0] == 0:
            return x
        p = self.site_lt
        nx = p.ln(x)
        nm = p.ln(mem.visual)
        v = T.add(T.matmul(nm, p.w_v), mem.id_enc)
        att = multi_head_attention(T.matmul(nx, p.w_k), T.matmul(nm, p.w_k), v, cfg.heads)
        return T.add(x, T.matmul(att, p.w_o))

    def st_site(self, x: Tensor, prev: Optional[KeySource], cfg, spatial) -> Tensor:
        if prev is None:
            return x
        p = self.site_st
        h, w = spatial
        idx, valid = ops.window_index(h, w, cfg.window)
        nx = p.ln(x)
        np_ = p.ln(prev.visual)
        v = T.add(T.matmul(np_, p.w_v), prev.id_enc)
        att = multi_head_attention_windowed(T.matmul(nx, p.w_k), T.matmul(np_, p.w_k),
                                            v, cfg.heads, idx, valid, grid=(h, w, cfg.window))
        return T.add(x, T.matmul(att, p.w_o))

    def ffn(self, x: Tensor) -> Tensor:
        nx = self.ln_ffn(x)
        hmid = T.silu(T.add_bias(T.matmul(nx, self.w1), self.b1))
        return T.add(x, T.add_bias(T.matmul(hmid, self.w2), self.b2))

    def forward(self, state: BranchState, mem: Optional[KeySource], prev: Optional[KeySource],
                cfg, spatial) -> BranchState:
        x = state.visual
        for site in cfg.order:
            if site == "self":
                x = self.self_site(x, cfg)
            elif site == "lt":
                x = self.lt_site(x, mem, cfg)
            elif site == "st":
                x = self.st_site(x, prev, cfg, spatial)
        x = self.ffn(x)
        return BranchState(x, None, state.layer, state.frame)


# ---------------------------------------------------------------------
# analytic cost model


@dataclass
class AttentionCost:
    """Exact multiply-accumulate counts of the matching/readout stages."""

    corr_macs: int
    agg_macs: int
    softmax_elems: int

    @property
    def macs(self):
        return self.corr_macs + self.agg_macs


def attention_flops(cfg, frames: int, h: int, w: int, heads: int) -> AttentionCost:
    """Cost of non-local attention over ``frames`` memorized frames.

    Correlation MACs are head-count independent at fixed total key width
    (heads * T * (HW)^2 * (C_k/heads)); the attention-map bookkeeping
    (softmax rows) scales with the head count. The value readout doubles
    for the decoupled dual-branch layer.
    """
    n = h * w
    m = frames * n
    branches = 2 if cfg.decouple else 1
    return AttentionCost(
        corr_macs=heads * frames * n * n * (cfg.match_dim // heads),
        agg_macs=branches * m * n * cfg.prop_dim,
        softmax_elems=heads * frames * n * n,
    )
