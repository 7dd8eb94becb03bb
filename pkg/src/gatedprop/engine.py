"""The full segmentation network and its frame-by-frame inference loop.

A small convolutional encoder produces visual tokens at a configurable
stride, a stack of propagation layers transfers reference information
into the current frame, and a light upsampling decoder turns the final
tokens into per-slot logits scored against the identity bank.

Per-video state (memorized frames, the previous-frame snapshot, the
active object set) lives in a separate ``VideoState`` so one engine can
serve many videos.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import idmask
from . import tensor as T
from .config import EngineConfig
from .errors import ContractError, DimensionError, IdentityError
from .idmask import IdBank, MaskMap
from .propagation import (BranchState, GpmLayer, KeySource, LayerNormParams, LsttLayer,
                          _ln, _param)
from .tensor import Tensor


def _n_stages(stride):
    n = 0
    while stride > 1:
        stride //= 2
        n += 1
    return n


@dataclass
class ConvParams:
    w: Tensor           # [ks*ks*c_in, c_out]
    b: Tensor           # [c_out]
    ks: int
    stride: int
    c_in: int
    c_out: int

    @classmethod
    def create(cls, c_in, c_out, ks, stride, rng, dtype):
        w = _param(rng, (ks * ks * c_in, c_out), dtype, scale=1.0 / math.sqrt(ks * ks * c_in))
        b = Tensor(np.zeros(c_out, dtype=T.DTYPES[dtype]), requires_grad=True)
        return cls(w, b, ks, stride, c_in, c_out)

    def __call__(self, x):
        """x: [H, W, c_in] -> [H/stride, W/stride, c_out]."""
        h, w, _ = x.shape
        cols = T.im2col(x, self.ks, self.stride)
        out = T.add_bias(T.matmul(cols, self.w), self.b)
        return T.reshape(out, (h // self.stride, w // self.stride, self.c_out))

    def named(self, prefix):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


@dataclass
class Encoder:
    """Trainable stand-in for a pretrained backbone: a stride-1 stem whose
    output doubles as the decoder skip, then stride-2 stages down to the
    token resolution, and a layer norm over the resulting tokens."""

    stem: ConvParams
    stages: list
    ln: LayerNormParams

    @classmethod
    def create(cls, cfg, rng, dtype):
        c = cfg.channels
        c0 = max(4, c // 4)
        stem = ConvParams.create(3, c0, 3, 1, rng, dtype)
        stages = []
        cur = c0
        n = _n_stages(cfg.stride)
        for i in range(n):
            nxt = c if i == n - 1 else min(c, cur * 2)
            stages.append(ConvParams.create(cur, nxt, 3, 2, rng, dtype))
            cur = nxt
        if n == 0:
            stages.append(ConvParams.create(c0, c, 3, 1, rng, dtype))
        return cls(stem, stages, _ln(c, dtype))

    @property
    def skip_channels(self):
        return self.stem.c_out

    def named(self, prefix="enc"):
        out = self.stem.named(f"{prefix}.stem")
        for i, s in enumerate(self.stages):
            out.update(s.named(f"{prefix}.stage{i}"))
        out[f"{prefix}.ln.g"] = self.ln.gain
        out[f"{prefix}.ln.b"] = self.ln.bias
        return out

    def forward(self, image: Tensor):
        """image: [H, W, 3] in [-0.5, 0.5]. Returns (tokens [n, C], skip [H, W, c0])."""
        skip = T.silu(self.stem(image))
        y = skip
        for s in self.stages:
            y = T.silu(s(y))
        h, w, c = y.shape
        tokens = self.ln(T.reshape(y, (h * w, c)))
        return tokens, skip


@dataclass
class Decoder:
    """Upsampling head: token features back to (full or token resolution)
    identity-scoring features, with one encoder skip connection on the
    full-resolution path."""

    conv_in: ConvParams
    ups: list
    proj: ConvParams
    full_res: bool

    @classmethod
    def create(cls, cfg, skip_channels, rng, dtype):
        c = cfg.channels
        din = 2 * c if (cfg.decouple and cfg.decoder_input == "concat") else c
        conv_in = ConvParams.create(din, c, 3, 1, rng, dtype)
        ups = []
        if cfg.full_res_logits:
            for _ in range(max(0, _n_stages(cfg.stride) - 1)):
                ups.append(ConvParams.create(c, c, 3, 1, rng, dtype))
            proj = ConvParams.create(c + skip_channels, cfg.prop_dim, 3, 1, rng, dtype)
        else:
            proj = ConvParams.create(c, cfg.prop_dim, 3, 1, rng, dtype)
        return cls(conv_in, ups, proj, cfg.full_res_logits)

    def named(self, prefix="dec"):
        out = self.conv_in.named(f"{prefix}.conv_in")
        for i, s in enumerate(self.ups):
            out.update(s.named(f"{prefix}.up{i}"))
        out.update(self.proj.named(f"{prefix}.proj"))
        return out

    def forward(self, tokens: Tensor, spatial, stride, skip: Tensor):
        """tokens: [n, Din] at token resolution; returns ([n_out, C_v], out_stride)."""
        h, w = spatial
        hp, wp = h // stride, w // stride
        x = T.silu(self.conv_in(T.reshape(tokens, (hp, wp, tokens.shape[1]))))
        if not self.full_res:
            return T.reshape(self.proj(x), (hp * wp, self.proj.c_out)), stride
        for s in self.ups:
            x = T.silu(s(T.upsample2x(x)))
        if stride > 1:
            x = T.upsample2x(x)
        hf, wf, c = x.shape
        if (hf, wf) != (h, w):
            raise DimensionError(f"decoder produced {hf}x{wf}, expected {h}x{w}")
        flat = T.concat_channels(T.reshape(x, (h * w, c)), T.reshape(skip, (h * w, skip.shape[2])))
        x = T.reshape(flat, (h, w, c + skip.shape[2]))
        return T.reshape(self.proj(x), (h * w, self.proj.c_out)), 1


@dataclass
class MemoryFrame:
    frame: int
    id_enc: Tensor                   # [n, C_v] mask encoding, shared by all layers
    layers: list                     # per layer: (visual tokens, id tokens or None)


@dataclass
class MemoryBank:
    frames: list = field(default_factory=list)

    def append(self, mf: MemoryFrame):
        if self.frames and mf.frame <= self.frames[-1].frame:
            raise ContractError(
                f"memory frame ids must increase: {mf.frame} after {self.frames[-1].frame}")
        self.frames.append(mf)

    def __len__(self):
        return len(self.frames)

    def key_source(self, layer: int, coupled=False) -> Optional[KeySource]:
        if not self.frames:
            return None
        vis = [mf.layers[layer][0] for mf in self.frames]
        enc = [mf.id_enc for mf in self.frames]
        ids = None
        if not coupled:
            ids = [mf.layers[layer][1] for mf in self.frames]
        if len(self.frames) == 1:
            return KeySource(vis[0], ids[0] if ids else None, enc[0],
                             (self.frames[0].frame,))
        return KeySource(T.concat(vis, axis=0), T.concat(ids, axis=0) if ids else None,
                         T.concat(enc, axis=0), tuple(mf.frame for mf in self.frames))


@dataclass
class VideoState:
    """Everything the engine remembers about one video between frames."""

    memory: MemoryBank = field(default_factory=MemoryBank)
    prev: Optional[MemoryFrame] = None
    active: set = field(default_factory=set)
    next_frame: int = 1
    spatial: Optional[tuple] = None


@dataclass
class StepResult:
    mask: MaskMap
    probs: np.ndarray                # [slots, H, W]; inactive slots all-zero
    feature: Tensor                  # [n_out, C_v] decoder output
    logits: Tensor                   # detached inference logits [n_out, slots]
    out_stride: int
    layer_inputs: list               # per layer (visual, id) current-frame inputs
    captures: Optional[list] = None


class Engine:
    """Model parameters plus the propagation/inference procedures."""

    def __init__(self, cfg: EngineConfig, seed=0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        dtype = cfg.dtype
        self.encoder = Encoder.create(cfg, rng, dtype)
        if cfg.decouple:
            self.layers = [GpmLayer.create(cfg, rng, dtype) for _ in range(cfg.layers)]
        else:
            self.layers = [LsttLayer.create(cfg, rng, dtype) for _ in range(cfg.layers)]
        self.decoder = Decoder.create(cfg, self.encoder.skip_channels, rng, dtype)
        self.bank = IdBank.create(cfg.max_objects, cfg.prop_dim, rng, dtype)

    # -- parameters ------------------------------------------------------

    def named_params(self):
        out = self.encoder.named("enc")
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"layer{i}"))
        out.update(self.decoder.named("dec"))
        out["bank"] = self.bank.vectors
        return out

    def load_state(self, arrays: dict):
        params = self.named_params()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ContractError(f"weight mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in params.items():
            a = arrays[name]
            if tuple(a.shape) != tuple(p.data.shape):
                raise ContractError(f"{name}: shape {a.shape} vs {p.data.shape}")
            p.data[...] = a.astype(p.data.dtype)

    def zero_grad(self):
        for p in self.named_params().values():
            p.zero_grad()

    # -- per-video bookkeeping --------------------------------------------

    def new_state(self) -> VideoState:
        return VideoState()

    def _image_tensor(self, image) -> Tensor:
        arr = np.asarray(image)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise DimensionError(f"expected HxWx3 image, got {arr.shape}")
        if arr.dtype == np.uint8:
            arr = arr.astype(T.DTYPES[self.cfg.dtype]) / 255.0 - 0.5
        else:
            arr = arr.astype(T.DTYPES[self.cfg.dtype])
        h, w, _ = arr.shape
        if h % self.cfg.stride or w % self.cfg.stride:
            raise DimensionError(f"image {h}x{w} not divisible by stride {self.cfg.stride}")
        return Tensor(arr)

    def encode_frame(self, image):
        """Image to visual tokens; returns (tokens [n, C], skip feature)."""
        return self.encoder.forward(self._image_tensor(image))

    def _zero_id(self, n):
        # current-frame identity state starts empty: nothing is known about
        # object assignment before propagation
        return Tensor(np.zeros((n, self.cfg.channels), dtype=T.DTYPES[self.cfg.dtype]))

    def _run_layers(self, tokens, state: VideoState, spatial, frame_id, capture=None):
        cfg = self.cfg
        hp, wp = spatial[0] // cfg.stride, spatial[1] // cfg.stride
        cur = BranchState(tokens, self._zero_id(tokens.shape[0]) if cfg.decouple else None,
                          0, frame_id)
        layer_inputs = []
        captures = [] if capture is not None else None
        for li, layer in enumerate(self.layers):
            layer_inputs.append((cur.visual, cur.id))
            mem = state.memory.key_source(li, coupled=not cfg.decouple)
            prev = None
            if state.prev is not None:
                pv, pi = state.prev.layers[li]
                prev = KeySource(pv, pi, state.prev.id_enc, (state.prev.frame,))
            cap = {} if capture is not None else None
            if cfg.decouple:
                cur = layer.forward(cur, mem, prev, cfg, (hp, wp), capture=cap)
            else:
                cur = layer.forward(cur, mem, prev, cfg, (hp, wp))
            cur = BranchState(cur.visual, cur.id, li + 1, frame_id)
            if captures is not None:
                captures.append(cap)
        return cur, layer_inputs, captures

    def _decode(self, final: BranchState, skip, spatial):
        cfg = self.cfg
        if cfg.decouple and cfg.decoder_input == "concat":
            tokens = T.concat_channels(final.visual, final.id)
        elif cfg.decouple and cfg.decoder_input == "id":
            tokens = final.id
        else:
            tokens = final.visual
        return self.decoder.forward(tokens, spatial, cfg.stride, skip)

    def _check_mask(self, mask: MaskMap, spatial):
        if (mask.height, mask.width) != spatial:
            raise DimensionError(f"mask {mask.height}x{mask.width} vs frame {spatial}")
        top = int(mask.values.max(initial=0))
        if top > self.cfg.max_objects:
            raise IdentityError(f"mask label {top} exceeds max_objects={self.cfg.max_objects}")

    def _mask_encoding(self, mask: MaskMap):
        return idmask.encode_mask(mask, self.bank, self.cfg.stride)

    def forward_frame(self, image, state: VideoState, capture=None):
        """Encode, propagate and decode one frame without touching memory."""
        if len(state.memory) == 0:
            raise ContractError("no reference committed: the memory is empty")
        arr = np.asarray(image)
        spatial = (arr.shape[0], arr.shape[1])
        if state.spatial is not None and spatial != state.spatial:
            raise DimensionError(f"frame size {spatial} changed from {state.spatial}")
        tokens, skip = self.encode_frame(image)
        final, layer_inputs, captures = self._run_layers(tokens, state, spatial,
                                                         state.next_frame, capture)
        feature, out_stride = self._decode(final, skip, spatial)
        logits = idmask.decode_logits(feature, self.bank, state.active)
        mask = idmask.argmax_mask(logits, spatial, out_stride)
        probs = self._probabilities(logits, state.active, spatial, out_stride)
        return StepResult(mask, probs, feature, logits, out_stride, layer_inputs, captures)

    def _probabilities(self, logits, active, spatial, out_stride):
        h, w = spatial
        slots = self.bank.slots
        cols = sorted(set(int(a) for a in active) | {0})
        x = logits.data[:, cols]
        x = x - x.max(axis=1, keepdims=True)
        e = np.exp(x)
        p = e / e.sum(axis=1, keepdims=True)
        hp, wp = h // out_stride, w // out_stride
        out = np.zeros((slots, h, w), dtype=logits.data.dtype)
        for j, c in enumerate(cols):
            grid = p[:, j].reshape(hp, wp)
            out[c] = np.repeat(np.repeat(grid, out_stride, axis=0), out_stride, axis=1)
        return out

    def advance(self, state: VideoState, mask: MaskMap, layer_inputs, spatial):
        """Commit a processed frame to memory per policy and refresh the
        previous-frame snapshot. ``mask`` is whatever the caller trusts:
        the model's own prediction at inference, optionally ground truth
        during training."""
        cfg = self.cfg
        self._check_mask(mask, spatial)
        frame_id = state.next_frame
        mf = MemoryFrame(frame_id, self._mask_encoding(mask), layer_inputs)
        if cfg.variant == "L" and (frame_id - 1) % cfg.mem_interval == 0:
            state.memory.append(mf)
        state.prev = mf
        state.next_frame += 1

    def step(self, image, state: VideoState):
        """Segment one frame and update the video state with the prediction."""
        res = self.forward_frame(image, state)
        arr = np.asarray(image)
        self.advance(state, res.mask, res.layer_inputs, (arr.shape[0], arr.shape[1]))
        return res

    def commit_reference(self, image, mask: MaskMap, state: VideoState):
        """Ingest an annotated frame: run the forward pass for its token
        states and seed the memory with the ground-truth mask encoding."""
        arr = np.asarray(image)
        spatial = (arr.shape[0], arr.shape[1])
        if state.spatial is None:
            state.spatial = spatial
        self._check_mask(mask, spatial)
        tokens, _ = self.encode_frame(image)
        final, layer_inputs, _ = self._run_layers(tokens, state, spatial, state.next_frame)
        frame_id = state.next_frame
        mf = MemoryFrame(frame_id, self._mask_encoding(mask), layer_inputs)
        state.memory.append(mf)
        state.prev = mf
        state.active |= set(mask.labels())
        state.next_frame += 1
        return final

    def training_logits(self, feature: Tensor):
        """Grad-carrying logits over all slots (inactive columns are masked
        in the loss, not here)."""
        return T.matmul(feature, T.transpose(self.bank.vectors))

    def active_columns(self, state: VideoState):
        cols = np.zeros(self.bank.slots, dtype=bool)
        cols[0] = True
        for a in state.active:
            cols[int(a)] = True
        return cols
