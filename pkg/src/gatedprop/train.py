"""Training loop, loss, optimizer and the engine-level gradient check.

A training sample is a clip: the first frame acts as the reference (its
ground-truth mask is committed; no loss on it), every later frame incurs
a per-pixel cross entropy over background + the active object slots. By
default the memory receives the model's own predicted masks, matching
the inference regime; ground-truth feeding is available for debugging.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data import SyntheticSpec, generate_sequence
from .engine import Engine
from .errors import ContractError, DimensionError
from .gradcheck import check_gradients
from .idmask import MaskMap, downsample_labels
from .tensor import Tensor


def frame_loss(engine: Engine, feature: Tensor, out_stride: int, gt: MaskMap, active_cols):
    """Cross entropy of decoder features against a ground-truth mask at the
    decoder's output resolution (majority-vote downsampled if needed).

    Labels whose slot is not active (an object fully occluded in the clip's
    reference frame) are unpredictable by construction and score as
    background."""
    targets = downsample_labels(gt, out_stride).reshape(-1) if out_stride > 1 \
        else gt.values.reshape(-1).astype(np.intp)
    targets = np.where(active_cols[targets], targets, 0)
    logits = engine.training_logits(feature)
    if logits.shape[0] != targets.shape[0]:
        raise DimensionError(f"{logits.shape[0]} logit rows vs {targets.shape[0]} target pixels")
    return T.cross_entropy_rows(logits, targets, active_cols=active_cols)


def sequence_loss(engine: Engine, clip, teacher_memory="predicted"):
    """Mean per-frame loss over frames 2..T of a (frame, MaskMap) clip."""
    if len(clip) < 2:
        raise ContractError("a clip needs at least two frames")
    state = engine.new_state()
    engine.commit_reference(clip[0][0], clip[0][1], state)
    active_cols = engine.active_columns(state)
    losses = []
    for image, gt in clip[1:]:
        res = engine.forward_frame(image, state)
        losses.append(frame_loss(engine, res.feature, res.out_stride, gt, active_cols))
        commit = res.mask if teacher_memory == "predicted" else gt
        engine.advance(state, commit, res.layer_inputs, (gt.height, gt.width))
    total = losses[0]
    for l in losses[1:]:
        total = T.add(total, l)
    return T.scale(total, 1.0 / len(losses))


class Adam:
    """Adam with bias correction, global-norm gradient clipping and optional
    decoupled weight decay."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0, clip_norm=1.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def grad_norm(self):
        sq = 0.0
        for p in self.params:
            if p.grad is not None:
                sq += float((p.grad.astype(np.float64) ** 2).sum())
        return np.sqrt(sq)

    def step(self, lr_scale=1.0):
        self.t += 1
        norm = self.grad_norm()
        clip = min(1.0, self.clip_norm / norm) if (self.clip_norm and norm > 0) else 1.0
        lr = self.lr * lr_scale
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad * clip
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            upd = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            if self.weight_decay:
                upd = upd + self.weight_decay * p.data
            p.data -= (lr * upd).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def final_loss(self):
        tail = self.losses[-20:] if len(self.losses) >= 20 else self.losses
        return float(np.mean(tail)) if tail else float("nan")


def sample_clip(sequence, clip_len, rng):
    """A contiguous window; the first frame plays the reference role."""
    t0 = int(rng.integers(0, max(1, len(sequence) - clip_len + 1)))
    return sequence[t0:t0 + clip_len]


def train(engine: Engine, specs, cfg: TrainConfig, log_every=0, on_step=None) -> TrainResult:
    """Optimize the engine on synthetic sequences sampled with replacement."""
    cfg.validate()
    sequences = [generate_sequence(s) for s in specs]
    for seq in sequences:
        if len(seq) < cfg.clip_len:
            raise ContractError(f"sequence of {len(seq)} frames shorter than clip_len={cfg.clip_len}")
    params = engine.named_params()
    opt = Adam(params.values(), lr=cfg.lr, weight_decay=cfg.weight_decay,
               clip_norm=cfg.clip_norm)
    rng = np.random.default_rng(cfg.seed)
    warmup = max(1, int(cfg.steps * cfg.warmup_frac))
    result = TrainResult()
    start = time.perf_counter()
    for step_i in range(cfg.steps):
        opt.zero_grad()
        batch_losses = []
        for _ in range(cfg.batch):
            seq = sequences[int(rng.integers(0, len(sequences)))]
            clip = sample_clip(seq, cfg.clip_len, rng)
            loss = T.scale(sequence_loss(engine, clip, cfg.teacher_memory), 1.0 / cfg.batch)
            loss.backward()
            batch_losses.append(loss.item() * cfg.batch)
        mean_loss = float(np.mean(batch_losses))
        if not np.isfinite(mean_loss):
            raise ContractError(
                f"non-finite loss {mean_loss} at step {step_i}: aborting "
                f"(last finite loss {result.losses[-1] if result.losses else 'n/a'})")
        result.grad_norms.append(opt.grad_norm())
        lr_scale = min(1.0, (step_i + 1) / warmup)
        opt.step(lr_scale=lr_scale)
        result.losses.append(mean_loss)
        if log_every and (step_i % log_every == 0 or step_i == cfg.steps - 1):
            print(f"step {step_i:5d} loss {mean_loss:.4f} lr x{lr_scale:.2f}")
        if on_step is not None:
            on_step(step_i, mean_loss)
    result.seconds = time.perf_counter() - start
    return result


# -- gradient checking ---------------------------------------------------


def _jitter_params(params, rng, ln_shift=0.15):
    """Move every parameter off its init point so all gate/branch paths carry
    gradient (layer-norm biases of zero-id inputs would otherwise keep the
    identity gates closed and the check vacuous)."""
    for name, p in params:
        if name.endswith(".b") or name.endswith(".bias") or name.endswith("ln.b") \
                or name.endswith("ln_vis.b") or name.endswith("ln_id.b"):
            p.data += rng.uniform(-ln_shift, ln_shift, size=p.data.shape)
        else:
            p.data += 0.05 * rng.standard_normal(p.data.shape)


def engine_gradcheck(cfg, spatial=(12, 12), objects=2, tolerance=1e-3, step=1e-4,
                     max_per_tensor=16, seed=0, jitter=True):
    """Finite-difference check of the full two-frame pipeline in float64.

    Builds a fresh engine, runs reference-commit plus one supervised frame,
    and probes a random subsample of coordinates in every parameter tensor.
    """
    cfg = cfg.with_overrides(dtype="f64")
    engine = Engine(cfg, seed=seed)
    params = sorted(engine.named_params().items())
    rng = np.random.default_rng(seed + 1)
    if jitter:
        _jitter_params(params, rng)
    spec = SyntheticSpec(seed=seed, frames=2, width=spatial[1], height=spatial[0],
                         objects=objects, max_objects=cfg.max_objects)
    clip = generate_sequence(spec)

    def loss_fn():
        return sequence_loss(engine, clip, teacher_memory="ground-truth")

    return check_gradients(loss_fn, params, tolerance=tolerance, step=step,
                           max_per_tensor=max_per_tensor, seed=seed)
