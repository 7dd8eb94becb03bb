"""Engine and training configuration.

Desk-scale defaults are chosen so the whole pipeline trains and verifies
on a laptop CPU in minutes; the reference-scale dimensions used by the
benchmark suite (C=256, C_k=128, C_v=512, window 15, kernel 5, up to 10
objects) are available through ``EngineConfig.reference()``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError

SITES = ("self", "lt", "st")
VARIANTS = ("T", "S", "B", "L")


@dataclass
class EngineConfig:
    layers: int = 2                 # stacked propagation layers
    channels: int = 32              # C: width of visual and id token embeddings
    match_dim: int = 16             # C_k: key/query width for attention matching
    prop_dim: int = 64              # C_v: width of gated value propagation
    window: int = 7                 # lambda: short-term neighborhood side length
    dw_kernel: int = 3              # depth-wise conv size; 0 disables the conv
    max_objects: int = 10
    mem_interval: int = 2           # delta: long-term memory stride (variant L)
    variant: str = "S"              # T/S/B keep only the reference frame; L appends
    heads: int = 8                  # multi-head count for the coupled baseline
    self_keys: str = "vis+id"       # self-propagation matching source
    ltst_keys: str = "vis"          # long/short-term matching source
    decouple: bool = True           # False = coupled single-stream baseline
    stride: int = 4                 # encoder token stride
    order: tuple = ("self", "lt", "st")
    decoder_input: str = "concat"   # "concat" (visual+id) or "id"
    full_res_logits: bool = True    # decode at pixel resolution vs token resolution
    dtype: str = "f32"

    @classmethod
    def reference(cls, **kw):
        base = dict(layers=3, channels=256, match_dim=128, prop_dim=512,
                    window=15, dw_kernel=5, max_objects=10, stride=16)
        base.update(kw)
        return cls(**base)

    def validate(self):
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.window % 2 == 0 or self.window < 1:
            raise ConfigError(f"window must be odd, got {self.window}")
        if self.dw_kernel != 0 and self.dw_kernel % 2 == 0:
            raise ConfigError(f"dw_kernel must be odd or 0, got {self.dw_kernel}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.self_keys not in ("vis+id", "vis"):
            raise ConfigError(f"self_keys must be 'vis+id' or 'vis', got {self.self_keys!r}")
        if self.ltst_keys not in ("vis", "vis+id"):
            raise ConfigError(f"ltst_keys must be 'vis' or 'vis+id', got {self.ltst_keys!r}")
        if tuple(sorted(self.order)) != tuple(sorted(SITES)):
            raise ConfigError(f"order must be a permutation of {SITES}, got {self.order}")
        if not self.decouple:
            if self.match_dim % self.heads or self.prop_dim % self.heads:
                raise ConfigError(
                    f"heads={self.heads} must divide match_dim={self.match_dim} "
                    f"and prop_dim={self.prop_dim}")
        s = self.stride
        while s > 1 and s % 2 == 0:
            s //= 2
        if s != 1:
            raise ConfigError(f"stride must be a power of two, got {self.stride}")
        if self.decoder_input not in ("concat", "id"):
            raise ConfigError(f"decoder_input must be 'concat' or 'id', got {self.decoder_input!r}")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be f32 or f64, got {self.dtype!r}")
        if self.mem_interval < 1:
            raise ConfigError("mem_interval must be >= 1")
        return self

    def with_overrides(self, **kw):
        return replace(self, **kw).validate()


@dataclass
class TrainConfig:
    clip_len: int = 4               # frames per sampled clip (first is the reference)
    batch: int = 2                  # clips per optimization step
    steps: int = 1500
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    teacher_memory: str = "predicted"   # or "ground-truth"
    warmup_frac: float = 0.1
    clip_norm: float = 1.0

    def validate(self):
        if self.clip_len < 2:
            raise ConfigError("clip_len must be >= 2 (short-term needs a previous frame)")
        if self.teacher_memory not in ("predicted", "ground-truth"):
            raise ConfigError(f"teacher_memory must be 'predicted' or 'ground-truth', "
                              f"got {self.teacher_memory!r}")
        if self.batch < 1 or self.steps < 0:
            raise ConfigError("batch must be >= 1 and steps >= 0")
        return self


def config_field_names(cls):
    return {f.name for f in fields(cls)}
