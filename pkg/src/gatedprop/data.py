"""Synthetic moving-shape sequences with exact masks.

Each sequence is a pure function of its spec: colored squares and discs
translate over a textured background, bouncing off the frame border so
no object ever leaves the frame. Shapes are drawn in slot order, so a
higher-numbered object occludes lower ones and the mask records the
visible object per pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .idmask import MaskMap

SHAPE_KINDS = ("square", "disc")


@dataclass
class SyntheticSpec:
    seed: int = 0
    frames: int = 8
    width: int = 48
    height: int = 48
    objects: int = 2
    shape_kinds: tuple = SHAPE_KINDS
    velocity: tuple = (0.5, 2.0)    # pixels per frame, magnitude range
    size_range: tuple = (0.10, 0.18)  # shape radius as a fraction of min(h, w)
    noise: float = 0.08             # background texture amplitude
    max_objects: int = 10


@dataclass
class Shape:
    kind: str
    half: float                     # half side (square) or radius (disc)
    color: np.ndarray
    pos: np.ndarray                 # center, float
    vel: np.ndarray


def _background(spec: SyntheticSpec, rng) -> np.ndarray:
    h, w = spec.height, spec.width
    ys = np.linspace(0.0, 1.0, h)[:, None, None]
    xs = np.linspace(0.0, 1.0, w)[None, :, None]
    base = rng.uniform(0.25, 0.6, size=3)
    tilt = rng.uniform(-0.15, 0.15, size=(2, 3))
    img = base[None, None, :] + ys * tilt[0] + xs * tilt[1]
    img = img + rng.normal(0.0, spec.noise, size=(h, w, 3))
    return np.clip(img, 0.0, 1.0)


def _spawn(spec: SyntheticSpec, rng) -> list:
    shapes = []
    smin, smax = spec.size_range
    vmin, vmax = spec.velocity
    m = min(spec.height, spec.width)
    for _ in range(spec.objects):
        kind = spec.shape_kinds[rng.integers(0, len(spec.shape_kinds))]
        half = float(np.clip(rng.uniform(smin, smax) * m, 2.0, m / 2 - 1))
        color = rng.uniform(0.0, 1.0, size=3)
        pos = np.array([rng.uniform(half, spec.height - half),
                        rng.uniform(half, spec.width - half)])
        ang = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(vmin, vmax)
        shapes.append(Shape(kind, half, color, pos, speed * np.array([np.sin(ang), np.cos(ang)])))
    return shapes


def _advance(shape: Shape, h, w):
    # reflect off the borders so the shape always stays fully inside
    shape.pos += shape.vel
    for axis, limit in ((0, h), (1, w)):
        lo, hi = shape.half, limit - shape.half
        if shape.pos[axis] < lo:
            shape.pos[axis] = 2 * lo - shape.pos[axis]
            shape.vel[axis] = -shape.vel[axis]
        elif shape.pos[axis] > hi:
            shape.pos[axis] = 2 * hi - shape.pos[axis]
            shape.vel[axis] = -shape.vel[axis]
        shape.pos[axis] = float(np.clip(shape.pos[axis], lo, hi))


def _coverage(shape: Shape, h, w) -> np.ndarray:
    ys = np.arange(h)[:, None] + 0.5
    xs = np.arange(w)[None, :] + 0.5
    dy = np.abs(ys - shape.pos[0])
    dx = np.abs(xs - shape.pos[1])
    if shape.kind == "square":
        return (dy <= shape.half) & (dx <= shape.half)
    return dy * dy + dx * dx <= shape.half * shape.half


def generate_sequence(spec: SyntheticSpec):
    """Deterministic (frame uint8 [H,W,3], MaskMap) pairs for the spec."""
    if spec.objects < 0:
        raise ConfigError("objects must be >= 0")
    if spec.objects > spec.max_objects:
        raise ConfigError(f"objects={spec.objects} exceeds max_objects={spec.max_objects}")
    rng = np.random.default_rng(spec.seed)
    bg = _background(spec, rng)
    return sequence_from_shapes(spec, bg, _spawn(spec, rng))


def sequence_from_shapes(spec: SyntheticSpec, bg, shapes):
    """Render a fixed scene; shapes move and occlude in slot order."""
    out = []
    for _ in range(spec.frames):
        img = bg.copy()
        mask = np.zeros((spec.height, spec.width), dtype=np.uint8)
        for i, sh in enumerate(shapes, start=1):
            cov = _coverage(sh, spec.height, spec.width)
            img[cov] = sh.color
            mask[cov] = i
        out.append(((img * 255).astype(np.uint8), MaskMap(mask)))
        for sh in shapes:
            _advance(sh, spec.height, spec.width)
    return out
