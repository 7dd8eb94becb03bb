"""Identity embeddings: encoding object masks into token vectors and back.

A mask stores one object index per pixel (0 = background). The bank holds
one learnable vector per object slot plus one for background; encoding a
mask means looking up the slot vector of each feature-resolution patch,
and decoding means scoring feature tokens against the bank rows. Keeping
both directions as plain bank lookups/inner products makes slot
permutation equivariance hold by construction.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DimensionError, IdentityError
from .tensor import Tensor


class MaskMap:
    """Per-pixel object indices, uint8, 0 = background."""

    def __init__(self, values):
        arr = np.asarray(values)
        if arr.ndim != 2:
            raise DimensionError("MaskMap expects a 2D array")
        self.values = arr.astype(np.uint8)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    def labels(self):
        """Distinct nonzero object indices present in the mask."""
        return sorted(int(v) for v in np.unique(self.values) if v != 0)

    def permuted(self, perm) -> "MaskMap":
        """Relabel objects: output pixel = perm[input pixel]."""
        lut = np.asarray(perm, dtype=np.uint8)
        return MaskMap(lut[self.values])

    def __eq__(self, other):
        return isinstance(other, MaskMap) and np.array_equal(self.values, other.values)


class IdBank:
    """Learnable identity vectors, one row per object slot; row 0 is background."""

    def __init__(self, vectors: Tensor):
        if vectors.data.ndim != 2:
            raise DimensionError("IdBank expects a matrix of slot vectors")
        self.vectors = vectors

    @classmethod
    def create(cls, max_objects: int, dim: int, rng: np.random.Generator, dtype="f32"):
        data = rng.standard_normal((max_objects + 1, dim)) / np.sqrt(dim)
        return cls(Tensor(data.astype(T.DTYPES[dtype]), requires_grad=True))

    @property
    def slots(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]

    def permuted(self, perm) -> "IdBank":
        """Reorder slot rows; used by the equivariance tests."""
        return IdBank(Tensor(self.vectors.data[np.asarray(perm)],
                             requires_grad=self.vectors.requires_grad))


def downsample_labels(mask: MaskMap, stride: int) -> np.ndarray:
    """Majority-vote label of each stride x stride patch. Ties go to the
    label that appears first in the patch's row-major scan: a spatial rule,
    so relabeling objects relabels the result (slot permutations commute
    with encoding, which a smallest-label rule would break).
    Returns an int array of shape [H/s, W/s]."""
    h, w = mask.values.shape
    if h % stride or w % stride:
        raise DimensionError(f"mask {h}x{w} not divisible by stride {stride}")
    hp, wp = h // stride, w // stride
    k = stride * stride
    patches = mask.values.reshape(hp, stride, wp, stride).transpose(0, 2, 1, 3).reshape(hp, wp, k)
    top = int(patches.max(initial=0))
    counts = np.zeros((hp, wp, top + 1), dtype=np.int32)
    grid = np.indices((hp, wp, k))
    np.add.at(counts, (grid[0], grid[1], patches), 1)
    first = np.full((hp, wp, top + 1), k, dtype=np.int32)
    ii, jj = np.indices((hp, wp))
    for pos in range(k - 1, -1, -1):
        first[ii, jj, patches[:, :, pos]] = pos
    tied = counts == counts.max(axis=2, keepdims=True)
    return np.where(tied, first, k + 1).argmin(axis=2)


def encode_mask(mask: MaskMap, bank: IdBank, stride: int) -> Tensor:
    """Identity tokens of a mask at feature resolution: each token is the
    bank vector of its patch's majority label."""
    if int(mask.values.max(initial=0)) >= bank.slots:
        raise IdentityError(
            f"mask label {int(mask.values.max())} outside bank with {bank.slots} slots")
    labels = downsample_labels(mask, stride)
    return T.gather_rows(bank.vectors, labels.reshape(-1))


def decode_logits(feature: Tensor, bank: IdBank, active) -> Tensor:
    """Inner-product scores of each token against background + active slots.

    Inactive slots score -inf so they can never win an argmax. Inference
    utility: the result carries no gradient (the training path scores
    against the full bank and masks inactive columns in the loss instead).
    """
    active = set(int(a) for a in active)
    if not all(1 <= a < bank.slots for a in active):
        raise IdentityError(f"active set {sorted(active)} outside 1..{bank.slots - 1}")
    n = feature.shape[0]
    out = np.full((n, bank.slots), -np.inf, dtype=feature.data.dtype)
    for slot in sorted(active | {0}):
        # per-slot products keep results identical under slot permutation
        out[:, slot] = feature.data @ bank.vectors.data[slot]
    return Tensor(out)


def argmax_mask(logits: Tensor, spatial, stride: int) -> MaskMap:
    """Winning slot per token, upsampled back to pixel resolution."""
    h, w = spatial
    if h % stride or w % stride:
        raise DimensionError(f"spatial {h}x{w} not divisible by stride {stride}")
    hp, wp = h // stride, w // stride
    if logits.shape[0] != hp * wp:
        raise DimensionError(f"{logits.shape[0]} tokens vs {hp}x{wp} grid")
    labels = logits.data.argmax(axis=1).reshape(hp, wp)
    return MaskMap(np.repeat(np.repeat(labels, stride, axis=0), stride, axis=1))
