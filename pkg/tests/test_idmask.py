import numpy as np
import pytest

from gatedprop import idmask
from gatedprop.errors import DimensionError, IdentityError
from gatedprop.idmask import IdBank, MaskMap, argmax_mask, decode_logits, downsample_labels, encode_mask
from gatedprop.tensor import Tensor


def make_bank(slots=4, dim=6, seed=0):
    return IdBank.create(slots - 1, dim, np.random.default_rng(seed), dtype="f64")


class TestEncodeMask:
    def test_all_background(self):
        bank = make_bank()
        tok = encode_mask(MaskMap(np.zeros((4, 4), np.uint8)), bank, 2)
        assert np.array_equal(tok.data, np.tile(bank.vectors.data[0], (4, 1)))

    def test_full_object(self):
        bank = make_bank()
        tok = encode_mask(MaskMap(np.full((4, 4), 3, np.uint8)), bank, 2)
        assert np.array_equal(tok.data, np.tile(bank.vectors.data[3], (4, 1)))

    def test_majority_vote_patch(self):
        # patch labels {1,1,2,0}: object 1 holds the majority
        bank = make_bank()
        m = np.zeros((4, 4), np.uint8)
        m[0, 0] = m[0, 1] = 1
        m[1, 0] = 2
        tok = encode_mask(MaskMap(m), bank, 2)
        assert np.array_equal(tok.data[0], bank.vectors.data[1])
        assert np.array_equal(tok.data[1], bank.vectors.data[0])

    def test_tie_breaks_to_first_patch_position(self):
        m = np.array([[1, 1], [2, 2]], np.uint8)
        assert downsample_labels(MaskMap(m), 2)[0, 0] == 1
        m2 = np.array([[0, 0], [2, 2]], np.uint8)
        assert downsample_labels(MaskMap(m2), 2)[0, 0] == 0
        m3 = np.array([[2, 2], [1, 1]], np.uint8)  # spatial rule: 2 comes first
        assert downsample_labels(MaskMap(m3), 2)[0, 0] == 2

    def test_tie_break_commutes_with_relabeling(self):
        rng = np.random.default_rng(17)
        perm = np.array([0, 2, 3, 1], np.uint8)
        for _ in range(20):
            m = MaskMap(rng.integers(0, 4, size=(8, 8)).astype(np.uint8))
            base = downsample_labels(m, 4)
            relabeled = downsample_labels(m.permuted(perm), 4)
            assert np.array_equal(perm[base], relabeled)

    def test_out_of_range_label(self):
        bank = make_bank(slots=3)
        with pytest.raises(IdentityError):
            encode_mask(MaskMap(np.full((2, 2), 7, np.uint8)), bank, 1)

    def test_non_divisible_dims(self):
        with pytest.raises(DimensionError):
            encode_mask(MaskMap(np.zeros((3, 4), np.uint8)), make_bank(), 2)

    def test_idempotent_under_round_trip(self):
        rng = np.random.default_rng(5)
        labels = rng.integers(0, 3, size=(3, 5)).astype(np.uint8)
        up = MaskMap(np.repeat(np.repeat(labels, 4, axis=0), 4, axis=1))
        assert np.array_equal(downsample_labels(up, 4), labels)

    def test_gradient_reaches_bank(self):
        bank = make_bank()
        tok = encode_mask(MaskMap(np.array([[1, 1], [0, 2]], np.uint8)), bank, 1)
        from gatedprop import tensor as T

        T.total(tok).backward()
        g = bank.vectors.grad
        assert np.array_equal(g[1], np.full(bank.dim, 2.0))  # two pixels carry label 1
        assert np.array_equal(g[3], np.zeros(bank.dim))


class TestDecodeLogits:
    def test_orthogonal_bank_recovers_slot(self):
        vec = np.zeros((4, 4))
        np.fill_diagonal(vec, 1.0)
        bank = IdBank(Tensor(vec))
        feature = Tensor(vec[2:3].copy())
        logits = decode_logits(feature, bank, active={1, 2})
        assert logits.data[0].argmax() == 2
        # inactive slot 3 can never win
        assert logits.data[0, 3] == -np.inf

    def test_empty_active_set_yields_background(self):
        bank = make_bank()
        rng = np.random.default_rng(1)
        feature = Tensor(rng.standard_normal((5, bank.dim)))
        logits = decode_logits(feature, bank, active=set())
        assert (logits.data.argmax(axis=1) == 0).all()

    def test_matches_dot_product_oracle(self):
        bank = make_bank()
        rng = np.random.default_rng(2)
        feature = rng.standard_normal((6, bank.dim))
        logits = decode_logits(Tensor(feature), bank, active={1, 3})
        for p in range(6):
            for s in (0, 1, 3):
                want = float(np.dot(feature[p], bank.vectors.data[s]))
                assert logits.data[p, s] == pytest.approx(want, rel=1e-6)
            assert logits.data[p, 2] == -np.inf

    def test_permutation_equivariance(self):
        bank = make_bank()
        rng = np.random.default_rng(3)
        feature = Tensor(rng.standard_normal((8, bank.dim)))
        perm = [0, 2, 1, 3]  # swap slots 1 and 2
        base = decode_logits(feature, bank, active={1, 2})
        swapped = decode_logits(feature, bank.permuted(perm), active={1, 2})
        assert np.array_equal(base.data[:, 1], swapped.data[:, 2])
        assert np.array_equal(base.data[:, 2], swapped.data[:, 1])
        lut = np.asarray(perm)
        assert np.array_equal(lut[base.data.argmax(axis=1)], swapped.data.argmax(axis=1))

    def test_bad_active_slot(self):
        with pytest.raises(IdentityError):
            decode_logits(Tensor(np.zeros((1, 6))), make_bank(), active={9})


class TestArgmaxMask:
    def test_uniform_background(self):
        logits = Tensor(np.tile([1.0, 0.0, 0.0], (4, 1)))
        mask = argmax_mask(logits, (4, 4), 2)
        assert np.array_equal(mask.values, np.zeros((4, 4), np.uint8))

    def test_checkerboard_blocks(self):
        logits = np.zeros((4, 2))
        logits[[1, 2], 1] = 5.0
        mask = argmax_mask(Tensor(logits), (4, 4), 2)
        want = np.zeros((4, 4), np.uint8)
        want[0:2, 2:4] = 1
        want[2:4, 0:2] = 1
        assert np.array_equal(mask.values, want)

    def test_matches_scan_oracle(self):
        rng = np.random.default_rng(4)
        logits = rng.standard_normal((9, 5))
        mask = argmax_mask(Tensor(logits), (3, 3), 1)
        for p in range(9):
            best, bv = 0, -np.inf
            for s in range(5):
                if logits[p, s] > bv:
                    best, bv = s, logits[p, s]
            assert mask.values[p // 3, p % 3] == best

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            argmax_mask(Tensor(np.zeros((4, 3))), (6, 4), 2)


class TestMaskMap:
    def test_labels(self):
        m = MaskMap(np.array([[0, 2], [5, 2]], np.uint8))
        assert m.labels() == [2, 5]

    def test_permuted(self):
        m = MaskMap(np.array([[0, 1], [2, 1]], np.uint8))
        out = m.permuted([0, 2, 1])
        assert np.array_equal(out.values, [[0, 2], [1, 2]])
