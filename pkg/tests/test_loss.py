import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from multisat.loss import (
    LossConfig,
    LossInputError,
    cosine_similarity_matrix,
    loss_oracle,
    multimodal_nce,
    ntxent,
)


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return torch.from_numpy(x / np.linalg.norm(x, axis=1, keepdims=True))


def ntxent_oracle(z1, z2, tau):
    z = np.concatenate([np.asarray(z1), np.asarray(z2)]).tolist()
    n = len(z1)

    def sim(u, v):
        return sum(a * b for a, b in zip(u, v)) / math.sqrt(sum(a * a for a in u) * sum(b * b for b in v))

    total = 0.0
    for i in range(2 * n):
        pos = (i + n) % (2 * n)
        den = sum(math.exp(sim(z[i], z[k]) / tau) for k in range(2 * n) if k != i)
        total += -math.log(math.exp(sim(z[i], z[pos]) / tau) / den)
    return total / (2 * n)


class TestCosine:
    def test_diagonal_is_one(self):
        a = unit_rows(np.random.default_rng(0), 5, 4)
        assert torch.allclose(torch.diagonal(cosine_similarity_matrix(a, a)), torch.ones(5, dtype=a.dtype))

    def test_orthogonal_rows(self):
        a = torch.eye(3, dtype=torch.float64)
        s = cosine_similarity_matrix(a, a)
        assert torch.equal(s, torch.eye(3, dtype=torch.float64))

    def test_matches_double_loop(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((6, 5)), rng.standard_normal((4, 5))
        got = cosine_similarity_matrix(torch.from_numpy(a), torch.from_numpy(b)).numpy()
        for i in range(6):
            for j in range(4):
                ref = a[i] @ b[j] / (np.linalg.norm(a[i]) * np.linalg.norm(b[j]))
                assert abs(got[i, j] - ref) < 1e-6

    def test_zero_row_rejected(self):
        with pytest.raises(LossInputError):
            cosine_similarity_matrix(torch.zeros(1, 3), torch.ones(1, 3))


class TestMultimodalNCE:
    def test_single_pair_is_zero(self):
        x = unit_rows(np.random.default_rng(2), 1, 8)
        y = unit_rows(np.random.default_rng(3), 1, 8)
        loss, per = multimodal_nce(x, y)
        assert abs(float(loss)) <= 1e-12
        assert loss_oracle(x, y) == 0.0

    def test_two_pair_closed_form(self):
        # x1 = y1 = e1, x2 = y2 = e2, temperature 1: l_1xy = ln(2 + e) - 1
        x = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        _, per = multimodal_nce(x, x.clone(), LossConfig(temperature=1.0))
        expected = math.log(2 + math.e) - 1
        assert abs(expected - 0.55145) < 1e-5
        assert abs(float(per[0]) - 2 * expected) < 1e-12
        assert abs(float(per[0]) - 1.102889) < 1e-6

    @pytest.mark.parametrize("tau", [0.05, 0.1, 1.0])
    @pytest.mark.parametrize("reduction", ["mean", "sum"])
    def test_matches_oracle(self, tau, reduction):
        rng = np.random.default_rng(4)
        cfg = LossConfig(tau, reduction)
        for _ in range(10):
            x, y = unit_rows(rng, 8, 16), unit_rows(rng, 8, 16)
            loss, _ = multimodal_nce(x, y, cfg)
            assert abs(float(loss) - loss_oracle(x, y, cfg)) <= 1e-9

    def test_swap_symmetry(self):
        rng = np.random.default_rng(5)
        x, y = unit_rows(rng, 7, 5), unit_rows(rng, 7, 5)
        a, pa = multimodal_nce(x, y)
        b, pb = multimodal_nce(y, x)
        assert abs(float(a) - float(b)) <= 1e-12
        assert torch.allclose(pa, pb, atol=1e-12, rtol=0)

    def test_decreasing_positive_similarity_raises_loss(self):
        rng = np.random.default_rng(6)
        x = unit_rows(rng, 4, 6)
        y = x.clone() + 0.1 * unit_rows(rng, 4, 6)
        base = loss_oracle(x, y)
        y2 = y.clone()
        y2[0] = -x[0] + 0.5 * y[0]
        # only the first positive similarity is changed in direction; compare pair 0's forward term
        _, per = multimodal_nce(x, y)
        _, per2 = multimodal_nce(x, y2)
        assert float(per2[0]) > float(per[0])
        assert loss_oracle(x, y2) > base

    def test_nonnegative(self):
        rng = np.random.default_rng(7)
        for n in range(2, 6):
            _, per = multimodal_nce(unit_rows(rng, n, 3), unit_rows(rng, n, 3))
            assert (per > 0).all()

    @pytest.mark.parametrize(
        "x,y,cfg",
        [
            (torch.zeros(0, 3), torch.zeros(0, 3), LossConfig()),
            (torch.ones(2, 3), torch.ones(3, 3), LossConfig()),
            (torch.tensor([[float("nan"), 1.0]]), torch.ones(1, 2), LossConfig()),
        ],
    )
    def test_bad_inputs(self, x, y, cfg):
        with pytest.raises(LossInputError):
            multimodal_nce(x, y, cfg)

    def test_bad_temperature(self):
        with pytest.raises(LossInputError):
            LossConfig(temperature=0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 8), st.integers(2, 6), st.integers(0, 10_000), st.floats(0.1, 10.0))
    def test_row_rescaling_invariance(self, n, d, seed, alpha):
        rng = np.random.default_rng(seed)
        x, y = unit_rows(rng, n, d), unit_rows(rng, n, d)
        scale = torch.from_numpy(rng.uniform(0.1, 10.0, (n, 1)))
        a, _ = multimodal_nce(x, y)
        b, _ = multimodal_nce(x * scale * alpha, y)
        assert abs(float(a) - float(b)) < 1e-10

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 8), st.integers(2, 6), st.integers(0, 10_000))
    def test_permutation_equivariance(self, n, d, seed):
        rng = np.random.default_rng(seed)
        x, y = unit_rows(rng, n, d), unit_rows(rng, n, d)
        perm = torch.from_numpy(rng.permutation(n))
        a, pa = multimodal_nce(x, y)
        b, pb = multimodal_nce(x[perm], y[perm])
        assert torch.allclose(pb, pa[perm], atol=1e-12, rtol=0)
        assert abs(float(a) - float(b)) < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        for _ in range(5):
            x = unit_rows(rng, 6, 5).requires_grad_(True)
            y = unit_rows(rng, 6, 5).requires_grad_(True)
            assert torch.autograd.gradcheck(lambda a, b: multimodal_nce(a, b)[0], (x, y), eps=1e-5, atol=1e-7)


class TestNTXent:
    def test_single_image_is_zero(self):
        z = unit_rows(np.random.default_rng(9), 1, 4)
        assert abs(float(ntxent(z, z.clone()))) < 1e-12

    def test_matches_oracle(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            z1, z2 = unit_rows(rng, 6, 8), unit_rows(rng, 6, 8)
            assert abs(float(ntxent(z1, z2)) - ntxent_oracle(z1, z2, 0.1)) <= 1e-9

    def test_same_per_anchor_form_as_multimodal(self):
        # Both losses sum the same 2N anchor terms; NT-Xent averages over 2N anchors,
        # the cross-modal loss over N pairs of two terms each.
        rng = np.random.default_rng(11)
        z1, z2 = unit_rows(rng, 5, 7), unit_rows(rng, 5, 7)
        mm, _ = multimodal_nce(z1, z2, LossConfig(0.1, "mean"))
        assert abs(float(ntxent(z1, z2)) - float(mm) / 2) < 1e-12
