"""Loss oracles: hand sums, closed-form Gaussian KL, FD gradients."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthcast.losses import (depth_loss, kl_gauss, mask_bce, mask_l2,
                              mask_loss, masked_l2)
from depthcast.model import GaussianParams
from depthcast.tensor import ShapeError, Tensor

from conftest import fd_gradient


def t4(rows, grad: bool = False) -> Tensor:
    a = np.asarray(rows, dtype=np.float64)
    return Tensor(a.reshape(1, 1, *a.shape), requires_grad=grad)


def gp(mu, sigma, grad: bool = False) -> GaussianParams:
    mu = np.asarray(mu, dtype=np.float64).reshape(1, 1, 1, -1)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(1, 1, 1, -1)
    return GaussianParams(Tensor(mu, requires_grad=grad),
                          Tensor(np.log(sigma), requires_grad=grad))


class TestMaskedL2:
    def test_hand_sum(self):
        # valid pixels (2, 4, 6): 1^2 + 0^2 + 2^2; the 9 under the hole is ignored
        lidar = t4([[2.0, 0.0], [4.0, 6.0]])
        dense = t4([[3.0, 9.0], [4.0, 8.0]])
        assert masked_l2(lidar, dense).item() == 5.0

    def test_exact_reconstruction_is_zero(self):
        lidar = t4([[2.0, 0.0], [4.0, 6.0]])
        dense = t4([[2.0, 123.45], [4.0, 6.0]])
        assert masked_l2(lidar, dense).item() == 0.0

    def test_all_invalid_is_zero(self):
        lidar = t4([[0.0, 0.0], [0.0, 0.0]])
        dense = t4([[1.0, 2.0], [3.0, 4.0]])
        assert masked_l2(lidar, dense).item() == 0.0

    def test_gradient_zero_at_holes(self):
        lidar = t4([[2.0, 0.0], [4.0, 6.0]])
        dense = t4([[3.0, 9.0], [4.0, 8.0]], grad=True)
        loss = masked_l2(lidar, dense)
        loss.backward()
        want = 2.0 * (dense.data - lidar.data) * (lidar.data > 0)
        np.testing.assert_array_equal(dense.grad, want)
        assert dense.grad[0, 0, 0, 1] == 0.0

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(3)
        lidar = Tensor(rng.uniform(0, 5, (2, 1, 3, 4)) *
                       (rng.random((2, 1, 3, 4)) < 0.6))
        dense = Tensor(rng.uniform(0, 5, (2, 1, 3, 4)), requires_grad=True)
        loss = masked_l2(lidar, dense)
        loss.backward()
        fd = fd_gradient(lambda: masked_l2(lidar, dense), dense)
        np.testing.assert_allclose(dense.grad, fd, rtol=1e-6, atol=1e-8)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            masked_l2(t4([[1.0]]), t4([[1.0, 2.0]]))

    def test_additive_over_frames(self):
        # summed losses let TBPTT's per-frame terms add up to the sequence loss
        rng = np.random.default_rng(4)
        la = Tensor(rng.uniform(0, 5, (1, 1, 3, 4)))
        lb = Tensor(rng.uniform(0, 5, (1, 1, 3, 4)))
        da = Tensor(rng.uniform(0, 5, (1, 1, 3, 4)))
        db = Tensor(rng.uniform(0, 5, (1, 1, 3, 4)))
        joint = masked_l2(Tensor(np.concatenate([la.data, lb.data])),
                          Tensor(np.concatenate([da.data, db.data])))
        split = masked_l2(la, da).item() + masked_l2(lb, db).item()
        assert joint.item() == pytest.approx(split, rel=1e-12)


class TestKlGauss:
    def test_identical_is_zero(self):
        q = gp([0.3, -1.2], [0.5, 2.0])
        p = gp([0.3, -1.2], [0.5, 2.0])
        assert kl_gauss(q, p).item() == 0.0

    def test_unit_shift(self):
        # KL(N(1,1) || N(0,1)) = 1/2
        assert kl_gauss(gp([1.0], [1.0]), gp([0.0], [1.0])).item() == pytest.approx(0.5, abs=1e-15)

    def test_double_sigma(self):
        # KL(N(0,4) || N(0,1)) = ln(1/2) + 2 - 1/2
        want = np.log(0.5) + 2.0 - 0.5
        got = kl_gauss(gp([0.0], [2.0]), gp([0.0], [1.0])).item()
        assert got == pytest.approx(want, rel=1e-15)
        assert got == pytest.approx(0.80685, abs=5e-6)

    def test_sums_over_cells(self):
        a = kl_gauss(gp([1.0], [1.0]), gp([0.0], [1.0])).item()
        b = kl_gauss(gp([0.0], [2.0]), gp([0.0], [1.0])).item()
        both = kl_gauss(gp([1.0, 0.0], [1.0, 2.0]),
                        gp([0.0, 0.0], [1.0, 1.0])).item()
        assert both == pytest.approx(a + b, rel=1e-14)

    def test_matches_closed_form_on_random_draws(self):
        # graph-built KL vs direct numpy formula, elementwise over 1000 draws
        rng = np.random.default_rng(11)
        n = 1000
        mu_q, mu_p = rng.normal(0, 3, n), rng.normal(0, 3, n)
        sg_q, sg_p = rng.uniform(0.05, 5, n), rng.uniform(0.05, 5, n)
        want = (np.log(sg_p / sg_q) +
                (sg_q ** 2 + (mu_q - mu_p) ** 2) / (2 * sg_p ** 2) - 0.5)
        for i in range(n):
            got = kl_gauss(gp([mu_q[i]], [sg_q[i]]), gp([mu_p[i]], [sg_p[i]])).item()
            assert abs(got - want[i]) <= 1e-10 * max(abs(want[i]), 1e-30), i

    @given(st.floats(-10, 10), st.floats(-10, 10),
           st.floats(-3, 2), st.floats(-3, 2))
    @settings(max_examples=200, deadline=None)
    def test_nonnegative(self, mu_q, mu_p, ls_q, ls_p):
        q = GaussianParams(Tensor(np.full((1, 1, 1, 1), mu_q)),
                           Tensor(np.full((1, 1, 1, 1), ls_q)))
        p = GaussianParams(Tensor(np.full((1, 1, 1, 1), mu_p)),
                           Tensor(np.full((1, 1, 1, 1), ls_p)))
        assert kl_gauss(q, p).item() >= -1e-12

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(5)
        q = GaussianParams(Tensor(rng.normal(0, 1, (1, 2, 2, 3)), requires_grad=True),
                           Tensor(rng.normal(0, 0.5, (1, 2, 2, 3)), requires_grad=True))
        p = GaussianParams(Tensor(rng.normal(0, 1, (1, 2, 2, 3)), requires_grad=True),
                           Tensor(rng.normal(0, 0.5, (1, 2, 2, 3)), requires_grad=True))
        leaves = [q.mu, q.log_sigma, p.mu, p.log_sigma]
        kl_gauss(q, p).backward()
        for leaf in leaves:
            fd = fd_gradient(lambda: kl_gauss(q, p), leaf)
            np.testing.assert_allclose(leaf.grad, fd, rtol=1e-6, atol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            kl_gauss(gp([0.0], [1.0]), gp([0.0, 0.0], [1.0, 1.0]))


class TestMaskL2:
    def test_perfect_is_zero(self):
        gt = t4([[1.0, 0.0], [0.0, 1.0]])
        assert mask_l2(gt, t4([[1.0, 0.0], [0.0, 1.0]])).item() == 0.0

    def test_hand_sum(self):
        gt = t4([[1.0, 0.0], [0.0, 1.0]])
        pred = t4([[0.5, 0.5], [0.5, 0.5]])
        assert mask_l2(gt, pred).item() == pytest.approx(1.0, rel=1e-15)

    def test_gradient_is_two_diff(self):
        rng = np.random.default_rng(6)
        gt = Tensor((rng.random((1, 1, 3, 4)) < 0.5).astype(float))
        pred = Tensor(rng.random((1, 1, 3, 4)), requires_grad=True)
        mask_l2(gt, pred).backward()
        np.testing.assert_allclose(pred.grad, 2.0 * (pred.data - gt.data),
                                   rtol=1e-12, atol=0)
        fd = fd_gradient(lambda: mask_l2(gt, pred), pred)
        np.testing.assert_allclose(pred.grad, fd, rtol=1e-6, atol=1e-9)


class TestMaskBce:
    def test_hand_value(self):
        # p = 1/2 everywhere: each pixel contributes ln 2
        gt = t4([[1.0, 0.0], [0.0, 1.0]])
        pred = t4([[0.5, 0.5], [0.5, 0.5]])
        assert mask_bce(gt, pred).item() == pytest.approx(4 * np.log(2), rel=1e-12)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(7)
        gt = Tensor((rng.random((1, 1, 3, 4)) < 0.5).astype(float))
        pred = Tensor(rng.uniform(0.05, 0.95, (1, 1, 3, 4)), requires_grad=True)
        mask_bce(gt, pred).backward()
        want = (pred.data - gt.data) / (pred.data * (1 - pred.data))
        np.testing.assert_allclose(pred.grad, want, rtol=1e-12)
        fd = fd_gradient(lambda: mask_bce(gt, pred), pred, h=1e-6)
        np.testing.assert_allclose(pred.grad, fd, rtol=1e-5, atol=1e-8)

    def test_saturated_probabilities_stay_finite(self):
        gt = t4([[1.0, 0.0]])
        pred = t4([[1.0, 0.0]], grad=True)  # exactly at the rails; clip keeps logs finite
        v = mask_bce(gt, pred)
        assert np.isfinite(v.item())
        v.backward()
        assert np.all(np.isfinite(pred.grad))


class TestBreakdowns:
    def test_depth_loss_combines_oracles(self):
        lidar = t4([[2.0, 0.0], [4.0, 6.0]])
        dense = t4([[3.0, 9.0], [4.0, 8.0]])
        q, p = gp([1.0], [1.0]), gp([0.0], [1.0])
        lb = depth_loss(lidar, dense, q, p, kl_weight=1.0)
        assert lb.recon.item() == 5.0
        assert lb.kl.item() == pytest.approx(0.5, abs=1e-15)
        assert lb.total.item() == pytest.approx(5.5, rel=1e-15)

    def test_zero_weight_drops_kl(self):
        lidar = t4([[2.0, 0.0]])
        dense = t4([[3.0, 1.0]])
        q, p = gp([1.0], [2.0]), gp([0.0], [1.0])
        lb = depth_loss(lidar, dense, q, p, kl_weight=0.0)
        assert lb.total.item() == lb.recon.item()

    def test_perfect_everything_is_zero(self):
        lidar = t4([[2.0, 3.0]])
        q = gp([0.7], [1.3])
        lb = depth_loss(lidar, lidar, q, gp([0.7], [1.3]), kl_weight=1.0)
        assert lb.total.item() == 0.0

    def test_mask_loss_l2_and_bce_routes(self):
        gt = t4([[1.0, 0.0], [0.0, 1.0]])
        pred = t4([[0.5, 0.5], [0.5, 0.5]])
        q, p = gp([0.0], [1.0]), gp([0.0], [1.0])
        l2 = mask_loss(gt, pred, q, p, kl_weight=1.0)
        assert l2.recon.item() == pytest.approx(1.0, rel=1e-15)
        assert l2.total.item() == pytest.approx(1.0, rel=1e-15)  # identical Gaussians
        bce = mask_loss(gt, pred, q, p, kl_weight=1.0, use_bce=True)
        assert bce.recon.item() == pytest.approx(4 * np.log(2), rel=1e-12)

    def test_values_dict(self):
        lidar = t4([[2.0, 0.0]])
        lb = depth_loss(lidar, lidar, gp([0.0], [1.0]), gp([0.0], [1.0]))
        assert set(lb.values()) == {"total", "recon", "kl"}
