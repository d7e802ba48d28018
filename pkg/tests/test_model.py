"""Model assembly: frame containers, config validation, the recurrence,
composition, rollout, and checkpoint round trips."""

import numpy as np
import pytest

from depthcast import tensor as T
from depthcast.model import (FrameBatch, FrameError, GaussianParams,
                             ModelConfig, NextFrameResult, SparseDepthFrame,
                             VrnnModel, compose, load_checkpoint, rollout,
                             save_checkpoint)
from depthcast.tensor import ShapeError, Tensor

from conftest import fd_gradient


def tiny_config(**kw):
    base = dict(height=16, width=32, sparse_channels=(4,), sparse_kernels=(3,),
                stage_channels=(8, 8), blocks_per_stage=1, gn_groups=4,
                latent_channels=8, rnn_hidden=8, predictor_hidden=8,
                max_range=50.0)
    base.update(kw)
    return ModelConfig(**base)


def random_frame_batch(rng, batch=1, h=16, w=32):
    mask = (rng.random((batch, 1, h, w)) < 0.3).astype(float)
    depth = rng.uniform(1.0, 40.0, size=(batch, 1, h, w)) * mask
    return FrameBatch(depth, mask)


class TestFrames:
    def test_frame_invariant_enforced(self):
        with pytest.raises(FrameError):
            SparseDepthFrame(np.array([[1.0, 0.0]]), np.array([[1.0, 1.0]]))
        with pytest.raises(FrameError):
            SparseDepthFrame(np.array([[1.0, 2.0]]), np.array([[1.0, 0.0]]))
        with pytest.raises(FrameError):
            SparseDepthFrame(np.array([[1.0, 0.5]]), np.array([[1.0, 0.5]]))

    def test_batch_round_trip(self):
        rng = np.random.default_rng(0)
        fb = random_frame_batch(rng, batch=3)
        frames = fb.to_frames()
        back = FrameBatch.from_frames(frames)
        assert np.array_equal(back.depth, fb.depth)
        assert np.array_equal(back.mask, fb.mask)

    def test_replicate(self):
        rng = np.random.default_rng(1)
        f = random_frame_batch(rng).to_frames()[0]
        fb = FrameBatch.replicate(f, 4)
        assert fb.batch == 4
        assert np.array_equal(fb.depth[2, 0], f.depth)


class TestConfig:
    def test_resolution_must_match_downsampling(self):
        with pytest.raises(ShapeError):
            tiny_config(height=18)  # not divisible by 4

    def test_last_stage_must_equal_latent(self):
        with pytest.raises(ShapeError):
            tiny_config(latent_channels=16)

    def test_group_divisibility(self):
        with pytest.raises(ShapeError):
            tiny_config(stage_channels=(6, 8), gn_groups=4)

    def test_round_trip_dict(self):
        cfg = tiny_config()
        clone = ModelConfig.from_dict(cfg.to_dict())
        assert clone == cfg

    def test_latent_grid(self):
        assert tiny_config().latent_grid == (4, 8)


class TestRecurrence:
    def test_fresh_model_prior_is_unit_gaussian(self):
        # zero-initialized heads must emit mu=0, log_sigma=0 exactly
        rng = np.random.default_rng(0)
        model = VrnnModel(tiny_config(), "depth", rng)
        fb = random_frame_batch(rng)
        h, _, _ = model.encode(fb)
        params, _ = model.prior_step(h, model.init_state(1).prior)
        assert np.all(params.mu.data == 0.0)
        assert np.all(params.log_sigma.data == 0.0)

    def test_train_mode_requires_target(self):
        rng = np.random.default_rng(0)
        model = VrnnModel(tiny_config(), "depth", rng)
        with pytest.raises(ValueError):
            model.next_frame(random_frame_batch(rng), None, mode="train")

    def test_output_ranges(self):
        rng = np.random.default_rng(2)
        cfg = tiny_config()
        fb = random_frame_batch(rng)
        for head, lo, hi in (("depth", 0.0, cfg.max_range), ("mask", 0.0, 1.0)):
            model = VrnnModel(cfg, head, rng)
            res = model.next_frame(fb, None, mode="infer", rng=rng)
            assert res.prediction.data.min() >= lo
            assert res.prediction.data.max() < hi

    def test_state_threads_through_steps(self):
        rng = np.random.default_rng(3)
        model = VrnnModel(tiny_config(), "depth", rng)
        fb = random_frame_batch(rng)
        r1 = model.next_frame(fb, None, mode="infer", rng=rng)
        r2 = model.next_frame(fb, None, state=r1.state, mode="infer", rng=rng)
        assert not np.array_equal(r1.state.predictor.h.data,
                                  r2.state.predictor.h.data)

    def test_sample_latent_reparameterization(self):
        rng = np.random.default_rng(4)
        mu = Tensor(rng.normal(size=(2, 3, 2, 2)), requires_grad=True)
        ls = Tensor(rng.normal(scale=0.3, size=(2, 3, 2, 2)), requires_grad=True)
        model = VrnnModel(tiny_config(), "depth", rng)

        # force_sigma_zero returns the mean itself
        z0 = model.sample_latent(GaussianParams(mu, ls),
                                 np.random.default_rng(0), force_sigma_zero=True)
        assert z0 is mu

        # gradients flow to mu and log_sigma through a sampled z
        eps_rng = np.random.default_rng(5)
        z = model.sample_latent(GaussianParams(mu, ls), eps_rng)
        T.sum_all(T.mul(z, z)).backward()
        assert mu.grad is not None and ls.grad is not None

        # z = mu + exp(ls) * eps, checked against the drawn eps
        eps = (z.data - mu.data) / np.exp(ls.data)
        z2 = mu.data + np.exp(ls.data) * eps
        assert np.allclose(z.data, z2, rtol=1e-12)

    def test_invalid_pixel_invariance_end_to_end(self):
        # garbage depth at masked-out pixels must not change any output bit
        rng = np.random.default_rng(6)
        model = VrnnModel(tiny_config(), "depth", rng)
        fb = random_frame_batch(rng)
        r1 = model.next_frame(fb, None, mode="infer", rng=np.random.default_rng(9))
        garbage = fb.depth + (1 - fb.mask) * 1e6
        fb2 = FrameBatch.__new__(FrameBatch)  # bypass the invariant on purpose
        fb2.depth, fb2.mask = garbage, fb.mask
        r2 = model.next_frame(fb2, None, mode="infer", rng=np.random.default_rng(9))
        assert np.array_equal(r1.prediction.data, r2.prediction.data)


class TestModelGradient:
    def test_whole_step_gradient_spot_check(self):
        # full train-mode step: loss gradient at sampled weights matches FD
        rng = np.random.default_rng(7)
        model = VrnnModel(tiny_config(), "depth", rng)
        prev = random_frame_batch(rng)
        target = random_frame_batch(rng)
        eps_seed = 11

        # nudge the zero-initialized layers off exact zero: the Gaussian heads
        # so the KL term is active, the output conv so gradient flows through
        # its feature channels and not only the pass-through tap
        params = model.named_parameters()
        head_rng = np.random.default_rng(13)
        for n in ("prior.head.kernel", "prior.head.bias",
                  "posterior.head.kernel", "posterior.head.bias",
                  "dec.head.conv2.kernel"):
            params[n].data += head_rng.normal(0, 0.01, size=params[n].shape)

        def run():
            from depthcast.losses import depth_loss
            res = model.next_frame(prev, target, None,
                                   np.random.default_rng(eps_seed), mode="train")
            return depth_loss(Tensor(target.depth), res.prediction,
                              res.posterior_params, res.prior_params,
                              kl_weight=0.1).total

        loss = run()
        names = ["enc.sparse0.kernel", "enc.stage0.down.kernel",
                 "prior.rnn.kernel", "posterior.head.kernel",
                 "predictor.rnn.kernel", "dec.stage1.conv.kernel",
                 "dec.head.conv2.bias"]
        loss.backward(retain=[params[n] for n in names])
        for name in names:
            leaf = params[name]
            got = leaf.grad
            assert got is not None, name
            flat = np.argsort(-np.abs(got), axis=None)[:3]
            from depthcast.tensor import finite_diff_at

            def f(arr):
                saved = leaf.data
                leaf.data = arr
                try:
                    return run().item()
                finally:
                    leaf.data = saved

            coords = [np.unravel_index(i, got.shape) for i in flat]
            # central differences near a relu kink are garbage at any single
            # step size, so accept the best h from a short ladder
            best = {idx: np.inf for idx in coords}
            for h in (1e-5, 3e-6, 1e-6):
                fd = finite_diff_at(f, leaf.data, coords, h=h)
                for idx, want in fd.items():
                    denom = max(abs(want), 1e-4)
                    rel = abs(got[idx] - want) / denom
                    best[idx] = min(best[idx], rel)
            for idx, rel in best.items():
                assert rel < 1e-3, (name, idx, rel)


class TestCompose:
    def test_threshold_and_zero_guard(self):
        dense = np.array([[[[5.0, 7.0, 0.0, 3.0]]]])
        prob = np.array([[[[0.9, 0.4, 0.8, 0.5]]]])
        fb = compose(dense, prob, threshold=0.5)
        assert np.array_equal(fb.mask, [[[[1, 0, 0, 1]]]])
        assert np.array_equal(fb.depth, [[[[5.0, 0, 0, 3.0]]]])

    def test_composed_satisfies_frame_invariant(self):
        rng = np.random.default_rng(8)
        dense = rng.uniform(0, 10, size=(2, 1, 4, 4))
        prob = rng.random((2, 1, 4, 4))
        fb = compose(dense, prob)  # FrameBatch constructor re-validates
        assert np.all((fb.depth > 0) == (fb.mask == 1.0))

    def test_threshold_bounds(self):
        with pytest.raises(ValueError):
            compose(np.ones((1, 1, 2, 2)), np.ones((1, 1, 2, 2)), threshold=1.0)


class TestRollout:
    def _models(self, seed=0):
        rng = np.random.default_rng(seed)
        cfg = tiny_config()
        return VrnnModel(cfg, "depth", rng), VrnnModel(cfg, "mask", rng)

    def _warmup(self, rng, n=3, batch=2):
        return [random_frame_batch(rng, batch=batch) for _ in range(n)]

    def test_step_count_and_shapes(self):
        dm, mm = self._models()
        rng = np.random.default_rng(1)
        rr = rollout(dm, mm, self._warmup(rng), 4, rng)
        assert len(rr.steps) == 4
        assert rr.steps[0].dense.shape == (2, 1, 16, 32)
        assert isinstance(rr.steps[0].composed, FrameBatch)

    def test_empty_warmup_rejected(self):
        dm, mm = self._models()
        with pytest.raises(ValueError):
            rollout(dm, mm, [], 2, np.random.default_rng(0))

    def test_deterministic_under_seed(self):
        dm, mm = self._models()
        rng = np.random.default_rng(2)
        w = self._warmup(rng)
        a = rollout(dm, mm, w, 3, np.random.default_rng(77))
        b = rollout(dm, mm, w, 3, np.random.default_rng(77))
        for sa, sb in zip(a.steps, b.steps):
            assert np.array_equal(sa.dense, sb.dense)
            assert np.array_equal(sa.composed.depth, sb.composed.depth)

    def test_sigma_zero_collapses_samples(self):
        dm, mm = self._models()
        rng = np.random.default_rng(3)
        f = random_frame_batch(rng, batch=1).to_frames()[0]
        w = [FrameBatch.replicate(f, 3) for _ in range(3)]
        rr = rollout(dm, mm, w, 2, np.random.default_rng(5),
                     force_sigma_zero=True)
        for step in rr.steps:
            assert np.array_equal(step.dense[0], step.dense[1])
            assert np.array_equal(step.dense[1], step.dense[2])

    def test_rollout_leaves_no_grad_tape(self):
        dm, mm = self._models()
        rng = np.random.default_rng(4)
        rr = rollout(dm, mm, self._warmup(rng), 2, rng)
        assert rr.depth_state.predictor.h._parents == ()


class TestCheckpoint:
    def test_round_trip_bitexact(self, tmp_path):
        rng = np.random.default_rng(0)
        cfg = tiny_config()
        dm = VrnnModel(cfg, "depth", rng)
        mm = VrnnModel(cfg, "mask", rng)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {"depth": dm, "mask": mm}, meta={"note": "t"})
        models, meta, opt = load_checkpoint(path)
        assert meta["note"] == "t"
        assert opt == {}
        for name, model in (("depth", dm), ("mask", mm)):
            for k, v in model.state_dict().items():
                assert np.array_equal(models[name].state_dict()[k], v), k

    def test_deterministic_bytes(self, tmp_path):
        rng = np.random.default_rng(1)
        dm = VrnnModel(tiny_config(), "depth", rng)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, {"depth": dm})
        save_checkpoint(p2, {"depth": dm})
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_wrong_magic(self, tmp_path):
        p = tmp_path / "bogus.ckpt"
        p.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError):
            load_checkpoint(p)

    def test_optimizer_state_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        dm = VrnnModel(tiny_config(), "depth", rng)
        opt_state = {"t": np.array([3.0]),
                     "m/enc.sparse0.kernel": rng.normal(size=(4, 1, 3, 3))}
        p = tmp_path / "with_opt.ckpt"
        save_checkpoint(p, {"depth": dm}, optimizer_state=opt_state)
        _, _, loaded = load_checkpoint(p)
        assert np.array_equal(loaded["t"], opt_state["t"])
        assert np.array_equal(loaded["m/enc.sparse0.kernel"],
                              opt_state["m/enc.sparse0.kernel"])

    def test_load_rejects_shape_mismatch(self, tmp_path):
        rng = np.random.default_rng(3)
        dm = VrnnModel(tiny_config(), "depth", rng)
        weights = dm.state_dict()
        weights["enc.sparse0.kernel"] = np.zeros((1, 1, 3, 3))
        with pytest.raises(ShapeError):
            dm.load_state_dict(weights)
