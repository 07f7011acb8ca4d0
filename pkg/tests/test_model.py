import numpy as np
import pytest
import torch

from fgsty.core import seeded_rng
from fgsty.model import (
    SegModel,
    TrainingDiverged,
    bce_logits_loss,
    bce_loss,
    bce_loss_torch,
    load_checkpoint,
    make_optimizer,
    new_model,
    save_checkpoint,
    threshold_predict,
    train_step,
)


def micro_model(seed=0, size=8, dtype=torch.float64):
    """Two-level model, small enough for finite differences."""
    return new_model(seeded_rng(seed), resolution=size, widths=(4, 8), dtype=dtype)


def autograd_flat(model, loss_fn):
    model.zero_grad()
    loss = loss_fn()
    loss.backward()
    return np.concatenate(
        [
            (p.grad if p.grad is not None else torch.zeros_like(p)).numpy().astype(np.float64).ravel()
            for p in model.parameters()
        ]
    )


def finite_difference_flat(model, loss_fn, probe, h=1e-6):
    """Central differences on the flat parameter vector (oracle)."""
    base = model.parameters_flat()
    grads = {}
    for i in probe:
        step = h * max(1.0, abs(base[i]))
        for sign, key in ((1.0, "plus"), (-1.0, "minus")):
            vec = base.copy()
            vec[i] += sign * step
            model.set_parameters_flat(vec)
            with torch.no_grad():
                grads.setdefault(i, {})[key] = float(loss_fn())
        grads[i] = (grads[i]["plus"] - grads[i]["minus"]) / (2 * step)
    model.set_parameters_flat(base)
    return grads


class TestForward:
    def test_zero_head_outputs_half(self):
        model = micro_model()
        with torch.no_grad():
            model.head.weight.zero_()
            model.head.bias.zero_()
        prob = model.predict(np.random.default_rng(0).random((8, 8, 3)).astype(np.float32))
        assert np.allclose(prob, 0.5)

    def test_deterministic_forward(self, rng):
        model = new_model(seeded_rng(1), resolution=32)
        img = rng.random((32, 32, 3)).astype(np.float32)
        assert np.array_equal(model.predict(img), model.predict(img))

    def test_shape_and_finiteness_32(self, rng):
        model = new_model(seeded_rng(2), resolution=32)
        out = model.predict(rng.random((32, 32, 3)).astype(np.float32))
        assert out.shape == (32, 32)
        assert np.all(np.isfinite(out))
        assert out.min() > 0.0 and out.max() < 1.0

    def test_indivisible_resolution_rejected_at_construction(self):
        with pytest.raises(ValueError):
            SegModel(widths=(16, 32, 64, 128), resolution=30)

    def test_wrong_input_size_rejected(self, rng):
        model = new_model(seeded_rng(3), resolution=32)
        with pytest.raises(ValueError):
            model.predict(rng.random((64, 64, 3)).astype(np.float32))


class TestBceLoss:
    def test_perfect_prediction_tiny_loss(self):
        y = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert bce_loss(y, y) < 1e-5

    def test_half_everywhere_is_ln2(self):
        p = np.full((4, 4), 0.5)
        y = np.zeros((4, 4))
        assert bce_loss(p, y) == pytest.approx(np.log(2.0), abs=1e-9)

    def test_two_pixel_hand_value(self):
        p = np.array([[0.9, 0.2]])
        y = np.array([[1.0, 0.0]])
        expected = (-np.log(0.9) - np.log(0.8)) / 2  # ~0.1643
        assert bce_loss(p, y) == pytest.approx(expected, abs=1e-9)
        assert expected == pytest.approx(0.1643, abs=5e-5)

    def test_all_false_pixel_mask_gives_zero(self):
        p = np.full((3, 3), 0.2)
        y = np.ones((3, 3))
        assert bce_loss(p, y, pixel_mask=np.zeros((3, 3), bool)) == 0.0

    def test_pixel_mask_restricts_mean(self):
        p = np.array([[0.9, 0.5]])
        y = np.array([[1.0, 1.0]])
        m = np.array([[True, False]])
        assert bce_loss(p, y, pixel_mask=m) == pytest.approx(-np.log(0.9), abs=1e-9)

    def test_masked_zero_gradient(self):
        pred = torch.full((1, 1, 2, 2), 0.3, dtype=torch.float64, requires_grad=True)
        target = torch.ones((1, 1, 2, 2), dtype=torch.float64)
        mask = torch.zeros((1, 1, 2, 2), dtype=torch.float64)
        loss = bce_loss_torch(pred, target, mask)
        loss.backward()
        assert loss.item() == 0.0
        assert torch.all(pred.grad == 0)


class TestGradients:
    def test_finite_difference_check_micro_model(self, rng):
        # checks the loss actually optimized by train_step (logits path)
        model = micro_model(seed=5)
        img = rng.random((2, 8, 8, 3))
        target = torch.from_numpy((rng.random((2, 1, 8, 8)) < 0.5).astype(np.float64))
        x = model.to_tensor(img)

        def loss_fn():
            return bce_logits_loss(model.forward_raw(x)[0], target)

        auto = autograd_flat(model, loss_fn)
        probe = rng.choice(auto.size, size=100, replace=False)
        fd = finite_difference_flat(model, loss_fn, probe)
        for i, g_fd in fd.items():
            denom = max(abs(g_fd), abs(auto[i]), 1e-8)
            assert abs(g_fd - auto[i]) / denom < 1e-3

    def test_logits_loss_matches_probability_loss_midrange(self, rng):
        logits = torch.from_numpy(rng.normal(0, 2, (4, 4)))
        target = torch.from_numpy((rng.random((4, 4)) < 0.5).astype(np.float64))
        a = bce_logits_loss(logits, target)
        b = bce_loss_torch(torch.sigmoid(logits), target)
        assert torch.allclose(a, b, rtol=1e-10)


class TestTrainStep:
    def test_zero_lr_leaves_parameters(self, rng):
        model = micro_model(seed=6)
        opt = make_optimizer(model, 0.0)
        before = model.parameters_flat()
        batch = [(rng.random((8, 8, 3)).astype(np.float32), rng.random((8, 8)) < 0.5)]
        train_step(model, batch, opt)
        assert np.array_equal(before, model.parameters_flat())

    def test_loss_is_pre_step_value(self, rng):
        model = micro_model(seed=7)
        opt = make_optimizer(model, 1e-2)
        img = rng.random((8, 8, 3)).astype(np.float32)
        mask = rng.random((8, 8)) < 0.5
        with torch.no_grad():
            expected = bce_loss(model.predict(img), mask.astype(np.float64))
        got = train_step(model, [(img, mask)], opt)
        assert got == pytest.approx(expected, rel=1e-5)

    def test_empty_batch_rejected(self):
        model = micro_model()
        with pytest.raises(ValueError):
            train_step(model, [], make_optimizer(model, 1e-3))

    def test_non_finite_loss_aborts(self, rng):
        model = micro_model(seed=8)
        bad = model.parameters_flat()
        bad[0] = np.nan
        model.set_parameters_flat(bad)
        batch = [(rng.random((8, 8, 3)).astype(np.float32), rng.random((8, 8)) < 0.5)]
        with pytest.raises(TrainingDiverged):
            train_step(model, batch, make_optimizer(model, 1e-3))

    def test_overfit_single_sample(self):
        # smoke-training oracle: 200 steps on one sample reaches mIoU > 0.95
        from fgsty.metrics import miou

        rng = seeded_rng(11)
        img = rng.uniform(0.4, 0.6, (32, 32, 3)).astype(np.float32)
        mask = np.zeros((32, 32), bool)
        mask[8:24, 8:24] = True
        img[mask] = rng.uniform(0.7, 0.9, (mask.sum(), 3))
        img = np.clip(img, 0, 1)
        model = new_model(seeded_rng(12), resolution=32)
        opt = make_optimizer(model, 2e-3)
        for _ in range(200):
            train_step(model, [(img, mask)], opt)
        pred = threshold_predict(model, img, 0.5)
        assert miou(pred, mask).miou > 0.95

    def test_determinism_of_training(self, rng):
        imgs = [rng.random((8, 8, 3)).astype(np.float32) for _ in range(4)]
        masks = [rng.random((8, 8)) < 0.5 for _ in range(4)]

        def trained():
            model = micro_model(seed=9, dtype=torch.float32)
            opt = make_optimizer(model, 1e-3)
            for i in range(10):
                batch = [(imgs[i % 4], masks[i % 4]), (imgs[(i + 1) % 4], masks[(i + 1) % 4])]
                train_step(model, batch, opt)
            return model.parameters_flat()

        assert np.array_equal(trained(), trained())

    def test_loss_decreases_on_separable_toy(self):
        rng = seeded_rng(13)
        img = np.zeros((16, 16, 3), dtype=np.float32)
        mask = np.zeros((16, 16), bool)
        mask[4:12, 4:12] = True
        img[mask] = (0.9, 0.2, 0.2)
        img[~mask] = (0.2, 0.2, 0.9)
        model = new_model(seeded_rng(14), resolution=16, widths=(8, 16))
        opt = make_optimizer(model, 1e-3)
        losses = [train_step(model, [(img, mask)], opt) for _ in range(50)]
        for i in range(10):
            assert losses[i + 1] < losses[i]
        assert losses[-1] < losses[0]


class TestThresholdPredict:
    def test_exactly_half_is_background_at_half(self, rng):
        model = micro_model()
        with torch.no_grad():
            model.head.weight.zero_()
            model.head.bias.zero_()
        img = rng.random((8, 8, 3)).astype(np.float32)
        assert not threshold_predict(model, img, 0.5).any()

    def test_monotone_in_threshold(self, rng):
        model = micro_model(seed=15)
        img = rng.random((8, 8, 3)).astype(np.float32)
        low = threshold_predict(model, img, 0.3)
        high = threshold_predict(model, img, 0.7)
        assert not (high & ~low).any()

    def test_threshold_validated(self, rng):
        model = micro_model()
        img = rng.random((8, 8, 3)).astype(np.float32)
        with pytest.raises(ValueError):
            threshold_predict(model, img, 0.0)


class TestOptimState:
    def test_moment_vectors_match_parameter_count(self, rng):
        model = micro_model(seed=16)
        opt = make_optimizer(model, 1e-3)
        m, v = opt.moments()
        assert m.size == model.n_parameters()
        batch = [(rng.random((8, 8, 3)).astype(np.float32), rng.random((8, 8)) < 0.5)]
        train_step(model, batch, opt)
        m, v = opt.moments()
        assert m.size == v.size == model.n_parameters()
        assert opt.step_count == 1
        assert np.any(m != 0)


class TestCheckpoints:
    def test_roundtrip_preserves_predictions(self, rng, tmp_path):
        model = new_model(seeded_rng(17), resolution=32)
        img = rng.random((32, 32, 3)).astype(np.float32)
        save_checkpoint(model, tmp_path / "m.npz")
        back = load_checkpoint(tmp_path / "m.npz")
        assert np.array_equal(model.predict(img), back.predict(img))

    def test_load_into_matching_model(self, tmp_path):
        model = micro_model(seed=18)
        save_checkpoint(model, tmp_path / "m.npz")
        other = micro_model(seed=19)
        load_checkpoint(tmp_path / "m.npz", into=other)
        assert np.array_equal(model.parameters_flat(), other.parameters_flat())

    def test_descriptor_mismatch_rejected(self, tmp_path):
        model = micro_model(seed=20)
        save_checkpoint(model, tmp_path / "m.npz")
        wrong = new_model(seeded_rng(0), resolution=16, widths=(4, 8), dtype=torch.float64)
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "m.npz", into=wrong)

    def test_named_views_cover_all_parameters(self):
        model = micro_model()
        slices = model.param_slices()
        covered = sum(s.stop - s.start for s in slices.values())
        assert covered == model.n_parameters()
        assert "head.weight" in slices
