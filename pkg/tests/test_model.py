"""Tests for the feature bank, focal loss and the two-stage trainer."""

import math

import numpy as np
import pytest

from monobev.errors import DivergenceError, EmptyMaskError, ShapeMismatchError
from monobev.model import (
    FEATURE_BANK_SIZE,
    LinearHead,
    Model,
    SampleBatch,
    TrainConfig,
    TrainingSample,
    class_frequency_alpha,
    extract_features,
    focal_loss,
    model_from_dict,
    model_to_dict,
    new_model,
    train,
)


# ---------------------------------------------------------------------------
# Independent oracles


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=float)))


def _weighted_ce_sigmoid(logits, targets, alpha):
    """Plain alpha-weighted binary cross entropy, written independently."""
    p = np.clip(_sigmoid(logits), 1e-7, 1 - 1e-7)
    per = -(alpha * targets * np.log(p) + (1 - alpha) * (1 - targets) * np.log(1 - p))
    return per.sum() / per.size


def _weighted_ce_softmax(logits, targets, alpha):
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
    idx = targets.argmax(axis=-1)
    rows = np.arange(len(idx))
    pt = np.clip(p[rows, idx], 1e-7, 1 - 1e-7)
    return float((-alpha[idx] * np.log(pt)).sum() / len(idx))


def _numeric_gradient(fn, z, h=1e-5):
    grad = np.zeros_like(z)
    it = np.nditer(z, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        zp = z.copy()
        zp[i] += h
        zm = z.copy()
        zm[i] -= h
        grad[i] = (fn(zp) - fn(zm)) / (2 * h)
    return grad


class TestFocalLoss:
    def test_reference_value(self):
        # Positive label scored at probability one half with gamma 2 and
        # alpha 0.25: 0.25 * 0.25 * ln 2.
        loss, _ = focal_loss(np.array([[0.0]]), np.array([[1.0]]), "sigmoid",
                             gamma=2.0, alpha=0.25)
        assert abs(loss - 0.25 * 0.25 * math.log(2.0)) < 1e-12
        assert abs(loss - 0.043322) < 1e-6

    def test_gamma_zero_is_weighted_cross_entropy_sigmoid(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(0, 2, (40, 3))
        targets = (rng.uniform(size=(40, 3)) < 0.4).astype(float)
        alpha = np.array([0.25, 0.5, 0.8])
        loss, _ = focal_loss(logits, targets, "sigmoid", gamma=0.0, alpha=alpha)
        assert abs(loss - _weighted_ce_sigmoid(logits, targets, alpha)) < 1e-12

    def test_gamma_zero_is_weighted_cross_entropy_softmax(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(0, 2, (40, 4))
        targets = np.eye(4)[rng.integers(0, 4, 40)]
        alpha = np.array([0.25, 0.5, 0.8, 0.6])
        loss, _ = focal_loss(logits, targets, "softmax", gamma=0.0, alpha=alpha)
        assert abs(loss - _weighted_ce_softmax(logits, targets, alpha)) < 1e-12

    @pytest.mark.parametrize("kind", ["sigmoid", "softmax"])
    @pytest.mark.parametrize("gamma", [0.0, 1.0, 2.0])
    def test_gradient_matches_finite_differences(self, kind, gamma):
        rng = np.random.default_rng(hash((kind, gamma)) % 2**32)
        for _ in range(4):
            n, c = 6, 4
            logits = rng.normal(0, 1.5, (n, c))
            if kind == "sigmoid":
                targets = (rng.uniform(size=(n, c)) < 0.5).astype(float)
            else:
                targets = np.eye(c)[rng.integers(0, c, n)]
            alpha = rng.uniform(0.1, 0.9, c)
            mask = rng.uniform(size=n) < 0.8

            def scalar_loss(z):
                loss, _ = focal_loss(z, targets, kind, gamma=gamma, alpha=alpha, mask=mask)
                return loss

            _, analytic = focal_loss(logits, targets, kind, gamma=gamma, alpha=alpha, mask=mask)
            numeric = _numeric_gradient(scalar_loss, logits)
            scale = 1.0 + np.abs(numeric)
            np.testing.assert_array_less(np.abs(analytic - numeric) / scale, 1e-4)

    def test_masked_rows_contribute_nothing(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(0, 1, (10, 3))
        targets = (rng.uniform(size=(10, 3)) < 0.5).astype(float)
        mask = np.zeros(10, dtype=bool)
        mask[:4] = True
        loss, grad = focal_loss(logits, targets, "sigmoid", mask=mask)
        assert np.all(grad[4:] == 0.0)
        tampered = logits.copy()
        tampered[4:] += 37.0
        loss2, _ = focal_loss(tampered, targets, "sigmoid", mask=mask)
        assert loss == loss2

    def test_extreme_logits_stay_finite(self):
        logits = np.array([[50.0, -50.0], [-50.0, 50.0]])
        targets = np.array([[0.0, 1.0], [1.0, 0.0]])
        for kind in ("sigmoid", "softmax"):
            loss, grad = focal_loss(logits, targets, kind, gamma=2.0, alpha=0.25)
            assert np.isfinite(loss)
            assert np.isfinite(grad).all()

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeMismatchError):
            focal_loss(np.zeros((3, 2)), np.zeros((3, 3)), "sigmoid")
        with pytest.raises(ValueError):
            focal_loss(np.zeros((3, 2)), np.zeros((3, 2)), "hinge")

    def test_empty_mask_rejected(self):
        with pytest.raises(EmptyMaskError):
            focal_loss(np.zeros((3, 2)), np.zeros((3, 2)), "sigmoid",
                       mask=np.zeros(3, dtype=bool))

    def test_sigmoid_class_permutation(self):
        rng = np.random.default_rng(13)
        logits = rng.normal(size=(9, 4))
        targets = (rng.uniform(size=(9, 4)) < 0.4).astype(float)
        alpha = rng.uniform(0.1, 0.9, size=4)
        perm = np.array([2, 0, 3, 1])
        loss, grad = focal_loss(logits, targets, "sigmoid", alpha=alpha)
        loss_p, grad_p = focal_loss(logits[:, perm], targets[:, perm],
                                    "sigmoid", alpha=alpha[perm])
        assert loss == pytest.approx(loss_p, abs=1e-15)
        np.testing.assert_allclose(grad_p, grad[:, perm], atol=1e-15)


def test_class_frequency_alpha():
    labels = np.array([[1, 1], [1, 0], [1, 0], [1, 0]], dtype=float)
    alpha = class_frequency_alpha(labels)
    # First class saturates the floor; second is 1 - 1/4.
    np.testing.assert_allclose(alpha, [0.05, 0.75])
    masked = class_frequency_alpha(labels, mask=[True, True, False, False])
    np.testing.assert_allclose(masked, [0.05, 0.5])


class TestFeatures:
    def test_shapes_and_raw_channels(self):
        rng = np.random.default_rng(0)
        image = rng.uniform(size=(12, 9, 3))
        feats = extract_features(image)
        assert feats.shape == (12, 9, 8)
        np.testing.assert_array_equal(feats[..., :3], image)
        full = extract_features(image, FEATURE_BANK_SIZE)
        assert full.shape[-1] == FEATURE_BANK_SIZE

    def test_constant_image(self):
        image = np.ones((6, 5, 3)) * np.array([0.2, 0.5, 0.7])
        feats = extract_features(image, FEATURE_BANK_SIZE, window=3)
        np.testing.assert_array_equal(feats[..., 3:5], 0.0)  # gradients
        np.testing.assert_allclose(feats[..., 5:8], image, atol=1e-12)  # means
        np.testing.assert_allclose(feats[..., 8:11], 0.0, atol=1e-7)  # stds

    def test_step_edge_gradient_support(self):
        image = np.zeros((8, 10, 3))
        image[:, 5:, :] = 1.0  # vertical edge between columns 4 and 5
        feats = extract_features(image, FEATURE_BANK_SIZE, window=3)
        grad_x = feats[..., 3]
        assert (grad_x[:, [4, 5]] > 0).all()
        np.testing.assert_array_equal(np.delete(grad_x, [4, 5], axis=1), 0.0)
        np.testing.assert_array_equal(feats[..., 4], 0.0)

    def test_translation_equivariance(self):
        rng = np.random.default_rng(11)
        base = rng.uniform(size=(20, 24, 3))
        dr, dc = 3, 5
        shifted = np.roll(np.roll(base, dr, axis=0), dc, axis=1)
        f0 = extract_features(base, FEATURE_BANK_SIZE)
        f1 = extract_features(shifted, FEATURE_BANK_SIZE)
        # Compare interiors only: border handling breaks the symmetry there.
        pad = 4
        np.testing.assert_allclose(
            f1[pad + dr:-pad, pad + dc:-pad],
            f0[pad:-pad - dr, pad:-pad - dc],
            atol=1e-12,
        )

    def test_window_stats_match_naive(self):
        rng = np.random.default_rng(3)
        image = rng.uniform(size=(6, 7, 3))
        feats = extract_features(image, FEATURE_BANK_SIZE, window=3)
        h, w = image.shape[:2]
        for channel in range(3):
            plane = image[..., channel]
            for i, j in ((0, 0), (2, 3), (5, 6), (3, 0)):
                block = [
                    plane[min(max(i + di, 0), h - 1), min(max(j + dj, 0), w - 1)]
                    for di in range(-1, 2)
                    for dj in range(-1, 2)
                ]
                assert feats[i, j, 5 + channel] == pytest.approx(np.mean(block), abs=1e-12)
                assert feats[i, j, 8 + channel] == pytest.approx(np.std(block), abs=1e-7)

    def test_bad_inputs(self):
        with pytest.raises(ShapeMismatchError):
            extract_features(np.zeros((4, 4)))
        with pytest.raises(ValueError):
            extract_features(np.zeros((4, 4, 3)), FEATURE_BANK_SIZE + 1)
        with pytest.raises(ValueError):
            extract_features(np.zeros((4, 4, 3)), 2)
        with pytest.raises(ValueError):
            extract_features(np.zeros((4, 4, 3)), window=4)


class TestHeads:
    def test_probabilities(self):
        head = LinearHead(np.array([[1.0], [2.0]]), np.array([0.5]), "sigmoid")
        x = np.array([[1.0, 1.0], [0.0, 0.0]])
        np.testing.assert_allclose(head.probabilities(x)[:, 0], _sigmoid([3.5, 0.5]))
        soft = LinearHead(np.eye(3), np.zeros(3), "softmax")
        p = soft.probabilities(np.random.default_rng(0).normal(size=(5, 3)))
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
        assert (p > 0).all()

    def test_loss_decreases_on_separable_data(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(200, 4))
        w_true = np.array([1.5, -2.0, 0.5, 1.0])
        labels = (x @ w_true > 0).astype(float)[:, None]
        head = LinearHead.zeros(4, 1, "sigmoid")
        losses = [head.step(x, labels, lr=0.1) for _ in range(10)]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_divergence_detected(self):
        for kind in ("sigmoid", "softmax"):
            head = LinearHead.zeros(3, 2, kind)
            head.weights[:] = np.inf
            with pytest.raises(DivergenceError):
                head.step(np.ones((4, 3)), np.eye(2)[[0, 1, 0, 1]].astype(float))

    def test_feature_count_mismatch(self):
        head = LinearHead.zeros(3, 2, "sigmoid")
        with pytest.raises(ShapeMismatchError):
            head.logits(np.zeros((5, 4)))


class TestTraining:
    def _fake_sample(self, rng, n_static=2, n_objects=2, calls=None):
        # Pixel stage: 60 pixels, 3 features, separable labels.
        feats = rng.normal(size=(60, 3))
        static = (feats[:, :n_static] > 0).astype(float)
        obj_idx = (feats[:, 2] > 0).astype(int)
        objects = np.eye(n_objects + 1)[obj_idx]
        batch = SampleBatch(feats, static, objects, np.ones(60, dtype=bool))

        cell_feats_raw = rng.normal(size=(40, 3))

        def assemble(heatmap_fn):
            if calls is not None:
                calls.append(heatmap_fn)
            if heatmap_fn is None:
                cell_features = cell_feats_raw
            else:
                s, o = heatmap_fn(cell_feats_raw)
                cell_features = np.concatenate([s, o], axis=-1)
            static_lab = (cell_feats_raw[:, :n_static] > 0).astype(float)
            obj_lab = np.eye(n_objects + 1)[(cell_feats_raw[:, 2] > 0).astype(int)]
            return SampleBatch(cell_features, static_lab, obj_lab,
                               np.ones(40, dtype=bool))

        return TrainingSample([batch], assemble)

    def test_full_model_history(self):
        rng = np.random.default_rng(0)
        calls = []
        sample = self._fake_sample(rng, calls=calls)
        model = new_model(3, 2, 2, bev_channels=2 + 3)
        history = train(model, [sample], TrainConfig(epochs=5, lr=0.3))
        assert set(history) == {"image_static", "image_object", "bev_static", "bev_object"}
        assert all(len(v) == 5 for v in history.values())
        assert all(np.isfinite(v).all() for v in history.values())
        # Grid features are reassembled once for the class-weight pre-pass
        # and once per epoch, always with the live heatmap function.
        assert len(calls) == 6
        assert all(fn is not None for fn in calls)
        assert history["image_static"][-1] < history["image_static"][0]

    def test_grid_only_model(self):
        rng = np.random.default_rng(1)
        sample = self._fake_sample(rng)
        model = new_model(3, 2, 2, bev_channels=3, with_image_heads=False)
        history = train(model, [sample], TrainConfig(epochs=4))
        assert set(history) == {"bev_static", "bev_object"}
        assert not model.has_image_heads

    def test_image_only_model(self):
        rng = np.random.default_rng(2)
        sample = self._fake_sample(rng)
        model = new_model(3, 2, 2, bev_channels=None)
        history = train(model, [sample], TrainConfig(epochs=4))
        assert set(history) == {"image_static", "image_object"}
        assert not model.has_bev_heads

    def test_zero_epochs_evaluates_once_without_updates(self):
        rng = np.random.default_rng(3)
        sample = self._fake_sample(rng)
        model = new_model(3, 2, 2, bev_channels=2 + 3)
        history = train(model, [sample], TrainConfig(epochs=0))
        assert all(len(v) == 1 for v in history.values())
        assert all(np.isfinite(v).all() for v in history.values())
        for head in (model.image_static, model.image_object,
                     model.bev_static, model.bev_object):
            np.testing.assert_array_equal(head.weights, 0.0)
            np.testing.assert_array_equal(head.bias, 0.0)

    def test_zero_learning_rate_is_stationary(self):
        rng = np.random.default_rng(4)
        sample = self._fake_sample(rng)
        model = new_model(3, 2, 2, bev_channels=2 + 3)
        history = train(model, [sample], TrainConfig(epochs=3, lr=0.0))
        for losses in history.values():
            assert losses[0] == losses[1] == losses[2]
        np.testing.assert_array_equal(model.bev_static.weights, 0.0)

    def test_object_head_trains_on_flagged_batches_only(self):
        rng = np.random.default_rng(5)
        feats_a = rng.normal(size=(30, 3))
        feats_b = rng.normal(size=(30, 3))

        def batches(include_extra):
            out = [SampleBatch(feats_a, (feats_a[:, :2] > 0).astype(float),
                               np.eye(3)[(feats_a[:, 2] > 0).astype(int)],
                               np.ones(30, dtype=bool))]
            if include_extra:
                out.append(SampleBatch(feats_b, (feats_b[:, :2] > 0).astype(float),
                                       np.eye(3)[(feats_b[:, 2] < 0).astype(int)],
                                       np.ones(30, dtype=bool),
                                       supervise_objects=False))
            return out

        def run(include_extra):
            model = new_model(3, 2, 2, bev_channels=None)
            train(model, [TrainingSample(batches(include_extra), lambda fn: None)],
                  TrainConfig(epochs=3, lr=0.2))
            return model

        with_extra, without = run(True), run(False)
        # The unflagged batch carries contradictory object labels, yet the
        # object head must come out identical; the static head sees it.
        np.testing.assert_array_equal(with_extra.image_object.weights,
                                      without.image_object.weights)
        assert not np.array_equal(with_extra.image_static.weights,
                                  without.image_static.weights)

    def test_zero_site_weight_freezes_that_site(self):
        rng = np.random.default_rng(6)
        sample = self._fake_sample(rng)
        model = new_model(3, 2, 2, bev_channels=2 + 3)
        train(model, [sample], TrainConfig(epochs=3, site_weights=(1.0, 0.0, 1.0)))
        np.testing.assert_array_equal(model.image_object.weights, 0.0)
        assert np.abs(model.image_static.weights).max() > 0
        assert np.abs(model.bev_static.weights).max() > 0


def test_model_round_trip():
    rng = np.random.default_rng(5)
    model = new_model(4, 3, 2, bev_channels=7)
    for head in (model.image_static, model.image_object, model.bev_static, model.bev_object):
        head.weights[:] = rng.normal(size=head.weights.shape)
        head.bias[:] = rng.normal(size=head.bias.shape)
    rebuilt = model_from_dict(model_to_dict(model))
    x = rng.normal(size=(10, 4))
    np.testing.assert_array_equal(
        model.image_static.probabilities(x), rebuilt.image_static.probabilities(x)
    )
    cells = rng.normal(size=(10, 7))
    np.testing.assert_array_equal(
        model.bev_object.probabilities(cells), rebuilt.bev_object.probabilities(cells)
    )
    partial = new_model(4, 3, 2, bev_channels=None)
    again = model_from_dict(model_to_dict(partial))
    assert again.bev_static is None and again.has_image_heads
