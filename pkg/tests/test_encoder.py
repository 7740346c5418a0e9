"""Encoder and teacher: shape arithmetic, nonnegativity, training
behavior, and soft labels."""
import numpy as np
import pytest

from protostudent import tensor as T
from protostudent.encoder import (Encoder, EncoderConfig, TrainingError,
                                  teacher_soft_labels, train_teacher)
from protostudent.tensor import DimensionError, Tensor


def blob_data(n_per_class=20, classes=2, size=8, seed=0):
    """Linearly separable class-colored noise images."""
    rng = np.random.default_rng(seed)
    imgs, labs = [], []
    for c in range(classes):
        base = np.zeros((3, size, size))
        base[c % 3] = 0.8
        for _ in range(n_per_class):
            imgs.append(np.clip(base + rng.normal(0, 0.1, base.shape), 0, 1))
            labs.append(c)
    return np.asarray(imgs), np.asarray(labs, dtype=np.int64)


SMALL = EncoderConfig(in_channels=3, blocks=((4, 3, 2), (8, 3, 2)), input_size=(8, 8))


class TestEncoder:
    def test_default_feature_shape(self):
        assert EncoderConfig().feature_shape() == (64, 4, 4)

    def test_default_encode_shape(self):
        enc = Encoder(EncoderConfig(), seed=0)
        rng = np.random.default_rng(0)
        assert enc.encode(rng.random((3, 32, 32))).shape == (64, 4, 4)

    def test_zero_image_zero_features_at_init(self):
        # biases start at zero, so an all-zero image propagates to zero
        enc = Encoder(SMALL, seed=1)
        feats = enc.encode(np.zeros((3, 8, 8)))
        np.testing.assert_array_equal(feats, 0.0)

    def test_deterministic_encode(self):
        enc = Encoder(SMALL, seed=2)
        img = np.random.default_rng(3).random((3, 8, 8))
        np.testing.assert_array_equal(enc.encode(img), enc.encode(img.copy()))

    def test_nonnegative_output(self):
        enc = Encoder(SMALL, seed=4)
        rng = np.random.default_rng(5)
        for _ in range(50):
            assert (enc.encode(rng.random((3, 8, 8))) >= 0).all()

    def test_shape_mismatch_raises(self):
        enc = Encoder(SMALL, seed=0)
        with pytest.raises(DimensionError):
            enc.encode(np.zeros((3, 9, 9)))

    def test_too_small_feature_map_rejected(self):
        with pytest.raises(DimensionError):
            EncoderConfig(in_channels=3, blocks=((4, 3, 2),) * 3, input_size=(8, 8))

    def test_recorded_forward_matches_encode(self):
        enc = Encoder(SMALL, seed=6)
        img = np.random.default_rng(7).random((3, 8, 8))
        feats, records = enc.forward_recorded(img)
        np.testing.assert_allclose(feats, enc.encode(img), atol=0)
        assert len(records) == len(SMALL.blocks)


class TestTeacherTraining:
    def test_separable_two_class_accuracy(self):
        imgs, labs = blob_data()
        teacher = train_teacher((imgs, labs), epochs=10, lr=0.05, seed=0,
                                batch_size=16, config=SMALL)
        assert teacher.train_accuracy >= 0.95

    def test_zero_epochs_chance_level(self):
        imgs, labs = blob_data(n_per_class=50, classes=2)
        teacher = train_teacher((imgs, labs), epochs=0, lr=0.05, seed=0, config=SMALL)
        assert abs(teacher.train_accuracy - 0.5) <= 0.25

    def test_same_seed_identical_parameters(self):
        imgs, labs = blob_data()
        t1 = train_teacher((imgs, labs), epochs=3, lr=0.05, seed=9, config=SMALL)
        t2 = train_teacher((imgs, labs), epochs=3, lr=0.05, seed=9, config=SMALL)
        for p1, p2 in zip(t1.params, t2.params):
            np.testing.assert_array_equal(p1.data, p2.data)

    def test_single_class_rejected(self):
        imgs, labs = blob_data(classes=1)
        with pytest.raises(TrainingError):
            train_teacher((imgs, labs), epochs=1, lr=0.05, seed=0, config=SMALL)

    def test_loss_non_increasing_trend(self):
        """Epoch-mean training loss should trend down (5% jitter allowed)."""
        imgs, labs = blob_data(n_per_class=30)
        losses = []
        teacher = None
        for epochs in (2, 6):
            teacher = train_teacher((imgs, labs), epochs=epochs, lr=0.05, seed=1,
                                    batch_size=16, config=SMALL)
            with T.no_grad():
                logits = teacher.forward(Tensor(imgs))
                logp = T.log_softmax(logits, axis=1).data
            losses.append(-logp[np.arange(len(labs)), labs].mean())
        assert losses[1] <= losses[0] * 1.05


class TestSoftLabels:
    def _teacher(self):
        imgs, labs = blob_data(n_per_class=10)
        return train_teacher((imgs, labs), epochs=2, lr=0.05, seed=0, config=SMALL)

    def test_uniform_logits_uniform_probs(self):
        probs = T.softmax(Tensor(np.zeros((1, 4))), axis=-1).data
        np.testing.assert_allclose(probs, 0.25)

    def test_extreme_logits_saturate(self):
        probs = T.softmax(Tensor(np.array([10.0, -10.0])), axis=-1).data
        np.testing.assert_allclose(probs, [1.0, 0.0], atol=1e-8)

    def test_soft_labels_sum_to_one(self):
        teacher = self._teacher()
        rng = np.random.default_rng(10)
        probs = teacher_soft_labels(teacher, rng.random((1000, 3, 8, 8)))
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)
        assert (probs > 0).all()
