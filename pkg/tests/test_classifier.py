import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crosspop.classifier import (
    Checkpoint,
    DisjointnessViolation,
    LabeledFrames,
    ModelSpec,
    ShapeMismatch,
    SingleClassTraining,
    TrainSchedule,
    band_features,
    band_row_slices,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    gradient_check,
    model_for,
    patient_vote_accuracy,
    predict_proba,
    train,
    zero_checkpoint,
)
from crosspop.signal_pipeline import SpectrogramFrame


def _labeled(features, labels, patients, channels=None):
    n = len(features)
    return LabeledFrames(
        features=np.asarray(features, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.int8),
        patient_ids=np.asarray(patients, dtype=object),
        channel_indices=np.asarray(channels if channels is not None else [0] * n, dtype=np.int32),
    )


def _separable_sets(seed=0, n_train_patients=8, n_val_patients=4, frames_per_patient=3):
    """Class-1 patients sit one unit higher in feature space."""
    rng = np.random.default_rng(seed)

    def build(prefix, n_patients):
        feats, labels, pids = [], [], []
        for i in range(n_patients):
            label = i % 2
            for _ in range(frames_per_patient):
                feats.append(rng.normal(size=5) * 0.3 + label * 1.0)
                labels.append(label)
                pids.append(f"{prefix}{i}")
        return _labeled(feats, labels, pids)

    return build("tr", n_train_patients), build("va", n_val_patients)


class TestTrainSchedule:
    def test_learning_rate_sequence(self):
        schedule = TrainSchedule()
        rates = [schedule.learning_rate_at(e) for e in range(30)]
        assert rates[:10] == [0.01] * 10
        assert rates[10:20] == [0.005] * 10
        assert rates[20:30] == [0.0025] * 10

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainSchedule(total_epochs=5, decay_every=10)
        with pytest.raises(ValueError):
            TrainSchedule(learning_rate=-1.0)


class TestTrain:
    def test_learns_a_separable_problem(self):
        train_set, val_set = _separable_sets()
        ckpt = train(train_set, val_set, ModelSpec(), TrainSchedule(base_seed=1))
        assert ckpt.val_accuracy == 1.0

    def test_checkpoint_is_earliest_argmax_of_curve(self):
        train_set, val_set = _separable_sets(seed=3)
        ckpt = train(train_set, val_set, ModelSpec(), TrainSchedule(base_seed=2))
        curve = list(ckpt.val_curve)
        assert len(curve) == 30
        assert ckpt.epoch == curve.index(max(curve))

    def test_overlapping_patients_rejected(self):
        train_set, _ = _separable_sets()
        with pytest.raises(DisjointnessViolation):
            train(train_set, train_set, ModelSpec(), TrainSchedule())

    def test_single_class_rejected(self):
        rng = np.random.default_rng(0)
        train_set = _labeled(rng.normal(size=(6, 5)), [1] * 6, [f"t{i}" for i in range(6)])
        val_set = _labeled(rng.normal(size=(2, 5)), [0, 1], ["v0", "v1"])
        with pytest.raises(SingleClassTraining):
            train(train_set, val_set, ModelSpec(), TrainSchedule())

    def test_bit_deterministic(self):
        train_set, val_set = _separable_sets(seed=5)
        a = train(train_set, val_set, ModelSpec(), TrainSchedule(base_seed=7))
        b = train(train_set, val_set, ModelSpec(), TrainSchedule(base_seed=7))
        assert a.epoch == b.epoch
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
        assert a.val_curve == b.val_curve

    def test_vote_channel_filter_restricts_validation(self):
        rng = np.random.default_rng(2)
        # Channel 0 carries the label, channel 1 is noise.
        feats, labels, pids, chans = [], [], [], []
        for i in range(8):
            label = i % 2
            feats.append(rng.normal(size=5) * 0.1 + label)
            labels.append(label)
            pids.append(f"v{i}")
            chans.append(0)
            feats.append(rng.normal(size=5) * 0.1 + (1 - label))
            labels.append(label)
            pids.append(f"v{i}")
            chans.append(1)
        val_set = _labeled(feats, labels, pids, chans)
        train_set, _ = _separable_sets(seed=6)
        good = train(train_set, val_set, ModelSpec(), TrainSchedule(base_seed=3), vote_channels=(0,))
        bad = train(train_set, val_set, ModelSpec(), TrainSchedule(base_seed=3), vote_channels=(1,))
        assert good.val_accuracy > bad.val_accuracy


class TestPredictProba:
    def test_zero_checkpoint_outputs_exactly_half(self):
        ckpt = zero_checkpoint(ModelSpec())
        frame = np.random.default_rng(0).uniform(size=(128, 256))
        assert predict_proba(ckpt, frame) == 0.5

    def test_same_frame_same_bits(self):
        train_set, val_set = _separable_sets()
        ckpt = train(train_set, val_set, ModelSpec(), TrainSchedule(base_seed=4))
        frame = np.random.default_rng(1).uniform(size=(128, 256))
        assert predict_proba(ckpt, frame) == predict_proba(ckpt, frame)

    def test_shape_mismatch(self):
        ckpt = zero_checkpoint(ModelSpec())
        with pytest.raises(ShapeMismatch):
            predict_proba(ckpt, np.zeros((64, 64)))

    def test_accepts_spectrogram_frames_and_absent_zeros(self):
        ckpt = zero_checkpoint(ModelSpec())
        frame = SpectrogramFrame(
            values=np.zeros((128, 256), dtype=np.float32),
            channel_index=0, patient_id="p", population_id="s",
            window_index=0, absent_flag=True,
        )
        assert predict_proba(ckpt, frame) == 0.5

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_probability_in_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        train_set, val_set = _separable_sets(seed=seed % 100)
        ckpt = train(train_set, val_set, ModelSpec(), TrainSchedule(base_seed=seed % 1000, total_epochs=10))
        frame = rng.uniform(-5, 5, size=(128, 256))
        assert 0.0 <= predict_proba(ckpt, frame) <= 1.0


class TestGradientCheck:
    def test_band_logistic(self):
        assert gradient_check(ModelSpec(kind="band_logistic")) < 1e-4

    def test_reference_conv_tiny_variant(self):
        assert gradient_check(ModelSpec(kind="reference_conv")) < 1e-3

    def test_zero_input_finite_gradients(self):
        spec = ModelSpec(kind="reference_conv", conv_filters=(2, 3, 4), input_shape=(8, 16))
        model = model_for(spec)
        params = model.init_params(np.random.default_rng(0))
        X = np.zeros((2, 1, 8, 16))
        y = np.array([0.0, 1.0])
        loss, grads = model.loss_and_grads(params, X, y)
        assert np.isfinite(loss)
        assert all(np.isfinite(g).all() for g in grads.values())


class TestBandFeatures:
    def test_band_slices_partition_low_rows(self):
        slices = band_row_slices()
        stops = [s.stop for s in slices]
        starts = [s.start for s in slices]
        assert starts[0] == 0
        assert starts[1:] == stops[:-1]
        assert stops[-1] == 120  # 30 Hz at 0.25 Hz per row

    def test_constant_frame_features(self):
        frame = np.full((128, 256), 0.5)
        np.testing.assert_allclose(band_features(frame)[0], [0.5] * 5)

    def test_reference_conv_shapes(self):
        spec = ModelSpec(kind="reference_conv", conv_filters=(2, 3, 4))
        model = model_for(spec)
        X = model.featurize(np.random.default_rng(0).uniform(size=(2, 128, 256)))
        probs = model.predict(model.init_params(np.random.default_rng(1)), X)
        assert probs.shape == (2,)
        assert np.all((probs >= 0) & (probs <= 1))


class TestVoteAccuracy:
    def test_matches_manual_computation(self):
        probs = np.array([0.9, 0.2, 0.6, 0.1, 0.2, 0.3])
        labels = np.array([1, 1, 1, 0, 0, 0], dtype=np.int8)
        pids = np.asarray(["a", "a", "a", "b", "b", "b"], dtype=object)
        # a: mean 0.5667 -> 1 correct; b: mean 0.2 -> 0 correct.
        assert patient_vote_accuracy(probs, labels, pids) == 1.0

    def test_threshold_boundary_inclusive(self):
        probs = np.array([0.5])
        labels = np.array([1], dtype=np.int8)
        pids = np.asarray(["a"], dtype=object)
        assert patient_vote_accuracy(probs, labels, pids) == 1.0


class TestCheckpointContainer:
    def test_roundtrip(self):
        train_set, val_set = _separable_sets(seed=8)
        ckpt = train(train_set, val_set, ModelSpec(), TrainSchedule(base_seed=9, total_epochs=10))
        back = checkpoint_from_bytes(checkpoint_to_bytes(ckpt))
        assert back.spec == ckpt.spec
        assert back.epoch == ckpt.epoch
        for key in ckpt.params:
            np.testing.assert_allclose(back.params[key], ckpt.params[key], atol=1e-6)

    def test_bad_magic_rejected(self):
        with pytest.raises(ValueError):
            checkpoint_from_bytes(b"nope" + b"\x00" * 32)

    def test_from_spectrograms(self):
        frames = [
            SpectrogramFrame(
                values=np.full((128, 256), v, dtype=np.float32),
                channel_index=c, patient_id=pid, population_id="s",
                window_index=0, absent_flag=False,
            )
            for v, c, pid in ((0.2, 0, "a"), (0.8, 1, "b"))
        ]
        batch = LabeledFrames.from_spectrograms(frames, {"a": 0, "b": 1}, ModelSpec())
        assert batch.features.shape == (2, 5)
        assert list(batch.labels) == [0, 1]
        assert list(batch.channel_indices) == [0, 1]
