"""Frame-level binary classifiers with patient-level checkpoint selection.

Two built-in model kinds operate on 128 x 256 normalized log-power frames:

* ``band_logistic`` - mean frame value in the five canonical rhythm bands
  (delta, theta, alpha, low beta, high beta) feeding a logistic unit; the
  fast default for the inner channel-evaluation loop.
* ``reference_conv`` - a small convolutional stack: two blocks with (2 x 4)
  average pooling (128 x 256 -> 64 x 64 -> 32 x 16), a third block with
  global average pooling, and a logistic head.

Training is plain mini-batch SGD with the step size halved every 10 epochs,
binary cross-entropy loss, and deterministic batch order derived from the
schedule seed.  After every epoch, validation frames are aggregated into
patient-level predictions (restricted to the caller's vote channels) and the
checkpoint with the best patient-level accuracy is kept, earliest epoch on
ties.  Everything is pure numpy and bit-deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import json
import struct

import numpy as np

from .signal_pipeline import SpectrogramFrame


class DisjointnessViolation(ValueError):
    """Train and validation patient sets overlap."""


class SingleClassTraining(ValueError):
    """Training data does not contain both classes."""


class ShapeMismatch(ValueError):
    """Frame shape does not match the model's expected input."""


@dataclass(frozen=True)
class TrainSchedule:
    """SGD schedule: lr(epoch) = learning_rate * decay_factor ** (epoch // decay_every)."""

    learning_rate: float = 0.01
    decay_factor: float = 0.5
    decay_every: int = 10
    total_epochs: int = 30
    batch_size: int = 32
    base_seed: int = 10

    def __post_init__(self) -> None:
        if min(self.learning_rate, self.decay_factor) <= 0:
            raise ValueError("learning rate and decay factor must be positive")
        if min(self.decay_every, self.total_epochs, self.batch_size) <= 0:
            raise ValueError("epoch counts and batch size must be positive")
        if self.total_epochs < self.decay_every:
            raise ValueError("total_epochs must be at least decay_every")

    def learning_rate_at(self, epoch: int) -> float:
        return self.learning_rate * self.decay_factor ** (epoch // self.decay_every)


@dataclass(frozen=True)
class ModelSpec:
    """Which model to build and how to initialize it."""

    kind: str = "band_logistic"
    init_seed: int = 0
    conv_filters: tuple[int, int, int] = (8, 16, 32)
    input_shape: tuple[int, int] = (128, 256)

    def __post_init__(self) -> None:
        if self.kind not in ("band_logistic", "reference_conv"):
            raise ValueError(f"unknown model kind {self.kind!r}")


@dataclass
class Checkpoint:
    """Best-epoch parameter snapshot selected by patient-level validation accuracy."""

    spec: ModelSpec
    epoch: int
    params: dict[str, np.ndarray]
    val_accuracy: float
    val_curve: tuple[float, ...] = ()


@dataclass
class LabeledFrames:
    """Flat frame batch: features plus per-frame labels, patients, channels."""

    features: np.ndarray
    labels: np.ndarray
    patient_ids: np.ndarray
    channel_indices: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.features)
        if not (len(self.labels) == len(self.patient_ids) == len(self.channel_indices) == n):
            raise ValueError("feature/label/patient/channel arrays must align")

    @classmethod
    def from_spectrograms(
        cls,
        frames: list[SpectrogramFrame],
        label_of: dict[str, int],
        spec: ModelSpec,
    ) -> "LabeledFrames":
        model = model_for(spec)
        values = np.stack([np.asarray(f.values, dtype=np.float64) for f in frames])
        return cls(
            features=model.featurize(values),
            labels=np.asarray([label_of[f.patient_id] for f in frames], dtype=np.int8),
            patient_ids=np.asarray([f.patient_id for f in frames], dtype=object),
            channel_indices=np.asarray([f.channel_index for f in frames], dtype=np.int32),
        )


# --------------------------------------------------------------------------
# Band-power features

FREQUENCY_BANDS: tuple[tuple[str, float, float], ...] = (
    ("delta", 0.0, 4.0),
    ("theta", 4.0, 8.0),
    ("alpha", 8.0, 12.0),
    ("beta_low", 12.0, 20.0),
    ("beta_high", 20.0, 30.0),
)


def band_row_slices(n_rows: int = 128, bin_hz: float = 0.25) -> tuple[slice, ...]:
    """Row ranges of each band; row r holds frequency (r + 1) * bin_hz."""
    slices = []
    for _name, lo, hi in FREQUENCY_BANDS:
        start = int(np.ceil(lo / bin_hz))
        stop = min(int(np.floor(hi / bin_hz)), n_rows)
        slices.append(slice(start, stop))
    return tuple(slices)


def band_features(frames: np.ndarray) -> np.ndarray:
    """Mean frame value per canonical band; frames shaped (n, rows, cols)."""
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    return np.stack([x[:, sl, :].mean(axis=(1, 2)) for sl in band_row_slices(x.shape[1])], axis=1)


# --------------------------------------------------------------------------
# Numerics shared by both models


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _bce_loss_and_dz(z: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy of logits ``z`` and its gradient wrt z."""
    loss = float(np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))))
    dz = (_sigmoid(z) - y) / len(z)
    return loss, dz


class _BandLogistic:
    n_features = len(FREQUENCY_BANDS)

    def __init__(self, spec: ModelSpec):
        self.spec = spec

    def featurize(self, frames: np.ndarray) -> np.ndarray:
        return band_features(frames)

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        # Zero start: the problem is convex, and small-step schedules then
        # move in the class-separation direction from the first batch.
        del rng
        return {"w": np.zeros(self.n_features), "b": np.zeros(1)}

    def prepare(self, params: dict, X: np.ndarray) -> None:
        """Fit per-feature standardization on the training batch only.

        Raw band means sit in a narrow slice of [0, 1]; without O(1) feature
        contrasts the fixed small-step schedule lets the bias dominate.  The
        statistics ride along in the parameter dict (not gradient-updated) so
        inference applies the same affine map.
        """
        params["feat_mean"] = X.mean(axis=0)
        params["feat_scale"] = np.maximum(X.std(axis=0), 1e-8)

    def _scaled(self, params: dict, X: np.ndarray) -> np.ndarray:
        if "feat_mean" in params:
            return (X - params["feat_mean"]) / params["feat_scale"]
        return X

    def logits(self, params: dict, X: np.ndarray) -> np.ndarray:
        return self._scaled(params, X) @ params["w"] + params["b"][0]

    def predict(self, params: dict, X: np.ndarray) -> np.ndarray:
        return _sigmoid(self.logits(params, X))

    def loss_and_grads(self, params: dict, X: np.ndarray, y: np.ndarray):
        Xs = self._scaled(params, X)
        z = Xs @ params["w"] + params["b"][0]
        loss, dz = _bce_loss_and_dz(z, y)
        return loss, {"w": Xs.T @ dz, "b": np.asarray([dz.sum()])}


class _ReferenceConv:
    """Three conv blocks; pooling (2 x 4) twice, then global average pooling."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.filters = spec.conv_filters
        self.pool = (2, 4)

    def featurize(self, frames: np.ndarray) -> np.ndarray:
        x = np.asarray(frames, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        return x[:, None, :, :]

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        f1, f2, f3 = self.filters
        params = {}
        for name, (cout, cin) in {
            "conv1": (f1, 1),
            "conv2": (f2, f1),
            "conv3": (f3, f2),
        }.items():
            scale = np.sqrt(2.0 / (cin * 9))
            params[f"{name}_w"] = rng.normal(0.0, scale, size=(cout, cin, 3, 3))
            params[f"{name}_b"] = np.zeros(cout)
        params["head_w"] = rng.normal(0.0, np.sqrt(1.0 / f3), size=f3)
        params["head_b"] = np.zeros(1)
        return params

    # -- conv plumbing (3x3, stride 1, zero padding 1) --

    @staticmethod
    def _cols(x: np.ndarray) -> np.ndarray:
        b, c, h, w = x.shape
        padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        view = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
        return view.transpose(0, 2, 3, 1, 4, 5).reshape(b, h * w, c * 9)

    @staticmethod
    def _cols_to_input(dcols: np.ndarray, shape: tuple) -> np.ndarray:
        b, c, h, w = shape
        d = dcols.reshape(b, h, w, c, 3, 3)
        buf = np.zeros((b, c, h + 2, w + 2))
        for i in range(3):
            for j in range(3):
                buf[:, :, i : i + h, j : j + w] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return buf[:, :, 1 : 1 + h, 1 : 1 + w]

    def _conv_forward(self, x, w, b):
        cout = w.shape[0]
        cols = self._cols(x)
        out = cols @ w.reshape(cout, -1).T + b
        bsz, _, h, wd = x.shape
        return out.reshape(bsz, h, wd, cout).transpose(0, 3, 1, 2), cols

    def _conv_backward(self, dout, cols, x_shape, w):
        cout = w.shape[0]
        b, _, h, wd = x_shape
        dflat = dout.transpose(0, 2, 3, 1).reshape(b, h * wd, cout)
        dw = np.einsum("bnf,bnk->fk", dflat, cols).reshape(w.shape)
        db = dflat.sum(axis=(0, 1))
        dcols = dflat @ w.reshape(cout, -1)
        return self._cols_to_input(dcols, x_shape), dw, db

    def _pool_forward(self, x):
        b, c, h, w = x.shape
        ph, pw = self.pool
        return x.reshape(b, c, h // ph, ph, w // pw, pw).mean(axis=(3, 5))

    def _pool_backward(self, dout, x_shape):
        b, c, h, w = x_shape
        ph, pw = self.pool
        scale = 1.0 / (ph * pw)
        expanded = np.repeat(np.repeat(dout, ph, axis=2), pw, axis=3)
        return expanded * scale

    def _forward_pass(self, params: dict, X: np.ndarray):
        cache = {"x0": X}
        x = X
        for i in (1, 2):
            pre, cols = self._conv_forward(x, params[f"conv{i}_w"], params[f"conv{i}_b"])
            act = np.maximum(pre, 0.0)
            pooled = self._pool_forward(act)
            cache[f"in{i}"], cache[f"cols{i}"], cache[f"pre{i}"], cache[f"act{i}"] = x, cols, pre, act
            x = pooled
        pre, cols = self._conv_forward(x, params["conv3_w"], params["conv3_b"])
        act = np.maximum(pre, 0.0)
        cache["in3"], cache["cols3"], cache["pre3"], cache["act3"] = x, cols, pre, act
        gap = act.mean(axis=(2, 3))
        cache["gap"] = gap
        z = gap @ params["head_w"] + params["head_b"][0]
        return z, cache

    def logits(self, params: dict, X: np.ndarray) -> np.ndarray:
        z, _ = self._forward_pass(params, X)
        return z

    def predict(self, params: dict, X: np.ndarray) -> np.ndarray:
        return _sigmoid(self.logits(params, X))

    def loss_and_grads(self, params: dict, X: np.ndarray, y: np.ndarray):
        z, cache = self._forward_pass(params, X)
        loss, dz = _bce_loss_and_dz(z, y)
        grads = {
            "head_w": cache["gap"].T @ dz,
            "head_b": np.asarray([dz.sum()]),
        }
        act3 = cache["act3"]
        dgap = np.outer(dz, params["head_w"])
        dact3 = dgap[:, :, None, None] * np.ones_like(act3) / (act3.shape[2] * act3.shape[3])
        dpre3 = dact3 * (cache["pre3"] > 0)
        dx, dw, db = self._conv_backward(dpre3, cache["cols3"], cache["in3"].shape, params["conv3_w"])
        grads["conv3_w"], grads["conv3_b"] = dw, db
        for i in (2, 1):
            dact = self._pool_backward(dx, cache[f"act{i}"].shape)
            dpre = dact * (cache[f"pre{i}"] > 0)
            dx, dw, db = self._conv_backward(
                dpre, cache[f"cols{i}"], cache[f"in{i}"].shape, params[f"conv{i}_w"]
            )
            grads[f"conv{i}_w"], grads[f"conv{i}_b"] = dw, db
        return loss, grads


def model_for(spec: ModelSpec):
    if spec.kind == "band_logistic":
        return _BandLogistic(spec)
    return _ReferenceConv(spec)


# --------------------------------------------------------------------------
# Training


def _patient_groups(patient_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map each frame to a dense patient index; returns (group ids, unique ids)."""
    unique, inverse = np.unique(patient_ids.astype(str), return_inverse=True)
    return inverse, unique


def patient_vote_accuracy(
    probs: np.ndarray,
    labels: np.ndarray,
    patient_ids: np.ndarray,
    threshold: float = 0.5,
) -> float:
    """Soft-voting accuracy: mean probability per patient, thresholded."""
    groups, unique = _patient_groups(patient_ids)
    sums = np.bincount(groups, weights=probs, minlength=len(unique))
    counts = np.bincount(groups, minlength=len(unique))
    label_per_patient = np.zeros(len(unique), dtype=np.int8)
    label_per_patient[groups] = labels
    predictions = (sums / counts >= threshold).astype(np.int8)
    return float(np.mean(predictions == label_per_patient))


def train(
    train_set: LabeledFrames,
    val_set: LabeledFrames,
    spec: ModelSpec,
    schedule: TrainSchedule,
    vote_channels: tuple[int, ...] | None = None,
    threshold: float = 0.5,
) -> Checkpoint:
    """Run the SGD schedule and keep the best patient-level checkpoint.

    ``vote_channels`` restricts which validation frames enter the per-patient
    soft vote (None means all frames).  Train and validation patient sets must
    be disjoint, and training data must contain both classes.
    """
    train_patients = set(map(str, train_set.patient_ids))
    val_patients = set(map(str, val_set.patient_ids))
    overlap = train_patients & val_patients
    if overlap:
        raise DisjointnessViolation(f"patients in both train and validation: {sorted(overlap)[:5]}")
    if len(np.unique(train_set.labels)) < 2:
        raise SingleClassTraining("training frames contain a single class")

    model = model_for(spec)
    rng_init = np.random.default_rng(np.random.SeedSequence([2, spec.init_seed, schedule.base_seed]))
    rng_batch = np.random.default_rng(np.random.SeedSequence([3, schedule.base_seed]))
    params = model.init_params(rng_init)
    if hasattr(model, "prepare"):
        model.prepare(params, train_set.features)

    if vote_channels is None:
        val_mask = np.ones(len(val_set.features), dtype=bool)
    else:
        val_mask = np.isin(val_set.channel_indices, np.asarray(vote_channels))
    val_X = val_set.features[val_mask]
    val_y = val_set.labels[val_mask]
    val_pids = val_set.patient_ids[val_mask]

    X, y = train_set.features, train_set.labels.astype(np.float64)
    n = len(X)
    best_epoch, best_acc, best_params = -1, -np.inf, None
    curve = []
    for epoch in range(schedule.total_epochs):
        lr = schedule.learning_rate_at(epoch)
        order = rng_batch.permutation(n)
        for start in range(0, n, schedule.batch_size):
            idx = order[start : start + schedule.batch_size]
            _loss, grads = model.loss_and_grads(params, X[idx], y[idx])
            for key in grads:
                params[key] = params[key] - lr * grads[key]
        probs = model.predict(params, val_X)
        acc = patient_vote_accuracy(probs, val_y, val_pids, threshold)
        curve.append(acc)
        if acc > best_acc:
            best_epoch, best_acc = epoch, acc
            best_params = {k: v.copy() for k, v in params.items()}
    return Checkpoint(
        spec=spec,
        epoch=best_epoch,
        params=best_params,
        val_accuracy=float(best_acc),
        val_curve=tuple(curve),
    )


def predict_proba_batch(checkpoint: Checkpoint, features: np.ndarray) -> np.ndarray:
    """Probabilities for already-featurized inputs."""
    model = model_for(checkpoint.spec)
    return model.predict(checkpoint.params, features)


def predict_proba(checkpoint: Checkpoint, frame) -> float:
    """Probability for one frame (array or SpectrogramFrame).

    Absent-flag frames are scored like any other input; their all-zero values
    carry the physical-absence semantics through the model unchanged.
    """
    values = frame.values if isinstance(frame, SpectrogramFrame) else frame
    values = np.asarray(values, dtype=np.float64)
    if values.shape != checkpoint.spec.input_shape:
        raise ShapeMismatch(
            f"expected frame of shape {checkpoint.spec.input_shape}, got {values.shape}"
        )
    model = model_for(checkpoint.spec)
    return float(model.predict(checkpoint.params, model.featurize(values[None]))[0])


def zero_checkpoint(spec: ModelSpec) -> Checkpoint:
    """Checkpoint with all parameters zero (outputs exactly 0.5 everywhere)."""
    model = model_for(spec)
    params = model.init_params(np.random.default_rng(0))
    return Checkpoint(
        spec=spec,
        epoch=-1,
        params={k: np.zeros_like(v) for k, v in params.items()},
        val_accuracy=float("nan"),
    )


# --------------------------------------------------------------------------
# Gradient verification


def gradient_check(spec: ModelSpec, seed: int = 0, max_samples_per_tensor: int = 40) -> float:
    """Compare analytic gradients against central finite differences.

    Uses a small random batch (and, for the conv model, a tiny variant of the
    architecture) and returns the maximum relative error over sampled
    parameters.
    """
    rng = np.random.default_rng(seed)
    if spec.kind == "band_logistic":
        check_spec = spec
        model = model_for(check_spec)
        X = rng.normal(size=(6, model.n_features))
    else:
        check_spec = replace(spec, conv_filters=(2, 3, 4), input_shape=(8, 16))
        model = model_for(check_spec)
        X = rng.normal(size=(3, 1, *check_spec.input_shape))
    y = rng.integers(0, 2, size=len(X)).astype(np.float64)
    params = model.init_params(rng)
    _loss, grads = model.loss_and_grads(params, X, y)

    step = 1e-5
    max_rel = 0.0
    for name, tensor in params.items():
        flat = tensor.reshape(-1)
        k = min(max_samples_per_tensor, flat.size)
        picks = rng.choice(flat.size, size=k, replace=False)
        for i in picks:
            original = flat[i]
            flat[i] = original + step
            up, _ = model.loss_and_grads(params, X, y)
            flat[i] = original - step
            down, _ = model.loss_and_grads(params, X, y)
            flat[i] = original
            numeric = (up - down) / (2 * step)
            analytic = grads[name].reshape(-1)[i]
            rel = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-8)
            max_rel = max(max_rel, rel)
    return max_rel


# --------------------------------------------------------------------------
# Checkpoint container

_CKPT_MAGIC = b"CKPT"


def checkpoint_to_bytes(checkpoint: Checkpoint) -> bytes:
    """Header (JSON) plus concatenated little-endian float32 parameter block."""
    order = sorted(checkpoint.params)
    header = {
        "kind": checkpoint.spec.kind,
        "init_seed": checkpoint.spec.init_seed,
        "conv_filters": list(checkpoint.spec.conv_filters),
        "input_shape": list(checkpoint.spec.input_shape),
        "epoch": checkpoint.epoch,
        "val_accuracy": checkpoint.val_accuracy,
        "params": [[name, list(checkpoint.params[name].shape)] for name in order],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    block = b"".join(
        np.ascontiguousarray(checkpoint.params[name], dtype="<f4").tobytes() for name in order
    )
    return _CKPT_MAGIC + struct.pack("<II", 1, len(head)) + head + block


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    if buf[:4] != _CKPT_MAGIC:
        raise ValueError("not a checkpoint container")
    version, head_len = struct.unpack_from("<II", buf, 4)
    if version != 1:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(buf[12 : 12 + head_len].decode())
    spec = ModelSpec(
        kind=header["kind"],
        init_seed=header["init_seed"],
        conv_filters=tuple(header["conv_filters"]),
        input_shape=tuple(header["input_shape"]),
    )
    params = {}
    offset = 12 + head_len
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
        params[name] = arr.reshape(shape).astype(np.float64)
        offset += 4 * count
    return Checkpoint(
        spec=spec, epoch=header["epoch"], params=params, val_accuracy=header["val_accuracy"]
    )
