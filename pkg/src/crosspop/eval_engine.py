"""Train/test enumeration and nested patient-level cross-validation.

For D populations, every training subset of size n (1 <= n <= D-1) is paired
with every remaining population as an independent held-out test set, giving
sum_n C(D, n) * (D - n) ordered evaluation plans.  Within a plan, a 5-fold
patient-level inner loop scores every active channel independently; channels
are ranked by their mean inner validation accuracy and the top-K prefixes
form the reduced inference regimes.  One final model is then trained on the
first fold's training patients (checkpointed on that fold's validation
patients under the top-4 vote) and evaluated exactly once on the held-out
population under each regime.  Channel selection therefore never sees the
held-out population; runtime assertions enforce this.

All randomness flows from one base seed through :func:`derive_seed`, so a
full run is reproducible bit-for-bit regardless of execution order.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, replace

import numpy as np

from . import analytics, classifier, signal_pipeline
from .cohort_store import CohortManifest, read_recording
from .montage import Montage, RawRecording, align

logger = logging.getLogger(__name__)


class TooFewPatients(ValueError):
    """Not enough training patients for the requested fold count."""


class SingleClassPopulation(ValueError):
    """A training population lacks one of the two classes."""


class LeakageDetected(RuntimeError):
    """Held-out data reached the training side of an evaluation (fatal)."""


# --------------------------------------------------------------------------
# Seeds

SEED_SLOT_FOLD_ASSIGNMENT = 90
SEED_SLOT_FINAL_MODEL = 91
_MAX_FOLD_SLOT = 100
_MAX_PLAN_INDEX = 10_000


def derive_seed(base_seed: int, plan_index: int, fold_index: int) -> int:
    """Deterministic, injective seed for a (plan, fold) pair.

    Defined as ``base * 1_000_000 + plan_index * 100 + fold_index``; fold
    slots 0..k-1 are the inner folds, 90 the fold assignment and 91 the final
    model.  The value for (10, 0, 0) is 10_000_000 and is pinned forever.
    """
    if not 0 <= fold_index < _MAX_FOLD_SLOT:
        raise ValueError(f"fold_index must be in [0, {_MAX_FOLD_SLOT}), got {fold_index}")
    if not 0 <= plan_index < _MAX_PLAN_INDEX:
        raise ValueError(f"plan_index must be in [0, {_MAX_PLAN_INDEX}), got {plan_index}")
    if base_seed < 0:
        raise ValueError("base_seed must be nonnegative")
    return base_seed * 1_000_000 + plan_index * 100 + fold_index


# --------------------------------------------------------------------------
# Plan enumeration


@dataclass(frozen=True)
class EvaluationPlan:
    """One ordered (training populations, held-out population) pair."""

    ngram_level: int
    train_populations: tuple[str, ...]
    test_population: str
    plan_index: int
    base_seed: int = 10


def enumerate_plans(populations, base_seed: int = 10) -> list[EvaluationPlan]:
    """All plans in deterministic lexicographic order.

    ``populations`` is either a population-id sequence or an integer D (ids
    are then synthesized).  Levels run 1..D-1; the all-population training
    case is excluded by construction.
    """
    if isinstance(populations, int):
        ids = tuple(f"pop{i + 1}" for i in range(populations))
    else:
        ids = tuple(sorted(populations))
        if len(set(ids)) != len(ids):
            raise ValueError("population ids must be unique")
    d = len(ids)
    if d < 2:
        raise ValueError("need at least two populations")
    plans = []
    index = 0
    for n in range(1, d):
        for subset in itertools.combinations(ids, n):
            for test in ids:
                if test in subset:
                    continue
                plans.append(
                    EvaluationPlan(
                        ngram_level=n,
                        train_populations=subset,
                        test_population=test,
                        plan_index=index,
                        base_seed=base_seed,
                    )
                )
                index += 1
    return plans


# --------------------------------------------------------------------------
# Inner folds


@dataclass(frozen=True)
class FoldAssignment:
    fold_index: int
    train_patients: tuple[str, ...]
    val_patients: tuple[str, ...]


def make_inner_folds(
    plan: EvaluationPlan, manifests: dict[str, CohortManifest], k: int = 5
) -> list[FoldAssignment]:
    """Label- and population-stratified patient partition into k folds.

    Patients are dealt per (population, label) cell from a shuffle seeded by
    the plan, with a rotating offset so cell remainders spread across folds.
    All recordings of a patient stay on the same side of every fold.
    """
    rng = np.random.default_rng(derive_seed(plan.base_seed, plan.plan_index, SEED_SLOT_FOLD_ASSIGNMENT))
    cells: list[list[str]] = []
    total = 0
    for pop in plan.train_populations:
        manifest = manifests[pop]
        by_label = {0: [], 1: []}
        for patient in manifest.patients:
            by_label[patient.label].append(patient.patient_id)
        for label in (0, 1):
            if not by_label[label]:
                raise SingleClassPopulation(f"population {pop} has no label-{label} patients")
        total += manifest.n_patients
        for label in (0, 1):
            cells.append(sorted(by_label[label]))
    if total < k:
        raise TooFewPatients(f"{total} training patients cannot fill {k} folds")
    val_sets: list[list[str]] = [[] for _ in range(k)]
    offset = 0
    for cell in cells:
        order = list(cell)
        rng.shuffle(order)
        for i, patient_id in enumerate(order):
            val_sets[(offset + i) % k].append(patient_id)
        offset += 1
    all_patients = sorted(pid for cell in cells for pid in cell)
    folds = []
    for fold_index in range(k):
        val = tuple(sorted(val_sets[fold_index]))
        train = tuple(pid for pid in all_patients if pid not in set(val))
        folds.append(FoldAssignment(fold_index=fold_index, train_patients=train, val_patients=val))
    return folds


# --------------------------------------------------------------------------
# Frame store


@dataclass
class PatientFrames:
    """Featurized frames of one patient: (channels, windows, features...)."""

    population_id: str
    patient_id: str
    label: int
    features: np.ndarray
    live: np.ndarray
    presence: np.ndarray


class FrameStore:
    """In-memory featurized corpus, keyed by patient id.

    Recordings are loaded once, resampled to the pipeline rate, aligned onto
    the montage, preprocessed into frames and immediately featurized for the
    configured model kind, so the evaluation loops touch only small arrays.
    Absent channels keep all-zero feature rows (the featurization of an
    all-zero frame), preserving physical-absence semantics in every vote.
    """

    def __init__(
        self,
        manifests: list[CohortManifest],
        montage: Montage,
        pipeline_cfg: signal_pipeline.PipelineConfig,
        model_spec: classifier.ModelSpec,
    ):
        self.montage = montage
        self.pipeline_cfg = pipeline_cfg
        self.model_spec = model_spec
        self.manifests = {m.population_id: m for m in manifests}
        self.populations = tuple(sorted(self.manifests))
        self.patients: dict[str, PatientFrames] = {}
        self.patients_by_population: dict[str, tuple[str, ...]] = {}
        model = classifier.model_for(model_spec)
        for pop in self.populations:
            manifest = self.manifests[pop]
            ids = []
            for patient in sorted(manifest.patients, key=lambda p: p.patient_id):
                self.patients[patient.patient_id] = self._load_patient(manifest, patient, model)
                ids.append(patient.patient_id)
            self.patients_by_population[pop] = tuple(ids)

    def _load_patient(self, manifest: CohortManifest, patient, model) -> PatientFrames:
        per_recording = []
        presence_any = np.zeros(len(self.montage), dtype=bool)
        for rel in patient.recordings:
            channels, rate = read_recording(manifest.recording_path(rel))
            raw = RawRecording(
                population_id=manifest.population_id,
                patient_id=patient.patient_id,
                label=patient.label,
                sample_rate_hz=rate,
                channels=channels,
            )
            resampled = signal_pipeline.resample_recording(raw, self.pipeline_cfg.target_rate_hz)
            aligned = align(resampled, self.montage)
            presence_any |= aligned.presence
            frames = signal_pipeline.preprocess(aligned, self.pipeline_cfg)
            n_channels = len(self.montage)
            n_windows = len(frames) // n_channels
            values = np.stack([np.asarray(f.values, dtype=np.float64) for f in frames])
            feats = model.featurize(values)
            feats = feats.reshape(n_channels, n_windows, *feats.shape[1:])
            live = np.asarray([not f.absent_flag for f in frames], dtype=bool)
            per_recording.append((feats, live.reshape(n_channels, n_windows)))
        features = np.concatenate([f for f, _ in per_recording], axis=1)
        live = np.concatenate([l for _, l in per_recording], axis=1)
        return PatientFrames(
            population_id=manifest.population_id,
            patient_id=patient.patient_id,
            label=patient.label,
            features=features,
            live=live,
            presence=presence_any,
        )

    def label_of(self, patient_id: str) -> int:
        return self.patients[patient_id].label

    def n_patients(self, population_id: str) -> int:
        return len(self.patients_by_population[population_id])

    def active_channels(self, populations) -> np.ndarray:
        """Channels present in at least one training recording."""
        active = np.zeros(len(self.montage), dtype=bool)
        for pop in populations:
            for pid in self.patients_by_population[pop]:
                active |= self.patients[pid].presence
        return active

    def labeled_frames(self, patient_ids, channels) -> classifier.LabeledFrames:
        """Flatten the stored features of given patients and channel indices."""
        channels = np.asarray(sorted(channels), dtype=np.int64)
        feats, labels, pids, chans = [], [], [], []
        for pid in sorted(patient_ids):
            pf = self.patients[pid]
            block = pf.features[channels]
            n_windows = block.shape[1]
            feats.append(block.reshape(-1, *block.shape[2:]))
            count = len(channels) * n_windows
            labels.append(np.full(count, pf.label, dtype=np.int8))
            pids.extend([pid] * count)
            chans.append(np.repeat(channels, n_windows).astype(np.int32))
        return classifier.LabeledFrames(
            features=np.concatenate(feats),
            labels=np.concatenate(labels),
            patient_ids=np.asarray(pids, dtype=object),
            channel_indices=np.concatenate(chans),
        )


# --------------------------------------------------------------------------
# Channel ranking


@dataclass
class ChannelRanking:
    """Per-channel inner-loop accuracies and the derived top-K subsets."""

    mean_accuracy: np.ndarray
    fold_accuracy: np.ndarray
    active: np.ndarray
    ranked: tuple[int, ...]
    selected: dict[int, tuple[int, ...]]


def rank_channels(
    plan: EvaluationPlan,
    folds: list[FoldAssignment],
    store: FrameStore,
    inner_spec: classifier.ModelSpec,
    schedule: classifier.TrainSchedule,
    k_subsets=(2, 4, 8),
    threshold: float = 0.5,
) -> ChannelRanking:
    """Score every active channel on every fold and rank by mean accuracy.

    Each (channel, fold) pair trains an independent model on that channel's
    frames from the fold's training patients and records patient-level
    validation accuracy of its best checkpoint.  Ties in the mean ranking
    break toward the lower montage index.
    """
    n_channels = len(store.montage)
    active = store.active_channels(plan.train_populations)
    fold_accuracy = np.full((n_channels, len(folds)), np.nan)
    for channel in np.flatnonzero(active):
        channel = int(channel)
        for fold in folds:
            fold_seed = derive_seed(plan.base_seed, plan.plan_index, fold.fold_index)
            ckpt = classifier.train(
                store.labeled_frames(fold.train_patients, [channel]),
                store.labeled_frames(fold.val_patients, [channel]),
                inner_spec,
                replace(schedule, base_seed=fold_seed),
                vote_channels=(channel,),
                threshold=threshold,
            )
            fold_accuracy[channel, fold.fold_index] = ckpt.val_accuracy
    mean_accuracy = np.full(n_channels, np.nan)
    mean_accuracy[active] = fold_accuracy[active].mean(axis=1)
    ranked = analytics.top_channels(mean_accuracy, active, n_channels)
    selected = {int(k): ranked[:k] for k in k_subsets}
    return ChannelRanking(
        mean_accuracy=mean_accuracy,
        fold_accuracy=fold_accuracy,
        active=active,
        ranked=ranked,
        selected=selected,
    )


# --------------------------------------------------------------------------
# Plan execution


@dataclass
class EvaluationResult:
    """Everything produced by one outer evaluation."""

    plan: EvaluationPlan
    n_train_patients: int
    folds: list[FoldAssignment]
    ranking: ChannelRanking
    regimes: dict[str, dict[str, analytics.PatientPrediction]]
    test_labels: dict[str, int]
    seeds: dict[str, int]
    checkpoint_epoch: int
    checkpoint_val_accuracy: float
    val_curve: tuple[float, ...]


def _assert_no_leakage(plan: EvaluationPlan, folds, store: FrameStore) -> None:
    test_patients = set(store.patients_by_population[plan.test_population])
    for fold in folds:
        train, val = set(fold.train_patients), set(fold.val_patients)
        if train & val:
            raise LeakageDetected(
                f"plan {plan.plan_index}: fold {fold.fold_index} has train/validation overlap"
            )
        if (train | val) & test_patients:
            raise LeakageDetected(
                f"plan {plan.plan_index}: held-out patients present in fold {fold.fold_index}"
            )
    train_pop_patients = {
        pid for pop in plan.train_populations for pid in store.patients_by_population[pop]
    }
    covered = set().union(*(set(f.val_patients) for f in folds))
    if covered != train_pop_patients:
        raise LeakageDetected(
            f"plan {plan.plan_index}: fold validation sets do not partition the training patients"
        )


def run_plan(plan: EvaluationPlan, store: FrameStore, config) -> EvaluationResult:
    """Execute one plan end to end.

    ``config`` supplies ``model_spec``, ``inner_model_spec``, ``schedule``,
    ``k_subsets``, ``inner_folds`` and ``threshold`` (see the run
    configuration in :mod:`crosspop.cli`).
    """
    folds = make_inner_folds(plan, store.manifests, config.inner_folds)
    _assert_no_leakage(plan, folds, store)
    ranking = rank_channels(
        plan,
        folds,
        store,
        config.inner_model_spec,
        config.schedule,
        k_subsets=config.k_subsets,
        threshold=config.threshold,
    )
    all_channels = tuple(range(len(store.montage)))
    final_seed = derive_seed(plan.base_seed, plan.plan_index, SEED_SLOT_FINAL_MODEL)
    first_fold = folds[0]
    checkpoint = classifier.train(
        store.labeled_frames(first_fold.train_patients, all_channels),
        store.labeled_frames(first_fold.val_patients, all_channels),
        config.model_spec,
        replace(config.schedule, base_seed=final_seed),
        vote_channels=ranking.selected.get(4, ranking.ranked[:4]),
        threshold=config.threshold,
    )

    test_patients = store.patients_by_population[plan.test_population]
    regime_channels: dict[str, tuple[int, ...]] = {"baseline": all_channels}
    for k in config.k_subsets:
        regime_channels[f"top{k}"] = ranking.selected[int(k)]
    regimes: dict[str, dict[str, analytics.PatientPrediction]] = {}
    for regime, channels in regime_channels.items():
        predictions = {}
        for pid in test_patients:
            frames = store.labeled_frames([pid], channels)
            probs = classifier.predict_proba_batch(checkpoint, frames.features)
            predictions[pid] = analytics.aggregate_patient(probs, config.threshold, pid)
        regimes[regime] = predictions

    seeds = {
        "fold_assignment": derive_seed(plan.base_seed, plan.plan_index, SEED_SLOT_FOLD_ASSIGNMENT),
        "final_model": final_seed,
    }
    for fold in folds:
        seeds[f"fold{fold.fold_index}"] = derive_seed(plan.base_seed, plan.plan_index, fold.fold_index)
    return EvaluationResult(
        plan=plan,
        n_train_patients=sum(store.n_patients(p) for p in plan.train_populations),
        folds=folds,
        ranking=ranking,
        regimes=regimes,
        test_labels={pid: store.label_of(pid) for pid in test_patients},
        seeds=seeds,
        checkpoint_epoch=checkpoint.epoch,
        checkpoint_val_accuracy=checkpoint.val_accuracy,
        val_curve=checkpoint.val_curve,
    )


# --------------------------------------------------------------------------
# Result (de)serialization


def _nan_to_none(values) -> list:
    return [None if not np.isfinite(v) else float(v) for v in values]


def result_to_payload(result: EvaluationResult) -> dict:
    """Canonical JSON-compatible form of an evaluation result."""
    return {
        "plan": {
            "plan_index": result.plan.plan_index,
            "ngram_level": result.plan.ngram_level,
            "train_populations": list(result.plan.train_populations),
            "test_population": result.plan.test_population,
            "base_seed": result.plan.base_seed,
        },
        "n_train_patients": result.n_train_patients,
        "folds": [
            {
                "fold_index": f.fold_index,
                "train_patients": list(f.train_patients),
                "val_patients": list(f.val_patients),
            }
            for f in result.folds
        ],
        "ranking": {
            "active": [bool(a) for a in result.ranking.active],
            "mean_accuracy": _nan_to_none(result.ranking.mean_accuracy),
            "fold_accuracy": [_nan_to_none(row) for row in result.ranking.fold_accuracy],
            "ranked": list(result.ranking.ranked),
            "selected": {str(k): list(v) for k, v in result.ranking.selected.items()},
        },
        "regimes": {
            regime: {
                pid: {
                    "mean_probability": p.mean_probability,
                    "predicted": p.predicted,
                    "n_frames": p.n_frames,
                }
                for pid, p in sorted(predictions.items())
            }
            for regime, predictions in sorted(result.regimes.items())
        },
        "test_labels": dict(sorted(result.test_labels.items())),
        "seeds": dict(sorted(result.seeds.items())),
        "final_model": {
            "checkpoint_epoch": result.checkpoint_epoch,
            "checkpoint_val_accuracy": result.checkpoint_val_accuracy,
            "val_curve": list(result.val_curve),
        },
    }


def result_from_payload(payload: dict) -> EvaluationResult:
    plan = EvaluationPlan(
        ngram_level=payload["plan"]["ngram_level"],
        train_populations=tuple(payload["plan"]["train_populations"]),
        test_population=payload["plan"]["test_population"],
        plan_index=payload["plan"]["plan_index"],
        base_seed=payload["plan"]["base_seed"],
    )
    folds = [
        FoldAssignment(
            fold_index=f["fold_index"],
            train_patients=tuple(f["train_patients"]),
            val_patients=tuple(f["val_patients"]),
        )
        for f in payload["folds"]
    ]
    rk = payload["ranking"]
    to_nan = lambda xs: np.asarray([np.nan if x is None else x for x in xs], dtype=np.float64)
    ranking = ChannelRanking(
        mean_accuracy=to_nan(rk["mean_accuracy"]),
        fold_accuracy=np.stack([to_nan(row) for row in rk["fold_accuracy"]]),
        active=np.asarray(rk["active"], dtype=bool),
        ranked=tuple(rk["ranked"]),
        selected={int(k): tuple(v) for k, v in rk["selected"].items()},
    )
    regimes = {
        regime: {
            pid: analytics.PatientPrediction(
                patient_id=pid,
                mean_probability=p["mean_probability"],
                predicted=p["predicted"],
                n_frames=p["n_frames"],
            )
            for pid, p in predictions.items()
        }
        for regime, predictions in payload["regimes"].items()
    }
    return EvaluationResult(
        plan=plan,
        n_train_patients=payload["n_train_patients"],
        folds=folds,
        ranking=ranking,
        regimes=regimes,
        test_labels={k: int(v) for k, v in payload["test_labels"].items()},
        seeds={k: int(v) for k, v in payload["seeds"].items()},
        checkpoint_epoch=payload["final_model"]["checkpoint_epoch"],
        checkpoint_val_accuracy=payload["final_model"]["checkpoint_val_accuracy"],
        val_curve=tuple(payload["final_model"]["val_curve"]),
    )
