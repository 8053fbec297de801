"""Patient-level aggregation, transfer analytics and channel-selection maps.

All functions here are pure read-only reductions over completed evaluation
results.  Results are duck-typed: anything with ``plan`` (carrying
``ngram_level``, ``train_populations``, ``test_population``), ``regimes``
(regime name -> patient id -> :class:`PatientPrediction`), ``test_labels``,
``n_train_patients`` and a ``ranking`` with per-fold accuracies works.
Undefined metrics are represented as ``None`` and rendered as ``N/A``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.stats

logger = logging.getLogger(__name__)


class EmptyFrameSet(ValueError):
    """A patient vote needs at least one frame probability."""


class IdMismatch(ValueError):
    """Prediction and label id sets differ."""


class MissingPlan(KeyError):
    """A required evaluation plan is absent from the results."""


class DegenerateDesign(ValueError):
    """Regression design carries no usable variation."""


@dataclass(frozen=True)
class PatientPrediction:
    """Soft-vote outcome for one patient."""

    patient_id: str
    mean_probability: float
    predicted: int
    n_frames: int


def aggregate_patient(
    frame_probs, threshold: float = 0.5, patient_id: str = ""
) -> PatientPrediction:
    """Average frame probabilities and threshold (boundary inclusive)."""
    probs = np.asarray(list(frame_probs), dtype=np.float64)
    if probs.size == 0:
        raise EmptyFrameSet(f"no frame probabilities for patient {patient_id!r}")
    mean = float(probs.mean())
    return PatientPrediction(
        patient_id=patient_id,
        mean_probability=mean,
        predicted=int(mean >= threshold),
        n_frames=int(probs.size),
    )


def patient_metrics(predictions: dict, labels: dict) -> dict:
    """Binary accuracy / recall / precision / f1 at the patient level.

    Precision is ``None`` when there are no positive predictions, recall when
    there are no positive labels; f1 is ``None`` whenever either side is.
    """
    if set(predictions) != set(labels):
        raise IdMismatch("prediction and label ids differ")
    ids = sorted(predictions)
    pred = np.asarray([predictions[i] for i in ids], dtype=np.int8)
    true = np.asarray([labels[i] for i in ids], dtype=np.int8)
    tp = int(np.sum((pred == 1) & (true == 1)))
    fp = int(np.sum((pred == 1) & (true == 0)))
    fn = int(np.sum((pred == 0) & (true == 1)))
    accuracy = float(np.mean(pred == true))
    precision = tp / (tp + fp) if tp + fp > 0 else None
    recall = tp / (tp + fn) if tp + fn > 0 else None
    if precision is None or recall is None:
        f1 = None
    elif precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return {"accuracy": accuracy, "recall": recall, "precision": precision, "f1": f1}


def result_metrics(result, regime: str) -> dict:
    """Patient metrics for one regime of one evaluation result."""
    preds = {pid: pp.predicted for pid, pp in result.regimes[regime].items()}
    return patient_metrics(preds, dict(result.test_labels))


# --------------------------------------------------------------------------
# Directional transfer


@dataclass
class TransferMatrix:
    """Directional accuracy grid: rows train populations, columns test."""

    populations: tuple[str, ...]
    values: np.ndarray
    regime: str

    def cell(self, train: str, test: str) -> float:
        i = self.populations.index(train)
        j = self.populations.index(test)
        return float(self.values[i, j])


def build_transfer_matrix(results, regime: str) -> TransferMatrix:
    """Assemble the single-source transfer grid from all level-1 plans."""
    populations = sorted(
        {r.plan.test_population for r in results}
        | {p for r in results for p in r.plan.train_populations}
    )
    index = {p: i for i, p in enumerate(populations)}
    d = len(populations)
    values = np.full((d, d), np.nan)
    seen = set()
    for result in results:
        if result.plan.ngram_level != 1:
            continue
        (train,) = result.plan.train_populations
        test = result.plan.test_population
        values[index[train], index[test]] = result_metrics(result, regime)["accuracy"]
        seen.add((train, test))
    for train in populations:
        for test in populations:
            if train != test and (train, test) not in seen:
                raise MissingPlan(f"no level-1 plan train={train} test={test}")
    return TransferMatrix(populations=tuple(populations), values=values, regime=regime)


# --------------------------------------------------------------------------
# Ordinary least squares


@dataclass(frozen=True)
class OlsFit:
    slope: float
    intercept: float
    slope_ci: tuple[float, float]
    intercept_ci: tuple[float, float]
    n: int


def ols_fit(x, y, confidence: float = 0.95) -> OlsFit:
    """Closed-form simple linear regression with t-based coefficient intervals."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be equal-length vectors")
    n = len(x)
    if len(np.unique(x)) < 2:
        raise DegenerateDesign("all design points are equal")
    xbar = x.mean()
    sxx = np.sum((x - xbar) ** 2)
    slope = float(np.sum((x - xbar) * (y - y.mean())) / sxx)
    intercept = float(y.mean() - slope * xbar)
    residuals = y - (intercept + slope * x)
    if n > 2:
        sigma2 = float(np.sum(residuals**2) / (n - 2))
        t_crit = float(scipy.stats.t.ppf(0.5 + confidence / 2, n - 2))
        se_slope = np.sqrt(sigma2 / sxx)
        se_intercept = np.sqrt(sigma2 * (1.0 / n + xbar**2 / sxx))
    else:
        t_crit, se_slope, se_intercept = 0.0, 0.0, 0.0
    return OlsFit(
        slope=slope,
        intercept=intercept,
        slope_ci=(slope - t_crit * se_slope, slope + t_crit * se_slope),
        intercept_ci=(intercept - t_crit * se_intercept, intercept + t_crit * se_intercept),
        n=n,
    )


METRIC_NAMES = ("accuracy", "recall", "precision", "f1")


def scaling_regression(results, regimes=None, metrics=METRIC_NAMES) -> dict:
    """Fit metric-vs-training-population-size lines, one per (regime, metric).

    Points pool every plan's held-out patient-level metric against the total
    patient count of its training populations; undefined metric values are
    skipped.  Requires at least three distinct training sizes.
    """
    if regimes is None:
        regimes = sorted(results[0].regimes) if results else []
    sizes = {r.n_train_patients for r in results}
    if len(sizes) < 3:
        raise DegenerateDesign(f"need >= 3 distinct training sizes, have {len(sizes)}")
    fits = {}
    for regime in regimes:
        for metric in metrics:
            xs, ys = [], []
            for result in results:
                value = result_metrics(result, regime)[metric]
                if value is None:
                    continue
                xs.append(result.n_train_patients)
                ys.append(value)
            fits[(regime, metric)] = ols_fit(xs, ys)
    return fits


def stability(results, regimes=None) -> dict:
    """Sample standard deviation of held-out accuracy per (regime, level).

    Levels with a single evaluation report ``None``.
    """
    if regimes is None:
        regimes = sorted(results[0].regimes) if results else []
    by_level: dict[tuple[str, int], list[float]] = {}
    for result in results:
        for regime in regimes:
            key = (regime, result.plan.ngram_level)
            by_level.setdefault(key, []).append(result_metrics(result, regime)["accuracy"])
    out = {}
    for key, values in sorted(by_level.items()):
        out[key] = float(np.std(values, ddof=1)) if len(values) >= 2 else None
    return out


# --------------------------------------------------------------------------
# Channel-selection maps


def top_channels(accuracies: np.ndarray, active: np.ndarray, k: int) -> tuple[int, ...]:
    """Best ``k`` active channels by accuracy; ties broken by ascending index."""
    candidates = [int(c) for c in np.flatnonzero(active) if np.isfinite(accuracies[c])]
    ranked = sorted(candidates, key=lambda c: (-accuracies[c], c))
    return tuple(ranked[:k])


def min_max_normalize(counts) -> np.ndarray:
    """Min-max scale a count vector to [0, 1]; flat vectors map to zeros."""
    values = np.asarray(counts, dtype=np.float64)
    span = values.max() - values.min()
    if span == 0.0:
        logger.warning("flat count vector: min-max normalization degenerates to zeros")
        return np.zeros_like(values)
    return (values - values.min()) / span


@dataclass
class ChannelMap:
    """Per-population selection frequencies under solo vs mixed training."""

    population_id: str
    solo_counts: np.ndarray
    mixed_counts: np.ndarray
    solo_normalized: np.ndarray
    mixed_normalized: np.ndarray
    difference: np.ndarray


def channel_maps(results, n_channels: int = 65, top_k: int = 4) -> dict[str, ChannelMap]:
    """Accumulate per-fold top-k selections into solo / mixed / difference maps.

    A plan contributes one top-k set per inner fold (ranked by that fold's
    per-channel accuracy).  Solo maps count plans whose training set is
    exactly the population; mixed maps count every plan containing it.
    """
    populations = sorted({p for r in results for p in r.plan.train_populations})
    solo = {p: np.zeros(n_channels) for p in populations}
    mixed = {p: np.zeros(n_channels) for p in populations}
    for result in results:
        fold_acc = np.asarray(result.ranking.fold_accuracy, dtype=np.float64)
        active = np.asarray(result.ranking.active, dtype=bool)
        train_pops = result.plan.train_populations
        for fold_index in range(fold_acc.shape[1]):
            selected = top_channels(fold_acc[:, fold_index], active, top_k)
            for channel in selected:
                for p in train_pops:
                    mixed[p][channel] += 1
                if len(train_pops) == 1:
                    solo[train_pops[0]][channel] += 1
    maps = {}
    for p in populations:
        solo_norm = min_max_normalize(solo[p])
        mixed_norm = min_max_normalize(mixed[p])
        maps[p] = ChannelMap(
            population_id=p,
            solo_counts=solo[p],
            mixed_counts=mixed[p],
            solo_normalized=solo_norm,
            mixed_normalized=mixed_norm,
            difference=solo_norm - mixed_norm,
        )
    return maps


# --------------------------------------------------------------------------
# Flat SVG scalp rendering


def _schematic_positions(montage) -> dict[str, tuple[float, float]]:
    from .montage import SCHEMATIC_ROWS

    positions = {}
    n_rows = len(SCHEMATIC_ROWS)
    for r, row in enumerate(SCHEMATIC_ROWS):
        y = (r + 0.5) / n_rows
        for i, label in enumerate(row):
            x = (i + 0.5) / len(row)
            positions[label] = (x, y)
    return positions


def _heat_color(v: float) -> str:
    v = min(max(v, 0.0), 1.0)
    r = 255
    g = int(round(255 * (1.0 - v)))
    b = int(round(255 * (1.0 - v)))
    return f"#{r:02x}{g:02x}{b:02x}"


def _diverging_color(v: float) -> str:
    v = min(max(v, -1.0), 1.0)
    if v >= 0:
        other = int(round(255 * (1.0 - v)))
        return f"#ff{other:02x}{other:02x}"
    other = int(round(255 * (1.0 + v)))
    return f"#{other:02x}{other:02x}ff"


def render_channel_map_svg(
    values: np.ndarray, montage, title: str, diverging: bool = False, size: int = 480
) -> str:
    """Flat disc layout: one circle per channel, color-coded by value.

    Diverging maps use data-true limits [-1, 1]; sequential maps use [0, 1].
    """
    positions = _schematic_positions(montage)
    color = _diverging_color if diverging else _heat_color
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 24}" '
        f'viewBox="0 0 {size} {size + 24}">',
        f'<title>{title}</title>',
        f'<text x="{size // 2}" y="16" text-anchor="middle" font-size="13">{title}</text>',
    ]
    for label in montage.labels:
        x, y = positions[label]
        cx = round(x * size, 1)
        cy = round(24 + y * size, 1)
        v = float(values[montage.index_of[label]])
        parts.append(
            f'<circle cx="{cx}" cy="{cy}" r="{size / 34:.1f}" fill="{color(v)}" stroke="#444"/>'
        )
        parts.append(
            f'<text x="{cx}" y="{cy + 3}" text-anchor="middle" font-size="7">{label}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
