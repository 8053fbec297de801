"""Reference electrode montage and alignment of heterogeneous recordings onto it.

The canonical montage is a 65-label extension of the clinical 10-20 layout
(including the inferior occipital electrode Iz).  The literal label list below
is normative for this repository: row order runs anterior to posterior, and
within each row labels run left to right (odd-numbered left hemisphere, the
``z`` midline, even-numbered right hemisphere).  AFz is excluded because it
serves as the ground position in the 64-channel caps this layout mirrors.

Recordings acquired with a site-specific channel subset are aligned onto the
reference by placing each supplied channel at its reference row and leaving
missing rows identically zero, so the physical absence of a sensor stays
visible downstream.  No interpolation is performed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class UnknownChannelLabel(ValueError):
    """A recording declared a channel label that is not in the montage."""


class InconsistentChannelLengths(ValueError):
    """Channels of one recording do not all have the same sample count."""


#: Normative row structure, anterior to posterior.  Flattening these rows in
#: order yields the canonical channel indices 0..64.
SCHEMATIC_ROWS: tuple[tuple[str, ...], ...] = (
    ("Fp1", "Fpz", "Fp2"),
    ("AF7", "AF3", "AF4", "AF8"),
    ("F7", "F5", "F3", "F1", "Fz", "F2", "F4", "F6", "F8"),
    ("FT9", "FT7", "FC5", "FC3", "FC1", "FCz", "FC2", "FC4", "FC6", "FT8", "FT10"),
    ("T7", "C5", "C3", "C1", "Cz", "C2", "C4", "C6", "T8"),
    ("TP9", "TP7", "CP5", "CP3", "CP1", "CPz", "CP2", "CP4", "CP6", "TP8", "TP10"),
    ("P7", "P5", "P3", "P1", "Pz", "P2", "P4", "P6", "P8"),
    ("PO7", "PO3", "POz", "PO4", "PO8"),
    ("O1", "Oz", "O2"),
    ("Iz",),
)

REFERENCE_LABELS: tuple[str, ...] = tuple(
    label for row in SCHEMATIC_ROWS for label in row
)

_REGION_BY_PREFIX = {
    "Fp": "frontal",
    "AF": "frontal",
    "F": "frontal",
    "FT": "temporal",
    "FC": "central",
    "T": "temporal",
    "C": "central",
    "TP": "temporal",
    "CP": "central",
    "P": "parietal",
    "PO": "occipital",
    "O": "occipital",
    "I": "midline-extension",
}


def hemisphere_of(label: str) -> str:
    """Classify a channel label as ``left``, ``midline`` or ``right``.

    Labels ending in ``z`` are midline; otherwise the trailing electrode
    number decides (odd left, even right), following the 10-20 convention.
    """
    if label.lower().endswith("z"):
        return "midline"
    digits = ""
    for ch in reversed(label):
        if ch.isdigit():
            digits = ch + digits
        else:
            break
    if not digits:
        raise UnknownChannelLabel(f"label {label!r} has neither a number nor a z suffix")
    return "left" if int(digits) % 2 == 1 else "right"


def _region_of(label: str) -> str:
    stem = label.rstrip("0123456789").rstrip("z")
    # Longest-prefix match so e.g. "FC1" resolves to FC, not F.
    for prefix in sorted(_REGION_BY_PREFIX, key=len, reverse=True):
        if stem == prefix:
            return _REGION_BY_PREFIX[prefix]
    raise UnknownChannelLabel(f"label {label!r} has no known region prefix")


@dataclass(frozen=True)
class Montage:
    """Immutable channel set with a canonical index for every label."""

    labels: tuple[str, ...]
    index_of: dict[str, int] = field(repr=False)
    region_of: dict[str, str] = field(repr=False)
    _by_lower: dict[str, str] = field(repr=False)

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label: str) -> bool:
        return label.lower() in self._by_lower

    def canonical(self, label: str) -> str:
        """Return the canonical capitalization of ``label`` (case-insensitive)."""
        try:
            return self._by_lower[label.lower()]
        except KeyError:
            raise UnknownChannelLabel(f"channel {label!r} is not in the montage") from None

    def index(self, label: str) -> int:
        return self.index_of[self.canonical(label)]

    def region(self, label: str) -> str:
        return self.region_of[self.canonical(label)]

    def hemisphere(self, label: str) -> str:
        return hemisphere_of(self.canonical(label))

    def table(self) -> str:
        """Render the montage as a tab-separated table (index, label, region, hemisphere)."""
        lines = ["index\tlabel\tregion\themisphere"]
        for i, label in enumerate(self.labels):
            lines.append(f"{i}\t{label}\t{self.region_of[label]}\t{hemisphere_of(label)}")
        return "\n".join(lines) + "\n"


def build_reference_montage() -> Montage:
    """Build the canonical 65-channel reference montage."""
    labels = REFERENCE_LABELS
    index_of = {label: i for i, label in enumerate(labels)}
    region_of = {label: _region_of(label) for label in labels}
    by_lower = {label.lower(): label for label in labels}
    assert len(labels) == 65 and len(index_of) == 65
    return Montage(labels=labels, index_of=index_of, region_of=region_of, _by_lower=by_lower)


@dataclass
class RawRecording:
    """One multi-channel recording as acquired at a site.

    ``channels`` maps channel labels to equally long sample vectors at
    ``sample_rate_hz``.  ``label`` is the patient-level binary class.
    """

    population_id: str
    patient_id: str
    label: int
    sample_rate_hz: float
    channels: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if not self.sample_rate_hz > 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if not self.channels:
            raise ValueError("recording has no channels")
        lengths = {label: len(vec) for label, vec in self.channels.items()}
        if len(set(lengths.values())) > 1:
            raise InconsistentChannelLengths(f"per-channel lengths differ: {lengths}")

    @property
    def n_samples(self) -> int:
        return len(next(iter(self.channels.values())))

    @property
    def duration_seconds(self) -> float:
        return self.n_samples / self.sample_rate_hz


@dataclass
class AlignedRecording:
    """A recording placed on the reference montage.

    ``matrix`` has one row per reference channel; rows whose ``presence`` bit
    is False are identically zero.
    """

    matrix: np.ndarray
    presence: np.ndarray
    patient_id: str
    population_id: str
    label: int


def align(recording: RawRecording, montage: Montage) -> AlignedRecording:
    """Place a recording's channels at their reference indices, zero elsewhere.

    Unknown labels are an error: silently dropping them would hide
    site-montage mistakes.
    """
    n = len(montage)
    matrix = np.zeros((n, recording.n_samples), dtype=np.float64)
    presence = np.zeros(n, dtype=bool)
    for label, samples in recording.channels.items():
        canonical = montage.canonical(label)
        row = montage.index_of[canonical]
        if presence[row]:
            raise ValueError(f"channel {canonical} supplied more than once")
        matrix[row] = np.asarray(samples, dtype=np.float64)
        presence[row] = True
    return AlignedRecording(
        matrix=matrix,
        presence=presence,
        patient_id=recording.patient_id,
        population_id=recording.population_id,
        label=recording.label,
    )
