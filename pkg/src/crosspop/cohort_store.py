"""Multi-population corpus handling: manifests, recording files, synthesis.

A corpus is a set of populations, each described by a JSON manifest that
lists patients, their binary labels and their recording files.  Recordings
use a small binary container (see :func:`write_recording`).  The synthetic
generator builds corpora with a planted, band-limited disease signal on a
known channel subset plus site-specific nuisance structure (spectral tilt,
a site tone, gain), so pipeline behavior can be verified against ground
truth at desk scale.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .montage import REFERENCE_LABELS, RawRecording

logger = logging.getLogger(__name__)


class ParseError(ValueError):
    """Manifest file is malformed."""


class DuplicatePatient(ValueError):
    """The same patient id occurs more than once."""


class MissingRecording(FileNotFoundError):
    """A manifest references a recording file that does not exist."""


# --------------------------------------------------------------------------
# Recording container

_RECORDING_MAGIC = b"EEGR"
_RECORDING_HEADER = struct.Struct("<4sIIQd")


def write_recording(path: Path | str, channels: dict[str, np.ndarray], sample_rate_hz: float) -> None:
    """Write a recording container.

    Layout: magic, version, channel count, sample count, rate; a label block
    (u8 length + ascii bytes per channel); then row-major little-endian
    float32 samples in label-block order.
    """
    labels = list(channels)
    n_samples = {len(v) for v in channels.values()}
    if len(n_samples) != 1:
        raise ValueError("all channels must have the same length")
    (n,) = n_samples
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_RECORDING_HEADER.pack(_RECORDING_MAGIC, 1, len(labels), n, float(sample_rate_hz)))
        for label in labels:
            raw = label.encode("ascii")
            fh.write(struct.pack("<B", len(raw)))
            fh.write(raw)
        block = np.vstack([np.asarray(channels[label], dtype="<f4") for label in labels])
        fh.write(np.ascontiguousarray(block).tobytes())


def read_recording_header(path: Path | str) -> tuple[list[str], int, float]:
    """Read only labels, sample count and rate (cheap duration checks)."""
    with open(path, "rb") as fh:
        header = fh.read(_RECORDING_HEADER.size)
        if len(header) < _RECORDING_HEADER.size:
            raise ParseError(f"{path}: truncated recording header")
        magic, version, n_channels, n_samples, rate = _RECORDING_HEADER.unpack(header)
        if magic != _RECORDING_MAGIC:
            raise ParseError(f"{path}: not a recording container")
        if version != 1:
            raise ParseError(f"{path}: unsupported container version {version}")
        labels = []
        for _ in range(n_channels):
            (ln,) = struct.unpack("<B", fh.read(1))
            labels.append(fh.read(ln).decode("ascii"))
        return labels, n_samples, rate


def read_recording(path: Path | str) -> tuple[dict[str, np.ndarray], float]:
    """Read a full recording container; returns (channels, sample rate)."""
    labels, n_samples, rate = read_recording_header(path)
    with open(path, "rb") as fh:
        offset = _RECORDING_HEADER.size + sum(1 + len(l.encode("ascii")) for l in labels)
        fh.seek(offset)
        data = np.frombuffer(fh.read(), dtype="<f4")
    expected = len(labels) * n_samples
    if data.size != expected:
        raise ParseError(f"{path}: expected {expected} samples, found {data.size}")
    block = data.reshape(len(labels), n_samples).astype(np.float64)
    return {label: block[i] for i, label in enumerate(labels)}, rate


def recording_duration_seconds(path: Path | str) -> float:
    _labels, n_samples, rate = read_recording_header(path)
    return n_samples / rate


# --------------------------------------------------------------------------
# Manifests


@dataclass(frozen=True)
class PatientEntry:
    patient_id: str
    label: int
    recordings: tuple[str, ...]


@dataclass(frozen=True)
class CohortManifest:
    """One population: its patients, site montage, and recording files."""

    population_id: str
    sample_rate_hz: float
    site_montage: tuple[str, ...]
    patients: tuple[PatientEntry, ...]
    ground_truth: dict | None = None
    root: Path = field(default_factory=Path, compare=False)

    @property
    def n_patients(self) -> int:
        return len(self.patients)

    def label_counts(self) -> tuple[int, int]:
        n1 = sum(p.label for p in self.patients)
        return len(self.patients) - n1, n1

    def recording_path(self, relative: str) -> Path:
        return self.root / relative


def _manifest_payload(manifest: CohortManifest) -> dict:
    payload = {
        "population_id": manifest.population_id,
        "sample_rate_hz": manifest.sample_rate_hz,
        "site_montage": list(manifest.site_montage),
        "patients": [
            {"patient_id": p.patient_id, "label": p.label, "recordings": list(p.recordings)}
            for p in manifest.patients
        ],
    }
    if manifest.ground_truth is not None:
        payload["ground_truth"] = manifest.ground_truth
    return payload


def write_manifest(manifest: CohortManifest, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_manifest_payload(manifest), indent=2, sort_keys=True) + "\n"
    path.write_text(text)


def load_manifest(path: Path | str) -> CohortManifest:
    """Load and fully validate one manifest."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    try:
        patients = []
        seen: set[str] = set()
        for entry in payload["patients"]:
            pid = entry["patient_id"]
            if pid in seen:
                raise DuplicatePatient(f"{path}: patient {pid!r} listed twice")
            seen.add(pid)
            label = entry["label"]
            if label not in (0, 1):
                raise ParseError(f"{path}: patient {pid!r} has label {label!r}")
            recordings = tuple(entry["recordings"])
            if not recordings:
                raise ParseError(f"{path}: patient {pid!r} has no recordings")
            patients.append(PatientEntry(patient_id=pid, label=int(label), recordings=recordings))
        manifest = CohortManifest(
            population_id=payload["population_id"],
            sample_rate_hz=float(payload["sample_rate_hz"]),
            site_montage=tuple(payload["site_montage"]),
            patients=tuple(patients),
            ground_truth=payload.get("ground_truth"),
            root=path.parent,
        )
    except KeyError as exc:
        raise ParseError(f"{path}: missing field {exc}") from exc
    for patient in manifest.patients:
        for rel in patient.recordings:
            full = manifest.recording_path(rel)
            if not full.is_file():
                raise MissingRecording(f"{path}: recording {full} does not exist")
    return manifest


def load_corpus(manifest_paths: list[Path | str]) -> list[CohortManifest]:
    """Load several manifests and enforce globally unique patient ids."""
    manifests = [load_manifest(p) for p in manifest_paths]
    seen: dict[str, str] = {}
    for m in manifests:
        for p in m.patients:
            if p.patient_id in seen:
                raise DuplicatePatient(
                    f"patient {p.patient_id!r} appears in both {seen[p.patient_id]} and {m.population_id}"
                )
            seen[p.patient_id] = m.population_id
    return manifests


def filter_eligible(manifest: CohortManifest, min_seconds: float = 30.0) -> CohortManifest:
    """Drop recordings shorter than ``min_seconds`` (inclusive boundary).

    A recording of exactly ``min_seconds`` is retained.  Patients left with
    no recordings are dropped; removals are logged.
    """
    kept_patients = []
    for patient in manifest.patients:
        kept = []
        for rel in patient.recordings:
            duration = recording_duration_seconds(manifest.recording_path(rel))
            if duration >= min_seconds:
                kept.append(rel)
            else:
                logger.info(
                    "excluding %s/%s (%.2f s < %.2f s)",
                    manifest.population_id, rel, duration, min_seconds,
                )
        if kept:
            kept_patients.append(replace(patient, recordings=tuple(kept)))
        else:
            logger.info(
                "excluding patient %s of %s: no eligible recordings",
                patient.patient_id, manifest.population_id,
            )
    return replace(manifest, patients=tuple(kept_patients))


# --------------------------------------------------------------------------
# Synthetic corpora


@dataclass(frozen=True)
class PopulationSpec:
    """Parameters of one synthetic acquisition site."""

    population_id: str
    n_control: int
    n_case: int
    site_montage: tuple[str, ...]
    sample_rate_hz: float
    gain: float = 1.0
    site_tone_hz: float = 0.0
    site_tone_amplitude: float = 0.5
    spectral_tilt: float = 1.0


@dataclass(frozen=True)
class SyntheticConfig:
    """Full description of a synthetic corpus.

    Label-1 patients receive an added band-limited oscillation on the
    informative channels, scaled by ``effect_size`` relative to the unit-power
    noise base.  Site nuisance (tilt, tone, gain) applies to all channels of a
    site, so population identity is separable by construction while the
    disease signal is confined to the informative channels.
    """

    populations: tuple[PopulationSpec, ...]
    seconds_range: tuple[float, float] = (35.0, 70.0)
    informative_channels: tuple[str, ...] = ("C3", "C4")
    informative_band_hz: tuple[float, float] = (8.0, 12.0)
    effect_size: float = 1.0
    base_seed: int = 10

    def validate(self) -> None:
        if not self.populations:
            raise ValueError("at least one population required")
        reference = set(REFERENCE_LABELS)
        ids = [p.population_id for p in self.populations]
        if len(set(ids)) != len(ids):
            raise ValueError("population ids must be unique")
        for pop in self.populations:
            if pop.n_control < 0 or pop.n_case < 0 or pop.n_control + pop.n_case == 0:
                raise ValueError(f"{pop.population_id}: patient counts must be positive")
            if not pop.sample_rate_hz > 0:
                raise ValueError(f"{pop.population_id}: sample rate must be positive")
            unknown = set(pop.site_montage) - reference
            if unknown:
                raise ValueError(f"{pop.population_id}: labels outside reference montage: {sorted(unknown)}")
            missing = set(self.informative_channels) - set(pop.site_montage)
            if missing:
                raise ValueError(
                    f"{pop.population_id}: informative channels {sorted(missing)} not in site montage"
                )
        lo, hi = self.seconds_range
        if not 0 < lo <= hi:
            raise ValueError("seconds_range must satisfy 0 < lo <= hi")
        blo, bhi = self.informative_band_hz
        if not 0 < blo < bhi:
            raise ValueError("informative_band_hz must satisfy 0 < lo < hi")
        if self.effect_size < 0:
            raise ValueError("effect_size must be nonnegative")

    def to_payload(self) -> dict:
        return {
            "populations": [
                {
                    "population_id": p.population_id,
                    "n_control": p.n_control,
                    "n_case": p.n_case,
                    "site_montage": list(p.site_montage),
                    "sample_rate_hz": p.sample_rate_hz,
                    "gain": p.gain,
                    "site_tone_hz": p.site_tone_hz,
                    "site_tone_amplitude": p.site_tone_amplitude,
                    "spectral_tilt": p.spectral_tilt,
                }
                for p in self.populations
            ],
            "seconds_range": list(self.seconds_range),
            "informative_channels": list(self.informative_channels),
            "informative_band_hz": list(self.informative_band_hz),
            "effect_size": self.effect_size,
            "base_seed": self.base_seed,
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "SyntheticConfig":
        try:
            populations = tuple(
                PopulationSpec(
                    population_id=p["population_id"],
                    n_control=int(p["n_control"]),
                    n_case=int(p["n_case"]),
                    site_montage=tuple(p["site_montage"]),
                    sample_rate_hz=float(p["sample_rate_hz"]),
                    gain=float(p.get("gain", 1.0)),
                    site_tone_hz=float(p.get("site_tone_hz", 0.0)),
                    site_tone_amplitude=float(p.get("site_tone_amplitude", 0.5)),
                    spectral_tilt=float(p.get("spectral_tilt", 1.0)),
                )
                for p in payload["populations"]
            )
            cfg = cls(
                populations=populations,
                seconds_range=tuple(payload.get("seconds_range", (35.0, 70.0))),
                informative_channels=tuple(payload.get("informative_channels", ("C3", "C4"))),
                informative_band_hz=tuple(payload.get("informative_band_hz", (8.0, 12.0))),
                effect_size=float(payload.get("effect_size", 1.0)),
                base_seed=int(payload.get("base_seed", 10)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad synthetic config: {exc}") from exc
        cfg.validate()
        return cfg


_SITE_A_MONTAGE = tuple(l for l in REFERENCE_LABELS if l not in ("CPz", "Iz"))
_SITE_B_MONTAGE = tuple(l for l in REFERENCE_LABELS if l not in ("Pz", "Iz"))
_SITE_C_MONTAGE = (
    "Fp1", "Fpz", "Fp2", "AF3", "AF4", "F7", "F3", "Fz", "F4", "F8",
    "FC5", "FC1", "FC2", "FC6", "T7", "C3", "Cz", "C4", "T8",
    "CP5", "CP1", "CP2", "CP6", "P7", "P3", "Pz", "P4", "P8", "O1", "Oz", "O2",
)
_SITE_D_MONTAGE = (
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T7", "C3", "Cz", "C4", "T8",
    "P7", "P3", "Pz", "P4", "P8", "O1", "Oz", "O2",
)


def default_synthetic_config(effect_size: float = 1.0, base_seed: int = 10) -> SyntheticConfig:
    """Five-site corpus with distinct montages, rates and nuisance structure."""
    populations = (
        PopulationSpec("siteA", 16, 16, _SITE_A_MONTAGE, 500.0,
                       gain=1.4, site_tone_hz=6.0, spectral_tilt=0.85),
        PopulationSpec("siteB", 16, 16, _SITE_B_MONTAGE, 500.0,
                       gain=0.8, site_tone_hz=14.0, spectral_tilt=1.15),
        PopulationSpec("siteC", 16, 16, _SITE_C_MONTAGE, 512.0,
                       gain=1.0, site_tone_hz=22.0, spectral_tilt=1.0),
        PopulationSpec("siteD", 16, 16, _SITE_D_MONTAGE, 2000.0,
                       gain=2.0, site_tone_hz=27.0, spectral_tilt=0.9),
        PopulationSpec("siteE", 16, 16, REFERENCE_LABELS, 250.0,
                       gain=0.6, site_tone_hz=2.5, spectral_tilt=1.1),
    )
    return SyntheticConfig(populations=populations, effect_size=effect_size, base_seed=base_seed)


def patient_seed(base_seed: int, population_id: str, patient_id: str) -> int:
    """Stable per-patient stream seed; robust to corpus edits elsewhere."""
    digest = hashlib.sha256(f"{base_seed}:{population_id}:{patient_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _shaped_noise(n: int, rate: float, rng: np.random.Generator, exponent: float) -> np.ndarray:
    """Unit-variance noise with a 1/f**exponent power spectrum."""
    white = rng.standard_normal(n)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / rate)
    scale = np.zeros_like(freqs)
    scale[1:] = freqs[1:] ** (-exponent / 2.0)
    x = np.fft.irfft(spectrum * scale, n)
    return x / x.std()


def _band_noise(n: int, rate: float, rng: np.random.Generator, band: tuple[float, float]) -> np.ndarray:
    """Unit-variance noise confined to a frequency band."""
    white = rng.standard_normal(n)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / rate)
    mask = (freqs >= band[0]) & (freqs <= band[1])
    spectrum[~mask] = 0.0
    x = np.fft.irfft(spectrum, n)
    sd = x.std()
    if sd == 0.0:
        raise ValueError("informative band is empty at this rate/length")
    return x / sd


def _synth_patient(cfg: SyntheticConfig, pop: PopulationSpec, patient_id: str, label: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(patient_seed(cfg.base_seed, pop.population_id, patient_id))
    seconds = rng.uniform(*cfg.seconds_range)
    n = int(round(seconds * pop.sample_rate_hz))
    t = np.arange(n) / pop.sample_rate_hz
    informative = set(cfg.informative_channels)
    channels: dict[str, np.ndarray] = {}
    for ch in pop.site_montage:
        x = _shaped_noise(n, pop.sample_rate_hz, rng, pop.spectral_tilt)
        if label == 1 and ch in informative:
            x = x + cfg.effect_size * _band_noise(n, pop.sample_rate_hz, rng, cfg.informative_band_hz)
        if pop.site_tone_hz > 0.0:
            phase = rng.uniform(0.0, 2.0 * np.pi)
            x = x + pop.site_tone_amplitude * np.sin(2.0 * np.pi * pop.site_tone_hz * t + phase)
        channels[ch] = pop.gain * x
    return channels


def generate_synthetic(cfg: SyntheticConfig, out_dir: Path | str) -> list[CohortManifest]:
    """Write a full synthetic corpus (recordings + manifests) and load it back.

    Deterministic: the same config always yields byte-identical files.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    manifest_paths = []
    for pop in cfg.populations:
        patients = []
        labels = [0] * pop.n_control + [1] * pop.n_case
        for idx, label in enumerate(labels):
            patient_id = f"{pop.population_id}_p{idx:03d}"
            rel = f"recordings/{pop.population_id}/{patient_id}.eegr"
            channels = _synth_patient(cfg, pop, patient_id, label)
            write_recording(out_dir / rel, channels, pop.sample_rate_hz)
            patients.append(PatientEntry(patient_id=patient_id, label=label, recordings=(rel,)))
        manifest = CohortManifest(
            population_id=pop.population_id,
            sample_rate_hz=pop.sample_rate_hz,
            site_montage=pop.site_montage,
            patients=tuple(patients),
            ground_truth={
                "informative_channels": list(cfg.informative_channels),
                "informative_band_hz": list(cfg.informative_band_hz),
                "effect_size": cfg.effect_size,
            },
            root=out_dir,
        )
        path = out_dir / f"manifest_{pop.population_id}.json"
        write_manifest(manifest, path)
        manifest_paths.append(path)
    return load_corpus(manifest_paths)


# --------------------------------------------------------------------------
# Corpus statistics


def corpus_stats(manifests: list[CohortManifest], pipeline_cfg=None) -> list[dict]:
    """Per-population composition after windowing.

    Frame counts reflect live (present-channel) frames under the pipeline's
    window arithmetic at the common target rate; durations are native.
    """
    from .signal_pipeline import DEFAULT_PIPELINE, window_count

    cfg = pipeline_cfg or DEFAULT_PIPELINE
    rows = []
    for manifest in manifests:
        frame_counts = []
        minutes = []
        for patient in manifest.patients:
            frames = 0
            for rel in patient.recordings:
                labels, n_samples, rate = read_recording_header(manifest.recording_path(rel))
                resampled = int(round(n_samples * cfg.target_rate_hz / rate))
                frames += len(labels) * window_count(resampled, cfg)
                minutes.append(n_samples / rate / 60.0)
            frame_counts.append(frames)
        counts = np.asarray(frame_counts, dtype=np.float64)
        mins = np.asarray(minutes, dtype=np.float64)
        n_control, n_case = manifest.label_counts()
        rows.append(
            {
                "population_id": manifest.population_id,
                "n_patients": manifest.n_patients,
                "n_control": n_control,
                "n_case": n_case,
                "n_frames": int(counts.sum()),
                "frames_per_patient_mean": float(counts.mean()) if counts.size else 0.0,
                "frames_per_patient_sd": float(counts.std()) if counts.size else 0.0,
                "minutes_median": float(np.median(mins)) if mins.size else 0.0,
                "minutes_min": float(mins.min()) if mins.size else 0.0,
                "minutes_max": float(mins.max()) if mins.size else 0.0,
            }
        )
    return rows


def render_stats_table(stats: list[dict]) -> str:
    """Tab-separated rendering of :func:`corpus_stats`."""
    header = (
        "population\tpatients\tcontrol/case\tframes\tframes/patient\tminutes median [min,max]"
    )
    lines = [header]
    for row in stats:
        lines.append(
            "{population_id}\t{n_patients}\t{n_control}/{n_case}\t{n_frames}\t"
            "{frames_per_patient_mean:.1f}±{frames_per_patient_sd:.1f}\t"
            "{minutes_median:.2f} [{minutes_min:.2f},{minutes_max:.2f}]".format(**row)
        )
    return "\n".join(lines) + "\n"
