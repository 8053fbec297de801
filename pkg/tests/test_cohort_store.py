import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from crosspop.cohort_store import (
    CohortManifest,
    DuplicatePatient,
    MissingRecording,
    ParseError,
    PatientEntry,
    PopulationSpec,
    SyntheticConfig,
    corpus_stats,
    default_synthetic_config,
    filter_eligible,
    generate_synthetic,
    load_corpus,
    load_manifest,
    patient_seed,
    read_recording,
    read_recording_header,
    recording_duration_seconds,
    write_manifest,
    write_recording,
)
from crosspop.montage import REFERENCE_LABELS

from conftest import tiny_synthetic_config


def _tree_digest(root: Path) -> dict[str, str]:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


class TestRecordingContainer:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        channels = {"C3": rng.standard_normal(100), "C4": rng.standard_normal(100)}
        path = tmp_path / "rec.eegr"
        write_recording(path, channels, 128.0)
        back, rate = read_recording(path)
        assert rate == 128.0
        assert list(back) == ["C3", "C4"]
        np.testing.assert_allclose(back["C3"], channels["C3"], atol=1e-6)

    def test_header_only_read(self, tmp_path):
        path = tmp_path / "rec.eegr"
        write_recording(path, {"Cz": np.zeros(256)}, 64.0)
        labels, n_samples, rate = read_recording_header(path)
        assert labels == ["Cz"] and n_samples == 256 and rate == 64.0
        assert recording_duration_seconds(path) == 4.0

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.eegr"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ParseError):
            read_recording_header(path)


def _write_min_corpus(tmp_path, seconds=(40.0, 40.0), rate=64.0):
    paths = []
    for i, sec in enumerate(seconds):
        rel = f"recordings/p{i}.eegr"
        n = int(sec * rate)
        write_recording(tmp_path / rel, {"C3": np.random.default_rng(i).standard_normal(n)}, rate)
        paths.append(rel)
    manifest = CohortManifest(
        population_id="siteX",
        sample_rate_hz=rate,
        site_montage=("C3",),
        patients=tuple(
            PatientEntry(patient_id=f"siteX_p{i}", label=i % 2, recordings=(rel,))
            for i, rel in enumerate(paths)
        ),
        root=tmp_path,
    )
    write_manifest(manifest, tmp_path / "manifest_siteX.json")
    return tmp_path / "manifest_siteX.json"


class TestManifest:
    def test_load_valid(self, tmp_path):
        path = _write_min_corpus(tmp_path)
        manifest = load_manifest(path)
        assert manifest.population_id == "siteX"
        assert manifest.n_patients == 2
        assert manifest.label_counts() == (1, 1)

    def test_label_balance_like_a_small_clinic(self, tmp_path):
        # 17 patients split 4 control / 13 case.
        labels = [0] * 4 + [1] * 13
        rels = []
        for i, label in enumerate(labels):
            rel = f"recordings/p{i}.eegr"
            write_recording(tmp_path / rel, {"C3": np.zeros(64) + np.arange(64)}, 64.0)
            rels.append((f"p{i:02d}", label, rel))
        manifest = CohortManifest(
            population_id="clinic",
            sample_rate_hz=64.0,
            site_montage=("C3",),
            patients=tuple(
                PatientEntry(patient_id=pid, label=label, recordings=(rel,))
                for pid, label, rel in rels
            ),
            root=tmp_path,
        )
        write_manifest(manifest, tmp_path / "manifest_clinic.json")
        loaded = load_manifest(tmp_path / "manifest_clinic.json")
        assert loaded.label_counts() == (4, 13)

    def test_duplicate_patient_rejected(self, tmp_path):
        path = _write_min_corpus(tmp_path)
        payload = json.loads(path.read_text())
        payload["patients"].append(dict(payload["patients"][0]))
        path.write_text(json.dumps(payload))
        with pytest.raises(DuplicatePatient):
            load_manifest(path)

    def test_missing_recording_rejected(self, tmp_path):
        path = _write_min_corpus(tmp_path)
        payload = json.loads(path.read_text())
        payload["patients"][0]["recordings"] = ["recordings/ghost.eegr"]
        path.write_text(json.dumps(payload))
        with pytest.raises(MissingRecording):
            load_manifest(path)

    def test_malformed_json_rejected(self, tmp_path):
        path = tmp_path / "manifest_bad.json"
        path.write_text("{not json")
        with pytest.raises(ParseError):
            load_manifest(path)

    def test_cross_population_duplicates_rejected(self, tmp_path):
        a = _write_min_corpus(tmp_path / "a")
        b = _write_min_corpus(tmp_path / "b")
        with pytest.raises(DuplicatePatient):
            load_corpus([a, b])


class TestEligibility:
    def test_boundary_inclusive_at_threshold(self, tmp_path):
        path = _write_min_corpus(tmp_path, seconds=(29.0, 30.0, 31.0))
        manifest = load_manifest(path)
        kept = filter_eligible(manifest, min_seconds=30.0)
        assert kept.n_patients == 2
        kept_ids = {p.patient_id for p in kept.patients}
        assert kept_ids == {"siteX_p1", "siteX_p2"}

    def test_all_eligible_unchanged(self, tmp_path):
        manifest = load_manifest(_write_min_corpus(tmp_path, seconds=(40.0, 50.0)))
        kept = filter_eligible(manifest, min_seconds=30.0)
        assert kept.patients == manifest.patients


class TestSyntheticGeneration:
    def test_default_config_validates(self):
        cfg = default_synthetic_config()
        cfg.validate()
        assert len(cfg.populations) == 5

    def test_five_populations_five_manifests(self, tmp_path):
        manifests = generate_synthetic(tiny_synthetic_config(), tmp_path)
        assert len(manifests) == 3  # tiny config is 3 sites; default is 5
        for manifest in manifests:
            assert manifest.ground_truth["informative_channels"] == ["C3", "C4"]

    def test_determinism_byte_identical(self, tmp_path):
        cfg = tiny_synthetic_config()
        generate_synthetic(cfg, tmp_path / "one")
        generate_synthetic(cfg, tmp_path / "two")
        assert _tree_digest(tmp_path / "one") == _tree_digest(tmp_path / "two")

    def test_patient_seed_stability(self):
        assert patient_seed(10, "siteA", "siteA_p000") == patient_seed(10, "siteA", "siteA_p000")
        assert patient_seed(10, "siteA", "p1") != patient_seed(10, "siteB", "p1")

    def test_informative_channels_must_be_in_every_site(self):
        cfg = tiny_synthetic_config()
        bad = SyntheticConfig(
            populations=cfg.populations,
            informative_channels=("Iz",),
        )
        with pytest.raises(ValueError, match="informative"):
            bad.validate()

    def test_config_roundtrip(self):
        cfg = tiny_synthetic_config()
        back = SyntheticConfig.from_payload(cfg.to_payload())
        assert back == cfg

    def test_case_patients_have_more_band_power(self, tmp_path):
        # The planted oscillation must raise in-band power on C3 for cases.
        cfg = tiny_synthetic_config(effect_size=2.0)
        manifests = generate_synthetic(cfg, tmp_path)
        manifest = manifests[0]
        powers = {0: [], 1: []}
        for patient in manifest.patients:
            channels, rate = read_recording(manifest.recording_path(patient.recordings[0]))
            x = channels["C3"]
            freqs = np.fft.rfftfreq(len(x), 1.0 / rate)
            spectrum = np.abs(np.fft.rfft(x)) ** 2
            band = (freqs >= 8.0) & (freqs <= 12.0)
            powers[patient.label].append(spectrum[band].sum() / spectrum.sum())
        assert min(powers[1]) > max(powers[0])


class TestCorpusStats:
    def test_single_patient_full_montage(self, tmp_path, montage):
        rel = "recordings/p0.eegr"
        channels = {l: np.random.default_rng(0).standard_normal(16384) for l in montage.labels}
        write_recording(tmp_path / rel, channels, 64.0)
        manifest = CohortManifest(
            population_id="solo",
            sample_rate_hz=64.0,
            site_montage=tuple(montage.labels),
            patients=(PatientEntry(patient_id="p0", label=0, recordings=(rel,)),),
            root=tmp_path,
        )
        stats = corpus_stats([manifest])
        assert stats[0]["n_frames"] == 65
        assert stats[0]["frames_per_patient_mean"] == 65.0

    def test_clinic_scale_cohort(self, tmp_path):
        # 17 patients, ~50 channels, ~260 s recordings: two windows per
        # channel puts the corpus near the 1700-frame scale.
        site = REFERENCE_LABELS[:50]
        spec = PopulationSpec("clinic", 4, 13, site, 125.0, site_tone_hz=6.0)
        cfg = SyntheticConfig(
            populations=(spec,), seconds_range=(258.0, 262.0), effect_size=1.0, base_seed=3
        )
        manifests = generate_synthetic(cfg, tmp_path)
        stats = corpus_stats(manifests)
        assert stats[0]["n_patients"] == 17
        assert 1400 <= stats[0]["n_frames"] <= 2100
        assert 80 <= stats[0]["frames_per_patient_mean"] <= 120

    def test_empty_manifest_list(self):
        assert corpus_stats([]) == []
