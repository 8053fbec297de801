import hashlib
import json
from pathlib import Path

import pytest

from crosspop import cli
from crosspop.cohort_store import PopulationSpec, SyntheticConfig

from conftest import TINY_SITE_A, TINY_SITE_B, tiny_synthetic_config


def _tree_digest(root: Path) -> dict[str, str]:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def _write_config(tmp_path: Path, synthetic=None, name="config.json", **overrides) -> Path:
    synthetic = synthetic if synthetic is not None else tiny_synthetic_config()
    payload = {
        "corpus": {"dir": "corpus"},
        "synthetic": synthetic.to_payload(),
        "output_dir": "out",
        "base_seed": 10,
        "parallelism": 1,
        "eval": {"inner_folds": 4},
    }
    payload.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(payload, indent=2))
    return path


@pytest.fixture(scope="module")
def completed_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli_run")
    config = _write_config(tmp)
    assert cli.main(["synth", str(config)]) == 0
    assert cli.main(["run", str(config)]) == 0
    return tmp


class TestSynth:
    def test_writes_one_manifest_per_population(self, tmp_path, capsys):
        config = _write_config(tmp_path)
        assert cli.main(["synth", str(config)]) == 0
        manifests = sorted((tmp_path / "corpus").glob("manifest_*.json"))
        assert len(manifests) == 3
        out = capsys.readouterr().out
        assert "population" in out and "siteA" in out

    def test_deterministic_corpus(self, tmp_path):
        config = _write_config(tmp_path)
        cli.main(["synth", str(config)])
        first = _tree_digest(tmp_path / "corpus")
        cli.main(["synth", str(config)])
        assert _tree_digest(tmp_path / "corpus") == first

    def test_invalid_config_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{broken")
        assert cli.main(["synth", str(bad)]) == 2
        assert "config error" in capsys.readouterr().err

    def test_bad_synthetic_section_exits_2(self, tmp_path):
        config = _write_config(tmp_path, overrides=None)
        payload = json.loads(config.read_text())
        payload["synthetic"]["informative_channels"] = ["NotAChannel"]
        config.write_text(json.dumps(payload))
        assert cli.main(["synth", str(config)]) == 2

    def test_missing_synthetic_section_exits_2(self, tmp_path):
        config = _write_config(tmp_path)
        payload = json.loads(config.read_text())
        del payload["synthetic"]
        (tmp_path / "corpus").mkdir(exist_ok=True)
        config.write_text(json.dumps(payload))
        assert cli.main(["synth", str(config)]) == 2


class TestRun:
    def test_writes_one_record_per_plan(self, completed_run):
        results = sorted((completed_run / "out" / "results").glob("plan_*.json"))
        assert len(results) == 9  # three populations
        index = json.loads((completed_run / "out" / "run_index.json").read_text())
        assert index["n_plans"] == 9
        assert (completed_run / "out" / "config.json").exists()

    def test_config_copy_excludes_execution_knobs(self, completed_run):
        payload = json.loads((completed_run / "out" / "config.json").read_text())
        assert "output_dir" not in payload
        assert "parallelism" not in payload
        assert payload["base_seed"] == 10

    def test_resume_skips_completed_plans(self, completed_run, capsys):
        config = completed_run / "config.json"
        before = _tree_digest(completed_run / "out" / "results")
        assert cli.main(["run", str(config)]) == 0
        assert _tree_digest(completed_run / "out" / "results") == before

    def test_corrupted_record_recomputed(self, completed_run):
        config = completed_run / "config.json"
        target = completed_run / "out" / "results" / "plan_0003.json"
        good = target.read_bytes()
        target.write_text("{\"scrambled\": true}")
        assert cli.main(["run", str(config)]) == 0
        assert target.read_bytes() == good

    def test_deleted_record_recomputed(self, completed_run):
        config = completed_run / "config.json"
        target = completed_run / "out" / "results" / "plan_0001.json"
        good = target.read_bytes()
        target.unlink()
        assert cli.main(["run", str(config)]) == 0
        assert target.read_bytes() == good


class TestReport:
    def test_full_report(self, completed_run, capsys):
        assert cli.main(["report", str(completed_run / "out")]) == 0
        reports = completed_run / "out" / "reports"
        names = {p.name for p in reports.iterdir()}
        assert "metrics_by_level.tsv" in names
        assert "transfer_matrix_baseline.tsv" in names
        assert "transfer_matrix_top4.tsv" in names
        assert "stability.tsv" in names
        assert "channel_map_siteA.tsv" in names
        assert "channel_map_siteA_difference.svg" in names
        assert "report_index.json" in names

    def test_single_plan_levels_report_na_spread(self, completed_run):
        table = (completed_run / "out" / "reports" / "metrics_by_population.tsv").read_text()
        # At the top level each population is tested exactly once, so the
        # spread column must be N/A there.
        top_level_rows = [
            line for line in table.splitlines()[1:] if line.split("\t")[2] == "2"
        ]
        assert top_level_rows
        assert all("N/A" in row for row in top_level_rows)

    def test_missing_plan_detected(self, completed_run, tmp_path):
        partial = tmp_path / "partial" / "results"
        partial.mkdir(parents=True)
        src = completed_run / "out"
        for name in ("plan_0000.json", "plan_0002.json"):
            (partial / name).write_bytes((src / "results" / name).read_bytes())
        (partial.parent / "run_index.json").write_bytes((src / "run_index.json").read_bytes())
        assert cli.main(["report", str(partial.parent)]) == 1

    def test_empty_dir_fails(self, tmp_path, capsys):
        empty = tmp_path / "nothing"
        empty.mkdir()
        assert cli.main(["report", str(empty)]) == 1
        assert "no plan records" in capsys.readouterr().err

    def test_two_population_run_flags_regression_insufficient(self, tmp_path):
        pops = (
            PopulationSpec("siteA", 4, 4, TINY_SITE_A, 128.0, site_tone_hz=6.0),
            PopulationSpec("siteB", 4, 4, TINY_SITE_B, 128.0, site_tone_hz=14.0),
        )
        synthetic = SyntheticConfig(
            populations=pops, seconds_range=(35.0, 40.0), effect_size=1.5, base_seed=10
        )
        config = _write_config(tmp_path, synthetic=synthetic)
        assert cli.main(["synth", str(config)]) == 0
        assert cli.main(["run", str(config)]) == 0
        assert cli.main(["report", str(tmp_path / "out")]) == 0
        reports = tmp_path / "out" / "reports"
        assert "insufficient" in (reports / "scaling_regression.tsv").read_text()
        matrix = (reports / "transfer_matrix_top4.tsv").read_text()
        assert matrix.count("N/A") == 2  # the two diagonal cells


class TestTheory:
    def test_passes_and_exit_zero(self, capsys):
        assert cli.main(["theory", "--seed", "10", "--instances", "50"]) == 0
        out = capsys.readouterr().out
        assert "overall=pass" in out
        assert "suite=generalization-bound instances=50" in out
        assert "suite=good-set-contraction instances=25" in out
        assert "suite=channel-projection instances=10" in out

    def test_identical_report_bytes_for_fixed_seed(self, capsys):
        cli.main(["theory", "--seed", "3", "--instances", "20"])
        first = capsys.readouterr().out
        cli.main(["theory", "--seed", "3", "--instances", "20"])
        assert capsys.readouterr().out == first

    def test_zero_instances_vacuous_pass_with_warning(self, capsys):
        assert cli.main(["theory", "--instances", "0"]) == 0
        out = capsys.readouterr().out
        assert "warning" in out and "vacuous" in out


class TestConfigLoading:
    def test_env_var_overrides_output_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "elsewhere"))
        config = _write_config(tmp_path)
        loaded = cli.load_run_config(config)
        assert loaded.output_dir == tmp_path / "elsewhere" / "out"
        assert loaded.corpus_dir == tmp_path / "elsewhere" / "corpus"

    def test_min_seconds_override(self, tmp_path):
        config = _write_config(tmp_path)
        loaded = cli.load_run_config(config, min_seconds_override=12.0)
        assert loaded.min_seconds == 12.0

    def test_defaults_are_protocol_constants(self, tmp_path):
        loaded = cli.load_run_config(_write_config(tmp_path))
        assert loaded.pipeline.target_rate_hz == 64.0
        assert loaded.pipeline.window_len == 16384
        assert loaded.schedule.learning_rate == 0.01
        assert loaded.schedule.total_epochs == 30
        assert loaded.threshold == 0.5
        assert loaded.k_subsets == (2, 4, 8)
        assert loaded.base_seed == 10

    def test_unknown_montage_rejected(self, tmp_path):
        config = _write_config(tmp_path, montage="exotic-128")
        with pytest.raises(cli.ConfigError):
            cli.load_run_config(config)
