import csv
import json

import pytest
from click.testing import CliRunner

from gazeclass.cli import cli


def last_json(text):
    return json.loads([line for line in text.splitlines() if line.startswith("{")][-1])


def tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


@pytest.fixture
def runner(monkeypatch):
    monkeypatch.setenv("GAZECLASS_CACHE_DIR", "")
    return CliRunner()


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory, tiny_settings):
    run_dir = tmp_path_factory.mktemp("runs") / "run"
    runner = CliRunner(env={"GAZECLASS_CACHE_DIR": ""})
    result = runner.invoke(cli, ["run", "--run-dir", str(run_dir), *tiny_settings])
    assert result.exit_code == 0, result.output
    return run_dir


class TestSynth:
    def test_writes_dataset(self, runner, tmp_path, tiny_settings):
        result = runner.invoke(cli, ["synth", "--out", str(tmp_path / "d"), *tiny_settings])
        assert result.exit_code == 0, result.output
        assert json.loads(result.stdout)["subjects"] == 6
        manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
        assert len(manifest["image_ids"]) == 3

    def test_same_seed_same_bytes(self, runner, tmp_path, tiny_settings):
        for name in ("a", "b"):
            runner.invoke(cli, ["synth", "--out", str(tmp_path / name), "--seed", "4", *tiny_settings])
        assert tree(tmp_path / "a") == tree(tmp_path / "b")

    def test_invalid_config_reports_json(self, runner, tmp_path, tiny_settings):
        out = tmp_path / "d"
        result = runner.invoke(
            cli, ["synth", "--out", str(out), *tiny_settings, "--set", "synth.n_subjects_per_group=0"]
        )
        assert result.exit_code == 2
        report = last_json(result.stderr)
        assert report["success"] is False
        assert report["error"] == "ConfigError"
        assert not out.exists()

    def test_refuses_non_empty_output(self, runner, tmp_path, tiny_settings):
        (tmp_path / "keep.txt").write_text("x")
        result = runner.invoke(cli, ["synth", "--out", str(tmp_path), *tiny_settings])
        assert result.exit_code == 2
        assert (tmp_path / "keep.txt").exists()


class TestRun:
    def test_loocv_layout(self, finished_run):
        assert len(list((finished_run / "folds").glob("fold-*.json"))) == 6
        assert len(list((finished_run / "models").glob("fold-*.gzc"))) == 6
        metrics = json.loads((finished_run / "metrics.json").read_text())
        assert 0.0 <= metrics["auc"] <= 1.0
        assert len(metrics["per_subject"]) == 6

    def test_cached_rerun_is_identical(self, runner, tmp_path, monkeypatch, tiny_settings):
        monkeypatch.setenv("GAZECLASS_CACHE_DIR", str(tmp_path / "cache"))
        first = runner.invoke(cli, ["run", "--run-dir", str(tmp_path / "r1"), *tiny_settings])
        second = runner.invoke(cli, ["run", "--run-dir", str(tmp_path / "r2"), *tiny_settings])
        assert first.exit_code == 0 and second.exit_code == 0, second.output
        assert json.loads(second.stdout)["cache"]["hits"] > 0
        assert (tmp_path / "r1" / "metrics.json").read_bytes() == (tmp_path / "r2" / "metrics.json").read_bytes()


class TestAnalyze:
    def test_contrib(self, runner, finished_run):
        result = runner.invoke(cli, ["analyze", str(finished_run), "contrib", "--force"])
        assert result.exit_code == 0, result.output
        lines = (finished_run / "analysis" / "contrib" / "contribution.csv").read_text().splitlines()
        assert len(lines) == 1 + 3

    def test_tsne(self, runner, finished_run):
        result = runner.invoke(cli, ["analyze", str(finished_run), "tsne", "--force"])
        assert result.exit_code == 0, result.output
        lines = (finished_run / "analysis" / "tsne" / "scatter_fc1.csv").read_text().splitlines()
        assert len(lines) == 1 + 6

    def test_lrp(self, runner, finished_run):
        result = runner.invoke(cli, ["analyze", str(finished_run), "lrp", "--top-n", "1", "--force"])
        assert result.exit_code == 0, result.output
        summary = json.loads(result.stdout)["result"]
        assert summary and all(s["accounted"] for s in summary.values())

    def test_lrp_picks_among_top_contrib_images(self, runner, finished_run):
        ranking_csv = finished_run / "analysis" / "contrib" / "contribution.csv"
        if not ranking_csv.exists():
            assert runner.invoke(cli, ["analyze", str(finished_run), "contrib", "--force"]).exit_code == 0
        with open(ranking_csv) as handle:
            rows = list(csv.DictReader(handle))
        best = min(range(len(rows)), key=lambda i: (-float(rows[i]["single_auc"]), i))
        result = runner.invoke(
            cli, ["analyze", str(finished_run), "lrp", "--candidates", "1", "--top-n", "2", "--force"]
        )
        assert result.exit_code == 0, result.output
        summary = json.loads(result.stdout)["result"]
        assert summary
        for sid, entry in summary.items():
            assert entry["top_images"] == [rows[best]["image_id"]]
            report = json.loads((finished_run / "analysis" / "lrp" / sid / "conservation.json").read_text())
            assert report["candidates"] == [rows[best]["image_id"]]

    def test_lrp_repeated_subject_runs_once(self, runner, finished_run):
        sid = json.loads((finished_run / "folds" / "fold-00.json").read_text())["test"][0]
        result = runner.invoke(
            cli, ["analyze", str(finished_run), "lrp", "--subject", sid, "--subject", sid, "--top-n", "1", "--force"]
        )
        assert result.exit_code == 0, result.output
        assert list(json.loads(result.stdout)["result"]) == [sid]

    def test_lrp_rejects_zero_candidates(self, runner, finished_run):
        result = runner.invoke(cli, ["analyze", str(finished_run), "lrp", "--candidates", "0"])
        assert result.exit_code == 2

    def test_missing_run_files(self, runner, tmp_path):
        result = runner.invoke(cli, ["analyze", str(tmp_path), "tsne"])
        assert result.exit_code == 2
        assert last_json(result.stderr)["error"] == "ArtifactMissingError"


class TestVerify:
    def test_auc_suite(self, runner):
        result = runner.invoke(cli, ["verify", "--suite", "auc"])
        assert result.exit_code == 0, result.output
        assert json.loads(result.stdout)["passed"] is True
