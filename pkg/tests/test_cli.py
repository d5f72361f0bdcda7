import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from uwbrem import dataset
from uwbrem.cli import main


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def corpus_csv(tmp_path_factory, corpus):
    path = tmp_path_factory.mktemp("cli") / "corpus.csv"
    dataset.write_canonical(corpus, str(path))
    return str(path)


def _records(output: str) -> list:
    return [json.loads(line) for line in output.splitlines()
            if line.startswith("{")]


def _file_records(path) -> list:
    return [json.loads(line) for line in Path(path).read_text().splitlines()]


class TestConvert:
    def test_missing_dataset_names_path(self, runner):
        result = runner.invoke(main, ["convert", "--dataset", "/nope.csv",
                                      "--out", "out"])
        assert result.exit_code != 0
        assert "/nope.csv" in result.output

    def test_convert_reports_rejections(self, runner, corpus_csv, tmp_path):
        lines = Path(corpus_csv).read_text().splitlines()
        broken = tmp_path / "broken.csv"
        bad_row = lines[1].replace("medium_room", "moon_base").replace("big_room", "moon_base")
        broken.write_text("\n".join([lines[0], lines[1], bad_row]) + "\n")
        result = runner.invoke(main, ["convert", "--dataset", str(broken),
                                      "--out", str(tmp_path / "conv")])
        assert result.exit_code == 0, result.output
        rec = _records(result.output)[0]
        assert rec["n_accepted"] == 1 and rec["n_rejected"] == 1
        assert rec["rejected"][0]["line"] == 3
        assert (tmp_path / "conv" / "canonical.csv").exists()
        assert (tmp_path / "conv" / "runconfig.json").exists()


class TestTrain:
    def test_seeds_produce_files_and_aggregate(self, runner, corpus_csv, tmp_path):
        out = tmp_path / "train"
        result = runner.invoke(main, [
            "train", "--dataset", corpus_csv, "--cir-len", "16",
            "--seeds", "2", "--epochs", "1", "--out", str(out)])
        assert result.exit_code == 0, result.output
        recs = _records(result.output)
        seeds = [r for r in recs if r["record"] == "seed"]
        agg = [r for r in recs if r["record"] == "aggregate"]
        assert len(seeds) == 2 and len(agg) == 1
        for field in ("mae_m", "sigma_m", "mae_los_m", "mae_nlos_m"):
            assert field in seeds[0]
        assert (out / "seed0.urm").exists() and (out / "seed1.urm").exists()
        assert len(agg[0]["per_seed_mae_m"]) == 2


@pytest.fixture(scope="module")
def pipeline_out(runner, corpus_csv, tmp_path_factory):
    out = tmp_path_factory.mktemp("pipe")
    result = runner.invoke(main, [
        "pipeline", "--dataset", corpus_csv, "--cir-len", "16",
        "--cir-len", "32", "--seeds", "1", "--epochs", "1",
        "--out", str(out)])
    assert result.exit_code == 0, result.output
    return out


class TestPipelineAndDeployment:
    def test_rows_schema_and_size_ordering(self, pipeline_out):
        rows = _file_records(pipeline_out / "pipeline.jsonl")
        assert [r["K"] for r in rows] == [16, 32]
        for row in rows:
            assert row["int8_image_bytes"] < row["optimized_image_bytes"] \
                < row["float_image_bytes"]
            assert row["params"] > 0
            for field in ("mae_m", "mae_go_m", "mae_int8_m"):
                assert field in row

    def test_residuals_boxplots(self, pipeline_out):
        recs = _file_records(pipeline_out / "residuals.jsonl")
        assert {r["K"] for r in recs} == {16, 32}
        for r in recs:
            assert r["min"] <= r["q1"] <= r["median"] <= r["q3"] <= r["max"]

    def test_quantize_export_bench_chain(self, runner, corpus_csv, tmp_path):
        out = tmp_path
        r = runner.invoke(main, ["train", "--dataset", corpus_csv, "--cir-len",
                                 "16", "--seeds", "1", "--epochs", "1",
                                 "--out", str(out / "t")])
        assert r.exit_code == 0, r.output
        r = runner.invoke(main, ["quantize", "--model", str(out / "t" / "seed0.urm"),
                                 "--dataset", corpus_csv, "--out", str(out / "q")])
        assert r.exit_code == 0, r.output
        qrec = _records(r.output)[0]
        assert qrec["arena_bytes"] > 0 and qrec["int8_image_bytes"] > 0

        r = runner.invoke(main, ["export", "--model", str(out / "q" / "model_int8.urm"),
                                 "--prefix", "net16", "--out", str(out / "e")])
        assert r.exit_code == 0, r.output
        source = (out / "e" / "net16_model.c").read_text()
        assert "net16_model[]" in source

        r = runner.invoke(main, ["bench", "--model", str(out / "q" / "model_int8.urm"),
                                 "--runs", "30", "--vcc", "3.3", "--iabs", "16.2"])
        assert r.exit_code == 0, r.output
        rec = _records(r.output)[0]
        assert rec["p_abs_mw"] == pytest.approx(53.46)
        assert rec["e_inf_mj"] == pytest.approx(rec["p_abs_mw"] / rec["f_m_hz"])

        # without power inputs the energy fields are absent
        r = runner.invoke(main, ["bench", "--model", str(out / "q" / "model_int8.urm"),
                                 "--runs", "30"])
        rec = _records(r.output)[0]
        assert "e_inf_mj" not in rec and "max_ms" in rec

    def test_bench_rejects_few_runs(self, runner, tmp_path):
        result = runner.invoke(main, ["bench", "--model", "x.urm", "--runs", "10"])
        assert result.exit_code != 0
        assert "at least 30" in result.output


class TestAnalyze:
    def test_projections_and_separation(self, runner, corpus_csv, tmp_path, corpus):
        out = tmp_path / "an"
        result = runner.invoke(main, ["analyze", "--dataset", corpus_csv,
                                      "--out", str(out)])
        assert result.exit_code == 0, result.output
        projections = _file_records(out / "projections.jsonl")
        assert len(projections) == len(corpus)
        recs = _file_records(out / "analyze.jsonl")
        sep = next(r for r in recs if r["record"] == "separation")
        assert sep["silhouette"] > 0.0

    def test_empty_dataset_rejected(self, runner, corpus_csv, tmp_path):
        header = Path(corpus_csv).read_text().splitlines()[0]
        empty = tmp_path / "empty.csv"
        empty.write_text(header + "\n")
        result = runner.invoke(main, ["analyze", "--dataset", str(empty),
                                      "--out", str(tmp_path / "out")])
        assert result.exit_code != 0


class TestReproducibility:
    def test_same_seed_same_metrics(self, runner, corpus_csv, tmp_path):
        outputs = []
        for d in ("a", "b"):
            result = runner.invoke(main, [
                "train", "--dataset", corpus_csv, "--cir-len", "16",
                "--seeds", "1", "--epochs", "1", "--out", str(tmp_path / d)])
            assert result.exit_code == 0, result.output
            recs = [r for r in _records(result.output) if r["record"] == "seed"]
            outputs.append(recs[0]["mae_m"])
        assert outputs[0] == outputs[1]
