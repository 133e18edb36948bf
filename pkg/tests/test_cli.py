"""CLI contracts: config resolution, exit codes, end-to-end pipeline."""

import json
import os

import numpy as np
import pytest

from deepbgp import cli, evaluation
from deepbgp.errors import ConfigurationError

TINY = [
    "--set", "cohort.n_patients=240",
    "--set", "cohort.positive_rate=0.3",
    "--set", "cohort.n_codes=30",
    "--set", "cohort.n_risk_codes=3",
    "--set", "cohort.noise_rate=0.1",
    "--set", "encoder.hidden_size=16",
    "--set", "encoder.n_layers=1",
    "--set", "encoder.n_heads=2",
    "--set", "encoder.intermediate_size=24",
    "--set", "encoder.dropout=0.1",
    "--set", "encoder.pool_size_dense=16",
    "--set", "encoder.pool_size_gp=8",
    "--set", "head.grid_points_per_dim=8",
    "--set", "head.whitened_points_per_dim=4",
    "--set", "pretrain.epochs=1",
    "--set", "train.epochs=2",
    "--set", "train.batch_size=64",
    "--set", "predict.n_samples=5",
]


def run(args):
    return cli.main(args)


class TestConfig:
    def test_unknown_key_is_config_error(self, tmp_path):
        code = run(["generate", "--set", "cohort.bogus=1", "--out", str(tmp_path / "o")])
        assert code == cli.EXIT_CONFIG

    def test_unparseable_value_is_config_error(self, tmp_path):
        code = run(["generate", "--set", "cohort.n_patients=many", "--out", str(tmp_path / "o")])
        assert code == cli.EXIT_CONFIG

    def test_config_file_round_trip(self, tmp_path):
        config_file = tmp_path / "run.cfg"
        config_file.write_text("# comment\ncohort.n_patients = 120\nseed = 7\n")
        cfg = cli.RunConfig.resolve(str(config_file), [], None)
        assert cfg["cohort.n_patients"] == 120
        assert cfg["seed"] == 7

    def test_override_beats_file(self, tmp_path):
        config_file = tmp_path / "run.cfg"
        config_file.write_text("cohort.n_patients = 120\n")
        cfg = cli.RunConfig.resolve(str(config_file), ["cohort.n_patients=77"], None)
        assert cfg["cohort.n_patients"] == 77

    def test_unknown_key_in_file_rejected(self, tmp_path):
        config_file = tmp_path / "run.cfg"
        config_file.write_text("nonsense.key = 1\n")
        with pytest.raises(ConfigurationError):
            cli.RunConfig.resolve(str(config_file), [], None)

    def test_help_lists_every_key_with_provenance(self, capsys):
        with pytest.raises(SystemExit):
            cli.build_parser().parse_args(["--help"])
        out = capsys.readouterr().out
        for key in cli.CONFIG_KEYS:
            assert key.name in out
        assert "[published]" in out and "[toolkit]" in out

    def test_missing_required_path_is_config_error(self, tmp_path):
        code = run(["train", "--out", str(tmp_path / "o")])
        assert code == cli.EXIT_CONFIG


class TestExitCodes:
    def test_missing_dataset_directory_is_io_or_data_error(self, tmp_path):
        code = run(
            ["train", "--set", "paths.data=" + str(tmp_path / "nope"), "--out", str(tmp_path / "o")]
        )
        assert code == cli.EXIT_IO

    def test_single_class_report_is_data_error(self, tmp_path):
        predictions = tmp_path / "pred.tsv"
        samples = evaluation.PredictiveSamples(
            np.array([[0.2], [0.4], [0.6]]), np.array([0, 0, 0]), ["a", "b", "c"]
        )
        evaluation.write_predictions(str(predictions), samples)
        code = run(
            ["report", "--set", f"paths.predictions={predictions}", "--out", str(tmp_path / "o")]
        )
        assert code == cli.EXIT_DATA


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    gen_dir = str(root / "gen")
    assert run(["generate", *TINY, "--seed", "3", "--out", gen_dir]) == 0
    data = os.path.join(gen_dir, "dataset")
    pre_dir = str(root / "pre")
    assert run(["pretrain", *TINY, "--seed", "3", "--set", f"paths.data={data}", "--out", pre_dir]) == 0
    train_dir = str(root / "train")
    assert (
        run(
            [
                "train", *TINY, "--seed", "3",
                "--set", f"paths.data={data}",
                "--set", "train.variant=DBGP",
                "--set", f"paths.encoder_checkpoint={pre_dir}/encoder.pt",
                "--out", train_dir,
            ]
        )
        == 0
    )
    predict_dir = str(root / "predict")
    assert (
        run(
            [
                "predict", *TINY, "--seed", "3",
                "--set", f"paths.data={data}",
                "--set", f"paths.model_checkpoint={train_dir}/model.pt",
                "--out", predict_dir,
            ]
        )
        == 0
    )
    report_dir = str(root / "report")
    assert (
        run(
            [
                "report", *TINY, "--seed", "3",
                "--set", f"paths.predictions={predict_dir}/predictions.tsv",
                "--set", f"paths.model_checkpoint={train_dir}/model.pt",
                "--out", report_dir,
            ]
        )
        == 0
    )
    return root, data, pre_dir, train_dir, predict_dir, report_dir

class TestPipeline:
    def test_artifacts_exist_and_embed_config(self, pipeline):
        root, data, pre_dir, train_dir, predict_dir, report_dir = pipeline
        for directory in (pre_dir, train_dir, predict_dir, report_dir):
            assert os.path.exists(os.path.join(directory, "config.txt"))
        with open(os.path.join(predict_dir, "predictions.tsv")) as fh:
            head = fh.read(400)
        assert "config-hash" in head and "seed: 3" in head
        expected_tables = [
            "summary.json",
            "confidence_accuracy.tsv",
            "confidence_auroc.tsv",
            "calibration.tsv",
            "uncertainty_groups.tsv",
            "entropy.tsv",  # DBGP has stochastic embeddings
        ]
        for name in expected_tables:
            assert os.path.exists(os.path.join(report_dir, name)), name

    def test_summary_has_finite_ranking_metrics(self, pipeline):
        *_, report_dir = pipeline
        with open(os.path.join(report_dir, "summary.json")) as fh:
            summary = json.load(fh)
        assert 0.0 <= summary["auroc"] <= 1.0
        assert 0.0 <= summary["average_precision"] <= 1.0
        assert summary["n_samples"] == 5

    def test_metrics_log_one_line_per_epoch(self, pipeline):
        _, _, _, train_dir, _, _ = pipeline
        with open(os.path.join(train_dir, "metrics.txt")) as fh:
            lines = [l for l in fh if not l.startswith("#")]
        assert len(lines) == 2
        assert all("objective=" in l and "val_auroc=" in l for l in lines)

    def test_predictions_deterministic_across_runs(self, pipeline, tmp_path):
        root, data, _, train_dir, predict_dir, _ = pipeline
        again = str(tmp_path / "predict_again")
        assert (
            run(
                [
                    "predict", *TINY, "--seed", "3",
                    "--set", f"paths.data={data}",
                    "--set", f"paths.model_checkpoint={train_dir}/model.pt",
                    "--out", again,
                ]
            )
            == 0
        )
        with open(os.path.join(predict_dir, "predictions.tsv"), "rb") as fh:
            first = fh.read()
        with open(os.path.join(again, "predictions.tsv"), "rb") as fh:
            second = fh.read()
        assert first == second

    def test_repro_command_compares_sample_counts(self, pipeline, tmp_path):
        root, data, _, train_dir, _, _ = pipeline
        out = str(tmp_path / "repro")
        assert (
            run(
                [
                    "repro", *TINY, "--seed", "3",
                    "--set", f"paths.data={data}",
                    "--set", f"paths.model_checkpoint={train_dir}/model.pt",
                    "--out", out,
                ]
            )
            == 0
        )
        assert os.path.exists(os.path.join(out, "predictions_s5.tsv"))
        assert os.path.exists(os.path.join(out, "predictions_s10.tsv"))
        with open(os.path.join(out, "comparison.tsv")) as fh:
            body = fh.read()
        assert "auroc_abs_diff" in body
