import json

import pytest

from stabilab import cli, dataset, metrics
from stabilab.synth import write_desk_dataset


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small materialized desk dataset plus a standard config file."""
    root = tmp_path_factory.mktemp("ws")
    data_dir = root / "data"
    write_desk_dataset(data_dir, train_per_class=3, eval_per_class=2, seed=5)
    config = {
        "version": 1,
        "seed": 1234,
        "dataset": {
            "train_manifest": "data/train.jsonl",
            "eval_manifest": "data/eval.jsonl",
        },
        "model": "init",
        "environments": [
            {"env_id": "clean", "transforms": []},
            {"env_id": "jpeg50", "transforms": [{"kind": "jpeg_roundtrip", "quality": 50}]},
            {"env_id": "noisy", "transforms": [{"kind": "gaussian_noise", "sigma2": 0.02}]},
        ],
        "metrics": {"k": [1, 3]},
        "output_dir": "out",
    }
    config_path = root / "config.json"
    config_path.write_text(json.dumps(config, indent=2))
    return root, config_path, config


def _rewrite(root, config, name="alt.json", **changes):
    merged = json.loads(json.dumps(config))
    merged.update(changes)
    path = root / name
    path.write_text(json.dumps(merged))
    return path


class TestValidate:
    def test_valid_config_exit_zero(self, workspace):
        _, config_path, _ = workspace
        assert cli.main(["validate", "--config", str(config_path)]) == 0

    def test_duplicate_env_id(self, workspace, capsys):
        root, _, config = workspace
        envs = config["environments"] + [{"env_id": "clean", "transforms": []}]
        path = _rewrite(root, config, "dup.json", environments=envs)
        assert cli.main(["validate", "--config", str(path)]) == 1
        assert "E_ENV_DUP" in capsys.readouterr().out

    def test_missing_manifest(self, workspace, capsys):
        root, _, config = workspace
        path = _rewrite(
            root, config, "missing.json",
            dataset={"eval_manifest": "data/absent.jsonl"},
        )
        assert cli.main(["validate", "--config", str(path)]) == 1
        assert "E_PATH" in capsys.readouterr().out

    def test_bad_k(self, workspace, capsys):
        root, _, config = workspace
        path = _rewrite(root, config, "badk.json", metrics={"k": [0]})
        assert cli.main(["validate", "--config", str(path)]) == 1
        assert "E_K" in capsys.readouterr().out

    def test_bad_transform(self, workspace, capsys):
        root, _, config = workspace
        path = _rewrite(
            root, config, "badenv.json",
            environments=[{"env_id": "x", "transforms": [{"kind": "teleport"}]}],
        )
        assert cli.main(["validate", "--config", str(path)]) == 1
        assert "E_ENV_BAD" in capsys.readouterr().out

    def test_missing_config_file(self, tmp_path, capsys):
        assert cli.main(["validate", "--config", str(tmp_path / "none.json")]) == 1
        assert "E_PATH" in capsys.readouterr().out


class TestPerturb:
    def test_counts_and_determinism(self, workspace, tmp_path):
        _, config_path, _ = workspace
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        assert cli.main(["perturb", "--config", str(config_path), "--out", str(out_a)]) == 0
        assert cli.main(["perturb", "--config", str(config_path), "--out", str(out_b), "--jobs", "4"]) == 0
        index_a = (out_a / "index.jsonl").read_text()
        index_b = (out_b / "index.jsonl").read_text()
        assert index_a == index_b
        rows = [json.loads(line) for line in index_a.splitlines()]
        assert len(rows) == 20 * 3  # 20 eval images x 3 environments
        assert (out_a / "resolved_config.json").is_file()

    def test_empty_environment_matches_quantized_original(self, workspace, tmp_path):
        root, config_path, _ = workspace
        out = tmp_path / "clean"
        cli.main(["perturb", "--config", str(config_path), "--out", str(out), "--env", "clean"])
        rows = [json.loads(line) for line in (out / "index.jsonl").read_text().splitlines()]
        from stabilab.envsim import decode_fingerprint

        for row in rows[:5]:
            original = (root / "data" / row["image_id"]).with_suffix(".png")
            assert decode_fingerprint(original.read_bytes()) == row["fingerprint"]


class TestInfer:
    def test_record_count_and_reproducibility(self, workspace, tmp_path):
        _, config_path, _ = workspace
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert cli.main(["infer", "--config", str(config_path), "--out", str(out_a)]) == 0
        assert cli.main(["infer", "--config", str(config_path), "--out", str(out_b), "--jobs", "4"]) == 0
        bytes_a = (out_a / "records.jsonl").read_bytes()
        assert bytes_a == (out_b / "records.jsonl").read_bytes()
        records = dataset.load_records(out_a / "records.jsonl")
        assert len(records) == 20 * 3
        envs = {r.environment_id for r in records}
        assert envs == {"clean", "jpeg50", "noisy"}

    def test_streamed_equals_materialized(self, workspace, tmp_path):
        _, config_path, _ = workspace
        variants = tmp_path / "variants"
        cli.main(["perturb", "--config", str(config_path), "--out", str(variants)])
        streamed = tmp_path / "streamed"
        materialized = tmp_path / "materialized"
        cli.main(["infer", "--config", str(config_path), "--out", str(streamed)])
        cli.main([
            "infer", "--config", str(config_path), "--out", str(materialized),
            "--variants-dir", str(variants),
        ])
        assert (streamed / "records.jsonl").read_bytes() == (
            materialized / "records.jsonl"
        ).read_bytes()


class TestReport:
    def test_subdirectories_and_headline_format(self, workspace, tmp_path, capsys):
        _, config_path, _ = workspace
        infer_out = tmp_path / "infer"
        cli.main(["infer", "--config", str(config_path), "--out", str(infer_out)])
        report_out = tmp_path / "report"
        code = cli.main([
            "report", "--config", str(config_path),
            "--records", str(infer_out / "records.jsonl"),
            "--out", str(report_out),
        ])
        assert code == 0
        out = capsys.readouterr().out
        lines = [l for l in out.splitlines() if "instability:" in l]
        assert len(lines) == 2
        import re

        for line in lines:
            assert re.fullmatch(r"top[13] instability: \d+\.\d\d%", line)
        assert (report_out / "top1" / "overall.csv").is_file()
        assert (report_out / "top3" / "overall.csv").is_file()

    def test_stable_only_records_zero_headline(self, workspace, tmp_path, capsys):
        _, config_path, _ = workspace
        records = [
            metrics.PredictionRecord(f"im{i}", env, ((0, 1.0),), (0,))
            for i in range(4)
            for env in ("a", "b")
        ]
        path = tmp_path / "records.jsonl"
        dataset.save_records(records, path)
        cli.main([
            "report", "--config", str(config_path), "--records", str(path),
            "--out", str(tmp_path / "rep"), "--k", "1",
        ])
        out = capsys.readouterr().out
        assert "top1 instability: 0.00%" in out

    def test_headline_matches_compute_instability(self, workspace, tmp_path, capsys):
        _, config_path, _ = workspace
        infer_out = tmp_path / "infer"
        cli.main(["infer", "--config", str(config_path), "--out", str(infer_out)])
        records = dataset.load_records(infer_out / "records.jsonl")
        expected = metrics.compute_instability(records, 1).overall_instability
        cli.main([
            "report", "--config", str(config_path),
            "--records", str(infer_out / "records.jsonl"),
            "--out", str(tmp_path / "rep"), "--k", "1",
        ])
        line = [l for l in capsys.readouterr().out.splitlines() if "top1" in l][0]
        assert line == f"top1 instability: {expected * 100:.2f}%"


class TestTrain:
    def test_grid_of_one_gives_two_checkpoints(self, workspace, tmp_path):
        root, _, config = workspace
        stability = {
            "loss_kind": "relative_entropy",
            "alpha": 0.1,
            "noise_kind": "distortion",
            "epochs": 1,
            "batch_size": 8,
            "learning_rate": 0.02,
        }
        path = _rewrite(root, config, "train.json", stability=stability)
        out = tmp_path / "train"
        assert cli.main(["train", "--config", str(path), "--out", str(out)]) == 0
        checkpoints = sorted((out / "checkpoints").glob("*.f32"))
        assert len(checkpoints) == 2
        names = {p.stem for p in checkpoints}
        assert "baseline_no_noise" in names
        traces = sorted((out / "traces").glob("*.csv"))
        assert len(traces) == 2

    def test_rerun_identical_digests(self, workspace, tmp_path):
        root, _, config = workspace
        stability = {"alpha": 0.05, "noise_kind": "gaussian", "sigma2": 0.01,
                     "epochs": 1, "batch_size": 8}
        path = _rewrite(root, config, "train2.json", stability=stability)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        cli.main(["train", "--config", str(path), "--out", str(out_a)])
        cli.main(["train", "--config", str(path), "--out", str(out_b)])
        for ckpt in sorted((out_a / "checkpoints").glob("*.f32")):
            assert ckpt.read_bytes() == (out_b / "checkpoints" / ckpt.name).read_bytes()

    def test_train_without_stability_errors(self, workspace, tmp_path):
        _, config_path, _ = workspace
        code = cli.main(["train", "--config", str(config_path), "--out", str(tmp_path / "x")])
        assert code == 2

    def test_paired_noise_via_manifest(self, workspace, tmp_path):
        root, _, config = workspace
        # a second rendering of the same classes serves as the paired devices' shots
        write_desk_dataset(root / "data_b", train_per_class=3, eval_per_class=2, seed=99)
        stability = {
            "loss_kind": "embedding_distance",
            "alpha": 0.001,
            "noise_kind": "paired_images",
            "paired_manifest": "data_b/train.jsonl",
            "epochs": 1,
            "batch_size": 8,
        }
        path = _rewrite(root, config, "paired.json", stability=stability)
        out = tmp_path / "paired"
        assert cli.main(["train", "--config", str(path), "--out", str(out)]) == 0
        assert len(sorted((out / "checkpoints").glob("*.f32"))) == 2

    def test_subsample_noise_via_manifest(self, workspace, tmp_path):
        root, _, config = workspace
        write_desk_dataset(root / "data_c", train_per_class=4, eval_per_class=2, seed=98)
        stability = {
            "loss_kind": "relative_entropy",
            "alpha": 0.01,
            "noise_kind": "subsample",
            "subsample_k": 2,
            "pool_manifest": "data_c/train.jsonl",
            "epochs": 1,
            "batch_size": 8,
        }
        path = _rewrite(root, config, "subsample.json", stability=stability)
        out = tmp_path / "subsample"
        assert cli.main(["train", "--config", str(path), "--out", str(out)]) == 0
        trace = (out / "traces").glob("*subsample*")
        assert any("subsample" in p.stem for p in (out / "checkpoints").glob("*.f32"))


class TestRun:
    def test_full_pipeline_without_training(self, workspace, tmp_path, capsys):
        _, config_path, _ = workspace
        out = tmp_path / "run"
        assert cli.main(["run", "--config", str(config_path), "--out", str(out)]) == 0
        assert (out / "perturb" / "index.jsonl").is_file()
        assert (out / "infer_model" / "records.jsonl").is_file()
        assert (out / "report_model" / "top1" / "overall.csv").is_file()
        assert "instability:" in capsys.readouterr().out

    def test_unknown_env_id_is_runtime_error(self, workspace, tmp_path):
        _, config_path, _ = workspace
        code = cli.main([
            "perturb", "--config", str(config_path),
            "--out", str(tmp_path / "x"), "--env", "nonexistent",
        ])
        assert code == 2
