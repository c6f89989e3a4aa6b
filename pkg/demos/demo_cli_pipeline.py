"""The whole experiment as a config-driven batch pipeline.

Materializes a small dataset to disk, writes an experiment config, and
drives the stabilab CLI end to end: validate -> perturb -> infer ->
report.  Everything under one seed; running this script twice produces
byte-identical records and reports.

Run:  python demos/demo_cli_pipeline.py
"""

import json
from pathlib import Path

from stabilab import cli
from stabilab.synth import write_desk_dataset

OUT = Path(__file__).parent / "out" / "cli_pipeline"


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    write_desk_dataset(OUT / "data", train_per_class=6, eval_per_class=4, seed=11)

    config = {
        "version": 1,
        "seed": 2024,
        "dataset": {
            "train_manifest": "data/train.jsonl",
            "eval_manifest": "data/eval.jsonl",
        },
        "model": "init",
        "environments": [
            {"env_id": "clean", "transforms": []},
            {"env_id": "jpeg50", "transforms": [{"kind": "jpeg_roundtrip", "quality": 50}]},
            {"env_id": "warm_isp", "transforms": [{"kind": "isp", "preset": "isp_b"}]},
            {"env_id": "noisy", "transforms": [{"kind": "gaussian_noise", "sigma2": 0.02}]},
        ],
        "metrics": {"k": [1, 3]},
        "output_dir": "run_out",
    }
    config_path = OUT / "experiment.json"
    config_path.write_text(json.dumps(config, indent=2))

    for argv in (
        ["validate", "--config", str(config_path)],
        ["perturb", "--config", str(config_path), "--out", str(OUT / "variants"), "--jobs", "2"],
        ["infer", "--config", str(config_path), "--out", str(OUT / "inference"), "--jobs", "2"],
        ["report", "--config", str(config_path),
         "--records", str(OUT / "inference" / "records.jsonl"),
         "--out", str(OUT / "reports")],
    ):
        print(f"\n$ stabilab {' '.join(argv)}")
        code = cli.main(argv)
        assert code == 0, f"command failed with exit code {code}"

    print(f"\nartifacts: {OUT}/variants, {OUT}/inference, {OUT}/reports")
    print("rerun this script: every output file will be byte-identical")


if __name__ == "__main__":
    main()
