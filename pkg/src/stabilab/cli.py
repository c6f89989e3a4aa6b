"""Experiment orchestration: a batch CLI driven by one JSON config file.

Subcommands: validate, perturb, infer, train, report, run.  Exit codes:
0 success, 1 validation failure, 2 runtime error.  All randomness flows
from the config's global seed (overridable with --seed): environments
without an explicit seed derive theirs from (global seed, env_id), model
initialization uses the global seed, and stability runs default to it.

Outputs are reproducible byte for byte: record files are sorted by
(image_id, environment_id) before writing regardless of worker count,
and every output directory receives a copy of the resolved config plus
the tool version.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, dataset, envsim, metrics, model, stability
from .seeding import stable_hash64


@dataclass(frozen=True)
class Violation:
    code: str
    message: str

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


@dataclass
class ExperimentConfig:
    base_dir: Path
    seed: int
    train_manifest: Path | None
    eval_manifest: Path | None
    model: str
    environments: list[envsim.EnvironmentSpec]
    stability_grid: list[stability.StabilityConfig] | None
    paired_manifest: Path | None
    pool_manifest: Path | None
    k_values: list[int]
    output_dir: Path
    raw: dict


# ---------------------------------------------------------------------------
# config parsing / validation


def _parse_stability(obj: dict, global_seed: int) -> stability.StabilityConfig:
    ranges = envsim.DistortionRanges()
    if "distortion_ranges" in obj:
        r = obj["distortion_ranges"]
        jpeg = r.get("jpeg_quality", (50, 100))
        ranges = envsim.DistortionRanges(
            hue_delta=tuple(r.get("hue_delta", (-18.0, 18.0))),
            contrast=tuple(r.get("contrast", (0.8, 1.25))),
            brightness=tuple(r.get("brightness", (-0.125, 0.125))),
            saturation=tuple(r.get("saturation", (0.8, 1.25))),
            jpeg_quality=None if jpeg is None else tuple(jpeg),
        )
    return stability.StabilityConfig(
        loss_kind=obj.get("loss_kind", "relative_entropy"),
        alpha=float(obj.get("alpha", 0.0)),
        noise_kind=obj.get("noise_kind", "gaussian"),
        sigma2=float(obj.get("sigma2", 0.04)),
        distortion_ranges=ranges,
        subsample_k=int(obj.get("subsample_k", 10)),
        epochs=int(obj.get("epochs", 5)),
        batch_size=int(obj.get("batch_size", 64)),
        learning_rate=float(obj.get("learning_rate", 0.02)),
        momentum=float(obj.get("momentum", 0.9)),
        seed=int(obj.get("seed", global_seed)),
    )


def load_config(path: str | Path, seed_override: int | None = None):
    """Parse a config file; returns (config_or_None, violations)."""
    path = Path(path)
    violations: list[Violation] = []
    if not path.is_file():
        return None, [Violation("E_PATH", f"config file not found: {path}")]
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        return None, [Violation("E_SCHEMA", f"config is not valid JSON: {exc}")]
    if not isinstance(raw, dict):
        return None, [Violation("E_SCHEMA", "config root must be a JSON object")]

    base_dir = path.parent
    seed = int(raw.get("seed", 0)) if seed_override is None else int(seed_override)

    def resolve(p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else base_dir / p

    ds = raw.get("dataset", {})
    train_manifest = resolve(ds["train_manifest"]) if ds.get("train_manifest") else None
    eval_manifest = resolve(ds["eval_manifest"]) if ds.get("eval_manifest") else None
    for name, manifest in (("train_manifest", train_manifest), ("eval_manifest", eval_manifest)):
        if manifest is not None:
            if not manifest.is_file():
                violations.append(Violation("E_PATH", f"{name} not found: {manifest}"))
            else:
                try:
                    dataset.load_manifest(manifest)
                except dataset.ManifestError as exc:
                    violations.append(Violation("E_MANIFEST", str(exc)))
    if eval_manifest is None:
        violations.append(Violation("E_SCHEMA", "dataset.eval_manifest is required"))

    environments: list[envsim.EnvironmentSpec] = []
    seen_env = set()
    for i, env_obj in enumerate(raw.get("environments", [])):
        try:
            if "seed" not in env_obj:
                env_obj = dict(env_obj)
                env_obj["seed"] = stable_hash64(f"{seed}:{env_obj.get('env_id', i)}")
            env = envsim.environment_from_dict(env_obj)
        except (KeyError, TypeError, ValueError) as exc:
            violations.append(Violation("E_ENV_BAD", f"environments[{i}]: {exc}"))
            continue
        if env.env_id in seen_env:
            violations.append(Violation("E_ENV_DUP", f"duplicate environment id {env.env_id!r}"))
            continue
        seen_env.add(env.env_id)
        environments.append(env)
    if not environments:
        violations.append(Violation("E_SCHEMA", "at least one environment is required"))

    model_ref = raw.get("model", "init")
    if model_ref != "init":
        ckpt = resolve(model_ref)
        if not ckpt.is_file():
            violations.append(Violation("E_MODEL", f"model checkpoint not found: {ckpt}"))

    stability_grid = None
    paired_manifest = pool_manifest = None
    stab_obj = raw.get("stability")
    if stab_obj is not None:
        cells = stab_obj.get("grid", [stab_obj]) if isinstance(stab_obj, dict) else None
        if cells is None:
            violations.append(Violation("E_STAB", "stability must be an object or {'grid': [...]}"))
        else:
            stability_grid = []
            for i, cell in enumerate(cells):
                try:
                    stability_grid.append(_parse_stability(cell, seed))
                except (KeyError, TypeError, ValueError) as exc:
                    violations.append(Violation("E_STAB", f"stability grid[{i}]: {exc}"))
            if isinstance(stab_obj, dict):
                if stab_obj.get("paired_manifest"):
                    paired_manifest = resolve(stab_obj["paired_manifest"])
                    if not paired_manifest.is_file():
                        violations.append(Violation("E_PATH", f"paired_manifest not found: {paired_manifest}"))
                if stab_obj.get("pool_manifest"):
                    pool_manifest = resolve(stab_obj["pool_manifest"])
                    if not pool_manifest.is_file():
                        violations.append(Violation("E_PATH", f"pool_manifest not found: {pool_manifest}"))
            if stability_grid is not None and train_manifest is None:
                violations.append(Violation("E_SCHEMA", "stability training requires dataset.train_manifest"))

    k_values = [int(k) for k in raw.get("metrics", {}).get("k", [1])]
    for k in k_values:
        if k < 1:
            violations.append(Violation("E_K", f"metrics k values must be >= 1, got {k}"))

    output_dir = resolve(raw.get("output_dir", "out"))

    config = ExperimentConfig(
        base_dir=base_dir,
        seed=seed,
        train_manifest=train_manifest,
        eval_manifest=eval_manifest,
        model=model_ref,
        environments=environments,
        stability_grid=stability_grid,
        paired_manifest=paired_manifest,
        pool_manifest=pool_manifest,
        k_values=k_values,
        output_dir=output_dir,
        raw=raw,
    )
    return (config if not violations else None), violations


def _write_provenance(config: ExperimentConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {
        "tool": "stabilab",
        "version": __version__,
        "seed": config.seed,
        "config": config.raw,
    }
    (out_dir / "resolved_config.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# dataset helpers


def _load_split(manifest_path: Path) -> tuple[dataset.DatasetManifest, list[dataset.LabeledImage]]:
    manifest = dataset.load_manifest(manifest_path)
    images = dataset.load_images(manifest, manifest_path.parent)
    return manifest, images


def _load_model(config: ExperimentConfig, num_classes: int) -> model.ModelParams:
    if config.model == "init":
        return model.init_reference_params(num_classes, config.seed)
    ckpt = Path(config.model)
    if not ckpt.is_absolute():
        ckpt = config.base_dir / ckpt
    params = model.load_params(ckpt)
    if params.num_classes != num_classes:
        raise model.CheckpointError(
            f"checkpoint has {params.num_classes} classes, dataset has {num_classes}"
        )
    return params


def _select_environments(config: ExperimentConfig, env_ids: list[str] | None):
    if not env_ids:
        return config.environments
    by_id = {e.env_id: e for e in config.environments}
    missing = [e for e in env_ids if e not in by_id]
    if missing:
        raise ValueError(f"unknown environment ids: {missing}")
    return [by_id[e] for e in env_ids]


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(config_path: Path, seed_override: int | None) -> int:
    _, violations = load_config(config_path, seed_override)
    for violation in violations:
        print(violation)
    if violations:
        return 1
    print("config ok")
    return 0


def _canonical_variant(img: np.ndarray, env: envsim.EnvironmentSpec, image_id: str) -> np.ndarray:
    """Environment output in canonical 8-bit form (what a saved PNG holds)."""
    variant = envsim.apply_environment(img, env, image_id)
    return dataset.dequantize_u8(dataset.quantize_u8(variant))


def infer_records(
    params: model.ModelParams,
    images: list[dataset.LabeledImage],
    environments: list[envsim.EnvironmentSpec],
    jobs: int = 1,
) -> list[metrics.PredictionRecord]:
    """One record per (image, environment), streamed in memory.

    Variants are 8-bit-canonicalized before inference, so the records match
    what a materialized-PNG pipeline would produce, byte for byte.  The
    same parameters serve every environment.
    """
    n_classes = params.num_classes

    def work(task):
        image, env = task
        canonical = _canonical_variant(image.tensor, env, image.image_id)
        result = model.forward(params, model.preprocess(canonical))
        ranked = model.predict_topk(result.probabilities, n_classes)
        return metrics.PredictionRecord(
            image_id=image.image_id,
            environment_id=env.env_id,
            ranked=tuple((c, dataset.round_sig(p)) for c, p in ranked),
            accepted_labels=image.accepted_labels,
        )

    tasks = [(image, env) for image in images for env in environments]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(work, tasks))
    else:
        records = [work(t) for t in tasks]
    records.sort(key=lambda r: (r.image_id, r.environment_id))
    return records


def cmd_perturb(
    config: ExperimentConfig,
    env_ids: list[str] | None,
    out_dir: Path,
    jobs: int = 1,
    split: str = "eval",
) -> int:
    manifest_path = config.train_manifest if split == "train" else config.eval_manifest
    _, images = _load_split(manifest_path)
    environments = _select_environments(config, env_ids)
    _write_provenance(config, out_dir)

    def work(task):
        image, env = task
        variant = envsim.apply_environment(image.tensor, env, image.image_id)
        png = dataset.encode_image(variant, "png")
        rel = Path("variants") / env.env_id / f"{image.image_id}.png"
        target = out_dir / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(png)
        return {
            "image_id": image.image_id,
            "env_id": env.env_id,
            "seed": env.seed,
            "path": rel.as_posix(),
            "fingerprint": envsim.decode_fingerprint(png),
        }

    tasks = [(image, env) for image in images for env in environments]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(work, tasks))
    else:
        rows = [work(t) for t in tasks]
    rows.sort(key=lambda r: (r["image_id"], r["env_id"]))
    with (out_dir / "index.jsonl").open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    print(f"wrote {len(rows)} variants to {out_dir}")
    return 0


def cmd_infer(
    config: ExperimentConfig,
    checkpoint: str | None,
    env_ids: list[str] | None,
    out_dir: Path,
    jobs: int = 1,
    variants_dir: Path | None = None,
) -> int:
    manifest, images = _load_split(config.eval_manifest)
    environments = _select_environments(config, env_ids)
    if checkpoint:
        params = model.load_params(checkpoint)
    else:
        params = _load_model(config, len(manifest.class_vocabulary))
    n_classes = params.num_classes
    _write_provenance(config, out_dir)

    if variants_dir is None:
        records = infer_records(params, images, environments, jobs=jobs)
    else:

        def work(task):
            image, env = task
            png_path = variants_dir / "variants" / env.env_id / f"{image.image_id}.png"
            if not png_path.is_file():
                raise FileNotFoundError(f"missing variant image: {png_path}")
            canonical = dataset.decode_image(png_path.read_bytes())
            result = model.forward(params, model.preprocess(canonical))
            ranked = model.predict_topk(result.probabilities, n_classes)
            return metrics.PredictionRecord(
                image_id=image.image_id,
                environment_id=env.env_id,
                ranked=tuple((c, dataset.round_sig(p)) for c, p in ranked),
                accepted_labels=image.accepted_labels,
            )

        tasks = [(image, env) for image in images for env in environments]
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                records = list(pool.map(work, tasks))
        else:
            records = [work(t) for t in tasks]
        records.sort(key=lambda r: (r.image_id, r.environment_id))
    records_path = out_dir / "records.jsonl"
    count = dataset.save_records(records, records_path)
    print(f"wrote {count} records to {records_path}")
    return 0


def cmd_train(config: ExperimentConfig, out_dir: Path) -> int:
    if not config.stability_grid:
        raise ValueError("config has no stability section to train from")
    manifest, train_images = _load_split(config.train_manifest)
    train_images = [
        dataset.LabeledImage(im.image_id, model.preprocess(im.tensor), im.accepted_labels)
        for im in train_images
    ]
    base = _load_model(config, len(manifest.class_vocabulary))
    _write_provenance(config, out_dir)
    ckpt_dir = out_dir / "checkpoints"
    trace_dir = out_dir / "traces"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    trace_dir.mkdir(parents=True, exist_ok=True)

    paired = None
    pool_images = None
    if config.paired_manifest is not None:
        pair_manifest, pair_images = _load_split(config.paired_manifest)
        pair_images = [
            dataset.LabeledImage(im.image_id, model.preprocess(im.tensor), im.accepted_labels)
            for im in pair_images
        ]
        if len(pair_images) != len(train_images):
            raise ValueError("paired manifest must align one-to-one with the train manifest")
        paired = {}
        for train_img, pair_img in zip(train_images, pair_images):
            if pair_img.primary_label != train_img.primary_label:
                raise ValueError(
                    f"paired image {pair_img.image_id!r} has a different class than "
                    f"{train_img.image_id!r}"
                )
            paired[train_img.image_id] = pair_img
    if config.pool_manifest is not None:
        _, pool_images = _load_split(config.pool_manifest)
        pool_images = [
            dataset.LabeledImage(im.image_id, model.preprocess(im.tensor), im.accepted_labels)
            for im in pool_images
        ]

    runs: list[tuple[str, stability.StabilityConfig]] = []
    for i, cell in enumerate(config.stability_grid):
        runs.append((f"{i:02d}_{cell.describe()}", cell))
    baseline = dataclasses.replace(config.stability_grid[0], alpha=0.0)
    runs.append(("baseline_no_noise", baseline))

    summary_rows = []
    for name, cell in runs:
        source = None
        if cell.alpha > 0.0:
            source = stability.source_for_config(cell, paired=paired, pool_images=pool_images)
        params, trace = stability.stability_train(train_images, None, source, cell, base)
        ckpt_path = ckpt_dir / f"{name}.f32"
        model.save_params(params, ckpt_path)
        stability.write_loss_trace(trace, trace_dir / f"{name}.csv")
        final_loss = trace[-1].mean_loss if trace else float("nan")
        summary_rows.append([name, cell.loss_kind, cell.noise_kind, f"{cell.alpha:g}", f"{final_loss:.6f}"])
        print(f"trained {name}: final mean loss {final_loss:.4f}")

    with (out_dir / "training_summary.csv").open("w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["name", "loss_kind", "noise_kind", "alpha", "final_mean_loss"])
        writer.writerows(summary_rows)
    print(f"wrote {len(runs)} checkpoints to {ckpt_dir}")
    return 0


def cmd_report(config: ExperimentConfig, records_path: Path, out_dir: Path, k_values=None) -> int:
    records = dataset.load_records(records_path)
    _write_provenance(config, out_dir)
    for k in k_values or config.k_values:
        report = metrics.compute_instability(records, k)
        metrics.render_report(report, out_dir / f"top{k}")
        print(f"top{k} instability: {report.overall_instability * 100:.2f}%")
    return 0


def cmd_run(config: ExperimentConfig, out_dir: Path, jobs: int = 1) -> int:
    cmd_perturb(config, None, out_dir / "perturb", jobs=jobs)
    checkpoints: list[tuple[str, str | None]] = []
    if config.stability_grid:
        cmd_train(config, out_dir / "train")
        for path in sorted((out_dir / "train" / "checkpoints").glob("*.f32")):
            checkpoints.append((path.stem, str(path)))
    else:
        checkpoints.append(("model", None))
    for name, ckpt in checkpoints:
        infer_dir = out_dir / f"infer_{name}"
        cmd_infer(config, ckpt, None, infer_dir, jobs=jobs)
        print(f"[{name}]")
        cmd_report(config, infer_dir / "records.jsonl", out_dir / f"report_{name}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stabilab",
        description="measure and reduce cross-device prediction instability",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--config", required=True, type=Path, help="experiment config JSON")
        p.add_argument("--out", type=Path, default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--jobs", type=int, default=1, help="parallel workers")

    common(sub.add_parser("validate", help="check config, manifests, environments"))
    p = sub.add_parser("perturb", help="materialize environment variants as PNGs")
    common(p)
    p.add_argument("--env", action="append", default=None, help="environment id (repeatable)")
    p.add_argument("--split", choices=["train", "eval"], default="eval")
    p = sub.add_parser("infer", help="run the model over every (image, environment)")
    common(p)
    p.add_argument("--env", action="append", default=None)
    p.add_argument("--checkpoint", default=None, help="checkpoint path (default: config model)")
    p.add_argument("--variants-dir", type=Path, default=None,
                   help="read materialized variants instead of streaming")
    common(sub.add_parser("train", help="run the stability-training grid plus baseline"))
    p = sub.add_parser("report", help="compute instability reports from records")
    common(p)
    p.add_argument("--records", type=Path, required=True)
    p.add_argument("--k", type=lambda s: [int(v) for v in s.split(",")], default=None,
                   help="comma-separated top-k list (default: config metrics.k)")
    common(sub.add_parser("run", help="full pipeline: perturb, train, infer, report"))
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "validate":
        return cmd_validate(args.config, args.seed)
    config, violations = load_config(args.config, args.seed)
    if config is None:
        for violation in violations:
            print(violation, file=sys.stderr)
        return 1
    out_dir = args.out if args.out is not None else config.output_dir
    try:
        if args.command == "perturb":
            return cmd_perturb(config, args.env, out_dir, jobs=args.jobs, split=args.split)
        if args.command == "infer":
            return cmd_infer(config, args.checkpoint, args.env, out_dir, jobs=args.jobs,
                             variants_dir=args.variants_dir)
        if args.command == "train":
            return cmd_train(config, out_dir)
        if args.command == "report":
            return cmd_report(config, args.records, out_dir, k_values=args.k)
        if args.command == "run":
            return cmd_run(config, out_dir, jobs=args.jobs)
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"error: {exc}", file=sys.stderr)
        return 2
    raise AssertionError(f"unhandled command {args.command}")


def entrypoint() -> None:
    sys.exit(main())
