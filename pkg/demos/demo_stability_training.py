"""Stability fine-tuning versus plain fine-tuning, head to head.

Starting from one shared pretrained model, fine-tunes twice with the same
seed and schedule: once with plain cross-entropy ("no noise") and once
with the augmented loss CE + alpha * KL(p(x) || p(x')) where x' is a
randomly distorted copy of each training image.  Then measures prediction
instability across three virtual devices on held-out images.

Run:  python demos/demo_stability_training.py   (about 4 minutes on CPU)
"""

from pathlib import Path

import numpy as np

import stabilab as sl
from stabilab.cli import infer_records
from stabilab.metrics import compute_instability
from stabilab.stability import StabilityConfig, source_for_config, stability_train, write_loss_trace
from stabilab.synth import make_desk_dataset, pretraining_set

OUT = Path(__file__).parent / "out" / "stability_training"


def evaluate(params, evald, devices):
    records = infer_records(params, evald, devices)
    report = compute_instability(records, k=1)
    acc = float(np.mean(list(report.per_env_accuracy.values())))
    return report.overall_instability, acc


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    train, evald, classes = make_desk_dataset(train_per_class=150, eval_per_class=50, seed=6)
    devices = sl.desk_devices()
    print(f"{len(train)} train / {len(evald)} eval images; "
          f"devices: {[d.env_id for d in devices]}")

    pre = StabilityConfig(alpha=0.0, epochs=5, batch_size=64, learning_rate=0.05,
                          momentum=0.9, seed=6)
    base, _ = stability_train(pretraining_set(train, seed=6), None, None, pre,
                              sl.init_reference_params(10, seed=6))
    inst, acc = evaluate(base, evald, devices)
    print(f"\npretrained base      : instability {inst:.1%}, mean device accuracy {acc:.1%}")

    runs = {
        "no_noise": StabilityConfig(alpha=0.0, epochs=6, batch_size=64,
                                    learning_rate=0.02, momentum=0.9, seed=106),
        "kl_distortion": StabilityConfig(loss_kind="relative_entropy", alpha=0.1,
                                         noise_kind="distortion", epochs=6, batch_size=64,
                                         learning_rate=0.02, momentum=0.9, seed=106),
        "embed_gaussian": StabilityConfig(loss_kind="embedding_distance", alpha=0.001,
                                          noise_kind="gaussian", sigma2=0.04, epochs=6,
                                          batch_size=64, learning_rate=0.02, momentum=0.9,
                                          seed=106),
    }
    results = {}
    for name, config in runs.items():
        source = source_for_config(config) if config.alpha > 0 else None
        tuned, trace = stability_train(train, None, source, config, base)
        write_loss_trace(trace, OUT / f"trace_{name}.csv")
        results[name] = evaluate(tuned, evald, devices)
        inst, acc = results[name]
        print(f"fine-tune {name:14s}: instability {inst:.1%}, mean device accuracy {acc:.1%}")

    baseline_inst = results["no_noise"][0]
    print("\nrelative instability change vs the no-noise fine-tune:")
    for name, (inst, _) in results.items():
        if name != "no_noise" and baseline_inst > 0:
            print(f"  {name:14s}: {(inst - baseline_inst) / baseline_inst:+.1%}")
    print(f"\nloss traces written to {OUT}")


if __name__ == "__main__":
    main()
