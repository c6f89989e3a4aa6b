"""JPEG quality alone is enough to destabilize a classifier.

Trains a small model on the bundled shape dataset, then classifies the
same evaluation images after JPEG round trips at qualities 100, 85, and
50.  Accuracy barely moves across qualities — but a solid slice of images
flips between correct and incorrect depending on the quality, which is
exactly what the instability metric captures and accuracy hides.

Run:  python demos/demo_compression_sweep.py   (about 2 minutes on CPU)
"""

from pathlib import Path

import numpy as np

import stabilab as sl
from stabilab.cli import infer_records
from stabilab.envsim import EnvironmentSpec, JpegRoundtrip
from stabilab.metrics import compute_instability, render_report
from stabilab.stability import StabilityConfig, stability_train
from stabilab.synth import make_desk_dataset, pretraining_set

OUT = Path(__file__).parent / "out" / "compression_sweep"


def main():
    train, evald, classes = make_desk_dataset(train_per_class=120, eval_per_class=40, seed=3)
    print(f"training on {len(train)} images, evaluating on {len(evald)}")
    config = StabilityConfig(alpha=0.0, epochs=5, batch_size=64, learning_rate=0.05,
                             momentum=0.9, seed=3)
    params, _ = stability_train(pretraining_set(train, seed=3), None, None, config,
                                sl.init_reference_params(10, seed=3))

    environments = [
        EnvironmentSpec(f"jpeg{q}", (JpegRoundtrip(quality=q),), seed=100 + q)
        for q in (100, 85, 50)
    ]
    sizes = {
        env.env_id: np.mean([
            len(sl.encode_image(img.tensor, "jpeg", quality=int(env.env_id[4:])))
            for img in evald[:50]
        ])
        for env in environments
    }

    records = infer_records(params, evald, environments)
    report = compute_instability(records, k=1)

    print(f"\n{'environment':10s} {'avg bytes':>10s} {'accuracy':>9s}")
    for env in environments:
        print(f"{env.env_id:10s} {sizes[env.env_id]:10.0f} {report.per_env_accuracy[env.env_id]:9.1%}")
    print(f"\naccuracy spread: "
          f"{max(report.per_env_accuracy.values()) - min(report.per_env_accuracy.values()):.1%}")
    print(f"instability across qualities: {report.overall_instability:.1%}")
    print("pairwise:")
    for (a, b), v in sorted(report.pairwise.items()):
        print(f"  {a} vs {b}: {v:.1%}")

    render_report(report, OUT)
    print(f"\nreport written to {OUT}")


if __name__ == "__main__":
    main()
