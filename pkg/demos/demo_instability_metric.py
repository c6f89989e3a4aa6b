"""The instability metric on a hand-built set of predictions.

Six images photographed by three virtual devices.  Some images are
classified the same way everywhere (stable), some flip between devices
(unstable), and one is wrong everywhere — which counts as stable, because
there is no correct/incorrect divergence to speak of.

Run:  python demos/demo_instability_metric.py
"""

from pathlib import Path

from stabilab.metrics import (
    PredictionRecord,
    compute_instability,
    confidence_split,
    render_report,
)

OUT = Path(__file__).parent / "out" / "instability_metric"


def record(image, env, top, accepted, conf):
    rest = (1.0 - conf) / 2
    ranked = [(top, conf)] + [(c, rest) for c in (0, 1, 2) if c != top]
    return PredictionRecord(image, env, tuple(ranked), (accepted,))


def main():
    devices = ("phone_a", "phone_b", "phone_c")
    # per image: (accepted class, per-device top-1 prediction, confidence)
    scenarios = {
        "cat_easy": (0, [0, 0, 0], 0.95),      # stable correct
        "cat_border": (0, [0, 1, 0], 0.55),    # unstable: phone_b flips
        "dog_easy": (1, [1, 1, 1], 0.90),      # stable correct
        "dog_jpeg": (1, [1, 1, 2], 0.52),      # unstable: phone_c flips
        "bottle_dark": (2, [0, 0, 0], 0.60),   # all wrong -> stable
        "bottle_ok": (2, [2, 2, 2], 0.85),     # stable correct
    }
    records = []
    for image_id, (accepted, tops, conf) in scenarios.items():
        for env, top in zip(devices, tops):
            records.append(record(image_id, env, top, accepted, conf))

    report = compute_instability(records, k=1)
    print(f"images: {report.image_count}, devices: {report.environment_count}")
    print(f"overall instability (top-1): {report.overall_instability:.1%}  (expect 2/6)")
    print(f"all-correct fraction:        {report.all_correct_fraction:.1%}")
    print(f"all-incorrect fraction:      {report.all_incorrect_fraction:.1%}  (the dark bottle)")
    print("\nper-device accuracy:")
    for env, acc in sorted(report.per_env_accuracy.items()):
        print(f"  {env}: {acc:.1%}")
    print("\npairwise instability:")
    for (a, b), v in sorted(report.pairwise.items()):
        print(f"  {a} vs {b}: {v:.1%}")

    buckets = confidence_split(records, k=1)
    print("\ntop-1 confidence by bucket (note unstable predictions sit lower):")
    for name, values in buckets.items():
        mean = sum(values) / len(values) if values else float("nan")
        print(f"  {name:20s} n={len(values):2d}  mean confidence {mean:.2f}")

    files = render_report(report, OUT)
    print(f"\nwrote {len(files)} report files to {OUT}")


if __name__ == "__main__":
    main()
