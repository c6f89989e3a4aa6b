"""Two software ISPs, one sensor: how much do converters disagree?

Feeds the same synthetic RGGB raws through two divergent ISP presets
(neutral gamma-2.2 with denoising vs warm gamma-1.8 with sharpening),
saves the side-by-side conversions, and measures how often a trained
classifier flips between the two renderings of the same scene.

Run:  python demos/demo_isp_divergence.py   (about 2 minutes on CPU)
"""

from pathlib import Path

import numpy as np

import stabilab as sl
from stabilab.cli import infer_records
from stabilab.envsim import EnvironmentSpec, IspPipeline
from stabilab.metrics import compute_instability, pairwise_instability
from stabilab.stability import StabilityConfig, stability_train
from stabilab.synth import make_desk_dataset, make_test_image, pretraining_set

OUT = Path(__file__).parent / "out" / "isp_divergence"


def main():
    OUT.mkdir(parents=True, exist_ok=True)

    # visual: one scene, two converters
    scene = make_test_image()
    raw = sl.mosaic(scene)
    rendered_a = sl.simulate_isp(raw, sl.ISP_A)
    rendered_b = sl.simulate_isp(raw, sl.ISP_B)
    (OUT / "isp_a.png").write_bytes(sl.encode_image(rendered_a, "png"))
    (OUT / "isp_b.png").write_bytes(sl.encode_image(rendered_b, "png"))
    print(f"mean |isp_a - isp_b| on the test scene: {np.abs(rendered_a - rendered_b).mean():.4f}")

    # quantitative: instability between the two converters
    train, evald, classes = make_desk_dataset(train_per_class=120, eval_per_class=40, seed=4)
    config = StabilityConfig(alpha=0.0, epochs=5, batch_size=64, learning_rate=0.05,
                             momentum=0.9, seed=4)
    params, _ = stability_train(pretraining_set(train, seed=4), None, None, config,
                                sl.init_reference_params(10, seed=4))

    environments = [
        EnvironmentSpec("isp_a", (IspPipeline(config=sl.ISP_A),), seed=11),
        EnvironmentSpec("isp_b", (IspPipeline(config=sl.ISP_B),), seed=12),
    ]
    records = infer_records(params, evald, environments)
    report = compute_instability(records, k=1)
    print(f"\naccuracy under isp_a: {report.per_env_accuracy['isp_a']:.1%}")
    print(f"accuracy under isp_b: {report.per_env_accuracy['isp_b']:.1%}")
    print(f"pairwise instability isp_a vs isp_b: "
          f"{pairwise_instability(records, 'isp_a', 'isp_b', 1):.1%}")
    print(f"\nconversions written to {OUT}")


if __name__ == "__main__":
    main()
