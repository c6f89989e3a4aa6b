import dataclasses
import math

import numpy as np
import pytest

from stabilab import model, stability
from stabilab.dataset import LabeledImage
from stabilab.envsim import DistortionRanges
from stabilab.model import LossConfig
from stabilab.seeding import derive_rng
from stabilab.stability import (
    GeneratedSource,
    PairedSource,
    StabilityConfig,
    SubsamplePoolSource,
    build_subsample_pools,
    combined_loss,
    embedding_stability_loss,
    grid_search,
    kl_stability_loss,
    make_counterpart,
    stability_train,
)
from conftest import random_image


@pytest.fixture()
def toy_params():
    return model.build_params((8, 8), [4], 5, 3, seed=42)


def _labeled_set(rng, n=12, classes=3, size=8):
    return [
        LabeledImage(f"img_{i:03d}", random_image(rng, size, size), (i % classes,))
        for i in range(n)
    ]


class TestKlLoss:
    def test_identical_distributions_zero(self, rng):
        p = rng.dirichlet(np.ones(6))
        assert kl_stability_loss(p, p) == 0.0

    def test_hand_value(self):
        value = kl_stability_loss(np.array([0.5, 0.5]), np.array([0.9, 0.1]))
        expected = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
        assert abs(value - expected) < 1e-12
        assert abs(value - 0.5108) < 1e-3

    def test_nonnegative_on_random_pairs(self, rng):
        for _ in range(300):
            p = rng.dirichlet(np.ones(10))
            q = rng.dirichlet(np.ones(10))
            assert kl_stability_loss(p, q) >= 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            kl_stability_loss(np.ones(3) / 3, np.ones(4) / 4)

    def test_zero_probabilities_floored(self):
        value = kl_stability_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
        assert np.isfinite(value)


class TestEmbeddingLoss:
    def test_equal_vectors_zero(self, rng):
        f = rng.normal(size=8)
        assert embedding_stability_loss(f, f) == 0.0

    def test_three_four_five(self):
        assert embedding_stability_loss(np.array([3.0, 4.0]), np.array([0.0, 0.0])) == 5.0

    def test_symmetry(self, rng):
        f, g = rng.normal(size=8), rng.normal(size=8)
        assert embedding_stability_loss(f, g) == embedding_stability_loss(g, f)

    def test_triangle_inequality_spot_check(self, rng):
        for _ in range(100):
            a, b, c = (rng.normal(size=6) for _ in range(3))
            assert embedding_stability_loss(a, c) <= (
                embedding_stability_loss(a, b) + embedding_stability_loss(b, c) + 1e-12
            )

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            embedding_stability_loss(np.ones(3), np.ones(4))


class TestCombinedLoss:
    def test_alpha_zero_is_cross_entropy(self, toy_params, rng):
        x = random_image(rng, 8, 8)
        expected = model.cross_entropy(model.forward(toy_params, x).probabilities, 1)
        value = combined_loss(x, None, 1, toy_params, LossConfig("relative_entropy", 0.0))
        assert abs(value - expected) < 1e-12

    def test_identical_pair_collapses_to_base(self, toy_params, rng):
        x = random_image(rng, 8, 8)
        base = combined_loss(x, None, 0, toy_params, LossConfig("relative_entropy", 0.0))
        both = combined_loss(x, x, 0, toy_params, LossConfig("relative_entropy", 1.0))
        assert abs(both - base) < 1e-12

    @pytest.mark.parametrize("kind", ["relative_entropy", "embedding_distance"])
    def test_alpha_one_sums_terms(self, toy_params, rng, kind):
        x = random_image(rng, 8, 8)
        xp = np.clip(x + rng.normal(0.0, 0.1, x.shape), 0.0, 1.0)
        clean = model.forward(toy_params, x)
        noisy = model.forward(toy_params, xp)
        base = model.cross_entropy(clean.probabilities, 2)
        if kind == "relative_entropy":
            stab = kl_stability_loss(clean.probabilities, noisy.probabilities)
        else:
            stab = embedding_stability_loss(clean.embedding, noisy.embedding)
        value = combined_loss(x, xp, 2, toy_params, LossConfig(kind, 1.0))
        assert abs(value - (base + stab)) < 1e-9


class TestCounterparts:
    def test_paired_returns_registered_tensor(self, rng):
        images = _labeled_set(rng, 4)
        counterparts = {
            im.image_id: LabeledImage(im.image_id + "_twin", random_image(rng, 8, 8), im.accepted_labels)
            for im in images
        }
        source = PairedSource(counterparts=counterparts)
        for im in images:
            for _ in range(3):
                out = make_counterpart(im, source, derive_rng(0, "c"))
                assert out is counterparts[im.image_id].tensor

    def test_paired_missing_counterpart(self, rng):
        source = PairedSource(counterparts={})
        with pytest.raises(KeyError, match="no paired counterpart"):
            make_counterpart(_labeled_set(rng, 1)[0], source, derive_rng(0, "c"))

    def test_subsample_k1_is_constant_per_class(self, rng):
        images = _labeled_set(rng, 9, classes=3)
        source = build_subsample_pools(images, k=1)
        gen = derive_rng(1, "c")
        for im in images:
            outs = [make_counterpart(im, source, gen) for _ in range(4)]
            assert all(o is outs[0] for o in outs)

    def test_subsample_pool_caps_at_k(self, rng):
        images = _labeled_set(rng, 30, classes=3)
        source = build_subsample_pools(images, k=4)
        assert all(len(pool) == 4 for pool in source.pools.values())

    def test_subsample_empty_pool_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            SubsamplePoolSource(pools={0: ()})

    def test_subsample_missing_class(self, rng):
        images = _labeled_set(rng, 3, classes=3)
        source = build_subsample_pools(images[:1], k=2)  # only class 0 pooled
        with pytest.raises(KeyError, match="pool"):
            make_counterpart(images[1], source, derive_rng(2, "c"))

    def test_generated_gaussian_sigma_zero_is_input(self, rng):
        image = _labeled_set(rng, 1)[0]
        source = GeneratedSource("gaussian", sigma2=0.0)
        out = make_counterpart(image, source, derive_rng(3, "c"))
        assert np.array_equal(out, image.tensor)

    def test_generated_distortion_stays_in_range(self, rng):
        image = _labeled_set(rng, 1)[0]
        source = GeneratedSource("distortion", ranges=DistortionRanges())
        out = make_counterpart(image, source, derive_rng(4, "c"))
        assert out.shape == image.tensor.shape
        assert out.min() >= 0.0 and out.max() <= 1.0


def _small_config(**kw):
    defaults = dict(
        loss_kind="relative_entropy",
        alpha=0.1,
        noise_kind="distortion",
        epochs=2,
        batch_size=4,
        learning_rate=0.01,
        momentum=0.9,
        seed=7,
    )
    defaults.update(kw)
    return StabilityConfig(**defaults)


class TestStabilityTrain:
    def test_zero_epochs_returns_base_params(self, toy_params, rng):
        train = _labeled_set(rng)
        config = _small_config(epochs=0, alpha=0.0)
        params, trace = stability_train(train, None, None, config, toy_params)
        assert trace == []
        for (_, a), (_, b) in zip(params.arrays(), toy_params.arrays()):
            assert np.array_equal(a, b)

    def test_alpha_zero_matches_plain_fine_tune_across_noise_kinds(self, toy_params, rng):
        train = _labeled_set(rng)
        cfg_a = _small_config(alpha=0.0, noise_kind="gaussian")
        cfg_b = _small_config(alpha=0.0, noise_kind="distortion")
        params_a, _ = stability_train(train, None, None, cfg_a, toy_params)
        params_b, _ = stability_train(
            train, None, GeneratedSource("distortion"), cfg_b, toy_params
        )
        assert model.checkpoint_digest(params_a) == model.checkpoint_digest(params_b)

    def test_bit_reproducible(self, toy_params, rng):
        train = _labeled_set(rng)
        config = _small_config()
        source = GeneratedSource("distortion")
        params_a, trace_a = stability_train(train, None, source, config, toy_params)
        params_b, trace_b = stability_train(train, None, source, config, toy_params)
        assert model.checkpoint_digest(params_a) == model.checkpoint_digest(params_b)
        assert trace_a == trace_b

    def test_loss_decreases_on_smoke_run(self, rng):
        params = model.build_params((8, 8), [4], 8, 3, seed=3)
        train = _labeled_set(rng, n=60)
        config = _small_config(epochs=6, batch_size=8, learning_rate=0.05)
        source = GeneratedSource("distortion")
        _, trace = stability_train(train, None, source, config, params)
        assert trace[5].mean_loss < trace[0].mean_loss

    def test_non_finite_loss_aborts_with_batch_index(self, toy_params, rng):
        train = _labeled_set(rng)
        poisoned = train[5].tensor.copy()
        poisoned[3, 3, 1] = np.nan
        train[5] = LabeledImage(train[5].image_id, poisoned, train[5].accepted_labels)
        config = _small_config(alpha=0.0, epochs=1)
        with np.errstate(invalid="ignore"):
            with pytest.raises(stability.TrainingDiverged, match=r"epoch 0, batch \d+"):
                stability_train(train, None, None, config, toy_params)

    def test_alpha_without_source_rejected(self, toy_params, rng):
        with pytest.raises(ValueError, match="counterpart source"):
            stability_train(_labeled_set(rng), None, None, _small_config(), toy_params)

    def test_empty_train_set_rejected(self, toy_params):
        with pytest.raises(ValueError, match="non-empty"):
            stability_train([], None, None, _small_config(alpha=0.0), toy_params)

    def test_trace_csv_format(self, toy_params, rng, tmp_path):
        train = _labeled_set(rng)
        config = _small_config(alpha=0.0, epochs=2)
        _, trace = stability_train(train, None, None, config, toy_params)
        path = tmp_path / "trace.csv"
        stability.write_loss_trace(trace, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,mean_L0,mean_Ls,mean_L"
        assert len(lines) == 3


class TestGridSearch:
    def test_single_config_ranked_first(self):
        config = _small_config()
        results = grid_search([config], lambda c: (0.25, 0.8))
        assert len(results) == 1 and results[0].config == config

    def test_duplicate_configs_get_identical_metrics(self):
        config = _small_config()
        calls = []

        def evaluate(c):
            calls.append(c)
            return (0.125, 0.75)

        results = grid_search([config, config], evaluate)
        assert results[0].instability == results[1].instability == 0.125
        assert results[0].accuracy == results[1].accuracy == 0.75

    def test_ranking_ascending_instability_then_accuracy(self):
        configs = [
            _small_config(alpha=0.01),
            _small_config(alpha=0.1),
            _small_config(alpha=1.0),
        ]
        metrics = {0.01: (0.2, 0.9), 0.1: (0.1, 0.7), 1.0: (0.1, 0.8)}
        results = grid_search(configs, lambda c: metrics[c.alpha])
        assert [r.config.alpha for r in results] == [1.0, 0.1, 0.01]

    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError):
            grid_search([], lambda c: (0.0, 0.0))

    def test_alpha_sweep_grid(self):
        # the alpha magnitudes a realistic sweep spans
        configs = [_small_config(alpha=a) for a in (0.001, 0.01, 0.1, 1.0)]
        results = grid_search(configs, lambda c: (1.0 / (1.0 + c.alpha), 0.5))
        assert [r.config.alpha for r in results] == [1.0, 0.1, 0.01, 0.001]
        assert all(a <= b for a, b in zip(
            [r.instability for r in results], [r.instability for r in results][1:]
        ))


class TestConfigValidation:
    def test_bad_values_rejected(self):
        with pytest.raises(ValueError):
            StabilityConfig(alpha=-1.0)
        with pytest.raises(ValueError):
            StabilityConfig(noise_kind="volcano")
        with pytest.raises(ValueError):
            StabilityConfig(sigma2=-0.1)
        with pytest.raises(ValueError):
            StabilityConfig(subsample_k=0)

    def test_describe_names(self):
        assert StabilityConfig(alpha=0.0).describe() == "no_noise"
        assert (
            _small_config(alpha=0.5).describe() == "relative_entropy_distortion_a0.5"
        )
