"""Stability training: augmented loss, counterpart generation, training loop.

Fine-tuning minimizes  mean[ CE(x) + alpha * stability(x, x') ]  where x'
is a counterpart of the training image produced by one of four schemes:
synthetic Gaussian noise, sampled photometric distortion, a registered
paired image, or a small per-class pool of counterpart images.  With
alpha = 0 the loop is a plain cross-entropy fine-tune.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import LabeledImage
from .envsim import DistortionRanges, apply_distortion, apply_gaussian_noise, sample_distort
from .model import (
    LOG_EPS,
    LossConfig,
    ModelParams,
    copy_params,
    cross_entropy,
    forward,
    gradient,
    sgd_step,
)
from .seeding import derive_rng

logger = logging.getLogger(__name__)

NOISE_KINDS = ("gaussian", "distortion", "paired_images", "subsample")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""


@dataclass(frozen=True)
class StabilityConfig:
    """Hyperparameters of one stability-training run."""

    loss_kind: str = "relative_entropy"
    alpha: float = 0.0
    noise_kind: str = "gaussian"
    sigma2: float = 0.04
    distortion_ranges: DistortionRanges = field(default_factory=DistortionRanges)
    subsample_k: int = 10
    epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 0.02
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        LossConfig(self.loss_kind, self.alpha)  # reuse its validation
        if self.noise_kind not in NOISE_KINDS:
            raise ValueError(f"noise_kind must be one of {NOISE_KINDS}, got {self.noise_kind!r}")
        if self.sigma2 < 0:
            raise ValueError(f"sigma2 must be >= 0, got {self.sigma2}")
        if self.subsample_k < 1:
            raise ValueError(f"subsample_k must be >= 1, got {self.subsample_k}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def describe(self) -> str:
        if self.alpha == 0.0:
            return "no_noise"
        return f"{self.loss_kind}_{self.noise_kind}_a{self.alpha:g}"


# ---------------------------------------------------------------------------
# counterpart sources


@dataclass(frozen=True)
class GeneratedSource:
    """Counterparts synthesized on the fly from the clean image."""

    noise_kind: str  # "gaussian" or "distortion"
    sigma2: float = 0.04
    ranges: DistortionRanges = field(default_factory=DistortionRanges)

    def __post_init__(self):
        if self.noise_kind not in ("gaussian", "distortion"):
            raise ValueError(f"generated noise kind must be gaussian/distortion, got {self.noise_kind!r}")


@dataclass(frozen=True)
class PairedSource:
    """Exactly one registered counterpart per training image id."""

    counterparts: dict[str, LabeledImage]


@dataclass(frozen=True)
class SubsamplePoolSource:
    """At most k counterpart images per class; sampled per presentation."""

    pools: dict[int, tuple[LabeledImage, ...]]

    def __post_init__(self):
        for cls, pool in self.pools.items():
            if not pool:
                raise ValueError(f"empty counterpart pool for class {cls}")


CounterpartSource = GeneratedSource | PairedSource | SubsamplePoolSource


def build_subsample_pools(
    images: list[LabeledImage], k: int, rng: np.random.Generator | None = None
) -> SubsamplePoolSource:
    """Group counterpart images by primary class, keeping at most k each.

    Without an rng the first k per class (dataset order) are kept, which
    mirrors collecting a small fixed calibration set.
    """
    by_class: dict[int, list[LabeledImage]] = {}
    for img in images:
        by_class.setdefault(img.primary_label, []).append(img)
    pools = {}
    for cls, members in by_class.items():
        if rng is not None and len(members) > k:
            picks = rng.choice(len(members), size=k, replace=False)
            members = [members[i] for i in sorted(picks)]
        pools[cls] = tuple(members[:k])
    return SubsamplePoolSource(pools=pools)


def source_for_config(
    config: StabilityConfig,
    paired: dict[str, LabeledImage] | None = None,
    pool_images: list[LabeledImage] | None = None,
) -> CounterpartSource:
    """Construct the counterpart source matching ``config.noise_kind``."""
    if config.noise_kind == "gaussian":
        return GeneratedSource("gaussian", sigma2=config.sigma2)
    if config.noise_kind == "distortion":
        return GeneratedSource("distortion", ranges=config.distortion_ranges)
    if config.noise_kind == "paired_images":
        if paired is None:
            raise ValueError("paired_images noise requires a counterpart map")
        return PairedSource(counterparts=paired)
    if pool_images is None:
        raise ValueError("subsample noise requires pool images")
    return build_subsample_pools(pool_images, config.subsample_k)


def make_counterpart(
    image: LabeledImage, source: CounterpartSource, rng: np.random.Generator
) -> np.ndarray:
    """Produce the noisy/paired counterpart tensor for one presentation."""
    if isinstance(source, GeneratedSource):
        if source.noise_kind == "gaussian":
            return apply_gaussian_noise(image.tensor, source.sigma2, rng)
        return apply_distortion(image.tensor, sample_distort(source.ranges, rng))
    if isinstance(source, PairedSource):
        counterpart = source.counterparts.get(image.image_id)
        if counterpart is None:
            raise KeyError(f"no paired counterpart registered for image {image.image_id!r}")
        return counterpart.tensor
    if isinstance(source, SubsamplePoolSource):
        pool = source.pools.get(image.primary_label)
        if not pool:
            raise KeyError(f"no counterpart pool for class {image.primary_label}")
        return pool[int(rng.integers(len(pool)))].tensor
    raise TypeError(f"unknown counterpart source {source!r}")


# ---------------------------------------------------------------------------
# losses (scalar forms; the gradient path lives in model.gradient)


def kl_stability_loss(p: np.ndarray, p_prime: np.ndarray) -> float:
    """KL(p || p') in nats, with both arguments floored at 1e-12 inside logs."""
    p = np.asarray(p, dtype=np.float64)
    p_prime = np.asarray(p_prime, dtype=np.float64)
    if p.shape != p_prime.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {p_prime.shape}")
    return float((p * (np.log(np.maximum(p, LOG_EPS)) - np.log(np.maximum(p_prime, LOG_EPS)))).sum())


def embedding_stability_loss(f: np.ndarray, f_prime: np.ndarray) -> float:
    """Euclidean distance between the two embedding vectors."""
    f = np.asarray(f, dtype=np.float64)
    f_prime = np.asarray(f_prime, dtype=np.float64)
    if f.shape != f_prime.shape:
        raise ValueError(f"length mismatch: {f.shape} vs {f_prime.shape}")
    return float(np.linalg.norm(f - f_prime))


def combined_loss(
    x: np.ndarray,
    x_prime: np.ndarray | None,
    target: int,
    params: ModelParams,
    loss_config: LossConfig,
) -> float:
    """CE on the clean image plus alpha times the stability term."""
    clean = forward(params, x)
    base = cross_entropy(clean.probabilities, target)
    if loss_config.alpha == 0.0:
        return base
    if x_prime is None:
        raise ValueError(f"loss kind {loss_config.loss_kind!r} requires a paired image")
    noisy = forward(params, x_prime)
    if loss_config.loss_kind == "relative_entropy":
        stab = kl_stability_loss(clean.probabilities, noisy.probabilities)
    else:
        stab = embedding_stability_loss(clean.embedding, noisy.embedding)
    return base + loss_config.alpha * stab


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_loss_base: float
    mean_loss_stability: float
    mean_loss: float


def write_loss_trace(trace: list[EpochStats], path: str | Path) -> None:
    """CSV trace with columns epoch, mean_L0, mean_Ls, mean_L."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "mean_L0", "mean_Ls", "mean_L"])
        for row in trace:
            writer.writerow(
                [row.epoch, f"{row.mean_loss_base:.9g}", f"{row.mean_loss_stability:.9g}", f"{row.mean_loss:.9g}"]
            )


def stability_train(
    train_set: list[LabeledImage],
    eval_set: list[LabeledImage] | None,
    source: CounterpartSource | None,
    config: StabilityConfig,
    base_params: ModelParams,
) -> tuple[ModelParams, list[EpochStats]]:
    """Fine-tune from ``base_params``; fully determined by ``config.seed``.

    Shuffling, counterpart sampling, and parameter updates all derive from
    the seed.  With alpha = 0 no counterparts are drawn, so the trajectory
    matches a plain cross-entropy fine-tune exactly.  Training images must
    already be at the model input size.
    """
    if not train_set:
        raise ValueError("train set must be non-empty")
    if config.alpha > 0.0 and source is None:
        raise ValueError("stability training with alpha > 0 needs a counterpart source")
    loss_config = LossConfig(config.loss_kind, config.alpha)
    params = copy_params(base_params)
    velocity = None
    rng = derive_rng(config.seed, "stability_train")
    trace: list[EpochStats] = []

    for epoch in range(config.epochs):
        order = rng.permutation(len(train_set))
        sum_base = sum_stab = sum_total = 0.0
        seen = 0
        for batch_no, start in enumerate(range(0, len(order), config.batch_size)):
            chunk = order[start:start + config.batch_size]
            batch = []
            for i in chunk:
                image = train_set[int(i)]
                paired = None
                if config.alpha > 0.0:
                    paired = make_counterpart(image, source, rng)
                batch.append((image.tensor, paired, image.primary_label))
            result = gradient(params, batch, loss_config)
            if not np.isfinite(result.loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {batch_no}"
                )
            params, velocity = sgd_step(
                params, result.grads, config.learning_rate, config.momentum, velocity
            )
            if not all(np.isfinite(arr).all() for _, arr in params.arrays()):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {batch_no}: parameters overflowed"
                )
            sum_base += result.loss_base * len(chunk)
            sum_stab += result.loss_stability * len(chunk)
            sum_total += result.loss * len(chunk)
            seen += len(chunk)
        trace.append(
            EpochStats(
                epoch=epoch,
                mean_loss_base=sum_base / seen,
                mean_loss_stability=sum_stab / seen,
                mean_loss=sum_total / seen,
            )
        )
        logger.info(
            "epoch %d: mean_L0=%.4f mean_Ls=%.4f mean_L=%.4f",
            epoch, trace[-1].mean_loss_base, trace[-1].mean_loss_stability, trace[-1].mean_loss,
        )

    if eval_set:
        correct = sum(
            int(np.argmax(forward(params, img.tensor).probabilities)) in img.accepted_labels
            for img in eval_set
        )
        logger.info("final clean eval accuracy: %.4f", correct / len(eval_set))
    return params, trace


# ---------------------------------------------------------------------------
# grid search


@dataclass(frozen=True)
class GridResult:
    config: StabilityConfig
    instability: float
    accuracy: float


def grid_search(configs: list[StabilityConfig], evaluate) -> list[GridResult]:
    """Evaluate each config and rank ascending by instability.

    ``evaluate(config) -> (instability, accuracy)`` must be deterministic
    for the ranking to be reproducible.  Ties in instability rank by
    accuracy, descending.
    """
    if not configs:
        raise ValueError("grid_search needs at least one config")
    results = []
    for config in configs:
        instability, accuracy = evaluate(config)
        results.append(GridResult(config=config, instability=instability, accuracy=accuracy))
    results.sort(key=lambda r: (r.instability, -r.accuracy))
    return results
