"""Instability, accuracy, and precision-recall metrics over prediction records.

An image counts as *unstable* at top-k when, among its records from
different environments, at least one is correct and at least one is
incorrect.  Images whose records are all correct or all incorrect are
stable; in particular an image that every environment gets wrong does not
count toward instability (there is no meaningful divergence to compare).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CONFIDENCE_BINS = 20
BUCKET_NAMES = ("stable_correct", "stable_incorrect", "unstable_correct", "unstable_incorrect")


@dataclass(frozen=True)
class PredictionRecord:
    """One model prediction for one image under one environment."""

    image_id: str
    environment_id: str
    ranked: tuple[tuple[int, float], ...]  # (class index, confidence), descending
    accepted_labels: tuple[int, ...]

    def __post_init__(self):
        if not self.ranked:
            raise ValueError("ranked predictions must be non-empty")
        confs = [p for _, p in self.ranked]
        if any(p < 0.0 or p > 1.0 for p in confs):
            raise ValueError("confidences must lie in [0, 1]")
        if any(a < b for a, b in zip(confs, confs[1:])):
            raise ValueError("confidences must be non-increasing")
        if not self.accepted_labels:
            raise ValueError("accepted_labels must be non-empty")

    @property
    def top1(self) -> tuple[int, float]:
        return self.ranked[0]


@dataclass(frozen=True)
class Histogram:
    """Fixed-bin histogram over [0, 1]."""

    bin_edges: tuple[float, ...]
    counts: tuple[int, ...]


@dataclass(frozen=True)
class InstabilityReport:
    overall_instability: float
    per_class: dict[int, float]
    per_env_accuracy: dict[str, float]
    pairwise: dict[tuple[str, str], float]
    confidence_stats: dict[str, Histogram]
    k: int
    image_count: int
    environment_count: int
    # not spec'd fields, but cheap and useful for reporting
    per_class_counts: dict[int, int] = field(default_factory=dict)
    all_correct_fraction: float = 0.0
    all_incorrect_fraction: float = 0.0


def is_correct(record: PredictionRecord, k: int) -> bool:
    """True iff any of the first k ranked classes is an accepted label."""
    if not 1 <= k <= len(record.ranked):
        raise ValueError(f"k={k} out of range for {len(record.ranked)} ranked classes")
    accepted = set(record.accepted_labels)
    return any(cls in accepted for cls, _ in record.ranked[:k])


def _group_by_image(records: list[PredictionRecord]) -> dict[str, list[PredictionRecord]]:
    by_image: dict[str, list[PredictionRecord]] = {}
    seen: set[tuple[str, str]] = set()
    for rec in records:
        key = (rec.image_id, rec.environment_id)
        if key in seen:
            raise ValueError(f"duplicate record for image {key[0]!r} in environment {key[1]!r}")
        seen.add(key)
        by_image.setdefault(rec.image_id, []).append(rec)
    return by_image


def _image_flags(by_image: dict[str, list[PredictionRecord]], k: int) -> dict[str, list[bool]]:
    flags = {}
    for image_id, recs in by_image.items():
        if len(recs) < 2:
            raise ValueError(
                f"image {image_id!r} has records from {len(recs)} environment(s); need at least 2"
            )
        labels = {r.accepted_labels for r in recs}
        if len(labels) != 1:
            raise ValueError(f"image {image_id!r} has inconsistent accepted labels across records")
        flags[image_id] = [is_correct(r, k) for r in recs]
    return flags


def _histogram(samples: list[float]) -> Histogram:
    counts, edges = np.histogram(np.asarray(samples, dtype=np.float64), bins=CONFIDENCE_BINS, range=(0.0, 1.0))
    return Histogram(bin_edges=tuple(float(e) for e in edges), counts=tuple(int(c) for c in counts))


def compute_instability(records: list[PredictionRecord], k: int) -> InstabilityReport:
    """Aggregate instability/accuracy statistics at top-k.

    Every image must carry records from at least two environments and at
    most one record per (image, environment); violations are hard errors.
    The instability denominator is all covered images, including the
    all-correct and all-incorrect ones.
    """
    by_image = _group_by_image(records)
    if not by_image:
        raise ValueError("no records given")
    flags = _image_flags(by_image, k)

    unstable = {img: (any(f) and not all(f)) for img, f in flags.items()}
    n_images = len(flags)
    overall = sum(unstable.values()) / n_images
    all_correct = sum(1 for f in flags.values() if all(f)) / n_images
    all_incorrect = sum(1 for f in flags.values() if not any(f)) / n_images

    per_class: dict[int, float] = {}
    per_class_counts: dict[int, int] = {}
    for image_id, recs in by_image.items():
        cls = recs[0].accepted_labels[0]
        per_class_counts[cls] = per_class_counts.get(cls, 0) + 1
        per_class[cls] = per_class.get(cls, 0.0) + (1.0 if unstable[image_id] else 0.0)
    per_class = {c: per_class[c] / per_class_counts[c] for c in per_class}

    environments = sorted({r.environment_id for r in records})
    per_env_accuracy = {e: compute_accuracy(records, e, k) for e in environments}

    pairwise = {}
    for i, env_a in enumerate(environments):
        for env_b in environments[i + 1:]:
            pairwise[(env_a, env_b)] = pairwise_instability(records, env_a, env_b, k)

    samples = confidence_split(records, k)
    confidence_stats = {name: _histogram(samples[name]) for name in BUCKET_NAMES}

    return InstabilityReport(
        overall_instability=overall,
        per_class=dict(sorted(per_class.items())),
        per_env_accuracy=per_env_accuracy,
        pairwise=pairwise,
        confidence_stats=confidence_stats,
        k=k,
        image_count=n_images,
        environment_count=len(environments),
        per_class_counts=dict(sorted(per_class_counts.items())),
        all_correct_fraction=all_correct,
        all_incorrect_fraction=all_incorrect,
    )


def pairwise_instability(records: list[PredictionRecord], env_a: str, env_b: str, k: int) -> float:
    """Instability restricted to the record pairs of two environments."""
    environments = {r.environment_id for r in records}
    for env in (env_a, env_b):
        if env not in environments:
            raise ValueError(f"unknown environment id {env!r}")
    if env_a == env_b:
        return 0.0
    by_image = _group_by_image(records)
    n_pairs = 0
    n_divergent = 0
    for recs in by_image.values():
        rec_a = next((r for r in recs if r.environment_id == env_a), None)
        rec_b = next((r for r in recs if r.environment_id == env_b), None)
        if rec_a is None or rec_b is None:
            continue
        n_pairs += 1
        if is_correct(rec_a, k) != is_correct(rec_b, k):
            n_divergent += 1
    return n_divergent / n_pairs if n_pairs else 0.0


def compute_accuracy(records: list[PredictionRecord], environment_id: str, k: int) -> float:
    """Fraction of one environment's records that are correct at top-k."""
    recs = [r for r in records if r.environment_id == environment_id]
    if not recs:
        raise ValueError(f"unknown environment id {environment_id!r}")
    return sum(is_correct(r, k) for r in recs) / len(recs)


def confidence_split(records: list[PredictionRecord], k: int) -> dict[str, list[float]]:
    """Top-1 confidences bucketed by record correctness x image stability.

    Every record lands in exactly one of the four buckets, so bucket sizes
    sum to the record count.
    """
    by_image = _group_by_image(records)
    flags = _image_flags(by_image, k)
    buckets: dict[str, list[float]] = {name: [] for name in BUCKET_NAMES}
    for image_id, recs in by_image.items():
        f = flags[image_id]
        stability = "unstable" if (any(f) and not all(f)) else "stable"
        for rec in recs:
            verdict = "correct" if is_correct(rec, k) else "incorrect"
            buckets[f"{stability}_{verdict}"].append(rec.top1[1])
    return buckets


def precision_recall(
    records: list[PredictionRecord], environment_id: str, class_index: int
) -> list[tuple[float, float]]:
    """One-vs-rest precision-recall points for one class in one environment.

    A record predicts the class iff its top-1 class matches; the curve is
    swept over the achieved top-1 confidences, descending.  When nothing
    predicts the class the curve is the single conventional point (0, 1).
    Points are sorted by ascending recall.
    """
    recs = [r for r in records if r.environment_id == environment_id]
    if not recs:
        raise ValueError(f"unknown environment id {environment_id!r}")
    known = set()
    for r in recs:
        known.update(c for c, _ in r.ranked)
        known.update(r.accepted_labels)
    if class_index not in known:
        raise ValueError(f"unknown class index {class_index}")

    positives = sum(class_index in r.accepted_labels for r in recs)
    predicted = [(r.top1[1], class_index in r.accepted_labels) for r in recs if r.top1[0] == class_index]
    if not predicted:
        return [(0.0, 1.0)]

    points = [(0.0, 1.0)]
    predicted.sort(key=lambda t: -t[0])
    thresholds = sorted({score for score, _ in predicted}, reverse=True)
    for thr in thresholds:
        kept = [hit for score, hit in predicted if score >= thr]
        tp = sum(kept)
        precision = tp / len(kept)
        recall = tp / positives if positives else 0.0
        points.append((recall, precision))
    points.sort(key=lambda p: (p[0], -p[1]))
    return points


def micro_precision_recall(records: list[PredictionRecord], environment_id: str) -> list[tuple[float, float]]:
    """Micro-averaged curve: every record's top-1 pooled across classes."""
    recs = [r for r in records if r.environment_id == environment_id]
    if not recs:
        raise ValueError(f"unknown environment id {environment_id!r}")
    scored = sorted(((r.top1[1], is_correct(r, 1)) for r in recs), key=lambda t: -t[0])
    total = len(scored)
    points = [(0.0, 1.0)]
    thresholds = sorted({s for s, _ in scored}, reverse=True)
    for thr in thresholds:
        kept = [hit for score, hit in scored if score >= thr]
        tp = sum(kept)
        points.append((tp / total, tp / len(kept)))
    points.sort(key=lambda p: (p[0], -p[1]))
    return points


def average_precision(points: list[tuple[float, float]]) -> float:
    """Step integral of precision over recall for a sorted PR curve."""
    ap = 0.0
    prev_recall = 0.0
    for recall, precision in points:
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


# ---------------------------------------------------------------------------
# report rendering (CSV + SVG, byte-deterministic)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _svg_bar_chart(title: str, labels: list[str], values: list[float], vmax: float = 1.0) -> str:
    """Minimal deterministic SVG bar chart (fixed geometry and formatting)."""
    bar_w, gap, height, base = 46, 14, 180, 40
    width = max(len(labels), 1) * (bar_w + gap) + gap + 60
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height + 2 * base}" '
        f'viewBox="0 0 {width} {height + 2 * base}">',
        f'<text x="10" y="20" font-family="monospace" font-size="13">{title}</text>',
        f'<line x1="50" y1="{base + height}" x2="{width - 10}" y2="{base + height}" stroke="#333"/>',
    ]
    scale = height / vmax if vmax > 0 else 0.0
    for i, (label, value) in enumerate(zip(labels, values)):
        x = 56 + i * (bar_w + gap)
        h = value * scale
        y = base + height - h
        parts.append(
            f'<rect x="{x}" y="{y:.2f}" width="{bar_w}" height="{h:.2f}" fill="#4878a8"/>'
        )
        parts.append(
            f'<text x="{x + bar_w / 2:.1f}" y="{base + height + 16}" font-family="monospace" '
            f'font-size="10" text-anchor="middle">{label}</text>'
        )
        parts.append(
            f'<text x="{x + bar_w / 2:.1f}" y="{y - 4:.2f}" font-family="monospace" '
            f'font-size="10" text-anchor="middle">{value:.3f}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _svg_histograms(stats: dict[str, Histogram]) -> str:
    """Four confidence histograms stacked in one deterministic SVG."""
    panel_w, panel_h, pad = 440, 110, 34
    names = list(BUCKET_NAMES)
    height = len(names) * (panel_h + pad) + pad
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{panel_w + 40}" height="{height}" '
        f'viewBox="0 0 {panel_w + 40} {height}">'
    ]
    for row, name in enumerate(names):
        hist = stats[name]
        top = pad + row * (panel_h + pad)
        vmax = max(max(hist.counts), 1)
        parts.append(
            f'<text x="20" y="{top - 8}" font-family="monospace" font-size="12">'
            f'{name} (n={sum(hist.counts)})</text>'
        )
        parts.append(
            f'<line x1="20" y1="{top + panel_h}" x2="{panel_w + 20}" y2="{top + panel_h}" stroke="#333"/>'
        )
        n_bins = len(hist.counts)
        bin_w = panel_w / n_bins
        for i, count in enumerate(hist.counts):
            h = panel_h * count / vmax
            x = 20 + i * bin_w
            parts.append(
                f'<rect x="{x:.2f}" y="{top + panel_h - h:.2f}" width="{bin_w - 1:.2f}" '
                f'height="{h:.2f}" fill="#a85648"/>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_report(report: InstabilityReport, out_dir: str | Path) -> list[Path]:
    """Write CSV tables and SVG plots for a report; byte-deterministic."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def fmt(x: float) -> str:
        return f"{x:.6f}"

    overall = out / "overall.csv"
    _write_csv(
        overall,
        ["metric", "value"],
        [
            ["overall_instability", fmt(report.overall_instability)],
            ["all_correct_fraction", fmt(report.all_correct_fraction)],
            ["all_incorrect_fraction", fmt(report.all_incorrect_fraction)],
            ["image_count", str(report.image_count)],
            ["environment_count", str(report.environment_count)],
            ["k", str(report.k)],
        ],
    )
    written.append(overall)

    per_class = out / "per_class.csv"
    _write_csv(
        per_class,
        ["class", "instability", "image_count"],
        [
            [str(c), fmt(v), str(report.per_class_counts.get(c, 0))]
            for c, v in sorted(report.per_class.items())
        ],
    )
    written.append(per_class)

    per_env = out / "per_env_accuracy.csv"
    _write_csv(
        per_env,
        ["environment", "accuracy"],
        [[e, fmt(v)] for e, v in sorted(report.per_env_accuracy.items())],
    )
    written.append(per_env)

    pairwise = out / "pairwise.csv"
    _write_csv(
        pairwise,
        ["env_a", "env_b", "instability"],
        [[a, b, fmt(v)] for (a, b), v in sorted(report.pairwise.items())],
    )
    written.append(pairwise)

    conf = out / "confidence_stats.csv"
    rows = []
    for name in BUCKET_NAMES:
        hist = report.confidence_stats[name]
        for lo, hi, count in zip(hist.bin_edges, hist.bin_edges[1:], hist.counts):
            rows.append([name, fmt(lo), fmt(hi), str(count)])
    _write_csv(conf, ["bucket", "bin_lo", "bin_hi", "count"], rows)
    written.append(conf)

    class_labels = [str(c) for c in sorted(report.per_class)]
    class_values = [report.per_class[c] for c in sorted(report.per_class)]
    svg1 = out / "instability_per_class.svg"
    svg1.write_text(
        _svg_bar_chart(f"instability by class (top-{report.k})", class_labels, class_values),
        encoding="utf-8",
    )
    written.append(svg1)

    env_labels = sorted(report.per_env_accuracy)
    svg2 = out / "accuracy_per_env.svg"
    svg2.write_text(
        _svg_bar_chart(
            f"accuracy by environment (top-{report.k})",
            env_labels,
            [report.per_env_accuracy[e] for e in env_labels],
        ),
        encoding="utf-8",
    )
    written.append(svg2)

    svg3 = out / "confidence_histograms.svg"
    svg3.write_text(_svg_histograms(report.confidence_stats), encoding="utf-8")
    written.append(svg3)
    return written
