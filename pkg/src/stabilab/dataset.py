"""Manifest-driven image datasets, image codecs, and record persistence.

The canonical image form everywhere in this library is a float64 numpy
array of shape (H, W, 3) with values in [0, 1].  Decoding maps 8-bit
channel value v to v / 255; quantization back to 8 bits rounds half away
from zero.  Arrays are treated as immutable: no function mutates its
input in place.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .metrics import PredictionRecord

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
RECORDS_VERSION = 1
RECORDS_SCHEMA = "stabilab.records"
VALID_SPLITS = ("train", "eval")


class ManifestError(ValueError):
    """Manifest file is missing, malformed, or inconsistent."""


class DecodeError(ValueError):
    """Byte stream is not a decodable 8-bit RGB JPEG/PNG image."""


class SchemaVersionError(ValueError):
    """Persisted file carries an unsupported schema version."""


# ---------------------------------------------------------------------------
# canonical tensor form


def check_image(img: np.ndarray, min_side: int = 1) -> np.ndarray:
    """Validate an (H, W, 3) float image in [0, 1] and return it."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {arr.shape}")
    if arr.shape[0] < min_side or arr.shape[1] < min_side:
        raise ValueError(
            f"image {arr.shape[0]}x{arr.shape[1]} smaller than minimum side {min_side}"
        )
    if not np.isfinite(arr).all():
        raise ValueError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values outside [0, 1]")
    return arr


def quantize_u8(img: np.ndarray) -> np.ndarray:
    """[0, 1] float -> uint8, rounding half away from zero."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def dequantize_u8(arr: np.ndarray) -> np.ndarray:
    """uint8 -> canonical float tensor (v / 255)."""
    return np.asarray(arr, dtype=np.float64) / 255.0


@dataclass(frozen=True)
class LabeledImage:
    """One dataset item: canonical tensor plus its accepted class indices.

    ``accepted_labels`` preserves manifest order; the first entry is the
    primary label used as the one-hot training target and for per-class
    attribution.  Membership of any entry counts as a correct prediction.
    """

    image_id: str
    tensor: np.ndarray
    accepted_labels: tuple[int, ...]

    def __post_init__(self):
        if not self.accepted_labels:
            raise ValueError(f"image {self.image_id!r} has no accepted labels")

    @property
    def primary_label(self) -> int:
        return self.accepted_labels[0]


# ---------------------------------------------------------------------------
# codecs


def decode_image(data: bytes, format_hint: str = "auto") -> np.ndarray:
    """Decode a JPEG or PNG byte stream to the canonical tensor.

    Only 8-bit RGB streams are accepted; anything else (palette,
    grayscale, 16-bit, alpha) raises DecodeError rather than being
    silently converted.
    """
    if format_hint not in ("jpeg", "png", "auto"):
        raise ValueError(f"unknown format hint {format_hint!r}")
    try:
        im = Image.open(io.BytesIO(data))
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(f"undecodable image stream: {exc}") from exc
    fmt = (im.format or "").lower()
    if fmt not in ("jpeg", "png"):
        raise DecodeError(f"unsupported container format {im.format!r}")
    if format_hint != "auto" and fmt != format_hint:
        raise DecodeError(f"stream is {fmt}, but format hint was {format_hint}")
    if fmt == "png" and len(data) > 24 and data[24] != 8:
        raise DecodeError(f"unsupported color model: {data[24]}-bit PNG channels")
    if im.mode != "RGB":
        raise DecodeError(f"unsupported color model {im.mode!r}; expected 8-bit RGB")
    try:
        arr = np.asarray(im, dtype=np.uint8)
    except OSError as exc:  # truncated stream surfaces at pixel access
        raise DecodeError(f"corrupt image stream: {exc}") from exc
    return dequantize_u8(arr)


def encode_image(img: np.ndarray, fmt: str, quality: int | None = None) -> bytes:
    """Encode the canonical tensor as baseline JPEG or PNG bytes.

    JPEG uses libjpeg quality semantics with 4:2:0 chroma subsampling for
    quality < 90 and 4:4:4 otherwise; this policy is fixed so byte output
    is reproducible.
    """
    check_image(img)
    pil = Image.fromarray(quantize_u8(img), mode="RGB")
    buf = io.BytesIO()
    if fmt == "jpeg":
        if quality is None or not 1 <= int(quality) <= 100:
            raise ValueError(f"jpeg quality must be in 1..100, got {quality!r}")
        subsampling = 2 if quality < 90 else 0  # 2 -> 4:2:0, 0 -> 4:4:4
        pil.save(buf, format="JPEG", quality=int(quality), subsampling=subsampling)
    elif fmt == "png":
        if quality is not None:
            raise ValueError("png encoding takes no quality parameter")
        pil.save(buf, format="PNG")
    else:
        raise ValueError(f"unknown image format {fmt!r}")
    data = buf.getvalue()
    logger.debug("encoded %s image, %d bytes", fmt, len(data))
    return data


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    labels: tuple[str, ...]

    @property
    def image_id(self) -> str:
        """Stable id derived from the path (posix separators, as written)."""
        return Path(self.path).as_posix()


@dataclass(frozen=True)
class DatasetManifest:
    class_vocabulary: tuple[str, ...]
    entries: tuple[ManifestEntry, ...]
    split: str

    def label_index(self, name: str) -> int:
        return self.class_vocabulary.index(name)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and validate a JSON-lines manifest.

    Line 1 is a header ``{"classes": [...], "split": ..., "version": 1}``;
    each following line is ``{"path": ..., "labels": [...]}``.  Entry order
    is preserved.  Violations report the offending line number.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].strip():
        raise ManifestError(f"{path}: empty manifest, header line missing")

    def parse(line_no: int, text: str) -> dict:
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: line {line_no}: malformed JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise ManifestError(f"{path}: line {line_no}: expected a JSON object")
        return obj

    header = parse(1, lines[0])
    version = header.get("version")
    if version != MANIFEST_VERSION:
        raise ManifestError(
            f"{path}: line 1: manifest version {version!r} found, expected {MANIFEST_VERSION}"
        )
    classes = header.get("classes")
    split = header.get("split")
    if not isinstance(classes, list) or not classes or not all(isinstance(c, str) for c in classes):
        raise ManifestError(f"{path}: line 1: header 'classes' must be a non-empty list of names")
    if len(set(classes)) != len(classes):
        raise ManifestError(f"{path}: line 1: duplicate class names in vocabulary")
    if split not in VALID_SPLITS:
        raise ManifestError(f"{path}: line 1: split must be one of {VALID_SPLITS}, got {split!r}")

    entries: list[ManifestEntry] = []
    seen_ids: set[str] = set()
    vocab = set(classes)
    for line_no, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        obj = parse(line_no, raw)
        entry_path = obj.get("path")
        labels = obj.get("labels")
        if not isinstance(entry_path, str) or not entry_path:
            raise ManifestError(f"{path}: line {line_no}: missing or empty 'path'")
        if not isinstance(labels, list) or not labels:
            raise ManifestError(f"{path}: line {line_no}: 'labels' must be a non-empty list")
        for name in labels:
            if name not in vocab:
                raise ManifestError(
                    f"{path}: line {line_no}: unknown label {name!r} for entry {entry_path!r}"
                )
        entry = ManifestEntry(path=entry_path, labels=tuple(labels))
        if entry.image_id in seen_ids:
            raise ManifestError(f"{path}: line {line_no}: duplicate image id {entry.image_id!r}")
        seen_ids.add(entry.image_id)
        entries.append(entry)

    if not entries:
        logger.warning("manifest %s declares no entries", path)
    return DatasetManifest(class_vocabulary=tuple(classes), entries=tuple(entries), split=split)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write a manifest in the JSON-lines format ``load_manifest`` reads."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        header = {
            "classes": list(manifest.class_vocabulary),
            "split": manifest.split,
            "version": MANIFEST_VERSION,
        }
        fh.write(json.dumps(header) + "\n")
        for entry in manifest.entries:
            fh.write(json.dumps({"path": entry.path, "labels": list(entry.labels)}) + "\n")


def load_images(manifest: DatasetManifest, root: str | Path) -> list[LabeledImage]:
    """Decode every manifest entry (paths resolved against ``root``)."""
    root = Path(root)
    images = []
    for entry in manifest.entries:
        data = (root / entry.path).read_bytes()
        tensor = decode_image(data)
        labels = tuple(manifest.label_index(name) for name in entry.labels)
        images.append(LabeledImage(entry.image_id, tensor, labels))
    return images


# ---------------------------------------------------------------------------
# prediction record persistence


def round_sig(x: float, digits: int = 9) -> float:
    """Round to ``digits`` significant digits (records store confidences so)."""
    return float(f"{float(x):.{digits}g}")


def save_records(records: list[PredictionRecord], path: str | Path) -> int:
    """Write records as JSON lines under a schema-version header.

    Confidences are written at 9 significant digits; ``load_records``
    returns exactly the stored values.
    """
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema": RECORDS_SCHEMA, "version": RECORDS_VERSION}) + "\n")
        for rec in records:
            obj = {
                "image_id": rec.image_id,
                "environment_id": rec.environment_id,
                "ranked": [[int(c), round_sig(p)] for c, p in rec.ranked],
                "accepted_labels": [int(c) for c in rec.accepted_labels],
            }
            fh.write(json.dumps(obj) + "\n")
    return len(records)


def load_records(path: str | Path) -> list[PredictionRecord]:
    """Read a record file written by ``save_records``."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise SchemaVersionError(f"{path}: empty file, header missing")
    header = json.loads(lines[0])
    version = header.get("version")
    if header.get("schema") != RECORDS_SCHEMA or version != RECORDS_VERSION:
        raise SchemaVersionError(
            f"{path}: schema version {version!r} found, expected {RECORDS_VERSION}"
        )
    records = []
    for raw in lines[1:]:
        if not raw.strip():
            continue
        obj = json.loads(raw)
        records.append(
            PredictionRecord(
                image_id=obj["image_id"],
                environment_id=obj["environment_id"],
                ranked=tuple((int(c), float(p)) for c, p in obj["ranked"]),
                accepted_labels=tuple(int(c) for c in obj["accepted_labels"]),
            )
        )
    return records
