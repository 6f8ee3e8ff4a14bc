"""Embedding datasets: file I/O, blank-modality resolution, class-balanced
fractional sampling and the synthetic stand-in generator.

On disk a dataset is a manifest (JSON object) plus a records file with one
JSON object per line::

    {"id": "m-0001", "split": "train", "label": 2,
     "image_embedding": [0.12, ...] | null, "text_embedding": [...] | null}

Floats are written with Python's shortest round-trip repr, so a
load/save/load cycle reproduces every float64 bit-for-bit.
"""

import json
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from .core import DeterministicRng
from .errors import ConfigError, DatasetError
from .model import ModalityInput

SPLITS = ("train", "val", "test")
CLASS_NAMES = ("Negative", "Neutral", "Positive")
RQ2_FRACTIONS = (0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)


@dataclass
class EmbeddingRecord:
    id: str
    split: str
    label: int
    image_embedding: np.ndarray = None
    text_embedding: np.ndarray = None

    @property
    def kind(self):
        if self.image_embedding is not None and self.text_embedding is not None:
            return "meme"
        return "image" if self.image_embedding is not None else "text"


@dataclass
class DatasetManifest:
    name: str
    dimension: int
    blank_image_embedding: np.ndarray
    blank_text_embedding: np.ndarray
    class_names: tuple = CLASS_NAMES
    record_counts: dict = field(default_factory=dict)
    data_file: str = ""

    def to_dict(self):
        return {
            "name": self.name,
            "dimension": int(self.dimension),
            "blank_image_embedding": [float(v) for v in self.blank_image_embedding],
            "blank_text_embedding": [float(v) for v in self.blank_text_embedding],
            "class_names": list(self.class_names),
            "record_counts": {k: int(v) for k, v in sorted(self.record_counts.items())},
            "data_file": self.data_file,
        }


@dataclass(frozen=True)
class ClassCounts:
    negative: int = 0
    neutral: int = 0
    positive: int = 0

    def as_array(self):
        return np.array([self.negative, self.neutral, self.positive], dtype=np.int64)

    @property
    def total(self):
        return self.negative + self.neutral + self.positive


def class_counts(records):
    tally = [0, 0, 0]
    for r in records:
        tally[r.label] += 1
    return ClassCounts(*tally)


# -- file I/O ------------------------------------------------------------------

def _vector_or_none(raw, dim, rec_id, where, lineno):
    if raw is None:
        return None
    try:
        vec = np.asarray(raw, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"{where}:{lineno}: record {rec_id!r}: bad embedding ({exc})") from None
    if vec.ndim != 1 or vec.size != dim:
        raise DatasetError(
            f"{where}:{lineno}: record {rec_id!r}: embedding has {vec.size} values, expected {dim}"
        )
    if not np.all(np.isfinite(vec)):
        raise DatasetError(f"{where}:{lineno}: record {rec_id!r}: non-finite embedding value")
    return vec


def _parse_record(line, dim, where, lineno):
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{where}:{lineno}: invalid JSON ({exc})") from None
    rec_id = obj.get("id")
    if not isinstance(rec_id, str):
        raise DatasetError(f"{where}:{lineno}: record without a string id")
    split = obj.get("split")
    if split not in SPLITS:
        raise DatasetError(f"{where}:{lineno}: record {rec_id!r}: unknown split {split!r}")
    label = obj.get("label")
    if not isinstance(label, int) or isinstance(label, bool) or label not in (0, 1, 2):
        raise DatasetError(f"{where}:{lineno}: record {rec_id!r}: unknown label {label!r}")
    image = _vector_or_none(obj.get("image_embedding"), dim, rec_id, where, lineno)
    text = _vector_or_none(obj.get("text_embedding"), dim, rec_id, where, lineno)
    if image is None and text is None:
        raise DatasetError(f"{where}:{lineno}: record {rec_id!r}: both modalities missing")
    return EmbeddingRecord(rec_id, split, label, image, text)


def load_dataset(manifest_path):
    """Read a manifest and its records file.

    Returns ``(manifest, {"train": [...], "val": [...], "test": [...]})`` with
    records in file order.
    """
    manifest_path = Path(manifest_path)
    try:
        raw = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"{manifest_path}: cannot read manifest ({exc})") from None
    try:
        dim = int(raw["dimension"])
        manifest = DatasetManifest(
            name=raw["name"],
            dimension=dim,
            blank_image_embedding=np.asarray(raw["blank_image_embedding"], dtype=np.float64),
            blank_text_embedding=np.asarray(raw["blank_text_embedding"], dtype=np.float64),
            class_names=tuple(raw.get("class_names", CLASS_NAMES)),
            record_counts=dict(raw.get("record_counts", {})),
            data_file=raw["data_file"],
        )
    except KeyError as exc:
        raise DatasetError(f"{manifest_path}: manifest missing field {exc}") from None
    for name in ("blank_image_embedding", "blank_text_embedding"):
        if getattr(manifest, name).shape != (dim,):
            raise DatasetError(f"{manifest_path}: {name} must have {dim} values")
    if len(manifest.class_names) != 3:
        raise DatasetError(f"{manifest_path}: expected 3 class names")

    data_path = manifest_path.parent / manifest.data_file
    splits = {s: [] for s in SPLITS}
    seen = set()
    try:
        fh = open(data_path)
    except OSError as exc:
        raise DatasetError(f"{data_path}: cannot open records ({exc})") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = _parse_record(line, dim, data_path.name, lineno)
            if rec.id in seen:
                raise DatasetError(f"{data_path.name}:{lineno}: duplicate record id {rec.id!r}")
            seen.add(rec.id)
            splits[rec.split].append(rec)

    for split, expected in manifest.record_counts.items():
        got = len(splits.get(split, []))
        if got != int(expected):
            raise DatasetError(
                f"{manifest_path}: manifest says {expected} {split} records, file has {got}"
            )
    return manifest, splits


def _vec_json(v):
    return None if v is None else [float(x) for x in v]


def save_dataset(directory, manifest, splits):
    """Write ``<name>.manifest.json`` and ``<name>.jsonl`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest.data_file = f"{manifest.name}.jsonl"
    manifest.record_counts = {s: len(splits.get(s, [])) for s in SPLITS}
    lines = []
    for split in SPLITS:
        for r in splits.get(split, []):
            lines.append(json.dumps({
                "id": r.id,
                "split": r.split,
                "label": int(r.label),
                "image_embedding": _vec_json(r.image_embedding),
                "text_embedding": _vec_json(r.text_embedding),
            }))
    (directory / manifest.data_file).write_text("".join(line + "\n" for line in lines))
    manifest_path = directory / f"{manifest.name}.manifest.json"
    manifest_path.write_text(json.dumps(manifest.to_dict(), indent=1) + "\n")
    return manifest_path


# -- blank resolution ----------------------------------------------------------

def resolve_blank(record, manifest):
    """Fill a missing modality with the manifest's blank embedding."""
    if isinstance(record, ModalityInput):
        return record
    image = record.image_embedding
    text = record.text_embedding
    if image is None:
        image = manifest.blank_image_embedding
    if text is None:
        text = manifest.blank_text_embedding
    return ModalityInput(image, text)


def to_batch(records, manifest):
    """Stack resolved inputs and labels for a list of records."""
    if not records:
        D = manifest.dimension
        return ModalityInput(np.zeros((0, D)), np.zeros((0, D))), np.zeros(0, dtype=np.int64)
    image = np.empty((len(records), manifest.dimension))
    text = np.empty_like(image)
    for i, r in enumerate(records):
        image[i] = manifest.blank_image_embedding if r.image_embedding is None else r.image_embedding
        text[i] = manifest.blank_text_embedding if r.text_embedding is None else r.text_embedding
    labels = np.array([r.label for r in records], dtype=np.int64)
    return ModalityInput(image, text), labels


# -- fractional sampling -------------------------------------------------------

def subset_size(fraction, n):
    """``round(fraction * n)`` with halves rounded up, free of binary-float drift."""
    exact = Decimal(repr(float(fraction))) * n
    return int(exact.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def sampling_keys(records, rng):
    """Exponential keys ``log(u) / w`` with ``w = 1 / N_label``.

    Ordering by these keys is the same as ordering by ``u ** (1/w)``; the
    largest key is the first weighted draw without replacement.
    """
    counts = class_counts(records).as_array()
    labels = np.array([r.label for r in records], dtype=np.int64)
    weights = 1.0 / counts[labels]
    u = 1.0 - rng.random(len(records))  # (0, 1]
    return np.log(u) / weights


def fractional_sample(records, fraction, rng):
    """Class-balanced weighted sample without replacement.

    Returns ``round(fraction * len(records))`` distinct records in draw order.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    records = list(records)
    k = subset_size(fraction, len(records))
    if not records or k == 0:
        return []
    keys = sampling_keys(records, rng)
    order = np.argsort(-keys, kind="stable")[:k]
    return [records[i] for i in order]


# -- synthetic data ------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Desk-scale stand-in for the meme and unimodal datasets.

    ``meme_counts`` maps split -> per-class counts; ``image_only_counts`` and
    ``text_only_counts`` are per-class counts of the (train-only) unimodal
    intermediate datasets.
    """

    seed: int = 0
    dimension: int = 32
    meme_counts: dict = field(default_factory=lambda: {
        "train": [100, 100, 100], "val": [50, 50, 50], "test": [100, 100, 100],
    })
    image_only_counts: tuple = (400, 400, 400)
    text_only_counts: tuple = (400, 400, 400)
    image_signal: float = 1.0
    text_signal: float = 1.0
    noise_scale: float = 1.0
    domain_shift: float = 0.0
    name_prefix: str = ""

    def __post_init__(self):
        for name in ("image_signal", "text_signal", "noise_scale", "domain_shift"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        if self.dimension < 1:
            raise ConfigError(f"dimension must be >= 1, got {self.dimension}")
        for split, counts in self.meme_counts.items():
            if split not in SPLITS or len(counts) != 3 or min(counts) < 0:
                raise ConfigError(f"bad meme_counts entry {split}: {counts}")
        for name in ("image_only_counts", "text_only_counts"):
            counts = getattr(self, name)
            if len(counts) != 3 or min(counts) < 0:
                raise ConfigError(f"{name} must be 3 nonnegative counts, got {counts}")

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec fields: {sorted(unknown)}")
        return cls(**d)


def _labels_for(counts, rng):
    labels = np.repeat(np.arange(3), counts)
    return labels[rng.permutation(labels.size)]


def generate_synthetic(spec):
    """Build the ``memes``, ``images`` and ``texts`` datasets.

    Returns ``{name: (manifest, splits)}``. Class directions are unit vectors
    shared by both modalities; unimodal data is drawn around
    ``signal * (mu_c + domain_shift * delta)`` for a fixed unit ``delta``.
    """
    rng = DeterministicRng(spec.seed)
    D = spec.dimension
    geom = rng.spawn(0)
    mu = geom.normal(size=(3, D))
    mu /= np.linalg.norm(mu, axis=1, keepdims=True)
    delta = geom.normal(size=D)
    delta /= np.linalg.norm(delta)
    zeros = np.zeros(D)

    def noise(stream, n):
        return spec.noise_scale * stream.normal(size=(n, D))

    prefix = spec.name_prefix
    out = {}

    meme_splits = {s: [] for s in SPLITS}
    for k, split in enumerate(SPLITS):
        counts = spec.meme_counts.get(split, [0, 0, 0])
        stream = rng.spawn(10 + k)
        labels = _labels_for(counts, stream)
        img = spec.image_signal * mu[labels] + noise(stream, labels.size)
        txt = spec.text_signal * mu[labels] + noise(stream, labels.size)
        for i, y in enumerate(labels):
            meme_splits[split].append(
                EmbeddingRecord(f"meme-{split}-{i:05d}", split, int(y), img[i], txt[i])
            )
    out[prefix + "memes"] = (
        DatasetManifest(prefix + "memes", D, zeros.copy(), zeros.copy()), meme_splits
    )

    shifted = mu + spec.domain_shift * delta
    for k, (name, counts, signal) in enumerate((
        ("images", spec.image_only_counts, spec.image_signal),
        ("texts", spec.text_only_counts, spec.text_signal),
    )):
        stream = rng.spawn(20 + k)
        labels = _labels_for(counts, stream)
        emb = signal * shifted[labels] + noise(stream, labels.size)
        recs = []
        for i, y in enumerate(labels):
            if name == "images":
                recs.append(EmbeddingRecord(f"img-{i:05d}", "train", int(y), emb[i], None))
            else:
                recs.append(EmbeddingRecord(f"txt-{i:05d}", "train", int(y), None, emb[i]))
        out[prefix + name] = (
            DatasetManifest(prefix + name, D, zeros.copy(), zeros.copy()),
            {"train": recs, "val": [], "test": []},
        )
    return out


def write_synthetic(spec, out_dir):
    """Generate and save all three datasets; returns ``{name: manifest_path}``."""
    paths = {}
    for name, (manifest, splits) in generate_synthetic(spec).items():
        paths[name] = save_dataset(out_dir, manifest, splits)
    return paths
