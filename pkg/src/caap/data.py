"""Datasets: synthetic bias testbed, file formats, preprocessing, splits, samplers."""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

log = logging.getLogger(__name__)

ZSCORE_EPS = 1e-8
_BIN_MAGIC = b"CAAPDATA"
_BIN_VERSION = 1


class IngestionError(ValueError):
    """Malformed dataset file; the message names the offending row."""


@dataclass
class DatasetSpec:
    name: str
    channels: int
    length: int
    sample_rate_hz: float
    num_classes: int
    source: dict = field(default_factory=dict)


@dataclass
class Dataset:
    spec: DatasetSpec
    x: np.ndarray  # (N, C, L) float64
    y: np.ndarray  # (N,) int64
    ids: np.ndarray  # (N,) int64

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        n, c, length = self.x.shape
        if (c, length) != (self.spec.channels, self.spec.length):
            raise ValueError(f"samples are {(c, length)}, spec says {(self.spec.channels, self.spec.length)}")
        if self.y.shape != (n,) or self.ids.shape != (n,):
            raise ValueError("labels/ids length mismatch")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.spec, self.x[idx], self.y[idx], self.ids[idx])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.spec.num_classes)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def zscore(record: np.ndarray) -> np.ndarray:
    """Per-channel z-score of a (C, L) record; constant channels become zeros."""
    mu = record.mean(axis=-1, keepdims=True)
    sd = record.std(axis=-1, keepdims=True)
    return (record - mu) / np.maximum(sd, ZSCORE_EPS)


def preprocess(record: np.ndarray, length: int) -> np.ndarray:
    """z-score the valid part, then zero-pad (or reject) to ``length``."""
    z = zscore(np.asarray(record, dtype=np.float64))
    if z.shape[-1] > length:
        raise ValueError(f"record length {z.shape[-1]} exceeds target {length}")
    out = np.zeros((z.shape[0], length))
    out[:, : z.shape[-1]] = z
    return out


# ---------------------------------------------------------------------------
# synthetic class-dependent-bias testbed
# ---------------------------------------------------------------------------


@dataclass
class SyntheticParams:
    counts: tuple[int, ...] = (300, 300, 300)
    channels: int = 2
    length: int = 256
    sample_rate_hz: float = 100.0
    noise: float = 0.1
    bump_ratio: float = 1.8
    bump_width_s: float = 0.03


def _synthetic_record(label: int, gen: np.random.Generator, p: SyntheticParams) -> np.ndarray:
    t = np.arange(p.length) / p.sample_rate_hz
    # class 1 carries the rhythm anomaly: a fundamental above the largest frequency shift
    f1 = gen.uniform(4.0, 5.0) if label == 1 else gen.uniform(1.0, 1.4)
    ph1, ph2 = gen.uniform(0, 2 * np.pi, size=2)
    base = np.sin(2 * np.pi * f1 * t + ph1) + 0.3 * np.sin(2 * np.pi * 2 * f1 * t + ph2)
    height = gen.uniform(0.8, 1.1) * (p.bump_ratio if label == 2 else 1.0)
    center = gen.uniform(0.25, p.length / p.sample_rate_hz - 0.25)
    bump = height * np.exp(-0.5 * ((t - center) / p.bump_width_s) ** 2)
    rec = np.empty((p.channels, p.length))
    for c in range(p.channels):
        gain = 1.0 if c == 0 else gen.uniform(0.5, 0.9)
        lag = 0.0 if c == 0 else gen.uniform(-0.3, 0.3)
        rec[c] = gain * np.roll(base, int(round(lag * p.sample_rate_hz))) + bump
    return rec + p.noise * gen.standard_normal(rec.shape)


def generate_synthetic(params: SyntheticParams | None = None, seed: int = 0) -> Dataset:
    """Three-class, multichannel testbed for class-dependent augmentation bias.

    Class 0 is a two-tone baseline with one localized bump; class 1 shifts the
    rhythm (faster fundamental); class 2 is class 0 with a bump ``bump_ratio``
    times taller, so amplitude-distorting transforms erase its cue.
    """
    p = params or SyntheticParams()
    gen = np.random.default_rng(seed)
    labels = np.concatenate([np.full(n, c) for c, n in enumerate(p.counts)])
    labels = labels[gen.permutation(len(labels))]
    x = np.stack([preprocess(_synthetic_record(int(c), gen, p), p.length) for c in labels])
    spec = DatasetSpec(
        "synthetic_bias", p.channels, p.length, p.sample_rate_hz, len(p.counts),
        {"generator": "synthetic_bias", "seed": seed, **{k: list(v) if isinstance(v, tuple) else v for k, v in asdict(p).items()}},
    )
    return Dataset(spec, x, labels, np.arange(len(labels)))


def oracle_features(x: np.ndarray, sample_rate_hz: float = 100.0, bump_width: float = 3.0) -> np.ndarray:
    """Shift-invariant summary: dominant frequency of channel 0 and the peak
    matched-filter (Ricker) response of the channel sum."""
    n = x.shape[-1]
    spec = np.abs(np.fft.rfft(x[:, 0], axis=-1))
    spec[:, 0] = 0.0
    dominant = spec.argmax(axis=1) * sample_rate_hz / n
    t = np.arange(-int(5 * bump_width), int(5 * bump_width) + 1)
    ricker = (1 - (t / bump_width) ** 2) * np.exp(-0.5 * (t / bump_width) ** 2)
    ricker = ricker - ricker.mean()
    ricker /= np.linalg.norm(ricker)
    summed = x.sum(axis=1)
    peak = np.array([np.convolve(r, ricker, mode="valid").max() for r in summed])
    return np.stack([dominant, peak], axis=1)


def nearest_centroid_accuracy(train: Dataset, test: Dataset) -> float:
    """Accuracy of a nearest-centroid classifier on standardized :func:`oracle_features`."""
    rate = train.spec.sample_rate_hz
    ftr, fte = oracle_features(train.x, rate), oracle_features(test.x, rate)
    mu, sd = ftr.mean(axis=0), ftr.std(axis=0) + 1e-12
    ftr, fte = (ftr - mu) / sd, (fte - mu) / sd
    cents = np.stack([ftr[train.y == c].mean(axis=0) for c in range(train.spec.num_classes)])
    d = ((fte[:, None, :] - cents[None]) ** 2).sum(axis=-1)
    return float(np.mean(d.argmin(axis=1) == test.y))


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def _meta_path(path: Path) -> Path:
    return path.with_suffix(".meta.json")


def write_meta(path: str | Path, spec: DatasetSpec) -> None:
    meta = {k: getattr(spec, k) for k in ("name", "channels", "length", "sample_rate_hz", "num_classes")}
    _meta_path(Path(path)).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_meta(path: str | Path) -> DatasetSpec:
    meta = json.loads(_meta_path(Path(path)).read_text())
    return DatasetSpec(meta.get("name", Path(path).stem), int(meta["channels"]), int(meta["length"]),
                       float(meta["sample_rate_hz"]), int(meta["num_classes"]))


def write_csv(path: str | Path, ds: Dataset) -> None:
    """Header ``id,label,c<ch>_t<t>...``; values written with repr precision."""
    path = Path(path)
    c, length = ds.spec.channels, ds.spec.length
    header = ["id", "label"] + [f"c{ch}_t{t}" for ch in range(c) for t in range(length)]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(ds)):
            w.writerow([int(ds.ids[i]), int(ds.y[i])] + [repr(float(v)) for v in ds.x[i].reshape(-1)])
    write_meta(path, ds.spec)


def ingest_csv(path: str | Path, spec: DatasetSpec | None = None, normalize: bool = True) -> Dataset:
    """Read a CSV dataset; trailing empty cells of a channel mark a shorter record."""
    path = Path(path)
    spec = spec or read_meta(path)
    c, length = spec.channels, spec.length
    xs, ys, ids = [], [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["id", "label"] or len(header) != 2 + c * length:
            raise IngestionError(f"{path}: header row 0 does not match {c} channels x {length} samples")
        for row_no, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise IngestionError(f"{path}: row {row_no} has {len(row)} fields, expected {len(header)}")
            try:
                sid, label = int(row[0]), int(row[1])
                cells = np.array(row[2:], dtype=object).reshape(c, length)
                valid = [sum(1 for v in ch if v != "") for ch in cells]
                n_valid = valid[0]
                if any(v != n_valid for v in valid) or any(v == "" for v in cells[:, :n_valid].reshape(-1)):
                    raise ValueError("ragged channels")
                rec = cells[:, :n_valid].astype(np.float64)
            except ValueError as exc:
                raise IngestionError(f"{path}: row {row_no}: {exc}") from None
            if not 0 <= label < spec.num_classes:
                raise IngestionError(f"{path}: row {row_no}: label {label} out of range")
            if not np.all(np.isfinite(rec)):
                raise IngestionError(f"{path}: row {row_no}: non-finite value")
            if normalize:
                rec = preprocess(rec, length)
            else:
                rec = np.pad(rec, ((0, 0), (0, length - n_valid)))
            xs.append(rec)
            ys.append(label)
            ids.append(sid)
    if not xs:
        raise IngestionError(f"{path}: no records")
    return Dataset(spec, np.stack(xs), np.array(ys), np.array(ids))


def write_binary(path: str | Path, ds: Dataset, lengths: np.ndarray | None = None) -> None:
    """magic, version, header (n, C, L, classes, rate), ids, labels, valid lengths, float32 LE payload."""
    n = len(ds)
    lengths = np.full(n, ds.spec.length) if lengths is None else np.asarray(lengths)
    buf = bytearray(_BIN_MAGIC)
    buf += struct.pack("<IIIIId", _BIN_VERSION, n, ds.spec.channels, ds.spec.length, ds.spec.num_classes, ds.spec.sample_rate_hz)
    buf += ds.ids.astype("<i8").tobytes()
    buf += ds.y.astype("<i4").tobytes()
    buf += lengths.astype("<i4").tobytes()
    buf += ds.x.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


def read_binary(path: str | Path, name: str | None = None) -> tuple[Dataset, np.ndarray]:
    """Raw read (no preprocessing); returns the dataset and per-record valid lengths."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != _BIN_MAGIC:
        raise IngestionError(f"{path}: bad magic bytes")
    head = struct.calcsize("<IIIIId")
    version, n, c, length, k, rate = struct.unpack_from("<IIIIId", raw, 8)
    if version != _BIN_VERSION:
        raise IngestionError(f"{path}: unsupported version {version}")
    pos = 8 + head
    expected = pos + n * (8 + 4 + 4) + n * c * length * 4
    if len(raw) != expected:
        raise IngestionError(f"{path}: size {len(raw)} does not match header (expected {expected})")
    ids = np.frombuffer(raw, "<i8", n, pos); pos += 8 * n
    labels = np.frombuffer(raw, "<i4", n, pos); pos += 4 * n
    lengths = np.frombuffer(raw, "<i4", n, pos); pos += 4 * n
    x = np.frombuffer(raw, "<f4", n * c * length, pos).reshape(n, c, length)
    bad = np.flatnonzero((labels < 0) | (labels >= k) | (lengths < 1) | (lengths > length))
    if bad.size:
        raise IngestionError(f"{path}: record {int(bad[0])} has invalid label or length")
    spec = DatasetSpec(name or path.stem, c, length, rate, k)
    return Dataset(spec, x.astype(np.float64), labels, ids), lengths.astype(np.int64)


def ingest_binary(path: str | Path, name: str | None = None) -> Dataset:
    ds, lengths = read_binary(path, name)
    x = np.stack([preprocess(ds.x[i, :, : lengths[i]], ds.spec.length) for i in range(len(ds))])
    return Dataset(ds.spec, x, ds.y, ds.ids)


def load_dataset(path: str | Path) -> Dataset:
    """Dispatch on suffix: ``.csv`` (z-scored on ingest) or the binary format."""
    path = Path(path)
    if path.suffix == ".csv":
        return ingest_csv(path)
    return ingest_binary(path)


# ---------------------------------------------------------------------------
# splits and samplers
# ---------------------------------------------------------------------------


def split_equal(labels: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified halves (index arrays); odd classes alternate which half gets the extra sample."""
    labels = np.asarray(labels)
    if len(labels) < 2:
        raise ValueError("need at least two samples to split")
    gen = np.random.default_rng([seed, 0x5E])
    a, b = [], []
    flip = False
    for c in np.unique(labels):
        idx = gen.permutation(np.flatnonzero(labels == c))
        half = len(idx) // 2 + (len(idx) % 2 if not flip else 0)
        if len(idx) % 2:
            flip = not flip
        a.append(idx[:half])
        b.append(idx[half:])
    return np.sort(np.concatenate(a)), np.sort(np.concatenate(b))


def kfold(labels: np.ndarray, k: int, seed: int) -> list[np.ndarray]:
    """Stratified partition into ``k`` folds of test indices."""
    labels = np.asarray(labels)
    if k < 2 or len(labels) < k:
        raise ValueError(f"cannot build {k} folds from {len(labels)} samples")
    gen = np.random.default_rng([seed, 0xF0])
    folds: list[list[int]] = [[] for _ in range(k)]
    offset = 0
    for c in np.unique(labels):
        idx = gen.permutation(np.flatnonzero(labels == c))
        if len(idx) < k:
            log.warning("class %s has %d samples for %d folds; assigned best-effort", c, len(idx), k)
        for j, i in enumerate(idx):
            folds[(offset + j) % k].append(int(i))
        offset += len(idx)
    return [np.sort(np.array(f, dtype=np.int64)) for f in folds]


def balance_sampler(labels: np.ndarray, batch_size: int, gen: np.random.Generator, num_batches: int | None = None) -> Iterator[np.ndarray]:
    """Batches whose classes are drawn uniformly, then a uniform member of each class."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    members = {c: np.flatnonzero(labels == c) for c in classes}
    if num_batches is None:
        num_batches = -(-len(labels) // batch_size)
    for _ in range(num_batches):
        picked = classes[gen.integers(len(classes), size=batch_size)]
        yield np.array([members[c][gen.integers(len(members[c]))] for c in picked], dtype=np.int64)


def shuffled_batches(n: int, batch_size: int, gen: np.random.Generator) -> Iterator[np.ndarray]:
    order = gen.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def epoch_batches(labels: np.ndarray, batch_size: int, gen: np.random.Generator, balanced: bool) -> Iterator[np.ndarray]:
    if balanced:
        return balance_sampler(labels, batch_size, gen)
    return shuffled_batches(len(labels), batch_size, gen)
