"""Time-series ingestion, STFT features, sequence windowing and splits.

Also provides a synthetic regime-switching generator and the binary batch
file format used between pipeline stages.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, DomainError, FormatError, ParseError, SchemaError

BATCH_MAGIC = b"EMSB"
BATCH_VERSION = 1


@dataclass
class RawSeries:
    channels: dict[str, np.ndarray]
    sample_rate: float
    labels: np.ndarray | None = None

    def __post_init__(self):
        lengths = {len(v) for v in self.channels.values()}
        if len(lengths) > 1:
            raise DataError(f"channels have unequal lengths {sorted(lengths)}")
        if self.labels is not None and len(self.labels) != len(self):
            raise DataError(f"{len(self.labels)} labels for {len(self)} samples")

    def __len__(self) -> int:
        return len(next(iter(self.channels.values()))) if self.channels else 0

    def matrix(self) -> np.ndarray:
        """Samples as an L x C array, columns in channel order."""
        return np.column_stack([self.channels[c] for c in self.channels])


@dataclass
class SequenceBatch:
    data: np.ndarray
    labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise DataError(f"sequence data must be B x T x D, got shape {self.data.shape}")
        if self.data.shape[0] and self.data.shape[1] < 2:
            raise DataError("sequences need at least two steps")
        if not np.isfinite(self.data).all():
            raise DataError("sequence data contains non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != self.data.shape[:2]:
                raise DataError(f"labels {self.labels.shape} do not match data {self.data.shape[:2]}")

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def take(self, idx) -> "SequenceBatch":
        idx = np.asarray(idx, dtype=np.int64)
        sources = self.meta.get("sources")
        meta = dict(self.meta)
        if sources is not None:
            meta["sources"] = [sources[i] for i in idx]
        labels = None if self.labels is None else self.labels[idx]
        return SequenceBatch(self.data[idx], labels, meta)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    balanced_subset: dict[int, int] | None = None

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise DomainError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")


# ---------------------------------------------------------------- CSV


def load_csv(
    path: str | Path,
    channels: list[str] | None = None,
    label_column: str | None = "label",
    sample_rate: float = 1.0,
) -> RawSeries:
    """Read a headed CSV into a :class:`RawSeries`.

    ``channels=None`` takes every column except the label column. Labels are
    read only when the header contains ``label_column``.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        has_label = label_column is not None and label_column in header
        if channels is None:
            channels = [h for h in header if not (has_label and h == label_column)]
        for c in channels:
            if c not in header:
                raise SchemaError(f"{path}: missing column {c!r}")
        cols = [header.index(c) for c in channels]
        lab_col = header.index(label_column) if has_label else None
        values: list[list[float]] = []
        labels: list[int] = []
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            try:
                values.append([float(row[i]) for i in cols])
                if lab_col is not None:
                    lab = float(row[lab_col])
                    if lab != int(lab):
                        raise ValueError(row[lab_col])
                    labels.append(int(lab))
            except (ValueError, IndexError) as exc:
                raise ParseError(f"{path}: row {row_no}: cannot parse {exc}") from None
    if not values:
        raise DataError(f"{path}: no samples (header only)")
    arr = np.array(values, dtype=np.float64)
    return RawSeries(
        {c: arr[:, j].copy() for j, c in enumerate(channels)},
        float(sample_rate),
        np.array(labels, dtype=np.int64) if lab_col is not None else None,
    )


def save_csv(series: RawSeries, path: str | Path, label_column: str = "label") -> None:
    names = list(series.channels)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names + ([label_column] if series.labels is not None else []))
        mat = series.matrix()
        for i in range(len(series)):
            row = [repr(float(v)) for v in mat[i]]
            if series.labels is not None:
                row.append(str(int(series.labels[i])))
            w.writerow(row)


# ---------------------------------------------------------------- STFT


def window_function(kind: str, n: int) -> np.ndarray:
    if kind == "rect":
        return np.ones(n)
    if kind == "hann":
        # periodic Hann, the usual choice for spectral analysis
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    raise DomainError(f"unknown window function {kind!r}")


def frame_count(length: int, window: int, hop: int) -> int:
    return (length - window) // hop + 1


def stft(
    series: RawSeries | np.ndarray,
    window: int,
    hop: int,
    window_fn: str = "hann",
    log_scale: bool = False,
) -> np.ndarray:
    """One-sided STFT magnitudes, channels concatenated: F x (C * (window//2 + 1))."""
    x = series.matrix() if isinstance(series, RawSeries) else np.asarray(series, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    L = x.shape[0]
    if not 0 < hop <= window:
        raise DomainError(f"hop must satisfy 0 < hop <= window, got hop={hop}, window={window}")
    if window > L:
        raise DomainError(f"window {window} longer than series of length {L}")
    F = frame_count(L, window, hop)
    starts = np.arange(F) * hop
    frames = x[starts[:, None] + np.arange(window)[None, :]]  # F x window x C
    frames = frames * window_function(window_fn, window)[None, :, None]
    mag = np.abs(np.fft.rfft(frames, axis=1))  # F x bins x C
    feats = mag.transpose(0, 2, 1).reshape(F, -1)
    return np.log1p(feats) if log_scale else feats


def frame_labels(labels: np.ndarray, length: int, window: int, hop: int) -> np.ndarray:
    """Majority label of the samples under each frame (ties go to the smaller id)."""
    labels = np.asarray(labels, dtype=np.int64)
    F = frame_count(length, window, hop)
    out = np.empty(F, dtype=np.int64)
    offset = labels.min()
    for f in range(F):
        seg = labels[f * hop: f * hop + window] - offset
        out[f] = np.bincount(seg).argmax() + offset
    return out


def window_sequences(
    frames: np.ndarray,
    seq_len: int,
    labels: np.ndarray | None = None,
    source: str = "",
) -> SequenceBatch:
    """Cut consecutive non-overlapping groups of ``seq_len`` frames; drop the tail."""
    frames = np.asarray(frames, dtype=np.float64)
    F = frames.shape[0]
    if seq_len < 2:
        raise DomainError(f"sequence length must be at least 2, got {seq_len}")
    if F < seq_len:
        raise DomainError(f"only {F} frames available for sequence length {seq_len}")
    n = F // seq_len
    data = frames[: n * seq_len].reshape(n, seq_len, frames.shape[1])
    lab = None if labels is None else np.asarray(labels)[: n * seq_len].reshape(n, seq_len)
    meta = {"sources": [source] * n, "dropped_frames": F - n * seq_len}
    return SequenceBatch(data, lab, meta)


def concat_batches(batches: list[SequenceBatch]) -> SequenceBatch:
    if not batches:
        raise DataError("nothing to concatenate")
    has_labels = {b.labels is not None for b in batches}
    if len(has_labels) > 1:
        raise DataError("cannot mix labelled and unlabelled batches")
    meta = dict(batches[0].meta)
    meta["sources"] = [s for b in batches for s in b.meta.get("sources", [""] * len(b))]
    labels = np.concatenate([b.labels for b in batches]) if True in has_labels else None
    return SequenceBatch(np.concatenate([b.data for b in batches]), labels, meta)


# ---------------------------------------------------------------- splits


def split(batch: SequenceBatch, spec: SplitSpec) -> tuple[SequenceBatch, SequenceBatch]:
    """Seeded shuffle, then the first floor(fraction * B) sequences train."""
    n = len(batch)
    if n < 2:
        raise DomainError(f"need at least 2 sequences to split, got {n}")
    order = np.random.default_rng(spec.seed).permutation(n)
    n_train = int(math.floor(spec.train_fraction * n))
    if n_train == 0 or n_train == n:
        raise DomainError(f"fraction {spec.train_fraction} leaves an empty side for {n} sequences")
    return batch.take(np.sort(order[:n_train])), batch.take(np.sort(order[n_train:]))


def balanced_subset(labels: np.ndarray, counts: dict[int, int], seed: int) -> np.ndarray:
    """Indices into the flattened steps, ``counts[c]`` drawn per class without replacement."""
    flat = np.asarray(labels).reshape(-1)
    rng = np.random.default_rng(seed)
    picks = []
    for cls in sorted(counts):
        pool = np.flatnonzero(flat == cls)
        want = int(counts[cls])
        if want > len(pool):
            raise DataError(f"class {cls}: requested {want} instances but only {len(pool)} available")
        picks.append(np.sort(rng.choice(pool, size=want, replace=False)))
    return np.concatenate(picks) if picks else np.empty(0, dtype=np.int64)


# ---------------------------------------------------------------- synthetic data


def _regime_means(num_classes: int, dim: int, rng: np.random.Generator, max_cos: float = 0.3) -> np.ndarray:
    for _ in range(1000):
        mu = rng.standard_normal((num_classes, dim))
        mu /= np.linalg.norm(mu, axis=1, keepdims=True)
        cos = mu @ mu.T
        np.fill_diagonal(cos, -1.0)
        if cos.max() <= max_cos:
            return mu
    raise DomainError(f"could not place {num_classes} regime means in {dim} dims with cosine <= {max_cos}")


def synth_regimes(
    num_seqs: int,
    T: int,
    D: int,
    num_classes: int = 3,
    regime_dwell: float = 20.0,
    noise_sigma: float = 0.3,
    seed: int = 0,
) -> SequenceBatch:
    """Hidden-Markov regime sequences with geometric dwell times.

    Each regime emits its unit mean vector plus isotropic Gaussian noise.
    Labels are the regime ids. ``regime_dwell=inf`` never switches.
    """
    if num_classes < 2:
        raise DomainError(f"num_classes must be >= 2, got {num_classes}")
    if not regime_dwell >= 2:
        raise DomainError(f"regime_dwell must be >= 2, got {regime_dwell}")
    rng = np.random.default_rng(seed)
    mu = _regime_means(num_classes, D, rng)
    p_switch = 0.0 if math.isinf(regime_dwell) else 1.0 / regime_dwell
    labels = np.empty((num_seqs, T), dtype=np.int64)
    for b in range(num_seqs):
        state = rng.integers(num_classes)
        for t in range(T):
            if t and rng.random() < p_switch:
                state = (state + rng.integers(1, num_classes)) % num_classes
            labels[b, t] = state
    data = mu[labels] + noise_sigma * rng.standard_normal((num_seqs, T, D))
    meta = {
        "sources": [f"synth-{b}" for b in range(num_seqs)],
        "synth": {
            "num_classes": num_classes,
            "regime_dwell": regime_dwell if math.isfinite(regime_dwell) else "inf",
            "noise_sigma": noise_sigma,
            "seed": seed,
        },
    }
    return SequenceBatch(data, labels, meta)


# ---------------------------------------------------------------- batch files
#
# "EMSB" | u32 version | u64 header length | JSON header | f32 data | i32 labels


def write_batch(batch: SequenceBatch, path: str | Path, header: dict | None = None) -> None:
    head = {
        "shape": list(batch.shape),
        "has_labels": batch.labels is not None,
        "meta": batch.meta,
        **(header or {}),
    }
    blob = json.dumps(head, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(BATCH_MAGIC)
        fh.write(struct.pack("<IQ", BATCH_VERSION, len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(batch.data, dtype="<f4").tobytes())
        if batch.labels is not None:
            fh.write(np.ascontiguousarray(batch.labels, dtype="<i4").tobytes())


def read_batch(path: str | Path) -> tuple[SequenceBatch, dict]:
    """Return the batch and its full JSON header."""
    raw = Path(path).read_bytes()
    if raw[:4] != BATCH_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {BATCH_MAGIC!r}")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != BATCH_VERSION:
        raise FormatError(f"{path}: unsupported batch version {version}")
    try:
        head = json.loads(raw[16:16 + hlen])
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    shape = tuple(head["shape"])
    n = int(np.prod(shape))
    off = 16 + hlen
    need = off + 4 * n + (4 * n // shape[2] if head["has_labels"] and shape[2] else 0)
    if len(raw) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(raw)}")
    data = np.frombuffer(raw, "<f4", count=n, offset=off).reshape(shape).astype(np.float64)
    labels = None
    if head["has_labels"]:
        labels = np.frombuffer(raw, "<i4", count=n // shape[2], offset=off + 4 * n).reshape(shape[:2]).astype(np.int64)
    return SequenceBatch(data, labels, head.get("meta", {})), head
