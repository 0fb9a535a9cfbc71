"""Event-sequence data model: ingestion, normalization, splitting, padding.

Sequences are immutable once loaded; every consumer works on numpy views.
The on-disk format is JSON lines, one object per sequence with
``"timestamps"`` (ascending floats) and ``"types"`` (1-based ints).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

PAD_MARK = 0           # reserved; real marks are 1..M
TIME_SCALE = 50.0      # normalized timestamps live in [0, TIME_SCALE] on the training split


class ValidationError(ValueError):
    """Raised when an ingested sequence violates the data contract."""


@dataclass(frozen=True)
class EventSequence:
    """One observation: strictly increasing timestamps with 1-based marks."""

    times: np.ndarray
    marks: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=np.float64))
        object.__setattr__(self, "marks", np.asarray(self.marks, dtype=np.int64))
        if self.times.ndim != 1 or self.marks.ndim != 1:
            raise ValidationError("times and marks must be 1-d")
        if len(self.times) != len(self.marks):
            raise ValidationError("times and marks must have equal length")
        if len(self.times) < 1:
            raise ValidationError("a sequence holds at least one event")
        if self.times[0] < 0:
            raise ValidationError("first timestamp must be >= 0")
        if np.any(np.diff(self.times) <= 0):
            raise ValidationError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.times)

    @property
    def window_end(self) -> float:
        """Observation horizon: the final timestamp."""
        return float(self.times[-1])

    def intervals(self) -> np.ndarray:
        """Inter-event gaps with the window opening at t=0."""
        return np.diff(self.times, prepend=0.0)


@dataclass
class Dataset:
    sequences: list[EventSequence]
    num_types: int
    t_max_train: float | None = None

    def __post_init__(self):
        for i, seq in enumerate(self.sequences):
            bad = (seq.marks < 1) | (seq.marks > self.num_types)
            if np.any(bad):
                raise ValidationError(
                    f"sequence {i}: mark {int(seq.marks[bad][0])} outside 1..{self.num_types}")

    def __len__(self):
        return len(self.sequences)

    @property
    def num_events(self) -> int:
        return sum(len(s) for s in self.sequences)


@dataclass(frozen=True)
class PaddedBatch:
    """Rectangular view of a batch; padded cells repeat the row's final state.

    Padded positions carry the sequence's last timestamp and mark 0, so the
    inter-event interval at a padded cell is exactly zero.
    """

    times: np.ndarray        # (B, N_max) float
    marks: np.ndarray        # (B, N_max) int, 0 at padding
    valid_mask: np.ndarray   # (B, N_max) bool

    @property
    def batch_size(self) -> int:
        return self.times.shape[0]

    @property
    def max_len(self) -> int:
        return self.times.shape[1]

    def intervals(self) -> np.ndarray:
        """(B, N_max) gaps, zero at padded cells, window opening at t=0."""
        return np.diff(self.times, prepend=0.0, axis=1)


@dataclass(frozen=True)
class TypeTrack:
    """Events of a single type, with 1-based back-references into the parent."""

    times: np.ndarray
    mark: int
    positions: np.ndarray    # global 1-based indices in the original sequence

    def __len__(self):
        return len(self.times)


def load_dataset(path, num_types: int, max_len: int = 256) -> Dataset:
    """Read a JSON-lines dataset, validating every sequence.

    Sequences longer than ``max_len`` keep their earliest ``max_len`` events.
    """
    sequences = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            times = np.asarray(rec["timestamps"], dtype=np.float64)
            marks = np.asarray(rec["types"], dtype=np.int64)
            if max_len is not None and len(times) > max_len:
                times, marks = times[:max_len], marks[:max_len]
            try:
                seq = EventSequence(times, marks)
            except ValidationError as e:
                raise ValidationError(f"sequence {i}: {e}") from None
            if np.any((marks < 1) | (marks > num_types)):
                raise ValidationError(f"sequence {i}: mark outside 1..{num_types}")
            sequences.append(seq)
    return Dataset(sequences, num_types)


def save_dataset(sequences, path):
    with open(path, "w") as fh:
        for seq in sequences:
            fh.write(json.dumps({
                "timestamps": [float(t) for t in seq.times],
                "types": [int(m) for m in seq.marks],
            }) + "\n")


def normalize_times(ds: Dataset, t_max: float | None = None) -> Dataset:
    """Map every timestamp t to TIME_SCALE * t / t_max.

    ``t_max`` defaults to the maximum over ``ds`` itself, which is correct
    only when ``ds`` is the training split; pass the training maximum when
    normalizing validation/test splits (values above TIME_SCALE are then
    permitted).
    """
    if t_max is None:
        t_max = max(s.window_end for s in ds.sequences)
    if t_max <= 0:
        raise ValidationError("degenerate data: maximum timestamp is zero")
    scale = TIME_SCALE / t_max
    seqs = [EventSequence(s.times * scale, s.marks) for s in ds.sequences]
    return Dataset(seqs, ds.num_types, t_max_train=float(t_max))


def split(ds: Dataset, counts: tuple[int, int, int], seed: int = 0
          ) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic disjoint train/val/test split by sequence."""
    n_train, n_val, n_test = counts
    if n_train + n_val + n_test > len(ds):
        raise ValueError(
            f"split counts {counts} exceed {len(ds)} available sequences")
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(ds))
    parts = (order[:n_train],
             order[n_train:n_train + n_val],
             order[n_train + n_val:n_train + n_val + n_test])
    return tuple(Dataset([ds.sequences[i] for i in idx], ds.num_types, ds.t_max_train)
                 for idx in parts)


def pad_batch(seqs: list[EventSequence]) -> PaddedBatch:
    if not seqs:
        raise ValueError("pad_batch requires a non-empty list")
    n_max = max(len(s) for s in seqs)
    b = len(seqs)
    times = np.zeros((b, n_max))
    marks = np.full((b, n_max), PAD_MARK, dtype=np.int64)
    valid = np.zeros((b, n_max), dtype=bool)
    for r, s in enumerate(seqs):
        n = len(s)
        times[r, :n] = s.times
        times[r, n:] = s.times[-1]
        marks[r, :n] = s.marks
        valid[r, :n] = True
    return PaddedBatch(times, marks, valid)


def split_by_type(seq: EventSequence, num_types: int) -> list[TypeTrack]:
    """Per-type subsequences retaining 1-based global positions."""
    tracks = []
    for m in range(1, num_types + 1):
        idx = np.flatnonzero(seq.marks == m)
        tracks.append(TypeTrack(seq.times[idx].copy(), m, idx + 1))
    return tracks


def merge_tracks(tracks: list[TypeTrack]) -> EventSequence:
    """Inverse of :func:`split_by_type`: reassemble by global position."""
    positions = np.concatenate([t.positions for t in tracks])
    times = np.concatenate([t.times for t in tracks])
    marks = np.concatenate([np.full(len(t), t.mark, dtype=np.int64) for t in tracks])
    order = np.argsort(positions)
    return EventSequence(times[order], marks[order])
