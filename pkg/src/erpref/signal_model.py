"""Shared domain types and on-disk formats.

Voltages are float64 microvolts throughout. Participant and stimulus
identifiers are opaque strings.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# 32-channel 10-20 montage (equidistant cap layout).
CHANNEL_LABELS: tuple[str, ...] = (
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "FC5",
    "FC1", "FC2", "FC6", "T7", "C3", "Cz", "C4", "T8",
    "TP9", "CP5", "CP1", "CP2", "CP6", "TP10", "P7", "P3",
    "Pz", "P4", "P8", "PO9", "O1", "Oz", "O2", "PO10",
)

DEFAULT_SAMPLING_RATE_HZ = 2000.0
EPOCH_START_MS = -200.0
EPOCH_END_MS = 900.0

# Epoch rejection codes stored in the u8 "rejected" field.
KEPT = 0
REJECTED_ARTIFACT = 1
REJECTED_EDGE = 2
REJECT_REASONS = {KEPT: "", REJECTED_ARTIFACT: "artifact", REJECTED_EDGE: "edge"}

NO_LABEL = -128

EPOCH_MAGIC = b"ERP1"
RECORDING_MAGIC = b"REC1"


class FormatError(ValueError):
    """Raised when an on-disk file is malformed or has the wrong version."""


class InvariantError(RuntimeError):
    """A domain invariant was found violated at run time."""


def epoch_length(sampling_rate_hz: float) -> int:
    """Number of samples in a [-200, 900) ms epoch."""
    return int(round(1.1 * sampling_rate_hz))


def baseline_length(sampling_rate_hz: float) -> int:
    """Number of samples preceding stimulus onset."""
    return int(round(0.2 * sampling_rate_hz))


def epoch_time_axis(sampling_rate_hz: float) -> np.ndarray:
    n_base = baseline_length(sampling_rate_hz)
    idx = np.arange(epoch_length(sampling_rate_hz)) - n_base
    return idx * (1000.0 / sampling_rate_hz)


def _frozen(a, dtype=None) -> np.ndarray:
    # Arrays handed to a constructor are adopted (not copied) and made read-only.
    a = np.asarray(a, dtype=dtype)
    if a.flags.writeable:
        a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Event:
    sample_index: int
    stimulus_id: str
    presentation_ordinal: int


@dataclass(frozen=True, eq=False)
class ContinuousRecording:
    """Multichannel voltage time series with stimulus event markers.

    ``samples`` has shape (n_channels, n_times).
    """

    participant_id: str
    channel_labels: tuple[str, ...]
    sampling_rate_hz: float
    samples: np.ndarray
    events: tuple[Event, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "channel_labels", tuple(self.channel_labels))
        object.__setattr__(self, "samples", _frozen(self.samples, np.float64))
        object.__setattr__(self, "events", tuple(self.events))
        object.__setattr__(self, "sampling_rate_hz", float(self.sampling_rate_hz))

    @property
    def n_times(self) -> int:
        return self.samples.shape[1] if self.samples.ndim == 2 else 0

    @property
    def event_indices(self) -> np.ndarray:
        return np.array([e.sample_index for e in self.events], dtype=np.int64)

    def with_samples(self, samples: np.ndarray) -> "ContinuousRecording":
        return dataclasses.replace(self, samples=samples)

    def __eq__(self, other):
        if not isinstance(other, ContinuousRecording):
            return NotImplemented
        return (
            self.participant_id == other.participant_id
            and self.channel_labels == other.channel_labels
            and self.sampling_rate_hz == other.sampling_rate_hz
            and self.events == other.events
            and self.samples.shape == other.samples.shape
            and np.array_equal(self.samples, other.samples)
        )


def validate_recording(rec: ContinuousRecording) -> list[str]:
    """Return every invariant violation of ``rec``; an empty list means ok."""
    errors = []
    if rec.samples.ndim != 2:
        errors.append("samples must be a 2-D channels x time matrix")
        n_rows, n_times = -1, 0
    else:
        n_rows, n_times = rec.samples.shape
    if n_rows != len(rec.channel_labels) and rec.samples.ndim == 2:
        errors.append(
            f"channel count mismatch: {n_rows} rows for {len(rec.channel_labels)} labels"
        )
    if not (rec.sampling_rate_hz > 0) or not np.isfinite(rec.sampling_rate_hz):
        errors.append(f"non-positive sampling rate: {rec.sampling_rate_hz}")
    idx = rec.event_indices
    if idx.size:
        if np.any(idx < 0):
            errors.append("negative event sample index")
        if np.any(np.diff(idx) <= 0):
            errors.append("events not increasing")
        if idx.max() >= n_times:
            errors.append("event sample index beyond recording length")
    return errors


@dataclass(frozen=True)
class Epoch:
    participant_id: str
    stimulus_id: str
    presentation_ordinal: int
    data: np.ndarray
    time_axis: np.ndarray
    rejected: bool
    reject_reason: str = ""
    label: int | None = None


@dataclass(frozen=True, eq=False)
class EpochSet:
    """Stimulus-locked epochs stored column-wise.

    ``data`` has shape (n_epochs, n_channels, n_samples). ``rejected`` holds
    the u8 rejection code per epoch (0 kept, 1 artifact, 2 edge) and
    ``labels`` an int per epoch with ``NO_LABEL`` meaning unlabeled.
    ``label_domain`` is ``"rating"``, ``"tertile"`` or ``None``.
    """

    data: np.ndarray
    sampling_rate_hz: float
    channel_labels: tuple[str, ...]
    participant_ids: tuple[str, ...]
    stimulus_ids: tuple[str, ...]
    presentation_ordinals: np.ndarray
    rejected: np.ndarray
    labels: np.ndarray
    label_domain: str | None = None

    def __post_init__(self):
        n = len(self.stimulus_ids)
        n_ch = len(self.channel_labels)
        n_t = epoch_length(self.sampling_rate_hz)
        data = np.asarray(self.data, dtype=np.float64)
        if data.size == 0 and n == 0:
            data = data.reshape(0, n_ch, n_t)
        object.__setattr__(self, "data", _frozen(data, np.float64))
        object.__setattr__(self, "sampling_rate_hz", float(self.sampling_rate_hz))
        object.__setattr__(self, "channel_labels", tuple(self.channel_labels))
        object.__setattr__(self, "participant_ids", tuple(self.participant_ids))
        object.__setattr__(self, "stimulus_ids", tuple(self.stimulus_ids))
        object.__setattr__(
            self, "presentation_ordinals", _frozen(self.presentation_ordinals, np.int32)
        )
        object.__setattr__(self, "rejected", _frozen(self.rejected, np.uint8))
        object.__setattr__(self, "labels", _frozen(self.labels, np.int8))
        if self.data.shape != (n, n_ch, n_t):
            raise ValueError(
                f"epoch data shape {self.data.shape} != {(n, n_ch, n_t)}"
            )
        for name in ("participant_ids", "presentation_ordinals", "rejected", "labels"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has length {len(getattr(self, name))}, expected {n}")

    @classmethod
    def empty(cls, sampling_rate_hz=DEFAULT_SAMPLING_RATE_HZ, channel_labels=CHANNEL_LABELS):
        n_t = epoch_length(sampling_rate_hz)
        return cls(
            data=np.zeros((0, len(channel_labels), n_t)),
            sampling_rate_hz=sampling_rate_hz,
            channel_labels=channel_labels,
            participant_ids=(),
            stimulus_ids=(),
            presentation_ordinals=np.zeros(0, np.int32),
            rejected=np.zeros(0, np.uint8),
            labels=np.zeros(0, np.int8),
        )

    def __len__(self):
        return len(self.stimulus_ids)

    def __getitem__(self, i) -> Epoch:
        code = int(self.rejected[i])
        label = int(self.labels[i])
        return Epoch(
            participant_id=self.participant_ids[i],
            stimulus_id=self.stimulus_ids[i],
            presentation_ordinal=int(self.presentation_ordinals[i]),
            data=self.data[i],
            time_axis=self.time_axis,
            rejected=code != KEPT,
            reject_reason=REJECT_REASONS.get(code, "unknown"),
            label=None if label == NO_LABEL else label,
        )

    def __eq__(self, other):
        if not isinstance(other, EpochSet):
            return NotImplemented
        return (
            self.sampling_rate_hz == other.sampling_rate_hz
            and self.channel_labels == other.channel_labels
            and self.participant_ids == other.participant_ids
            and self.stimulus_ids == other.stimulus_ids
            and self.label_domain == other.label_domain
            and np.array_equal(self.presentation_ordinals, other.presentation_ordinals)
            and np.array_equal(self.rejected, other.rejected)
            and np.array_equal(self.labels, other.labels)
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )

    @property
    def time_axis(self) -> np.ndarray:
        return epoch_time_axis(self.sampling_rate_hz)

    @property
    def n_baseline(self) -> int:
        return baseline_length(self.sampling_rate_hz)

    @property
    def kept(self) -> np.ndarray:
        return self.rejected == KEPT

    def replace(self, **changes) -> "EpochSet":
        return dataclasses.replace(self, **changes)

    def subset(self, mask_or_index) -> "EpochSet":
        idx = np.arange(len(self))[np.asarray(mask_or_index)]
        return EpochSet(
            data=self.data[idx],
            sampling_rate_hz=self.sampling_rate_hz,
            channel_labels=self.channel_labels,
            participant_ids=[self.participant_ids[i] for i in idx],
            stimulus_ids=[self.stimulus_ids[i] for i in idx],
            presentation_ordinals=self.presentation_ordinals[idx],
            rejected=self.rejected[idx],
            labels=self.labels[idx],
            label_domain=self.label_domain,
        )


def concatenate_epochs(sets: Sequence[EpochSet]) -> EpochSet:
    if not sets:
        raise ValueError("no epoch sets to concatenate")
    first = sets[0]
    for s in sets[1:]:
        if s.sampling_rate_hz != first.sampling_rate_hz or s.channel_labels != first.channel_labels:
            raise ValueError("epoch sets differ in sampling rate or channel order")
    return EpochSet(
        data=np.concatenate([s.data for s in sets]),
        sampling_rate_hz=first.sampling_rate_hz,
        channel_labels=first.channel_labels,
        participant_ids=sum((s.participant_ids for s in sets), ()),
        stimulus_ids=sum((s.stimulus_ids for s in sets), ()),
        presentation_ordinals=np.concatenate([s.presentation_ordinals for s in sets]),
        rejected=np.concatenate([s.rejected for s in sets]),
        labels=np.concatenate([s.labels for s in sets]),
        label_domain=first.label_domain,
    )


@dataclass(frozen=True)
class ExplicitRating:
    participant_id: str
    stimulus_id: str
    count: int

    def __post_init__(self):
        if self.count not in (0, 1, 2, 3):
            raise ValueError(f"rating count must be in 0..3, got {self.count}")


TERTILES = ("Low", "Medium", "High")
TERTILE_CODES = {"Low": 0, "Medium": 1, "High": 2}


@dataclass(frozen=True)
class GroupRanking:
    """Population score, dense rank (1 = highest) and tertile per stimulus."""

    scores: dict[str, int] = field(default_factory=dict)
    ranks: dict[str, int] = field(default_factory=dict)
    tertiles: dict[str, str] = field(default_factory=dict)

    def members(self, tertile: str) -> list[str]:
        return sorted(s for s, t in self.tertiles.items() if t == tertile)


# ---------------------------------------------------------------------------
# binary IO helpers


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self.path}: invalid UTF-8 string") from exc

    def array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def _check_magic(head: bytes, magic: bytes, path) -> None:
    if head == magic:
        return
    if head[:3] == magic[:3]:
        raise FormatError(
            f"{path}: version mismatch (found {head!r}, expected {magic!r})"
        )
    raise FormatError(f"{path}: not a {magic.decode()} file")


def epochs_to_bytes(epochs: EpochSet) -> bytes:
    n, n_ch, n_t = epochs.data.shape
    out = io.BytesIO()
    out.write(EPOCH_MAGIC)
    out.write(struct.pack("<IIId", n, n_ch, n_t, epochs.sampling_rate_hz))
    # Extension to the fixed header: channel labels and label domain, so
    # that read(write(x)) == x holds for the whole set.
    for label in epochs.channel_labels:
        out.write(_pack_str(label))
    out.write(_pack_str(epochs.label_domain or ""))
    payload = np.ascontiguousarray(epochs.data, dtype="<f8")
    for i in range(n):
        out.write(_pack_str(epochs.participant_ids[i]))
        out.write(_pack_str(epochs.stimulus_ids[i]))
        out.write(struct.pack(
            "<iBb",
            int(epochs.presentation_ordinals[i]),
            int(epochs.rejected[i]),
            int(epochs.labels[i]),
        ))
        out.write(payload[i].tobytes())
    return out.getvalue()


def epochs_from_bytes(buf: bytes, path="<bytes>") -> EpochSet:
    r = _Reader(buf, path)
    _check_magic(r.take(4), EPOCH_MAGIC, path)
    n, n_ch, n_t, rate = r.unpack("<IIId")
    if not rate > 0:
        raise FormatError(f"{path}: non-positive sampling rate in header")
    if n_t != epoch_length(rate):
        raise FormatError(
            f"{path}: header samples-per-epoch {n_t} inconsistent with rate {rate}"
        )
    channel_labels = [r.string() for _ in range(n_ch)]
    domain = r.string() or None
    record = 2 * 4 + 4 + 1 + 1 + 8 * n_ch * n_t
    if len(buf) - r.pos < n * record:
        raise FormatError(f"{path}: truncated file or dimension header inconsistent with payload")
    data = np.empty((n, n_ch, n_t))
    pids, sids, ords, rej, labels = [], [], [], [], []
    for i in range(n):
        pids.append(r.string())
        sids.append(r.string())
        o, code, lab = r.unpack("<iBb")
        ords.append(o)
        rej.append(code)
        labels.append(lab)
        data[i] = r.array(n_ch * n_t).reshape(n_ch, n_t)
    if r.pos != len(buf):
        raise FormatError(f"{path}: dimension header inconsistent with payload (trailing bytes)")
    return EpochSet(
        data=data,
        sampling_rate_hz=rate,
        channel_labels=channel_labels,
        participant_ids=pids,
        stimulus_ids=sids,
        presentation_ordinals=np.array(ords, np.int32),
        rejected=np.array(rej, np.uint8),
        labels=np.array(labels, np.int8),
        label_domain=domain,
    )


def write_epochs(path, epochs: EpochSet) -> Path:
    path = Path(path)
    path.write_bytes(epochs_to_bytes(epochs))
    return path


def read_epochs(path) -> EpochSet:
    path = Path(path)
    return epochs_from_bytes(path.read_bytes(), path)


def export_epochs_csv(path, epochs: EpochSet) -> Path:
    """Write one row per sample per epoch; for inspection only."""
    path = Path(path)
    t_axis = epochs.time_axis
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["participant_id", "stimulus_id", "presentation_ordinal",
                    "rejected", "label", "t_ms", *epochs.channel_labels])
        for i in range(len(epochs)):
            head = [epochs.participant_ids[i], epochs.stimulus_ids[i],
                    int(epochs.presentation_ordinals[i]), int(epochs.rejected[i]),
                    int(epochs.labels[i])]
            for k, t in enumerate(t_axis):
                w.writerow(head + [repr(float(t))] + [repr(float(v)) for v in epochs.data[i, :, k]])
    return path


def recording_to_bytes(rec: ContinuousRecording) -> bytes:
    n_ch, n_t = rec.samples.shape
    out = io.BytesIO()
    out.write(RECORDING_MAGIC)
    out.write(struct.pack("<IQd", n_ch, n_t, rec.sampling_rate_hz))
    out.write(_pack_str(rec.participant_id))
    for label in rec.channel_labels:
        out.write(_pack_str(label))
    out.write(struct.pack("<I", len(rec.events)))
    for ev in rec.events:
        out.write(struct.pack("<Qi", ev.sample_index, ev.presentation_ordinal))
        out.write(_pack_str(ev.stimulus_id))
    out.write(np.ascontiguousarray(rec.samples, dtype="<f8").tobytes())
    return out.getvalue()


def recording_from_bytes(buf: bytes, path="<bytes>") -> ContinuousRecording:
    r = _Reader(buf, path)
    _check_magic(r.take(4), RECORDING_MAGIC, path)
    n_ch, n_t, rate = r.unpack("<IQd")
    pid = r.string()
    labels = [r.string() for _ in range(n_ch)]
    (n_ev,) = r.unpack("<I")
    events = []
    for _ in range(n_ev):
        idx, ordinal = r.unpack("<Qi")
        events.append(Event(idx, r.string(), ordinal))
    if len(buf) - r.pos != 8 * n_ch * n_t:
        raise FormatError(f"{path}: dimension header inconsistent with payload")
    samples = r.array(n_ch * n_t).reshape(n_ch, n_t)
    return ContinuousRecording(pid, labels, rate, samples, events)


def write_recording(path, rec: ContinuousRecording) -> Path:
    path = Path(path)
    path.write_bytes(recording_to_bytes(rec))
    return path


def read_recording(path) -> ContinuousRecording:
    path = Path(path)
    return recording_from_bytes(path.read_bytes(), path)


def write_ratings_csv(path, ratings: Iterable[ExplicitRating]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["participant_id", "stimulus_id", "count"])
        for r in ratings:
            w.writerow([r.participant_id, r.stimulus_id, r.count])
    return path


def read_ratings_csv(path) -> list[ExplicitRating]:
    with Path(path).open(newline="") as fh:
        return [
            ExplicitRating(row["participant_id"], row["stimulus_id"], int(row["count"]))
            for row in csv.DictReader(fh)
        ]
