"""Windowed-mean feature vectors from epochs."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .signal_model import Epoch, EpochSet, baseline_length

WINDOW_START_MS = 50.0
WINDOW_WIDTH_MS = 50.0
N_WINDOWS = 15


def window_bounds(sampling_rate_hz, start_ms=WINDOW_START_MS, width_ms=WINDOW_WIDTH_MS,
                  n_windows=N_WINDOWS) -> np.ndarray:
    """Sample index ranges ``[lo, hi)`` (epoch coordinates) per window.

    Window ``k`` holds the samples whose offset from onset lies in
    ``[start + k*width, start + (k+1)*width)`` ms.
    """
    n_base = baseline_length(sampling_rate_hz)
    edges_ms = start_ms + width_ms * np.arange(n_windows + 1)
    # first sample index with offset >= edge; tolerate float round-off
    first = np.array([math.ceil(e * sampling_rate_hz / 1000.0 - 1e-9) for e in edges_ms])
    idx = first + n_base
    return np.stack([idx[:-1], idx[1:]], axis=1)


def window_means(data: np.ndarray, sampling_rate_hz: float, **window_kw) -> np.ndarray:
    """Mean per channel and window; ``data`` is (..., n_channels, n_samples).

    Returns (..., n_channels * n_windows) in channel-major order.
    """
    bounds = window_bounds(sampling_rate_hz, **window_kw)
    if bounds[-1, 1] > data.shape[-1]:
        raise ValueError("epoch too short to cover the feature windows")
    out = np.stack([data[..., lo:hi].mean(axis=-1) for lo, hi in bounds], axis=-1)
    return out.reshape(*data.shape[:-2], -1)


@dataclass(frozen=True)
class FeatureVector:
    participant_id: str
    stimulus_id: str
    values: np.ndarray
    label: int | None = None


def vectorize(epoch: Epoch, sampling_rate_hz: float | None = None) -> FeatureVector:
    """Feature vector of a single non-rejected epoch."""
    if epoch.rejected:
        raise ValueError("cannot vectorize a rejected epoch")
    if sampling_rate_hz is None:
        step = epoch.time_axis[1] - epoch.time_axis[0]
        sampling_rate_hz = 1000.0 / step
    values = window_means(np.asarray(epoch.data), sampling_rate_hz)
    return FeatureVector(epoch.participant_id, epoch.stimulus_id, values, epoch.label)


class EpochVectorizer(TransformerMixin, BaseEstimator):
    """Windowed means of epochs as a feature matrix.

    Accepts an :class:`EpochSet` or an array (n_epochs, n_channels, n_samples).
    Stateless; ``fit`` only records the input shape.

    Parameters
    ----------
    sampling_rate_hz : float, optional
        Needed for array input; taken from the set otherwise.
    start_ms, width_ms, n_windows :
        Window layout, 15 windows of 50 ms from 50 ms by default.
    """

    def __init__(self, sampling_rate_hz=None, start_ms=WINDOW_START_MS,
                 width_ms=WINDOW_WIDTH_MS, n_windows=N_WINDOWS):
        self.sampling_rate_hz = sampling_rate_hz
        self.start_ms = start_ms
        self.width_ms = width_ms
        self.n_windows = n_windows

    def _unpack(self, X):
        if isinstance(X, EpochSet):
            return X.data, X.sampling_rate_hz
        if self.sampling_rate_hz is None:
            raise ValueError("sampling_rate_hz is required for array input")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3:
            raise ValueError(f"expected (n_epochs, n_channels, n_samples), got {X.shape}")
        return X, self.sampling_rate_hz

    def fit(self, X, y=None):
        data, _ = self._unpack(X)
        self.n_channels_ = data.shape[1]
        return self

    def transform(self, X):
        data, rate = self._unpack(X)
        out = window_means(data, rate, start_ms=self.start_ms, width_ms=self.width_ms,
                           n_windows=self.n_windows)
        if not np.all(np.isfinite(out)):
            raise ValueError("non-finite feature values")
        return out


@dataclass(frozen=True)
class FeatureTable:
    """Feature matrix of the non-rejected epochs of one set."""

    participant_ids: tuple[str, ...]
    stimulus_ids: tuple[str, ...]
    labels: np.ndarray
    X: np.ndarray

    def vectors(self):
        for pid, sid, lab, row in zip(self.participant_ids, self.stimulus_ids, self.labels, self.X):
            yield FeatureVector(pid, sid, row, int(lab))


def featurize(epochs: EpochSet) -> FeatureTable:
    kept = np.flatnonzero(epochs.kept)
    X = EpochVectorizer().transform(epochs)[kept]
    return FeatureTable(
        participant_ids=tuple(epochs.participant_ids[i] for i in kept),
        stimulus_ids=tuple(epochs.stimulus_ids[i] for i in kept),
        labels=np.asarray(epochs.labels, dtype=np.int64)[kept],
        X=X,
    )


def write_features_csv(path, table: FeatureTable) -> Path:
    path = Path(path)
    X = table.X
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["participant_id", "stimulus_id", "label", *(f"f{i}" for i in range(X.shape[1]))])
        for i in range(X.shape[0]):
            w.writerow([table.participant_ids[i], table.stimulus_ids[i], int(table.labels[i]),
                        *(repr(float(v)) for v in X[i])])
    return path


def read_features_csv(path) -> FeatureTable:
    pids, sids, labels, rows = [], [], [], []
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            pids.append(row[0])
            sids.append(row[1])
            labels.append(int(row[2]))
            rows.append([float(v) for v in row[3:]])
    X = np.array(rows, dtype=np.float64).reshape(len(rows), -1)
    return FeatureTable(tuple(pids), tuple(sids), np.array(labels, dtype=np.int64), X)
