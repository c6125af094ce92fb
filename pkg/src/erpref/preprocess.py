"""Reference, filter, epoch, baseline-correct and reject."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .signal_model import (
    KEPT,
    NO_LABEL,
    REJECTED_ARTIFACT,
    REJECTED_EDGE,
    ContinuousRecording,
    EpochSet,
    baseline_length,
    epoch_length,
)

# channels filtered per call; bounds the temporary memory of sosfiltfilt
_FILTER_CHUNK = 8


@dataclass(frozen=True)
class FilterSpec:
    low_hz: float = 0.2
    high_hz: float = 35.0
    order: int = 4
    zero_phase: bool = True

    def validate(self, sampling_rate_hz: float) -> None:
        nyquist = sampling_rate_hz / 2.0
        if not 0 < self.low_hz < self.high_hz:
            raise ValueError(f"need 0 < low < high, got {self.low_hz}, {self.high_hz}")
        if self.high_hz >= nyquist:
            raise ValueError(f"cutoff {self.high_hz} Hz >= Nyquist {nyquist} Hz")
        if int(self.order) != self.order or self.order < 1:
            raise ValueError("filter order must be a positive integer")

    def design(self, sampling_rate_hz: float) -> np.ndarray:
        """Second-order sections of the Butterworth band-pass."""
        self.validate(sampling_rate_hz)
        return signal.butter(
            int(self.order), [self.low_hz, self.high_hz], btype="bandpass",
            fs=sampling_rate_hz, output="sos",
        )

    def magnitude(self, freqs_hz, sampling_rate_hz: float) -> np.ndarray:
        """Effective magnitude response (squared for forward-backward)."""
        # evaluated from the roots: sosfreqz loses ~1e-8 relative accuracy near DC
        z, p, k = signal.sos2zpk(self.design(sampling_rate_hz))
        _, h = signal.freqz_zpk(z, p, k, worN=np.atleast_1d(freqs_hz), fs=sampling_rate_hz)
        mag = np.abs(h)
        return mag**2 if self.zero_phase else mag


@dataclass(frozen=True)
class RejectionPolicy:
    mode: str = "target_fraction"
    threshold_uv: float | None = None
    fraction: float | None = 0.122

    def __post_init__(self):
        if self.mode == "fixed_threshold":
            if self.threshold_uv is None or not self.threshold_uv > 0:
                raise ValueError("fixed_threshold needs a positive threshold_uv")
        elif self.mode == "target_fraction":
            if self.fraction is None or not 0 < self.fraction < 1:
                raise ValueError("target_fraction needs a fraction in (0, 1)")
        else:
            raise ValueError(f"unknown rejection mode {self.mode!r}")

    @classmethod
    def fixed(cls, threshold_uv: float) -> "RejectionPolicy":
        return cls("fixed_threshold", threshold_uv=threshold_uv, fraction=None)

    @classmethod
    def target(cls, fraction: float = 0.122) -> "RejectionPolicy":
        return cls("target_fraction", threshold_uv=None, fraction=fraction)


def common_average_reference(rec: ContinuousRecording) -> ContinuousRecording:
    """Subtract the instantaneous mean over channels from every channel."""
    if rec.samples.shape[0] < 2:
        raise ValueError("common average reference needs at least 2 channels")
    x = rec.samples
    return rec.with_samples(x - x.mean(axis=0, keepdims=True))


def bandpass(rec: ContinuousRecording, spec: FilterSpec = FilterSpec()) -> ContinuousRecording:
    """Butterworth band-pass per channel.

    With ``zero_phase`` the filter runs forward and backward (squared
    magnitude, zero group delay) on an even-reflection padding of
    ``3 * order`` samples at each end.
    """
    sos = spec.design(rec.sampling_rate_hz)
    x = rec.samples
    if not np.all(np.isfinite(x)):
        raise ValueError("recording contains non-finite samples")
    out = np.empty_like(x)
    padlen = min(3 * int(spec.order), x.shape[1] - 1)
    for lo in range(0, x.shape[0], _FILTER_CHUNK):
        chunk = x[lo:lo + _FILTER_CHUNK]
        if spec.zero_phase:
            out[lo:lo + _FILTER_CHUNK] = signal.sosfiltfilt(
                sos, chunk, axis=-1, padtype="even", padlen=padlen
            )
        else:
            out[lo:lo + _FILTER_CHUNK] = signal.sosfilt(sos, chunk, axis=-1)
    return rec.with_samples(out)


def extract_epochs(rec: ContinuousRecording) -> EpochSet:
    """Cut [-200, 900) ms around every event.

    Events without full history or future are kept as epochs flagged
    rejected with reason ``edge``; their missing samples are zero.
    """
    rate = rec.sampling_rate_hz
    n_t = epoch_length(rate)
    n_base = baseline_length(rate)
    n_ch, n_times = rec.samples.shape
    idx = rec.event_indices
    data = np.zeros((idx.size, n_ch, n_t))
    rejected = np.zeros(idx.size, dtype=np.uint8)
    for i, onset in enumerate(idx):
        start = onset - n_base
        stop = start + n_t
        if start < 0 or stop > n_times:
            rejected[i] = REJECTED_EDGE
            lo, hi = max(start, 0), min(stop, n_times)
            data[i, :, lo - start:hi - start] = rec.samples[:, lo:hi]
        else:
            data[i] = rec.samples[:, start:stop]
    return EpochSet(
        data=data,
        sampling_rate_hz=rate,
        channel_labels=rec.channel_labels,
        participant_ids=[rec.participant_id] * idx.size,
        stimulus_ids=[e.stimulus_id for e in rec.events],
        presentation_ordinals=np.array([e.presentation_ordinal for e in rec.events], np.int32),
        rejected=rejected,
        labels=np.full(idx.size, NO_LABEL, np.int8),
    )


def baseline_correct(epochs: EpochSet) -> EpochSet:
    """Subtract each channel's mean over [-200, 0) ms from the whole epoch."""
    n_base = epochs.n_baseline
    if len(epochs) == 0:
        return epochs
    base = epochs.data[:, :, :n_base].mean(axis=2, keepdims=True)
    return epochs.replace(data=epochs.data - base)


def max_abs_voltage(epochs: EpochSet) -> np.ndarray:
    return np.abs(epochs.data).max(axis=(1, 2)) if len(epochs) else np.zeros(0)


def choose_threshold(peaks, fraction: float) -> float:
    """Threshold whose rejection rate (peak > threshold) is closest to ``fraction``.

    Candidates are the observed peak values; ties in distance go to the
    smaller rejection count.
    """
    peaks = np.sort(np.asarray(peaks, dtype=np.float64))
    m = peaks.size
    if m == 0:
        raise ValueError("no epochs to threshold")
    cand = np.unique(peaks)
    n_rejected = m - np.searchsorted(peaks, cand, side="right")
    dist = np.abs(n_rejected / m - fraction)
    best = np.flatnonzero(dist == dist.min())
    return float(cand[best[np.argmin(n_rejected[best])]])


def reject_artifacts(epochs: EpochSet, policy: RejectionPolicy = RejectionPolicy()):
    """Flag epochs whose peak absolute voltage exceeds a threshold.

    Returns ``(epochs, threshold_uv)``. Epochs already flagged (edge) stay
    flagged and do not take part in choosing a target-fraction threshold.
    """
    if len(epochs) == 0:
        raise ValueError("cannot reject artifacts in an empty epoch set")
    peaks = max_abs_voltage(epochs)
    candidates = epochs.rejected == KEPT
    if policy.mode == "fixed_threshold":
        threshold = float(policy.threshold_uv)
    else:
        if not candidates.any():
            raise ValueError("no non-rejected epochs to threshold")
        threshold = choose_threshold(peaks[candidates], policy.fraction)
    rejected = epochs.rejected.copy()
    rejected[candidates & (peaks > threshold)] = REJECTED_ARTIFACT
    return epochs.replace(rejected=rejected), threshold


@dataclass(frozen=True)
class PreprocessSummary:
    participant_id: str
    n_events: int
    n_edge: int
    n_artifact: int
    n_kept: int
    threshold_uv: float
    rejection_fraction: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def preprocess_recording(rec, spec: FilterSpec = FilterSpec(),
                         policy: RejectionPolicy = RejectionPolicy()):
    """Reference, filter, epoch, baseline-correct and reject one recording."""
    rec = common_average_reference(rec)
    rec = bandpass(rec, spec)
    epochs = extract_epochs(rec)
    del rec
    epochs = baseline_correct(epochs)
    epochs, threshold = reject_artifacts(epochs, policy)
    n_edge = int(np.sum(epochs.rejected == REJECTED_EDGE))
    n_art = int(np.sum(epochs.rejected == REJECTED_ARTIFACT))
    n_candidates = len(epochs) - n_edge
    summary = PreprocessSummary(
        participant_id=epochs.participant_ids[0] if len(epochs) else "",
        n_events=len(epochs),
        n_edge=n_edge,
        n_artifact=n_art,
        n_kept=int(np.sum(epochs.kept)),
        threshold_uv=threshold,
        rejection_fraction=n_art / n_candidates if n_candidates else 0.0,
    )
    return epochs, summary
