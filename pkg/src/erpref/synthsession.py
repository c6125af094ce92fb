"""Simulated RSVP sessions with a known preference structure.

Each participant sees every stimulus twice per block in trials of
``images_per_trial`` images at a fixed SOA. The recording is background
noise (white + 1/f^alpha) plus a stimulus-locked ERP whose parietal
amplitude grows with the participant's rating. For "carrier" participants,
epochs of stimuli they rated 0 additionally carry a parietal response scaled
by the stimulus's latent group-preference tertile.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import fft as sp_fft

from .labeling import Selection, assign_tertiles
from .signal_model import (
    CHANNEL_LABELS,
    ContinuousRecording,
    Event,
    ExplicitRating,
    InvariantError,
    validate_recording,
)

# Approximate 2-D scalp positions (x: left-right, y: posterior-anterior).
CHANNEL_POSITIONS: dict[str, tuple[float, float]] = {
    "Fp1": (-0.30, 0.95), "Fp2": (0.30, 0.95), "F7": (-0.80, 0.60), "F3": (-0.40, 0.55),
    "Fz": (0.00, 0.50), "F4": (0.40, 0.55), "F8": (0.80, 0.60), "FC5": (-0.65, 0.30),
    "FC1": (-0.20, 0.25), "FC2": (0.20, 0.25), "FC6": (0.65, 0.30), "T7": (-1.00, 0.00),
    "C3": (-0.50, 0.00), "Cz": (0.00, 0.00), "C4": (0.50, 0.00), "T8": (1.00, 0.00),
    "TP9": (-0.95, -0.35), "CP5": (-0.65, -0.30), "CP1": (-0.20, -0.25), "CP2": (0.20, -0.25),
    "CP6": (0.65, -0.30), "TP10": (0.95, -0.35), "P7": (-0.80, -0.60), "P3": (-0.40, -0.55),
    "Pz": (0.00, -0.50), "P4": (0.40, -0.55), "P8": (0.80, -0.60), "PO9": (-0.60, -0.85),
    "O1": (-0.30, -0.95), "Oz": (0.00, -1.00), "O2": (0.30, -0.95), "PO10": (0.60, -0.85),
}

PZ_CENTER_MS, PZ_SD_MS, PZ_RADIUS = 400.0, 80.0, 0.75
FZ_CENTER_MS, FZ_SD_MS, FZ_RADIUS = 350.0, 50.0, 0.6
KERNEL_END_MS = 900.0

DEFAULT_P3_AMPLITUDES = {0: -1.0, 1: 3.0, 2: 4.5, 3: 6.0}


@dataclass(frozen=True)
class SimulationConfig:
    n_participants: int = 31
    n_stimuli: int = 240
    blocks: int = 3
    trials_per_block: int = 8
    images_per_trial: int = 60
    soa_ms: float = 500.0
    sampling_rate_hz: float = 2000.0
    noise_std_uv: float = 4.0
    pink_noise_std_uv: float = 8.0
    pink_noise_exponent: float = 1.0
    p3_amplitude_per_level: Mapping[int, float] = field(
        default_factory=lambda: dict(DEFAULT_P3_AMPLITUDES)
    )
    fz_amplitude_uv: float = 3.0
    amplitude_jitter: float = 0.2
    group_effect_amplitude_uv: float = 6.0
    group_effect_carrier_fraction: float = 0.5
    rating_distribution: tuple[float, ...] = (0.6, 0.15, 0.13, 0.12)
    rating_distribution_overrides: Mapping[int, tuple[float, ...]] = field(default_factory=dict)
    taste_noise: float = 1.0
    artifact_rate: float = 0.06
    artifact_amplitude_uv: float = 150.0
    lead_ms: float = 1000.0
    trial_gap_ms: float = 1000.0
    channel_labels: tuple[str, ...] = CHANNEL_LABELS
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "p3_amplitude_per_level",
            {int(k): float(v) for k, v in dict(self.p3_amplitude_per_level).items()},
        )
        object.__setattr__(self, "rating_distribution", tuple(float(v) for v in self.rating_distribution))
        object.__setattr__(
            self, "rating_distribution_overrides",
            {int(k): tuple(float(x) for x in v)
             for k, v in dict(self.rating_distribution_overrides).items()},
        )
        object.__setattr__(self, "channel_labels", tuple(self.channel_labels))
        errors = self.validate()
        if errors:
            raise ValueError("invalid simulation config: " + "; ".join(errors))

    def validate(self) -> list[str]:
        errors = []
        for name in ("n_participants", "n_stimuli", "blocks", "trials_per_block", "images_per_trial"):
            if int(getattr(self, name)) < 1:
                errors.append(f"{name} must be positive")
        if self.trials_per_block * self.images_per_trial != 2 * self.n_stimuli:
            errors.append("trials_per_block * images_per_trial must equal 2 * n_stimuli")
        if self.blocks > 3:
            errors.append("at most 3 blocks: ratings are capped at 3")
        if not (self.soa_ms > 0 and self.sampling_rate_hz > 0):
            errors.append("soa_ms and sampling_rate_hz must be positive")
        if self.soa_ms * self.sampling_rate_hz / 1000.0 < 1:
            errors.append("SOA shorter than one sample")
        amps = [self.noise_std_uv, self.pink_noise_std_uv, self.pink_noise_exponent,
                self.fz_amplitude_uv, self.group_effect_amplitude_uv, self.artifact_amplitude_uv,
                *self.p3_amplitude_per_level.values()]
        if not all(np.isfinite(amps)):
            errors.append("amplitudes must be finite")
        if self.noise_std_uv < 0 or self.pink_noise_std_uv < 0:
            errors.append("noise levels must be non-negative")
        if set(self.p3_amplitude_per_level) != {0, 1, 2, 3}:
            errors.append("p3_amplitude_per_level needs levels 0..3")
        if not 0.0 <= self.group_effect_carrier_fraction <= 1.0:
            errors.append("group_effect_carrier_fraction must be in [0, 1]")
        if not (np.isfinite(self.amplitude_jitter) and self.amplitude_jitter >= 0):
            errors.append("amplitude_jitter must be finite and non-negative")
        if not 0.0 <= self.artifact_rate <= 1.0:
            errors.append("artifact_rate must be in [0, 1]")
        for dist in (self.rating_distribution, *self.rating_distribution_overrides.values()):
            if len(dist) != self.blocks + 1 or min(dist) < 0 or abs(sum(dist) - 1) > 1e-9:
                errors.append(f"rating distribution {dist} must have blocks+1 non-negative entries summing to 1")
        if self.taste_noise < 0:
            errors.append("taste_noise must be non-negative")
        if self.lead_ms < 200 or self.trial_gap_ms < 0:
            errors.append("lead_ms must be >= 200 and trial_gap_ms >= 0")
        unknown = [c for c in self.channel_labels if c not in CHANNEL_POSITIONS]
        if unknown:
            errors.append(f"no scalp position for channels {unknown}")
        return errors

    def replace(self, **changes) -> "SimulationConfig":
        return dataclasses.replace(self, **changes)

    @property
    def events_per_recording(self) -> int:
        return self.blocks * self.trials_per_block * self.images_per_trial


@dataclass(frozen=True)
class GroundTruth:
    participant_ids: tuple[str, ...]
    stimulus_ids: tuple[str, ...]
    latent_scores: dict[str, float]
    latent_tertiles: dict[str, str]
    ratings: tuple[ExplicitRating, ...]
    selections: tuple[Selection, ...]
    carriers: dict[str, bool]

    def rating_matrix(self) -> np.ndarray:
        """(n_participants, n_stimuli) array of counts."""
        p_idx = {p: i for i, p in enumerate(self.participant_ids)}
        s_idx = {s: i for i, s in enumerate(self.stimulus_ids)}
        out = np.zeros((len(p_idx), len(s_idx)), dtype=np.int64)
        for r in self.ratings:
            out[p_idx[r.participant_id], s_idx[r.stimulus_id]] = r.count
        return out


def participant_ids(n: int) -> list[str]:
    return [f"P{i + 1:02d}" for i in range(n)]


def stimulus_ids(n: int) -> list[str]:
    return [f"S{i + 1:03d}" for i in range(n)]


# ---------------------------------------------------------------------------
# ERP kernel


def _bump(t_ms, center, sd):
    # Gaussian shifted to be exactly 0 at onset and clipped at 0, peak 1.
    t = np.asarray(t_ms, dtype=np.float64)
    g0 = np.exp(-0.5 * (center / sd) ** 2)
    g = np.exp(-0.5 * ((t - center) / sd) ** 2)
    out = np.maximum(g - g0, 0.0) / (1.0 - g0)
    return np.where((t >= 0) & (t < KERNEL_END_MS), out, 0.0)


def spatial_weight(channel: str, center: str, radius: float) -> float:
    """Linear falloff from ``center`` to 0 at ``radius`` scalp units."""
    try:
        x, y = CHANNEL_POSITIONS[channel]
    except KeyError:
        raise KeyError(f"unknown channel label {channel!r}") from None
    cx, cy = CHANNEL_POSITIONS[center]
    return max(0.0, 1.0 - np.hypot(x - cx, y - cy) / radius)


def erp_kernel(level, channel, t_ms, p3_amplitudes=None, fz_amplitude_uv=3.0):
    """Stimulus-locked ERP in microvolts for a rating level at one channel.

    Parietal part: Gaussian bump (400 ms, SD 80 ms) scaled by the level's
    amplitude with linear spatial falloff around Pz. Frontal part: narrower
    bump (350 ms, SD 50 ms) around Fz, present only for levels above 0.
    """
    if level not in (0, 1, 2, 3):
        raise ValueError(f"rating level must be 0..3, got {level}")
    amps = DEFAULT_P3_AMPLITUDES if p3_amplitudes is None else p3_amplitudes
    pz = amps[level] * spatial_weight(channel, "Pz", PZ_RADIUS) * _bump(t_ms, PZ_CENTER_MS, PZ_SD_MS)
    fz = 0.0
    if level > 0:
        fz = fz_amplitude_uv * spatial_weight(channel, "Fz", FZ_RADIUS) * _bump(t_ms, FZ_CENTER_MS, FZ_SD_MS)
    return pz + fz


def group_kernel(channel, t_ms, amplitude_uv):
    return amplitude_uv * spatial_weight(channel, "Pz", PZ_RADIUS) * _bump(t_ms, PZ_CENTER_MS, PZ_SD_MS)


# ---------------------------------------------------------------------------
# ratings


def _quantile_counts(n: int, dist) -> np.ndarray:
    edges = np.round(np.cumsum(dist) * n).astype(int)
    edges[-1] = n
    return np.diff(np.concatenate([[0], edges]))


def assign_ratings(latent_scores, taste_noise, rng, distribution=(0.6, 0.15, 0.13, 0.12)):
    """Ratings 0..len(distribution)-1 for one participant.

    The participant's utility is ``latent + taste_noise * N(0, 1)``; ratings
    are cut at the utility quantiles given by ``distribution`` so the
    marginal histogram is exact. ``taste_noise=inf`` ignores the latent score.
    """
    latent = np.asarray(latent_scores, dtype=np.float64)
    noise = rng.standard_normal(latent.size)
    if np.isinf(taste_noise):
        utility = noise
    else:
        utility = latent + taste_noise * noise
    order = np.argsort(utility, kind="stable")
    counts = _quantile_counts(latent.size, distribution)
    ratings = np.empty(latent.size, dtype=np.int64)
    ratings[order] = np.repeat(np.arange(len(distribution)), counts)
    return ratings


# ---------------------------------------------------------------------------
# schedule and signal


def _schedule(config: SimulationConfig, rng):
    """Event sample indices, stimulus indices, block and trial of each event."""
    rate = config.sampling_rate_hz
    soa = int(round(config.soa_ms * rate / 1000.0))
    lead = int(round(config.lead_ms * rate / 1000.0))
    gap = int(round(config.trial_gap_ms * rate / 1000.0))
    idx, stim, block_of, trial_of = [], [], [], []
    pos = lead
    for b in range(config.blocks):
        order = np.concatenate([rng.permutation(config.n_stimuli) for _ in range(2)])
        for tr in range(config.trials_per_block):
            chunk = order[tr * config.images_per_trial:(tr + 1) * config.images_per_trial]
            for k, s in enumerate(chunk):
                idx.append(pos + k * soa)
                stim.append(int(s))
                block_of.append(b)
                trial_of.append(tr)
            pos += (len(chunk) - 1) * soa + soa + gap
    n_times = idx[-1] + soa + lead
    return (np.array(idx), np.array(stim), np.array(block_of), np.array(trial_of), n_times)


def pink_noise(n_channels, n_times, exponent, rng):
    """Unit-variance 1/f^exponent noise per channel, shaped in the frequency domain."""
    n_fft = sp_fft.next_fast_len(n_times, real=True)
    freqs = np.fft.rfftfreq(n_fft)
    scale = np.zeros_like(freqs)
    scale[1:] = freqs[1:] ** (-exponent / 2.0)
    out = np.empty((n_channels, n_times))
    for ch in range(n_channels):
        spec = rng.standard_normal(freqs.size) + 1j * rng.standard_normal(freqs.size)
        x = sp_fft.irfft(spec * scale, n=n_fft)[:n_times]
        sd = x.std()
        out[ch] = x / sd if sd > 0 else x
    return out


def _selections(pid, ratings, stim_ids, block_of, trial_of, stim_of, blocks, rng):
    # A rating-r stimulus is picked in r distinct blocks; within a picked
    # block it is confirmed after one or both of its trials.
    out = []
    for s, r in enumerate(ratings):
        if r == 0:
            continue
        chosen = np.sort(rng.choice(blocks, size=int(r), replace=False))
        for b in chosen:
            trials = np.unique(trial_of[(stim_of == s) & (block_of == b)])
            n_pick = 1 if trials.size == 1 or rng.random() < 0.5 else 2
            for tr in np.sort(rng.choice(trials, size=n_pick, replace=False)):
                out.append((Selection(pid, int(b) + 1, stim_ids[s]), int(tr) + 1))
    return out


def _behavior(config, p_index, pid, latent, rng):
    stim_ids = stimulus_ids(config.n_stimuli)
    dist = config.rating_distribution_overrides.get(p_index, config.rating_distribution)
    ratings = assign_ratings(latent, config.taste_noise, rng, dist)
    schedule = _schedule(config, rng)
    ev_idx, ev_stim, ev_block, ev_trial, _ = schedule
    picks = _selections(pid, ratings, stim_ids, ev_block, ev_trial, ev_stim, config.blocks, rng)
    return ratings, schedule, picks


def _streams(seed: np.random.SeedSequence):
    # children derived from the spawn key, independent of spawn() state
    return [np.random.SeedSequence(seed.entropy, spawn_key=(*seed.spawn_key, k)) for k in (0, 1)]


def _simulate_participant(config, p_index, pid, latent, latent_tertile_idx, is_carrier, seed):
    # Behaviour (ratings, schedule, picks) and signal use separate streams so
    # ratings can be reproduced without synthesizing any voltage.
    behavior_seed, signal_seed = _streams(seed)
    ratings, (ev_idx, ev_stim, _, _, n_times), picks = _behavior(
        config, p_index, pid, latent, np.random.default_rng(behavior_seed)
    )
    rng = np.random.default_rng(signal_seed)
    stim_ids = stimulus_ids(config.n_stimuli)
    # per-participant response gain; drawn first so noise settings do not move it
    gain = max(0.0, 1.0 + config.amplitude_jitter * rng.standard_normal())

    rate = config.sampling_rate_hz
    n_ch = len(config.channel_labels)
    samples = config.noise_std_uv * rng.standard_normal((n_ch, n_times))
    if config.pink_noise_std_uv > 0:
        samples += config.pink_noise_std_uv * pink_noise(n_ch, n_times, config.pink_noise_exponent, rng)

    n_k = int(round(KERNEL_END_MS * rate / 1000.0))
    t_k = np.arange(n_k) * 1000.0 / rate
    templates = {
        lvl: gain * np.stack([erp_kernel(lvl, ch, t_k, config.p3_amplitude_per_level,
                                         config.fz_amplitude_uv)
                              for ch in config.channel_labels])
        for lvl in range(config.blocks + 1)
    }
    group = gain * np.stack([group_kernel(ch, t_k, config.group_effect_amplitude_uv)
                             for ch in config.channel_labels])
    tertile_weight = (0.0, 0.5, 1.0)

    # blink-like artifacts, frontal-weighted
    blink_w = np.array([spatial_weight(ch, "Fz", 1.2) for ch in config.channel_labels])
    blink_w = np.maximum(blink_w, 0.1)
    has_artifact = rng.random(ev_idx.size) < config.artifact_rate
    art_offset = rng.uniform(0.0, KERNEL_END_MS, ev_idx.size)
    art_sign = rng.choice([-1.0, 1.0], ev_idx.size)

    for i, (start, s) in enumerate(zip(ev_idx, ev_stim)):
        level = int(ratings[s])
        stop = min(start + n_k, n_times)
        wave = templates[level]
        if is_carrier and level == 0:
            wave = wave + tertile_weight[latent_tertile_idx[s]] * group
        samples[:, start:stop] += wave[:, : stop - start]
        if has_artifact[i]:
            half = int(round(150.0 * rate / 1000.0))
            centre = start + int(round(art_offset[i] * rate / 1000.0))
            lo, hi = max(centre - half, 0), min(centre + half, n_times)
            tt = (np.arange(lo, hi) - centre) * 1000.0 / rate
            shape = np.exp(-0.5 * (tt / 50.0) ** 2)
            samples[:, lo:hi] += art_sign[i] * config.artifact_amplitude_uv * blink_w[:, None] * shape

    events = [Event(int(i), stim_ids[s], k) for k, (i, s) in enumerate(zip(ev_idx, ev_stim))]
    rec = ContinuousRecording(pid, config.channel_labels, rate, samples, events)
    errors = validate_recording(rec)
    if errors:
        raise InvariantError(f"simulated recording invalid: {errors}")
    rating_objs = [ExplicitRating(pid, stim_ids[s], int(r)) for s, r in enumerate(ratings)]
    return rec, rating_objs, picks


def _cohort_truth(config: SimulationConfig):
    seeds = np.random.SeedSequence(config.rng_seed).spawn(config.n_participants + 1)
    rng = np.random.default_rng(seeds[0])
    pids = participant_ids(config.n_participants)
    sids = stimulus_ids(config.n_stimuli)
    latent = rng.standard_normal(config.n_stimuli)
    order = [sids[i] for i in np.argsort(-latent, kind="stable")]
    tertiles = assign_tertiles(order)
    n_carriers = int(round(config.group_effect_carrier_fraction * config.n_participants))
    carrier_idx = set(rng.choice(config.n_participants, size=n_carriers, replace=False).tolist())
    carriers = {pid: i in carrier_idx for i, pid in enumerate(pids)}
    return seeds[1:], pids, sids, latent, tertiles, carriers


def iter_cohort(config: SimulationConfig):
    """Yield ``(recording, ratings, selections)`` per participant, then nothing.

    Participants are generated one at a time from independent seeds split
    from ``config.rng_seed``, so any subset or order reproduces the same data.
    """
    seeds, pids, sids, latent, tertiles, carriers = _cohort_truth(config)
    code = {"Low": 0, "Medium": 1, "High": 2}
    tert_idx = np.array([code[tertiles[s]] for s in sids])
    for p, pid in enumerate(pids):
        rec, ratings, picks = _simulate_participant(
            config, p, pid, latent, tert_idx, carriers[pid], seeds[p]
        )
        yield rec, ratings, [sel for sel, _ in picks]


def simulate_participant(config: SimulationConfig, index: int):
    """Recording, ratings and selections of one participant of the cohort."""
    seeds, pids, sids, latent, tertiles, carriers = _cohort_truth(config)
    code = {"Low": 0, "Medium": 1, "High": 2}
    tert_idx = np.array([code[tertiles[s]] for s in sids])
    rec, ratings, picks = _simulate_participant(
        config, index, pids[index], latent, tert_idx, carriers[pids[index]], seeds[index]
    )
    return rec, ratings, [sel for sel, _ in picks]


def simulate_ratings(config: SimulationConfig):
    """Ratings and selections of the whole cohort, without any voltages.

    Identical to the ratings returned alongside the recordings.
    """
    seeds, pids, sids, latent, _, _ = _cohort_truth(config)
    ratings, selections = [], []
    for p, pid in enumerate(pids):
        behavior_seed, _ = _streams(seeds[p])
        r, _, picks = _behavior(config, p, pid, latent, np.random.default_rng(behavior_seed))
        ratings.extend(ExplicitRating(pid, sids[s], int(c)) for s, c in enumerate(r))
        selections.extend(sel for sel, _ in picks)
    return ratings, selections


def ground_truth(config: SimulationConfig, ratings=None, selections=None) -> GroundTruth:
    if ratings is None or selections is None:
        ratings, selections = simulate_ratings(config)
    _, pids, sids, latent, tertiles, carriers = _cohort_truth(config)
    return GroundTruth(
        participant_ids=tuple(pids),
        stimulus_ids=tuple(sids),
        latent_scores={s: float(v) for s, v in zip(sids, latent)},
        latent_tertiles=tertiles,
        ratings=tuple(ratings),
        selections=tuple(selections),
        carriers=carriers,
    )


def simulate_cohort(config: SimulationConfig):
    """All recordings plus the cohort's ground truth.

    Memory grows with the cohort; use :func:`iter_cohort` for large runs.
    """
    recordings, ratings, selections = [], [], []
    for rec, r, sel in iter_cohort(config):
        recordings.append(rec)
        ratings.extend(r)
        selections.extend(sel)
    return recordings, ground_truth(config, ratings, selections)
