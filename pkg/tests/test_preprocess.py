import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import signal

from erpref.preprocess import (
    FilterSpec,
    RejectionPolicy,
    bandpass,
    baseline_correct,
    choose_threshold,
    common_average_reference,
    extract_epochs,
    preprocess_recording,
    reject_artifacts,
)
from erpref.signal_model import (
    REJECTED_ARTIFACT,
    REJECTED_EDGE,
    ContinuousRecording,
    EpochSet,
    Event,
    epoch_length,
)

RATE = 2000.0


def rec_of(samples, rate=RATE, events=()):
    samples = np.atleast_2d(samples)
    labels = [f"c{i}" for i in range(samples.shape[0])]
    return ContinuousRecording("P", labels, rate, samples,
                               [Event(int(i), f"S{k}", k) for k, i in enumerate(events)])


def epochs_of(data, rate=RATE):
    data = np.asarray(data, dtype=float)
    n, n_ch, _ = data.shape
    return EpochSet(data, rate, [f"c{i}" for i in range(n_ch)], ["P"] * n,
                    [f"S{i}" for i in range(n)], np.arange(n), np.zeros(n, np.uint8),
                    np.full(n, -128, np.int8))


class TestCommonAverage:
    def test_identical_channels(self):
        out = common_average_reference(rec_of(np.full((4, 50), 7.5)))
        assert np.all(out.samples == 0)

    def test_already_zero_mean(self):
        x = np.array([[1.0], [-1.0]])
        assert np.array_equal(common_average_reference(rec_of(x)).samples, x)

    def test_random_column_means(self):
        x = np.random.default_rng(0).normal(0, 50, (32, 1000))
        out = common_average_reference(rec_of(x)).samples
        assert np.max(np.abs(out.mean(axis=0))) < 1e-9
        assert np.allclose(out, x - x.mean(axis=0))

    def test_single_channel(self):
        with pytest.raises(ValueError):
            common_average_reference(rec_of(np.zeros((1, 10))))


class TestBandpass:
    def _rms_ratio(self, freq, spec=FilterSpec(), seconds=20):
        t = np.arange(int(seconds * RATE)) / RATE
        x = np.sin(2 * np.pi * freq * t)
        y = bandpass(rec_of(np.stack([x, x])), spec).samples[0]
        trim = slice(int(5 * RATE), -int(5 * RATE))
        return np.sqrt(np.mean(y[trim] ** 2) / np.mean(x[trim] ** 2))

    def test_design_is_4th_order_butterworth(self):
        # closed-form magnitude of the bilinear-transformed Butterworth band-pass
        f = np.array([0.05, 0.2, 1.0, 10.0, 35.0, 50.0, 200.0])
        w = np.tan(np.pi * f / RATE)
        w1, w2 = np.tan(np.pi * 0.2 / RATE), np.tan(np.pi * 35.0 / RATE)
        x = (w**2 - w1 * w2) / ((w2 - w1) * w)
        expected = 1.0 / np.sqrt(1.0 + x ** (2 * 4))
        z, p, k = signal.sos2zpk(FilterSpec().design(RATE))
        _, h = signal.freqz_zpk(z, p, k, worN=f, fs=RATE)
        assert np.allclose(np.abs(h), expected, rtol=1e-8, atol=1e-12)
        assert np.allclose(FilterSpec().magnitude(f, RATE), expected**2, rtol=1e-8, atol=1e-12)

    def test_50hz_attenuated(self):
        ratio = self._rms_ratio(50.0)
        expected = FilterSpec().magnitude([50.0], RATE)[0]
        assert ratio <= 0.1
        assert ratio == pytest.approx(expected, rel=0.02)

    def test_10hz_passes(self):
        ratio = self._rms_ratio(10.0)
        assert abs(ratio - 1) < 0.05
        assert ratio == pytest.approx(FilterSpec().magnitude([10.0], RATE)[0], rel=0.01)

    def test_dc_removed(self):
        y = bandpass(rec_of(np.full((2, int(20 * RATE)), 100.0))).samples
        assert abs(y[:, int(5 * RATE):-int(5 * RATE)].mean()) < 1.0

    def test_zero_phase_no_delay(self):
        # a symmetric in-band pulse stays centred after forward-backward filtering
        t = np.arange(8000)
        x = np.exp(-0.5 * ((t - 4000) / 40.0) ** 2)
        y = bandpass(rec_of(np.stack([x, -x]))).samples[0]
        assert abs(int(np.argmax(y)) - 4000) <= 1

    def test_causal_option(self):
        t = np.arange(8000)
        x = np.exp(-0.5 * ((t - 4000) / 40.0) ** 2)
        y = bandpass(rec_of(np.stack([x, -x])), FilterSpec(zero_phase=False)).samples[0]
        assert int(np.argmax(y)) > 4005

    def test_invalid_specs(self):
        with pytest.raises(ValueError, match="Nyquist"):
            bandpass(rec_of(np.zeros((2, 100)), rate=60.0))
        with pytest.raises(ValueError):
            FilterSpec(low_hz=40, high_hz=35).design(RATE)
        with pytest.raises(ValueError):
            FilterSpec(order=0).design(RATE)

    def test_non_finite(self):
        x = np.zeros((2, 1000))
        x[1, 5] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            bandpass(rec_of(x))

    @given(st.permutations(list(range(5))))
    def test_commutes_with_channel_permutation(self, perm):
        x = np.random.default_rng(1).standard_normal((5, 3000))
        y = bandpass(rec_of(x)).samples
        y_perm = bandpass(rec_of(x[perm])).samples
        assert np.allclose(y_perm, y[perm], atol=1e-12)


class TestExtract:
    def test_event_at_400(self):
        x = np.arange(5000, dtype=float)[None, :].repeat(2, 0)
        es = extract_epochs(rec_of(x, events=[400]))
        assert es.data.shape == (1, 2, 2200)
        assert es.data[0, 0, 0] == 0 and es.data[0, 0, -1] == 2199
        assert not es.rejected[0]

    def test_copies(self):
        x = np.random.default_rng(0).standard_normal((2, 5000))
        es = extract_epochs(rec_of(x, events=[1000]))
        assert not np.shares_memory(es.data, x)

    def test_edges_flagged(self):
        es = extract_epochs(rec_of(np.ones((2, 5000)), events=[100, 1000, 4000]))
        assert list(es.rejected) == [REJECTED_EDGE, 0, REJECTED_EDGE]
        assert es[0].reject_reason == "edge"
        assert np.all(es.data[0, :, :300] == 0) and np.all(es.data[0, :, 300:] == 1)

    def test_1440_events(self):
        events = 1000 + 1000 * np.arange(1440)
        n_t = int(events[-1] + 2000)
        es = extract_epochs(rec_of(np.zeros((2, n_t)), events=events))
        assert len(es) == 1440 and not es.rejected.any()

    @given(st.lists(st.integers(0, 2999), min_size=0, max_size=12, unique=True))
    def test_count_preserved(self, idx):
        es = extract_epochs(rec_of(np.zeros((2, 3000)), events=sorted(idx)))
        assert len(es) == len(idx)
        assert int(np.sum(es.rejected == REJECTED_EDGE)) == sum(
            1 for i in idx if i < 400 or i + 1800 > 3000)


class TestBaseline:
    def test_constant(self):
        es = baseline_correct(epochs_of(np.full((2, 3, 2200), 5.0)))
        assert np.all(es.data == 0)

    def test_step(self):
        d = np.full((1, 1, 2200), 7.0)
        d[..., :400] = 2.0
        es = baseline_correct(epochs_of(d))
        assert np.allclose(es.data[..., 400:], 5.0)
        assert np.allclose(es.data[..., :400], 0.0)

    def test_idempotent_and_zero_mean(self):
        d = np.random.default_rng(2).normal(3, 10, (4, 3, 2200))
        once = baseline_correct(epochs_of(d))
        twice = baseline_correct(once)
        assert np.max(np.abs(once.data[..., :400].mean(axis=-1))) < 1e-9
        assert np.max(np.abs(twice.data - once.data)) < 1e-12


class TestRejection:
    def test_fixed_spike(self):
        d = np.zeros((3, 1, 2200))
        d[1, 0, 700] = 500.0
        es, thr = reject_artifacts(epochs_of(d), RejectionPolicy.fixed(100.0))
        assert list(es.rejected) == [0, REJECTED_ARTIFACT, 0] and thr == 100.0

    def test_zeros_never_rejected(self):
        es, _ = reject_artifacts(epochs_of(np.zeros((5, 2, 2200))), RejectionPolicy.fixed(0.5))
        assert not es.rejected.any()

    def test_target_fraction_quantile_oracle(self):
        rng = np.random.default_rng(9)
        d = rng.normal(0, 10, (1000, 1, 2200))
        es, thr = reject_artifacts(epochs_of(d), RejectionPolicy.target(0.122))
        peaks = np.sort(np.abs(d).max(axis=(1, 2)))
        # order-statistic cut: keep the 878 smallest peaks
        assert abs(int(es.rejected.sum()) - 122) <= 1
        assert peaks[876] <= thr <= peaks[878]

    def test_choose_threshold_ties(self):
        # 4 identical peaks: either 0 or 4 rejections possible
        assert choose_threshold([5, 5, 5, 5], 0.3) == 5.0
        assert choose_threshold([1, 2, 3, 4], 0.25) == 3.0

    def test_edge_epochs_stay_out_of_threshold(self):
        d = np.zeros((10, 1, 2200))
        d[:, 0, 0] = np.arange(1, 11)
        es = epochs_of(d).replace(rejected=np.array([REJECTED_EDGE] + [0] * 9, np.uint8))
        out, thr = reject_artifacts(es, RejectionPolicy.target(0.2))
        assert out.rejected[0] == REJECTED_EDGE
        assert int(np.sum(out.rejected == REJECTED_ARTIFACT)) == 2 and thr == 8.0

    def test_empty(self):
        with pytest.raises(ValueError):
            reject_artifacts(EpochSet.empty(), RejectionPolicy())

    def test_policy_validation(self):
        with pytest.raises(ValueError):
            RejectionPolicy.fixed(0)
        with pytest.raises(ValueError):
            RejectionPolicy.target(1.0)
        with pytest.raises(ValueError):
            RejectionPolicy("other")


def test_full_chain_and_rerun():
    rng = np.random.default_rng(11)
    n_t = 30000
    x = rng.normal(0, 5, (4, n_t))
    x[2, 12000:12100] += 400
    events = list(range(1000, 28000, 1000))
    epochs, summary = preprocess_recording(rec_of(x, events=events))
    assert summary.n_events == len(events) == len(epochs)
    assert summary.n_edge + summary.n_artifact + summary.n_kept == summary.n_events
    assert abs(summary.rejection_fraction - 0.122) <= 1 / (len(events) - summary.n_edge)
    assert epochs.data.shape[2] == epoch_length(RATE)
    # non-filter stages are idempotent on their own output
    again = baseline_correct(epochs)
    assert np.max(np.abs(again.data - epochs.data)) < 1e-12
    re_rej, _ = reject_artifacts(epochs, RejectionPolicy.fixed(summary.threshold_uv))
    assert np.array_equal(re_rej.rejected, epochs.rejected)
