import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from erpref._special import betainc, f_sf, t_sf_two_sided
from erpref.neurostats import (
    EXPLICIT_CONDITIONS,
    bin_edges,
    bin_means,
    bonferroni,
    condition_means,
    curves_svg,
    erp_statistics,
    grand_average,
    paired_t,
    rm_anova,
    sliding_rm_anova,
    wilcoxon_signed_rank,
    write_curves_csv,
)
from erpref.signal_model import EpochSet

from .oracles import rm_anova_ss, wilcoxon_enumerate

mpmath.mp.dps = 40
T = np.arange(-20, 90) * 10.0  # 10 ms steps, -200..890 ms


def labeled(data, labels):
    data = np.asarray(data, dtype=float)
    n = data.shape[0]
    return EpochSet(data, 100.0, ("Fz", "Pz"), ["P"] * n, [f"s{i}" for i in range(n)],
                    np.arange(n), np.zeros(n, np.uint8), np.asarray(labels, np.int8),
                    label_domain="rating")


class TestGrandAverage:
    def test_one_participant_identical_epochs(self):
        x = np.random.default_rng(0).standard_normal((2, 110))
        m = condition_means(labeled(np.stack([x, x]), [3, 3]), {"3": (3,)})
        curves, _ = grand_average([m], T, ["Fz", "Pz"])
        assert np.allclose(curves[0].voltage_uv, x[0]) and np.allclose(curves[1].voltage_uv, x[1])

    def test_constant_participants(self):
        ms = [{"a": np.full((1, 110), v)} for v in (1.0, 3.0)]
        curves, excluded = grand_average(ms, T, ["Pz"])
        assert np.all(curves[0].voltage_uv == 2.0) and curves[0].n_participants == 2
        assert excluded == {"a": 0}

    def test_missing_condition_excluded_and_counted(self):
        ms = [{"a": np.ones((1, 110)), "b": None}, {"a": np.ones((1, 110)), "b": np.zeros((1, 110))}]
        curves, excluded = grand_average(ms, T, ["Pz"])
        assert excluded == {"a": 0, "b": 1}
        assert [c.n_participants for c in curves] == [2, 1]

    def test_two_stage_differs_from_pooled(self):
        # participant A: 1 epoch at 0; participant B: 3 epochs at 4
        a = condition_means(labeled(np.zeros((1, 2, 110)), [0]), {"x": (0,)})
        b = condition_means(labeled(np.full((3, 2, 110), 4.0), [0, 0, 0]), {"x": (0,)})
        curves, _ = grand_average([a, b], T, ["Fz", "Pz"])
        assert np.all(curves[0].voltage_uv == 2.0)  # pooled would give 3.0

    @given(st.permutations(list(range(6))))
    def test_epoch_order_invariant(self, perm):
        rng = np.random.default_rng(1)
        data = rng.standard_normal((6, 2, 110))
        labels = np.array([0, 1, 2, 3, 1, 0])
        base = condition_means(labeled(data, labels), EXPLICIT_CONDITIONS)
        other = condition_means(labeled(data[perm], labels[perm]), EXPLICIT_CONDITIONS)
        for k in base:
            assert np.allclose(base[k], other[k], atol=1e-12)

    def test_merged_explicit_levels(self):
        data = np.stack([np.full((2, 110), v) for v in (0.0, 1.0, 2.0, 3.0)])
        m = condition_means(labeled(data, [0, 1, 2, 3]), EXPLICIT_CONDITIONS)
        assert np.all(m["1&2"] == 1.5) and np.all(m["3"] == 3.0)

    def test_empty_condition_is_none(self):
        m = condition_means(labeled(np.zeros((2, 2, 110)), [0, 0]), EXPLICIT_CONDITIONS)
        assert m["3"] is None


def test_bins():
    edges = bin_edges()
    assert edges[0] == 100 and edges[-1] == 500 and edges.size == 17
    t = np.arange(-200, 900, 0.5)
    means, centers = bin_means(t, t)
    assert means.shape == (16,) and centers[0] == 112.5
    assert means[0] == pytest.approx(np.mean(np.arange(100, 125, 0.5)))
    with pytest.raises(ValueError):
        bin_edges(30.0)


class TestAnova:
    def test_reference_dfs(self):
        rng = np.random.default_rng(0)
        assert rm_anova(rng.standard_normal((31, 3))).df == (2, 60)
        assert rm_anova(rng.standard_normal((25, 3))).df == (2, 48)

    def test_identical_conditions(self):
        table = np.repeat(np.random.default_rng(1).standard_normal((6, 1)), 3, axis=1)
        res = rm_anova(table)
        assert abs(res.F) <= 1e-12 and res.p == 1.0

    @given(st.integers(0, 2**31), st.integers(2, 12), st.integers(2, 5))
    def test_ss_oracle(self, seed, n, k):
        table = np.random.default_rng(seed).normal(0, 3, (n, k))
        F_ref, df_ref = rm_anova_ss(table)
        res = rm_anova(table)
        assert res.df == df_ref
        assert res.F == pytest.approx(F_ref, rel=1e-10, abs=1e-10)

    @given(st.integers(0, 2**31))
    def test_subject_constant_invariance(self, seed):
        rng = np.random.default_rng(seed)
        table = rng.standard_normal((8, 3))
        shifted = table + rng.normal(0, 50, (8, 1))
        assert rm_anova(shifted).F == pytest.approx(rm_anova(table).F, rel=1e-9)

    def test_p_matches_f_distribution(self):
        table = np.random.default_rng(3).standard_normal((10, 3)) + [0, 0.5, 1.0]
        res = rm_anova(table)
        assert res.p == pytest.approx(stats.f.sf(res.F, *res.df), abs=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            rm_anova(np.zeros((5, 1)))
        with pytest.raises(ValueError):
            rm_anova(np.zeros((1, 3)))
        with pytest.raises(ValueError):
            rm_anova([[1.0, np.nan], [2.0, 3.0]])

    def test_sliding(self):
        rng = np.random.default_rng(4)
        bins = rng.standard_normal((31, 3, 16))
        res = sliding_rm_anova(bins, np.arange(16) * 25 + 112.5, "Pz", ("a", "b", "c"))
        assert res.df == (2, 60) and res.F.shape == (16,)
        assert np.all(res.F >= 0) and np.all(res.p_adjusted >= res.p)
        assert np.allclose(res.p_adjusted, np.minimum(1, 16 * res.p))
        assert len(res.to_dict()["bins"]) == 16


class TestSpecial:
    @pytest.mark.parametrize("a,b,x", [
        (0.5, 0.5, 0.3), (15.0, 0.5, 0.9), (15.0, 0.5, 0.2), (2.5, 1.0, 0.99),
        (30.0, 1.0, 0.5), (100.0, 0.5, 0.999), (1.0, 30.0, 0.01), (12.0, 7.5, 0.62),
    ])
    def test_betainc_vs_mpmath(self, a, b, x):
        ref = float(mpmath.betainc(a, b, 0, x, regularized=True))
        assert betainc(a, b, x) == pytest.approx(ref, abs=1e-10, rel=1e-10)

    @given(st.floats(0.05, 40.0), st.integers(1, 60))
    def test_t_tail_vs_mpmath(self, t, df):
        x = df / (df + t * t)
        ref = float(mpmath.betainc(df / 2, 0.5, 0, x, regularized=True))
        assert abs(t_sf_two_sided(t, df) - ref) <= 1e-10

    @given(st.floats(0.01, 50.0), st.integers(1, 5), st.integers(2, 80))
    def test_f_tail_vs_mpmath(self, f, d1, d2):
        x = d2 / (d2 + d1 * f)
        ref = float(mpmath.betainc(d2 / 2, d1 / 2, 0, x, regularized=True))
        assert abs(f_sf(f, d1, d2) - ref) <= 1e-10


class TestPairedT:
    def test_identical(self):
        res = paired_t([1, 2, 3], [1, 2, 3])
        assert res.t == 0 and res.p == 1.0

    def test_df_31(self):
        rng = np.random.default_rng(5)
        assert paired_t(rng.standard_normal(31), rng.standard_normal(31)).df == 30

    def test_five_pairs_high_precision(self):
        a = [2.1, 3.4, 1.9, 5.0, 4.2]
        b = [1.8, 2.9, 2.0, 3.7, 3.1]
        d = [mpmath.mpf(str(x)) - mpmath.mpf(str(y)) for x, y in zip(a, b)]
        mean = sum(d) / 5
        sd = mpmath.sqrt(sum((x - mean) ** 2 for x in d) / 4)
        t_ref = mean / (sd / mpmath.sqrt(5))
        p_ref = mpmath.betainc(2, 0.5, 0, 4 / (4 + t_ref**2), regularized=True)
        res = paired_t(a, b)
        assert res.t == pytest.approx(float(t_ref), rel=1e-12)
        assert abs(res.p - float(p_ref)) <= 1e-10
        ref = stats.ttest_rel(a, b)
        assert res.p == pytest.approx(ref.pvalue, abs=1e-10)

    @given(st.integers(0, 2**31))
    def test_swap_flips_sign(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((2, 12))
        x, y = paired_t(a, b), paired_t(b, a)
        assert x.t == pytest.approx(-y.t) and x.p == pytest.approx(y.p)

    def test_zero_variance_nonzero_mean(self):
        res = paired_t([2, 3, 4], [1, 2, 3])
        assert math.isinf(res.t) and 0 < res.p < 1e-300

    def test_errors(self):
        with pytest.raises(ValueError):
            paired_t([1], [2])
        with pytest.raises(ValueError):
            paired_t([1, 2], [1, 2, 3])


class TestBonferroni:
    def test_examples(self):
        assert bonferroni([0.01]) == [0.01]
        assert bonferroni([0.04, 0.2]) == pytest.approx([0.08, 0.4])
        assert bonferroni([0.9, 0.9, 0.9]) == [1.0, 1.0, 1.0]

    @given(st.lists(st.floats(1e-6, 1.0), min_size=1, max_size=20))
    def test_monotone_and_capped(self, p):
        adj = bonferroni(p)
        order = np.argsort(p)
        assert np.all(np.diff(np.asarray(adj)[order]) >= -1e-15)
        assert all(q >= x and q <= 1.0 for q, x in zip(adj, p))
        capped = [q for q in adj if q == 1.0]
        assert bonferroni(capped) == capped if capped else True

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            bonferroni([0.0])
        with pytest.raises(ValueError):
            bonferroni([1.2])


class TestWilcoxon:
    def test_symmetric(self):
        res = wilcoxon_signed_rank([1, -1, 2, -2, 3, -3])
        assert res.W == 10.5 and res.p == 1.0

    def test_all_positive_six(self):
        res = wilcoxon_signed_rank([0.3, 1.2, 2.2, 0.7, 5.0, 0.1])
        assert res.W == 0 and res.p == pytest.approx(2 / 2**6) and res.method == "exact"

    def test_zeros_dropped(self):
        res = wilcoxon_signed_rank([0, 0, 1, 2, 3, 4, -5])
        assert res.n == 5

    @given(st.lists(st.integers(-6, 6), min_size=5, max_size=14))
    def test_exact_vs_enumeration(self, deltas):
        if sum(1 for d in deltas if d != 0) < 5:
            return
        W, p = wilcoxon_enumerate(deltas)
        res = wilcoxon_signed_rank(deltas, method="exact")
        assert res.W == W and res.p == pytest.approx(p, abs=1e-12)

    @pytest.mark.parametrize("n", range(20, 26))
    def test_exact_vs_approx(self, n):
        rng = np.random.default_rng(n)
        for _ in range(5):
            d = rng.normal(0.3, 1.0, n)
            exact = wilcoxon_signed_rank(d, method="exact").p
            approx = wilcoxon_signed_rank(d, method="approx").p
            assert abs(exact - approx) <= 0.01

    def test_auto_switches_above_25(self):
        d = np.random.default_rng(26).normal(0.2, 1, 26)
        res = wilcoxon_signed_rank(d)
        assert res.method == "approx"
        ref = stats.wilcoxon(d, correction=True, method="approx")
        assert res.p == pytest.approx(ref.pvalue, abs=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError, match="zero"):
            wilcoxon_signed_rank([0, 0, 0, 0, 0])
        with pytest.raises(ValueError):
            wilcoxon_signed_rank([1, 2, 3])


def _participants(n, effect, seed=0):
    rng = np.random.default_rng(seed)
    bump = np.exp(-0.5 * ((T - 400) / 60) ** 2)
    out = []
    for _ in range(n):
        out.append({c: rng.normal(0, 0.5, (2, T.size)) + effect * k * bump
                    for k, c in enumerate(["0", "1&2", "3"])})
    return out


def test_erp_statistics_detects_effect():
    res = erp_statistics(_participants(12, 2.0), T, ["Fz", "Pz"], ["0", "1&2", "3"])
    assert res.n_complete == 12
    pz = res.anova["Pz"]
    assert pz.df == (2, 22)
    assert res.posthoc["Pz"]["bin_center_ms"] in (387.5, 412.5)
    assert all(t["p_bonferroni"] < 0.05 for t in res.posthoc["Pz"]["tests"])
    assert len(res.curves) == 6


def test_erp_statistics_listwise():
    ps = _participants(5, 0.0)
    ps[0]["3"] = None
    res = erp_statistics(ps, T, ["Fz", "Pz"], ["0", "1&2", "3"])
    assert res.n_complete == 4 and res.excluded["3"] == 1
    assert res.anova["Pz"].df == (2, 6)


def test_outputs_are_deterministic(tmp_path):
    res = erp_statistics(_participants(4, 1.0), T, ["Fz", "Pz"], ["0", "1&2", "3"])
    a, b = curves_svg(res.curves, "Pz", "t"), curves_svg(res.curves, "Pz", "t")
    assert a == b and a.startswith(b"<?xml")
    write_curves_csv(tmp_path / "c.csv", res.curves)
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "channel,condition,t_ms,uv" and len(lines) == 1 + 6 * T.size


@pytest.mark.slow
def test_simulated_cohort_pz_gap():
    from erpref.pipeline import simulated_products
    from erpref.signal_model import CHANNEL_LABELS, epoch_time_axis
    from erpref.synthsession import SimulationConfig, erp_kernel

    config = SimulationConfig()
    means = [p.explicit_means for p in simulated_products(config, channels=("Pz",))]
    t = epoch_time_axis(config.sampling_rate_hz)
    curves, _ = grand_average(means, t, ["Pz"], ["0", "3"])
    win = (t >= 400) & (t < 500)
    gap = curves[1].voltage_uv[win].mean() - curves[0].voltage_uv[win].mean()

    def diff(ch):
        return erp_kernel(3, ch, t[win]).mean() - erp_kernel(0, ch, t[win]).mean()

    # the recording is re-referenced to the channel mean before averaging
    injected = diff("Pz") - np.mean([diff(ch) for ch in CHANNEL_LABELS])
    assert gap > 0
    assert abs(gap - injected) <= 0.2 * injected
