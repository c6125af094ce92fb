"""Grand-average ERPs and the statistics run on them.

Curves are two-stage means: each participant's epochs are averaged per
condition first, then those participant means are averaged. Inference works
on per-participant bin means (25 ms bins over 100-500 ms by default).
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from ._special import f_sf, norm_sf, t_sf_two_sided
from .signal_model import EpochSet

# Condition name -> label values, for rating-labeled and tertile-labeled sets.
EXPLICIT_CONDITIONS = {"0": (0,), "1&2": (1, 2), "3": (3,)}
GROUP_CONDITIONS = {"Low": (0,), "Medium": (1,), "High": (2,)}

BIN_WIDTH_MS = 25.0
BIN_RANGE_MS = (100.0, 500.0)

# smallest positive p reported when a statistic is infinite
MIN_P = np.finfo(np.float64).tiny


@dataclass(frozen=True)
class ErpCurve:
    channel: str
    condition: str
    time_ms: np.ndarray
    voltage_uv: np.ndarray
    n_participants: int


def condition_means(epochs: EpochSet, conditions: Mapping[str, Sequence[int]],
                    channels: Sequence[str] | None = None) -> dict:
    """Per-condition mean over the non-rejected epochs of one participant.

    Returns ``{condition: (n_channels, n_samples) array or None}``; None marks
    a condition without epochs.
    """
    if channels is None:
        ch_idx = np.arange(len(epochs.channel_labels))
    else:
        try:
            ch_idx = np.array([epochs.channel_labels.index(c) for c in channels])
        except ValueError as exc:
            raise KeyError(f"channel not in epoch set: {exc}") from None
    out = {}
    for name, values in conditions.items():
        sel = np.flatnonzero(epochs.kept & np.isin(epochs.labels, list(values)))
        if sel.size == 0:
            out[name] = None
            continue
        # accumulate to avoid materializing the subset
        acc = np.zeros((ch_idx.size, epochs.data.shape[2]))
        for i in sel:
            acc += epochs.data[i][ch_idx]
        out[name] = acc / sel.size
    return out


def grand_average(participant_means: Sequence[Mapping[str, np.ndarray | None]],
                  time_ms, channels: Sequence[str], conditions: Sequence[str] | None = None):
    """Average per-participant condition means across participants.

    Participants lacking a condition are left out of that condition's
    average. Returns ``(curves, excluded)`` where ``excluded`` counts the
    left-out participants per condition.
    """
    if not participant_means:
        raise ValueError("no participants to average")
    if conditions is None:
        conditions = list(participant_means[0])
    time_ms = np.asarray(time_ms, dtype=np.float64)
    curves, excluded = [], {}
    for cond in conditions:
        present = [m[cond] for m in participant_means if m.get(cond) is not None]
        excluded[cond] = len(participant_means) - len(present)
        if not present:
            continue
        mean = np.mean(np.stack(present), axis=0)
        for c, ch in enumerate(channels):
            curves.append(ErpCurve(ch, cond, time_ms, mean[c], len(present)))
    return curves, excluded


def bin_edges(width_ms=BIN_WIDTH_MS, range_ms=BIN_RANGE_MS) -> np.ndarray:
    lo, hi = range_ms
    n = int(round((hi - lo) / width_ms))
    if n < 1 or not math.isclose(lo + n * width_ms, hi):
        raise ValueError(f"range {range_ms} is not a whole number of {width_ms} ms bins")
    return lo + width_ms * np.arange(n + 1)


def bin_means(curves, time_ms, width_ms=BIN_WIDTH_MS, range_ms=BIN_RANGE_MS):
    """Mean of ``curves`` (..., n_samples) within contiguous ``[lo, hi)`` bins.

    Returns ``(means (..., n_bins), bin_centers_ms)``.
    """
    curves = np.asarray(curves, dtype=np.float64)
    time_ms = np.asarray(time_ms, dtype=np.float64)
    edges = bin_edges(width_ms, range_ms)
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (time_ms >= lo - 1e-9) & (time_ms < hi - 1e-9)
        if not sel.any():
            raise ValueError(f"no samples in bin [{lo}, {hi}) ms")
        out.append(curves[..., sel].mean(axis=-1))
    return np.stack(out, axis=-1), 0.5 * (edges[:-1] + edges[1:])


@dataclass(frozen=True)
class AnovaResult:
    F: float
    df: tuple[int, int]
    p: float


def rm_anova(table) -> AnovaResult:
    """One-way repeated-measures ANOVA on an (n_participants, k_conditions) table."""
    y = np.asarray(table, dtype=np.float64)
    if y.ndim != 2:
        raise ValueError("expected a participants x conditions table")
    n, k = y.shape
    if k < 2:
        raise ValueError("need at least 2 conditions")
    if n < 2:
        raise ValueError("need at least 2 participants")
    if not np.all(np.isfinite(y)):
        raise ValueError("table has missing or non-finite cells")
    df1, df2 = k - 1, (k - 1) * (n - 1)
    grand = y.mean()
    ss_cond = n * np.sum((y.mean(axis=0) - grand) ** 2)
    resid = y - y.mean(axis=1, keepdims=True) - y.mean(axis=0, keepdims=True) + grand
    ss_err = np.sum(resid**2)
    scale = np.sum((y - grand) ** 2)
    tol = 1e-24 * max(scale, 1e-300)
    if ss_cond <= tol:
        return AnovaResult(0.0, (df1, df2), 1.0)
    if ss_err <= tol:
        return AnovaResult(math.inf, (df1, df2), float(MIN_P))
    F = (ss_cond / df1) / (ss_err / df2)
    return AnovaResult(float(F), (df1, df2), float(max(f_sf(F, df1, df2), MIN_P)))


@dataclass(frozen=True)
class SlidingAnovaResult:
    channel: str
    bin_centers_ms: np.ndarray
    F: np.ndarray
    df: tuple[int, int]
    p: np.ndarray
    p_adjusted: np.ndarray
    conditions: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "channel": self.channel,
            "conditions": list(self.conditions),
            "df": list(self.df),
            "bins": [
                {"center_ms": float(c), "F": float(f), "p": float(p), "p_bonferroni": float(q)}
                for c, f, p, q in zip(self.bin_centers_ms, self.F, self.p, self.p_adjusted)
            ],
        }


def sliding_rm_anova(bins, bin_centers_ms, channel="", conditions=()) -> SlidingAnovaResult:
    """RM-ANOVA per bin of an (n_participants, k_conditions, n_bins) array.

    p values are Bonferroni-adjusted over the bins.
    """
    bins = np.asarray(bins, dtype=np.float64)
    if bins.ndim != 3:
        raise ValueError("expected (participants, conditions, bins)")
    results = [rm_anova(bins[:, :, j]) for j in range(bins.shape[2])]
    p = np.array([r.p for r in results])
    return SlidingAnovaResult(
        channel=channel,
        bin_centers_ms=np.asarray(bin_centers_ms, dtype=np.float64),
        F=np.array([r.F for r in results]),
        df=results[0].df,
        p=p,
        p_adjusted=np.asarray(bonferroni(p)),
        conditions=tuple(conditions),
    )


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p: float


def paired_t(a, b) -> TTestResult:
    """Paired two-sided t-test of ``a - b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    n = a.size
    if n < 2:
        raise ValueError("need at least 2 pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    df = n - 1
    if sd == 0:
        if mean == 0:
            return TTestResult(0.0, df, 1.0)
        return TTestResult(math.copysign(math.inf, mean), df, float(MIN_P))
    t = mean / (sd / math.sqrt(n))
    return TTestResult(float(t), df, float(max(t_sf_two_sided(t, df), MIN_P)))


def bonferroni(p_values) -> list[float]:
    p = np.asarray(p_values, dtype=np.float64)
    if np.any(~(p > 0)) or np.any(p > 1):
        raise ValueError("p values must lie in (0, 1]")
    return np.minimum(1.0, p.size * p).tolist()


@dataclass(frozen=True)
class WilcoxonResult:
    W: float
    p: float
    n: int
    method: str
    w_plus: float = field(default=0.0)


def _exact_lower_tail(doubled_ranks: np.ndarray, w2: int) -> float:
    # Null distribution of the doubled positive-rank sum: each rank enters
    # with probability 1/2. Counts are exact integers (Python ints).
    total = int(doubled_ranks.sum())
    counts = [0] * (total + 1)
    counts[0] = 1
    reach = 0
    for r in doubled_ranks.tolist():
        for s in range(reach, -1, -1):
            if counts[s]:
                counts[s + r] += counts[s]
        reach += r
    return sum(counts[: w2 + 1]) / 2 ** len(doubled_ranks)


def wilcoxon_signed_rank(deltas, method: str = "auto") -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test of paired differences.

    Zeros are dropped and tied absolute values get midranks. ``method`` is
    ``"exact"`` (enumerated null, default for n <= 25), ``"approx"`` (normal
    with tie and continuity correction) or ``"auto"``.
    """
    d = np.asarray(deltas, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise ValueError("deltas must be finite")
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise ValueError("all deltas are zero")
    if n < 5:
        raise ValueError(f"need at least 5 non-zero deltas, got {n}")
    if method == "auto":
        method = "exact" if n <= 25 else "approx"
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    W = min(w_plus, w_minus)
    if method == "exact":
        doubled = np.rint(2 * ranks).astype(np.int64)
        p = 2.0 * _exact_lower_tail(doubled, int(round(2 * W)))
    elif method == "approx":
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
        z = (W - mean + 0.5) / math.sqrt(var)
        p = 2.0 * norm_sf(-min(z, 0.0))
    else:
        raise ValueError(f"unknown method {method!r}")
    return WilcoxonResult(W, min(1.0, p), n, method, w_plus)


@dataclass(frozen=True)
class ErpStatistics:
    """Curves plus per-channel sliding ANOVA and post-hoc tests at the peak bin."""

    curves: list
    excluded: dict
    n_complete: int
    anova: dict
    posthoc: dict

    def to_dict(self) -> dict:
        return {
            "excluded_participants": dict(self.excluded),
            "n_complete_participants": self.n_complete,
            "anova": {ch: r.to_dict() for ch, r in self.anova.items()},
            "posthoc": self.posthoc,
        }


def erp_statistics(participant_means, time_ms, channels, conditions,
                   width_ms=BIN_WIDTH_MS, range_ms=BIN_RANGE_MS) -> ErpStatistics:
    """Grand averages and inference for one task.

    ``participant_means`` holds one :func:`condition_means` result per
    participant, restricted to ``channels``. Inference uses participants
    with every condition present (listwise). At the bin with the largest F
    per channel, all condition pairs get a paired t-test, Bonferroni-adjusted
    over the pairs.
    """
    conditions = list(conditions)
    curves, excluded = grand_average(participant_means, time_ms, channels, conditions)
    complete = [m for m in participant_means if all(m.get(c) is not None for c in conditions)]
    anova, posthoc = {}, {}
    if len(complete) < 2 or len(conditions) < 2:
        return ErpStatistics(curves, excluded, len(complete), anova, posthoc)
    # (participants, conditions, channels, samples) -> bins
    stack = np.stack([np.stack([m[c] for c in conditions]) for m in complete])
    binned, centers = bin_means(stack, time_ms, width_ms, range_ms)
    pairs = [(a, b) for i, a in enumerate(conditions) for b in conditions[i + 1:]]
    for c, ch in enumerate(channels):
        res = sliding_rm_anova(binned[:, :, c, :], centers, ch, conditions)
        anova[ch] = res
        finite = np.where(np.isfinite(res.F), res.F, np.finfo(float).max)
        j = int(np.argmax(finite))
        tests = [paired_t(binned[:, conditions.index(a), c, j], binned[:, conditions.index(b), c, j])
                 for a, b in pairs]
        adj = bonferroni([t.p for t in tests])
        posthoc[ch] = {
            "bin_center_ms": float(centers[j]),
            "tests": [
                {"a": a, "b": b, "t": t.t, "df": t.df, "p": t.p, "p_bonferroni": q}
                for (a, b), t, q in zip(pairs, tests, adj)
            ],
        }
    return ErpStatistics(curves, excluded, len(complete), anova, posthoc)


# ---------------------------------------------------------------------------
# output


def write_curves_csv(path, curves: Sequence[ErpCurve]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["channel", "condition", "t_ms", "uv"])
        for c in curves:
            for t, v in zip(c.time_ms, c.voltage_uv):
                w.writerow([c.channel, c.condition, repr(float(t)), repr(float(v))])


def curves_svg(curves: Sequence[ErpCurve], channel: str, title: str = "") -> bytes:
    """Line plot of every condition at one channel as SVG bytes.

    Output is byte-stable: the SVG id salt and the date stamp are fixed.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    sel = [c for c in curves if c.channel == channel]
    with matplotlib.rc_context({"svg.hashsalt": "erpref", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for c in sel:
            ax.plot(c.time_ms, c.voltage_uv, lw=1.2, label=f"{c.condition} (n={c.n_participants})")
        ax.axvline(0.0, color="0.5", lw=0.6)
        ax.axhline(0.0, color="0.5", lw=0.6)
        ax.set_xlabel("time (ms)")
        ax.set_ylabel("µV")
        ax.set_title(title or channel)
        if sel:
            ax.legend(frameon=False, fontsize=8)
        fig.tight_layout()
        buf = io.BytesIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return buf.getvalue()
