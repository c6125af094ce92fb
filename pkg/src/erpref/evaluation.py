"""Leave-one-out evaluation, AUC and label-permutation significance."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from joblib import Parallel, delayed
from scipy.special import softmax
from scipy.stats import rankdata
from sklearn.base import clone

from .lda import ShrinkageLDA

log = logging.getLogger(__name__)

MAX_SKIPPED_FRACTION = 0.01


class EvaluationError(RuntimeError):
    pass


@dataclass(frozen=True)
class LooScores:
    """Held-out class-probability rows; skipped folds hold NaN."""

    proba: np.ndarray
    classes: np.ndarray
    labels: np.ndarray
    skipped: np.ndarray

    @property
    def n_folds(self) -> int:
        return int((~self.skipped).sum())


@dataclass(frozen=True)
class EvaluationReport:
    participant_id: str
    task: str
    auc: float
    null_aucs: tuple = ()
    p_value: float = 1.0
    fold_count: int = 0
    class_histogram: dict = field(default_factory=dict)
    skipped_folds: int = 0

    @property
    def n_perm(self) -> int:
        return len(self.null_aucs)

    def significant(self, alpha=0.05) -> bool:
        return self.p_value <= alpha

    def to_dict(self) -> dict:
        out = asdict(self)
        out["null_aucs"] = list(self.null_aucs)
        out["class_histogram"] = {str(k): v for k, v in self.class_histogram.items()}
        out["n_perm"] = self.n_perm
        out["status"] = "ok"
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        return cls(
            participant_id=d["participant_id"],
            task=d["task"],
            auc=float(d["auc"]),
            null_aucs=tuple(float(v) for v in d["null_aucs"]),
            p_value=float(d["p_value"]),
            fold_count=int(d["fold_count"]),
            class_histogram={int(k): int(v) for k, v in d["class_histogram"].items()},
            skipped_folds=int(d.get("skipped_folds", 0)),
        )


# ---------------------------------------------------------------------------
# AUC


def binary_auc(scores, positive) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative samples")
    ranks = rankdata(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc(proba, labels, classes=None) -> float:
    """AUC of probability rows against labels.

    Binary problems use the probability of the second class. With more
    classes the result is the unweighted mean of one-vs-rest AUCs.
    """
    labels = np.asarray(labels)
    proba = np.asarray(proba, dtype=np.float64)
    present = np.unique(labels)
    if present.size < 2:
        raise ValueError("AUC needs at least two classes in labels")
    if classes is None:
        classes = present
    classes = np.asarray(classes)
    if proba.ndim == 1:
        if classes.size != 2:
            raise ValueError("1-D scores need exactly two classes")
        return binary_auc(proba, labels == classes[1])
    if proba.shape[1] != classes.size:
        raise ValueError(f"{proba.shape[1]} probability columns for {classes.size} classes")
    if classes.size == 2:
        return binary_auc(proba[:, 1], labels == classes[1])
    return float(np.mean([
        binary_auc(proba[:, k], labels == c) for k, c in enumerate(classes)
    ]))


# ---------------------------------------------------------------------------
# leave-one-out


class ShrinkageLdaLoo:
    """Exact leave-one-out probabilities of :class:`ShrinkageLDA` without refitting.

    Every fold is the model trained on all-but-one sample: fold class means,
    fold priors and a fold-specific Ledoit-Wolf intensity. The total scatter
    of ``X`` does not depend on labels, so its eigendecomposition is computed
    once and reused for every labeling (label permutations included). Per
    fold, the within-class scatter is that spectrum minus a rank-(K+1)
    correction, which the Woodbury identity inverts in closed form; the
    Ledoit-Wolf statistics of the fold follow from rank-one downdates of
    traces and Frobenius norms.
    """

    def __init__(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 3:
            raise ValueError("need a 2-D feature matrix with at least 3 samples")
        if not np.all(np.isfinite(X)):
            raise ValueError("features contain non-finite values")
        self.n, self.d = X.shape
        Xc = X - X.mean(axis=0)
        U, s, _ = np.linalg.svd(Xc, full_matrices=False)
        # coordinates with no data variance carry zero for every vector used below
        keep = s > s[0] * 1e-10 if s[0] > 0 else np.zeros_like(s, dtype=bool)
        self.t = s[keep] ** 2
        self.P = U[:, keep] * s[keep]

    def scores(self, labels) -> LooScores:
        labels = np.asarray(labels)
        if labels.shape != (self.n,):
            raise ValueError("labels must have one entry per sample")
        classes, y = np.unique(labels, return_inverse=True)
        proba, skipped = self._proba(y, classes.size)
        return LooScores(proba, classes, labels, skipped)

    def _proba(self, y, K):
        n, d = self.n, self.d
        P, t = self.P, self.t
        r = t.size
        counts = np.bincount(y, minlength=K).astype(np.float64)
        if K < 2:
            raise EvaluationError("need at least 2 classes")
        onehot = np.zeros((n, K))
        onehot[np.arange(n), y] = 1.0
        M = (onehot.T @ P) / counts[:, None]
        Z = P - M[y]
        q = np.einsum("ij,ij->i", Z, Z)
        sum_q = np.bincount(y, q, minlength=K)
        sum_q2 = np.bincount(y, q * q, minlength=K)
        R = onehot.T @ (q[:, None] * Z)
        # h_i = z_i^T W_c z_i with W_c the scatter of sample i's class
        h = np.empty(n)
        for k in range(K):
            idx = np.flatnonzero(y == k)
            Zk = Z[idx]
            if idx.size <= r:
                G = Zk @ Zk.T
                h[idx] = np.einsum("ij,ij->i", G, G)
            else:
                h[idx] = np.einsum("ij,ij->i", Zk @ (Zk.T @ Zk), Zk)

        # full within-class scatter W = diag(t) - M^T diag(counts) M
        tr_w = q.sum()
        MM = M @ M.T
        w_norm2 = (
            np.sum(t * t)
            - 2.0 * np.sum(counts * ((M * M) @ t))
            + np.sum(np.outer(counts, counts) * MM * MM)
        )
        q4 = sum_q2.sum()

        nc = counts[y]
        # folds with nc == 1 are skipped below; keep their arithmetic finite
        e = 1.0 / np.maximum(nc - 1.0, 1.0)
        a = nc * e
        ZM = Z @ M.T
        u_w_u = (Z * Z) @ t - (ZM * ZM) @ counts
        tr_wp = tr_w - a * q
        wp_norm2 = w_norm2 - 2.0 * a * u_w_u + a * a * q * q
        s = e * e * q
        sum_qk2 = sum_q2[y] - q * q + 2.0 * s * (sum_q[y] - q) + (nc - 1.0) * s * s
        sum_qg = np.einsum("ij,ij->i", Z, R[y]) - q * q
        sum_g2 = h - q * q
        new_class = sum_qk2 + 4.0 * e * (sum_qg - s * q) + 4.0 * e * e * sum_g2
        q4p = q4 - sum_q2[y] + new_class

        n1 = n - 1.0
        mu = tr_wp / (n1 * d)
        s_norm2 = wp_norm2 / (n1 * n1)
        d2 = np.maximum((s_norm2 - d * mu * mu) / d, 0.0)
        b2_bar = np.maximum((q4p - n1 * s_norm2) / (n1 * n1 * d), 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = np.where(d2 > 0, np.minimum(np.minimum(b2_bar, d2) / d2, 1.0), 0.0)
        alpha = (1.0 - lam) / n1
        beta = lam * mu
        w = 1.0 / (alpha[:, None] * t + beta[:, None])

        # weighted Gram of the basis {m_1..m_K, u, p} per fold
        B = K + 2
        G = np.empty((n, B, B))
        Gmm = w @ (M[:, None, :] * M[None, :, :]).reshape(K * K, r).T
        G[:, :K, :K] = Gmm.reshape(n, K, K)
        Zw = Z * w
        Pw = P * w
        G[:, K, :K] = Zw @ M.T
        G[:, K + 1, :K] = Pw @ M.T
        G[:, :K, K] = G[:, K, :K]
        G[:, :K, K + 1] = G[:, K + 1, :K]
        G[:, K, K] = np.einsum("ij,ij->i", Zw, Z)
        G[:, K, K + 1] = G[:, K + 1, K] = np.einsum("ij,ij->i", Zw, P)
        G[:, K + 1, K + 1] = np.einsum("ij,ij->i", Pw, P)

        # low-rank factor L = [sqrt(n_k) m_k ..., sqrt(a) u]
        Lc = np.zeros((n, B, K + 1))
        Lc[:, np.arange(K), np.arange(K)] = np.sqrt(counts)
        Lc[:, K, K] = np.sqrt(a)
        # held-out deviations v_k = p - m_k' with m_c' = m_c - e u
        Vc = np.zeros((n, B, K))
        Vc[:, K + 1, :] = 1.0
        Vc[:, np.arange(K), np.arange(K)] = -1.0
        Vc[np.arange(n), K, y] = e

        GL = G @ Lc
        GV = G @ Vc
        LtL = np.einsum("nbi,nbj->nij", Lc, GL)
        LtV = np.einsum("nbi,nbj->nij", Lc, GV)
        vv = np.einsum("nbk,nbk->nk", Vc, GV)
        C = np.eye(K + 1)[None] - alpha[:, None, None] * LtL

        # a fold is lost only when its held-out sample was the last of its class
        skipped = nc < 2.0
        quad = np.full((n, K), np.nan)
        ok = ~skipped
        if ok.any():
            sol = np.linalg.solve(C[ok], LtV[ok])
            quad[ok] = vv[ok] + alpha[ok, None] * np.einsum("nij,nij->nj", LtV[ok], sol)

        fold_counts = counts[None, :] - onehot
        with np.errstate(divide="ignore"):
            log_prior = np.log(fold_counts / n1)
        proba = np.full((n, K), np.nan)
        proba[ok] = softmax(-0.5 * quad[ok] + log_prior[ok], axis=1)
        return proba, skipped


def _refit_loo(X, labels, estimator) -> LooScores:
    classes = np.unique(labels)
    n = len(labels)
    proba = np.full((n, classes.size), np.nan)
    skipped = np.zeros(n, dtype=bool)
    for i in range(n):
        train = np.arange(n) != i
        y_tr = labels[train]
        cls_tr, cnt = np.unique(y_tr, return_counts=True)
        if cls_tr.size != classes.size:
            skipped[i] = True
            continue
        model = clone(estimator)
        if "min_class_samples" in model.get_params():
            model.set_params(min_class_samples=1)
        model.fit(X[train], y_tr)
        proba[i] = model.predict_proba(X[i:i + 1])[0]
    return LooScores(proba, classes, labels, skipped)


def _uses_fast_path(estimator) -> bool:
    return (
        type(estimator) is ShrinkageLDA
        and estimator.shrinkage == "auto"
        and estimator.priors is None
    )


def loo_scores(X, labels, estimator=None, method="auto") -> LooScores:
    """Held-out probability rows from leave-one-out cross-validation.

    Parameters
    ----------
    X : array-like of shape (n_samples, n_features)
    labels : array-like of shape (n_samples,)
    estimator : classifier with ``predict_proba``, default=ShrinkageLDA()
    method : {"auto", "fast", "refit"}
        ``"fast"`` uses the closed-form path (default shrinkage LDA only);
        ``"refit"`` trains one model per fold.

    Every class needs at least 2 samples, so each training fold keeps every
    class (a class may drop to a single sample there). A fold whose training
    set lost a class is skipped; more than 1% skipped folds raises
    ``EvaluationError``.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] != labels.shape[0]:
        raise ValueError("X and labels disagree in length")
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < 2:
        raise EvaluationError("need at least 2 classes")
    if counts.min() < 2:
        raise EvaluationError(f"every class needs at least 2 samples, got {dict(zip(classes.tolist(), counts.tolist()))}")
    estimator = ShrinkageLDA() if estimator is None else estimator
    if method not in ("auto", "fast", "refit"):
        raise ValueError(f"unknown method {method!r}")
    if method == "fast" and not _uses_fast_path(estimator):
        raise ValueError("fast leave-one-out supports only ShrinkageLDA(shrinkage='auto')")
    if method != "refit" and _uses_fast_path(estimator):
        res = ShrinkageLdaLoo(X).scores(labels)
    else:
        res = _refit_loo(X, labels, estimator)
    _check_skips(res.skipped)
    return res


def _check_skips(skipped):
    frac = skipped.mean()
    if frac > MAX_SKIPPED_FRACTION:
        raise EvaluationError(
            f"{int(skipped.sum())} of {skipped.size} folds skipped "
            f"({frac:.1%} > {MAX_SKIPPED_FRACTION:.0%}): a class is too small"
        )


def loo_auc(res: LooScores) -> float:
    ok = ~res.skipped
    return auc(res.proba[ok], res.labels[ok], res.classes)


# ---------------------------------------------------------------------------
# permutation test


def permutation_streams(seed, n_perm):
    """One independent generator per permutation, derived from ``seed``."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_perm)]


def _null_chunk(loo, labels, seeds):
    out = []
    for ss in seeds:
        perm = np.random.default_rng(ss).permutation(labels.size)
        out.append(loo_auc(loo.scores(labels[perm])))
    return out


def permutation_test(
    X, labels, n_perm=1000, seed=0, participant_id="", task="explicit", n_jobs=1,
) -> EvaluationReport:
    """Leave-one-out AUC and its label-permutation p-value.

    Every permutation retrains the full leave-one-out evaluation on shuffled
    labels. ``p = (1 + #{null >= observed}) / (1 + n_perm)``.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    observed = loo_scores(X, labels)
    obs_auc = loo_auc(observed)
    loo = ShrinkageLdaLoo(X)
    seeds = np.random.SeedSequence(seed).spawn(n_perm)
    if n_jobs == 1 or n_perm < 2:
        null = _null_chunk(loo, labels, seeds)
    else:
        n_chunks = min(n_perm, 4 * (n_jobs if n_jobs > 0 else 8))
        chunks = [list(c) for c in np.array_split(np.arange(n_perm), n_chunks) if len(c)]
        parts = Parallel(n_jobs=n_jobs)(
            delayed(_null_chunk)(loo, labels, [seeds[i] for i in c]) for c in chunks
        )
        null = [v for part in parts for v in part]
    null = np.asarray(null)
    p = (1.0 + np.count_nonzero(null >= obs_auc)) / (1.0 + n_perm)
    classes, counts = np.unique(labels, return_counts=True)
    return EvaluationReport(
        participant_id=participant_id,
        task=task,
        auc=obs_auc,
        null_aucs=tuple(float(v) for v in null),
        p_value=float(p),
        fold_count=observed.n_folds,
        class_histogram={_plain(c): int(k) for c, k in zip(classes, counts)},
        skipped_folds=int(observed.skipped.sum()),
    )


def _plain(v):
    return v.item() if hasattr(v, "item") else v


@dataclass(frozen=True)
class CohortSummary:
    n_participants: int
    mean_auc: float
    sd_auc: float
    median_auc: float
    n_significant: int
    alpha: float
    significant: dict

    @property
    def significant_fraction(self) -> float:
        return self.n_significant / self.n_participants


def cohort_summary(reports, alpha=0.05) -> CohortSummary:
    """Mean / SD (n-1) / median AUC and per-participant significance at ``alpha``."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to summarize")
    aucs = np.array([r.auc for r in reports])
    flags = {r.participant_id: r.significant(alpha) for r in reports}
    return CohortSummary(
        n_participants=len(reports),
        mean_auc=float(aucs.mean()),
        sd_auc=float(aucs.std(ddof=1)) if len(reports) > 1 else 0.0,
        median_auc=float(np.median(aucs)),
        n_significant=int(sum(flags.values())),
        alpha=alpha,
        significant=flags,
    )
