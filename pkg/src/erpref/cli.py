"""Command-line interface.

Every subcommand reads and writes a fixed layout under ``--workdir``::

    recordings/<pid>.rec       simulate
    ratings.csv, selections.csv, ground_truth.json
    epochs/<pid>.erp           preprocess (+ preprocess_summary.json)
    ranking.csv                label
    labeled/<pid>.explicit.erp, labeled/<pid>.group.erp | .group.json
    features/<pid>.<task>.csv | .<task>.json
    reports/<task>/<pid>.json, reports/<task>_cohort.csv, reports/<task>_summary.json
    stats/<task>_curves.csv, stats/<task>_<channel>.svg, stats/<task>_stats.json
    manifest.json              run

Exit status: 0 success, 2 configuration error, 3 stage failure, 4 invariant
violation detected at run time.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, PipelineConfig, load_config
from .evaluation import EvaluationReport, cohort_summary
from .features import featurize, read_features_csv, write_features_csv
from .labeling import (
    NotApplicable,
    contradiction_subset,
    explicit_labels,
    group_ranking,
    rating_zero_tertiles,
    read_ranking_csv,
    write_ranking_csv,
    write_selections_csv,
)
from .neurostats import (
    EXPLICIT_CONDITIONS,
    GROUP_CONDITIONS,
    condition_means,
    curves_svg,
    erp_statistics,
    wilcoxon_signed_rank,
    write_curves_csv,
)
from .pipeline import TASKS, evaluate_table
from .preprocess import FilterSpec, RejectionPolicy, preprocess_recording
from .signal_model import (
    InvariantError,
    read_epochs,
    read_ratings_csv,
    read_recording,
    validate_recording,
    write_epochs,
    write_ratings_csv,
    write_recording,
)
from .synthsession import ground_truth, iter_cohort

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_INVARIANT = 0, 2, 3, 4

COHORT_CAVEAT = (
    "A signed-rank test needs paired observations. Comparisons between "
    "disjoint participant groups are reported descriptively only; the "
    "signed-rank result here tests per-participant AUC - 0.5 against zero."
)

log = logging.getLogger("erpref")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str, invariant: bool = False):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage
        self.invariant = invariant


@contextlib.contextmanager
def stage(name: str):
    log.info("stage %s", name)
    try:
        yield
    except StageError:
        raise
    except InvariantError as exc:
        raise StageError(name, f"invariant violated: {exc}", invariant=True) from exc
    except Exception as exc:  # noqa: BLE001 - reported with the stage name
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc


class Layout:
    def __init__(self, root):
        self.root = Path(root)
        self.recordings = self.root / "recordings"
        self.ratings = self.root / "ratings.csv"
        self.selections = self.root / "selections.csv"
        self.ground_truth = self.root / "ground_truth.json"
        self.epochs = self.root / "epochs"
        self.preprocess_summary = self.root / "preprocess_summary.json"
        self.ranking = self.root / "ranking.csv"
        self.labeled = self.root / "labeled"
        self.features = self.root / "features"
        self.reports = self.root / "reports"
        self.stats = self.root / "stats"
        self.manifest = self.root / "manifest.json"
        self.config = self.root / "config.json"


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path} (run the previous stage first)")
    return path


def _files(directory: Path, pattern: str) -> list[Path]:
    _require(directory, "input directory")
    out = sorted(directory.glob(pattern))
    if not out:
        raise FileNotFoundError(f"no {pattern} files in {directory}")
    return out


def _pid_of(path: Path) -> str:
    return path.name.split(".")[0]


# ---------------------------------------------------------------------------
# stages


def run_simulate(cfg: PipelineConfig, layout: Layout) -> None:
    layout.recordings.mkdir(parents=True, exist_ok=True)
    ratings, selections = [], []
    for rec, r, sel in iter_cohort(cfg.simulation):
        write_recording(layout.recordings / f"{rec.participant_id}.rec", rec)
        log.info("simulated %s", rec.participant_id)
        ratings.extend(r)
        selections.extend(sel)
    write_ratings_csv(layout.ratings, ratings)
    write_selections_csv(layout.selections, selections)
    truth = ground_truth(cfg.simulation, ratings, selections)
    _dump_json(layout.ground_truth, {
        "latent_scores": truth.latent_scores,
        "latent_tertiles": truth.latent_tertiles,
        "carriers": truth.carriers,
    })


def run_preprocess(cfg: PipelineConfig, layout: Layout) -> None:
    layout.epochs.mkdir(parents=True, exist_ok=True)
    summaries = []
    for path in _files(layout.recordings, "*.rec"):
        rec = read_recording(path)
        errors = validate_recording(rec)
        if errors:
            raise InvariantError(f"{path}: " + "; ".join(errors))
        epochs, summary = preprocess_recording(rec, cfg.filter, cfg.rejection)
        del rec
        write_epochs(layout.epochs / f"{summary.participant_id or _pid_of(path)}.erp", epochs)
        summaries.append(summary.to_dict())
        log.info("preprocessed %s: %d kept, threshold %.1f uV",
                 summary.participant_id, summary.n_kept, summary.threshold_uv)
    _dump_json(layout.preprocess_summary, {
        "filter": dataclasses.asdict(cfg.filter),
        "rejection": dataclasses.asdict(cfg.rejection),
        "participants": summaries,
    })


def run_label(cfg: PipelineConfig, layout: Layout) -> None:
    ratings = read_ratings_csv(_require(layout.ratings, "ratings"))
    ranking = group_ranking(ratings)
    write_ranking_csv(layout.ranking, ranking)
    layout.labeled.mkdir(parents=True, exist_ok=True)
    for path in _files(layout.epochs, "*.erp"):
        epochs = read_epochs(path)
        pid = _pid_of(path)
        write_epochs(layout.labeled / f"{pid}.explicit.erp", explicit_labels(epochs, ratings))
        subset = contradiction_subset(epochs, ratings, ranking)
        erp, na = layout.labeled / f"{pid}.group.erp", layout.labeled / f"{pid}.group.json"
        if isinstance(subset, NotApplicable):
            erp.unlink(missing_ok=True)
            _dump_json(na, subset.to_dict())
            log.info("%s: group task not applicable (%s)", pid, subset.reason)
        else:
            na.unlink(missing_ok=True)
            write_epochs(erp, subset)


def run_featurize(cfg: PipelineConfig, layout: Layout) -> None:
    layout.features.mkdir(parents=True, exist_ok=True)
    _require(layout.labeled, "labeled epochs")
    for task in TASKS:
        for path in sorted(layout.labeled.glob(f"*.{task}.erp")):
            out = layout.features / f"{_pid_of(path)}.{task}.csv"
            write_features_csv(out, featurize(read_epochs(path)))
            (layout.features / f"{_pid_of(path)}.{task}.json").unlink(missing_ok=True)
        for path in sorted(layout.labeled.glob(f"*.{task}.json")):
            (layout.features / f"{_pid_of(path)}.{task}.csv").unlink(missing_ok=True)
            (layout.features / path.name).write_text(path.read_text())


def _check_report(rep: EvaluationReport) -> None:
    if not 0.0 <= rep.auc <= 1.0:
        raise InvariantError(f"{rep.participant_id}: AUC {rep.auc} outside [0, 1]")
    n_ge = sum(v >= rep.auc for v in rep.null_aucs)
    expected = (1 + n_ge) / (1 + rep.n_perm)
    if abs(rep.p_value - expected) > 1e-12 or rep.p_value < 1.0 / (rep.n_perm + 1):
        raise InvariantError(f"{rep.participant_id}: p value {rep.p_value} inconsistent")


def run_evaluate(cfg: PipelineConfig, layout: Layout, task: str,
                 n_perm: int | None = None, seed: int | None = None) -> None:
    n_perm = cfg.evaluation.n_perm if n_perm is None else n_perm
    seed = cfg.seed if seed is None else seed
    inputs = {}
    for path in sorted(layout.features.glob(f"*.{task}.*")) if layout.features.exists() else []:
        if path.suffix in (".csv", ".json"):
            inputs[_pid_of(path)] = path
    if not inputs:
        raise FileNotFoundError(f"no {task} features in {layout.features}")
    out_dir = layout.reports / task
    out_dir.mkdir(parents=True, exist_ok=True)
    reports, skipped = [], []
    for index, pid in enumerate(sorted(inputs)):
        path = inputs[pid]
        if path.suffix == ".json":
            na = json.loads(path.read_text())
            skipped.append(na)
            _dump_json(out_dir / f"{pid}.json", {**na, "task": task})
            continue
        table = read_features_csv(path)
        rep = evaluate_table(table, task, n_perm, seed, index, pid, n_jobs=cfg.jobs)
        _check_report(rep)
        reports.append(rep)
        _dump_json(out_dir / f"{pid}.json", rep.to_dict())
        log.info("%s %s: AUC %.3f p %.4f", pid, task, rep.auc, rep.p_value)
    with (layout.reports / f"{task}_cohort.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["participant_id", "auc", "p", "n_folds"])
        for rep in reports:
            w.writerow([rep.participant_id, repr(rep.auc), repr(rep.p_value), rep.fold_count])
    summary = {"task": task, "n_perm": n_perm, "seed": seed,
               "not_applicable": [s["participant_id"] for s in skipped]}
    if reports:
        cs = cohort_summary(reports, cfg.evaluation.alpha)
        summary.update({
            "n_evaluated": cs.n_participants,
            "mean_auc": cs.mean_auc,
            "sd_auc": cs.sd_auc,
            "median_auc": cs.median_auc,
            "alpha": cs.alpha,
            "n_significant": cs.n_significant,
            "significant_fraction": cs.significant_fraction,
            "significant": cs.significant,
        })
        deltas = np.array([r.auc for r in reports]) - 0.5
        try:
            wx = wilcoxon_signed_rank(deltas)
            summary["wilcoxon_auc_vs_chance"] = {"W": wx.W, "p": wx.p, "n": wx.n, "method": wx.method}
        except ValueError as exc:
            summary["wilcoxon_auc_vs_chance"] = {"skipped": str(exc)}
        summary["cohort_comparison_caveat"] = COHORT_CAVEAT
    _dump_json(layout.reports / f"{task}_summary.json", summary)


def run_stats(cfg: PipelineConfig, layout: Layout) -> None:
    ranking = read_ranking_csv(_require(layout.ranking, "ranking"))
    channels = list(cfg.stats.channels)
    per_task = {"explicit": [], "group": []}
    time_ms = None
    for path in _files(layout.labeled, "*.explicit.erp"):
        labeled = read_epochs(path)
        time_ms = labeled.time_axis
        per_task["explicit"].append(condition_means(labeled, EXPLICIT_CONDITIONS, channels))
        # labels of the explicit set are the participant's ratings
        ratings = {(p, s): int(lab) for p, s, lab in
                   zip(labeled.participant_ids, labeled.stimulus_ids, labeled.labels)}
        zero = rating_zero_tertiles(labeled, ratings, ranking)
        per_task["group"].append(condition_means(zero, GROUP_CONDITIONS, channels))
    layout.stats.mkdir(parents=True, exist_ok=True)
    for task, conds in (("explicit", EXPLICIT_CONDITIONS), ("group", GROUP_CONDITIONS)):
        res = erp_statistics(per_task[task], time_ms, channels, list(conds),
                             cfg.stats.bin_width_ms, cfg.stats.range_ms)
        write_curves_csv(layout.stats / f"{task}_curves.csv", res.curves)
        for ch in channels:
            (layout.stats / f"{task}_{ch}.svg").write_bytes(
                curves_svg(res.curves, ch, f"{task} preference, {ch}"))
        _dump_json(layout.stats / f"{task}_stats.json", {"task": task, **res.to_dict()})


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(layout: Layout) -> dict:
    entries = []
    for path in sorted(p for p in layout.root.rglob("*") if p.is_file()):
        if path == layout.manifest:
            continue
        entries.append({"path": path.relative_to(layout.root).as_posix(),
                        "sha256": _sha256(path), "bytes": path.stat().st_size})
    manifest = {"artifacts": entries}
    _dump_json(layout.manifest, manifest)
    return manifest


def run_pipeline(cfg: PipelineConfig) -> dict:
    """simulate -> preprocess -> label -> featurize -> evaluate x2 -> stats, then manifest."""
    layout = Layout(cfg.workdir)
    layout.root.mkdir(parents=True, exist_ok=True)
    # the workdir itself is left out so relocated runs hash identically
    _dump_json(layout.config, {k: v for k, v in cfg.to_dict().items() if k != "workdir"})
    with stage("simulate"):
        run_simulate(cfg, layout)
    with stage("preprocess"):
        run_preprocess(cfg, layout)
    with stage("label"):
        run_label(cfg, layout)
    with stage("featurize"):
        run_featurize(cfg, layout)
    for task in TASKS:
        with stage(f"evaluate:{task}"):
            run_evaluate(cfg, layout, task)
    with stage("stats"):
        run_stats(cfg, layout)
    with stage("manifest"):
        return write_manifest(layout)


# ---------------------------------------------------------------------------
# argument parsing


def _global_options(parser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="YAML pipeline config")
    parser.add_argument("--seed", type=int, default=default, help="master seed (overrides config)")
    parser.add_argument("--jobs", type=int, default=default, help="worker cap for permutations")
    parser.add_argument("--workdir", default=default, help="artifact directory")
    parser.add_argument("-q", "--quiet", action="store_true",
                        default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="erpref", description=__doc__.splitlines()[0])
    _global_options(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        _global_options(p, suppress=True)
        return p

    add("simulate", "simulate recordings and ratings")
    p = add("preprocess", "reference, filter, epoch and reject")
    p.add_argument("--low-hz", type=float)
    p.add_argument("--high-hz", type=float)
    p.add_argument("--order", type=int)
    p.add_argument("--causal", action="store_true", help="forward-only filtering")
    p.add_argument("--rejection", choices=["fixed_threshold", "target_fraction"])
    p.add_argument("--threshold-uv", type=float)
    p.add_argument("--fraction", type=float)
    add("label", "ratings, ranking and labeled epoch files")
    add("featurize", "windowed-mean feature CSVs")
    p = add("evaluate", "LOO AUC with permutation p values")
    p.add_argument("--task", choices=list(TASKS), required=True)
    p.add_argument("--n-perm", type=int)
    add("stats", "grand averages, RM-ANOVA and post-hoc tests")
    add("run", "full pipeline with manifest")
    return parser


def _preprocess_overrides(cfg: PipelineConfig, args) -> PipelineConfig:
    f = cfg.filter
    spec = FilterSpec(
        low_hz=f.low_hz if args.low_hz is None else args.low_hz,
        high_hz=f.high_hz if args.high_hz is None else args.high_hz,
        order=f.order if args.order is None else args.order,
        zero_phase=f.zero_phase and not args.causal,
    )
    spec.validate(cfg.simulation.sampling_rate_hz)
    r = cfg.rejection
    mode = args.rejection or r.mode
    if mode == "fixed_threshold":
        thr = args.threshold_uv if args.threshold_uv is not None else r.threshold_uv
        policy = RejectionPolicy.fixed(thr if thr is not None else -1.0)
    else:
        frac = args.fraction if args.fraction is not None else r.fraction
        policy = RejectionPolicy.target(frac if frac is not None else 0.122)
    return cfg.replace(filter=spec, rejection=policy)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, seed=args.seed, workdir=args.workdir)
        if args.jobs is not None:
            if args.jobs == 0 or args.jobs < -1:
                raise ConfigError("--jobs must be a positive integer or -1")
            cfg = cfg.replace(jobs=args.jobs)
        if args.command == "preprocess":
            cfg = _preprocess_overrides(cfg, args)
        if args.command == "evaluate" and args.n_perm is not None and args.n_perm < 1:
            raise ConfigError("--n-perm must be positive")
    except (ConfigError, ValueError) as exc:
        print(f"erpref: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    layout = Layout(cfg.workdir)
    try:
        if args.command == "run":
            manifest = run_pipeline(cfg)
            print(f"{len(manifest['artifacts'])} artifacts; manifest at {layout.manifest}")
            return EXIT_OK
        layout.root.mkdir(parents=True, exist_ok=True)
        with stage(args.command):
            if args.command == "simulate":
                run_simulate(cfg, layout)
            elif args.command == "preprocess":
                run_preprocess(cfg, layout)
            elif args.command == "label":
                run_label(cfg, layout)
            elif args.command == "featurize":
                run_featurize(cfg, layout)
            elif args.command == "evaluate":
                run_evaluate(cfg, layout, args.task, args.n_perm, args.seed)
            elif args.command == "stats":
                run_stats(cfg, layout)
    except StageError as exc:
        print(f"erpref: {exc}", file=sys.stderr)
        return EXIT_INVARIANT if exc.invariant else EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
