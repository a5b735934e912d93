"""Reproducible experiment driver: generate a cohort, train algorithms over
repeated random hospital splits, evaluate on pooled held-out hospitals, and
emit comparison and uncertainty reports.

Every output under the experiment directory is a deterministic function of
the resolved configuration: repeat i derives its split/run/init seeds from
the master seed, floats are serialized with shortest round-trip precision,
and the resolved config (every default made explicit) is written alongside
the outputs so a run can be reconstructed from its directory alone.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import HospitalDataset, PatientRecord, load_cohort, pooled_records, save_cohort, split_hospitals
from .ensemble import (
    DEFAULT_AGE_BINS,
    EnsembleModel,
    build_report,
    ensemble_scores,
    write_report_csvs,
)
from .errors import ValidationError
from .federation import (
    AlgorithmKind,
    FederationConfig,
    TrainedResult,
    load_heads,
    run_training,
    save_heads,
    write_history_csv,
)
from .learner import LearnerConfig, ModelParams, load_model, save_model, scores
from .metrics import ScoredSet, auprc, auroc
from .synth import SynthConfig, cohort_stats, generate_cohort
from .transport import write_transport_csv

COHORT_FILENAME = "cohort.jsonl"

# Paper-style display order and row labels for the comparison table.
TABLE_ORDER = (
    AlgorithmKind.CENTRAL,
    AlgorithmKind.FUALA,
    AlgorithmKind.WEIGHTED_FEDAVG,
    AlgorithmKind.FEDAVG,
)
TABLE_LABELS = {
    AlgorithmKind.CENTRAL: "Central Model",
    AlgorithmKind.FUALA: "FUALA",
    AlgorithmKind.WEIGHTED_FEDAVG: "Weight. FedAvg",
    AlgorithmKind.FEDAVG: "FedAvg",
}

# Sub-stream tags under (master seed, repeat).
_SPLIT = 0
_RUN = 1
_INIT = 2


def derive_seed(*parts: int) -> int:
    """Stable integer seed derived from the given non-negative parts."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@dataclass(frozen=True)
class ExperimentConfig:
    synth: SynthConfig | None = None
    cohort_path: str | None = None
    algorithms: tuple[AlgorithmKind, ...] = TABLE_ORDER
    rounds: int = 20
    n_selected: int = 35
    learner: LearnerConfig = LearnerConfig()
    n_test_hospitals: int = 8
    n_repeats: int = 10
    seed: int = 0
    derangement: bool = False
    heads_from_all: bool = False
    threshold: float = 0.5
    plots: bool = False

    def __post_init__(self) -> None:
        if self.synth is None and self.cohort_path is None:
            object.__setattr__(self, "synth", SynthConfig())
        if self.n_repeats < 1:
            raise ValidationError(f"n_repeats must be >= 1, got {self.n_repeats}")
        if self.n_test_hospitals < 1:
            raise ValidationError(
                f"n_test_hospitals must be >= 1, got {self.n_test_hospitals}"
            )
        if self.seed < 0:
            raise ValidationError(f"seed must be >= 0, got {self.seed}")
        if not self.algorithms:
            raise ValidationError("no algorithms requested")


def _synth_to_obj(cfg: SynthConfig) -> dict:
    return {
        "n_hospitals": cfg.n_hospitals,
        "records_per_hospital": list(cfg.records_per_hospital),
        "vocab_size": cfg.vocab_size,
        "n_risk_codes": cfg.n_risk_codes,
        "skew": cfg.skew,
        "base_prevalence": cfg.base_prevalence,
        "prevalence_jitter": cfg.prevalence_jitter,
        "encounters_per_record": list(cfg.encounters_per_record),
        "codes_per_encounter": list(cfg.codes_per_encounter),
        "risk_effect": cfg.risk_effect,
        "seed": cfg.seed,
    }


def _synth_from_obj(obj: dict) -> SynthConfig:
    kwargs = dict(obj)
    for key in ("records_per_hospital", "encounters_per_record", "codes_per_encounter"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return SynthConfig(**kwargs)


def config_to_obj(cfg: ExperimentConfig) -> dict:
    """Fully explicit, canonical-order config object."""
    obj: dict = {}
    if cfg.cohort_path is not None:
        obj["cohort_path"] = cfg.cohort_path
    else:
        obj["synth"] = _synth_to_obj(cfg.synth)
    obj.update(
        {
            "algorithms": [a.value for a in cfg.algorithms],
            "rounds": cfg.rounds,
            "n_selected": cfg.n_selected,
            "learner": {
                "learning_rate": cfg.learner.learning_rate,
                "batch_size": cfg.learner.batch_size,
                "epochs": cfg.learner.epochs,
                "hidden_dim": cfg.learner.hidden_dim,
                "init_scale": cfg.learner.init_scale,
            },
            "n_test_hospitals": cfg.n_test_hospitals,
            "n_repeats": cfg.n_repeats,
            "seed": cfg.seed,
            "derangement": cfg.derangement,
            "heads_from_all": cfg.heads_from_all,
            "threshold": cfg.threshold,
            "plots": cfg.plots,
        }
    )
    return obj


def config_from_obj(obj: dict) -> ExperimentConfig:
    try:
        kwargs: dict = {}
        if "cohort_path" in obj:
            kwargs["cohort_path"] = obj["cohort_path"]
        if "synth" in obj:
            kwargs["synth"] = _synth_from_obj(obj["synth"])
        if "algorithms" in obj:
            kwargs["algorithms"] = tuple(AlgorithmKind(a) for a in obj["algorithms"])
        if "learner" in obj:
            kwargs["learner"] = LearnerConfig(**obj["learner"])
        for key in (
            "rounds",
            "n_selected",
            "n_test_hospitals",
            "n_repeats",
            "seed",
            "derangement",
            "heads_from_all",
            "threshold",
            "plots",
        ):
            if key in obj:
                kwargs[key] = obj[key]
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"bad experiment config: {exc}") from exc


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {path!r} is not valid JSON: {exc.msg}") from exc
    return config_from_obj(obj)


def write_config(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(config_to_obj(cfg), fh, indent=2)
        fh.write("\n")


def ensure_cohort(cfg: ExperimentConfig, out_dir: str) -> list[HospitalDataset]:
    """Load the experiment cohort, generating and caching it if synthetic."""
    cached = os.path.join(out_dir, COHORT_FILENAME)
    if cfg.cohort_path is not None:
        return load_cohort(cfg.cohort_path)
    if os.path.exists(cached):
        return load_cohort(cached)
    cohort = generate_cohort(cfg.synth)
    os.makedirs(out_dir, exist_ok=True)
    save_cohort(cohort, cached)
    return cohort


def cmd_generate(cfg: ExperimentConfig, out_dir: str) -> tuple[str, str]:
    """Generate (or load) the cohort and return (path, stats summary)."""
    os.makedirs(out_dir, exist_ok=True)
    cohort = ensure_cohort(cfg, out_dir)
    path = cfg.cohort_path or os.path.join(out_dir, COHORT_FILENAME)
    return path, cohort_stats(cohort).summary()


def repeat_dir(out_dir: str, algorithm: AlgorithmKind, repeat: int) -> str:
    return os.path.join(out_dir, algorithm.value, f"rep{repeat}")


def _split_for_repeat(
    cfg: ExperimentConfig, cohort: list[HospitalDataset], repeat: int
) -> tuple[list[HospitalDataset], list[HospitalDataset]]:
    return split_hospitals(
        cohort, cfg.n_test_hospitals, derive_seed(cfg.seed, repeat, _SPLIT)
    )


def train_one(
    cfg: ExperimentConfig,
    cohort: list[HospitalDataset],
    algorithm: AlgorithmKind,
    repeat: int,
    out_dir: str,
) -> TrainedResult:
    """Train one (algorithm, repeat) cell and write its artifact directory."""
    train, test = _split_for_repeat(cfg, cohort, repeat)
    fed_cfg = FederationConfig(
        rounds=cfg.rounds,
        n_selected=cfg.n_selected,
        learner=replace(cfg.learner, seed=derive_seed(cfg.seed, repeat, _INIT)),
        seed=derive_seed(cfg.seed, repeat, _RUN),
        derangement=cfg.derangement,
        heads_from_all=cfg.heads_from_all,
    )
    result = run_training(algorithm, train, fed_cfg)

    rep_dir = repeat_dir(out_dir, algorithm, repeat)
    os.makedirs(rep_dir, exist_ok=True)
    save_model(result.final_model, os.path.join(rep_dir, "model.json"))
    if result.hospital_heads:
        save_heads(result.hospital_heads, os.path.join(rep_dir, "heads.json"))
    write_history_csv(result, os.path.join(rep_dir, "history.csv"))
    write_transport_csv(result.transport_log, os.path.join(rep_dir, "transport.csv"))
    with open(os.path.join(rep_dir, "split.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(
            {
                "train_hospitals": [h.hospital_id for h in train],
                "test_hospitals": [h.hospital_id for h in test],
            },
            fh,
            separators=(",", ":"),
        )
        fh.write("\n")
    return result


def _train_job(args: tuple[str, str, str, int]) -> str:
    config_json, out_dir, algorithm_value, repeat = args
    cfg = config_from_obj(json.loads(config_json))
    cohort = ensure_cohort(cfg, out_dir)
    train_one(cfg, cohort, AlgorithmKind(algorithm_value), repeat, out_dir)
    return repeat_dir(out_dir, AlgorithmKind(algorithm_value), repeat)


def cmd_train(cfg: ExperimentConfig, out_dir: str, parallel: int = 1) -> list[str]:
    """Train every (algorithm, repeat) cell; returns the artifact directories."""
    os.makedirs(out_dir, exist_ok=True)
    write_config(cfg, os.path.join(out_dir, "config.json"))
    cohort = ensure_cohort(cfg, out_dir)

    jobs = [(algo, rep) for algo in cfg.algorithms for rep in range(cfg.n_repeats)]
    if parallel > 1:
        config_json = json.dumps(config_to_obj(cfg))
        args = [(config_json, out_dir, algo.value, rep) for algo, rep in jobs]
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_train_job, args))
    dirs = []
    for algo, rep in jobs:
        train_one(cfg, cohort, algo, rep, out_dir)
        dirs.append(repeat_dir(out_dir, algo, rep))
    return dirs


def _test_records(cfg: ExperimentConfig, cohort: list[HospitalDataset], rep_dir: str) -> list[PatientRecord]:
    with open(os.path.join(rep_dir, "split.json"), "r", encoding="utf-8") as fh:
        split = json.load(fh)
    by_id = {h.hospital_id: h for h in cohort}
    return pooled_records(by_id[i] for i in split["test_hospitals"])


def score_records(
    algorithm: AlgorithmKind,
    rep_dir: str,
    records: Sequence[PatientRecord],
    threshold: float,
) -> np.ndarray:
    """Per-record positive-class score: ensemble mean for FUALA, single model otherwise."""
    from .data import featurize_all

    model = load_model(os.path.join(rep_dir, "model.json"))
    X, _ = featurize_all(records, model.arch.vocab_size)
    heads_path = os.path.join(rep_dir, "heads.json")
    if algorithm is AlgorithmKind.FUALA and os.path.exists(heads_path):
        heads = load_heads(heads_path)
        m = EnsembleModel(
            body=model.body,
            heads=tuple((k, heads[k]) for k in sorted(heads)),
            threshold=threshold,
        )
        return ensemble_scores(m, X).mean(axis=1)
    return scores(model.body, model.head, X)


@dataclass(frozen=True)
class AlgorithmSummary:
    algorithm: AlgorithmKind
    auroc_by_repeat: tuple[float, ...]
    auprc_by_repeat: tuple[float, ...]

    @property
    def auroc_mean(self) -> float:
        return float(np.mean(self.auroc_by_repeat))

    @property
    def auroc_std(self) -> float:
        return float(np.std(self.auroc_by_repeat))

    @property
    def auprc_mean(self) -> float:
        return float(np.mean(self.auprc_by_repeat))

    @property
    def auprc_std(self) -> float:
        return float(np.std(self.auprc_by_repeat))


def cmd_evaluate(cfg: ExperimentConfig, out_dir: str) -> list[AlgorithmSummary]:
    """Score every trained cell on its pooled held-out hospitals.

    Writes per-repeat ``scores.csv`` files, a long-form ``results.csv``, and
    ``results_summary.csv`` with mean and population std of AUROC/AUPRC x100
    over repeats.
    """
    cohort = ensure_cohort(cfg, out_dir)
    summaries = []
    results_rows = []
    for algo in cfg.algorithms:
        aurocs, auprcs = [], []
        for rep in range(cfg.n_repeats):
            rep_dir = repeat_dir(out_dir, algo, rep)
            if not os.path.exists(os.path.join(rep_dir, "model.json")):
                raise ValidationError(f"missing trained output in {rep_dir!r}; run train first")
            records = _test_records(cfg, cohort, rep_dir)
            s = score_records(algo, rep_dir, records, cfg.threshold)
            labels = np.array([r.label for r in records])
            with open(os.path.join(rep_dir, "scores.csv"), "w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["id", "label", "score"])
                for rec, score in zip(records, s):
                    writer.writerow([rec.id, rec.label, repr(float(score))])
            ss = ScoredSet(scores=s, labels=labels)
            aurocs.append(auroc(ss))
            auprcs.append(auprc(ss))
            results_rows.append((algo.value, rep, aurocs[-1], auprcs[-1]))
        summaries.append(
            AlgorithmSummary(
                algorithm=algo,
                auroc_by_repeat=tuple(aurocs),
                auprc_by_repeat=tuple(auprcs),
            )
        )

    with open(os.path.join(out_dir, "results.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["algorithm", "repeat", "auroc", "auprc"])
        for algo_value, rep, roc, pr in results_rows:
            writer.writerow([algo_value, rep, repr(float(roc)), repr(float(pr))])

    with open(os.path.join(out_dir, "results_summary.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["algorithm", "auroc_mean", "auroc_std", "auprc_mean", "auprc_std"])
        for s in summaries:
            writer.writerow(
                [
                    s.algorithm.value,
                    repr(100.0 * s.auroc_mean),
                    repr(100.0 * s.auroc_std),
                    repr(100.0 * s.auprc_mean),
                    repr(100.0 * s.auprc_std),
                ]
            )
    return summaries


def format_table(summaries: Sequence[AlgorithmSummary]) -> str:
    """Fixed-width comparison table (metrics x100), one row per algorithm."""
    by_algo = {s.algorithm: s for s in summaries}
    lines = [f"{'Model':<16} {'AU-ROC':>12} {'AU-PR':>12}"]
    for algo in TABLE_ORDER:
        if algo not in by_algo:
            continue
        s = by_algo[algo]
        roc = f"{100 * s.auroc_mean:.1f}±{100 * s.auroc_std:.1f}"
        pr = f"{100 * s.auprc_mean:.1f}±{100 * s.auprc_std:.1f}"
        lines.append(f"{TABLE_LABELS[algo]:<16} {roc:>12} {pr:>12}")
    return "\n".join(lines)


def cmd_uncertainty(cfg: ExperimentConfig, out_dir: str) -> list[str]:
    """Emit the uncertainty CSVs (and optional SVGs) for every FUALA repeat."""
    if AlgorithmKind.FUALA not in cfg.algorithms:
        raise ValidationError("uncertainty reports require a FUALA run")
    cohort = ensure_cohort(cfg, out_dir)
    written = []
    for rep in range(cfg.n_repeats):
        rep_dir = repeat_dir(out_dir, AlgorithmKind.FUALA, rep)
        heads_path = os.path.join(rep_dir, "heads.json")
        if not os.path.exists(heads_path):
            raise ValidationError(f"missing FUALA heads in {rep_dir!r}; run train first")
        model = load_model(os.path.join(rep_dir, "model.json"))
        heads = load_heads(heads_path)
        m = EnsembleModel(
            body=model.body,
            heads=tuple((k, heads[k]) for k in sorted(heads)),
            threshold=cfg.threshold,
        )
        records = _test_records(cfg, cohort, rep_dir)
        report = build_report(m, records, DEFAULT_AGE_BINS)
        unc_dir = os.path.join(rep_dir, "uncertainty")
        os.makedirs(unc_dir, exist_ok=True)
        paths = write_report_csvs(report, unc_dir)
        if cfg.plots:
            paths.extend(render_svgs(unc_dir))
        written.extend(paths)
    return written


def cmd_report(cfg: ExperimentConfig, out_dir: str) -> str:
    """Aggregate results_summary.csv into a markdown comparison report."""
    summary_path = os.path.join(out_dir, "results_summary.csv")
    if not os.path.exists(summary_path):
        raise ValidationError(f"{summary_path!r} not found; run evaluate first")
    rows = []
    with open(summary_path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(row)
    by_algo = {row["algorithm"]: row for row in rows}

    lines = [
        "# Performance comparison",
        "",
        f"Held-out hospitals: {cfg.n_test_hospitals}; repeats: {cfg.n_repeats}; "
        f"rounds: {cfg.rounds}; local epochs: {cfg.learner.epochs}; "
        f"selected per round: {cfg.n_selected}.",
        "",
        "| Model | AU-ROC | AU-PR |",
        "|---|---|---|",
    ]
    for algo in TABLE_ORDER:
        row = by_algo.get(algo.value)
        if row is None:
            continue
        roc = f"{float(row['auroc_mean']):.1f}±{float(row['auroc_std']):.1f}"
        pr = f"{float(row['auprc_mean']):.1f}±{float(row['auprc_std']):.1f}"
        lines.append(f"| {TABLE_LABELS[algo]} | {roc} | {pr} |")
    lines.append("")
    text = "\n".join(lines)
    report_path = os.path.join(out_dir, "report.md")
    with open(report_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return report_path


def render_svgs(uncertainty_dir: str) -> list[str]:
    """Render scatter/bar SVGs from the uncertainty CSVs (needs matplotlib)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "fuala"
    written = []

    per_sample = os.path.join(uncertainty_dir, "per_sample.csv")
    means, stds = [], []
    with open(per_sample, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            means.append(float(row["mean"]))
            stds.append(float(row["std"]))
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(means, stds, s=6, alpha=0.5)
    ax.set_xlabel("mean prediction")
    ax.set_ylabel("prediction std")
    path = os.path.join(uncertainty_dir, "std_vs_mean.svg")
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
    written.append(path)

    votes_path = os.path.join(uncertainty_dir, "votes_hist.csv")
    series: dict[tuple[str, str], list[tuple[int, int]]] = {}
    with open(votes_path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            series.setdefault((row["class"], row["correctness"]), []).append(
                (int(row["vote"]), int(row["count"]))
            )
    fig, ax = plt.subplots(figsize=(6, 4))
    for (cls, correctness), points in sorted(series.items()):
        points.sort()
        ax.plot(
            [v for v, _ in points],
            [c for _, c in points],
            label=f"class {cls}, {correctness}",
        )
    ax.set_xlabel("positive votes")
    ax.set_ylabel("samples")
    ax.legend(fontsize=8)
    path = os.path.join(uncertainty_dir, "votes_hist.svg")
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
    written.append(path)

    group_path = os.path.join(uncertainty_dir, "group_std.csv")
    groups: dict[str, dict[str, float]] = {}
    with open(group_path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            groups.setdefault(row["bin"], {})[row["class"]] = float(row["mean_std"])
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = list(groups)
    x = np.arange(len(labels))
    width = 0.35
    ax.bar(x - width / 2, [groups[b].get("0", 0.0) for b in labels], width, label="predicted 0")
    ax.bar(x + width / 2, [groups[b].get("1", 0.0) for b in labels], width, label="predicted 1")
    ax.set_xticks(x, labels)
    ax.set_xlabel("age group")
    ax.set_ylabel("mean prediction std")
    ax.legend(fontsize=8)
    path = os.path.join(uncertainty_dir, "group_std.svg")
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
    written.append(path)

    return written
