"""Experiment orchestration: seeded benchmark runs over detector, algorithm,
and budget grids, with success-rate and query-count metrics read off the rows.

Every attack seed is derived from (master seed, sample id), so results are
independent of worker count and of which grid cells run in the same process.
"""
from __future__ import annotations

import csv
import hashlib
import json
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .attack import ALGORITHMS, AttackConfig, Oracle, run_attack
from .corpus import ApkModel, Corpus, CorpusSpec, load_corpus, load_default_catalog
from .detectors import (
    DETECTOR_KINDS,
    DetectorModel,
    make_ensemble,
    query as model_query,
    train,
)
from .features import (
    build_api_cluster_map,
    build_vocab,
    extract_api_cluster,
    extract_binary,
    extract_markov,
)
from .perturbset import PerturbationSet, build_perturbation_set

FEATURE_KINDS = ("binary", "markov", "api_cluster")

CSV_COLUMNS = ("sample_id", "detector", "algorithm", "budget", "seed",
               "outcome", "queries_used", "wall_ms")

# Corpus behind the stock benchmark: large enough that the linear detector
# leaves well over the default 100 attackable true positives in the test split.
DEFAULT_BENCH_SPEC = CorpusSpec(n_benign=300, n_malicious=560, donor_count=100,
                                seed=101)


@dataclass(frozen=True)
class DetectorSpec:
    """One detector to train for an experiment."""

    name: str
    kind: str = "linear"
    features: str = "binary"
    hyperparams: dict = field(default_factory=dict)
    cluster_count: int = 24
    train_seed: int = 0
    threshold: float = 0.5
    ensemble_size: int = 20

    def __post_init__(self):
        if self.kind not in DETECTOR_KINDS + ("ensemble",):
            raise ValueError(f"unknown detector kind: {self.kind}")
        if self.features not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind: {self.features}")


@dataclass(frozen=True)
class ExperimentConfig:
    detectors: tuple[DetectorSpec, ...]
    corpus_path: str | None = None
    algorithms: tuple[str, ...] = ("pst", "mab", "random")
    budgets: tuple[int, ...] = (10, 20, 30, 40)
    sample_count: int = 100
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    similarity_threshold: float = 0.5
    workers: int = 1

    def __post_init__(self):
        if len(self.detectors) == 0:
            raise ValueError("experiment needs at least one detector")
        for algo in self.algorithms:
            if algo not in ALGORITHMS:
                raise ValueError(f"unknown algorithm: {algo}")
        if len(self.budgets) == 0 or any(b < 1 for b in self.budgets):
            raise ValueError("budgets must be positive")
        if list(self.budgets) != sorted(set(self.budgets)):
            raise ValueError("budgets must be strictly increasing")
        if len(self.seeds) == 0:
            raise ValueError("experiment needs at least one seed")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass(frozen=True)
class MetricsReport:
    config: dict
    rows: tuple[dict, ...]
    cells: tuple[dict, ...]
    grid: tuple[dict, ...]


def derive_seed(master_seed: int, sample_id: str) -> int:
    """Stable per-sample attack seed, independent of scheduling order."""
    digest = hashlib.sha256(f"{master_seed}:{sample_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


# ---------------------------------------------------------------------------
# Metrics


def _outcome(report) -> str:
    return report["outcome"] if isinstance(report, dict) else report.outcome


def compute_asr(reports) -> float:
    """Successes over attacked true positives; gate rejections do not count."""
    applicable = [r for r in reports if _outcome(r) != "not_applicable"]
    if len(applicable) == 0:
        raise ValueError("no applicable attack reports")
    wins = sum(1 for r in applicable if _outcome(r) == "success")
    return wins / len(applicable)


def compute_cdf(values) -> list[tuple[float, float]]:
    """Empirical CDF evaluated at each distinct value."""
    data = sorted(values)
    if len(data) == 0:
        raise ValueError("no values to summarize")
    n = len(data)
    out: list[tuple[float, float]] = []
    for i, v in enumerate(data):
        if i + 1 == n or data[i + 1] != v:
            out.append((float(v), (i + 1) / n))
    return out


def cells_from_rows(rows) -> list[dict]:
    """Per (detector, algorithm, budget, seed) aggregates, recomputable any time."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        key = (row["detector"], row["algorithm"], row["budget"], row["seed"])
        groups.setdefault(key, []).append(row)
    cells = []
    for (det, algo, budget, seed), members in sorted(groups.items()):
        wins = [r for r in members if r["outcome"] == "success"]
        cells.append({
            "detector": det, "algorithm": algo, "budget": budget, "seed": seed,
            "attacked": len(members), "successes": len(wins),
            "asr": compute_asr(members),
            "mean_queries": (sum(r["queries_used"] for r in wins) / len(wins)
                             if wins else None),
            "mean_wall_ms": (sum(r["wall_ms"] for r in wins) / len(wins)
                             if wins else None),
        })
    return cells


def grid_from_rows(rows) -> list[dict]:
    """Per (detector, algorithm, budget) summaries pooled over seeds."""
    cells = cells_from_rows(rows)
    groups: dict[tuple, list[dict]] = {}
    for cell in cells:
        groups.setdefault((cell["detector"], cell["algorithm"], cell["budget"]),
                          []).append(cell)
    pooled: dict[tuple, list[dict]] = {}
    for row in rows:
        if row["outcome"] == "success":
            key = (row["detector"], row["algorithm"], row["budget"])
            pooled.setdefault(key, []).append(row)
    grid = []
    for key, members in sorted(groups.items()):
        det, algo, budget = key
        wins = pooled.get(key, [])
        queries = [r["queries_used"] for r in wins]
        walls = [r["wall_ms"] for r in wins]
        grid.append({
            "detector": det, "algorithm": algo, "budget": budget,
            "asr_mean": sum(c["asr"] for c in members) / len(members),
            "asr_by_seed": {c["seed"]: c["asr"] for c in members},
            "successes": len(wins),
            "attacked": sum(c["attacked"] for c in members),
            "mean_queries": sum(queries) / len(queries) if queries else None,
            "mean_wall_ms": sum(walls) / len(walls) if walls else None,
            "qt_cdf": compute_cdf(queries) if queries else None,
            "wall_cdf": compute_cdf(walls) if walls else None,
        })
    return grid


# ---------------------------------------------------------------------------
# Detector construction


def _corpus_api_ids(corpus: Corpus) -> list[str]:
    # Donor components can be injected mid-attack, so their calls must be
    # mapped too or the cluster features would raise on adversarial samples.
    ids = set()
    for apps in (corpus.benign, corpus.malicious, corpus.donors):
        for apk in apps:
            for comp in apk.code.components:
                ids.update(call.api_id for call in comp.api_calls)
    return sorted(ids)


def _featurize(features: str, apks, corpus: Corpus, cluster_count: int,
               seed: int):
    if features == "binary":
        vocab = build_vocab(apks)
        return [extract_binary(a, vocab) for a in apks], None
    if features == "markov":
        fam = corpus.spec.api_family_count
        return [extract_markov(a, fam) for a in apks], None
    cmap = build_api_cluster_map(_corpus_api_ids(corpus), cluster_count, seed)
    return [extract_api_cluster(a, cmap) for a in apks], cmap


def train_detector(spec: DetectorSpec, corpus: Corpus,
                   train_apks=None) -> DetectorModel:
    """Train the detector a spec describes on the corpus train split."""
    if train_apks is None:
        train_apks, _ = corpus.train_test_split()
    if spec.kind == "ensemble":
        return make_default_ensemble(corpus, train_apks, seed=spec.train_seed,
                                     size=spec.ensemble_size)
    vectors, cmap = _featurize(spec.features, train_apks, corpus,
                               spec.cluster_count, spec.train_seed)
    labels = [a.ground_truth for a in train_apks]
    return train(spec.kind, vectors, labels, hyperparams=dict(spec.hyperparams),
                 seed=spec.train_seed, threshold=spec.threshold,
                 cluster_map=cmap)


# Member mix for the stock ensemble: mostly linear plus a spread of other
# model families and feature views, echoing a many-engine scanning service.
_ENSEMBLE_PLAN = (
    [("linear", "binary")] * 8 + [("forest", "binary")] * 3 +
    [("knn", "binary")] * 2 + [("mlp", "binary")] +
    [("linear", "markov")] * 3 + [("linear", "api_cluster")] * 3
)


def make_default_ensemble(corpus: Corpus, train_apks=None, seed: int = 0,
                          size: int = 20) -> DetectorModel:
    """Ensemble of `size` detectors, each fit on a stratified bootstrap."""
    if size < 1:
        raise ValueError("ensemble size must be >= 1")
    if train_apks is None:
        train_apks, _ = corpus.train_test_split()
    by_class: dict[str, list[ApkModel]] = {}
    for apk in train_apks:
        by_class.setdefault(apk.ground_truth, []).append(apk)
    if len(by_class) < 2:
        raise ValueError("ensemble training split contains a single class")

    members = []
    for i in range(size):
        kind, features = _ENSEMBLE_PLAN[i % len(_ENSEMBLE_PLAN)]
        rng = random.Random(derive_seed(seed, f"member:{i}"))
        sample: list[ApkModel] = []
        for apps in by_class.values():
            sample.extend(rng.choice(apps) for _ in range(len(apps)))
        vectors, cmap = _featurize(features, sample, corpus,
                                   cluster_count=24, seed=seed * 977 + i)
        labels = [a.ground_truth for a in sample]
        members.append(train(kind, vectors, labels, seed=seed * 977 + i,
                             cluster_map=cmap))
    return make_ensemble(members)


# ---------------------------------------------------------------------------
# The runner


def select_true_positives(model: DetectorModel, candidates, count: int,
                           master_seed: int, detector_name: str):
    """First `count` detected malicious samples in seed-shuffled order."""
    pool = list(candidates)
    random.Random(master_seed).shuffle(pool)
    cap = min(len(pool), 10 * count)
    picked = []
    examined = 0
    for apk in pool[:cap]:
        examined += 1
        if model_query(model, apk).label == "malicious":
            picked.append(apk)
            if len(picked) == count:
                return picked
    raise ValueError(
        f"detector {detector_name!r} yielded only {len(picked)} true positives "
        f"after examining {examined} candidates (requested {count})")


def _run_one(item, pset: PerturbationSet) -> dict:
    name, model, algo, budget, master, apk = item
    cfg = AttackConfig(budget=budget, algorithm=algo,
                       seed=derive_seed(master, apk.id))
    report = run_attack(Oracle(model), apk, pset, cfg)
    return {
        "sample_id": apk.id, "detector": name, "algorithm": algo,
        "budget": budget, "seed": master, "outcome": report.outcome,
        "queries_used": report.queries_used,
        "wall_ms": report.wall_time * 1000.0,
    }


def run_experiment(config: ExperimentConfig,
                   corpus: Corpus | None = None) -> MetricsReport:
    """Run the full detector x algorithm x budget x seed grid.

    The corpus may be passed directly; otherwise it is loaded from the
    configured path. Attack wall times never include this setup work.
    """
    if corpus is None:
        if config.corpus_path is None:
            raise ValueError("config has no corpus path and no corpus was given")
        path = Path(config.corpus_path)
        if not path.exists():
            raise FileNotFoundError(f"corpus file not found: {path}")
        corpus = load_corpus(path)

    train_apks, test_apks = corpus.train_test_split()
    if len({a.ground_truth for a in train_apks}) < 2:
        raise ValueError("corpus train split contains a single class")
    pset = build_perturbation_set(load_default_catalog(), corpus.donors,
                                  config.similarity_threshold)
    models = {spec.name: train_detector(spec, corpus, train_apks)
              for spec in config.detectors}
    malicious_test = [a for a in test_apks if a.ground_truth == "malicious"]

    work = []
    for spec in config.detectors:
        model = models[spec.name]
        for master in config.seeds:
            tps = select_true_positives(model, malicious_test,
                                         config.sample_count, master, spec.name)
            for algo in config.algorithms:
                for budget in config.budgets:
                    for apk in tps:
                        work.append((spec.name, model, algo, budget, master, apk))

    if config.workers == 1:
        rows = [_run_one(item, pset) for item in work]
    else:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            rows = list(pool.map(lambda item: _run_one(item, pset), work))

    rows.sort(key=lambda r: (r["detector"], r["algorithm"], r["budget"],
                             r["seed"], r["sample_id"]))
    return MetricsReport(config=config_to_dict(config), rows=tuple(rows),
                         cells=tuple(cells_from_rows(rows)),
                         grid=tuple(grid_from_rows(rows)))


def default_benchmark_config(sample_count: int = 100,
                             seeds=(0, 1, 2, 3, 4),
                             workers: int = 1) -> ExperimentConfig:
    return ExperimentConfig(
        detectors=(DetectorSpec(name="linear"),),
        algorithms=("pst", "mab", "random"),
        budgets=(10, 20, 30, 40),
        sample_count=sample_count, seeds=tuple(seeds), workers=workers)


# ---------------------------------------------------------------------------
# Serialization and presentation


def detector_spec_to_dict(spec: DetectorSpec) -> dict:
    return {"name": spec.name, "kind": spec.kind, "features": spec.features,
            "hyperparams": dict(spec.hyperparams),
            "cluster_count": spec.cluster_count, "train_seed": spec.train_seed,
            "threshold": spec.threshold, "ensemble_size": spec.ensemble_size}


def detector_spec_from_dict(d: dict) -> DetectorSpec:
    return DetectorSpec(
        name=d["name"], kind=d.get("kind", "linear"),
        features=d.get("features", "binary"),
        hyperparams=dict(d.get("hyperparams", {})),
        cluster_count=int(d.get("cluster_count", 24)),
        train_seed=int(d.get("train_seed", 0)),
        threshold=float(d.get("threshold", 0.5)),
        ensemble_size=int(d.get("ensemble_size", 20)))


def config_to_dict(config: ExperimentConfig) -> dict:
    return {
        "corpus_path": config.corpus_path,
        "detectors": [detector_spec_to_dict(s) for s in config.detectors],
        "algorithms": list(config.algorithms),
        "budgets": list(config.budgets),
        "sample_count": config.sample_count,
        "seeds": list(config.seeds),
        "similarity_threshold": config.similarity_threshold,
        "workers": config.workers,
    }


def config_from_dict(d: dict) -> ExperimentConfig:
    return ExperimentConfig(
        corpus_path=d.get("corpus_path"),
        detectors=tuple(detector_spec_from_dict(s) for s in d["detectors"]),
        algorithms=tuple(d.get("algorithms", ("pst", "mab", "random"))),
        budgets=tuple(int(b) for b in d.get("budgets", (10, 20, 30, 40))),
        sample_count=int(d.get("sample_count", 100)),
        seeds=tuple(int(s) for s in d.get("seeds", (0, 1, 2, 3, 4))),
        similarity_threshold=float(d.get("similarity_threshold", 0.5)),
        workers=int(d.get("workers", 1)))


def metrics_to_dict(report: MetricsReport) -> dict:
    grid = []
    for entry in report.grid:
        out = dict(entry)
        out["asr_by_seed"] = {str(k): v for k, v in entry["asr_by_seed"].items()}
        out["qt_cdf"] = [list(p) for p in entry["qt_cdf"]] if entry["qt_cdf"] else None
        out["wall_cdf"] = ([list(p) for p in entry["wall_cdf"]]
                           if entry["wall_cdf"] else None)
        grid.append(out)
    return {"config": report.config, "cells": list(report.cells), "grid": grid,
            "row_count": len(report.rows)}


def write_rows_csv(rows, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([
                row["sample_id"], row["detector"], row["algorithm"],
                row["budget"], row["seed"], row["outcome"],
                row["queries_used"], f"{row['wall_ms']:.3f}"])


def read_rows_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV columns: {reader.fieldnames}")
        rows = []
        for rec in reader:
            rows.append({
                "sample_id": rec["sample_id"], "detector": rec["detector"],
                "algorithm": rec["algorithm"], "budget": int(rec["budget"]),
                "seed": int(rec["seed"]), "outcome": rec["outcome"],
                "queries_used": int(rec["queries_used"]),
                "wall_ms": float(rec["wall_ms"])})
    return rows


def save_report(report: MetricsReport, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "report.json"
    csv_path = out / "rows.csv"
    with open(json_path, "w") as fh:
        json.dump(metrics_to_dict(report), fh, indent=2)
        fh.write("\n")
    write_rows_csv(report.rows, csv_path)
    return json_path, csv_path


def format_grid(report: dict) -> str:
    """Success-rate table, detectors and algorithms down, budgets across."""
    grid = report["grid"]
    budgets = sorted({entry["budget"] for entry in grid})
    header = f"{'detector':<12} {'algorithm':<10}" + "".join(
        f"  N={b:<5}" for b in budgets)
    lines = [header, "-" * len(header)]
    seen: dict[tuple[str, str], dict[int, float]] = {}
    for entry in grid:
        seen.setdefault((entry["detector"], entry["algorithm"]), {})[
            entry["budget"]] = entry["asr_mean"]
    for (det, algo), by_budget in sorted(seen.items()):
        cells = "".join(f"  {by_budget.get(b, float('nan')):<7.3f}"
                        for b in budgets)
        lines.append(f"{det:<12} {algo:<10}{cells}")
    return "\n".join(lines)
