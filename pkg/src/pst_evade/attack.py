"""Query-budgeted attack loops against a black-box detector oracle: the
tree-guided attack plus multi-armed-bandit and uniform-random baselines."""
from __future__ import annotations

import random
import time
from dataclasses import dataclass, field

from .corpus import ApkModel, apply_perturbation
from .detectors import DetectorModel, Feedback, query as model_query
from .perturbset import Perturbation, PerturbationSet, leaf_path
from .pstree import TreeConfig, adjust, build_tree, sample_path

ALGORITHMS = ("pst", "mab", "random")
OUTCOMES = ("success", "failure", "not_applicable")


class Oracle:
    """Black-box view of a detector: label + confidence per query, with a
    per-instance query counter."""

    def __init__(self, model: DetectorModel):
        self.model = model
        self.query_count = 0

    def query(self, apk: ApkModel) -> Feedback:
        self.query_count += 1
        return model_query(self.model, apk)


@dataclass(frozen=True)
class AttackConfig:
    budget: int
    algorithm: str = "pst"
    seed: int = 0
    count_initial_query: bool = False
    tree: TreeConfig = field(default_factory=TreeConfig)
    mab_prior: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("query budget must be >= 1")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm: {self.algorithm}")


@dataclass(frozen=True)
class AttackReport:
    sample_id: str
    outcome: str
    queries_used: int
    wall_time: float
    applied: tuple[str, ...]
    confidence_trace: tuple[float, ...]
    failure_reason: str | None = None
    adversarial: ApkModel | None = None


def _gate(oracle, apk: ApkModel, t0: float) -> tuple[Feedback, AttackReport | None]:
    fb = oracle.query(apk)
    if fb.label != "malicious":
        report = AttackReport(
            sample_id=apk.id, outcome="not_applicable", queries_used=0,
            wall_time=time.perf_counter() - t0, applied=(),
            confidence_trace=(fb.confidence,))
        return fb, report
    return fb, None


def _loop_budget(config: AttackConfig) -> tuple[int, int]:
    initial_cost = 1 if config.count_initial_query else 0
    return config.budget - initial_cost, initial_cost


def pst_attack(oracle, apk: ApkModel, pset: PerturbationSet,
               config: AttackConfig) -> AttackReport:
    """Tree-guided attack: sample a leaf group, apply it whole, query, adjust."""
    rng = random.Random(config.seed)
    t0 = time.perf_counter()
    fb0, early = _gate(oracle, apk, t0)
    if early is not None:
        return early
    tree = build_tree(pset.groups, config.tree)
    y = fb0.confidence
    current = apk
    applied: list[str] = []
    trace = [y]
    budget, queries = _loop_budget(config)
    reason = "budget_exhausted"
    outcome = "failure"
    for _ in range(budget):
        if tree.is_empty():
            reason = "tree_depleted"
            break
        path = sample_path(tree, rng)
        candidate = current
        for p in path.group.members:
            candidate, _ = apply_perturbation(candidate, p, rng)
        fb = oracle.query(candidate)
        queries += 1
        trace.append(fb.confidence)
        if fb.label == "benign":
            current = candidate
            applied.extend(m.key for m in path.group.members)
            outcome, reason = "success", None
            break
        adjust(tree, path.leaf_id, y, fb.confidence)
        if fb.confidence <= y:
            current = candidate
            applied.extend(m.key for m in path.group.members)
            y = fb.confidence
    return AttackReport(
        sample_id=apk.id, outcome=outcome, queries_used=queries,
        wall_time=time.perf_counter() - t0, applied=tuple(applied),
        confidence_trace=tuple(trace), failure_reason=reason,
        adversarial=current)


def second_layer_arms(pset: PerturbationSet) -> dict[str, tuple[Perturbation, ...]]:
    """Perturbations bucketed by their second-layer tree position, in fixed order."""
    order = ("uses_feature", "permission", "action_category",
             "service", "receiver", "provider")
    buckets: dict[str, list[Perturbation]] = {}
    for group in pset.groups:
        label = leaf_path(group)[1]
        buckets.setdefault(label, []).extend(group.members)
    return {label: tuple(buckets[label]) for label in order if label in buckets}


def mab_attack(oracle, apk: ApkModel, pset: PerturbationSet,
               config: AttackConfig) -> AttackReport:
    """Thompson sampling over second-layer arms; one perturbation per pull."""
    rng = random.Random(config.seed)
    t0 = time.perf_counter()
    fb0, early = _gate(oracle, apk, t0)
    if early is not None:
        return early
    arms = second_layer_arms(pset)
    labels = list(arms)
    a0, b0 = config.mab_prior
    alpha = {lab: a0 for lab in labels}
    beta = {lab: b0 for lab in labels}
    eps = config.tree.epsilon
    y = fb0.confidence
    current = apk
    applied: list[str] = []
    trace = [y]
    budget, queries = _loop_budget(config)
    outcome, reason = "failure", "budget_exhausted"
    for _ in range(budget):
        draws = [(rng.betavariate(alpha[lab], beta[lab]), i)
                 for i, lab in enumerate(labels)]
        lab = labels[max(draws)[1]]
        p = rng.choice(arms[lab])
        candidate, _ = apply_perturbation(current, p, rng)
        fb = oracle.query(candidate)
        queries += 1
        trace.append(fb.confidence)
        if fb.label == "benign":
            current = candidate
            applied.append(p.key)
            outcome, reason = "success", None
            break
        if fb.confidence < y - eps:
            alpha[lab] += 1
        else:
            beta[lab] += 1
        if fb.confidence <= y:
            current = candidate
            applied.append(p.key)
            y = fb.confidence
    return AttackReport(
        sample_id=apk.id, outcome=outcome, queries_used=queries,
        wall_time=time.perf_counter() - t0, applied=tuple(applied),
        confidence_trace=tuple(trace), failure_reason=reason,
        adversarial=current)


def random_attack(oracle, apk: ApkModel, pset: PerturbationSet,
                  config: AttackConfig) -> AttackReport:
    """Uniform draws with replacement onto an accumulating sample; no revert."""
    rng = random.Random(config.seed)
    t0 = time.perf_counter()
    fb0, early = _gate(oracle, apk, t0)
    if early is not None:
        return early
    current = apk
    applied: list[str] = []
    trace = [fb0.confidence]
    budget, queries = _loop_budget(config)
    outcome, reason = "failure", "budget_exhausted"
    for _ in range(budget):
        p = rng.choice(pset.perturbations)
        current, _ = apply_perturbation(current, p, rng)
        applied.append(p.key)
        fb = oracle.query(current)
        queries += 1
        trace.append(fb.confidence)
        if fb.label == "benign":
            outcome, reason = "success", None
            break
    return AttackReport(
        sample_id=apk.id, outcome=outcome, queries_used=queries,
        wall_time=time.perf_counter() - t0, applied=tuple(applied),
        confidence_trace=tuple(trace), failure_reason=reason,
        adversarial=current)


_DISPATCH = {"pst": pst_attack, "mab": mab_attack, "random": random_attack}


def run_attack(oracle, apk: ApkModel, pset: PerturbationSet,
               config: AttackConfig) -> AttackReport:
    return _DISPATCH[config.algorithm](oracle, apk, pset, config)


def report_to_dict(report: AttackReport) -> dict:
    return {
        "sample_id": report.sample_id,
        "outcome": report.outcome,
        "queries_used": report.queries_used,
        "wall_time": report.wall_time,
        "applied": list(report.applied),
        "confidence_trace": list(report.confidence_trace),
        "failure_reason": report.failure_reason,
    }
