"""Pluggable malware-detector oracles: training, querying, and serialization.

All models are trained from scratch on numpy so that parameters are JSON-serializable
and training is bit-reproducible under a seed.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import ApkModel
from .features import (
    ApiClusterMap,
    FeatureVector,
    FeatureVocab,
    cluster_map_from_dict,
    cluster_map_to_dict,
    extract_api_cluster,
    extract_binary,
    extract_markov,
    vocab_from_dict,
    vocab_to_dict,
)

DETECTOR_KINDS = ("linear", "mlp", "knn", "forest", "ensemble")
LABELS = ("benign", "malicious")


@dataclass(frozen=True)
class Feedback:
    """Oracle answer: hard label plus malicious confidence in [0, 1]."""

    label: str
    confidence: float


@dataclass(frozen=True)
class FeatureSpace:
    """How a detector turns an app into a dense vector."""

    kind: str  # binary_string | markov_family | api_cluster
    vocab: FeatureVocab
    cluster_map: ApiClusterMap | None = None

    def extract(self, apk: ApkModel) -> FeatureVector:
        if self.kind == "binary_string":
            return extract_binary(apk, self.vocab)
        if self.kind == "markov_family":
            family_count = int(round(math.isqrt(len(self.vocab))))
            return extract_markov(apk, family_count)
        if self.kind == "api_cluster":
            if self.cluster_map is None:
                raise ValueError("api_cluster feature space needs a cluster map")
            return extract_api_cluster(apk, self.cluster_map)
        raise ValueError(f"unknown feature space kind: {self.kind}")

    def extract_dense(self, apk: ApkModel) -> np.ndarray:
        return self.extract(apk).to_dense()


@dataclass(frozen=True)
class TrainReport:
    tpr: float
    precision: float
    recall: float
    f1: float
    holdout_size: int
    on_holdout: bool


@dataclass
class DetectorModel:
    kind: str
    space: FeatureSpace
    params: dict
    hyperparams: dict
    threshold: float = 0.5
    report: TrainReport | None = None
    members: tuple["DetectorModel", ...] = ()

    def __post_init__(self):
        if self.kind not in DETECTOR_KINDS:
            raise ValueError(f"unknown detector kind: {self.kind}")


def _sigmoid(z: np.ndarray | float) -> np.ndarray | float:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -40.0, 40.0)))


def _as_matrix(vectors: Sequence[FeatureVector]) -> np.ndarray:
    return np.stack([v.to_dense() for v in vectors])


def _encode_labels(labels: Sequence[str]) -> np.ndarray:
    for lab in labels:
        if lab not in LABELS:
            raise ValueError(f"unknown label: {lab}")
    return np.array([1.0 if lab == "malicious" else 0.0 for lab in labels])


# ---------------------------------------------------------------------------
# Per-kind training


def _train_linear(x: np.ndarray, y: np.ndarray, hp: dict) -> dict:
    lr = float(hp.get("lr", 0.5))
    iters = int(hp.get("iters", 400))
    l2 = float(hp.get("l2", 1e-3))
    n, d = x.shape
    w = np.zeros(d)
    b = 0.0
    for _ in range(iters):
        p = _sigmoid(x @ w + b)
        err = p - y
        gw = x.T @ err / n + l2 * w
        gb = float(err.mean())
        w -= lr * gw
        b -= lr * gb
    return {"w": w, "b": b}


def _train_mlp(x: np.ndarray, y: np.ndarray, hp: dict, seed: int) -> dict:
    hidden = int(hp.get("hidden", 32))
    lr = float(hp.get("lr", 0.01))
    epochs = int(hp.get("epochs", 300))
    rng = np.random.default_rng(seed)
    n, d = x.shape
    w1 = rng.normal(0.0, 1.0 / max(1.0, math.sqrt(d)), size=(d, hidden))
    b1 = np.zeros(hidden)
    w2 = rng.normal(0.0, 1.0 / math.sqrt(hidden), size=hidden)
    b2 = 0.0
    # Adam, full batch.
    ms = [np.zeros_like(w1), np.zeros_like(b1), np.zeros_like(w2), 0.0]
    vs = [np.zeros_like(w1), np.zeros_like(b1), np.zeros_like(w2), 0.0]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    for t in range(1, epochs + 1):
        h = np.tanh(x @ w1 + b1)
        p = _sigmoid(h @ w2 + b2)
        err = (p - y) / n
        gw2 = h.T @ err
        gb2 = float(err.sum())
        gh = np.outer(err, w2) * (1.0 - h * h)
        gw1 = x.T @ gh
        gb1 = gh.sum(axis=0)
        grads = [gw1, gb1, gw2, gb2]
        new_params = []
        for i, (param, g) in enumerate(zip([w1, b1, w2, b2], grads)):
            ms[i] = beta1 * ms[i] + (1 - beta1) * g
            vs[i] = beta2 * vs[i] + (1 - beta2) * (g * g if i == 3 else np.square(g))
            mhat = ms[i] / (1 - beta1 ** t)
            vhat = vs[i] / (1 - beta2 ** t)
            new_params.append(param - lr * mhat / (np.sqrt(vhat) + eps))
        w1, b1, w2, b2 = new_params
        b2 = float(b2)
    return {"w1": w1, "b1": b1, "w2": w2, "b2": b2}


def _gini(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts / total
    return float(1.0 - np.sum(p * p))


def _build_tree(x: np.ndarray, y: np.ndarray, idx: np.ndarray, depth: int,
                max_depth: int, min_leaf: int, n_feats: int,
                rng: np.random.Generator) -> dict:
    labels = y[idx]
    pos = int(labels.sum())
    neg = len(idx) - pos
    if depth >= max_depth or len(idx) < 2 * min_leaf or pos == 0 or neg == 0:
        return {"leaf": True, "vote": 1 if pos >= neg else 0}
    feats = rng.choice(x.shape[1], size=min(n_feats, x.shape[1]), replace=False)
    feats.sort()
    best = None
    parent_gini = _gini(np.array([neg, pos]))
    for f in feats:
        col = x[idx, f]
        values = np.unique(col)
        if len(values) < 2:
            continue
        thresholds = (values[:-1] + values[1:]) / 2.0
        for thr in thresholds:
            left = col <= thr
            nl = int(left.sum())
            nr = len(idx) - nl
            if nl < min_leaf or nr < min_leaf:
                continue
            lp = int(labels[left].sum())
            rp = pos - lp
            g = (nl * _gini(np.array([nl - lp, lp])) +
                 nr * _gini(np.array([nr - rp, rp]))) / len(idx)
            gain = parent_gini - g
            if best is None or gain > best[0] + 1e-12:
                best = (gain, int(f), float(thr), left)
    if best is None or best[0] <= 1e-12:
        return {"leaf": True, "vote": 1 if pos >= neg else 0}
    _, f, thr, left = best
    return {
        "leaf": False, "feature": f, "threshold": thr,
        "left": _build_tree(x, y, idx[left], depth + 1, max_depth, min_leaf, n_feats, rng),
        "right": _build_tree(x, y, idx[~left], depth + 1, max_depth, min_leaf, n_feats, rng),
    }


def _train_forest(x: np.ndarray, y: np.ndarray, hp: dict, seed: int) -> dict:
    n_trees = int(hp.get("trees", 32))
    max_depth = int(hp.get("max_depth", 8))
    min_leaf = int(hp.get("min_leaf", 2))
    rng = np.random.default_rng(seed)
    n, d = x.shape
    n_feats = max(1, int(math.sqrt(d)))
    trees = []
    for _ in range(n_trees):
        boot = rng.integers(0, n, n)
        trees.append(_build_tree(x, y, boot, 0, max_depth, min_leaf, n_feats, rng))
    return {"trees": trees}


def _tree_vote(tree: dict, x: np.ndarray) -> int:
    node = tree
    while not node["leaf"]:
        node = node["left"] if x[node["feature"]] <= node["threshold"] else node["right"]
    return int(node["vote"])


# ---------------------------------------------------------------------------
# Confidence + query


def confidence_from_dense(model: DetectorModel, x: np.ndarray) -> float:
    """Malicious confidence for an already-extracted dense vector."""
    kind = model.kind
    p = model.params
    if kind == "linear":
        return float(_sigmoid(float(np.dot(p["w"], x)) + p["b"]))
    if kind == "mlp":
        h = np.tanh(x @ p["w1"] + p["b1"])
        return float(_sigmoid(float(h @ p["w2"]) + p["b2"]))
    if kind == "knn":
        k = int(model.hyperparams.get("k", 3))
        train_x, train_y = p["x"], p["y"]
        d2 = np.sum(np.square(train_x - x), axis=1)
        order = np.lexsort((np.arange(len(d2)), d2))[:k]
        return float(train_y[order].mean())
    if kind == "forest":
        votes = [_tree_vote(t, x) for t in p["trees"]]
        return float(np.mean(votes))
    raise ValueError(f"no dense confidence for kind: {kind}")


def query(model: DetectorModel, apk: ApkModel) -> Feedback:
    """Black-box oracle answer for one app."""
    if model.kind == "ensemble":
        return ensemble_query(model.members, apk)
    x = model.space.extract_dense(apk)
    conf = confidence_from_dense(model, x)
    label = "malicious" if conf >= model.threshold else "benign"
    return Feedback(label=label, confidence=conf)


def ensemble_query(members: Sequence[DetectorModel], apk: ApkModel) -> Feedback:
    """Detection fraction over members; flagged malicious when any member fires."""
    if len(members) == 0:
        raise ValueError("ensemble has no members")
    hits = sum(1 for m in members if query(m, apk).label == "malicious")
    conf = hits / len(members)
    return Feedback(label="malicious" if conf > 0 else "benign", confidence=conf)


def make_ensemble(members: Sequence[DetectorModel]) -> DetectorModel:
    if len(members) == 0:
        raise ValueError("ensemble has no members")
    return DetectorModel(kind="ensemble", space=members[0].space, params={},
                         hyperparams={"members": len(members)}, threshold=0.0,
                         members=tuple(members))


# ---------------------------------------------------------------------------
# Training entry point


def _holdout_split(y: np.ndarray, seed: int, fraction: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed ^ 0x5EED)
    fit_idx: list[int] = []
    hold_idx: list[int] = []
    for cls in (0.0, 1.0):
        cls_idx = np.flatnonzero(y == cls)
        cls_idx = cls_idx[rng.permutation(len(cls_idx))]
        n_hold = int(round(len(cls_idx) * fraction)) if len(cls_idx) >= 4 else 0
        hold_idx.extend(cls_idx[:n_hold].tolist())
        fit_idx.extend(cls_idx[n_hold:].tolist())
    return np.array(sorted(fit_idx), dtype=int), np.array(sorted(hold_idx), dtype=int)


def _metrics(y_true: np.ndarray, y_pred: np.ndarray, holdout: bool) -> TrainReport:
    tp = float(np.sum((y_true == 1) & (y_pred == 1)))
    fn = float(np.sum((y_true == 1) & (y_pred == 0)))
    fp = float(np.sum((y_true == 0) & (y_pred == 1)))
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return TrainReport(tpr=recall, precision=precision, recall=recall, f1=f1,
                       holdout_size=len(y_true), on_holdout=holdout)


def train(kind: str, vectors: Sequence[FeatureVector], labels: Sequence[str],
          hyperparams: dict | None = None, seed: int = 0, threshold: float = 0.5,
          cluster_map: ApiClusterMap | None = None) -> DetectorModel:
    """Train one detector on labeled feature vectors. Deterministic under a seed."""
    if kind == "ensemble":
        raise ValueError("train ensemble members individually and use make_ensemble")
    if kind not in DETECTOR_KINDS:
        raise ValueError(f"unknown detector kind: {kind}")
    if len(vectors) == 0:
        raise ValueError("empty training set")
    if len(vectors) != len(labels):
        raise ValueError("vectors and labels differ in length")
    hp = dict(hyperparams or {})
    y = _encode_labels(labels)
    if len(set(labels)) < 2:
        raise ValueError("training set must contain both classes")
    vocab = vectors[0].vocab
    for v in vectors:
        if v.vocab is not vocab and v.vocab.keys != vocab.keys:
            raise ValueError("feature vectors disagree on vocabulary")
    x = _as_matrix(vectors)

    fit_idx, hold_idx = _holdout_split(y, seed)
    x_fit, y_fit = x[fit_idx], y[fit_idx]

    if kind == "knn":
        k = int(hp.get("k", 3))
        if k % 2 == 0:
            raise ValueError("knn neighbor count must be odd")
        if k > len(fit_idx):
            raise ValueError("knn neighbor count exceeds training size")
        params = {"x": x_fit, "y": y_fit}
    elif kind == "linear":
        params = _train_linear(x_fit, y_fit, hp)
    elif kind == "mlp":
        params = _train_mlp(x_fit, y_fit, hp, seed)
    else:
        params = _train_forest(x_fit, y_fit, hp, seed)

    space = FeatureSpace(kind=vocab.kind, vocab=vocab, cluster_map=cluster_map)
    model = DetectorModel(kind=kind, space=space, params=params, hyperparams=hp,
                          threshold=threshold)
    eval_idx = hold_idx if len(hold_idx) > 0 else fit_idx
    preds = np.array([
        1.0 if confidence_from_dense(model, x[i]) >= threshold else 0.0 for i in eval_idx
    ])
    model.report = _metrics(y[eval_idx], preds, holdout=len(hold_idx) > 0)
    return model


# ---------------------------------------------------------------------------
# Serialization


def _params_to_jsonable(kind: str, params: dict) -> dict:
    if kind == "linear":
        return {"w": params["w"].tolist(), "b": float(params["b"])}
    if kind == "mlp":
        return {"w1": params["w1"].tolist(), "b1": params["b1"].tolist(),
                "w2": params["w2"].tolist(), "b2": float(params["b2"])}
    if kind == "knn":
        return {"x": params["x"].tolist(), "y": params["y"].tolist()}
    if kind == "forest":
        return {"trees": params["trees"]}
    return {}


def _params_from_jsonable(kind: str, doc: dict) -> dict:
    if kind == "linear":
        return {"w": np.array(doc["w"]), "b": float(doc["b"])}
    if kind == "mlp":
        return {"w1": np.array(doc["w1"]), "b1": np.array(doc["b1"]),
                "w2": np.array(doc["w2"]), "b2": float(doc["b2"])}
    if kind == "knn":
        return {"x": np.array(doc["x"]), "y": np.array(doc["y"])}
    if kind == "forest":
        return {"trees": doc["trees"]}
    return {}


def vocab_hash(vocab: FeatureVocab) -> str:
    doc = json.dumps(vocab_to_dict(vocab), sort_keys=True)
    return hashlib.sha256(doc.encode("utf-8")).hexdigest()


def model_to_dict(model: DetectorModel) -> dict:
    doc = {
        "kind": model.kind,
        "threshold": model.threshold,
        "hyperparams": model.hyperparams,
        "feature_kind": model.space.kind,
        "vocab": vocab_to_dict(model.space.vocab),
        "vocab_hash": vocab_hash(model.space.vocab),
        "params": _params_to_jsonable(model.kind, model.params),
    }
    if model.space.cluster_map is not None:
        doc["cluster_map"] = cluster_map_to_dict(model.space.cluster_map)
    if model.report is not None:
        doc["report"] = {
            "tpr": model.report.tpr, "precision": model.report.precision,
            "recall": model.report.recall, "f1": model.report.f1,
            "holdout_size": model.report.holdout_size,
            "on_holdout": model.report.on_holdout,
        }
    if model.kind == "ensemble":
        doc["members"] = [model_to_dict(m) for m in model.members]
    return doc


def model_from_dict(doc: dict) -> DetectorModel:
    vocab = vocab_from_dict(doc["vocab"])
    cmap = cluster_map_from_dict(doc["cluster_map"]) if "cluster_map" in doc else None
    space = FeatureSpace(kind=doc["feature_kind"], vocab=vocab, cluster_map=cmap)
    report = None
    if "report" in doc:
        r = doc["report"]
        report = TrainReport(tpr=r["tpr"], precision=r["precision"], recall=r["recall"],
                             f1=r["f1"], holdout_size=r["holdout_size"],
                             on_holdout=r["on_holdout"])
    members = tuple(model_from_dict(m) for m in doc.get("members", []))
    return DetectorModel(kind=doc["kind"], space=space,
                         params=_params_from_jsonable(doc["kind"], doc["params"]),
                         hyperparams=doc["hyperparams"], threshold=doc["threshold"],
                         report=report, members=members)


def save_model(model: DetectorModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), sort_keys=True), encoding="utf-8")


def load_model(path: str | Path) -> DetectorModel:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
