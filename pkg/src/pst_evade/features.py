"""Feature families over the app model: binary string vectors, markov family-transition
matrices, and api-cluster indicator vectors."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Iterable, Iterator

import numpy as np

from .corpus import ApkModel, function_family

VOCAB_KINDS = ("binary_string", "markov_family", "api_cluster")


@dataclass(frozen=True)
class FeatureVocab:
    kind: str
    keys: tuple[str, ...]

    def __post_init__(self):
        if self.kind not in VOCAB_KINDS:
            raise ValueError(f"unknown vocab kind: {self.kind}")

    @cached_property
    def key_to_index(self) -> dict[str, int]:
        return {k: i for i, k in enumerate(self.keys)}

    def __len__(self) -> int:
        return len(self.keys)


@dataclass(frozen=True)
class FeatureVector:
    vocab: FeatureVocab
    values: dict[int, float]

    def to_dense(self) -> np.ndarray:
        out = np.zeros(len(self.vocab))
        if self.values:
            idx = np.fromiter(self.values.keys(), dtype=np.intp, count=len(self.values))
            val = np.fromiter(self.values.values(), dtype=np.float64, count=len(self.values))
            out[idx] = val
        return out


def binary_keys(apk: ApkModel) -> Iterator[str]:
    """Feature keys an app exhibits: manifest string sets plus api-call ids."""
    m = apk.manifest
    for name in m.uses_features:
        yield "feature:" + name
    for perm in m.permissions:
        yield "perm:" + perm.name
    for comp in m.declared_components:
        for action in comp.intent_actions:
            yield "action:" + action
        for cat in comp.intent_categories:
            yield "category:" + cat
    for comp in apk.code.components:
        for call in comp.api_calls:
            yield "api:" + call.api_id


def build_vocab(apks: Iterable[ApkModel]) -> FeatureVocab:
    """Binary-string vocabulary: the sorted union of keys over a training corpus."""
    keys: set[str] = set()
    n = 0
    for apk in apks:
        n += 1
        keys.update(binary_keys(apk))
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    return FeatureVocab(kind="binary_string", keys=tuple(sorted(keys)))


def extract_binary(apk: ApkModel, vocab: FeatureVocab) -> FeatureVector:
    """1.0 at each vocabulary key the app exhibits; out-of-vocabulary keys are ignored."""
    if vocab.kind != "binary_string":
        raise ValueError(f"binary extraction needs a binary_string vocab, got {vocab.kind}")
    index = vocab.key_to_index
    values: dict[int, float] = {}
    for key in binary_keys(apk):
        i = index.get(key)
        if i is not None:
            values[i] = 1.0
    return FeatureVector(vocab=vocab, values=values)


@lru_cache(maxsize=16)
def markov_vocab(family_count: int) -> FeatureVocab:
    keys = tuple(
        f"trans:{a}>{b}" for a in range(family_count) for b in range(family_count)
    )
    return FeatureVocab(kind="markov_family", keys=keys)


# Transition counts are cached per edge tuple: manifest-only perturbations reuse the
# same code graph object, so repeated queries skip the re-count.
_EDGE_COUNT_CACHE: dict[tuple[int, int], tuple[object, np.ndarray]] = {}


def _transition_counts(edges: tuple[tuple[str, str], ...], family_count: int) -> np.ndarray:
    key = (id(edges), family_count)
    hit = _EDGE_COUNT_CACHE.get(key)
    if hit is not None and hit[0] is edges:
        return hit[1]
    counts = np.zeros((family_count, family_count))
    for a, b in edges:
        fa, fb = function_family(a), function_family(b)
        if fa >= family_count or fb >= family_count:
            raise ValueError(
                f"edge family out of range for family_count={family_count}: {(a, b)}"
            )
        counts[fa, fb] += 1.0
    if len(_EDGE_COUNT_CACHE) > 256:
        _EDGE_COUNT_CACHE.clear()
    _EDGE_COUNT_CACHE[key] = (edges, counts)
    return counts


def extract_markov(apk: ApkModel, family_count: int) -> FeatureVector:
    """Row-normalized family-transition matrix of the call graph, flattened row-major.

    Entry (a, b) is the fraction of family-a out-edges that land in family b; families
    with no out-edges keep an all-zero row.
    """
    if family_count < 1:
        raise ValueError("family_count must be >= 1")
    counts = _transition_counts(apk.code.edges, family_count)
    row_sums = counts.sum(axis=1, keepdims=True)
    matrix = np.divide(counts, row_sums, out=np.zeros_like(counts), where=row_sums > 0)
    vocab = markov_vocab(family_count)
    flat = matrix.ravel()
    nz = np.flatnonzero(flat)
    return FeatureVector(vocab=vocab, values={int(i): float(flat[i]) for i in nz})


@dataclass(frozen=True)
class ApiClusterMap:
    """Total mapping from api id to cluster id."""

    cluster_count: int
    assignment: tuple[tuple[str, int], ...]

    @cached_property
    def lookup(self) -> dict[str, int]:
        return dict(self.assignment)


def build_api_cluster_map(api_ids: Iterable[str], cluster_count: int, seed: int) -> ApiClusterMap:
    """Seeded, balanced random partition of the api vocabulary into clusters."""
    ids = sorted(set(api_ids))
    if cluster_count < 1:
        raise ValueError("cluster_count must be >= 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    assignment = tuple(
        (ids[int(j)], int(rank % cluster_count)) for rank, j in enumerate(order)
    )
    return ApiClusterMap(cluster_count=cluster_count,
                         assignment=tuple(sorted(assignment)))


@lru_cache(maxsize=16)
def cluster_vocab(cluster_count: int) -> FeatureVocab:
    return FeatureVocab(kind="api_cluster",
                        keys=tuple(f"cluster:{i:03d}" for i in range(cluster_count)))


def extract_api_cluster(apk: ApkModel, cmap: ApiClusterMap) -> FeatureVector:
    """1.0 at cluster i when any api call mapped to cluster i occurs in the app."""
    lookup = cmap.lookup
    values: dict[int, float] = {}
    for comp in apk.code.components:
        for call in comp.api_calls:
            cluster = lookup.get(call.api_id)
            if cluster is None:
                raise ValueError(f"api id missing from cluster map: {call.api_id}")
            values[cluster] = 1.0
    return FeatureVector(vocab=cluster_vocab(cmap.cluster_count), values=values)


def vocab_to_dict(vocab: FeatureVocab) -> dict:
    return {"kind": vocab.kind, "keys": list(vocab.keys)}


def vocab_from_dict(d: dict) -> FeatureVocab:
    return FeatureVocab(kind=d["kind"], keys=tuple(d["keys"]))


def cluster_map_to_dict(cmap: ApiClusterMap) -> dict:
    return {"cluster_count": cmap.cluster_count,
            "assignment": [[a, c] for a, c in cmap.assignment]}


def cluster_map_from_dict(d: dict) -> ApiClusterMap:
    return ApiClusterMap(cluster_count=int(d["cluster_count"]),
                         assignment=tuple((a, int(c)) for a, c in d["assignment"]))
