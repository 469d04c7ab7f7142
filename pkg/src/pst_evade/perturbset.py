"""Perturbation-set construction from the Android catalog and benign donors,
keyword extraction, keyword similarity, and semantic clustering."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import json

from .catalog import AndroidCatalog
from .corpus import (
    CODE_KINDS,
    Corpus,
    InjectablePayload,
    Permission,
    _component_from_dict,
    _component_to_dict,
    _declared_from_dict,
    _declared_to_dict,
)

MANIFEST_KINDS = ("uses_feature", "permission", "activity_action",
                  "broadcast_action", "category")
INJECT_KINDS = ("inject_service", "inject_receiver", "inject_provider")
PERTURBATION_KINDS = MANIFEST_KINDS + INJECT_KINDS

DEFAULT_SIMILARITY_THRESHOLD = 0.5

_FEATURE_PREFIXES = ("android.hardware.", "android.software.")


@dataclass(frozen=True)
class Perturbation:
    kind: str
    payload: object
    keywords: tuple[str, ...] = ()

    @property
    def key(self) -> str:
        """Stable identifier used in attack traces and reports."""
        if self.kind == "permission":
            return f"permission:{self.payload.name}"
        if self.kind in INJECT_KINDS:
            p = self.payload
            return f"{self.kind}:{p.source_apk_id}/{p.declared.name}"
        return f"{self.kind}:{self.payload}"


@dataclass(frozen=True)
class PerturbationGroup:
    members: tuple[Perturbation, ...]
    keywords: frozenset[str]

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class PerturbationSet:
    perturbations: tuple[Perturbation, ...]
    groups: tuple[PerturbationGroup, ...]
    threshold: float

    def __len__(self) -> int:
        return len(self.perturbations)


def keyword_extract(p: Perturbation) -> list[str]:
    """Semantic keywords of a manifest perturbation's payload name."""
    if p.kind == "permission":
        name = p.payload.name
    elif p.kind in ("activity_action", "broadcast_action", "category"):
        name = p.payload
    elif p.kind == "uses_feature":
        name = p.payload
        for prefix in _FEATURE_PREFIXES:
            if name.startswith(prefix):
                return name[len(prefix):].split(".")
        raise ValueError(f"feature name lacks a known prefix: {name}")
    else:
        raise ValueError(f"no keywords for perturbation kind: {p.kind}")
    segment = name.rsplit(".", 1)[-1]
    return [tok.upper() for tok in segment.split("_") if tok]


def keyword_similarity(c_i: PerturbationGroup, c_j: PerturbationGroup) -> float:
    """Identical-keyword count over the smaller group's keyword-set size."""
    if not c_i.keywords or not c_j.keywords:
        raise ValueError("keyword similarity needs non-empty keyword sets")
    overlap = len(c_i.keywords & c_j.keywords)
    return overlap / min(len(c_i.keywords), len(c_j.keywords))


def cluster_perturbations(perturbations: Sequence[Perturbation],
                          threshold: float = DEFAULT_SIMILARITY_THRESHOLD
                          ) -> list[PerturbationGroup]:
    """Greedy agglomerative merge: repeatedly merge the first pair (lexicographic
    enumeration over current positions) whose similarity strictly exceeds the
    threshold, until no pair qualifies."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError("similarity threshold must lie in (0, 1]")
    groups = [PerturbationGroup(members=(p,), keywords=frozenset(p.keywords))
              for p in perturbations]
    merged = True
    while merged:
        merged = False
        for i in range(len(groups)):
            for j in range(i + 1, len(groups)):
                if keyword_similarity(groups[i], groups[j]) > threshold:
                    groups[i] = PerturbationGroup(
                        members=groups[i].members + groups[j].members,
                        keywords=groups[i].keywords | groups[j].keywords)
                    del groups[j]
                    merged = True
                    break
            if merged:
                break
    return groups


def leaf_path(group: PerturbationGroup) -> tuple[str, ...]:
    """Position of a group in the selection tree, as labels below the root."""
    first = group.members[0]
    kind = first.kind
    if kind == "uses_feature":
        bucket = ("hardware" if first.payload.startswith("android.hardware.")
                  else "software")
        return ("manifest", "uses_feature", bucket)
    if kind == "permission":
        return ("manifest", "permission", first.payload.protection_level)
    if kind == "activity_action":
        return ("manifest", "action_category", "activity_action")
    if kind == "broadcast_action":
        return ("manifest", "action_category", "broadcast")
    if kind == "category":
        return ("manifest", "action_category", "category")
    if kind in INJECT_KINDS:
        return ("code", kind.removeprefix("inject_"))
    raise ValueError(f"unknown perturbation kind: {kind}")


def _manifest_perturbations(catalog: AndroidCatalog) -> list[Perturbation]:
    out: list[Perturbation] = []
    for name in catalog.hardware_features + catalog.software_features:
        out.append(Perturbation(kind="uses_feature", payload=name))
    for name, level in catalog.permissions:
        if level == "dangerous":
            continue
        out.append(Perturbation(kind="permission",
                                payload=Permission(name, level)))
    for name in catalog.activity_actions:
        out.append(Perturbation(kind="activity_action", payload=name))
    for name in catalog.broadcast_actions:
        out.append(Perturbation(kind="broadcast_action", payload=name))
    for name in catalog.categories:
        out.append(Perturbation(kind="category", payload=name))
    return [Perturbation(kind=p.kind, payload=p.payload,
                         keywords=tuple(keyword_extract(p))) for p in out]


def _donor_perturbations(donors) -> list[Perturbation]:
    out: list[Perturbation] = []
    for donor in donors:
        declared_code = [d for d in donor.manifest.declared_components
                         if d.kind in CODE_KINDS]
        if len(declared_code) != len(donor.code.components):
            raise ValueError(f"donor {donor.id} declarations do not match its code")
        for decl, comp in zip(declared_code, donor.code.components):
            if decl.kind != comp.kind:
                raise ValueError(f"donor {donor.id} component order is inconsistent")
            if not comp.functions:
                continue  # nothing to inject
            funcs = set(comp.functions)
            edges = tuple(e for e in donor.code.edges
                          if e[0] in funcs and e[1] in funcs)
            payload = InjectablePayload(source_apk_id=donor.id, declared=decl,
                                        component=comp, edges=edges)
            out.append(Perturbation(kind="inject_" + comp.kind, payload=payload))
    return out


def build_perturbation_set(catalog: AndroidCatalog, donors=(),
                           threshold: float = DEFAULT_SIMILARITY_THRESHOLD
                           ) -> PerturbationSet:
    """One perturbation per eligible catalog entry (dangerous permissions are
    excluded) plus one injection per non-empty donor component; manifest
    perturbations are then clustered per tree position."""
    perturbations = _manifest_perturbations(catalog) + _donor_perturbations(donors)
    if not perturbations:
        raise ValueError("no eligible catalog entries and no donor components")

    by_path: dict[tuple[str, ...], list[Perturbation]] = {}
    for p in perturbations:
        path = leaf_path(PerturbationGroup(members=(p,), keywords=frozenset(p.keywords)))
        by_path.setdefault(path, []).append(p)

    groups: list[PerturbationGroup] = []
    for path in sorted(by_path):
        bucket = by_path[path]
        if path[0] == "code":
            groups.extend(PerturbationGroup(members=(p,), keywords=frozenset())
                          for p in bucket)
        else:
            groups.extend(cluster_perturbations(bucket, threshold))
    return PerturbationSet(perturbations=tuple(perturbations),
                           groups=tuple(groups), threshold=threshold)


def build_set_from_corpus(catalog: AndroidCatalog, corpus: Corpus,
                          threshold: float = DEFAULT_SIMILARITY_THRESHOLD
                          ) -> PerturbationSet:
    return build_perturbation_set(catalog, corpus.donors, threshold)


# ---------------------------------------------------------------------------
# Serialization


def _perturbation_to_dict(p: Perturbation) -> dict:
    doc: dict = {"kind": p.kind, "keywords": list(p.keywords)}
    if p.kind == "permission":
        doc["payload"] = {"name": p.payload.name,
                          "protection_level": p.payload.protection_level}
    elif p.kind in INJECT_KINDS:
        doc["payload"] = {
            "source_apk_id": p.payload.source_apk_id,
            "declared": _declared_to_dict(p.payload.declared),
            "component": _component_to_dict(p.payload.component),
            "edges": [list(e) for e in p.payload.edges],
        }
    else:
        doc["payload"] = p.payload
    return doc


def _perturbation_from_dict(doc: dict) -> Perturbation:
    kind = doc["kind"]
    if kind == "permission":
        payload: object = Permission(doc["payload"]["name"],
                                     doc["payload"]["protection_level"])
    elif kind in INJECT_KINDS:
        raw = doc["payload"]
        payload = InjectablePayload(
            source_apk_id=raw["source_apk_id"],
            declared=_declared_from_dict(raw["declared"]),
            component=_component_from_dict(raw["component"]),
            edges=tuple((a, b) for a, b in raw["edges"]))
    else:
        payload = doc["payload"]
    return Perturbation(kind=kind, payload=payload,
                        keywords=tuple(doc["keywords"]))


def pset_to_dict(pset: PerturbationSet) -> dict:
    key_index = {p.key: i for i, p in enumerate(pset.perturbations)}
    return {
        "threshold": pset.threshold,
        "perturbations": [_perturbation_to_dict(p) for p in pset.perturbations],
        "groups": [{"members": [key_index[m.key] for m in g.members],
                    "keywords": sorted(g.keywords)} for g in pset.groups],
    }


def pset_from_dict(doc: dict) -> PerturbationSet:
    perturbations = tuple(_perturbation_from_dict(d) for d in doc["perturbations"])
    groups = tuple(
        PerturbationGroup(members=tuple(perturbations[i] for i in g["members"]),
                          keywords=frozenset(g["keywords"]))
        for g in doc["groups"])
    return PerturbationSet(perturbations=perturbations, groups=groups,
                           threshold=doc["threshold"])


def save_pset(pset: PerturbationSet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(pset_to_dict(pset), sort_keys=True),
                          encoding="utf-8")


def load_pset(path: str | Path) -> PerturbationSet:
    with open(path, "r", encoding="utf-8") as fh:
        return pset_from_dict(json.load(fh))
