"""Feature extraction: binary strings, markov transition matrices, api clusters."""
import numpy as np
import pytest

from apk_builders import apk, code_component, declared
from pst_evade.features import (
    ApiClusterMap,
    FeatureVocab,
    build_api_cluster_map,
    build_vocab,
    cluster_map_from_dict,
    cluster_map_to_dict,
    cluster_vocab,
    extract_api_cluster,
    extract_binary,
    extract_markov,
    markov_vocab,
    vocab_from_dict,
    vocab_to_dict,
)


def _feature_apk():
    comp = declared(actions=["A"], categories=["C"])
    code = code_component(api_ids=["api.a"], functions=["t.c0.f0@0"])
    return apk(features=["android.hardware.camera"], perms=[("P", "normal")],
               declared_components=[comp], components=[code])


def test_binary_keys_cover_all_families():
    from pst_evade.features import binary_keys
    assert set(binary_keys(_feature_apk())) == {
        "feature:android.hardware.camera", "perm:P", "action:A", "category:C",
        "api:api.a",
    }


def test_build_vocab_is_sorted_union():
    other = apk(apk_id="t001", perms=[("Q", "signature")])
    vocab = build_vocab([_feature_apk(), other])
    assert vocab.kind == "binary_string"
    assert vocab.keys == ("action:A", "api:api.a", "category:C",
                          "feature:android.hardware.camera", "perm:P", "perm:Q")


def test_build_vocab_rejects_empty():
    with pytest.raises(ValueError):
        build_vocab([])


def test_extract_binary_dense_values():
    other = apk(apk_id="t001", perms=[("Q", "signature")])
    vocab = build_vocab([_feature_apk(), other])
    vec = extract_binary(_feature_apk(), vocab)
    assert vec.to_dense().tolist() == [1.0, 1.0, 1.0, 1.0, 1.0, 0.0]


def test_extract_binary_ignores_unseen_keys():
    vocab = build_vocab([_feature_apk()])
    stranger = apk(apk_id="t002", perms=[("P", "normal"), ("UNSEEN", "normal")])
    vec = extract_binary(stranger, vocab)
    assert vec.to_dense().sum() == 1.0


def test_extract_binary_rejects_wrong_vocab_kind():
    with pytest.raises(ValueError):
        extract_binary(_feature_apk(), markov_vocab(2))


def test_vocab_rejects_unknown_kind():
    with pytest.raises(ValueError):
        FeatureVocab(kind="texture", keys=())


# ---------------------------------------------------------------------------
# Markov transition features


def test_markov_vocab_row_major():
    assert markov_vocab(2).keys == ("trans:0>0", "trans:0>1", "trans:1>0", "trans:1>1")


def test_markov_hand_computed_rows():
    # Family 0 has four out-edges: one to family 0 and three to family 1.
    comp = code_component(functions=["t.c0.f0@0", "t.c0.f1@0", "t.c0.f2@1",
                                     "t.c0.f3@1", "t.c0.f4@1"])
    app = apk(components=[comp],
              edges=[("t.c0.f0@0", "t.c0.f2@1"),
                     ("t.c0.f0@0", "t.c0.f3@1"),
                     ("t.c0.f1@0", "t.c0.f4@1"),
                     ("t.c0.f0@0", "t.c0.f1@0")])
    vec = extract_markov(app, 2)
    assert vec.values == {0: 0.25, 1: 0.75}
    assert vec.to_dense().tolist() == [0.25, 0.75, 0.0, 0.0]


def test_markov_zero_rows_stay_zero():
    comp = code_component(functions=["t.c0.f0@0", "t.c0.f1@1"])
    app = apk(components=[comp], edges=[("t.c0.f0@0", "t.c0.f1@1")])
    dense = extract_markov(app, 3).to_dense().reshape(3, 3)
    assert dense[0].sum() == 1.0
    assert dense[1].sum() == 0.0
    assert dense[2].sum() == 0.0


def test_markov_no_edges_is_empty():
    assert extract_markov(apk(), 4).values == {}


def test_markov_rejects_family_out_of_range():
    comp = code_component(functions=["t.c0.f0@0", "t.c0.f1@3"])
    app = apk(components=[comp], edges=[("t.c0.f0@0", "t.c0.f1@3")])
    with pytest.raises(ValueError):
        extract_markov(app, 2)


def test_markov_rejects_zero_families():
    with pytest.raises(ValueError):
        extract_markov(apk(), 0)


def test_markov_rows_normalized_on_corpus(small_corpus):
    fc = small_corpus.spec.api_family_count
    for app in small_corpus.malicious[:5]:
        rows = extract_markov(app, fc).to_dense().reshape(fc, fc)
        sums = rows.sum(axis=1)
        assert np.all((np.abs(sums - 1.0) < 1e-9) | (sums == 0.0))


def test_markov_equal_graphs_give_equal_vectors():
    def build():
        comp = code_component(functions=["t.c0.f0@0", "t.c0.f1@1"])
        return apk(components=[comp], edges=[("t.c0.f0@0", "t.c0.f1@1")])
    assert extract_markov(build(), 2).values == extract_markov(build(), 2).values


# ---------------------------------------------------------------------------
# Api cluster features


def test_cluster_map_is_balanced_and_total():
    cmap = build_api_cluster_map([f"api.{i}" for i in range(10)], 3, seed=4)
    sizes = {}
    for _, c in cmap.assignment:
        sizes[c] = sizes.get(c, 0) + 1
    assert sorted(sizes.values(), reverse=True) == [4, 3, 3]
    assert len(cmap.assignment) == 10


def test_cluster_map_deterministic_and_seed_sensitive():
    ids = [f"api.{i}" for i in range(40)]
    a = build_api_cluster_map(ids, 5, seed=1)
    b = build_api_cluster_map(ids, 5, seed=1)
    c = build_api_cluster_map(ids, 5, seed=2)
    assert a == b
    assert a != c


def test_extract_api_cluster_is_presence_not_count():
    cmap = ApiClusterMap(cluster_count=3, assignment=(("api.a", 2), ("api.b", 0)))
    comp = code_component(api_ids=["api.a", "api.a", "api.b"],
                          functions=["t.c0.f0@0"])
    vec = extract_api_cluster(apk(components=[comp]), cmap)
    assert vec.values == {2: 1.0, 0: 1.0}
    assert vec.to_dense().tolist() == [1.0, 0.0, 1.0]


def test_extract_api_cluster_rejects_unmapped_id():
    cmap = ApiClusterMap(cluster_count=2, assignment=(("api.a", 0),))
    comp = code_component(api_ids=["api.mystery"], functions=["t.c0.f0@0"])
    with pytest.raises(ValueError, match="api.mystery"):
        extract_api_cluster(apk(components=[comp]), cmap)


def test_cluster_vocab_keys():
    assert cluster_vocab(2).keys == ("cluster:000", "cluster:001")


# ---------------------------------------------------------------------------
# Serialization


def test_vocab_round_trip():
    vocab = build_vocab([_feature_apk()])
    assert vocab_from_dict(vocab_to_dict(vocab)) == vocab


def test_cluster_map_round_trip():
    cmap = build_api_cluster_map([f"api.{i}" for i in range(7)], 3, seed=9)
    assert cluster_map_from_dict(cluster_map_to_dict(cmap)) == cmap
