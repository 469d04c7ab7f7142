"""App model, corpus generator, and perturbation application."""
import random
import re

import pytest

from apk_builders import StubPerturbation, apk, code_component, declared
from pst_evade.catalog import load_default_catalog
from pst_evade.corpus import (
    ACTION_MAIN,
    CATEGORY_LAUNCHER,
    ApiCall,
    CodeComponent,
    CodeGraph,
    CorpusSpec,
    InjectablePayload,
    Permission,
    apk_to_dict,
    apply_perturbation,
    canonical_json,
    contains,
    corpus_from_dict,
    corpus_to_dict,
    function_family,
    generate_corpus,
    load_corpus,
    save_corpus,
    spec_from_dict,
    spec_to_dict,
    validate_apk,
    verify_isolation,
)

NAME_RE = re.compile(r"^[a-z0-9]{20}$")
PROCESS_RE = re.compile(r"^:[a-z0-9]{8}$")
DATA_URI_RE = re.compile(r"^scheme://[a-z0-9]{16}$")


# ---------------------------------------------------------------------------
# Function family labels


def test_function_family_parses_suffix():
    assert function_family("b012.c0.f3@7") == 7
    assert function_family("x@0") == 0


@pytest.mark.parametrize("bad", ["b012.c0.f3", "a@x", "a@", "a@-1"])
def test_function_family_rejects_malformed(bad):
    with pytest.raises(ValueError):
        function_family(bad)


# ---------------------------------------------------------------------------
# Generator


def test_corpus_counts_and_ids(small_corpus):
    assert len(small_corpus.benign) == 60
    assert len(small_corpus.malicious) == 60
    assert len(small_corpus.donors) == 12
    assert [a.id for a in small_corpus.benign[:2]] == ["b000", "b001"]
    assert [a.id for a in small_corpus.malicious[-1:]] == ["m059"]
    assert [a.id for a in small_corpus.donors[:2]] == ["d000", "d001"]
    assert all(a.ground_truth == "benign" for a in small_corpus.benign)
    assert all(a.ground_truth == "malicious" for a in small_corpus.malicious)
    assert all(a.ground_truth == "benign" for a in small_corpus.donors)


def test_generated_apps_are_valid(small_corpus):
    for app in small_corpus.benign + small_corpus.malicious + small_corpus.donors:
        validate_apk(app)
        assert verify_isolation(app)
        mains = [c for c in app.manifest.declared_components
                 if c.name.endswith(".Main")]
        assert len(mains) == 1
        assert ACTION_MAIN in mains[0].intent_actions
        assert CATEGORY_LAUNCHER in mains[0].intent_categories


def test_generated_function_ids_carry_families(small_corpus):
    app = small_corpus.malicious[0]
    fams = {function_family(f) for c in app.code.components for f in c.functions}
    assert fams
    assert max(fams) < small_corpus.spec.api_family_count


def test_generator_is_deterministic(small_corpus):
    again = generate_corpus(CorpusSpec(n_benign=60, n_malicious=60,
                                       donor_count=12, seed=11))
    assert canonical_json(corpus_to_dict(again)) == canonical_json(corpus_to_dict(small_corpus))


def test_generator_seed_changes_output():
    a = generate_corpus(CorpusSpec(n_benign=4, n_malicious=4, donor_count=2, seed=1))
    b = generate_corpus(CorpusSpec(n_benign=4, n_malicious=4, donor_count=2, seed=2))
    assert canonical_json(corpus_to_dict(a)) != canonical_json(corpus_to_dict(b))


def test_donor_component_scale():
    # Donor components per kind follow the configured means; 4-sigma Poisson bands.
    spec = CorpusSpec(n_benign=2, n_malicious=2, donor_count=100, seed=7)
    corpus = generate_corpus(spec)
    per_kind = {"service": 0, "receiver": 0, "provider": 0}
    func_counts = []
    for donor in corpus.donors:
        for comp in donor.code.components:
            per_kind[comp.kind] += 1
            if comp.kind == "service":
                func_counts.append(len(comp.functions))
    assert 66 <= per_kind["service"] <= 150
    assert 63 <= per_kind["receiver"] <= 145
    assert 5 <= per_kind["provider"] <= 44
    mean_funcs = sum(func_counts) / len(func_counts)
    assert 850 <= mean_funcs <= 896


def test_train_test_split_is_trailing_per_class(small_corpus):
    train, test = small_corpus.train_test_split()
    assert len(train) == 90 and len(test) == 30
    test_ids = [a.id for a in test]
    assert test_ids == [f"b{i:03d}" for i in range(45, 60)] + \
                       [f"m{i:03d}" for i in range(45, 60)]
    assert set(a.id for a in train).isdisjoint(test_ids)


# ---------------------------------------------------------------------------
# Perturbation application


def _plain_apk():
    main = declared(name="com.app.t000.Main", actions=[ACTION_MAIN],
                    categories=[CATEGORY_LAUNCHER], exported=True)
    comp = code_component(functions=["t000.c0.f0@0", "t000.c0.f1@1"],
                          api_ids=["api.pkg00.fn000"])
    return apk(features=["android.hardware.camera"], perms=[("P", "normal")],
               declared_components=[main], components=[comp],
               edges=[("t000.c0.f0@0", "t000.c0.f1@1")])


def test_add_uses_feature():
    rng = random.Random(5)
    out, present = apply_perturbation(
        _plain_apk(), StubPerturbation("uses_feature", "android.hardware.nfc"), rng)
    assert not present
    assert "android.hardware.nfc" in out.manifest.uses_features
    assert contains(_plain_apk(), out)


def test_uses_feature_noop_consumes_no_rng():
    rng = random.Random(5)
    state = rng.getstate()
    base = _plain_apk()
    out, present = apply_perturbation(
        base, StubPerturbation("uses_feature", "android.hardware.camera"), rng)
    assert present
    assert out is base
    assert rng.getstate() == state


def test_permission_noop_matches_by_name():
    # Same name at a different protection level still counts as present.
    out, present = apply_perturbation(
        _plain_apk(), StubPerturbation("permission", Permission("P", "signature")),
        random.Random(0))
    assert present
    out, present = apply_perturbation(
        _plain_apk(), StubPerturbation("permission", Permission("Q", "signature")),
        random.Random(0))
    assert not present
    assert Permission("Q", "signature") in out.manifest.permissions


def test_activity_action_creates_fresh_activity():
    out, present = apply_perturbation(
        _plain_apk(), StubPerturbation("activity_action", "android.intent.action.VIEW"),
        random.Random(7))
    assert not present
    added = [c for c in out.manifest.declared_components
             if "android.intent.action.VIEW" in c.intent_actions]
    assert len(added) == 1
    comp = added[0]
    assert comp.kind == "activity"
    assert NAME_RE.match(comp.name)
    assert PROCESS_RE.match(comp.process)
    assert DATA_URI_RE.match(comp.data_uri)
    assert comp.exported and comp.enabled
    assert comp.intent_categories == frozenset()
    assert len(out.code.components) == len(_plain_apk().code.components)


def test_broadcast_action_creates_receiver():
    out, _ = apply_perturbation(
        _plain_apk(),
        StubPerturbation("broadcast_action", "android.intent.action.BOOT_COMPLETED"),
        random.Random(7))
    added = [c for c in out.manifest.declared_components
             if "android.intent.action.BOOT_COMPLETED" in c.intent_actions]
    assert added[0].kind == "receiver"


def test_category_creates_activity_with_category():
    out, _ = apply_perturbation(
        _plain_apk(), StubPerturbation("category", "android.intent.category.DEFAULT"),
        random.Random(7))
    added = [c for c in out.manifest.declared_components
             if "android.intent.category.DEFAULT" in c.intent_categories]
    assert added[0].kind == "activity"
    assert added[0].intent_actions == frozenset()


def test_action_presence_anywhere_is_noop():
    rng = random.Random(7)
    state = rng.getstate()
    out, present = apply_perturbation(
        _plain_apk(), StubPerturbation("activity_action", ACTION_MAIN), rng)
    assert present
    assert rng.getstate() == state


def test_apply_is_deterministic_under_seed():
    p = StubPerturbation("activity_action", "android.intent.action.VIEW")
    a, _ = apply_perturbation(_plain_apk(), p, random.Random(13))
    b, _ = apply_perturbation(_plain_apk(), p, random.Random(13))
    assert canonical_json(apk_to_dict(a)) == canonical_json(apk_to_dict(b))


def _inject_payload():
    decl = declared(kind="service", name="com.donor.Svc0", exported=False,
                    enabled=False)
    comp = CodeComponent(kind="service", classes=3,
                         functions=("d000.c0.f0@0", "d000.c0.f1@1"),
                         api_calls=(ApiCall("api.pkg01.fn001", 0, 1),),
                         origin="original")
    return InjectablePayload(source_apk_id="d000", declared=decl, component=comp,
                             edges=(("d000.c0.f0@0", "d000.c0.f1@1"),))


def test_inject_service():
    base = _plain_apk()
    out, present = apply_perturbation(
        base, StubPerturbation("inject_service", _inject_payload()), random.Random(3))
    assert not present
    decls = {(c.kind, c.name): c for c in out.manifest.declared_components}
    injected_decl = decls[("service", "com.donor.Svc0")]
    assert injected_decl.exported and injected_decl.enabled
    assert PROCESS_RE.match(injected_decl.process)
    injected = [c for c in out.code.components if c.origin == "injected"]
    assert len(injected) == 1
    assert injected[0].functions == ("d000.c0.f0@0", "d000.c0.f1@1")
    # Edge diff touches only injected function ids.
    new_edges = set(out.code.edges) - set(base.code.edges)
    assert new_edges == {("d000.c0.f0@0", "d000.c0.f1@1")}
    injected_funcs = set(injected[0].functions)
    assert all(a in injected_funcs and b in injected_funcs for a, b in new_edges)
    assert contains(base, out)
    assert verify_isolation(out)
    validate_apk(out)


def test_inject_duplicate_is_noop():
    out, _ = apply_perturbation(
        _plain_apk(), StubPerturbation("inject_service", _inject_payload()),
        random.Random(3))
    rng = random.Random(4)
    state = rng.getstate()
    out2, present = apply_perturbation(
        out, StubPerturbation("inject_service", _inject_payload()), rng)
    assert present
    assert out2 is out
    assert rng.getstate() == state


def test_noop_keeps_rng_stream_aligned():
    # A no-op before a randomized apply must not shift its outcome.
    base = _plain_apk()
    noop = StubPerturbation("uses_feature", "android.hardware.camera")
    randomized = StubPerturbation("activity_action", "android.intent.action.VIEW")
    rng1 = random.Random(21)
    mid, _ = apply_perturbation(base, noop, rng1)
    a, _ = apply_perturbation(mid, randomized, rng1)
    b, _ = apply_perturbation(base, randomized, random.Random(21))
    assert canonical_json(apk_to_dict(a)) == canonical_json(apk_to_dict(b))


def test_unknown_perturbation_kind_raises():
    with pytest.raises(ValueError):
        apply_perturbation(_plain_apk(), StubPerturbation("rename_class", "x"),
                           random.Random(0))


def test_random_perturbation_chain_stays_additive(small_corpus):
    catalog = load_default_catalog()
    rng = random.Random(99)
    donor = small_corpus.donors[0]
    donor_comp = next(c for c in donor.code.components if c.functions)
    donor_decl = next(d for d in donor.manifest.declared_components
                      if d.kind == donor_comp.kind)
    funcs = set(donor_comp.functions)
    payload = InjectablePayload(
        source_apk_id=donor.id, declared=donor_decl, component=donor_comp,
        edges=tuple(e for e in donor.code.edges if e[0] in funcs and e[1] in funcs))
    pool = (
        [StubPerturbation("uses_feature", f) for f in catalog.hardware_features[:10]]
        + [StubPerturbation("permission", Permission(n, "normal"))
           for n in catalog.permission_names(["normal"])[:10]]
        + [StubPerturbation("activity_action", a) for a in catalog.activity_actions[:5]]
        + [StubPerturbation("broadcast_action", a) for a in catalog.broadcast_actions[:5]]
        + [StubPerturbation("category", c) for c in catalog.categories[:5]]
        + [StubPerturbation("inject_" + donor_comp.kind, payload)]
    )
    base = small_corpus.malicious[3]
    cur = base
    for _ in range(30):
        prev = cur
        cur, _ = apply_perturbation(cur, rng.choice(pool), rng)
        assert contains(prev, cur)
        validate_apk(cur)
    assert contains(base, cur)
    assert verify_isolation(cur)


# ---------------------------------------------------------------------------
# Containment and isolation edges


def test_contains_fails_on_removal():
    base = _plain_apk()
    stripped = apk(features=[], perms=[("P", "normal")],
                   declared_components=base.manifest.declared_components,
                   components=base.code.components, edges=base.code.edges)
    assert not contains(base, stripped)


def test_isolation_rejects_cross_origin_edge():
    orig = code_component(functions=["a.c0.f0@0"])
    inj = code_component(kind="receiver", functions=["d.c0.f0@0"], origin="injected")
    bad = apk(components=[orig, inj], edges=[("a.c0.f0@0", "d.c0.f0@0")])
    assert not verify_isolation(bad)
    with pytest.raises(ValueError):
        validate_apk(bad)


def test_validate_rejects_duplicate_declared():
    dup = declared(name="X")
    with pytest.raises(ValueError):
        validate_apk(apk(declared_components=[dup, dup]))


def test_validate_rejects_unknown_edge_endpoint():
    comp = code_component(functions=["a.c0.f0@0"])
    with pytest.raises(ValueError):
        validate_apk(apk(components=[comp], edges=[("a.c0.f0@0", "ghost@0")]))


# ---------------------------------------------------------------------------
# Serialization


def test_spec_round_trip():
    spec = CorpusSpec(n_benign=5, seed=42)
    assert spec_from_dict(spec_to_dict(spec)) == spec


def test_corpus_round_trip(small_corpus):
    doc = corpus_to_dict(small_corpus)
    back = corpus_from_dict(doc)
    assert canonical_json(corpus_to_dict(back)) == canonical_json(doc)


def test_corpus_file_round_trip(tmp_path):
    corpus = generate_corpus(CorpusSpec(n_benign=3, n_malicious=3, donor_count=2,
                                        seed=5))
    path = tmp_path / "corpus.json"
    save_corpus(corpus, path)
    back = load_corpus(path)
    assert canonical_json(corpus_to_dict(back)) == canonical_json(corpus_to_dict(corpus))
