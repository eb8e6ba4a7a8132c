import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from droidzero.callgraph import (
    ApiVocab, CallItem, CallListing, MethodListing, build_app_graph,
    build_method_fragment, extend_vocab, filter_call, load_api_mapping,
    parse_call_listing, read_graph_corpus, restrict_vocab,
    serialize_call_listing, write_graph_corpus,
)
from droidzero.errors import (
    EmptyGraphError, EmptyVocabularyError, FormatError, ParseError, ValidationError,
)
from oracles import reference_app_graph

VOCAB = ApiVocab(["A", "B", "C", "D", "Landroid/telephony/SmsManager;->sendTextMessage"])
A, B, C, D = 0, 1, 2, 3


def api(t):
    return CallItem("api", t)


def call(t):
    return CallItem("method", t)


def listing(*methods, app_id="app"):
    return CallListing(app_id, "benign", tuple(MethodListing(n, tuple(c)) for n, c in methods))


def edges_of(lst):
    g = build_app_graph(lst, VOCAB)
    return set(g.nodes), set(g.edges)


# -- vocabulary ----------------------------------------------------------


def test_mapping_size_and_dedup(tmp_path):
    p = tmp_path / "map.txt"
    p.write_text("# header\n" + "\n".join(f"Lx/Api{i};->f\tPERM" for i in range(2743)) + "\n")
    assert len(load_api_mapping(p)) == 2743
    p.write_text("Lx;->a\nLx;->a\nLx;->a\n")
    assert len(load_api_mapping(p)) == 1
    p.write_text("Lx;->a\nLx;->A\n")
    assert load_api_mapping(p).apis == ["Lx;->a", "Lx;->A"]


def test_mapping_errors(tmp_path):
    with pytest.raises(OSError):
        load_api_mapping(tmp_path / "missing.txt")
    p = tmp_path / "empty.txt"
    p.write_text("# nothing\n\n")
    with pytest.raises(EmptyVocabularyError):
        load_api_mapping(p)


def test_extend_vocab(tmp_path):
    base = tmp_path / "base.txt"
    base.write_text("\n".join(f"b{i}" for i in range(2743)))
    ext = tmp_path / "ext.txt"
    ext.write_text("\n".join(f"e{i}" for i in range(378)) + "\nb0\n")
    v = extend_vocab(load_api_mapping(base), ext)
    assert len(v) == 3121
    assert v.provenance["b0"] == "both" and v.provenance["e0"] == "extension"
    assert v.provenance["b1"] == "mapping-file"

    small = ApiVocab(["x", "y"])
    assert len(extend_vocab(small, ["x"])) == 2
    grown = extend_vocab(small, ["p", "q", "r"])
    assert len(grown) == 5
    assert grown.index["x"] == 0 and grown.index["y"] == 1


def test_restrict_vocab():
    v = ApiVocab(["a", "b", "c"])
    corpus = [listing(("m", [api("a"), api("zz")])), listing(("m", [api("c")]))]
    r = restrict_vocab(v, corpus)
    assert r.apis == ["a", "c"] and r.index == {"a": 0, "c": 1}
    with pytest.raises(EmptyVocabularyError):
        restrict_vocab(v, [listing(("m", [api("zz")]))])


# -- listing format ------------------------------------------------------


def test_parse_minimal():
    doc = '{"app_id": "x", "label": "benign", "methods": [{"name": "m", "calls": []}]}'
    lst = parse_call_listing(doc)
    assert len(lst.methods) == 1 and lst.methods[0].calls == ()


def test_parse_errors_name_the_field():
    doc = {"app_id": "x", "label": "malware", "methods": [
        {"name": "m", "calls": [{"kind": "api", "target": "A"}, {"kind": "jump", "target": "B"}]}]}
    with pytest.raises(ParseError, match=r"methods\[0\]\.calls\[1\]\.kind"):
        parse_call_listing(json.dumps(doc))
    with pytest.raises(ParseError, match="line 7"):
        parse_call_listing("{not json", line=7)
    dup = {"app_id": "x", "label": "benign", "methods": [{"name": "m", "calls": []}] * 2}
    with pytest.raises(ValidationError, match="duplicate"):
        parse_call_listing(json.dumps(dup))
    bad_label = {"app_id": "x", "label": "goodware", "methods": []}
    with pytest.raises(ParseError, match="label"):
        parse_call_listing(json.dumps(bad_label))


def test_unknown_fields_ignored():
    doc = {"app_id": "x", "label": "unknown", "sha256": "ff", "methods": [
        {"name": "m", "flags": 3, "calls": [{"kind": "api", "target": "A", "line": 9}]}]}
    assert parse_call_listing(json.dumps(doc)).methods[0].calls == (api("A"),)


names = st.text(alphabet="abcXY/;->", min_size=1, max_size=6)
items = st.builds(CallItem, st.sampled_from(["api", "method"]), names)
listings = st.builds(
    lambda app, label, fam, ms, day: CallListing(
        app, label, tuple(MethodListing(f"m{i}", tuple(c)) for i, c in enumerate(ms)), fam,
        None if day is None else __import__("datetime").date(2015, 1, 1) + __import__("datetime").timedelta(days=day)),
    names, st.sampled_from(["benign", "malware", "unknown"]), st.none() | names,
    st.lists(st.lists(items, max_size=5), max_size=4), st.none() | st.integers(0, 3000))


@given(listings)
@settings(max_examples=200)
def test_roundtrip(lst):
    assert parse_call_listing(serialize_call_listing(lst)) == lst


# -- filtering and fragments ---------------------------------------------


def test_filter_call_precedence():
    sms = api("Landroid/telephony/SmsManager;->sendTextMessage")
    assert filter_call(sms, VOCAB) == "api"
    assert filter_call(api("Ljava/lang/StringBuilder;->append"), VOCAB) == "drop"
    assert filter_call(call("nowhere"), VOCAB, methods=frozenset({"m"})) == "drop"
    assert filter_call(call("m"), VOCAB, methods=frozenset({"m"})) == "method"


def test_method_fragment():
    f = build_method_fragment(MethodListing("m", (api("A"), api("B"), api("A"))), VOCAB)
    assert f.nodes == {A, B} and f.edges == {(A, B), (B, A)}
    assert f.entry == {A} and f.exit == {A}
    assert build_method_fragment(MethodListing("m", (api("zz"),)), VOCAB).passthrough
    single = build_method_fragment(MethodListing("m", (api("C"),)), VOCAB)
    assert single.nodes == {C} and not single.edges and single.entry == single.exit == {C}


# -- splicing ------------------------------------------------------------


def test_splice_inline():
    lst = listing(("M1", [api("A"), call("M2"), api("B")]), ("M2", [api("C")]))
    assert edges_of(lst) == ({A, B, C}, {(A, C), (C, B)})


def test_splice_passthrough():
    lst = listing(("M1", [api("A"), call("M2"), api("B")]), ("M2", []))
    assert edges_of(lst) == ({A, B}, {(A, B)})


def test_splice_self_recursion():
    lst = listing(("M1", [api("A"), call("M1")]))
    assert edges_of(lst) == ({A}, {(A, A)})


def test_empty_graph_rejected():
    with pytest.raises(EmptyGraphError):
        build_app_graph(listing(("m", [api("zz"), call("m")])), VOCAB)


def test_no_calls_is_union_of_fragments():
    methods = [("m1", [api("A"), api("B")]), ("m2", [api("C"), api("A")])]
    nodes, edges = edges_of(listing(*methods))
    frags = [build_method_fragment(MethodListing(n, tuple(c)), VOCAB) for n, c in methods]
    assert nodes == set().union(*(f.nodes for f in frags))
    assert edges == set().union(*(f.edges for f in frags))


def random_listing(rng, n_methods=None):
    n_methods = n_methods or rng.randint(1, 5)
    pool = VOCAB.apis[:4] + ["Ljava/lang/Object;->hashCode", "Lcom/google/gson/Gson;->toJson"]
    names_ = [f"m{i}" for i in range(n_methods)]
    methods = []
    for name in names_:
        calls = []
        for _ in range(rng.randint(0, 6)):
            r = rng.random()
            if r < 0.55:
                calls.append(api(rng.choice(pool)))
            elif r < 0.92:
                calls.append(call(rng.choice(names_)))
            else:
                calls.append(call("Lext;->undeclared"))
        methods.append((name, calls))
    # guarantee at least one sensitive node
    methods[0][1].append(api(rng.choice(VOCAB.apis[:4])))
    return listing(*methods)


def test_matches_reference_interpreter():
    rng = random.Random(1234)
    for _ in range(300):
        lst = random_listing(rng)
        g = build_app_graph(lst, VOCAB)
        ref_nodes, ref_edges = reference_app_graph(lst, VOCAB)
        assert set(g.nodes) == ref_nodes, lst
        assert set(g.edges) == ref_edges, lst


def test_independent_of_declaration_order():
    rng = random.Random(99)
    for _ in range(100):
        lst = random_listing(rng)
        shuffled = list(lst.methods)
        rng.shuffle(shuffled)
        g1 = build_app_graph(lst, VOCAB)
        g2 = build_app_graph(CallListing(lst.app_id, lst.label, tuple(shuffled)), VOCAB)
        assert g1.nodes == g2.nodes and g1.edges == g2.edges


def test_prefix_filters_are_monotone():
    rng = random.Random(5)
    for _ in range(100):
        lst = random_listing(rng)
        full = build_app_graph(lst, VOCAB)
        fewer = build_app_graph(lst, VOCAB, prefix_filters=("Landroid",))
        assert set(full.nodes) <= set(fewer.nodes) and full.edges <= fewer.edges


def test_graph_corpus_roundtrip(tmp_path):
    lst = listing(("M1", [api("A"), call("M2"), api("B")]), ("M2", [api("C")]))
    g = build_app_graph(lst, VOCAB)
    path = tmp_path / "graphs.jsonl"
    write_graph_corpus(path, [g], VOCAB)
    header, graphs = read_graph_corpus(path, VOCAB)
    assert header["vocab_size"] == len(VOCAB)
    assert graphs[0].nodes == g.nodes and graphs[0].edges == g.edges
    with pytest.raises(FormatError):
        read_graph_corpus(path, ApiVocab(["other"]))
