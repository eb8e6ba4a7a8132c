"""Sensitive-API vocabulary, call listings and per-application API call graphs.

A call listing is a JSON document describing one application: its methods,
and for each method the ordered sequence of API invocations and calls to
other methods. Graphs are built per method and then spliced together along
method-call relations using entry/exit summaries, so no entry point is
needed and recursion terminates.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .errors import EmptyGraphError, EmptyVocabularyError, FormatError, ParseError, ValidationError

DEFAULT_PREFIX_FILTERS = ("Landroid", "Ljava", "Lcom/google")
LABELS = ("benign", "malware", "unknown")
GRAPH_FORMAT = "droidzero-graphs"
GRAPH_VERSION = 1


# ---------------------------------------------------------------------------
# vocabulary


@dataclass
class ApiVocab:
    apis: List[str]
    provenance: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.apis)) != len(self.apis):
            raise ValidationError("vocabulary identifiers must be unique")
        self.index = {api: i for i, api in enumerate(self.apis)}
        for api in self.apis:
            self.provenance.setdefault(api, "mapping-file")

    def __len__(self):
        return len(self.apis)

    def __contains__(self, api):
        return api in self.index

    def digest(self) -> str:
        """Stable hash of the ordered identifier list; models are bound to it."""
        h = hashlib.sha256()
        for api in self.apis:
            h.update(api.encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()


def _read_identifiers(path) -> List[str]:
    text = Path(path).read_text(encoding="utf-8")
    out = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        ident = line.split("\t", 1)[0].strip()
        if ident:
            out.append(ident)
    return out


def _unique(items: Iterable[str]) -> List[str]:
    return list(dict.fromkeys(items))


def load_api_mapping(path) -> ApiVocab:
    """Load a permission mapping file (``identifier[<TAB>permission]`` per line)."""
    apis = _unique(_read_identifiers(path))
    if not apis:
        raise EmptyVocabularyError(f"no API identifiers in {path}")
    return ApiVocab(apis, {a: "mapping-file" for a in apis})


def extend_vocab(vocab: ApiVocab, extra) -> ApiVocab:
    """Append identifiers from ``extra`` (a path or an iterable) keeping prior indices."""
    if isinstance(extra, (str, Path)):
        extra_ids = _unique(_read_identifiers(extra))
        if not extra_ids:
            raise EmptyVocabularyError(f"no API identifiers in {extra}")
    else:
        extra_ids = _unique(extra)
    apis = list(vocab.apis)
    prov = dict(vocab.provenance)
    for api in extra_ids:
        if api in vocab.index:
            if prov[api] == "mapping-file":
                prov[api] = "both"
        else:
            apis.append(api)
            prov[api] = "extension"
    return ApiVocab(apis, prov)


def restrict_vocab(vocab: ApiVocab, corpus: Sequence["CallListing"]) -> ApiVocab:
    """Keep only vocabulary entries invoked by at least one listing."""
    if not corpus:
        raise ValidationError("cannot restrict a vocabulary against an empty corpus")
    used = set()
    for listing in corpus:
        for method in listing.methods:
            for item in method.calls:
                if item.kind == "api" and item.target in vocab.index:
                    used.add(item.target)
    apis = [a for a in vocab.apis if a in used]
    if not apis:
        raise EmptyVocabularyError("no vocabulary API occurs in the corpus")
    return ApiVocab(apis, {a: vocab.provenance[a] for a in apis})


def save_vocab(vocab: ApiVocab, path):
    lines = [f"{api}\t{vocab.provenance[api]}" for api in vocab.apis]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_vocab(path) -> ApiVocab:
    """Read a vocabulary written by :func:`save_vocab`, keeping order and provenance."""
    apis, prov = [], {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        api, _, origin = line.partition("\t")
        apis.append(api)
        prov[api] = origin or "mapping-file"
    if not apis:
        raise EmptyVocabularyError(f"no API identifiers in {path}")
    return ApiVocab(apis, prov)


# ---------------------------------------------------------------------------
# call listings


@dataclass(frozen=True)
class CallItem:
    kind: str
    target: str


@dataclass(frozen=True)
class MethodListing:
    name: str
    calls: Tuple[CallItem, ...] = ()


@dataclass(frozen=True)
class CallListing:
    app_id: str
    label: str
    methods: Tuple[MethodListing, ...]
    family: Optional[str] = None
    timestamp: Optional[dt.date] = None

    def method_names(self) -> FrozenSet[str]:
        return frozenset(m.name for m in self.methods)


def _need(obj, key, kind, path):
    if not isinstance(obj, dict) or key not in obj:
        raise ParseError(f"{path}: missing required field {key!r}")
    value = obj[key]
    if not isinstance(value, kind):
        raise ParseError(f"{path}.{key}: expected {kind.__name__}, got {type(value).__name__}")
    return value


def listing_from_dict(doc, where="document") -> CallListing:
    if not isinstance(doc, dict):
        raise ParseError(f"{where}: expected an object")
    app_id = _need(doc, "app_id", str, where)
    if not app_id:
        raise ParseError(f"{where}.app_id: must be non-empty")
    label = _need(doc, "label", str, where)
    if label not in LABELS:
        raise ParseError(f"{where}.label: expected one of {LABELS}, got {label!r}")
    family = doc.get("family")
    if family is not None and not isinstance(family, str):
        raise ParseError(f"{where}.family: expected string or null")
    stamp = doc.get("timestamp")
    if stamp is not None:
        try:
            stamp = dt.date.fromisoformat(stamp)
        except (TypeError, ValueError):
            raise ParseError(f"{where}.timestamp: not an ISO-8601 date: {stamp!r}") from None
    methods = []
    seen = set()
    for i, m in enumerate(_need(doc, "methods", list, where)):
        mpath = f"{where}.methods[{i}]"
        name = _need(m, "name", str, mpath)
        if name in seen:
            raise ValidationError(f"{mpath}.name: duplicate method name {name!r}")
        seen.add(name)
        calls = []
        for j, c in enumerate(_need(m, "calls", list, mpath)):
            cpath = f"{mpath}.calls[{j}]"
            kind = _need(c, "kind", str, cpath)
            if kind not in ("api", "method"):
                raise ParseError(f"{cpath}.kind: expected 'api' or 'method', got {kind!r}")
            calls.append(CallItem(kind, _need(c, "target", str, cpath)))
        methods.append(MethodListing(name, tuple(calls)))
    return CallListing(app_id, label, tuple(methods), family, stamp)


def parse_call_listing(text: str, line: Optional[int] = None) -> CallListing:
    where = "document" if line is None else f"line {line}"
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{where}: malformed JSON ({exc.msg} at column {exc.colno})") from None
    return listing_from_dict(doc, where)


def listing_to_dict(listing: CallListing) -> dict:
    return {
        "app_id": listing.app_id,
        "label": listing.label,
        "family": listing.family,
        "timestamp": listing.timestamp.isoformat() if listing.timestamp else None,
        "methods": [
            {"name": m.name, "calls": [{"kind": c.kind, "target": c.target} for c in m.calls]}
            for m in listing.methods
        ],
    }


def serialize_call_listing(listing: CallListing) -> str:
    return json.dumps(listing_to_dict(listing), separators=(",", ":"))


def read_corpus(path) -> List[CallListing]:
    """One listing per line; blank lines are skipped."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                out.append(parse_call_listing(line, line=lineno))
    return out


def write_corpus(path, listings: Iterable[CallListing]):
    with open(path, "w", encoding="utf-8") as fh:
        for listing in listings:
            fh.write(serialize_call_listing(listing))
            fh.write("\n")


# ---------------------------------------------------------------------------
# graph construction


@dataclass
class GraphFragment:
    entry: FrozenSet[int]
    exit: FrozenSet[int]
    edges: FrozenSet[Tuple[int, int]]
    nodes: FrozenSet[int]
    splice_points: Tuple[str, ...] = ()

    @property
    def passthrough(self) -> bool:
        return not self.entry and not self.exit and not self.edges


@dataclass
class ApiCallGraph:
    app_id: str
    label: str
    nodes: Tuple[int, ...]
    edges: FrozenSet[Tuple[int, int]]
    family: Optional[str] = None
    timestamp: Optional[dt.date] = None

    def __post_init__(self):
        self.nodes = tuple(sorted(set(self.nodes)))
        self.edges = frozenset((int(a), int(b)) for a, b in self.edges)
        if not self.nodes:
            raise EmptyGraphError(f"graph {self.app_id!r} has no nodes")
        present = set(self.nodes)
        for a, b in self.edges:
            if a not in present or b not in present:
                raise ValidationError(f"edge {(a, b)} of {self.app_id!r} leaves the node set")

    @property
    def num_nodes(self):
        return len(self.nodes)

    def adjacency(self, dtype=np.float64) -> np.ndarray:
        """Directed 0/1 adjacency over local positions (sorted vocabulary index order)."""
        pos = {v: i for i, v in enumerate(self.nodes)}
        A = np.zeros((len(self.nodes), len(self.nodes)), dtype=dtype)
        for a, b in self.edges:
            A[pos[a], pos[b]] = 1
        return A


def filter_call(item: CallItem, vocab: ApiVocab, prefix_filters=DEFAULT_PREFIX_FILTERS,
                methods: FrozenSet[str] = frozenset()) -> str:
    """Classify one call item as ``"api"``, ``"method"`` or ``"drop"``.

    Vocabulary membership wins over prefix filtering: the sensitive APIs
    themselves live under filtered namespaces such as ``Landroid``. Prefix
    filters therefore only ever discard items the vocabulary would
    discard too.
    """
    if item.kind == "api":
        if item.target in vocab.index:
            return "api"
        return "drop"
    if item.kind == "method" and item.target in methods:
        return "method"
    return "drop"


def _kept_items(method: MethodListing, vocab, prefix_filters, methods):
    out = []
    for item in method.calls:
        verdict = filter_call(item, vocab, prefix_filters, methods)
        if verdict == "api":
            out.append(("api", vocab.index[item.target]))
        elif verdict == "method":
            out.append(("method", item.target))
    return out


def build_method_fragment(method: MethodListing, vocab: ApiVocab,
                          prefix_filters=DEFAULT_PREFIX_FILTERS,
                          methods: FrozenSet[str] = frozenset()) -> GraphFragment:
    """Per-method fragment ignoring callees: a chain over kept APIs.

    Kept method calls are recorded as splice points and break the chain;
    build_app_graph fills the gap with the callee's summary.
    """
    items = _kept_items(method, vocab, prefix_filters, methods)
    apis = [v for k, v in items if k == "api"]
    edges = set()
    prev = None
    for kind, value in items:
        if kind == "method":
            prev = None
            continue
        if prev is not None:
            edges.add((prev, value))
        prev = value
    return GraphFragment(
        entry=frozenset(apis[:1]),
        exit=frozenset(apis[-1:]),
        edges=frozenset(edges),
        nodes=frozenset(apis),
        splice_points=tuple(v for k, v in items if k == "method"),
    )


def method_summaries(listing: CallListing, vocab: ApiVocab,
                     prefix_filters=DEFAULT_PREFIX_FILTERS):
    """Entry/exit API sets and nullability for every method.

    ``nullable`` means the method can run to completion without touching a
    sensitive API, so callers connect straight through it. A method that
    never returns (unbounded recursion) has an empty exit set. Entry and exit
    sets are least fixed points of monotone union equations; iteration is
    capped at the method count, which suffices because every contribution
    travels along a simple path in the call relation.
    """
    names = listing.method_names()
    items = {m.name: _kept_items(m, vocab, prefix_filters, names) for m in listing.methods}
    order = sorted(items)

    terminates = {name: False for name in order}
    changed = True
    while changed:
        changed = False
        for name in order:
            if not terminates[name] and all(k == "api" or terminates[v] for k, v in items[name]):
                terminates[name] = True
                changed = True
    nullable = {name: False for name in order}
    changed = True
    while changed:
        changed = False
        for name in order:
            if not nullable[name] and all(k == "method" and nullable[v] for k, v in items[name]):
                nullable[name] = True
                changed = True

    def scan(seq, table):
        acc = set()
        for kind, value in seq:
            if kind == "api":
                acc.add(value)
                return acc
            acc |= table[value]
            if not nullable[value]:
                return acc
        return acc

    entry = {name: set() for name in order}
    exit_ = {name: set() for name in order}
    for _ in range(len(order) + 1):
        new_entry = {name: scan(items[name], entry) for name in order}
        new_exit = {name: scan(reversed(items[name]), exit_) if terminates[name] else set()
                    for name in order}
        if new_entry == entry and new_exit == exit_:
            break
        entry, exit_ = new_entry, new_exit
    return items, entry, exit_, nullable


def build_app_graph(listing: CallListing, vocab: ApiVocab,
                    prefix_filters=DEFAULT_PREFIX_FILTERS) -> ApiCallGraph:
    """Splice per-method fragments into one application graph.

    Between any two kept items u, v of a method (skipping nullable calls in
    between) every exit API of u is linked to every entry API of v; an API
    item is its own entry and exit. Every method contributes, so the graph
    does not depend on an entry point.
    """
    if len(vocab) == 0:
        raise EmptyVocabularyError("vocabulary is empty")
    items, entry, exit_, nullable = method_summaries(listing, vocab, prefix_filters)

    def first(kind, value):
        return {value} if kind == "api" else entry[value]

    def last(kind, value):
        return {value} if kind == "api" else exit_[value]

    nodes: Set[int] = set()
    edges: Set[Tuple[int, int]] = set()
    for seq in items.values():
        for i, (kind, value) in enumerate(seq):
            if kind == "api":
                nodes.add(value)
            src = last(kind, value)
            if not src:
                continue
            for kind2, value2 in seq[i + 1:]:
                for d in first(kind2, value2):
                    for s in src:
                        edges.add((s, d))
                if kind2 == "api" or not nullable[value2]:
                    break
    if not nodes:
        raise EmptyGraphError(f"application {listing.app_id!r} has no sensitive API calls")
    return ApiCallGraph(listing.app_id, listing.label, tuple(nodes), frozenset(edges),
                        listing.family, listing.timestamp)


# ---------------------------------------------------------------------------
# graph corpus persistence


def graph_to_dict(g: ApiCallGraph) -> dict:
    return {
        "app_id": g.app_id,
        "label": g.label,
        "family": g.family,
        "timestamp": g.timestamp.isoformat() if g.timestamp else None,
        "nodes": list(g.nodes),
        "edges": sorted([a, b] for a, b in g.edges),
    }


def graph_from_dict(d) -> ApiCallGraph:
    stamp = d.get("timestamp")
    return ApiCallGraph(
        app_id=d["app_id"],
        label=d["label"],
        nodes=tuple(d["nodes"]),
        edges=frozenset(tuple(e) for e in d["edges"]),
        family=d.get("family"),
        timestamp=dt.date.fromisoformat(stamp) if stamp else None,
    )


def write_graph_corpus(path, graphs: Iterable[ApiCallGraph], vocab: ApiVocab):
    header = {"format": GRAPH_FORMAT, "version": GRAPH_VERSION,
              "vocab_hash": vocab.digest(), "vocab_size": len(vocab)}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for g in graphs:
            fh.write(json.dumps(graph_to_dict(g), sort_keys=True) + "\n")


def read_graph_corpus(path, vocab: Optional[ApiVocab] = None) -> Tuple[dict, List[ApiCallGraph]]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty graph corpus")
    header = json.loads(lines[0])
    if header.get("format") != GRAPH_FORMAT or header.get("version") != GRAPH_VERSION:
        raise FormatError(f"{path}: expected {GRAPH_FORMAT} v{GRAPH_VERSION}, "
                          f"got {header.get('format')} v{header.get('version')}")
    if vocab is not None and header["vocab_hash"] != vocab.digest():
        raise FormatError(f"{path}: graph corpus was built with a different vocabulary")
    return header, [graph_from_dict(json.loads(ln)) for ln in lines[1:]]
