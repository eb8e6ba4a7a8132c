"""Corpus manifests, train/test/support splitters and a synthetic corpus generator."""

from __future__ import annotations

import datetime as dt
import json
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .callgraph import CallItem, CallListing, MethodListing
from .errors import FormatError, ValidationError

MANIFEST_LABELS = ("benign", "malware", "indefinite")
SPLIT_FORMAT = "droidzero-split"
SPLIT_VERSION = 1
UNKNOWN_FAMILY = "<unknown>"


@dataclass(frozen=True)
class ManifestEntry:
    app_id: str
    label: str
    package_name: Optional[str] = None
    family: Optional[str] = None
    timestamp: Optional[dt.date] = None
    detection_ratio: Optional[float] = None

    def to_dict(self):
        d = asdict(self)
        d["timestamp"] = self.timestamp.isoformat() if self.timestamp else None
        return d

    @classmethod
    def from_dict(cls, d):
        if d.get("label") not in MANIFEST_LABELS:
            raise ValidationError(f"manifest entry {d.get('app_id')!r}: bad label {d.get('label')!r}")
        stamp = d.get("timestamp")
        return cls(d["app_id"], d["label"], d.get("package_name"), d.get("family"),
                   dt.date.fromisoformat(stamp) if stamp else None, d.get("detection_ratio"))


@dataclass
class Manifest:
    entries: List[ManifestEntry]

    def __post_init__(self):
        self.by_id = {e.app_id: e for e in self.entries}

    def __len__(self):
        return len(self.entries)

    def check_unique(self):
        if len(self.by_id) != len(self.entries):
            dup = [k for k, v in Counter(e.app_id for e in self.entries).items() if v > 1]
            raise ValidationError(f"duplicate app_ids in manifest: {dup[:5]}")

    def ids(self, label=None):
        return [e.app_id for e in self.entries if label is None or e.label == label]

    def families(self) -> Dict[str, List[str]]:
        fams = defaultdict(list)
        for e in self.entries:
            if e.label == "malware":
                fams[e.family or UNKNOWN_FAMILY].append(e.app_id)
        return dict(fams)


def read_manifest(path) -> Manifest:
    with open(path, encoding="utf-8") as fh:
        return Manifest([ManifestEntry.from_dict(json.loads(ln)) for ln in fh if ln.strip()])


def write_manifest(path, manifest: Manifest):
    with open(path, "w", encoding="utf-8") as fh:
        for e in manifest.entries:
            fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")


def clean_manifest(manifest: Manifest) -> Manifest:
    """Drop indefinite and contradictory entries; keep one app per package name."""
    labels = defaultdict(set)
    for e in manifest.entries:
        labels[e.app_id].add(e.label)
    keep = {}
    for e in manifest.entries:
        if e.label == "indefinite" or len(labels[e.app_id]) > 1:
            continue
        keep.setdefault(e.app_id, e)
    survivors = []
    seen_pkg = set()
    for app_id in sorted(keep):
        e = keep[app_id]
        if e.package_name is not None:
            if e.package_name in seen_pkg:
                continue
            seen_pkg.add(e.package_name)
        survivors.append(e)
    if not survivors:
        raise ValidationError("no entries survive manifest cleaning")
    return Manifest(survivors)


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitSpec:
    train: List[str]
    test: List[str]
    support: List[str]
    train_families: List[str] = field(default_factory=list)
    test_families: List[str] = field(default_factory=list)
    seed: Optional[int] = None
    test_fraction: Optional[float] = None
    kind: str = "family"

    def validate(self, manifest: Optional[Manifest] = None, zero_shot: bool = True):
        sets = {"train": set(self.train), "test": set(self.test), "support": set(self.support)}
        for a, b in (("train", "test"), ("train", "support"), ("test", "support")):
            both = sets[a] & sets[b]
            if both:
                raise ValidationError(f"{a} and {b} share app_ids: {sorted(both)[:3]}")
        shared = set(self.train_families) & set(self.test_families)
        if shared and self.kind != "time":
            raise ValidationError(f"families on both sides: {sorted(shared)}")
        if manifest is not None:
            side_fams = {}
            for side in ("train", "test"):
                side_fams[side] = {manifest.by_id[i].family or UNKNOWN_FAMILY
                                   for i in getattr(self, side)
                                   if manifest.by_id[i].label == "malware"}
            leak = (side_fams["train"] & side_fams["test"]) - {UNKNOWN_FAMILY}
            if leak and self.kind != "time":
                raise ValidationError(f"malware families on both sides: {sorted(leak)}")
            if zero_shot and any(manifest.by_id[i].label != "benign" for i in self.support):
                raise ValidationError("zero-shot support must be benign-only")
        return self


def _benign_partition(benign_ids, test_fraction, support_size, rng):
    ids = sorted(benign_ids)
    if support_size > len(ids):
        raise ValidationError(f"cannot withhold {support_size} support samples from {len(ids)} benign apps")
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    support = shuffled[:support_size]
    rest = shuffled[support_size:]
    n_test = int(round(test_fraction * len(rest)))
    return rest[n_test:], rest[:n_test], support


def assign_test_families(counts: Dict[str, int], test_fraction: float) -> List[str]:
    """Largest-first greedy choice of test families.

    A family is taken when it keeps the test side within the target; after
    the pass one overshooting family may be added if that lands closer to
    the target. The test side is never left empty.
    """
    target = test_fraction * sum(counts.values())
    order = sorted(counts, key=lambda f: (-counts[f], f))
    chosen, total = [], 0
    for fam in order:
        if total + counts[fam] <= target:
            chosen.append(fam)
            total += counts[fam]
    rest = [f for f in order if f not in chosen]
    if rest and total < target:
        best = min(rest, key=lambda f: (abs(total + counts[f] - target), -counts[f], f))
        if abs(total + counts[best] - target) < abs(total - target) or not chosen:
            chosen.append(best)
    return sorted(chosen)


def family_disjoint_split(manifest: Manifest, test_fraction: float = 0.2,
                          support_size: int = 100, rng=None, seed: Optional[int] = None) -> SplitSpec:
    if not 0 < test_fraction < 1:
        raise ValidationError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed) if rng is None else rng
    fams = manifest.families()
    named = {f: len(ids) for f, ids in fams.items() if f != UNKNOWN_FAMILY}
    if len(named) < 2:
        raise ValidationError("a family-disjoint split needs at least two malware families")
    test_fams = assign_test_families(named, test_fraction)
    train_fams = sorted(f for f in fams if f not in test_fams)
    mal_test = sorted(i for f in test_fams for i in fams[f])
    mal_train = sorted(i for f in train_fams for i in fams[f])
    b_train, b_test, support = _benign_partition(manifest.ids("benign"), test_fraction, support_size, rng)
    spec = SplitSpec(sorted(mal_train + b_train), sorted(mal_test + b_test), sorted(support),
                     train_fams, test_fams, seed, test_fraction, "family")
    return spec.validate(manifest)


def fold_assignment(counts: Dict[str, int], k: int = 5) -> List[List[str]]:
    """Largest family first onto the currently lightest fold (lowest index on ties)."""
    folds = [[] for _ in range(k)]
    load = [0] * k
    for fam in sorted(counts, key=lambda f: (-counts[f], f)):
        j = min(range(k), key=lambda i: (load[i], i))
        folds[j].append(fam)
        load[j] += counts[fam]
    return folds


def five_fold_families(manifest: Manifest, support_size: int = 0, seed: int = 0,
                       test_fraction: float = 0.2) -> List[SplitSpec]:
    fams = manifest.families()
    named = {f: len(ids) for f, ids in fams.items() if f != UNKNOWN_FAMILY}
    if len(named) < 5:
        raise ValidationError(f"five folds need at least five malware families, got {len(named)}")
    folds = fold_assignment(named, 5)
    specs = []
    for i, test_fams in enumerate(folds):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        train_fams = sorted(f for f in fams if f not in test_fams)
        mal_test = sorted(x for f in test_fams for x in fams[f])
        mal_train = sorted(x for f in train_fams for x in fams[f])
        b_train, b_test, support = _benign_partition(manifest.ids("benign"), test_fraction,
                                                     support_size, rng)
        spec = SplitSpec(sorted(mal_train + b_train), sorted(mal_test + b_test), sorted(support),
                         train_fams, sorted(test_fams), seed, test_fraction, f"fold{i + 1}")
        specs.append(spec.validate(manifest))
    return specs


def time_split(manifest: Manifest, cutoff: dt.date, support_size: int = 0, rng=None,
               seed: Optional[int] = None) -> SplitSpec:
    missing = [e.app_id for e in manifest.entries if e.timestamp is None]
    if missing:
        raise ValidationError(f"entries without timestamps: {missing[:3]}")
    rng = np.random.default_rng(seed) if rng is None else rng
    train = sorted(e.app_id for e in manifest.entries if e.timestamp <= cutoff)
    test = sorted(e.app_id for e in manifest.entries if e.timestamp > cutoff)
    if not train or not test:
        raise ValidationError(f"cutoff {cutoff} leaves an empty side "
                              f"({len(train)} train / {len(test)} test)")
    benign_train = [i for i in train if manifest.by_id[i].label == "benign"]
    if support_size > len(benign_train):
        raise ValidationError("not enough train-side benign apps for the support set")
    support = sorted(benign_train[j] for j in rng.choice(len(benign_train), support_size, replace=False))
    train = sorted(set(train) - set(support))

    def fams(ids):
        return sorted({manifest.by_id[i].family for i in ids
                       if manifest.by_id[i].label == "malware" and manifest.by_id[i].family})
    return SplitSpec(train, test, support, fams(train), fams(test), seed, None, "time").validate(manifest)


def write_split(path, spec: SplitSpec):
    header = {"format": SPLIT_FORMAT, "version": SPLIT_VERSION, "kind": spec.kind,
              "seed": spec.seed, "test_fraction": spec.test_fraction,
              "train_families": spec.train_families, "test_families": spec.test_families}
    lines = ["# " + json.dumps(header, sort_keys=True)]
    for side in ("train", "test", "support"):
        lines.extend(f"{side}\t{i}" for i in getattr(spec, side))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_split(path) -> SplitSpec:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# "):
        raise FormatError(f"{path}: missing split header")
    header = json.loads(lines[0][2:])
    if header.get("format") != SPLIT_FORMAT or header.get("version") != SPLIT_VERSION:
        raise FormatError(f"{path}: not a {SPLIT_FORMAT} v{SPLIT_VERSION} file")
    sides = {"train": [], "test": [], "support": []}
    for ln in lines[1:]:
        if ln.strip():
            side, app_id = ln.split("\t", 1)
            sides[side].append(app_id)
    return SplitSpec(sides["train"], sides["test"], sides["support"], header["train_families"],
                     header["test_families"], header["seed"], header["test_fraction"], header["kind"])


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SynthConfig:
    vocab_size: int = 60
    benign_motifs: int = 8
    families: int = 6
    motifs_per_family: int = 3
    motif_len: Tuple[int, int] = (3, 6)
    benign_graphs: int = 300
    graphs_per_family: int = 50
    noise_prob: float = 0.05
    seed: int = 0
    benign_motifs_per_app: Tuple[int, int] = (2, 5)
    family_motifs_per_app: Tuple[int, int] = (1, 3)
    cross_call_prob: float = 0.3
    filler_prob: float = 0.3
    suspicious_fraction: float = 0.4
    extension_fraction: float = 0.2
    # Family motifs chain 1-2 "behaviours" (short suspicious API chains)
    # shared by all families, so unseen families reuse known behaviours.
    behaviours: int = 6
    behaviour_len: Tuple[int, int] = (2, 3)
    behaviours_per_motif: Tuple[int, int] = (1, 2)
    date_range: Tuple[str, str] = ("2012-01-01", "2022-12-31")

    def validate(self):
        counts = (self.vocab_size, self.benign_motifs, self.families, self.motifs_per_family,
                  self.benign_graphs, self.graphs_per_family)
        if any(int(c) < 1 for c in counts):
            raise ValidationError("synthetic counts must be positive")
        lo, hi = self.motif_len
        if not 1 <= lo <= hi:
            raise ValidationError(f"bad motif length range {self.motif_len}")
        if int(self.behaviours) < 1:
            raise ValidationError("behaviours must be positive")
        for name in ("benign_motifs_per_app", "family_motifs_per_app", "behaviour_len",
                     "behaviours_per_motif"):
            a, b = getattr(self, name)
            if not 1 <= a <= b:
                raise ValidationError(f"bad range for {name}: {(a, b)}")
        for name in ("noise_prob", "cross_call_prob", "filler_prob"):
            if not 0 <= getattr(self, name) < 1:
                raise ValidationError(f"{name} must lie in [0, 1)")
        if not 0 < self.suspicious_fraction < 1 or not 0 <= self.extension_fraction < 1:
            raise ValidationError("pool fractions must lie in (0, 1)")
        n_susp = int(round(self.vocab_size * self.suspicious_fraction))
        if n_susp < 1 or self.vocab_size - n_susp < 1:
            raise ValidationError("vocabulary too small to hold benign and suspicious pools")
        if self.behaviour_len[1] > n_susp:
            raise ValidationError("behaviours longer than the suspicious pool")
        if self.behaviours_per_motif[1] > self.behaviours:
            raise ValidationError("behaviours_per_motif exceeds the number of behaviours")
        return self


FILLER_CALLS = (
    "Ljava/lang/StringBuilder;->append",
    "Ljava/lang/String;->length",
    "Landroid/util/Log;->d",
    "Lcom/google/gson/Gson;->toJson",
    "Landroid/view/View;->setVisibility",
)


def synth_vocabulary(config: SynthConfig) -> Tuple[List[str], List[str]]:
    """Mapping-file identifiers and extension identifiers of the synthetic vocabulary."""
    n_ext = int(round(config.vocab_size * config.extension_fraction))
    n_map = config.vocab_size - n_ext
    mapping = [f"Landroid/synth/Perm{i:03d};->invoke" for i in range(n_map)]
    extension = [f"Ljavax/synth/Crypto{i:03d};->invoke" for i in range(n_ext)]
    return mapping, extension


def _make_motifs(rng, count, pools, lengths, taken):
    motifs = []
    attempts = 0
    while len(motifs) < count:
        attempts += 1
        if attempts > 1000 * count:
            raise ValidationError("could not draw enough distinct motifs; enlarge the vocabulary")
        n = int(rng.integers(lengths[0], lengths[1] + 1))
        motif = tuple(pools(rng, n))
        if motif not in taken:
            taken.add(motif)
            motifs.append(motif)
    return motifs


def synth_generate(config: SynthConfig = SynthConfig()):
    """Generate (listings, manifest) from motif grammars.

    Benign apps chain 2-5 benign motifs through a handful of methods;
    malware of family k additionally embeds 1-3 of family k's motifs. A
    family motif concatenates one or two behaviours (short chains over a
    suspicious API pool shared by all families) with one benign-looking
    call spliced in, so families differ in how they combine behaviours.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    mapping, extension = synth_vocabulary(config)
    apis = mapping + extension
    n_susp = int(round(config.vocab_size * config.suspicious_fraction))
    order = rng.permutation(len(apis))
    suspicious = [apis[i] for i in sorted(order[:n_susp])]
    benign_pool = [apis[i] for i in sorted(order[n_susp:])]

    def benign_draw(r, n):
        return r.choice(benign_pool, size=n, replace=False if n <= len(benign_pool) else True)

    def behaviour_draw(r, n):
        return r.choice(suspicious, size=n, replace=False)

    taken = set()
    benign_motifs = _make_motifs(rng, config.benign_motifs, benign_draw, config.motif_len, taken)
    behaviours = _make_motifs(rng, config.behaviours, behaviour_draw, config.behaviour_len, taken)

    def family_draw(r, n):
        picks = r.choice(len(behaviours), size=n, replace=False)
        seq = [a for j in picks for a in behaviours[j]]
        # one benign-looking call keeps family motifs from being pure behaviour chains
        seq.insert(int(r.integers(1, len(seq))), benign_pool[int(r.integers(len(benign_pool)))])
        return seq

    family_motifs = [
        _make_motifs(rng, config.motifs_per_family, family_draw, config.behaviours_per_motif, taken)
        for _ in range(config.families)
    ]

    d0, d1 = (dt.date.fromisoformat(d) for d in config.date_range)
    span = (d1 - d0).days

    listings, entries = [], []

    def emit(app_id, label, family, motifs):
        methods = _methods_from_motifs(rng, app_id, motifs, apis, config)
        stamp = d0 + dt.timedelta(days=int(rng.integers(span + 1)))
        listings.append(CallListing(app_id, label, tuple(methods), family, stamp))
        ratio = 0.0 if label == "benign" else round(float(rng.uniform(0.1, 0.9)), 3)
        entries.append(ManifestEntry(app_id, label, f"com.synth.{app_id}", family, stamp, ratio))

    lo, hi = config.benign_motifs_per_app
    for i in range(config.benign_graphs):
        k = int(rng.integers(lo, hi + 1))
        picks = [benign_motifs[j] for j in rng.integers(len(benign_motifs), size=k)]
        emit(f"benign{i:04d}", "benign", None, picks)

    flo, fhi = config.family_motifs_per_app
    for f in range(config.families):
        fam = f"family{f}"
        for i in range(config.graphs_per_family):
            k = int(rng.integers(lo, hi + 1))
            picks = [benign_motifs[j] for j in rng.integers(len(benign_motifs), size=k)]
            kf = int(rng.integers(flo, fhi + 1))
            picks += [family_motifs[f][j] for j in rng.integers(len(family_motifs[f]), size=kf)]
            order = rng.permutation(len(picks))
            emit(f"{fam}_{i:04d}", "malware", fam, [picks[j] for j in order])

    return listings, Manifest(entries)


def _methods_from_motifs(rng, app_id, motifs, apis, config: SynthConfig):
    """Lay motifs out as methods (one or two motifs each) with filler, noise and calls."""
    groups = []
    i = 0
    while i < len(motifs):
        take = 2 if i + 1 < len(motifs) and rng.random() < 0.3 else 1
        groups.append([a for m in motifs[i:i + take] for a in m])
        i += take
    names = [f"Lcom/{app_id}/C{j};->m{j}" for j in range(len(groups))]
    methods = []
    for j, seq in enumerate(groups):
        calls = []
        for api in seq:
            if rng.random() < config.filler_prob:
                calls.append(CallItem("api", FILLER_CALLS[int(rng.integers(len(FILLER_CALLS)))]))
            calls.append(CallItem("api", str(api)))
            if rng.random() < config.noise_prob:
                calls.append(CallItem("api", apis[int(rng.integers(len(apis)))]))
        if j + 1 < len(groups) and rng.random() < config.cross_call_prob:
            target = names[int(rng.integers(j + 1, len(groups)))]
            calls.insert(int(rng.integers(len(calls) + 1)), CallItem("method", target))
        methods.append(MethodListing(names[j], tuple(calls)))
    return methods
