"""Support-set classification of unseen applications.

Zero-shot: an app is benign iff its mean similarity to a benign support set
strictly exceeds the threshold. Few-shot: the class with the larger mean
similarity wins. Ties go to malware in both modes.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import SamplingError, ValidationError
from .snn import SnnModel, similarity
from .vgae import Embedding

DEFAULT_SUPPORT_SIZE = 30
DEFAULT_THRESHOLD = 0.5


@dataclass
class SupportSet:
    role: str
    embeddings: np.ndarray
    app_ids: List[str]
    families: List[Optional[str]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.app_ids) == 0:
            raise ValidationError(f"{self.role} support set is empty")
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings))

    def __len__(self):
        return len(self.app_ids)


@dataclass
class Verdict:
    app_id: str
    label: str
    mean_benign: float
    threshold: Optional[float]
    mode: str
    mean_malware: Optional[float] = None
    support_families: Optional[List[str]] = None

    def to_dict(self):
        d = {"app_id": self.app_id, "mode": self.mode, "mean_benign": self.mean_benign,
             "mean_malware": self.mean_malware, "threshold": self.threshold, "label": self.label}
        if self.support_families is not None:
            d["support_families"] = self.support_families
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["app_id"], d["label"], d["mean_benign"], d.get("threshold"), d["mode"],
                   d.get("mean_malware"), d.get("support_families"))


def build_support_set(pool: Sequence[Embedding], role: str, size: int, rng) -> SupportSet:
    """Uniform draw without replacement from a role-homogeneous pool."""
    if size < 1:
        raise ValidationError("support size must be at least 1")
    wrong = [e.app_id for e in pool if e.label != role]
    if wrong:
        raise ValidationError(f"{role} support pool contains other labels: {wrong[:3]}")
    if len(pool) < size:
        raise SamplingError(f"{role} support pool has {len(pool)} members, {size} requested")
    pick = np.sort(rng.choice(len(pool), size=size, replace=False))
    chosen = [pool[i] for i in pick]
    return SupportSet(role, np.stack([e.vector for e in chosen]),
                      [e.app_id for e in chosen], [e.family for e in chosen])


def mean_score(scores) -> float:
    """Arithmetic mean with exactly rounded summation (order invariant)."""
    scores = [float(s) for s in np.ravel(scores)]
    if not scores:
        raise ValidationError("no similarity scores to average")
    return math.fsum(scores) / len(scores)


def support_scores(model: SnnModel, embedding, support: SupportSet):
    query = np.broadcast_to(np.asarray(embedding, dtype=support.embeddings.dtype),
                            support.embeddings.shape)
    return similarity(model, query, support.embeddings)


def decide_zero_shot(scores, threshold: float) -> tuple:
    if not 0 < threshold < 1:
        raise ValidationError(f"threshold must lie in (0, 1), got {threshold}")
    s = mean_score(scores)
    return ("benign" if s > threshold else "malware"), s


def decide_few_shot(benign_scores, malware_scores) -> tuple:
    b, m = mean_score(benign_scores), mean_score(malware_scores)
    return ("benign" if b > m else "malware"), b, m


def classify_zero_shot(model: SnnModel, embedding, support: SupportSet,
                       threshold: float = DEFAULT_THRESHOLD, app_id: str = "") -> Verdict:
    if len(support) == 0:
        raise ValidationError("empty support set")
    label, s = decide_zero_shot(support_scores(model, embedding, support), threshold)
    return Verdict(app_id, label, s, threshold, "zero-shot")


def classify_few_shot(model: SnnModel, embedding, benign: SupportSet, malware: SupportSet,
                      app_id: str = "") -> Verdict:
    if len(benign) == 0 or len(malware) == 0:
        raise ValidationError("few-shot classification needs both support sets")
    label, b, m = decide_few_shot(support_scores(model, embedding, benign),
                                  support_scores(model, embedding, malware))
    fams = sorted({f for f in malware.families if f})
    return Verdict(app_id, label, b, None, "few-shot", m, fams)


def app_rng(seed: int, app_id: str):
    """Per-application substream, independent of evaluation order."""
    key = zlib.crc32(app_id.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))


def classify_many(model: SnnModel, queries: Sequence[Embedding], benign_pool: Sequence[Embedding],
                  *, mode: str = "zero-shot", support_size: int = DEFAULT_SUPPORT_SIZE,
                  threshold: float = DEFAULT_THRESHOLD, seed: int = 0,
                  malware_support: Optional[SupportSet] = None,
                  fixed_support: bool = False) -> List[Verdict]:
    """Classify each query against a freshly drawn benign support set.

    With ``fixed_support`` one draw is shared by all queries.
    """
    if mode not in ("zero-shot", "few-shot"):
        raise ValidationError(f"unknown mode {mode!r}")
    if mode == "few-shot" and malware_support is None:
        raise ValidationError("few-shot mode needs a malware support set")
    shared = build_support_set(benign_pool, "benign", support_size, app_rng(seed, "")) \
        if fixed_support else None
    out = []
    for q in queries:
        support = shared or build_support_set(benign_pool, "benign", support_size,
                                              app_rng(seed, q.app_id))
        if mode == "zero-shot":
            out.append(classify_zero_shot(model, q.vector, support, threshold, q.app_id))
        else:
            out.append(classify_few_shot(model, q.vector, support, malware_support, q.app_id))
    return out
