"""Siamese similarity network over graph embeddings.

One tower (16 -> 128 -> 64 -> 32, relu) is applied to both inputs; the
element-wise absolute difference of the two tower outputs goes through a
head (32 -> 16 relu -> 1 sigmoid). Targets are 1 for same-class pairs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import SamplingError, ShapeError, ValidationError
from .numerics import (
    LossPass, OptimizerState, ParamSet, dense_layer, dtype_for, glorot_uniform,
    optimizer_step, relu, sigmoid, softplus,
)

log = logging.getLogger(__name__)

EMBED_DIM = 16
TOWER = (128, 64, 32)
HEAD = 16


@dataclass
class SnnTrainConfig:
    lr: float = 0.001
    epochs: int = 4
    optimizer: str = "sgd"
    pairs_per_epoch: Optional[int] = None  # None: twice the training set size
    batch_size: int = 64
    seed: int = 0
    float_mode: int = 64

    def __post_init__(self):
        if self.lr <= 0:
            raise ValidationError("learning rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be positive")
        if self.pairs_per_epoch is not None and self.pairs_per_epoch < 1:
            raise ValidationError("pairs_per_epoch must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        dtype_for(self.float_mode)


class Tower:
    """View of the shared tower weights. Both twins hold this same object."""

    names = ("tower.W1", "tower.b1", "tower.W2", "tower.b2", "tower.W3", "tower.b3")

    def __init__(self, params: ParamSet):
        self.params = params

    def __call__(self, x):
        return tower_forward(self.params, x)[-1]


class SnnModel:
    def __init__(self, params: ParamSet):
        self.params = params
        tower = Tower(params)
        self.twins = (tower, tower)

    @classmethod
    def init(cls, rng, dtype=np.float64):
        dims = (EMBED_DIM,) + TOWER
        p = {}
        for i, (a, b) in enumerate(zip(dims, dims[1:]), 1):
            p[f"tower.W{i}"] = glorot_uniform(rng, a, b, shape=(b, a), dtype=dtype)
            p[f"tower.b{i}"] = np.zeros(b, dtype=dtype)
        p["head.W1"] = glorot_uniform(rng, TOWER[-1], HEAD, shape=(HEAD, TOWER[-1]), dtype=dtype)
        p["head.b1"] = np.zeros(HEAD, dtype=dtype)
        p["head.W2"] = glorot_uniform(rng, HEAD, 1, shape=(1, HEAD), dtype=dtype)
        p["head.b2"] = np.zeros(1, dtype=dtype)
        return cls(ParamSet(p))

    @staticmethod
    def expected_shapes():
        dims = (EMBED_DIM,) + TOWER
        shapes = {}
        for i, (a, b) in enumerate(zip(dims, dims[1:]), 1):
            shapes[f"tower.W{i}"] = (b, a)
            shapes[f"tower.b{i}"] = (b,)
        shapes.update({"head.W1": (HEAD, TOWER[-1]), "head.b1": (HEAD,),
                       "head.W2": (1, HEAD), "head.b2": (1,)})
        return shapes


def _check_embedding(e):
    e = np.asarray(e)
    if e.shape[-1] != EMBED_DIM or e.ndim > 2:
        raise ShapeError(f"embedding must have length {EMBED_DIM}, got shape {e.shape}")
    return e


def tower_forward(p: ParamSet, x):
    acts = [x]
    for i in (1, 2, 3):
        acts.append(dense_layer(acts[-1], p[f"tower.W{i}"], p[f"tower.b{i}"], "relu"))
    return acts


def subnetwork_forward(embedding, model: SnnModel):
    return model.twins[0](_check_embedding(embedding))


def _head_logit(p: ParamSet, d):
    h = relu(d @ p["head.W1"].T + p["head.b1"])
    return h, (h @ p["head.W2"].T + p["head.b2"])[..., 0]


def similarity(model: SnnModel, e1, e2):
    """Sigmoid similarity; accepts single embeddings or stacked batches."""
    e1, e2 = _check_embedding(e1), _check_embedding(e2)
    if e1.shape != e2.shape:
        raise ShapeError(f"embedding shapes differ: {e1.shape} vs {e2.shape}")
    left, right = model.twins
    d = np.abs(left(e1) - right(e2))
    _, logit = _head_logit(model.params, d)
    return sigmoid(logit) if np.ndim(logit) else float(sigmoid(np.asarray([logit]))[0])


@dataclass
class PairSample:
    a: np.ndarray
    b: np.ndarray
    target: int


class SnnPairPass(LossPass):
    """Mean binary cross-entropy of similarity scores against pair targets."""

    def __init__(self, model: SnnModel, a, b, targets):
        super().__init__(model.params)
        self.a = np.atleast_2d(a)
        self.b = np.atleast_2d(b)
        self.t = np.atleast_1d(np.asarray(targets, dtype=self.a.dtype))

    def _forward(self):
        p = self.params
        acts_a = tower_forward(p, self.a)
        acts_b = tower_forward(p, self.b)
        diff = acts_a[-1] - acts_b[-1]
        d = np.abs(diff)
        h, x = _head_logit(p, d)
        loss = softplus(x) - self.t * x
        return float(loss.mean()), (acts_a, acts_b, diff, d, h, x)

    def _tower_backward(self, acts, g):
        p = self.params
        for i in (3, 2, 1):
            g = g * (acts[i] > 0)
            p.accumulate(f"tower.W{i}", g.T @ acts[i - 1])
            p.accumulate(f"tower.b{i}", g.sum(axis=0))
            g = g @ p[f"tower.W{i}"]

    def _backward(self, cache):
        acts_a, acts_b, diff, d, h, x = cache
        p = self.params
        dx = (sigmoid(x) - self.t) / len(self.t)
        p.accumulate("head.W2", (dx[:, None] * h).sum(axis=0)[None, :])
        p.accumulate("head.b2", np.array([dx.sum()], dtype=dx.dtype))
        dh = dx[:, None] * p["head.W2"][0] * (h > 0)
        p.accumulate("head.W1", dh.T @ d)
        p.accumulate("head.b1", dh.sum(axis=0))
        dd = dh @ p["head.W1"]
        ddiff = dd * np.sign(diff)
        self._tower_backward(acts_a, ddiff)
        self._tower_backward(acts_b, -ddiff)


def sample_pairs(embeddings, labels: Sequence[str], count: int, rng) -> List[PairSample]:
    """Half same-class, half different-class pairs (same gets the odd one).

    The first member is drawn uniformly from the eligible embeddings, the
    second uniformly from its own class (excluding itself) or from the
    other class. Draws are with replacement; output order is shuffled.
    """
    X = np.asarray(embeddings)
    labels = np.asarray(labels)
    n_same = (count + 1) // 2
    n_diff = count // 2
    classes = sorted(set(labels.tolist()))
    members = {c: np.flatnonzero(labels == c) for c in classes}

    pairs = []
    if n_same:
        small = [c for c in classes if len(members[c]) < 2]
        if small:
            raise SamplingError(f"classes {small} have fewer than two members for same-class pairs")
        for _ in range(n_same):
            i = int(rng.integers(len(labels)))
            pool = members[labels[i]]
            k = int(rng.integers(len(pool) - 1))
            if k >= int(np.searchsorted(pool, i)):
                k += 1
            pairs.append(PairSample(X[i], X[int(pool[k])], 1))
    if n_diff:
        if len(classes) < 2:
            raise SamplingError("different-class pairs need at least two classes")
        for _ in range(n_diff):
            i = int(rng.integers(len(labels)))
            others = np.flatnonzero(labels != labels[i])
            j = int(others[rng.integers(len(others))])
            pairs.append(PairSample(X[i], X[j], 0))
    order = rng.permutation(len(pairs))
    return [pairs[k] for k in order]


def train_snn(embeddings, labels: Sequence[str], config: SnnTrainConfig, rng=None):
    """Returns (model, history) where history holds the mean pair loss per epoch."""
    X = np.asarray(embeddings)
    labels = list(labels)
    if X.ndim != 2 or X.shape[1] != EMBED_DIM or len(X) != len(labels):
        raise ValidationError("embeddings must be an n x 16 array matching the labels")
    if len(set(labels)) < 2:
        raise ValidationError("both classes must be present to train the similarity network")
    dtype = dtype_for(config.float_mode)
    X = X.astype(dtype)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    model = SnnModel.init(rng, dtype=dtype)
    state = OptimizerState(config.optimizer, config.lr)
    count = config.pairs_per_epoch or 2 * len(X)

    history: List[Dict[str, float]] = []
    for epoch in range(config.epochs):
        pairs = sample_pairs(X, labels, count, rng)
        total = 0.0
        for start in range(0, len(pairs), config.batch_size):
            chunk = pairs[start:start + config.batch_size]
            lp = SnnPairPass(model, np.stack([s.a for s in chunk]), np.stack([s.b for s in chunk]),
                             [s.target for s in chunk])
            total += lp.forward() * len(chunk)
            model.params.zero_grad()
            lp.backward()
            optimizer_step(model.params, state)
        history.append({"loss": total / len(pairs)})
        log.debug("snn epoch %d loss %.5f", epoch, history[-1]["loss"])
    model.params.check_finite()
    return model, history
