"""Variational graph auto-encoder with a graph classification head.

Encoder: two shared relu GCN layers (hidden 32, 24) followed by two linear
GCN heads giving per-node mean and log-variance (latent 16). Decoder: inner
product. Training loss per graph is

    recon + kl / N + cross_entropy(logits, y)

where recon is a positive-weighted BCE over all N^2 node pairs, kl the
Gaussian KL to N(0, I) summed over nodes and dimensions, and the logits
come from a linear classifier over the mean-pooled node means.

Training runs on padded mini-batches. Node features are one-hot API
identities, so ``X @ W0`` is computed as a row gather of ``W0``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .callgraph import ApiCallGraph
from .errors import EmptyGraphError, ShapeError, ValidationError
from .numerics import (
    LossPass, OptimizerState, ParamSet, dtype_for, glorot_uniform, logsumexp,
    normalize_adjacency, optimizer_step, relu, sigmoid, softmax, softplus,
)

log = logging.getLogger(__name__)

CLASSES = ("benign", "malware")
HIDDEN = (32, 24)
LATENT = 16
PROB_CLIP = 1e-15


def label_index(label: str) -> int:
    try:
        return CLASSES.index(label)
    except ValueError:
        raise ValidationError(f"label must be benign or malware, got {label!r}") from None


@dataclass
class TrainConfig:
    lr: float = 0.001
    epochs: int = 300
    optimizer: str = "adam"
    batch_size: int = 32
    seed: int = 0
    float_mode: int = 64
    # "nodes": scale KL by 1/node count; "dataset": by 1/number of training graphs
    kl_norm: str = "nodes"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValidationError("learning rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.kl_norm not in ("nodes", "dataset"):
            raise ValidationError(f"kl_norm must be 'nodes' or 'dataset', got {self.kl_norm!r}")
        dtype_for(self.float_mode)


@dataclass
class VgaeModel:
    params: ParamSet
    vocab_size: int
    vocab_hash: str = ""
    hidden: tuple = HIDDEN
    latent: int = LATENT

    @classmethod
    def init(cls, vocab_size, rng, vocab_hash="", dtype=np.float64):
        h1, h2 = HIDDEN
        params = ParamSet({
            "W0": glorot_uniform(rng, vocab_size, h1, dtype=dtype),
            "W1": glorot_uniform(rng, h1, h2, dtype=dtype),
            "W_mu": glorot_uniform(rng, h2, LATENT, dtype=dtype),
            "W_logvar": glorot_uniform(rng, h2, LATENT, dtype=dtype),
            "W_cls": glorot_uniform(rng, LATENT, 2, dtype=dtype),
            "b_cls": np.zeros(2, dtype=dtype),
        })
        return cls(params, vocab_size, vocab_hash)

    @classmethod
    def zeros(cls, vocab_size, dtype=np.float64):
        model = cls.init(vocab_size, np.random.default_rng(0), dtype=dtype)
        for name, p in model.params.items():
            p.fill(0)
        return model

    def expected_shapes(self):
        h1, h2 = self.hidden
        return {"W0": (self.vocab_size, h1), "W1": (h1, h2), "W_mu": (h2, self.latent),
                "W_logvar": (h2, self.latent), "W_cls": (self.latent, 2), "b_cls": (2,)}


@dataclass
class LatentOutput:
    mu: np.ndarray
    logvar: np.ndarray
    z: np.ndarray
    eps: np.ndarray


@dataclass
class Embedding:
    vector: np.ndarray
    app_id: str
    label: str
    family: Optional[str] = None


# ---------------------------------------------------------------------------
# single-graph operations


def node_features(graph: ApiCallGraph, vocab_size: int, dtype=np.float64) -> np.ndarray:
    if graph.nodes and max(graph.nodes) >= vocab_size:
        raise ShapeError(f"node index {max(graph.nodes)} outside vocabulary of size {vocab_size}")
    X = np.zeros((graph.num_nodes, vocab_size), dtype=dtype)
    X[np.arange(graph.num_nodes), list(graph.nodes)] = 1
    return X


def _check_model(graph, model):
    if max(graph.nodes) >= model.vocab_size:
        raise ShapeError(f"graph {graph.app_id!r} uses node index {max(graph.nodes)}, "
                         f"model vocabulary has {model.vocab_size}")


def _encode_moments(graph, model):
    _check_model(graph, model)
    p = model.params
    A_hat = normalize_adjacency(graph.adjacency(), dtype=p["W0"].dtype)
    S0 = p["W0"][list(graph.nodes)]
    H1 = relu(A_hat @ S0)
    H2 = relu(A_hat @ (H1 @ p["W1"]))
    AH = A_hat @ H2
    return AH @ p["W_mu"], AH @ p["W_logvar"]


def encode(graph: ApiCallGraph, model: VgaeModel, rng=None, eps=None) -> LatentOutput:
    """Encode a graph; ``eps`` overrides the draw from ``rng``."""
    mu, logvar = _encode_moments(graph, model)
    if eps is None:
        rng = np.random.default_rng() if rng is None else rng
        eps = rng.standard_normal(mu.shape).astype(mu.dtype)
    eps = np.asarray(eps, dtype=mu.dtype)
    if eps.shape != mu.shape:
        raise ShapeError(f"eps shape {eps.shape} != {mu.shape}")
    z = mu + np.exp(0.5 * logvar) * eps
    return LatentOutput(mu, logvar, z, eps)


def decode(z) -> np.ndarray:
    """Edge probabilities sigmoid(z_i . z_j); symmetric by construction."""
    z = np.asarray(z)
    logits = z @ z.T
    logits = np.triu(logits) + np.triu(logits, 1).T
    return sigmoid(logits)


def recon_target(graph: ApiCallGraph, dtype=np.float64):
    """Symmetrised adjacency without self loops, and the positive-class weight."""
    A = graph.adjacency(dtype=dtype)
    T = ((A + A.T) > 0).astype(dtype)
    np.fill_diagonal(T, 0)
    n = T.shape[0]
    positives = T.sum()
    return T, (n * n - positives) / max(1.0, positives)


def recon_loss(graph: ApiCallGraph, P) -> float:
    n = graph.num_nodes
    if n == 0:
        raise EmptyGraphError("cannot reconstruct an empty graph")
    T, pos_weight = recon_target(graph)
    P = np.clip(np.asarray(P, dtype=np.float64), PROB_CLIP, 1 - PROB_CLIP)
    terms = pos_weight * T * np.log(P) + (1 - T) * np.log(1 - P)
    return float(-terms.mean())


def kl_loss(mu, logvar) -> float:
    mu, logvar = np.asarray(mu), np.asarray(logvar)
    if mu.shape != logvar.shape:
        raise ShapeError(f"mu {mu.shape} and logvar {logvar.shape} differ")
    return float(-0.5 * np.sum(1 + logvar - mu ** 2 - np.exp(logvar)))


def class_logits(mu, model: VgaeModel) -> np.ndarray:
    mu = np.asarray(mu)
    if mu.shape[0] == 0:
        raise EmptyGraphError("cannot pool an empty graph")
    return mu.mean(axis=0) @ model.params["W_cls"] + model.params["b_cls"]


def cross_entropy(logits, y: int) -> float:
    return float(logsumexp(np.asarray(logits)) - logits[y])


def total_loss(graph: ApiCallGraph, label: str, model: VgaeModel, rng=None, eps=None,
               kl_scale: Optional[float] = None):
    """Scalar training loss of one graph and its parts."""
    y = label_index(label)
    out = encode(graph, model, rng, eps)
    n = graph.num_nodes
    T, pos_weight = recon_target(graph, dtype=out.z.dtype)
    X = out.z @ out.z.T
    rec = float(np.mean(pos_weight * T * softplus(-X) + (1 - T) * softplus(X)))
    kl = kl_loss(out.mu, out.logvar)
    scale = 1.0 / n if kl_scale is None else kl_scale
    ce = cross_entropy(class_logits(out.mu, model), y)
    loss = rec + scale * kl + ce
    return loss, {"recon": rec, "kl": kl, "kl_scaled": scale * kl, "cls": ce}


def embed_graph(model: VgaeModel, graph: ApiCallGraph) -> Embedding:
    """Mean-pooled node means; no sampling."""
    if graph.num_nodes == 0:
        raise EmptyGraphError("cannot embed an empty graph")
    mu, _ = _encode_moments(graph, model)
    return Embedding(mu.mean(axis=0), graph.app_id, graph.label, graph.family)


def vgae_classify(model: VgaeModel, graph: ApiCallGraph):
    """Verdict of the classification head alone; equal probabilities go to malware."""
    mu, _ = _encode_moments(graph, model)
    probs = softmax(class_logits(mu, model))
    label = "benign" if probs[0] > probs[1] else "malware"
    return label, probs


# ---------------------------------------------------------------------------
# batched training pass


@dataclass
class PreparedGraph:
    idx: np.ndarray
    a_hat: np.ndarray
    target: np.ndarray
    pos_weight: float
    y: int

    @property
    def n(self):
        return len(self.idx)


def prepare(graph: ApiCallGraph, dtype=np.float64) -> PreparedGraph:
    if graph.num_nodes == 0:
        raise EmptyGraphError(f"graph {graph.app_id!r} is empty")
    T, pw = recon_target(graph, dtype=dtype)
    return PreparedGraph(np.array(graph.nodes, dtype=np.int64),
                         normalize_adjacency(graph.adjacency(), dtype=dtype),
                         T, pw, label_index(graph.label))


@dataclass
class GraphBatch:
    idx: np.ndarray        # B x N node vocabulary indices (0 on padding)
    mask: np.ndarray       # B x N
    a_hat: np.ndarray      # B x N x N, zero on padding
    target: np.ndarray     # B x N x N
    pos_weight: np.ndarray  # B
    n: np.ndarray          # B
    y: np.ndarray          # B

    @classmethod
    def from_prepared(cls, items: Sequence[PreparedGraph], dtype=np.float64):
        B = len(items)
        N = max(g.n for g in items)
        idx = np.zeros((B, N), dtype=np.int64)
        mask = np.zeros((B, N), dtype=dtype)
        a_hat = np.zeros((B, N, N), dtype=dtype)
        target = np.zeros((B, N, N), dtype=dtype)
        for b, g in enumerate(items):
            k = g.n
            idx[b, :k] = g.idx
            mask[b, :k] = 1
            a_hat[b, :k, :k] = g.a_hat
            target[b, :k, :k] = g.target
        return cls(idx, mask, a_hat, target,
                   np.array([g.pos_weight for g in items], dtype=dtype),
                   np.array([g.n for g in items], dtype=dtype),
                   np.array([g.y for g in items], dtype=np.int64))

    def draw_eps(self, rng, latent=LATENT):
        """Standard normal noise, drawn graph by graph so padding does not shift the stream."""
        eps = np.zeros(self.mask.shape + (latent,), dtype=self.mask.dtype)
        for b, k in enumerate(self.n.astype(int)):
            eps[b, :k] = rng.standard_normal((k, latent))
        return eps


class VgaePass(LossPass):
    """Mean total loss over a padded batch with frozen reparameterisation noise."""

    def __init__(self, model: VgaeModel, batch: GraphBatch, eps, kl_scale=None):
        super().__init__(model.params)
        self.batch = batch
        self.eps = eps
        self.kl_scale = (1.0 / batch.n) if kl_scale is None else np.full_like(batch.n, kl_scale)
        self.parts = None

    def _forward(self):
        p, bt = self.params, self.batch
        m = bt.mask[..., None]
        S0 = p["W0"][bt.idx] * m
        P1 = bt.a_hat @ S0
        H1 = relu(P1)
        P2 = bt.a_hat @ (H1 @ p["W1"])
        H2 = relu(P2)
        AH = bt.a_hat @ H2
        mu = AH @ p["W_mu"]
        lv = AH @ p["W_logvar"]
        std = np.exp(0.5 * lv)
        z = mu + std * self.eps
        X = z @ np.swapaxes(z, 1, 2)

        mask2 = bt.mask[:, :, None] * bt.mask[:, None, :]
        n2 = bt.n ** 2
        pw = bt.pos_weight[:, None, None]
        rec_terms = pw * bt.target * softplus(-X) + (1 - bt.target) * softplus(X)
        rec = (rec_terms * mask2).sum(axis=(1, 2)) / n2
        kl = -0.5 * np.sum(1 + lv - mu ** 2 - np.exp(lv), axis=(1, 2))
        pooled = mu.sum(axis=1) / bt.n[:, None]
        logits = pooled @ p["W_cls"] + p["b_cls"]
        ce = logsumexp(logits, axis=1) - logits[np.arange(len(bt.y)), bt.y]

        per_graph = rec + self.kl_scale * kl + ce
        self.parts = {"recon": rec, "kl": kl, "cls": ce, "total": per_graph}
        cache = (S0, P1, H1, P2, H2, AH, mu, lv, std, z, X, mask2, n2, pooled, logits)
        return float(per_graph.mean()), cache

    def _backward(self, cache):
        S0, P1, H1, P2, H2, AH, mu, lv, std, z, X, mask2, n2, pooled, logits = cache
        p, bt = self.params, self.batch
        B = len(bt.y)
        w = 1.0 / B
        At = np.swapaxes(bt.a_hat, 1, 2)

        dlogits = softmax(logits, axis=1)
        dlogits[np.arange(B), bt.y] -= 1
        dlogits *= w
        p.accumulate("W_cls", pooled.T @ dlogits)
        p.accumulate("b_cls", dlogits.sum(axis=0))
        dpooled = dlogits @ p["W_cls"].T
        dmu = dpooled[:, None, :] / bt.n[:, None, None] * bt.mask[..., None]

        sig = sigmoid(X)
        pw = bt.pos_weight[:, None, None]
        dX = ((1 - bt.target) * sig - pw * bt.target * (1 - sig)) * mask2 * (w / n2)[:, None, None]
        dz = (dX + np.swapaxes(dX, 1, 2)) @ z

        ks = (w * self.kl_scale)[:, None, None]
        dmu += dz + ks * mu
        dlv = dz * self.eps * 0.5 * std + ks * 0.5 * (np.exp(lv) - 1)

        AHt = np.swapaxes(AH, 1, 2)
        p.accumulate("W_mu", np.einsum("bij,bjk->ik", AHt, dmu))
        p.accumulate("W_logvar", np.einsum("bij,bjk->ik", AHt, dlv))
        dAH = dmu @ p["W_mu"].T + dlv @ p["W_logvar"].T
        dP2 = (At @ dAH) * (P2 > 0)
        dM1 = At @ dP2
        p.accumulate("W1", np.einsum("bij,bjk->ik", np.swapaxes(H1, 1, 2), dM1))
        dP1 = (dM1 @ p["W1"].T) * (P1 > 0)
        dS0 = (At @ dP1) * bt.mask[..., None]
        dW0 = np.zeros_like(p["W0"])
        sel = bt.mask > 0
        np.add.at(dW0, bt.idx[sel], dS0[sel])
        p.accumulate("W0", dW0)


# ---------------------------------------------------------------------------
# training


def train_vgae(graphs: Sequence[ApiCallGraph], vocab_size: int, config: TrainConfig,
               vocab_hash: str = "", rng=None):
    """Train on labelled graphs; returns (model, history).

    ``rng`` defaults to a generator seeded from ``config.seed``. The same
    generator drives initialisation, shuffling and noise, in that order.
    """
    if not graphs:
        raise ValidationError("cannot train on an empty corpus")
    dtype = dtype_for(config.float_mode)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    prepared = [prepare(g, dtype) for g in graphs]
    if any(g.idx.max() >= vocab_size for g in prepared):
        raise ShapeError("graph node index outside the vocabulary")
    model = VgaeModel.init(vocab_size, rng, vocab_hash, dtype=dtype)
    state = OptimizerState(config.optimizer, config.lr)
    kl_scale = 1.0 / len(graphs) if config.kl_norm == "dataset" else None

    history: List[Dict[str, float]] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(prepared))
        sums = {"loss": 0.0, "recon": 0.0, "kl": 0.0, "cls": 0.0}
        for start in range(0, len(order), config.batch_size):
            chunk = [prepared[i] for i in order[start:start + config.batch_size]]
            batch = GraphBatch.from_prepared(chunk, dtype)
            lp = VgaePass(model, batch, batch.draw_eps(rng).astype(dtype), kl_scale)
            lp.forward()
            model.params.zero_grad()
            lp.backward()
            optimizer_step(model.params, state)
            sums["loss"] += float(lp.parts["total"].sum())
            for key in ("recon", "kl", "cls"):
                sums[key] += float(lp.parts[key].sum())
        history.append({k: v / len(prepared) for k, v in sums.items()})
        if epoch % 50 == 0 or epoch == config.epochs - 1:
            log.debug("vgae epoch %d loss %.5f", epoch, history[-1]["loss"])
    model.params.check_finite()
    return model, history


def embed_all(model: VgaeModel, graphs: Sequence[ApiCallGraph]) -> List[Embedding]:
    return [embed_graph(model, g) for g in graphs]
