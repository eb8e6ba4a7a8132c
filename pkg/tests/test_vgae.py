import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from droidzero.callgraph import ApiCallGraph
from droidzero.errors import EmptyGraphError, ShapeError, ValidationError
from droidzero.numerics import grad_check, normalize_adjacency, relu
from droidzero.vgae import (
    GraphBatch, TrainConfig, VgaeModel, VgaePass, class_logits, decode, embed_graph, encode,
    kl_loss, node_features, prepare, recon_loss, total_loss, train_vgae, vgae_classify,
)
from oracles import matmul, random_graph

GOLDEN = Path(__file__).parent / "golden" / "vgae_smoke.json"


def graph(nodes, edges, label="benign"):
    return ApiCallGraph("g", label, tuple(nodes), frozenset(edges))


def model(vocab=8, seed=0):
    return VgaeModel.init(vocab, np.random.default_rng(seed))


def test_model_shapes():
    m = model(10)
    assert m.params.shapes() == {"W0": (10, 32), "W1": (32, 24), "W_mu": (24, 16),
                                 "W_logvar": (24, 16), "W_cls": (16, 2), "b_cls": (2,)}


# -- node_features ----------------------------------------------------------

def test_one_hot_single_node():
    assert node_features(graph([0], []), 3).tolist() == [[1, 0, 0]]


def test_one_hot_matches_scatter_oracle():
    rng = np.random.default_rng(1)
    g = random_graph(rng, 6, 12, "benign")
    X = node_features(g, 12)
    ref = np.zeros((6, 12))
    for row, idx in enumerate(g.nodes):
        ref[row][idx] = 1
    assert np.array_equal(X, ref)
    assert np.all(X.sum(axis=1) == 1)


def test_node_index_outside_vocab():
    with pytest.raises(ShapeError):
        node_features(graph([5], []), 3)


# -- encode / decode --------------------------------------------------------

def test_zero_weights_give_unit_noise():
    m = VgaeModel.zeros(5)
    eps = np.random.default_rng(2).normal(size=(3, 16))
    out = encode(graph([0, 1, 2], [(0, 1)]), m, eps=eps)
    assert not out.mu.any() and not out.logvar.any()
    assert np.array_equal(out.z, eps)


def test_zero_noise_gives_mean():
    out = encode(graph([0, 3], [(0, 3)]), model(), eps=np.zeros((2, 16)))
    assert np.array_equal(out.z, out.mu)


def test_encode_matches_layer_oracle():
    rng = np.random.default_rng(3)
    g = random_graph(rng, 5, 8, "malware")
    m = model(8, 3)
    p = m.params
    A = normalize_adjacency(g.adjacency())
    X = node_features(g, 8)
    H1 = np.maximum(matmul(matmul(A, X), p["W0"]), 0)
    H2 = np.maximum(matmul(matmul(A, H1), p["W1"]), 0)
    mu = matmul(matmul(A, H2), p["W_mu"])
    logvar = matmul(matmul(A, H2), p["W_logvar"])
    out = encode(g, m, eps=np.zeros((5, 16)))
    np.testing.assert_allclose(out.mu, mu, rtol=1e-10, atol=1e-13)
    np.testing.assert_allclose(out.logvar, logvar, rtol=1e-10, atol=1e-13)


def test_decode_zero_latent():
    assert np.all(decode(np.zeros((3, 16))) == 0.5)


def test_decode_two_node_example():
    z = np.zeros((2, 16))
    z[:, 0] = 1
    assert decode(z)[0, 1] == pytest.approx(0.7310585786300049, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2 ** 31))
def test_decode_symmetric_open_interval(n, seed):
    # |z_i . z_j| stays below 16, far from where float64 sigmoid rounds to 0 or 1
    z = np.random.default_rng(seed).uniform(-1, 1, size=(n, 16))
    P = decode(z)
    assert np.array_equal(P, P.T)
    assert np.all((P > 0) & (P < 1))


# -- losses -------------------------------------------------------------------

def test_recon_loss_two_node_half():
    g = graph([0, 1], [(0, 1)])
    # targets: two off-diagonal positives, pos_weight (4 - 2) / 2 = 1
    expected = -np.log(0.5)
    assert recon_loss(g, np.full((2, 2), 0.5)) == pytest.approx(expected, rel=1e-12)


def test_recon_loss_pos_weight_formula():
    g = graph([0, 1, 2], [(0, 1)])
    P = np.full((3, 3), 0.5)
    pw = (9 - 2) / 2
    expected = -(2 * pw * np.log(0.5) + 7 * np.log(0.5)) / 9
    assert recon_loss(g, P) == pytest.approx(expected, rel=1e-12)


def test_recon_loss_mean_normalised():
    a = recon_loss(graph([0, 1], []), np.full((2, 2), 0.5))
    b = recon_loss(graph([0, 1, 2, 3], []), np.full((4, 4), 0.5))
    assert a == pytest.approx(b, rel=1e-14)


def test_recon_loss_limit():
    g = graph([0, 1, 2], [(0, 1), (1, 2)])
    T = ((g.adjacency() + g.adjacency().T) > 0).astype(float)
    losses = [recon_loss(g, np.clip(T, z, 1 - z)) for z in (1e-2, 1e-4, 1e-6)]
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-4


def test_recon_loss_empty():
    with pytest.raises(EmptyGraphError):
        recon_loss(graph([], []), np.zeros((0, 0)))


def test_kl_examples():
    assert kl_loss(np.zeros((3, 16)), np.zeros((3, 16))) == 0.0
    assert kl_loss(np.array([[1.0]]), np.array([[0.0]])) == 0.5


def test_kl_matches_elementwise_oracle():
    rng = np.random.default_rng(4)
    mu, lv = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    ref = sum(-0.5 * (1 + lv[i, d] - mu[i, d] ** 2 - np.exp(lv[i, d])) for i in range(4) for d in range(5))
    assert kl_loss(mu, lv) == pytest.approx(ref, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_kl_nonnegative(seed):
    rng = np.random.default_rng(seed)
    assert kl_loss(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)) * 3) >= 0


def test_class_logits():
    m = model()
    mu = np.random.default_rng(5).normal(size=(1, 16))
    np.testing.assert_allclose(class_logits(mu, m), mu[0] @ m.params["W_cls"] + m.params["b_cls"])
    mu = np.random.default_rng(6).normal(size=(4, 16))
    ref = np.array([sum(mu[:, d].mean() * m.params["W_cls"][d, c] for d in range(16)) for c in range(2)])
    np.testing.assert_allclose(class_logits(mu, m), ref + m.params["b_cls"], rtol=1e-12)
    z = VgaeModel.zeros(8)
    assert class_logits(mu, z).tolist() == [0.0, 0.0]


def test_total_loss_kl_zero_case():
    m = VgaeModel.zeros(5)
    g = graph([0, 1], [(0, 1)], "malware")
    loss, parts = total_loss(g, "malware", m, eps=np.zeros((2, 16)))
    assert parts["kl"] == 0.0
    assert loss == pytest.approx(parts["recon"] + parts["cls"], rel=1e-15)
    assert parts["recon"] > 0 and parts["cls"] >= 0


def test_total_loss_bad_label():
    with pytest.raises(ValidationError):
        total_loss(graph([0], []), "unknown", model(), eps=np.zeros((1, 16)))


def test_batch_pass_equals_mean_of_single_losses():
    rng = np.random.default_rng(7)
    gs = [random_graph(rng, int(rng.integers(2, 9)), 12, lab) for lab in ("benign", "malware", "benign")]
    m = model(12, 7)
    batch = GraphBatch.from_prepared([prepare(g) for g in gs])
    eps = batch.draw_eps(rng)
    batched = VgaePass(m, batch, eps).forward()
    ref = np.mean([total_loss(g, g.label, m, eps=eps[i, :g.num_nodes])[0] for i, g in enumerate(gs)])
    assert batched == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("seed", range(8))
def test_total_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 8, 16, rng.choice(["benign", "malware"]))
    m = VgaeModel.init(16, rng)
    batch = GraphBatch.from_prepared([prepare(g)])
    eps = batch.draw_eps(rng)
    assert grad_check(lambda p: VgaePass(m, batch, eps), m.params, probes=10, rng=rng) < 1e-4


# -- embedding and classification ---------------------------------------------

def test_zero_model_zero_embedding():
    assert not embed_graph(VgaeModel.zeros(5), graph([0, 1], [(0, 1)])).vector.any()


def test_embedding_permutation_invariant():
    rng = np.random.default_rng(8)
    g = random_graph(rng, 7, 12, "benign")
    m = model(12, 8)
    shuffled = tuple(g.nodes[i] for i in rng.permutation(7))
    h = ApiCallGraph("g", "benign", shuffled, g.edges)
    np.testing.assert_array_equal(embed_graph(m, g).vector, embed_graph(m, h).vector)


def test_mean_pool_invariant_under_matrix_permutation():
    """Permuting rows/columns of A and rows of X permutes mu, so the pooled mean is unchanged."""
    rng = np.random.default_rng(10)
    g = random_graph(rng, 6, 12, "benign")
    m = model(12, 10)
    p = m.params
    A, X = g.adjacency(), node_features(g, 12)

    def pooled(A, X):
        Ah = normalize_adjacency(A)
        H = relu(Ah @ relu(Ah @ X @ p["W0"]) @ p["W1"])
        return (Ah @ H @ p["W_mu"]).mean(axis=0)

    perm = rng.permutation(6)
    np.testing.assert_allclose(pooled(A[np.ix_(perm, perm)], X[perm]), pooled(A, X), rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(pooled(A, X), embed_graph(m, g).vector, rtol=1e-12, atol=1e-15)


def test_embedding_matches_encode_pool():
    rng = np.random.default_rng(9)
    g = random_graph(rng, 5, 10, "malware")
    m = model(10, 9)
    out = encode(g, m, eps=np.zeros((5, 16)))
    e = embed_graph(m, g)
    np.testing.assert_allclose(e.vector, out.mu.mean(axis=0), rtol=1e-14)
    assert e.vector.shape == (16,) and e.label == "malware"


def test_embed_empty_graph():
    with pytest.raises(EmptyGraphError):
        embed_graph(model(), graph([], []))


def test_vgae_classify_tie_is_malware():
    label, probs = vgae_classify(VgaeModel.zeros(5), graph([0], []))
    assert label == "malware" and probs.tolist() == [0.5, 0.5]


def test_vgae_classify_softmax():
    m = VgaeModel.zeros(5)
    m.params["b_cls"][...] = [2.0, 0.0]
    label, probs = vgae_classify(m, graph([0], []))
    assert label == "benign"
    np.testing.assert_allclose(probs, [0.8807970779778823, 0.11920292202211755], rtol=1e-12)
    assert abs(probs.sum() - 1) < 1e-12


# -- training ---------------------------------------------------------------

def _smoke(seed=0, epochs=5):
    g = random_graph(np.random.default_rng(seed), 6, 10, "malware")
    return g, train_vgae([g], 10, TrainConfig(epochs=epochs, seed=seed))


def test_history_length_and_determinism():
    _, (m1, h1) = _smoke(epochs=4)
    _, (m2, h2) = _smoke(epochs=4)
    assert len(h1) == 4 and h1 == h2
    for k, v in m1.params.items():
        assert np.array_equal(v, m2.params[k])


def test_empty_corpus_rejected():
    with pytest.raises(ValidationError):
        train_vgae([], 5, TrainConfig(epochs=1))


def test_smoke_objective_decreases():
    """Noise-free objective after each of 5 epochs, starting from the initial model."""
    g = random_graph(np.random.default_rng(0), 6, 10, "malware")
    zeros = np.zeros((6, 16))
    losses = [total_loss(g, g.label, VgaeModel.init(10, np.random.default_rng(0)), eps=zeros)[0]]
    for k in range(1, 6):
        m, _ = train_vgae([g], 10, TrainConfig(epochs=k, seed=0))
        losses.append(total_loss(g, g.label, m, eps=zeros)[0])
    assert sum(b <= a for a, b in zip(losses, losses[1:])) >= 4


def test_smoke_history_golden():
    _, (_, history) = _smoke()
    golden = json.loads(GOLDEN.read_text())
    assert len(history) == len(golden)
    for got, want in zip(history, golden):
        for key in want:
            assert got[key] == pytest.approx(want[key], rel=1e-9)


def test_float32_training_runs():
    g = random_graph(np.random.default_rng(1), 5, 8, "benign")
    m, h = train_vgae([g], 8, TrainConfig(epochs=2, float_mode=32))
    assert m.params["W0"].dtype == np.float32 and np.isfinite(h[-1]["loss"])
