"""Independent reference implementations used only by the tests."""

import itertools

import numpy as np


def reference_app_graph(listing, vocab):
    """Brute-force interpreter for spliced call graphs.

    Every method body is a straight-line sequence, so running it from a
    given item position yields one deterministic API trace. The graph is
    the set of consecutive API pairs over the traces started from every
    (method, position), with unresolved calls and non-vocabulary APIs
    skipped. Infinite recursion is cut once the stack is deep enough for
    the periodic part of the trace to repeat twice.
    """
    bodies = {m.name: m.calls for m in listing.methods}
    depth_cap = 3 * len(bodies) + 3

    def run(method, pos):
        trace = []
        stack = [(method, pos)]
        while stack:
            name, i = stack.pop()
            body = bodies[name]
            if i >= len(body):
                continue
            item = body[i]
            stack.append((name, i + 1))
            if item.kind == "api":
                if item.target in vocab.index:
                    trace.append(vocab.index[item.target])
            elif item.target in bodies:
                if len(stack) >= depth_cap:
                    break
                stack.append((item.target, 0))
        return trace

    nodes, edges = set(), set()
    for name, body in bodies.items():
        for item in body:
            if item.kind == "api" and item.target in vocab.index:
                nodes.add(vocab.index[item.target])
        for pos in range(len(body)):
            trace = run(name, pos)
            edges.update(zip(trace, trace[1:]))
    return nodes, edges


def scalar_adam(p, grads, lr=0.001, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * mhat / (vhat ** 0.5 + eps)
    return p


def matmul(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i, j in itertools.product(range(a.shape[0]), range(b.shape[1])):
        out[i, j] = sum(a[i, k] * b[k, j] for k in range(a.shape[1]))
    return out


def random_graph(rng, n, vocab_size, label, app_id=None, edge_prob=0.3):
    """Random ApiCallGraph on ``n`` distinct vocabulary nodes."""
    from droidzero.callgraph import ApiCallGraph

    nodes = rng.choice(vocab_size, size=n, replace=False)
    edges = {(int(a), int(b)) for a in nodes for b in nodes if rng.random() < edge_prob}
    return ApiCallGraph(app_id or f"g{n}", str(label), tuple(int(x) for x in nodes), frozenset(edges))


def affine(x, W, b):
    """Element-wise evaluation of W x + b."""
    return np.array([sum(W[i][k] * x[k] for k in range(len(x))) + b[i] for i in range(len(b))])
