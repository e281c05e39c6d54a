"""Sparse mixture-of-experts layer: gating, top-k dispatch, load balancing
and centroid fitting.

Two gating functions are provided. The linear gate scores tokens with a
learned projection; the cluster gate scores them by (negated) Euclidean
distance to frozen centroids fitted on representations of an earlier
training run, so nearer centroids mean higher affinity. Both route each
token to its K best experts and weight the expert outputs with a softmax
over the selected affinities only; the selection itself is treated as a
constant during backprop.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

# keeps the distance gradient finite if a token coincides with a centroid
_DIST_EPS = 1e-30


@dataclass
class GateDecision:
    """Routing outcome for a single token."""

    selected: np.ndarray     # (K,) expert ids, descending affinity
    weights: np.ndarray      # (K,) softmax over the selected affinities
    dense_probs: np.ndarray  # (M,) softmax over all affinities


@dataclass
class GateBatch:
    """Routing outcome for a flat batch of tokens (graph tensors kept live)."""

    selected: np.ndarray     # (T, K) int
    weights: "ad.Tensor"     # (T, K)
    dense_probs: "ad.Tensor" # (T, M)


@dataclass
class CentroidSet:
    centroids: np.ndarray    # (M, D)
    source: dict


def top_k_indices(logits, k):
    """Argmax-k per row, ties broken toward the lower expert index."""
    logits = np.atleast_2d(logits)
    return np.argsort(-logits, axis=1, kind="stable")[:, :k]


def linear_gate_batch(tokens, w_g, k):
    """Route a (T, D) token tensor through the learned linear gate."""
    logits = ad.matmul(tokens, w_g)
    selected = top_k_indices(logits.data, k)
    weights = ad.softmax(ad.take_cols_2d(logits, selected))
    dense = ad.softmax(logits)
    return GateBatch(selected, weights, dense)


def cluster_gate_batch(tokens, centroids, k):
    """Route tokens by proximity to frozen centroids.

    Affinity is the negated Euclidean distance, so the nearest centroid gets
    the highest logit. ``centroids`` must be an untracked tensor; no gradient
    reaches it.
    """
    t, d = tokens.data.shape
    m = centroids.data.shape[0]
    diff = ad.sub(ad.reshape(tokens, (t, 1, d)), ad.reshape(centroids, (1, m, d)))
    dist = ad.sqrt(ad.sum_(ad.square(diff), axis=2) + _DIST_EPS)
    logits = ad.neg(dist)
    selected = top_k_indices(logits.data, k)
    weights = ad.softmax(ad.take_cols_2d(logits, selected))
    dense = ad.softmax(logits)
    return GateBatch(selected, weights, dense)


def unit_gate_batch(n_tokens, dtype=np.float64):
    """Trivial gate for the dense (single expert, weight one) configuration."""
    selected = np.zeros((n_tokens, 1), dtype=int)
    ones = ad.constant(np.ones((n_tokens, 1)), dtype=dtype)
    return GateBatch(selected, ones, ones)


def _single(gate_batch):
    return GateDecision(gate_batch.selected[0].copy(),
                        gate_batch.weights.data[0].copy(),
                        gate_batch.dense_probs.data[0].copy())


def linear_gate(token, w_g, k):
    """Single-token convenience wrapper around :func:`linear_gate_batch`."""
    tokens = ad.constant(np.asarray(token, dtype=np.float64)[None, :])
    w = w_g if isinstance(w_g, ad.Tensor) else ad.constant(np.asarray(w_g, dtype=np.float64))
    return _single(linear_gate_batch(tokens, w, k))


def cluster_gate(token, centroids, k):
    """Single-token convenience wrapper around :func:`cluster_gate_batch`."""
    c = centroids.centroids if isinstance(centroids, CentroidSet) else centroids
    tokens = ad.constant(np.asarray(token, dtype=np.float64)[None, :])
    return _single(cluster_gate_batch(tokens, ad.constant(np.asarray(c, dtype=np.float64)), k))


def expert_ffn(x, w1, w2):
    """Two-layer gelu FFN shared by every expert."""
    return ad.matmul(ad.gelu(ad.matmul(x, w1)), w2)


def moe_forward(tokens, experts, gate):
    """Dispatch a flat (T, D) token tensor through the selected experts.

    ``experts`` is a list of (w1, w2) tensor pairs. Experts that no token
    selected contribute nothing and receive no gradient. Tokens are gathered
    per expert in ascending row order so the reduction is deterministic.
    """
    t = tokens.data.shape[0]
    out = None
    for i, (w1, w2) in enumerate(experts):
        rows, slots = np.nonzero(gate.selected == i)
        if rows.size == 0:
            continue
        sub = ad.take_rows(tokens, rows)
        y = expert_ffn(sub, w1, w2)
        w = ad.take_cols_2d(ad.take_rows(gate.weights, rows), slots[:, None])
        contrib = ad.scatter_rows(ad.mul(y, w), rows, t)
        out = contrib if out is None else ad.add(out, contrib)
    if out is None:
        raise ValueError("gate selected no experts at all")
    return out


def load_balance_loss_graph(dense_probs):
    """Balance loss M * sum_i D_i P_i as a graph node.

    D_i (argmax routing fractions) is a constant; the gradient flows through
    the mean gate probabilities P_i only.
    """
    t, m = dense_probs.data.shape
    top1 = np.argmax(dense_probs.data, axis=1)
    d_frac = np.bincount(top1, minlength=m) / t
    p_mean = ad.mean(dense_probs, axis=0)
    return ad.sum_(ad.mul(p_mean, ad.constant(d_frac, dtype=dense_probs.data.dtype))) * float(m)


def load_balance_loss(decisions, n_experts=None):
    """Numeric balance loss over a batch of per-token gate decisions.

    Accepts a list of :class:`GateDecision` or a (T, M) array of dense gate
    probabilities. Uniform routing gives exactly 1.0, the minimum.
    """
    if isinstance(decisions, np.ndarray):
        probs = np.atleast_2d(decisions)
    else:
        probs = np.stack([d.dense_probs for d in decisions])
    if probs.shape[0] == 0:
        raise ValueError("balance loss needs at least one token")
    m = n_experts or probs.shape[1]
    top1 = np.argmax(probs, axis=1)
    d_frac = np.bincount(top1, minlength=m) / probs.shape[0]
    p_mean = probs.mean(axis=0)
    return float(m * np.sum(d_frac * p_mean))


def gate_tie_mask(logits, k, margin=1e-6):
    """Per-row flag: the k-th and (k+1)-th affinities are within ``margin``.

    Rows flagged here sit on (or within eps of) the non-differentiable top-k
    selection boundary and should be excluded from gradient checks.
    """
    logits = np.atleast_2d(logits)
    if k >= logits.shape[1]:
        return np.zeros(logits.shape[0], dtype=bool)
    s = np.sort(logits, axis=1)[:, ::-1]
    return (s[:, k - 1] - s[:, k]) <= margin


# ---------------------------------------------------------------------------
# centroid fitting (mini-batch k-means)


def _kmeans_pp_init(x, m, rng):
    n = x.shape[0]
    centroids = np.empty((m, x.shape[1]))
    centroids[0] = x[rng.integers(0, n)]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for j in range(1, m):
        total = d2.sum()
        if total <= 0:
            # all remaining mass is on already-chosen points; pick any distinct row
            centroids[j] = x[rng.integers(0, n)]
            continue
        probs = d2 / total
        centroids[j] = x[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, np.sum((x - centroids[j]) ** 2, axis=1))
    return centroids


def fit_centroids(representations, m, iters=200, batch=256, seed=0, source=None):
    """Mini-batch k-means over a stream of D-vectors.

    k-means++ seeds the centroids from the first buffer of the stream, then
    each iteration samples a mini-batch, assigns it to the nearest centroids
    and moves them with per-centroid counts as step sizes. Centroids that an
    iteration leaves empty are re-seeded from the batch point farthest from
    its nearest centroid. Deterministic for a given seed.
    """
    if isinstance(representations, np.ndarray):
        x = np.asarray(representations, dtype=np.float64)
    else:
        x = np.array(list(representations), dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    n = x.shape[0]
    if np.unique(x, axis=0).shape[0] < m:
        raise ValueError(f"need at least {m} distinct vectors, got fewer")
    rng = np.random.default_rng(np.random.SeedSequence(seed))

    buffer = x[:max(batch, 10 * m)]
    centroids = _kmeans_pp_init(buffer, m, rng)
    counts = np.zeros(m)

    for _ in range(iters):
        idx = rng.choice(n, size=min(batch, n), replace=False)
        mb = x[idx]
        d2 = np.sum((mb[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        assign = np.argmin(d2, axis=1)
        for j in range(mb.shape[0]):
            c = assign[j]
            counts[c] += 1.0
            centroids[c] += (mb[j] - centroids[c]) / counts[c]
        empty = np.setdiff1d(np.arange(m), assign)
        if empty.size:
            nearest = np.min(d2, axis=1)
            order = np.argsort(-nearest, kind="stable")
            for rank, c in enumerate(empty):
                centroids[c] = mb[order[rank % mb.shape[0]]]
                counts[c] = 1.0
    meta = {"iters": int(iters), "batch": int(batch), "seed": int(seed),
            "n_vectors": int(n)}
    if source:
        meta.update(source)
    return CentroidSet(centroids=centroids, source=meta)


def kmeans_inertia(x, centroids):
    """Sum of squared distances to the nearest centroid."""
    d2 = np.sum((np.asarray(x)[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    return float(d2.min(axis=1).sum())
