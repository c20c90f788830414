"""Two-layer GCN discriminator over assembly graphs and the adversarial reward."""

from dataclasses import dataclass

import numpy as np

from .data import EMBED_DIM
from .errors import EmptyBatch, ShapeMismatch
from .nn import (Mlp, ParameterStore, adam_step, bce, clip_global_norm, dropout, glorot,
                 mlp_backward, mlp_forward, sigmoid)

GCN_WIDTHS = (EMBED_DIM, 10, 10)
DROPOUT_RATE = 0.2
REWARD_EPS = 1e-8


@dataclass
class AssemblyGraph:
    features: np.ndarray
    adjacency: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.adjacency = np.asarray(self.adjacency, dtype=float)
        n = self.features.shape[0]
        if self.adjacency.shape != (n, n):
            raise ShapeMismatch(f"adjacency {self.adjacency.shape} for {n} nodes")
        if self.features.ndim != 2 or self.features.shape[1] != EMBED_DIM:
            raise ShapeMismatch(f"node features must be (n, {EMBED_DIM}), got {self.features.shape}")
        if not np.array_equal(self.adjacency, self.adjacency.T):
            raise ShapeMismatch("adjacency must be symmetric")
        if np.any(np.diag(self.adjacency)):
            raise ShapeMismatch("adjacency must have a zero diagonal")

    @classmethod
    def from_edges(cls, features, edges):
        n = len(features)
        u = np.zeros((n, n))
        for a, b in edges:
            u[a, b] = u[b, a] = 1.0
        return cls(features, u)

    @property
    def n(self):
        return self.features.shape[0]

    def normalized_adjacency(self):
        """``D^-1/2 (U + I) D^-1/2`` with degrees taken from ``U + I``."""
        a = self.adjacency + np.eye(self.n)
        d = 1.0 / np.sqrt(a.sum(axis=1))
        return a * d[:, None] * d[None, :]


@dataclass
class Discriminator:
    store: ParameterStore
    head: Mlp
    dropout_rate: float = DROPOUT_RATE

    @classmethod
    def create(cls, rng, dropout_rate=DROPOUT_RATE):
        store = ParameterStore()
        for k, (a, b) in enumerate(zip(GCN_WIDTHS[:-1], GCN_WIDTHS[1:])):
            store.add(f"gcn.W{k}", glorot(rng, a, b))
        head = Mlp.create(store, "f_d", (GCN_WIDTHS[-1], 1), rng)
        return cls(store, head, dropout_rate)

    def weight(self, k):
        return self.store[f"gcn.W{k}"]


def _pad(graphs):
    nmax = max(g.n for g in graphs)
    b = len(graphs)
    adj = np.zeros((b, nmax, nmax))
    feats = np.zeros((b, nmax, EMBED_DIM))
    mask = np.zeros((b, nmax))
    for i, g in enumerate(graphs):
        adj[i, :g.n, :g.n] = g.normalized_adjacency()
        feats[i, :g.n] = g.features
        mask[i, :g.n] = 1.0
    return adj, feats, mask


def gcn_forward_batch(disc, graphs, train_mode=False, rng=None):
    """D(x) for each graph; returns ``(values, cache)``.

    Dropout (train mode only) sits between the two GCN layers.
    """
    if not graphs:
        raise EmptyBatch("no graphs")
    adj, h0, mask = _pad(graphs)
    b, n, _ = h0.shape
    ah0 = adj @ h0
    z1 = ah0 @ disc.weight(0)
    h1 = np.maximum(z1, 0.0)
    if train_mode:
        h1d, drop = dropout(h1, disc.dropout_rate, rng if rng is not None else np.random.default_rng())
    else:
        h1d, drop = h1, np.ones_like(h1)
    ah1 = adj @ h1d
    z2 = ah1 @ disc.weight(1)
    h2 = np.maximum(z2, 0.0)
    s, head_cache = mlp_forward(disc.head, h2.reshape(b * n, -1))
    s = s.reshape(b, n)
    count = mask.sum(axis=1)
    pooled = (s * mask).sum(axis=1) / count
    out = sigmoid(pooled)
    cache = (adj, ah0, z1, drop, ah1, z2, head_cache, mask, count, out, (b, n))
    return out, cache


def gcn_backward_batch(disc, cache, dout):
    adj, ah0, z1, drop, ah1, z2, head_cache, mask, count, out, (b, n) = cache
    dpooled = np.asarray(dout, dtype=float) * out * (1.0 - out)
    ds = (dpooled / count)[:, None] * mask
    dh2, grads = mlp_backward(disc.head, head_cache, ds.reshape(b * n, 1))
    dz2 = dh2.reshape(b, n, -1) * (z2 > 0)
    grads["gcn.W1"] = ah1.reshape(b * n, -1).T @ dz2.reshape(b * n, -1)
    dh1d = np.transpose(adj, (0, 2, 1)) @ (dz2 @ disc.weight(1).T)
    dz1 = dh1d * drop * (z1 > 0)
    grads["gcn.W0"] = ah0.reshape(b * n, -1).T @ dz1.reshape(b * n, -1)
    return grads


def gcn_forward(disc, graph, train_mode=False, rng=None):
    out, _ = gcn_forward_batch(disc, [graph], train_mode, rng)
    return float(out[0])


def discriminator_loss(disc, positives, negatives, train_mode=True, rng=None):
    """Mean BCE on positives (label 1) plus mean BCE on negatives (label 0), with gradients."""
    if not positives or not negatives:
        raise EmptyBatch("discriminator needs non-empty positive and negative batches")
    graphs = list(positives) + list(negatives)
    labels = np.concatenate([np.ones(len(positives)), np.zeros(len(negatives))])
    weights = np.concatenate([np.full(len(positives), 1.0 / len(positives)),
                              np.full(len(negatives), 1.0 / len(negatives))])
    d, cache = gcn_forward_batch(disc, graphs, train_mode, rng)
    losses, dpred = bce(d, labels)
    loss = float((weights * losses).sum())
    grads = gcn_backward_batch(disc, cache, weights * dpred)
    return loss, grads, d


def train_discriminator(disc, positives, negatives, lr, rng=None, max_grad_norm=None):
    """One Adam step on the discriminator; returns the loss measured before the step."""
    loss, grads, _ = discriminator_loss(disc, positives, negatives, True, rng)
    if max_grad_norm is not None:
        grads = clip_global_norm(grads, max_grad_norm)
    adam_step(disc.store, grads, lr)
    return loss


def adversarial_reward(disc, graph, beta):
    """``beta * -log(1 - D(x) + 1e-8)`` with dropout off; exactly 0 when beta is 0."""
    if beta == 0:
        return 0.0
    d = gcn_forward(disc, graph, train_mode=False)
    return float(beta * -np.log(1.0 - d + REWARD_EPS))


def adversarial_rewards(disc, graphs, beta):
    if beta == 0:
        return np.zeros(len(graphs))
    d, _ = gcn_forward_batch(disc, graphs, train_mode=False)
    return beta * -np.log(1.0 - d + REWARD_EPS)
