"""Attention actor over (anchor, incoming) pairs and the state-value critic.

The actor embeds the docked set together with the whole complex into a query
``g_t = f_c(mean(docked) ++ mean(all))`` and scores every legal pair by
``<g_t, f_a(e_anchor ++ e_incoming [++ pair descriptor])> / sqrt(32)``.
"""

from dataclasses import dataclass

import numpy as np

from . import env, geom
from .data import CLASH_CUTOFF, CONTACT_CUTOFF, EMBED_DIM
from .errors import EpisodeFinished
from .nn import Mlp, ParameterStore, mlp_backward, mlp_forward

HIDDEN = 32
VALUE_WIDTHS = (2 * EMBED_DIM, 32, 64, 1)
PAIR_FEATURE_DIM = 3
LOGIT_SCALE = 1.0 / np.sqrt(HIDDEN)


def pair_descriptors(dimers, n):
    """Per unordered pair: contact flag, interface fraction, clash fraction.

    Fractions count residues of either chain within 8 A (interface) or 3 A
    (clash) of the partner, measured in the dimer's own frame.
    """
    out = np.zeros((n, n, PAIR_FEATURE_DIM))
    for e in dimers:
        d = geom.pairwise_distances(e.coords_i, e.coords_j)
        total = d.shape[0] + d.shape[1]
        iface = ((d < CONTACT_CUTOFF).any(axis=1).sum() + (d < CONTACT_CUTOFF).any(axis=0).sum()) / total
        clash = ((d < CLASH_CUTOFF).any(axis=1).sum() + (d < CLASH_CUTOFF).any(axis=0).sum()) / total
        out[e.i, e.j] = out[e.j, e.i] = (float(e.contact), iface, clash)
    return out


@dataclass
class ComplexContext:
    """Everything the networks read about one complex, computed once."""
    embeddings: np.ndarray
    pair_features: np.ndarray = None

    @classmethod
    def build(cls, record, dimers=None, pair_features=False):
        emb = record.embeddings()
        pf = pair_descriptors(dimers, record.n) if pair_features else None
        return cls(emb, pf)

    @property
    def n(self):
        return self.embeddings.shape[0]


def _as_context(ctx):
    if isinstance(ctx, ComplexContext):
        return ctx
    return ComplexContext(np.asarray(ctx, dtype=float))


@dataclass
class PolicyNet:
    store: ParameterStore
    f_c: Mlp
    f_a: Mlp
    pair_features: bool = False

    @classmethod
    def create(cls, rng, pair_features=False):
        store = ParameterStore()
        f_c = Mlp.create(store, "f_c", (2 * EMBED_DIM, HIDDEN, HIDDEN), rng)
        key_in = 2 * EMBED_DIM + (PAIR_FEATURE_DIM if pair_features else 0)
        f_a = Mlp.create(store, "f_a", (key_in, HIDDEN, HIDDEN), rng)
        return cls(store, f_c, f_a, pair_features)


@dataclass
class ValueNet:
    store: ParameterStore
    mlp: Mlp

    @classmethod
    def create(cls, rng):
        store = ParameterStore()
        return cls(store, Mlp.create(store, "value", VALUE_WIDTHS, rng))


@dataclass
class ActionDistribution:
    actions: list
    probs: np.ndarray

    def prob_of(self, action):
        return float(self.probs[self.actions.index(action)])


def encode_state(state, embeddings):
    """Mean embeddings of the docked chains, all chains and the undocked chains.

    Empty sets pool to the zero vector.
    """
    emb = _as_context(embeddings).embeddings
    zero = np.zeros(emb.shape[1])
    docked = emb[list(state.docked)].mean(axis=0) if state.docked else zero
    undocked = emb[list(state.undocked)].mean(axis=0) if state.undocked else zero
    return docked, emb.mean(axis=0), undocked


def query_input(state, ctx):
    docked, all_, _ = encode_state(state, ctx)
    return np.concatenate([docked, all_])


def value_input(state, ctx):
    docked, _, undocked = encode_state(state, ctx)
    return np.concatenate([docked, undocked])


def key_inputs(ctx, anchors, incomings):
    ctx = _as_context(ctx)
    parts = [ctx.embeddings[anchors], ctx.embeddings[incomings]]
    if ctx.pair_features is not None:
        parts.append(ctx.pair_features[anchors, incomings])
    return np.concatenate(parts, axis=1)


def _check_ctx(net, ctx):
    if net.pair_features and ctx.pair_features is None:
        raise ValueError("policy expects pair descriptors; build the context with pair_features=True")
    if not net.pair_features and ctx.pair_features is not None:
        ctx = ComplexContext(ctx.embeddings)
    return ctx


def all_pair_keys(net, ctx):
    """Keys for every ordered pair, shape ``(n, n, 32)``; keys do not depend on the state."""
    ctx = _check_ctx(net, _as_context(ctx))
    n = ctx.n
    a, b = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    keys, _ = mlp_forward(net.f_a, key_inputs(ctx, a.ravel(), b.ravel()))
    return keys.reshape(n, n, HIDDEN)


def action_logits(net, state, ctx, keys=None):
    """Logits for ``env.legal_actions(state)``, in the same order.

    Returns ``(logits, anchors, incomings)``.
    """
    if state.done:
        raise EpisodeFinished("no legal actions in a finished assembly")
    ctx = _check_ctx(net, _as_context(ctx))
    anchors, incomings = env.legal_action_arrays(state)
    g, _ = mlp_forward(net.f_c, query_input(state, ctx)[None, :])
    if keys is None:
        k, _ = mlp_forward(net.f_a, key_inputs(ctx, anchors, incomings))
    else:
        k = keys[anchors, incomings]
    return (k @ g[0]) * LOGIT_SCALE, anchors, incomings


def _softmax(logits):
    z = logits - logits.max()
    p = np.exp(z)
    return p / p.sum()


def action_distribution(net, state, ctx, keys=None):
    logits, anchors, incomings = action_logits(net, state, ctx, keys)
    actions = [env.AssemblyAction(int(a), int(b)) for a, b in zip(anchors, incomings)]
    return ActionDistribution(actions, _softmax(logits))


def sample_index(logits, rng):
    """Index drawn from ``softmax(logits)`` and its log-probability."""
    z = logits - logits.max()
    logp = z - np.log(np.exp(z).sum())
    cdf = np.cumsum(np.exp(logp))
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    idx = min(idx, len(cdf) - 1)
    return idx, float(logp[idx])


def sample_action(net, state, ctx, rng, keys=None):
    """Draw an action from the policy; returns ``(action, log_prob)``."""
    logits, anchors, incomings = action_logits(net, state, ctx, keys)
    idx, logp = sample_index(logits, rng)
    return env.AssemblyAction(int(anchors[idx]), int(incomings[idx])), logp


def greedy_action(net, state, ctx, keys=None):
    """Most probable action; ties go to the lowest (anchor, incoming)."""
    logits, anchors, incomings = action_logits(net, state, ctx, keys)
    idx = int(np.argmax(logits))
    return env.AssemblyAction(int(anchors[idx]), int(incomings[idx]))


def state_value(vnet, state, ctx):
    y, _ = mlp_forward(vnet.mlp, value_input(state, ctx)[None, :])
    return float(y[0, 0])


# -- batched evaluation for PPO ------------------------------------------------

@dataclass
class StepBatch:
    """Flattened policy inputs for many decision steps.

    Rows ``offsets[s]:offsets[s+1]`` of ``key_x`` are the legal actions of step
    ``s``; ``chosen[s]`` is the row taken, relative to that step's block.
    """
    query_x: np.ndarray
    key_x: np.ndarray
    offsets: np.ndarray
    chosen: np.ndarray

    @property
    def n_steps(self):
        return self.query_x.shape[0]


def build_step_batch(items):
    """``items``: iterable of ``(query_x, key_x, chosen_index)`` per step."""
    qs, ks, chosen, offsets = [], [], [], [0]
    for q, k, c in items:
        qs.append(q)
        ks.append(k)
        chosen.append(c)
        offsets.append(offsets[-1] + k.shape[0])
    return StepBatch(np.stack(qs), np.concatenate(ks), np.array(offsets), np.array(chosen))


def batch_logprobs(net, batch):
    """Log-probability of each chosen action and each step's entropy.

    Returns ``(logp, entropy, cache)`` with one entry per step.
    """
    g, cache_c = mlp_forward(net.f_c, batch.query_x)
    k, cache_a = mlp_forward(net.f_a, batch.key_x)
    starts = batch.offsets[:-1]
    sizes = np.diff(batch.offsets)
    seg = np.repeat(np.arange(batch.n_steps), sizes)
    logits = (k * g[seg]).sum(axis=1) * LOGIT_SCALE
    mx = np.maximum.reduceat(logits, starts)
    z = logits - mx[seg]
    lse = np.log(np.add.reduceat(np.exp(z), starts))
    logp_all = z - lse[seg]
    p = np.exp(logp_all)
    entropy = -np.add.reduceat(p * logp_all, starts)
    rows = starts + batch.chosen
    cache = (g, k, seg, rows, p, logp_all, entropy, cache_c, cache_a, starts)
    return logp_all[rows], entropy, cache


def batch_logprobs_backward(net, cache, dlogp, dentropy):
    g, k, seg, rows, p, logp_all, entropy, cache_c, cache_a, starts = cache
    dlogits = -p * dlogp[seg]
    dlogits[rows] += dlogp
    dlogits += dentropy[seg] * (-p * (logp_all + entropy[seg]))
    dlogits *= LOGIT_SCALE
    dk = dlogits[:, None] * g[seg]
    dg = np.add.reduceat(dlogits[:, None] * k, starts, axis=0)
    _, grads = mlp_backward(net.f_c, cache_c, dg)
    _, grads_a = mlp_backward(net.f_a, cache_a, dk)
    grads.update(grads_a)
    return grads


def batch_values(vnet, value_x):
    y, cache = mlp_forward(vnet.mlp, value_x)
    return y[:, 0], cache


def batch_values_backward(vnet, cache, dvalues):
    _, grads = mlp_backward(vnet.mlp, cache, np.asarray(dvalues)[:, None])
    return grads
