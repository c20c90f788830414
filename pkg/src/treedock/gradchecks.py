"""Finite-difference checks of every hand-written backward pass.

Each ``*_closure`` builds a random instance and returns ``(closure, store)``
ready for :func:`nn.gradcheck`.
"""

import numpy as np

from . import adversary, data, env, policy as pol
from .nn import gradcheck


def _random_steps(record, dimers, ctx, rng):
    """Policy inputs along a random complete assembly."""
    items = []
    states = []
    state = env.reset(record, dimers)
    while not state.done:
        anchors, incomings = env.legal_action_arrays(state)
        c = int(rng.integers(len(anchors)))
        items.append((pol.query_input(state, ctx), pol.key_inputs(ctx, anchors, incomings), c))
        states.append(state)
        state = env.step(state, env.AssemblyAction(int(anchors[c]), int(incomings[c])), dimers)
    return items, states


def _instance(rng, n_min=3, n_max=6):
    n = int(rng.integers(n_min, n_max + 1))
    return data.generate_complex(int(rng.integers(2 ** 31)), n, (8, 14),
                                 dimer_noise_sigma=float(rng.uniform(0.0, 0.3)))


def policy_closure(rng, pair_features=False):
    """Weighted sum of chosen-action log-probs and step entropies."""
    record, dimers = _instance(rng)
    ctx = pol.ComplexContext.build(record, dimers, pair_features)
    net = pol.PolicyNet.create(rng, pair_features)
    items, _ = _random_steps(record, dimers, ctx, rng)
    batch = pol.build_step_batch(items)
    w_logp = rng.normal(size=batch.n_steps)
    w_ent = rng.normal(size=batch.n_steps)

    def closure():
        logp, ent, cache = pol.batch_logprobs(net, batch)
        return float(w_logp @ logp + w_ent @ ent), pol.batch_logprobs_backward(net, cache, w_logp, w_ent)
    return closure, net.store


def value_closure(rng):
    """Squared error of V on the states of a random assembly."""
    record, dimers = _instance(rng)
    ctx = pol.ComplexContext.build(record, dimers)
    vnet = pol.ValueNet.create(rng)
    _, states = _random_steps(record, dimers, ctx, rng)
    x = np.stack([pol.value_input(s, ctx) for s in states])
    target = rng.normal(scale=5.0, size=len(states))

    def closure():
        v, cache = pol.batch_values(vnet, x)
        diff = v - target
        return float(np.mean(diff ** 2)), pol.batch_values_backward(vnet, cache, 2.0 * diff / diff.size)
    return closure, vnet.store


def _random_graph(rng, n):
    emb = np.stack([data.featurize("".join(rng.choice(list(data.AMINO_ACIDS),
                                                      size=int(rng.integers(5, 40)))))
                    for _ in range(n)])
    from .trees import random_tree
    return adversary.AssemblyGraph.from_edges(emb, random_tree(n, rng).edges)


def discriminator_closure(rng, train_mode=True):
    """Discriminator BCE on random positive and negative graphs, with a fixed dropout mask."""
    disc = adversary.Discriminator.create(rng)
    pos = [_random_graph(rng, int(rng.integers(3, 8))) for _ in range(3)]
    neg = [_random_graph(rng, int(rng.integers(3, 8))) for _ in range(3)]
    drop_seed = int(rng.integers(2 ** 31))

    def closure():
        loss, grads, _ = adversary.discriminator_loss(disc, pos, neg, train_mode,
                                                      np.random.default_rng(drop_seed))
        return loss, grads
    return closure, disc.store


def run_all(seed=0, instances=10, h=1e-5, tol=1e-4):
    """Rows of ``(network, instance, report)`` for the policy, value and discriminator checks."""
    rng = np.random.default_rng(seed)
    rows = []
    for k in range(instances):
        for name, make in (("policy", lambda: policy_closure(rng, pair_features=bool(k % 2))),
                           ("value", lambda: value_closure(rng)),
                           ("discriminator", lambda: discriminator_closure(rng))):
            closure, store = make()
            rows.append((name, k, gradcheck(closure, store, h=h, tol=tol)))
    return rows
