"""PPO training of the assembly policy with an adversarial GCN reward.

One training *episode* is one outer iteration: sample a batch of assemblies
with the frozen policy, take K discriminator steps (truth graphs versus the
freshly generated ones), add the adversarial reward, then run PPO epochs on
the batch.
"""

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import env, policy as pol
from .adversary import (AssemblyGraph, Discriminator, adversarial_rewards, gcn_forward_batch,
                        train_discriminator)
from .errors import (DomainError, EmptyBatch, IncompatibleCheckpoint, KeyMismatch,
                     NonFiniteLoss, ShapeMismatch)
from .nn import adam_step, clip_global_norm, mlp_forward

METRIC_COLUMNS = ("episode", "mean_reward", "mean_rmsd", "mean_D_pos", "mean_D_neg",
                  "policy_loss", "value_loss", "entropy", "clip_fraction")
CHECKPOINT_FORMAT = "treedock-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class PpoConfig:
    clip_eps: float = 0.2
    gamma: float = 1.0
    entropy_coef: float = 0.01
    max_grad_norm: float = 0.5
    batch_size: int = 100
    lr_policy: float = 3e-4
    lr_value: float = 6e-4
    lr_disc: float = 3e-4
    ppo_epochs: int = 4
    disc_steps: int = 5
    beta: float = 10.0
    value_coef: float = 0.5
    normalize_advantages: bool = False
    per_step_adversarial: bool = False
    # extensions, off by default
    pair_features: bool = False
    shaped_reward: bool = False
    clash_weight: float = 0.0
    workers: int = 1

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise DomainError(f"clip_eps must lie in (0, 1), got {self.clip_eps}")
        for name in ("gamma", "entropy_coef", "max_grad_norm", "lr_policy", "lr_value",
                     "lr_disc", "beta", "value_coef", "clash_weight"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("batch_size", "ppo_epochs", "workers"):
            if int(getattr(self, name)) < 1:
                raise DomainError(f"{name} must be >= 1, got {getattr(self, name)}")
        if int(self.disc_steps) < 0:
            raise DomainError(f"disc_steps must be >= 0, got {self.disc_steps}")

    @classmethod
    def from_dict(cls, obj):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise DomainError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**obj)


@dataclass
class Step:
    state: env.AssemblyState
    action: env.AssemblyAction
    log_prob: float
    reward: float
    value: float
    query_x: np.ndarray
    key_x: np.ndarray
    chosen: int
    value_x: np.ndarray


@dataclass
class Trajectory:
    complex_index: int
    steps: list
    graph: AssemblyGraph
    domain_reward: float
    rmsd: float
    adversarial_reward: float = 0.0

    def __len__(self):
        return len(self.steps)

    @property
    def rewards(self):
        return np.array([s.reward for s in self.steps])

    @property
    def total_reward(self):
        return float(self.rewards.sum())

    @property
    def tree(self):
        return tuple((s.action.anchor, s.action.incoming) for s in self.steps)


@dataclass
class Dataset:
    """Records, dimer libraries and the per-complex network inputs."""
    records: list
    dimers: list
    contexts: list = field(default_factory=list)
    truth_graphs: list = field(default_factory=list)

    @classmethod
    def build(cls, pairs, pair_features=False):
        pairs = list(pairs)
        if not pairs:
            raise EmptyBatch("dataset is empty")
        records = [r for r, _ in pairs]
        dimers = [d for _, d in pairs]
        contexts = [pol.ComplexContext.build(r, d, pair_features) for r, d in pairs]
        graphs = [AssemblyGraph.from_edges(c.embeddings, r.truth_tree)
                  for r, c in zip(records, contexts)]
        return cls(records, dimers, contexts, graphs)

    def __len__(self):
        return len(self.records)


# -- rollouts ------------------------------------------------------------------

def rollout(net, vnet, record, dimers, ctx, rng, keys=None, shaped_reward=False,
            clash_weight=0.0, complex_index=0):
    """Sample one complete assembly with the current policy."""
    if keys is None:
        keys = pol.all_pair_keys(net, ctx)
    key_ctx = pol._check_ctx(net, ctx)
    state = env.reset(record, dimers)
    steps = []
    prev_partial = 0.0
    while not state.done:
        anchors, incomings = env.legal_action_arrays(state)
        q = pol.query_input(state, ctx)
        g, _ = mlp_forward(net.f_c, q[None, :])
        logits = (keys[anchors, incomings] @ g[0]) * pol.LOGIT_SCALE
        idx, logp = pol.sample_index(logits, rng)
        vx = pol.value_input(state, ctx)
        v, _ = mlp_forward(vnet.mlp, vx[None, :])
        action = env.AssemblyAction(int(anchors[idx]), int(incomings[idx]))
        nxt = env.step(state, action, dimers)
        reward = 0.0
        if shaped_reward:
            partial = env.partial_rmsd(nxt, record)
            reward = prev_partial - partial
            prev_partial = partial
        steps.append(Step(state, action, logp, reward, float(v[0, 0]), q,
                          pol.key_inputs(key_ctx, anchors, incomings), idx, vx))
        state = nxt
    domain = env.terminal_domain_reward(state, record, clash_weight)
    rmsd = -env.terminal_domain_reward(state, record)
    if shaped_reward:
        # the shaped rewards already telescope to -rmsd; only the clash term is left
        steps[-1].reward += domain + rmsd
    else:
        steps[-1].reward += domain
    graph = AssemblyGraph.from_edges(ctx.embeddings, state.graph_edges)
    return Trajectory(complex_index, steps, graph, domain, rmsd)


def _rollout_chunk(net, vnet, dataset, jobs, shaped_reward, clash_weight):
    keys = {}
    out = []
    for index, seed in jobs:
        if index not in keys:
            keys[index] = pol.all_pair_keys(net, dataset.contexts[index])
        out.append(rollout(net, vnet, dataset.records[index], dataset.dimers[index],
                           dataset.contexts[index], np.random.default_rng(seed),
                           keys[index], shaped_reward, clash_weight, index))
    return out


def collect_rollouts(net, vnet, dataset, count, rng, cfg=None):
    """``count`` assemblies of uniformly drawn complexes, sampled with frozen parameters.

    Each assembly draws its own seed from ``rng`` up front, so the result does
    not depend on ``cfg.workers``.
    """
    cfg = cfg or PpoConfig()
    if len(dataset) == 0:
        raise EmptyBatch("dataset is empty")
    indices = rng.integers(len(dataset), size=count)
    seeds = rng.integers(2 ** 63, size=count)
    jobs = list(zip(indices.tolist(), seeds.tolist()))
    if cfg.workers <= 1 or count < 2:
        return _rollout_chunk(net, vnet, dataset, jobs, cfg.shaped_reward, cfg.clash_weight)
    chunks = [jobs[k::cfg.workers] for k in range(cfg.workers)]
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        parts = list(pool.map(_rollout_chunk, *zip(*[(net, vnet, dataset, c, cfg.shaped_reward,
                                                       cfg.clash_weight) for c in chunks])))
    out = [None] * count
    for k, part in enumerate(parts):
        out[k::cfg.workers] = part
    return out


def _docked_subgraph(state, embeddings):
    nodes = sorted(state.docked)
    where = {c: k for k, c in enumerate(nodes)}
    return AssemblyGraph.from_edges(embeddings[nodes],
                                    [(where[a], where[b]) for a, b in state.graph_edges])


def assign_adversarial_rewards(trajectories, disc, beta, dataset, per_step=False):
    """Add ``beta * -log(1 - D)`` to the rewards.

    By default only the completed assembly graph is scored, on the last step.
    With ``per_step`` every step is scored on the graph of the chains docked
    after it.
    """
    if beta == 0 or not trajectories:
        return
    if not per_step:
        ar = adversarial_rewards(disc, [t.graph for t in trajectories], beta)
        for t, r in zip(trajectories, ar):
            t.steps[-1].reward += float(r)
            t.adversarial_reward = float(r)
        return
    for t in trajectories:
        emb = dataset.contexts[t.complex_index].embeddings
        graphs = []
        for k in range(len(t.steps)):
            nxt = t.steps[k + 1].state if k + 1 < len(t.steps) else None
            if nxt is None:
                graphs.append(t.graph)
            else:
                graphs.append(_docked_subgraph(nxt, emb))
        ar = adversarial_rewards(disc, graphs, beta)
        for s, r in zip(t.steps, ar):
            s.reward += float(r)
        t.adversarial_reward = float(ar.sum())


# -- advantages and the PPO objective --------------------------------------------

def compute_advantages(traj, vnet, gamma=1.0):
    """One-step TD advantages ``A_t = r_t + gamma V(s_{t+1}) - V(s_t)``, ``V(terminal) = 0``.

    Returns ``(advantages, td_errors)``; with one-step TD they coincide, and
    the value loss regresses ``V(s_t)`` onto ``r_t + gamma V(s_{t+1})``.
    """
    x = np.stack([s.value_x for s in traj.steps])
    v, _ = mlp_forward(vnet.mlp, x)
    v = v[:, 0]
    nxt = np.append(v[1:], 0.0)
    td = traj.rewards + gamma * nxt - v
    return td.copy(), td


@dataclass
class PpoBatch:
    steps: pol.StepBatch
    old_logp: np.ndarray
    advantages: np.ndarray
    value_x: np.ndarray
    value_targets: np.ndarray
    owner: np.ndarray


def build_ppo_batch(trajectories, vnet, cfg):
    if not trajectories:
        raise EmptyBatch("no trajectories")
    items, old, adv, vx, targets, owner = [], [], [], [], [], []
    for k, t in enumerate(trajectories):
        a, _ = compute_advantages(t, vnet, cfg.gamma)
        x = np.stack([s.value_x for s in t.steps])
        v, _ = mlp_forward(vnet.mlp, x)
        targets.append(a + v[:, 0])
        adv.append(a)
        vx.append(x)
        owner.append(np.full(len(t), k))
        for s in t.steps:
            items.append((s.query_x, s.key_x, s.chosen))
            old.append(s.log_prob)
    adv = np.concatenate(adv)
    if cfg.normalize_advantages and adv.size > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return PpoBatch(pol.build_step_batch(items), np.array(old), adv, np.concatenate(vx),
                    np.concatenate(targets), np.concatenate(owner))


def policy_loss_and_grads(net, batch, cfg):
    """Negative clipped surrogate minus the entropy bonus, averaged over steps."""
    logp, ent, cache = pol.batch_logprobs(net, batch.steps)
    s = logp.shape[0]
    ratio = np.exp(logp - batch.old_logp)
    clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
    a = batch.advantages
    unclipped_term = ratio * a
    clipped_term = clipped * a
    use_unclipped = unclipped_term <= clipped_term
    surrogate = np.where(use_unclipped, unclipped_term, clipped_term)
    loss = -surrogate.mean() - cfg.entropy_coef * ent.mean()
    dlogp = np.where(use_unclipped, -a * ratio / s, 0.0)
    dent = np.full(s, -cfg.entropy_coef / s)
    grads = pol.batch_logprobs_backward(net, cache, dlogp, dent)
    stats = {
        "surrogate": float(surrogate.mean()),
        "policy_loss": float(loss),
        "entropy": float(ent.mean()),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps)),
        "per_step": -surrogate - cfg.entropy_coef * ent,
    }
    return float(loss), grads, stats


def value_loss_and_grads(vnet, batch, cfg):
    """``value_coef * mean((V(s_t) - target_t)^2)`` with targets held fixed."""
    v, cache = pol.batch_values(vnet, batch.value_x)
    diff = v - batch.value_targets
    loss = cfg.value_coef * float(np.mean(diff ** 2))
    grads = pol.batch_values_backward(vnet, cache, cfg.value_coef * 2.0 * diff / diff.size)
    return loss, grads, diff ** 2


def _check_finite(name, loss, per_step, batch, trajectories):
    if np.isfinite(loss):
        return
    bad = np.flatnonzero(~np.isfinite(per_step))
    k = int(batch.owner[bad[0]]) if bad.size else -1
    where = f"trajectory {k} (complex index {trajectories[k].complex_index})" if k >= 0 else "batch"
    raise NonFiniteLoss(f"{name} is not finite in {where}")


def ppo_update(net, vnet, trajectories, cfg):
    """PPO epochs over one rollout batch; returns averaged statistics.

    Advantages and value targets are computed once, before any update.
    """
    batch = build_ppo_batch(trajectories, vnet, cfg)
    if not (np.all(np.isfinite(batch.advantages)) and np.all(np.isfinite(batch.old_logp))):
        bad = np.flatnonzero(~np.isfinite(batch.advantages + batch.old_logp))
        raise NonFiniteLoss(f"non-finite advantage in trajectory {int(batch.owner[bad[0]])}")
    totals = {"surrogate": 0.0, "policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0,
              "clip_fraction": 0.0}
    for _ in range(cfg.ppo_epochs):
        ploss, pgrads, pstats = policy_loss_and_grads(net, batch, cfg)
        _check_finite("policy loss", ploss, pstats["per_step"], batch, trajectories)
        vloss, vgrads, vper = value_loss_and_grads(vnet, batch, cfg)
        _check_finite("value loss", vloss, vper, batch, trajectories)
        adam_step(net.store, clip_global_norm(pgrads, cfg.max_grad_norm), cfg.lr_policy)
        adam_step(vnet.store, clip_global_norm(vgrads, cfg.max_grad_norm), cfg.lr_value)
        for k in ("surrogate", "policy_loss", "entropy", "clip_fraction"):
            totals[k] += pstats[k]
        totals["value_loss"] += vloss
    return {k: v / cfg.ppo_epochs for k, v in totals.items()}


# -- checkpoints -----------------------------------------------------------------

def _atomic_write_json(path, obj):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh)
    os.replace(tmp, path)


def save_checkpoint(path, net, vnet, disc, cfg, episode, seed, rng):
    _atomic_write_json(path, {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "episode": episode,
        "seed": seed,
        "config": asdict(cfg),
        "policy": {"pair_features": net.pair_features, "store": net.store.to_dict()},
        "value": vnet.store.to_dict(),
        "discriminator": disc.store.to_dict(),
        "rng": rng.bit_generator.state if rng is not None else None,
    })


def load_checkpoint(path):
    """Rebuild ``(policy, value, discriminator, payload)`` from a checkpoint file."""
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise IncompatibleCheckpoint(f"{path}: cannot read checkpoint ({exc})") from exc
    if not isinstance(obj, dict) or obj.get("format") != CHECKPOINT_FORMAT:
        raise IncompatibleCheckpoint(f"{path}: not a treedock checkpoint")
    if obj.get("version") != CHECKPOINT_VERSION:
        raise IncompatibleCheckpoint(f"{path}: unsupported version {obj.get('version')}")
    rng = np.random.default_rng(0)
    try:
        net = pol.PolicyNet.create(rng, bool(obj["policy"]["pair_features"]))
        net.store.load_dict(obj["policy"]["store"])
        vnet = pol.ValueNet.create(rng)
        vnet.store.load_dict(obj["value"])
        disc = Discriminator.create(rng)
        disc.store.load_dict(obj["discriminator"])
    except (KeyError, KeyMismatch, ShapeMismatch, TypeError, ValueError) as exc:
        raise IncompatibleCheckpoint(f"{path}: {exc}") from exc
    return net, vnet, disc, obj


# -- the training loop -----------------------------------------------------------

@dataclass
class TrainState:
    policy: pol.PolicyNet
    value: pol.ValueNet
    discriminator: Discriminator
    rng: np.random.Generator
    episode: int = 0
    metrics: list = field(default_factory=list)


def _format(x):
    return str(x) if isinstance(x, (int, np.integer)) else repr(float(x))


def _open_metrics(path, upto):
    """Metrics CSV positioned for appending after episode ``upto``."""
    rows = []
    if upto > 0 and os.path.exists(path):
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh)][1:]
        rows = [r for r in rows if r and int(r[0]) <= upto]
    fh = open(path, "w", newline="")
    writer = csv.writer(fh)
    writer.writerow(METRIC_COLUMNS)
    writer.writerows(rows)
    fh.flush()
    return fh, writer


def discriminator_phase(disc, dataset, trajectories, cfg, rng):
    """K discriminator steps on truth graphs versus generated graphs; returns mean D values."""
    negatives = [t.graph for t in trajectories]
    positives = None
    for _ in range(cfg.disc_steps):
        idx = rng.integers(len(dataset), size=cfg.batch_size)
        positives = [dataset.truth_graphs[i] for i in idx]
        train_discriminator(disc, positives, negatives, cfg.lr_disc, rng)
    if positives is None:
        idx = rng.integers(len(dataset), size=cfg.batch_size)
        positives = [dataset.truth_graphs[i] for i in idx]
    d_pos, _ = gcn_forward_batch(disc, positives)
    d_neg, _ = gcn_forward_batch(disc, negatives)
    return float(d_pos.mean()), float(d_neg.mean())


def train(dataset, cfg, seed, episodes, out=None, resume=None, callback=None,
          checkpoint_every=1):
    """Alternate rollouts, discriminator steps and PPO updates for ``episodes`` episodes.

    ``dataset`` is a :class:`Dataset` or a list of ``(record, dimers)``.
    With ``out``, ``metrics.csv`` and ``checkpoint.json`` are written there
    (the checkpoint atomically). ``callback(state, row)`` runs after every
    episode; returning True stops training early.
    """
    if not isinstance(dataset, Dataset):
        dataset = Dataset.build(dataset, cfg.pair_features)
    if resume is not None:
        net, vnet, disc, payload = load_checkpoint(resume)
        if net.pair_features != cfg.pair_features:
            raise IncompatibleCheckpoint("checkpoint policy and config disagree on pair_features")
        rng = np.random.default_rng()
        rng.bit_generator.state = payload["rng"]
        state = TrainState(net, vnet, disc, rng, int(payload["episode"]))
    else:
        rng = np.random.default_rng(seed)
        net = pol.PolicyNet.create(rng, cfg.pair_features)
        vnet = pol.ValueNet.create(rng)
        disc = Discriminator.create(rng)
        state = TrainState(net, vnet, disc, rng)
    fh = writer = None
    if out is not None:
        os.makedirs(out, exist_ok=True)
        fh, writer = _open_metrics(os.path.join(out, "metrics.csv"), state.episode)
    try:
        while state.episode < episodes:
            state.episode += 1
            trajs = collect_rollouts(state.policy, state.value, dataset, cfg.batch_size,
                                     state.rng, cfg)
            if cfg.beta > 0:
                d_pos, d_neg = discriminator_phase(state.discriminator, dataset, trajs, cfg,
                                                   state.rng)
                assign_adversarial_rewards(trajs, state.discriminator, cfg.beta, dataset,
                                           cfg.per_step_adversarial)
            else:
                d_pos = d_neg = 0.5
            stats = ppo_update(state.policy, state.value, trajs, cfg)
            row = {
                "episode": state.episode,
                "mean_reward": float(np.mean([t.total_reward for t in trajs])),
                "mean_rmsd": float(np.mean([t.rmsd for t in trajs])),
                "mean_D_pos": d_pos,
                "mean_D_neg": d_neg,
                "policy_loss": stats["policy_loss"],
                "value_loss": stats["value_loss"],
                "entropy": stats["entropy"],
                "clip_fraction": stats["clip_fraction"],
            }
            state.metrics.append(row)
            if writer is not None:
                writer.writerow([_format(row[c]) for c in METRIC_COLUMNS])
                fh.flush()
                if state.episode % checkpoint_every == 0 or state.episode == episodes:
                    save_checkpoint(os.path.join(out, "checkpoint.json"), state.policy,
                                    state.value, state.discriminator, cfg, state.episode,
                                    seed, state.rng)
            if callback is not None and callback(state, row):
                if writer is not None and state.episode % checkpoint_every != 0:
                    save_checkpoint(os.path.join(out, "checkpoint.json"), state.policy,
                                    state.value, state.discriminator, cfg, state.episode,
                                    seed, state.rng)
                break
    finally:
        if fh is not None:
            fh.close()
    return state


# -- inference and evaluation ----------------------------------------------------

def assemble(net, record, dimers, ctx=None, greedy=True, rng=None):
    """One forward rollout; returns an :class:`env.EpisodeResult`."""
    if ctx is None:
        ctx = pol.ComplexContext.build(record, dimers, net.pair_features)
    keys = pol.all_pair_keys(net, ctx)
    state = env.reset(record, dimers)
    while not state.done:
        if greedy:
            action = pol.greedy_action(net, state, ctx, keys)
        else:
            action, _ = pol.sample_action(net, state, ctx, rng, keys)
        state = env.step(state, action, dimers)
    coords = [state.placed[k] for k in range(record.n)]
    return env.EpisodeResult(coords, state.graph_edges, env.terminal_domain_reward(state, record))


def evaluate(net, dataset, greedy=True, rng=None):
    """Per-complex terminal RMSD of greedy (or sampled) assemblies."""
    if not isinstance(dataset, Dataset):
        dataset = Dataset.build(dataset, net.pair_features)
    return np.array([assemble(net, r, d, c, greedy, rng).rmsd
                     for r, d, c in zip(dataset.records, dataset.dimers, dataset.contexts)])

