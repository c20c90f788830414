import itertools

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from treedock import adversary as adv, data, env, nn, policy as pol, trainer
from treedock.errors import DomainError, IncompatibleCheckpoint, NonFiniteLoss
from treedock.trees import check_spanning_tree

A = env.AssemblyAction


def small_cfg(**kw):
    kw.setdefault("batch_size", 8)
    return trainer.PpoConfig(**kw)


@pytest.fixture(scope="module")
def mixed():
    return trainer.Dataset.build([data.generate_complex(s, n, (6, 10), 0.1)
                                  for s, n in ((1, 3), (2, 4), (3, 5))])


def nets(seed=0, pf=False):
    rng = np.random.default_rng(seed)
    return pol.PolicyNet.create(rng, pf), pol.ValueNet.create(rng)


def same_trajectories(a, b):
    for x, y in zip(a, b):
        assert x.complex_index == y.complex_index and x.tree == y.tree
        assert [s.log_prob for s in x.steps] == [s.log_prob for s in y.steps]
        assert np.array_equal(x.rewards, y.rewards)
    return len(a) == len(b)


def test_rollouts_deterministic_and_spanning(mixed):
    net, vnet = nets()
    a = trainer.collect_rollouts(net, vnet, mixed, 20, np.random.default_rng(4))
    b = trainer.collect_rollouts(net, vnet, mixed, 20, np.random.default_rng(4))
    assert same_trajectories(a, b)
    for t in a:
        n = mixed.records[t.complex_index].n
        assert len(t) == n - 1
        check_spanning_tree(n, t.tree)
        assert np.count_nonzero(t.rewards[:-1]) == 0


def test_rollouts_independent_of_worker_count(mixed):
    net, vnet = nets()
    a = trainer.collect_rollouts(net, vnet, mixed, 6, np.random.default_rng(1))
    b = trainer.collect_rollouts(net, vnet, mixed, 6, np.random.default_rng(1),
                                 small_cfg(workers=2))
    assert same_trajectories(a, b)


def _scipy_rmsd(pred, truth):
    pc, tc = pred - pred.mean(0), truth - truth.mean(0)
    rot, _ = Rotation.align_vectors(tc, pc)
    return float(np.sqrt(((rot.apply(pc) - tc) ** 2).sum(1).mean()))


def test_rollout_rewards_match_enumeration_oracle():
    record, dimers = data.generate_complex(2, 3)
    ds = trainer.Dataset.build([(record, dimers)])
    # reward of every action sequence on N = 3, by re-assembly from its tree
    table = {}
    for first in itertools.permutations(range(3), 2):
        rest = [k for k in range(3) if k not in first][0]
        for anchor in first:
            edges = tuple(sorted([tuple(sorted(first)), tuple(sorted((anchor, rest)))]))
            pred = np.concatenate(data.assemble_along_tree(record, dimers, edges))
            table[(first, anchor)] = -_scipy_rmsd(pred, record.truth_coords())
    net, vnet = nets(3)
    for t in trainer.collect_rollouts(net, vnet, ds, 30, np.random.default_rng(0)):
        (a, b), (c, _) = t.tree
        assert abs(t.domain_reward - table[((a, b), c)]) < 1e-9
        assert abs(t.rmsd + t.domain_reward) < 1e-12


def zero_value(vnet):
    vnet.store.fill(0.0)
    return vnet


def fake_traj(rewards, value_x):
    steps = [trainer.Step(None, None, 0.0, r, 0.0, None, None, 0, x) for r, x in zip(rewards, value_x)]
    return trainer.Trajectory(0, steps, None, rewards[-1], -rewards[-1])


def test_advantages_zero(rng):
    _, vnet = nets()
    zero_value(vnet)
    adv_, td = trainer.compute_advantages(fake_traj([0.0] * 3, rng.normal(size=(3, 26))), vnet)
    assert np.all(adv_ == 0) and np.all(td == 0)


def test_advantages_terminal_only(rng):
    _, vnet = nets()
    zero_value(vnet)
    adv_, _ = trainer.compute_advantages(fake_traj([0.0, 0.0, -7.5], rng.normal(size=(3, 26))), vnet)
    assert np.array_equal(adv_, [0.0, 0.0, -7.5])


def test_advantages_random_values_hand_computed(rng):
    _, vnet = nets(5)
    x = rng.normal(size=(4, 26))
    r = [0.3, -1.0, 0.0, -4.0]
    v = [float(nn.mlp_forward(vnet.mlp, row[None])[0][0, 0]) for row in x]
    expected = [r[0] + v[1] - v[0], r[1] + v[2] - v[1], r[2] + v[3] - v[2], r[3] - v[3]]
    adv_, td = trainer.compute_advantages(fake_traj(r, x), vnet)
    assert np.allclose(adv_, expected, atol=1e-12) and np.allclose(td, expected, atol=1e-12)
    assert abs(adv_.sum() - (sum(r) - v[0])) < 1e-12


def batch_for(mixed, count=2, seed=0, pf=False):
    net, vnet = nets(seed, pf)
    ds = trainer.Dataset.build(list(zip(mixed.records, mixed.dimers)), pf)
    trajs = trainer.collect_rollouts(net, vnet, ds, count, np.random.default_rng(seed))
    return net, vnet, trajs, trainer.build_ppo_batch(trajs, vnet, trainer.PpoConfig())


def test_first_epoch_equals_vanilla_policy_gradient(mixed):
    net, _, _, batch = batch_for(mixed, 4)
    cfg = trainer.PpoConfig(entropy_coef=0.0)
    _, grads, stats = trainer.policy_loss_and_grads(net, batch, cfg)
    assert stats["clip_fraction"] == 0.0
    _, _, cache = pol.batch_logprobs(net, batch.steps)
    n = batch.advantages.size
    vanilla = pol.batch_logprobs_backward(net, cache, -batch.advantages / n, np.zeros(n))
    for k in grads:
        assert np.allclose(grads[k], vanilla[k], atol=1e-14)


def test_clipped_ratio_has_no_gradient(mixed):
    net, _, _, batch = batch_for(mixed, 2)
    logp, _, _ = pol.batch_logprobs(net, batch.steps)
    batch.old_logp = logp - np.log(1.5)
    batch.advantages = np.abs(batch.advantages) + 1.0
    cfg = trainer.PpoConfig(entropy_coef=0.0)
    loss, grads, stats = trainer.policy_loss_and_grads(net, batch, cfg)
    assert stats["clip_fraction"] == 1.0
    assert loss == pytest.approx(-(1.2 * batch.advantages).mean())
    assert all(np.all(g == 0) for g in grads.values())


@pytest.mark.parametrize("pf", [False, True])
def test_full_ppo_loss_gradcheck(mixed, pf):
    net, vnet, trajs, batch = batch_for(mixed, 2, seed=1, pf=pf)
    assert len(trajs) == 2
    # move away from ratio 1 without touching the clip boundaries
    batch.old_logp = batch.old_logp + np.random.default_rng(0).uniform(-0.05, 0.05, batch.old_logp.size)
    cfg = trainer.PpoConfig()

    def pclosure():
        loss, grads, _ = trainer.policy_loss_and_grads(net, batch, cfg)
        return loss, grads

    def vclosure():
        loss, grads, _ = trainer.value_loss_and_grads(vnet, batch, cfg)
        return loss, grads
    assert nn.gradcheck(pclosure, net.store).max_rel_error < 1e-4
    assert nn.gradcheck(vclosure, vnet.store).max_rel_error < 1e-4


def test_ppo_update_stats_and_ownership(mixed):
    net, vnet = nets()
    disc = adv.Discriminator.create(np.random.default_rng(0))
    d0 = disc.store.snapshot()
    p0 = net.store.snapshot()
    trajs = trainer.collect_rollouts(net, vnet, mixed, 10, np.random.default_rng(0))
    assert all(np.array_equal(p0[k], net.store[k]) for k in p0)
    stats = trainer.ppo_update(net, vnet, trajs, small_cfg(ppo_epochs=1))
    assert stats["clip_fraction"] == 0.0
    stats = trainer.ppo_update(net, vnet, trajs, small_cfg(ppo_epochs=4))
    assert 0.0 <= stats["clip_fraction"] <= 1.0
    assert all(np.array_equal(d0[k], disc.store[k]) for k in d0)
    assert any(not np.array_equal(p0[k], net.store[k]) for k in p0)


def test_discriminator_phase_leaves_policy(mixed):
    net, vnet = nets()
    p0 = net.store.snapshot()
    disc = adv.Discriminator.create(np.random.default_rng(0))
    trajs = trainer.collect_rollouts(net, vnet, mixed, 8, np.random.default_rng(0))
    trainer.discriminator_phase(disc, mixed, trajs, small_cfg(), np.random.default_rng(1))
    trainer.assign_adversarial_rewards(trajs, disc, 10.0, mixed)
    assert all(np.array_equal(p0[k], net.store[k]) for k in p0)
    assert all(t.adversarial_reward > 0 for t in trajs)
    assert all(abs(t.total_reward - (t.domain_reward + t.adversarial_reward)) < 1e-9 for t in trajs)


def test_per_step_adversarial_reward(mixed):
    net, vnet = nets()
    disc = adv.Discriminator.create(np.random.default_rng(0))
    trajs = trainer.collect_rollouts(net, vnet, mixed, 4, np.random.default_rng(0))
    trainer.assign_adversarial_rewards(trajs, disc, 1.0, mixed, per_step=True)
    for t in trajs:
        assert np.all(t.rewards[:-1] > 0)


def test_shaped_reward_telescopes(mixed):
    net, vnet = nets()
    trajs = trainer.collect_rollouts(net, vnet, mixed, 10, np.random.default_rng(0),
                                     small_cfg(shaped_reward=True))
    for t in trajs:
        assert abs(t.rewards.sum() + t.rmsd) < 1e-9


def test_non_finite_loss_names_trajectory(mixed):
    net, vnet = nets()
    trajs = trainer.collect_rollouts(net, vnet, mixed, 3, np.random.default_rng(0))
    trajs[1].steps[-1].reward = np.nan
    with pytest.raises(NonFiniteLoss, match="trajectory 1"):
        trainer.ppo_update(net, vnet, trajs, small_cfg())


def test_config_validation():
    with pytest.raises(DomainError):
        trainer.PpoConfig(clip_eps=1.0)
    with pytest.raises(DomainError):
        trainer.PpoConfig(entropy_coef=-0.1)
    with pytest.raises(DomainError):
        trainer.PpoConfig.from_dict({"clip": 0.2})
    assert trainer.PpoConfig.from_dict({"beta": 0}).beta == 0


def test_train_deterministic(mixed):
    a = trainer.train(mixed, small_cfg(), 3, 3).metrics
    b = trainer.train(mixed, small_cfg(), 3, 3).metrics
    assert a == b
    assert a != trainer.train(mixed, small_cfg(), 4, 3).metrics


def test_beta_zero_ablation(mixed):
    state = trainer.train(mixed, small_cfg(beta=0.0), 0, 3)
    d0 = adv.Discriminator.create(np.random.default_rng(0))
    assert all(r["mean_D_pos"] == 0.5 and r["mean_D_neg"] == 0.5 for r in state.metrics)
    assert all(abs(r["mean_reward"] + r["mean_rmsd"]) < 1e-9 for r in state.metrics)
    assert state.discriminator.store.step == 0
    assert d0.store.shapes() == state.discriminator.store.shapes()


def test_metrics_csv_and_checkpoint(tmp_path, mixed):
    trainer.train(mixed, small_cfg(), 0, 2, out=tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(trainer.METRIC_COLUMNS)
    assert len(lines) == 3
    assert not list(tmp_path.glob("*.tmp"))
    net, vnet, disc, payload = trainer.load_checkpoint(tmp_path / "checkpoint.json")
    assert payload["episode"] == 2 and disc.store.step == 2 * 5


def test_resume_reproduces_metric_stream(tmp_path, mixed):
    full, part = tmp_path / "full", tmp_path / "part"
    trainer.train(mixed, small_cfg(), 9, 4, out=full)
    trainer.train(mixed, small_cfg(), 9, 2, out=part)
    trainer.train(mixed, small_cfg(), 9, 4, out=part, resume=part / "checkpoint.json")
    assert (full / "metrics.csv").read_bytes() == (part / "metrics.csv").read_bytes()


def test_incompatible_checkpoint(tmp_path, mixed):
    bad = tmp_path / "bad.json"
    bad.write_text('{"format": "something-else"}')
    with pytest.raises(IncompatibleCheckpoint):
        trainer.load_checkpoint(bad)
    trainer.train(mixed, small_cfg(), 0, 1, out=tmp_path)
    with pytest.raises(IncompatibleCheckpoint):
        trainer.train(mixed, small_cfg(pair_features=True), 0, 2, out=tmp_path,
                      resume=tmp_path / "checkpoint.json")


@pytest.fixture(scope="module")
def overfit_run():
    pairs = [data.generate_complex(1, 4)]
    return pairs, trainer.train(pairs, trainer.PpoConfig(beta=0.0), 0, 500)


def test_overfit_single_complex(overfit_run):
    pairs, state = overfit_run
    rmsd = [r["mean_rmsd"] for r in state.metrics]
    assert min(rmsd) < 0.5
    assert trainer.evaluate(state.policy, pairs)[0] < 1e-6


def test_overfit_reward_monotone_in_50_episode_windows(overfit_run):
    _, state = overfit_run
    reward = np.array([r["mean_reward"] for r in state.metrics])
    windows = reward.reshape(-1, 50).mean(axis=1)
    assert np.all(np.diff(windows) >= -0.05)


def test_entropy_bounded_on_fresh_states(mixed, rng):
    net, _ = nets()
    for record, dimers, ctx in zip(mixed.records, mixed.dimers, mixed.contexts):
        s = env.reset(record, dimers)
        p = pol.action_distribution(net, s, ctx).probs
        assert -(p * np.log(p)).sum() <= np.log(p.size) + 1e-12
