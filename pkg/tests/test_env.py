import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.transform import Rotation

from treedock import data, env, geom
from treedock.data import Chain, ComplexRecord, DimerEntry, DimerLibrary
from treedock.errors import EpisodeFinished, EpisodeUnfinished, IllegalAction, MissingDimer
from treedock.trees import bfs_order, enumerate_trees, random_tree

A = env.AssemblyAction


def scipy_rmsd(pred, truth):
    pc, tc = pred - pred.mean(0), truth - truth.mean(0)
    rot, _ = Rotation.align_vectors(tc, pc)
    return float(np.sqrt(((rot.apply(pc) - tc) ** 2).sum(1).mean()))


def test_reset(exact4):
    record, dimers = exact4
    s = env.reset(record, dimers)
    assert s.undocked == (0, 1, 2, 3) and s.docked == () and s.t == 0 and not s.placed
    assert env.reset(record, dimers) == s


def test_reset_large():
    record, dimers = data.generate_complex(1, 30, (5, 8))
    assert len(env.reset(record, dimers).undocked) == 30


def test_legal_action_counts(exact4):
    record, dimers = exact4
    s = env.reset(record, dimers)
    assert len(env.legal_actions(s)) == 12
    s = env.step(s, A(0, 1), dimers)
    assert len(env.legal_actions(s)) == 4
    s = env.step(env.step(s, A(0, 2), dimers), A(1, 3), dimers)
    assert s.done
    with pytest.raises(EpisodeFinished):
        env.legal_actions(s)
    with pytest.raises(EpisodeFinished):
        env.step(s, A(0, 1), dimers)


def test_legal_action_arrays_match(noisy5):
    record, dimers = noisy5
    s = env.reset(record, dimers)
    rng = np.random.default_rng(0)
    while not s.done:
        a, b = env.legal_action_arrays(s)
        acts = env.legal_actions(s)
        assert [(x.anchor, x.incoming) for x in acts] == list(zip(a.tolist(), b.tolist()))
        s = env.step(s, acts[int(rng.integers(len(acts)))], dimers)


def test_illegal_actions(exact4):
    record, dimers = exact4
    s = env.step(env.reset(record, dimers), A(0, 1), dimers)
    with pytest.raises(IllegalAction):
        env.step(s, A(0, 1), dimers)
    with pytest.raises(IllegalAction):
        env.step(s, A(2, 3), dimers)
    with pytest.raises(IllegalAction):
        env.step(env.reset(record, dimers), A(1, 1), dimers)


def test_missing_dimer():
    record, dimers = data.generate_complex(0, 3)
    partial = DimerLibrary.from_entries([e for e in dimers if e.pair != (0, 2)])
    with pytest.raises(MissingDimer) as info:
        env.step(env.reset(record, partial), A(0, 2), partial)
    assert info.value.pair == (0, 2)
    assert "(0, 2)" in str(info.value)


def test_first_action_uses_dimer_frame(exact4):
    record, dimers = exact4
    s = env.step(env.reset(record, dimers), A(2, 1), dimers)
    e = dimers.get(1, 2)
    assert np.array_equal(s.placed[2], e.coords_j) and np.array_equal(s.placed[1], e.coords_i)


def test_step_composes_anchor_motion():
    """Incoming placement equals anchor motion composed with the dimer-relative pose."""
    rng = np.random.default_rng(3)
    clouds = [rng.normal(scale=4, size=(6, 3)) + 10 * k for k in range(3)]
    record = ComplexRecord("toy", [Chain(str(k), "AAAAAA", c) for k, c in enumerate(clouds)],
                           [(0, 1), (1, 2)])
    frames = {p: geom.random_transform(rng) for p in ((0, 1), (0, 2), (1, 2))}
    dimers = DimerLibrary.from_entries([
        DimerEntry(i, j, geom.apply(frames[(i, j)], clouds[i]), geom.apply(frames[(i, j)], clouds[j]),
                   True) for (i, j) in frames])
    s = env.step(env.reset(record, dimers), A(0, 1), dimers)
    # chain 1 now sits at F01(X1); docking 2 onto 1 uses the (1, 2) dimer
    motion = frames[(0, 1)]
    expected = geom.apply(geom.compose(motion, geom.inverse(frames[(1, 2)])),
                          geom.apply(frames[(1, 2)], clouds[2]))
    s = env.step(s, A(1, 2), dimers)
    assert np.abs(s.placed[2] - expected).max() < 1e-9
    assert np.abs(s.placed[2] - geom.apply(motion, clouds[2])).max() < 1e-9


def _leaf_growth(tree, root):
    return [A(p, c) for p, c in bfs_order(tree, root)]


@pytest.mark.parametrize("seed", range(3))
def test_truth_tree_any_order_exact(seed):
    record, dimers = data.generate_complex(seed, 5)
    for root in range(5):
        s = env.run_actions(record, dimers, _leaf_growth(record.tree, root))
        assert env.terminal_domain_reward(s, record) > -1e-6


def test_terminal_reward_invariant_to_global_motion(exact4):
    record, dimers = exact4
    s = env.run_actions(record, dimers, _leaf_growth(record.tree, 0))
    moved = env.AssemblyState(s.n, s.docked, s.undocked,
                              {k: geom.apply(geom.random_transform(np.random.default_rng(1)), v)
                               for k, v in s.placed.items()}, s.graph_edges)
    assert env.terminal_domain_reward(moved, record) > -1e-6


def test_wrong_tree_reward_matches_reassembly(exact4):
    record, dimers = exact4
    wrong = next(t for t in enumerate_trees(4) if t != record.tree)
    s = env.run_actions(record, dimers, _leaf_growth(wrong, 0))
    ref = scipy_rmsd(np.concatenate(data.assemble_along_tree(record, dimers, wrong.edges)),
                     record.truth_coords())
    assert abs(env.terminal_domain_reward(s, record) + ref) < 1e-9
    assert ref > 1.0


def test_unfinished_reward(exact4):
    record, dimers = exact4
    with pytest.raises(EpisodeUnfinished):
        env.terminal_domain_reward(env.reset(record, dimers), record)


@given(st.integers(0, 2 ** 32 - 1))
def test_state_invariants_along_random_episodes(seed):
    rng = np.random.default_rng(seed)
    record, dimers = data.generate_complex(int(rng.integers(1000)), int(rng.integers(3, 7)), (5, 8))
    s = env.reset(record, dimers)
    steps = 0
    while not s.done:
        acts = env.legal_actions(s)
        s = env.step(s, acts[int(rng.integers(len(acts)))], dimers)
        steps += 1
        assert set(s.docked) | set(s.undocked) == set(range(record.n))
        assert not set(s.docked) & set(s.undocked)
        assert len(s.graph_edges) == len(s.docked) - 1 == s.t
        # a tree over the docked nodes: n-1 edges and connected via union-find
        parent = {k: k for k in s.docked}

        def find(x):
            while parent[x] != x:
                x = parent[x]
            return x
        for a, b in s.graph_edges:
            assert find(a) != find(b)
            parent[find(a)] = find(b)
    assert steps == record.n - 1


@given(st.integers(0, 2 ** 32 - 1))
def test_exact_reward_depends_on_edges_only(seed):
    rng = np.random.default_rng(seed)
    record, dimers = data.generate_complex(int(rng.integers(1000)), 5, (5, 8))
    tree = random_tree(5, rng)
    r = [env.terminal_domain_reward(env.run_actions(record, dimers, _leaf_growth(tree, root)), record)
         for root in range(5)]
    assert max(r) - min(r) < 1e-6


@pytest.mark.parametrize("n", [3, 4, 5])
def test_every_tree_reachable(n):
    record, dimers = data.generate_complex(n, n, (5, 8))
    for tree in enumerate_trees(n):
        s = env.run_actions(record, dimers, _leaf_growth(tree, 0))
        assert set(map(lambda e: tuple(sorted(e)), s.graph_edges)) == set(tree.edges)


def test_clash_penalty(exact4):
    record, dimers = exact4
    s = env.run_actions(record, dimers, _leaf_growth(record.tree, 0))
    assert env.clash_count(s) == 0
    assert env.terminal_domain_reward(s, record, clash_weight=5.0) == \
        env.terminal_domain_reward(s, record)


def test_partial_rmsd(exact4):
    record, dimers = exact4
    s = env.reset(record, dimers)
    assert env.partial_rmsd(s, record) == 0.0
    for a in _leaf_growth(record.tree, 0):
        s = env.step(s, a, dimers)
        assert env.partial_rmsd(s, record) < 1e-6
