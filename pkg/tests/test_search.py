import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from treedock import data, env, geom, search
from treedock.errors import DomainError, TooLarge
from treedock.trees import LabeledTree, enumerate_trees, prufer_decode, prufer_encode, random_tree


@pytest.mark.parametrize("n", [3, 4, 5, 6, 7])
def test_cayley_counts_and_distinct(n):
    seen = {t.edges for t in enumerate_trees(n)}
    assert len(seen) == n ** (n - 2)


def test_enumeration_limits():
    with pytest.raises(TooLarge):
        next(enumerate_trees(8))
    with pytest.raises(DomainError):
        next(enumerate_trees(2))


def test_prufer_out_of_range():
    with pytest.raises(DomainError):
        prufer_decode([5, 0], 4)


def test_prufer_known_tree():
    # sequence (3, 3, 3) on 5 nodes is the star centred on 3
    assert prufer_decode([3, 3, 3]).edges == ((0, 3), (1, 3), (2, 3), (3, 4))


@pytest.mark.parametrize("n", [3, 4, 5, 6])
def test_prufer_roundtrip_exhaustive(n):
    for seq in itertools.product(range(n), repeat=n - 2):
        assert tuple(prufer_encode(prufer_decode(seq, n))) == seq


@given(st.integers(3, 7), st.integers(0, 2 ** 32 - 1))
def test_prufer_roundtrip_random_trees(n, seed):
    t = random_tree(n, np.random.default_rng(seed))
    assert prufer_decode(prufer_encode(t), n) == t


def test_labeled_tree_rejects_cycle():
    with pytest.raises(DomainError):
        LabeledTree(3, [(0, 1), (1, 2), (2, 0)])


def test_truth_tree_assembles_exactly(exact4):
    record, dimers = exact4
    assert search.tree_rmsd(record, dimers, record.tree) < 1e-6


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_root_invariance(seed):
    record, dimers = data.generate_complex(seed, 5, dimer_noise_sigma=0.2)
    tree = random_tree(5, np.random.default_rng(seed))
    values = [search.tree_rmsd(record, dimers, tree, root) for root in range(5)]
    assert max(values) - min(values) < 1e-6


def test_star_worse_than_path_on_path_truth():
    record, dimers = data.generate_complex(3, 6, tree_family="path")
    star = LabeledTree(6, [(0, k) for k in range(1, 6)])
    assert search.tree_rmsd(record, dimers, star) > search.tree_rmsd(record, dimers, record.tree)
    assert search.tree_rmsd(record, dimers, record.tree) < 1e-6


def test_oracle_exact_data():
    for seed in range(5):
        record, dimers = data.generate_complex(seed, 5)
        tree, rmsd = search.oracle_best_tree(record, dimers)
        assert rmsd < 1e-6
        assert tree == record.tree


def _sequence_oracle(record, dimers):
    """Minimum terminal RMSD over every legal action sequence."""
    best = np.inf

    def walk(state):
        nonlocal best
        if state.done:
            best = min(best, geom.rmsd_aligned(state.coords(), record.truth_coords()))
            return
        for a in env.legal_actions(state):
            walk(env.step(state, a, dimers))

    walk(env.reset(record, dimers))
    return best


def test_oracle_matches_action_sequence_enumeration():
    record, dimers = data.generate_complex(21, 5, dimer_noise_sigma=0.3)
    _, rmsd = search.oracle_best_tree(record, dimers)
    assert abs(rmsd - _sequence_oracle(record, dimers)) < 1e-9


def test_oracle_workers_agree(noisy5):
    record, dimers = noisy5
    assert search.oracle_best_tree(record, dimers, workers=2) == \
        search.oracle_best_tree(record, dimers)


def test_oracle_too_large():
    record, dimers = data.generate_complex(0, 8)
    with pytest.raises(TooLarge):
        search.oracle_best_tree(record, dimers)


def test_oracle_lower_bounds_random_trees(noisy5):
    record, dimers = noisy5
    _, best = search.oracle_best_tree(record, dimers)
    rng = np.random.default_rng(0)
    for _ in range(30):
        tree = search.random_baseline(record, dimers, rng)
        assert search.tree_rmsd(record, dimers, tree) >= best - 1e-9


def test_greedy_recovers_truth_on_exact_data():
    for seed in range(5):
        record, dimers = data.generate_complex(seed, 6)
        tree = search.greedy_baseline(record, dimers)
        assert all(dimers.get(a, b).contact for a, b in tree.edges)
        assert search.tree_rmsd(record, dimers, tree) < 1e-6
        assert search.greedy_baseline(record, dimers) == tree


def test_random_baseline_first_action_uniform(exact4):
    record, dimers = exact4
    rng = np.random.default_rng(5)
    counts = np.zeros((4, 4))
    draws = 10_000
    for _ in range(draws):
        a = search.random_actions(record, dimers, rng)[0]
        counts[a.anchor, a.incoming] += 1
    p = 1 / 12
    sd = np.sqrt(draws * p * (1 - p))
    off = ~np.eye(4, dtype=bool)
    assert np.all(np.abs(counts[off] - draws * p) < 3 * sd)
    assert counts[~off].sum() == 0
