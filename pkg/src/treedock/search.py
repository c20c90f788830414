"""Non-learned references: tree enumeration oracle, tree assembly, baselines."""

import itertools
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import env, geom
from .errors import TooLarge
from .trees import (LabeledTree, MAX_ENUMERATION_NODES, bfs_order, enumerate_trees,  # noqa: F401
                    prufer_decode, prufer_encode, random_tree)

TIE_TOLERANCE = 1e-9


def assemble_from_tree(record, dimers, tree, root=0):
    """Placed coordinates per chain after docking along ``tree`` from ``root``."""
    if not isinstance(tree, LabeledTree):
        tree = LabeledTree(record.n, tree)
    state = env.reset(record, dimers)
    for parent, child in bfs_order(tree, root):
        state = env.step(state, env.AssemblyAction(parent, child), dimers)
    return [state.placed[k] for k in range(record.n)]


def tree_rmsd(record, dimers, tree, root=0):
    pred = np.concatenate(assemble_from_tree(record, dimers, tree, root))
    return geom.rmsd_aligned(pred, record.truth_coords())


class _PoseTable:
    """Relative chain poses implied by the dimer library, for fast tree scoring.

    Each dimer copy of chain k is a rigid image of its truth coordinates, so
    docking c onto p composes the placed pose of p with ``D_p^-1 D_c``.
    """

    def __init__(self, record, dimers):
        self.record = record
        self.truth = [c.true_coords for c in record.chains]
        self.truth_all = record.truth_coords()
        self.rel = {}
        n = record.n
        for i in range(n):
            for j in range(i + 1, n):
                e = dimers.get(i, j)
                di, _ = geom.kabsch(self.truth[i], e.coords_i)
                dj, _ = geom.kabsch(self.truth[j], e.coords_j)
                self.rel[(i, j)] = geom.compose(geom.inverse(di), dj)
                self.rel[(j, i)] = geom.compose(geom.inverse(dj), di)

    def rmsd(self, tree):
        poses = {0: geom.RigidTransform.identity()}
        for p, c in bfs_order(tree, 0):
            poses[c] = geom.compose(poses[p], self.rel[(p, c)])
        pred = np.concatenate([geom.apply(poses[k], self.truth[k]) for k in range(self.record.n)])
        return geom.rmsd_aligned(pred, self.truth_all)


def _better(rmsd, edges, best_rmsd, best_edges):
    if best_edges is None or rmsd < best_rmsd - TIE_TOLERANCE:
        return True
    return abs(rmsd - best_rmsd) <= TIE_TOLERANCE and edges < best_edges


def _scan_prefix(record, dimers, prefix):
    table = _PoseTable(record, dimers)
    n = record.n
    best_rmsd, best_edges = np.inf, None
    for rest in itertools.product(range(n), repeat=n - 2 - len(prefix)):
        tree = prufer_decode(tuple(prefix) + rest, n)
        r = table.rmsd(tree)
        if _better(r, tree.edges, best_rmsd, best_edges):
            best_rmsd, best_edges = r, tree.edges
    return best_rmsd, best_edges


def oracle_best_tree(record, dimers, workers=1):
    """Exhaustive minimum-RMSD tree; ties go to the lexicographically smallest edge list."""
    n = record.n
    if n > MAX_ENUMERATION_NODES:
        raise TooLarge(f"oracle is capped at {MAX_ENUMERATION_NODES} chains, got {n}")
    if workers <= 1:
        results = [_scan_prefix(record, dimers, ())]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_scan_prefix, record, dimers, (p,)) for p in range(n)]
            results = [f.result() for f in futs]
    best_rmsd, best_edges = np.inf, None
    for r, edges in results:
        if _better(r, edges, best_rmsd, best_edges):
            best_rmsd, best_edges = r, edges
    return LabeledTree(n, best_edges), float(best_rmsd)


def _clashes_with(state, coords, skip, cutoff=env.CLASH_DISTANCE):
    return sum(geom.count_close_pairs(coords, x, cutoff)
               for k, x in state.placed.items() if k != skip)


def greedy_baseline(record, dimers):
    """Grow the assembly by always taking the tentative docking with the fewest clashes.

    Ties prefer contact-flagged dimers, then the lowest (anchor, incoming).
    """
    state = env.reset(record, dimers)
    while not state.done:
        best_key, best_action = None, None
        for action in env.legal_actions(state):
            e = dimers.get(action.anchor, action.incoming)
            anchor_coords, incoming_coords = e.oriented(action.anchor, action.incoming)
            if not state.docked:
                clashes = geom.count_close_pairs(anchor_coords, incoming_coords, env.CLASH_DISTANCE)
            else:
                t, _ = geom.kabsch(anchor_coords, state.placed[action.anchor])
                clashes = _clashes_with(state, geom.apply(t, incoming_coords), action.incoming)
            key = (clashes, not e.contact, action.anchor, action.incoming)
            if best_key is None or key < best_key:
                best_key, best_action = key, action
        state = env.step(state, best_action, dimers)
    return LabeledTree(record.n, state.graph_edges)


def random_actions(record, dimers, rng):
    """Uniformly random legal actions until every chain is docked."""
    state = env.reset(record, dimers)
    taken = []
    while not state.done:
        actions = env.legal_actions(state)
        taken.append(actions[int(rng.integers(len(actions)))])
        state = env.step(state, taken[-1], dimers)
    return taken


def random_baseline(record, dimers, rng):
    taken = random_actions(record, dimers, rng)
    return LabeledTree(record.n, [(a.anchor, a.incoming) for a in taken])
