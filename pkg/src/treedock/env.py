"""Assembly MDP: one chain is docked onto an already placed chain per step."""

from dataclasses import dataclass, field

import numpy as np

from . import geom
from .errors import EpisodeFinished, EpisodeUnfinished, IllegalAction

CLASH_DISTANCE = 2.0


@dataclass(frozen=True)
class AssemblyAction:
    anchor: int
    incoming: int


@dataclass(frozen=True)
class AssemblyState:
    n: int
    docked: tuple = ()
    undocked: tuple = ()
    placed: dict = field(default_factory=dict)
    graph_edges: tuple = ()

    @property
    def t(self):
        return len(self.graph_edges)

    @property
    def done(self):
        return not self.undocked

    def coords(self):
        """Placed coordinates concatenated in chain order."""
        if not self.done:
            raise EpisodeUnfinished(f"{len(self.undocked)} chains still undocked")
        return np.concatenate([self.placed[k] for k in range(self.n)])


@dataclass
class EpisodeResult:
    coords: list
    tree: tuple
    domain_reward: float
    adversarial_reward: float = 0.0

    @property
    def rmsd(self):
        return -self.domain_reward


def reset(record, dimers=None) -> AssemblyState:
    return AssemblyState(n=record.n, undocked=tuple(range(record.n)))


def legal_actions(state):
    if state.done:
        raise EpisodeFinished("all chains are docked")
    if state.t == 0 and not state.docked:
        return [AssemblyAction(i, j) for i in range(state.n) for j in range(state.n) if i != j]
    return [AssemblyAction(i, j) for i in sorted(state.docked) for j in state.undocked]


def legal_action_arrays(state):
    """Legal actions as parallel (anchor, incoming) int arrays, same order as legal_actions."""
    if state.done:
        raise EpisodeFinished("all chains are docked")
    if not state.docked:
        idx = np.arange(state.n)
        a, b = np.meshgrid(idx, idx, indexing="ij")
        mask = a != b
        return a[mask], b[mask]
    anchors = np.array(sorted(state.docked))
    inc = np.array(state.undocked)
    return np.repeat(anchors, len(inc)), np.tile(inc, len(anchors))


def is_legal(state, action):
    a, b = action.anchor, action.incoming
    if a == b or b not in state.undocked or not 0 <= a < state.n:
        return False
    return not state.docked or a in state.docked


def step(state, action, dimers) -> AssemblyState:
    if state.done:
        raise EpisodeFinished("all chains are docked")
    if not is_legal(state, action):
        raise IllegalAction(f"{action} is not legal at t={state.t}")
    a, b = action.anchor, action.incoming
    anchor_coords, incoming_coords = dimers.get(a, b).oriented(a, b)
    placed = dict(state.placed)
    if not state.docked:
        placed[a] = anchor_coords
        placed[b] = incoming_coords
        docked = (a, b)
        undocked = tuple(k for k in state.undocked if k not in (a, b))
    else:
        t, _ = geom.kabsch(anchor_coords, placed[a])
        placed[b] = geom.apply(t, incoming_coords)
        docked = state.docked + (b,)
        undocked = tuple(k for k in state.undocked if k != b)
    return AssemblyState(state.n, docked, undocked, placed, state.graph_edges + ((a, b),))


def clash_count(state, cutoff=CLASH_DISTANCE):
    """Residue pairs on different placed chains closer than ``cutoff``."""
    keys = sorted(state.placed)
    total = 0
    for x, i in enumerate(keys):
        for j in keys[x + 1:]:
            total += geom.count_close_pairs(state.placed[i], state.placed[j], cutoff)
    return total


def partial_rmsd(state, record):
    """RMSD of the docked chains against their truth; 0 until two chains are placed."""
    if len(state.docked) < 2:
        return 0.0
    keys = sorted(state.docked)
    pred = np.concatenate([state.placed[k] for k in keys])
    truth = np.concatenate([record.chains[k].true_coords for k in keys])
    return geom.rmsd_aligned(pred, truth)


def terminal_domain_reward(state, record, clash_weight=0.0):
    """Negative aligned RMSD of the finished assembly, minus an optional clash penalty."""
    if not state.done:
        raise EpisodeUnfinished(f"{len(state.undocked)} chains still undocked")
    r = -geom.rmsd_aligned(state.coords(), record.truth_coords())
    if clash_weight:
        r -= clash_weight * clash_count(state)
    return r


def run_actions(record, dimers, actions):
    state = reset(record, dimers)
    for a in actions:
        state = step(state, a, dimers)
    return state
