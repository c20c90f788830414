"""Labeled trees and the Pruefer bijection."""

import heapq
import itertools
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, TooLarge

MAX_ENUMERATION_NODES = 7


def canonical_edges(edges):
    return tuple(sorted((min(int(a), int(b)), max(int(a), int(b))) for a, b in edges))


@dataclass(frozen=True)
class LabeledTree:
    n: int
    edges: tuple

    def __post_init__(self):
        object.__setattr__(self, "edges", canonical_edges(self.edges))
        check_spanning_tree(self.n, self.edges)

    def adjacency(self):
        adj = [[] for _ in range(self.n)]
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        for nbrs in adj:
            nbrs.sort()
        return adj

    def degrees(self):
        deg = np.zeros(self.n, dtype=int)
        for a, b in self.edges:
            deg[a] += 1
            deg[b] += 1
        return deg


def check_spanning_tree(n, edges):
    """Raise DomainError unless ``edges`` form a spanning tree on ``range(n)``."""
    if n < 1:
        raise DomainError(f"tree needs at least one node, got n={n}")
    if len(edges) != n - 1:
        raise DomainError(f"a spanning tree on {n} nodes has {n - 1} edges, got {len(edges)}")
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in edges:
        if not (0 <= a < n and 0 <= b < n):
            raise DomainError(f"edge {(a, b)} references a node outside 0..{n - 1}")
        if a == b:
            raise DomainError(f"self-loop at node {a}")
        ra, rb = find(a), find(b)
        if ra == rb:
            raise DomainError(f"edge {(a, b)} closes a cycle")
        parent[ra] = rb


def prufer_decode(seq, n=None) -> LabeledTree:
    seq = [int(x) for x in seq]
    if n is None:
        n = len(seq) + 2
    if n < 2 or len(seq) != n - 2:
        raise DomainError(f"sequence of length {len(seq)} does not encode a tree on {n} nodes")
    for x in seq:
        if not 0 <= x < n:
            raise DomainError(f"symbol {x} out of range [0, {n})")
    degree = [1] * n
    for x in seq:
        degree[x] += 1
    leaves = [i for i in range(n) if degree[i] == 1]
    heapq.heapify(leaves)
    edges = []
    for x in seq:
        leaf = heapq.heappop(leaves)
        edges.append((leaf, x))
        degree[x] -= 1
        if degree[x] == 1:
            heapq.heappush(leaves, x)
    edges.append((heapq.heappop(leaves), heapq.heappop(leaves)))
    return LabeledTree(n, edges)


def prufer_encode(tree: LabeledTree):
    n = tree.n
    adj = [set(nb) for nb in tree.adjacency()]
    leaves = [i for i in range(n) if len(adj[i]) == 1]
    heapq.heapify(leaves)
    seq = []
    for _ in range(n - 2):
        leaf = heapq.heappop(leaves)
        (nbr,) = adj[leaf]
        seq.append(nbr)
        adj[nbr].discard(leaf)
        adj[leaf].clear()
        if len(adj[nbr]) == 1:
            heapq.heappush(leaves, nbr)
    return seq


def enumerate_trees(n):
    """Yield every labeled tree on ``n`` nodes (3 <= n <= 7), n**(n-2) in total."""
    if n > MAX_ENUMERATION_NODES:
        raise TooLarge(f"enumeration is capped at {MAX_ENUMERATION_NODES} nodes, got {n}")
    if n < 3:
        raise DomainError(f"enumeration needs n >= 3, got {n}")
    for seq in itertools.product(range(n), repeat=n - 2):
        yield prufer_decode(seq, n)


def random_tree(n, rng: np.random.Generator, family="uniform") -> LabeledTree:
    """Random labeled tree; ``family`` is 'uniform', 'path' or 'star'."""
    if family == "uniform":
        return prufer_decode(rng.integers(0, n, size=n - 2), n)
    order = [int(x) for x in rng.permutation(n)]
    if family == "path":
        return LabeledTree(n, list(zip(order[:-1], order[1:])))
    if family == "star":
        return LabeledTree(n, [(order[0], x) for x in order[1:]])
    raise DomainError(f"unknown tree family {family!r}")


def bfs_order(tree: LabeledTree, root=0):
    """(parent, child) pairs in breadth-first order from ``root``."""
    adj = tree.adjacency()
    seen = {root}
    queue = deque([root])
    out = []
    while queue:
        p = queue.popleft()
        for c in adj[p]:
            if c not in seen:
                seen.add(c)
                out.append((p, c))
                queue.append(c)
    return out
