"""Chains, complexes, dimer libraries, the sequence featurizer, the synthetic
complex generator and dataset file I/O."""

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geom
from .errors import (DomainError, GenerationFailed, InvalidSequence, MissingDimer,
                     ParseError, SchemaError)
from .trees import LabeledTree, bfs_order, canonical_edges, check_spanning_tree, random_tree

AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"
ALPHABET = frozenset(AMINO_ACIDS + "X")
RESIDUE_CLASSES = ("GAS", "TCNQ", "VLIM", "FWY", "KRH", "DE", "P", "X")
EMBED_DIM = 13
MIN_CHAINS, MAX_CHAINS = 3, 60

# Kyte-Doolittle hydropathy; unknown residues are neutral.
HYDROPATHY = {
    "A": 1.8, "R": -4.5, "N": -3.5, "D": -3.5, "C": 2.5, "Q": -3.5, "E": -3.5,
    "G": -0.4, "H": -3.2, "I": 4.5, "L": 3.8, "K": -3.9, "M": 1.9, "F": 2.8,
    "P": -1.6, "S": -0.8, "T": -0.7, "W": -0.9, "Y": -1.3, "V": 4.2, "X": 0.0,
}
_CLASS_OF = {aa: k for k, group in enumerate(RESIDUE_CLASSES) for aa in group}

CA_STEP = 3.8
WALK_MIN_SEPARATION = 4.0
CLASH_CUTOFF = 3.0
CONTACT_CUTOFF = 8.0
PLACEMENT_TRIES = 100


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def check_sequence(sequence):
    if not isinstance(sequence, str) or not sequence:
        raise InvalidSequence("sequence must be a non-empty string")
    bad = sorted(set(sequence) - ALPHABET)
    if bad:
        raise InvalidSequence(f"disallowed residue codes {''.join(bad)!r}")


@dataclass(frozen=True)
class Chain:
    chain_id: str
    sequence: str
    true_coords: np.ndarray

    def __post_init__(self):
        check_sequence(self.sequence)
        coords = _frozen(self.true_coords)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise DomainError(f"chain {self.chain_id}: coords must be (n, 3), got {coords.shape}")
        if coords.shape[0] != len(self.sequence):
            raise DomainError(f"chain {self.chain_id}: {coords.shape[0]} coords for "
                              f"{len(self.sequence)} residues")
        if coords.shape[0] < 3:
            raise DomainError(f"chain {self.chain_id}: needs at least 3 residues")
        if not np.isfinite(coords).all():
            raise DomainError(f"chain {self.chain_id}: non-finite coordinates")
        object.__setattr__(self, "true_coords", coords)

    def __len__(self):
        return len(self.sequence)


@dataclass(frozen=True)
class ComplexRecord:
    complex_id: str
    chains: tuple
    truth_tree: tuple

    def __post_init__(self):
        object.__setattr__(self, "chains", tuple(self.chains))
        object.__setattr__(self, "truth_tree", canonical_edges(self.truth_tree))
        n = len(self.chains)
        if not MIN_CHAINS <= n <= MAX_CHAINS:
            raise DomainError(f"complex {self.complex_id}: {n} chains outside "
                              f"[{MIN_CHAINS}, {MAX_CHAINS}]")
        check_spanning_tree(n, self.truth_tree)

    @property
    def n(self):
        return len(self.chains)

    @property
    def tree(self):
        return LabeledTree(self.n, self.truth_tree)

    def truth_coords(self):
        return np.concatenate([c.true_coords for c in self.chains])

    def embeddings(self):
        return np.stack([featurize(c.sequence) for c in self.chains])

    def __eq__(self, other):
        if not isinstance(other, ComplexRecord):
            return NotImplemented
        return (self.complex_id == other.complex_id
                and self.truth_tree == other.truth_tree
                and len(self.chains) == len(other.chains)
                and all(a.chain_id == b.chain_id and a.sequence == b.sequence
                        and np.array_equal(a.true_coords, b.true_coords)
                        for a, b in zip(self.chains, other.chains)))

    __hash__ = None


@dataclass(frozen=True)
class DimerEntry:
    i: int
    j: int
    coords_i: np.ndarray
    coords_j: np.ndarray
    contact: bool

    def __post_init__(self):
        if self.i == self.j:
            raise DomainError("a dimer needs two distinct chains")
        if self.i > self.j:
            ci, cj = self.coords_i, self.coords_j
            i, j = self.i, self.j
            object.__setattr__(self, "i", j)
            object.__setattr__(self, "j", i)
            object.__setattr__(self, "coords_i", cj)
            object.__setattr__(self, "coords_j", ci)
        object.__setattr__(self, "coords_i", _frozen(self.coords_i))
        object.__setattr__(self, "coords_j", _frozen(self.coords_j))
        object.__setattr__(self, "contact", bool(self.contact))

    @property
    def pair(self):
        return (self.i, self.j)

    def oriented(self, anchor, incoming):
        """Coordinates as ``(anchor_coords, incoming_coords)``."""
        if (anchor, incoming) == (self.i, self.j):
            return self.coords_i, self.coords_j
        if (anchor, incoming) == (self.j, self.i):
            return self.coords_j, self.coords_i
        raise MissingDimer(anchor, incoming)

    def __eq__(self, other):
        if not isinstance(other, DimerEntry):
            return NotImplemented
        return (self.pair == other.pair and self.contact == other.contact
                and np.array_equal(self.coords_i, other.coords_i)
                and np.array_equal(self.coords_j, other.coords_j))

    __hash__ = None


@dataclass
class DimerLibrary:
    entries: dict = field(default_factory=dict)

    @classmethod
    def from_entries(cls, entries):
        lib = cls()
        for e in entries:
            if e.pair in lib.entries:
                raise DomainError(f"duplicate dimer for pair {e.pair}")
            lib.entries[e.pair] = e
        return lib

    def get(self, a, b) -> DimerEntry:
        try:
            return self.entries[(min(a, b), max(a, b))]
        except KeyError:
            raise MissingDimer(a, b) from None

    def require_complete(self, n):
        """Raise MissingDimer for the first absent pair among ``n`` chains."""
        for a in range(n):
            for b in range(a + 1, n):
                if (a, b) not in self.entries:
                    raise MissingDimer(a, b)

    def __contains__(self, pair):
        a, b = pair
        return (min(a, b), max(a, b)) in self.entries

    def __iter__(self):
        return iter(self.entries[k] for k in sorted(self.entries))

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        if not isinstance(other, DimerLibrary):
            return NotImplemented
        return (sorted(self.entries) == sorted(other.entries)
                and all(self.entries[k] == other.entries[k] for k in self.entries))


def featurize(sequence) -> np.ndarray:
    """13-dim chain descriptor.

    Eight residue-class fractions, log length scaled so 1000 residues maps to
    1, mean hydropathy / 5, net charge per residue, cysteine fraction, and a
    constant 1.
    """
    check_sequence(sequence)
    n = len(sequence)
    out = np.zeros(EMBED_DIM)
    for aa in sequence:
        out[_CLASS_OF[aa]] += 1.0
    out[:8] /= n
    out[8] = np.log(n) / np.log(1000.0)
    out[9] = sum(HYDROPATHY[aa] for aa in sequence) / n / 5.0
    out[10] = (sum(aa in "KR" for aa in sequence) - sum(aa in "DE" for aa in sequence)) / n
    out[11] = sequence.count("C") / n
    out[12] = 1.0
    return out


# -- synthetic generation ----------------------------------------------------

def _unit_vector(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _random_walk(rng, n):
    for _ in range(PLACEMENT_TRIES):
        pts = [np.zeros(3)]
        ok = True
        while len(pts) < n and ok:
            prev = np.array(pts[:-1]) if len(pts) > 1 else None
            for _ in range(PLACEMENT_TRIES):
                cand = pts[-1] + CA_STEP * _unit_vector(rng)
                if prev is None or np.min(np.linalg.norm(prev - cand, axis=1)) >= WALK_MIN_SEPARATION:
                    pts.append(cand)
                    break
            else:
                ok = False
        if ok:
            pts = np.array(pts)
            return pts - pts.mean(axis=0)
    raise GenerationFailed(f"self-avoiding walk of length {n} failed")


def radius_of_gyration(coords):
    c = coords - coords.mean(axis=0)
    return float(np.sqrt((c * c).sum(axis=1).mean()))


def _rigid(rotation, translation, local):
    return local @ rotation.T + translation


def generate_complex(seed, n_chains, residues_per_chain_range=(20, 40),
                     dimer_noise_sigma=0.0, tree_family="uniform", complex_id=None):
    """Build a synthetic complex and its full dimer library.

    Chains are self-avoiding C-alpha walks docked pairwise along a random
    labeled tree; every tree edge is placed at roughly the sum of the two radii
    of gyration and re-drawn until no residue pair across chains is closer than
    3 A. Tree-edge dimers carry the true relative pose, perturbed by a rotation
    of N(0, sigma) radians and a N(0, sigma) A shift; all other pairs get a
    random relative pose and ``contact=False``.
    """
    if not MIN_CHAINS <= n_chains <= MAX_CHAINS:
        raise DomainError(f"n_chains must be in [{MIN_CHAINS}, {MAX_CHAINS}], got {n_chains}")
    lo, hi = residues_per_chain_range
    if lo < 3 or hi < lo:
        raise DomainError(f"bad residue range {residues_per_chain_range}")
    rng = np.random.default_rng(seed)
    sigma = float(dimer_noise_sigma)

    sequences = []
    local = []
    for _ in range(n_chains):
        n_res = int(rng.integers(lo, hi + 1))
        sequences.append("".join(rng.choice(list(AMINO_ACIDS), size=n_res)))
        local.append(_random_walk(rng, n_res))
    radii = [radius_of_gyration(x) for x in local]

    tree = random_tree(n_chains, rng, tree_family)
    placed = {0: _rigid(geom.random_rotation(rng), np.zeros(3), local[0])}
    for parent, child in bfs_order(tree, 0):
        pc = placed[parent].mean(axis=0)
        others = np.concatenate([placed[k] for k in placed])
        for _ in range(PLACEMENT_TRIES):
            dist = (radii[parent] + radii[child]) * rng.uniform(0.9, 1.1)
            cand = _rigid(geom.random_rotation(rng), pc + dist * _unit_vector(rng), local[child])
            d_all = geom.pairwise_distances(cand, others)
            if d_all.min() < CLASH_CUTOFF:
                continue
            if geom.pairwise_distances(cand, placed[parent]).min() >= CONTACT_CUTOFF:
                continue
            placed[child] = cand
            break
        else:
            raise GenerationFailed(f"could not place chain {child} against {parent} "
                                   f"after {PLACEMENT_TRIES} tries")

    cid = complex_id if complex_id is not None else f"synth_{seed}_{n_chains}"
    chains = [Chain(f"{k}", sequences[k], placed[k]) for k in range(n_chains)]
    record = ComplexRecord(cid, chains, tree.edges)

    edge_set = set(tree.edges)
    entries = []
    for i in range(n_chains):
        for j in range(i + 1, n_chains):
            frame = geom.random_transform(rng)
            if (i, j) in edge_set:
                ci = placed[i]
                cj = placed[j]
                centroid = cj.mean(axis=0)
                rot = geom.axis_angle_rotation(_unit_vector(rng), rng.normal(scale=sigma))
                shift = rng.normal(scale=sigma, size=3)
                cj = (cj - centroid) @ rot.T + centroid + shift
                contact = True
            else:
                ci = placed[i] - placed[i].mean(axis=0)
                dist = (radii[i] + radii[j]) * rng.uniform(0.5, 2.0)
                cj = _rigid(geom.random_rotation(rng), dist * _unit_vector(rng), local[j])
                contact = False
            entries.append(DimerEntry(i, j, geom.apply(frame, ci), geom.apply(frame, cj), contact))
    return record, DimerLibrary.from_entries(entries)


def assemble_along_tree(record, dimers, edges, root=0):
    """Placed coordinates (list per chain) from docking along ``edges``.

    This is the reference rigid composition shared by the generator checks
    and the search module; it uses the same transform extraction as the
    environment.
    """
    tree = LabeledTree(record.n, edges)
    order = bfs_order(tree, root)
    placed = {}
    first_parent, first_child = order[0]
    e = dimers.get(first_parent, first_child)
    placed[first_parent], placed[first_child] = e.oriented(first_parent, first_child)
    for parent, child in order[1:]:
        e = dimers.get(parent, child)
        anchor_coords, incoming_coords = e.oriented(parent, child)
        t, _ = geom.kabsch(anchor_coords, placed[parent])
        placed[child] = geom.apply(t, incoming_coords)
    return [placed[k] for k in range(record.n)]


# -- file I/O -----------------------------------------------------------------

def _coords_to_json(a):
    return [[float(x) for x in row] for row in np.asarray(a)]


def record_to_dict(record, dimers=None):
    out = {
        "complex_id": record.complex_id,
        "chains": [{"chain_id": c.chain_id, "sequence": c.sequence,
                    "coords": _coords_to_json(c.true_coords)} for c in record.chains],
        "truth_tree": [list(e) for e in record.truth_tree],
    }
    if dimers is not None:
        out["dimers"] = [{"i": e.i, "j": e.j, "coords_i": _coords_to_json(e.coords_i),
                          "coords_j": _coords_to_json(e.coords_j), "contact": e.contact}
                         for e in dimers]
    return out


def _require(obj, key, where=""):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"{where}{key}")
    return obj[key]


def _coords_from_json(raw, where):
    try:
        a = np.array(raw, dtype=float)
    except (TypeError, ValueError):
        raise SchemaError(f"{where}: coordinates must be numeric [x, y, z] rows") from None
    if a.ndim != 2 or a.shape[1] != 3:
        raise SchemaError(f"{where}: coordinates must be (n, 3), got shape {a.shape}")
    return a


def record_from_dict(obj, require_dimers=True):
    cid = _require(obj, "complex_id")
    raw_chains = _require(obj, "chains")
    raw_tree = _require(obj, "truth_tree")
    chains = []
    for k, rc in enumerate(raw_chains):
        where = f"chains[{k}]."
        try:
            chains.append(Chain(str(_require(rc, "chain_id", where)),
                                _require(rc, "sequence", where),
                                _coords_from_json(_require(rc, "coords", where), where + "coords")))
        except (DomainError, InvalidSequence) as exc:
            raise SchemaError(f"{where[:-1]}: {exc}") from None
    try:
        edges = [(int(a), int(b)) for a, b in raw_tree]
    except (TypeError, ValueError):
        raise SchemaError("truth_tree: expected a list of [i, j] pairs") from None
    try:
        record = ComplexRecord(str(cid), chains, edges)
    except DomainError as exc:
        raise SchemaError(f"truth_tree: {exc}") from None

    dimers = None
    if require_dimers or "dimers" in obj:
        entries = []
        for k, rd in enumerate(_require(obj, "dimers")):
            where = f"dimers[{k}]."
            i, j = int(_require(rd, "i", where)), int(_require(rd, "j", where))
            if not (0 <= i < record.n and 0 <= j < record.n) or i == j:
                raise SchemaError(f"{where}i/j: invalid pair ({i}, {j})")
            ci = _coords_from_json(_require(rd, "coords_i", where), where + "coords_i")
            cj = _coords_from_json(_require(rd, "coords_j", where), where + "coords_j")
            if len(ci) != len(record.chains[i]) or len(cj) != len(record.chains[j]):
                raise SchemaError(f"{where}coords: residue counts do not match chains {i}, {j}")
            entries.append(DimerEntry(i, j, ci, cj, bool(_require(rd, "contact", where))))
        try:
            dimers = DimerLibrary.from_entries(entries)
        except DomainError as exc:
            raise SchemaError(f"dimers: {exc}") from None
    return record, dimers


def _dataset_files(path):
    path = Path(path)
    if path.is_dir():
        return sorted(path.glob("*.jsonl"))
    return [path]


def iter_json_lines(path):
    """Yield ``(file, lineno, obj)`` for every non-blank line of a JSONL file or directory."""
    for f in _dataset_files(path):
        with open(f, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(f"{f}:{lineno}:{exc.colno}: {exc.msg}") from None
                yield f, lineno, obj


def read_dataset(path):
    """Read ``(ComplexRecord, DimerLibrary)`` pairs from a JSONL file or a directory of them."""
    out = []
    for f, lineno, obj in iter_json_lines(path):
        try:
            out.append(record_from_dict(obj))
        except SchemaError as exc:
            raise SchemaError(f"{exc} ({f}:{lineno})") from None
    return out


def write_dataset(path, records):
    """Write records to one JSONL file, one complex per line."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for record, dimers in records:
            fh.write(json.dumps(record_to_dict(record, dimers), separators=(",", ":")))
            fh.write("\n")
    os.replace(tmp, path)
