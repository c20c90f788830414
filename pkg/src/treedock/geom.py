"""Rigid-body algebra, Kabsch superposition, RMSD and TM-score.

Point clouds are ``(n, 3)`` float arrays in Angstrom. Transforms act on rows:
``x' = R @ x + t``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput

TM_REFINE_ITERS = 20


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def is_proper(self, tol=1e-9):
        r = self.rotation
        return (np.abs(r.T @ r - np.eye(3)).max() < tol
                and abs(np.linalg.det(r) - 1.0) < tol)


def as_cloud(p):
    p = np.asarray(p, dtype=float)
    if p.ndim != 2 or p.shape[1] != 3 or p.shape[0] < 1:
        raise DegenerateInput(f"expected an (n, 3) point cloud, got shape {p.shape}")
    return p


def apply(t: RigidTransform, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return p @ t.rotation.T + t.translation


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform that applies ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def axis_angle_rotation(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    norm = np.linalg.norm(axis)
    if norm == 0.0:
        return np.eye(3)
    x, y, z = axis / norm
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation from a normalized Gaussian quaternion."""
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_transform(rng: np.random.Generator, scale=10.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng), rng.normal(scale=scale, size=3))


def kabsch(mobile, target):
    """Least-squares rigid superposition of ``mobile`` onto ``target``.

    Returns ``(transform, rmsd)`` where ``apply(transform, mobile)`` is the
    best fit to ``target``. The rotation is always proper: a reflection in the
    SVD solution is undone by flipping the smallest singular direction.

    Raises
    ------
    DegenerateInput
        Fewer than 3 points, unequal counts, or a covariance of rank < 2
        (e.g. all points collinear).
    """
    mobile = as_cloud(mobile)
    target = as_cloud(target)
    if mobile.shape != target.shape:
        raise DegenerateInput(f"point counts differ: {mobile.shape[0]} vs {target.shape[0]}")
    if mobile.shape[0] < 3:
        raise DegenerateInput("kabsch needs at least 3 points")

    mc = mobile.mean(axis=0)
    tc = target.mean(axis=0)
    a = mobile - mc
    b = target - tc
    h = a.T @ b
    u, s, vt = np.linalg.svd(h)
    if s[0] <= 0.0 or s[1] <= 1e-12 * s[0]:
        raise DegenerateInput("covariance rank < 2 (points collinear or coincident)")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = RigidTransform(rot, tc - rot @ mc)
    diff = apply(t, mobile) - target
    rmsd = float(np.sqrt((diff * diff).sum() / mobile.shape[0]))
    return t, rmsd


def rmsd_aligned(pred, truth) -> float:
    return kabsch(pred, truth)[1]


def tm_d0(length: int) -> float:
    return max(0.5, 1.24 * np.cbrt(length - 15) - 1.8)


def _tm_from_distances(d, d0, length):
    return float(np.sum(1.0 / (1.0 + (d / d0) ** 2)) / length)


def tm_score(pred, truth) -> float:
    """TM-score of ``pred`` against ``truth`` with positional correspondence.

    Superposes on all points first, then re-superposes on the residues closer
    than d0 until that set stops changing (at most 20 rounds). The best score
    seen is returned.
    """
    pred = as_cloud(pred)
    truth = as_cloud(truth)
    length = truth.shape[0]
    d0 = tm_d0(length)

    t, _ = kabsch(pred, truth)
    d = np.linalg.norm(apply(t, pred) - truth, axis=1)
    best = _tm_from_distances(d, d0, length)
    included = d < d0
    for _ in range(TM_REFINE_ITERS):
        if included.sum() < 3:
            break
        try:
            t, _ = kabsch(pred[included], truth[included])
        except DegenerateInput:
            break
        d = np.linalg.norm(apply(t, pred) - truth, axis=1)
        best = max(best, _tm_from_distances(d, d0, length))
        nxt = d < d0
        if np.array_equal(nxt, included):
            break
        included = nxt
    return best


def pairwise_distances(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def count_close_pairs(a, b, cutoff) -> int:
    return int((pairwise_distances(a, b) < cutoff).sum())
