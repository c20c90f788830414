"""Small float64 neural-network toolkit with hand-written backward passes.

Everything a network owns lives in a :class:`ParameterStore` (weights plus
Adam moments), so optimizer state and checkpoints are uniform across the
policy, value and discriminator networks.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import IndexOutOfRange, KeyMismatch, ShapeMismatch

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
BCE_CLAMP = 1e-7
GRADCHECK_FLOOR = 1e-5


@dataclass
class ParameterStore:
    params: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def add(self, name, value):
        if name in self.params:
            raise KeyMismatch(f"parameter {name!r} already exists")
        value = np.array(value, dtype=float)
        self.params[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def zeros_like(self):
        return {k: np.zeros_like(p) for k, p in self.params.items()}

    def num_parameters(self):
        return sum(p.size for p in self.params.values())

    def shapes(self):
        return {k: tuple(p.shape) for k, p in self.params.items()}

    def snapshot(self):
        return {k: p.copy() for k, p in self.params.items()}

    def fill(self, value):
        for p in self.params.values():
            p[...] = value

    def to_dict(self):
        def pack(d):
            return {k: {"shape": list(a.shape), "values": a.ravel().tolist()} for k, a in d.items()}
        return {"params": pack(self.params), "m": pack(self.m), "v": pack(self.v), "step": self.step}

    def load_dict(self, obj):
        """Overwrite values in place from :meth:`to_dict` output; shapes must match."""
        for section in ("params", "m", "v"):
            src = obj[section]
            dst = getattr(self, section)
            if set(src) != set(dst):
                raise KeyMismatch(f"{section}: checkpoint names {sorted(set(src) ^ set(dst))} "
                                  "do not match")
            for k, packed in src.items():
                if tuple(packed["shape"]) != dst[k].shape:
                    raise ShapeMismatch(f"{k}: checkpoint shape {packed['shape']} vs {dst[k].shape}")
                dst[k][...] = np.array(packed["values"], dtype=float).reshape(dst[k].shape)
        self.step = int(obj["step"])


def glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class Mlp:
    """Dense layers ``widths[0] -> ... -> widths[-1]`` with ReLU between them."""
    name: str
    widths: tuple
    store: ParameterStore
    head: str = "identity"

    @classmethod
    def create(cls, store, name, widths, rng, head="identity"):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2:
            raise ShapeMismatch("an Mlp needs at least input and output widths")
        if head not in ("identity", "sigmoid"):
            raise ValueError(f"unknown head {head!r}")
        for k, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            store.add(f"{name}.W{k}", glorot(rng, a, b))
            store.add(f"{name}.b{k}", np.zeros(b))
        return cls(name, widths, store, head)

    @property
    def n_layers(self):
        return len(self.widths) - 1

    def weight(self, k):
        return self.store[f"{self.name}.W{k}"]

    def bias(self, k):
        return self.store[f"{self.name}.b{k}"]

    def param_names(self):
        return [f"{self.name}.{p}{k}" for k in range(self.n_layers) for p in ("W", "b")]


def mlp_forward(m: Mlp, x):
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != m.widths[0]:
        raise ShapeMismatch(f"{m.name}: expected (batch, {m.widths[0]}), got {x.shape}")
    acts = [x]
    pre = []
    h = x
    for k in range(m.n_layers):
        z = h @ m.weight(k) + m.bias(k)
        pre.append(z)
        h = relu(z) if k < m.n_layers - 1 else z
        acts.append(h)
    if m.head == "sigmoid":
        h = sigmoid(h)
    return h, (acts, pre, h)


def mlp_backward(m: Mlp, cache, dy):
    acts, pre, out = cache
    dy = np.asarray(dy, dtype=float)
    if dy.shape != out.shape:
        raise ShapeMismatch(f"{m.name}: upstream gradient {dy.shape} vs output {out.shape}")
    if m.head == "sigmoid":
        dy = dy * out * (1.0 - out)
    grads = {}
    dh = dy
    for k in reversed(range(m.n_layers)):
        dz = dh if k == m.n_layers - 1 else dh * (pre[k] > 0)
        grads[f"{m.name}.W{k}"] = acts[k].T @ dz
        grads[f"{m.name}.b{k}"] = dz.sum(axis=0)
        dh = dz @ m.weight(k).T
    return dh, grads


def dropout(x, rate, rng, train=True):
    """Inverted dropout; returns ``(y, mask)`` with ``y = x * mask``."""
    if not train or rate <= 0.0:
        return x, np.ones_like(x)
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return x * mask, mask


def softmax(logits):
    z = np.asarray(logits, dtype=float)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def softmax_logprob(logits, index):
    """``log softmax(logits)[index]`` and its gradient ``onehot - softmax``."""
    logits = np.asarray(logits, dtype=float)
    if not 0 <= index < logits.shape[0]:
        raise IndexOutOfRange(f"index {index} outside 0..{logits.shape[0] - 1}")
    z = logits - logits.max()
    lse = np.log(np.exp(z).sum())
    p = np.exp(z - lse)
    grad = -p
    grad[index] += 1.0
    return float(z[index] - lse), grad


def bce(pred, label):
    """Binary cross-entropy and its derivative w.r.t. ``pred`` (clamped to [1e-7, 1-1e-7])."""
    p = np.clip(np.asarray(pred, dtype=float), BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = np.asarray(label, dtype=float)
    loss = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    dpred = (p - y) / (p * (1.0 - p))
    if np.ndim(loss) == 0:
        return float(loss), float(dpred)
    return loss, dpred


def global_norm(grads):
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def clip_global_norm(grads, max_norm):
    """Scale all gradients by ``max_norm / ||g||`` when the global norm exceeds ``max_norm``."""
    norm = global_norm(grads)
    if norm > max_norm > 0:
        s = max_norm / norm
        return {k: g * s for k, g in grads.items()}
    return dict(grads)


def adam_step(store: ParameterStore, grads, lr):
    if set(grads) != set(store.params):
        raise KeyMismatch(f"gradient keys differ from parameters: "
                          f"{sorted(set(grads) ^ set(store.params))}")
    store.step += 1
    t = store.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for k, p in store.params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{k}: gradient {g.shape} vs parameter {p.shape}")
        m = store.m[k]
        v = store.v[k]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


@dataclass
class GradcheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    checked: int
    tol: float

    @property
    def passed(self):
        return self.max_rel_error < self.tol


def gradcheck(closure, store: ParameterStore, h=1e-5, tol=1e-4, names=None,
              max_entries=None, rng=None):
    """Compare analytic gradients against central differences.

    ``closure()`` must return ``(loss, grads)`` for the current parameter
    values. Errors are ``|a - n| / max(|a|, |n|, 1e-5)``. ``max_entries``
    subsamples entries per parameter (needs ``rng``).
    """
    _, analytic = closure()
    worst = (0.0, "", ())
    checked = 0
    for name in names or list(store.params):
        p = store.params[name]
        a = analytic.get(name, np.zeros_like(p))
        idx = list(np.ndindex(p.shape))
        if max_entries is not None and len(idx) > max_entries:
            pick = (rng or np.random.default_rng(0)).choice(len(idx), size=max_entries, replace=False)
            idx = [idx[i] for i in sorted(pick)]
        for ix in idx:
            old = p[ix]
            p[ix] = old + h
            fp = closure()[0]
            p[ix] = old - h
            fm = closure()[0]
            p[ix] = old
            num = (fp - fm) / (2.0 * h)
            err = abs(a[ix] - num) / max(abs(a[ix]), abs(num), GRADCHECK_FLOOR)
            checked += 1
            if err > worst[0]:
                worst = (float(err), name, ix)
    return GradcheckReport(worst[0], worst[1], worst[2], checked, tol)
