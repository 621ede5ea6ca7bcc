"""Small fully connected networks with hand-written backprop and Adam."""

from __future__ import annotations

import numpy as np

CHECKPOINT_MAGIC = "dockgnc-mlp"
CHECKPOINT_VERSION = 1

_ACTIVATIONS = ("relu", "tanh", "linear")


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, a):
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


class Mlp:
    """Dense network ``x -> act(x W1 + b1) -> ... -> out_scale * out_act(.)``.

    Inputs are row-major batches of shape (batch, in_dim).
    """

    def __init__(self, sizes, activations, out_scale: float = 1.0, rng=None,
                 final_init: float = 3e-3):
        sizes = [int(s) for s in sizes]
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        for a in activations:
            if a not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.sizes = sizes
        self.activations = list(activations)
        self.out_scale = float(out_scale)
        rng = np.random.default_rng() if rng is None else rng
        self.W, self.b = [], []
        n_layers = len(sizes) - 1
        for k in range(n_layers):
            fan_in = sizes[k]
            lim = final_init if k == n_layers - 1 else 1.0 / np.sqrt(fan_in)
            self.W.append(rng.uniform(-lim, lim, size=(sizes[k], sizes[k + 1])))
            self.b.append(rng.uniform(-lim, lim, size=sizes[k + 1]))

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.W, self.b):
            out += [W, b]
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        i = 0
        for p in self.params:
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size

    def copy(self) -> "Mlp":
        other = Mlp.__new__(Mlp)
        other.sizes = list(self.sizes)
        other.activations = list(self.activations)
        other.out_scale = self.out_scale
        other.W = [W.copy() for W in self.W]
        other.b = [b.copy() for b in self.b]
        return other

    def forward(self, x, keep_cache: bool = False):
        a = np.atleast_2d(np.asarray(x, dtype=float))
        cache = [a]
        n_layers = len(self.W)
        for k in range(n_layers):
            z = a @ self.W[k] + self.b[k]
            a = _act(self.activations[k], z)
            if keep_cache:
                cache.append((z, a))
        out = self.out_scale * a
        return (out, cache) if keep_cache else out

    def __call__(self, x):
        return self.forward(x)

    def backward(self, cache, d_out):
        """Gradients of a scalar loss given dL/d(output).

        Returns ``(grads, d_input)`` with ``grads`` ordered like :attr:`params`.
        """
        delta = np.atleast_2d(d_out) * self.out_scale
        grads = [None] * (2 * len(self.W))
        for k in range(len(self.W) - 1, -1, -1):
            z, a = cache[k + 1]
            delta = delta * _act_grad(self.activations[k], z, a)
            a_prev = cache[0] if k == 0 else cache[k][1]
            grads[2 * k] = a_prev.T @ delta
            grads[2 * k + 1] = delta.sum(axis=0)
            delta = delta @ self.W[k].T
        return grads, delta

    # -------------------------------------------------------------- checkpoints

    def to_text(self) -> str:
        """Versioned text dump: header, then one block per parameter array."""
        lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
                 "sizes " + " ".join(str(s) for s in self.sizes),
                 "activations " + " ".join(self.activations),
                 f"out_scale {self.out_scale!r}"]
        for k, (W, b) in enumerate(zip(self.W, self.b)):
            lines.append(f"W {k} {W.shape[0]} {W.shape[1]}")
            lines.append(" ".join(repr(float(v)) for v in W.ravel()))
            lines.append(f"b {k} {b.shape[0]}")
            lines.append(" ".join(repr(float(v)) for v in b))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Mlp":
        lines = text.strip().splitlines()
        magic, version = lines[0].split()
        if magic != CHECKPOINT_MAGIC:
            raise ValueError("not a dockgnc network checkpoint")
        if int(version) != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        sizes = [int(v) for v in lines[1].split()[1:]]
        acts = lines[2].split()[1:]
        out_scale = float(lines[3].split()[1])
        net = cls(sizes, acts, out_scale, rng=np.random.default_rng(0))
        i = 4
        for k in range(len(sizes) - 1):
            _, _, r, c = lines[i].split()
            net.W[k][...] = np.array(lines[i + 1].split(), dtype=float).reshape(int(r), int(c))
            _, _, m = lines[i + 2].split()
            net.b[k][...] = np.array(lines[i + 3].split(), dtype=float).reshape(int(m))
            i += 4
        return net

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "Mlp":
        with open(path) as fh:
            return cls.from_text(fh.read())


class Adam:
    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def soft_update(target: Mlp, online: Mlp, tau: float) -> None:
    """In place: target <- (1 - tau) target + tau online."""
    for pt, po in zip(target.params, online.params):
        pt *= 1.0 - tau
        pt += tau * po
