"""Policies and function approximators with hand-written gradients.

Every model keeps its parameters as a list of float64 arrays in ``.params``;
gradient methods return lists in the same order, which is what the optimizer
and the gradient checker consume.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from pathlib import Path

import numpy as np

from .mdp import NumericalError, sample_categorical

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_LOG_2PI = math.log(2 * math.pi)


def orthogonal_init(shape, gain: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal matrix scaled by ``gain``; tall matrices get orthonormal columns."""
    rows, cols = shape
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))  # make the decomposition unique
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(gain * q)


def _activation(name):
    if name == "tanh":
        return np.tanh, lambda z, h: 1.0 - h ** 2
    if name == "relu":
        return (lambda z: np.maximum(z, 0.0)), (lambda z, h: (z > 0).astype(np.float64))
    raise ValueError(f"unknown activation {name!r}")


class Mlp:
    """Fully connected net ``x @ W + b`` with a linear output layer."""

    def __init__(self, widths, activation="tanh", rng=None, output_gain=1.0, params=None):
        self.widths = list(widths)
        self.activation = activation
        self._act, self._dact = _activation(activation)
        if params is not None:
            self.params = [np.array(p, dtype=np.float64) for p in params]
            self._check_shapes()
            return
        if rng is None:
            raise ValueError("either rng or params is required")
        self.params = []
        n_layers = len(self.widths) - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            gain = output_gain if i == n_layers - 1 else math.sqrt(2.0)
            self.params.append(orthogonal_init((fan_in, fan_out), gain, rng))
            self.params.append(np.zeros(fan_out))

    def _check_shapes(self):
        expected = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            expected += [(fan_in, fan_out), (fan_out,)]
        got = [p.shape for p in self.params]
        if got != expected:
            raise ValueError(f"parameter shapes {got} do not match widths {self.widths}")

    def forward(self, x):
        """Return the output and the cache needed by :meth:`backward`."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.widths[0]:
            raise ValueError(f"input width {x.shape[-1]} != {self.widths[0]}")
        cache = [x]
        h = x
        n_layers = len(self.widths) - 1
        for i in range(n_layers):
            z = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < n_layers - 1:
                h = self._act(z)
                cache.append((z, h))
            else:
                h = z
        return h, cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, upstream):
        """Parameter gradients of ``sum(upstream * output)`` and the input gradient."""
        grads = [None] * len(self.params)
        n_layers = len(self.widths) - 1
        delta = np.asarray(upstream, dtype=np.float64)
        for i in reversed(range(n_layers)):
            h_in = cache[i] if i == 0 else cache[i][1]
            grads[2 * i] = h_in.T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            delta = delta @ self.params[2 * i].T
            if i > 0:
                z, h = cache[i]
                delta = delta * self._dact(z, h)
        return grads, delta

    def gradient(self, x, upstream):
        _, cache = self.forward(x)
        return self.backward(cache, upstream)[0]

    def copy(self):
        return Mlp(self.widths, self.activation, params=self.params)


class ScalarMlp:
    """MLP head with one output, used for Q(s, a) (on concatenated input) and V(s)."""

    def __init__(self, in_dim, hidden=(64, 64), activation="relu", rng=None, mlp=None):
        self.mlp = mlp if mlp is not None else Mlp([in_dim, *hidden, 1], activation, rng)

    @property
    def params(self):
        return self.mlp.params

    def __call__(self, x):
        return self.mlp(x)[:, 0]

    def loss_and_grad(self, x, target):
        """Mean squared error against ``target`` and its parameter gradient."""
        out, cache = self.mlp.forward(x)
        err = out[:, 0] - target
        loss = float(np.mean(err ** 2))
        upstream = (2.0 / len(err)) * err[:, None]
        grads, _ = self.mlp.backward(cache, upstream)
        return loss, grads

    def copy(self):
        return ScalarMlp(None, mlp=self.mlp.copy())

    def descriptor(self):
        return {"kind": "scalar_mlp", "widths": self.mlp.widths,
                "activation": self.mlp.activation}


class TabularSoftmaxPolicy:
    """pi(a|s) = softmax(logits[s])."""

    discrete = True

    def __init__(self, logits):
        self.params = [np.array(logits, dtype=np.float64)]

    @classmethod
    def from_table(cls, table, floor=1e-12):
        return cls(np.log(np.maximum(np.asarray(table, dtype=np.float64), floor)))

    @classmethod
    def uniform(cls, n_states, n_actions):
        return cls(np.zeros((n_states, n_actions)))

    @property
    def logits(self):
        return self.params[0]

    @property
    def n_states(self):
        return self.logits.shape[0]

    @property
    def n_actions(self):
        return self.logits.shape[1]

    def log_table(self):
        z = self.logits - self.logits.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def table(self):
        return np.exp(self.log_table())

    def log_prob(self, states, actions):
        states = np.asarray(states, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        return self.log_table()[states, actions]

    def prob(self, states, actions):
        return np.exp(self.log_prob(states, actions))

    def sample(self, states, rng, deterministic=False):
        states = np.atleast_1d(np.asarray(states, dtype=np.int64))
        if deterministic:
            return self.logits[states].argmax(axis=1)
        return sample_categorical(self.table()[states], rng)

    def grad_log_prob(self, states, actions, weights):
        """Gradient of ``sum_i weights_i * log pi(a_i|s_i)``."""
        states = np.asarray(states, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        weights = np.asarray(weights, dtype=np.float64)
        probs = self.table()
        g = np.zeros_like(self.logits)
        np.add.at(g, (states, actions), weights)
        np.add.at(g, states, -weights[:, None] * probs[states])
        return [g]

    def post_update(self):
        pass

    def copy(self):
        return TabularSoftmaxPolicy(self.logits)

    def descriptor(self):
        return {"kind": "tabular_softmax", "shape": list(self.logits.shape)}


class GaussianMlpPolicy:
    """Diagonal Gaussian whose mean is a tanh MLP of the state; actions are unsquashed."""

    discrete = False

    def __init__(self, state_dim, action_dim, hidden=(64, 64), rng=None,
                 init_log_std=0.0, mlp=None, log_std=None):
        if mlp is None:
            mlp = Mlp([state_dim, *hidden, action_dim], "tanh", rng, output_gain=0.01)
        self.mlp = mlp
        if log_std is None:
            log_std = np.full(action_dim, float(init_log_std))
        self.params = self.mlp.params + [np.clip(np.array(log_std, dtype=np.float64),
                                                 LOG_STD_MIN, LOG_STD_MAX)]

    @property
    def log_std(self):
        return self.params[-1]

    @property
    def state_dim(self):
        return self.mlp.widths[0]

    @property
    def action_dim(self):
        return self.mlp.widths[-1]

    def mean(self, states):
        return self.mlp(np.atleast_2d(states))

    def log_prob(self, states, actions):
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        if not (np.all(np.isfinite(states)) and np.all(np.isfinite(actions))):
            raise NumericalError("non-finite state or action passed to log_prob")
        mu = self.mlp(states)
        z = (actions - mu) * np.exp(-self.log_std)
        return (-0.5 * z ** 2 - self.log_std - 0.5 * _LOG_2PI).sum(axis=-1)

    def sample(self, states, rng, deterministic=False):
        mu = self.mean(states)
        if deterministic:
            return mu
        return mu + np.exp(self.log_std) * rng.standard_normal(mu.shape)

    def grad_log_prob(self, states, actions, weights):
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        weights = np.asarray(weights, dtype=np.float64)
        mu, cache = self.mlp.forward(states)
        inv_var = np.exp(-2.0 * self.log_std)
        diff = actions - mu
        d_mean = weights[:, None] * diff * inv_var
        grads, _ = self.mlp.backward(cache, d_mean)
        d_log_std = (weights[:, None] * (diff ** 2 * inv_var - 1.0)).sum(axis=0)
        return grads + [d_log_std]

    def post_update(self):
        np.clip(self.params[-1], LOG_STD_MIN, LOG_STD_MAX, out=self.params[-1])

    def copy(self):
        return GaussianMlpPolicy(None, None, mlp=self.mlp.copy(), log_std=self.log_std)

    def descriptor(self):
        return {"kind": "gaussian_mlp", "widths": self.mlp.widths}


# --- optimizer --------------------------------------------------------------

def global_norm(grads) -> float:
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads)))


class ClippedAdam:
    """Adam with global-norm gradient clipping and a capped geometric lr decay.

    The learning rate used at update ``i`` (0-based) is
    ``lr * lr_decay ** min(i, decay_steps)``.
    """

    def __init__(self, params, lr=1e-4, lr_decay=1.0, decay_steps=200, clip_norm=0.5,
                 betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.lr_decay = lr_decay
        self.decay_steps = decay_steps
        self.clip_norm = clip_norm
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step_count = 0

    def current_lr(self, step=None) -> float:
        i = self.step_count if step is None else step
        return self.lr * self.lr_decay ** min(i, self.decay_steps)

    def step(self, params, grads) -> dict:
        """Update ``params`` in place; returns the lr and pre/post-clip gradient norms."""
        if len(grads) != len(params):
            raise ValueError("gradient list does not match parameter list")
        norm = global_norm(grads)
        if not math.isfinite(norm):
            raise NumericalError("non-finite gradient; optimizer step rejected")
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        lr = self.current_lr()
        t = self.step_count + 1
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(params, grads, self.m, self.v):
            g = g * scale
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        self.step_count += 1
        return {"lr": lr, "grad_norm": norm, "clipped_norm": norm * scale}


# --- checkpoint container ---------------------------------------------------
#
# layout (all integers little-endian):
#   magic b"BPPOCKPT" | u32 version | u32 descriptor length | descriptor (utf-8 json)
#   | u32 n_arrays | per array: u32 ndim, ndim x u64 dims
#   | float64 little-endian payload of all arrays in order | u32 crc32 of all preceding bytes

CKPT_MAGIC = b"BPPOCKPT"
CKPT_VERSION = 1


def dumps_arrays(arrays, descriptor=None) -> bytes:
    desc = json.dumps(descriptor or {}, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(desc)), desc,
             struct.pack("<I", len(arrays))]
    for a in arrays:
        a = np.asarray(a)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
    for a in arrays:
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads_arrays(blob: bytes):
    if len(blob) < 8 + 12 or blob[:8] != CKPT_MAGIC:
        raise ValueError("not a bppolab checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ValueError("checkpoint checksum mismatch")
    version, dlen = struct.unpack_from("<II", body, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 16
    descriptor = json.loads(body[off:off + dlen].decode())
    off += dlen
    (n,) = struct.unpack_from("<I", body, off)
    off += 4
    shapes = []
    for _ in range(n):
        (ndim,) = struct.unpack_from("<I", body, off)
        off += 4
        shapes.append(struct.unpack_from(f"<{ndim}Q", body, off))
        off += 8 * ndim
    arrays = []
    for shape in shapes:
        size = int(np.prod(shape, dtype=np.int64))
        arrays.append(np.frombuffer(body, dtype="<f8", count=size, offset=off)
                      .reshape(shape).astype(np.float64))
        off += 8 * size
    if off != len(body):
        raise ValueError("checkpoint payload length mismatch")
    return arrays, descriptor


def save_model(path, model) -> None:
    Path(path).write_bytes(dumps_arrays(model.params, model.descriptor()))


def load_model(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    arrays, desc = loads_arrays(path.read_bytes())
    kind = desc.get("kind")
    if kind == "tabular_softmax":
        return TabularSoftmaxPolicy(arrays[0])
    if kind == "gaussian_mlp":
        mlp = Mlp(desc["widths"], "tanh", params=arrays[:-1])
        return GaussianMlpPolicy(None, None, mlp=mlp, log_std=arrays[-1])
    if kind == "scalar_mlp":
        return ScalarMlp(None, mlp=Mlp(desc["widths"], desc["activation"], params=arrays))
    raise ValueError(f"unknown checkpoint kind {kind!r}")


def flatten(arrays) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.zeros(0)


def unflatten_into(flat, arrays) -> None:
    off = 0
    for a in arrays:
        a[...] = flat[off:off + a.size].reshape(a.shape)
        off += a.size
