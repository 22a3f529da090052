"""Minimal reverse-mode layer library on numpy arrays.

Every layer is a Module caching what its backward pass needs. Calling
``forward`` then ``backward`` accumulates parameter gradients into
``Param.grad`` and returns the gradient with respect to the layer input.
Everything runs in float64; there are no bias terms and no layerscale
anywhere in this library (backbone convention).
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

SQRT2 = np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Param:
    """A trainable array paired with its gradient accumulator."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape


class Module:
    """Base class providing named parameter traversal.

    Parameters are discovered by walking instance attributes (insertion
    order, hence deterministic): Param leaves, nested Modules, and lists
    of Modules.
    """

    def named_params(self, prefix: str = ""):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Param):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_params(f"{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{name}.{i}.")

    def params(self):
        return [p for _, p in self.named_params()]

    def zero_grad(self):
        for p in self.params():
            p.grad[...] = 0.0

    def param_count(self) -> int:
        return sum(p.value.size for p in self.params())


# -- initializers ------------------------------------------------------------


def xavier_uniform(shape, rng: np.random.Generator) -> np.ndarray:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)) for 2-D weights."""
    fan_in, fan_out = shape[0], shape[1]
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def trunc_normal(shape, rng: np.random.Generator, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +/- 2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


# -- elementwise -------------------------------------------------------------


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / SQRT2)) + x * INV_SQRT_2PI * np.exp(-0.5 * x * x)


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(probs, dprobs, axis=-1):
    """Gradient through softmax given its output and upstream gradient."""
    inner = (dprobs * probs).sum(axis=axis, keepdims=True)
    return probs * (dprobs - inner)


# -- layers ------------------------------------------------------------------


class Linear(Module):
    """y = x @ w, without bias."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.w = Param(xavier_uniform((d_in, d_out), rng))

    def forward(self, x):
        self._x = x
        return x @ self.w.value

    def backward(self, dy):
        d_in, d_out = self.w.shape
        self.w.grad += self._x.reshape(-1, d_in).T @ dy.reshape(-1, d_out)
        return dy @ self.w.value.T


class RMSNorm(Module):
    """x * gain / sqrt(mean(x^2) + eps), normalizing the last axis."""

    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Param(np.ones(dim))
        self._eps = eps

    def forward(self, x):
        self._x = x
        self._r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + self._eps)
        return x * self._r * self.gain.value

    def backward(self, dy):
        x, r, g = self._x, self._r, self.gain.value
        self.gain.grad += (dy * x * r).reshape(-1, x.shape[-1]).sum(axis=0)
        dyg = dy * g
        inner = (dyg * x).sum(axis=-1, keepdims=True)
        return dyg * r - x * (r**3) * inner / x.shape[-1]


class Mlp(Module):
    """Linear -> GELU -> Linear."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x):
        h = self.fc1.forward(x)
        self._h = h
        return self.fc2.forward(gelu(h))

    def backward(self, dy):
        dh = self.fc2.backward(dy) * gelu_grad(self._h)
        return self.fc1.backward(dh)


# -- axial rotary position embedding -----------------------------------------
#
# Convention, pinned here once:
#   * head channels [0, hd/2) form the row-axis block, [hd/2, hd) the
#     column-axis block; hd must be divisible by 4;
#   * within each block, consecutive channel pairs (2j, 2j+1) are rotated
#     by angle theta_j * coordinate, where the theta_j are hd/4 values
#     log-spaced (geometrically) between freq_min * pi and freq_max * pi;
#   * tokens flagged rope-off (registers, global queries) get the identity
#     rotation.
# Rotations are orthogonal, so each 2-D pair keeps its Euclidean norm, and
# q . k after rotating both depends on coordinates only through their
# difference.


def rope_thetas(head_dim: int, freq_min: float, freq_max: float) -> np.ndarray:
    if head_dim % 4 != 0:
        raise ValueError(f"head dim must be divisible by 4 for axial rope, got {head_dim}")
    return np.pi * np.geomspace(freq_min, freq_max, head_dim // 4)


def rope_cos_sin(coords, rope_on, head_dim, freq_min, freq_max):
    """Per-token rotation tables.

    Parameters
    ----------
    coords : (..., 2) float array of (row, col) lattice positions.
    rope_on : (...,) bool array; False rows get the identity rotation.
    head_dim : channels per attention head.

    Returns
    -------
    cos, sin : (..., head_dim // 2) arrays, one angle per channel pair.
    """
    thetas = rope_thetas(head_dim, freq_min, freq_max)
    coords = np.asarray(coords, dtype=np.float64)
    angles = np.concatenate(
        [coords[..., :1] * thetas, coords[..., 1:2] * thetas], axis=-1
    )
    angles = np.where(np.asarray(rope_on)[..., None], angles, 0.0)
    return np.cos(angles), np.sin(angles)


def rope_apply(x, cos, sin):
    """Rotate channel pairs of x (..., T, hd) by tables of shape (..., T, hd/2)."""
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_apply_back(dy, cos, sin):
    """Transpose (= inverse) rotation, for the backward pass."""
    even, odd = dy[..., 0::2], dy[..., 1::2]
    out = np.empty_like(dy)
    out[..., 0::2] = even * cos + odd * sin
    out[..., 1::2] = -even * sin + odd * cos
    return out


# -- attention ---------------------------------------------------------------


class MultiHeadAttention(Module):
    """Multi-head scaled dot-product attention, q/k/v/o projections, no biases.

    Works for self-attention (x_q is x_kv) and cross-attention alike. When
    rotation tables are passed, they are applied to q and k after the head
    split. ``n_calls`` counts forward invocations (used by probe
    instrumentation).
    """

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator, kv_dim: int | None = None):
        if dim % n_heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {n_heads}")
        kv_dim = dim if kv_dim is None else kv_dim
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(kv_dim, dim, rng)
        self.wv = Linear(kv_dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        self._h = n_heads
        self._hd = dim // n_heads
        self.n_calls = 0

    def _split(self, x):
        b, t, d = x.shape
        return x.reshape(b, t, self._h, self._hd).transpose(0, 2, 1, 3)

    def _merge(self, x):
        b, h, t, hd = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, t, h * hd)

    def forward(self, x_q, x_kv, rot_q=None, rot_kv=None):
        """rot_q / rot_kv are optional (cos, sin) tables of shape (B, T, hd/2)."""
        self.n_calls += 1
        q = self._split(self.wq.forward(x_q))
        k = self._split(self.wk.forward(x_kv))
        v = self._split(self.wv.forward(x_kv))
        if rot_q is not None:
            cos_q, sin_q = rot_q[0][:, None], rot_q[1][:, None]
            q = rope_apply(q, cos_q, sin_q)
            self._rot_q = (cos_q, sin_q)
        else:
            self._rot_q = None
        if rot_kv is not None:
            cos_k, sin_k = rot_kv[0][:, None], rot_kv[1][:, None]
            k = rope_apply(k, cos_k, sin_k)
            self._rot_kv = (cos_k, sin_k)
        else:
            self._rot_kv = None
        scale = 1.0 / np.sqrt(self._hd)
        attn = softmax(q @ k.swapaxes(-1, -2) * scale)
        out = attn @ v
        self._cache = (q, k, v, attn, scale, x_q is x_kv)
        return self.wo.forward(self._merge(out))

    def backward(self, dy):
        """Returns (dx_q, dx_kv); for self-attention callers add them."""
        q, k, v, attn, scale, _ = self._cache
        dout = self._split(self.wo.backward(dy))
        dattn = dout @ v.swapaxes(-1, -2)
        dv = attn.swapaxes(-1, -2) @ dout
        dscores = softmax_backward(attn, dattn) * scale
        dq = dscores @ k
        dk = dscores.swapaxes(-1, -2) @ q
        if self._rot_q is not None:
            dq = rope_apply_back(dq, *self._rot_q)
        if self._rot_kv is not None:
            dk = rope_apply_back(dk, *self._rot_kv)
        dx_q = self.wq.backward(self._merge(dq))
        dx_kv = self.wk.backward(self._merge(dk)) + self.wv.backward(self._merge(dv))
        return dx_q, dx_kv


# -- stochastic depth --------------------------------------------------------


def drop_path_mask(batch: int, rate: float, train: bool, rng) -> np.ndarray:
    """Per-sample residual branch multiplier: 0 or 1/keep_prob.

    Identity (all ones) at eval time or when the rate is 0.
    """
    if not train or rate == 0.0:
        return np.ones((batch, 1, 1))
    if rng is None:
        raise ValueError("stochastic depth in train mode needs an rng")
    keep = 1.0 - rate
    return (rng.random((batch, 1, 1)) < keep).astype(np.float64) / keep


# -- gradient checking -------------------------------------------------------


def gather_params(module: Module) -> np.ndarray:
    return np.concatenate([p.value.reshape(-1) for p in module.params()])


def scatter_params(module: Module, flat: np.ndarray) -> None:
    i = 0
    for p in module.params():
        n = p.value.size
        p.value[...] = flat[i : i + n].reshape(p.value.shape)
        i += n
    if i != flat.size:
        raise ValueError(f"flat vector has {flat.size} entries, module expects {i}")


def gather_grads(module: Module) -> np.ndarray:
    return np.concatenate([p.grad.reshape(-1) for p in module.params()])


def numeric_grad(f, x0: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, one coordinate at a time."""
    g = np.zeros_like(x0)
    x = x0.copy()
    for i in range(x0.size):
        orig = x[i]
        x[i] = orig + eps
        fp = f(x)
        x[i] = orig - eps
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2.0 * eps)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
