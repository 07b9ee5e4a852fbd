"""Small dense networks, Adam, exact Gaussian algebra and tensor files.

Everything runs in float64. Networks keep all weights in one flat vector so
optimizer state, snapshots and trust-region interpolation are plain array
operations.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from . import kernels

LOG_2PI = math.log(2.0 * math.pi)


class ShapeError(ValueError):
    """Input or gradient does not match the declared dimensions."""


# --------------------------------------------------------------------- nets

def orthogonal(shape, gain, rng):
    """Orthogonal matrix of ``shape`` scaled by ``gain`` (QR of a Gaussian)."""
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def n_params(layer_dims):
    return int(sum(o * i + o for i, o in zip(layer_dims[:-1], layer_dims[1:])))


class DenseNet:
    """tanh MLP with a linear output layer, parameters in one flat vector."""

    def __init__(self, layer_dims, params=None, rng=None,
                 hidden_gain=math.sqrt(2.0), output_gain=0.01):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or min(dims) < 1:
            raise ShapeError(f"invalid layer_dims {layer_dims!r}")
        self.dims = np.asarray(dims, dtype=np.int64)
        if params is not None:
            params = np.asarray(params, dtype=np.float64)
            if params.shape != (n_params(dims),):
                raise ShapeError(f"expected {n_params(dims)} parameters, got {params.shape}")
            self.params = params.copy()
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            self.params = np.zeros(n_params(dims))
            n_layers = len(dims) - 1
            for l in range(n_layers):
                W, _ = self.layer(l)
                gain = output_gain if l == n_layers - 1 else hidden_gain
                W[...] = orthogonal(W.shape, gain, rng)

    @property
    def in_dim(self):
        return int(self.dims[0])

    @property
    def out_dim(self):
        return int(self.dims[-1])

    @property
    def layer_dims(self):
        return [int(d) for d in self.dims]

    def layer(self, l):
        """Views ``(W, b)`` into the flat parameter vector for layer ``l``."""
        p = 0
        for k in range(l):
            p += int(self.dims[k + 1] * self.dims[k] + self.dims[k + 1])
        n_in, n_out = int(self.dims[l]), int(self.dims[l + 1])
        W = self.params[p : p + n_out * n_in].reshape(n_out, n_in)
        b = self.params[p + n_out * n_in : p + n_out * n_in + n_out]
        return W, b

    def _as_batch(self, x):
        X = np.asarray(x, dtype=np.float64)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.ndim != 2 or X.shape[1] != self.in_dim:
            raise ShapeError(f"input of shape {np.shape(x)} does not match in_dim={self.in_dim}")
        return X, single

    def forward_batch(self, X, params=None):
        """Returns ``(outputs, acts)``; ``acts`` feeds :meth:`backward`."""
        X, _ = self._as_batch(X)
        p = self.params if params is None else params
        acts = kernels.dense_forward(p, self.dims, X)
        return acts[:, -self.out_dim:], acts

    def __call__(self, x):
        X, single = self._as_batch(x)
        out, _ = self.forward_batch(X)
        return out[0] if single else out

    def backward(self, acts, gout, params=None):
        """Gradient of ``sum(gout * outputs)`` w.r.t. parameters and inputs."""
        gout = np.atleast_2d(np.asarray(gout, dtype=np.float64))
        if gout.shape != (acts.shape[0], self.out_dim):
            raise ShapeError(f"upstream gradient {gout.shape} vs output ({acts.shape[0]}, {self.out_dim})")
        p = self.params if params is None else params
        return kernels.dense_backward(p, self.dims, acts, gout)

    def copy(self):
        return DenseNet(self.dims, params=self.params)


def forward(net: DenseNet, x):
    return net(x)


def backprop(net: DenseNet, x, upstream_grad):
    """Parameter gradient of ``upstream_grad · net(x)`` (x may be a batch)."""
    X, single = net._as_batch(x)
    g = np.asarray(upstream_grad, dtype=np.float64)
    if single:
        g = g[None, :]
    _, acts = net.forward_batch(X)
    grad, _ = net.backward(acts, g)
    return grad


# --------------------------------------------------------------------- adam

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 3e-4
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, lr=3e-4):
        return cls(m=np.zeros(n), v=np.zeros(n), lr=lr)

    def copy(self):
        return AdamState(self.m.copy(), self.v.copy(), self.lr, self.t,
                         self.beta1, self.beta2, self.eps)


def adam_step(params, grads, state: AdamState):
    """One Adam descent step on ``grads``. Returns ``(new_params, state)``."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ShapeError("adam_step: parameter, gradient and state shapes differ")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps), state


# ----------------------------------------------------------------- gaussian

def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class GaussianParams:
    mean: np.ndarray
    chol: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.chol = np.asarray(self.chol, dtype=np.float64)
        d = self.mean.shape[-1]
        if self.chol.shape != (d, d):
            raise ShapeError(f"chol shape {self.chol.shape} for mean dim {d}")
        if not np.all(np.diag(self.chol) > 0):
            raise ValueError("Cholesky diagonal must be strictly positive")

    @property
    def dim(self):
        return self.mean.shape[-1]

    @property
    def cov(self):
        return self.chol @ self.chol.T


def chol_from_raw(raw):
    """Lower-triangular factor with a softplus-mapped diagonal."""
    L = np.tril(raw, -1)
    L[np.diag_indices_from(L)] = softplus(np.diag(raw))
    return L


def raw_from_chol(L):
    raw = np.tril(L, -1).astype(np.float64)
    raw[np.diag_indices_from(raw)] = softplus_inv(np.diag(L))
    return raw


def log_prob_and_grads(mean, chol, x):
    """Batched Gaussian log-density with analytic gradients.

    ``mean`` is ``(B, d)`` or ``(d,)``, ``x`` is ``(B, d)``, ``chol`` is shared.
    Returns ``(logp, d_mean, d_x, z)`` where ``z = L^-1 (x - mean)``; the
    Cholesky gradient is assembled by :func:`chol_grad_from_z`.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), x.shape)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(mean)) and np.all(np.isfinite(chol))):
        raise ValueError("non-finite input to Gaussian log-density")
    d = x.shape[1]
    r = x - mean
    z = solve_triangular(chol, r.T, lower=True).T
    logp = -0.5 * d * LOG_2PI - np.log(np.diag(chol)).sum() - 0.5 * (z * z).sum(axis=1)
    prec_r = solve_triangular(chol, z.T, lower=True, trans="T").T
    return logp, prec_r, -prec_r, z


def chol_grad_from_z(chol, z, weights):
    """d/dL of ``sum_i w_i log N(x_i)`` given the whitened residuals ``z``."""
    weights = np.asarray(weights, dtype=np.float64)
    S = (z * weights[:, None]).T @ z
    G = solve_triangular(chol, S, lower=True, trans="T", check_finite=False)
    G = np.tril(G)
    G[np.diag_indices_from(G)] -= weights.sum() / np.diag(chol)
    return G


def gaussian_log_prob(g: GaussianParams, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != g.dim:
        raise ShapeError(f"x dim {x.shape[-1]} vs Gaussian dim {g.dim}")
    logp, _, _, _ = log_prob_and_grads(g.mean, g.chol, x)
    return float(logp[0]) if x.ndim == 1 else logp


def gaussian_entropy(g: GaussianParams):
    return 0.5 * g.dim * (1.0 + LOG_2PI) + float(np.log(np.diag(g.chol)).sum())


def gaussian_sample(g: GaussianParams, rng, n=None):
    shape = (g.dim,) if n is None else (n, g.dim)
    eps = rng.standard_normal(shape)
    return g.mean + eps @ g.chol.T


def kl_parts(mean_new, chol_new, mean_old, chol_old):
    """Batched KL(new || old) split into mean and covariance parts.

    Means may be ``(B, d)``; the factors are shared. Returns
    ``(mean_part[B], cov_part)``.
    """
    d = chol_old.shape[0]
    diff = np.atleast_2d(np.asarray(mean_new) - np.asarray(mean_old))
    w = solve_triangular(chol_old, diff.T, lower=True)
    mean_part = 0.5 * (w * w).sum(axis=0)
    M = solve_triangular(chol_old, chol_new, lower=True)
    logdet_old = 2.0 * np.log(np.diag(chol_old)).sum()
    logdet_new = 2.0 * np.log(np.diag(chol_new)).sum()
    cov_part = 0.5 * ((M * M).sum() - d + logdet_old - logdet_new)
    return mean_part, float(max(cov_part, 0.0))


def gaussian_kl(new: GaussianParams, old: GaussianParams):
    """``(mean_part, cov_part, total)`` of KL(new || old)."""
    if new.dim != old.dim:
        raise ShapeError(f"KL between dims {new.dim} and {old.dim}")
    if np.array_equal(new.mean, old.mean) and np.array_equal(new.chol, old.chol):
        return 0.0, 0.0, 0.0
    mp, cp = kl_parts(new.mean, new.chol, old.mean, old.chol)
    mp = float(mp[0])
    return mp, cp, mp + cp


# ------------------------------------------------------------ tensor files

TENSOR_FILE_MAGIC = "diskill-tensors 1"


class TensorFileError(ValueError):
    """A tensor file is truncated, corrupted or malformed."""


@dataclass
class TensorFile:
    tensors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _fmt(x):
    return format(float(x), ".17g")


def dumps_tensors(tensors, meta=None):
    """Serialize ``{key: array}`` plus JSON-able ``meta`` to text.

    Layout (UTF-8, one record per line)::

        diskill-tensors 1
        meta <key> <json>
        tensor <key> <d0,d1,...>      # empty shape list for scalars
        <values, space separated, 17 significant digits>
        end <sha256 hex of everything above>
    """
    lines = [TENSOR_FILE_MAGIC]
    for k in sorted(meta or {}):
        if " " in k:
            raise ValueError(f"meta key {k!r} contains a space")
        lines.append(f"meta {k} {json.dumps(meta[k], sort_keys=True)}")
    for k in sorted(tensors):
        if " " in k:
            raise ValueError(f"tensor key {k!r} contains a space")
        a = np.asarray(tensors[k], dtype=np.float64)
        lines.append(f"tensor {k} {','.join(str(s) for s in a.shape)}")
        lines.append(" ".join(_fmt(v) for v in a.ravel()))
    body = "\n".join(lines) + "\n"
    digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
    return body + f"end {digest}\n"


def loads_tensors(text) -> TensorFile:
    lines = text.split("\n")
    if not lines or lines[0] != TENSOR_FILE_MAGIC:
        raise TensorFileError("missing tensor-file header")
    try:
        end_idx = max(i for i, ln in enumerate(lines) if ln.startswith("end "))
    except ValueError:
        raise TensorFileError("missing end record (truncated file?)") from None
    body = "\n".join(lines[:end_idx]) + "\n"
    digest = lines[end_idx][4:].strip()
    if hashlib.sha256(body.encode("utf-8")).hexdigest() != digest:
        raise TensorFileError("checksum mismatch (corrupted file)")
    out = TensorFile()
    i = 1
    while i < end_idx:
        ln = lines[i]
        if ln.startswith("meta "):
            _, key, payload = ln.split(" ", 2)
            out.meta[key] = json.loads(payload)
            i += 1
        elif ln.startswith("tensor "):
            parts = ln.split(" ")
            if len(parts) != 3:
                raise TensorFileError(f"bad tensor header: {ln!r}")
            shape = tuple(int(s) for s in parts[2].split(",") if s)
            vals = lines[i + 1].split() if i + 1 < end_idx else []
            n = int(np.prod(shape)) if shape else 1
            if len(vals) != n:
                raise TensorFileError(f"tensor {parts[1]}: expected {n} values, got {len(vals)}")
            out.tensors[parts[1]] = np.array([float(v) for v in vals]).reshape(shape)
            i += 2
        else:
            raise TensorFileError(f"unexpected line {i}: {ln[:40]!r}")
    return out


def save_tensors(path, tensors, meta=None):
    text = dumps_tensors(tensors, meta)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return text


def load_tensors(path) -> TensorFile:
    with open(path, encoding="utf-8") as fh:
        return loads_tensors(fh.read())
