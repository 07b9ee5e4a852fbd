"""Linear-basis movement primitives: normalized RBFs plus a start-point shift."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class BasisConfig:
    n_basis: int = 5
    horizon_steps: int = 200
    dt: float = 0.01
    bandwidth: float = 1.0
    n_joints: int = 1

    def __post_init__(self):
        if self.n_basis < 1 or self.horizon_steps < 2 or self.dt <= 0 or self.n_joints < 1:
            raise ValueError(f"invalid basis config {self}")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")

    @property
    def n_params(self):
        return self.n_basis * self.n_joints


@dataclass(frozen=True)
class MpParams:
    weights: np.ndarray
    duration_scale: float = 1.0


@lru_cache(maxsize=64)
def _basis(n_basis, T, bandwidth):
    phase = np.linspace(0.0, 1.0, T)
    if n_basis == 1:
        return np.ones((T, 1))
    centers = np.linspace(0.0, 1.0, n_basis)
    width = bandwidth * (centers[1] - centers[0])
    act = np.exp(-0.5 * ((phase[:, None] - centers[None, :]) / width) ** 2)
    Phi = act / act.sum(axis=1, keepdims=True)
    Phi.setflags(write=False)
    return Phi


def basis_matrix(cfg: BasisConfig):
    """``(T, n_basis)`` normalized Gaussian RBFs over phase in [0, 1]."""
    return _basis(cfg.n_basis, cfg.horizon_steps, float(cfg.bandwidth))


def resample(traj, n_steps):
    """Linearly re-time ``traj`` (``(..., T, J)``) onto ``n_steps`` samples."""
    T = traj.shape[-2]
    src = np.linspace(0.0, 1.0, T)
    dst = np.linspace(0.0, 1.0, n_steps)
    idx = np.clip(np.searchsorted(src, dst, side="right") - 1, 0, T - 2)
    w = ((dst - src[idx]) / (src[idx + 1] - src[idx]))[:, None]
    return traj[..., idx, :] * (1.0 - w) + traj[..., idx + 1, :] * w


def _velocities(q, dt):
    dq = np.zeros_like(q)
    dq[..., 1:, :] = np.diff(q, axis=-2) / dt
    return dq


def generate_trajectories(weights, cfg: BasisConfig, q0, duration_scale=1.0):
    """Batched version of :func:`generate_trajectory`.

    ``weights`` is ``(B, n_joints * n_basis)`` laid out joint-major, ``q0`` is
    ``(B, n_joints)`` or ``(n_joints,)``. Returns ``(q_des, dq_des)`` of shape
    ``(B, T', n_joints)``.
    """
    W = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    if W.shape[1] != cfg.n_params:
        raise ValueError(f"expected {cfg.n_params} MP weights, got {W.shape[1]}")
    if not np.all(np.isfinite(W)):
        raise ValueError("non-finite MP weights")
    B = W.shape[0]
    W = W.reshape(B, cfg.n_joints, cfg.n_basis)
    Phi = basis_matrix(cfg)
    raw = np.einsum("tk,bjk->btj", Phi, W)
    q0 = np.broadcast_to(np.asarray(q0, dtype=np.float64), (B, cfg.n_joints))
    q = raw - raw[:, :1, :] + q0[:, None, :]
    if duration_scale != 1.0:
        if duration_scale <= 0:
            raise ValueError("duration_scale must be positive")
        q = resample(q, max(2, int(round(cfg.horizon_steps * duration_scale))))
        q = q - q[:, :1, :] + q0[:, None, :]
    return q, _velocities(q, cfg.dt)


def generate_trajectory(theta, cfg: BasisConfig, q0):
    """Desired positions and velocities ``(T, n_joints)`` for one MP.

    ``theta`` may be an :class:`MpParams` or a raw weight vector.
    """
    if isinstance(theta, MpParams):
        w, scale = theta.weights, theta.duration_scale
    else:
        w, scale = theta, 1.0
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1:
        raise ValueError("generate_trajectory expects one weight vector")
    q, dq = generate_trajectories(w[None, :], cfg, q0, scale)
    return q[0], dq[0]


def trajectory_csv(path, q, dq, dt):
    """Write ``t, q_1..q_n, dq_1..dq_n`` rows."""
    n = q.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"q_{i + 1}" for i in range(n)] + [f"dq_{i + 1}" for i in range(n)])
        for t in range(q.shape[0]):
            w.writerow([repr(t * dt)] + [repr(float(v)) for v in q[t]] + [repr(float(v)) for v in dq[t]])
