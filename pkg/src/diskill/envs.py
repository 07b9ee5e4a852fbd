"""Episodic desk-scale environments.

Both environments track a motion-primitive trajectory with a PD controller
on decoupled unit-inertia double integrators and pay a squared-acceleration
cost per step plus a sparse terminal cost.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .primitives import BasisConfig, MpParams, generate_trajectories


class ConfigurationError(ValueError):
    pass


@dataclass
class ContextBatch:
    contexts: np.ndarray
    origin: str = "environment"

    def __len__(self):
        return len(self.contexts)


@dataclass(frozen=True)
class ContextSpace:
    low: tuple
    high: tuple
    validity: object = None

    @property
    def dim(self):
        return len(self.low)

    def is_valid(self, c):
        c = np.atleast_2d(c)
        inside = np.all((c >= np.asarray(self.low)) & (c <= np.asarray(self.high)), axis=1)
        if self.validity is not None:
            inside &= self.validity(c)
        return inside


def rejection_sample(space: ContextSpace, n, rng, min_rate=1e-3, chunk=None):
    if n < 1:
        raise ValueError("need n >= 1 contexts")
    low, high = np.asarray(space.low, float), np.asarray(space.high, float)
    chunk = chunk or max(64, 2 * n)
    out, drawn, have = [], 0, 0
    while have < n:
        cand = rng.uniform(low, high, size=(chunk, space.dim))
        drawn += chunk
        ok = cand[space.is_valid(cand)]
        out.append(ok)
        have += len(ok)
        if drawn >= 1000 and have / drawn < min_rate:
            raise ConfigurationError(f"context acceptance rate {have / drawn:.2e} below {min_rate}")
    return np.concatenate(out)[:n]


@dataclass
class EpisodeResult:
    episodic_return: float
    success: bool
    diagnostics: dict = field(default_factory=dict)


@dataclass
class BatchResult:
    returns: np.ndarray
    success: np.ndarray
    final_distance: np.ndarray
    torque_cost: np.ndarray
    velocity_penalty: np.ndarray
    final_q: np.ndarray
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.returns)

    def item(self, i) -> EpisodeResult:
        diag = {
            "final_distance": float(self.final_distance[i]),
            "torque_cost": float(self.torque_cost[i]),
            "velocity_penalty": float(self.velocity_penalty[i]),
            "final_q": self.final_q[i].copy(),
        }
        for k, v in self.extra.items():
            diag[k] = v[i]
        return EpisodeResult(float(self.returns[i]), bool(self.success[i]), diag)


class Environment:
    name = "base"
    context_space: ContextSpace
    basis: BasisConfig

    @property
    def context_dim(self):
        return self.context_space.dim

    @property
    def param_dim(self):
        return self.basis.n_params

    def sample_contexts(self, n, rng) -> ContextBatch:
        return ContextBatch(rejection_sample(self.context_space, n, rng))

    def _check(self, contexts, thetas):
        C = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
        if isinstance(thetas, MpParams):
            thetas = thetas.weights
        Th = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        if Th.shape[1] != self.param_dim:
            raise ValueError(f"theta dim {Th.shape[1]} != {self.param_dim}")
        if not np.all(np.isfinite(Th)):
            raise ValueError("non-finite MP parameters")
        if C.shape[1] != self.context_dim or len(C) != len(Th):
            raise ValueError("context/theta batch mismatch")
        return C, Th

    def evaluate(self, c, theta) -> EpisodeResult:
        res = self.evaluate_batch(np.asarray(c)[None, :], np.atleast_2d(
            theta.weights if isinstance(theta, MpParams) else theta), trace=True)
        return res.item(0)

    def evaluate_batch(self, contexts, thetas, trace=False) -> BatchResult:
        raise NotImplementedError

    def mode_key(self, result: BatchResult, i):
        """Discrete behavior label, or None if the env has none."""
        return None

    def behavior_descriptor(self, result: BatchResult):
        return result.final_q


# ------------------------------------------------------------------ reacher

@dataclass(frozen=True)
class ReacherConfig:
    n_links: int = 5
    link_length: float = 0.2
    kp: float = 100.0
    kd: float = 20.0
    a_max: float = 10.0
    horizon: int = 200
    dt: float = 0.01
    torque_weight: float = 1.0
    goal_weight: float = 200.0
    velocity_weight: float = 10.0
    success_threshold: float = 0.05
    n_basis: int = 5
    bandwidth: float = 1.0

    def __post_init__(self):
        if self.n_links < 1 or self.link_length <= 0 or self.horizon < 2 or self.dt <= 0:
            raise ValueError(f"invalid reacher config {self}")
        if self.kp <= 0 or self.kd < 0 or self.a_max <= 0:
            raise ValueError("PD gains and torque limit must be positive")


def forward_kinematics(cfg: ReacherConfig, q, link_length=None):
    """Tip position of a planar chain; ``q`` is ``(..., n_links)``."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != cfg.n_links:
        raise ValueError(f"expected {cfg.n_links} joint angles")
    ln = cfg.link_length if link_length is None else link_length
    cum = np.cumsum(q, axis=-1)
    return np.stack([ln * np.cos(cum).sum(axis=-1), ln * np.sin(cum).sum(axis=-1)], axis=-1)


def _in_disk(radius):
    def valid(c):
        return (c * c).sum(axis=1) <= radius * radius
    return valid


class ReacherEnv(Environment):
    """Planar n-link reacher. Context = goal (x, y) in the reachable disk."""

    name = "reacher"

    def __init__(self, cfg: ReacherConfig = ReacherConfig()):
        self.cfg = cfg
        r = cfg.n_links * cfg.link_length
        self.reach = r
        self.context_space = ContextSpace((-r, -r), (r, r), _in_disk(r))
        self.basis = BasisConfig(cfg.n_basis, cfg.horizon, cfg.dt, cfg.bandwidth, cfg.n_links)
        self.q0 = np.zeros(cfg.n_links)

    def evaluate_batch(self, contexts, thetas, trace=False):
        C, Th = self._check(contexts, thetas)
        cfg = self.cfg
        q_des, dq_des = generate_trajectories(Th, self.basis, self.q0)
        q0 = np.broadcast_to(self.q0, (len(C), cfg.n_links))
        traj, dq_T, step_cost = kernels.pd_rollout(q_des, dq_des, q0, cfg.kp, cfg.kd, cfg.a_max, cfg.dt)
        torque = step_cost.sum(axis=1)
        q_T = traj[:, -1]
        dist = np.linalg.norm(forward_kinematics(cfg, q_T) - C, axis=1)
        vel = (dq_T * dq_T).sum(axis=1)
        R = -cfg.torque_weight * torque - cfg.goal_weight * dist - cfg.velocity_weight * vel
        extra = {}
        if trace:
            extra["tip_trace"] = forward_kinematics(cfg, traj)
        return BatchResult(R, dist < cfg.success_threshold, dist, torque, vel, q_T.copy(), extra)

    def mode_key(self, result, i):
        # elbow configuration: sign pattern of the relative joints
        rel = result.final_q[i][1:]
        return tuple(int(s) for s in np.sign(rel))


# --------------------------------------------------------------------- gate

@dataclass(frozen=True)
class GateConfig:
    wall_y: float = 0.5
    goal_y: float = 1.0
    gate_half_width: float = 0.1
    min_gate_gap: float = 0.6
    goal_x_range: float = 0.5
    gate_range: float = 0.8
    kp: float = 100.0
    kd: float = 20.0
    a_max: float = 10.0
    horizon: int = 100
    dt: float = 0.02
    action_weight: float = 1e-3
    goal_weight: float = 200.0
    collision_penalty: float = 5.0
    success_threshold: float = 0.05
    n_basis: int = 5
    bandwidth: float = 1.0


class GateEnv(Environment):
    """Point mass from the origin through one of two wall gates to a goal.

    Context ``(goal_x, gate1_x, gate2_x)``; gate 1 lies left of 0, gate 2
    right of it, and gate pairs closer than ``min_gate_gap`` are invalid.
    """

    name = "gate"

    def __init__(self, cfg: GateConfig = GateConfig()):
        self.cfg = cfg
        g, gr = cfg.goal_x_range, cfg.gate_range
        gap = cfg.min_gate_gap

        def valid(c):
            return (c[:, 2] - c[:, 1]) >= gap

        self.valid = valid
        self.context_space = ContextSpace((-g, -gr, 0.0), (g, 0.0, gr), valid)
        self.basis = BasisConfig(cfg.n_basis, cfg.horizon, cfg.dt, cfg.bandwidth, 2)
        self.q0 = np.zeros(2)

    def in_hole(self, c):
        c = np.atleast_2d(c)
        return (c[:, 2] - c[:, 1]) < self.cfg.min_gate_gap

    def evaluate_batch(self, contexts, thetas, trace=False):
        C, Th = self._check(contexts, thetas)
        cfg = self.cfg
        B = len(C)
        q_des, dq_des = generate_trajectories(Th, self.basis, self.q0)
        q0 = np.zeros((B, 2))
        traj, dq_T, step_cost = kernels.pd_rollout(q_des, dq_des, q0, cfg.kp, cfg.kd, cfg.a_max, cfg.dt)
        y = traj[:, :, 1] - cfg.wall_y
        crossed = (y[:, :-1] < 0) != (y[:, 1:] < 0)
        # x where the segment meets the wall line
        denom = np.where(crossed, traj[:, 1:, 1] - traj[:, :-1, 1], 1.0)
        frac = np.where(crossed, (cfg.wall_y - traj[:, :-1, 1]) / denom, 0.0)
        x_cross = traj[:, :-1, 0] + frac * (traj[:, 1:, 0] - traj[:, :-1, 0])
        hw = cfg.gate_half_width
        in_gate = (np.abs(x_cross - C[:, 1:2]) <= hw) | (np.abs(x_cross - C[:, 2:3]) <= hw)
        hit = crossed & ~in_gate
        collided = hit.any(axis=1)
        end = np.where(collided, hit.argmax(axis=1) + 1, cfg.horizon)
        csum = np.cumsum(step_cost, axis=1)
        action = csum[np.arange(B), end - 1]
        pos_end = traj[np.arange(B), end]
        goal = np.stack([C[:, 0], np.full(B, cfg.goal_y)], axis=1)
        dist = np.linalg.norm(pos_end - goal, axis=1)
        R = -cfg.action_weight * action - cfg.goal_weight * dist - cfg.collision_penalty * collided
        first = np.where(crossed.any(axis=1), crossed.argmax(axis=1), 0)
        gate_x = np.where(crossed.any(axis=1), x_cross[np.arange(B), first], np.nan)
        extra = {"collided": collided, "crossing_x": gate_x}
        if trace:
            extra["trace"] = traj
        success = (~collided) & (dist < cfg.success_threshold)
        return BatchResult(R, success, dist, action, np.zeros(B), pos_end, extra)

    def behavior_descriptor(self, result):
        x = result.extra["crossing_x"]
        return np.where(np.isfinite(x), x, 0.0)[:, None]


def make_env(name, **kwargs) -> Environment:
    if name == "reacher":
        return ReacherEnv(ReacherConfig(**kwargs))
    if name == "gate":
        return GateEnv(GateConfig(**kwargs))
    raise ConfigurationError(f"unknown environment {name!r}")
