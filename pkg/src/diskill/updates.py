"""One iteration's learning math: critics, expert and curriculum updates.

Every objective is returned together with its analytic gradient with respect
to a flat parameter vector so it can be checked against finite differences.
Objectives are maximized; the optimizer receives the negated gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from scipy.linalg import solve_triangular
from scipy.optimize import brentq

from .nn import (AdamState, DenseNet, adam_step, chol_from_raw, chol_grad_from_z,
                 log_prob_and_grads, raw_from_chol, sigmoid)
from .policy import ENERGY_CLAMP, LOG_FLOOR, Expert, MixturePolicy, PolicySnapshot, floor_log


class UpdateAborted(FloatingPointError):
    """A non-finite objective or parameter showed up during an update."""

    def __init__(self, msg, diagnostics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}


@dataclass
class UpdateConfig:
    alpha: float = 0.01
    beta: float = 8.0
    eps_mean: float = 0.05
    eps_cov: float = 0.001
    ppo_clip: float = 0.2
    expert_epochs: int = 100
    critic_epochs: int = 100
    ebm_epochs: int = 100
    lr_policy: float = 3e-4
    lr_critic: float = 3e-4
    lr_ebm: float = 1e-4
    samples_per_expert: int = 25
    normalize_advantages: bool = True
    variational_gating: bool = True

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.eps_mean <= 0 or self.eps_cov <= 0:
            raise ValueError("trust-region bounds must be positive")
        if not 0 < self.ppo_clip < 1:
            raise ValueError("ppo_clip must lie in (0, 1)")
        if min(self.expert_epochs, self.critic_epochs, self.ebm_epochs) < 0:
            raise ValueError("epochs must be non-negative")
        if self.samples_per_expert < 1:
            raise ValueError("samples_per_expert must be >= 1")


# ------------------------------------------------------------------ records

@dataclass
class RolloutRecord:
    o: int
    context: np.ndarray
    theta: np.ndarray
    ret: float
    logp_old: float
    resp_old: np.ndarray
    batch_index: int = -1
    success: bool = False
    diagnostics: dict = field(default_factory=dict)


@dataclass
class RolloutBatch:
    """Column-wise records of one expert's episodes in an iteration."""

    o: int
    contexts: np.ndarray
    thetas: np.ndarray
    returns: np.ndarray
    logp_old: np.ndarray
    resp_old: np.ndarray
    batch_index: np.ndarray
    success: np.ndarray

    def __len__(self):
        return len(self.returns)

    @classmethod
    def from_records(cls, records):
        o = records[0].o
        if any(r.o != o for r in records):
            raise ValueError("records belong to different experts")
        return cls(
            o,
            np.array([r.context for r in records], dtype=np.float64),
            np.array([r.theta for r in records], dtype=np.float64),
            np.array([r.ret for r in records], dtype=np.float64),
            np.array([r.logp_old for r in records], dtype=np.float64),
            np.array([r.resp_old for r in records], dtype=np.float64),
            np.array([r.batch_index for r in records], dtype=np.int64),
            np.array([r.success for r in records], dtype=bool),
        )

    def records(self):
        return [RolloutRecord(self.o, self.contexts[i], self.thetas[i], float(self.returns[i]),
                              float(self.logp_old[i]), self.resp_old[i], int(self.batch_index[i]),
                              bool(self.success[i])) for i in range(len(self))]


def _own_resp(rec):
    if isinstance(rec, RolloutBatch):
        return rec.resp_old[:, rec.o]
    return rec.resp_old[rec.o]


def augmented_return(rec, alpha):
    """``R + alpha * log q(o|c,theta)`` with the log floored at -30."""
    return rec.returns + alpha * floor_log(_own_resp(rec)) if isinstance(rec, RolloutBatch) \
        else float(rec.ret + alpha * floor_log(_own_resp(rec)))


def standardize(x):
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        return x - x.mean()
    return (x - x.mean()) / max(x.std(), 1e-8)


# ------------------------------------------------------------------ critics

@dataclass
class Critic:
    """Scalar baseline ``V(c)``; targets are standardized per fit."""

    net: DenseNet
    adam: AdamState
    shift: float = 0.0
    scale: float = 1.0

    @classmethod
    def create(cls, in_dim, hidden, rng, lr):
        net = DenseNet([in_dim, *hidden, 1], rng=rng)
        return cls(net, AdamState.zeros(net.params.size, lr))

    def __call__(self, X):
        return self.net(np.atleast_2d(X))[:, 0] * self.scale + self.shift


def critic_loss(params, net: DenseNet, X, y):
    """Mean squared error and its gradient."""
    out, acts = net.forward_batch(X, params)
    r = out[:, 0] - y
    g, _ = net.backward(acts, (2.0 / len(y)) * r[:, None], params)
    return float(np.mean(r * r)), g


def fit_critic(critic: Critic, X, y, epochs):
    """Regress ``critic`` onto ``y``; returns the MSE trace in target units."""
    X = np.atleast_2d(X)
    y = np.asarray(y, dtype=np.float64)
    if epochs == 0:
        return []
    critic.shift = float(y.mean())
    critic.scale = float(max(y.std(), 1e-8))
    yn = (y - critic.shift) / critic.scale
    losses = []
    for _ in range(epochs):
        loss, g = critic_loss(critic.net.params, critic.net, X, yn)
        if not math.isfinite(loss):
            raise UpdateAborted("non-finite critic loss", {"loss": loss})
        critic.net.params, critic.adam = adam_step(critic.net.params, g, critic.adam)
        losses.append(loss * critic.scale ** 2)
    return losses


def update_expert_critic(critic, batch: RolloutBatch, alpha, epochs):
    if len(batch) < 2:
        raise ValueError("critic regression needs at least 2 records")
    return fit_critic(critic, batch.contexts, augmented_return(batch, alpha), epochs)


def expert_advantages(batch: RolloutBatch, critic, alpha, normalize):
    adv = augmented_return(batch, alpha) - critic(batch.contexts)
    return standardize(adv) if normalize else adv


# ------------------------------------------------------------ expert update

def expert_objective(flat, expert: Expert, contexts, thetas, logp_old, adv, alpha):
    """Importance-weighted advantage plus ``alpha`` times the expert entropy.

    ``flat`` is laid out like :meth:`Expert.flat`. Returns ``(J, dJ/dflat)``.
    """
    net = expert.mean_net
    d = expert.dim
    n = net.params.size
    params = flat[:n]
    raw = np.zeros((d, d))
    tri = np.tril_indices(d)
    raw[tri] = flat[n:]
    L = chol_from_raw(raw)
    mu, acts = net.forward_batch(contexts, params)
    logp, dmu, _, z = log_prob_and_grads(mu, L, thetas)
    ratio = np.exp(logp - logp_old)
    m = len(adv)
    w = ratio * adv / m
    entropy = 0.5 * d * (1.0 + math.log(2.0 * math.pi)) + np.log(np.diag(L)).sum()
    J = float(w.sum() + alpha * entropy)
    gp, _ = net.backward(acts, w[:, None] * dmu, params)
    gL = chol_grad_from_z(L, z, w)
    gL[np.diag_indices(d)] += alpha / np.diag(L)
    gL[np.diag_indices(d)] *= sigmoid(np.diag(raw))
    return J, np.concatenate([gp, gL[tri]])


@dataclass
class ProjectionReport:
    max_mean_part: float
    cov_part: float
    mean_scale: float = 1.0
    cov_scale: float = 1.0

    @property
    def max_kl(self):
        return self.max_mean_part + self.cov_part


def _bisect_largest_feasible(feasible, hi, rtol=1e-6, max_iter=60):
    """Largest ``s`` in ``[0, hi]`` with ``feasible(s)``, assuming a prefix-feasible interval."""
    if feasible(hi):
        return hi
    lo = 0.0
    for _ in range(max_iter):
        if hi - lo <= rtol * hi:
            break
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo


def _interp_cov_kl(A):
    """KL of ``N(0, (L+sD)(L+sD)^T)`` from ``N(0, LL^T)`` as a function of ``s``.

    ``A = L^{-1} D`` is lower triangular, so ``L^{-1}(L + sD) = I + sA`` and the
    log-determinant ratio is ``sum log(1 + s A_ii)``.
    """
    tr, fro, a = np.trace(A), float((A * A).sum()), np.diag(A).copy()

    def kl(s):
        with np.errstate(invalid="ignore", divide="ignore"):
            logs = np.log1p(s * a)
        if not np.all(np.isfinite(logs)):
            return np.inf
        return 0.5 * (2.0 * s * tr + s * s * fro - 2.0 * logs.sum())

    return kl


def project_trust_region(expert: Expert, old: Expert, contexts, eps_mean, eps_cov) -> ProjectionReport:
    """Pull ``expert`` back inside the per-context KL bounds around ``old``.

    The mean network's parameter step is scaled by one global factor
    (``sqrt(eps/mean_part)``, then bisection if the network is too
    nonlinear for that guess); the Cholesky factor is interpolated towards
    the old one with a bisected coefficient.
    """
    C = np.atleast_2d(contexts)
    L_old = old.chol
    L_inv = solve_triangular(L_old, np.eye(L_old.shape[0]), lower=True)
    mu_old = old.mean(C)
    net = expert.mean_net
    p_old = old.mean_net.params

    def max_mean_part(params):
        mu, _ = net.forward_batch(C, params)
        w = (mu - mu_old) @ L_inv.T
        return 0.5 * float((w * w).sum(axis=1).max())

    mp = max_mean_part(net.params)
    mean_scale = 1.0
    if mp > eps_mean:
        delta = net.params - p_old
        s0 = math.sqrt(eps_mean / mp)
        mean_scale = _bisect_largest_feasible(lambda s: max_mean_part(p_old + s * delta) <= eps_mean, s0)
        net.params[:] = p_old + mean_scale * delta
        mp = max_mean_part(net.params)

    dL = expert.chol - L_old
    cov_kl = _interp_cov_kl(L_inv @ dL)
    cp = cov_kl(1.0)
    cov_scale = 1.0
    if cp > eps_cov:
        # convex in s with cov_kl(0) = 0, so there is exactly one crossing
        cov_scale = brentq(lambda s: cov_kl(s) - eps_cov, 0.0, 1.0, xtol=1e-14, rtol=1e-12)
        while cov_kl(cov_scale) > eps_cov:
            cov_scale = np.nextafter(cov_scale, 0.0)
        expert.chol_raw = raw_from_chol(L_old + cov_scale * dL)
        cp = cov_kl(cov_scale)
    return ProjectionReport(float(mp), float(max(cp, 0.0)), mean_scale, cov_scale)


@dataclass
class ExpertReport:
    surrogate: float
    entropy: float
    max_kl: float
    max_mean_part: float
    cov_part: float
    epochs: int


def update_expert(policy: MixturePolicy, snapshot: PolicySnapshot, o, batch: RolloutBatch,
                  advantages, cfg: UpdateConfig, adam: AdamState) -> ExpertReport:
    """Trust-region policy-gradient update of expert ``o`` on its own records."""
    if batch.o != o:
        raise ValueError(f"records belong to expert {batch.o}, not {o}")
    expert = policy.experts[o]
    old = snapshot.experts[o]
    J = float("nan")
    proj = ProjectionReport(0.0, 0.0)
    for epoch in range(cfg.expert_epochs):
        flat = expert.flat()
        J, g = expert_objective(flat, expert, batch.contexts, batch.thetas, batch.logp_old,
                                advantages, cfg.alpha)
        if not (math.isfinite(J) and np.all(np.isfinite(g))):
            raise UpdateAborted(f"non-finite expert objective (expert {o}, epoch {epoch})",
                                {"objective": J, "expert": o, "epoch": epoch})
        flat, _ = adam_step(flat, -g, adam)
        expert.set_flat(flat)
        proj = project_trust_region(expert, old, batch.contexts, cfg.eps_mean, cfg.eps_cov)
    return ExpertReport(J, expert.entropy(), proj.max_kl, proj.max_mean_part, proj.cov_part,
                        cfg.expert_epochs)


# -------------------------------------------------------- curriculum update

def _group_mean(values, keys):
    _, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    sums = np.bincount(inv, weights=values)
    counts = np.bincount(inv)
    return (sums / counts)[inv]


def context_payoff_Lc(batch: RolloutBatch, alpha, expert_entropy):
    """Per-sample estimate of the expert's payoff in its context.

    Samples that share a context (same batch index) are averaged.
    """
    base = augmented_return(batch, alpha)
    keys = batch.batch_index if np.all(batch.batch_index >= 0) else batch.contexts
    return _group_mean(base, keys) + alpha * expert_entropy


def context_targets(o, batch: RolloutBatch, snapshot: PolicySnapshot, cfg: UpdateConfig):
    """``L_c + (beta - alpha) log q(o|c)`` with the snapshot gating."""
    Lc = context_payoff_Lc(batch, cfg.alpha, snapshot.experts[o].entropy())
    if cfg.variational_gating:
        log_q = np.maximum(snapshot.log_gating_all(batch.contexts)[:, o], LOG_FLOOR)
    else:
        log_q = np.zeros(len(batch))
    return Lc + (cfg.beta - cfg.alpha) * log_q


def context_advantages(o, batch, policy, snapshot, cfg: UpdateConfig, critic, env_contexts=None):
    """Payoff minus the context-critic baseline.

    The context is the action of the curriculum, so the baseline may not
    depend on which context was drawn: a per-context ``V(c)`` would cancel the
    very signal the curriculum learns from. The critic is therefore aggregated
    under the old curriculum over the environment batch into one scalar.
    Without ``env_contexts`` the executed contexts stand in for the batch.

    Not standardized: the payoff shares units with the ``beta`` entropy
    bonus and the ``(beta - alpha) log q`` term, and rescaling only one
    side would change their balance.
    """
    payoff = context_targets(o, batch, snapshot, cfg)
    if env_contexts is None:
        baseline = float(np.mean(critic(batch.contexts)))
    else:
        e = snapshot.energy(o, env_contexts)
        p = np.exp(e - logsumexp(e))
        baseline = float(p @ critic(env_contexts))
    return payoff - baseline


def update_context_critic(critic, contexts, targets, epochs):
    return fit_critic(critic, contexts, targets, epochs)


def categorical_entropy(p):
    p = np.asarray(p, dtype=np.float64)
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


def ebm_objective(params, net: DenseNet, batch_contexts, index, logp_old, adv, beta, clip):
    """Clipped importance surrogate over executed contexts plus beta * entropy.

    The distribution is the softmax of the (clamped) energies over
    ``batch_contexts``; ``index`` picks the executed contexts and
    ``logp_old`` holds the old log-probabilities over the whole batch.
    """
    out, acts = net.forward_batch(batch_contexts, params)
    e = out[:, 0]
    inside = np.abs(e) < ENERGY_CLAMP
    ec = np.clip(e, -ENERGY_CLAMP, ENERGY_CLAMP)
    logp = ec - logsumexp(ec)
    p = np.exp(logp)
    ratio = np.exp(logp[index] - logp_old[index])
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    m = len(adv)
    H = float(-(p * logp).sum())
    J = float(np.minimum(unclipped, clipped).mean() + beta * H)
    g = np.where(unclipped <= clipped, unclipped, 0.0) / m
    dE = np.bincount(index, weights=g, minlength=len(e)) - g.sum() * p
    dE += -beta * p * (logp + H)
    dE = np.where(inside, dE, 0.0)
    grad, _ = net.backward(acts, dE[:, None], params)
    return J, grad, H


@dataclass
class ContextReport:
    surrogate: float
    entropy: float


def update_context_ebm(policy: MixturePolicy, snapshot: PolicySnapshot, o, env_contexts, batch: RolloutBatch,
                       advantages, cfg: UpdateConfig, adam: AdamState) -> ContextReport:
    """PPO-style update of expert ``o``'s energy network over the env batch."""
    if np.any(batch.batch_index < 0) or np.any(batch.batch_index >= len(env_contexts)):
        raise ValueError("executed records must index into the environment batch")
    net = policy.energies[o]
    e_old = snapshot.energy(o, env_contexts)
    logp_old = e_old - logsumexp(e_old)
    J, H = float("nan"), categorical_entropy(np.exp(logp_old))
    for epoch in range(cfg.ebm_epochs):
        J, g, H = ebm_objective(net.params, net, env_contexts, batch.batch_index, logp_old,
                                advantages, cfg.beta, cfg.ppo_clip)
        if not (math.isfinite(J) and np.all(np.isfinite(g))):
            raise UpdateAborted(f"non-finite energies (expert {o}, epoch {epoch})",
                                {"objective": J, "expert": o, "epoch": epoch})
        net.params, _ = adam_step(net.params, -g, adam)
    return ContextReport(J, H)
