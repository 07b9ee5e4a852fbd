"""Mixture of Gaussian experts with energy-based per-expert context distributions.

Per-expert context distributions are ``exp(phi_o(c)) / Z_o`` where ``Z_o`` is
estimated on a batch of environment contexts; the prior over experts is
uniform, so the gating follows from Bayes' rule without extra parameters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .envs import ContextBatch
from .nn import (DenseNet, GaussianParams, chol_from_raw, gaussian_entropy,
                 log_prob_and_grads, softplus_inv)

ENERGY_CLAMP = 30.0
LOG_FLOOR = -30.0


class StaleNormalizerError(RuntimeError):
    """Gating requested before the batch normalizers were estimated."""


@dataclass
class Expert:
    mean_net: DenseNet
    chol_raw: np.ndarray

    @property
    def chol(self):
        return chol_from_raw(self.chol_raw)

    @property
    def dim(self):
        return self.mean_net.out_dim

    def mean(self, contexts):
        return self.mean_net(contexts)

    def gaussian(self, c) -> GaussianParams:
        return GaussianParams(self.mean_net(np.asarray(c, dtype=np.float64)), self.chol)

    def log_prob(self, contexts, thetas):
        logp, _, _, _ = log_prob_and_grads(self.mean(np.atleast_2d(contexts)), self.chol, thetas)
        return logp

    def entropy(self):
        return gaussian_entropy(GaussianParams(np.zeros(self.dim), self.chol))

    # flat view used by the optimizer: mean-net parameters then tril(chol_raw)
    def flat(self):
        return np.concatenate([self.mean_net.params, self.chol_raw[np.tril_indices(self.dim)]])

    def set_flat(self, v):
        n = self.mean_net.params.size
        self.mean_net.params[:] = v[:n]
        raw = np.zeros((self.dim, self.dim))
        raw[np.tril_indices(self.dim)] = v[n:]
        self.chol_raw = raw

    def copy(self):
        return Expert(self.mean_net.copy(), self.chol_raw.copy())


class MixturePolicy:
    def __init__(self, experts, energies, log_z=None):
        if len(experts) < 1 or len(experts) != len(energies):
            raise ValueError("need K >= 1 experts and as many energy nets")
        dims = {e.dim for e in experts}
        if len(dims) != 1:
            raise ValueError("all experts must share the MP parameter dimension")
        self.experts = list(experts)
        self.energies = list(energies)
        self.log_z = None if log_z is None else np.asarray(log_z, dtype=np.float64)

    @classmethod
    def create(cls, n_experts, context_dim, param_dim, rng, expert_hidden=(32, 32),
               energy_hidden=(16, 16), init_std=1.0):
        experts, energies = [], []
        raw = np.zeros((param_dim, param_dim))
        raw[np.diag_indices(param_dim)] = softplus_inv(init_std)
        for _ in range(n_experts):
            net = DenseNet([context_dim, *expert_hidden, param_dim], rng=rng)
            experts.append(Expert(net, raw.copy()))
            energies.append(DenseNet([context_dim, *energy_hidden, 1], rng=rng))
        return cls(experts, energies)

    @property
    def n_experts(self):
        return len(self.experts)

    @property
    def param_dim(self):
        return self.experts[0].dim

    @property
    def context_dim(self):
        return self.experts[0].mean_net.in_dim

    @property
    def prior(self):
        return np.full(self.n_experts, 1.0 / self.n_experts)

    def copy(self):
        return MixturePolicy([e.copy() for e in self.experts], [n.copy() for n in self.energies],
                             None if self.log_z is None else self.log_z.copy())

    def snapshot(self) -> "PolicySnapshot":
        return PolicySnapshot(self)

    # ------------------------------------------------------------ energies
    def energy(self, o, contexts):
        e = self.energies[o](np.atleast_2d(contexts))[:, 0]
        if not np.all(np.isfinite(e)):
            raise FloatingPointError(f"non-finite energies for expert {o}")
        return np.clip(e, -ENERGY_CLAMP, ENERGY_CLAMP)

    def energy_all(self, contexts):
        return np.stack([self.energy(o, contexts) for o in range(self.n_experts)])

    def estimate_log_z(self, batch):
        C = batch.contexts if isinstance(batch, ContextBatch) else np.atleast_2d(batch)
        E = self.energy_all(C)
        self.log_z = logsumexp(E, axis=1) - np.log(len(C))
        return self.log_z

    # ---------------------------------------------------------- probability
    def _require_log_z(self):
        if self.log_z is None or len(self.log_z) != self.n_experts:
            raise StaleNormalizerError("log-normalizer estimates are missing; estimate them on a context batch first")

    def log_gating_all(self, contexts):
        """``(B, K)`` matrix of log pi(o|c)."""
        self._require_log_z()
        s = self.energy_all(np.atleast_2d(contexts)).T - self.log_z[None, :]
        return s - logsumexp(s, axis=1, keepdims=True)

    def expert_log_probs(self, contexts, thetas):
        """``(B, K)`` matrix of log pi(theta|c,o)."""
        C = np.atleast_2d(contexts)
        return np.stack([e.log_prob(C, thetas) for e in self.experts], axis=1)

    def log_responsibilities(self, contexts, thetas):
        s = self.expert_log_probs(contexts, thetas) + self.log_gating_all(contexts)
        return s - logsumexp(s, axis=1, keepdims=True)

    def mixture_log_prob(self, contexts, thetas):
        s = self.expert_log_probs(contexts, thetas) + self.log_gating_all(contexts)
        return logsumexp(s, axis=1)


class PolicySnapshot(MixturePolicy):
    """Frozen deep copy of a policy; the ``old`` distributions of an iteration."""

    def __init__(self, policy: MixturePolicy):
        src = policy.copy()
        super().__init__(src.experts, src.energies, src.log_z)
        for e in self.experts:
            e.mean_net.params.setflags(write=False)
            e.chol_raw.setflags(write=False)
        for n in self.energies:
            n.params.setflags(write=False)
        if self.log_z is not None:
            self.log_z.setflags(write=False)
        self._frozen = True

    def __setattr__(self, key, value):
        if getattr(self, "_frozen", False):
            raise AttributeError("PolicySnapshot is immutable")
        super().__setattr__(key, value)

    def estimate_log_z(self, batch):
        raise AttributeError("PolicySnapshot is immutable")

    def __deepcopy__(self, memo):
        return PolicySnapshot(self)


# ------------------------------------------------------------ free functions

def _check_expert(policy, o):
    if not 0 <= o < policy.n_experts:
        raise IndexError(f"expert index {o} out of range for K={policy.n_experts}")


def curriculum_probs(policy: MixturePolicy, o, batch):
    """Softmax of expert ``o``'s energies over the batch; refreshes its log Z."""
    _check_expert(policy, o)
    C = batch.contexts if isinstance(batch, ContextBatch) else np.atleast_2d(batch)
    e = policy.energy(o, C)
    lse = logsumexp(e)
    if policy.log_z is None or len(policy.log_z) != policy.n_experts:
        policy.log_z = np.zeros(policy.n_experts)
    policy.log_z[o] = lse - np.log(len(C))
    return np.exp(e - lse)


def sample_training_contexts(policy, o, batch, m, rng, return_index=False):
    """``m`` draws with replacement from expert ``o``'s curriculum over the batch."""
    if m < 1:
        raise ValueError("m must be >= 1")
    C = batch.contexts if isinstance(batch, ContextBatch) else np.atleast_2d(batch)
    p = curriculum_probs(policy, o, C)
    cdf = np.cumsum(p)
    idx = np.minimum(np.searchsorted(cdf, rng.random(m) * cdf[-1], side="right"), len(C) - 1)
    return (C[idx], idx) if return_index else C[idx]


def expert_sample(policy, o, c, rng):
    _check_expert(policy, o)
    e = policy.experts[o]
    C = np.atleast_2d(c)
    th = e.mean(C) + rng.standard_normal((len(C), e.dim)) @ e.chol.T
    return th[0] if np.ndim(c) == 1 else th


def expert_log_prob(policy, o, c, theta):
    _check_expert(policy, o)
    lp = policy.experts[o].log_prob(np.atleast_2d(c), np.atleast_2d(theta))
    return float(lp[0]) if np.ndim(theta) == 1 else lp


def expert_entropy(policy, o):
    _check_expert(policy, o)
    return policy.experts[o].entropy()


def gating(policy, c, o=None):
    """pi(o|c) for one context (scalar) or all experts (vector) if ``o`` is None."""
    g = np.exp(policy.log_gating_all(np.atleast_2d(c))[0])
    return g if o is None else float(g[o])


def gating_variational(snapshot: PolicySnapshot, c, o=None):
    return gating(snapshot, c, o)


def responsibilities(snapshot: PolicySnapshot, c, theta):
    return np.exp(snapshot.log_responsibilities(np.atleast_2d(c), np.atleast_2d(theta))[0])


def act(policy, c, rng, deterministic=False):
    """Inference: choose an expert from the gating, then MP parameters."""
    g = gating(policy, c)
    if deterministic:
        o = int(np.argmax(g))  # argmax returns the lowest index on ties
        theta = policy.experts[o].mean(np.atleast_2d(c))[0]
    else:
        o = int(min(np.searchsorted(np.cumsum(g), rng.random() * g.sum(), side="right"), len(g) - 1))
        theta = expert_sample(policy, o, np.asarray(c, dtype=np.float64), rng)
    return o, theta


def act_batch(policy, contexts, rng, deterministic=False):
    """Vectorized :func:`act` over a context batch."""
    C = np.atleast_2d(contexts)
    G = np.exp(policy.log_gating_all(C))
    if deterministic:
        o = np.argmax(G, axis=1)
    else:
        u = rng.random(len(C)) * G.sum(axis=1)
        o = np.minimum((np.cumsum(G, axis=1) <= u[:, None]).sum(axis=1), policy.n_experts - 1)
    thetas = np.empty((len(C), policy.param_dim))
    for k in np.unique(o):
        sel = o == k
        e = policy.experts[k]
        mu = e.mean(C[sel])
        if deterministic:
            thetas[sel] = mu
        else:
            thetas[sel] = mu + rng.standard_normal(mu.shape) @ e.chol.T
    return o, thetas


def floor_log(x):
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(x), LOG_FLOOR)


__all__ = [
    "Expert", "MixturePolicy", "PolicySnapshot", "StaleNormalizerError",
    "curriculum_probs", "sample_training_contexts", "expert_sample", "expert_log_prob",
    "expert_entropy", "gating", "gating_variational", "responsibilities", "act",
    "act_batch", "floor_log",
]
