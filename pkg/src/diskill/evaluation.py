"""Post-hoc analysis: IQM with bootstrap intervals, activity maps, curriculum heat maps, diversity reports."""
from __future__ import annotations

import csv
import glob as globmod
import itertools
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .envs import Environment, ReacherEnv
from .policy import MixturePolicy, act_batch
from .trainer import Trainer, read_log

DEFAULT_ACTIVITY_THRESHOLD = 0.2


# ---------------------------------------------------------------------- iqm

def _trim_counts(n):
    """Integer weights of the sorted values after replicating each 4 times and keeping ``[n, 3n)``."""
    starts = 4 * np.arange(n)
    return np.clip(np.minimum(starts + 4, 3 * n) - np.maximum(starts, n), 0, None)


def _iqm(values):
    x = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = x.size
    return float((_trim_counts(n) * x).sum() / (2 * n))


def iqm(values):
    """Interquartile mean with fractional trimming at the quartile boundaries.

    The lowest and highest 25% of the mass are dropped; when ``n`` is not a
    multiple of 4 the boundary values enter with partial weight.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size < 4:
        raise ValueError(f"iqm needs at least 4 values, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("iqm of non-finite values")
    return _iqm(x)


# ---------------------------------------------------------------- bootstrap

@dataclass
class SeedRunSet:
    """Per-seed values of one metric on a shared iteration grid."""

    paths: list
    metric: str
    iterations: np.ndarray
    values: np.ndarray  # (n_seeds, n_iterations)
    strata: np.ndarray | None = None

    @property
    def n_seeds(self):
        return self.values.shape[0]

    @classmethod
    def from_logs(cls, paths, metric, strata=None):
        if isinstance(paths, str):
            paths = sorted(globmod.glob(paths))
        if not paths:
            raise ValueError("no log files")
        grids, rows = [], []
        for p in paths:
            recs = [r for r in read_log(p) if r[metric] is not None]
            if not recs:
                raise ValueError(f"{p}: metric {metric!r} never logged")
            grids.append(np.array([r["iteration"] for r in recs]))
            vals = [np.mean(r[metric]) if isinstance(r[metric], list) else r[metric] for r in recs]
            rows.append(np.asarray(vals, dtype=np.float64))
        for p, g in zip(paths, grids):
            if not np.array_equal(g, grids[0]):
                raise ValueError(f"{p}: iteration grid differs from {paths[0]}")
        return cls(list(paths), metric, grids[0], np.stack(rows),
                   None if strata is None else np.asarray(strata))

    @classmethod
    def from_array(cls, values, iterations=None, metric="value", strata=None):
        v = np.atleast_2d(np.asarray(values, dtype=np.float64))
        it = np.arange(1, v.shape[1] + 1) if iterations is None else np.asarray(iterations)
        if len(it) != v.shape[1]:
            raise ValueError("iteration grid does not match the value matrix")
        return cls([], metric, it, v, None if strata is None else np.asarray(strata))


@dataclass
class BootstrapCI:
    iterations: np.ndarray
    point: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "iqm", "ci_low", "ci_high"])
            for row in zip(self.iterations, self.point, self.lo, self.hi):
                w.writerow([int(row[0])] + [repr(float(x)) for x in row[1:]])


def _resample_indices(strata, n_boot, rng, exhaustive):
    """Rows of seed indices; resampling happens within each stratum."""
    groups = [np.flatnonzero(strata == s) for s in np.unique(strata)]
    if exhaustive:
        per_group = [list(itertools.product(g, repeat=len(g))) for g in groups]
        return np.array([np.concatenate(parts) for parts in itertools.product(*per_group)])
    cols = [g[rng.integers(0, len(g), size=(n_boot, len(g)))] for g in groups]
    return np.concatenate(cols, axis=1)


def stratified_bootstrap_ci(runset: SeedRunSet, metric=None, iterations=None, n_boot=2000, level=0.95,
                            rng=None, exhaustive=False) -> BootstrapCI:
    """Percentile bootstrap interval of the IQM across seeds, per iteration.

    Seeds are resampled with replacement (within strata when given). With
    ``exhaustive=True`` every ordered resample is enumerated once instead.
    """
    if metric is not None and metric != runset.metric:
        raise ValueError(f"run set holds {runset.metric!r}, not {metric!r}")
    if runset.n_seeds < 2:
        raise ValueError("bootstrap needs at least 2 seeds")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    cols = np.arange(len(runset.iterations))
    if iterations is not None:
        want = np.asarray(iterations)
        missing = np.setdiff1d(want, runset.iterations)
        if missing.size:
            raise ValueError(f"iterations {missing.tolist()} not on the run set's grid")
        cols = np.searchsorted(runset.iterations, want)
    rng = np.random.default_rng(0) if rng is None else rng
    strata = np.zeros(runset.n_seeds, dtype=int) if runset.strata is None else runset.strata
    idx = _resample_indices(strata, n_boot, rng, exhaustive)
    q = 100.0 * np.array([(1 - level) / 2, (1 + level) / 2])
    point, lo, hi = [], [], []
    for c in cols:
        v = runset.values[:, c]
        reps = np.array([_iqm(v[r]) for r in idx])
        point.append(_iqm(v))
        a, b = np.percentile(reps, q)
        lo.append(a)
        hi.append(b)
    return BootstrapCI(runset.iterations[cols], np.array(point), np.array(lo), np.array(hi))


# ------------------------------------------------------------------- grids

def context_grid(env: Environment, n):
    """About ``n`` well-spread valid contexts.

    The reacher gets a sunflower (Vogel) spiral filling its disk; other
    environments a lattice over their box, filtered for validity.
    """
    if n < 1:
        raise ValueError("grid needs at least one point")
    if isinstance(env, ReacherEnv):
        k = np.arange(n) + 0.5
        r = env.reach * np.sqrt(k / n)
        phi = k * math.pi * (3.0 - math.sqrt(5.0))
        return np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1)
    sp = env.context_space
    low, high = np.asarray(sp.low, float), np.asarray(sp.high, float)
    per = max(2, int(math.ceil(n ** (1.0 / sp.dim))))
    while True:
        axes = [np.linspace(l, h, per) for l, h in zip(low, high)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, sp.dim)
        pts = pts[sp.is_valid(pts)]
        if len(pts) >= n or per > 200:
            return pts
        per += 1


def _load(checkpoint):
    if isinstance(checkpoint, Trainer):
        return checkpoint
    return Trainer.from_checkpoint(checkpoint)


def _policy(checkpoint) -> MixturePolicy:
    if isinstance(checkpoint, MixturePolicy):
        return checkpoint
    return _load(checkpoint).policy


# ------------------------------------------------------------ activity map

@dataclass
class ActivityMap:
    contexts: np.ndarray
    counts: np.ndarray
    threshold: float
    n_experts: int

    def fraction_at_least(self, k):
        return float(np.mean(self.counts >= k))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"c{i + 1}" for i in range(self.contexts.shape[1])] + ["active_experts"])
            for c, k in zip(self.contexts, self.counts):
                w.writerow([repr(float(x)) for x in c] + [int(k)])


def activity_map(checkpoint, context_grid, threshold=DEFAULT_ACTIVITY_THRESHOLD) -> ActivityMap:
    """Count, per grid context, the experts whose gating reaches ``threshold``."""
    policy = _policy(checkpoint)
    C = np.atleast_2d(np.asarray(context_grid, dtype=np.float64))
    G = np.exp(policy.log_gating_all(C))
    counts = (G >= threshold).sum(axis=1).astype(np.int64)
    return ActivityMap(C, counts, float(threshold), policy.n_experts)


# ---------------------------------------------------------------- heat map

@dataclass
class Heatmap:
    contexts: np.ndarray
    probs: np.ndarray  # (K, n_grid)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["expert"] + [f"c{i + 1}" for i in range(self.contexts.shape[1])] + ["p"])
            for o, row in enumerate(self.probs):
                for c, p in zip(self.contexts, row):
                    w.writerow([o] + [repr(float(x)) for x in c] + [repr(float(p))])

    def to_svg(self, path, size=400):
        """Per-expert dots over the first two context dims, opacity proportional to probability."""
        palette = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"]
        xy = self.contexts[:, :2] if self.contexts.shape[1] >= 2 else np.c_[self.contexts[:, 0], np.zeros(len(self.contexts))]
        lo, hi = xy.min(axis=0), xy.max(axis=0)
        span = np.where(hi - lo > 0, hi - lo, 1.0)
        pix = 20 + (xy - lo) / span * (size - 40)
        pix[:, 1] = size - pix[:, 1]
        r = max(2.0, 0.5 * (size - 40) / math.sqrt(len(xy)))
        lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
                 f"<!-- curriculum heat map: {self.probs.shape[0]} experts, {len(xy)} contexts; data in CSV -->",
                 f'<rect width="{size}" height="{size}" fill="white"/>']
        for o, row in enumerate(self.probs):
            top = row.max() if row.max() > 0 else 1.0
            col = palette[o % len(palette)]
            lines.append(f'<g fill="{col}">')
            for (x, y), p in zip(pix, row):
                lines.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="{r:.1f}" fill-opacity="{0.6 * p / top:.3f}"/>')
            lines.append("</g>")
        lines.append("</svg>")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def curriculum_heatmap(checkpoint, context_grid, out_dir=None) -> Heatmap:
    """Each expert's curriculum distribution restricted to the grid."""
    policy = _policy(checkpoint)
    C = np.atleast_2d(np.asarray(context_grid, dtype=np.float64))
    E = policy.energy_all(C)
    P = np.exp(E - logsumexp(E, axis=1, keepdims=True))
    hm = Heatmap(C, P)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        hm.to_csv(os.path.join(out_dir, "heatmap.csv"))
        hm.to_svg(os.path.join(out_dir, "heatmap.svg"))
    return hm


# --------------------------------------------------------------- diversity

def cluster_modes(descriptors, max_k=4, min_silhouette=0.75, seed=0):
    """Cluster labels for behaviors without a discrete mode key.

    k is picked by silhouette score among 2..max_k; a single cluster wins
    unless some k beats ``min_silhouette``.
    """
    X = np.atleast_2d(np.asarray(descriptors, dtype=np.float64))
    if len(X) < 3 or np.allclose(X, X[0]):
        return np.zeros(len(X), dtype=int)
    from sklearn.cluster import KMeans
    from sklearn.metrics import silhouette_score

    best, best_s = np.zeros(len(X), dtype=int), min_silhouette
    for k in range(2, min(max_k, len(X) - 1) + 1):
        labels = KMeans(n_clusters=k, n_init=10, random_state=seed).fit_predict(X)
        if len(np.unique(labels)) < 2:
            continue
        s = silhouette_score(X, labels)
        if s > best_s:
            best, best_s = labels, s
    return best


@dataclass
class DiversityReport:
    contexts: np.ndarray
    n_modes: np.ndarray  # distinct successful modes per context
    success_rate: np.ndarray  # per context
    expert_success: np.ndarray  # per expert, nan if never chosen
    expert_counts: np.ndarray
    samples: list = field(default_factory=list)

    def fraction_with_modes(self, k=2):
        return float(np.mean(self.n_modes >= k))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"c{i + 1}" for i in range(self.contexts.shape[1])] + ["success_rate", "n_modes"])
            for c, s, m in zip(self.contexts, self.success_rate, self.n_modes):
                w.writerow([repr(float(x)) for x in c] + [repr(float(s)), int(m)])


def diversity_report(checkpoint, contexts, samples_per_context=20, seed=0, out_dir=None,
                     env: Environment | None = None) -> DiversityReport:
    """Sample the stochastic policy repeatedly per context and count distinct successful behaviors.

    Reacher modes are joint sign patterns (elbow up/down and their
    generalization); other environments cluster a behavior descriptor.
    """
    if isinstance(checkpoint, MixturePolicy):
        if env is None:
            raise ValueError("a bare policy needs an environment")
        policy = checkpoint
    else:
        tr = _load(checkpoint)
        policy, env = tr.policy, env or tr.env
    C = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    S = int(samples_per_context)
    rng = np.random.default_rng(seed)
    K = policy.n_experts
    hits, counts = np.zeros(K), np.zeros(K)
    n_modes, rates, samples = [], [], []
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    for i, c in enumerate(C):
        rep = np.repeat(c[None, :], S, axis=0)
        o, th = act_batch(policy, rep, rng, deterministic=False)
        res = env.evaluate_batch(rep, th, trace=out_dir is not None)
        np.add.at(counts, o, 1)
        np.add.at(hits, o, res.success.astype(float))
        keys = [env.mode_key(res, j) for j in range(S)]
        if keys[0] is None:
            labels = cluster_modes(env.behavior_descriptor(res), seed=seed)
            keys = [int(x) for x in labels]
        modes = {keys[j] for j in range(S) if res.success[j]}
        n_modes.append(len(modes))
        rates.append(float(res.success.mean()))
        samples.append({"experts": o, "thetas": th, "success": res.success, "modes": keys})
        if out_dir is not None:
            _dump_traces(os.path.join(out_dir, f"diversity_{i:04d}.csv"), res, o, keys)
    with np.errstate(invalid="ignore", divide="ignore"):
        expert_success = np.where(counts > 0, hits / np.maximum(counts, 1), np.nan)
    rep = DiversityReport(C, np.array(n_modes), np.array(rates), expert_success, counts, samples)
    if out_dir is not None:
        rep.to_csv(os.path.join(out_dir, "diversity.csv"))
    return rep


def _dump_traces(path, res, experts, keys):
    trace = res.extra.get("tip_trace")
    if trace is None:
        trace = res.extra.get("trace")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "expert", "success", "mode", "step", "x", "y"])
        if trace is None:
            return
        for j in range(len(experts)):
            mode = "/".join(str(v) for v in keys[j]) if isinstance(keys[j], tuple) else str(keys[j])
            for t, (x, y) in enumerate(trace[j, :, :2]):
                w.writerow([j, int(experts[j]), int(res.success[j]), mode, t, f"{x:.6g}", f"{y:.6g}"])


__all__ = [
    "iqm", "SeedRunSet", "BootstrapCI", "stratified_bootstrap_ci", "context_grid",
    "ActivityMap", "activity_map", "Heatmap", "curriculum_heatmap", "cluster_modes",
    "DiversityReport", "diversity_report", "DEFAULT_ACTIVITY_THRESHOLD",
]
