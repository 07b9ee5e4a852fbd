import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from diskill.envs import GateEnv, ReacherConfig, ReacherEnv
from diskill.evaluation import (SeedRunSet, activity_map, cluster_modes, context_grid, curriculum_heatmap,
                                diversity_report, iqm, stratified_bootstrap_ci)
from diskill.nn import DenseNet, softplus_inv
from diskill.policy import Expert, MixturePolicy
from diskill.primitives import basis_matrix


def iqm_oracle(x):
    """Replicate every value four times, drop the n lowest and n highest copies, average the rest."""
    x = sorted(float(v) for v in x)
    n = len(x)
    rep = [v for v in x for _ in range(4)]
    kept = rep[n: 3 * n]
    return sum(kept) / len(kept)


# ------------------------------------------------------------------------ iqm

def test_iqm_examples():
    assert iqm(np.arange(1, 9)) == 4.5
    assert iqm([2.5] * 7) == 2.5
    with pytest.raises(ValueError):
        iqm([1, 2, 3])
    with pytest.raises(ValueError):
        iqm([1, 2, 3, np.nan])


@given(arrays(np.float64, st.integers(4, 40), elements=st.floats(-1e6, 1e6)))
def test_iqm_matches_oracle(x):
    assert iqm(x) == pytest.approx(iqm_oracle(x), rel=1e-12, abs=1e-9)


def test_iqm_permutation_invariant(rng):
    x = rng.normal(size=23)
    assert iqm(x) == iqm(rng.permutation(x))


# ------------------------------------------------------------------ bootstrap

def test_identical_seeds_zero_width():
    rs = SeedRunSet.from_array(np.tile(np.array([[1.0, 2.0, 3.0]]), (5, 1)))
    ci = stratified_bootstrap_ci(rs, n_boot=200)
    np.testing.assert_array_equal(ci.lo, ci.hi)
    np.testing.assert_array_equal(ci.point, [1.0, 2.0, 3.0])


def test_interval_contains_point(rng):
    rs = SeedRunSet.from_array(rng.normal(size=(8, 5)))
    ci = stratified_bootstrap_ci(rs, n_boot=500, rng=np.random.default_rng(3))
    assert np.all(ci.lo <= ci.point) and np.all(ci.point <= ci.hi)


def test_bootstrap_deterministic(rng):
    rs = SeedRunSet.from_array(rng.normal(size=(6, 4)))
    a = stratified_bootstrap_ci(rs, n_boot=300, rng=np.random.default_rng(1))
    b = stratified_bootstrap_ci(rs, n_boot=300, rng=np.random.default_rng(1))
    np.testing.assert_array_equal(a.lo, b.lo)
    np.testing.assert_array_equal(a.hi, b.hi)


def exhaustive_two_seed_oracle(a, b, level):
    # the four ordered resamples of two seeds have IQMs a, (a+b)/2, (a+b)/2, b
    reps = sorted([a, (a + b) / 2, (a + b) / 2, b])

    def pct(q):
        pos = q * (len(reps) - 1)
        i = int(np.floor(pos))
        j = min(i + 1, len(reps) - 1)
        return reps[i] + (pos - i) * (reps[j] - reps[i])

    return pct((1 - level) / 2), pct((1 + level) / 2)


def test_exhaustive_two_seed(rng):
    vals = rng.normal(size=(2, 6))
    ci = stratified_bootstrap_ci(SeedRunSet.from_array(vals), exhaustive=True, level=0.95)
    for t in range(6):
        lo, hi = exhaustive_two_seed_oracle(vals[0, t], vals[1, t], 0.95)
        assert ci.lo[t] == pytest.approx(lo, abs=1e-12)
        assert ci.hi[t] == pytest.approx(hi, abs=1e-12)


def test_exhaustive_enumeration_size():
    vals = np.arange(3.0)[:, None]
    rs = SeedRunSet.from_array(vals, strata=[0, 0, 1])
    from diskill.evaluation import _resample_indices
    idx = _resample_indices(rs.strata, 0, None, True)
    assert len(idx) == 4 * 1
    assert {tuple(r) for r in idx} == {(i, j, 2) for i, j in itertools.product((0, 1), repeat=2)}


def test_bootstrap_width_shrinks_with_seeds():
    widths = {4: [], 16: []}
    for rep in range(30):
        rng = np.random.default_rng(100 + rep)
        for n in widths:
            ci = stratified_bootstrap_ci(SeedRunSet.from_array(rng.normal(size=(n, 1))), n_boot=400, rng=rng)
            widths[n].append(ci.hi[0] - ci.lo[0])
    w4, w16 = np.array(widths[4]), np.array(widths[16])
    se = np.sqrt(w4.var() / 30 + w16.var() / 30)
    assert w4.mean() - w16.mean() > -4 * se
    assert w16.mean() < w4.mean()


def test_bootstrap_errors():
    with pytest.raises(ValueError):
        stratified_bootstrap_ci(SeedRunSet.from_array(np.ones((1, 3))))
    rs = SeedRunSet.from_array(np.ones((3, 3)))
    with pytest.raises(ValueError):
        stratified_bootstrap_ci(rs, iterations=[7])
    with pytest.raises(ValueError):
        stratified_bootstrap_ci(rs, metric="other")


def test_runset_mismatched_grids(tmp_path):
    from diskill.trainer import LOG_HEADER
    paths = []
    for i, its in enumerate(([1, 2], [1, 3])):
        p = tmp_path / f"s{i}.csv"
        rows = [",".join(LOG_HEADER)]
        for it in its:
            rows.append(",".join([str(it), "4", "-1.0", "0.0", "", "", "0.0"] + ["0.0"] * 7))
        p.write_text("\n".join(rows) + "\n")
        paths.append(str(p))
    with pytest.raises(ValueError, match="grid"):
        SeedRunSet.from_logs(paths, "mean_return")
    rs = SeedRunSet.from_logs(paths[:1], "mean_return")
    np.testing.assert_array_equal(rs.values, [[-1.0, -1.0]])


# ---------------------------------------------------------------- grids/maps

def _policy(K, energies=None, seed=0):
    rng = np.random.default_rng(seed)
    pol = MixturePolicy.create(K, 2, 10, rng, expert_hidden=(4,), energy_hidden=(8,))
    if energies is not None:
        for e in pol.energies:
            e.params[:] = rng.normal(size=e.params.size) * energies
    pol.estimate_log_z(rng.uniform(-1, 1, size=(200, 2)))
    return pol


def test_context_grid_valid():
    env = ReacherEnv(ReacherConfig(n_links=2, link_length=0.5))
    g = context_grid(env, 200)
    assert g.shape == (200, 2) and np.all(env.context_space.is_valid(g))
    gate = GateEnv()
    gg = context_grid(gate, 100)
    assert len(gg) >= 100 and not gate.in_hole(gg).any()


def test_activity_single_expert():
    am = activity_map(_policy(1), context_grid(ReacherEnv(), 50))
    np.testing.assert_array_equal(am.counts, 1)


def test_activity_counts_bounds_and_pigeonhole():
    pol = _policy(4, energies=2.0)
    grid = context_grid(ReacherEnv(), 300)
    am = activity_map(pol, grid, threshold=0.25)
    assert am.counts.dtype.kind == "i"
    assert np.all((am.counts >= 1) & (am.counts <= 4))
    am2 = activity_map(pol, grid, threshold=0.9)
    assert np.all((am2.counts >= 0) & (am2.counts <= 1))
    np.testing.assert_array_equal(activity_map(pol, grid, 0.25).counts, am.counts)


def test_heatmap_untrained_near_uniform(tmp_path):
    pol = _policy(3)
    grid = context_grid(ReacherEnv(), 100)
    hm = curriculum_heatmap(pol, grid, tmp_path)
    np.testing.assert_allclose(hm.probs.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(np.abs(hm.probs * 100 - 1.0) < 0.05)
    assert (tmp_path / "heatmap.csv").exists()
    svg = (tmp_path / "heatmap.svg").read_text()
    assert svg.startswith("<svg") and svg.count("<circle") == 300
    rows = np.loadtxt(tmp_path / "heatmap.csv", delimiter=",", skiprows=1)
    assert rows.shape == (300, 4)


def test_heatmap_riemann_refinement():
    pol = _policy(2, energies=1.5, seed=3)
    env = ReacherEnv()
    coarse, fine = context_grid(env, 1000), context_grid(env, 2000)
    pc, pf = curriculum_heatmap(pol, coarse).probs, curriculum_heatmap(pol, fine).probs
    assert pf.mean() == pytest.approx(pc.mean() / 2, rel=1e-12)
    for o in range(2):
        for region in (lambda g: g[:, 0] > 0, lambda g: g[:, 1] > 0.3, lambda g: np.hypot(*g.T) < 0.5):
            mc, mf = pc[o][region(coarse)].sum(), pf[o][region(fine)].sum()
            assert abs(mf - mc) <= 0.02 * mc


# ------------------------------------------------------------------ diversity

def _mirror_pair_policy(goal_r, K=2):
    """Hand-built policy whose experts reach an on-axis goal elbow-up and elbow-down."""
    env = ReacherEnv(ReacherConfig(n_links=2, link_length=0.5))
    q2 = 2 * np.arccos(goal_r)  # two equal links: r = cos(q2 / 2)
    Phi = basis_matrix(env.basis)
    A = Phi - Phi[:1]
    t = np.linspace(0, 1, env.cfg.horizon)
    s = np.clip(t / 0.6, 0, 1)
    ramp = s * s * (3 - 2 * s)
    experts, energies = [], []
    for sign in (1, -1)[:K]:
        w = np.concatenate([np.linalg.lstsq(A, -sign * q2 / 2 * ramp, rcond=None)[0],
                            np.linalg.lstsq(A, sign * q2 * ramp, rcond=None)[0]])
        net = DenseNet([2, 10], params=np.concatenate([np.zeros(20), w]))
        raw = np.zeros((10, 10))
        raw[np.diag_indices(10)] = softplus_inv(1e-3)
        experts.append(Expert(net, raw))
        energies.append(DenseNet([2, 1], params=np.zeros(3)))
    pol = MixturePolicy(experts, energies, np.zeros(K))
    return pol, env


def test_mirror_pair_two_modes(tmp_path):
    pol, env = _mirror_pair_policy(0.8)
    goal = np.array([[0.8, 0.0]])
    pol2, _ = _mirror_pair_policy(0.8)
    rep = diversity_report(pol, goal, samples_per_context=20, seed=0, env=env, out_dir=tmp_path)
    assert rep.n_modes[0] == 2
    assert rep.success_rate[0] == 1.0
    assert np.all(rep.expert_success == 1.0)
    assert (tmp_path / "diversity_0000.csv").exists() and (tmp_path / "diversity.csv").exists()
    again = diversity_report(pol2, goal, samples_per_context=20, seed=0, env=env)
    np.testing.assert_array_equal(again.n_modes, rep.n_modes)
    np.testing.assert_array_equal(again.expert_counts, rep.expert_counts)


def test_single_expert_one_mode():
    pol, env = _mirror_pair_policy(0.7, K=1)
    rep = diversity_report(pol, np.array([[0.7, 0.0]]), samples_per_context=10, seed=1, env=env)
    assert rep.n_modes[0] == 1 and rep.fraction_with_modes(2) == 0.0


def test_cluster_modes():
    rng = np.random.default_rng(0)
    two = np.r_[rng.normal(-0.5, 0.02, size=(10, 1)), rng.normal(0.5, 0.02, size=(10, 1))]
    labels = cluster_modes(two)
    assert len(set(labels)) == 2 and len(set(labels[:10])) == 1
    assert len(set(cluster_modes(rng.normal(0, 0.1, size=(20, 1))))) == 1
    assert len(set(cluster_modes(np.zeros((5, 1))))) == 1
