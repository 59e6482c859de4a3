import csv
import json

import numpy as np
import pytest
from scipy.special import expit

from oracles import random_profile

from codag import build_codag
from codag.dynamics import (
    ConvergenceMetrics, StepNoiseModel, StepRejected, TrajectoryRecord, convergence_metrics,
    entry_step, integrate_ode, martingale_increment, pbr_step, rate_schedule, rho, simulate,
    write_summary,
)
from codag.equilibrium import (
    choice_probabilities, conservation_violation, latency_to_go, propagate_flow, solve_convex,
)
from codag.exceptions import ConfigurationError, EstimationError
from codag.fixtures import chain, parallel_links

BETA = 10.0
NOISE = StepNoiseModel.uniform(1e-6, 0.1)


@pytest.fixture(scope="module")
def pair():
    return build_codag(parallel_links((1.0, 1.0), (1.0, 1.0)))


# step-size model

@pytest.mark.parametrize("args", [(0.0, 0.1), (0.2, 0.1), (-0.1, 0.1), (0.1, 0.1)])
def test_uniform_bounds_validated(args):
    with pytest.raises(ConfigurationError):
        StepNoiseModel.uniform(*args)


def test_noise_validation():
    with pytest.raises(ConfigurationError):
        StepNoiseModel(0.1, 0.2, "gamma")
    with pytest.raises(ConfigurationError):
        StepNoiseModel(0.1, 0.2, "degenerate")
    with pytest.raises(ConfigurationError):
        StepNoiseModel.uniform(0.1, 0.2, seed=-1)
    assert StepNoiseModel.degenerate(0.0).draw(3, 4).tolist() == [0.0] * 4


def test_draws_counter_based():
    a = NOISE.with_seed(7)
    x = a.draw(5, 6)
    assert np.all((x >= a.lower) & (x <= a.upper))
    # same (seed, step) gives the same draw whatever was drawn before
    a.draw(0, 6)
    np.testing.assert_array_equal(a.draw(5, 6), x)
    assert not np.array_equal(a.draw(6, 6), x)
    assert not np.array_equal(NOISE.with_seed(8).draw(5, 6), x)
    # node i's draw does not depend on how many nodes were drawn
    np.testing.assert_array_equal(a.draw(5, 3), x[:3])


def test_draw_moments():
    x = np.concatenate([NOISE.draw(n, 8) for n in range(5000)])
    assert abs(x.mean() - NOISE.mean) < 4 * 0.1 / np.sqrt(12 * len(x))
    assert x.var() == pytest.approx(0.1**2 / 12, rel=0.05)
    # successive steps are uncorrelated
    y = x.reshape(5000, 8)
    assert abs(np.corrcoef(y[:-1, 0], y[1:, 0])[0, 1]) < 0.06


def test_scaled_halves_mean():
    h = NOISE.scaled(0.5)
    assert h.mean == pytest.approx(NOISE.mean / 2) and h.kind == "uniform"


# rates

def test_rate_schedules(fig1):
    K = rate_schedule(fig1)
    assert np.all(K == 1)
    D = rate_schedule(fig1, "depth-scaled", ratio=10)
    depth = fig1.table.node_depth
    for i in range(fig1.n_nodes):
        for j in range(fig1.n_nodes):
            if depth[i] < depth[j]:
                assert D[i] < D[j]
    assert D[fig1.choice_nodes].max() == 1.0
    with pytest.raises(ConfigurationError):
        rate_schedule(fig1, "random")
    with pytest.raises(ConfigurationError):
        rate_schedule(fig1, "depth-scaled", ratio=1.0)
    with pytest.raises(ConfigurationError):
        NOISE.check_rates(np.array([1.0, 10.0]))


# drift and single steps

def test_rho_zero_at_equilibrium(fig1, fig1_eq):
    assert np.abs(rho(fig1, fig1_eq.xi, BETA)).max() <= 1e-9


def test_rho_trivial_cases(fig1, pair, rng):
    r = rho(fig1, random_profile(fig1, rng), BETA)
    single = [a for a in range(fig1.n_arcs) if len(fig1.out_arcs[fig1.tails[a]]) == 1]
    assert single and np.all(r[single] == 0)
    assert np.all(rho(pair, np.array([0.5, 0.5]), BETA) == 0)


def test_rho_vanishes_only_at_equilibrium(fig1, fig1_eq, rng):
    for _ in range(20):
        xi = random_profile(fig1, rng)
        assert np.abs(rho(fig1, xi, BETA)).max() > 1e-6
        assert np.linalg.norm(xi - fig1_eq.xi) > 1e-6


def test_pbr_stationary_cases(fig1, fig1_eq, rng):
    K = rate_schedule(fig1)
    eta = np.full(fig1.n_nodes, 0.05)
    np.testing.assert_allclose(pbr_step(fig1, fig1_eq.xi, eta, K, BETA), fig1_eq.xi, atol=1e-12)
    xi = random_profile(fig1, rng)
    np.testing.assert_array_equal(pbr_step(fig1, xi, np.zeros(fig1.n_nodes), K, BETA), xi)


def test_pbr_rate_violation(fig1, fig1_eq):
    with pytest.raises(ConfigurationError):
        pbr_step(fig1, fig1_eq.xi, np.full(fig1.n_nodes, 0.5), np.full(fig1.n_nodes, 2.0), BETA)


def test_pbr_convex_combination(fig1, rng):
    K = rate_schedule(fig1)
    for _ in range(20):
        xi = random_profile(fig1, rng)
        target = choice_probabilities(fig1, latency_to_go(fig1, propagate_flow(fig1, xi), BETA), BETA)
        new = pbr_step(fig1, xi, NOISE.draw(0, fig1.n_nodes), K, BETA)
        lo, hi = np.minimum(xi, target), np.maximum(xi, target)
        assert np.all(new >= lo - 1e-15) and np.all(new <= hi + 1e-15)
        sums = np.bincount(fig1.tail_arr, weights=new, minlength=fig1.n_nodes)[fig1.choice_nodes]
        np.testing.assert_allclose(sums, 1.0, atol=1e-14)


def test_symmetric_pair_scalar_oracle(pair):
    # xi_1 <- x + eta (sigmoid(-beta k1 g (2x - 1)) - x) for identical affine links
    beta, eta = 3.0, 0.2
    x = 0.9
    xi = np.array([0.9, 0.1])
    K = np.ones(pair.n_nodes)
    prev = abs(x - 0.5)
    for _ in range(40):
        x = x + eta * (expit(-beta * (2 * x - 1)) - x)
        xi = pbr_step(pair, xi, np.full(pair.n_nodes, eta), K, beta)
        assert xi[0] == pytest.approx(x, abs=1e-14)
        assert abs(xi[0] - 0.5) < prev
        prev = abs(xi[0] - 0.5)


# martingale part

def test_martingale_algebra(fig1, rng):
    xi = random_profile(fig1, rng)
    r = rho(fig1, xi, BETA)
    mu = NOISE.mean
    assert np.all(martingale_increment(fig1, xi, np.full(fig1.n_nodes, mu), mu, BETA) == 0)
    top = martingale_increment(fig1, xi, np.full(fig1.n_nodes, NOISE.upper), mu, BETA)
    np.testing.assert_allclose(top, (NOISE.upper / mu - 1) * r)
    batch = np.array([NOISE.draw(n, fig1.n_nodes) for n in range(5)])
    M = martingale_increment(fig1, xi, batch, mu, BETA)
    assert M.shape == (5, fig1.n_arcs)
    np.testing.assert_allclose(M[2], martingale_increment(fig1, xi, batch[2], mu, BETA))
    # update = mu * (rho + M)
    new = pbr_step(fig1, xi, batch[0], np.ones(fig1.n_nodes), BETA)
    np.testing.assert_allclose(new - xi, mu * (r + M[0]), atol=1e-15)
    with pytest.raises(ConfigurationError):
        martingale_increment(fig1, xi, batch[0], 0.0, BETA)


def test_martingale_mean_zero(fig1, rng):
    xi = random_profile(fig1, rng)
    eta = np.array([NOISE.with_seed(3).draw(n, fig1.n_nodes) for n in range(20_000)])
    M = martingale_increment(fig1, xi, eta, NOISE.mean, BETA)
    se = M.std(axis=0, ddof=1) / np.sqrt(len(M))
    live = se > 0
    assert np.all(np.abs(M.mean(axis=0)[live]) <= 4 * se[live])
    assert np.all(M.mean(axis=0)[~live] == 0)


# trajectories

def test_simulate_reproducible(fig1, fig1_eq):
    a = simulate(fig1, BETA, NOISE.with_seed(1), 50, eq=fig1_eq)
    b = simulate(fig1, BETA, NOISE.with_seed(1), 50, eq=fig1_eq)
    c = simulate(fig1, BETA, NOISE.with_seed(2), 50, eq=fig1_eq)
    np.testing.assert_array_equal(a.xi, b.xi)
    assert a.config_hash == b.config_hash != c.config_hash
    assert not np.array_equal(a.xi, c.xi)
    assert a.steps == 50 and a.xi.shape == (51, fig1.n_arcs)
    np.testing.assert_allclose(a.dist_sq, np.sum((a.xi - fig1_eq.xi) ** 2, axis=1))


def test_simulate_matches_manual_steps(fig1):
    tr = simulate(fig1, BETA, NOISE.with_seed(4), 10)
    K = rate_schedule(fig1)
    xi = tr.xi[0]
    for n in range(10):
        xi = pbr_step(fig1, xi, NOISE.with_seed(4).draw(n, fig1.n_nodes), K, BETA)
        np.testing.assert_allclose(tr.xi[n + 1], xi, atol=1e-15)


def test_constant_at_equilibrium(fig1, fig1_eq):
    tr = simulate(fig1, BETA, StepNoiseModel.degenerate(0.05), 30, xi0=fig1_eq.xi, eq=fig1_eq)
    assert np.abs(tr.xi - fig1_eq.xi).max() < 1e-12
    assert tr.dist_sq.max() < 1e-24


def test_zero_steps(fig1):
    tr = simulate(fig1, BETA, NOISE, 0)
    assert tr.xi.shape == (1, fig1.n_arcs) and tr.steps == 0


def test_trajectory_invariants(fig1):
    tr = simulate(fig1, BETA, NOISE.with_seed(11), 3000)
    for w in tr.w[::50]:
        assert conservation_violation(fig1, w) < 1e-12
    assert tr.w.min() > 0 and tr.w.max() <= 1 + 1e-12
    assert tr.xi.min() > 0 and tr.xi.max() <= 1 + 1e-12
    # lower bound from the worst-case latency-to-go C_z: every arc at full demand
    s_max = fig1.network.latencies_at(np.full(fig1.network.n_arcs, fig1.demand))
    C_z = max(s_max[list(r)].sum() for r in fig1.original_routes())
    bound = min(tr.xi[0].min(), np.exp(-2 * BETA * C_z) / fig1.n_arcs)
    assert tr.xi.min() >= bound


def test_simulate_rejects_bad_config(fig1):
    with pytest.raises(ConfigurationError):
        simulate(fig1, BETA, NOISE, -1)
    with pytest.raises(ConfigurationError):
        simulate(fig1, BETA, StepNoiseModel.uniform(0.1, 0.6), 5, rates=np.full(fig1.n_nodes, 2.0))
    with pytest.raises(ConfigurationError):
        simulate(fig1, BETA, NOISE, 5, xi0=np.zeros(fig1.n_arcs))
    with pytest.raises(ConfigurationError):
        simulate(fig1, BETA, NOISE, 5, rates=np.zeros(fig1.n_nodes))


def test_csv_layout(tmp_path, fig1, fig1_eq):
    tr = simulate(fig1, BETA, NOISE, 3, eq=fig1_eq)
    path = tmp_path / "t.csv"
    tr.write_csv(path)
    rows = list(csv.reader(open(path)))
    head = rows[0]
    assert head[0] == "step" and head[1] == "arc_0_w" and head[-2:] == ["F", "dist_sq"]
    assert head[1 + fig1.n_arcs] == "arc_0_xi"
    assert len(rows) == 5
    assert float(rows[2][-2]) == tr.F[1]


# ODE

def test_ode_stationary_at_equilibrium(fig1, fig1_eq):
    ode = integrate_ode(fig1, fig1_eq.xi, BETA, T=5.0, h=0.1)
    assert np.abs(ode.xi - fig1_eq.xi).max() < 1e-12


def test_ode_symmetric_pair(pair):
    ode = integrate_ode(pair, np.array([0.9, 0.1]), 3.0, T=10.0, h=0.05)
    dF = np.diff(ode.F)
    # strictly decreasing until F - F_min is below rounding
    resolvable = ode.F[:-1] - ode.F[-1] > 1e-13
    assert resolvable[:100].all() and np.all(dF[resolvable] < 0)
    assert dF.max() <= 1e-15
    np.testing.assert_allclose(ode.xi[-1], 0.5, atol=1e-4)
    # fourth order against a reference run at h/100
    fine = integrate_ode(pair, np.array([0.9, 0.1]), 3.0, T=10.0, h=0.0005)
    half = integrate_ode(pair, np.array([0.9, 0.1]), 3.0, T=10.0, h=0.025)
    err = np.abs(ode.xi - fine.xi[::100]).max()
    err_half = np.abs(half.xi[::2] - fine.xi[::100]).max()
    assert err < 1e-6 and 12 < err / err_half < 20


def test_ode_descent_and_limit(fig1, fig1_eq):
    ode = integrate_ode(fig1, None, BETA, T=50.0, h=0.05)
    assert np.diff(ode.F).max() <= 1e-9
    assert np.abs(ode.w[-1] - fig1_eq.w).max() < 1e-5
    depth = rate_schedule(fig1, "depth-scaled", ratio=10)
    slow = integrate_ode(fig1, None, BETA, T=20.0, h=0.02, rates=depth)
    assert np.diff(slow.F).max() <= 1e-9


def test_ode_coarse_step_rejected(pair):
    with pytest.raises(StepRejected):
        integrate_ode(pair, np.array([0.99, 0.01]), 20.0, T=40.0, h=3.0)
    with pytest.raises(ConfigurationError):
        integrate_ode(pair, None, 1.0, T=1.0, h=0.0)


def test_drift_lipschitz_witness(fig1, rng):
    worst = 0.0
    for _ in range(10_000):
        a, b = random_profile(fig1, rng), random_profile(fig1, rng)
        worst = max(worst, np.linalg.norm(rho(fig1, a, BETA) - rho(fig1, b, BETA))
                    / np.linalg.norm(a - b))
    print(f"empirical Lipschitz bound of rho on the five-node network: {worst:.3f}")
    assert np.isfinite(worst) and worst < 1e3


# metrics

def _pinned(eq, n=20, seed=0):
    xi = np.tile(eq.xi, (n + 1, 1))
    return TrajectoryRecord(xi, xi, np.zeros(n + 1), np.zeros(n + 1), seed)


def test_metrics_pinned(fig1_eq):
    m = convergence_metrics([_pinned(fig1_eq, seed=s) for s in range(3)], fig1_eq)
    assert m.mean_sq_dist == 0 and m.stderr == 0 and m.limsup == 0
    assert m.tail_prob(1e-12) == 0
    assert m.burn_in == 10


def test_metrics_on_runs(fig1, fig1_eq, tmp_path):
    runs = [simulate(fig1, BETA, NOISE.with_seed(s), 200, eq=fig1_eq) for s in range(4)]
    m = convergence_metrics(runs, fig1_eq, burn_in=20)
    manual = np.mean([r.dist_sq[20:].mean() for r in runs])
    assert m.mean_sq_dist == pytest.approx(manual)
    assert m.tail_prob(m.samples.max() * 2) == 0
    assert 0 < m.tail_prob(m.samples.min()) <= 1
    assert isinstance(m, ConvergenceMetrics) and len(m.per_seed) == 4
    write_summary(tmp_path / "s.json", m, {"seed": 0}, deltas=[1e-3])
    d = json.loads((tmp_path / "s.json").read_text())
    assert d["metrics"]["n_seeds"] == 4 and "0.001" in d["metrics"]["tail_prob"]


def test_metrics_need_samples(fig1_eq):
    with pytest.raises(EstimationError):
        convergence_metrics([_pinned(fig1_eq, n=4)], fig1_eq, burn_in=4)
    with pytest.raises(EstimationError):
        convergence_metrics([], fig1_eq)


def test_entry_step():
    d = np.array([5.0, 3.0, 0.5, 2.0, 0.5, 0.1, 0.1])
    assert entry_step(d, 1.0) == 4
    assert entry_step(d, 10.0) == 0
    assert entry_step(np.array([1.0, 2.0]), 0.5) is None


def test_chain_dynamics_trivial():
    g = build_codag(chain())
    tr = simulate(g, BETA, NOISE, 20)
    assert np.all(tr.xi == 1.0)
    eq = solve_convex(g, BETA)
    np.testing.assert_allclose(tr.w[-1], eq.w)
