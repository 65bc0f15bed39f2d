"""End-to-end acceptance suite.

Each test prints one PASS/FAIL line tagged with its criterion number.
The early criteria are fast oracles (gradients, martingale pricing,
implied-vol round trips, reward identities, interpolation exactness,
Bermudan pricing against a lattice). The late criteria run full
calibrations and are slow by nature; the whole module is sized to finish
in a couple of hours on one core:

  1  gradient oracles vs central finite differences
  2  martingale and ATM repricing under a constant-vol policy
  3  implied-vol round trip
  4  shaped vs sparse reward telescoping
  5  reward invariance under trajectory permutations
  6  exploration interpolation node exactness
  7  AMC Bermudan vs binomial lattice
  8  flat-smile calibration to 0.5 vol points
  9  skewed-smile calibration to 1.0 vol point RMSE
 10  path-dependent state lowers the Bermudan switch value
 11  learned vol monotonicity in ln S_t1 and ln S_t
 12  bandit sanity of the PPO stack

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines as
they complete.
"""
from __future__ import annotations

import math
import time

import numpy as np
import pytest
from scipy import stats

from marlvol import engine, game, market, nets, pricing, trainer
from conftest import central_fd, rel_err

DT = 1.0 / 252.0
GRID_DAYS = (11, 21, 36, 51)
GRID_STRIKES = (0.95, 1.0, 1.05)


def _report(num, name, ok, detail):
    line = (f"criterion {num:02d} {name}: "
            f"{'PASS' if ok else 'FAIL'} ({detail})")
    print(line, flush=True)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. Gradient oracles
# ---------------------------------------------------------------------------

def _mlp_fixture(rng):
    sizes = [int(rng.integers(2, 5)) for _ in range(int(rng.integers(2, 4)))]
    net = nets.mlp_init(tuple(sizes), rng)
    x = rng.standard_normal((3, sizes[0]))
    w = rng.standard_normal((3, sizes[-1]))

    def loss():
        return float(np.sum(nets.mlp_forward(net, x) * w))

    out, cache = nets.mlp_forward_cached(net, x)
    analytic, _ = nets.mlp_backward(net, cache, w)
    return loss, net.arrays, analytic


def _policy_fixture(rng):
    sd = int(rng.integers(2, 5))
    ad = int(rng.integers(1, 3))
    dep = bool(rng.integers(0, 2))
    policy = nets.policy_init(sd, ad, (6,), rng,
                              mean_bias=rng.normal(scale=0.5, size=ad),
                              log_std_bias=-1.2,
                              state_dependent_std=dep)
    states = rng.standard_normal((4, sd))
    actions = rng.normal(scale=0.4, size=(4, ad))
    w = rng.standard_normal(4)

    def loss():
        mean, log_std = nets.policy_head_mean_std(policy, states)
        return float(np.sum(w * nets.gaussian_log_prob(mean, log_std,
                                                       actions)))

    mean, log_std, cache = nets.policy_head(policy, states)
    d_mean, d_log_std = nets.gaussian_log_prob_grads(mean, log_std, actions)
    analytic = nets.policy_head_backward(policy, cache, w[:, None] * d_mean,
                                         w[:, None] * d_log_std)
    return loss, policy.arrays, analytic


def _value_fixture(rng):
    sd = int(rng.integers(2, 5))
    net = nets.mlp_init((sd, 6, 1), rng)
    states = rng.standard_normal((5, sd))
    targets = rng.standard_normal((5, 1))

    def loss():
        return float(np.mean((nets.mlp_forward(net, states) - targets) ** 2))

    out, cache = nets.mlp_forward_cached(net, states)
    analytic, _ = nets.mlp_backward(net, cache,
                                    2.0 * (out - targets) / targets.size)
    return loss, net.arrays, analytic


def test_criterion_01_gradient_oracles():
    rng = np.random.default_rng(0xC1)
    t0 = time.time()
    worst = 0.0
    count = 0
    for builder, reps in ((_mlp_fixture, 40), (_policy_fixture, 30),
                          (_value_fixture, 30)):
        for _ in range(reps):
            loss, arrays, analytic = builder(rng)
            fd = central_fd(loss, arrays, h=1e-6)
            worst = max(worst, rel_err(analytic, fd, floor=1e-3))
            count += 1
    ok = worst < 1e-4
    _report(1, "gradient oracles", ok,
            f"{count} fixtures, worst rel err {worst:.2e}, "
            f"{time.time() - t0:.0f}s")


# ---------------------------------------------------------------------------
# 2. Martingale and ATM repricing
# ---------------------------------------------------------------------------

def test_criterion_02_martingale_and_atm_pricing():
    config = engine.SimConfig(n=200_000, steps=51, runs=1, seed=2,
                              t1_step=21, t2_step=51, sigma_init=0.2)
    episode = engine.simulate_episode(config, None, fixed_vol=0.2,
                                      store_actions=False)
    s_t = episode.spots[0, -1]
    drift_gap = abs(float(s_t.mean()) - 1.0)
    drift_se = float(s_t.std(ddof=1)) / math.sqrt(s_t.size)

    t_years = 51 * DT
    price, se = pricing.mc_vanilla_price(s_t, 1.0)
    iv = market.implied_vol(price, 1.0, 1.0, t_years)
    iv_se = se / market.bs_vega(1.0, 1.0, t_years, iv)
    iv_gap = abs(iv - 0.2)

    ok = drift_gap < 4.0 * drift_se and iv_gap < 3.0 * iv_se
    _report(2, "martingale and ATM repricing", ok,
            f"mean gap {drift_gap:.2e} vs 4se {4 * drift_se:.2e}, "
            f"iv gap {iv_gap:.2e} vs 3se {3 * iv_se:.2e}")


# ---------------------------------------------------------------------------
# 3. Implied-vol round trip
# ---------------------------------------------------------------------------

def test_criterion_03_implied_vol_round_trip():
    rng = np.random.default_rng(0xC3)
    n = 10_000
    vols = rng.uniform(0.05, 1.5, n)
    mats = rng.uniform(0.05, 1.5, n)
    strikes = np.exp(rng.uniform(-1.0, 1.0, n) * 4.0 * vols
                     * np.sqrt(mats))
    worst = 0.0
    for sigma, t, k in zip(vols, mats, strikes):
        price = market.bs_call_price(1.0, k, t, sigma)
        worst = max(worst, abs(market.implied_vol(price, 1.0, k, t) - sigma))
    ok = worst < 1e-8
    _report(3, "implied-vol round trip", ok,
            f"{n} quotes, worst abs err {worst:.2e}")


# ---------------------------------------------------------------------------
# 4. Telescoping identity
# ---------------------------------------------------------------------------

def _random_bermudan_spec(rng, steps):
    t1 = int(rng.integers(2, steps - 1))
    t2 = int(rng.integers(t1 + 1, steps + 1))
    bspec = pricing.BermudanSpec(t1_step=t1, t2_step=t2, k1=1.0,
                                 k2=float(rng.uniform(1.0, 1.05)))
    quotes = tuple(
        market.VanillaQuote(t_days=int(d), strike=float(rng.uniform(0.9,
                                                                    1.1)),
                            target_iv=float(rng.uniform(0.15, 0.3)))
        for d in rng.choice(np.arange(1, steps + 1), size=2, replace=False))
    e_ref = rng.uniform(0.0, 1e-4, steps + 1)
    return bspec, quotes, e_ref


def test_criterion_04_telescoping_identity():
    rng = np.random.default_rng(0xC4)
    worst = 0.0
    for case in range(20):
        steps = int(rng.integers(6, 13))
        bspec, quotes, e_ref = _random_bermudan_spec(rng, steps)
        config = engine.SimConfig(
            n=int(rng.integers(40, 101)), steps=steps,
            runs=int(rng.integers(1, 3)), seed=case,
            t1_step=bspec.t1_step, t2_step=bspec.t2_step,
            sigma_init=float(rng.uniform(0.1, 0.4)))
        episode = engine.simulate_episode(config, None,
                                          fixed_vol=config.sigma_init)
        kwargs = dict(quotes=quotes, bermudan=bspec, bermudan_weight=1.0,
                      bermudan_target_iv=float(rng.uniform(0.15, 0.3)),
                      e_ref=e_ref, delta=DT)
        sparse = game.RewardSpec(steps=steps, shaping=False, **kwargs)
        shaped = game.RewardSpec(steps=steps, shaping=True, **kwargs)
        total_sparse = game.episode_rewards(
            episode.spots, sparse, vols=episode.vols).rewards.sum(axis=1)
        total_shaped = game.episode_rewards(
            episode.spots, shaped, vols=episode.vols).rewards.sum(axis=1)
        worst = max(worst, float(np.max(np.abs(total_shaped
                                               - total_sparse))))
    ok = worst < 1e-12
    _report(4, "telescoping identity", ok,
            f"20 episodes, worst cumulative gap {worst:.2e}")


# ---------------------------------------------------------------------------
# 5. Permutation symmetry
# ---------------------------------------------------------------------------

def test_criterion_05_permutation_symmetry():
    rng = np.random.default_rng(0xC5)
    steps, n = 8, 500
    bspec = pricing.BermudanSpec(t1_step=3, t2_step=7, k1=1.0, k2=1.012)
    quotes = (market.VanillaQuote(t_days=4, strike=1.0, target_iv=0.2),
              market.VanillaQuote(t_days=8, strike=0.97, target_iv=0.22))
    config = engine.SimConfig(n=n, steps=steps, runs=2, seed=5,
                              t1_step=3, t2_step=7, sigma_init=0.2)
    episode = engine.simulate_episode(config, None, fixed_vol=0.2)
    specs = [
        game.RewardSpec(steps=steps, quotes=quotes, bermudan=bspec,
                        bermudan_weight=1.0, bermudan_target_iv=0.2,
                        shaping=shaping, delta=DT)
        for shaping in (False, True)]
    base = [game.episode_rewards(episode.spots, s,
                                 vols=episode.vols).rewards for s in specs]
    exact = 0
    for i in range(50):
        perm = rng.permutation(n)
        spots = episode.spots[:, :, perm]
        vols = episode.vols[:, :, perm]
        spec = specs[i % 2]
        permuted = game.episode_rewards(spots, spec, vols=vols).rewards
        exact += int(np.array_equal(permuted, base[i % 2]))
    ok = exact == 50
    _report(5, "permutation symmetry", ok,
            f"{exact}/50 permutations bitwise identical")


# ---------------------------------------------------------------------------
# 6. Interpolation node exactness
# ---------------------------------------------------------------------------

def _basis_states(rng, n_p, extra_dims):
    t_col = np.full((n_p, 1), float(rng.uniform(0.0, 0.2)))
    cols = [t_col]
    for kind in extra_dims:
        if kind == "spread":
            cols.append(rng.normal(scale=rng.uniform(0.05, 1.0),
                                   size=(n_p, 1)))
        else:
            cols.append(np.full((n_p, 1), float(rng.uniform(-1.0, 1.0))))
    return np.concatenate(cols, axis=1)


def test_criterion_06_interpolation_node_exactness():
    rng = np.random.default_rng(0xC6)
    failures = []
    for case in range(100):
        n_p = int(rng.integers(3, 41))
        ad = int(rng.integers(1, 3))
        n_extra = int(rng.integers(1, 4))
        kinds = ["spread"] + ["spread" if rng.random() < 0.7 else "flat"
                              for _ in range(n_extra - 1)]
        states = _basis_states(rng, n_p, kinds)
        z = rng.standard_normal((n_p, ad))
        if case % 2 == 0:
            field = trainer.fit_exploration_field(states, z, mode="knn",
                                                  k=1)
            got = trainer.interpolate_exploration(field, states)
        else:
            n_total = n_p + int(rng.integers(5, 80))
            idx = rng.choice(n_total, size=n_p, replace=False)
            queries = _basis_states(rng, n_total, kinds)
            queries[idx] = states
            field = trainer.fit_exploration_field(states, z, mode="linear",
                                                  basis_indices=idx)
            got = trainer.interpolate_exploration(field, queries)[idx]
        if not np.array_equal(got, z):
            failures.append(case)
    ok = not failures
    _report(6, "interpolation node exactness", ok,
            f"100 geometries, {len(failures)} mismatches "
            f"{failures[:5] if failures else ''}")


# ---------------------------------------------------------------------------
# 7. Bermudan pricing oracle
# ---------------------------------------------------------------------------

def test_criterion_07_bermudan_vs_lattice():
    t0 = time.time()
    bspec = pricing.BermudanSpec(t1_step=21, t2_step=51, k1=1.0, k2=1.012)
    lattice = pricing.lattice_bermudan_price(0.2, bspec, DT, n_steps=2000)
    values = []
    floor_ok = True
    for seed in range(20):
        config = engine.SimConfig(n=40_000, steps=51, runs=1, seed=seed,
                                  t1_step=21, t2_step=51, sigma_init=0.2)
        episode = engine.simulate_episode(config, None, fixed_vol=0.2,
                                          store_actions=False)
        res = pricing.bermudan_price(episode.spots[0, 21],
                                     episode.spots[0, 51], bspec, DT)
        values.append(res.bermudan)
        if res.bermudan < res.max_eu - 3.0 * res.bermudan_se:
            floor_ok = False
    values = np.asarray(values)
    gap = abs(float(values.mean()) - lattice)
    se = float(values.std(ddof=1)) / math.sqrt(values.size)
    ok = gap < 3.0 * se and floor_ok
    _report(7, "bermudan pricing oracle", ok,
            f"mean AMC {values.mean():.6f} vs lattice {lattice:.6f}, "
            f"gap {gap:.2e} vs 3se {3 * se:.2e}, floor "
            f"{'held' if floor_ok else 'broken'} on 20 seeds, "
            f"{time.time() - t0:.0f}s")


# ---------------------------------------------------------------------------
# 8. Flat-smile calibration
# ---------------------------------------------------------------------------

def _pooled_grid_ivs(episode, quotes):
    """Implied vols of the quote grid on run-pooled terminal spots."""
    out = []
    for q in quotes:
        step = int(round(q.t_years / episode.config.delta))
        spots = episode.spots[:, step].reshape(-1)
        price, _ = pricing.mc_vanilla_price(spots, q.strike)
        iv, _ = game.iv_or_edge(price, 1.0, q.strike, q.t_years)
        out.append((q, iv))
    return out


def _streak_stop(measure, threshold, need=2):
    """Callback stopping after `need` consecutive sub-threshold readings."""
    streak = [0]

    def callback(row, episode, breakdown):
        streak[0] = streak[0] + 1 if measure(episode) < threshold else 0
        return streak[0] >= need

    return callback


def test_criterion_08_flat_smile_calibration():
    t0 = time.time()
    surface = market.flat_surface(0.20, pillar_days=(21, 51))
    quotes = tuple(market.make_target_set(surface, GRID_DAYS, GRID_STRIKES))
    config = engine.SimConfig(n=20_000, steps=51, runs=4, seed=8,
                              t1_step=21, t2_step=51, sigma_init=0.25)
    spec = game.RewardSpec(steps=51, quotes=quotes, delta=DT)
    tcfg = trainer.TrainerConfig(n_p=50, max_iterations=500,
                                 plateau_window=0)

    def pooled_max_err(episode):
        return max(abs(iv - 0.20)
                   for _, iv in _pooled_grid_ivs(episode, quotes))

    result = trainer.marlvol_train(
        config, spec, tcfg, reference_vol_fn=lambda t, s: 0.20,
        callback=_streak_stop(pooled_max_err, 0.0035), log_every=0)
    episode, _, _ = trainer.evaluate_policy(result.policy, config,
                                            result.spec)
    errs = [abs(iv - 0.20) for _, iv in _pooled_grid_ivs(episode, quotes)]
    worst = max(errs)
    ok = worst < 0.005 and result.iterations <= 500
    _report(8, "flat-smile calibration", ok,
            f"max |iv - 0.20| {worst * 100:.3f} volpt over "
            f"{len(quotes)} quotes, {result.iterations} iterations "
            f"({result.stop_reason}), {time.time() - t0:.0f}s")


# ---------------------------------------------------------------------------
# 9. Skewed-smile calibration
# ---------------------------------------------------------------------------

def test_criterion_09_skewed_smile_calibration():
    t0 = time.time()
    surface = market.skewed_surface(atm_vol=0.14, skew=-0.5,
                                    pillar_days=(21, 51))
    quotes = tuple(market.make_target_set(surface, GRID_DAYS, GRID_STRIKES))
    config = engine.SimConfig(n=20_000, steps=51, runs=4, seed=9,
                              t1_step=21, t2_step=51, sigma_init=0.14)
    spec = game.RewardSpec(steps=51, quotes=quotes, delta=DT)
    tcfg = trainer.TrainerConfig(n_p=50, max_iterations=1000,
                                 plateau_window=0)

    def ref_fn(t_years, spots):
        return market.dupire_local_vol(surface, max(t_years, 0.5 * DT),
                                       spots)

    def pooled_rmse(episode):
        sq = [(iv - q.target_iv) ** 2
              for q, iv in _pooled_grid_ivs(episode, quotes)]
        return math.sqrt(sum(sq) / len(sq))

    result = trainer.marlvol_train(
        config, spec, tcfg, reference_vol_fn=ref_fn,
        callback=_streak_stop(pooled_rmse, 0.008), log_every=0)
    episode, _, _ = trainer.evaluate_policy(result.policy, config,
                                            result.spec)
    sq = [(iv - q.target_iv) ** 2
          for q, iv in _pooled_grid_ivs(episode, quotes)]
    rmse = math.sqrt(sum(sq) / len(sq))
    ok = rmse < 0.010 and result.iterations <= 1000
    _report(9, "skewed-smile calibration", ok,
            f"rmse {rmse * 100:.3f} volpt over {len(sq)} quotes, "
            f"{result.iterations} iterations ({result.stop_reason}), "
            f"{time.time() - t0:.0f}s")


# ---------------------------------------------------------------------------
# 10/11. Bermudan path dependence and learned monotonicity
# ---------------------------------------------------------------------------

STUDY_SEEDS = (0, 1, 2, 3, 4)
STUDY_ITERATIONS = 150
SMOOTH_WINDOW = 25


@pytest.fixture(scope="module")
def pathdep_study():
    """Train plain and path-dependent modes on 5 seeds, same budgets."""
    surface = market.skewed_surface(atm_vol=0.14, skew=-0.5,
                                    pillar_days=(21, 51))

    def ref_fn(t_years, spots):
        return market.dupire_local_vol(surface, max(t_years, 0.5 * DT),
                                       spots)

    bspec = pricing.BermudanSpec(t1_step=21, t2_step=51, k1=1.0, k2=1.012)
    spec = game.RewardSpec(steps=51, bermudan=bspec, bermudan_weight=1.0,
                           bermudan_target_iv=1.0, delta=DT)
    loc = engine.LocalizeConfig(local_vol_fn=ref_fn, from_step=21,
                                to_step=50)
    tcfg = trainer.TrainerConfig(n_p=50,
                                 max_iterations=STUDY_ITERATIONS,
                                 plateau_window=0)
    runs = {}
    for pathdep in (False, True):
        for seed in STUDY_SEEDS:
            config = engine.SimConfig(n=4000, steps=51, runs=2, seed=seed,
                                      t1_step=21, t2_step=51,
                                      sigma_init=0.14)
            result = trainer.marlvol_train(
                config, spec, tcfg, path_dependent=pathdep,
                localization=loc, reference_vol_fn=ref_fn, log_every=0)
            runs[(pathdep, seed)] = result
    return {"runs": runs, "loc": loc, "config_seed0": engine.SimConfig(
        n=4000, steps=51, runs=2, seed=0, t1_step=21, t2_step=51,
        sigma_init=0.14)}


def _switch_series(result):
    return np.array([row["switch_volpts"] for row in result.history])


def test_criterion_10_path_dependence_lowers_switch(pathdep_study):
    t0 = time.time()
    runs = pathdep_study["runs"]
    finals = {False: [], True: []}
    initials = []
    for (pathdep, seed), result in runs.items():
        series = _switch_series(result)
        finals[pathdep].append(series[-SMOOTH_WINDOW:].mean())
        if pathdep:
            initials.append(series[0])
    plain = np.asarray(finals[False])
    pathdep = np.asarray(finals[True])
    gap = float(plain.mean() - pathdep.mean())
    pooled_se = math.sqrt(plain.var(ddof=1) / plain.size
                          + pathdep.var(ddof=1) / pathdep.size)
    decrease = 1.0 - float(pathdep.mean()) / float(np.mean(initials))
    ok = gap > 2.0 * pooled_se and decrease >= 0.30
    _report(10, "path dependence lowers switch", ok,
            f"plain {plain.mean():.3f} volpt vs path-dep "
            f"{pathdep.mean():.3f} volpt over {len(STUDY_SEEDS)} seeds, "
            f"gap {gap:.3f} vs 2se {2 * pooled_se:.3f}, decrease "
            f"{decrease * 100:.0f}% from iter 0, {time.time() - t0:.0f}s")


def _equal_count_bins(x, bins):
    order = np.argsort(x, kind="stable")
    idx = np.empty(x.size, dtype=np.intp)
    for b, chunk in enumerate(np.array_split(order, bins)):
        idx[chunk] = b
    return idx


def _partial_profile_rho(x_var, x_cond, dates, values, bins=12,
                         cond_bins=40):
    """Spearman of the binned profile of values against x_var.

    The two coordinates are strongly correlated along simulated paths, so
    a marginal profile against one mostly reflects the other.  Within each
    date the confounding coordinate is removed first by demeaning over
    fine equal-count bins of x_cond, then the residuals are pooled into
    equal-count (occupancy-balanced) bins of x_var computed per date.
    """
    resid = values.astype(float).copy()
    var_bin = np.empty(values.size, dtype=np.intp)
    for d in np.unique(dates):
        on = dates == d
        cond_bin = _equal_count_bins(x_cond[on], cond_bins)
        r = resid[on]
        for c in range(cond_bins):
            sel = cond_bin == c
            r[sel] -= r[sel].mean()
        resid[on] = r
        var_bin[on] = _equal_count_bins(x_var[on], bins)
    profile = np.array([resid[var_bin == b].mean() for b in range(bins)])
    rho, _ = stats.spearmanr(np.arange(bins), profile)
    return float(rho)


def test_criterion_11_learned_monotonicity(pathdep_study):
    result = pathdep_study["runs"][(True, 0)]
    config = pathdep_study["config_seed0"]
    episode, _, _ = trainer.evaluate_policy(
        result.policy, config, result.spec, path_dependent=True,
        localization=pathdep_study["loc"])
    t1 = config.t1_step
    ln_s_t1, ln_s_t, vols, dates = [], [], [], []
    for t in range(t1 + 1, config.steps):
        ln_s_t1.append(np.log(episode.spots[:, t1]).ravel())
        ln_s_t.append(np.log(episode.spots[:, t]).ravel())
        vols.append(episode.eff_vols[:, t].ravel())
        dates.append(np.full(episode.spots[:, t].size, t))
    ln_s_t1 = np.concatenate(ln_s_t1)
    ln_s_t = np.concatenate(ln_s_t)
    vols = np.concatenate(vols)
    dates = np.concatenate(dates)
    rho_t1 = _partial_profile_rho(ln_s_t1, ln_s_t, dates, vols)
    rho_t = _partial_profile_rho(ln_s_t, ln_s_t1, dates, vols)
    ok = rho_t1 > 0.5 and rho_t < -0.3
    _report(11, "learned vol monotonicity", ok,
            f"partial profile spearman vs ln S_t1 {rho_t1:+.3f} "
            f"(need > 0.5), vs ln S_t {rho_t:+.3f} (need < -0.3), "
            f"12 occupancy-balanced bins per date")


# ---------------------------------------------------------------------------
# 12. Bandit sanity
# ---------------------------------------------------------------------------

def test_criterion_12_bandit_sanity():
    t0 = time.time()
    _, history = trainer.train_bandit(2.0, iterations=200, seed=0)
    final = history[-1]["mean_action"]
    ok = abs(final - 2.0) <= 0.1
    _report(12, "bandit sanity", ok,
            f"mean action {final:.4f} vs optimum 2.0 after "
            f"{len(history)} iterations, {time.time() - t0:.0f}s")
