"""Acceptance gate.  Each test records a PASS/FAIL line via the ``gate`` fixture;
the lines are printed at the end of the pytest run."""

import itertools
import json
import time

import numpy as np
import pytest
from scipy.integrate import quad

from lteu import contracts as ct
from lteu import experiment as ex
from lteu import harness as hs
from lteu import matching as mt
from lteu.config import Scenario

SWEEP = (200, 400, 600, 800, 1000)
FULL_SWEEP = Scenario().replace(experiment={"sweep_values": SWEEP, "replications": 20})


# ---------------------------------------------------------------- menus

def _own_vs_cross(types, v, prices):
    own = types * v - prices
    worst_tibs, worst_iir = 0.0, 0.0
    scale = max(1.0, np.abs(own).max())
    for k, j in itertools.product(range(types.size), repeat=2):
        worst_tibs = max(worst_tibs, (types[k] * v[j] - prices[j] - own[k]) / scale)
    for k in range(types.size):
        worst_iir = max(worst_iir, -own[k] / scale)
    return worst_tibs, worst_iir


def test_c1_menus_pass_tibs_and_iir(gate):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    failures, checked, worst = 0, 0, 0.0
    for i in range(50):
        users = int(rng.choice(SWEEP))
        sc = Scenario().replace(experiment={"base_seed": int(rng.integers(2 ** 31))})
        rep = hs.prepare(sc, users, i)
        _, v, _, prices = hs.information_view(rep, complete=False)
        for row_v, row_p in zip(v, prices):
            e = ct.ExpectedQuantities(rep.grid.types, row_v, row_p)
            lib_ok = ct.check_tibs(e).ok and ct.check_iir(e).ok
            tibs, iir = _own_vs_cross(rep.grid.types, row_v, row_p)
            worst = max(worst, tibs, iir)
            direct_ok = tibs <= ct.EPS_IC and iir <= ct.EPS_IR
            failures += (not lib_ok) + (not direct_ok)
            checked += 1
    elapsed = time.perf_counter() - start
    ok = failures == 0 and elapsed <= 120
    gate(1, ok, f"{checked} user menus in 50 scenarios, {failures} failures, "
                f"worst relative slack {worst:.2e}, {elapsed:.0f}s")
    assert ok


def test_c2_prices_match_quadrature(gate):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        k = int(rng.integers(2, 9))
        types = np.cumsum(rng.uniform(0.2, 2.0, k))
        v = np.cumsum(rng.uniform(0.0, 1.0, k))
        grid = ct.TypeGrid(types, np.full(k, 1.0 / k))
        prices, _ = ct.optimal_prices(v, grid)
        for j in range(k):
            integral, _ = quad(lambda x: np.interp(x, types, v), types[0], types[j],
                               points=types[1:j], limit=200, epsabs=0, epsrel=1e-12)
            ref = types[j] * v[j] - integral
            worst = max(worst, abs(prices[j] - ref) / max(abs(ref), 1e-300))
    ok = worst <= 1e-6
    gate(2, ok, f"20 profiles, worst relative price error {worst:.2e}")
    assert ok


# ---------------------------------------------------------------- matching

def _random_instance(rng, n_pairs, n_opts, max_quota):
    bands = rng.random(n_opts) < 0.5
    options = [mt.BsChannelPair(i, i, i, mt.LICENSED if b else mt.UNLICENSED,
                                int(rng.integers(0, max_quota + 1)))
               for i, b in enumerate(bands)]
    types = rng.integers(0, 3, n_pairs)
    pairs = []
    for i in range(n_pairs):
        prefs = tuple(int(x) for x in rng.permutation(n_opts)[:rng.integers(0, n_opts + 1)])
        pairs.append(mt.UserSubfilePair(i, i // 3, 0, i % 3, 5e6, int(types[i]),
                                        float(types[i] + 1), prefs))
    gamma = rng.normal(size=(n_pairs // 3 + 1, n_opts))
    cost = rng.uniform(0, 1, (n_pairs // 3 + 1, n_opts))
    return pairs, options, mt.build_rankings(pairs, options, gamma, cost)


def _blocking(assign, pairs, options, rankings):
    """Independent blocking-pair count for an assignment tuple."""
    held = {}
    for a, m in zip(pairs, assign):
        if m is not None:
            held.setdefault(m, []).append(a.id)
    count = 0
    for a, cur in zip(pairs, assign):
        better = a.pref_list if cur is None else a.pref_list[:a.pref_list.index(cur)]
        for m in better:
            q = options[m].quota
            members = held.get(m, [])
            if q > 0 and (len(members) < q or
                          any(rankings[m][b] > rankings[m][a.id] for b in members)):
                count += 1
    return count


def test_c3_da_is_in_brute_force_stable_set(gate):
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    bad = 0
    for _ in range(100):
        pairs, options, rankings = _random_instance(rng, int(rng.integers(1, 5)),
                                                    int(rng.integers(1, 4)), 2)
        result = mt.deferred_acceptance(pairs, options, rankings)
        da = tuple(result.assignment[a.id] for a in pairs)
        stable = set()
        for combo in itertools.product(*[[None] + list(a.pref_list) for a in pairs]):
            load = np.bincount([m for m in combo if m is not None], minlength=len(options))
            if all(load[m] <= options[m].quota for m in range(len(options))) \
                    and _blocking(combo, pairs, options, rankings) == 0:
                stable.add(combo)
        lib = mt.verify_bayesian_stability(result, pairs, options, rankings).stable
        bad += (da not in stable) + (not lib) + (_blocking(da, pairs, options, rankings) > 0)
    elapsed = time.perf_counter() - start
    ok = bad == 0 and elapsed <= 60
    gate(3, ok, f"100 instances, {bad} violations, {elapsed:.1f}s")
    assert ok


def test_c4_proposal_bound(gate):
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(100):
        pairs, options, rankings = _random_instance(rng, 200, int(rng.integers(5, 40)), 8)
        result = mt.deferred_acceptance(pairs, options, rankings)
        worst = max(worst, result.proposals / (len(pairs) * len(options)))
        assert result.validate(options)
    ok = worst <= 1.0
    gate(4, ok, f"100 instances, max proposals / (pairs x options) = {worst:.3f}")
    assert ok


# ---------------------------------------------------------------- own-type optimality

def test_c5_own_contract_maximises_realised_utility(gate):
    hits, total = 0, 0
    for index in range(5):
        rep = hs.prepare(Scenario(), 200, index)
        util, tol = hs.own_type_utilities(rep)
        own = util[np.arange(rep.num_users), rep.types]
        hits += int(np.sum(own >= util.max(axis=1) - tol))
        total += rep.num_users
    frac = hits / total
    ok = frac >= 0.95
    gate(5, ok, f"own contract best for {frac:.1%} of {total} users")
    assert ok


# ---------------------------------------------------------------- full sweep

@pytest.fixture(scope="module")
def sweep_records():
    start = time.perf_counter()
    records = ex.run_experiment(FULL_SWEEP, ("proposed", "random", "uniform-price"))
    return records, time.perf_counter() - start


def test_c6_qos_margin_over_random(gate, sweep_records):
    records, elapsed = sweep_records
    prop = ex.aggregate(records, "proposed")
    rand = ex.aggregate(records, "random")
    margins = {v: prop[v]["qos_fraction"][0] - rand[v]["qos_fraction"][0] for v in SWEEP}
    best = max(margins.values())
    ok = best >= 0.30
    text = ", ".join(f"{v}:{m * 100:+.1f}pp" for v, m in margins.items())
    gate(6, ok, f"QoS margin {text}; sweep took {elapsed:.0f}s")
    assert ok


def test_c7_utility_over_uniform_pricing(gate, sweep_records):
    records, _ = sweep_records
    prop = ex.aggregate(records, "proposed")
    unif = ex.aggregate(records, "uniform-price")
    pu = {v: prop[v]["mean_user_utility"][0] for v in SWEEP}
    uu = {v: unif[v]["mean_user_utility"][0] for v in SWEEP}
    above = all(pu[v] > uu[v] for v in SWEEP)
    ratios = {v: pu[v] / uu[v] if uu[v] > 0 else float("inf") for v in SWEEP}
    large = all(ratios[v] >= 1.5 for v in SWEEP if v > 600)
    ok = above and large
    text = ", ".join(f"{v}:{pu[v]:.3f}/{uu[v]:.3f}" for v in SWEEP)
    gate(7, ok, f"proposed/uniform utility {text}")
    assert ok


def test_c8_offloading_trend_by_preset(gate):
    series = {}
    for preset in (1, 3):
        sc = Scenario().replace(experiment={"sweep_values": SWEEP, "replications": 10,
                                            "type_preset": preset})
        agg = ex.aggregate(ex.run_proposed(sc), "proposed")
        series[preset] = np.array([agg[v]["offloaded_traffic"][0] for v in SWEEP])
    monotone = all(np.all(np.diff(s) >= 0) for s in series.values())
    ordered = bool(np.all(series[1] > series[3]))
    flat = ex.flattening_point(SWEEP, series[1])
    ok = monotone and ordered and flat is not None
    mbits = {p: ", ".join(f"{x / 1e6:.0f}" for x in s) for p, s in series.items()}
    gate(8, ok, f"offloaded Mbit preset1 [{mbits[1]}] preset3 [{mbits[3]}], "
                f"flattens from {flat}")
    assert ok


def test_c9_conservation_and_regeneration(gate, sweep_records):
    records, _ = sweep_records
    conserved = all(r.failed is None and r.conserved for r in records)
    manifest = json.loads(ex.manifest_json(
        ex.build_manifest(FULL_SWEEP, records, ("proposed", "random", "uniform-price"))))
    rng = np.random.default_rng(9)
    picks = rng.choice(len(records), 6, replace=False)
    same = all(ex.regenerate_record(manifest, manifest["records"][i]) == records[i]
               for i in picks)
    ok = conserved and same
    gate(9, ok, f"conservation on {len(records)} runs: {conserved}; "
                f"{len(picks)} records regenerated identically: {same}")
    assert ok
