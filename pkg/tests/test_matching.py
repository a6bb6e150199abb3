import itertools

import numpy as np
import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from lteu import matching as mt
from lteu import netmodel as nm
from lteu.errors import ConfigError, MatchingError


def make_options(bands, quotas):
    return [mt.BsChannelPair(i, i, i, mt.LICENSED if b else mt.UNLICENSED, q)
            for i, (b, q) in enumerate(zip(bands, quotas))]


def make_pairs(prefs, types=None, thetas=None):
    pairs = []
    for i, p in enumerate(prefs):
        k = 0 if types is None else types[i]
        theta = 1.0 if thetas is None else thetas[i]
        pairs.append(mt.UserSubfilePair(i, i, 0, 0, 5e6, k, theta, tuple(p)))
    return pairs


def random_instance(rng, n_pairs, n_opts, max_quota=2):
    bands = rng.random(n_opts) < 0.5
    quotas = rng.integers(0, max_quota + 1, n_opts)
    options = make_options(bands, quotas)
    prefs = []
    for _ in range(n_pairs):
        k = rng.integers(0, n_opts + 1)
        prefs.append(tuple(int(x) for x in rng.permutation(n_opts)[:k]))
    types = rng.integers(0, 2, n_pairs)
    thetas = (types + 1).astype(float)
    pairs = make_pairs(prefs, types, thetas)
    gamma = rng.normal(size=(n_pairs, n_opts))
    cost = rng.uniform(0, 1, (n_pairs, n_opts))
    rankings = mt.build_rankings(pairs, options, gamma, cost)
    return pairs, options, rankings


def all_matchings(pairs, options):
    choices = [[None] + list(a.pref_list) for a in pairs]
    for combo in itertools.product(*choices):
        load = {}
        for m in combo:
            if m is not None:
                load[m] = load.get(m, 0) + 1
        if all(load[m] <= options[m].quota for m in load):
            yield combo


def is_stable(combo, pairs, options, rankings):
    held = {}
    for a, m in zip(pairs, combo):
        if m is not None:
            held.setdefault(m, []).append(a.id)
    for a, m_cur in zip(pairs, combo):
        better = a.pref_list if m_cur is None else a.pref_list[:a.pref_list.index(m_cur)]
        for m in better:
            members = held.get(m, [])
            if options[m].quota == 0:
                continue
            if len(members) < options[m].quota:
                return False
            if any(rankings[m][b] > rankings[m][a.id] for b in members):
                return False
    return True


def test_chunk_files_examples():
    assert len(mt.chunk_files([50e6], 5e6)) == 10
    small = mt.chunk_files([3e6], 5e6)
    assert len(small) == 1 and small[0].chunk_size == 3e6
    assert mt.chunk_files([0.0], 5e6) == []
    uneven = mt.chunk_files([12e6], 5e6)
    assert [a.chunk_size for a in uneven] == [5e6, 5e6, 2e6]
    padded = mt.chunk_files([12e6], 5e6, pad_last=True)
    assert [a.chunk_size for a in padded] == [5e6] * 3
    with pytest.raises(ConfigError):
        mt.chunk_files([1.0], 0.0)


def test_preference_list_examples():
    assert mt.user_preference_list([-1.0, 0.5, -0.2])[0] == (1,)
    # identical except price: cheaper has higher utility
    value = 1.0
    ids, _ = mt.user_preference_list([value - 0.4, value - 0.1])
    assert ids == (1, 0)
    ids, _ = mt.user_preference_list([0.3, 0.3, 0.3], secondary=[2.0, 1.0, 1.0])
    assert ids == (1, 2, 0)


def test_preference_list_matches_enumeration():
    # three candidates, utilities from exhaustive expectation over two opponent types
    probs = [0.25, 0.75]
    rate = {0: [0.5, 0.2], 1: [0.4, 0.4], 2: [0.7, 0.0]}
    price = [0.1, 0.05, 0.2]
    eu = [sum(p * rate[m][t] for t, p in enumerate(probs)) - price[m] for m in range(3)]
    ids, utils = mt.user_preference_list(eu)
    keep = [m for m in range(3) if eu[m] >= 0]
    assert list(ids) == sorted(keep, key=lambda m: -eu[m])
    assert np.allclose(utils, sorted((eu[m] for m in keep), reverse=True))


def test_classify_priority_examples():
    options = make_options([True, True, False, True], [1, 1, 1, 1])
    a = make_pairs([(0,)])[0]
    pa = mt.classify_priority(a, 0, options)
    assert (pa.cls, pa.phi) == (1, 0)
    b = make_pairs([(2, 0)])[0]
    b.reject(2)
    pb = mt.classify_priority(b, 0, options)
    assert (pb.cls, pb.phi) == (2, 0)
    c = make_pairs([(0, 1, 3)])[0]
    pc = mt.classify_priority(c, 0, options)
    assert (pc.cls, pc.phi) == (3, 1)
    assert pa.priority_coeff < pb.priority_coeff < pc.priority_coeff
    with pytest.raises(MatchingError):
        mt.classify_priority(b, 2, options)


def test_bs_gamma_examples():
    assert mt.bs_gamma(0.4, 0.0) == 0.4
    assert mt.bs_gamma(0.0, 0.0) == 0.0


def test_bs_gamma_two_user_symbolic():
    g = np.array([0.9, 0.6])
    cross = np.array([[0.0, 0.1], [0.05, 0.0]])
    p1, p2 = sympy.symbols("p1 p2")
    a = sympy.exp(1) - 1
    sol = sympy.solve([sympy.Eq(p1 * sympy.Rational(9, 10), a * (1 + p2 / 10)),
                       sympy.Eq(p2 * sympy.Rational(6, 10), a * (1 + p1 / 20))], [p1, p2])
    prof = nm.solve_power_profile(g, [1.0, 1.0], 1.0, 1.0, cross)
    assert mt.bs_gamma(3.0, prof.power[0], 0.5) == pytest.approx(3.0 - 0.5 * float(sol[p1]))


def test_bs_utility_examples():
    pr = mt.PriorityAssignment(1, 0, 1.0, epsilon=1)
    assert mt.bs_utility(0.3, 0.2, 2.0, pr) == 0.3
    hi = mt.bs_utility(0.3, 0.2, 2.0, mt.PriorityAssignment(1, 0, 1.0))
    lo = mt.bs_utility(0.3, 0.2, 2.0, mt.PriorityAssignment(3, 1, 4.0))
    assert hi > lo
    with pytest.raises(ConfigError):
        mt.bs_utility(0.3, 0.2, 0.0, mt.PriorityAssignment(1, 0, 1.0))


def test_bs_utility_two_type_enumeration():
    probs = [0.4, 0.6]
    power = [0.2, 0.5]          # serving power given each opponent type
    price, theta, eta = 1.0, 2.0, 2.0
    gamma = sum(p * (price - c) for p, c in zip(probs, power))
    cost = sum(p * c for p, c in zip(probs, power))
    exact = sum(p * (price - c + c / (theta * eta)) for p, c in zip(probs, power))
    assert mt.bs_utility(gamma, cost, theta, mt.PriorityAssignment(2, 0, eta)) == pytest.approx(exact)


def test_ranking_same_group_uses_gamma_only():
    # same class and type: higher gamma wins despite a lower promoted score
    order = mt.rank_applicants([0.5, 0.4], [0.0, 1.0], [1.0, 1.0], [1.0, 1.0],
                               np.array([1, 1]), np.array([0, 0]), np.array([0, 1]),
                               np.array([0, 0]))
    assert list(order) == [0, 1]
    # different classes: promotion counts
    order = mt.rank_applicants([0.5, 0.4], [0.0, 1.0], [1.0, 1.0], [4.0, 1.0],
                               np.array([3, 1]), np.array([0, 0]), np.array([0, 1]),
                               np.array([0, 0]))
    assert list(order) == [1, 0]


def test_everyone_gets_first_choice_with_ample_quota():
    options = make_options([True, False, True], [5, 5, 5])
    pairs = make_pairs([(0, 1), (1, 2), (2, 0), (0,)])
    n = len(pairs)
    gamma = np.tile(np.arange(n, 0, -1.0)[:, None], (1, 3))
    rankings = mt.build_rankings(pairs, options, gamma, np.zeros((n, 3)))
    result = mt.deferred_acceptance(pairs, options, rankings)
    assert [result.assignment[a.id] for a in pairs] == [0, 1, 2, 0]


def test_three_pairs_two_options_matches_brute_force():
    options = make_options([True, False], [1, 1])
    pairs = make_pairs([(0, 1), (0, 1), (1, 0)])
    gamma = np.array([[0.2, 0.9], [0.8, 0.1], [0.5, 0.5]])
    rankings = mt.build_rankings(pairs, options, gamma, np.zeros((3, 2)))
    result = mt.deferred_acceptance(pairs, options, rankings)
    combo = tuple(result.assignment[a.id] for a in pairs)
    stable = [c for c in all_matchings(pairs, options) if is_stable(c, pairs, options, rankings)]
    assert combo in stable
    assert result.proposals <= len(pairs) * len(options)


def test_zero_quotas_stable_and_unmatched():
    options = make_options([True, False], [0, 0])
    pairs = make_pairs([(0, 1), (1,)])
    rankings = mt.build_rankings(pairs, options, np.ones((2, 2)), np.zeros((2, 2)))
    result = mt.deferred_acceptance(pairs, options, rankings)
    assert result.unmatched == [0, 1]
    assert mt.verify_bayesian_stability(result, pairs, options, rankings).stable


def test_swapping_assignments_creates_blocking_pair():
    options = make_options([True, True], [1, 1])
    pairs = make_pairs([(0, 1), (1, 0)])
    rankings = mt.build_rankings(pairs, options, np.ones((2, 2)), np.zeros((2, 2)))
    result = mt.deferred_acceptance(pairs, options, rankings)
    assert mt.verify_bayesian_stability(result, pairs, options, rankings).stable
    swapped = mt.Matching({0: 1, 1: 0}, {0: [1], 1: [0]})
    blocking = mt.verify_bayesian_stability(swapped, pairs, options, rankings).blocking
    assert blocking


def test_matching_to_allocation_examples():
    options = make_options([True, False], [10, 10])
    pairs = mt.chunk_files([50e6, 50e6], 5e6)
    assign = {a.id: None for a in pairs}
    for a in pairs[:6]:
        assign[a.id] = 0
    for a in pairs[6:10]:
        assign[a.id] = 1
    m = mt.Matching(assign, {})
    alpha, beta = mt.matching_to_allocation(m, pairs, options, 2)
    assert (alpha[0], beta[0]) == (0.6, 0.4)
    assert (alpha[1], beta[1]) == (0.0, 0.0)
    all_lic = mt.Matching({a.id: 0 for a in pairs}, {})
    alpha, beta = mt.matching_to_allocation(all_lic, pairs, options, 2)
    assert np.all(alpha == 1.0) and np.all(beta == 0.0)


def test_matching_json_has_assignment_and_unmatched():
    import json
    m = mt.Matching({0: 1, 1: None}, {1: [0]}, proposals=3, rounds=2)
    doc = json.loads(m.to_json())
    assert doc["assignment"] == {"0": 1} and doc["unmatched"] == [1]


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_da_invariants_on_random_instances(seed):
    rng = np.random.default_rng(seed)
    pairs, options, rankings = random_instance(rng, int(rng.integers(1, 12)),
                                               int(rng.integers(1, 6)))
    result = mt.deferred_acceptance(pairs, options, rankings)
    assert result.validate(options)
    assert result.proposals <= len(pairs) * len(options)
    assert mt.verify_bayesian_stability(result, pairs, options, rankings).stable
    for a in pairs:
        assert a.remaining == a.pref_list[a.cursor:]
        m = result.assignment[a.id]
        assert m is None or a.remaining[0] == m


def test_remaining_only_shrinks():
    rng = np.random.default_rng(9)
    pairs, options, rankings = random_instance(rng, 10, 4, max_quota=1)
    before = {a.id: len(a.pref_list) for a in pairs}
    mt.deferred_acceptance(pairs, options, rankings)
    assert all(len(a.remaining) <= before[a.id] for a in pairs)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.1, 0.9))
def test_smaller_priority_coeff_never_lowers_rank(seed, shrink):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 10))
    gamma, cost = rng.normal(size=n), rng.uniform(0, 1, n)
    theta = rng.choice([1.0, 2.0, 3.0], n)
    cls = rng.integers(1, 4, n)
    coeff = np.array([1.0, 2.0, 4.0])[cls - 1]
    types = rng.integers(0, 2, n)
    users = np.arange(n)
    chunk = np.zeros(n, dtype=int)
    base = list(mt.rank_applicants(gamma, cost, theta, coeff, cls, types, users, chunk))
    who = int(rng.integers(n))
    boosted = coeff.copy()
    boosted[who] *= shrink
    after = list(mt.rank_applicants(gamma, cost, theta, boosted, cls, types, users, chunk))
    assert after.index(who) <= base.index(who)
    pr = mt.PriorityAssignment(int(cls[who]), 0, float(coeff[who]))
    pr2 = mt.PriorityAssignment(int(cls[who]), 0, float(boosted[who]))
    if cost[who] > 0:
        assert mt.bs_utility(gamma[who], cost[who], theta[who], pr2) > \
            mt.bs_utility(gamma[who], cost[who], theta[who], pr)
