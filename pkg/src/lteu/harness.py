"""One replication of the allocation pipeline and its four mechanisms.

A replication draws a scene and a realised type profile, then estimates
what every user can expect from every option it can reach:

* a *nominal load* is built from a type profile: each user parks its
  contract share of chunks on the channels of its nearest BS (occupancy
  clipped at the quota), the coupled power system is solved, and the
  resulting per-(BS, channel) slot power gives the interference a new
  link would see;
* licensed chunks are then delivered at the required rate, unlicensed
  chunks only in activity slots where BS plus WiFi interference stays
  below the listen-before-talk threshold.

Averaging over sampled opponent profiles gives the incomplete-information
quantities; the realised profile gives the complete-information ones.
After matching, the realised links are solved jointly and rates, utilities
and traffic are measured.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import matching as mt
from . import netmodel as nm
from .config import MBPS, Scenario
from .contracts import TypeGrid, optimal_prices, valuation_array
from .errors import InfeasibleDemandError

QOS_RTOL = 1e-9


@dataclass
class LoadStats:
    """Expected per-(user, option) interference, serving power and delivery odds."""

    power: np.ndarray          # (N, M) slot power per unit of a = e^{r/w} - 1
    deliver: np.ndarray        # (N, M) probability a chunk gets through
    contract_deliver: np.ndarray  # (T, N) unlicensed delivery odds at the nearest BS, per profile


@dataclass
class Replication:
    scenario: Scenario
    sweep_value: int
    index: int
    seed: int
    scene: nm.NetworkScene
    gains: nm.GainMatrix
    plan: nm.ChannelPlan
    options: list
    grid: TypeGrid
    types: np.ndarray          # realised type index per user
    rates: np.ndarray          # required rate per type, bits/s
    alphas: np.ndarray
    betas: np.ndarray
    candidates: np.ndarray     # (N, M) reachable options
    nearest: np.ndarray
    activity: np.ndarray       # (T, W) activity samples for realised evaluation
    rng: np.random.Generator
    cache: dict = field(default_factory=dict)

    @property
    def num_users(self):
        return self.scene.num_users

    @property
    def chunks_per_user(self):
        m = self.scenario.matching
        n = math.ceil(m.file_size_bits / m.chunk_size_bits - 1e-12) if m.file_size_bits > 0 else 0
        return n


def replication_seed(base_seed, sweep_value, index):
    ss = np.random.SeedSequence(entropy=int(base_seed), spawn_key=(int(sweep_value), int(index)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _population_types(scenario, num_users, rng, grid):
    exp = scenario.experiment
    types = grid.sample(rng, num_users)
    if exp.type_preset is not None:
        types[min(exp.base_population, num_users):] = exp.type_preset - 1
    return types


def prepare(scenario, sweep_value, index):
    """Draw the scene, realised types and activity samples of one replication."""
    exp = scenario.experiment
    updates = {exp.sweep_variable: int(sweep_value)}
    scene_params = scenario.replace(scene=updates).scene
    seed = replication_seed(exp.base_seed, sweep_value, index)
    rng = np.random.default_rng(seed)
    scene = nm.generate_scene(scene_params, int(rng.integers(2 ** 63)))
    tp = scenario.types
    grid = TypeGrid(tp.thetas, tp.probs)
    types = _population_types(scenario, scene.num_users, rng, grid)
    return assemble(scenario, scene, types, seed, rng, sweep_value, index)


def assemble(scenario, scene, types, seed, rng=None, sweep_value=None, index=0):
    """Replication around a given scene and realised type profile."""
    rng = np.random.default_rng(seed) if rng is None else rng
    scene_params = scene.params
    gains = nm.compute_gains(scene)
    tp = scenario.types
    rates = np.asarray(tp.rates_mbps) * MBPS
    mp = scenario.matching
    plan = nm.build_channel_plan(scene_params, float(rates.max()), mp.quota_licensed,
                                 mp.quota_unlicensed)
    options = mt.build_options(plan)
    grid = TypeGrid(tp.thetas, tp.probs)
    types = np.asarray(types, dtype=int)
    if types.shape != (scene.num_users,) or (types.size and not
                                             (0 <= types.min() and types.max() < len(grid))):
        raise ValueError("types must hold one valid type index per user")
    alphas = np.asarray(tp.alphas)
    in_range = nm.candidate_bss(gains, scene_params.bs_range)        # (S, N)
    opt_bs = np.array([o.bs for o in options], dtype=int)
    candidates = in_range[opt_bs].T if options else np.zeros((scene.num_users, 0), bool)
    nearest = np.argmin(gains.distance, axis=0) if scene.num_users else np.zeros(0, int)
    activity = nm.sample_wifi_activity(rng, scene.num_waps, scenario.contract.activity_samples,
                                       scene_params.wifi_activity)
    value = scene.num_users if sweep_value is None else sweep_value
    return Replication(scenario, int(value), int(index), int(seed), scene, gains, plan,
                       options, grid, types, rates, alphas, 1.0 - alphas, candidates, nearest,
                       activity, rng)


def _option_arrays(rep):
    if "opt" not in rep.cache:
        bs = np.array([o.bs for o in rep.options], dtype=int)
        ch = np.array([o.channel for o in rep.options], dtype=int)
        lic = np.array([o.licensed for o in rep.options], dtype=bool)
        rep.cache["opt"] = (bs, ch, lic)
    return rep.cache["opt"]


def nominal_links(rep, profile):
    """Fractional full-load link set for a type profile (quota-clipped)."""
    plan, n_c = rep.plan, rep.chunks_per_user
    users = np.flatnonzero(rep.rates[profile] > 0)
    if users.size == 0:
        return None
    s = rep.nearest[users]
    per_user, chans, share = [], [], []
    for u_idx, bs in zip(users, s):
        unl, lic = plan.bs_channels(bs)
        k = profile[u_idx]
        if lic.size:
            per_user.append(np.full(lic.size, u_idx))
            chans.append(lic)
            share.append(np.full(lic.size, rep.alphas[k] * n_c / lic.size))
        if unl.size:
            per_user.append(np.full(unl.size, u_idx))
            chans.append(unl)
            share.append(np.full(unl.size, rep.betas[k] * n_c / unl.size))
    user = np.concatenate(per_user)
    chan = np.concatenate(chans)
    chunks = np.concatenate(share)
    bs = rep.nearest[user]
    keep = chunks > 0
    user, chan, chunks, bs = user[keep], chan[keep], chunks[keep], bs[keep]
    raw = np.zeros((plan.num_bs, plan.num_channels))
    np.add.at(raw, (bs, chan), chunks)
    clip = np.minimum(1.0, plan.quota / np.maximum(raw, 1e-300))
    chunks = chunks * clip[bs, chan]
    return nm.LinkSet(user, bs, chan, chunks, rep.rates[profile[user]])


def nominal_load(rep, profile):
    """Occupancy-weighted slot power per (BS, channel) under a profile's full load."""
    links = nominal_links(rep, profile)
    load = np.zeros((rep.plan.num_bs, rep.plan.num_channels))
    if links is None:
        return load
    prof, _ = nm.solve_links_or_cap(links, rep.gains, rep.plan, rep.scene.params)
    return nm.bs_channel_load(links, prof.power, rep.plan)


def _wifi(rep, activity):
    """(T, N, U) WiFi interference on every unlicensed channel at every user."""
    W = rep.gains.wap                                           # (W, N)
    U = rep.plan.unlicensed
    on = rep.scene.wap_channels[:, None] == np.arange(U)[None, :]   # (W, U)
    contrib = rep.scene.params.wap_power_w * W[:, :, None] * on[:, None, :]
    return np.einsum("tw,wnu->tnu", activity.astype(float), contrib)


def load_statistics(rep, profiles):
    """Average interference-driven quantities over ``profiles`` (each a type vector)."""
    N, M = rep.num_users, len(rep.options)
    bs, ch, lic = _option_arrays(rep)
    G = rep.gains.licensed_gain
    plan, params = rep.plan, rep.scene.params
    i_th = params.interference_threshold
    wifi = _wifi(rep, rep.activity)                             # (T, N, U)
    unl_idx = np.flatnonzero(~lic)
    unl_off = ch[unl_idx] - plan.licensed
    power = np.zeros((N, M))
    deliver = np.zeros((N, M))
    contract = np.zeros((len(profiles), N))
    own_gain = G[bs].T                                          # (N, M)
    users = np.arange(N)
    # nearest-BS unlicensed options per user
    near_mask = (bs[unl_idx][None, :] == rep.nearest[:, None])  # (N, Mu)
    near_count = np.maximum(near_mask.sum(1), 1)
    for t, profile in enumerate(profiles):
        load = nominal_load(rep, profile)
        total = G.T @ load                                      # (N, C)
        interf = total[:, ch] - own_gain * load[bs, ch]         # (N, M)
        extra = np.where(lic, 0.0, i_th)
        power += (plan.slot_noise[ch] + extra + interf) / own_gain
        ok = np.ones((N, M))
        if unl_idx.size:
            sensed = wifi[:, :, unl_off] + interf[None, :, unl_idx]   # (T, N, Mu)
            p_ok = (sensed <= i_th).mean(axis=0)
            ok[:, unl_idx] = p_ok
            contract[t] = (p_ok * near_mask).sum(1) / near_count
        deliver += ok
    n = max(len(profiles), 1)
    return LoadStats(power / n, deliver / n, contract)


def _menu_valuations(rep, contract_deliver):
    """Per-user valuation of each contract: (N, K) mean and standard error."""
    r = rep.rates / MBPS
    eta = rep.scenario.types.eta_v
    # rate of contract j in Mbps, per profile sample: (T, N, K)
    rate = r[None, None, :] * (rep.alphas[None, None, :]
                               + rep.betas[None, None, :] * contract_deliver[:, :, None])
    v = valuation_array(rate, r[None, None, :], eta)
    T = v.shape[0]
    se = v.std(axis=0, ddof=1) / math.sqrt(T) if T > 1 else np.zeros(v.shape[1:])
    return v.mean(axis=0), se


def sampled_profiles(rep, count):
    rng = np.random.default_rng([rep.seed, 1])
    return [rep.grid.sample(rng, rep.num_users) for _ in range(count)]


def information_view(rep, complete):
    """Load statistics and per-user menus under incomplete or complete information."""
    key = "complete" if complete else "bayes"
    if key not in rep.cache:
        if complete:
            profiles = [rep.types]
        else:
            profiles = sampled_profiles(rep, rep.scenario.contract.type_samples)
        stats = load_statistics(rep, profiles) if rep.num_users else None
        if stats is None:
            v = se = prices = np.zeros((0, len(rep.grid)))
        else:
            v, se = _menu_valuations(rep, stats.contract_deliver)
            prices, v = optimal_prices(v, rep.grid)
        rep.cache[key] = (stats, v, se, prices)
    return rep.cache[key]


def chunk_prices(rep, prices):
    """Per-chunk (licensed, unlicensed) price for each user's own-type contract."""
    rho = rep.scenario.contract.unlicensed_discount
    k = rep.types
    units = rep.chunks_per_user * (rep.alphas[k] + rho * rep.betas[k])
    own = prices[np.arange(rep.num_users), k] if rep.num_users else np.zeros(0)
    lic = np.where(units > 0, own / np.where(units > 0, units, 1.0), 0.0)
    return lic, rho * lic


def _pairs(rep):
    mp = rep.scenario.matching
    sizes = [[mp.file_size_bits]] * rep.num_users
    return mt.chunk_files(sizes, mp.chunk_size_bits, mp.pad_last_chunk, rep.types,
                          rep.grid.types)


def preference_inputs(rep, stats, prices):
    """User expected utility, BS gain and serving cost for every (user, option)."""
    bs, ch, lic = _option_arrays(rep)
    k = rep.types
    w = rep.plan.slot_bandwidth[ch]
    a = np.expm1(rep.rates[k][:, None] / w[None, :]) if rep.scene.params.log_base == "e" \
        else np.exp2(rep.rates[k][:, None] / w[None, :]) - 1.0
    power = a * stats.power
    r = (rep.rates / MBPS)[k]
    exp_rate = r[:, None] * stats.deliver
    value = valuation_array(exp_rate, r[:, None], rep.scenario.types.eta_v)
    theta = rep.grid.types[k]
    n_c = max(rep.chunks_per_user, 1)
    p_lic, p_unl = chunk_prices(rep, prices)
    price = np.where(lic[None, :], p_lic[:, None], p_unl[:, None])
    eu = theta[:, None] * value / n_c - price
    cost = rep.scenario.contract.cost_per_watt * power
    gamma = mt.bs_gamma(price, power, rep.scenario.contract.cost_per_watt)
    return eu, gamma, cost, power, price


def build_pairs_with_preferences(rep, eu, power):
    pairs = _pairs(rep)
    M = len(rep.options)
    ids = np.arange(M)
    per_user = {}
    for i in range(rep.num_users):
        reach = rep.candidates[i]
        per_user[i] = mt.user_preference_list(eu[i, reach], ids[reach], power[i, reach])
    for a in pairs:
        a.pref_list, a.utilities = per_user[a.user]
    return pairs


def match_by_preferences(rep, prices, stats):
    eu, gamma, cost, power, price = preference_inputs(rep, stats, prices)
    pairs = build_pairs_with_preferences(rep, eu, power)
    coeffs = rep.scenario.matching.priority_coeffs
    rankings = mt.build_rankings(pairs, rep.options, gamma, cost, coeffs)
    matching = mt.deferred_acceptance(pairs, rep.options, rankings)
    return pairs, matching, price


def random_matching(rep):
    """Chunks placed uniformly at random on reachable options with spare quota."""
    pairs = _pairs(rep)
    rng = np.random.default_rng([rep.seed, 2])
    spare = np.array([o.quota for o in rep.options], dtype=int)
    assignment = {a.id: None for a in pairs}
    accepted = {}
    for pos in rng.permutation(len(pairs)):
        a = pairs[pos]
        free = np.flatnonzero(rep.candidates[a.user] & (spare > 0))
        if free.size == 0:
            continue
        m = int(free[rng.integers(free.size)])
        spare[m] -= 1
        assignment[a.id] = m
        accepted.setdefault(m, []).append(a.id)
    for members in accepted.values():
        members.sort()
    return pairs, mt.Matching(assignment, accepted, proposals=len(pairs), rounds=1)


@dataclass
class Outcome:
    """Realised per-user results of one mechanism on one replication."""

    rate: np.ndarray           # bits/s
    utility: np.ndarray
    paid: np.ndarray
    licensed_bits: np.ndarray  # per user, integer bits
    unlicensed_bits: np.ndarray
    unmatched_bits: np.ndarray
    requested_bits: np.ndarray
    proposals: int = 0
    power_iterations: int = 0
    # joint targets were infeasible and the fallback power cap was applied
    power_capped: bool = False


def realised_outcome(rep, pairs, matching, price):
    """Solve the matched links jointly and measure rates, payments and traffic."""
    N = rep.num_users
    bs, ch, lic = _option_arrays(rep)
    params, plan = rep.scene.params, rep.plan
    requested = np.zeros(N, dtype=np.int64)
    lbits = np.zeros(N, dtype=np.int64)
    ubits = np.zeros(N, dtype=np.int64)
    paid = np.zeros(N)
    counts = {}
    for a in pairs:
        bits = int(round(a.chunk_size))
        requested[a.user] += bits
        m = matching.assignment.get(a.id)
        if m is None:
            continue
        if lic[m]:
            lbits[a.user] += bits
        else:
            ubits[a.user] += bits
        paid[a.user] += price[a.user, m]
        counts[(a.user, m)] = counts.get((a.user, m), 0) + 1
    unmatched = requested - lbits - ubits
    delivered = np.zeros(N)
    iterations = 0
    capped = False
    keys = [(u, m) for (u, m) in sorted(counts) if rep.rates[rep.types[u]] > 0]
    if keys:
        user = np.array([u for u, _ in keys])
        opt = np.array([m for _, m in keys])
        chunks = np.array([counts[key] for key in keys], dtype=float)
        links = nm.LinkSet(user, bs[opt], ch[opt], chunks, rep.rates[rep.types[user]])
        prof, capped = nm.solve_links_or_cap(links, rep.gains, plan, params)
        iterations = prof.iterations
        g = rep.gains.licensed_gain[links.bs, links.user]
        noise = plan.slot_noise[links.channel]
        width = plan.slot_bandwidth[links.channel]
        target = links.rate
        rate = np.empty(len(links))
        is_lic = plan.is_licensed(links.channel)
        if is_lic.any():
            r = nm.licensed_rate(prof.power[is_lic], g[is_lic], noise[is_lic],
                                 prof.interference[is_lic], width[is_lic], params.log_base)
            rate[is_lic] = np.minimum(r, target[is_lic])
        if (~is_lic).any():
            sel = ~is_lic
            wifi = nm.wifi_interference(rep.gains, rep.scene.wap_channels, rep.activity,
                                        links.user[sel], links.channel[sel] - plan.licensed,
                                        params.wap_power_w)              # (T, Lu)
            sensed = wifi + prof.interference[sel][None, :]
            r = nm.unlicensed_rate(prof.power[sel][None, :], g[sel][None, :],
                                   noise[sel][None, :], sensed, width[sel][None, :],
                                   params.interference_threshold, params.log_base)
            rate[sel] = np.minimum(r, target[sel][None, :]).mean(axis=0)
        np.add.at(delivered, links.user, rate * chunks)
    n_c = max(rep.chunks_per_user, 1)
    user_rate = delivered / n_c
    r_req = rep.rates[rep.types]
    value = valuation_array(user_rate / MBPS, r_req / MBPS, rep.scenario.types.eta_v)
    theta = rep.grid.types[rep.types]
    return Outcome(user_rate, theta * value - paid, paid, lbits, ubits, unmatched, requested,
                   matching.proposals, iterations, capped)


def uniform_prices(rep, prices):
    """Every user and type charged the mean of the proposed menu prices."""
    if prices.size == 0:
        return prices
    mean = float((prices * rep.grid.probs[None, :]).sum(axis=1).mean())
    return np.full_like(prices, mean)


def run_mechanism(rep, mechanism):
    """Run one mechanism on a prepared replication and return its :class:`Outcome`."""
    if rep.num_users == 0:
        z = np.zeros(0)
        zi = np.zeros(0, dtype=np.int64)
        return Outcome(z, z, z, zi, zi, zi, zi)
    if mechanism == "complete-info":
        stats, _, _, prices = information_view(rep, complete=True)
    else:
        stats, _, _, prices = information_view(rep, complete=False)
    if mechanism == "uniform-price":
        prices = uniform_prices(rep, prices)
    if mechanism == "random":
        _, _, _, _, price = preference_inputs(rep, stats, prices)
        pairs, matching = random_matching(rep)
    else:
        pairs, matching, price = match_by_preferences(rep, prices, stats)
    return realised_outcome(rep, pairs, matching, price)


def compute_metrics(outcome, types, num_types, rates):
    """Aggregate per-user results into record fields."""
    N = outcome.rate.size
    r_req = rates[types] if N else np.zeros(0)
    met = outcome.rate >= r_req * (1.0 - QOS_RTOL)
    by_type = lambda x: [int(x[types == k].sum()) for k in range(num_types)]  # noqa: E731
    return {
        "mean_rate": float(outcome.rate.mean()) if N else 0.0,
        "qos_fraction": float(met.mean()) if N else 0.0,
        "mean_user_utility": float(outcome.utility.mean()) if N else 0.0,
        "offloaded_traffic": int(outcome.unlicensed_bits.sum()),
        "licensed_traffic": int(outcome.licensed_bits.sum()),
        "unmatched_traffic": int(outcome.unmatched_bits.sum()),
        "requested_traffic": int(outcome.requested_bits.sum()),
        "offloaded_by_type": by_type(outcome.unlicensed_bits),
        "licensed_by_type": by_type(outcome.licensed_bits),
    }


def own_type_utilities(rep):
    """Realised utility of every contract for every user, plus a noise scale.

    Valuations use the realised opponent profile; prices are the menus built
    from sampled profiles.  Returns ``(utility (N, K), tolerance (N,))``.
    """
    _, v_bayes, se, prices = information_view(rep, complete=False)
    stats_real = load_statistics(rep, [rep.types])
    v_real, _ = _menu_valuations(rep, stats_real.contract_deliver)
    theta = rep.grid.types[rep.types]
    utility = theta[:, None] * v_real - prices
    tolerance = 3.0 * theta * se.max(axis=1)
    return utility, tolerance


def traffic_conserved(outcome):
    total = outcome.licensed_bits + outcome.unlicensed_bits + outcome.unmatched_bits
    return bool(np.array_equal(total, outcome.requested_bits))


def serving_cost(links, gains, plan, params, user, cost_per_watt=1.0):
    """Cost of the converged transmit power spent on ``user``'s chunks."""
    prof = nm.solve_links(links, gains, plan, params)
    mine = links.user == user
    return cost_per_watt * float((prof.power[mine] * links.chunks[mine]).sum())


__all__ = [
    "InfeasibleDemandError", "Outcome", "Replication", "compute_metrics", "information_view",
    "own_type_utilities", "prepare", "realised_outcome", "replication_seed", "run_mechanism",
    "serving_cost", "traffic_conserved",
]
