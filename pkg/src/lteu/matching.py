"""Many-to-one matching of file chunks to (BS, channel) slots.

Each requested file is cut into chunks; a chunk of user ``i`` is a
*pair* that proposes, in order of its owner's expected utility, to
*options* (a BS together with one channel, holding ``quota`` slots).

An option ranks its applicants by a promoted BS utility.  With expected
BS gain ``gamma`` and expected serving cost ``cost``, the promoted score is
``psi = gamma + cost / (theta * eta)`` where ``eta`` is the coefficient
of the applicant's priority class (class 1 gets the smallest ``eta`` and
hence the largest promotion).  Two applicants of the same class and the
same type are compared on ``gamma`` alone.

A pair proposes to a given option exactly once, and always with the same
remaining suffix, so its class at that option never changes.  The ranking
of an option over all of its potential applicants is therefore fixed
before the first round, which keeps the deferred-acceptance loop a plain
college-admissions instance: it terminates and its output is stable.
"""

from __future__ import annotations

import heapq
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, MatchingError

LICENSED = "licensed"
UNLICENSED = "unlicensed"


@dataclass(eq=False)
class UserSubfilePair:
    id: int
    user: int
    file: int
    chunk_index: int
    chunk_size: float
    type_index: int = 0
    theta: float = 1.0
    pref_list: tuple = ()
    # expected user utility of each pref_list entry
    utilities: tuple = ()
    cursor: int = 0

    @property
    def remaining(self):
        return self.pref_list[self.cursor:]

    def reject(self, option):
        """Drop ``option``, which must be the head of ``remaining``."""
        if self.cursor >= len(self.pref_list) or self.pref_list[self.cursor] != option:
            raise MatchingError(f"pair {self.id} was not proposing to option {option}")
        self.cursor += 1

    def reset(self):
        self.cursor = 0


@dataclass(eq=False)
class BsChannelPair:
    id: int
    bs: int
    channel: int
    band: str
    quota: int
    accepted: list = field(default_factory=list)

    @property
    def licensed(self):
        return self.band == LICENSED


@dataclass(frozen=True)
class PriorityAssignment:
    cls: int
    phi: int
    priority_coeff: float
    epsilon: int = 0


@dataclass
class Matching:
    assignment: dict           # pair id -> option id or None
    accepted: dict             # option id -> list of pair ids
    proposals: int = 0
    rounds: int = 0

    @property
    def unmatched(self):
        return sorted(a for a, m in self.assignment.items() if m is None)

    def validate(self, options):
        for m, members in self.accepted.items():
            if len(members) > options[m].quota:
                raise MatchingError(f"option {m} over quota")
            for a in members:
                if self.assignment.get(a) != m:
                    raise MatchingError(f"pair {a} and option {m} disagree")
        for a, m in self.assignment.items():
            if m is not None and a not in self.accepted.get(m, ()):
                raise MatchingError(f"pair {a} and option {m} disagree")
        return True

    def to_json(self):
        doc = {
            "assignment": {str(a): m for a, m in sorted(self.assignment.items()) if m is not None},
            "unmatched": self.unmatched,
            "proposals": self.proposals,
            "rounds": self.rounds,
        }
        return json.dumps(doc, indent=1)


def build_options(plan):
    """One option per usable (BS, channel); per BS, unlicensed channels come first."""
    usable = plan.usable()
    options = []
    for s in range(plan.num_bs):
        unl, lic = plan.bs_channels(s)
        for c in list(unl) + list(lic):
            if usable[s, c]:
                band = LICENSED if plan.is_licensed(c) else UNLICENSED
                options.append(BsChannelPair(len(options), s, int(c), band, int(plan.quota[c])))
    return options


def chunk_files(file_sizes, chunk_size, pad_last=False, types=None, thetas=None):
    """Split each user's file into chunks of ``chunk_size`` bits.

    ``file_sizes[i]`` is one size or a sequence of sizes for user ``i``.
    The last chunk keeps the remainder unless ``pad_last`` is set.
    """
    if chunk_size <= 0:
        raise ConfigError("chunk_size must be positive")
    pairs = []
    for user, sizes in enumerate(file_sizes):
        sizes = [sizes] if np.isscalar(sizes) else list(sizes)
        k = 0 if types is None else int(types[user])
        theta = 1.0 if thetas is None else float(thetas[k])
        for f, size in enumerate(sizes):
            if size < 0:
                raise ConfigError("file sizes must be non-negative")
            n = math.ceil(size / chunk_size - 1e-12) if size > 0 else 0
            for j in range(n):
                bits = chunk_size if pad_last else min(chunk_size, size - j * chunk_size)
                pairs.append(UserSubfilePair(len(pairs), user, f, j, float(bits), k, theta))
    return pairs


def user_preference_list(utilities, option_ids=None, secondary=None):
    """Options ordered by descending utility; negative-utility options dropped.

    Ties fall to ascending ``secondary`` (if given), then ascending option id.
    Returns ``(ids, utilities)`` as tuples.
    """
    u = np.asarray(utilities, dtype=float)
    ids = np.arange(u.size) if option_ids is None else np.asarray(option_ids)
    keep = u >= 0
    u, ids = u[keep], ids[keep]
    sec = np.zeros(u.size) if secondary is None else np.asarray(secondary, dtype=float)[keep]
    order = np.lexsort((ids, sec, -u))
    return tuple(int(i) for i in ids[order]), tuple(float(x) for x in u[order])


def _class_and_phi(pair, position, options):
    rest = pair.pref_list[position + 1:]
    phi = int(any(options[m].licensed for m in rest))
    if phi:
        return 3, 1
    target = pair.pref_list[position]
    if position == 0 and options[target].licensed:
        return 1, 0
    return 2, 0


def classify_priority(pair, target, options, coeffs=(1.0, 2.0, 4.0)):
    """Priority class of ``pair`` when it applies to ``target``.

    Class 3 when rejection would still leave a licensed option, class 1 when
    ``target`` is the licensed first choice with nothing licensed behind it,
    class 2 otherwise.
    """
    remaining = pair.remaining
    if target not in remaining:
        raise MatchingError(f"option {target} is not in the remaining list of pair {pair.id}")
    position = pair.cursor + remaining.index(target)
    cls, phi = _class_and_phi(pair, position, options)
    return PriorityAssignment(cls, phi, float(coeffs[cls - 1]))


def bs_gamma(price, power, cost_per_watt=1.0):
    """BS gain from serving a chunk: its price minus the power cost."""
    return price - cost_per_watt * power


def promotion(cost, theta, priority_coeff):
    denom = theta * priority_coeff
    if denom == 0:
        raise ConfigError("theta * priority_coeff must be non-zero")
    return cost / denom


def bs_utility(gamma, cost, theta, priority, epsilon=None):
    """``eps * gamma + (1 - eps) * (gamma + promotion)``; inputs are expectations."""
    eps = priority.epsilon if epsilon is None else epsilon
    psi = gamma + promotion(cost, theta, priority.priority_coeff)
    return eps * gamma + (1 - eps) * psi


def rank_applicants(gamma, cost, theta, coeff, cls, type_index, user, chunk):
    """Order (best first) of one option's applicants.

    Applicants are first sorted by promoted score.  Inside each group of the
    same class and type, the group's positions are then handed out by plain
    ``gamma``, so same-group comparisons ignore promotion.
    Ties: lower user id, then lower chunk index.
    """
    gamma = np.asarray(gamma, dtype=float)
    cost = np.asarray(cost, dtype=float)
    denom = np.asarray(theta, dtype=float) * np.asarray(coeff, dtype=float)
    if np.any(denom == 0):
        raise ConfigError("theta * priority_coeff must be non-zero")
    psi = gamma + cost / denom
    user = np.asarray(user)
    chunk = np.asarray(chunk)
    order = np.lexsort((chunk, user, -gamma, -psi))
    groups = defaultdict(list)
    for pos, idx in enumerate(order):
        groups[(int(cls[idx]), int(type_index[idx]))].append(pos)
    result = np.empty_like(order)
    for slots in groups.values():
        members = order[slots]
        members = members[np.lexsort((chunk[members], user[members], -gamma[members]))]
        result[slots] = members
    return result


def build_rankings(pairs, options, gamma, cost, coeffs=(1.0, 2.0, 4.0)):
    """Fixed rank of every potential applicant at every option.

    ``gamma`` and ``cost`` are (num_users, num_options) arrays of expected
    BS gain and serving cost.  Returns ``{option: {pair id: rank}}``.
    """
    per_option = defaultdict(list)
    for a in pairs:
        for pos, m in enumerate(a.pref_list):
            cls, _ = _class_and_phi(a, pos, options)
            per_option[m].append((a, cls))
    coeffs = np.asarray(coeffs, dtype=float)
    rankings = {}
    for m, entries in per_option.items():
        users = np.array([a.user for a, _ in entries])
        cls = np.array([c for _, c in entries])
        order = rank_applicants(
            gamma[users, m], cost[users, m], np.array([a.theta for a, _ in entries]),
            coeffs[cls - 1], cls, np.array([a.type_index for a, _ in entries]),
            users, np.array([a.chunk_index for a, _ in entries]))
        rankings[m] = {entries[idx][0].id: r for r, idx in enumerate(order)}
    return rankings


def deferred_acceptance(pairs, options, rankings):
    """Round-based deferred acceptance with quotas.

    Every free pair proposes to the head of its remaining list; every option
    keeps its ``quota`` best applicants (incumbents included) and rejects the
    rest, which then drop that option.  Stops when a round rejects nobody.
    """
    for a in pairs:
        a.reset()
    for m in options:
        m.accepted = []
    by_id = {a.id: a for a in pairs}
    # per option: heap of (-rank, pair id) so the worst incumbent is on top
    held = defaultdict(list)
    free = [a.id for a in pairs if a.pref_list]
    proposals = rounds = 0
    while free:
        rounds += 1
        incoming = defaultdict(list)
        for pid in free:
            incoming[by_id[pid].remaining[0]].append(pid)
            proposals += 1
        free = []
        for m in sorted(incoming):
            rank = rankings[m]
            heap = held[m]
            quota = options[m].quota
            for pid in sorted(incoming[m], key=rank.__getitem__):
                heapq.heappush(heap, (-rank[pid], pid))
                if len(heap) > quota:
                    _, out = heapq.heappop(heap)
                    loser = by_id[out]
                    loser.reject(m)
                    if loser.remaining:
                        free.append(out)
        free.sort()
    assignment = {a.id: None for a in pairs}
    accepted = {}
    for m, heap in held.items():
        members = sorted(pid for _, pid in heap)
        if members:
            accepted[m] = members
            options[m].accepted = list(members)
        for pid in members:
            assignment[pid] = m
    return Matching(assignment, accepted, proposals, rounds)


@dataclass
class StabilityReport:
    blocking: list

    @property
    def stable(self):
        return not self.blocking


def verify_bayesian_stability(matching, pairs, options, rankings, tol=0.0):
    """All (pair, option) blocking combinations of ``matching``.

    The pair must strictly prefer the option (by more than ``tol`` in expected
    utility when utilities are stored) and the option must have a free slot
    or hold someone it ranks below the pair.
    """
    blocking = []
    for a in pairs:
        current = matching.assignment.get(a.id)
        prefs = a.pref_list
        if current is None:
            stop, u_cur = len(prefs), 0.0
        else:
            stop = prefs.index(current)
            u_cur = a.utilities[stop] if a.utilities else None
        for pos in range(stop):
            m = prefs[pos]
            if a.utilities and u_cur is not None and not a.utilities[pos] > u_cur + tol:
                continue
            members = matching.accepted.get(m, [])
            if options[m].quota == 0:
                continue
            rank = rankings[m]
            if len(members) < options[m].quota or max(rank[b] for b in members) > rank[a.id]:
                blocking.append((a.id, m))
    return StabilityReport(blocking)


def matching_to_allocation(matching, pairs, options, num_users):
    """Per-user licensed and unlicensed shares of requested bits."""
    total = np.zeros(num_users)
    lic = np.zeros(num_users)
    unl = np.zeros(num_users)
    for a in pairs:
        total[a.user] += a.chunk_size
        m = matching.assignment.get(a.id)
        if m is None:
            continue
        if options[m].licensed:
            lic[a.user] += a.chunk_size
        else:
            unl[a.user] += a.chunk_size
    with np.errstate(invalid="ignore", divide="ignore"):
        alpha = np.where(total > 0, lic / total, 0.0)
        beta = np.where(total > 0, unl / total, 0.0)
    return alpha, beta


def preferences_to_json(pairs):
    rows = [{"pair": a.id, "user": a.user, "chunk": a.chunk_index,
             "prefs": list(a.pref_list), "utilities": list(a.utilities)} for a in pairs]
    return json.dumps(rows)
