"""Geometry, path-loss gains, coupled transmit powers and achievable rates.

Radio model
-----------
Licensed resource blocks are shared by ``licensed_reuse`` BSs each: BS
``s`` owns block ``c`` iff ``s % G == c % G`` with ``G = num_bs // reuse``.
Every BS may use every unlicensed channel; each WAP sits on one channel.
A (BS, channel) pair is divided into ``quota`` equal slots, and a file
chunk served there occupies one slot and is streamed at the user's
required rate.

Powers follow the coupled target-rate system: the power on each link is
whatever reaches its target SINR given the interference produced by the
other links, so every BS power depends on all the others.  Interference on
a channel comes from the other BSs that carry load on it, weighted by slot
occupancy.  On unlicensed channels the BS budgets for the listen-before-talk
threshold as extra interference, and the link is silent whenever the
sensed interference exceeds it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from .config import SceneParams
from .errors import ConfigError, InfeasibleDemandError

D_MIN = 1.0  # meters; path-loss distance floor
POWER_TOL = 1e-9
POWER_MAX_ITER = 10_000
# capped solves try a direct solve on the uncapped links this often
ACTIVE_SET_EVERY = 200
SCENE_FORMAT = "lteu-scene"
SCENE_VERSION = 1


def _log(x, log_base):
    return np.log1p(x) if log_base == "e" else np.log2(1.0 + x)


def _exp(x, log_base):
    """Inverse of ``_log``: SNR needed for ``x`` units of spectral efficiency."""
    return np.expm1(x) if log_base == "e" else np.exp2(x) - 1.0


@dataclass(frozen=True, eq=False)
class NetworkScene:
    """Immutable node placement plus the radio parameters it was drawn with."""

    bs_positions: np.ndarray
    wap_positions: np.ndarray
    user_positions: np.ndarray
    wap_channels: np.ndarray
    params: SceneParams = field(default_factory=SceneParams)
    seed: int | None = None

    def __post_init__(self):
        for name in ("bs_positions", "wap_positions", "user_positions"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(-1, 2)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        ch = np.asarray(self.wap_channels, dtype=int).reshape(-1)
        ch.setflags(write=False)
        object.__setattr__(self, "wap_channels", ch)
        side = self.params.area_side
        for name in ("bs_positions", "wap_positions", "user_positions"):
            arr = getattr(self, name)
            if arr.size and (arr.min() < 0 or arr.max() > side):
                raise ConfigError(f"{name} outside the [0, {side}] square")

    area_side = property(lambda self: self.params.area_side)
    path_loss_exponent = property(lambda self: self.params.path_loss_exponent)
    noise_psd = property(lambda self: self.params.noise_psd_dbm_hz)
    licensed_rbs = property(lambda self: self.params.licensed_rbs)
    unlicensed_channels = property(lambda self: self.params.unlicensed_channels)
    bs_range = property(lambda self: self.params.bs_range)
    wap_range = property(lambda self: self.params.wap_range)

    @property
    def num_bs(self):
        return len(self.bs_positions)

    @property
    def num_waps(self):
        return len(self.wap_positions)

    @property
    def num_users(self):
        return len(self.user_positions)

    def to_json(self):
        return json.dumps({
            "format": SCENE_FORMAT,
            "version": SCENE_VERSION,
            "seed": self.seed,
            "params": {k: v for k, v in vars(self.params).items()},
            "bs_positions": self.bs_positions.tolist(),
            "wap_positions": self.wap_positions.tolist(),
            "user_positions": self.user_positions.tolist(),
            "wap_channels": self.wap_channels.tolist(),
        }, indent=1)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("format") != SCENE_FORMAT or doc.get("version") != SCENE_VERSION:
            raise ConfigError("not a version-1 lteu scene document")
        return cls(
            bs_positions=np.array(doc["bs_positions"], dtype=float),
            wap_positions=np.array(doc["wap_positions"], dtype=float),
            user_positions=np.array(doc["user_positions"], dtype=float),
            wap_channels=np.array(doc["wap_channels"], dtype=int),
            params=SceneParams(**doc["params"]),
            seed=doc.get("seed"),
        )


def generate_scene(params, seed):
    """Drop BSs, WAPs and users uniformly in the square; deterministic in ``seed``."""
    params.validate()
    rng = np.random.default_rng(seed)
    side = params.area_side
    bs = rng.uniform(0.0, side, size=(params.num_bs, 2))
    waps = rng.uniform(0.0, side, size=(params.num_waps, 2))
    users = rng.uniform(0.0, side, size=(params.num_users, 2))
    n_ch = max(params.unlicensed_channels, 1)
    wap_channels = rng.integers(0, n_ch, size=params.num_waps)
    return NetworkScene(bs, waps, users, wap_channels, params=params, seed=seed)


def channel_gain(tx, rx, exponent, d_min=D_MIN):
    """Linear power gain ``max(d, d_min) ** -exponent``; broadcasts over points."""
    tx = np.asarray(tx, dtype=float)
    rx = np.asarray(rx, dtype=float)
    d = np.sqrt(np.sum((tx - rx) ** 2, axis=-1))
    return np.maximum(d, d_min) ** (-float(exponent))


@dataclass(frozen=True, eq=False)
class GainMatrix:
    licensed_gain: np.ndarray    # (S, N) BS -> user
    unlicensed_gain: np.ndarray  # (S + W, N): BS rows first, then WAP rows
    distance: np.ndarray         # (S, N) BS -> user, meters

    @property
    def bs(self):
        return self.licensed_gain

    @property
    def wap(self):
        return self.unlicensed_gain[self.licensed_gain.shape[0]:]


def compute_gains(scene):
    n = scene.path_loss_exponent
    users = scene.user_positions[None, :, :]
    bs = channel_gain(scene.bs_positions[:, None, :], users, n)
    wap = channel_gain(scene.wap_positions[:, None, :], users, n)
    dist = np.sqrt(((scene.bs_positions[:, None, :] - users) ** 2).sum(-1))
    bs = bs.reshape(scene.num_bs, scene.num_users)
    wap = wap.reshape(scene.num_waps, scene.num_users)
    return GainMatrix(bs, np.vstack([bs, wap]), dist.reshape(scene.num_bs, scene.num_users))


def candidate_bss(gains, bs_range):
    """Boolean (S, N): BSs within range of each user, nearest BS as fallback."""
    within = gains.distance <= bs_range
    if within.size:
        nearest = np.argmin(gains.distance, axis=0)
        within[nearest, np.arange(within.shape[1])] = True
    return within


@dataclass(frozen=True, eq=False)
class ChannelPlan:
    """Channel ownership, quotas and per-slot bandwidth/noise.

    Channels ``0..R-1`` are licensed blocks, ``R..R+U-1`` unlicensed.
    """

    num_bs: int
    licensed: int
    unlicensed: int
    owner_group: np.ndarray      # (R,) group owning each licensed block
    bs_group: np.ndarray         # (S,) group of each BS
    quota: np.ndarray            # (R+U,) slots per (BS, channel)
    slot_bandwidth: np.ndarray   # (R+U,) Hz
    slot_noise: np.ndarray       # (R+U,) W

    @property
    def num_channels(self):
        return self.licensed + self.unlicensed

    def is_licensed(self, channel):
        return np.asarray(channel) < self.licensed

    def bs_channels(self, s):
        lic = np.flatnonzero(self.owner_group == self.bs_group[s])
        unl = np.arange(self.licensed, self.num_channels)
        return unl, lic

    def usable(self):
        """Boolean (S, R+U): which channels each BS may transmit on."""
        use = np.ones((self.num_bs, self.num_channels), dtype=bool)
        use[:, :self.licensed] = self.bs_group[:, None] == self.owner_group[None, :]
        return use


def nominal_quota(bandwidth, nominal_snr_db, demand, log_base="e"):
    """Slots per channel: capacity at the nominal SNR over the per-chunk demand."""
    if demand <= 0:
        return 0
    snr = 10.0 ** (nominal_snr_db / 10.0)
    capacity = bandwidth * float(_log(snr, log_base))
    return int(math.floor(capacity / demand + 1e-12))


def build_channel_plan(params, max_rate, quota_licensed=None, quota_unlicensed=None):
    """Channel plan for a scene; ``max_rate`` (bits/s) sizes the default quotas."""
    S, R, U = params.num_bs, params.licensed_rbs, params.unlicensed_channels
    groups = max(1, S // params.licensed_reuse)
    owner = np.arange(R) % groups
    bs_group = np.arange(S) % groups
    w_l, w_u = params.rb_bandwidth_hz, params.unlicensed_channel_hz
    q_l = quota_licensed if quota_licensed is not None else nominal_quota(
        w_l, params.nominal_snr_db, max_rate, params.log_base)
    q_u = quota_unlicensed if quota_unlicensed is not None else nominal_quota(
        w_u, params.nominal_snr_db, max_rate, params.log_base)
    quota = np.array([q_l] * R + [q_u] * U, dtype=int)
    width = np.array([w_l] * R + [w_u] * U, dtype=float)
    slot_bw = width / np.maximum(quota, 1)
    return ChannelPlan(S, R, U, owner, bs_group, quota, slot_bw,
                       params.noise_psd_w_hz * slot_bw)


@dataclass(frozen=True, eq=False)
class LinkSet:
    """Served links: ``chunks`` slots of ``(bs, channel)`` streamed to ``user``.

    ``chunks`` may be fractional for the nominal load model.
    """

    user: np.ndarray
    bs: np.ndarray
    channel: np.ndarray
    chunks: np.ndarray
    rate: np.ndarray  # per-chunk target, bits/s

    def __len__(self):
        return len(self.user)


@dataclass(frozen=True, eq=False)
class PowerProfile:
    """Converged per-link powers and the interference they induce."""

    power: np.ndarray
    interference: np.ndarray
    iterations: int
    residual: float
    links: LinkSet | None = None

    def as_matrix(self, num_bs, num_users, mask=None):
        """Per (BS, user) power, summing a user's links at the same BS."""
        out = np.zeros((num_bs, num_users))
        if self.links is not None:
            keep = np.ones(len(self.links), dtype=bool) if mask is None else mask
            np.add.at(out, (self.links.bs[keep], self.links.user[keep]), self.power[keep])
        return out


def solve_power_profile(serving_gain, required_rates, bandwidth, noise_power, coupling,
                        extra_interference=0.0, power_cap=None, log_base="e",
                        tol=POWER_TOL, max_iter=POWER_MAX_ITER):
    """Jacobi fixed point of ``p = (e^{r/w} - 1)(noise + extra + C p) / g``.

    ``coupling`` is an (L, L) array or a callable mapping a power vector to the
    interference vector.  Raises :class:`InfeasibleDemandError` when the
    iteration does not settle within ``max_iter`` steps (demands mutually
    unsupportable) unless a power cap keeps it bounded.
    """
    g = np.asarray(serving_gain, dtype=float)
    r = np.asarray(required_rates, dtype=float)
    if np.any(r < 0):
        raise ValueError("required rates must be non-negative")
    a = _exp(r / np.asarray(bandwidth, dtype=float), log_base)
    base = np.asarray(noise_power, dtype=float) + extra_interference
    apply = coupling if callable(coupling) else (lambda p, C=np.asarray(coupling): C @ p)
    scale = a / g
    p = np.zeros_like(g)
    interference = np.zeros_like(g)
    residual = 0.0
    for it in range(1, max_iter + 1):
        interference = apply(p)
        new = scale * (base + interference)
        if power_cap is not None:
            new = np.minimum(new, power_cap)
        top = float(np.max(np.abs(new))) if new.size else 0.0
        if not np.isfinite(top) or top > 1e30:
            raise InfeasibleDemandError("power iteration diverged", it, math.inf)
        residual = float(np.max(np.abs(new - p))) / top if top > 0 else 0.0
        p = new
        if residual <= tol:
            interference = apply(p)
            return PowerProfile(p, interference, it, residual)
        if power_cap is not None and it % ACTIVE_SET_EVERY == 0:
            found = _active_set_solve(p, scale, base, apply, power_cap, tol)
            if found is not None:
                return PowerProfile(found[0], apply(found[0]), it, found[1])
    raise InfeasibleDemandError(
        f"power iteration did not converge in {max_iter} steps", max_iter, residual)


def _active_set_solve(lower, scale, base, apply, cap, tol, rounds=5):
    """Direct solve of the capped fixed point, or ``None`` if it does not verify.

    ``lower`` is a Jacobi iterate from zero, hence a lower bound on the fixed
    point: links already at the cap stay there.  The rest satisfy a linear
    system, solved matrix-free.
    """
    capped = lower >= cap * (1.0 - 1e-12)
    base = np.broadcast_to(base, lower.shape)
    for _ in range(rounds):
        free = np.flatnonzero(~capped)
        if free.size == 0:
            break
        fixed = np.where(capped, cap, 0.0)
        rhs = scale[free] * (base[free] + apply(fixed)[free])

        def matvec(x, free=free):
            full = np.zeros_like(lower)
            full[free] = x
            return x - scale[free] * apply(full)[free]

        op = LinearOperator((free.size, free.size), matvec=matvec, dtype=float)
        x, info = gmres(op, rhs, x0=lower[free], rtol=1e-13, atol=0.0, maxiter=50)
        if info != 0 or not np.all(np.isfinite(x)):
            return None
        over = x > cap
        if over.any():
            capped[free[over]] = True
            continue
        p = np.where(capped, cap, 0.0)
        p[free] = np.maximum(x, 0.0)
        check = np.minimum(scale * (base + apply(p)), cap)
        top = float(np.max(np.abs(check)))
        residual = float(np.max(np.abs(check - p))) / top if top > 0 else 0.0
        return (check, residual) if residual <= tol else None
    return None


def link_coupling(links, gains, plan):
    """Interference operator for a link set under slot-occupancy sharing.

    Link ``l`` sees ``sum g[s', u_l] * n_l' * p_l' / q_c`` over links ``l'`` on
    the same channel ``c`` at a different BS ``s'``.
    """
    G = gains.licensed_gain
    S, C = plan.num_bs, plan.num_channels
    q = np.maximum(plan.quota, 1).astype(float)
    weight = links.chunks / q[links.channel]
    cols = G[:, links.user]                      # (S, L)
    own = G[links.bs, links.user]

    def apply(p):
        load = np.zeros((S, C))
        np.add.at(load, (links.bs, links.channel), weight * p)
        per_link = load[:, links.channel]        # (S, L)
        return np.einsum("sl,sl->l", cols, per_link) - own * load[links.bs, links.channel]

    return apply


def dense_coupling(links, gains, plan):
    """Explicit (L, L) matrix equivalent of :func:`link_coupling`."""
    G = gains.licensed_gain
    q = np.maximum(plan.quota, 1).astype(float)
    same = links.channel[:, None] == links.channel[None, :]
    other = links.bs[:, None] != links.bs[None, :]
    cross = G[links.bs[None, :], links.user[:, None]]
    return same * other * cross * (links.chunks / q[links.channel])[None, :]


def bs_channel_load(links, power, plan):
    """Occupancy-weighted slot power ``sum n p / q`` per (BS, channel)."""
    q = np.maximum(plan.quota, 1).astype(float)
    load = np.zeros((plan.num_bs, plan.num_channels))
    np.add.at(load, (links.bs, links.channel), links.chunks * power / q[links.channel])
    return load


def solve_links(links, gains, plan, params, power_cap=None):
    """Solve the coupled power system for a link set under the scene's radio model.

    ``power_cap`` overrides ``params.power_cap_w`` when given.
    """
    lic = plan.is_licensed(links.channel)
    extra = np.where(lic, 0.0, params.interference_threshold)
    profile = solve_power_profile(
        gains.licensed_gain[links.bs, links.user], links.rate,
        plan.slot_bandwidth[links.channel], plan.slot_noise[links.channel],
        link_coupling(links, gains, plan), extra_interference=extra,
        power_cap=params.power_cap_w if power_cap is None else power_cap,
        log_base=params.log_base)
    return PowerProfile(profile.power, profile.interference, profile.iterations,
                        profile.residual, links)


def solve_links_or_cap(links, gains, plan, params):
    """:func:`solve_links`, falling back to the scene's fallback cap when infeasible.

    Returns ``(profile, capped)``.
    """
    try:
        return solve_links(links, gains, plan, params), False
    except InfeasibleDemandError:
        return solve_links(links, gains, plan, params, params.fallback_power_cap_w), True


def shannon_rate(power, gain, noise, interference, bandwidth, log_base="e"):
    sinr = np.asarray(power) * np.asarray(gain) / (np.asarray(noise) + np.asarray(interference))
    return np.asarray(bandwidth) * _log(sinr, log_base)


def licensed_rate(power, gain, noise, interference, bandwidth, log_base="e"):
    """Licensed-band rate ``w log(1 + p g / (noise + I))``."""
    return shannon_rate(power, gain, noise, interference, bandwidth, log_base)


def unlicensed_rate(power, gain, noise, interference, bandwidth, i_th, log_base="e"):
    """Unlicensed rate; zero whenever the sensed interference exceeds ``i_th``."""
    rate = shannon_rate(power, gain, noise, interference, bandwidth, log_base)
    return np.where(np.asarray(interference) > i_th, 0.0, rate)


def sample_wifi_activity(rng, num_waps, num_slots, p_active):
    """Independent per-slot Bernoulli activity, shape (num_slots, num_waps)."""
    return rng.random((num_slots, num_waps)) < p_active


def wifi_interference(gains, wap_channels, activity, users, channels, wap_power):
    """WiFi interference per activity slot on (user, channel) pairs: (T, L).

    ``channels`` are unlicensed channel offsets (0..U-1).
    """
    W = gains.wap
    users = np.asarray(users)
    channels = np.asarray(channels)
    if W.shape[0] == 0:
        return np.zeros((activity.shape[0], len(users)))
    on_channel = wap_channels[:, None] == channels[None, :]            # (W, L)
    contrib = wap_power * W[:, users] * on_channel                       # (W, L)
    return activity.astype(float) @ contrib


def expected_rate(alpha, beta, licensed_rates, unlicensed_rates):
    """Monte-Carlo estimate of ``alpha E[R_lic] + beta E[R_unl]`` and its standard error.

    The rate arrays hold one value per sample (time slot and/or sampled
    opponent types).
    """
    if alpha == 0 and beta == 0:
        return 0.0, 0.0
    lic = np.atleast_1d(np.asarray(licensed_rates, dtype=float))
    unl = np.atleast_1d(np.asarray(unlicensed_rates, dtype=float))
    if lic.size == 0 or unl.size == 0:
        raise ValueError("sample sets must be non-empty")
    if lic.size == unl.size:
        combined = alpha * lic + beta * unl
        se = combined.std(ddof=1) / math.sqrt(combined.size) if combined.size > 1 else 0.0
        return float(combined.mean()), float(se)
    mean = alpha * lic.mean() + beta * unl.mean()
    var = 0.0
    if lic.size > 1:
        var += alpha ** 2 * lic.var(ddof=1) / lic.size
    if unl.size > 1:
        var += beta ** 2 * unl.var(ddof=1) / unl.size
    return float(mean), float(math.sqrt(var))
