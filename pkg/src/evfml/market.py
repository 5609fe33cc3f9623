"""Stochastic agent-based market model with mimesis.

N agents carry a propensity state X_i in [-1, 1].  Good/bad news arrive as
Poisson events and kick X_i by eps_plus/eps_minus; between arrivals the
state decays exponentially at rate gamma.  Reaching |X_i| >= 1 triggers an
immediate buy/sell and a reset to 0.  Aggregate buy/sell rates R+- are
reported every t_rep and feed back into the arrival rates:

    nu_pm = nu_ex_pm + g * R_pm

Snapshots for manifold learning are the agent-state vectors sorted
ascending (agents are exchangeable, so the sorted vector is an empirical
ICDF and makes Euclidean distances permutation-invariant).
"""

from dataclasses import dataclass, replace

import numpy as np

from .accel import njit
from .dataset import Dataset

__all__ = [
    "MarketParams",
    "MarketState",
    "effective_rates",
    "step_interval",
    "gaussian_ic",
    "simulate",
    "MarketBifurcationSampling",
    "MarketControlSampling",
    "sample_dataset",
    "MarketCoarseEvolver",
    "is_blown",
    "IC_SIGMA",
    "BLOWUP_LEVEL",
    "RATE_CAP",
]

IC_SIGMA = 0.32
BLOWUP_LEVEL = 0.5
# In the runaway (blow-up) regime the trigger cascade multiplies the
# arrival rates every interval; past this effective-rate level the mean is
# committed to cross BLOWUP_LEVEL and stepping further only burns time.
RATE_CAP = 500.0


@dataclass(frozen=True)
class MarketParams:
    n_agents: int = 5000
    eps_plus: float = 0.075
    eps_minus: float = -0.072
    nu_ex_plus: float = 20.0
    nu_ex_minus: float = 20.0
    gamma: float = 1.0
    g: float = 41.0
    t_rep: float = 0.25

    def __post_init__(self):
        if self.n_agents < 1:
            raise ValueError("n_agents must be >= 1")
        if self.nu_ex_plus < 0 or self.nu_ex_minus < 0 or self.g < 0:
            raise ValueError("rates must be non-negative")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.t_rep <= 0:
            raise ValueError("t_rep must be positive")
        if not (self.eps_plus > 0 > self.eps_minus):
            raise ValueError("need eps_plus > 0 > eps_minus")


@dataclass
class MarketState:
    agent_states: np.ndarray
    rate_plus: float = 0.0
    rate_minus: float = 0.0
    time: float = 0.0

    def __post_init__(self):
        self.agent_states = np.asarray(self.agent_states, dtype=float)
        if self.rate_plus < 0 or self.rate_minus < 0:
            raise ValueError("reported rates must be non-negative")

    @property
    def mean(self) -> float:
        return float(np.mean(self.agent_states))


def effective_rates(state: MarketState, params: MarketParams):
    """Mimetic arrival rates nu_pm = nu_ex_pm + g * R_pm."""
    return (
        params.nu_ex_plus + params.g * state.rate_plus,
        params.nu_ex_minus + params.g * state.rate_minus,
    )


@njit
def _advance_interval(states, counts_p, counts_m, times_p, off_p, times_m, off_m,
                      tbuf, jbuf, eps_p, eps_m, gamma, t_rep):
    """Advance every agent through one reporting interval (in place).

    Arrival times are uniform in [0, t_rep) given their Poisson counts;
    each agent's merged event list is replayed in time order with exact
    exponential decay between events.  Returns (n_buy, n_sell).
    """
    n_buy = 0
    n_sell = 0
    for i in range(states.shape[0]):
        kp = counts_p[i]
        km = counts_m[i]
        k = kp + km
        x = states[i]
        if k == 0:
            states[i] = x * np.exp(-gamma * t_rep)
            continue
        for a in range(kp):
            tbuf[a] = times_p[off_p[i] + a]
            jbuf[a] = eps_p
        for a in range(km):
            tbuf[kp + a] = times_m[off_m[i] + a]
            jbuf[kp + a] = eps_m
        for a in range(1, k):
            tv = tbuf[a]
            jv = jbuf[a]
            b = a - 1
            while b >= 0 and tbuf[b] > tv:
                tbuf[b + 1] = tbuf[b]
                jbuf[b + 1] = jbuf[b]
                b -= 1
            tbuf[b + 1] = tv
            jbuf[b + 1] = jv
        t_cur = 0.0
        for a in range(k):
            x = x * np.exp(-gamma * (tbuf[a] - t_cur))
            t_cur = tbuf[a]
            x = x + jbuf[a]
            if x >= 1.0:
                n_buy += 1
                x = 0.0
            elif x <= -1.0:
                n_sell += 1
                x = 0.0
        states[i] = x * np.exp(-gamma * (t_rep - t_cur))
    return n_buy, n_sell


def step_interval(state: MarketState, params: MarketParams, rng: np.random.Generator) -> MarketState:
    """Advance one reporting interval with rates frozen at its start."""
    nu_p, nu_m = effective_rates(state, params)
    n = params.n_agents
    counts_p = rng.poisson(nu_p * params.t_rep, n)
    counts_m = rng.poisson(nu_m * params.t_rep, n)
    times_p = rng.random(int(counts_p.sum())) * params.t_rep
    times_m = rng.random(int(counts_m.sum())) * params.t_rep
    off_p = np.zeros(n, dtype=np.int64)
    off_m = np.zeros(n, dtype=np.int64)
    np.cumsum(counts_p[:-1], out=off_p[1:])
    np.cumsum(counts_m[:-1], out=off_m[1:])
    kmax = int((counts_p + counts_m).max()) if n else 0
    tbuf = np.empty(max(kmax, 1))
    jbuf = np.empty(max(kmax, 1))
    states = state.agent_states.copy()
    n_buy, n_sell = _advance_interval(
        states, counts_p.astype(np.int64), counts_m.astype(np.int64),
        times_p, off_p, times_m, off_m, tbuf, jbuf,
        params.eps_plus, params.eps_minus, params.gamma, params.t_rep,
    )
    return MarketState(
        states,
        rate_plus=(n_buy / n) / params.t_rep,
        rate_minus=(n_sell / n) / params.t_rep,
        time=state.time + params.t_rep,
    )


def is_blown(state: MarketState, params: MarketParams) -> bool:
    """Blow-up test: mean past the reporting level, or rates in the cascade."""
    if state.mean > BLOWUP_LEVEL:
        return True
    nu_p, nu_m = effective_rates(state, params)
    return max(nu_p, nu_m) > RATE_CAP


def gaussian_ic(mu: float, n_agents: int, rng: np.random.Generator) -> MarketState:
    """X_i ~ Normal(mu, 0.32^2) resampled until |X_i| < 1; R_pm start at 0."""
    x = rng.normal(mu, IC_SIGMA, n_agents)
    bad = np.abs(x) >= 1.0
    while bad.any():
        x[bad] = rng.normal(mu, IC_SIGMA, int(bad.sum()))
        bad = np.abs(x) >= 1.0
    return MarketState(x)


def simulate(state: MarketState, n_intervals: int, params: MarketParams,
             rng: np.random.Generator, stop_on_blowup: bool = True):
    """Run ``n_intervals`` reporting intervals from ``state``.

    Returns (states, means, blow_index): the trajectory of MarketStates
    (including the initial one), the means at interval boundaries, and the
    first interval index at which the mean exceeded the blow-up level
    (None if it never did).  Past that level the mimetic feedback makes the
    event count grow explosively, so by default the run stops there; the
    dataset rules never use later points anyway.
    """
    if n_intervals < 0:
        raise ValueError("n_intervals must be non-negative")
    states = [state]
    means = [state.mean]
    blow_index = None
    cur = state
    for k in range(1, n_intervals + 1):
        cur = step_interval(cur, params, rng)
        states.append(cur)
        means.append(cur.mean)
        if blow_index is None and is_blown(cur, params):
            blow_index = k
            if stop_on_blowup:
                break
    return states, np.asarray(means), blow_index


# ---------------------------------------------------------------------------
# Dataset sampling.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MarketBifurcationSampling:
    """Snapshots over the mimesis-coupling (g) space.

    Each trajectory starts from a Gaussian IC and runs 20 reporting
    intervals; the snapshots at the 10th and final interval are kept.  If
    the mean blows past 0.5 earlier, the snapshot at the blow-up interval
    and the one at half that time are kept instead.
    """

    n_trajectories: int = 2500
    mu_range: tuple = (0.0, 0.45)
    g_range: tuple = (38.0, 46.0)
    n_intervals: int = 20

    def __post_init__(self):
        if self.n_trajectories < 1 or self.n_intervals < 2:
            raise ValueError("need at least one trajectory and two intervals")
        for lo, hi in (self.mu_range, self.g_range):
            if not (hi >= lo):
                raise ValueError("sampling ranges must satisfy high >= low")


@dataclass(frozen=True)
class MarketControlSampling:
    """Dense local snapshots over the control-parameter (nu_ex_minus) space."""

    g: float = 41.0
    mu_values: tuple = tuple(np.linspace(0.2, 0.4, 11).tolist())
    nu_minus_values: tuple = tuple(np.linspace(19.0, 21.0, 31).tolist())
    n_intervals: int = 40

    def __post_init__(self):
        if len(self.mu_values) == 0 or len(self.nu_minus_values) == 0:
            raise ValueError("empty sampling grid")
        if self.n_intervals < 1:
            raise ValueError("n_intervals must be positive")


def sample_dataset(spec, params: MarketParams, seed: int) -> Dataset:
    """Generate sorted agent-state snapshot rows; reproducible per seed."""
    rng = np.random.default_rng(seed)
    rows = []
    tags = []
    if isinstance(spec, MarketBifurcationSampling):
        mus = rng.uniform(*spec.mu_range, size=spec.n_trajectories)
        gs = rng.uniform(*spec.g_range, size=spec.n_trajectories)
        for i in range(spec.n_trajectories):
            p = replace(params, g=gs[i])
            states, _, blow = simulate(gaussian_ic(mus[i], p.n_agents, rng),
                                       spec.n_intervals, p, rng)
            if blow is None:
                keep = (spec.n_intervals // 2, spec.n_intervals)
            else:
                keep = (max(blow // 2, 1), blow)
            for k in keep:
                rows.append(np.sort(states[k].agent_states))
                tags.append(gs[i])
        return Dataset(np.asarray(rows), np.asarray(tags), "g")
    if isinstance(spec, MarketControlSampling):
        for mu in spec.mu_values:
            for nu in spec.nu_minus_values:
                p = replace(params, g=spec.g, nu_ex_minus=nu)
                states, _, blow = simulate(gaussian_ic(mu, p.n_agents, rng),
                                           spec.n_intervals, p, rng)
                last = spec.n_intervals if blow is None else blow
                for k in range(1, last + 1):
                    rows.append(np.sort(states[k].agent_states))
                    tags.append(nu)
        return Dataset(np.asarray(rows), np.asarray(tags), "nu_ex_minus")
    raise TypeError(f"unknown sampling spec {type(spec)!r}")


# ---------------------------------------------------------------------------
# Coarse-timestepper hook.
# ---------------------------------------------------------------------------

def _replica_rng(seed, replica: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(replica)])


class MarketCoarseEvolver:
    """Ensemble evolver over sorted agent-state rows.

    ``lam`` binds to g and ``u`` to nu_ex_minus.  Every replica starts from
    the same lifted microstate (clipped into the open interval (-1, 1),
    with reported rates reset to zero) and evolves with its own RNG stream
    derived from (seed, replica); results are bitwise reproducible.
    """

    def __init__(self, params: MarketParams):
        self.params = params

    def _bind(self, lam, u) -> MarketParams:
        p = self.params
        if lam is not None:
            p = replace(p, g=float(lam))
        if u is not None:
            p = replace(p, nu_ex_minus=float(u))
        return p

    def _intervals(self, t: float) -> int:
        k = t / self.params.t_rep
        ki = int(round(k))
        if abs(k - ki) > 1e-9:
            raise ValueError("times must be integer multiples of t_rep")
        return ki

    def _initial_state(self, row) -> MarketState:
        x = np.clip(np.asarray(row, dtype=float), -1.0 + 1e-12, 1.0 - 1e-12)
        return MarketState(x)

    @staticmethod
    def _advance(cur, n_steps, p, rng):
        # frozen once blown up: the mimetic cascade is explosive there and
        # those states lie outside the coarse model's domain
        for _ in range(n_steps):
            if is_blown(cur, p):
                break
            cur = step_interval(cur, p, rng)
        return cur

    def evolve_pair(self, row, t_skip, delta, lam=None, u=None, seed=0, n_replicas=1):
        p = self._bind(lam, u)
        n1 = self._intervals(t_skip)
        n2 = self._intervals(delta)
        healed = np.empty((n_replicas, p.n_agents))
        evolved = np.empty((n_replicas, p.n_agents))
        for r in range(n_replicas):
            rng = _replica_rng(seed, r)
            cur = self._advance(self._initial_state(row), n1, p, rng)
            healed[r] = np.sort(cur.agent_states)
            cur = self._advance(cur, n2, p, rng)
            evolved[r] = np.sort(cur.agent_states)
        return healed, evolved

    def evolve(self, row, t_end, lam=None, u=None, seed=0, n_replicas=1):
        p = self._bind(lam, u)
        n1 = self._intervals(t_end)
        out = np.empty((n_replicas, p.n_agents))
        for r in range(n_replicas):
            rng = _replica_rng(seed, r)
            cur = self._advance(self._initial_state(row), n1, p, rng)
            out[r] = np.sort(cur.agent_states)
        return out

    @staticmethod
    def observable(rows: np.ndarray) -> float:
        """Ensemble-mean agent state."""
        return float(np.mean(rows))
