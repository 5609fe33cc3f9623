"""Optimal-velocity ring-road traffic simulator.

N cars drive on a one-lane ring of length L.  Car n accelerates towards the
optimal velocity V(headway) with inertia 1/inv_tau:

    dx_n/dt = y_n,    dy_n/dt = inv_tau * (V(x_{n+1} - x_n) - y_n)

with periodic closure x_{n+N} = x_n + L.  Snapshots are stored as headway
vectors; the headway standard deviation separates free flow (sigma = 0)
from traveling-wave jams (sigma > 0).
"""

from dataclasses import dataclass, replace

import numpy as np

from .accel import njit
from .dataset import Dataset

__all__ = [
    "TrafficParams",
    "TrafficState",
    "IntegrationError",
    "optimal_velocity",
    "headways",
    "headway_std",
    "rhs",
    "free_flow_state",
    "sinusoidal_ic",
    "state_from_headways",
    "integrate",
    "BifurcationSampling",
    "ControlSampling",
    "sample_dataset",
    "TrafficCoarseEvolver",
]


class IntegrationError(RuntimeError):
    """Adaptive step size underflow (stiff/blown-up trajectory)."""


@dataclass(frozen=True)
class TrafficParams:
    n_cars: int = 20
    ring_length: float = 40.0
    inv_tau: float = 1.7
    v0: float = 1.0
    h: float = 2.4

    def __post_init__(self):
        if self.n_cars < 2:
            raise ValueError("n_cars must be >= 2")
        if self.ring_length <= 0:
            raise ValueError("ring_length must be positive")
        if self.inv_tau <= 0:
            raise ValueError("inv_tau must be positive")
        if self.h <= 0:
            raise ValueError("h must be positive")


@dataclass
class TrafficState:
    positions: np.ndarray
    velocities: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.velocities = np.asarray(self.velocities, dtype=float)
        if self.positions.shape != self.velocities.shape:
            raise ValueError("positions and velocities must have equal length")
        if not (np.all(np.isfinite(self.positions)) and np.all(np.isfinite(self.velocities))):
            raise ValueError("state entries must be finite")


def optimal_velocity(dx, params: TrafficParams):
    """V(dx) = v0*(tanh(dx - h) + tanh(h)); bounded by v0*(1 + tanh(h))."""
    return params.v0 * (np.tanh(dx - params.h) + np.tanh(params.h))


def headways(state: TrafficState, params: TrafficParams) -> np.ndarray:
    """Gaps to the car in front; the last one wraps around the ring."""
    x = state.positions
    dx = np.empty_like(x)
    dx[:-1] = x[1:] - x[:-1]
    dx[-1] = x[0] + params.ring_length - x[-1]
    return dx


def headway_std(state_or_headways, params: TrafficParams | None = None) -> float:
    """Population standard deviation of the headways."""
    if isinstance(state_or_headways, TrafficState):
        if params is None:
            raise ValueError("params required when passing a TrafficState")
        dx = headways(state_or_headways, params)
    else:
        dx = np.asarray(state_or_headways, dtype=float)
    return float(np.std(dx))


def rhs(state: TrafficState, params: TrafficParams) -> TrafficState:
    """Time derivative (dx/dt, dy/dt), packaged as a TrafficState."""
    dx = headways(state, params)
    dv = params.inv_tau * (optimal_velocity(dx, params) - state.velocities)
    return TrafficState(state.velocities.copy(), dv)


def free_flow_state(params: TrafficParams) -> TrafficState:
    n = params.n_cars
    spacing = params.ring_length / n
    x = np.arange(n, dtype=float) * spacing
    v = np.full(n, optimal_velocity(spacing, params))
    return TrafficState(x, v)


def sinusoidal_ic(mu: float, params: TrafficParams) -> TrafficState:
    """Free flow perturbed by a sinusoid of amplitude mu in the positions."""
    if mu < 0:
        raise ValueError("mu must be non-negative")
    n = params.n_cars
    idx = np.arange(1, n + 1, dtype=float)
    x = (idx - 1.0) * params.ring_length / n + mu * np.sin(2.0 * np.pi * idx / n)
    v = np.full(n, optimal_velocity(params.ring_length / n, params))
    return TrafficState(x, v)


def state_from_headways(dx: np.ndarray, params: TrafficParams) -> TrafficState:
    """Reconstruct a full state from a headway vector.

    Ring translation symmetry leaves the absolute position undetermined, so
    the gauge x_1 = 0 is fixed.  The headways are shifted by a common
    constant so they sum exactly to L (a uniform shift preserves their
    standard deviation), and velocities are initialized on the
    quasi-equilibrium y_n = V(dx_n).
    """
    dx = np.asarray(dx, dtype=float)
    n = params.n_cars
    if dx.shape != (n,):
        raise ValueError(f"expected {n} headways, got shape {dx.shape}")
    dx = dx + (params.ring_length - dx.sum()) / n
    x = np.empty(n)
    x[0] = 0.0
    x[1:] = np.cumsum(dx[:-1])
    v = optimal_velocity(dx, params)
    return TrafficState(x, v)


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4) integrator with PI step control (hot kernel).
# ---------------------------------------------------------------------------

@njit
def _ovm_rhs(y, f, n, ring_length, inv_tau, v0, h):
    tanh_h = np.tanh(h)
    for i in range(n):
        if i < n - 1:
            dx = y[i + 1] - y[i]
        else:
            dx = y[0] + ring_length - y[i]
        f[i] = y[n + i]
        f[n + i] = inv_tau * (v0 * (np.tanh(dx - h) + tanh_h) - y[n + i])


@njit
def _integrate_ovm(y0, t0, t_eval, ring_length, inv_tau, v0, h_dist, rtol, atol):
    """Adaptive RK5(4) for the 2N car ODEs, sampled at t_eval (sorted).

    Returns (samples, status); status 1 flags step-size underflow.
    """
    n = y0.shape[0] // 2
    dim = y0.shape[0]
    n_out = t_eval.shape[0]
    out = np.empty((n_out, dim))

    y = y0.copy()
    t = t0
    i_out = 0
    while i_out < n_out and t_eval[i_out] <= t0:
        out[i_out] = y
        i_out += 1
    if i_out >= n_out:
        return out, 0

    t_final = t_eval[n_out - 1]

    k1 = np.empty(dim)
    k2 = np.empty(dim)
    k3 = np.empty(dim)
    k4 = np.empty(dim)
    k5 = np.empty(dim)
    k6 = np.empty(dim)
    k7 = np.empty(dim)
    ytmp = np.empty(dim)
    ynew = np.empty(dim)

    _ovm_rhs(y, k1, n, ring_length, inv_tau, v0, h_dist)

    # initial step size: a crude variant of the classic starting guess
    d0 = 0.0
    d1 = 0.0
    for j in range(dim):
        sc = atol + rtol * abs(y[j])
        d0 += (y[j] / sc) ** 2
        d1 += (k1[j] / sc) ** 2
    d0 = np.sqrt(d0 / dim)
    d1 = np.sqrt(d1 / dim)
    if d0 < 1e-5 or d1 < 1e-5:
        dt = 1e-6
    else:
        dt = 0.01 * d0 / d1
    if dt > t_final - t:
        dt = t_final - t

    err_prev = 1.0
    min_step = 1e-13 * max(1.0, abs(t_final))

    while t < t_final:
        clipped = False
        if t + dt >= t_eval[i_out]:
            dt = t_eval[i_out] - t
            clipped = True
        if dt < min_step:
            return out, 1

        for j in range(dim):
            ytmp[j] = y[j] + dt * (0.2 * k1[j])
        _ovm_rhs(ytmp, k2, n, ring_length, inv_tau, v0, h_dist)
        for j in range(dim):
            ytmp[j] = y[j] + dt * (3.0 / 40.0 * k1[j] + 9.0 / 40.0 * k2[j])
        _ovm_rhs(ytmp, k3, n, ring_length, inv_tau, v0, h_dist)
        for j in range(dim):
            ytmp[j] = y[j] + dt * (44.0 / 45.0 * k1[j] - 56.0 / 15.0 * k2[j] + 32.0 / 9.0 * k3[j])
        _ovm_rhs(ytmp, k4, n, ring_length, inv_tau, v0, h_dist)
        for j in range(dim):
            ytmp[j] = y[j] + dt * (
                19372.0 / 6561.0 * k1[j]
                - 25360.0 / 2187.0 * k2[j]
                + 64448.0 / 6561.0 * k3[j]
                - 212.0 / 729.0 * k4[j]
            )
        _ovm_rhs(ytmp, k5, n, ring_length, inv_tau, v0, h_dist)
        for j in range(dim):
            ytmp[j] = y[j] + dt * (
                9017.0 / 3168.0 * k1[j]
                - 355.0 / 33.0 * k2[j]
                + 46732.0 / 5247.0 * k3[j]
                + 49.0 / 176.0 * k4[j]
                - 5103.0 / 18656.0 * k5[j]
            )
        _ovm_rhs(ytmp, k6, n, ring_length, inv_tau, v0, h_dist)
        for j in range(dim):
            ynew[j] = y[j] + dt * (
                35.0 / 384.0 * k1[j]
                + 500.0 / 1113.0 * k3[j]
                + 125.0 / 192.0 * k4[j]
                - 2187.0 / 6784.0 * k5[j]
                + 11.0 / 84.0 * k6[j]
            )
        _ovm_rhs(ynew, k7, n, ring_length, inv_tau, v0, h_dist)

        err = 0.0
        for j in range(dim):
            e = dt * (
                71.0 / 57600.0 * k1[j]
                - 71.0 / 16695.0 * k3[j]
                + 71.0 / 1920.0 * k4[j]
                - 17253.0 / 339200.0 * k5[j]
                + 22.0 / 525.0 * k6[j]
                - 1.0 / 40.0 * k7[j]
            )
            sc = atol + rtol * max(abs(y[j]), abs(ynew[j]))
            err += (e / sc) ** 2
        err = np.sqrt(err / dim)

        if err <= 1.0:
            t = t + dt
            for j in range(dim):
                y[j] = ynew[j]
                k1[j] = k7[j]
            if clipped:
                out[i_out] = y
                i_out += 1
                while i_out < n_out and t_eval[i_out] <= t:
                    out[i_out] = y
                    i_out += 1
                if i_out >= n_out:
                    return out, 0
            if err == 0.0:
                fac = 10.0
            else:
                fac = 0.9 * err ** (-0.14) * err_prev ** 0.08
                if fac > 10.0:
                    fac = 10.0
                elif fac < 0.2:
                    fac = 0.2
            err_prev = err
            dt = dt * fac
        else:
            fac = 0.9 * err ** (-0.2)
            if fac < 0.2:
                fac = 0.2
            elif fac > 1.0:
                fac = 1.0
            dt = dt * fac
    return out, 0


def integrate(
    state: TrafficState,
    t_end: float,
    params: TrafficParams,
    t_eval: np.ndarray | None = None,
    rtol: float = 1e-8,
    atol: float = 1e-8,
):
    """Integrate the 2N-car ODE system and sample it at ``t_eval``.

    Returns (times, positions, velocities) with positions/velocities of
    shape (len(times), N).  ``t_eval`` defaults to the single time ``t_end``.
    """
    if t_end < 0:
        raise ValueError("t_end must be non-negative")
    if t_eval is None:
        t_eval = np.array([t_end], dtype=float)
    else:
        t_eval = np.asarray(t_eval, dtype=float)
        if t_eval.size == 0:
            raise ValueError("t_eval must not be empty")
        if np.any(np.diff(t_eval) < 0):
            raise ValueError("t_eval must be sorted ascending")
        if t_eval[0] < 0 or t_eval[-1] > t_end + 1e-12:
            raise ValueError("t_eval must lie inside [0, t_end]")
    n = params.n_cars
    y0 = np.concatenate([state.positions, state.velocities])
    out, status = _integrate_ovm(
        y0, 0.0, t_eval, params.ring_length, params.inv_tau, params.v0, params.h, rtol, atol
    )
    if status != 0:
        raise IntegrationError("step size underflow in the ring-road integrator")
    return t_eval, out[:, :n], out[:, n:]


# ---------------------------------------------------------------------------
# Dataset sampling.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BifurcationSampling:
    """Snapshots over the bifurcation-parameter (v0) space.

    One trajectory per row: random sinusoidal amplitude, end time and v0;
    the final headway vector is kept, tagged with its v0.
    """

    n_samples: int = 5000
    mu_range: tuple = (0.0, 4.5)
    t_range: tuple = (200.0, 700.0)
    v0_range: tuple = (0.98, 1.08)

    def __post_init__(self):
        for lo, hi in (self.mu_range, self.t_range, self.v0_range):
            if not (hi >= lo):
                raise ValueError("sampling ranges must satisfy high >= low")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")


@dataclass(frozen=True)
class ControlSampling:
    """Dense local snapshots over the control-parameter (h) space at fixed v0.

    A (mu, h) grid of trajectories sampled every t_sample time units,
    tagged with h.
    """

    v0: float = 1.0099
    mu_values: tuple = (0.2, 0.6, 1.0, 1.4, 1.8)
    h_values: tuple = (2.39, 2.395, 2.4, 2.405, 2.41)
    t_end: float = 1600.0
    t_sample: float = 4.0

    def __post_init__(self):
        if self.t_sample <= 0 or self.t_end < self.t_sample:
            raise ValueError("need 0 < t_sample <= t_end")
        if len(self.mu_values) == 0 or len(self.h_values) == 0:
            raise ValueError("empty sampling grid")


def sample_dataset(spec, params: TrafficParams, seed: int) -> Dataset:
    """Generate a snapshot matrix of headway rows; reproducible per seed."""
    rng = np.random.default_rng(seed)
    n = params.n_cars
    if isinstance(spec, BifurcationSampling):
        m = spec.n_samples
        mus = rng.uniform(*spec.mu_range, size=m)
        tends = rng.uniform(*spec.t_range, size=m)
        v0s = rng.uniform(*spec.v0_range, size=m)
        rows = np.empty((m, n))
        for i in range(m):
            p = replace(params, v0=v0s[i])
            _, pos, _ = integrate(sinusoidal_ic(mus[i], p), tends[i], p)
            rows[i] = _headways_of_positions(pos[-1], p.ring_length)
        return Dataset(rows, v0s, "v0")
    if isinstance(spec, ControlSampling):
        t_eval = np.arange(spec.t_sample, spec.t_end + spec.t_sample / 2, spec.t_sample)
        rows = []
        tags = []
        for mu in spec.mu_values:
            for h_val in spec.h_values:
                p = replace(params, v0=spec.v0, h=h_val)
                _, pos, _ = integrate(sinusoidal_ic(mu, p), spec.t_end, p, t_eval=t_eval)
                for k in range(pos.shape[0]):
                    rows.append(_headways_of_positions(pos[k], p.ring_length))
                    tags.append(h_val)
        return Dataset(np.asarray(rows), np.asarray(tags), "h")
    raise TypeError(f"unknown sampling spec {type(spec)!r}")


def _headways_of_positions(x: np.ndarray, ring_length: float) -> np.ndarray:
    dx = np.empty_like(x)
    dx[:-1] = x[1:] - x[:-1]
    dx[-1] = x[0] + ring_length - x[-1]
    return dx


# ---------------------------------------------------------------------------
# Coarse-timestepper hook.
# ---------------------------------------------------------------------------

class TrafficCoarseEvolver:
    """Black-box evolver over headway rows for the coarse timestepper.

    ``lam`` binds to v0 (bifurcation parameter) and ``u`` to h (control
    variable).  Deterministic: replicas and seeds are accepted for interface
    uniformity with stochastic models but a single trajectory is run.
    """

    n_replicas_default = 1

    def __init__(self, params: TrafficParams, rtol: float = 1e-8, atol: float = 1e-8):
        self.params = params
        self.rtol = rtol
        self.atol = atol

    def _bind(self, lam, u) -> TrafficParams:
        p = self.params
        if lam is not None:
            p = replace(p, v0=float(lam))
        if u is not None:
            p = replace(p, h=float(u))
        return p

    def evolve_pair(self, row, t_skip, delta, lam=None, u=None, seed=None, n_replicas=1):
        p = self._bind(lam, u)
        state = state_from_headways(np.asarray(row, dtype=float), p)
        t_eval = np.array([t_skip, t_skip + delta])
        _, pos, _ = integrate(state, t_skip + delta, p, t_eval=t_eval,
                              rtol=self.rtol, atol=self.atol)
        healed = _headways_of_positions(pos[0], p.ring_length)
        evolved = _headways_of_positions(pos[1], p.ring_length)
        return healed[None, :], evolved[None, :]

    def evolve(self, row, t_end, lam=None, u=None, seed=None, n_replicas=1):
        """Single-horizon variant used for plant identification (T-map)."""
        p = self._bind(lam, u)
        state = state_from_headways(np.asarray(row, dtype=float), p)
        _, pos, _ = integrate(state, t_end, p, rtol=self.rtol, atol=self.atol)
        return _headways_of_positions(pos[-1], p.ring_length)[None, :]

    @staticmethod
    def observable(rows: np.ndarray) -> float:
        """Headway standard deviation of the (mean) microscopic snapshot."""
        return float(np.std(np.mean(np.atleast_2d(rows), axis=0)))

    @staticmethod
    def symmetry_orbit(row: np.ndarray) -> np.ndarray:
        """All cyclic relabelings of the cars (the ring's exact symmetry).

        Restricting the whole orbit and averaging the embedding radius
        removes the dependence on where the wave sits on the ring, which
        otherwise leaks the embedding disk's eccentricity into the coarse
        radius.
        """
        row = np.asarray(row, dtype=float)
        n = row.shape[0]
        idx = (np.arange(n)[None, :] + np.arange(n)[:, None]) % n
        return row[idx]
