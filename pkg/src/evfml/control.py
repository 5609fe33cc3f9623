"""Washout-filter LQR control of coarse fixed points.

The plant is the coarse T-horizon map linearized on demand around an
(approximate) unstable fixed point (y0, u*).  A discrete integrator state w
augments the plant,

    u_k    = u* + K^T (y_k - y0) + D w_k
    w_k+1  = w_k + (u_k - u*)

so that any closed-loop steady state has u = u* exactly: the integrator
washes out the offset between the numerically estimated y0 and the true
equilibrium.  Gains come from a discrete LQR on the augmented system; the
Bauer-Fike bound quantifies how much model mismatch the design tolerates.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ControlDesignError",
    "LinearizedPlant",
    "WashoutController",
    "dare_solve",
    "lqr_gain",
    "estimate_AB",
    "lqr_design",
    "washout_step",
    "closed_loop_run",
    "bauer_fike_margin",
]


class ControlDesignError(RuntimeError):
    """Uncontrollable pair or failed Riccati solve."""


def dare_solve(A, B, Q, R, tol=1e-12, max_iter=200000):
    """Discrete algebraic Riccati equation by fixed-point iteration.

    Iterates P <- Q + A'PA - A'PB (R + B'PB)^-1 B'PA from P = Q until the
    update stalls below tol (relative).  Robustness over speed: the
    augmented plants here are tiny.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if B.shape[0] != A.shape[0]:
        B = B.reshape(A.shape[0], -1)
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        gain = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = Q + A.T @ P @ A - A.T @ P @ B @ gain
        P_next = 0.5 * (P_next + P_next.T)
        diff = np.max(np.abs(P_next - P))
        P = P_next
        if not np.isfinite(diff) or np.max(np.abs(P)) > 1e14:
            raise ControlDesignError("Riccati iteration diverged")
        if diff <= tol * max(1.0, np.max(np.abs(P))):
            return P
    raise ControlDesignError("Riccati iteration did not converge")


def lqr_gain(A, B, Q, R, tol=1e-12):
    """Optimal feedback G with u = -G x, plus the Riccati solution P."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if B.shape[0] != A.shape[0]:
        B = B.reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = dare_solve(A, B, Q, R, tol=tol)
    G = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return G, P


def _controllability_rank(A, B):
    d = A.shape[0]
    blocks = [B]
    for _ in range(d - 1):
        blocks.append(A @ blocks[-1])
    ctrb = np.hstack(blocks)
    return np.linalg.matrix_rank(ctrb, tol=1e-12 * max(1.0, np.abs(ctrb).max()))


@dataclass
class LinearizedPlant:
    """FD linearization of the coarse T-map at (y0, u_star)."""

    A: np.ndarray
    B: np.ndarray
    y0: np.ndarray
    u_star: float
    T: float

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.asarray(self.B, dtype=float).reshape(self.A.shape[0], -1)
        self.y0 = np.atleast_1d(np.asarray(self.y0, dtype=float))
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.B))):
            raise ControlDesignError("non-finite plant estimate")
        rank = _controllability_rank(self.A, self.B)
        if rank < self.A.shape[0]:
            raise ControlDesignError(
                f"pair (A, B) is uncontrollable: controllability rank {rank} < "
                f"{self.A.shape[0]}; A={self.A.tolist()}, B={self.B.ravel().tolist()}")


def estimate_AB(ts, y0, u_star, T, dy=1e-4, du=1e-3, lam=None, seed=0) -> LinearizedPlant:
    """A and B by one-sided finite differences of the T-horizon coarse map.

    The same seed is used for base and perturbed runs (common random
    numbers), so ensemble noise largely cancels in the differences.
    """
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    d = y0.size
    base = ts.tmap(y0, T, lam=lam, u=u_star, seed=seed)
    A = np.empty((d, d))
    for j in range(d):
        step = dy * max(1.0, abs(y0[j]))
        yp = y0.copy()
        yp[j] += step
        A[:, j] = (ts.tmap(yp, T, lam=lam, u=u_star, seed=seed) - base) / step
    Bcol = (ts.tmap(y0, T, lam=lam, u=u_star + du, seed=seed) - base) / du
    return LinearizedPlant(A=A, B=Bcol, y0=y0, u_star=float(u_star), T=float(T))


@dataclass
class WashoutController:
    K: np.ndarray
    Dgain: float
    plant: LinearizedPlant
    w: float = 0.0
    P: np.ndarray = field(default=None, repr=False)

    def reset(self):
        self.w = 0.0

    @property
    def closed_loop_matrix(self) -> np.ndarray:
        A, B, K, Dg = self.plant.A, self.plant.B, self.K, self.Dgain
        d = A.shape[0]
        Ac = np.zeros((d + 1, d + 1))
        Ac[:d, :d] = A + B @ K[None, :]
        Ac[:d, d] = (B * Dg).ravel()
        Ac[d, :d] = K
        Ac[d, d] = 1.0 + Dg
        return Ac


def lqr_design(plant: LinearizedPlant, q_weight=0.1, r_weight=1.0) -> WashoutController:
    """Washout gains from LQR on the integrator-augmented plant.

    Augmented state (y - y0, w) with w+ = w + u_hat; Q = q_weight*I,
    R = r_weight.  The closed loop of Eq-type [[A+BK', BD], [K', 1+D]] is
    verified to have spectral radius < 1.
    """
    A, B = plant.A, plant.B
    d = A.shape[0]
    if B.shape[1] != 1:
        raise ControlDesignError("only scalar control inputs are supported")
    A_aug = np.zeros((d + 1, d + 1))
    A_aug[:d, :d] = A
    A_aug[d, d] = 1.0
    B_aug = np.zeros((d + 1, 1))
    B_aug[:d, 0] = B[:, 0]
    B_aug[d, 0] = 1.0
    if _controllability_rank(A_aug, B_aug) < d + 1:
        raise ControlDesignError("augmented pair is uncontrollable")
    G, P = lqr_gain(A_aug, B_aug, q_weight * np.eye(d + 1), np.array([[r_weight]]))
    K = -G[0, :d]
    Dg = -float(G[0, d])
    ctl = WashoutController(K=K, Dgain=Dg, plant=plant, P=P)
    rho = np.max(np.abs(np.linalg.eigvals(ctl.closed_loop_matrix)))
    if rho >= 1.0:
        raise ControlDesignError(f"designed closed loop is not stable (rho={rho})")
    return ctl


def washout_step(ctl: WashoutController, y_k) -> float:
    """One control update; advances the integrator state of the controller."""
    y_k = np.atleast_1d(np.asarray(y_k, dtype=float))
    u = float(ctl.plant.u_star + ctl.K @ (y_k - ctl.plant.y0) + ctl.Dgain * ctl.w)
    ctl.w += u - ctl.plant.u_star
    return u


def closed_loop_run(ctl: WashoutController, state0, restrict_fn, advance_fn,
                    observe_fn, n_steps, clip_frac=0.05):
    """Drive a live simulator with the washout controller every T units.

    restrict_fn(state) -> coarse y; advance_fn(state, u) -> state after one
    sampling interval under control value u; observe_fn(state) -> scalar
    readout.  The applied control is clipped to a +-clip_frac guard band
    around u* (wide enough that it never binds in the reproduced runs).
    Returns (times, observables, controls) with the initial sample first.
    """
    ctl.reset()
    u_star = ctl.plant.u_star
    lo, hi = u_star - clip_frac * abs(u_star), u_star + clip_frac * abs(u_star)
    state = state0
    times = [0.0]
    obs = [observe_fn(state)]
    controls = []
    for k in range(n_steps):
        y = restrict_fn(state)
        u = float(np.clip(washout_step(ctl, y), lo, hi))
        controls.append(u)
        state = advance_fn(state, u)
        times.append((k + 1) * ctl.plant.T)
        obs.append(observe_fn(state))
    controls.append(controls[-1] if controls else u_star)
    return np.array(times), np.array(obs), np.array(controls)


def bauer_fike_margin(A_C, Delta=None, p=2):
    """Perturbation bound (1 - rho(A_C)) / (||V|| ||V^-1||) for stability.

    Returns (bound, rho_perturbed, satisfied): any Delta with ||Delta||_p
    under the bound keeps the perturbed spectral radius below 1;
    ``satisfied`` verifies that implication for the given Delta
    (trivially true when Delta is None or outside the bound).
    """
    A_C = np.atleast_2d(np.asarray(A_C, dtype=float))
    lam, V = np.linalg.eig(A_C)
    cond = np.linalg.norm(V, p) * np.linalg.norm(np.linalg.inv(V), p)
    if not np.isfinite(cond) or cond > 1e12:
        raise ValueError("A_C is numerically defective; Bauer-Fike does not apply")
    rho = float(np.max(np.abs(lam)))
    bound = (1.0 - rho) / cond
    if Delta is None:
        return bound, rho, True
    Delta = np.atleast_2d(np.asarray(Delta, dtype=float))
    rho_pert = float(np.max(np.abs(np.linalg.eigvals(A_C + Delta))))
    inside = np.linalg.norm(Delta, p) < bound
    satisfied = (not inside) or (rho_pert < 1.0)
    return bound, rho_pert, satisfied
