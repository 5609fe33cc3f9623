"""Pseudo-arclength continuation on the coarse-timestepper residual.

Branches of F(y, lambda) = 0 are traced by a secant predictor and a damped
Newton corrector on the bordered system {F = 0, N = 0}, where N is the
arclength condition through the two previous points.  Folds are detected by
sign changes of the lambda component of the secant tangent; stability comes
from the multipliers of the linearized coarse map I - F_y.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CorrectorError",
    "BranchPoint",
    "Branch",
    "stability",
    "natural_newton",
    "newton_correct",
    "trace_branch",
]


class CorrectorError(RuntimeError):
    """Newton corrector failed to converge; callers may halve the step."""


@dataclass
class BranchPoint:
    y: np.ndarray
    lam: float
    stable: bool | None
    jac: np.ndarray
    multipliers: np.ndarray
    observable: float | None = None
    n_iter: int = 0


@dataclass
class Branch:
    points: list = field(default_factory=list)
    step: float = 0.0
    fold_indices: list = field(default_factory=list)
    fold_points: list = field(default_factory=list)
    aborted: bool = False

    @property
    def lambdas(self):
        return np.array([p.lam for p in self.points])

    @property
    def ys(self):
        return np.array([p.y for p in self.points])

    @property
    def observables(self):
        return np.array([np.nan if p.observable is None else p.observable
                         for p in self.points])


def stability(jac: np.ndarray):
    """Stability of the coarse fixed point from F_y.

    The multipliers are the eigenvalue moduli of I - F_y (sorted
    descending).  A multiplier exactly at 1 is flagged marginal (None).
    """
    jac = np.atleast_2d(np.asarray(jac, dtype=float))
    if jac.shape[0] != jac.shape[1]:
        raise ValueError("Jacobian must be square")
    phi_y = np.eye(jac.shape[0]) - jac
    mults = np.sort(np.abs(np.linalg.eigvals(phi_y)))[::-1]
    top = mults[0]
    flag = None if top == 1.0 else bool(top < 1.0)
    return flag, mults


def _make_point(y, lam, jac, n_iter, observable=None):
    flag, mults = stability(jac)
    return BranchPoint(y=np.atleast_1d(np.asarray(y, dtype=float)).copy(),
                       lam=float(lam), stable=flag, jac=np.atleast_2d(jac).copy(),
                       multipliers=mults, observable=observable, n_iter=n_iter)


def natural_newton(y0, lam, ts, tol=1e-6, max_iter=20, seed=0, u=None):
    """Newton solve of F(y; lambda) = 0 at fixed lambda."""
    y = np.atleast_1d(np.asarray(y0, dtype=float)).copy()
    f = ts.residual(y, lam, u=u, seed=seed)
    jac = None
    for it in range(max_iter):
        if np.max(np.abs(f)) <= tol:
            if jac is None:
                jac, _ = ts.fd_jacobian(y, lam, u=u, seed=seed, base_residual=f)
            return _make_point(y, lam, jac, it)
        jac, _ = ts.fd_jacobian(y, lam, u=u, seed=seed, base_residual=f)
        try:
            dy = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError as exc:
            raise CorrectorError(f"singular Jacobian at lambda={lam}") from exc
        alpha = 1.0
        f_norm = np.max(np.abs(f))
        while True:
            y_try = y + alpha * dy
            f_try = ts.residual(y_try, lam, u=u, seed=seed)
            if np.max(np.abs(f_try)) <= max(f_norm * (1.0 - 0.25 * alpha), tol):
                y, f = y_try, f_try
                break
            alpha *= 0.5
            if alpha < 0.125:
                y, f = y_try, f_try
                break
    if np.max(np.abs(f)) <= tol:
        jac, _ = ts.fd_jacobian(y, lam, u=u, seed=seed, base_residual=f)
        return _make_point(y, lam, jac, max_iter)
    raise CorrectorError(
        f"natural continuation did not converge at lambda={lam} "
        f"(|F|={np.max(np.abs(f)):.3e} > {tol:g})")


def newton_correct(pred, prev0, prev1, ts, ds, tol=1e-6, max_iter=20,
                   seed=0, u=None):
    """Damped Newton on the bordered system {F(y,lambda)=0, N=0}.

    prev0 and prev1 are the two previous converged points; N is the secant
    arclength condition with step ds measured through their tangent.
    """
    y1, lam1 = prev1
    y0, lam0 = prev0
    ds_prev = float(np.sqrt(np.sum((y1 - y0) ** 2) + (lam1 - lam0) ** 2))
    if ds_prev == 0.0:
        raise CorrectorError("degenerate previous points (zero secant)")
    ty = (y1 - y0) / ds_prev
    tlam = (lam1 - lam0) / ds_prev

    y = np.atleast_1d(np.asarray(pred[0], dtype=float)).copy()
    lam = float(pred[1])
    d = y.size

    def arclength(yv, lv):
        return float(ty @ (yv - y1) + tlam * (lv - lam1) - ds)

    f = ts.residual(y, lam, u=u, seed=seed)
    n_val = arclength(y, lam)
    jac = None
    for it in range(max_iter):
        if np.max(np.abs(f)) <= tol and abs(n_val) <= tol:
            if jac is None:
                jac, _ = ts.fd_jacobian(y, lam, u=u, seed=seed, base_residual=f)
            return _make_point(y, lam, jac, it)
        jac, flam = ts.fd_jacobian(y, lam, u=u, seed=seed, base_residual=f)
        bord = np.zeros((d + 1, d + 1))
        bord[:d, :d] = jac
        bord[:d, d] = flam
        bord[d, :d] = ty
        bord[d, d] = tlam
        rhs = -np.concatenate([f, [n_val]])
        try:
            delta = np.linalg.solve(bord, rhs)
        except np.linalg.LinAlgError as exc:
            raise CorrectorError("singular bordered Jacobian") from exc
        alpha = 1.0
        merit = np.max(np.abs(f)) + abs(n_val)
        while True:
            y_try = y + alpha * delta[:d]
            lam_try = lam + alpha * delta[d]
            f_try = ts.residual(y_try, lam_try, u=u, seed=seed)
            n_try = arclength(y_try, lam_try)
            if np.max(np.abs(f_try)) + abs(n_try) <= max(merit * (1.0 - 0.25 * alpha), tol):
                y, lam, f, n_val = y_try, lam_try, f_try, n_try
                break
            alpha *= 0.5
            if alpha < 0.125:
                y, lam, f, n_val = y_try, lam_try, f_try, n_try
                break
    if np.max(np.abs(f)) <= tol and abs(n_val) <= tol:
        jac, _ = ts.fd_jacobian(y, lam, u=u, seed=seed, base_residual=f)
        return _make_point(y, lam, jac, max_iter)
    raise CorrectorError(
        f"corrector stalled at lambda={lam} (|F|={np.max(np.abs(f)):.3e}, "
        f"|N|={abs(n_val):.3e})")


def _fold_estimate(branch_pts, i):
    """Quadratic vertex through points (i-1, i, i+1) in arclength index."""
    tri = branch_pts[max(i - 1, 0): i + 2]
    if len(tri) < 3:
        p = branch_pts[i]
        return p.lam, p.y.copy(), p.observable
    s = np.array([-1.0, 0.0, 1.0])
    lam = np.array([p.lam for p in tri])
    a, b, c = np.polyfit(s, lam, 2)
    s_star = -b / (2.0 * a) if a != 0 else 0.0
    s_star = float(np.clip(s_star, -1.0, 1.0))
    lam_star = np.polyval([a, b, c], s_star)
    ys = np.array([p.y for p in tri])
    y_star = np.array([np.polyval(np.polyfit(s, ys[:, j], 2), s_star)
                       for j in range(ys.shape[1])])
    obs = [p.observable for p in tri]
    if any(o is None for o in obs):
        obs_star = None
    else:
        obs_star = float(np.polyval(np.polyfit(s, np.array(obs), 2), s_star))
    return float(lam_star), y_star, obs_star


def trace_branch(start_y, start_lam, ts, lam_range, ds, max_steps=200,
                 tol=1e-6, bootstrap_dlam=None, seed=0, u=None,
                 observe=True, stop_fn=None, max_halvings=4,
                 max_obs_jump=None):
    """Trace a solution branch of the coarse residual.

    The first two points come from natural continuation at start_lam and
    start_lam + bootstrap_dlam (whose sign sets the initial direction);
    subsequent points use secant prediction and arclength correction with
    step halving on failure and doubling after three fast successes.
    ``max_obs_jump`` rejects corrector results whose observable jumps by
    more than this from the previous point (a symptom of the corrector
    landing on a different branch) and retries with a halved step.
    """
    lam_lo, lam_hi = min(lam_range), max(lam_range)
    if bootstrap_dlam is None:
        bootstrap_dlam = ds
    branch = Branch(step=float(ds))
    rng = np.random.default_rng(seed)

    def point_seed():
        return int(rng.integers(0, 2**63 - 1))

    def attach_observable(pt):
        if observe and hasattr(ts, "observe"):
            _, _, obs = ts.observe(pt.y, pt.lam, u=u, seed=point_seed())
            pt.observable = obs

    def finish(pt):
        if hasattr(ts, "commit_phase"):
            ts.commit_phase()
        branch.points.append(pt)
        return stop_fn is not None and stop_fn(pt)

    p0 = natural_newton(start_y, start_lam, ts, tol=tol, seed=point_seed(), u=u)
    attach_observable(p0)
    if finish(p0):
        return _finalize(branch)
    p1 = natural_newton(p0.y, start_lam + bootstrap_dlam, ts, tol=tol,
                        seed=point_seed(), u=u)
    attach_observable(p1)
    if finish(p1):
        return _finalize(branch)

    ds_cur = float(ds)
    ds_min, ds_max = ds / 8.0, 2.0 * ds
    streak = 0
    prev, cur = p0, p1
    for _ in range(max_steps):
        sec_y = cur.y - prev.y
        sec_lam = cur.lam - prev.lam
        norm = np.sqrt(np.sum(sec_y**2) + sec_lam**2)
        if norm == 0:
            break
        pred = (cur.y + sec_y / norm * ds_cur, cur.lam + sec_lam / norm * ds_cur)
        halvings = 0
        while True:
            try:
                nxt = newton_correct(pred, (prev.y, prev.lam), (cur.y, cur.lam),
                                     ts, ds_cur, tol=tol, seed=point_seed(), u=u)
                attach_observable(nxt)
                if (max_obs_jump is not None and nxt.observable is not None
                        and cur.observable is not None
                        and abs(nxt.observable - cur.observable) > max_obs_jump):
                    raise CorrectorError(
                        f"observable jumped {cur.observable:.4f} -> "
                        f"{nxt.observable:.4f}; likely branch switch")
                break
            except CorrectorError:
                halvings += 1
                if halvings > max_halvings:
                    branch.aborted = True
                    return _finalize(branch)
                ds_cur = max(ds_cur / 2.0, ds_min)
                pred = (cur.y + sec_y / norm * ds_cur,
                        cur.lam + sec_lam / norm * ds_cur)
        if finish(nxt):
            break
        if nxt.n_iter <= 3 and halvings == 0:
            streak += 1
            if streak >= 3:
                ds_cur = min(ds_cur * 2.0, ds_max)
                streak = 0
        else:
            streak = 0
        prev, cur = cur, nxt
        if not (lam_lo <= nxt.lam <= lam_hi):
            break
    return _finalize(branch)


def _finalize(branch: Branch) -> Branch:
    lams = branch.lambdas
    if lams.size >= 3:
        d = np.diff(lams)
        d = np.where(d == 0.0, 1e-300, d)
        sign_flips = np.nonzero(np.sign(d[:-1]) * np.sign(d[1:]) < 0)[0]
        for i in sign_flips:
            branch.fold_indices.append(int(i + 1))
            branch.fold_points.append(_fold_estimate(branch.points, int(i + 1)))
    return branch
