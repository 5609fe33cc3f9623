"""Lift-evolve-restrict coarse timestepper with healing.

A coarse state y is lifted to a microscopic realization, evolved for a
healing time t_skip plus a reporting window delta, and restricted back at
both instants.  For stochastic simulators the restricted embeddings are
averaged over an ensemble of replicas.  The fixed-point residual
F(y) = y(t_skip) - y(t_skip + delta) vanishes on invariant sets that are
reached after healing.

For the ring-road model the 2-D embedding lies on a disk whose angle is the
(dynamically irrelevant) wave phase; radial mode reduces the coarse state
to the radius and carries the phase alongside.
"""

import numpy as np

__all__ = ["CoarseTimestepper", "MapTimestepper"]


class CoarseTimestepper:
    """Coarse map over DM coordinates driven by a black-box evolver.

    lifter: object with .lift(Y) or a callable Y -> X.
    restrictor: DMapModel (or object with .restrict).
    evolver: model hook with evolve_pair / evolve / observable.
    """

    def __init__(self, lifter, restrictor, evolver, t_skip, delta,
                 n_replicas=1, radial_mode=False, phase=0.0,
                 fd_dy=1e-4, fd_dlam=1e-4):
        self._lift = lifter.lift if hasattr(lifter, "lift") else lifter
        self.restrictor = restrictor
        self.evolver = evolver
        self.t_skip = float(t_skip)
        self.delta = float(delta)
        self.n_replicas = int(n_replicas)
        self.radial_mode = bool(radial_mode)
        self.phase = float(phase)
        self._phase_candidate = None
        self.fd_dy = float(fd_dy)
        self.fd_dlam = float(fd_dlam)
        if self.t_skip < 0 or self.delta <= 0 or self.n_replicas < 1:
            raise ValueError("need t_skip >= 0, delta > 0, n_replicas >= 1")

    # -- coarse state encoding ------------------------------------------------

    def _embed(self, y):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if not self.radial_mode:
            return y
        return np.array([y[0] * np.cos(self.phase), y[0] * np.sin(self.phase)])

    def _reduce(self, y_full):
        if not self.radial_mode:
            return y_full
        return np.array([np.hypot(y_full[0], y_full[1])])

    # -- core map -------------------------------------------------------------

    def coarse_of_rows(self, rows):
        """Ensemble-averaged coarse state of microscopic rows.

        In radial mode the radius is additionally averaged over the
        evolver's symmetry orbit (cyclic relabelings of the ring) when one
        is exposed; the embedding disk is not perfectly round, so a raw
        single-phase radius would wobble with the traveling-wave position.
        Returns (coarse_y, phase); phase is None outside radial mode.
        """
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        if not self.radial_mode:
            return np.mean(np.atleast_2d(self.restrictor.restrict(rows)), axis=0), None
        mean_emb = np.mean(np.atleast_2d(self.restrictor.restrict(rows)), axis=0)
        phase = float(np.arctan2(mean_emb[1], mean_emb[0]))
        orbit_of = getattr(self.evolver, "symmetry_orbit", None)
        radii = np.empty(rows.shape[0])
        for i, row in enumerate(rows):
            pts = orbit_of(row) if orbit_of is not None else row[None, :]
            emb = np.atleast_2d(self.restrictor.restrict(pts))
            radii[i] = np.mean(np.hypot(emb[:, 0], emb[:, 1]))
        return np.array([radii.mean()]), phase

    def _run(self, y, lam, u, seed):
        x0 = self._lift(self._embed(y))
        x0 = np.asarray(x0, dtype=float).reshape(-1)
        healed, evolved = self.evolver.evolve_pair(
            x0, self.t_skip, self.delta, lam=lam, u=u, seed=seed,
            n_replicas=self.n_replicas)
        yh, _ = self.coarse_of_rows(healed)
        ye, phase_e = self.coarse_of_rows(evolved)
        if self.radial_mode:
            self._phase_candidate = phase_e
        return yh, ye, phase_e, healed

    def commit_phase(self):
        """Adopt the wave phase observed by the most recent evaluation.

        Continuation calls this after accepting a point, so rejected
        corrector candidates never contaminate the carried phase.
        """
        if self.radial_mode and self._phase_candidate is not None:
            self.phase = self._phase_candidate

    def step(self, y, lam=None, u=None, seed=0, update_phase=False):
        """One coarse step; returns (y_healed, y_evolved).

        Pure for a fixed seed unless ``update_phase`` is set, which stores
        the observed wave phase for subsequent lifts (radial mode only).
        """
        yh, ye, phase_e, _ = self._run(y, lam, u, seed)
        if self.radial_mode and update_phase:
            self.phase = phase_e
        return yh, ye

    def observe(self, y, lam=None, u=None, seed=0, update_phase=False):
        """Like step, also returning the physical observable of the healed state."""
        yh, ye, phase_e, healed = self._run(y, lam, u, seed)
        if self.radial_mode and update_phase:
            self.phase = phase_e
        return yh, ye, self.evolver.observable(healed)

    def residual(self, y, lam=None, u=None, seed=0):
        yh, ye = self.step(y, lam, u, seed)
        return yh - ye

    def fd_jacobian(self, y, lam=None, dy=None, dlam=None, u=None, seed=0,
                    base_residual=None):
        """One-sided finite differences of the residual in y and lambda.

        The same seed (common random numbers) is used for every evaluation,
        which keeps the differences meaningful for stochastic ensembles.
        """
        y = np.atleast_1d(np.asarray(y, dtype=float))
        d = y.size
        dy = self.fd_dy if dy is None else float(dy)
        dlam = self.fd_dlam if dlam is None else float(dlam)
        if dy <= 0 or dlam <= 0:
            raise ValueError("perturbation sizes must be positive")
        f0 = self.residual(y, lam, u, seed) if base_residual is None else base_residual
        fy = np.empty((d, d))
        for j in range(d):
            step_j = dy * max(1.0, abs(y[j]))
            yp = y.copy()
            yp[j] += step_j
            fy[:, j] = (self.residual(yp, lam, u, seed) - f0) / step_j
        if lam is None:
            flam = np.zeros(d)
        else:
            flam = (self.residual(y, lam + dlam, u, seed) - f0) / dlam
        return fy, flam

    def tmap(self, y, t_end, lam=None, u=None, seed=0):
        """Coarse map over a plain horizon (no healing); used for plant fits."""
        x0 = self._lift(self._embed(y))
        x0 = np.asarray(x0, dtype=float).reshape(-1)
        rows = self.evolver.evolve(x0, t_end, lam=lam, u=u, seed=seed,
                                   n_replicas=self.n_replicas)
        yv, _ = self.coarse_of_rows(rows)
        return yv


class MapTimestepper:
    """Coarse timestepper backed by an explicit map y' = f(y, lam, u).

    Healing is the identity, so the residual is y - f(y).  Used for
    surrogate/normal-form problems and in the test suite.
    """

    def __init__(self, map_fn, fd_dy=1e-7, fd_dlam=1e-7):
        self.map_fn = map_fn
        self.fd_dy = float(fd_dy)
        self.fd_dlam = float(fd_dlam)

    def step(self, y, lam=None, u=None, seed=0, update_phase=False):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        return y.copy(), np.atleast_1d(np.asarray(self.map_fn(y, lam, u), dtype=float))

    def observe(self, y, lam=None, u=None, seed=0, update_phase=False):
        yh, ye = self.step(y, lam, u, seed)
        return yh, ye, float(np.linalg.norm(yh))

    def residual(self, y, lam=None, u=None, seed=0):
        yh, ye = self.step(y, lam, u, seed)
        return yh - ye

    fd_jacobian = CoarseTimestepper.fd_jacobian

    def tmap(self, y, t_end=None, lam=None, u=None, seed=0):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        return np.atleast_1d(np.asarray(self.map_fn(y, lam, u), dtype=float))
