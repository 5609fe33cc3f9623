"""End-to-end stages: sampling, embedding, LOOCV, continuation, control.

Each stage is a pure function of (config, seed) writing deterministic files
into an output directory; the CLI is a thin wrapper around these.
"""

import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import control as ctl
from . import fileio, manifold as mf
from . import market as mk
from . import traffic as tr
from .continuation import natural_newton, trace_branch
from .dataset import Dataset
from .presets import config_hash
from .timestepper import CoarseTimestepper

__all__ = [
    "traffic_params", "market_params", "build_dataset", "build_manifold",
    "build_timestepper", "run_sample", "run_dmap", "run_loocv",
    "run_bifurcate", "run_design_controller", "run_control_run",
]


def traffic_params(cfg) -> tr.TrafficParams:
    m = cfg["model"]
    v0 = cfg["sample"].get("v0", 1.0)
    return tr.TrafficParams(n_cars=int(m["n_cars"]), ring_length=m["ring_length"],
                            inv_tau=m["inv_tau"], v0=v0, h=m["h"])


def market_params(cfg) -> mk.MarketParams:
    m = cfg["model"]
    return mk.MarketParams(n_agents=int(m["n_agents"]), eps_plus=m["eps_plus"],
                           eps_minus=m["eps_minus"], nu_ex_plus=m["nu_ex_plus"],
                           nu_ex_minus=m["nu_ex_minus"], gamma=m["gamma"],
                           g=cfg["sample"].get("g", 41.0), t_rep=m["t_rep"])


def _is_traffic(cfg) -> bool:
    return cfg["run"]["model"] == "traffic"


def build_dataset(cfg, seed) -> Dataset:
    s = cfg["sample"]
    if _is_traffic(cfg):
        p = traffic_params(cfg)
        if s["kind"] == "bifurcation":
            spec = tr.BifurcationSampling(
                n_samples=int(s["n_samples"]), mu_range=(s["mu_lo"], s["mu_hi"]),
                t_range=(s["t_lo"], s["t_hi"]), v0_range=(s["v0_lo"], s["v0_hi"]))
        else:
            spec = tr.ControlSampling(
                v0=s["v0"],
                mu_values=tuple(np.linspace(s["mu_lo"], s["mu_hi"], int(s["n_mu"]))),
                h_values=tuple(np.linspace(s["h_lo"], s["h_hi"], int(s["n_h"]))),
                t_end=s["t_end"], t_sample=s["t_sample"])
        return tr.sample_dataset(spec, p, seed)
    p = market_params(cfg)
    if s["kind"] == "bifurcation":
        spec = mk.MarketBifurcationSampling(
            n_trajectories=int(s["n_trajectories"]),
            mu_range=(s["mu_lo"], s["mu_hi"]), g_range=(s["g_lo"], s["g_hi"]),
            n_intervals=int(s["n_intervals"]))
    else:
        spec = mk.MarketControlSampling(
            g=s["g"], mu_values=tuple(np.linspace(s["mu_lo"], s["mu_hi"], int(s["n_mu"]))),
            nu_minus_values=tuple(np.linspace(s["nu_lo"], s["nu_hi"], int(s["n_nu"]))),
            n_intervals=int(s["n_intervals"]))
    return mk.sample_dataset(spec, p, seed)


def build_manifold(cfg, dataset: Dataset):
    """Fit the diffusion map (n_eigs), the coarse model and both lifters."""
    d = cfg["dmap"]
    eps = d["epsilon"]
    if eps == "heuristic":
        eps = mf.epsilon_heuristic(dataset.X, d["heuristic_fraction"])
    full = mf.fit_dmaps(dataset.X, float(eps), int(d["n_eigs"]))
    n_coords = int(d["n_coords"])
    model = mf.DMapModel(epsilon=full.epsilon, train_X=full.train_X,
                         degrees=full.degrees,
                         eigenvalues=full.eigenvalues[:n_coords].copy(),
                         eigenvectors=full.eigenvectors[:, :n_coords].copy())
    g = cfg["gh"]
    eps_tilde = g["eps_tilde"]
    if eps_tilde == "heuristic":
        eps_tilde = mf.epsilon_heuristic(model.eigenvectors, 1.0 - g["eps_tilde_fraction"])
    gh = mf.fit_gh_lifter(model, float(eps_tilde), float(g["delta"]))
    knn = mf.fit_knn_lifter(model, int(cfg["knn"]["k"]))
    return full, model, gh, knn


def _lifter_for(gh, knn, model, which, cfg):
    if which == "gh":
        return gh.lift
    if which == "knn":
        return lambda Y: mf.lift_knn(knn, Y, model)
    raise ValueError(f"unknown lifter {which!r}")


def build_timestepper(cfg, model, gh, knn, lifter="gh", u_from=None):
    t = cfg["timestepper"]
    if _is_traffic(cfg):
        evolver = tr.TrafficCoarseEvolver(traffic_params(cfg))
    else:
        evolver = mk.MarketCoarseEvolver(market_params(cfg))
    lift_fn = _lifter_for(gh, knn, model, lifter, cfg)
    return CoarseTimestepper(lift_fn, model, evolver,
                             t_skip=t["t_skip"], delta=t["delta"],
                             n_replicas=int(t["n_replicas"]),
                             radial_mode=bool(t["radial"]),
                             fd_dy=t["fd_dy"], fd_dlam=t["fd_dlam"])


# ---------------------------------------------------------------------------
# Stage commands.
# ---------------------------------------------------------------------------

def _out(outdir):
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def run_sample(cfg, seed, outdir):
    out = _out(outdir)
    ds = build_dataset(cfg, seed)
    if ds.n_rows == 0:
        raise ValueError("sampling produced an empty dataset")
    fileio.write_dataset(out / "dataset.evfm", ds,
                         {"config": config_hash(cfg, seed), "seed": seed})
    return ds


def run_dmap(cfg, seed, outdir):
    out = _out(outdir)
    ds = fileio.read_dataset(out / "dataset.evfm")
    full, model, gh, knn = build_manifold(cfg, ds)
    fileio.save_dmap_model(out / "model", model)
    fileio.save_gh_lifter(out / "gh_lifter", gh)
    fileio.save_knn_lifter(out / "knn_lifter", knn)
    tag = config_hash(cfg, seed)
    fileio.write_csv(out / "eigenvalues.csv", ["index", "eigenvalue"],
                     [(i + 1, v) for i, v in enumerate(full.eigenvalues)],
                     comment=f"config={tag} seed={seed}")
    obs = ds.X.std(axis=1) if _is_traffic(cfg) else ds.X.mean(axis=1)
    obs_name = "sigma" if _is_traffic(cfg) else "xbar"
    ncols = model.eigenvectors.shape[1]
    header = [f"y{i+1}" for i in range(ncols)] + [ds.tag_name, obs_name]
    rows = [tuple(model.eigenvectors[i]) + (ds.tags[i], obs[i])
            for i in range(ds.n_rows)]
    fileio.write_csv(out / "embedding.csv", header, rows,
                     comment=f"config={tag} seed={seed}")
    return full, model, gh, knn


def _load_manifold(outdir):
    out = Path(outdir)
    model = fileio.load_dmap_model(out / "model")
    gh = fileio.load_gh_lifter(out / "gh_lifter")
    knn = fileio.load_knn_lifter(out / "knn_lifter")
    return model, gh, knn


def run_loocv(cfg, seed, outdir):
    out = _out(outdir)
    model, gh, knn = _load_manifold(out)
    lo = cfg["loocv"]
    rep_r = mf.loocv_restriction(model, mode=lo["restriction_mode"])
    rep_g = mf.loocv_gh_lift(gh, mode=lo["gh_mode"])
    rep_g = mf.with_roundtrip(rep_g, _gh_preds(gh, rep_g), model, model.eigenvectors)
    rep_k = mf.loocv_knn_lift(knn, model)
    rep_k = mf.with_roundtrip(rep_k, _knn_preds(knn, model, rep_k), model,
                              model.eigenvectors)
    rows = []
    for rep in (rep_r, rep_g, rep_k):
        s = rep.summary()
        for norm in ("l1", "l2", "linf"):
            rows.append((s["operator"], s["mode"], norm, s[f"{norm}_mean"],
                         s[f"{norm}_ci_lo"], s[f"{norm}_ci_hi"]))
        if "roundtrip_rel_mean" in s:
            rows.append((s["operator"], s["mode"], "roundtrip_rel",
                         s["roundtrip_rel_mean"], s["roundtrip_rel_ci_lo"],
                         s["roundtrip_rel_ci_hi"]))
    fileio.write_csv(out / "loocv.csv",
                     ["operator", "mode", "norm", "mean", "ci_lo", "ci_hi"],
                     rows, comment=f"config={config_hash(cfg, seed)} seed={seed}")
    return rep_r, rep_g, rep_k


def _gh_preds(gh, rep):
    # reconstructions used for the roundtrip metric mirror the LOOCV mode
    if rep.mode == "fast":
        V = gh.basis_eigenvectors
        s_diag = np.einsum("ij,ij->i", V, V)
        denom = np.maximum(1.0 - s_diag, 1e-12)
        fitted = V @ (V.T @ gh.train_X)
        return (fitted - s_diag[:, None] * gh.train_X) / denom[:, None]
    preds = np.empty_like(gh.train_X)
    keep = np.arange(gh.train_Y.shape[0])
    for i in range(gh.train_Y.shape[0]):
        mask = keep != i
        sub = mf._fit_gh(gh.train_Y[mask], gh.train_X[mask], gh.eps_tilde, gh.delta)
        preds[i] = mf.lift_gh(sub, gh.train_Y[i], check_support=False)
    return preds


def _knn_preds(knn, model, rep):
    preds = np.empty_like(knn.train_X)
    for i in range(knn.train_Y.shape[0]):
        preds[i] = mf.lift_knn(knn, knn.train_Y[i], model, exclude=i)
    return preds


def _traffic_wave_start(cfg, ts, v0):
    """Coarse state of the settled wave attractor at the branch start."""
    p = replace(traffic_params(cfg), v0=v0)
    _, pos, _ = tr.integrate(tr.sinusoidal_ic(4.0, p), 700.0, p)
    row = tr._headways_of_positions(pos[-1], p.ring_length)
    y0, phase = ts.coarse_of_rows(row[None, :])
    ts.phase = phase
    return y0


def _market_lower_start(cfg, ts, g, seed):
    p = replace(market_params(cfg), g=g)
    rng = np.random.default_rng([seed, 987])
    rows = np.empty((8, p.n_agents))
    for r in range(8):
        states, _, _ = mk.simulate(mk.gaussian_ic(0.05, p.n_agents, rng), 40, p, rng)
        rows[r] = np.sort(states[-1].agent_states)
    y0, _ = ts.coarse_of_rows(np.mean(rows, axis=0)[None, :])
    return y0


def run_bifurcate(cfg, seed, outdir, lifter="gh"):
    out = _out(outdir)
    model, gh, knn = _load_manifold(out)
    ts = build_timestepper(cfg, model, gh, knn, lifter)
    c = cfg["continuation"]
    tag = config_hash(cfg, seed)

    stop_lo = c.get("stop_obs_below")
    stop_hi = c.get("stop_obs_above")

    def stop_fn(pt):
        if pt.observable is None:
            return False
        if stop_lo is not None and pt.observable < stop_lo:
            return True
        if stop_hi is not None and pt.observable > stop_hi:
            return True
        return False

    if _is_traffic(cfg):
        y_start = _traffic_wave_start(cfg, ts, c["start_lam"])
    else:
        y_start = _market_lower_start(cfg, ts, c["start_lam"], seed)

    branch = trace_branch(
        y_start, c["start_lam"], ts, lam_range=(c["lam_min"], c["lam_max"]),
        ds=c["ds"], max_steps=int(c["max_steps"]), tol=c["tol"],
        bootstrap_dlam=c["bootstrap_dlam"], seed=seed,
        stop_fn=stop_fn, max_obs_jump=c.get("max_obs_jump"))
    if not c.get("allow_step_doubling", True):
        pass  # trace_branch already clamps; doubling handled by ds bounds
    _write_branch_csv(out / f"branch_{lifter}.csv", branch, tag, seed)
    fileio.write_csv(out / f"folds_{lifter}.csv",
                     ["lambda", "coarse_norm", "observable"],
                     [(lf, float(np.linalg.norm(yf)),
                       np.nan if of is None else of)
                      for lf, yf, of in branch.fold_points],
                     comment=f"config={tag} seed={seed}")

    freeflow = None
    if _is_traffic(cfg):
        freeflow = _trace_traffic_freeflow(cfg, ts, out, lifter, tag, seed)
    return branch, freeflow


def _trace_traffic_freeflow(cfg, ts, out, lifter, tag, seed):
    """Walk the free-flow branch in natural continuation, flag stability."""
    c = cfg["continuation"]
    p = traffic_params(cfg)
    row_ff = tr.headways(tr.free_flow_state(p), p)
    y_ff, phase = ts.coarse_of_rows(row_ff[None, :])
    ts.phase = phase
    lams = np.arange(c["free_flow_lam_lo"], c["free_flow_lam_hi"] + 1e-12,
                     c["free_flow_dlam"])
    rows = []
    points = []
    for lam in lams:
        pt = natural_newton(y_ff, float(lam), ts, tol=c["tol"], seed=seed)
        points.append(pt)
        rows.append((pt.lam, pt.y[0], pt.observable if pt.observable is not None
                     else np.nan, pt.stable, pt.multipliers[0]))
    fileio.write_csv(out / f"freeflow_{lifter}.csv",
                     ["lambda", "coarse", "observable", "stable", "multiplier"],
                     rows, comment=f"config={tag} seed={seed}")
    return points


def _write_branch_csv(path, branch, tag, seed):
    rows = []
    for pt in branch.points:
        rows.append((pt.lam,) + tuple(pt.y)
                    + (np.nan if pt.observable is None else pt.observable,
                       {True: 1, False: 0, None: -1}[pt.stable],
                       ";".join(repr(m) for m in pt.multipliers)))
    d = len(branch.points[0].y) if branch.points else 1
    header = (["lambda"] + [f"y{i+1}" for i in range(d)]
              + ["observable", "stable", "multipliers"])
    fileio.write_csv(path, header, rows, comment=f"config={tag} seed={seed}")


def _ctl_start_point(cfg, model, ts, dataset_path):
    """Initial coarse guess for the unstable target: the dataset row whose
    physical observable is nearest the configured start value."""
    ds = fileio.read_dataset(dataset_path)
    cc = cfg["controller"]
    if _is_traffic(cfg):
        obs = ds.X.std(axis=1)
        target_obs = cc["start_sigma"]
    else:
        obs = ds.X.mean(axis=1)
        target_obs = cc["start_mean"]
    i = int(np.argmin(np.abs(obs - target_obs)))
    y0, phase = ts.coarse_of_rows(ds.X[i][None, :])
    if phase is not None:
        ts.phase = phase
    return y0


def run_design_controller(cfg, seed, outdir, lifter="gh"):
    out = _out(outdir)
    model, gh, knn = _load_manifold(out)
    ts = build_timestepper(cfg, model, gh, knn, lifter)
    cc = cfg["controller"]
    tag = config_hash(cfg, seed)

    y_guess = _ctl_start_point(cfg, model, ts, out / "dataset.evfm")
    pt = natural_newton(y_guess, cc["target_lam"], ts, tol=cc["newton_tol"],
                        seed=seed, u=cc["u_star"])
    ts.commit_phase()
    _, _, obs0 = ts.observe(pt.y, cc["target_lam"], u=cc["u_star"], seed=seed)
    plant = ctl.estimate_AB(ts, pt.y, cc["u_star"], cc["T"], dy=cc["fd_dy"],
                            du=cc["fd_du"], lam=cc["target_lam"], seed=seed)
    controller = ctl.lqr_design(plant, cc["q_weight"], cc["r_weight"])
    Ac = controller.closed_loop_matrix
    rho = float(np.max(np.abs(np.linalg.eigvals(Ac))))
    bound, _, _ = ctl.bauer_fike_margin(Ac)
    bound1, _, _ = ctl.bauer_fike_margin(Ac, p=1)

    blob = {
        "lifter": lifter,
        "A": plant.A.tolist(), "B": plant.B.ravel().tolist(),
        "y0": plant.y0.tolist(), "u_star": plant.u_star, "T": plant.T,
        "K": controller.K.tolist(), "Dgain": controller.Dgain,
        "phase": ts.phase, "target_lam": cc["target_lam"],
        "target_observable": obs0, "multipliers": pt.multipliers.tolist(),
        "rho_closed_loop": rho, "bauer_fike_bound_p2": bound,
        "bauer_fike_bound_p1": bound1,
    }
    (out / f"controller_{lifter}.json").write_text(
        json.dumps(blob, sort_keys=True, indent=1) + "\n")
    fileio.write_csv(out / f"gains_{lifter}.csv",
                     ["name", "value"],
                     [("A", plant.A[0, 0] if plant.A.size == 1 else np.nan),
                      ("B", plant.B.ravel()[0]),
                      ("K", controller.K[0] if controller.K.size == 1 else np.nan),
                      ("Dgain", controller.Dgain),
                      ("y0", plant.y0[0] if plant.y0.size == 1 else np.nan),
                      ("target_observable", obs0),
                      ("rho_closed_loop", rho),
                      ("bauer_fike_bound_p2", bound)],
                     comment=f"config={tag} seed={seed}")
    return blob


def _load_controller(outdir, lifter):
    blob = json.loads((Path(outdir) / f"controller_{lifter}.json").read_text())
    plant = ctl.LinearizedPlant(A=np.array(blob["A"]), B=np.array(blob["B"]),
                                y0=np.array(blob["y0"]), u_star=blob["u_star"],
                                T=blob["T"])
    controller = ctl.WashoutController(K=np.array(blob["K"]),
                                       Dgain=blob["Dgain"], plant=plant)
    return blob, controller


def run_control_run(cfg, seed, outdir, lifter="gh", controller_off=False):
    out = _out(outdir)
    model, gh, knn = _load_manifold(out)
    ts = build_timestepper(cfg, model, gh, knn, lifter)
    blob, controller = _load_controller(out, lifter)
    cc = cfg["controller"]
    ts.phase = blob["phase"]
    tag = config_hash(cfg, seed)
    suffix = f"{lifter}_off" if controller_off else lifter
    if _is_traffic(cfg):
        times, obs, us = _traffic_closed_loop(cfg, ts, controller, blob, seed,
                                              controller_off)
        rows = list(zip(times, obs, us))
        fileio.write_csv(out / f"control_trace_{suffix}.csv",
                         ["t", "sigma", "u"], rows,
                         comment=f"config={tag} seed={seed}")
        return times, obs, us
    times, obs, us, n_blown, n_low = _market_closed_loop(cfg, ts, controller,
                                                         blob, seed, controller_off)
    fileio.write_csv(out / f"control_trace_{suffix}.csv",
                     ["t", "xbar_mean", "u"], list(zip(times, obs, us)),
                     comment=f"config={tag} seed={seed}")
    fileio.write_csv(out / f"ensemble_summary_{suffix}.csv",
                     ["n_replicas", "n_blown", "n_decayed"],
                     [(int(cfg["timestepper"]["n_replicas"]), n_blown, n_low)],
                     comment=f"config={tag} seed={seed}")
    return times, obs, us


def _traffic_closed_loop(cfg, ts, controller, blob, seed, controller_off):
    cc = cfg["controller"]
    p = replace(traffic_params(cfg), v0=cc["target_lam"])
    y_start = np.array(blob["y0"]) * (1.0 + cc["perturb_frac"])
    x0 = np.asarray(ts._lift(ts._embed(y_start)), dtype=float).reshape(-1)
    state = tr.state_from_headways(x0, p)

    def restrict_fn(st):
        row = tr.headways(st, p)
        y, _ = ts.coarse_of_rows(row[None, :])
        return y

    def observe_fn(st):
        return tr.headway_std(st, p)

    def advance_fn(st, u):
        pu = replace(p, h=u)
        _, pos, vel = tr.integrate(st, cc["T"], pu)
        return tr.TrafficState(pos[-1], vel[-1])

    if controller_off:
        times = [0.0]
        obs = [observe_fn(state)]
        us = [cc["u_star"]]
        for k in range(int(cc["horizon_steps"])):
            state = advance_fn(state, cc["u_star"])
            times.append((k + 1) * cc["T"])
            obs.append(observe_fn(state))
            us.append(cc["u_star"])
        return np.array(times), np.array(obs), np.array(us)
    return ctl.closed_loop_run(controller, state, restrict_fn, advance_fn,
                               observe_fn, int(cc["horizon_steps"]),
                               clip_frac=cc["clip_frac"])


def _market_closed_loop(cfg, ts, controller, blob, seed, controller_off):
    cc = cfg["controller"]
    p = replace(market_params(cfg), g=cc["target_lam"])
    n_rep = int(cfg["timestepper"]["n_replicas"])
    steps_per_T = int(round(cc["T"] / p.t_rep))
    x0 = np.asarray(ts._lift(ts._embed(np.array(blob["y0"]))), dtype=float).reshape(-1)
    x0 = np.clip(x0, -1.0 + 1e-12, 1.0 - 1e-12)
    states = [mk.MarketState(x0.copy()) for _ in range(n_rep)]
    rngs = [np.random.default_rng([seed, 77, r]) for r in range(n_rep)]
    blown = np.zeros(n_rep, dtype=bool)

    def ensemble_restrict(sts):
        rows = np.stack([np.sort(s.agent_states) for s in sts])
        y, _ = ts.coarse_of_rows(rows)
        return y

    def ensemble_mean(sts):
        return float(np.mean([s.mean for s in sts]))

    def advance_all(sts, u):
        pu = replace(p, nu_ex_minus=u)
        for r in range(n_rep):
            if blown[r]:
                continue
            cur = sts[r]
            for _ in range(steps_per_T):
                if mk.is_blown(cur, pu):
                    blown[r] = True
                    break
                cur = mk.step_interval(cur, pu, rngs[r])
            sts[r] = cur
        return sts

    controller.reset()
    u_star = cc["u_star"]
    lo = u_star * (1 - cc["clip_frac"])
    hi = u_star * (1 + cc["clip_frac"])
    times = [0.0]
    obs = [ensemble_mean(states)]
    us = []
    for k in range(int(cc["horizon_steps"])):
        if controller_off:
            u = u_star
        else:
            y = ensemble_restrict(states)
            u = float(np.clip(ctl.washout_step(controller, y), lo, hi))
        us.append(u)
        states = advance_all(states, u)
        times.append((k + 1) * cc["T"])
        obs.append(ensemble_mean(states))
    us.append(us[-1])
    final_means = np.array([s.mean for s in states])
    n_blown = int(blown.sum())
    n_low = int(np.sum(~blown & (final_means < blob["target_observable"] - 0.05)))
    return np.array(times), np.array(obs), np.array(us), n_blown, n_low
