"""Pipeline configuration: named presets, INI-style config files, hashing.

A configuration is a two-level mapping {section: {key: value}} of plain
scalars.  Named presets carry the full parameter sets used in the studies
(paper scale and desk scale); a user config file overlays individual keys.
The config hash recorded in every output is the SHA-256 of the canonical
"section.key=value" dump plus the seed.
"""

import configparser
import copy
import hashlib

__all__ = ["PRESETS", "load_config", "merge_config", "config_hash", "preset_names"]


def _traffic_common():
    return {
        "run": {"model": "traffic"},
        "model": {"n_cars": 20, "ring_length": 40.0, "inv_tau": 1.7, "h": 2.4},
        "dmap": {"epsilon": "heuristic", "heuristic_fraction": 0.61,
                 "n_eigs": 20, "n_coords": 2},
        "gh": {"eps_tilde": 0.02, "delta": 1e-8},
        "knn": {"k": 8},
        "timestepper": {"t_skip": 300.0, "delta": 240.0, "n_replicas": 1,
                        "radial": True, "fd_dy": 2e-3, "fd_dlam": 1e-4},
        "continuation": {"ds": 0.0025, "lam_min": 0.98, "lam_max": 1.085,
                         "start_lam": 1.08, "bootstrap_dlam": -0.0025,
                         "max_steps": 300, "tol": 1e-6, "stop_obs_below": 0.012,
                         "max_obs_jump": 0.1, "allow_step_doubling": False,
                         "free_flow_lam_lo": 0.995, "free_flow_lam_hi": 1.055,
                         "free_flow_dlam": 0.0025},
        "controller": {"target_lam": 1.0099, "u_star": 2.4, "T": 100.0,
                       "q_weight": 0.1, "r_weight": 1.0, "fd_dy": 2e-3,
                       "fd_du": 1e-3, "horizon_steps": 40, "clip_frac": 0.05,
                       "perturb_frac": 0.05, "newton_tol": 1e-6,
                       "start_sigma": 0.17},
        "loocv": {"restriction_mode": "auto", "gh_mode": "auto"},
    }


def _market_common():
    return {
        "run": {"model": "market"},
        "model": {"n_agents": 1000, "eps_plus": 0.075, "eps_minus": -0.072,
                  "nu_ex_plus": 20.0, "nu_ex_minus": 20.0, "gamma": 1.0,
                  "t_rep": 0.25},
        "dmap": {"epsilon": "heuristic", "heuristic_fraction": 0.50,
                 "n_eigs": 20, "n_coords": 1},
        "gh": {"eps_tilde": "heuristic", "eps_tilde_fraction": 0.01,
               "delta": 1e-10},
        "knn": {"k": 3},
        "timestepper": {"t_skip": 2.0, "delta": 1.0, "n_replicas": 200,
                        "radial": False, "fd_dy": 5e-3, "fd_dlam": 5e-2},
        "continuation": {"ds": 0.4, "lam_min": 38.0, "lam_max": 48.0,
                         "start_lam": 39.0, "bootstrap_dlam": 0.4,
                         "max_steps": 80, "tol": 1e-3, "stop_obs_below": None,
                         "stop_obs_above": 0.45, "max_obs_jump": 0.12,
                         "allow_step_doubling": False},
        "controller": {"target_lam": 41.0, "u_star": 20.0, "T": 1.0,
                       "q_weight": 0.1, "r_weight": 1.0, "fd_dy": 5e-3,
                       "fd_du": 5e-2, "horizon_steps": 60, "clip_frac": 0.05,
                       "perturb_frac": 0.0, "newton_tol": 1e-3,
                       "start_mean": 0.25},
        "loocv": {"restriction_mode": "auto", "gh_mode": "auto"},
    }


def _build_presets():
    presets = {}

    tb = _traffic_common()
    tb["sample"] = {"kind": "bifurcation", "n_samples": 5000,
                    "mu_lo": 0.0, "mu_hi": 4.5, "t_lo": 200.0, "t_hi": 700.0,
                    "v0_lo": 0.98, "v0_hi": 1.08}
    tb["dmap"]["epsilon"] = 3.38
    tb["gh"]["eps_tilde"] = 0.025
    tb["gh"]["delta"] = 2.17e-8
    presets["traffic-bif"] = tb

    tbd = copy.deepcopy(tb)
    tbd["sample"]["n_samples"] = 2000
    tbd["dmap"]["epsilon"] = "heuristic"
    tbd["gh"]["eps_tilde"] = 0.02
    tbd["gh"]["delta"] = 1e-8
    presets["traffic-bif-desk"] = tbd

    tc = _traffic_common()
    tc["sample"] = {"kind": "control", "v0": 1.0099,
                    "mu_lo": 0.2, "mu_hi": 1.8, "n_mu": 5,
                    "h_lo": 2.39, "h_hi": 2.41, "n_h": 5,
                    "t_end": 1600.0, "t_sample": 4.0}
    tc["dmap"]["epsilon"] = 1.16
    tc["gh"]["eps_tilde"] = 7.23e-3
    tc["gh"]["delta"] = 5.58e-8
    presets["traffic-ctl"] = tc

    tcd = copy.deepcopy(tc)
    tcd["sample"]["t_sample"] = 8.0
    tcd["dmap"]["epsilon"] = "heuristic"
    tcd["gh"]["eps_tilde"] = "heuristic"
    tcd["gh"]["eps_tilde_fraction"] = 0.01
    tcd["gh"]["delta"] = 1e-8
    presets["traffic-ctl-desk"] = tcd

    mb = _market_common()
    mb["sample"] = {"kind": "bifurcation", "n_trajectories": 750,
                    "mu_lo": 0.0, "mu_hi": 0.45, "g_lo": 38.0, "g_hi": 46.0,
                    "n_intervals": 20}
    presets["market-bif-desk"] = mb

    mbf = copy.deepcopy(mb)
    mbf["model"]["n_agents"] = 5000
    mbf["sample"]["n_trajectories"] = 2500
    mbf["dmap"]["epsilon"] = 6.79
    mbf["gh"]["eps_tilde"] = 3.67e-4
    mbf["gh"]["delta"] = 3.97e-11
    mbf["timestepper"]["n_replicas"] = 2000
    presets["market-bif"] = mbf

    mc = _market_common()
    mc["sample"] = {"kind": "control", "g": 41.0,
                    "mu_lo": 0.2, "mu_hi": 0.4, "n_mu": 11,
                    "nu_lo": 19.0, "nu_hi": 21.0, "n_nu": 5,
                    "n_intervals": 40}
    presets["market-ctl-desk"] = mc

    mcf = copy.deepcopy(mc)
    mcf["model"]["n_agents"] = 5000
    mcf["sample"]["n_nu"] = 31
    mcf["dmap"]["epsilon"] = 8.10
    mcf["gh"]["eps_tilde"] = 3.14e-4
    mcf["gh"]["delta"] = 1.05e-8
    mcf["timestepper"]["n_replicas"] = 2000
    presets["market-ctl"] = mcf

    # tiny synthetic presets for fast end-to-end CLI checks
    tt = copy.deepcopy(tbd)
    tt["sample"]["n_samples"] = 120
    tt["dmap"]["n_eigs"] = 10
    tt["gh"]["eps_tilde"] = 0.06
    tt["gh"]["delta"] = 1e-6
    tt["timestepper"]["t_skip"] = 100.0
    tt["timestepper"]["delta"] = 80.0
    presets["traffic-tiny"] = tt

    mt = copy.deepcopy(mb)
    mt["model"]["n_agents"] = 100
    mt["sample"]["n_trajectories"] = 60
    mt["timestepper"]["n_replicas"] = 20
    presets["market-tiny"] = mt

    return presets


PRESETS = _build_presets()


def preset_names():
    return sorted(PRESETS)


def merge_config(base: dict, overlay: dict) -> dict:
    out = copy.deepcopy(base)
    for sec, kv in overlay.items():
        out.setdefault(sec, {})
        for k, v in kv.items():
            out[sec][k] = v
    return out


def _coerce(text: str):
    low = text.strip()
    if low.lower() in ("true", "false"):
        return low.lower() == "true"
    if low.lower() in ("none", ""):
        return None
    for cast in (int, float):
        try:
            return cast(low)
        except ValueError:
            continue
    return low


def load_config(path=None, preset: str | None = None) -> dict:
    """Config from a named preset, an INI file, or the file over the preset."""
    if preset is not None:
        if preset not in PRESETS:
            raise KeyError(f"unknown preset {preset!r}; available: {preset_names()}")
        cfg = copy.deepcopy(PRESETS[preset])
    else:
        cfg = {}
    if path is not None:
        parser = configparser.ConfigParser()
        with open(path) as fh:
            parser.read_file(fh)
        overlay = {sec: {k: _coerce(v) for k, v in parser[sec].items()}
                   for sec in parser.sections()}
        if preset is None and "run" in overlay and "preset" in overlay["run"]:
            base = copy.deepcopy(PRESETS[overlay["run"]["preset"]])
            cfg = merge_config(base, overlay)
        else:
            cfg = merge_config(cfg, overlay)
    if not cfg:
        raise ValueError("no preset or config file given")
    return cfg


def config_hash(cfg: dict, seed: int) -> str:
    lines = [f"seed={seed}"]
    for sec in sorted(cfg):
        for key in sorted(cfg[sec]):
            lines.append(f"{sec}.{key}={cfg[sec][key]!r}")
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]
