"""Command-line entry point.

    evfml <sample|dmap|loocv|bifurcate|design-controller|control-run>
          --config FILE --seed U64 --out DIR [--preset NAME]
          [--lifter gh|knn] [--controller-off]

Stages write deterministic artifacts into --out and later stages read the
earlier ones from the same directory.
"""

import argparse
import sys

from . import pipeline
from .presets import load_config, preset_names

_STAGES = ["sample", "dmap", "loocv", "bifurcate", "design-controller", "control-run"]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="evfml",
                                 description="Equation/variable-free pipeline stages")
    sub = ap.add_subparsers(dest="stage", required=True)
    for stage in _STAGES:
        sp = sub.add_parser(stage)
        sp.add_argument("--config", default=None, help="INI config file")
        sp.add_argument("--preset", default=None, choices=preset_names(),
                        help="named preset to start from")
        sp.add_argument("--seed", type=int, required=True)
        sp.add_argument("--out", required=True, help="output directory")
        if stage in ("bifurcate", "design-controller", "control-run"):
            sp.add_argument("--lifter", choices=["gh", "knn"], default="gh")
        if stage == "control-run":
            sp.add_argument("--controller-off", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.config is None and args.preset is None:
        print("error: need --config and/or --preset", file=sys.stderr)
        return 2
    if args.seed < 0 or args.seed >= 2**64:
        print("error: seed must fit in u64", file=sys.stderr)
        return 2
    cfg = load_config(args.config, args.preset)
    if args.stage == "sample":
        ds = pipeline.run_sample(cfg, args.seed, args.out)
        print(f"sample: wrote dataset {ds.n_rows}x{ds.n_cols} to {args.out}")
    elif args.stage == "dmap":
        full, model, gh, knn = pipeline.run_dmap(cfg, args.seed, args.out)
        print(f"dmap: eps={model.epsilon:.6g} leading eigenvalues "
              f"{[round(float(v), 4) for v in full.eigenvalues[:4]]} gh_modes={gh.n_modes}")
    elif args.stage == "loocv":
        rep_r, rep_g, rep_k = pipeline.run_loocv(cfg, args.seed, args.out)
        print(f"loocv: restriction L2={rep_r.summary()['l2_mean']:.4g} "
              f"gh L2={rep_g.summary()['l2_mean']:.4g} "
              f"knn L2={rep_k.summary()['l2_mean']:.4g}")
    elif args.stage == "bifurcate":
        branch, freeflow = pipeline.run_bifurcate(cfg, args.seed, args.out,
                                                  lifter=args.lifter)
        print(f"bifurcate: {len(branch.points)} points, "
              f"{len(branch.fold_indices)} folds"
              + ("" if branch.fold_points == [] else
                 " at " + ", ".join(f"lambda={lf:.4f}" for lf, _, _ in branch.fold_points)))
    elif args.stage == "design-controller":
        blob = pipeline.run_design_controller(cfg, args.seed, args.out,
                                              lifter=args.lifter)
        print(f"design-controller: K={blob['K']} D={blob['Dgain']:.4g} "
              f"rho={blob['rho_closed_loop']:.4g} "
              f"target_obs={blob['target_observable']:.4g}")
    elif args.stage == "control-run":
        times, obs, us = pipeline.run_control_run(cfg, args.seed, args.out,
                                                  lifter=args.lifter,
                                                  controller_off=args.controller_off)
        u_star = cfg["controller"]["u_star"]
        exc = max(abs(u - u_star) for u in us) / abs(u_star)
        print(f"control-run: {len(times) - 1} steps, final observable "
              f"{obs[-1]:.4g}, max |u-u*|/u* = {exc:.3%}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
