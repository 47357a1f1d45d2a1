"""Command-line interface.

Subcommands: ``convergence`` (the rate study), ``solve`` (one sample),
``cbc`` (construct a generating vector), ``weights`` (constants report),
``check`` (assumption diagnostics).  All take a JSON config via
``--config``; ``--seed``, ``--out`` and ``--threads`` override or direct
the run.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import fem, lattice, weights
from .experiment import ExperimentConfig, predict, run_convergence
from .field import check_assumptions, compute_decay, model_from_config
from .mesh import build_mesh


def _load_config(path):
    if path is None:
        raise SystemExit("--config is required for this subcommand")
    return json.loads(Path(path).read_text())


def _emit(obj, out_dir, name):
    text = json.dumps(obj, indent=2, default=_jsonable)
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / name).write_text(text + "\n")
    print(text)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(f"not JSON serializable: {type(v)}")


def cmd_convergence(args):
    cfg = ExperimentConfig.from_dict(_load_config(args.config))
    if args.seed is not None:
        cfg.seed = args.seed
    records, summary = run_convergence(cfg, out_dir=args.out or ".",
                                       threads=args.threads)
    print(json.dumps(summary["rates"], indent=2, default=_jsonable))


def cmd_solve(args):
    cfg = _load_config(args.config)
    model = model_from_config(cfg["model"])
    mesh = build_mesh(int(cfg.get("mesh_m", 10)))
    method = cfg.get("method", "rth")
    s = model.s
    if "y" in cfg:
        y = np.asarray(cfg["y"], dtype=np.float64)
    else:
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
        y = (rng.random(s) - 0.5 if model.kind == "affine"
             else rng.standard_normal(s))
    scfg = fem.SolverConfig(tol=float(cfg.get("tol", 1e-10)))

    def a_fun(x):
        from .field import eval_field
        return eval_field(model, x, y)

    f_fun = lambda x: x[..., 0]  # noqa: E731
    if method == "rth":
        sol = fem.solve_rth(mesh, a_fun, f_fun, scfg)
    elif method == "p1":
        sol = fem.solve_p1(mesh, lambda x: 1.0 / a_fun(x), f_fun, scfg)
    elif method == "ldgh":
        sol = fem.solve_ldgh(mesh, a_fun, f_fun, float(cfg.get("tau", 1.0)), scfg)
    else:
        raise SystemExit(f"unknown method {method!r}")
    qoi = fem.qoi_eval(sol, mesh, a_fun)
    _emit({
        "method": method,
        "qoi": {"mean_u": qoi.mean_u, "mean_grad": qoi.mean_grad,
                "mean_flux": qoi.mean_flux, "quadratic_flux": qoi.quadratic_flux},
        "energy_norm": sol.energy_norm,
        "iterations": sol.iterations,
        "residual": sol.residual,
    }, args.out, "solve.json")


def cmd_cbc(args):
    cfg = _load_config(args.config)
    n, s = int(cfg["n"]), int(cfg["s"])
    if "gamma" in cfg:
        gamma = np.asarray(cfg["gamma"], dtype=np.float64)
    else:
        model = model_from_config(cfg["model"])
        decay = compute_decay(model)
        sigma = 1.0 if model.xi == "identity" else model.sigma
        params = weights.WeightParams(sigma=sigma, p=1.0 / model.theta,
                                      r=float(cfg.get("r", 1.0)), b=decay.b,
                                      epsilon=cfg.get("epsilon"))
        kind = "bounded" if model.kind == "affine" else "gaussian"
        gamma = weights.mode_weight_majorant(params, s, kind)
    gv = lattice.cbc_construct(n, s, gamma)
    lines = [f"{j} {z}" for j, z in enumerate(gv.z, start=1)]
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"lattice-cbc-{n}-{s}.txt"
    path.write_text("\n".join(lines) + "\n")
    print(f"wrote {path} (e2 = "
          f"{lattice.squared_worst_case_error(n, gv.z, gamma):.6e})")


def cmd_weights(args):
    cfg = _load_config(args.config)
    if "model" in cfg:
        model = model_from_config(cfg["model"])
        rep = predict(ExperimentConfig(model=cfg["model"], n_list=[4, 8],
                                       mesh_m=10))
        report = {"lambda": rep["lambda"], "gamma": rep["gamma"],
                  "constant": rep["constant"],
                  "predicted_rate": rep["predicted_rate"]}
    else:
        params = weights.WeightParams(
            sigma=float(cfg["sigma"]), p=float(cfg["p"]), r=float(cfg.get("r", 1.0)),
            b=np.asarray(cfg["b"], dtype=np.float64),
            C_R=float(cfg.get("C_R", 1.0)), C_G=float(cfg.get("C_G", 1.0)),
            lam=cfg.get("lambda"), epsilon=cfg.get("epsilon"))
        kind = cfg.get("kind", "bounded")
        gamma_fn = weights.gamma_uniform if kind == "bounded" else weights.gamma_gaussian
        subsets = [tuple(u) for u in cfg.get("subsets", [[0], [1], [0, 1]])]
        gamma = {"{" + ",".join(str(j + 1) for j in u) + "}": gamma_fn(u, params)
                 for u in subsets}
        s_rep = min(len(params.b), 8)
        constant = weights.error_constant(s_rep, lambda u: gamma_fn(u, params),
                                          params.lam, kind, params)
        rate = weights.theoretical_rate(params.p, params.r, params.sigma)
        report = {"lambda": params.lam, "gamma": gamma, "constant": constant,
                  "predicted_rate": rate.exponent}
    _emit(report, args.out, "weights.json")


def cmd_check(args):
    cfg = _load_config(args.config)
    model = model_from_config(cfg["model"])
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    n_samples = int(cfg.get("samples", 10))
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    ys = (rng.random((n_samples, model.s)) - 0.5 if model.kind == "affine"
          else rng.standard_normal((n_samples, model.s)))
    report = {"coefficient": check_assumptions(model, ys)}
    mesh_m = int(cfg.get("mesh_m", 10))
    report["discretization"] = fem.check_a1_a2(build_mesh(mesh_m), model, ys)
    _emit(report, args.out, "check.json")


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="fluxqmc",
        description="QMC uncertainty quantification for flux quantities of "
                    "the diffusion equation with random coefficients")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to a JSON configuration")
    common.add_argument("--seed", type=int, default=None,
                        help="override the configured random seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads for shift evaluation")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("convergence", cmd_convergence), ("solve", cmd_solve),
                     ("cbc", cmd_cbc), ("weights", cmd_weights),
                     ("check", cmd_check)):
        p = sub.add_parser(name, parents=[common])
        p.set_defaults(func=fn)
    args = parser.parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    sys.exit(main())
