"""Convergence study orchestration.

For a chosen coefficient model, sweeps the number of lattice points n over
powers of two, estimates each flux quantity of interest with R randomly
shifted lattice rules (every estimate averaging n finite element solves),
and writes per-(n, quantity, component) records to CSV together with a
JSON summary of fitted and predicted rates.

The RMSE column is the shift-based estimate
sqrt( sum_r (Q_r - mean)^2 / (R(R-1)) ) per component; rate fits collapse
vector quantities to the Euclidean norm over their component RMSEs.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import fem, lattice, weights
from .errors import SolverError
from .field import compute_decay, model_from_config
from .mesh import TRI_QUAD_BARY, build_mesh

QOI_COMPONENTS = {
    "u": [("value", 0)],
    "grad": [("x", 1), ("y", 2)],
    "flux": [("x", 3), ("y", 4)],
    "quad": [("value", 5)],
}

CSV_COLUMNS = ["model", "method", "qoi", "component", "n", "R",
               "qmean", "rmse", "status", "seconds"]


@dataclass
class ExperimentConfig:
    model: dict
    n_list: list
    mesh_m: int = 10
    method: str = "rth"
    R: int = 8
    seed: int = 0
    gv_source: str | dict = "builtin"
    qois: tuple = ("u", "grad", "flux")
    subdomain: tuple = (0.2, 0.8)
    tau: float = 1.0
    tol: float = 1e-10
    chunk: int = 512

    def __post_init__(self):
        ns = list(self.n_list)
        if any(ns[i] >= ns[i + 1] for i in range(len(ns) - 1)):
            raise ValueError("n_list must be strictly increasing")
        if any(n & (n - 1) or n < 2 for n in ns):
            raise ValueError("n_list entries must be powers of two")
        if self.R < 2:
            raise ValueError("at least two random shifts are required")
        if self.mesh_m % 5:
            raise ValueError("mesh_m must be a multiple of 5 so the "
                             "subdomain is element-aligned")
        unknown = set(self.qois) - set(QOI_COMPONENTS)
        if unknown:
            raise ValueError(f"unknown quantities of interest: {sorted(unknown)}")
        self.n_list = ns

    @classmethod
    def from_dict(cls, cfg: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in cfg.items() if k in known})

    def label(self) -> str:
        xi = self.model.get("xi", "identity")
        tag = self.model["kind"]
        if xi != "identity":
            tag += f"-{xi.split('-')[0]}{self.model.get('sigma', 1.25)}"
        return tag


@dataclass
class ConvergenceRecord:
    model: str
    method: str
    qoi: str
    component: str
    n: int
    R: int
    qmean: float
    rmse: float
    status: str
    seconds: float

    def row(self):
        return [self.model, self.method, self.qoi, self.component,
                str(self.n), str(self.R), _fmt(self.qmean), _fmt(self.rmse),
                self.status, f"{self.seconds:.3f}"]


def _fmt(v: float) -> str:
    return "" if v is None or not np.isfinite(v) else f"{v:.17g}"


def _resolve_generating_vector(cfg: ExperimentConfig, s: int, n_max: int):
    src = cfg.gv_source
    if src == "builtin":
        return lattice.builtin_generating_vector(s, n_max)
    if isinstance(src, dict) and "file" in src:
        return lattice.load_generating_vector(src["file"], s, n_max)
    if src == "cbc":
        model = model_from_config(cfg.model)
        decay = compute_decay(model)
        sigma = 1.0 if cfg.model.get("xi", "identity") == "identity" \
            else float(cfg.model.get("sigma", 1.25))
        params = weights.WeightParams(sigma=sigma, p=1.0 / model.theta, r=1.0,
                                      b=decay.b)
        kind = "bounded" if model.kind == "affine" else "gaussian"
        gamma = weights.mode_weight_majorant(params, s, kind)
        return lattice.cbc_construct(n_max, s, gamma)
    raise ValueError(f"unknown generating-vector source {src!r}")


class QoIEvaluator:
    """Maps batches of mapped parameter vectors to the 6 QoI columns
    [u, grad_x, grad_y, flux_x, flux_y, quad] for the configured method."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.model = model_from_config(cfg.model)
        self.mesh = build_mesh(cfg.mesh_m)
        self.mask = self.mesh.subdomain_mask(*cfg.subdomain)
        self.scfg = fem.SolverConfig(tol=cfg.tol)
        self.map_kind = "uniform" if self.model.kind == "affine" else "gaussian"
        if cfg.method == "rth":
            self.op = fem.RTHOperator(self.mesh)
            self.f_int = self.op.source_integrals(lambda x: x[..., 0])
        elif cfg.method == "p1":
            self.op = fem.P1Operator(self.mesh)
        elif cfg.method == "ldgh":
            self.op = fem.LDGHOperator(self.mesh, cfg.tau)
        else:
            raise ValueError(f"unknown method {cfg.method!r}")

    @property
    def s(self) -> int:
        return self.model.s

    def __call__(self, Y: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        out = np.empty((len(Y), 6))
        for lo in range(0, len(Y), cfg.chunk):
            yb = Y[lo:lo + cfg.chunk]
            aq = self.op.coefficient_at_quad(self.model, yb)
            if cfg.method == "rth":
                sol = self.op.solve_batch(aq, self.f_int, self.scfg)
                out[lo:lo + len(yb)] = fem.qoi_eval_batch(
                    self.op, sol["Q"], sol["u"], aq, self.mask)
            elif cfg.method == "p1":
                sol = self.op.solve_batch(1.0 / aq, lambda x: x[..., 0], self.scfg)
                out[lo:lo + len(yb)] = self._qoi_p1(sol, aq)
            else:
                out[lo:lo + len(yb)] = self._qoi_ldgh(aq, yb)
        return out

    def _qoi_p1(self, sol, aq):
        op, mask = self.op, self.mask
        sub = op.mesh.area[mask].sum()
        u_loc, gu = sol["u_loc"], sol["gu"]
        mean_u = (u_loc[:, mask].mean(axis=2) * op.mesh.area[mask]).sum(axis=1) / sub
        qv = -((1.0 / aq)[..., None] * gu[:, :, None, :])
        mean_flux = np.einsum("fq,bfqd->bd", op.WQ[mask], qv[:, mask]) / sub
        mean_grad = (gu[:, mask] * op.mesh.area[mask, None]).sum(axis=1) / sub
        quad = np.einsum("fq,bfqd,bfqd->b", op.WQ, qv, qv, optimize=True)
        return np.column_stack([mean_u, mean_grad, mean_flux, quad])

    def _qoi_ldgh(self, aq, yb):
        op, mask = self.op, self.mask
        sub = op.mesh.area[mask].sum()
        rows = np.empty((len(yb), 6))
        for i in range(len(yb)):
            out = op.solve(aq[i], lambda x: x[..., 0], self.scfg)
            qv = np.einsum("qi,fid->fqd", TRI_QUAD_BARY, out["q"].reshape(-1, 3, 2))
            uq = np.einsum("qi,fi->fq", TRI_QUAD_BARY, out["u"])
            rows[i, 0] = np.einsum("fq,fq->", op.WQ[mask], uq[mask]) / sub
            rows[i, 1:3] = -np.einsum("fq,fq,fqd->d", op.WQ[mask], aq[i][mask],
                                      qv[mask]) / sub
            rows[i, 3:5] = np.einsum("fq,fqd->d", op.WQ[mask], qv[mask]) / sub
            rows[i, 5] = np.einsum("fq,fqd,fqd->", op.WQ, qv, qv)
        return rows


def run_convergence(cfg: ExperimentConfig, out_dir=None, threads: int = 1):
    """Run the sweep; returns (records, summary) and, when ``out_dir`` is
    given, writes convergence-<model>-<method>.csv and a JSON summary."""
    evaluator = QoIEvaluator(cfg)
    s = evaluator.s
    gv_max = _resolve_generating_vector(cfg, s, max(cfg.n_list))
    shifts = lattice.generate_shifts(cfg.R, s, cfg.seed)
    mapper = lattice.map_uniform if evaluator.map_kind == "uniform" \
        else lattice.map_gaussian

    records = []
    label = cfg.label()
    fitlists = {q: ([], []) for q in cfg.qois}
    for n in cfg.n_list:
        t0 = time.perf_counter()
        gv = lattice.GeneratingVector(n=n, z=gv_max.z, source=gv_max.source)
        base = lattice.lattice_points(gv)

        def one_shift(r):
            pts = lattice.shifted_point(base, shifts.shifts[r])
            return evaluator(mapper(pts)).mean(axis=0)

        per_shift = np.empty((cfg.R, 6))
        failed = []
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                futs = {r: ex.submit(one_shift, r) for r in range(cfg.R)}
            for r, fut in futs.items():
                try:
                    per_shift[r] = fut.result()
                except SolverError:
                    per_shift[r] = np.nan
                    failed.append(r)
        else:
            for r in range(cfg.R):
                try:
                    per_shift[r] = one_shift(r)
                except SolverError:
                    per_shift[r] = np.nan
                    failed.append(r)
        seconds = time.perf_counter() - t0

        good = np.asarray([r for r in range(cfg.R) if r not in failed])
        status = "ok" if not failed else "failed_shifts=" + ",".join(map(str, failed))
        vals = per_shift[good]
        mean = vals.mean(axis=0) if len(good) else np.full(6, np.nan)
        if len(good) >= 2:
            dev = vals - mean
            rmse = np.sqrt((dev * dev).sum(axis=0) / (len(good) * (len(good) - 1)))
        else:
            rmse = np.full(6, np.nan)

        for q in cfg.qois:
            comp_rmses = []
            for cname, col in QOI_COMPONENTS[q]:
                records.append(ConvergenceRecord(
                    model=label, method=cfg.method, qoi=q, component=cname,
                    n=n, R=cfg.R, qmean=float(mean[col]), rmse=float(rmse[col]),
                    status=status, seconds=seconds))
                comp_rmses.append(rmse[col])
            fitlists[q][0].append(n)
            fitlists[q][1].append(float(np.sqrt(np.sum(np.square(comp_rmses)))))

    summary = {
        "model": label, "method": cfg.method, "seed": cfg.seed, "R": cfg.R,
        "mesh_m": cfg.mesh_m, "s": s, "n_list": cfg.n_list,
        "rates": {}, "prediction": predict(cfg),
    }
    for q in cfg.qois:
        ns, es = fitlists[q]
        entry = {}
        if len(ns) >= 3:
            entry["fit"] = fit_rate(ns, es)
            if len(ns) >= 4:
                entry["tail_fit"] = fit_rate(ns, es, tail=4)
        entry["rmse"] = dict(zip(map(str, ns), es))
        summary["rates"][q] = entry

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = f"convergence-{label}-{cfg.method}"
        write_csv(records, out_dir / f"{stem}.csv")
        (out_dir / f"{stem}.json").write_text(json.dumps(summary, indent=2))
    return records, summary


def write_csv(records, path):
    """Experiment CSV; vector quantities appear as one row per component
    and rate fits use the Euclidean norm over component RMSEs."""
    with open(path, "w", newline="") as fh:
        fh.write("# rmse: shift-based estimate sqrt(sum_r (Q_r - mean)^2 / (R(R-1)))"
                 " per component; absolute, not relative\n")
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for rec in records:
            writer.writerow(rec.row())


def read_csv(path):
    """Rows of an experiment CSV as dicts (comment lines skipped)."""
    with open(path) as fh:
        rows = [r for r in fh if not r.startswith("#")]
    return list(csv.DictReader(rows))


def fit_rate(ns, rmses, tail: int | None = None) -> float:
    """Sign-flipped least-squares slope of log2(rmse) against log2(n);
    zero or non-finite rmse values are excluded.  ``tail`` restricts the
    fit to the largest ``tail`` point counts."""
    ns = np.asarray(ns, dtype=np.float64)
    rmses = np.asarray(rmses, dtype=np.float64)
    keep = np.isfinite(rmses) & (rmses > 0.0)
    ns, rmses = ns[keep], rmses[keep]
    if tail is not None:
        order = np.argsort(ns)
        ns, rmses = ns[order][-tail:], rmses[order][-tail:]
    if len(ns) < 3:
        raise ValueError("rate fit requires at least three usable points")
    return float(-np.polyfit(np.log2(ns), np.log2(rmses), 1)[0])


def predict(cfg: ExperimentConfig, n_sample_weights: int = 3) -> dict:
    """Theoretical rate and sample weights for the configured model.

    The summability exponent is taken as 1/theta, the critical exponent of
    the mode amplitude decay; the Gevrey order is 1 for the identity
    transform and the configured sigma otherwise.
    """
    model = model_from_config(cfg.model)
    decay = compute_decay(model)
    sigma = 1.0 if model.xi == "identity" else model.sigma
    p = 1.0 / model.theta
    params = weights.WeightParams(sigma=sigma, p=p, r=1.0, b=decay.b)
    rate = weights.theoretical_rate(p, 1.0, sigma)
    gamma_fn = weights.gamma_uniform if model.kind == "affine" \
        else weights.gamma_gaussian
    sample = {}
    for u in [(0,), (1,), (0, 1)][:n_sample_weights]:
        sample["{" + ",".join(str(j + 1) for j in u) + "}"] = gamma_fn(u, params)
    s_rep = min(model.s, 8)
    constant = weights.error_constant(
        s_rep, lambda u: gamma_fn(u, params), params.lam,
        "bounded" if model.kind == "affine" else "gaussian", params)
    return {
        "lambda": params.lam,
        "p": p,
        "sigma": sigma,
        "predicted_rate": rate.exponent,
        "rate_regime": rate.regime,
        "epsilon_interval": rate.epsilon_interval,
        "gamma": sample,
        "constant": constant,
        "constant_dimension": s_rep,
        "p_estimate": decay.p_estimate,
    }
