"""Discretizations: conservation, equivalence, rates, derivatives, stability."""

import math

import numpy as np
import pytest

import fluxqmc as fq
from fluxqmc import (LDGHOperator, P1Operator, RTHOperator, SolverConfig,
                     build_mesh, check_a1_a2, compute_decay, make_field_model,
                     qoi_eval, solve_derivatives, solve_ldgh, solve_p1,
                     solve_rt0_saddle, solve_rth)
from fluxqmc.field import field_from_psi, psi_values
from fluxqmc.fem import qoi_eval_batch


def one(x):
    return np.ones(x.shape[:-1])


def zero(x):
    return np.zeros(x.shape[:-1])


def f_linear(x):
    return x[..., 0]


def u_exact(x):
    return np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1])


def f_manufactured(x):
    return 2 * math.pi ** 2 * u_exact(x)


def q_exact(x):
    return -math.pi * np.stack(
        [np.cos(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1]),
         np.sin(np.pi * x[..., 0]) * np.cos(np.pi * x[..., 1])], axis=-1)


def flux_l2_error(op, qv):
    d = qv - q_exact(op.X)
    return math.sqrt(float(np.einsum("fq,fqd,fqd->", op.WQ, d, d)))


# ---------------------------------------------------------------------------
# hybridized RT0
# ---------------------------------------------------------------------------

def test_rth_zero_data():
    sol = solve_rth(build_mesh(5), one, zero)
    assert np.abs(sol.q_dofs).max() == 0.0
    assert np.abs(sol.u_dofs).max() == 0.0
    assert sol.energy_norm == 0.0


def test_rth_conservation_unit_coefficient():
    mesh = build_mesh(5)
    sol = solve_rth(mesh, one, f_linear)
    op = RTHOperator(mesh)
    assert op.boundary_outflux(sol.q_dofs[None])[0] == pytest.approx(0.5, abs=1e-9)
    mask = mesh.subdomain_mask()
    assert op.subdomain_outflux(sol.q_dofs[None], mask)[0] == pytest.approx(
        0.18, abs=1e-9)


def test_rth_outflux_independent_of_coefficient_sample():
    # non-random source: the outflux cannot vary with the random sample
    mesh = build_mesh(5)
    model = make_field_model("lognormal", "identity", s=8)
    op = RTHOperator(mesh)
    rng = np.random.default_rng(4)
    ys = rng.normal(size=(10, 8))
    aq = op.coefficient_at_quad(model, ys)
    out = op.solve_batch(aq, op.source_integrals(f_linear))
    fluxes = op.boundary_outflux(out["Q"])
    assert np.allclose(fluxes, 0.5, atol=1e-9)


def test_rth_equivalence_with_direct_saddle():
    mesh = build_mesh(5)

    def afun(x):
        return 1.0 + 0.3 * np.sin(np.pi * x[..., 0]) * np.sin(2 * np.pi * x[..., 1])

    Qg, ug = solve_rt0_saddle(mesh, afun, f_linear)
    sol = solve_rth(mesh, afun, f_linear)
    assert np.abs(Qg[mesh.tri_edges] - sol.q_dofs).max() < 1e-8
    assert np.abs(ug - sol.u_dofs).max() < 1e-8


def test_rth_manufactured_flux_rate():
    errs = []
    for mm in (8, 16, 32):
        mesh = build_mesh(mm)
        op = RTHOperator(mesh)
        sol = solve_rth(mesh, one, f_manufactured, op=op)
        errs.append(flux_l2_error(op, op.flux_at_quad(sol.q_dofs[None])[0]))
    rates = [math.log2(errs[i] / errs[i + 1]) for i in range(len(errs) - 1)]
    assert all(abs(r - 1.0) <= 0.15 for r in rates), rates


def test_rth_energy_norm_is_weighted_l2():
    mesh = build_mesh(5)

    def afun(x):
        return 2.0 + x[..., 0]

    sol = solve_rth(mesh, afun, f_linear)
    op = RTHOperator(mesh)
    aq = afun(op.X)
    qv = op.flux_at_quad(sol.q_dofs[None])[0]
    direct = math.sqrt(float(np.einsum("fq,fq,fqd,fqd->", op.WQ, aq, qv, qv)))
    assert sol.energy_norm == pytest.approx(direct, rel=1e-12)


def test_rth_batch_matches_single():
    mesh = build_mesh(5)
    model = make_field_model("affine", "identity", s=6)
    op = RTHOperator(mesh)
    rng = np.random.default_rng(9)
    ys = rng.random((7, 6)) - 0.5
    aq = op.coefficient_at_quad(model, ys)
    batch = op.solve_batch(aq, op.source_integrals(f_linear))
    for i in (0, 3, 6):
        sol = solve_rth(mesh, lambda x, i=i: fq.eval_field(model, x, ys[i]),
                        f_linear)
        assert np.allclose(batch["Q"][i], sol.q_dofs, atol=1e-9)
        assert np.allclose(batch["u"][i], sol.u_dofs, atol=1e-9)


def test_rth_solver_error_carries_residual():
    from fluxqmc import SolverError
    mesh = build_mesh(10)
    cfg = SolverConfig(tol=1e-14, max_iter_factor=0)
    with pytest.raises(SolverError) as exc:
        solve_rth(mesh, one, f_linear, cfg)
    assert exc.value.residual is None or exc.value.residual >= 0


# ---------------------------------------------------------------------------
# conforming P1
# ---------------------------------------------------------------------------

def test_p1_zero_data():
    sol = solve_p1(build_mesh(5), one, zero)
    assert np.abs(sol.u_dofs).max() == 0.0


def test_p1_manufactured_gradient_rate():
    errs = []
    for mm in (8, 16, 32):
        mesh = build_mesh(mm)
        op = P1Operator(mesh)
        out = op.solve_batch(np.ones((1,) + op.X.shape[:2]), f_manufactured)
        d = -out["gu"][0][:, None, :] - q_exact(op.X)  # a = 1: grad u = -q
        errs.append(math.sqrt(float(np.einsum("fq,fqd,fqd->", op.WQ, d, d))))
    rates = [math.log2(errs[i] / errs[i + 1]) for i in range(len(errs) - 1)]
    assert all(abs(r - 1.0) <= 0.15 for r in rates), rates


def test_p1_reflection_symmetry():
    # a constant and f independent of x2: the diagonal stiffness terms
    # cancel and the discrete solution is exactly reflection-symmetric
    mesh = build_mesh(5)
    sol = solve_p1(mesh, one, f_linear)
    vals = {}
    for i, (x, y) in enumerate(mesh.vertices):
        vals[(round(x * 5), round(y * 5))] = sol.u_dofs[i]
    for ix in range(6):
        for iy in range(6):
            assert vals[(ix, iy)] == pytest.approx(vals[(ix, 5 - iy)], abs=1e-10)


def test_p1_rotation_symmetry_varying_coefficient():
    # the mesh is invariant under 180-degree rotation; so is this data
    mesh = build_mesh(10)

    def ainv(x):
        return 1.0 / (1.0 + 0.4 * np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1]))

    sol = solve_p1(mesh, ainv, one)
    vals = {}
    for i, (x, y) in enumerate(mesh.vertices):
        vals[(round(x * 10), round(y * 10))] = sol.u_dofs[i]
    for ix in range(11):
        for iy in range(11):
            assert vals[(ix, iy)] == pytest.approx(vals[(10 - ix, 10 - iy)],
                                                   abs=1e-9)


# ---------------------------------------------------------------------------
# LDG-H
# ---------------------------------------------------------------------------

def test_ldgh_zero_data():
    sol = solve_ldgh(build_mesh(5), one, zero, tau=1.0)
    assert np.abs(sol.q_dofs).max() == 0.0
    assert np.abs(sol.u_dofs).max() == 0.0
    assert np.abs(sol.m_dofs).max() == 0.0


def test_ldgh_requires_positive_tau():
    with pytest.raises(ValueError):
        LDGHOperator(build_mesh(5), tau=0.0)


def test_ldgh_condensed_matrix_spd():
    mesh = build_mesh(3)
    op = LDGHOperator(mesh, tau=0.7)
    out = op.solve(1.0 + 0.5 * op.X[..., 0], f_linear)
    # assemble the condensed matrix densely through matvecs
    n = op.n_dofs
    K = np.empty((n, n))
    for i in range(n):
        e = np.zeros((1, n))
        e[0, i] = 1.0
        xl = op.sc.gather(e)
        K[:, i] = op.sc.scatter(np.einsum("fij,bfj->bfi", out["K"], xl))[0]
    assert np.allclose(K, K.T, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(K) > 0)


def test_ldgh_conservation_on_unions():
    mesh = build_mesh(5)
    op = LDGHOperator(mesh, tau=1.0)
    out = op.solve(np.ones(op.X.shape[:2]), f_linear)
    nf = op.numerical_flux(out)
    WQ = mesh.quad_weights()
    f_int = np.einsum("fq,fq->f", WQ, f_linear(mesh.quad_points()))

    def union_flux(mask):
        f_idx = mesh.edge_tris[:, :, 0]
        inside = np.where(f_idx >= 0, mask[np.clip(f_idx, 0, None)], False)
        on_b = inside[:, 0] ^ inside[:, 1]
        tot = 0.0
        for e in np.where(on_b)[0]:
            side = 0 if inside[e, 0] else 1
            f, loc = mesh.edge_tris[e, side]
            tot += nf[f, loc]
        return tot

    rng = np.random.default_rng(11)
    masks = [mesh.subdomain_mask(), np.ones(mesh.num_triangles, dtype=bool),
             rng.random(mesh.num_triangles) < 0.5]
    for mask in masks:
        assert union_flux(mask) == pytest.approx(float(f_int[mask].sum()), abs=1e-9)


def test_ldgh_manufactured_flux_rate():
    errs = []
    for mm in (8, 16, 32):
        mesh = build_mesh(mm)
        op = LDGHOperator(mesh, tau=1.0)
        out = op.solve(np.ones(op.X.shape[:2]), f_manufactured)
        errs.append(flux_l2_error(op, op.flux_at_quad(out)[0]))
    rates = [math.log2(errs[i] / errs[i + 1]) for i in range(len(errs) - 1)]
    assert all(r >= 0.9 for r in rates), rates


def test_ldgh_energy_norm_dominates_weighted_l2():
    mesh = build_mesh(5)

    def afun(x):
        return 1.5 + x[..., 1]

    sol = solve_ldgh(mesh, afun, f_linear, tau=1.0)
    op = LDGHOperator(mesh, tau=1.0)
    aq = afun(op.X)
    qv = np.einsum("qi,fid->fqd", fq.mesh.TRI_QUAD_BARY,
                   sol.q_dofs.reshape(-1, 3, 2))
    wl2 = math.sqrt(float(np.einsum("fq,fq,fqd,fqd->", op.WQ, aq, qv, qv)))
    assert wl2 <= sol.energy_norm + 1e-12


# ---------------------------------------------------------------------------
# quantities of interest
# ---------------------------------------------------------------------------

def test_qoi_zero_solution():
    mesh = build_mesh(5)
    sol = solve_rth(mesh, one, zero)
    q = qoi_eval(sol, mesh, one)
    assert q.mean_u == 0.0 and q.quadratic_flux == 0.0
    assert np.all(q.mean_flux == 0.0) and np.all(q.mean_grad == 0.0)


def test_qoi_flux_antisymmetry():
    # a = 1, f = x1: data symmetric about x2 = 1/2, so the x2 component of
    # the mean flux over the symmetric subdomain vanishes
    mesh = build_mesh(5)
    sol = solve_rth(mesh, one, f_linear)
    q = qoi_eval(sol, mesh, one)
    assert abs(q.mean_flux[1]) < 1e-9
    assert abs(q.mean_grad[1]) < 1e-9
    assert q.quadratic_flux > 0.0


def test_qoi_mesh_refinement_consistency():
    model = make_field_model("affine", "identity", s=6)
    rng = np.random.default_rng(12)
    y = rng.random(6) - 0.5

    def afun(x):
        return fq.eval_field(model, x, y)

    qs = {}
    for mm in (5, 10, 20):
        mesh = build_mesh(mm)
        qs[mm] = qoi_eval(solve_rth(mesh, afun, f_linear), mesh, afun).as_array()
    d1 = np.abs(qs[5] - qs[10])
    d2 = np.abs(qs[10] - qs[20])
    assert np.all(d2 <= 0.75 * d1 + 1e-12)


def test_qoi_batch_matches_scalar_path():
    mesh = build_mesh(5)
    model = make_field_model("lognormal", "identity", s=5)
    op = RTHOperator(mesh)
    rng = np.random.default_rng(13)
    ys = rng.normal(size=(3, 5))
    aq = op.coefficient_at_quad(model, ys)
    out = op.solve_batch(aq, op.source_integrals(f_linear))
    rows = qoi_eval_batch(op, out["Q"], out["u"], aq, mesh.subdomain_mask())
    for i in range(3):
        sol = solve_rth(mesh, lambda x, i=i: fq.eval_field(model, x, ys[i]),
                        f_linear)
        q = qoi_eval(sol, mesh, lambda x, i=i: fq.eval_field(model, x, ys[i]))
        assert np.allclose(rows[i], q.as_array(), atol=1e-10)


# ---------------------------------------------------------------------------
# parameter derivatives
# ---------------------------------------------------------------------------

def test_derivative_order_zero_reproduces_base_solve():
    mesh = build_mesh(5)
    model = make_field_model("lognormal", "identity", s=4)
    op = RTHOperator(mesh)
    y = np.array([0.2, -0.4, 0.1, 0.6])
    res, _ = solve_derivatives(op, model, y, [()])
    sol = solve_rth(mesh, lambda x: fq.eval_field(model, x, y), f_linear)
    assert np.allclose(res[()]["Q"], sol.q_dofs, atol=1e-10)
    assert res[()]["energy"] == pytest.approx(sol.energy_norm, rel=1e-10)


def test_derivative_first_order_bound_lognormal():
    # d_j a = psi_j a exactly, so the energy norm of the derivative is
    # bounded by b_j times the energy norm of the flux
    mesh = build_mesh(5)
    model = make_field_model("lognormal", "identity", s=6)
    decay = compute_decay(model)
    op = RTHOperator(mesh)
    rng = np.random.default_rng(14)
    for _ in range(3):
        y = rng.normal(size=6)
        res, _ = solve_derivatives(op, model, y, [(j,) for j in range(6)])
        for j in range(6):
            assert res[(j,)]["energy"] <= decay.b[j] * res[()]["energy"] + 1e-12


def test_derivative_matches_finite_differences():
    mesh = build_mesh(5)
    model = make_field_model("lognormal", "identity", s=5)
    op = RTHOperator(mesh)
    rng = np.random.default_rng(15)
    y = rng.normal(size=5) * 0.7
    res, _ = solve_derivatives(op, model, y, [(0,), (2,), (0, 2)])

    def qsol(yy):
        aq = op.coefficient_at_quad(model, yy[None])[0]
        return op.solve_batch(aq[None], op.source_integrals(f_linear))["Q"][0]

    h = 1e-4
    e0, e2 = np.eye(5)[0], np.eye(5)[2]
    fd1 = (qsol(y + h * e0) - qsol(y - h * e0)) / (2 * h)
    assert np.abs(fd1 - res[(0,)]["Q"]).max() <= 1e-3 * np.abs(res[(0,)]["Q"]).max()
    fd2 = (qsol(y + h * (e0 + e2)) - qsol(y + h * (e0 - e2))
           - qsol(y - h * (e0 - e2)) + qsol(y - h * (e0 + e2))) / (4 * h * h)
    assert np.abs(fd2 - res[(0, 2)]["Q"]).max() <= 1e-3 * np.abs(res[(0, 2)]["Q"]).max()


def test_derivative_order_capacity():
    mesh = build_mesh(5)
    model = make_field_model("lognormal", "identity", s=4)
    op = RTHOperator(mesh)
    with pytest.raises(fq.CapacityError):
        solve_derivatives(op, model, np.zeros(4), [(0, 1, 2)])


def test_quadratic_qoi_derivative_bound():
    # |d_u int q.q| <= sum_{v subset u} ||d_v q||^2 for |u| <= 2
    mesh = build_mesh(5)
    model = make_field_model("lognormal", "identity", s=4)
    op = RTHOperator(mesh)
    rng = np.random.default_rng(16)
    y = rng.normal(size=4) * 0.5
    res, _ = solve_derivatives(op, model, y, [(0,), (1,), (0, 1)])

    def l2ip(Qa, Qb):
        return float(np.einsum("fij,fi,fj->", op.M1, Qa, Qb))

    Q0, Q1, Q01 = res[()]["Q"], res[(0,)]["Q"], res[(0, 1)]["Q"]
    Qb = res[(1,)]["Q"]
    dJ1 = 2 * l2ip(Q1, Q0)
    bound1 = l2ip(Q0, Q0) + l2ip(Q1, Q1)
    assert abs(dJ1) <= bound1 + 1e-12
    dJ2 = 2 * l2ip(Q01, Q0) + 2 * l2ip(Q1, Qb)
    bound2 = (l2ip(Q0, Q0) + l2ip(Q1, Q1) + l2ip(Qb, Qb) + l2ip(Q01, Q01))
    assert abs(dJ2) <= bound2 + 1e-12


# ---------------------------------------------------------------------------
# stability diagnostics
# ---------------------------------------------------------------------------

def test_check_a1_a2_report():
    model = make_field_model("affine", "identity", s=6)
    rng = np.random.default_rng(17)
    ys = rng.random((10, 6)) - 0.5
    reports = [check_a1_a2(build_mesh(mm), model, ys) for mm in (5, 10, 20)]
    cs = [r["empirical_C_S"] for r in reports]
    assert all(r["energy_ratio"] == 1.0 for r in reports)
    assert max(cs) <= 2.0 * min(cs)  # h-independence within a factor 2
    assert all(np.isfinite(r["beta_lower_witness"]) for r in reports)
