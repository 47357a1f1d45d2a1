"""Random diffusion coefficients on the unit square.

Two parametrizations of a(x, y): an affine expansion around a constant
offset and a lognormal exponential, both over sine modes ordered by
non-increasing amplitude (k^2 + l^2)^{-theta}.  The per-coordinate
transform xi is the identity or one of two compactly-parametrized smooth
non-analytic maps, giving Gevrey-regular coefficient families.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ModelInvalidError

KINDS = ("affine", "lognormal")
XI_KINDS = ("identity", "gevrey-affine", "gevrey-sign")


def build_mode_ordering(s: int, theta: float):
    """First s sine modes (k_j, l_j) of Z+ x Z+ ordered by k^2 + l^2
    ascending, ties broken by k ascending; amplitudes (k^2+l^2)^{-theta}.
    """
    if s < 1:
        raise ValueError("s must be positive")
    if theta <= 1.0:
        raise ValueError("theta > 1 required for a summable decay sequence")
    K = math.isqrt(4 * s) + 2
    modes = sorted((k * k + l * l, k, l) for k in range(1, K + 1) for l in range(1, K + 1))
    modes = modes[:s]
    k = np.array([m[1] for m in modes], dtype=np.int64)
    l = np.array([m[2] for m in modes], dtype=np.int64)
    amp = (k.astype(np.float64) ** 2 + l.astype(np.float64) ** 2) ** (-theta)
    return k, l, amp


def xi_eval(xi: str, t, order: int = 0, omega: float = 4.0):
    """Value of the coordinate transform xi (order 0) or its first or
    second derivative at t.

    identity       xi(t) = t
    gevrey-affine  xi(t) = exp(-(t + 1/2)^{-omega}) on (-1/2, 1/2],
                   extended by 0 (with all derivatives 0) at t = -1/2
    gevrey-sign    xi(t) = sign(t) exp(-|t|^{-omega}) with sign(0) = 0,
                   all orders 0 at t = 0
    """
    if order not in (0, 1, 2):
        raise CapacityError("only derivatives up to order 2 are implemented")
    t = np.asarray(t, dtype=np.float64)
    if xi == "identity":
        if order == 0:
            return t + 0.0
        return np.ones_like(t) if order == 1 else np.zeros_like(t)

    if xi == "gevrey-affine":
        u = t + 0.5
        if np.any(u < 0.0):
            raise ValueError("gevrey-affine transform requires t >= -1/2")
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            ui = np.where(u > 0.0, 1.0 / np.where(u > 0.0, u, 1.0), np.inf)
            val = np.where(u > 0.0, np.exp(-ui ** omega), 0.0)
            if order == 0:
                return val
            g1 = omega * ui ** (omega + 1.0)           # (log xi)'
            if order == 1:
                return np.where(u > 0.0, val * g1, 0.0)
            g2 = -omega * (omega + 1.0) * ui ** (omega + 2.0)
            return np.where(u > 0.0, val * (g1 * g1 + g2), 0.0)

    if xi == "gevrey-sign":
        at = np.abs(t)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            ai = np.where(at > 0.0, 1.0 / np.where(at > 0.0, at, 1.0), np.inf)
            core = np.where(at > 0.0, np.exp(-ai ** omega), 0.0)
            if order == 0:
                return np.sign(t) * core
            d1 = omega * ai ** (omega + 1.0) * core    # even in t
            if order == 1:
                return np.where(at > 0.0, d1, 0.0)
            d2 = core * (omega ** 2 * ai ** (2.0 * omega + 2.0)
                         - omega * (omega + 1.0) * ai ** (omega + 2.0))
            return np.where(at > 0.0, np.sign(t) * d2, 0.0)

    raise ValueError(f"unknown transform {xi!r}")


def xi_sup_abs(xi: str, kind: str, omega: float = 4.0) -> float:
    """sup |xi| over the coordinate domain ([-1/2,1/2] for affine, R for
    lognormal)."""
    if xi == "identity":
        return 0.5 if kind == "affine" else math.inf
    if xi == "gevrey-affine":
        return float(xi_eval(xi, 0.5, 0, omega))
    if xi == "gevrey-sign":
        return float(xi_eval(xi, 0.5, 0, omega)) if kind == "affine" else 1.0
    raise ValueError(f"unknown transform {xi!r}")


@dataclass(frozen=True)
class FieldModel:
    """Immutable description of one random-coefficient family."""

    kind: str
    xi: str
    s: int
    theta: float
    offset: float
    sigma: float
    k: np.ndarray
    l: np.ndarray
    amp: np.ndarray

    @property
    def omega(self) -> float:
        if self.xi == "identity":
            return math.inf
        return 1.0 / (self.sigma - 1.0)

    def xi_apply(self, y, order: int = 0):
        return xi_eval(self.xi, y, order, self.omega)


def make_field_model(kind: str, xi: str = "identity", s: int = 100,
                     theta: float = 1.3, offset: float | None = None,
                     sigma: float = 1.25) -> FieldModel:
    """Construct a validated :class:`FieldModel`.

    ``offset`` defaults to 5 for the affine kind and is unused by the
    lognormal kind.  For the affine kind the offset must dominate the
    worst-case fluctuation so the field stays positive.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown field kind {kind!r}")
    if xi not in XI_KINDS:
        raise ValueError(f"unknown transform {xi!r}")
    if xi != "identity" and sigma <= 1.0:
        raise ValueError("gevrey transforms require sigma > 1")
    if offset is None:
        offset = 5.0 if kind == "affine" else 0.0
    k, l, amp = build_mode_ordering(s, theta)
    model = FieldModel(kind=kind, xi=xi, s=s, theta=theta, offset=float(offset),
                       sigma=float(sigma), k=k, l=l, amp=amp)
    if kind == "affine":
        fluct = xi_sup_abs(xi, kind, model.omega) * amp.sum()
        if offset <= fluct:
            raise ModelInvalidError(
                f"offset {offset} does not dominate worst-case fluctuation {fluct}")
    return model


def model_from_config(cfg: dict) -> FieldModel:
    """Build a model from the shared JSON configuration fragment
    (keys: kind, xi, sigma, s, theta, offset; extra keys ignored)."""
    return make_field_model(
        kind=cfg["kind"], xi=cfg.get("xi", "identity"), s=int(cfg.get("s", 100)),
        theta=float(cfg.get("theta", 1.3)), offset=cfg.get("offset"),
        sigma=float(cfg.get("sigma", 1.25)))


def psi_values(model: FieldModel, pts: np.ndarray) -> np.ndarray:
    """Mode functions psi_j(x) = amp_j sin(k_j pi x1) sin(l_j pi x2) at the
    given points; pts has shape (N, 2), result (s, N)."""
    pts = np.asarray(pts, dtype=np.float64)
    sx = np.sin(np.pi * model.k[:, None] * pts[None, :, 0])
    sy = np.sin(np.pi * model.l[:, None] * pts[None, :, 1])
    return model.amp[:, None] * sx * sy


def field_from_psi(model: FieldModel, psi: np.ndarray, y: np.ndarray) -> np.ndarray:
    """a at the points underlying ``psi`` for parameters y of shape (s,)
    or (B, s); returns (N,) or (B, N)."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != model.s:
        raise ValueError(f"parameter vector has length {y.shape[-1]}, model needs {model.s}")
    g = model.xi_apply(y) @ psi
    return model.offset + g if model.kind == "affine" else np.exp(g)


def eval_field(model: FieldModel, x, y) -> np.ndarray:
    """Coefficient a(x, y) for x with shape (..., 2); always positive."""
    x = np.asarray(x, dtype=np.float64)
    pts = x.reshape(-1, 2)
    a = field_from_psi(model, psi_values(model, pts), np.asarray(y, dtype=np.float64))
    a = a.reshape(x.shape[:-1])
    if np.any(a <= 0.0):
        raise ModelInvalidError("field evaluation produced a nonpositive value")
    return a


def partial_from_psi(model: FieldModel, psi: np.ndarray, a_vals: np.ndarray,
                     y: np.ndarray, nu_support) -> np.ndarray:
    """partial derivative of a with respect to the coordinates in
    ``nu_support`` (distinct indices, order |nu| = len), at the points
    underlying ``psi``.

    affine:    xi'(y_j) psi_j for |nu| = 1, zero for mixed orders
    lognormal: prod_j xi'(y_j) psi_j times a
    """
    support = tuple(nu_support)
    if len(support) != len(set(support)):
        raise ValueError("multi-index entries must be 0 or 1 (distinct coordinates)")
    if len(support) == 0:
        return a_vals
    if model.kind == "affine":
        if len(support) == 1:
            j = support[0]
            return float(model.xi_apply(y[j], 1)) * psi[j]
        return np.zeros_like(a_vals)
    out = a_vals.copy()
    for j in support:
        out = out * (float(model.xi_apply(y[j], 1)) * psi[j])
    return out


@dataclass
class DecaySequence:
    """Per-coordinate decay bounds b_j and a fitted summability exponent."""

    b: np.ndarray
    p_estimate: float
    a_min_bound: float | None = None


def compute_decay(model: FieldModel) -> DecaySequence:
    """Decay sequence of the coefficient family.

    The sup of |psi_j| equals amp_j (attained at x = (1/(2 k_j), 1/(2 l_j))).
    For the affine kind b_j = amp_j / a_min with the worst-case lower bound
    a_min = offset - sup|xi| * sum(amp); for the lognormal kind b_j = amp_j.
    The summability exponent is estimated from a log-log fit of b_j vs j.
    """
    if model.kind == "affine":
        a_min = model.offset - xi_sup_abs(model.xi, model.kind, model.omega) * model.amp.sum()
        if a_min <= 0.0:
            raise ModelInvalidError("worst-case lower bound of the field is nonpositive")
        b = model.amp / a_min
    else:
        a_min = None
        b = model.amp.copy()
    j = np.arange(1, model.s + 1, dtype=np.float64)
    # fit the tail half only: the leading modes curve the log-log plot and
    # bias the slope toward zero
    lo = max(model.s // 2 - 1, 0) if model.s >= 6 else 0
    slope = (np.polyfit(np.log(j[lo:]), np.log(b[lo:]), 1)[0]
             if model.s >= 3 else -model.theta)
    return DecaySequence(b=b, p_estimate=-1.0 / slope, a_min_bound=a_min)


def _sup_grid(model: FieldModel, n: int = 64) -> np.ndarray:
    """Tensor grid plus the per-mode extremum points for sup-norm checks."""
    g = (np.arange(n) + 0.5) / n
    gx, gy = np.meshgrid(g, g, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    extrema = np.column_stack([0.5 / model.k, 0.5 / model.l])
    return np.vstack([pts, extrema])


def check_assumptions(model: FieldModel, ys, r: float = 1.0, pair_limit: int = 6) -> dict:
    """Numerically probe the Gevrey bound (derivative ratios against
    factorial growth) and the max/min ratio bound of the coefficient.

    Returns a report dict with the observed constants; violations are
    reported, not raised.  First-order multi-indices only, |nu| <= 2; the
    spatial sup runs over a 64x64 grid plus the mode extremum points.
    """
    ys = np.atleast_2d(np.asarray(ys, dtype=np.float64))
    pts = _sup_grid(model)
    psi = psi_values(model, pts)
    decay = compute_decay(model)
    b = decay.b

    idx = list(range(min(model.s, pair_limit)))
    worst_gevrey = 0.0
    worst_case = None
    implied_C_Q = 0.0
    for y in ys:
        a_vals = field_from_psi(model, psi, y)
        nus = [(j,) for j in idx] + [(i, j) for i in idx for j in idx if i < j]
        for nu in nus:
            da = partial_from_psi(model, psi, a_vals, y, nu)
            ratio = np.max(np.abs(da / a_vals))
            bound = math.factorial(len(nu)) ** model.sigma * float(np.prod(b[list(nu)]))
            rel = ratio / bound
            if rel > worst_gevrey:
                worst_gevrey = rel
                worst_case = {"nu": nu, "ratio": float(ratio), "bound": float(bound)}
        if model.kind == "lognormal":
            q = (np.max(a_vals) * np.max(1.0 / a_vals)) ** r
            envelope = float(np.exp(2.0 * (b * np.abs(y)).sum()))
            implied_C_Q = max(implied_C_Q, q / envelope)

    return {
        "implied_C_G": float(worst_gevrey),
        "worst_gevrey_case": worst_case,
        "implied_C_Q": float(implied_C_Q) if model.kind == "lognormal" else None,
        "sigma": model.sigma,
        "samples": len(ys),
    }
