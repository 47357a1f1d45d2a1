"""Closed-form cubature weights, error constants, and convergence rates.

Implements the weight collections gamma_u for the bounded (uniform) and
unbounded (Gaussian) coefficient models, the error-bound constants built
from them, the lambda selection rule, the factorial derivative-growth
bound, and the surrogate minimization that underlies the optimal-weight
choice.  Everything here is a pure function of a :class:`WeightParams`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.special import erfc

from .errors import CapacityError, InfeasibilityError, TheoryViolationError

_MAX_SUBSET = 20   # exact subset-sum enumeration cap
_MAX_DIM_ENUM = 12  # exact enumeration over all subsets of {1..s}

# Bernoulli numbers B_2, B_4, ..., B_12 for the Euler-Maclaurin tail
_BERNOULLI = (1.0 / 6.0, -1.0 / 30.0, 1.0 / 42.0, -1.0 / 30.0,
              5.0 / 66.0, -691.0 / 2730.0)
_ZETA_N = 20


def zeta(x: float) -> float:
    """Riemann zeta for x > 1 by Euler-Maclaurin summation.

    Explicit terms through k = 20 plus six Bernoulli corrections; the
    remainder is bounded by the first omitted correction term, below
    1e-12 for all x > 1.
    """
    if x <= 1.0:
        raise ValueError(f"zeta requires x > 1, got {x}")
    N = _ZETA_N
    total = sum(k ** -x for k in range(1, N))
    total += 0.5 * N ** -x
    total += N ** (1.0 - x) / (x - 1.0)
    # correction term i: B_{2i}/(2i)! * x(x+1)...(x+2i-2) * N^{-x-2i+1}
    rising = 1.0
    fact = 1.0
    for i, b2i in enumerate(_BERNOULLI, start=1):
        rising = x if i == 1 else rising * (x + 2 * i - 3) * (x + 2 * i - 2)
        fact *= (2 * i) * (2 * i - 1)
        total += (b2i / fact) * rising * N ** (-x - 2 * i + 1)
    return total


def normal_cdf(x):
    """Standard normal CDF via erfc (stable in both tails)."""
    return 0.5 * erfc(-np.asarray(x, dtype=np.float64) / math.sqrt(2.0))


def _epsilon_upper(r: float, sigma: float) -> float | None:
    """Admissible upper bound for epsilon in the small-p regime, or None
    when the stated interval is empty (sigma*r >= 3/2) and any epsilon in
    (0, 1/2] is accepted."""
    num, den = 2.0 * sigma * r - 3.0, 2.0 * sigma * r - 4.0
    if num < 0.0 and den < 0.0:
        return num / den
    return None


def select_lambda(p: float, r: float, sigma: float, epsilon: float | None = None) -> float:
    """Duality exponent lambda in (1/2, 1] for the error bound.

    lambda = p/(2r - p) when p in (2r/3, 1/sigma); otherwise
    lambda = 1/(2 - 2*epsilon) for a caller-supplied epsilon.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"summability exponent p must lie in (0,1), got {p}")
    if sigma < 1.0 or r <= 0.0:
        raise ValueError("sigma >= 1 and r > 0 required")
    if sigma * p >= 1.0:
        raise TheoryViolationError(f"sigma*p = {sigma * p} >= 1: no rate guarantee")

    if p > 2.0 * r / 3.0:
        lam = p / (2.0 * r - p)
        if not 0.5 < lam <= 1.0:
            raise TheoryViolationError(
                f"lambda = p/(2r-p) = {lam} falls outside (1/2, 1]")
        return lam

    if epsilon is None:
        raise ValueError("p <= 2r/3: an epsilon in the admissible interval is required")
    upper = _epsilon_upper(r, sigma)
    hi = upper if upper is not None else 0.5
    if not 0.0 < epsilon <= hi:
        raise ValueError(f"epsilon must lie in (0, {hi}], got {epsilon}")
    return 1.0 / (2.0 - 2.0 * epsilon)


@dataclass
class WeightParams:
    """Parameters feeding every weight and constant formula.

    ``b`` is the coefficient decay sequence; sigma the Gevrey order; p the
    summability exponent; r the growth exponent of the goal functional.
    The remaining constants come from the structural assumptions on the
    discretization and the coefficient.  ``lam`` is selected automatically
    when not given.
    """

    sigma: float
    p: float
    r: float
    b: np.ndarray
    C_R: float = 1.0
    C_G: float = 1.0
    C_S: float = 1.0
    C_E: float = 1.0
    C_J: float = 1.0
    C_Q: float = 1.0
    lam: float | None = None
    epsilon: float | None = None

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=np.float64)
        if np.any(self.b <= 0.0):
            raise ValueError("decay sequence entries must be positive")
        for name in ("C_R", "C_G", "C_S", "C_E", "C_J", "C_Q"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.lam is None:
            self.lam = select_lambda(self.p, self.r, self.sigma, self.epsilon)
        if not 0.5 < self.lam <= 1.0:
            raise ValueError(f"lambda must lie in (1/2, 1], got {self.lam}")

    @property
    def deriv_factor(self) -> float:
        """(C_R C_G + 1), the per-order growth factor of flux derivatives."""
        return self.C_R * self.C_G + 1.0


def _subset_sum(b_u: np.ndarray, r: float, sigma: float, c: float) -> float:
    """sum over subsets v of u of (|v|!)^{2 r sigma} c^{2r|v|} prod_{j in v} b_j^{2r},

    evaluated through elementary symmetric polynomials of the b_j^{2r}."""
    x = b_u ** (2.0 * r)
    # e[l] = elementary symmetric polynomial of degree l
    e = np.zeros(len(x) + 1)
    e[0] = 1.0
    for xj in x:
        e[1:] = e[1:] + xj * e[:-1]
    total = 0.0
    for ell in range(len(x) + 1):
        total += math.factorial(ell) ** (2.0 * r * sigma) * c ** (2.0 * r * ell) * e[ell]
    return total


def gamma_uniform(u, params: WeightParams) -> float:
    """Cubature weight of the subset u for the bounded (uniform) model.

    gamma_u = ((2 pi^2)^lam / zeta(2 lam))^{|u|/(1+lam)}
              * ( sum_{v subset u} (|v|!)^{2 r sigma}
                  prod_{j in v} (C_R C_G + 1)^{2r} b_j^{2r} )^{1/(1+lam)}
    """
    u = _check_subset(u, params)
    if len(u) == 0:
        return 1.0
    lam = params.lam
    pref = ((2.0 * math.pi ** 2) ** lam / zeta(2.0 * lam)) ** (len(u) / (1.0 + lam))
    inner = _subset_sum(params.b[list(u)], params.r, params.sigma, params.deriv_factor)
    return pref * inner ** (1.0 / (1.0 + lam))


def alpha_weight(b_j: float, lam: float) -> float:
    """Exponential decay rate of the Gaussian-space weight function,
    alpha_j = (b_j + sqrt(b_j^2 + 1 - 1/(2 lam))) / 2.

    Stationary point of the per-coordinate constant factor; alpha_j > b_j
    is required for the weight integral to converge.
    """
    if not 0.5 < lam <= 1.0:
        raise ValueError(f"lambda must lie in (1/2, 1], got {lam}")
    a = 0.5 * (b_j + math.sqrt(b_j * b_j + 1.0 - 0.5 / lam))
    if a <= b_j:
        raise InfeasibilityError(f"alpha = {a} <= b_j = {b_j}: weight integral diverges")
    return a


def rho_factor(lam: float, alpha_j: float) -> float:
    """Per-coordinate factor of the Gaussian error constant,

    rho_j(lam) = 2 (sqrt(2 pi) exp(alpha_j^2/eta) / (pi^{2-2 eta}(1-eta) eta))^lam
                 * zeta(lam + 1/2),  with eta = (2 lam - 1)/(4 lam).
    """
    eta = (2.0 * lam - 1.0) / (4.0 * lam)
    core = math.sqrt(2.0 * math.pi) * math.exp(alpha_j ** 2 / eta) / (
        math.pi ** (2.0 - 2.0 * eta) * (1.0 - eta) * eta)
    return 2.0 * core ** lam * zeta(lam + 0.5)


def gamma_gaussian(u, params: WeightParams) -> float:
    """Cubature weight of the subset u for the unbounded (Gaussian) model.

    gamma_u = ( 2^{|u|} sum_{v subset u} (C_R C_G+1)^{2r|v|}(|v|!)^{2 r sigma}
                prod_{j in v} b_j^{2r}
               / prod_{j in u} rho_j(lam) 2 e^{2 b_j^2} Phi(2 b_j)(alpha_j - b_j)
              )^{1/(1+lam)}
    """
    u = _check_subset(u, params)
    if len(u) == 0:
        return 1.0
    lam = params.lam
    num = 2.0 ** len(u) * _subset_sum(params.b[list(u)], params.r, params.sigma,
                                      params.deriv_factor)
    den = 1.0
    for j in u:
        bj = params.b[j]
        aj = alpha_weight(bj, lam)
        den *= rho_factor(lam, aj) * 2.0 * math.exp(2.0 * bj * bj) \
            * float(normal_cdf(2.0 * bj)) * (aj - bj)
    return (num / den) ** (1.0 / (1.0 + lam))


def _check_subset(u, params: WeightParams) -> tuple:
    u = tuple(sorted(int(j) for j in u))
    if len(set(u)) != len(u):
        raise ValueError("subset contains repeated indices")
    if len(u) > _MAX_SUBSET:
        raise CapacityError(f"|u| = {len(u)} exceeds exact-enumeration cap {_MAX_SUBSET}")
    if u and (u[0] < 0 or u[-1] >= len(params.b)):
        raise ValueError("subset indices outside the decay sequence")
    return u


def error_constant(s: int, gamma_fn, lam: float, model: str,
                   params: WeightParams | None = None) -> float:
    """Constant in front of the root-mean-square cubature error bound.

    bounded:  (2 sum_{u nonempty} gamma_u^lam (2 zeta(2 lam)/(2 pi^2)^lam)^{|u|})^{1/(2 lam)}
    gaussian: (2 sum_{u nonempty} gamma_u^lam prod_{j in u} rho_j(lam))^{1/(2 lam)}

    ``gamma_fn`` maps a subset (tuple of 0-based indices) to its weight.
    Exact enumeration over all nonempty subsets, so s <= 12.
    """
    if s > _MAX_DIM_ENUM:
        raise CapacityError(f"s = {s} exceeds exact-enumeration cap {_MAX_DIM_ENUM}")
    if model not in ("bounded", "gaussian"):
        raise ValueError(f"unknown model {model!r}")
    if model == "bounded":
        base = 2.0 * zeta(2.0 * lam) / (2.0 * math.pi ** 2) ** lam
    total = 0.0
    for size in range(1, s + 1):
        for u in combinations(range(s), size):
            term = gamma_fn(u) ** lam
            if model == "bounded":
                term *= base ** size
            else:
                for j in u:
                    term *= rho_factor(lam, alpha_weight(params.b[j], lam))
            total += term
    return (2.0 * total) ** (1.0 / (2.0 * lam))


def derivative_growth_bound(K0: float, K1: float, sigma: float, b, nu) -> float:
    """Closed bound K0 (K1+1)^{|nu|} (|nu|!)^sigma b^nu for a sequence
    satisfying the factorial recursion (first-order multi-indices)."""
    nu = np.asarray(nu, dtype=np.int64)
    if np.any((nu != 0) & (nu != 1)):
        raise ValueError("multi-index entries must be 0 or 1")
    b = np.asarray(b, dtype=np.float64)
    order = int(nu.sum())
    prod = float(np.prod(b[: len(nu)] ** nu))
    return K0 * (K1 + 1.0) ** order * math.factorial(order) ** sigma * prod


@dataclass
class RatePrediction:
    """Theoretical RMSE decay exponent; in the small-p regime the rate is
    1 - epsilon for every epsilon in ``epsilon_interval``."""

    exponent: float
    regime: str
    epsilon_interval: tuple[float, float] | None = None


def theoretical_rate(p: float, r: float, sigma: float) -> RatePrediction:
    """Guaranteed RMSE decay exponent: r/p - 1/2 when p in (2r/3, 1/sigma),
    otherwise the supremum-style pair (1, epsilon interval)."""
    if sigma * p >= 1.0:
        raise TheoryViolationError(f"sigma*p = {sigma * p} >= 1: no rate guarantee")
    if not 0.0 < p < 1.0:
        raise ValueError(f"summability exponent p must lie in (0,1), got {p}")
    if p > 2.0 * r / 3.0:
        return RatePrediction(exponent=r / p - 0.5, regime="large-p")
    upper = _epsilon_upper(r, sigma)
    return RatePrediction(exponent=1.0, regime="small-p",
                          epsilon_interval=(0.0, upper if upper is not None else 0.5))


def surrogate_objective(gamma, rho, beta, lam: float) -> float:
    """g(gamma) = (sum gamma_i^lam rho_i)^{1/lam} * (sum beta_i / gamma_i)."""
    gamma = np.asarray(gamma, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    return float((gamma ** lam @ rho) ** (1.0 / lam) * (beta / gamma).sum())


def optimal_surrogate_weights(rho, beta, lam: float):
    """Minimizer gamma_i = (beta_i/rho_i)^{1/(1+lam)} of the surrogate
    objective (unique up to a common positive factor) and the minimum value

        ( sum rho_i^{1/(1+lam)} beta_i^{lam/(1+lam)} )^{(1+lam)/lam}.
    """
    rho = np.asarray(rho, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    gamma = (beta / rho) ** (1.0 / (1.0 + lam))
    t = (rho ** (1.0 / (1.0 + lam)) * beta ** (lam / (1.0 + lam))).sum()
    return gamma, float(t ** ((1.0 + lam) / lam))


def mode_weight_majorant(params: WeightParams, s: int, model: str = "bounded") -> np.ndarray:
    """Per-coordinate product weights majorizing the general subset weights,
    used to feed the component-by-component search.

    Coordinate j receives (2 sqrt(2) Xi_j)^{2 r lam/(1+lam)} where Xi_j is
    the per-coordinate factor appearing in the summability argument of the
    error analysis (both models).
    """
    lam = params.lam
    c = params.deriv_factor
    b = params.b[:s]
    if model == "bounded":
        scale = max(1.0, 2.0 ** (0.5 / params.r) *
                    (2.0 * zeta(2.0 * lam) / (2.0 * math.pi ** 2) ** lam)
                    ** (0.5 / (params.r * lam)))
        xi = scale * c * b
    elif model == "gaussian":
        xi = np.empty(s)
        for j in range(s):
            aj = alpha_weight(b[j], lam)
            t = rho_factor(lam, aj) * 2.0 / (
                2.0 * math.exp(2.0 * b[j] ** 2) * float(normal_cdf(2.0 * b[j]))
                * (aj - b[j]))
            xi[j] = max(1.0, math.sqrt(t)) ** (1.0 / params.r) * c * b[j]
    else:
        raise ValueError(f"unknown model {model!r}")
    return (2.0 * math.sqrt(2.0) * xi) ** (2.0 * params.r * lam / (1.0 + lam))
