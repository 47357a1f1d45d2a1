"""Randomly shifted rank-1 lattice rules.

Point sets are generated in exact integer arithmetic, mapped to the
uniform cube (-1/2,1/2)^s or to Gaussian coordinates, and averaged over
R independent random shifts.  Generating vectors come from a text file,
from the builtin asset, or from a component-by-component search.
"""

from __future__ import annotations

import importlib.resources
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc

from .errors import SolverError  # noqa: F401  (re-exported for callers)

# Smallest nudge applied to a coordinate that lands exactly on 0, so the
# uniform map stays in (-1/2,1/2) and the Gaussian map stays finite.  The
# unshifted point k=n hits 0 in every coordinate.
_T_NUDGE = 2.0 ** -64


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class GeneratingVector:
    """Rank-1 lattice rule defined by a modulus ``n`` and integer vector ``z``.

    Components are stored reduced mod ``n``.  For power-of-two ``n`` every
    component must be odd, which guarantees gcd(z_j, n) = 1.
    """

    n: int
    z: np.ndarray
    source: str = "builtin"

    def __post_init__(self):
        if not _is_power_of_two(self.n) or self.n < 2:
            raise ValueError(f"modulus must be a power of two >= 2, got {self.n}")
        z = np.asarray(self.z, dtype=np.int64) % self.n
        if np.any(z < 1):
            raise ValueError("all components must satisfy 1 <= z_j < n after reduction")
        if np.any(z % 2 == 0):
            raise ValueError("components must be odd for power-of-two moduli")
        object.__setattr__(self, "z", z)

    @property
    def s(self) -> int:
        return len(self.z)


@dataclass(frozen=True)
class ShiftSet:
    """R uniform random shift vectors in [0,1)^s, reproducible from ``seed``."""

    R: int
    shifts: np.ndarray
    seed: int

    def __post_init__(self):
        shifts = np.asarray(self.shifts, dtype=np.float64)
        if shifts.shape[0] != self.R:
            raise ValueError("shift array does not match R")
        if np.any(shifts < 0.0) or np.any(shifts >= 1.0):
            raise ValueError("shift components must lie in [0,1)")
        object.__setattr__(self, "shifts", shifts)


@dataclass
class CubatureResult:
    """Per-shift estimates, their mean and the shift-based RMSE estimate.

    ``per_shift`` has shape (R,) for scalar integrands or (R, d) for
    vector-valued ones; ``mean`` and ``rmse_estimate`` follow suit.
    ``rmse_estimate`` is None when R < 2.
    """

    per_shift: np.ndarray
    mean: np.ndarray
    rmse_estimate: np.ndarray | None
    n: int
    R: int


def lattice_point(gv: GeneratingVector, k: int) -> np.ndarray:
    """Return t_k = frac(k z / n) computed as ((k z_j) mod n) / n.

    Exact integer arithmetic: every coordinate is a rational with
    denominator n, so multiples of n map to exactly 0.
    """
    if not 1 <= k <= gv.n:
        raise ValueError(f"point index must lie in 1..{gv.n}, got {k}")
    return ((k * gv.z) % gv.n) / gv.n


def lattice_points(gv: GeneratingVector) -> np.ndarray:
    """All n lattice points as an (n, s) array, k running 1..n."""
    k = np.arange(1, gv.n + 1, dtype=np.int64)
    return ((k[:, None] * gv.z[None, :]) % gv.n) / gv.n


def shifted_point(t: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Component-wise fractional part of t + delta."""
    v = np.asarray(t, dtype=np.float64) + np.asarray(delta, dtype=np.float64)
    return v - np.floor(v)


def map_uniform(t):
    """Map cube coordinates t in [0,1) to (-1/2, 1/2) via y = t - 1/2.

    Coordinates equal to 0 are nudged to 2^-64 first so the image stays
    inside the open box.
    """
    t = np.asarray(t, dtype=np.float64)
    t = np.where(t == 0.0, _T_NUDGE, t)
    return t - 0.5


# Rational approximation of the standard normal quantile (lower tail and
# central region), refined below by one Halley step against the erfc-based
# CDF.  Initial absolute error ~1e-9, refined to near machine precision.
_QA = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
       1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_QB = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
       6.680131188771972e+01, -1.328068155288572e+01)
_QC = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
       -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_QD = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
       3.754408661907416e+00)
_P_LOW = 0.02425


def _normal_cdf(y):
    # erfc formulation avoids cancellation in the lower tail
    return 0.5 * erfc(-y / math.sqrt(2.0))


def _quantile_initial(p):
    a, b, c, d = _QA, _QB, _QC, _QD
    p = np.asarray(p, dtype=np.float64)
    x = np.empty_like(p)

    low = p < _P_LOW
    high = p > 1.0 - _P_LOW
    mid = ~(low | high)

    if np.any(mid):
        q = p[mid] - 0.5
        r = q * q
        num = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q
        den = ((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0
        x[mid] = num / den
    if np.any(low):
        q = np.sqrt(-2.0 * np.log(p[low]))
        num = ((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]
        den = (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        x[low] = num / den
    if np.any(high):
        q = np.sqrt(-2.0 * np.log(1.0 - p[high]))
        num = ((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]
        den = (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        x[high] = -(num / den)
    return x


def map_gaussian(t):
    """Standard normal quantile of t in (0,1).

    Rational initial guess refined by one Halley step on the erfc-based
    CDF; absolute error below 1e-9 on [1e-12, 1-1e-12].  The upper half is
    reflected through the lower half (1-t is exact there), so the erfc
    evaluation never cancels.  Coordinates equal to 0 are nudged to 2^-64.
    """
    scalar = np.isscalar(t) or (isinstance(t, np.ndarray) and t.ndim == 0)
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t < 0.0) or np.any(t >= 1.0):
        raise ValueError("gaussian map requires coordinates in [0,1)")
    t = np.where(t == 0.0, _T_NUDGE, t)

    upper = t > 0.5
    tl = np.where(upper, 1.0 - t, t)
    y = _quantile_initial(tl)
    e = _normal_cdf(y) - tl
    u = e * math.sqrt(2.0 * math.pi) * np.exp(0.5 * y * y)
    y = y - u / (1.0 + 0.5 * y * u)
    y = np.where(upper, -y, y)
    return float(y[0]) if scalar else y


def generate_shifts(R: int, s: int, seed: int) -> ShiftSet:
    """Draw R uniform shift vectors in [0,1)^s from a Philox counter-based
    generator keyed by ``seed``.

    Shift r uses the stream ``Philox(key=seed).jumped(r)``, so the set is
    bit-reproducible and individual shifts are independent streams.
    """
    if R < 1 or s < 1:
        raise ValueError("R and s must be positive")
    base = np.random.Philox(key=np.uint64(seed))
    shifts = np.empty((R, s))
    for r in range(R):
        shifts[r] = np.random.Generator(base.jumped(r)).random(s)
    return ShiftSet(R=R, shifts=shifts, seed=seed)


def load_generating_vector(path, s: int, n: int) -> GeneratingVector:
    """Parse a generating-vector text file.

    Format: one ``index component`` pair per line (1-based index, ASCII
    decimal); lines starting with ``#`` are comments.  The first ``s``
    components are taken and reduced mod ``n``.
    """
    comps = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 2:
                raise ValueError(f"malformed generating-vector line: {line!r}")
            comps.append(int(parts[1]))
            if len(comps) == s:
                break
    if len(comps) < s:
        raise ValueError(
            f"generating-vector file has {len(comps)} components, need {s}"
        )
    return GeneratingVector(n=n, z=np.asarray(comps, dtype=np.int64), source="loaded-file")


_BUILTIN_ASSET = "lattice-cbc-16384-100.txt"
_BUILTIN_N = 16384
_BUILTIN_S = 100


def builtin_generating_vector(s: int, n: int) -> GeneratingVector:
    """Builtin generating vector (one CBC run at n=2^14, s=100, checked in).

    Valid for any power-of-two n <= 2^14 and s <= 100; components are
    reduced mod n.
    """
    if s > _BUILTIN_S:
        raise ValueError(f"builtin vector has {_BUILTIN_S} components, need {s}")
    if n > _BUILTIN_N:
        raise ValueError(f"builtin vector was constructed for n <= {_BUILTIN_N}")
    ref = importlib.resources.files("fluxqmc") / "assets" / _BUILTIN_ASSET
    with importlib.resources.as_file(ref) as p:
        gv = load_generating_vector(p, s, n)
    return GeneratingVector(n=n, z=gv.z, source="builtin")


def _b2(x):
    # Bernoulli polynomial of degree 2; shift-averaged kernel of the
    # unanchored space.  Global 2*pi^2 scalings are absorbed into gamma.
    return x * x - x + 1.0 / 6.0


def cbc_construct(n: int, s: int, gamma: np.ndarray, chunk: int = 256) -> GeneratingVector:
    """Component-by-component minimization of the shift-averaged squared
    worst-case error

        e^2(z) = (1/n) sum_k prod_j (1 + gamma_j * B2({k z_j / n})) - 1

    for product weights ``gamma``.  Candidates are the odd integers in
    [1, n-1]; ties resolve to the smallest candidate.  Naive O(s n^2)
    search, vectorized over candidate chunks.
    """
    if not _is_power_of_two(n) or n < 2:
        raise ValueError(f"modulus must be a power of two >= 2, got {n}")
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape != (s,) or np.any(gamma <= 0):
        raise ValueError("gamma must be a length-s vector of positive weights")

    kernel = _b2(np.arange(n, dtype=np.float64) / n)  # B2 at j/n, j=0..n-1
    k = np.arange(1, n + 1, dtype=np.int64)
    prod = np.ones(n)  # running product over chosen components, per k
    z = np.empty(s, dtype=np.int64)
    candidates = np.arange(1, n, 2, dtype=np.int64)

    for j in range(s):
        if j == 0:
            # every admissible z_1 generates the same one-dimensional point
            # set {k/n}; fix the convention z_1 = 1
            z[0] = 1
        else:
            best_err = np.inf
            best_z = None
            for lo in range(0, len(candidates), chunk):
                cand = candidates[lo:lo + chunk]
                idx = (k[None, :] * cand[:, None]) % n
                vals = prod[None, :] * (1.0 + gamma[j] * kernel[idx])
                errs = vals.mean(axis=1) - 1.0
                i = int(np.argmin(errs))
                if errs[i] < best_err:
                    best_err = errs[i]
                    best_z = int(cand[i])
            z[j] = best_z
        prod = prod * (1.0 + gamma[j] * kernel[(k * z[j]) % n])

    return GeneratingVector(n=n, z=z, source="cbc")


def squared_worst_case_error(n: int, z: np.ndarray, gamma: np.ndarray) -> float:
    """e^2 of a full generating vector under product weights (see
    :func:`cbc_construct`)."""
    z = np.asarray(z, dtype=np.int64)
    gamma = np.asarray(gamma, dtype=np.float64)
    kernel = _b2(np.arange(n, dtype=np.float64) / n)
    k = np.arange(1, n + 1, dtype=np.int64)
    prod = np.ones(n)
    for j in range(len(z)):
        prod *= 1.0 + gamma[j] * kernel[(k * z[j]) % n]
    return float(prod.mean() - 1.0)


def estimate_integral(F, gv: GeneratingVector, shifts: ShiftSet,
                      map_kind: str = "uniform", vectorized: bool = False) -> CubatureResult:
    """Randomly shifted lattice estimate of the integral of F.

    For each shift r, Q_r = (1/n) sum_k F(map(frac(t_k + Delta_r))).  The
    returned mean is the arithmetic mean of the Q_r and the RMSE estimate
    is sqrt( sum_r (Q_r - mean)^2 / (R(R-1)) ), absent when R < 2.

    F receives mapped coordinates: a length-s vector per call, or an
    (n, s) array when ``vectorized``; it may return a scalar or a fixed-
    length vector of components.  Reductions use numpy's pairwise
    summation in a fixed order, so results are run-to-run identical.
    """
    if map_kind not in ("uniform", "gaussian"):
        raise ValueError(f"unknown coordinate map {map_kind!r}")
    mapper = map_uniform if map_kind == "uniform" else map_gaussian

    base = lattice_points(gv)
    per_shift = []
    for r in range(shifts.R):
        pts = shifted_point(base, shifts.shifts[r])
        y = mapper(pts)
        if vectorized:
            vals = np.asarray(F(y), dtype=np.float64)
        else:
            vals = np.asarray([F(y[i]) for i in range(gv.n)], dtype=np.float64)
        per_shift.append(vals.mean(axis=0))
    per_shift = np.asarray(per_shift)

    mean = per_shift.mean(axis=0)
    if shifts.R >= 2:
        dev = per_shift - mean
        rmse = np.sqrt((dev * dev).sum(axis=0) / (shifts.R * (shifts.R - 1)))
    else:
        rmse = None
    return CubatureResult(per_shift=per_shift, mean=mean, rmse_estimate=rmse,
                          n=gv.n, R=shifts.R)
