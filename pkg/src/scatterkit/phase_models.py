"""Scattering phase functions.

All densities are per steradian, so an isotropic phase function is
``1/(4*pi)`` and every normalized model satisfies
``2*pi * integral(p(mu), -1, 1) == 1``.

Families
--------
ExponentialPhase
    ``p(mu) = exp(b0 + sum_i b_i Q_i(mu))``, positive by construction.
    ``b0`` is fixed by normalization. ``Q_i`` is ``mu**i`` (default) or the
    Legendre polynomial ``P_i``.
Isotropic, HenyeyGreenstein, TwoTermHG, Rayleigh
    Closed-form classical models; always normalized.
RawPolynomial
    ``p(mu) = sum_i a_i mu**i``. May go negative; see ``is_valid``.
TabulatedPhase
    Samples on an ascending cosine grid, linearly interpolated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Union

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid

from .quadrature import QuadratureError, integrate, log_integrate

FOUR_PI = 4.0 * math.pi
TWO_PI = 2.0 * math.pi

CDF_TABLE_SIZE = 4096
REFINE_FACTOR = 8
REFINE_THRESHOLD = 100.0
VALIDITY_GRID = 2001
MU_SLACK = 1e-12


class PhaseFunctionError(ValueError):
    """Raised for unusable phase models (unnormalized, not a density, ...)."""


def _check_mu(mu):
    arr = np.asarray(mu, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(np.abs(arr) > 1.0 + MU_SLACK):
        raise ValueError("mu outside [-1, 1]")
    return np.clip(arr, -1.0, 1.0)


def basis_matrix(mu: np.ndarray, degree: int, basis: str) -> np.ndarray:
    """Columns Q_1 .. Q_degree evaluated at ``mu``."""
    mu = np.asarray(mu, dtype=float)
    if degree == 0:
        return np.zeros(mu.shape + (0,))
    if basis == "monomial":
        return mu[..., None] ** np.arange(1, degree + 1)
    if basis == "legendre":
        return np.polynomial.legendre.legvander(mu, degree)[..., 1:]
    raise ValueError(f"unknown basis {basis!r}")


@dataclass(frozen=True)
class ExponentialPhase:
    coeffs: tuple[float, ...] = ()
    basis: str = "monomial"
    b0: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))
        if self.basis not in ("monomial", "legendre"):
            raise ValueError(f"unknown basis {self.basis!r}")

    @property
    def degree(self) -> int:
        return len(self.coeffs)

    @property
    def normalized(self) -> bool:
        return self.b0 is not None

    def exponent(self, mu) -> np.ndarray:
        """``sum_i b_i Q_i(mu)`` without the normalization constant."""
        q = basis_matrix(np.asarray(mu, dtype=float), self.degree, self.basis)
        return q @ np.asarray(self.coeffs, dtype=float)

    def log_density(self, mu) -> np.ndarray:
        if self.b0 is None:
            raise PhaseFunctionError("unnormalized")
        return self.b0 + self.exponent(mu)


@dataclass(frozen=True)
class Isotropic:
    normalized = True


@dataclass(frozen=True)
class HenyeyGreenstein:
    g: float

    normalized = True

    def __post_init__(self):
        if not -1.0 < self.g < 1.0:
            raise ValueError("HG asymmetry must lie in (-1, 1)")


@dataclass(frozen=True)
class TwoTermHG:
    """``w * HG(g1) + (1 - w) * HG(g2)``; lobe signs are not constrained."""

    g1: float
    g2: float
    w: float

    normalized = True

    def __post_init__(self):
        if not (-1.0 < self.g1 < 1.0 and -1.0 < self.g2 < 1.0):
            raise ValueError("HG asymmetry must lie in (-1, 1)")
        if not 0.0 <= self.w <= 1.0:
            raise ValueError("lobe weight must lie in [0, 1]")


@dataclass(frozen=True)
class Rayleigh:
    normalized = True


@dataclass(frozen=True)
class RawPolynomial:
    """Power series in ``mu``; ``coeffs`` holds ``a_0 .. a_N``."""

    coeffs: tuple[float, ...]
    normalized: bool = False

    def __post_init__(self):
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def raw(self, mu) -> np.ndarray:
        return np.polynomial.polynomial.polyval(np.asarray(mu, dtype=float), self.coeffs)

    @property
    def min_value(self) -> float:
        return float(np.min(self.raw(np.linspace(-1.0, 1.0, VALIDITY_GRID))))

    @property
    def is_valid(self) -> bool:
        """True when the polynomial is positive on a dense grid over [-1, 1]."""
        return self.min_value > 0.0


@dataclass(frozen=True, eq=False)
class TabulatedPhase:
    mu_grid: np.ndarray
    values: np.ndarray
    metadata: dict = field(default_factory=dict)
    normalized: bool = False

    def __post_init__(self):
        mu = np.asarray(self.mu_grid, dtype=float)
        val = np.asarray(self.values, dtype=float)
        if mu.ndim != 1 or mu.shape != val.shape:
            raise ValueError("mu_grid and values must be 1-D and of equal length")
        if mu.size < 2 or np.any(np.diff(mu) <= 0):
            raise ValueError("mu_grid must be strictly increasing")
        if mu[0] < -1.0 - MU_SLACK or mu[-1] > 1.0 + MU_SLACK:
            raise ValueError("mu_grid must lie in [-1, 1]")
        if np.any(~np.isfinite(val)) or np.any(val < 0):
            raise ValueError("tabulated densities must be finite and nonnegative")
        mu.flags.writeable = False
        val.flags.writeable = False
        object.__setattr__(self, "mu_grid", mu)
        object.__setattr__(self, "values", val)

    def solid_angle_integral(self) -> float:
        return TWO_PI * float(trapezoid(self.values, self.mu_grid))


PhaseModel = Union[
    ExponentialPhase, Isotropic, HenyeyGreenstein, TwoTermHG, Rayleigh,
    RawPolynomial, TabulatedPhase,
]


def _hg(mu, g):
    g2 = g * g
    denom = 1.0 + g2 - 2.0 * g * mu
    return (1.0 - g2) / (FOUR_PI * denom * np.sqrt(denom))


def _require_normalized(model):
    if not model.normalized:
        raise PhaseFunctionError("unnormalized")


def _density(model, mu: np.ndarray) -> np.ndarray:
    if isinstance(model, ExponentialPhase):
        return np.exp(model.log_density(mu))
    if isinstance(model, HenyeyGreenstein):
        return _hg(mu, model.g)
    if isinstance(model, TwoTermHG):
        return model.w * _hg(mu, model.g1) + (1.0 - model.w) * _hg(mu, model.g2)
    if isinstance(model, Isotropic):
        return np.full_like(mu, 1.0 / FOUR_PI)
    if isinstance(model, Rayleigh):
        return 3.0 / (16.0 * math.pi) * (1.0 + mu * mu)
    if isinstance(model, RawPolynomial):
        return model.raw(mu)
    if isinstance(model, TabulatedPhase):
        return np.interp(mu, model.mu_grid, model.values, left=0.0, right=0.0)
    raise TypeError(f"not a phase model: {type(model).__name__}")


def eval_phase(model: PhaseModel, mu) -> np.ndarray | float:
    """Evaluate the density (per steradian) at cosine(s) ``mu``.

    Raises :class:`PhaseFunctionError` for unnormalized models and
    :class:`ValueError` when ``mu`` leaves ``[-1, 1]``.
    """
    _require_normalized(model)
    scalar = np.ndim(mu) == 0
    out = _density(model, _check_mu(mu))
    return float(out) if scalar else out


def log_eval_phase(model: PhaseModel, mu) -> np.ndarray:
    """Log-density; exact in the exponent for :class:`ExponentialPhase`."""
    _require_normalized(model)
    mu = _check_mu(mu)
    if isinstance(model, ExponentialPhase):
        return model.log_density(mu)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(_density(model, mu))


def exponential_log_norm(coeffs, basis: str = "monomial") -> float:
    """Return ``b0`` for the given shape coefficients.

    Raises :class:`PhaseFunctionError` ("unnormalizable") when the integral
    cannot be represented in floating point.
    """
    shape = ExponentialPhase(tuple(coeffs), basis)
    if not all(math.isfinite(c) for c in shape.coeffs):
        raise PhaseFunctionError("unnormalizable")
    try:
        with np.errstate(over="raise", invalid="raise"):
            log_z = log_integrate(shape.exponent)
    except (QuadratureError, FloatingPointError) as exc:
        raise PhaseFunctionError("unnormalizable") from exc
    b0 = -math.log(TWO_PI) - log_z
    if not math.isfinite(b0):
        raise PhaseFunctionError("unnormalizable")
    return b0


def normalize(model: PhaseModel) -> PhaseModel:
    """Return a copy satisfying the solid-angle normalization.

    Only ``b0`` changes for exponential models; polynomial coefficients and
    tabulated values are rescaled. Closed-form families are returned as-is.
    """
    if isinstance(model, ExponentialPhase):
        return replace(model, b0=exponential_log_norm(model.coeffs, model.basis))
    if isinstance(model, RawPolynomial):
        a = np.asarray(model.coeffs)
        if not np.all(np.isfinite(a)):
            raise PhaseFunctionError("unnormalizable")
        i = np.arange(a.size)
        total = TWO_PI * float(np.sum(a[i % 2 == 0] * 2.0 / (i[i % 2 == 0] + 1)))
        if total == 0.0 or not math.isfinite(total):
            raise PhaseFunctionError("unnormalizable")
        return RawPolynomial(tuple(a / total), normalized=True)
    if isinstance(model, TabulatedPhase):
        total = model.solid_angle_integral()
        if not total > 0.0 or not math.isfinite(total):
            raise PhaseFunctionError("unnormalizable")
        return TabulatedPhase(model.mu_grid, model.values / total,
                              dict(model.metadata), normalized=True)
    _density(model, np.zeros(1))  # type check
    return model


def solid_angle_integral(model: PhaseModel) -> float:
    """``2*pi * integral(p)`` by quadrature (trapezoid for tabulated)."""
    if isinstance(model, TabulatedPhase):
        return model.solid_angle_integral()
    _require_normalized(model)
    return TWO_PI * integrate(lambda mu: _density(model, mu), tol=1e-12)


def asymmetry(model: PhaseModel) -> float:
    """Mean scattering cosine ``2*pi * integral(mu * p(mu))``."""
    _require_normalized(model)
    if isinstance(model, HenyeyGreenstein):
        return model.g
    if isinstance(model, TwoTermHG):
        return model.w * model.g1 + (1.0 - model.w) * model.g2
    if isinstance(model, (Isotropic, Rayleigh)):
        return 0.0
    if isinstance(model, TabulatedPhase):
        return TWO_PI * float(trapezoid(model.mu_grid * model.values, model.mu_grid))
    return TWO_PI * integrate(lambda mu: mu * _density(model, mu), tol=1e-12)


@dataclass(frozen=True, eq=False)
class SamplingTable:
    """Piecewise-linear inverse CDF over cosine nodes."""

    mu: np.ndarray
    cdf: np.ndarray

    def invert(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        k = np.searchsorted(self.cdf, u, side="right") - 1
        k = np.clip(k, 0, self.mu.size - 2)
        c0 = self.cdf[k]
        dc = self.cdf[k + 1] - c0
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(dc > 0, (u - c0) / dc, 0.0)
        return np.clip(self.mu[k] + np.clip(t, 0.0, 1.0) * (self.mu[k + 1] - self.mu[k]),
                       -1.0, 1.0)


def _table_grid(model) -> np.ndarray:
    mu = np.linspace(-1.0, 1.0, CDF_TABLE_SIZE)
    dens = _density(model, mu)
    median = float(np.median(dens))
    peak = np.maximum(dens[:-1], dens[1:])
    hot = peak > REFINE_THRESHOLD * median
    if not np.any(hot):
        return mu
    frac = np.arange(1, REFINE_FACTOR) / REFINE_FACTOR
    extra = (mu[:-1][hot, None] + frac[None, :] * np.diff(mu)[hot, None]).ravel()
    return np.union1d(mu, extra)


@lru_cache(maxsize=512)
def sampling_table(model: PhaseModel) -> SamplingTable:
    """Build (and cache) the cumulative table used for direction sampling."""
    _require_normalized(model)
    if isinstance(model, RawPolynomial) and not model.is_valid:
        raise PhaseFunctionError("not a density")
    if isinstance(model, TabulatedPhase):
        mu = model.mu_grid
        cum = cumulative_trapezoid(model.values, mu, initial=0.0)
    else:
        mu = _table_grid(model)
        # 4-point Gauss-Legendre per cell keeps the cell masses accurate
        # under sharp forward peaks.
        x, w = np.polynomial.legendre.leggauss(4)
        half = 0.5 * np.diff(mu)
        mid = 0.5 * (mu[1:] + mu[:-1])
        nodes = mid[:, None] + half[:, None] * x[None, :]
        mass = half * (_density(model, nodes) @ w)
        if np.any(mass < 0):
            raise PhaseFunctionError("not a density")
        cum = np.concatenate(([0.0], np.cumsum(mass)))
    if not cum[-1] > 0:
        raise PhaseFunctionError("not a density")
    cdf = cum / cum[-1]
    cdf[-1] = 1.0
    return SamplingTable(np.asarray(mu, dtype=float), cdf)


def sample_direction(model: PhaseModel, u1, u2):
    """Map uniforms ``(u1, u2)`` to a scattering ``(cos_theta, phi)``.

    ``cos_theta`` comes from the cached inverse-CDF table and
    ``phi = 2*pi*u2``. Works elementwise on arrays.
    """
    table = sampling_table(model)
    cos_theta = table.invert(u1)
    phi = TWO_PI * np.asarray(u2, dtype=float)
    if np.ndim(u1) == 0 and np.ndim(u2) == 0:
        return float(cos_theta), float(phi)
    return cos_theta, phi


def cosine_grid(n_angles: int = 1801) -> np.ndarray:
    """Ascending cosines of ``n_angles`` scattering angles uniform in theta."""
    theta = np.linspace(0.0, math.pi, n_angles)
    mu = np.cos(theta)[::-1].copy()
    mu[0], mu[-1] = -1.0, 1.0
    return mu


def tabulate(model: PhaseModel, mu=None, metadata: dict | None = None,
             tol: float = 1e-6) -> TabulatedPhase:
    """Sample a normalized model on ``mu`` (default: 1801-angle grid).

    The samples are kept as-is when their trapezoid integral is already
    within ``tol`` of one; otherwise they are rescaled.
    """
    mu = cosine_grid() if mu is None else np.asarray(mu, dtype=float)
    tab = TabulatedPhase(mu, eval_phase(model, mu), dict(metadata or {}))
    if abs(tab.solid_angle_integral() - 1.0) <= tol:
        return replace(tab, normalized=True)
    return normalize(tab)


def hg_legendre_series(g: float, mu, terms: int = 60) -> np.ndarray:
    """Truncated Legendre expansion of HG, per steradian."""
    i = np.arange(terms + 1)
    c = (2 * i + 1) * g ** i / FOUR_PI
    return np.polynomial.legendre.legval(np.asarray(mu, dtype=float), c)


def vmf(kappa: float, mu) -> np.ndarray:
    """Closed-form von Mises-Fisher phase function, per steradian.

    ``kappa / (4 pi sinh kappa) * exp(kappa mu)``, written in a form that
    stays finite for large ``kappa``.
    """
    mu = np.asarray(mu, dtype=float)
    if kappa == 0:
        return np.full_like(mu, 1.0 / FOUR_PI)
    k = abs(kappa)
    scale = k / (TWO_PI * -math.expm1(-2.0 * k))
    return scale * np.exp(k * (np.sign(kappa) * mu - 1.0))


def vmf_log_norm(kappa: float) -> float:
    """Closed-form ``b0`` of the degree-1 exponential phase function."""
    if kappa == 0:
        return -math.log(FOUR_PI)
    k = abs(kappa)
    return math.log(k / (TWO_PI * -math.expm1(-2.0 * k))) - k


def make_exponential(coeffs, basis: str = "monomial") -> ExponentialPhase:
    """Shorthand for a normalized :class:`ExponentialPhase`."""
    return normalize(ExponentialPhase(tuple(coeffs), basis))


def raw_polynomial_from_shape(shape_coeffs) -> RawPolynomial:
    """Solve ``a_0`` so that ``a_0 + sum a_i mu**i`` is normalized.

    ``shape_coeffs`` holds ``a_1 .. a_N``.
    """
    a = np.concatenate(([0.0], np.asarray(shape_coeffs, dtype=float)))
    i = np.arange(a.size)
    even = (i % 2 == 0) & (i > 0)
    rest = float(np.sum(a[even] * 2.0 / (i[even] + 1)))
    a[0] = (1.0 / TWO_PI - rest) / 2.0
    return RawPolynomial(tuple(a), normalized=True)
