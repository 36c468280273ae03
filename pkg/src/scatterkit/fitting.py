"""Fit parametric phase families to tabulated targets.

The loss is the sum over the target's own cosine grid of absolute
differences between log densities (SAD of logs). Every candidate is
normalized before it is scored, so only shape parameters are searched.
"""
from __future__ import annotations

import csv
import json
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from .phase_models import (
    ExponentialPhase,
    HenyeyGreenstein,
    PhaseFunctionError,
    RawPolynomial,
    TabulatedPhase,
    TwoTermHG,
    exponential_log_norm,
    log_eval_phase,
    normalize,
    raw_polynomial_from_shape,
    basis_matrix,
)

COEFF_BOUND = 10.0
G_BOUND = 0.9999
G_INIT = 0.95
PENALTY = 1e6
MAX_EVALS = 20_000
SIMPLEX_TOL = 1e-8

BENCHMARK_FAMILIES = ("poly7", "poly5", "poly3", "hg", "tthg", "exp7", "exp5", "exp3", "exp1")


@dataclass(frozen=True)
class Family:
    """A phase family: ``kind`` is exp, poly, hg or tthg."""

    kind: str
    degree: int = 0
    basis: str = "monomial"

    @classmethod
    def parse(cls, name: str) -> "Family":
        name = name.strip().lower().replace("-", "").replace("_", "")
        aliases = {"hg": ("hg", 0), "tthg": ("tthg", 0), "twotermhg": ("tthg", 0),
                   "vmf": ("exp", 1)}
        if name in aliases:
            kind, deg = aliases[name]
            return cls(kind, deg)
        m = re.fullmatch(r"(exp|exponential|poly|polynomial)(\d+)(leg)?", name)
        if not m:
            raise ValueError(f"unknown family {name!r}")
        kind = "exp" if m.group(1).startswith("exp") else "poly"
        basis = "legendre" if m.group(3) else "monomial"
        if kind == "poly" and basis != "monomial":
            raise ValueError("polynomial family supports the monomial basis only")
        return cls(kind, int(m.group(2)), basis)

    @property
    def name(self) -> str:
        if self.kind in ("hg", "tthg"):
            return self.kind
        return f"{self.kind}{self.degree}" + ("leg" if self.basis == "legendre" else "")

    @property
    def n_params(self) -> int:
        return {"hg": 1, "tthg": 3}.get(self.kind, self.degree)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Box used for Latin-hypercube starting simplices."""
        if self.kind == "hg":
            return np.array([-G_INIT]), np.array([G_INIT])
        if self.kind == "tthg":
            return np.array([-G_INIT, -G_INIT, 0.0]), np.array([G_INIT, G_INIT, 1.0])
        return np.full(self.degree, -COEFF_BOUND), np.full(self.degree, COEFF_BOUND)

    def build(self, params) -> object:
        """Normalized model from a parameter vector (clamped into bounds)."""
        p = np.asarray(params, dtype=float)
        if self.kind == "exp":
            return normalize(ExponentialPhase(tuple(p), self.basis))
        if self.kind == "poly":
            return raw_polynomial_from_shape(p)
        if self.kind == "hg":
            return HenyeyGreenstein(float(np.clip(p[0], -G_BOUND, G_BOUND)))
        g1, g2 = np.clip(p[:2], -G_BOUND, G_BOUND)
        return TwoTermHG(float(g1), float(g2), float(np.clip(p[2], 0.0, 1.0)))


@dataclass
class FitProblem:
    target: TabulatedPhase
    family: Family | str
    mu_grid: np.ndarray | None = None
    restarts: int = 16
    seed: int = 0
    max_evals: int = MAX_EVALS
    warm_starts: Sequence[Sequence[float]] = ()

    def __post_init__(self):
        if isinstance(self.family, str):
            self.family = Family.parse(self.family)
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


@dataclass
class FitReport:
    family: str
    best_params: object
    params: list[float]
    sad: float
    per_restart_losses: list[float]
    failure_reason: str | None = None
    grid_points: int = 0
    evaluations: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "family": self.family,
            "params": self.params,
            "model": model_to_json(self.best_params),
            "sad": None if not math.isfinite(self.sad) else self.sad,
            "per_restart_losses": [x if math.isfinite(x) else None
                                   for x in self.per_restart_losses],
            "failure_reason": self.failure_reason,
            "grid_points": self.grid_points,
            "evaluations": self.evaluations,
        }


def model_to_json(model) -> dict:
    if isinstance(model, ExponentialPhase):
        return {"kind": "exponential", "coeffs": list(model.coeffs), "b0": model.b0,
                "basis": model.basis}
    if isinstance(model, RawPolynomial):
        return {"kind": "polynomial", "coeffs": list(model.coeffs)}
    if isinstance(model, HenyeyGreenstein):
        return {"kind": "hg", "g": model.g}
    if isinstance(model, TwoTermHG):
        return {"kind": "tthg", "g1": model.g1, "g2": model.g2, "w": model.w}
    return {"kind": type(model).__name__.lower()}


def sad_of_logs(model, mu: np.ndarray, log_target: np.ndarray) -> float:
    """Sum of absolute log-density differences; ``inf`` if model <= 0 anywhere."""
    with np.errstate(divide="ignore", invalid="ignore"):
        lp = log_eval_phase(model, mu)
    if not np.all(np.isfinite(lp)):
        return math.inf
    return float(np.sum(np.abs(lp - log_target)))


class _Objective:
    """Loss on the target grid for one family, counting evaluations."""

    def __init__(self, family: Family, mu: np.ndarray, log_target: np.ndarray):
        self.family = family
        self.mu = mu
        self.log_target = log_target
        self.n_eval = 0
        self.dense = np.linspace(-1.0, 1.0, 2001)
        if family.kind == "exp":
            self.q_grid = basis_matrix(mu, family.degree, family.basis)

    def __call__(self, params) -> float:
        self.n_eval += 1
        p = np.asarray(params, dtype=float)
        fam = self.family
        if not np.all(np.isfinite(p)):
            return math.inf
        if fam.kind == "exp":
            try:
                b0 = exponential_log_norm(p, fam.basis)
            except PhaseFunctionError:
                return math.inf
            return float(np.sum(np.abs(b0 + self.q_grid @ p - self.log_target)))
        if fam.kind == "poly":
            model = raw_polynomial_from_shape(p)
            vals = model.raw(self.mu)
            if np.any(vals <= 0.0):
                # log-SAD is undefined on the target grid
                return math.inf
            loss = float(np.sum(np.abs(np.log(vals) - self.log_target)))
            lowest = float(np.min(model.raw(self.dense)))
            if lowest <= 0.0:
                loss += PENALTY * abs(lowest)
            return loss
        if fam.kind == "hg":
            excess = max(0.0, abs(p[0]) - G_BOUND)
        else:
            excess = (np.sum(np.maximum(0.0, np.abs(p[:2]) - G_BOUND))
                      + max(0.0, -p[2]) + max(0.0, p[2] - 1.0))
        return sad_of_logs(fam.build(p), self.mu, self.log_target) + PENALTY * float(excess)


def warm_start(family: Family, mu: np.ndarray, target: np.ndarray) -> np.ndarray | None:
    """Least-squares seed: log-linear for exp families, linear for polynomials."""
    if family.kind == "exp":
        design = np.column_stack([np.ones_like(mu), basis_matrix(mu, family.degree, family.basis)])
        coef, *_ = np.linalg.lstsq(design, np.log(target), rcond=None)
        return np.clip(coef[1:], -COEFF_BOUND * 10, COEFF_BOUND * 10)
    if family.kind == "poly":
        design = mu[:, None] ** np.arange(family.degree + 1)
        coef, *_ = np.linalg.lstsq(design, target, rcond=None)
        return coef[1:]
    return None


def _simplex_around(x0: np.ndarray, step: np.ndarray) -> np.ndarray:
    sim = np.tile(x0, (x0.size + 1, 1))
    for i in range(x0.size):
        sim[i + 1, i] += step[i]
    return sim


def _run_nm(obj: _Objective, simplex: np.ndarray, max_evals: int):
    # infinite losses make scipy's fatol check compute inf - inf
    with np.errstate(invalid="ignore"):
        res = minimize(obj, simplex[0], method="Nelder-Mead",
                       options={"initial_simplex": simplex, "xatol": SIMPLEX_TOL,
                                "fatol": math.inf, "maxfev": max_evals,
                                "maxiter": max_evals})
    return np.asarray(res.x, dtype=float), float(res.fun)


def fit(problem: FitProblem) -> FitReport:
    """Multi-start Nelder-Mead fit; deterministic for a given seed."""
    fam: Family = problem.family
    target = problem.target if problem.target.normalized else normalize(problem.target)
    mu = target.mu_grid if problem.mu_grid is None else np.asarray(problem.mu_grid, dtype=float)
    p_target = np.interp(mu, target.mu_grid, target.values)
    if np.any(p_target <= 0):
        raise ValueError("target must be strictly positive on the fitting grid")
    log_target = np.log(p_target)
    obj = _Objective(fam, mu, log_target)

    lo, hi = fam.bounds()
    width = hi - lo
    simplices = []
    for ws in problem.warm_starts:
        x0 = np.zeros(fam.n_params)
        ws = np.asarray(ws, dtype=float)[: fam.n_params]
        x0[: ws.size] = ws
        simplices.append(_simplex_around(x0, 0.05 * width))
    seed_x = warm_start(fam, mu, p_target)
    if seed_x is not None:
        simplices.append(_simplex_around(seed_x, 0.05 * width))
    n_random = max(problem.restarts - len(simplices), 0)
    rng = np.random.default_rng(problem.seed)
    for r in range(n_random):
        sampler = qmc.LatinHypercube(d=fam.n_params, seed=rng)
        simplices.append(qmc.scale(sampler.random(fam.n_params + 1), lo, hi))

    best_x, best_f = None, math.inf
    losses = []
    for sim in simplices[: max(problem.restarts, len(problem.warm_starts) + 1)]:
        x, f = _run_nm(obj, sim, problem.max_evals)
        losses.append(f)
        if f < best_f or best_x is None:
            best_x, best_f = x, f

    model = fam.build(best_x)
    failure = None
    if fam.kind == "poly" and not model.is_valid:
        failure = "negative density"
    sad = math.inf if failure else sad_of_logs(model, mu, log_target)
    return FitReport(fam.name, model, [float(v) for v in best_x], sad, losses,
                     failure_reason=failure, grid_points=int(mu.size),
                     evaluations=obj.n_eval)


def _fit_cell(args):
    target, family, restarts, seed = args
    try:
        return fit(FitProblem(target, family, restarts=restarts, seed=seed))
    except Exception as exc:  # a failed cell never aborts the matrix
        return FitReport(str(family), None, [], math.inf, [], failure_reason=str(exc))


def benchmark(targets, families, restarts: int = 16, seed: int = 0,
              workers: int = 1) -> list[list[FitReport]]:
    """Fit every family to every target; ``result[i][j]`` is target i, family j.

    ``targets`` may hold :class:`~scatterkit.mie.MieResult` or
    :class:`TabulatedPhase` objects.
    """
    if not targets or not families:
        raise ValueError("targets and families must be nonempty")
    fams = [Family.parse(f) if isinstance(f, str) else f for f in families]
    tabs = [getattr(t, "phase", t) for t in targets]
    jobs = [(tab, fam, restarts, seed * 1_000_003 + i * len(fams) + j)
            for i, tab in enumerate(tabs) for j, fam in enumerate(fams)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            flat = list(pool.map(_fit_cell, jobs))
    else:
        flat = [_fit_cell(job) for job in jobs]
    return [flat[i * len(fams):(i + 1) * len(fams)] for i in range(len(tabs))]


def write_matrix_csv(path, labels, families, reports) -> None:
    """Write the SAD matrix; failed cells are left empty."""
    names = [Family.parse(f).name if isinstance(f, str) else f.name for f in families]
    with open(path, "w", newline="") as fh:
        fh.write("# SAD of log phase functions per (diameter_um, family); empty = failed fit\n")
        w = csv.writer(fh)
        w.writerow(["diameter_um", *names])
        for label, row in zip(labels, reports):
            w.writerow([label, *("" if not math.isfinite(r.sad) else repr(r.sad) for r in row)])


def write_failures_json(path, labels, families, reports) -> None:
    names = [Family.parse(f).name if isinstance(f, str) else f.name for f in families]
    out = {str(label): {n: r.failure_reason for n, r in zip(names, row) if r.failure_reason}
           for label, row in zip(labels, reports)}
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2)
