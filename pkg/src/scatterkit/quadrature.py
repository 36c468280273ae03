"""Composite Gauss-Legendre quadrature with panel doubling.

Both routines work on ``[a, b]`` split into equal panels, each carrying a
fixed 64-node Gauss-Legendre rule. The panel count doubles until two
successive estimates agree to ``tol``.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

NODES_PER_PANEL = 64
MAX_PANELS = 4096


class QuadratureError(ArithmeticError):
    pass


@lru_cache(maxsize=None)
def _rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n)
    return x, w


def panel_nodes(a: float, b: float, panels: int, n: int = NODES_PER_PANEL):
    """Return the flattened nodes and weights of the composite rule."""
    x, w = _rule(n)
    edges = np.linspace(a, b, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def integrate(f, a: float = -1.0, b: float = 1.0, tol: float = 1e-10,
              max_panels: int = MAX_PANELS) -> float:
    """Integrate a vectorized callable ``f`` over ``[a, b]``.

    Convergence is absolute: ``|I(2n) - I(n)| < tol``.
    """
    panels = 1
    nodes, weights = panel_nodes(a, b, panels)
    prev = float(np.dot(weights, f(nodes)))
    if not np.isfinite(prev):
        raise QuadratureError("non-finite integrand")
    while panels < max_panels:
        panels *= 2
        nodes, weights = panel_nodes(a, b, panels)
        cur = float(np.dot(weights, f(nodes)))
        if not np.isfinite(cur):
            raise QuadratureError("non-finite integrand")
        if abs(cur - prev) < tol:
            return cur
        prev = cur
    return prev


def _log_sum(logf: np.ndarray, weights: np.ndarray) -> float:
    m = np.max(logf)
    if not np.isfinite(m):
        raise QuadratureError("non-finite log-integrand")
    return float(m + np.log(np.dot(weights, np.exp(logf - m))))


def log_integrate(logf, a: float = -1.0, b: float = 1.0, tol: float = 1e-10,
                  max_panels: int = MAX_PANELS) -> float:
    """Return ``log(integral of exp(logf))`` accumulated with max-subtraction.

    Convergence is checked on the log of the integral, which is a relative
    criterion on the integral itself.
    """
    panels = 1
    nodes, weights = panel_nodes(a, b, panels)
    prev = _log_sum(logf(nodes), weights)
    while panels < max_panels:
        panels *= 2
        nodes, weights = panel_nodes(a, b, panels)
        cur = _log_sum(logf(nodes), weights)
        if abs(cur - prev) < tol:
            return cur
        prev = cur
    return prev
