"""Data generators for the reference experiments (CSV-ready rows)."""
from __future__ import annotations

import numpy as np

from .fitting import BENCHMARK_FAMILIES, FitProblem, benchmark, fit
from .mie import TABLE_DIAMETERS, TABLE_MONO_G, TABLE_POLY_G, MieConfig, mie_dataset
from .phase_models import (
    Rayleigh,
    cosine_grid,
    eval_phase,
    make_exponential,
    tabulate,
    vmf,
)
from .slab_renderer import PixelLine, SlabScene, default_lights, render_set


def asymmetry_table(cfg: MieConfig | None = None, diameters=TABLE_DIAMETERS):
    """Rows ``(diameter, g_mono, g_poly, ref_mono, ref_poly)``."""
    cfg = cfg or MieConfig.calibrated()
    mono = mie_dataset(diameters, cfg, poly=False)
    poly = mie_dataset(diameters, cfg, poly=True)
    ref = {d: (m, p) for d, m, p in zip(TABLE_DIAMETERS, TABLE_MONO_G, TABLE_POLY_G)}
    rows = []
    for d, a, b in zip(diameters, mono, poly):
        rm, rp = ref.get(d, (float("nan"), float("nan")))
        rows.append((d, a.g, b.g, rm, rp))
    return rows


def rayleigh_fit(seed: int = 0, restarts: int = 16):
    """Degree-2 exponential fit of the Rayleigh phase function.

    Returns the fit report and rows ``(mu, rayleigh, fit, vmf_1, vmf_5)``.
    """
    target = tabulate(Rayleigh(), metadata={"source": "rayleigh"})
    report = fit(FitProblem(target, "exp2", restarts=restarts, seed=seed))
    mu = cosine_grid(181)
    rows = np.column_stack([mu, eval_phase(Rayleigh(), mu), eval_phase(report.best_params, mu),
                            vmf(1.0, mu), vmf(5.0, mu)])
    return report, rows


def sad_matrix(dispersion: str = "poly", diameters=TABLE_DIAMETERS, families=BENCHMARK_FAMILIES,
               cfg: MieConfig | None = None, restarts: int = 16, seed: int = 0,
               workers: int = 1):
    """Fit every family to every Mie target; returns ``(labels, reports)``."""
    if dispersion not in ("mono", "poly"):
        raise ValueError("dispersion must be 'mono' or 'poly'")
    cfg = cfg or MieConfig.calibrated()
    targets = mie_dataset(diameters, cfg, poly=dispersion == "poly")
    reports = benchmark([t.phase for t in targets], list(families), restarts=restarts,
                        seed=seed, workers=workers)
    return [f"{d:g}" for d in diameters], reports


def recovery_data(truth_coeffs=(2.0, 0.5, -0.3), sigma_t: float = 2.0, albedo: float = 0.9,
                  thickness: float = 1.0, pixel_line: PixelLine = PixelLine(65, 0.1),
                  spp: int = 16384, seed: int = 12345, threads: int | None = None):
    """Synthetic observation set for the self-recovery experiment."""
    scene = SlabScene(make_exponential(truth_coeffs), thickness=thickness, sigma_t=sigma_t,
                      sigma_s=albedo * sigma_t, pixel_line=pixel_line, spp=spp, seed=seed)
    lights = default_lights()
    return scene, lights, render_set(scene, lights, threads=threads)
