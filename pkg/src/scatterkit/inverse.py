"""Estimate slab scattering parameters from normalized intensity profiles.

Analysis by synthesis: candidate parameters ``(sigma_t, albedo, shape)``
are rendered with the forward Monte Carlo model under the same joint
normalization as the observations, and compared with the log loss

    sum (log(I_obs + delta) - log(I_syn + delta))**2.

The outer loop draws ``delta`` from a fixed pool; each inner loop is a
Nelder-Mead run with the render seed held fixed (common random numbers),
so the objective it sees is deterministic. Sample counts follow an
ascending schedule that advances once the plain squared error stalls.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from . import _kernels
from .fitting import G_BOUND, Family, model_to_json
from .io import FormatError, read_manifest, read_profile
from .slab_renderer import (
    ProfileSet,
    SlabScene,
    direct_term,
    normalize_set,
    render_set,
)

MAX_RETRIES = 4


class ConfigError(ValueError):
    """Invalid inversion configuration; ``field`` names the entry."""

    def __init__(self, message: str, field: str = ""):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


@dataclass(frozen=True)
class InversionConfig:
    """Settings for :func:`invert`.

    ``stage_max_iters`` caps the inner loops spent at one sample count;
    ``None`` leaves only the stall rule (``patience`` loops improving the
    plain error by less than ``min_improvement``). ``prior_weight`` scales a
    very weak pull of ``log sigma_t`` toward the Beer-Lambert estimate; it
    only decides between otherwise tied parameters, e.g. without scattering,
    where normalized profiles carry no extinction information.
    """

    phase_family: str = "exp3"
    delta_pool: tuple = (1.0, 0.3, 0.1, 0.03)
    spp_schedule: tuple = (128, 512, 2048, 8192)
    sigma_t_max: float = 50.0
    sigma_t_min: float = 1e-3
    coeff_bound: float = 10.0
    seed: int = 0
    max_outer_iters: int = 40
    inner_max_evals: int = 80
    patience: int = 3
    min_improvement: float = 0.01
    stage_max_iters: int | None = None
    penalty: float = 1e3
    prior_weight: float = 1e-8
    threads: int | None = None

    def __post_init__(self):
        fam = Family.parse(self.phase_family) if isinstance(self.phase_family, str) else None
        if fam is None or fam.kind not in ("exp", "tthg", "hg"):
            raise ConfigError("must be an exponential family, 'hg' or 'tthg'", "phase_family")
        pool = tuple(float(d) for d in self.delta_pool)
        if not pool or any(not (d > 0 and math.isfinite(d)) for d in pool):
            raise ConfigError("must be a nonempty list of positive numbers", "delta_pool")
        sched = tuple(int(s) for s in self.spp_schedule)
        if not sched or sched[0] < 1 or any(b <= a for a, b in zip(sched, sched[1:])):
            raise ConfigError("must be a strictly ascending list of positive integers",
                              "spp_schedule")
        if not 0 < self.sigma_t_min < self.sigma_t_max:
            raise ConfigError("need 0 < sigma_t_min < sigma_t_max", "sigma_t_max")
        if not self.prior_weight >= 0:
            raise ConfigError("must be >= 0", "prior_weight")
        if not self.coeff_bound > 0:
            raise ConfigError("must be > 0", "coeff_bound")
        for name in ("max_outer_iters", "inner_max_evals", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", name)
        if self.stage_max_iters is not None and self.stage_max_iters < 1:
            raise ConfigError("must be >= 1", "stage_max_iters")
        object.__setattr__(self, "delta_pool", pool)
        object.__setattr__(self, "spp_schedule", sched)

    @property
    def family(self) -> Family:
        return Family.parse(self.phase_family)

    def to_json(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in self.__dict__.items()}


@dataclass
class InversionReport:
    sigma_t_hat: float
    sigma_s_hat: float
    phase_hat: object
    params: list[float]
    final_l2_fit: float
    loss_trace: list[dict]
    residual_profiles: np.ndarray
    final_spp: int
    evaluations: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def albedo_hat(self) -> float:
        return self.sigma_s_hat / self.sigma_t_hat if self.sigma_t_hat > 0 else 0.0

    def stage_l2(self) -> dict[int, float]:
        """Lowest plain squared error seen at each sample count."""
        out: dict[int, float] = {}
        for row in self.loss_trace:
            out[row["spp"]] = min(out.get(row["spp"], math.inf), row["l2"])
        return out

    def to_json(self) -> dict:
        return {
            "sigma_t_hat": self.sigma_t_hat,
            "sigma_s_hat": self.sigma_s_hat,
            "albedo_hat": self.albedo_hat,
            "phase_hat": model_to_json(self.phase_hat),
            "params": self.params,
            "final_l2_fit": self.final_l2_fit,
            "final_spp": self.final_spp,
            "evaluations": self.evaluations,
            "loss_trace": self.loss_trace,
            "residual_profiles": self.residual_profiles.tolist(),
        }


def _stack(s) -> np.ndarray:
    return s.stacked if isinstance(s, ProfileSet) else np.asarray(s, dtype=float)


def log_loss(observed, synthetic, delta: float) -> float:
    """Sum of squared differences of ``log(I + delta)`` over all pixels."""
    if not delta > 0:
        raise ValueError("delta must be > 0")
    a, b = _stack(observed), _stack(synthetic)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sum((np.log(a + delta) - np.log(b + delta)) ** 2))


def l2_loss(observed, synthetic) -> float:
    """Plain sum of squared intensity differences."""
    a, b = _stack(observed), _stack(synthetic)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sum((a - b) ** 2))


def beer_lambert_sigma_t(observed: ProfileSet, geometry: SlabScene) -> float | None:
    """Extinction estimate from the peak of the most nearly normal back light.

    Undoes the set normalization with ``observed.scale`` and compares the
    peak with the unattenuated beam. Returns ``None`` without back lights.
    """
    back = [k for k, l in enumerate(observed.lights) if l[2] > 0]
    if not back:
        return None
    k = max(back, key=lambda i: observed.lights[i][2])
    dz = observed.lights[k][2]
    raw_peak = float(np.max(observed.profiles[k].pixels)) / observed.scale
    vacuum = replace(geometry, light_dir=(0.0, 0.0, 1.0), sigma_t=0.0, sigma_s=0.0)
    ref = float(np.max(direct_term(vacuum)))
    if not (raw_peak > 0 and ref > 0):
        return None
    ratio = min(raw_peak / ref, 1.0 - 1e-9)
    return -math.log(ratio) * dz / geometry.thickness


class _NonFinite(RuntimeError):
    pass


class _Problem:
    """Bounded objective over ``x = (sigma_t, albedo, *shape)``."""

    def __init__(self, observed: ProfileSet, geometry: SlabScene, cfg: InversionConfig):
        self.observed = observed
        self.obs = observed.stacked
        self.geometry = geometry
        self.cfg = cfg
        self.family = cfg.family
        self.lights = list(observed.lights)
        lo = [cfg.sigma_t_min, 0.0]
        hi = [cfg.sigma_t_max, 1.0]
        if self.family.kind == "exp":
            lo += [-cfg.coeff_bound] * self.family.degree
            hi += [cfg.coeff_bound] * self.family.degree
        elif self.family.kind == "hg":
            lo, hi = lo + [-G_BOUND], hi + [G_BOUND]
        else:
            lo, hi = lo + [-G_BOUND, -G_BOUND, 0.0], hi + [G_BOUND, G_BOUND, 1.0]
        self.lo, self.hi = np.array(lo), np.array(hi)
        self.evaluations = 0
        s0 = beer_lambert_sigma_t(observed, geometry)
        self.prior_sigma_t = s0 if s0 is not None and math.isfinite(s0) and s0 > 0 else None

    def prior(self, x) -> float:
        if self.prior_sigma_t is None:
            return 0.0
        return self.cfg.prior_weight * math.log(x[0] / self.prior_sigma_t) ** 2

    def initial(self) -> tuple[np.ndarray, np.ndarray]:
        s0 = self.prior_sigma_t or 1.0
        s0 = float(np.clip(s0, max(self.cfg.sigma_t_min, 0.05), self.cfg.sigma_t_max))
        if self.family.kind == "exp":
            shape, steps = [0.0] * self.family.degree, [1.0] * self.family.degree
        elif self.family.kind == "hg":
            shape, steps = [0.0], [0.3]
        else:
            shape, steps = [0.3, -0.3, 0.5], [0.3, 0.3, 0.2]
        x0 = np.array([s0, 0.5] + shape)
        return x0, np.array([0.3 * s0, 0.2] + steps)

    def clamp(self, x) -> tuple[np.ndarray, float]:
        xc = np.clip(x, self.lo, self.hi)
        return xc, float(np.sum((np.asarray(x) - xc) ** 2))

    def model(self, x):
        return self.family.build(x[2:])

    def synthesize(self, x, spp: int, seed: int) -> np.ndarray:
        xc, _ = self.clamp(x)
        scene = self.geometry.with_params(float(xc[0]), float(xc[1]), self.model(xc),
                                          spp=spp, seed=seed)
        self.evaluations += 1
        try:
            out = render_set(scene, self.lights, threads=self.cfg.threads).stacked
        except (ValueError, ArithmeticError) as exc:
            raise _NonFinite(str(exc)) from None
        if not np.all(np.isfinite(out)):
            raise _NonFinite("non-finite render")
        return out


def _simplex(x0: np.ndarray, steps: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    pts = [x0]
    for i, s in enumerate(steps):
        p = x0.copy()
        p[i] = x0[i] + s if x0[i] + s <= hi[i] else x0[i] - s
        pts.append(p)
    return np.array(pts)


def _stage_seed(seed: int, stage: int) -> int:
    key = _kernels.packet_key(np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(stage + 1))
    return int(key) & 0x7FFFFFFFFFFFFFFF


def _inner(prob: _Problem, x0, steps, delta, spp, seed):
    """One Nelder-Mead run at fixed ``delta``, ``spp`` and render seed.

    Returns the incumbent, its log loss and plain squared error.
    """
    cache: dict[bytes, tuple[float, float]] = {}

    def objective(x):
        xc, viol = prob.clamp(x)
        key = xc.tobytes()
        if key not in cache:
            syn = prob.synthesize(xc, spp, seed)
            cache[key] = (log_loss(prob.obs, syn, delta), l2_loss(prob.obs, syn))
        return cache[key][0] + prob.prior(xc) + prob.cfg.penalty * viol

    best = np.asarray(x0, dtype=float)
    for _ in range(MAX_RETRIES + 1):
        try:
            best_f = objective(best)
            res = minimize(objective, best, method="Nelder-Mead",
                           options={"initial_simplex": _simplex(best, steps, prob.lo, prob.hi),
                                    "maxfev": prob.cfg.inner_max_evals,
                                    "xatol": 1e-6, "fatol": 1e-10})
            if res.fun <= best_f:
                best = res.x
            break
        except _NonFinite:
            # keep the best finite point found so far and shrink
            finite = [(v[0], np.frombuffer(k)) for k, v in cache.items()]
            if finite:
                best = min(finite, key=lambda t: t[0])[1].copy()
            steps = steps * 0.5
    xc, _ = prob.clamp(best)
    if xc.tobytes() not in cache:
        try:
            syn = prob.synthesize(xc, spp, seed)
            cache[xc.tobytes()] = (log_loss(prob.obs, syn, delta), l2_loss(prob.obs, syn))
        except _NonFinite:
            cache[xc.tobytes()] = (math.inf, math.inf)
    loss, l2 = cache[xc.tobytes()]
    return xc, loss, l2


def invert(observed: ProfileSet, lights, geometry: SlabScene,
           cfg: InversionConfig | None = None) -> InversionReport:
    """Recover ``(sigma_t, sigma_s, phase)`` from a normalized profile set.

    ``geometry`` supplies thickness, beam, pixel line and bounce limits; its
    optical parameters, sample count and seed are ignored.
    """
    cfg = cfg or InversionConfig()
    lights = [tuple(float(c) for c in l) for l in lights]
    if len(lights) != len(observed.profiles):
        raise ValueError("one light direction per observed profile is required")
    if list(observed.lights) != lights:
        observed = ProfileSet(observed.profiles, lights, observed.scale)
    if observed.stacked.shape[1] != geometry.pixel_line.count:
        raise ValueError("profile length does not match the pixel line")
    prob = _Problem(observed, geometry, cfg)
    rng = np.random.default_rng(cfg.seed)
    x, steps = prob.initial()
    sched = cfg.spp_schedule
    incumbents = [x.copy()]
    trace: list[dict] = []
    stage, stall, stage_iters, stage_best = 0, 0, 0, math.inf
    for it in range(cfg.max_outer_iters):
        delta = float(cfg.delta_pool[rng.integers(len(cfg.delta_pool))])
        spp, seed = sched[stage], _stage_seed(cfg.seed, stage)
        x, loss, l2 = _inner(prob, x, steps, delta, spp, seed)
        incumbents.append(x.copy())
        trace.append({"iter": it, "delta": delta, "spp": spp, "loss": loss, "l2": l2,
                      "params": x.tolist(), "evaluations": prob.evaluations})
        stall = 0 if l2 < stage_best * (1.0 - cfg.min_improvement) else stall + 1
        stage_best = min(stage_best, l2)
        stage_iters += 1
        capped = cfg.stage_max_iters is not None and stage_iters >= cfg.stage_max_iters
        if stall >= cfg.patience or capped:
            if stage == len(sched) - 1:
                break
            stage, stall, stage_iters, stage_best = stage + 1, 0, 0, math.inf
            steps = steps * 0.5

    # final selection: plain error of every distinct incumbent at the top count
    top_spp, top_seed = sched[-1], _stage_seed(cfg.seed, len(sched) - 1)
    seen: dict[bytes, tuple[float, np.ndarray]] = {}
    for cand in incumbents:
        key = cand.tobytes()
        if key in seen:
            continue
        try:
            syn = prob.synthesize(cand, top_spp, top_seed)
            seen[key] = (l2_loss(prob.obs, syn), syn)
        except _NonFinite:
            seen[key] = (math.inf, None)
    best_key = min(seen, key=lambda k: seen[k][0] + prob.prior(np.frombuffer(k)))
    best = np.frombuffer(best_key).copy()
    final_l2, syn = seen[best_key]
    if syn is None:
        raise RuntimeError("no incumbent could be rendered")
    return InversionReport(
        sigma_t_hat=float(best[0]),
        sigma_s_hat=float(best[0] * best[1]),
        phase_hat=prob.model(best),
        params=best.tolist(),
        final_l2_fit=final_l2,
        loss_trace=trace,
        residual_profiles=prob.obs - syn,
        final_spp=top_spp,
        evaluations=prob.evaluations,
        extra={"initial": incumbents[0].tolist(), "candidates": len(seen)},
    )


def ingest_profiles(path, manifest=None) -> ProfileSet:
    """Load a directory of profile files listed in a light manifest.

    Every profile file in the directory must be listed. Recorded
    normalization scales are undone and the joint normalization is
    reapplied, so already normalized sets come back unchanged.
    """
    path = Path(path)
    manifest = Path(manifest) if manifest is not None else path / "lights.json"
    doc = read_manifest(manifest)
    base = path if path.is_dir() else path.parent
    listed = [base / e["file"] for e in doc["profiles"]]
    for f in listed:
        if not f.is_file():
            raise FormatError(f"{f}: listed in manifest but not found")
    if path.is_dir():
        extra = sorted(set(p.resolve() for p in path.glob("*.csv"))
                       - set(f.resolve() for f in listed))
        if extra:
            raise FormatError(f"{extra[0]}: no manifest entry")
    profiles, lights = [], []
    n = None
    for f, e in zip(listed, doc["profiles"]):
        prof, scale = read_profile(f)
        if n is not None and prof.pixels.size != n:
            raise FormatError(f"{f}: profile length differs from the first file")
        n = prof.pixels.size
        d = np.asarray(e["light_dir"], dtype=float)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise FormatError(f"{manifest}: light_dir for {e['file']} is not a unit vector")
        profiles.append(replace(prof, pixels=prof.pixels / scale,
                                variance=prof.variance / scale ** 2))
        lights.append(tuple(d.tolist()))
    return normalize_set(profiles, lights)


def write_profile_set(directory, profiles: ProfileSet, geometry: dict | None = None,
                      stem: str = "profile") -> list[Path]:
    """Write one CSV per light plus ``lights.json``; returns written paths."""
    from .io import write_manifest, write_profile

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out, entries = [], []
    for k, (prof, light) in enumerate(zip(profiles.profiles, profiles.lights)):
        name = f"{stem}_{k:02d}.csv"
        write_profile(directory / name, prof, profiles.scale, light)
        entries.append({"file": name, "light_dir": list(light)})
        out.append(directory / name)
    write_manifest(directory / "lights.json", entries, geometry)
    out.append(directory / "lights.json")
    return out
