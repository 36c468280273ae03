"""Forward Monte Carlo rendering of a beam-lit homogeneous slab.

Geometry
--------
The slab fills ``0 <= z <= thickness`` (mm). An orthographic camera above
the slab looks down the ``-z`` axis, so light reaching it travels along
``+z`` and leaves through the front face ``z = thickness``. The camera
records one line of square pixels along ``x`` centred on ``y = 0``.

A collimated top-hat beam of radius ``beam_radius`` travels along
``light_dir``. Its axis crosses the slab mid-plane at the origin. Front
lighting enters through ``z = thickness`` (``light_dir[2] < 0``); back
lighting enters through ``z = 0`` (``light_dir[2] > 0``). Light directions
must lie in the ``x-z`` plane. Boundaries are index-matched.

Each packet is traced as a pencil entering at the footprint origin, with
free flights at rate ``sigma_t`` and survival weighting by the albedo. At
every collision a next-event estimate toward the camera is spread over the
pixels by integrating the beam footprint analytically. Unscattered light
reaches the camera only for back lighting along ``+z`` and is added in
closed form.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .phase_models import (
    ExponentialPhase,
    PhaseModel,
    TabulatedPhase,
    eval_phase,
    sampling_table,
)

RR_START = 30
ALIGN_TOL = 1e-9


class SceneError(ValueError):
    """Invalid scene configuration; ``field`` names the offending entry."""

    def __init__(self, message: str, field: str = ""):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


@dataclass(frozen=True)
class PixelLine:
    count: int = 257
    pitch: float = 0.05
    offset: float = 0.0

    @property
    def centers(self) -> np.ndarray:
        return self.offset + (np.arange(self.count) - 0.5 * (self.count - 1)) * self.pitch

    @property
    def first_edge(self) -> float:
        return self.offset - 0.5 * self.count * self.pitch


@dataclass(frozen=True, eq=False)
class SourcePattern:
    """Measured beam cross-section on a regular grid (mm).

    ``weights[i, j]`` is the relative power through the cell centred at
    ``(u[i], v[j])``, where ``u`` runs across the beam in the plane of
    incidence and ``v`` along ``y``.
    """

    u: np.ndarray
    v: np.ndarray
    weights: np.ndarray

    def flattened(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (len(self.u), len(self.v)) or np.any(w < 0) or not w.sum() > 0:
            raise SceneError("pattern weights must be a nonnegative (len(u), len(v)) grid",
                             "source_pattern")
        uu, vv = np.meshgrid(self.u, self.v, indexing="ij")
        cdf = np.concatenate(([0.0], np.cumsum(w.ravel())))
        cdf /= cdf[-1]
        du = float(self.u[1] - self.u[0]) if len(self.u) > 1 else 0.0
        dv = float(self.v[1] - self.v[0]) if len(self.v) > 1 else 0.0
        return cdf, uu.ravel().astype(float), vv.ravel().astype(float), du, dv


@dataclass(frozen=True, eq=False)
class SlabScene:
    phase: PhaseModel
    light_dir: tuple = (0.0, 0.0, 1.0)
    thickness: float = 1.0
    sigma_t: float = 2.0
    sigma_s: float = 1.8
    beam_radius: float = 0.2
    pixel_line: PixelLine = PixelLine()
    spp: int = 1024
    seed: int = 0
    max_bounces: int = 10_000
    source_pattern: SourcePattern | None = None

    def __post_init__(self):
        d = np.asarray(self.light_dir, dtype=float)
        if d.shape != (3,) or not np.all(np.isfinite(d)):
            raise SceneError("must be a 3-vector", "light_dir")
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise SceneError("must be a unit vector", "light_dir")
        d = d / np.linalg.norm(d)
        if abs(d[1]) > 1e-12:
            raise SceneError("must lie in the x-z plane", "light_dir")
        if abs(d[2]) < 1e-6:
            raise SceneError("grazing incidence is not supported", "light_dir")
        object.__setattr__(self, "light_dir", (float(d[0]), 0.0, float(d[2])))
        if not self.thickness > 0:
            raise SceneError("must be > 0", "thickness")
        if not self.sigma_t >= 0 or not math.isfinite(self.sigma_t):
            raise SceneError("must be >= 0", "sigma_t")
        if not 0 <= self.sigma_s:
            raise SceneError("must be >= 0", "sigma_s")
        if self.sigma_s > self.sigma_t * (1 + 1e-12):
            raise SceneError("sigma_s exceeds sigma_t", "sigma_s")
        if not self.beam_radius > 0:
            raise SceneError("must be > 0", "beam_radius")
        if self.pixel_line.count < 1 or not self.pixel_line.pitch > 0:
            raise SceneError("needs count >= 1 and pitch > 0", "pixel_line")
        if self.spp < 1:
            raise SceneError("must be >= 1", "spp")
        if self.max_bounces < 1:
            raise SceneError("must be >= 1", "max_bounces")

    @property
    def albedo(self) -> float:
        return self.sigma_s / self.sigma_t if self.sigma_t > 0 else 0.0

    @property
    def front_lit(self) -> bool:
        return self.light_dir[2] < 0

    @property
    def n_packets(self) -> int:
        return self.spp * self.pixel_line.count

    def with_params(self, sigma_t: float, albedo: float, phase: PhaseModel | None = None,
                    **kwargs) -> "SlabScene":
        return replace(self, sigma_t=sigma_t, sigma_s=albedo * sigma_t,
                       phase=self.phase if phase is None else phase, **kwargs)

    def describe(self) -> dict:
        """JSON-friendly description (used for hashing and manifests)."""
        out = {
            "thickness_mm": self.thickness,
            "sigma_t_per_mm": self.sigma_t,
            "sigma_s_per_mm": self.sigma_s,
            "light_dir": list(self.light_dir),
            "beam_radius_mm": self.beam_radius,
            "pixel_line": {"count": self.pixel_line.count, "pitch_mm": self.pixel_line.pitch,
                           "offset_mm": self.pixel_line.offset},
            "spp": self.spp,
            "seed": self.seed,
            "max_bounces": self.max_bounces,
            "phase": phase_digest(self.phase),
        }
        if self.source_pattern is not None:
            h = hashlib.sha256()
            for arr in (self.source_pattern.u, self.source_pattern.v,
                        self.source_pattern.weights):
                h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
            out["source_pattern"] = h.hexdigest()
        return out

    def digest(self) -> str:
        blob = json.dumps(self.describe(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def phase_digest(model: PhaseModel) -> dict:
    if isinstance(model, TabulatedPhase):
        h = hashlib.sha256(np.ascontiguousarray(model.mu_grid).tobytes()
                           + np.ascontiguousarray(model.values).tobytes())
        return {"kind": "tabulated", "sha256": h.hexdigest()}
    if isinstance(model, ExponentialPhase):
        return {"kind": "exponential", "coeffs": list(model.coeffs), "basis": model.basis}
    from .fitting import model_to_json
    return model_to_json(model)


@dataclass
class Profile:
    pixels: np.ndarray
    variance: np.ndarray
    scene_hash: str
    x_mm: np.ndarray
    direct: np.ndarray | None = None
    tally: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (np.all(np.isfinite(self.pixels)) and np.all(np.isfinite(self.variance))):
            raise ValueError("profile values must be finite")

    @property
    def std_error(self) -> np.ndarray:
        return np.sqrt(self.variance)


@dataclass
class ProfileSet:
    profiles: list[Profile]
    lights: list[tuple]
    scale: float = 1.0

    @property
    def stacked(self) -> np.ndarray:
        return np.stack([p.pixels for p in self.profiles])

    @property
    def mean(self) -> float:
        return float(np.mean(self.stacked))


def light_from_angle(angle_deg: float, side: str) -> tuple:
    """Unit propagation direction for a beam tilted ``angle_deg`` in x-z."""
    a = math.radians(angle_deg)
    if side == "front":
        return (math.sin(a), 0.0, -math.cos(a))
    if side == "back":
        return (math.sin(a), 0.0, math.cos(a))
    raise ValueError("side must be 'front' or 'back'")


FRONT_ANGLES = (10.0, 20.0, 30.0, 40.0, 50.0)
BACK_ANGLES = (0.0, 10.0, 20.0, 30.0, 40.0)


def default_lights() -> list[tuple]:
    """Five front and five back beam directions."""
    return ([light_from_angle(a, "front") for a in FRONT_ANGLES]
            + [light_from_angle(a, "back") for a in BACK_ANGLES])


def _footprint(scene: SlabScene):
    dx, _, dz = scene.light_dir
    z_entry = scene.thickness if dz < 0 else 0.0
    xc = dx / dz * (z_entry - 0.5 * scene.thickness)
    return z_entry, xc, scene.beam_radius / abs(dz), scene.beam_radius


def _phase_arrays(phase: PhaseModel):
    table = sampling_table(phase)
    dens = eval_phase(phase, table.mu)
    return table.mu, table.cdf, np.asarray(dens, dtype=float)


def direct_term(scene: SlabScene) -> np.ndarray:
    """Unscattered beam radiance per pixel (nonzero only for +z beams)."""
    line = scene.pixel_line
    out = np.zeros(line.count)
    dx, _, dz = scene.light_dir
    if dz < 1.0 - ALIGN_TOL:
        return out
    trans = math.exp(-scene.sigma_t * scene.thickness)
    if scene.source_pattern is not None:
        cdf, u, v, du, dv = scene.source_pattern.flattened()
        mass = np.diff(cdf)
        half = 0.5 * line.pitch
        for k, xk in enumerate(line.centers):
            ox = np.clip(np.minimum(u + du / 2, xk + half) - np.maximum(u - du / 2, xk - half), 0, None)
            oy = np.clip(np.minimum(v + dv / 2, half) - np.maximum(v - dv / 2, -half), 0, None)
            cell = du * dv if du * dv > 0 else 1.0
            out[k] = trans * float(np.sum(mass * ox * oy / cell)) / line.pitch ** 2
        return out
    _, xc, ax, ay = _footprint(scene)
    half = 0.5 * line.pitch
    for k, xk in enumerate(line.centers):
        frac = _kernels.disk_rect((xk - half - xc) / ax, (xk + half - xc) / ax,
                                  -half / ay, half / ay) / math.pi
        out[k] = trans * frac / line.pitch ** 2
    return out


def render(scene: SlabScene, threads: int | None = None) -> Profile:
    """Render the pixel-line radiance profile of ``scene``.

    Values are radiance per unit beam power (1/(mm^2 sr)). The estimate is
    bit-for-bit deterministic for a given scene, including ``seed``.
    """
    line = scene.pixel_line
    direct = direct_term(scene)
    n = scene.n_packets
    if threads is not None:
        import numba
        numba.set_num_threads(max(1, min(threads, numba.config.NUMBA_NUM_THREADS)))
    if scene.sigma_t > 0 and scene.sigma_s > 0:
        mu, cdf, dens = _phase_arrays(scene.phase)
    else:
        mu, cdf, dens = np.array([-1.0, 1.0]), np.array([0.0, 1.0]), np.zeros(2)
    z0, xc, ax, ay = _footprint(scene)
    if scene.source_pattern is not None:
        p_cdf, p_u, p_v, p_du, p_dv = scene.source_pattern.flattened()
    else:
        p_cdf = p_u = p_v = np.zeros(0)
        p_du = p_dv = 0.0
    d = scene.light_dir
    sums, sqs, tally = _kernels.trace(
        np.uint64(scene.seed & 0xFFFFFFFFFFFFFFFF), n, float(scene.thickness),
        float(scene.sigma_t), float(scene.albedo), d[0], d[1], d[2], z0,
        mu, cdf, dens, line.first_edge, float(line.pitch), line.count, xc, ax, ay,
        p_cdf, p_u, p_v, p_du, p_dv, RR_START, int(scene.max_bounces))
    s = _pairwise_sum(sums)
    ss = _pairwise_sum(sqs)
    t = _pairwise_sum(tally)
    mean = s / n
    var = np.maximum(ss / n - mean * mean, 0.0) / max(n - 1, 1)
    names = ("reflected", "transmitted", "absorbed", "roulette", "truncated", "collisions")
    tallies = {k: float(v) / n for k, v in zip(names, t)}
    return Profile(mean + direct, var, scene.digest(), line.centers, direct, tallies)


def _pairwise_sum(rows: np.ndarray) -> np.ndarray:
    # fixed-order tree reduction over chunk rows
    rows = np.asarray(rows)
    while rows.shape[0] > 1:
        if rows.shape[0] % 2:
            rows = np.concatenate([rows, np.zeros((1,) + rows.shape[1:])])
        rows = rows[0::2] + rows[1::2]
    return rows[0] if rows.shape[0] else np.zeros(rows.shape[1:])


def light_seed(seed: int, k: int) -> int:
    """Deterministic per-light render seed."""
    return int(_kernels.mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
                              ^ np.uint64((k + 1) * 0x9E3779B97F4A7C15 & 0xFFFFFFFFFFFFFFFF)))


def normalize_set(profiles: list[Profile], lights, scale_hint: float | None = None) -> ProfileSet:
    """Scale all profiles jointly so the mean over every pixel is one."""
    raw = np.stack([p.pixels for p in profiles])
    m = float(np.mean(raw))
    if not m > 0:
        raise ValueError("no signal")
    scale = 1.0 / m
    out = [Profile(p.pixels * scale, p.variance * scale * scale, p.scene_hash, p.x_mm,
                   None if p.direct is None else p.direct * scale, p.tally) for p in profiles]
    return ProfileSet(out, [tuple(l) for l in lights], scale)


def render_set(scene_base: SlabScene, lights, threads: int | None = None,
               normalize: bool = True) -> ProfileSet:
    """Render one profile per light and apply the joint set normalization."""
    lights = [tuple(float(c) for c in l) for l in lights]
    if not lights:
        raise ValueError("at least one light is required")
    profiles = [render(replace(scene_base, light_dir=l, seed=light_seed(scene_base.seed, k)),
                       threads=threads)
                for k, l in enumerate(lights)]
    if not normalize:
        return ProfileSet(profiles, lights, 1.0)
    return normalize_set(profiles, lights)
