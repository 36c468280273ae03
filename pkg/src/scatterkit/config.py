"""Structured-text (TOML) configuration for scenes and phase models.

A scene file mirrors :class:`SlabScene` with explicit units::

    thickness_mm = 1.0
    sigma_t_per_mm = 2.0
    albedo = 0.9                # or sigma_s_per_mm
    beam_radius_mm = 0.2
    spp = 1024
    seed = 0
    lights = "default"          # or light = {angle_deg = 10, side = "front"}
                                # or light_dir = [0, 0, 1]
    [pixel_line]
    count = 257
    pitch_mm = 0.05
    offset_mm = 0.0
    [phase]
    family = "exp3"
    coeffs = [2.0, 0.5, -0.3]

Errors name the offending entry as a dotted path.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .fitting import Family
from .phase_models import (
    HenyeyGreenstein,
    Isotropic,
    Rayleigh,
    TwoTermHG,
    make_exponential,
    normalize,
    raw_polynomial_from_shape,
    RawPolynomial,
)
from .slab_renderer import PixelLine, SlabScene, default_lights, light_from_angle


class ConfigFileError(ValueError):
    """Invalid configuration; ``field`` is a dotted path to the entry."""

    def __init__(self, message: str, field: str = ""):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


def _number(table: dict, key: str, path: str, default=None, kind=float):
    if key not in table:
        if default is None:
            raise ConfigFileError("is required", f"{path}{key}")
        return default
    val = table[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigFileError("must be a number", f"{path}{key}")
    if kind is int:
        if isinstance(val, float) and not val.is_integer():
            raise ConfigFileError("must be an integer", f"{path}{key}")
        return int(val)
    if not math.isfinite(val):
        raise ConfigFileError("must be finite", f"{path}{key}")
    return float(val)


def phase_from_table(table: dict, path: str = "phase.", base: Path | None = None):
    """Build a normalized phase model from a ``[phase]`` table."""
    if not isinstance(table, dict) or "family" not in table:
        raise ConfigFileError("is required", f"{path}family")
    name = str(table["family"]).lower()
    try:
        if name == "isotropic":
            return Isotropic()
        if name == "rayleigh":
            return Rayleigh()
        if name == "hg":
            return HenyeyGreenstein(_number(table, "g", path))
        if name == "tthg":
            return TwoTermHG(_number(table, "g1", path), _number(table, "g2", path),
                             _number(table, "w", path))
        if name == "vmf":
            return make_exponential([_number(table, "kappa", path)])
        if name == "tabulated":
            from .io import read_tabulated
            if "file" not in table:
                raise ConfigFileError("is required", f"{path}file")
            f = Path(table["file"])
            if base is not None and not f.is_absolute():
                f = base / f
            return normalize(read_tabulated(f))
        fam = Family.parse(name)
    except ConfigFileError:
        raise
    except ValueError as exc:
        raise ConfigFileError(str(exc), f"{path}family") from None
    coeffs = table.get("coeffs")
    if not isinstance(coeffs, list) or not all(isinstance(c, (int, float)) for c in coeffs):
        raise ConfigFileError("must be a list of numbers", f"{path}coeffs")
    if fam.kind == "exp":
        if len(coeffs) != fam.degree:
            raise ConfigFileError(f"needs {fam.degree} values", f"{path}coeffs")
        return make_exponential(coeffs, fam.basis)
    if fam.kind == "poly":
        # full a_0..a_N when given, else shape coefficients a_1..a_N
        if len(coeffs) == fam.degree + 1:
            return normalize(RawPolynomial(tuple(float(c) for c in coeffs)))
        if len(coeffs) == fam.degree:
            return raw_polynomial_from_shape(coeffs)
        raise ConfigFileError(f"needs {fam.degree} or {fam.degree + 1} values", f"{path}coeffs")
    return fam.build(coeffs)


def lights_from_table(doc: dict) -> list[tuple] | None:
    """Light list when the file describes a set, else ``None``."""
    if "lights" not in doc:
        return None
    entry = doc["lights"]
    if entry == "default":
        return default_lights()
    if not isinstance(entry, list) or not entry:
        raise ConfigFileError("must be \"default\" or a nonempty list", "lights")
    out = []
    for i, item in enumerate(entry):
        out.append(_light(item, f"lights[{i}]."))
    return out


def _light(item, path: str) -> tuple:
    if isinstance(item, list):
        d = np.asarray(item, dtype=float)
        if d.shape != (3,):
            raise ConfigFileError("must have three components", path.rstrip("."))
        return tuple((d / np.linalg.norm(d)).tolist())
    if isinstance(item, dict):
        side = item.get("side")
        if side not in ("front", "back"):
            raise ConfigFileError("must be \"front\" or \"back\"", f"{path}side")
        return light_from_angle(_number(item, "angle_deg", path), side)
    raise ConfigFileError("must be a vector or {angle_deg, side}", path.rstrip("."))


def scene_from_dict(doc: dict, base: Path | None = None) -> SlabScene:
    """Build a :class:`SlabScene` from a parsed scene document."""
    if "phase" not in doc:
        raise ConfigFileError("is required", "phase")
    phase = phase_from_table(doc["phase"], base=base)
    sigma_t = _number(doc, "sigma_t_per_mm", "", 2.0)
    if "albedo" in doc and "sigma_s_per_mm" in doc:
        raise ConfigFileError("give either albedo or sigma_s_per_mm", "albedo")
    if "sigma_s_per_mm" in doc:
        sigma_s = _number(doc, "sigma_s_per_mm", "")
    else:
        albedo = _number(doc, "albedo", "", 0.9)
        if not 0 <= albedo <= 1:
            raise ConfigFileError("must lie in [0, 1]", "albedo")
        sigma_s = albedo * sigma_t
    line = doc.get("pixel_line", {})
    if not isinstance(line, dict):
        raise ConfigFileError("must be a table", "pixel_line")
    pixel_line = PixelLine(_number(line, "count", "pixel_line.", 257, int),
                           _number(line, "pitch_mm", "pixel_line.", 0.05),
                           _number(line, "offset_mm", "pixel_line.", 0.0))
    if "light" in doc:
        light = _light(doc["light"], "light.")
    elif "light_dir" in doc:
        light = _light(doc["light_dir"], "light_dir.")
    else:
        light = (0.0, 0.0, 1.0)
    pattern = None
    if "source_pattern" in doc:
        from .io import read_source_pattern
        f = Path(doc["source_pattern"])
        if base is not None and not f.is_absolute():
            f = base / f
        pattern = read_source_pattern(f)
    return SlabScene(
        phase=phase,
        light_dir=light,
        thickness=_number(doc, "thickness_mm", "", 1.0),
        sigma_t=sigma_t,
        sigma_s=sigma_s,
        beam_radius=_number(doc, "beam_radius_mm", "", 0.2),
        pixel_line=pixel_line,
        spp=_number(doc, "spp", "", 1024, int),
        seed=_number(doc, "seed", "", 0, int),
        max_bounces=_number(doc, "max_bounces", "", 10_000, int),
        source_pattern=pattern,
    )


def load_toml(path) -> dict:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigFileError(f"{path}: {exc}") from None


def load_scene(path) -> tuple[SlabScene, list[tuple] | None]:
    """Read a scene file; returns the scene and the light list, if any."""
    path = Path(path)
    doc = load_toml(path)
    return scene_from_dict(doc, base=path.parent), lights_from_table(doc)


def geometry_to_dict(scene: SlabScene) -> dict:
    """Geometry fields of a scene in the scene-file vocabulary."""
    return {
        "thickness_mm": scene.thickness,
        "beam_radius_mm": scene.beam_radius,
        "max_bounces": scene.max_bounces,
        "pixel_line": {"count": scene.pixel_line.count, "pitch_mm": scene.pixel_line.pitch,
                       "offset_mm": scene.pixel_line.offset},
    }


def geometry_from_dict(doc: dict) -> SlabScene:
    """Geometry-only scene (isotropic placeholder phase) from a dict."""
    table = dict(doc)
    table.setdefault("phase", {"family": "isotropic"})
    return scene_from_dict(table)

