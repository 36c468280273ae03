"""Plain-text file formats.

Tabulated phase functions are CSV with header ``mu,p`` (densities per
steradian, ``mu`` ascending). Profiles are CSV with header
``pixel_index,x_mm,intensity,variance``. Both carry ``# key: value``
comment lines ahead of the header. Floats are written with ``repr`` so a
write/read cycle is lossless.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .phase_models import TabulatedPhase
from .slab_renderer import Profile, SourcePattern

PROFILE_HEADER = ("pixel_index", "x_mm", "intensity", "variance")
PHASE_HEADER = ("mu", "p")
PATTERN_HEADER = ("u_mm", "v_mm", "weight")


class FormatError(ValueError):
    """Malformed input file."""


def _fmt(x: float) -> str:
    return repr(float(x))


def _split_comments(path: Path) -> tuple[dict, list[tuple[int, str]]]:
    meta, rows = {}, []
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                key, sep, val = s[1:].partition(":")
                if sep:
                    meta[key.strip()] = val.strip()
                continue
            rows.append((lineno, s))
    return meta, rows


def _parse_rows(path: Path, rows, header) -> list[tuple[int, list[float]]]:
    if not rows:
        raise FormatError(f"{path}: empty file")
    lineno, first = rows[0]
    cols = tuple(c.strip() for c in first.split(","))
    if cols != header:
        raise FormatError(f"{path}:{lineno}: expected header {','.join(header)}")
    out = []
    for lineno, text in rows[1:]:
        fields = next(csv.reader([text]))
        if len(fields) != len(header):
            raise FormatError(f"{path}:{lineno}: expected {len(header)} columns")
        try:
            vals = [float(f) for f in fields]
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        out.append((lineno, vals))
    return out


def write_tabulated(path, phase: TabulatedPhase) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        for key, val in phase.metadata.items():
            fh.write(f"# {key}: {val}\n")
        fh.write(",".join(PHASE_HEADER) + "\n")
        for m, p in zip(phase.mu_grid, phase.values):
            fh.write(f"{_fmt(m)},{_fmt(p)}\n")


def read_tabulated(path, normalize_check: float = 1e-6) -> TabulatedPhase:
    """Read a ``mu,p`` table; flags it normalized when it integrates to one."""
    path = Path(path)
    meta, rows = _split_comments(path)
    data = _parse_rows(path, rows, PHASE_HEADER)
    arr = np.array([v for _, v in data], dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise FormatError(f"{path}: need at least two rows")
    for lineno, (m, p) in data:
        if not (math.isfinite(m) and math.isfinite(p)) or p < 0:
            raise FormatError(f"{path}:{lineno}: densities must be finite and nonnegative")
    tab = TabulatedPhase(arr[:, 0], arr[:, 1], meta)
    if abs(tab.solid_angle_integral() - 1.0) <= normalize_check:
        tab = TabulatedPhase(tab.mu_grid, tab.values, meta, normalized=True)
    return tab


def write_profile(path, profile: Profile, scale: float = 1.0, light_dir=None) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# scene_hash: {profile.scene_hash}\n")
        fh.write(f"# normalization_scale: {_fmt(scale)}\n")
        if light_dir is not None:
            fh.write("# light_dir: " + " ".join(_fmt(c) for c in light_dir) + "\n")
        fh.write("# units: x_mm in mm, intensity in 1/(mm^2 sr) before normalization\n")
        fh.write(",".join(PROFILE_HEADER) + "\n")
        for k, (x, v, s) in enumerate(zip(profile.x_mm, profile.pixels, profile.variance)):
            fh.write(f"{k},{_fmt(x)},{_fmt(v)},{_fmt(s)}\n")


def read_profile(path) -> tuple[Profile, float]:
    """Read one profile file; returns the profile and its recorded scale.

    Rejects non-finite or negative intensities and reports the line number.
    """
    path = Path(path)
    meta, rows = _split_comments(path)
    data = _parse_rows(path, rows, PROFILE_HEADER)
    if not data:
        raise FormatError(f"{path}: no pixel rows")
    for k, (lineno, (idx, x, val, var)) in enumerate(data):
        if idx != k:
            raise FormatError(f"{path}:{lineno}: pixel_index out of sequence")
        if not all(math.isfinite(c) for c in (x, val, var)):
            raise FormatError(f"{path}:{lineno}: non-finite value")
        if val < 0:
            raise FormatError(f"{path}:{lineno}: negative intensity")
        if var < 0:
            raise FormatError(f"{path}:{lineno}: negative variance")
    arr = np.array([v for _, v in data], dtype=float)
    scale = float(meta.get("normalization_scale", 1.0))
    if not scale > 0:
        raise FormatError(f"{path}: normalization_scale must be > 0")
    prof = Profile(arr[:, 2], arr[:, 3], meta.get("scene_hash", ""), arr[:, 1])
    return prof, scale


def write_manifest(path, entries: list[dict], geometry: dict | None = None) -> None:
    """Write a light manifest: ``entries`` hold ``file`` and ``light_dir``."""
    doc = {"profiles": entries}
    if geometry is not None:
        doc["geometry"] = geometry
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_manifest(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"{path}: manifest not found")
    doc = json.loads(path.read_text())
    entries = doc.get("profiles")
    if not isinstance(entries, list) or not entries:
        raise FormatError(f"{path}: manifest needs a nonempty 'profiles' list")
    for i, e in enumerate(entries):
        if not isinstance(e, dict) or "file" not in e or "light_dir" not in e:
            raise FormatError(f"{path}: profiles[{i}] needs 'file' and 'light_dir'")
        d = e["light_dir"]
        if len(d) != 3 or not all(isinstance(c, (int, float)) for c in d):
            raise FormatError(f"{path}: profiles[{i}].light_dir must be three numbers")
    return doc


def read_source_pattern(path) -> SourcePattern:
    """Read a beam cross-section given as ``u_mm,v_mm,weight`` rows on a grid."""
    path = Path(path)
    _, rows = _split_comments(path)
    data = _parse_rows(path, rows, PATTERN_HEADER)
    if not data:
        raise FormatError(f"{path}: no rows")
    arr = np.array([v for _, v in data], dtype=float)
    u, v = np.unique(arr[:, 0]), np.unique(arr[:, 1])
    if u.size * v.size != arr.shape[0]:
        raise FormatError(f"{path}: points do not form a regular grid")
    w = np.zeros((u.size, v.size))
    w[np.searchsorted(u, arr[:, 0]), np.searchsorted(v, arr[:, 1])] = arr[:, 2]
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise FormatError(f"{path}: weights must be finite and nonnegative")
    return SourcePattern(u, v, w)
