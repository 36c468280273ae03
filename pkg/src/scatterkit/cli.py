"""Command-line entry point ``scatterkit``.

Every artifact-producing command writes one ``*.manifest.json`` next to its
outputs with the command line, a digest of the resolved configuration, the
seed, the tool version, timestamps and the list of files written.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    ConfigFileError,
    geometry_from_dict,
    geometry_to_dict,
    load_scene,
    phase_from_table,
)
from .fitting import BENCHMARK_FAMILIES, FitProblem, benchmark, fit, write_failures_json, write_matrix_csv
from .inverse import InversionConfig, ingest_profiles, invert, write_profile_set
from .io import FormatError, read_tabulated, write_profile, write_tabulated
from .mie import MieConfig, MieError, mie_mono, mie_poly
from .phase_models import PhaseFunctionError, eval_phase, normalize
from .slab_renderer import SceneError, render, render_set


class _Run:
    """Collects outputs and writes the run manifest."""

    def __init__(self, argv: list[str], seed: int | None, config: dict):
        self.argv = list(argv)
        self.seed = seed
        self.config = config
        self.started = datetime.now(timezone.utc).isoformat()
        self.outputs: list[str] = []

    def add(self, *paths) -> None:
        self.outputs.extend(str(p) for p in paths)

    def finish(self, anchor: Path) -> Path:
        blob = json.dumps(self.config, sort_keys=True, default=str).encode()
        path = anchor.with_name(anchor.stem + ".manifest.json") if anchor.suffix else \
            anchor / "run.manifest.json"
        doc = {
            "command": ["scatterkit", *self.argv],
            "config": self.config,
            "config_digest": hashlib.sha256(blob).hexdigest(),
            "seed": self.seed,
            "version": __version__,
            "started": self.started,
            "finished": datetime.now(timezone.utc).isoformat(),
            "outputs": self.outputs,
        }
        path.write_text(json.dumps(doc, indent=2, default=str) + "\n")
        return path


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    return [int(v) for v in _floats(text)]


# -- subcommands -------------------------------------------------------------

def cmd_mie(args, argv) -> int:
    n_p = complex(args.n_particle.replace("i", "j")) if args.n_particle else None
    kw = {"diameter_mean": args.diameter, "diameter_sd": args.sd, "wavelength": args.wavelength,
          "n_medium": args.n_medium, "n_angles": args.n_angles, "n_quad_sizes": args.n_quad}
    if n_p is not None:
        kw["n_particle"] = n_p.real if n_p.imag == 0 else n_p
    cfg = MieConfig.calibrated(**kw) if args.calibrated and n_p is None else MieConfig(**kw)
    res = mie_poly(cfg) if cfg.diameter_sd > 0 else mie_mono(cfg.diameter_mean, cfg)
    out = Path(args.out)
    write_tabulated(out, res.phase)
    side = out.with_suffix(".json")
    side.write_text(json.dumps({"g": res.g, "Qsca": res.Qsca, "Qext": res.Qext,
                                "config": cfg.to_json()}, indent=2) + "\n")
    run = _Run(argv, None, cfg.to_json())
    run.add(out, side)
    run.finish(out)
    print(f"g={res.g:.6g} Qsca={res.Qsca:.6g} Qext={res.Qext:.6g}")
    return 0


def cmd_fit(args, argv) -> int:
    target = read_tabulated(args.target)
    report = fit(FitProblem(target, args.family, restarts=args.restarts, seed=args.seed))
    out = Path(args.out)
    doc = report.to_json()
    doc["target"] = str(args.target)
    out.write_text(json.dumps(doc, indent=2) + "\n")
    run = _Run(argv, args.seed, {"target": str(args.target), "family": args.family,
                                 "restarts": args.restarts})
    run.add(out)
    run.finish(out)
    status = report.failure_reason or f"sad={report.sad:.6g}"
    print(f"{report.family}: {status}")
    return 0


def _dataset(directory: Path):
    files = sorted(directory.glob("*.csv"))
    if not files:
        raise FormatError(f"{directory}: no phase tables (*.csv)")
    tabs = [read_tabulated(f) for f in files]
    labels = [t.metadata.get("diameter_um", f.stem) for t, f in zip(tabs, files)]
    return labels, tabs


def cmd_benchmark(args, argv) -> int:
    labels, tabs = _dataset(Path(args.dataset))
    fams = args.families.split(",") if args.families else list(BENCHMARK_FAMILIES)
    reports = benchmark(tabs, fams, restarts=args.restarts, seed=args.seed, workers=args.threads or 1)
    out = Path(args.out)
    write_matrix_csv(out, labels, fams, reports)
    fail = out.with_name(out.stem + ".failures.json")
    write_failures_json(fail, labels, fams, reports)
    run = _Run(argv, args.seed, {"dataset": str(args.dataset), "families": fams,
                                 "restarts": args.restarts})
    run.add(out, fail)
    run.finish(out)
    return 0


def cmd_render(args, argv) -> int:
    scene, lights = load_scene(args.scene)
    if args.seed is not None:
        scene = replace(scene, seed=args.seed)
    if args.spp is not None:
        scene = replace(scene, spp=args.spp)
    out = Path(args.out)
    run = _Run(argv, scene.seed, scene.describe())
    if lights is None:
        prof = render(scene, threads=args.threads)
        write_profile(out, prof, 1.0, scene.light_dir)
        run.add(out)
    else:
        pset = render_set(scene, lights, threads=args.threads)
        run.add(*write_profile_set(out, pset, geometry_to_dict(scene)))
    run.finish(out)
    return 0


def _inversion_config(args) -> InversionConfig:
    kw = {"phase_family": args.family, "seed": args.seed, "threads": args.threads}
    if args.spp_schedule:
        kw["spp_schedule"] = tuple(args.spp_schedule)
    if args.delta_pool:
        kw["delta_pool"] = tuple(args.delta_pool)
    if args.max_outer_iters:
        kw["max_outer_iters"] = args.max_outer_iters
    if args.stage_max_iters:
        kw["stage_max_iters"] = args.stage_max_iters
    if args.inner_evals:
        kw["inner_max_evals"] = args.inner_evals
    return InversionConfig(**kw)


def cmd_invert(args, argv) -> int:
    observed = ingest_profiles(args.profiles, args.manifest)
    if args.scene:
        geometry, _ = load_scene(args.scene)
    else:
        manifest = Path(args.manifest) if args.manifest else Path(args.profiles) / "lights.json"
        geo = json.loads(manifest.read_text()).get("geometry")
        if geo is None:
            raise ConfigFileError("geometry missing: pass --scene or add it to the manifest",
                                  "geometry")
        geometry = geometry_from_dict(geo)
    cfg = _inversion_config(args)
    report = invert(observed, observed.lights, geometry, cfg)
    out = Path(args.out)
    doc = report.to_json()
    doc["config"] = cfg.to_json()
    out.write_text(json.dumps(doc, indent=2) + "\n")
    run = _Run(argv, args.seed, {"inversion": cfg.to_json(), "geometry": geometry_to_dict(geometry),
                                 "profiles": str(args.profiles)})
    run.add(out)
    run.finish(out)
    print(f"sigma_t={report.sigma_t_hat:.6g} albedo={report.albedo_hat:.6g} "
          f"l2={report.final_l2_fit:.6g}")
    return 0


def cmd_eval_phase(args, argv) -> int:
    table: dict = {"family": args.family}
    for key in ("g", "g1", "g2", "w", "kappa"):
        if getattr(args, key) is not None:
            table[key] = getattr(args, key)
    if args.coeffs is not None:
        table["coeffs"] = args.coeffs
    if args.table is not None:
        table["file"] = args.table
    model = phase_from_table(table, path="")
    model = normalize(model)
    for mu in args.mu:
        print(f"{float(eval_phase(model, mu)):.{args.digits}g}")
    return 0


def _write_rows(path: Path, header, rows, comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def cmd_repro(args, argv) -> int:
    from . import repro

    out = Path(args.out)
    run = _Run(argv, args.seed, {"experiment": args.experiment,
                                 "dispersion": args.dispersion, "restarts": args.restarts})
    if args.experiment == "table1":
        rows = repro.asymmetry_table()
        _write_rows(out, ["diameter_um", "g_mono", "g_poly", "reference_mono", "reference_poly"],
                    rows, "asymmetry g per diameter; calibrated particle index")
        run.add(out)
    elif args.experiment == "fig2":
        report, rows = repro.rayleigh_fit(seed=args.seed, restarts=args.restarts)
        _write_rows(out, ["mu", "rayleigh", "exp2_fit", "vmf_kappa1", "vmf_kappa5"], rows,
                    f"exp2 fit coefficients {report.params}; densities per steradian")
        run.add(out)
    elif args.experiment == "fig3":
        fams = args.families.split(",") if args.families else list(BENCHMARK_FAMILIES)
        labels, reports = repro.sad_matrix(args.dispersion, families=fams,
                                           restarts=args.restarts, seed=args.seed,
                                           workers=args.threads or 1)
        write_matrix_csv(out, labels, fams, reports)
        fail = out.with_name(out.stem + ".failures.json")
        write_failures_json(fail, labels, fams, reports)
        run.add(out, fail)
    elif args.experiment == "recovery":
        scene, lights, observed = repro.recovery_data(threads=args.threads)
        cfg = _inversion_config(args)
        run.config["inversion"] = cfg.to_json()
        report = invert(observed, lights, scene, cfg)
        doc = report.to_json()
        doc["truth"] = {"sigma_t": scene.sigma_t, "albedo": scene.sigma_s / scene.sigma_t,
                        "coeffs": list(scene.phase.coeffs)}
        out.write_text(json.dumps(doc, indent=2) + "\n")
        run.add(out)
    run.finish(out)
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    def common(seed_default=0):
        # fresh actions per subcommand so their defaults stay independent
        c = argparse.ArgumentParser(add_help=False)
        c.add_argument("--seed", type=int, default=seed_default, help="seed for all randomness")
        c.add_argument("--threads", type=int, default=None,
                       help="cap on parallel workers; outputs do not depend on it")
        return c

    inv = argparse.ArgumentParser(add_help=False)
    inv.add_argument("--family", default="exp3", help="exp1..exp9, hg or tthg")
    inv.add_argument("--spp-schedule", type=_ints, default=None, help="e.g. 128,512,2048,8192")
    inv.add_argument("--delta-pool", type=_floats, default=None, help="e.g. 1,0.3,0.1,0.03")
    inv.add_argument("--max-outer-iters", type=int, default=None)
    inv.add_argument("--stage-max-iters", type=int, default=None)
    inv.add_argument("--inner-evals", type=int, default=None)

    p = argparse.ArgumentParser(prog="scatterkit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"scatterkit {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("mie", parents=[common()], help="Mie phase function table")
    s.add_argument("--diameter", type=float, required=True, help="(mean) diameter, micrometers")
    s.add_argument("--sd", type=float, default=0.0, help="diameter std. dev., micrometers")
    s.add_argument("--wavelength", type=float, default=0.6, help="vacuum wavelength, micrometers")
    s.add_argument("--n-particle", default=None, help="particle index, e.g. 1.59 or 1.5+0.01j")
    s.add_argument("--n-medium", type=float, default=1.33)
    s.add_argument("--n-angles", type=int, default=1801)
    s.add_argument("--n-quad", type=int, default=21, help="size-distribution nodes")
    s.add_argument("--calibrated", action="store_true",
                   help="use the calibrated particle index (ignored with --n-particle)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mie)

    s = sub.add_parser("fit", parents=[common()], help="fit a phase family to a table")
    s.add_argument("--target", required=True)
    s.add_argument("--family", default="exp3")
    s.add_argument("--restarts", type=int, default=16)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("benchmark", parents=[common()], help="SAD matrix over a directory of tables")
    s.add_argument("--dataset", required=True)
    s.add_argument("--families", default=None, help="comma-separated, default: nine families")
    s.add_argument("--restarts", type=int, default=16)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("render", parents=[common(None)], help="render a scene file")
    s.add_argument("--scene", required=True)
    s.add_argument("--spp", type=int, default=None)
    s.add_argument("--out", required=True,
                   help="profile CSV, or a directory when the scene lists lights")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("invert", parents=[common(), inv], help="estimate slab parameters")
    s.add_argument("--profiles", required=True, help="directory of profile CSVs")
    s.add_argument("--manifest", default=None, help="light manifest (default: lights.json)")
    s.add_argument("--scene", default=None, help="geometry scene file (else from manifest)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_invert)

    s = sub.add_parser("eval-phase", help="evaluate a phase function (per steradian)")
    s.add_argument("--family", required=True,
                   help="isotropic, rayleigh, hg, tthg, vmf, expN, polyN or tabulated")
    s.add_argument("--mu", type=float, nargs="+", required=True)
    s.add_argument("--g", type=float)
    s.add_argument("--g1", type=float)
    s.add_argument("--g2", type=float)
    s.add_argument("--w", type=float)
    s.add_argument("--kappa", type=float)
    s.add_argument("--coeffs", type=_floats)
    s.add_argument("--table", default=None)
    s.add_argument("--digits", type=int, default=6)
    s.set_defaults(func=cmd_eval_phase)

    s = sub.add_parser("repro", parents=[common(), inv], help="reference experiment data")
    s.add_argument("experiment", choices=["table1", "fig2", "fig3", "recovery"])
    s.add_argument("--dispersion", choices=["mono", "poly"], default="poly")
    s.add_argument("--families", default=None)
    s.add_argument("--restarts", type=int, default=16)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_repro)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, argv)
    except (ConfigFileError, SceneError, FormatError, MieError, PhaseFunctionError,
            ValueError, OSError, KeyError) as exc:
        field = getattr(exc, "field", "")
        prefix = "error" if not field else f"error [{field}]"
        msg = str(exc) if not isinstance(exc, KeyError) else f"missing key {exc}"
        print(f"{prefix}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
