"""Command-line experiment driver.

``gpdeform {fit,extrapolate,uncertainty,gpgs} [--config PATH] [--seed INT] [--out DIR] [--quiet]``

Artifacts are written to a staging directory that is renamed to ``--out``
only on success, so failed runs leave nothing behind. Exit codes: 0 success,
2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import platform
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ExperimentConfig, load_config
from .errors import ConfigError, DegenerateRotationError, NumericalError
from .evaluate import summarize
from .experiments import extrapolation_experiment, fit_experiment, gpgs_experiment, uncertainty_experiment
from .inducing import write_inducing_csv
from .splat import Camera, render, write_pgm16, write_ppm

log = logging.getLogger("gpdeform")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
TIMING_FILE = "timing.log"  # wall clock; excluded from the manifest


# -- artifact helpers ---------------------------------------------------------


def _clean(v):
    """JSON-safe copy: non-finite floats become strings, numpy scalars become Python."""
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(root: Path, command: str, cfg: ExperimentConfig) -> None:
    files = {}
    for p in sorted(root.rglob("*")):
        rel = p.relative_to(root).as_posix()
        if p.is_file() and rel not in ("manifest.json", TIMING_FILE):
            files[rel] = sha256(p)
    write_json(root / "manifest.json", {
        "command": command,
        "config_sha256": cfg.digest(),
        "seeds": cfg.seeds,
        "versions": {"gpdeform": __version__, "numpy": np.__version__, "torch": torch.__version__,
                     "python": platform.python_version()},
        "files": files,
    })


# -- commands -----------------------------------------------------------------


def cmd_fit(cfg: ExperimentConfig, out: Path) -> dict:
    rows, finals = [], {v: [] for v in cfg.inducing.variants}
    for seed in cfg.seeds:
        for variant, (gp, rep, init) in fit_experiment(cfg, seed).items():
            tag = f"{variant}_seed{seed}"
            write_csv(out / f"elbo_{tag}.csv", ["iteration", "elbo", "learning_rate"],
                      zip(range(len(rep.elbo_trace)), rep.elbo_trace, rep.learning_rates))
            write_inducing_csv(out / f"inducing_{tag}.csv", init.Z)
            write_json(out / f"model_{tag}.json", gp.to_dict())
            rows.append([seed, variant, rep.initial_elbo, rep.final_elbo])
            finals[variant].append(rep.final_elbo)
    write_csv(out / "fit.csv", ["seed", "variant", "initial_elbo", "final_elbo"], rows)
    summary = {"final_elbo": {v: summarize(x) for v, x in finals.items()}}
    write_json(out / "summary.json", summary)
    return summary


def cmd_extrapolate(cfg: ExperimentConfig, out: Path) -> dict:
    fields = ["scene", "periodic", "horizon", "method", "seed", "psnr", "mse", "psnr_image"]
    rows = []
    for seed in cfg.seeds:
        for kind in cfg.extrapolate.scenes:
            for h in cfg.extrapolate.horizons:
                rows += extrapolation_experiment(cfg, seed, kind, h)
    write_csv(out / "extrapolation.csv", fields, ([r[f] for f in fields] for r in rows))
    summary = {}
    for kind in cfg.extrapolate.scenes:
        for h in cfg.extrapolate.horizons:
            for m in ("gp", "linear"):
                sel = [r for r in rows if r["scene"] == kind and r["horizon"] == h and r["method"] == m]
                summary[f"{kind}/h{h}/{m}"] = {
                    "psnr": summarize([r["psnr"] for r in sel]),
                    "psnr_image_unmasked": summarize([r["psnr_image"] for r in sel]),
                }
    write_json(out / "summary.json", summary)
    return summary


def cmd_uncertainty(cfg: ExperimentConfig, out: Path, timing: dict) -> dict:
    (out / "maps").mkdir()
    (out / "curves").mkdir()
    rows, by = [], {}
    for seed in cfg.seeds:
        res = uncertainty_experiment(cfg, seed)
        timing[f"seed{seed}"] = res["report"].timing
        for (unit, method), c in res["curves"].items():
            rows.append([seed, unit, method, c.ause, int(c.uninformative)])
            by.setdefault(f"{unit}/{method}", []).append(c.ause)
            write_csv(out / "curves" / f"{unit}_{method}_seed{seed}.csv", ["fraction", "oracle", "predicted"],
                      zip(c.fractions, c.oracle, c.predicted))
        for f, m in res["maps"].items():
            write_pgm16(out / "maps" / f"uncertainty_seed{seed}_frame{f}.pgm", m)
        write_json(out / f"report_seed{seed}.json", res["report"].to_dict())
    write_csv(out / "uncertainty.csv", ["seed", "unit", "method", "ause", "uninformative"], rows)
    summary = {"ause": {k: summarize(v) for k, v in by.items()}}
    write_json(out / "summary.json", summary)
    return summary


def cmd_gpgs(cfg: ExperimentConfig, out: Path, timing: dict) -> dict:
    (out / "frames").mkdir()
    lam = cfg.gpgs.lambda_gp
    rows, mse = [], {lam: [], 0.0: []}
    size = cfg.gpgs.image_size
    cam = Camera(width=size, height=size, scale=2.8 / size)
    for seed in cfg.seeds:
        res = gpgs_experiment(cfg, seed)
        scene = res["scene"]
        for value, rep in res["runs"].items():
            tag = f"lambda{value:g}_seed{seed}"
            timing[tag] = rep.timing
            mse[value].append(res["hidden_mse"][value])
            write_json(out / f"report_{tag}.json", rep.to_dict())
            write_csv(out / f"losses_{tag}.csv", ["iteration", "recon", "guidance", "total", "tau", "active"],
                      zip(range(len(rep.recon_trace)), rep.recon_trace, rep.guidance_trace, rep.total_trace,
                          rep.tau_trace, rep.active_trace))
        rows.append([seed, res["hidden_mse"][0.0], res["hidden_mse"][lam],
                     int(res["identical_to_guidance_free"])])
        # trajectory series for the hidden primitives
        guided, zero = res["runs"][lam], res["runs"][0.0]
        hidden = scene.metadata["hidden"]
        X = np.column_stack([np.repeat(scene.primitives.positions[hidden], scene.frames, axis=0),
                             np.tile(scene.times, len(hidden))])
        gp_mean = (guided.gp.predict(X)[0].reshape(len(hidden), scene.frames, -1)
                   if guided.gp is not None else np.full((len(hidden), scene.frames, 9), np.nan))
        series = []
        for i, k in enumerate(hidden):
            for f in range(scene.frames):
                vis = bool(scene.visible[k, f])
                for d in range(9):
                    series.append([k, f, d, int(vis), scene.deformations[k, f, d],
                                   scene.observations[k, f, d] if vis else "", zero.y[k, f, d],
                                   guided.y[k, f, d], gp_mean[i, f, d]])
        write_csv(out / f"trajectories_seed{seed}.csv",
                  ["primitive", "frame", "dim", "visible", "ground_truth", "observed", "lambda_0",
                   f"lambda_{lam:g}", "gp_mean"], series)
        occ = scene.spec.occlusion
        frame = (occ.start + occ.end) // 2 if occ else scene.frames // 2
        for name, y in (("ground_truth", scene.deformations), ("lambda_0", zero.y), (f"lambda_{lam:g}", guided.y)):
            write_ppm(out / "frames" / f"{name}_seed{seed}_frame{frame}.ppm",
                      render(scene.primitives, y[:, frame], cam).color)
    write_csv(out / "gpgs.csv", ["seed", "hidden_mse_lambda_0", f"hidden_mse_lambda_{lam:g}",
                                  "lambda_0_matches_guidance_free"], rows)
    summary = {"hidden_mse": {f"lambda_{k:g}": summarize(v) for k, v in mse.items()},
               "tau_end": cfg.gpgs.tau_end}
    write_json(out / "summary.json", summary)
    return summary


COMMANDS = {
    "fit": lambda cfg, out, timing: cmd_fit(cfg, out),
    "extrapolate": lambda cfg, out, timing: cmd_extrapolate(cfg, out),
    "uncertainty": cmd_uncertainty,
    "gpgs": cmd_gpgs,
}


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpdeform", description="GP deformation-field experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("fit", "offline GP fit with each inducing init"),
                            ("extrapolate", "held-out-frame extrapolation, GP vs linear"),
                            ("uncertainty", "GP-GS run, uncertainty maps and AUSE"),
                            ("gpgs", "paired runs with and without GP guidance")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="YAML experiment config (defaults if omitted)")
        p.add_argument("--seed", type=int, help="run a single seed, overriding the config")
        p.add_argument("--out", type=Path, default=None, help="output directory (default runs/<command>)")
        p.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    return parser


def _prepare_out(out: Path) -> None:
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise ConfigError(f"output directory {out} exists and is not empty")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    out = args.out or Path("runs") / args.command
    staging = None
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        _prepare_out(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        staging = Path(tempfile.mkdtemp(prefix=f".{out.name}.staging-", dir=out.parent))
        write_json(staging / "config.json", cfg.model_dump(mode="json"))
        timing: dict = {}
        t0 = time.perf_counter()
        log.info("running %s with seeds %s", args.command, cfg.seeds)
        summary = COMMANDS[args.command](cfg, staging, timing)
        timing["total_seconds"] = time.perf_counter() - t0
        with open(staging / TIMING_FILE, "w") as fh:
            fh.write(json.dumps(_clean(timing), indent=2, sort_keys=True) + "\n")
        write_manifest(staging, args.command, cfg)
        if out.exists():
            out.rmdir()
        os.replace(staging, out)
        staging = None
        if not args.quiet:
            print(json.dumps(_clean(summary), indent=2, sort_keys=True))
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, DegenerateRotationError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    finally:
        if staging is not None:
            shutil.rmtree(staging, ignore_errors=True)


if __name__ == "__main__":
    sys.exit(main())
