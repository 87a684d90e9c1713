"""Command-line driver: ``agestruct <command> CONFIG``.

Exit codes: 0 success, 2 configuration or input error, 3 dynamical failure
(blow-up, failed stability verification), 4 I/O error, 5 numerical
non-convergence.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__, svg
from .equilibrium import (
    EquilibriumError, NoBracketError, find_equilibrium_march, find_equilibrium_newton,
    seed_nontrivial,
)
from .model import Grid, ModelError, ModelSpec, validate_model
from .ratelang import RateExprError, parse
from .spectral import (
    BracketError, ConvergenceError, XDependenceError, closed_form_r0, lambda0_bisect,
    q_lambda, spectral_radius, spectral_report,
)
from .stability import basin_probe, verify_stability
from .transport import BlowUpError, SimOptions, simulate

EXIT_OK, EXIT_CONFIG, EXIT_DYNAMICS, EXIT_IO, EXIT_NUMERICS = 0, 2, 3, 4, 5


class ConfigError(ValueError):
    pass


class DynamicsFailure(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Configuration

DEFAULTS = {
    "model": {
        "diffusion": "0.1",
        "death": "0.5",
        "birth": "0.4",
        "weight": "1",
        "initial": "exp(-a)",
        "a_max": 4.0,
        "z_range": [0.0, 10.0],
        "norm": 2,
    },
    "grid": {
        "n_age": 200,
        "n_space": 32,
        "x_min": 0.0,
        "x_max": 1.0,
    },
    "run": {
        "horizon": 10.0,
        "cap": 1e8,
        "snapshot_stride": 0,
        "substeps": 1,
        "method": "newton",
        "branch": "nontrivial",
        "equilibrium": "",
        "tol": 1e-10,
        "newton_tol": 1e-11,
        "max_steps": 200000,
        "max_iters": 30,
        "bracket": [-1.0, 1.0],
        "lambda_tol": 1e-10,
        "dense_threshold": 4000,
        "growth": True,
        "eps": 1e-3,
        "trials": 5,
        "seed": 0,
        "T": 0.0,
        "rate_tol": 0.15,
        "rate_floor": 0.0,
        "signed": False,
        "basin_eps": [],
    },
    "output": {
        "directory": "out",
        "formats": ["csv", "json"],
    },
}

_CHOICES = {
    ("run", "method"): ("march", "newton"),
    ("run", "branch"): ("trivial", "nontrivial"),
    ("model", "norm"): (1, 2, "inf"),
}


def _check_type(section, key, value, default):
    where = f"[{section}] {key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if isinstance(default, int) and (section, key) != ("model", "norm"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list")
        if key == "formats":
            if any(v not in ("csv", "json", "svg") for v in value):
                raise ConfigError(f"{where}: allowed entries are csv, json, svg")
            return list(value)
        if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value):
            raise ConfigError(f"{where} must be a list of numbers")
        return [float(v) for v in value]
    return value


def resolve_config(raw):
    """Merge ``raw`` into the defaults, rejecting unknown sections and keys."""
    out = copy.deepcopy(DEFAULTS)
    for section, body in raw.items():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key, value in body.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            value = _check_type(section, key, value, DEFAULTS[section][key])
            allowed = _CHOICES.get((section, key))
            if allowed is not None and value not in allowed:
                raise ConfigError(f"[{section}] {key} must be one of {allowed}")
            out[section][key] = value
    for key in ("bracket", "z_range"):
        sec = "run" if key == "bracket" else "model"
        if len(out[sec][key]) != 2:
            raise ConfigError(f"[{sec}] {key} must have two entries")
    return out


def load_config(path):
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return resolve_config(raw)


class Setup:
    """Grid, model and initial field built from a resolved config."""

    def __init__(self, cfg):
        m, g = cfg["model"], cfg["grid"]
        try:
            self.grid = Grid(m["a_max"], g["n_age"], g["n_space"], g["x_min"], g["x_max"])
            norm = np.inf if m["norm"] == "inf" else m["norm"]
            self.spec = ModelSpec(m["diffusion"], m["death"], m["birth"], m["weight"], norm)
            self.initial_expr = parse(m["initial"], ("a", "x"))
        except (RateExprError, ModelError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        bad = validate_model(self.spec, self.grid, tuple(m["z_range"]))
        if bad:
            shown = "; ".join(str(v) for v in bad[:3])
            raise ConfigError(f"invalid model ({len(bad)} violations): {shown}")

    def initial(self):
        g = self.grid
        u = self.initial_expr(0.0, g.ages[:, None], g.x[None, :])
        u = np.array(np.broadcast_to(u, g.shape), dtype=float)
        if np.any(u < 0):
            raise ConfigError("initial density must be non-negative")
        return u


# --------------------------------------------------------------------------
# Output helpers


def fmt(v):
    """Shortest round-trip text of a float."""
    return repr(float(v))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


class Output:
    def __init__(self, cfg, command):
        self.dir = Path(cfg["output"]["directory"])
        self.formats = set(cfg["output"]["formats"])
        self.cfg = cfg
        self.command = command
        self.dir.mkdir(parents=True, exist_ok=True)

    def _write(self, name, text):
        path = self.dir / name
        with open(path, "w", newline="") as fh:
            fh.write(text)
        return path

    def json(self, name, data):
        if "json" in self.formats or name in ("meta.json", "blowup.json"):
            self._write(name, json.dumps(_jsonable(data), indent=2) + "\n")

    def rows(self, name, header, rows):
        if "csv" not in self.formats:
            return
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
        self._write(name, buf.getvalue())

    def field(self, name, values, grid):
        if "csv" in self.formats:
            self._write(name, field_csv(values, grid))

    def svg(self, name, text):
        if "svg" in self.formats:
            self._write(name, text)

    def meta(self):
        self.json("meta.json", {
            "command": self.command,
            "config": self.cfg,
            "versions": {
                "agestruct": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
            },
        })


def field_csv(values, grid):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["a"] + [fmt(x) for x in grid.x])
    for a, row in zip(grid.ages, np.asarray(values)):
        w.writerow([fmt(a)] + [fmt(v) for v in row])
    return buf.getvalue()


def read_csv(path):
    """Header and float rows of a CSV written by this tool."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"{path}: empty file")
    header, body = rows[0], [r for r in rows[1:] if r]
    if not body:
        raise ConfigError(f"{path}: no data rows")
    try:
        data = np.array([[float(v) for v in r] for r in body])
    except ValueError as exc:
        raise ConfigError(f"{path}: malformed number ({exc})") from exc
    if data.ndim != 2 or data.shape[1] != len(header):
        raise ConfigError(f"{path}: ragged rows")
    return header, data


def read_field(path, grid):
    header, data = read_csv(path)
    if header[0] != "a":
        raise ConfigError(f"{path}: not a field file")
    try:
        xs = np.array([float(v) for v in header[1:]])
    except ValueError as exc:
        raise ConfigError(f"{path}: malformed header") from exc
    if data.shape != (grid.n_age + 1, grid.n_space + 1) or not np.allclose(xs, grid.x):
        raise ConfigError(f"{path}: field does not match the configured grid")
    if not np.allclose(data[:, 0], grid.ages):
        raise ConfigError(f"{path}: age nodes do not match the configured grid")
    return data[:, 1:]


# --------------------------------------------------------------------------
# Commands


def cmd_simulate(cfg, out):
    s = Setup(cfg)
    run = cfg["run"]
    opts = SimOptions(run["horizon"], run["cap"], run["snapshot_stride"], True,
                      run["substeps"])
    snaps = []
    traj = simulate(s.initial(), s.spec, s.grid, opts,
                    sink=lambda t, u: snaps.append((t, u)))
    out.rows("norms.csv", ["t", "norm"], zip(traj.times, traj.norms))
    b = traj.boundary
    out.rows("boundary.csv", ["t", "x", "B"],
             ((t, x, v) for t, row in zip(b.times, b.values) for x, v in zip(s.grid.x, row)))
    for k, (t, u) in enumerate(snaps):
        step = int(round(t / s.grid.delta_t))
        out.field(f"field_{step:06d}.csv", u, s.grid)
    out.svg("norms.svg", svg.line_chart(traj.times, traj.norms, "norm of u(t)"))
    print(f"simulated {len(traj.times) - 1} steps to t={fmt(traj.times[-1])}, "
          f"final norm {fmt(traj.norms[-1])}")
    if traj.blowup is not None:
        out.json("blowup.json", {"t": traj.blowup.t, "norm": traj.blowup.norm})
        raise DynamicsFailure(f"blow-up at t={traj.blowup.t:g}")


def _compute_equilibrium(s, cfg):
    run = cfg["run"]
    if run["branch"] == "trivial":
        u0 = s.grid.zeros()
    else:
        u0 = seed_nontrivial(s.spec, s.grid)
    if run["method"] == "march":
        res = find_equilibrium_march(u0, s.spec, s.grid, run["tol"], run["max_steps"],
                                     run["cap"], run["substeps"])
    else:
        loose = find_equilibrium_march(u0, s.spec, s.grid, max(run["tol"], 1e-3),
                                       run["max_steps"], run["cap"], run["substeps"])
        res = find_equilibrium_newton(loose.values, s.spec, s.grid, run["newton_tol"],
                                      run["max_iters"], substeps=run["substeps"])
    if not res.converged:
        raise EquilibriumError(
            f"{res.method} did not converge (residual {res.residual:g} after "
            f"{res.iterations} iterations)"
        )
    return res


def _equilibrium_json(res):
    return {
        "method": res.method,
        "residual": res.residual,
        "iterations": res.iterations,
        "converged": res.converged,
        "phibar": res.phibar,
    }


def _equilibrium_for(s, cfg, out):
    """Equilibrium field from ``run.equilibrium`` (a CSV path) or computed."""
    path = cfg["run"]["equilibrium"]
    if path:
        return read_field(path, s.grid)
    res = _compute_equilibrium(s, cfg)
    out.field("equilibrium.csv", res.values, s.grid)
    out.json("equilibrium.json", _equilibrium_json(res))
    return res


def cmd_equilibrium(cfg, out):
    s = Setup(cfg)
    res = _compute_equilibrium(s, cfg)
    out.field("equilibrium.csv", res.values, s.grid)
    out.json("equilibrium.json", _equilibrium_json(res))
    out.svg("equilibrium.svg", svg.heatmap(res.values, s.grid.ages, s.grid.x, "equilibrium"))
    print(f"equilibrium ({res.method}, {res.iterations} iterations): residual "
          f"{res.residual:.3e}, mean weighted population {float(np.mean(res.phibar)):.6g}")


def cmd_spectrum(cfg, out):
    s = Setup(cfg)
    run = cfg["run"]
    eq = _equilibrium_for(s, cfg, out) if (run["equilibrium"] or run["branch"] == "nontrivial") \
        else s.grid.zeros()
    phi = np.asarray(getattr(eq, "values", eq))
    rep = spectral_report(phi, s.spec, s.grid, dense_threshold=run["dense_threshold"],
                          with_growth=run["growth"])
    out.json("spectrum.json", {
        "spectral_bound": rep.spectral_bound,
        "growth_bound_estimate": rep.growth_bound_estimate,
        "r_Q0": rep.r_Q0,
        "lambda0": rep.lambda0,
        "r_Q_phi0": rep.r_Q_phi0,
        "verdict": rep.verdict,
        "margin": 1e-3 / s.grid.a_max,
    })
    vec = rep.eigenvector
    out.field("eigenvector.csv", np.real(vec), s.grid)
    print(f"spectral bound {rep.spectral_bound:.6g} ({rep.verdict}); "
          f"r(Q0) = {rep.r_Q0:.6g}")


def cmd_r0(cfg, out):
    s = Setup(cfg)
    radius = spectral_radius(q_lambda(0.0, s.spec, s.grid))
    closed = None
    try:
        closed = closed_form_r0(s.spec, s.grid)
    except XDependenceError:
        pass
    if closed is None:
        value = radius
    else:
        value = closed.exact if closed.exact is not None else closed.value
    data = {
        "value": value,
        "closed_form": closed is not None,
        "quadrature": None if closed is None else closed.value,
        "spectral_radius": radius,
        "verdict": "stable" if value < 1 else "unstable",
    }
    out.json("r0.json", data)
    print(f"r(Q0) = {value:.10g}: trivial equilibrium {data['verdict']}")


def cmd_lambda0(cfg, out):
    s = Setup(cfg)
    run = cfg["run"]
    res = lambda0_bisect(s.spec, s.grid, tuple(run["bracket"]), run["lambda_tol"])
    out.json("lambda0.json", {
        "value": res.value, "bracket": list(res.bracket), "iterations": res.iterations,
    })
    print(f"lambda0 = {res.value:.10g}")


def cmd_verify(cfg, out):
    s = Setup(cfg)
    run = cfg["run"]
    if run["equilibrium"] or run["branch"] == "nontrivial":
        eq = _equilibrium_for(s, cfg, out)
    else:
        eq = s.grid.zeros()
    phi = np.asarray(getattr(eq, "values", eq))
    T = run["T"] if run["T"] > 0 else 5 * s.grid.a_max
    rep = verify_stability(phi, s.spec, s.grid, run["eps"], run["trials"], T, run["seed"],
                           rate_tol=run["rate_tol"],
                           rate_floor=run["rate_floor"] or None, signed=run["signed"],
                           cap=run["cap"], substeps=run["substeps"])
    basin = None
    if run["basin_eps"]:
        b = basin_probe(phi, s.spec, s.grid, run["basin_eps"], T, run["seed"], run["cap"])
        basin = {"largest": b.largest, "eps": b.eps, "decayed": b.decayed, "ratios": b.ratios}
    trials = []
    for tr in rep.trials:
        trials.append({
            "index": tr.index, "omega_fit": tr.omega, "r2": tr.r2, "decayed": tr.decayed,
            "monotone": tr.monotone, "blowup": tr.blowup,
        })
        out.rows(f"decay_{tr.index}.csv", ["t", "deviation"], zip(tr.times, tr.deviations))
        if len(tr.times) > 1:
            out.svg(f"decay_{tr.index}.svg",
                    svg.line_chart(tr.times, tr.deviations, f"trial {tr.index}",
                                   ylabel="deviation"))
    out.json("stability.json", {
        "eps": rep.eps, "trials": trials, "s0": rep.s0, "rate_tol": rep.rate_tol,
        "rate_floor": rep.rate_floor, "verdict": rep.verdict, "growth": rep.growth,
        "T": T, "seed": run["seed"], "basin": basin,
    })
    rates = ", ".join("-" if t.omega is None else f"{t.omega:.4g}" for t in rep.trials)
    print(f"s0 = {rep.s0:.6g}; fitted rates [{rates}]; verdict {rep.verdict}")
    if not rep.passed:
        raise DynamicsFailure("stability verification failed"
                              + (" (perturbations grow)" if rep.growth else ""))


def cmd_plot(path, kind=None, target=None):
    header, data = read_csv(path)
    if kind is None:
        kind = "field" if header[0] == "a" else "norms"
    if kind == "field":
        if header[0] != "a" or data.shape[1] < 2:
            raise ConfigError(f"{path}: not a field file")
        try:
            xs = [float(v) for v in header[1:]]
        except ValueError as exc:
            raise ConfigError(f"{path}: malformed header") from exc
        text = svg.heatmap(data[:, 1:], data[:, 0], xs, Path(path).stem)
    elif kind == "norms":
        if data.shape[1] != 2:
            raise ConfigError(f"{path}: expected two columns (t, value)")
        try:
            text = svg.line_chart(data[:, 0], data[:, 1], Path(path).stem, header[0], header[1])
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    else:
        raise ConfigError(f"unknown plot kind {kind!r}")
    target = Path(target) if target else Path(path).with_suffix(".svg")
    with open(target, "w") as fh:
        fh.write(text)
    print(f"wrote {target}")


HELP = {
    "simulate": "run the nonlinear simulator",
    "equilibrium": "compute an equilibrium (march or Newton)",
    "spectrum": "spectral diagnostics of an equilibrium",
    "r0": "net reproduction number of the trivial equilibrium",
    "lambda0": "threshold rate with r(Q_lambda) = 1",
    "verify": "perturbation trials against the spectral prediction",
}

COMMANDS = {
    "simulate": cmd_simulate,
    "equilibrium": cmd_equilibrium,
    "spectrum": cmd_spectrum,
    "r0": cmd_r0,
    "lambda0": cmd_lambda0,
    "verify": cmd_verify,
}


def build_parser():
    p = argparse.ArgumentParser(prog="agestruct",
                                description="Age-structured diffusive population models.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        c = sub.add_parser(name, help=HELP[name])
        c.add_argument("config", help="TOML configuration file")
        c.add_argument("-o", "--out", help="output directory (overrides [output] directory)")
    c = sub.add_parser("plot", help="render a CSV written by this tool as SVG")
    c.add_argument("input")
    c.add_argument("--kind", choices=("norms", "field"))
    c.add_argument("-o", "--out", help="target SVG file")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        if args.command == "plot":
            cmd_plot(args.input, args.kind, args.out)
            return EXIT_OK
        cfg = load_config(args.config)
        if args.out:
            cfg["output"]["directory"] = args.out
        out = Output(cfg, args.command)
        out.meta()
        with np.errstate(over="ignore"):
            COMMANDS[args.command](cfg, out)
        return EXIT_OK
    except (ConfigError, RateExprError, ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DynamicsFailure, BlowUpError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return EXIT_DYNAMICS
    except (ConvergenceError, BracketError, NoBracketError, EquilibriumError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICS
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
