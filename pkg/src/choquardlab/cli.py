"""Command line entry point: ``choquardlab <command> --config FILE --out DIR``.

Exit codes: 0 success, 1 numeric failure, 2 config or validation failure.
Every JSON and CSV output carries the resolved config and the rng seed, and
contains no timestamps, so a rerun reproduces it byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import os
import re
import sys
import warnings
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Optional

import tomli

from .fieldio import write_field
from .functional import ChoquardParams, ParameterError
from .grid import GridError, GridSpec, make_grid
from .hls import EXACT, SUBCRITICAL, HlsCase, decay_envelope, dilated_gaussian, disjoint_decay, hls_ratio
from .limit import (
    LimitSystemSpec,
    SplitExponents,
    lambda_zero,
    optimal_split,
    sigma_at_optimal,
    verify_split_inequality,
)
from .semiclassical import BumpSpec, CutoffSpec, PotentialSpec, epsilon_sweep, evaluate_trends
from .solver import SolverConfig, SolverError, initial_guess, solve_ground_state

log = logging.getLogger("choquardlab")

EXIT_OK, EXIT_NUMERIC, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config handling


class _Config:
    """Parsed config plus its source text, for line-anchored messages."""

    def __init__(self, path: Path):
        self.path = path
        try:
            self.text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from exc
        try:
            if path.suffix == ".json":
                self.data = json.loads(self.text)
            else:
                self.data = tomli.loads(self.text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(self.data, dict):
            raise ConfigError(f"{path}:1: top level must be a table")

    def line_of(self, section: str, key: Optional[str] = None) -> Optional[int]:
        lines = self.text.splitlines()
        start = 0
        pat = re.compile(rf"^\s*(\[\s*{re.escape(section)}\s*\]|\"{re.escape(section)}\"\s*:)")
        for i, ln in enumerate(lines):
            if pat.search(ln):
                start = i
                break
        else:
            return None
        if key is None:
            return start + 1
        kpat = re.compile(rf"^\s*\"?{re.escape(key)}\"?\s*[=:]")
        for i in range(start, len(lines)):
            if kpat.search(lines[i]):
                return i + 1
        return start + 1

    def error(self, section: str, key: Optional[str], msg: str) -> ConfigError:
        line = self.line_of(section, key)
        where = f"{self.path}:{line}" if line else str(self.path)
        name = f"{section}.{key}" if key else section
        return ConfigError(f"{where}: {name}: {msg}")

    def section(self, name: str, required: bool = True) -> dict:
        sec = self.data.get(name)
        if sec is None:
            if required:
                raise ConfigError(f"{self.path}: missing [{name}] block")
            return {}
        if not isinstance(sec, dict):
            raise self.error(name, None, "must be a table")
        return sec

    def get(self, section: str, key: str, kind, default: Any = ..., sec: Optional[dict] = None):
        sec = self.section(section, required=default is ...) if sec is None else sec
        if key not in sec:
            if default is ...:
                raise self.error(section, key, "missing required key")
            return default
        val = sec[key]
        try:
            return _coerce(val, kind)
        except (TypeError, ValueError) as exc:
            raise self.error(section, key, str(exc)) from exc


def _coerce(val, kind):
    if kind is int:
        if isinstance(val, bool) or not isinstance(val, int):
            raise TypeError(f"expected an integer, got {val!r}")
        return val
    if kind is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise TypeError(f"expected a number, got {val!r}")
        return float(val)
    if kind == "floats":
        if not isinstance(val, list) or not val:
            raise TypeError(f"expected a non-empty list of numbers, got {val!r}")
        return [_coerce(v, float) for v in val]
    if kind is str:
        if not isinstance(val, str):
            raise TypeError(f"expected a string, got {val!r}")
        return val
    raise AssertionError(kind)


def _grid(cfg: _Config, name: str = "grid") -> tuple[GridSpec, dict]:
    resolved = {
        "dim": cfg.get(name, "dim", int, 3),
        "points": cfg.get(name, "points", int),
        "half_width": cfg.get(name, "half_width", float),
    }
    try:
        return make_grid(resolved["dim"], resolved["points"], resolved["half_width"]), resolved
    except GridError as exc:
        raise cfg.error(name, None, str(exc)) from exc


def _params(cfg: _Config, dim: int) -> tuple[ChoquardParams, dict]:
    resolved = {
        "mu": cfg.get("params", "mu", float),
        "p": cfg.get("params", "p", float),
        "b": cfg.get("params", "b", float, 1.0),
        "a": cfg.get("params", "a", float, 1.0),
    }
    try:
        return ChoquardParams(dim, **resolved), resolved
    except ParameterError as exc:
        raise cfg.error("params", "p" if "p =" in str(exc) else None, str(exc)) from exc


SOLVER_KEYS = {
    "time_step": float,
    "max_iterations": int,
    "energy_tol": float,
    "residual_tol": float,
    "fiber_tol": float,
    "anderson_depth": int,
}


def _solver(cfg: _Config, overrides: Optional[dict] = None) -> tuple[SolverConfig, dict]:
    defaults = SolverConfig()
    resolved = {k: cfg.get("solver", k, kind, getattr(defaults, k)) for k, kind in SOLVER_KEYS.items()}
    resolved.update(overrides or {})
    try:
        return SolverConfig(trace_every=1, **resolved), resolved
    except ValueError as exc:
        raise cfg.error("solver", None, str(exc)) from exc


# ---------------------------------------------------------------------------
# output helpers


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=True) + "\n"


def _write(out: Path, name: str, text: str):
    with open(out / name, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _csv(header: list, rows: list, preamble: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["# config", json.dumps(preamble, separators=(",", ":"))])
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return " ".join(_fmt(x) for x in v)
    return v


@contextmanager
def _locked(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise ConfigError(f"{out}: output directory is locked by another run ({lock})") from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# commands


def cmd_ground_state(cfg: _Config, args) -> int:
    grid, g_res = _grid(cfg)
    params, p_res = _params(cfg, grid.dim)
    over = {"residual_tol": args.tolerance} if args.tolerance is not None else {}
    scfg, s_res = _solver(cfg, over)
    width = cfg.get("seed_state", "width", float, grid.half_width / 8)
    resolved = {"command": "ground-state", "seed": args.seed, "grid": g_res, "params": p_res,
                "solver": s_res, "seed_state": {"width": width}}
    try:
        seed = initial_guess(grid, params, width=width)
    except GridError as exc:
        raise cfg.error("seed_state", "width", str(exc)) from exc
    try:
        res = solve_ground_state(seed, params, scfg)
    except SolverError as exc:
        log.error("solver failed: %s", exc)
        _write(args.out, "result.json", _dumps({"config": resolved, "error": str(exc)}))
        return EXIT_NUMERIC
    _write(args.out, "result.json", _dumps({"config": resolved, "result": res.summary()}))
    trace = [[t.iteration, t.energy, t.residual, t.mass_drift] for t in res.trace]
    _write(args.out, "trace.csv", _csv(["iteration", "energy", "residual", "mass_drift"], trace, resolved))
    if args.dump_fields:
        write_field(args.out / "ground_state.field", res.field, {"config": resolved, "result": res.summary()})
    return EXIT_OK if res.converged else EXIT_NUMERIC


def _scaling_rows(grid, params, scfg, factors, width):
    base = solve_ground_state(initial_guess(grid, params, width=width), params, scfg)
    ex = SplitExponents.of(params)
    rows = [("baseline", 1.0, base.energy, 1.0, 1.0, base.converged, base.residual)]
    for kind, expo in (("mass", ex.beta_mass), ("coupling", ex.beta_coupling)):
        for s in factors:
            if s == 1.0:
                rows.append((kind, 1.0, base.energy, 1.0, 1.0, base.converged, base.residual))
                continue
            var = params.replace(a=params.a * s) if kind == "mass" else params.replace(b=params.b * s)
            r = solve_ground_state(initial_guess(grid, var, width=width), var, scfg)
            rows.append((kind, s, r.energy, r.energy / base.energy, s**expo, r.converged, r.residual))
    return rows


def cmd_scaling_verify(cfg: _Config, args) -> int:
    grid, g_res = _grid(cfg)
    params, p_res = _params(cfg, grid.dim)
    scfg, s_res = _solver(cfg)
    factors = cfg.get("scaling", "factors", "floats", [0.5, 2.0])
    tol = args.tolerance if args.tolerance is not None else cfg.get("scaling", "tolerance", float, 0.01)
    width = cfg.get("seed_state", "width", float, grid.half_width / 8)
    resolved = {"command": "scaling-verify", "seed": args.seed, "grid": g_res, "params": p_res,
                "solver": s_res, "scaling": {"factors": factors, "tolerance": tol},
                "seed_state": {"width": width}}
    try:
        rows = _scaling_rows(grid, params, scfg, factors, width)
    except SolverError as exc:
        log.error("solver failed: %s", exc)
        return EXIT_NUMERIC
    table = []
    ok = True
    for kind, s, e, ratio, expected, conv, resid in rows:
        rel = abs(ratio - expected) / abs(expected)
        # the verdict is on the ratio; convergence and residual are reported alongside
        passed = bool(rel <= tol)
        ok &= passed
        table.append([kind, s, e, ratio, expected, rel, resid, conv, passed])
    header = ["kind", "s", "energy", "ratio", "expected", "rel_error", "residual", "converged", "pass"]
    _write(args.out, "scaling.csv", _csv(header, table, resolved))
    _write(args.out, "scaling.json", _dumps({"config": resolved, "rows": [dict(zip(header, r)) for r in table],
                                             "pass": ok}))
    return EXIT_OK if ok else EXIT_NUMERIC


def _limit_cases(cfg: _Config) -> list[dict]:
    cases = cfg.data.get("cases")
    if not isinstance(cases, list) or not cases:
        raise ConfigError(f"{cfg.path}: missing [[cases]] list")
    out = []
    for i, c in enumerate(cases):
        if not isinstance(c, dict):
            raise cfg.error("cases", None, f"entry {i} must be a table")
        try:
            if "heights" in c:
                b = [h * h for h in _coerce(c["heights"], "floats")]
            else:
                b = _coerce(c["couplings"], "floats")
            out.append({
                "couplings": b,
                "p": _coerce(c["p"], float),
                "mu": _coerce(c.get("mu", 1.0), float),
                "dim": _coerce(c.get("dim", 3), int),
                "samples": _coerce(c.get("samples", 50), int),
            })
        except KeyError as exc:
            raise cfg.error("cases", None, f"entry {i}: missing key {exc.args[0]!r}") from exc
        except (TypeError, ValueError) as exc:
            raise cfg.error("cases", None, f"entry {i}: {exc}") from exc
    return out


def cmd_limit_table(cfg: _Config, args) -> int:
    cases = _limit_cases(cfg)
    resolved = {"command": "limit-table", "seed": args.seed, "cases": cases}
    rows = []
    ok = True
    for i, c in enumerate(cases):
        try:
            spec = LimitSystemSpec(tuple(c["couplings"]), c["p"], c["mu"], c["dim"])
            rep = verify_split_inequality(spec, c["samples"], seed=args.seed + i)
        except (ParameterError, ValueError) as exc:
            raise cfg.error("cases", None, f"entry {i}: {exc}") from exc
        ok &= rep.violations == 0
        rows.append([spec.k, list(spec.couplings), spec.p, spec.mu, list(optimal_split(spec).s),
                     sigma_at_optimal(spec, 1.0), lambda_zero(spec, 1.0), rep.samples, rep.evaluated,
                     rep.violations, rep.worst_margin])
    header = ["k", "b", "p", "mu", "s0", "sigma_over_E1", "lambda0_over_E1", "samples", "evaluated",
              "violations", "worst_margin"]
    _write(args.out, "limit_table.csv", _csv(header, rows, resolved))
    _write(args.out, "limit_table.json", _dumps({"config": resolved, "rows": [dict(zip(header, r)) for r in rows],
                                                 "pass": ok}))
    return EXIT_OK if ok else EXIT_NUMERIC


def _potential(cfg: _Config) -> tuple[PotentialSpec, dict]:
    sec = cfg.section("potential")
    bumps = sec.get("bumps")
    if not isinstance(bumps, list) or not bumps:
        raise cfg.error("potential", "bumps", "expected a non-empty list of bumps")
    try:
        spec = PotentialSpec(
            cfg.get("potential", "background", float),
            tuple(
                BumpSpec(
                    tuple(_coerce(b["center"], "floats")),
                    _coerce(b["height"], float),
                    _coerce(b["width"], float),
                    _coerce(b["domain_radius"], float),
                )
                for b in bumps
            ),
        )
    except KeyError as exc:
        raise cfg.error("potential", "bumps", f"missing key {exc.args[0]!r}") from exc
    except (TypeError, ValueError) as exc:
        raise cfg.error("potential", "bumps", str(exc)) from exc
    return spec, spec.to_dict()


def cmd_semiclassical_sweep(cfg: _Config, args) -> int:
    grid, g_res = _grid(cfg)
    params, p_res = _params(cfg, grid.dim)
    scfg, s_res = _solver(cfg)
    pot, pot_res = _potential(cfg)
    if len(pot.bumps[0].center) != grid.dim:
        raise cfg.error("potential", "bumps", "bump centers do not match the grid dimension")
    eps_list = cfg.get("sweep", "eps_list", "floats")
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])) or min(eps_list) <= 0:
        raise cfg.error("sweep", "eps_list", "must be positive and strictly decreasing")
    tau = cfg.get("sweep", "tau", float)
    try:
        cutoff = CutoffSpec(tau)
        cutoff.check(pot)
    except ParameterError as exc:
        raise cfg.error("sweep", "tau", str(exc)) from exc
    if not params.subcritical:
        raise cfg.error("params", "p", "the semiclassical sweep supports subcritical p only")
    width = cfg.get("seed_state", "width", float, grid.half_width / 8)
    resolved = {"command": "semiclassical-sweep", "seed": args.seed, "grid": g_res, "params": p_res,
                "solver": s_res, "potential": pot_res, "sweep": {"eps_list": eps_list, "tau": tau},
                "seed_state": {"width": width}}
    unit = params.replace(b=1.0, a=1.0)
    # monotone descent: Anderson mixing is for the multi-bump saddle only
    base = solve_ground_state(initial_guess(grid, unit, width=width), unit, dataclasses.replace(scfg, anderson_depth=0))
    if not base.converged:
        log.error("unit ground state did not converge (residual %.2e)", base.residual)
        return EXIT_NUMERIC
    reports = epsilon_sweep(pot, params, scfg, eps_list, grid, cutoff, unit_state=base.field,
                            base_energy=base.energy)
    trends = evaluate_trends(reports, pot, params)
    for rep in reports:
        _write(args.out, f"report_eps_{rep.epsilon!r}.json", _dumps({"config": resolved, "report": rep.to_dict()}))
    rows = [rep.csv_row() for rep in reports]
    _write(args.out, "sweep.csv", _csv(list(reports[0].CSV_FIELDS), rows, resolved))
    _write(args.out, "summary.json", _dumps({"config": resolved, "base_energy": base.energy, "trends": trends,
                                             "pass": all(trends.values())}))
    if args.dump_fields:
        write_field(args.out / "unit_ground_state.field", base.field, {"config": resolved})
        for rep in reports:
            if rep.state is not None:
                write_field(args.out / f"state_eps_{rep.epsilon!r}.field", rep.state,
                            {"config": resolved, "report": rep.to_dict()})
    return EXIT_OK if all(trends.values()) else EXIT_NUMERIC


def cmd_hls_audit(cfg: _Config, args) -> int:
    grid, g_res = _grid(cfg)
    tol = args.tolerance if args.tolerance is not None else cfg.get("exact", "tolerance", float, 0.01)
    ex = {
        "q": cfg.get("exact", "q", float),
        "r": cfg.get("exact", "r", float),
        "mu": cfg.get("exact", "mu", float),
        "dilations": cfg.get("exact", "dilations", "floats", [0.5, 1.0, 2.0]),
        "tolerance": tol,
    }
    sub = {
        "q": cfg.get("disjoint", "q", float),
        "r": cfg.get("disjoint", "r", float),
        "mu": cfg.get("disjoint", "mu", float),
        "separations": cfg.get("disjoint", "separations", "floats", [4.0, 8.0, 16.0]),
        "width": cfg.get("disjoint", "width", float, 1.0),
    }
    sub_grid, sub_g_res = _grid(cfg, "disjoint_grid") if "disjoint_grid" in cfg.data else (grid, g_res)
    resolved = {"command": "hls-audit", "seed": args.seed, "grid": g_res, "disjoint_grid": sub_g_res,
                "exact": ex, "disjoint": sub}
    try:
        ecase = HlsCase(ex["q"], ex["r"], ex["mu"], grid.dim, EXACT)
    except ValueError as exc:
        raise cfg.error("exact", None, str(exc)) from exc
    try:
        scase = HlsCase(sub["q"], sub["r"], sub["mu"], grid.dim, SUBCRITICAL)
    except ValueError as exc:
        raise cfg.error("disjoint", None, str(exc)) from exc
    rows = []
    ratios = []
    for t in ex["dilations"]:
        f = dilated_gaussian(grid, t)
        ratios.append(hls_ratio(f, f, ecase))
        rows.append(["exact-scaling", "dilation", t, ratios[-1], math.nan])
    ref = ratios[0]
    invariant = all(abs(r - ref) <= tol * abs(ref) for r in ratios)
    decay = []
    try:
        for sep in sub["separations"]:
            val = disjoint_decay(sep, scase, sub["width"], sub_grid)
            env = decay_envelope(sep, scase, sub["width"], sub_grid)
            decay.append((val, env))
            rows.append(["subcritical-pair", "separation", sep, val, env])
    except (GridError, ValueError) as exc:
        raise cfg.error("disjoint", "separations", str(exc)) from exc
    monotone = all(b[0] < a[0] for a, b in zip(decay, decay[1:]))
    bounded = all(v <= e for v, e in decay)
    checks = {"dilation_invariant": invariant, "decay_strictly_decreasing": monotone, "below_envelope": bounded}
    header = ["case", "parameter", "value", "ratio", "envelope"]
    _write(args.out, "hls_audit.csv", _csv(header, rows, resolved))
    _write(args.out, "hls_audit.json", _dumps({"config": resolved, "rows": [dict(zip(header, r)) for r in rows],
                                               "checks": checks, "pass": all(checks.values())}))
    return EXIT_OK if all(checks.values()) else EXIT_NUMERIC


COMMANDS = {
    "ground-state": cmd_ground_state,
    "scaling-verify": cmd_scaling_verify,
    "limit-table": cmd_limit_table,
    "semiclassical-sweep": cmd_semiclassical_sweep,
    "hls-audit": cmd_hls_audit,
}


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="choquardlab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, type=Path, help="TOML or JSON experiment file")
        sp.add_argument("--out", required=True, type=Path, help="output directory")
        sp.add_argument("--dump-fields", action="store_true", help="also write .field files")
        sp.add_argument("--seed", type=int, default=None, help="rng seed (u64), overrides the config")
        sp.add_argument("--tolerance", type=float, default=None, help="relative acceptance tolerance")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: Optional[list[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _Config(args.config)
        seed = args.seed if args.seed is not None else cfg.data.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
            raise cfg.error("seed", None, "seed must be an unsigned 64-bit integer")
        args.seed = seed
        if args.tolerance is not None and not args.tolerance > 0:
            raise ConfigError("--tolerance must be positive")
        with _locked(args.out), warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
