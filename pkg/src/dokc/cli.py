"""Command-line interface: ``dokc <command> [options]``.

Commands: ``compress``, ``validate-kernel``, ``solve-ode``, ``solve-pde`` and
``converge``.  Options come from a flat JSON document (``--config``) and
are overridden by flags.  Exit status 0 on success, 2 for configuration
errors, 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DokcError
from .expsum import KernelCache, _fmt, compress_cached, write_sweep_csv
from .kernels import WeightFunctionSpec, bump, exm1, exm2, kernels_for, riemann_liouville
from .solvers import (
    ODE_SCENARIOS,
    SCENARIOS,
    DOFDEProblem,
    KernelControls,
    compressed_kernels,
    observed_rates,
    scenario,
    solve_dofde,
    solve_dopde,
)

log = logging.getLogger("dokc")

COMMANDS = ("compress", "validate-kernel", "solve-ode", "solve-pde", "converge")

# kernel tolerances used for the scenarios unless overridden
DEFAULT_TOL = {
    "example1": 1e-40,
    "example2": 1e-45,
    "table1": 1e-20,
    "dowave2d": 1e-20,
}


@dataclasses.dataclass
class RunConfig:
    """Resolved options of one run; lists hold sweeps."""

    scenario: str | None = None
    weight: str | None = None
    scheme: list = dataclasses.field(default_factory=lambda: ["radau_iia_2"])
    n: list = dataclasses.field(default_factory=lambda: [100])
    gamma: list = dataclasses.field(default_factory=lambda: [1.0])
    T: float | None = None
    grid: int | None = None
    tol: list | None = None
    precision: int | None = None
    m: int | None = None
    cache: str | None = None
    out: str | None = None
    seed: int = 0
    snapshots: list | None = None
    forcing: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_LIST_KEYS = {"scheme": str, "n": int, "gamma": float, "tol": float, "snapshots": float}
_SCALAR_KEYS = {
    "scenario": str, "weight": str, "T": float, "grid": int, "precision": int,
    "m": int, "cache": str, "out": str, "seed": int, "forcing": str,
}


def _as_list(value, kind):
    if isinstance(value, str):
        items = [v for v in value.split(",") if v.strip()]
    elif isinstance(value, (list, tuple)):
        items = list(value)
    else:
        items = [value]
    try:
        return [kind(v.strip() if isinstance(v, str) else v) for v in items]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cannot parse {value!r}: {exc}") from exc


def resolve_config(doc: dict) -> RunConfig:
    """Validate a flat key-value document; unknown keys are rejected."""
    unknown = sorted(set(doc) - set(_LIST_KEYS) - set(_SCALAR_KEYS))
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    cfg = RunConfig()
    for key, value in doc.items():
        if value is None:
            continue
        if key in _LIST_KEYS:
            setattr(cfg, key, _as_list(value, _LIST_KEYS[key]))
        else:
            try:
                setattr(cfg, key, _SCALAR_KEYS[key](value))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {value!r}") from exc
    if cfg.scenario is not None and cfg.scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {cfg.scenario!r}; choose from {', '.join(SCENARIOS)}")
    if any(n < 1 for n in cfg.n):
        raise ConfigError("step counts must be positive")
    if any(g < 1 for g in cfg.gamma):
        raise ConfigError("grading exponents must be at least 1")
    return cfg


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("the config document must be a JSON object")
    return doc


# -- weights by name -------------------------------------------------------------------


def _phi2(r):
    return bump(2.0, r, upper=2.0, name=f"phi2(r={r:g})")


def weights_from_spec(spec: str) -> list[WeightFunctionSpec]:
    """Parse a weight selection.

    ``exm1``, ``exm2``, ``rl:0.5``, ``bump:c:r``, ``phi2:r`` (half bump at
    2), or the suites ``rl-suite`` and ``do-suite``; entries separated by
    ``+``.
    """
    out = []
    for item in spec.split("+"):
        name, _, arg = item.strip().partition(":")
        try:
            if name == "exm1":
                out.append(exm1())
            elif name == "exm2":
                out.append(exm2())
            elif name == "rl":
                out.append(riemann_liouville(float(arg)))
            elif name == "bump":
                c, r = (float(v) for v in arg.split(":"))
                out.append(bump(c, r))
            elif name == "phi2":
                out.append(_phi2(float(arg)))
            elif name == "rl-suite":
                out.extend(riemann_liouville(a) for a in (0.1, 0.3, 0.5, 0.7, 0.9))
            elif name == "do-suite":
                out.extend([exm1(), exm2(), _phi2(0.1), _phi2(0.5)])
            else:
                raise ConfigError(f"unknown weight {name!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"cannot parse weight {item!r}: {exc}") from exc
    return out


# -- output helpers -----------------------------------------------------------------------


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cache(cfg: RunConfig):
    path = cfg.cache or os.environ.get("DOKC_KERNEL_CACHE") or str(Path.home() / ".cache" / "dokc")
    return KernelCache(path)


def _atomic_write(path: Path, write):
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            write(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path: Path, header, rows):
    """UTF-8 CSV with a header; floats at 17 significant digits."""

    def cell(v):
        if isinstance(v, (float, np.floating)):
            return _fmt(float(v))
        if v is None:
            return ""
        return v

    def write(fh):
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([cell(v) for v in row])

    _atomic_write(path, write)


def write_metadata(out: Path, command: str, cfg: RunConfig, **extra):
    doc = {"command": command, "version": __version__, "config": cfg.to_dict()}
    doc.update(extra)

    def write(fh):
        json.dump(doc, fh, indent=1, sort_keys=True, default=str)
        fh.write("\n")

    _atomic_write(out / "metadata.json", write)


def _controls(cfg: RunConfig, tol: float) -> KernelControls:
    return KernelControls(tol=tol, precision=cfg.precision, cache=_cache(cfg), max_terms=(cfg.m + 1) if cfg.m else 200)


def _scenario_tol(cfg: RunConfig) -> float:
    if cfg.tol:
        return cfg.tol[0]
    return DEFAULT_TOL.get(cfg.scenario, 1e-20)


# -- commands ----------------------------------------------------------------------------


def cmd_compress(cfg: RunConfig) -> int:
    if not cfg.weight:
        raise ConfigError("compress needs --weight")
    cache = _cache(cfg)
    tols = cfg.tol or [1e-40]
    rows = []
    for w in weights_from_spec(cfg.weight):
        for K in kernels_for(w):
            for tol in tols:
                C, hit = compress_cached(K, tol, cfg.precision, cache, max_terms=(cfg.m + 1) if cfg.m else 200)
                print(f"{K.identifier} tol={tol:g} m={C.m} l1_error={C.l1_error:.3e} {'cache hit' if hit else 'computed'}")
                rows.append((K.identifier, tol, C.m, C.l1_error))
    if cfg.out:
        out = _out_dir(cfg)
        write_sweep_csv(rows, out / "compress.csv")
        write_metadata(out, "compress", cfg, cache=str(cache.directory))
    return 0


def cmd_validate_kernel(cfg: RunConfig) -> int:
    if not cfg.weight:
        raise ConfigError("validate-kernel needs --weight")
    cache = _cache(cfg)
    tols = cfg.tol or [1e-6, 1e-13, 1e-20, 1e-30, 1e-40]
    rows = []
    for w in weights_from_spec(cfg.weight):
        for K in kernels_for(w):
            for tol in tols:
                C, _ = compress_cached(K, tol, cfg.precision, cache)
                rows.append((K.identifier, tol, C.m, C.l1_error))
                print(f"{K.identifier} tol={tol:g} m={C.m} l1_error={C.l1_error:.3e}")
    out = _out_dir(cfg)
    write_sweep_csv(rows, out / "validate.csv")
    write_metadata(out, "validate-kernel", cfg, cache=str(cache.directory))
    return 0


def _require_scenario(cfg: RunConfig, allowed):
    if cfg.scenario is None:
        raise ConfigError("--scenario is required")
    if cfg.scenario not in allowed:
        raise ConfigError(f"scenario {cfg.scenario!r} not valid here; choose from {', '.join(allowed)}")


def cmd_solve_ode(cfg: RunConfig) -> int:
    _require_scenario(cfg, ODE_SCENARIOS)
    problem: DOFDEProblem = scenario(cfg.scenario)
    if cfg.T is not None:
        problem.T = cfg.T
    tol = _scenario_tol(cfg)
    kernels = compressed_kernels(problem.weight, _controls(cfg, tol))
    sol = solve_dofde(problem, cfg.scheme[0], cfg.n[0], cfg.gamma[0], kernels=kernels)
    out = _out_dir(cfg)
    ref = problem.reference(sol.t) if problem.reference is not None else None
    rows = []
    for k, (t, u) in enumerate(zip(sol.t, sol.u)):
        rows.append((float(t), float(u), None if ref is None else float(ref[k]), None if ref is None else float(abs(u - ref[k]))))
    write_csv(out / "trajectory.csv", ["t", "u", "reference", "error"], rows)
    write_metadata(out, "solve-ode", cfg, kernels=sol.kernels, kernel_tol=tol, error=sol.error)
    msg = f"{cfg.scenario} {cfg.scheme[0]} N={cfg.n[0]} gamma={cfg.gamma[0]:g} u(T)={sol.final:.16g}"
    if sol.error is not None:
        msg += f" error={sol.error:.3e}"
    print(msg)
    return 0


def _pde_problem(cfg: RunConfig):
    params = {}
    if cfg.grid is not None:
        params["cells"] = cfg.grid
    if cfg.forcing is not None:
        if cfg.scenario != "dowave2d":
            raise ConfigError("forcing applies to the dowave2d scenario only")
        params["forcing"] = cfg.forcing
    if cfg.scenario in ("geometric_eta", "randomfield_eta"):
        params["cache"] = _cache(cfg)
        if cfg.m is not None:
            params["m"] = cfg.m
        if cfg.scenario == "randomfield_eta":
            params["seed"] = cfg.seed
    problem = scenario(cfg.scenario, **params)
    if cfg.T is not None:
        problem.T = cfg.T
    return problem


def _pde_kernels(cfg, problem):
    if problem.table is not None:
        return None
    return compressed_kernels(problem.weight, _controls(cfg, _scenario_tol(cfg)))


def cmd_solve_pde(cfg: RunConfig) -> int:
    _require_scenario(cfg, [s for s in SCENARIOS if s not in ODE_SCENARIOS])
    problem = _pde_problem(cfg)
    kernels = _pde_kernels(cfg, problem)
    times = cfg.snapshots or ([1.0, 2.0, 3.0] if problem.table is not None else [problem.T])
    sol = solve_dopde(problem, cfg.scheme[0], cfg.n[0], kernels=kernels, snapshot_times=times)
    out = _out_dir(cfg)
    coords = problem.grid.coordinates()
    files = []
    for t, field in sorted(sol.snapshots.items()):
        name = f"snapshot_t{t:g}.csv"
        cols = [f"x{k + 1}" for k in range(len(coords))] + ["u"]
        write_csv(out / name, cols, zip(*[map(float, c) for c in coords], map(float, field)))
        files.append(name)
    if sol.errors is not None:
        write_csv(out / "errors.csv", ["t", "error"], zip(map(float, sol.t), map(float, sol.errors)))
    extra = dict(problem.meta)
    extra.update(snapshots=files, unknowns=sol.unknowns, max_error=sol.max_error, finite=bool(np.all(np.isfinite(sol.final))))
    write_metadata(out, "solve-pde", cfg, **extra)
    msg = f"{cfg.scenario} {cfg.scheme[0]} N={cfg.n[0]} unknowns={sol.unknowns} max|u(T)|={float(np.max(np.abs(sol.final))):.6g}"
    if sol.max_error is not None:
        msg += f" error={sol.max_error:.3e}"
    print(msg)
    return 0


def cmd_converge(cfg: RunConfig) -> int:
    if cfg.scenario is None:
        raise ConfigError("--scenario is required")
    ode = cfg.scenario in ODE_SCENARIOS
    if ode:
        problem = scenario(cfg.scenario)
        kernels = compressed_kernels(problem.weight, _controls(cfg, _scenario_tol(cfg)))
    elif cfg.scenario in ("table1", "dowave2d"):
        problem = _pde_problem(cfg)
        kernels = _pde_kernels(cfg, problem)
    else:
        raise ConfigError(f"no reference solution for scenario {cfg.scenario!r}")
    if cfg.T is not None:
        problem.T = cfg.T
    Ns = sorted(cfg.n)
    rows, summary = [], []
    for scheme in cfg.scheme:
        for gamma in cfg.gamma:
            errs = []
            for N in Ns:
                if ode:
                    errs.append(solve_dofde(problem, scheme, N, gamma, kernels=kernels).error)
                else:
                    if gamma != 1:
                        raise ConfigError("PDE scenarios run on uniform meshes only")
                    errs.append(solve_dopde(problem, scheme, N, kernels=kernels).max_error)
            table = observed_rates(Ns, errs)
            for N, e, r, p in zip(Ns, errs, table.rates, table.plateau):
                rows.append((scheme, float(gamma), N, problem.T / N, float(e), r, "plateau" if p else ""))
            summary.append({"scheme": scheme, "gamma": gamma, "asymptotic_rate": table.asymptotic})
            rate = table.asymptotic
            print(f"{cfg.scenario} {scheme} gamma={gamma:g} rate={'n/a' if rate is None else f'{rate:.3f}'}")
    out = _out_dir(cfg)
    write_csv(out / "convergence.csv", ["scheme", "gamma", "N", "h", "error", "observed_rate", "flag"], rows)
    write_metadata(out, "converge", cfg, summary=summary)
    return 0


HANDLERS = {
    "compress": cmd_compress,
    "validate-kernel": cmd_validate_kernel,
    "solve-ode": cmd_solve_ode,
    "solve-pde": cmd_solve_pde,
    "converge": cmd_converge,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dokc", description="Distributed-order kernel compression and solvers.")
    p.add_argument("--version", action="version", version=f"dokc {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp_ = sub.add_parser(name)
        sp_.add_argument("--config", help="flat JSON document of options")
        sp_.add_argument("--out", help="output directory")
        sp_.add_argument("--cache", help="kernel cache directory")
        sp_.add_argument("--tol", help="AAA tolerance(s), comma separated")
        sp_.add_argument("--scheme", help="scheme name(s), comma separated")
        sp_.add_argument("--n", help="step count(s), comma separated")
        sp_.add_argument("--gamma", help="grading exponent(s), comma separated")
        sp_.add_argument("--grid", help="cells per axis")
        sp_.add_argument("--seed", help="random seed")
        sp_.add_argument("--scenario", help="scenario name")
        sp_.add_argument("--weight", help="weight function selection")
        sp_.add_argument("--precision", help="mantissa bits")
        sp_.add_argument("--m", help="fixed number of exponential terms")
        sp_.add_argument("--forcing", help="dowave2d forcing: manufactured or zero")
        sp_.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        doc = load_config(args.config) if args.config else {}
        for key in ("out", "cache", "tol", "scheme", "n", "gamma", "grid", "seed", "scenario", "weight", "precision", "m", "forcing"):
            value = getattr(args, key)
            if value is not None:
                doc[key] = value
        cfg = resolve_config(doc)
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DokcError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
