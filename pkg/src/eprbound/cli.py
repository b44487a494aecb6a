"""Command-line driver: eprbound <subcommand> --config run.json [overrides].

Exit codes: 0 success, 1 a bound check failed, 2 usage or configuration
error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import __version__
from .certify import all_checks, check_theorem1, fw_sweep, parabolic_locality, ratio_trend
from .expr import ExpressionError, parse
from .fpe import SolverError, SteadyState, solve_system, write_binary, write_csv
from .funct import FunctionalSet, StreamFunctionError, compute_functionals, decompose
from .mc import SimConfig, SimulationError, epr_estimator, simulate, tur_lower_bound
from .model import CATALOG, Grid, ModelError, System, build_system, designed_face_current, designed_ground_truth
from .sobolev import EigenError, domain_constants

log = logging.getLogger("eprbound")

EXIT_OK, EXIT_VIOLATION, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3
NUMERICAL_ERRORS = (SolverError, EigenError, SimulationError, StreamFunctionError, FloatingPointError)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Configuration schema


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DiffusionBlock(_Block):
    d1: float = Field(gt=0)
    d2: float = Field(gt=0)


class SystemBlock(_Block):
    variant: Literal["catalog", "custom", "designed"] = "catalog"
    name: str | None = None
    params: dict[str, float] = Field(default_factory=dict)
    fx: str | None = None
    fy: str | None = None
    phi: str | None = None
    a: str | None = None
    bump: str | None = None
    diffusion: DiffusionBlock | None = None

    @field_validator("fx", "fy", "phi", "a", "bump")
    @classmethod
    def _parses(cls, v):
        if v is not None:
            try:
                parse(v)
            except ExpressionError as exc:
                raise ValueError(f"expression {v!r}: {exc}") from exc
        return v

    @model_validator(mode="after")
    def _complete(self):
        if self.variant == "catalog":
            if self.name not in CATALOG:
                raise ValueError(f"unknown catalog system {self.name!r}; valid names: {', '.join(CATALOG)}")
        elif self.variant == "custom":
            if self.fx is None or self.fy is None:
                raise ValueError("custom systems need both fx and fy")
        elif self.phi is None or self.a is None:
            raise ValueError("designed systems need phi and a (bump is optional)")
        return self


class DomainBlock(_Block):
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    @model_validator(mode="after")
    def _ordered(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError("domain bounds must satisfy x_min < x_max and y_min < y_max")
        return self


class GridBlock(_Block):
    n: int = Field(256, ge=8)
    sizes: list[int] | None = None  # refinement study for the oracle comparison

    @field_validator("sizes")
    @classmethod
    def _sizes(cls, v):
        if v is not None and (len(v) < 2 or any(n < 8 for n in v)):
            raise ValueError("sizes needs at least two entries, each >= 8")
        return v


class ConstantsBlock(_Block):
    grids: list[int] = Field(default_factory=lambda: [32, 64, 128])

    @field_validator("grids")
    @classmethod
    def _grids(cls, v):
        if len(set(v)) < 3 or any(n < 8 for n in v):
            raise ValueError("extrapolation needs at least three distinct grids, each >= 8")
        return sorted(set(v))


class SimBlock(_Block):
    dt: float = Field(1e-3, gt=0)
    t_max: float = Field(1000.0, gt=0)
    n_paths: int = Field(16, ge=1)
    master_seed: int = Field(0, ge=0, lt=2 ** 64)
    initial: Literal["stationary"] | tuple[float, float] = "stationary"
    window: float | None = Field(5.0, gt=0)
    thin: int = Field(1000, ge=1)
    burn_in: float = Field(0.0, ge=0)
    density_bins: int | None = Field(None, ge=1)

    def to_sim_config(self) -> SimConfig:
        return SimConfig(self.dt, self.t_max, self.n_paths, self.master_seed,
                         self.initial if self.initial == "stationary" else tuple(self.initial),
                         self.window, self.thin, self.burn_in)


class OutputBlock(_Block):
    dir: str = "out"


class RunConfig(_Block):
    system: SystemBlock
    domain: DomainBlock | None = None
    grid: GridBlock = Field(default_factory=GridBlock)
    constants: ConstantsBlock = Field(default_factory=ConstantsBlock)
    q_list: list[float] = Field(default_factory=lambda: [1.5, 2.0, 3.0])
    eps_list: list[float] = Field(default_factory=list)
    radii: list[float] = Field(default_factory=list)
    locality_center: tuple[float, float] | None = None
    sim: SimBlock = Field(default_factory=SimBlock)
    oracle: bool = False
    output: OutputBlock = Field(default_factory=OutputBlock)

    @field_validator("q_list")
    @classmethod
    def _q(cls, v):
        if any(q <= 1 for q in v):
            raise ValueError("every q must exceed 1")
        return v

    @field_validator("eps_list")
    @classmethod
    def _eps(cls, v):
        if any(b >= a for a, b in zip(v, v[1:])):
            raise ValueError("eps_list must be strictly descending")
        if any(e < 0.1 for e in v):
            raise ValueError("eps values below 0.1 are not supported")
        return v

    @field_validator("radii")
    @classmethod
    def _radii(cls, v):
        if any(r <= 0 for r in v):
            raise ValueError("radii must be positive")
        return v

    def system_spec(self) -> dict[str, Any]:
        spec = self.system.model_dump(exclude_none=True)
        if self.domain is not None:
            spec["domain"] = self.domain.model_dump()
        return spec


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from exc
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"]) or "<root>"
            lines.append(f"  {loc}: {err['msg']}")
        raise ConfigError(f"{path}: invalid configuration\n" + "\n".join(lines)) from exc


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"not a comma-separated list of numbers: {text!r}") from exc


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    data = cfg.model_dump()
    if args.grid:
        sizes = [int(v) for v in _float_list(args.grid)]
        data["grid"] = {"n": sizes[-1], "sizes": sizes if len(sizes) > 1 else data["grid"]["sizes"]}
    if args.q:
        data["q_list"] = _float_list(args.q)
    if args.eps:
        data["eps_list"] = _float_list(args.eps)
    if args.radii:
        data["radii"] = _float_list(args.radii)
    if args.seed is not None:
        data["sim"]["master_seed"] = args.seed
    if args.out:
        data["output"]["dir"] = args.out
    if args.oracle:
        data["oracle"] = True
    if getattr(args, "thin", None):
        data["sim"]["thin"] = args.thin
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError("invalid command-line override\n" + "\n".join(
            f"  {'.'.join(map(str, e['loc']))}: {e['msg']}" for e in exc.errors())) from exc


# ---------------------------------------------------------------------------
# Report helpers


def _clean(obj):
    """JSON-safe copy: non-finite floats become the strings 'inf', '-inf', 'nan'."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isfinite(v):
            return v
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _canonical(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_report(path: Path, cfg: RunConfig, command: str, body: dict) -> dict:
    """Embed the resolved config and content hashes; no timestamps so reruns are byte-identical."""
    resolved = cfg.model_dump(mode="json")
    report = {"command": command, "version": __version__, "config": resolved,
              "config_sha256": hashlib.sha256(_canonical(resolved).encode()).hexdigest(), **body}
    report["content_sha256"] = hashlib.sha256(_canonical(report).encode()).hexdigest()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(_clean(report), indent=2, sort_keys=True, ensure_ascii=False))
        fh.write("\n")
    return report


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.17g}"
    return "" if v is None else str(v)


def write_csv_rows(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


# ---------------------------------------------------------------------------
# Pipeline stages


def _system(cfg: RunConfig) -> System:
    try:
        return build_system(cfg.system_spec())
    except ModelError as exc:
        raise ConfigError(str(exc)) from exc


def _grid(cfg: RunConfig, sys: System) -> Grid:
    return Grid.uniform(sys.domain, cfg.grid.n)


def _solve(cfg: RunConfig, sys: System) -> SteadyState:
    state = solve_system(sys, _grid(cfg, sys))
    log.info("solve: %d iterations, residual %.3e", state.iterations, state.residual_linf)
    return state


def _constants(cfg: RunConfig, sys: System):
    return domain_constants(sys.domain, tuple(cfg.constants.grids))


def _sweep_json(res) -> dict:
    return {"c2": res.c2, "truncated": res.truncated, "last_good_eps": res.last_good_eps, "error": res.error,
            "records": [r.to_json() for r in res.records]}


def _oracle_table(cfg: RunConfig, sys: System) -> dict:
    if not sys.is_designed:
        raise ConfigError("--oracle needs a designed system")
    sizes = cfg.grid.sizes or [cfg.grid.n // 2, cfg.grid.n]
    rows = []
    for n in sorted(sizes):
        g = Grid.uniform(sys.domain, n)
        st = solve_system(sys, g)
        exact, _ = designed_ground_truth(sys, g)
        jex = designed_face_current(sys, g)
        rho_err = float(np.abs(st.rho.values - exact.values).max() / exact.values.max())
        jscale = max(np.abs(jex.fx).max(), np.abs(jex.fy).max())
        j_err = float(max(np.abs(st.J.fx - jex.fx).max(), np.abs(st.J.fy - jex.fy).max()) / jscale)
        rows.append({"n": n, "h": max(g.hx, g.hy), "rho_linf_rel": rho_err, "current_linf_rel": j_err})
    for prev, cur in zip(rows, rows[1:]):
        r = prev["h"] / cur["h"]
        cur["rho_order"] = math.log(prev["rho_linf_rel"] / cur["rho_linf_rel"]) / math.log(r)
        cur["current_order"] = math.log(prev["current_linf_rel"] / cur["current_linf_rel"]) / math.log(r)
    return {"rows": rows}


def _functionals_json(fs: FunctionalSet) -> dict:
    return fs.to_json()


def run_solve(cfg: RunConfig) -> int:
    sys_ = _system(cfg)
    state = _solve(cfg, sys_)
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(state, out / "rho.csv")
    write_binary(state, out / "rho.bin")
    write_report(out / "solve.json", cfg, "solve", {
        "system": sys_.name, "grid": list(state.grid.shape), "iterations": state.iterations,
        "residual_linf": state.residual_linf, "normalisation": state.z,
        "boundary_flux_max": state.J.boundary_max(),
        "mass": float(state.rho.values.sum() * state.grid.cell_area),
    })
    return EXIT_OK


def run_functionals(cfg: RunConfig) -> int:
    sys_ = _system(cfg)
    state = _solve(cfg, sys_)
    dec = decompose(sys_, state)
    fs = compute_functionals(dec, sys_.D, cfg.q_list)
    out = Path(cfg.output.dir)
    write_report(out / "functionals.json", cfg, "functionals",
                 {"system": sys_.name, "grid": list(state.grid.shape), "functionals": _functionals_json(fs)})
    items = sorted(_functionals_json(fs).items())
    write_csv_rows(out / "functionals.csv", ["name", "value"], [[k, v] for k, v in items])
    return EXIT_OK


def run_constants(cfg: RunConfig) -> int:
    sys_ = _system(cfg)
    dc = _constants(cfg, sys_)
    write_report(Path(cfg.output.dir) / "constants.json", cfg, "constants",
                 {"domain": list(sys_.domain.bounds()), **dc.to_json()})
    return EXIT_OK


def run_sweep(cfg: RunConfig) -> int:
    if not cfg.eps_list:
        raise ConfigError("sweep-eps needs a non-empty eps_list (config or --eps)")
    sys_ = _system(cfg)
    c2 = _constants(cfg, sys_).c2
    res = fw_sweep(sys_, cfg.eps_list, cfg.grid.n, c2)
    out = Path(cfg.output.dir)
    write_report(out / "sweep.json", cfg, "sweep-eps", {"system": sys_.name, "sweep": _sweep_json(res)})
    write_csv_rows(out / "sweep.csv", ["eps", "epr", "v", "delta_ls", "delta_perp", "ratio_ls_perp", "fw_rhs"],
                   [[r.eps, r.epr, r.v, r.delta_ls, r.delta_perp, r.ratio_ls_perp, r.fw_rhs] for r in res.records])
    if res.truncated:
        return EXIT_NUMERICAL
    return EXIT_OK if all(r.epr <= r.fw_rhs for r in res.records) else EXIT_VIOLATION


def run_locality(cfg: RunConfig) -> int:
    if not cfg.radii:
        raise ConfigError("locality needs a non-empty radii list (config or --radii)")
    sys_ = _system(cfg)
    state = _solve(cfg, sys_)
    dec = decompose(sys_, state)
    table = parabolic_locality(sys_, state, dec, cfg.radii, cfg.locality_center)
    out = Path(cfg.output.dir)
    write_report(out / "locality.json", cfg, "locality",
                 {"system": sys_.name, "locality": {**table.to_json(), "trend_slope": ratio_trend(table)}})
    write_csv_rows(out / "locality.csv", ["radius", "diam", "numerator", "denominator", "ratio", "admissible"],
                   [[r.radius, r.diam, r.numerator, r.denominator, r.ratio, r.admissible] for r in table.rows])
    return EXIT_OK


def run_certify(cfg: RunConfig) -> int:
    """solve -> functionals -> constants -> checks -> sweep -> locality; failures recorded per stage."""
    sys_ = _system(cfg)
    stages: dict[str, str] = {}
    body: dict[str, Any] = {"system": sys_.name, "grid": [cfg.grid.n, cfg.grid.n]}
    numerical_failure = False

    def stage(name, fn, *deps):
        nonlocal numerical_failure
        if any(stages.get(d) != "ok" for d in deps):
            stages[name] = "skipped"
            return None
        try:
            result = fn()
        except NUMERICAL_ERRORS as exc:
            log.error("stage %s failed: %s", name, exc)
            stages[name] = f"failed: {exc}"
            numerical_failure = True
            return None
        stages[name] = "ok"
        return result

    state = stage("solve", lambda: _solve(cfg, sys_))
    dec = stage("functionals", lambda: decompose(sys_, state), "solve")
    fs = compute_functionals(dec, sys_.D, cfg.q_list) if dec is not None else None
    dc = stage("constants", lambda: _constants(cfg, sys_))
    checks = stage("checks", lambda: all_checks(fs, dec, dc.c2, sys_.D.lambda_min, cfg.q_list),
                   "functionals", "constants")
    if fs is not None:
        body["functionals"] = _functionals_json(fs)
    if dc is not None:
        body["constants"] = {"c1": dc.c1, "c2": dc.c2, "grids_used": dc.grids_used, "extrapolated": dc.extrapolated}
    if checks is not None:
        body["checks"] = [c.to_json() for c in checks]
    if cfg.eps_list:
        res = stage("sweep", lambda: fw_sweep(sys_, cfg.eps_list, cfg.grid.n, dc.c2), "constants")
        if res is not None:
            body["sweep"] = _sweep_json(res)
            if res.truncated:
                stages["sweep"] = f"truncated: {res.error}"
                numerical_failure = True
    if cfg.radii:
        table = stage("locality", lambda: parabolic_locality(sys_, state, dec, cfg.radii, cfg.locality_center),
                      "functionals")
        if table is not None:
            body["locality"] = {**table.to_json(), "trend_slope": ratio_trend(table)}
    if cfg.oracle:
        body["oracle"] = stage("oracle", lambda: _oracle_table(cfg, sys_))
    body["stages"] = stages
    out = Path(cfg.output.dir)
    write_report(out / "report.json", cfg, "certify", body)
    write_csv_rows(out / "report.csv", ["check", "lhs", "rhs", "constant", "margin", "holds"],
                   [[c.name, c.lhs, c.rhs, c.constant_used, c.margin, c.holds] for c in (checks or [])])
    if numerical_failure:
        return EXIT_NUMERICAL
    return EXIT_OK if all(c.holds for c in checks) else EXIT_VIOLATION


def run_simulate(cfg: RunConfig) -> int:
    sys_ = _system(cfg)
    try:
        sim_cfg = cfg.sim.to_sim_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    state = _solve(cfg, sys_)
    dec = decompose(sys_, state)
    fs = compute_functionals(dec, sys_.D, ())
    c2 = _constants(cfg, sys_).c2
    rhs = check_theorem1(fs, c2, sys_.D.lambda_min)[0].rhs
    ens = simulate(sys_, sim_cfg, rho=state.rho, dec=dec)
    epr = epr_estimator(ens, dec)
    tur = tur_lower_bound(ens, dec.f_irr)
    ordered = bool(tur.defined and tur.value <= epr.value + 3 * epr.stderr and epr.value - 3 * epr.stderr <= rhs)
    body = {
        "system": sys_.name,
        "epr_mc": {"value": epr.value, "stderr": epr.stderr, "n_samples": epr.n_samples, "skipped": epr.skipped},
        "tur": {"value": tur.value, "stderr": tur.stderr, "n_samples": tur.n_samples, "defined": tur.defined,
                "window": ens.window_length},
        "sandwich": {"tur_lower": tur.value, "epr_mc": epr.value, "epr_quadrature": fs.epr,
                     "theorem1_rhs": rhs, "ordered": ordered},
        "paths": ens.n_paths, "steps_per_path": sim_cfg.n_steps,
        "generator": "numpy Philox, SeedSequence(master_seed, spawn_key=(path_index,))",
    }
    out = Path(cfg.output.dir)
    write_report(out / "estimators.json", cfg, "simulate", body)
    if cfg.sim.density_bins:
        _write_density(out / "density.csv", ens, sys_, cfg.sim.density_bins)
    return EXIT_OK if ordered else EXIT_VIOLATION


def _write_density(path: Path, ens, sys_: System, bins: int) -> None:
    d = sys_.domain
    pts = ens.states.reshape(-1, 2)
    H, xe, ye = np.histogram2d(pts[:, 0], pts[:, 1], bins=bins, range=[[d.x_min, d.x_max], [d.y_min, d.y_max]])
    area = (xe[1] - xe[0]) * (ye[1] - ye[0])
    total = max(H.sum(), 1.0)
    rows = [[i, j, 0.5 * (xe[i] + xe[i + 1]), 0.5 * (ye[j] + ye[j + 1]), int(H[i, j]), H[i, j] / (total * area)]
            for i in range(bins) for j in range(bins)]
    write_csv_rows(path, ["i", "j", "x", "y", "count", "density"], rows)


COMMANDS = {
    "solve": run_solve,
    "functionals": run_functionals,
    "constants": run_constants,
    "certify": run_certify,
    "sweep-eps": run_sweep,
    "locality": run_locality,
    "simulate": run_simulate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eprbound", description="Entropy-production bounds for 2-D diffusions.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON run configuration")
        s.add_argument("--grid", help="cells per side, or a comma-separated refinement list")
        s.add_argument("--q", help="comma-separated moment orders (> 1)")
        s.add_argument("--eps", help="comma-separated, strictly descending noise levels")
        s.add_argument("--radii", help="comma-separated locality radii")
        s.add_argument("--seed", type=int, help="master seed for simulation")
        s.add_argument("--out", help="output directory")
        s.add_argument("--oracle", action="store_true", help="compare against the exact designed solution")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "simulate":
            s.add_argument("--thin", type=int, help="keep every N-th state")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = apply_overrides(load_config(args.config), args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
