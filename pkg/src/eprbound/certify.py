"""Machine-checked upper bounds on the steady-state entropy production.

Each check compares the dissipation rate (lhs) with an upper bound (rhs)
assembled from the functionals of a solved steady state and the curl/div
constant C2 of the domain.  The constants follow the chain

    integral |F_irr|^2 rho <= 2 C2^2 (|curl(F_irr sqrt(rho))|^2 + |div(F_irr sqrt(rho))|^2)

with |a + b|^2 <= 2|a|^2 + 2|b|^2 on the curl term and the exact identity
div(F_irr sqrt(rho)) = sqrt(rho) grad(phi).F_irr / 2 on the divergence term.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .fpe import SolverError, solve_system
from .funct import Decomposition, FunctionalSet, compute_functionals, decompose
from .model import Grid, ModelError, System
from .sobolev import domain_constants

log = logging.getLogger(__name__)

REL_SLACK = 1e-9
UNDEFINED_DENOMINATOR = 1e-14


@dataclass
class BoundCheck:
    name: str
    lhs: float
    rhs: float
    constant_used: float
    provenance: str
    margin: float = field(init=False)
    holds: bool = field(init=False)
    vacuous: bool = False

    def __post_init__(self):
        self.margin = math.inf if self.lhs == 0.0 else self.rhs / self.lhs
        self.holds = bool(self.lhs <= self.rhs * (1.0 + REL_SLACK))

    def to_json(self) -> dict:
        return asdict(self)


def _require(c2, lambda_min) -> None:
    if c2 is None or lambda_min is None:
        raise ValueError("bound checks need both the domain constant c2 and lambda_min(D)")
    if not (math.isfinite(c2) and c2 > 0 and math.isfinite(lambda_min) and lambda_min > 0):
        raise ValueError(f"invalid constants c2={c2!r}, lambda_min={lambda_min!r}")


def check_theorem1(fs: FunctionalSet, c2: float, lambda_min: float) -> tuple[BoundCheck, BoundCheck]:
    """Vorticity bound in its stated form and in the tighter proof-exact form."""
    _require(c2, lambda_min)
    k_loose = 4.0 * c2 ** 2 / lambda_min
    k_exact = 2.0 * c2 ** 2 / lambda_min
    v, ls, perp = fs.v, fs.delta_ls, fs.delta_perp
    loose = BoundCheck("theorem1", fs.epr, k_loose * (v + 0.25 * (ls + perp)), k_loose,
                       "4*c2^2/lambda_min times (V + (dLS + dperp)/4)")
    exact = BoundCheck("theorem1_exact", fs.epr, k_exact * (2.0 * v + 0.5 * perp + 0.25 * ls), k_exact,
                       "2*c2^2/lambda_min times (2V + dperp/2 + dLS/4)")
    return loose, exact


def check_theorem2(fs: FunctionalSet, c2: float, lambda_min: float, q: float) -> BoundCheck:
    """Hoelder-weighted bound with the 2q-th moments of curl and level-set variation."""
    _require(c2, lambda_min)
    if q <= 1.0:
        raise ValueError(f"q must exceed 1, got {q}")
    q = float(q)
    if q not in fs.v_q or q not in fs.holder_q:
        raise ValueError(f"functionals for q={q:g} were not computed")
    name = f"theorem2[q={q:g}]"
    holder = fs.holder_q[q]
    if fs.inf_rho_boundary <= 0.0 or not math.isfinite(holder):
        log.warning("%s is vacuous (boundary density %.3e, holder factor %.3e)", name, fs.inf_rho_boundary, holder)
        return BoundCheck(name, fs.epr, math.inf, math.inf, "vacuous: density vanishes or Hoelder factor overflows",
                          vacuous=True)
    k = 2.0 * c2 ** 2 * fs.sup_rho * holder / lambda_min
    rhs = k * (fs.v_q[q] ** (1.0 / q) + fs.delta_ls_q[q] ** (1.0 / q))
    return BoundCheck(name, fs.epr, rhs, k, "2*c2^2*sup(rho)*holder_q/lambda_min")


def check_corollary_bounds(fs: FunctionalSet, dec: Decomposition, c2: float, lambda_min: float) -> tuple[BoundCheck, BoundCheck]:
    """Unweighted form (times sup rho) and the sup/inf density-ratio form."""
    _require(c2, lambda_min)
    if fs.inf_rho_boundary <= 0.0:
        log.warning("density vanishes on the boundary; corollary bounds are vacuous")
    k1 = 2.0 * c2 ** 2 * fs.sup_rho / lambda_min
    form1 = BoundCheck("corollary_unweighted", fs.epr, k1 * (fs.curl_sq_unweighted + fs.ls_sq_unweighted), k1,
                       "2*c2^2*sup(rho)/lambda_min times unweighted curl and level-set integrals")
    if fs.inf_rho <= 0.0:
        form2 = BoundCheck("corollary_ratio", fs.epr, math.inf, math.inf, "vacuous: inf(rho) = 0", vacuous=True)
    else:
        k2 = 2.0 * c2 ** 2 * (fs.sup_rho / fs.inf_rho) / lambda_min
        form2 = BoundCheck("corollary_ratio", fs.epr, k2 * (fs.v + fs.delta_ls), k2,
                           "2*c2^2*(sup(rho)/inf(rho))/lambda_min times (V + dLS)")
    return form1, form2


def all_checks(fs: FunctionalSet, dec: Decomposition, c2: float, lambda_min: float,
               q_list=(1.5, 2.0, 3.0)) -> list[BoundCheck]:
    checks = list(check_theorem1(fs, c2, lambda_min))
    checks += [check_theorem2(fs, c2, lambda_min, q) for q in q_list]
    checks += list(check_corollary_bounds(fs, dec, c2, lambda_min))
    return checks


# ---------------------------------------------------------------------------
# Low-noise sweep


@dataclass
class SweepRecord:
    eps: float
    epr: float
    v: float
    delta_ls: float
    delta_perp: float
    ratio_ls_perp: float
    fw_rhs: float
    delta_perp_drift: float | None = None  # misalignment of F itself (isotropic D only)
    isotropic_gap: float | None = None     # max |grad(phi) x (F - F_irr)| / max |grad(phi) x F|

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class SweepResult:
    records: list[SweepRecord]
    c2: float
    last_good_eps: float | None
    truncated: bool = False
    error: str | None = None


def fw_sweep(sys: System, eps_list, grid: Grid | int = 256, c2: float | None = None) -> SweepResult:
    """Solve at D = eps * D_hat for each eps (descending) and record the functionals.

    D_hat is the system's diffusion matrix scaled to unit spectral norm.  A
    solver failure truncates the sweep; the records gathered so far are kept.
    """
    eps_list = [float(e) for e in eps_list]
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError(f"eps_list must be strictly descending, got {eps_list}")
    if eps_list and eps_list[-1] < 0.1:
        raise ValueError(f"eps below the solver floor 0.1: {eps_list[-1]}")
    if isinstance(grid, int):
        grid = Grid.uniform(sys.domain, grid)
    if c2 is None:
        c2 = domain_constants(sys.domain).c2
    d_hat = sys.D.normalized()
    records: list[SweepRecord] = []
    for eps in eps_list:
        s = sys.with_diffusion(d_hat.scaled(eps))
        try:
            state = solve_system(s, grid)
            dec = decompose(s, state)
        except (SolverError, ModelError, FloatingPointError) as exc:
            log.warning("sweep stopped at eps=%g: %s", eps, exc)
            return SweepResult(records, c2, records[-1].eps if records else None, True, str(exc))
        fs = compute_functionals(dec, s.D, q_list=())
        rec = SweepRecord(eps, fs.epr, fs.v, fs.delta_ls, fs.delta_perp,
                          fs.delta_ls / fs.delta_perp if fs.delta_perp > 0 else math.nan,
                          4.0 * c2 ** 2 * fs.delta_perp)
        if d_hat.is_isotropic:
            F = dec.drift
            cross_f = dec.cross_grad_phi(F.vx, F.vy)
            cross_irr = dec.cross_grad_phi(dec.f_irr_drift.vx, dec.f_irr_drift.vy)
            live = ~dec.mask
            scale = float(np.abs(cross_f[live]).max())
            rec.isotropic_gap = float(np.abs(cross_f - cross_irr)[live].max() / scale) if scale > 0 else 0.0
            rec.delta_perp_drift = float((cross_f ** 2 * dec.weight.values).sum() * grid.cell_area)
        records.append(rec)
        log.info("eps=%g epr=%.6g dLS/dperp=%.6g", eps, rec.epr, rec.ratio_ls_perp)
    return SweepResult(records, c2, records[-1].eps if records else None)


# ---------------------------------------------------------------------------
# Locality near the potential minimum


@dataclass
class LocalityRow:
    radius: float
    diam: float
    n_cells: int
    numerator: float
    numerator_scale: float  # integral of |F_irr|^2 |grad phi|^2 over the same square
    denominator: float
    ratio: float | None
    admissible: bool        # diam * sqrt(K) < 1

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class LocalityTable:
    center: tuple[float, float]
    curvature: float
    rows: list[LocalityRow]

    def to_json(self) -> dict:
        return {"center": list(self.center), "curvature": self.curvature, "rows": [r.to_json() for r in self.rows]}


def laplacian_5pt(values: np.ndarray, grid: Grid) -> np.ndarray:
    """Five-point Laplacian on interior cells; NaN on the boundary ring."""
    out = np.full(values.shape, np.nan)
    out[1:-1, 1:-1] = (
        (values[2:, 1:-1] - 2 * values[1:-1, 1:-1] + values[:-2, 1:-1]) / grid.hx ** 2
        + (values[1:-1, 2:] - 2 * values[1:-1, 1:-1] + values[1:-1, :-2]) / grid.hy ** 2
    )
    return out


def _center_node(dec: Decomposition, center) -> tuple[int, int]:
    """Interior node (i, j) whose four adjacent cells have the smallest mean phi."""
    phi = np.where(dec.mask, np.inf, dec.phi.values)
    node_phi = 0.25 * (phi[:-1, :-1] + phi[1:, :-1] + phi[:-1, 1:] + phi[1:, 1:])
    if center is not None:
        # restrict to nodes within two cells of the requested point
        grid = dec.grid
        xn, yn = grid.xf[1:-1], grid.yf[1:-1]
        far = (np.abs(xn - center[0])[:, None] > 2.01 * grid.hx) | (np.abs(yn - center[1])[None, :] > 2.01 * grid.hy)
        node_phi = np.where(far, np.inf, node_phi)
    i, j = np.unravel_index(int(np.argmin(node_phi)), node_phi.shape)
    return i + 1, j + 1


def parabolic_locality(sys: System, state, dec: Decomposition, radii, center=None) -> LocalityTable:
    """Level-set variation against vorticity on shrinking squares around the minimum of phi.

    ratio = int |F_irr . grad phi|^2 / (K diam^2 int |curl F_irr|^2) over each
    square, unweighted.  Squares are unions of whole cells centred on the grid
    node nearest the minimum of phi; diam is their actual side length and K the
    mean five-point Laplacian of phi over the smallest one.  ``center``
    optionally selects which of several minima to use.
    """
    grid = dec.grid
    radii = sorted((float(r) for r in radii), reverse=True)
    if not radii:
        raise ValueError("at least one radius is required")
    inode, jnode = _center_node(dec, center)
    xc, yc = float(grid.xf[inode]), float(grid.yf[jnode])
    f = dec.f_irr
    dot = dec.dot_grad_phi(f.vx, f.vy)
    scale_field = (f.vx ** 2 + f.vy ** 2) * (dec.grad_phi.vx ** 2 + dec.grad_phi.vy ** 2)
    curl2 = dec.curl_firr.values ** 2
    lap = laplacian_5pt(dec.phi.values, grid)
    live = ~dec.mask

    def square(r):
        mx = max(1, int(round(r / grid.hx)))
        my = max(1, int(round(r / grid.hy)))
        m = np.zeros(grid.shape, dtype=bool)
        m[max(inode - mx, 0):inode + mx, max(jnode - my, 0):jnode + my] = True
        return m & live, max(2 * mx * grid.hx, 2 * my * grid.hy)

    smallest, _ = square(radii[-1])
    K = float(np.nanmean(lap[smallest]))
    dA = grid.cell_area
    rows = []
    for r in radii:
        m, diam = square(r)
        num = float((dot[m] ** 2).sum() * dA)
        den = float(curl2[m].sum() * dA)
        ratio = None if den < UNDEFINED_DENOMINATOR else num / (K * diam ** 2 * den)
        rows.append(LocalityRow(r, diam, int(m.sum()), num, float(scale_field[m].sum() * dA), den, ratio,
                                bool(K > 0 and diam * math.sqrt(K) < 1.0)))
    return LocalityTable((xc, yc), K, rows)


def ratio_trend(table: LocalityTable) -> float | None:
    """Least-squares slope of ratio against diam; >= 0 means the ratio does not grow as the squares shrink."""
    pts = [(r.diam, r.ratio) for r in table.rows if r.ratio is not None]
    # coarse grids can round several radii to the same square
    if len({d for d, _ in pts}) < 2:
        return None
    d, q = np.array(pts).T
    return float(np.polyfit(d, q, 1)[0])
