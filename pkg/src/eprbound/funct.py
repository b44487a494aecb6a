"""Drift decomposition and the thermodynamic functionals of a steady state.

All integrals are midpoint cell sums.  Weighted integrals use the density
renormalised to unit mass, so every functional is invariant under rescaling
the input density.  Derivatives are centred differences in the interior and
second-order one-sided stencils on the boundary rows.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.special import logsumexp

from .fpe import SteadyState
from .model import CellVectorField, DiffusionMatrix, Grid, ScalarField, System

log = logging.getLogger(__name__)

RHO_FLOOR = 1e-290


def gradient(values: np.ndarray, grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    gx, gy = np.gradient(values, grid.hx, grid.hy, edge_order=2)
    return gx, gy


def curl(vx: np.ndarray, vy: np.ndarray, grid: Grid) -> np.ndarray:
    """Scalar curl d(vy)/dx - d(vx)/dy at cell centres."""
    return np.gradient(vy, grid.hx, axis=0, edge_order=2) - np.gradient(vx, grid.hy, axis=1, edge_order=2)


def divergence(vx: np.ndarray, vy: np.ndarray, grid: Grid) -> np.ndarray:
    return np.gradient(vx, grid.hx, axis=0, edge_order=2) + np.gradient(vy, grid.hy, axis=1, edge_order=2)


@dataclass(frozen=True, eq=False)
class Decomposition:
    """F = f_rev + f_irr with f_rev = -D grad(phi) and f_irr = J / rho.

    ``f_irr_drift`` is the complementary estimate F - f_rev taken directly
    from the drift; it agrees with ``f_irr`` up to discretisation error.
    """

    phi: ScalarField
    grad_phi: CellVectorField
    f_rev: CellVectorField
    f_irr: CellVectorField
    f_irr_drift: CellVectorField
    drift: CellVectorField
    curl_firr: ScalarField
    div_firr: ScalarField
    weight: ScalarField        # unit-mass density used for weighted integrals
    mask: np.ndarray           # True where rho fell below the floor
    excluded_mass: float

    @property
    def grid(self) -> Grid:
        return self.phi.grid

    def cross_grad_phi(self, vx: np.ndarray, vy: np.ndarray) -> np.ndarray:
        """2-D cross product grad(phi) x v."""
        return self.grad_phi.vx * vy - self.grad_phi.vy * vx

    def dot_grad_phi(self, vx: np.ndarray, vy: np.ndarray) -> np.ndarray:
        return self.grad_phi.vx * vx + self.grad_phi.vy * vy


def decompose(sys: System, state: SteadyState) -> Decomposition:
    grid = state.grid
    rho = state.rho.values
    mask = rho < RHO_FLOOR
    mass = rho.sum()
    excluded = float(rho[mask].sum() / mass) if mask.any() else 0.0
    if mask.any():
        log.warning("%d cells below the density floor; excluded mass %.3e", int(mask.sum()), excluded)
    safe = np.where(mask, RHO_FLOOR, rho)
    phi = -np.log(safe)
    gx, gy = gradient(phi, grid)
    D = sys.D
    F = sys.drift_field(grid)
    Jc = state.J.to_cells()
    fx = np.where(mask, 0.0, Jc.vx / safe)
    fy = np.where(mask, 0.0, Jc.vy / safe)
    weight = np.where(mask, 0.0, rho) / (mass * grid.cell_area)
    return Decomposition(
        phi=ScalarField(grid, phi, mask if mask.any() else None),
        grad_phi=CellVectorField(grid, gx, gy),
        f_rev=CellVectorField(grid, -D.d1 * gx, -D.d2 * gy),
        f_irr=CellVectorField(grid, fx, fy),
        f_irr_drift=CellVectorField(grid, F.vx + D.d1 * gx, F.vy + D.d2 * gy),
        drift=F,
        curl_firr=ScalarField(grid, curl(fx, fy, grid)),
        div_firr=ScalarField(grid, divergence(fx, fy, grid)),
        weight=ScalarField(grid, weight),
        mask=mask,
        excluded_mass=excluded,
    )


# ---------------------------------------------------------------------------
# Functionals


def _weight(dec: Decomposition, rho: ScalarField | None) -> np.ndarray:
    if rho is None:
        return dec.weight.values
    w = np.where(dec.mask, 0.0, rho.values)
    return w / (rho.values.sum() * rho.grid.cell_area)


def _moment(integrand: np.ndarray, w: np.ndarray, q: float, grid: Grid) -> float:
    if q < 1:
        raise ValueError(f"moment order q must be >= 1, got {q}")
    return float((np.abs(integrand) ** (2 * q) * w).sum() * grid.cell_area)


def entropy_production(dec: Decomposition, D: DiffusionMatrix, rho: ScalarField | None = None) -> float:
    """Steady-state dissipation: integral of F_irr . D^-1 F_irr against rho."""
    w = _weight(dec, rho)
    f = dec.f_irr
    return float(((f.vx ** 2 / D.d1 + f.vy ** 2 / D.d2) * w).sum() * dec.grid.cell_area)


def vorticity_moment(dec: Decomposition, rho: ScalarField | None = None, q: float = 1.0) -> float:
    return _moment(dec.curl_firr.values, _weight(dec, rho), q, dec.grid)


def levelset_variation(dec: Decomposition, rho: ScalarField | None = None, q: float = 1.0) -> tuple[float, float]:
    """Moment of |grad(phi) . F_irr|^(2q), plus the same moment of |div F_irr|^(2q).

    The two agree in the continuum because the current is divergence free.
    """
    w = _weight(dec, rho)
    f = dec.f_irr
    value = _moment(dec.dot_grad_phi(f.vx, f.vy), w, q, dec.grid)
    via_div = _moment(dec.div_firr.values, w, q, dec.grid)
    return value, via_div


def misalignment(dec: Decomposition, rho: ScalarField | None = None, q: float = 1.0) -> float:
    f = dec.f_irr
    return _moment(dec.cross_grad_phi(f.vx, f.vy), _weight(dec, rho), q, dec.grid)


def holder_factor(rho: ScalarField, q: float) -> float:
    """(integral of rho^(1/(1-q)))^((q-1)/q) for the unit-mass density.

    Evaluated in log space; returns ``inf`` when the value overflows or rho
    vanishes somewhere, in which case the Hoelder-type bound is vacuous.
    """
    if q <= 1:
        raise ValueError(f"Hoelder exponent q must exceed 1, got {q}")
    grid = rho.grid
    r = rho.values / (rho.values.sum() * grid.cell_area)
    if r.min() <= 0.0:
        log.warning("density vanishes on the grid; Hoelder factor is infinite")
        return float("inf")
    log_int = logsumexp(np.log(r) / (1.0 - q)) + np.log(grid.cell_area)
    log_val = (q - 1.0) / q * log_int
    if log_val > np.log(np.finfo(float).max):
        log.warning("Hoelder factor overflows for q=%g", q)
        return float("inf")
    return float(np.exp(log_val))


@dataclass
class FunctionalSet:
    epr: float
    v_q: dict[float, float]
    delta_ls_q: dict[float, float]
    delta_ls_div_q: dict[float, float]
    delta_perp_q: dict[float, float]
    sup_rho: float
    inf_rho: float
    sup_rho_boundary: float
    inf_rho_boundary: float
    holder_q: dict[float, float]
    excluded_mass: float
    excluded_area: float
    firr_sq: float            # integral |F_irr|^2 rho
    curl_sq_unweighted: float  # integral |curl F_irr|^2
    ls_sq_unweighted: float    # integral |grad(phi) . F_irr|^2
    lambda_min: float = 1.0

    @property
    def v(self) -> float:
        return self.v_q[1.0]

    @property
    def delta_ls(self) -> float:
        return self.delta_ls_q[1.0]

    @property
    def delta_perp(self) -> float:
        return self.delta_perp_q[1.0]

    def to_json(self) -> dict[str, float]:
        """Flat JSON object; q-indexed entries are keyed like ``v_q[1.5]``."""
        out: dict[str, float] = {"epr": self.epr}
        for name in ("v_q", "delta_ls_q", "delta_ls_div_q", "delta_perp_q", "holder_q"):
            for q, val in sorted(getattr(self, name).items()):
                out[f"{name}[{q:g}]"] = val
        for name in ("sup_rho", "inf_rho", "sup_rho_boundary", "inf_rho_boundary", "excluded_mass",
                     "excluded_area", "firr_sq", "curl_sq_unweighted", "ls_sq_unweighted", "lambda_min"):
            out[name] = getattr(self, name)
        return out


def boundary_cells(values: np.ndarray) -> np.ndarray:
    return np.concatenate([values[0], values[-1], values[1:-1, 0], values[1:-1, -1]])


def compute_functionals(dec: Decomposition, D: DiffusionMatrix, q_list: Iterable[float] = (1.5, 2.0, 3.0)) -> FunctionalSet:
    grid = dec.grid
    w = dec.weight.values
    qs = sorted({1.0, *map(float, q_list)})
    f = dec.f_irr
    live = ~dec.mask
    dA = grid.cell_area
    ls = {q: levelset_variation(dec, None, q) for q in qs}
    unit = dec.weight
    rho_b = boundary_cells(unit.values)
    return FunctionalSet(
        epr=entropy_production(dec, D),
        v_q={q: vorticity_moment(dec, None, q) for q in qs},
        delta_ls_q={q: v[0] for q, v in ls.items()},
        delta_ls_div_q={q: v[1] for q, v in ls.items()},
        delta_perp_q={q: misalignment(dec, None, q) for q in qs},
        sup_rho=float(unit.values.max()),
        inf_rho=float(unit.values.min()),
        sup_rho_boundary=float(rho_b.max()),
        inf_rho_boundary=float(rho_b.min()),
        holder_q={q: holder_factor(unit, q) for q in qs if q > 1.0},
        excluded_mass=dec.excluded_mass,
        excluded_area=float(dec.mask.sum() * dA),
        firr_sq=float(((f.vx ** 2 + f.vy ** 2) * w).sum() * dA),
        curl_sq_unweighted=float((dec.curl_firr.values[live] ** 2).sum() * dA),
        ls_sq_unweighted=float((dec.dot_grad_phi(f.vx, f.vy)[live] ** 2).sum() * dA),
        lambda_min=D.lambda_min,
    )


# ---------------------------------------------------------------------------
# Stream function


class StreamFunctionError(ValueError):
    """Line integrals of the current disagree: the current is not divergence free."""


def stream_function_nodes(state: SteadyState, rel_tol: float = 1e-6) -> np.ndarray:
    """psi at grid nodes with grad_perp(psi) = J and psi = 0 on the walls.

    psi is integrated up each vertical grid line from the bottom wall and,
    independently, along each horizontal line from the left wall; the two
    must coincide when J is discretely divergence free.
    """
    grid = state.grid
    J = state.J
    nx, ny = grid.shape
    psi_y = np.zeros((nx + 1, ny + 1))
    psi_y[:, 1:] = np.cumsum(J.fx, axis=1) * grid.hy
    psi_x = np.zeros((nx + 1, ny + 1))
    psi_x[1:, :] = -np.cumsum(J.fy, axis=0) * grid.hx
    gap = float(np.abs(psi_y - psi_x).max())
    # equilibrium states have psi ~ 0; fall back to a round-off floor
    floor = 1e-9 * float(state.rho.values.max()) * np.sqrt(grid.domain.area)
    scale = float(np.abs(psi_y).max())
    if gap > rel_tol * scale + floor:
        raise StreamFunctionError(f"stream function is path dependent: gap {gap:.3e} vs scale {scale:.3e}")
    return 0.5 * (psi_y + psi_x)


def stream_and_a(state: SteadyState, dec: Decomposition | None = None) -> tuple[ScalarField, ScalarField]:
    """Stream function (averaged to cell centres) and the amplitude a = psi / rho."""
    grid = state.grid
    psi_n = stream_function_nodes(state)
    psi = 0.25 * (psi_n[:-1, :-1] + psi_n[1:, :-1] + psi_n[:-1, 1:] + psi_n[1:, 1:])
    rho = state.rho.values
    mask = dec.mask if dec is not None else rho < RHO_FLOOR
    a = np.where(mask, 0.0, psi / np.where(mask, 1.0, rho))
    return ScalarField(grid, psi), ScalarField(grid, a, mask if mask.any() else None)
