"""Stationary Fokker-Planck solver with Scharfetter-Gummel fluxes.

The zero-flux boundary-value problem

    div(D grad rho - F rho) = 0   in the box,   (D grad rho - F rho).n = 0 on the walls

is discretised by finite volumes.  The flux through the interior vertical face
between cells (i, j) and (i+1, j) is

    J = (d1/hx) * [B(-v) rho[i, j] - B(v) rho[i+1, j]],   v = Fx_face * hx / d1,

with the Bernoulli function B(z) = z / (exp(z) - 1) and Fx_face the mean of
the two adjacent cell-centre drift samples.  Wall faces carry no flux.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import FaceField, Grid, ScalarField, System

log = logging.getLogger(__name__)

BINARY_MAGIC = b"EPRS"
_HEADER = struct.Struct("<4sII4d")


class SolverError(RuntimeError):
    """The stationary solve failed (non-convergence, bad assembly, bad drift)."""


def bernoulli(z) -> np.ndarray:
    """B(z) = z / (exp(z) - 1), with B(0) = 1."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = np.abs(z) < 1e-12
    big = ~small
    with np.errstate(over="ignore"):
        out[big] = z[big] / np.expm1(z[big])
    out[small] = 1.0 - 0.5 * z[small]
    return out


@dataclass(frozen=True, eq=False)
class FaceCoefficients:
    """Scharfetter-Gummel weights; flux = wl * rho_left - wr * rho_right."""

    wx_left: np.ndarray   # (nx-1, ny)
    wx_right: np.ndarray
    wy_left: np.ndarray   # (nx, ny-1)
    wy_right: np.ndarray


def face_coefficients(sys: System, grid: Grid) -> FaceCoefficients:
    F = sys.drift_field(grid)
    d1, d2 = sys.D.d1, sys.D.d2
    fbar_x = 0.5 * (F.vx[:-1] + F.vx[1:])
    fbar_y = 0.5 * (F.vy[:, :-1] + F.vy[:, 1:])
    vx = fbar_x * grid.hx / d1
    vy = fbar_y * grid.hy / d2
    cx = d1 / grid.hx
    cy = d2 / grid.hy
    return FaceCoefficients(
        cx * bernoulli(-vx), cx * bernoulli(vx),
        cy * bernoulli(-vy), cy * bernoulli(vy),
    )


@dataclass(frozen=True, eq=False)
class FokkerPlanckOperator:
    """Sparse generator L with (L rho)[cell] = discrete div[(D grad - F) rho]."""

    matrix: sp.csr_matrix
    grid: Grid
    coefficients: FaceCoefficients

    @property
    def norm(self) -> float:
        return float(spla.norm(self.matrix, np.inf))

    def apply(self, rho: np.ndarray) -> np.ndarray:
        return (self.matrix @ rho.ravel()).reshape(self.grid.shape)


def assemble_operator(sys: System, grid: Grid) -> FokkerPlanckOperator:
    coef = face_coefficients(sys, grid)
    nx, ny = grid.shape
    idx = np.arange(nx * ny).reshape(nx, ny)
    rows, cols, vals = [], [], []

    def add_faces(left, right, wl, wr, h):
        # flux J = wl*rho_l - wr*rho_r leaves the left cell and enters the right one
        l, r = left.ravel(), right.ravel()
        wl, wr = wl.ravel() / h, wr.ravel() / h
        rows.extend([l, l, r, r])
        cols.extend([l, r, l, r])
        vals.extend([-wl, wr, wl, -wr])

    add_faces(idx[:-1], idx[1:], coef.wx_left, coef.wx_right, grid.hx)
    add_faces(idx[:, :-1], idx[:, 1:], coef.wy_left, coef.wy_right, grid.hy)
    L = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nx * ny, nx * ny),
    ).tocsr()
    L.sum_duplicates()
    return FokkerPlanckOperator(L, grid, coef)


@dataclass(frozen=True, eq=False)
class SteadyState:
    rho: ScalarField
    J: FaceField
    residual_linf: float
    z: float
    iterations: int

    @property
    def grid(self) -> Grid:
        return self.rho.grid


def _faces_from_coefficients(rho: np.ndarray, coef: FaceCoefficients, grid: Grid) -> FaceField:
    nx, ny = grid.shape
    fx = np.zeros((nx + 1, ny))
    fy = np.zeros((nx, ny + 1))
    fx[1:-1] = coef.wx_left * rho[:-1] - coef.wx_right * rho[1:]
    fy[:, 1:-1] = coef.wy_left * rho[:, :-1] - coef.wy_right * rho[:, 1:]
    return FaceField(grid, fx, fy)


def solve_steady(
    op: FokkerPlanckOperator,
    grid: Grid | None = None,
    *,
    seed: int | None = None,
    max_iters: int = 200,
    rel_shift: float = 1e-10,
    rel_tol: float = 1e-11,
) -> SteadyState:
    """Positive normalised kernel vector of L by shifted inverse iteration.

    Iterates (sigma I - L) w_new = w_old with sigma = rel_shift * ||L||_inf.
    sigma I - L is a nonsingular M-matrix, so a positive start vector stays
    positive; it is factorised once with diagonal pivoting.  Stops when
    ||L rho||_inf / ||rho||_inf < rel_tol * ||L||_inf.
    """
    grid = grid or op.grid
    L = op.matrix
    n = L.shape[0]
    norm = op.norm
    sigma = rel_shift * norm
    tol = rel_tol * norm
    shifted = (sp.identity(n, format="csc") * sigma - L).tocsc()
    lu = spla.splu(
        shifted,
        permc_spec="MMD_AT_PLUS_A",
        diag_pivot_thresh=0.0,
        options={"SymmetricMode": True},
    )
    if seed is None:
        w = np.ones(n)
    else:
        w = np.random.default_rng(seed).uniform(0.5, 1.5, n)
    dA = grid.cell_area
    residual = np.inf
    z = 1.0
    for it in range(1, max_iters + 1):
        w = lu.solve(w)
        z = float(w.sum() * dA)
        w = w / z
        residual = float(np.abs(L @ w).max() / np.abs(w).max())
        if residual < tol:
            break
    else:
        raise SolverError(f"inverse iteration did not converge in {max_iters} iterations (residual {residual:.3e}, tol {tol:.3e})")
    if w.min() < -1e-14 * w.max():
        raise SolverError(f"stationary density has negative entries (min {w.min():.3e}); assembly is inconsistent")
    rho = np.maximum(w, 0.0).reshape(grid.shape)
    if rho.min() <= 0.0:
        log.warning("stationary density underflows to zero in %d cells", int((rho <= 0).sum()))
    J = _faces_from_coefficients(rho, op.coefficients, grid)
    log.debug("steady state: %d iterations, residual %.3e", it, residual)
    return SteadyState(ScalarField(grid, rho), J, residual, z, it)


def solve_system(sys: System, grid: Grid, **kwargs) -> SteadyState:
    """Assemble and solve in one call."""
    return solve_steady(assemble_operator(sys, grid), grid, **kwargs)


def reconstruct_current(state: SteadyState, sys: System) -> FaceField:
    """Scharfetter-Gummel face fluxes of the invariant current."""
    grid = state.grid
    return _faces_from_coefficients(state.rho.values, face_coefficients(sys, grid), grid)


# ---------------------------------------------------------------------------
# Export


def write_csv(state: SteadyState, path) -> None:
    """Columns i, j, x, y, rho; one row per cell, i outer, 17 significant digits."""
    grid = state.grid
    X, Y = grid.centers()
    I, Jx = np.meshgrid(np.arange(grid.nx), np.arange(grid.ny), indexing="ij")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("i,j,x,y,rho\n")
        for i, j, x, y, r in zip(I.ravel(), Jx.ravel(), X.ravel(), Y.ravel(), state.rho.values.ravel()):
            fh.write(f"{i},{j},{x:.17g},{y:.17g},{r:.17g}\n")


def write_binary(state: SteadyState, path) -> None:
    """Little-endian: b'EPRS', uint32 nx, uint32 ny, 4 float64 bounds, then rho row-major."""
    grid = state.grid
    d = grid.domain
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(BINARY_MAGIC, grid.nx, grid.ny, d.x_min, d.x_max, d.y_min, d.y_max))
        fh.write(np.ascontiguousarray(state.rho.values, dtype="<f8").tobytes())


def read_binary(path) -> ScalarField:
    from .model import Domain

    raw = Path(path).read_bytes()
    magic, nx, ny, x0, x1, y0, y1 = _HEADER.unpack_from(raw)
    if magic != BINARY_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    values = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if values.size != nx * ny:
        raise ValueError(f"{path}: expected {nx * ny} values, found {values.size}")
    grid = Grid(Domain(x0, x1, y0, y1), nx, ny)
    return ScalarField(grid, values.reshape(nx, ny).astype(float))
