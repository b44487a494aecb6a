"""Discrete estimates of the curl/div Friedrichs constants of a rectangle.

Vector fields live on the staggered (MAC) grid: x-components on vertical
faces, y-components on horizontal faces.  Zero normal trace is imposed by
dropping the wall faces from the unknowns.  Divergence is taken at cell
centres and curl at interior nodes, so discrete gradients and discrete
perpendicular gradients are exactly orthogonal.

    C2 = lambda2 ** -1/2,  lambda2 = min (|curl f|^2 + |div f|^2) / |f|^2 over all fields
    C1 = lambda1 ** -1/2,  lambda1 = min |curl f|^2 / |f|^2 over divergence-free fields

The divergence-free class is parametrised as f = grad_perp(psi) with psi
vanishing on the walls.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import Domain, Grid

log = logging.getLogger(__name__)


class EigenError(RuntimeError):
    """Inverse iteration stagnated or hit a singular operator."""


def _diff_faces_to_cells(n: int, h: float) -> sp.csr_matrix:
    """(n, n-1): interior face values -> cell differences (walls are zero)."""
    return (sp.eye(n, n - 1) - sp.eye(n, n - 1, k=-1)).tocsr() / h


def _diff_cells_to_nodes(n: int, h: float) -> sp.csr_matrix:
    """(n-1, n): cell values -> differences at interior nodes."""
    return (sp.eye(n - 1, n, k=1) - sp.eye(n - 1, n)).tocsr() / h


@dataclass(frozen=True, eq=False)
class MacOperators:
    """Discrete div, curl and grad_perp on zero-normal-trace face fields.

    Unknown vector: [fx interior faces (nx-1, ny), fy interior faces (nx, ny-1)],
    each block flattened with i (x index) outermost.
    """

    grid: Grid
    div: sp.csr_matrix        # -> cells (nx*ny)
    curl: sp.csr_matrix       # -> interior nodes ((nx-1)*(ny-1))
    grad_perp: sp.csr_matrix  # interior-node psi -> face field

    @property
    def n_unknowns(self) -> int:
        return self.div.shape[1]

    def split(self, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        nx, ny = self.grid.shape
        k = (nx - 1) * ny
        return f[:k].reshape(nx - 1, ny), f[k:].reshape(nx, ny - 1)


def mac_operators(grid: Grid) -> MacOperators:
    nx, ny, hx, hy = grid.nx, grid.ny, grid.hx, grid.hy
    Gx = _diff_faces_to_cells(nx, hx)
    Gy = _diff_faces_to_cells(ny, hy)
    Ex = _diff_cells_to_nodes(nx, hx)
    Ey = _diff_cells_to_nodes(ny, hy)
    div = sp.hstack([sp.kron(Gx, sp.eye(ny)), sp.kron(sp.eye(nx), Gy)]).tocsr()
    # curl f = d(fy)/dx - d(fx)/dy at interior nodes
    curl = sp.hstack([-sp.kron(sp.eye(nx - 1), Ey), sp.kron(Ex, sp.eye(ny - 1))]).tocsr()
    # grad_perp psi = (d psi/dy, -d psi/dx); psi on interior nodes, zero on walls
    Py = sp.kron(sp.eye(nx - 1), _diff_faces_to_cells(ny, hy))
    Px = -sp.kron(_diff_faces_to_cells(nx, hx), sp.eye(ny - 1))
    grad_perp = sp.vstack([Py, Px]).tocsr()
    return MacOperators(grid, div, curl, grad_perp)


def norm_sq(v: np.ndarray, grid: Grid) -> float:
    """Discrete L2 norm squared; every unknown carries one cell area."""
    return float(v @ v) * grid.cell_area


@dataclass
class EigenResult:
    value: float
    vector: np.ndarray
    iterations: int


def smallest_eigenpair(A, B=None, *, tol: float = 1e-10, max_iters: int = 500, seed: int = 0) -> EigenResult:
    """Smallest eigenpair of A x = lambda B x (A, B symmetric positive definite).

    Inverse power iteration with one sparse LU of A; stops when the Rayleigh
    quotient changes by less than ``tol`` relatively.
    """
    n = A.shape[0]
    try:
        lu = spla.splu(A.tocsc())
    except RuntimeError as exc:  # exactly singular
        raise EigenError(f"operator is singular: {exc}") from exc
    Bop = (lambda v: v) if B is None else (lambda v: B @ v)
    x = np.random.default_rng(seed).standard_normal(n)
    lam_old = np.inf
    for it in range(1, max_iters + 1):
        y = lu.solve(Bop(x))
        if not np.all(np.isfinite(y)):
            raise EigenError("inverse iteration produced non-finite values (singular operator?)")
        By = Bop(y)
        x = y / math.sqrt(float(y @ By))
        lam = float(x @ (A @ x))
        if abs(lam - lam_old) <= tol * abs(lam):
            return EigenResult(lam, x, it)
        lam_old = lam
    raise EigenError(f"inverse iteration stagnated after {max_iters} iterations (last change {abs(lam - lam_old):.3e})")


def _nullspace_guard(lam: float, A) -> None:
    # a trace-free harmonic field would give lam ~ 0; none exists on a simply connected box
    scale = float(abs(A.diagonal()).max())
    if lam <= 1e-12 * scale:
        raise EigenError(f"nontrivial nullspace detected (lambda={lam:.3e}, scale {scale:.3e})")


def eigen_c2(grid: Grid, **kwargs) -> float:
    """Smallest value of (|curl f|^2 + |div f|^2) / |f|^2 on the grid."""
    ops = mac_operators(grid)
    A = (ops.div.T @ ops.div + ops.curl.T @ ops.curl).tocsc()
    lam = smallest_eigenpair(A, **kwargs).value
    _nullspace_guard(lam, A)
    return lam


def eigen_c1(grid: Grid, **kwargs) -> float:
    """Smallest value of |curl f|^2 / |f|^2 over discretely divergence-free f."""
    ops = mac_operators(grid)
    P = ops.grad_perp
    CP = ops.curl @ P
    A = (CP.T @ CP).tocsc()
    B = (P.T @ P).tocsr()
    lam = smallest_eigenpair(A, B, **kwargs).value
    _nullspace_guard(lam, A)
    return lam


def estimate_c2(grid: Grid) -> float:
    return eigen_c2(grid) ** -0.5


def estimate_c1(grid: Grid) -> float:
    return eigen_c1(grid) ** -0.5


@dataclass
class Extrapolation:
    value: float
    observed_order: float
    extrapolated: bool
    warning: str | None = None


def refine_and_extrapolate(estimates, assumed_order: float = 2.0) -> Extrapolation:
    """Richardson extrapolation of values computed on successively finer grids.

    ``estimates`` is a sequence of ``(h, value)`` pairs (at least three).  The
    two finest levels are combined assuming an ``h**assumed_order`` error; the
    order observed over the three finest levels is reported alongside.  A
    sequence whose increments change sign is not extrapolated: the finest value
    is returned with a warning.
    """
    pts = sorted(((float(h), float(v)) for h, v in estimates), key=lambda t: -t[0])
    if len(pts) < 3:
        raise ValueError("Richardson extrapolation needs at least three grid levels")
    (h1, v1), (h2, v2), (h3, v3) = pts[-3:]
    d1, d2 = v2 - v1, v3 - v2
    if d1 == 0.0 and d2 == 0.0:
        return Extrapolation(v3, float("nan"), False)
    if d1 * d2 <= 0.0:
        msg = "non-monotone refinement sequence; returning finest-grid value"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        return Extrapolation(v3, float("nan"), False, msg)
    order = math.log(abs(d1 / d2)) / math.log(h2 / h3) if h1 / h2 == h2 / h3 else _order_general(pts[-3:])
    r = (h2 / h3) ** assumed_order
    return Extrapolation((r * v3 - v2) / (r - 1.0), order, True)


def _order_general(pts) -> float:
    from scipy.optimize import brentq

    (h1, v1), (h2, v2), (h3, v3) = pts

    def f(p):
        return (v1 - v2) / (h1 ** p - h2 ** p) - (v2 - v3) / (h2 ** p - h3 ** p)

    try:
        return brentq(f, 0.1, 10.0)
    except ValueError:
        return float("nan")


@dataclass
class DomainConstants:
    c1: float
    c2: float
    eigen_c1: float
    eigen_c2: float
    grids_used: list[int]
    extrapolated: bool
    table: list[dict] = field(default_factory=list)
    order_c1: float = float("nan")
    order_c2: float = float("nan")

    def to_json(self) -> dict:
        return {
            "c1": self.c1,
            "c2": self.c2,
            "eigen_c1": self.eigen_c1,
            "eigen_c2": self.eigen_c2,
            "grids_used": list(self.grids_used),
            "extrapolated": self.extrapolated,
            "observed_order": {"c1": self.order_c1, "c2": self.order_c2},
            "per_grid": self.table,
        }


@lru_cache(maxsize=32)
def domain_constants(domain: Domain, grids: tuple[int, ...] = (32, 64, 128)) -> DomainConstants:
    """C1 and C2 of ``domain`` from a refinement study over ``grids`` cells per side."""
    grids = tuple(sorted(int(n) for n in grids))
    rows = []
    for n in grids:
        g = Grid.uniform(domain, n)
        l1, l2 = eigen_c1(g), eigen_c2(g)
        rows.append({"n": n, "h": max(g.hx, g.hy), "eigen_c1": l1, "eigen_c2": l2,
                     "c1": l1 ** -0.5, "c2": l2 ** -0.5})
        log.info("constants n=%d: c1=%.6f c2=%.6f", n, l1 ** -0.5, l2 ** -0.5)
    if len(rows) >= 3:
        e1 = refine_and_extrapolate([(r["h"], r["c1"]) for r in rows])
        e2 = refine_and_extrapolate([(r["h"], r["c2"]) for r in rows])
        c1, c2, o1, o2 = e1.value, e2.value, e1.observed_order, e2.observed_order
        extrapolated = e1.extrapolated and e2.extrapolated
    else:
        c1, c2, o1, o2 = rows[-1]["c1"], rows[-1]["c2"], float("nan"), float("nan")
        extrapolated = False
    if c1 > c2:
        log.warning("c1 %.6g exceeds c2 %.6g; discretisation too coarse", c1, c2)
    return DomainConstants(c1, c2, c1 ** -2, c2 ** -2, list(grids), extrapolated, rows, o1, o2)
