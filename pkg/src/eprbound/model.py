"""Grids, fields, diffusion matrices and the system catalog.

Every field lives on a uniform rectangular grid.  Scalars and cell vectors
are stored at cell centres as ``(nx, ny)`` arrays indexed ``[i, j]`` with
``i`` running along x.  Face fields follow the staggered (MAC) layout:
``fx`` has shape ``(nx + 1, ny)`` on the vertical faces and ``fy`` has shape
``(nx, ny + 1)`` on the horizontal ones.

Perpendicular gradients use the convention ``grad_perp f = (df/dy, -df/dx)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Union

import numpy as np

from .expr import Expression, ExpressionError, parse

CATALOG = ("rot-ou", "grad-dw", "designed-dw", "nl-rot")

MIN_CELLS = 8


class ModelError(ValueError):
    """Invalid system, grid or diffusion specification."""


# ---------------------------------------------------------------------------
# Geometry


@dataclass(frozen=True)
class Domain:
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.x_max, self.y_min, self.y_max)
        if not all(np.isfinite(v) for v in vals):
            raise ModelError(f"domain bounds must be finite, got {vals}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ModelError(f"degenerate domain {vals}")

    @classmethod
    def square(cls, half_width: float, center=(0.0, 0.0)) -> "Domain":
        cx, cy = center
        return cls(cx - half_width, cx + half_width, cy - half_width, cy + half_width)

    @property
    def lx(self) -> float:
        return self.x_max - self.x_min

    @property
    def ly(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.lx * self.ly

    def scaled(self, s: float) -> "Domain":
        """Dilate about the centre by factor ``s``."""
        cx = 0.5 * (self.x_min + self.x_max)
        cy = 0.5 * (self.y_min + self.y_max)
        hx, hy = 0.5 * s * self.lx, 0.5 * s * self.ly
        return Domain(cx - hx, cx + hx, cy - hy, cy + hy)

    def bounds(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.x_max, self.y_min, self.y_max)


@dataclass(frozen=True)
class Grid:
    domain: Domain
    nx: int
    ny: int

    def __post_init__(self):
        if int(self.nx) != self.nx or int(self.ny) != self.ny:
            raise ModelError("grid sizes must be integers")
        if self.nx < MIN_CELLS or self.ny < MIN_CELLS:
            raise ModelError(f"grid needs at least {MIN_CELLS} cells per axis, got {self.nx}x{self.ny}")

    @classmethod
    def uniform(cls, domain: Domain, n: int) -> "Grid":
        return cls(domain, n, n)

    @property
    def hx(self) -> float:
        return self.domain.lx / self.nx

    @property
    def hy(self) -> float:
        return self.domain.ly / self.ny

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def xc(self) -> np.ndarray:
        return self.domain.x_min + (np.arange(self.nx) + 0.5) * self.hx

    @property
    def yc(self) -> np.ndarray:
        return self.domain.y_min + (np.arange(self.ny) + 0.5) * self.hy

    @property
    def xf(self) -> np.ndarray:
        return self.domain.x_min + np.arange(self.nx + 1) * self.hx

    @property
    def yf(self) -> np.ndarray:
        return self.domain.y_min + np.arange(self.ny + 1) * self.hy

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.xc, self.yc, indexing="ij")

    def vertical_faces(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.xf, self.yc, indexing="ij")

    def horizontal_faces(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.xc, self.yf, indexing="ij")

    def nodes(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.xf, self.yf, indexing="ij")

    def refined(self, factor: int = 2) -> "Grid":
        return Grid(self.domain, self.nx * factor, self.ny * factor)


# ---------------------------------------------------------------------------
# Fields


def _finite(name: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ModelError(f"{name} contains non-finite values")


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: Grid
    values: np.ndarray
    mask: np.ndarray | None = None  # True marks flagged / excluded cells

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise ModelError(f"scalar field shape {self.values.shape} != grid {self.grid.shape}")
        _finite("scalar field", self.values)

    def integral(self) -> float:
        return float(self.values.sum() * self.grid.cell_area)


@dataclass(frozen=True, eq=False)
class CellVectorField:
    grid: Grid
    vx: np.ndarray
    vy: np.ndarray

    def __post_init__(self):
        if self.vx.shape != self.grid.shape or self.vy.shape != self.grid.shape:
            raise ModelError("cell vector field shape does not match grid")
        _finite("cell vector field", self.vx, self.vy)


@dataclass(frozen=True, eq=False)
class FaceField:
    grid: Grid
    fx: np.ndarray
    fy: np.ndarray

    def __post_init__(self):
        nx, ny = self.grid.shape
        if self.fx.shape != (nx + 1, ny) or self.fy.shape != (nx, ny + 1):
            raise ModelError("face field shape does not match grid")
        _finite("face field", self.fx, self.fy)

    def divergence(self) -> np.ndarray:
        """Discrete divergence at cell centres."""
        g = self.grid
        return np.diff(self.fx, axis=0) / g.hx + np.diff(self.fy, axis=1) / g.hy

    def boundary_max(self) -> float:
        return float(max(
            np.abs(self.fx[0]).max(), np.abs(self.fx[-1]).max(),
            np.abs(self.fy[:, 0]).max(), np.abs(self.fy[:, -1]).max(),
        ))

    def to_cells(self) -> CellVectorField:
        """Average face values to cell centres."""
        return CellVectorField(
            self.grid,
            0.5 * (self.fx[:-1] + self.fx[1:]),
            0.5 * (self.fy[:, :-1] + self.fy[:, 1:]),
        )


@dataclass(frozen=True)
class DiffusionMatrix:
    """Constant diagonal diffusion matrix diag(d1, d2)."""

    d1: float
    d2: float

    def __post_init__(self):
        if not (np.isfinite(self.d1) and np.isfinite(self.d2)) or self.d1 <= 0 or self.d2 <= 0:
            raise ModelError(f"diffusion matrix must be positive definite, got diag({self.d1}, {self.d2})")

    @classmethod
    def isotropic(cls, d0: float) -> "DiffusionMatrix":
        return cls(d0, d0)

    @property
    def lambda_min(self) -> float:
        return min(self.d1, self.d2)

    @property
    def lambda_max(self) -> float:
        return max(self.d1, self.d2)

    @property
    def is_isotropic(self) -> bool:
        return self.d1 == self.d2

    def normalized(self) -> "DiffusionMatrix":
        """D / ||D|| (spectral norm)."""
        n = self.lambda_max
        return DiffusionMatrix(self.d1 / n, self.d2 / n)

    def scaled(self, eps: float) -> "DiffusionMatrix":
        return DiffusionMatrix(eps * self.d1, eps * self.d2)


# ---------------------------------------------------------------------------
# Systems


@dataclass(frozen=True)
class Catalog:
    name: str
    params: Mapping[str, float]


@dataclass(frozen=True)
class Custom:
    fx: Expression
    fy: Expression


@dataclass(frozen=True)
class Designed:
    """Drift built from a potential, a stream amplitude and a boundary bump.

    With psi = a * bump * exp(-phi), the drift
    F = -D grad(phi) + exp(phi) grad_perp(psi) has stationary density
    proportional to exp(-phi) and zero boundary flux.
    """

    phi: Expression
    a: Expression
    bump: Expression


Variant = Union[Catalog, Custom, Designed]


def _fd_grad(f, x: np.ndarray, y: np.ndarray, h: float):
    """Fourth-order central differences of a vectorised f(x, y)."""
    c = 1.0 / (12.0 * h)
    gx = c * (-f(x + 2 * h, y) + 8 * f(x + h, y) - 8 * f(x - h, y) + f(x - 2 * h, y))
    gy = c * (-f(x, y + 2 * h) + 8 * f(x, y + h) - 8 * f(x, y - h) + f(x, y - 2 * h))
    return gx, gy


@dataclass(frozen=True, eq=False)
class System:
    name: str
    variant: Variant
    D: DiffusionMatrix
    domain: Domain
    params: Mapping[str, float] = field(default_factory=dict)

    @property
    def is_designed(self) -> bool:
        return isinstance(self.variant, Designed)

    @property
    def fd_step(self) -> float:
        return 2e-4 * max(self.domain.lx, self.domain.ly)

    def drift(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Drift F at arbitrary points (vectorised)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        v = self.variant
        if isinstance(v, Catalog):
            fx, fy = _catalog_drift(v.name, v.params, x, y)
        elif isinstance(v, Custom):
            fx, fy = v.fx(x, y), v.fy(x, y)
        else:
            gx, gy = _fd_grad(v.phi, x, y, self.fd_step)
            ix, iy = self.designed_irreversible_drift(x, y)
            fx, fy = -self.D.d1 * gx + ix, -self.D.d2 * gy + iy
        fx, fy = np.broadcast_arrays(fx, fy)
        return np.array(fx, dtype=float), np.array(fy, dtype=float)

    def designed_irreversible_drift(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """exp(phi) grad_perp(psi) by centred differences of psi.

        The factor exp(phi(x0)) is folded into the stencil as
        exp(-(phi - phi(x0))) so nothing overflows where phi is large.
        """
        v = self.variant
        if not isinstance(v, Designed):
            raise ModelError(f"system {self.name!r} is not a designed system")
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        phi0 = v.phi(x, y)

        def psi_rel(xx, yy):
            return v.a(xx, yy) * v.bump(xx, yy) * np.exp(-(v.phi(xx, yy) - phi0))

        dpx, dpy = _fd_grad(psi_rel, x, y, self.fd_step)
        return dpy, -dpx

    def drift_field(self, grid: Grid) -> CellVectorField:
        X, Y = grid.centers()
        fx, fy = self.drift(X, Y)
        if not (np.all(np.isfinite(fx)) and np.all(np.isfinite(fy))):
            raise ModelError(f"drift of {self.name!r} is not finite on the grid")
        return CellVectorField(grid, fx, fy)

    def with_diffusion(self, D: DiffusionMatrix) -> "System":
        return System(self.name, self.variant, D, self.domain, self.params)

    def with_params(self, **params) -> "System":
        """Rebuild a catalog system with some parameters replaced."""
        base = _catalog_params(self.name)
        base.update(self.params)
        base.update(params)
        return build_system({"variant": "catalog", "name": self.name, "params": base})


def _grad_perp_u(x, y):
    """grad_perp of U = (x^2 - 1)^2 + y^2."""
    ux = 4.0 * x * (x * x - 1.0)
    uy = 2.0 * y
    return ux, uy


def _catalog_drift(name: str, p: Mapping[str, float], x, y):
    if name == "rot-ou":
        g, a = p["gamma"], p["alpha"]
        return -g * x - a * y, a * x - g * y
    if name == "grad-dw":
        ux, uy = _grad_perp_u(x, y)
        return -ux, -uy
    if name == "nl-rot":
        ux, uy = _grad_perp_u(x, y)
        s = p["alpha"] * (1.0 + p["kappa"] * x)
        return -ux + s * uy, -uy - s * ux
    raise ModelError(f"no closed-form drift for {name!r}")


_CATALOG_DEFAULTS: dict[str, dict[str, float]] = {
    "rot-ou": {"gamma": 1.0, "alpha": 1.0, "D0": 1.0, "L": 6.0},
    "grad-dw": {"D0": 1.0, "L": 2.0},
    "designed-dw": {"amplitude": 0.5, "kappa": 0.4, "D0": 1.0, "L": 2.0},
    "nl-rot": {"alpha": 1.0, "kappa": 0.4, "D0": 1.0, "L": 2.0},
}


def _catalog_params(name: str) -> dict[str, float]:
    if name not in _CATALOG_DEFAULTS:
        raise ModelError(f"unknown catalog system {name!r}; valid names: {', '.join(CATALOG)}")
    return dict(_CATALOG_DEFAULTS[name])


def _expr(text: str, what: str) -> Expression:
    try:
        return parse(text)
    except ExpressionError as exc:
        raise ModelError(f"{what}: {exc}") from exc


def _diffusion(spec: Mapping[str, Any], d0: float) -> DiffusionMatrix:
    d = spec.get("diffusion")
    if d is None:
        return DiffusionMatrix.isotropic(d0)
    return DiffusionMatrix(float(d["d1"]), float(d["d2"]))


def _domain(spec: Mapping[str, Any], half_width: float | None) -> Domain:
    d = spec.get("domain")
    if d is None:
        if half_width is None:
            raise ModelError("a domain is required for custom and designed systems")
        return Domain.square(half_width)
    if isinstance(d, Domain):
        return d
    return Domain(float(d["x_min"]), float(d["x_max"]), float(d["y_min"]), float(d["y_max"]))


def build_system(spec: Mapping[str, Any]) -> System:
    """Build a :class:`System` from a parsed configuration block.

    ``spec["variant"]`` selects ``"catalog"`` (with ``name`` and optional
    ``params``), ``"custom"`` (``fx``, ``fy`` expressions) or ``"designed"``
    (``phi``, ``a``, ``bump`` expressions).  Optional ``domain`` and
    ``diffusion`` blocks override defaults.
    """
    variant = spec.get("variant", "catalog")
    if variant == "catalog":
        name = spec.get("name")
        params = _catalog_params(name)
        for k, v in dict(spec.get("params") or {}).items():
            if k not in params:
                raise ModelError(f"unknown parameter {k!r} for {name!r}; expected {sorted(params)}")
            params[k] = float(v)
        D = _diffusion(spec, params["D0"])
        domain = _domain(spec, params["L"])
        if name == "designed-dw":
            A, k, L = params["amplitude"], params["kappa"], params["L"]
            v: Variant = Designed(
                phi=parse("(x^2 - 1)^2 + y^2"),
                a=parse(f"{A!r}*(1 + {k!r}*x)"),
                bump=parse(f"(1 - (x/{L!r})^2)*(1 - (y/{L!r})^2)"),
            )
        else:
            v = Catalog(name, params)
        sys = System(name, v, D, domain, params)
    elif variant == "custom":
        v = Custom(_expr(spec["fx"], "fx"), _expr(spec["fy"], "fy"))
        sys = System(spec.get("name", "custom"), v, _diffusion(spec, 1.0), _domain(spec, None))
    elif variant == "designed":
        v = Designed(_expr(spec["phi"], "phi"), _expr(spec["a"], "a"), _expr(spec.get("bump", "1"), "bump"))
        sys = System(spec.get("name", "designed"), v, _diffusion(spec, 1.0), _domain(spec, None))
    else:
        raise ModelError(f"unknown system variant {variant!r}; expected catalog, custom or designed")
    # surface expression errors now rather than mid-solve
    try:
        sys.drift(np.array([sys.domain.x_min, sys.domain.x_max]), np.array([sys.domain.y_min, sys.domain.y_max]))
    except ExpressionError as exc:
        raise ModelError(f"drift of {sys.name!r} cannot be evaluated: {exc}") from exc
    return sys


# ---------------------------------------------------------------------------
# Designed-system oracles


def designed_ground_truth(sys: System, grid: Grid) -> tuple[ScalarField, CellVectorField]:
    """Exact stationary density and irreversible drift of a designed system.

    The density is exp(-phi) normalised so that its cell sum times the cell
    area is one.  Cells whose density underflows below 1e-290 are flagged in
    ``rho.mask``.
    """
    v = sys.variant
    if not isinstance(v, Designed):
        raise ModelError(f"system {sys.name!r} is not a designed system")
    X, Y = grid.centers()
    phi = v.phi(X, Y)
    w = np.exp(-(phi - phi.min()))
    rho = w / (w.sum() * grid.cell_area)
    flagged = rho < 1e-290
    fx, fy = sys.designed_irreversible_drift(X, Y)
    return ScalarField(grid, rho, flagged if flagged.any() else None), CellVectorField(grid, fx, fy)


def designed_face_current(sys: System, grid: Grid) -> FaceField:
    """Exact invariant current grad_perp(psi) / Z sampled at face midpoints.

    Z is the same cell-sum normalisation used by :func:`designed_ground_truth`.
    """
    v = sys.variant
    if not isinstance(v, Designed):
        raise ModelError(f"system {sys.name!r} is not a designed system")
    X, Y = grid.centers()
    phi_min = v.phi(X, Y).min()
    z = np.exp(-(v.phi(X, Y) - phi_min)).sum() * grid.cell_area

    def current(xx, yy):
        ix, iy = sys.designed_irreversible_drift(xx, yy)
        w = np.exp(-(v.phi(xx, yy) - phi_min)) / z
        return ix * w, iy * w

    xv, yv = grid.vertical_faces()
    xh, yh = grid.horizontal_faces()
    jx, _ = current(xv, yv)
    _, jy = current(xh, yh)
    return FaceField(grid, jx, jy)
