"""Euler-Maruyama ensembles in the closed box with reflecting walls.

Each path draws from its own Philox generator seeded by
``SeedSequence(master_seed, spawn_key=(path_index,))``, so results do not
depend on how paths are scheduled over threads.  The drift is tabulated once
on a fine node lattice and interpolated bilinearly inside the compiled
kernel; registered weight fields (cell-centred) are interpolated the same way
at the midpoint of every step.

For every weight field w the kernel accumulates sum w(x_mid) * dx separately
per component and per time window.  The entropy-production estimator and
the uncertainty-relation bound are both built from these sums.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np

from .funct import Decomposition
from .model import CellVectorField, DiffusionMatrix, Grid, ScalarField, System

log = logging.getLogger(__name__)

DEFAULT_TABLE_CELLS = 1024
STABILITY_FRACTION = 0.1

# kernel status codes
_OK, _NONFINITE, _ESCAPED = 0, 1, 2


class SimulationError(RuntimeError):
    """Invalid simulation setup or a path that blew up."""


@dataclass(frozen=True)
class SimConfig:
    dt: float
    t_max: float
    n_paths: int
    master_seed: int = 0
    initial: str | tuple[float, float] = "stationary"
    window: float | None = None   # accumulator window length; default t_max / 100
    thin: int = 1000              # keep every thin-th state
    burn_in: float = 0.0

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not (self.t_max >= self.dt):
            raise ValueError(f"t_max must be at least dt, got {self.t_max}")
        if int(self.n_paths) != self.n_paths or self.n_paths < 1:
            raise ValueError(f"n_paths must be a positive integer, got {self.n_paths}")
        if not (0 <= int(self.master_seed) < 2 ** 64):
            raise ValueError(f"master_seed must fit in 64 unsigned bits, got {self.master_seed}")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        if self.window is not None and not (self.dt <= self.window <= self.t_max):
            raise ValueError(f"window must lie in [dt, t_max], got {self.window}")
        if not (self.initial == "stationary" or (isinstance(self.initial, (tuple, list)) and len(self.initial) == 2)):
            raise ValueError(f"initial must be 'stationary' or a point (x, y), got {self.initial!r}")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_max / self.dt))

    @property
    def window_steps(self) -> int:
        w = self.window if self.window is not None else self.t_max / 100.0
        return max(1, int(round(w / self.dt)))


@dataclass
class EstimatorResult:
    value: float
    stderr: float
    n_samples: int
    skipped: int = 0
    defined: bool = True

    def __str__(self) -> str:
        return f"{self.value:.6g} +/- {self.stderr:.2g}"


@dataclass(frozen=True, eq=False)
class DriftTable:
    x0: float
    y0: float
    hx: float
    hy: float
    fx: np.ndarray  # (n+1, n+1) node values
    fy: np.ndarray

    @property
    def max_speed(self) -> float:
        return float(np.sqrt(self.fx ** 2 + self.fy ** 2).max())


def tabulate_drift(sys: System, n: int = DEFAULT_TABLE_CELLS) -> DriftTable:
    d = sys.domain
    xs = np.linspace(d.x_min, d.x_max, n + 1)
    ys = np.linspace(d.y_min, d.y_max, n + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    fx, fy = sys.drift(X, Y)
    if not (np.all(np.isfinite(fx)) and np.all(np.isfinite(fy))):
        raise SimulationError(f"drift of {sys.name!r} is not finite on the domain")
    return DriftTable(d.x_min, d.y_min, d.lx / n, d.ly / n, np.ascontiguousarray(fx), np.ascontiguousarray(fy))


@numba.njit(cache=True, nogil=True, inline="always")
def _bilinear(tab, tx, ty):
    # tab sampled at integer (tx, ty); clamps to the table edge
    ni = tab.shape[0] - 1
    nj = tab.shape[1] - 1
    tx = min(max(tx, 0.0), ni)
    ty = min(max(ty, 0.0), nj)
    i = min(int(tx), ni - 1)
    j = min(int(ty), nj - 1)
    a = tx - i
    b = ty - j
    return ((1 - a) * (1 - b) * tab[i, j] + a * (1 - b) * tab[i + 1, j]
            + (1 - a) * b * tab[i, j + 1] + a * b * tab[i + 1, j + 1])


@numba.njit(cache=True, nogil=True, inline="always")
def _reflect(v, lo, hi):
    while v < lo or v > hi:
        if v < lo:
            v = 2 * lo - v
        else:
            v = 2 * hi - v
    return v


@numba.njit(cache=True, nogil=True)
def _run_path(gen, x, y, n_burn, n_steps, dt, sd1, sd2,
              tx0, ty0, thx, thy, tfx, tfy,
              bounds, cx0, cy0, chx, chy, weights, mask,
              window_steps, thin, acc, states, bbox):
    """Advance one path; returns (status, skipped-steps)."""
    xmin, xmax, ymin, ymax = bounds[0], bounds[1], bounds[2], bounds[3]
    nx = mask.shape[0]
    ny = mask.shape[1]
    n_w = weights.shape[0]
    n_windows = acc.shape[1] - 1
    s2 = math.sqrt(2.0 * dt)
    skipped = 0
    bbox[0] = x
    bbox[1] = x
    bbox[2] = y
    bbox[3] = y
    for step in range(n_burn + n_steps):
        fx = _bilinear(tfx, (x - tx0) / thx, (y - ty0) / thy)
        fy = _bilinear(tfy, (x - tx0) / thx, (y - ty0) / thy)
        xn = x + fx * dt + s2 * sd1 * gen.standard_normal()
        yn = y + fy * dt + s2 * sd2 * gen.standard_normal()
        if not (math.isfinite(xn) and math.isfinite(yn)):
            return _NONFINITE, skipped
        xn = _reflect(xn, xmin, xmax)
        yn = _reflect(yn, ymin, ymax)
        if step >= n_burn:
            k = step - n_burn
            dx = xn - x
            dy = yn - y
            xm = 0.5 * (x + xn)
            ym = 0.5 * (y + yn)
            ci = min(int((xm - xmin) / chx), nx - 1)
            cj = min(int((ym - ymin) / chy), ny - 1)
            if mask[ci, cj]:
                skipped += 1
            else:
                win = min(k // window_steps, n_windows)
                ux = (xm - cx0) / chx
                uy = (ym - cy0) / chy
                for w in range(n_w):
                    acc[w, win, 0] += _bilinear(weights[w, 0], ux, uy) * dx
                    acc[w, win, 1] += _bilinear(weights[w, 1], ux, uy) * dy
            if (k + 1) % thin == 0:
                r = (k + 1) // thin - 1
                if r < states.shape[0]:
                    states[r, 0] = xn
                    states[r, 1] = yn
            if xn < bbox[0]:
                bbox[0] = xn
            if xn > bbox[1]:
                bbox[1] = xn
            if yn < bbox[2]:
                bbox[2] = yn
            if yn > bbox[3]:
                bbox[3] = yn
        x = xn
        y = yn
    if bbox[0] < xmin or bbox[1] > xmax or bbox[2] < ymin or bbox[3] > ymax:
        return _ESCAPED, skipped
    return _OK, skipped


@dataclass(eq=False)
class Ensemble:
    config: SimConfig
    D: DiffusionMatrix
    weight_names: list[str]
    weight_fields: dict[str, CellVectorField]
    acc: np.ndarray       # (n_paths, n_weights, n_windows + 1, 2); last slot holds the leftover steps
    states: np.ndarray    # (n_paths, n_states, 2)
    skipped: np.ndarray   # (n_paths,)
    bbox: np.ndarray      # (n_paths, 4) x_min, x_max, y_min, y_max visited
    window_steps: int
    threads: int = 1
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.acc.shape[0]

    @property
    def t_path(self) -> float:
        return self.config.n_steps * self.config.dt

    @property
    def window_length(self) -> float:
        return self.window_steps * self.config.dt

    def totals(self, name: str) -> np.ndarray:
        """Per-path component sums (n_paths, 2) for a registered weight."""
        return self.acc[:, self.weight_names.index(name)].sum(axis=1)

    def windows(self, name: str, factor: int = 1) -> np.ndarray:
        """Per-path window sums (n_paths, n_windows // factor, 2), merging ``factor`` base windows."""
        a = self.acc[:, self.weight_names.index(name), :-1]
        n = (a.shape[1] // factor) * factor
        return a[:, :n].reshape(a.shape[0], -1, factor, 2).sum(axis=2)


def thread_count(requested: int | None = None) -> int:
    cap = os.environ.get("EPR_THREADS")
    n = requested or os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            log.warning("ignoring malformed EPR_THREADS=%r", cap)
    return max(1, n)


def path_generator(master_seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))))


def _initial_point(gen, cfg: SimConfig, grid: Grid, cdf: np.ndarray | None):
    if cfg.initial != "stationary":
        return float(cfg.initial[0]), float(cfg.initial[1])
    k = int(np.searchsorted(cdf, gen.random() * cdf[-1], side="right"))
    k = min(k, cdf.size - 1)
    i, j = divmod(k, grid.ny)
    x = grid.domain.x_min + (i + gen.random()) * grid.hx
    y = grid.domain.y_min + (j + gen.random()) * grid.hy
    return x, y


def simulate(
    sys: System,
    cfg: SimConfig,
    *,
    rho: ScalarField | None = None,
    dec: Decomposition | None = None,
    weights: dict[str, CellVectorField] | None = None,
    threads: int | None = None,
    table_cells: int = DEFAULT_TABLE_CELLS,
) -> Ensemble:
    """Run ``cfg.n_paths`` independent paths of dx = F dt + sqrt(2 D) dW.

    ``rho`` is needed for stationary initial conditions.  Passing ``dec``
    registers its irreversible drift under the name ``"f_irr"`` and skips
    steps whose midpoint falls in a floored cell.  Extra ``weights`` are
    registered under their dict keys.
    """
    table = tabulate_drift(sys, table_cells)
    d = sys.domain
    guard = STABILITY_FRACTION * min(d.lx, d.ly)
    if cfg.dt * table.max_speed > guard:
        raise SimulationError(f"dt*max|F| = {cfg.dt * table.max_speed:.3g} exceeds {guard:.3g}; reduce dt")
    fields: dict[str, CellVectorField] = {}
    mask = None
    grid = None
    if dec is not None:
        fields["f_irr"] = dec.f_irr
        mask = dec.mask
        grid = dec.grid
    for name, w in (weights or {}).items():
        if name in fields:
            raise ValueError(f"weight name {name!r} is reserved")
        fields[name] = w
    for w in fields.values():
        if grid is None:
            grid = w.grid
        elif w.grid.shape != grid.shape or w.grid.domain != grid.domain:
            raise ValueError("all weight fields must share one grid")
    if rho is not None:
        grid = grid or rho.grid
    if grid is None:
        grid = Grid.uniform(d, 8)
    if mask is None:
        mask = np.zeros(grid.shape, dtype=bool)
    cdf = None
    if cfg.initial == "stationary":
        if rho is None:
            raise ValueError("stationary initial conditions need the solved density")
        if rho.grid.shape != grid.shape:
            raise ValueError("density and weight fields must share one grid")
        cdf = np.cumsum(rho.values.ravel())
    names = list(fields)
    wstack = np.zeros((max(len(names), 0), 2) + grid.shape)
    for k, n in enumerate(names):
        wstack[k, 0] = fields[n].vx
        wstack[k, 1] = fields[n].vy
    n_steps = cfg.n_steps
    n_burn = int(round(cfg.burn_in / cfg.dt))
    window_steps = min(cfg.window_steps, n_steps)
    n_windows = n_steps // window_steps
    n_states = n_steps // cfg.thin
    acc = np.zeros((cfg.n_paths, len(names), n_windows + 1, 2))
    states = np.zeros((cfg.n_paths, n_states, 2))
    bbox = np.zeros((cfg.n_paths, 4))
    skipped = np.zeros(cfg.n_paths, dtype=np.int64)
    status = np.zeros(cfg.n_paths, dtype=np.int64)
    bounds = np.array(d.bounds(), dtype=float)
    sd1, sd2 = math.sqrt(sys.D.d1), math.sqrt(sys.D.d2)
    mask_u8 = np.ascontiguousarray(mask, dtype=np.uint8)

    def run(p: int) -> None:
        gen = path_generator(cfg.master_seed, p)
        x, y = _initial_point(gen, cfg, grid, cdf)
        status[p], skipped[p] = _run_path(
            gen, x, y, n_burn, n_steps, cfg.dt, sd1, sd2,
            table.x0, table.y0, table.hx, table.hy, table.fx, table.fy,
            bounds, d.x_min + 0.5 * grid.hx, d.y_min + 0.5 * grid.hy, grid.hx, grid.hy,
            wstack, mask_u8, window_steps, cfg.thin, acc[p], states[p], bbox[p],
        )

    nthreads = min(thread_count(threads), cfg.n_paths)
    if nthreads == 1:
        for p in range(cfg.n_paths):
            run(p)
    else:
        with ThreadPoolExecutor(max_workers=nthreads) as pool:
            list(pool.map(run, range(cfg.n_paths)))
    bad = np.flatnonzero(status)
    if bad.size:
        p = int(bad[0])
        what = "non-finite state" if status[p] == _NONFINITE else "particle left the domain"
        raise SimulationError(f"path {p}: {what}")
    return Ensemble(cfg, sys.D, names, fields, acc, states, skipped, bbox, window_steps, nthreads)


def _registered(ens: Ensemble, w: CellVectorField) -> str:
    for name, f in ens.weight_fields.items():
        if f is w or (np.array_equal(f.vx, w.vx) and np.array_equal(f.vy, w.vy)):
            return name
    raise ValueError("weight field was not registered when the ensemble was simulated")


def epr_estimator(ens: Ensemble, dec: Decomposition, D: DiffusionMatrix | None = None) -> EstimatorResult:
    """Time-averaged sum of F_irr(x_mid) . D^-1 dx, averaged over paths."""
    D = D or ens.D
    name = _registered(ens, dec.f_irr)
    per_path = ens.totals(name) @ np.array([1.0 / D.d1, 1.0 / D.d2]) / ens.t_path
    skipped = int(ens.skipped.sum())
    if ens.n_paths > 1:
        stderr = float(per_path.std(ddof=1) / math.sqrt(ens.n_paths))
        return EstimatorResult(float(per_path.mean()), stderr, ens.n_paths, skipped)
    # single path: batch means over windows
    wins = ens.windows(name) @ np.array([1.0 / D.d1, 1.0 / D.d2]) / ens.window_length
    wins = wins.ravel()
    stderr = float(wins.std(ddof=1) / math.sqrt(wins.size)) if wins.size > 1 else math.inf
    return EstimatorResult(float(per_path[0]), stderr, int(wins.size), skipped)


def tur_lower_bound(ens: Ensemble, weight: CellVectorField, T_window: float | None = None) -> EstimatorResult:
    """2 <J>^2 / (T var J) for the current J = sum w(x_mid) . dx over windows of length T.

    ``T_window`` must be a multiple of the accumulation window.  The standard
    error is a delete-one-path jackknife (delete-one-window for one path).
    """
    name = _registered(ens, weight)
    base = ens.window_length
    factor = 1 if T_window is None else int(round(T_window / base))
    if factor < 1 or abs(factor * base - (T_window or base)) > 1e-9 * base:
        raise ValueError(f"T_window must be a positive multiple of {base:g}")
    T = factor * base
    J = ens.windows(name, factor).sum(axis=2)  # (n_paths, n_windows)
    if J.size < 50:
        raise ValueError(f"need at least 50 windows, have {J.size}")

    def bound(samples: np.ndarray) -> float:
        var = samples.var(ddof=1)
        return 2.0 * samples.mean() ** 2 / (T * var) if var > 0 else math.nan

    value = bound(J.ravel())
    if not math.isfinite(value):
        log.warning("zero-variance current; uncertainty bound undefined")
        return EstimatorResult(math.nan, math.nan, J.size, defined=False)
    groups = J if J.shape[0] > 1 else J.reshape(-1, 1)
    g = groups.shape[0]
    loo = np.array([bound(np.delete(groups, k, axis=0).ravel()) for k in range(g)])
    stderr = float(math.sqrt((g - 1) / g * ((loo - loo.mean()) ** 2).sum()))
    return EstimatorResult(float(value), stderr, int(J.size))
