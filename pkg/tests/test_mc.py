import math
from functools import lru_cache

import numpy as np
import pytest

from eprbound.certify import check_theorem1
from eprbound.fpe import SteadyState
from eprbound.funct import decompose
from eprbound.mc import (
    SimConfig,
    SimulationError,
    epr_estimator,
    path_generator,
    simulate,
    thread_count,
    tur_lower_bound,
)
from eprbound.model import CellVectorField, Domain, Grid, ScalarField, build_system
from eprbound.sobolev import domain_constants

from conftest import solved


def _inside(ens, domain):
    b = ens.bbox
    return (b[:, 0].min() >= domain.x_min and b[:, 1].max() <= domain.x_max and
            b[:, 2].min() >= domain.y_min and b[:, 3].max() <= domain.y_max)


@lru_cache(maxsize=None)
def ensemble(name, dt, t_max, n_paths, seed=20240601, window=5.0):
    sys, state, dec, fs = solved(name)
    cfg = SimConfig(dt=dt, t_max=t_max, n_paths=n_paths, master_seed=seed, window=window)
    return simulate(sys, cfg, rho=state.rho, dec=dec)


def _rotation_weight(grid):
    X, Y = grid.centers()
    return CellVectorField(grid, -Y, X)


# ---------------------------------------------------------------------------
# trajectories


def test_zero_drift_samples_uniform_density():
    s = build_system({"variant": "custom", "fx": "0", "fy": "0",
                      "domain": {"x_min": 0, "x_max": 1, "y_min": 0, "y_max": 1}})
    cfg = SimConfig(dt=1e-3, t_max=1000, n_paths=8, master_seed=3, initial=(0.5, 0.5), thin=1000, burn_in=1.0)
    ens = simulate(s, cfg)
    pts = ens.states.reshape(-1, 2)
    assert pts.shape[0] == 8000  # one state per time unit, far beyond the mixing time
    counts, _, _ = np.histogram2d(pts[:, 0], pts[:, 1], bins=8, range=[[0, 1], [0, 1]])
    n, p = pts.shape[0], 1 / 64
    assert np.abs(counts - n * p).max() <= 3 * math.sqrt(n * p * (1 - p))
    assert _inside(ens, s.domain)


def test_rot_ou_second_moment():
    sys, state, dec, _ = solved("rot-ou")
    cfg = SimConfig(dt=1e-3, t_max=200, n_paths=16, master_seed=5, thin=100)
    ens = simulate(sys, cfg, rho=state.rho)
    per_path = (ens.states[:, :, 0] ** 2).mean(axis=1)
    se = per_path.std(ddof=1) / math.sqrt(per_path.size)
    assert abs(per_path.mean() - 1.0) <= 3 * se
    assert _inside(ens, sys.domain)


def test_results_independent_of_thread_count():
    sys, state, dec, _ = solved("designed-dw")
    cfg = SimConfig(dt=1e-3, t_max=20, n_paths=6, master_seed=99, window=0.5, thin=50)
    a = simulate(sys, cfg, rho=state.rho, dec=dec, threads=1)
    b = simulate(sys, cfg, rho=state.rho, dec=dec, threads=4)
    c = simulate(sys, cfg, rho=state.rho, dec=dec, threads=3)
    for other in (b, c):
        assert np.array_equal(a.acc, other.acc)
        assert np.array_equal(a.states, other.states)
        assert np.array_equal(a.bbox, other.bbox)


def test_path_generators_are_keyed_by_seed_and_index():
    a = path_generator(7, 3).standard_normal(4)
    assert np.array_equal(a, path_generator(7, 3).standard_normal(4))
    assert not np.array_equal(a, path_generator(7, 4).standard_normal(4))
    assert not np.array_equal(a, path_generator(8, 3).standard_normal(4))


def test_thread_cap_from_environment(monkeypatch):
    monkeypatch.setenv("EPR_THREADS", "2")
    assert thread_count(8) == 2
    monkeypatch.setenv("EPR_THREADS", "many")
    assert thread_count(3) == 3


@pytest.mark.parametrize("kwargs", [
    dict(dt=0.0, t_max=1, n_paths=1),
    dict(dt=1e-3, t_max=1e-4, n_paths=1),
    dict(dt=1e-3, t_max=1, n_paths=0),
    dict(dt=1e-3, t_max=1, n_paths=2.5),
    dict(dt=1e-3, t_max=1, n_paths=1, master_seed=-1),
    dict(dt=1e-3, t_max=1, n_paths=1, window=2.0),
    dict(dt=1e-3, t_max=1, n_paths=1, initial="center"),
    dict(dt=1e-3, t_max=1, n_paths=1, thin=0),
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        SimConfig(**kwargs)


def test_stability_guard():
    sys, state, _, _ = solved("rot-ou")
    with pytest.raises(SimulationError, match="reduce dt"):
        simulate(sys, SimConfig(dt=0.2, t_max=10, n_paths=1), rho=state.rho)


def test_stationary_start_needs_density():
    sys = build_system({"variant": "catalog", "name": "rot-ou"})
    with pytest.raises(ValueError):
        simulate(sys, SimConfig(dt=1e-3, t_max=1, n_paths=1))


def test_masked_cells_are_skipped_and_counted():
    sys, state, _, _ = solved("grad-dw", 64)
    rho = state.rho.values.copy()
    rho[:4, :4] = 0.0
    dec = decompose(sys, SteadyState(ScalarField(state.grid, rho), state.J, state.residual_linf, state.z,
                                     state.iterations))
    cfg = SimConfig(dt=1e-3, t_max=2, n_paths=2, initial=(-1.9, -1.9))
    ens = simulate(sys, cfg, dec=dec)
    assert ens.skipped.sum() > 0
    assert epr_estimator(ens, dec).skipped == ens.skipped.sum()


# ---------------------------------------------------------------------------
# dissipation estimator


@pytest.mark.slow
def test_rot_ou_dissipation_estimate():
    ens = ensemble("rot-ou", 1e-3, 1e4, 64)
    sys, _, dec, _ = solved("rot-ou")
    est = epr_estimator(ens, dec)
    assert est.n_samples == 64 and est.stderr > 0
    assert abs(est.value - 2.0) <= 3 * est.stderr
    assert abs(est.value - 2.0) <= 0.05 * 2.0
    assert _inside(ens, sys.domain)


def test_gradient_system_dissipation_is_zero():
    ens = ensemble("grad-dw", 1e-3, 200, 16)
    est = epr_estimator(ens, solved("grad-dw")[2])
    assert abs(est.value) <= 3 * est.stderr + 1e-12


def test_single_path_uses_batch_means():
    sys, state, dec, _ = solved("rot-ou")
    ens = simulate(sys, SimConfig(dt=1e-3, t_max=200, n_paths=1, window=2.0), rho=state.rho, dec=dec)
    est = epr_estimator(ens, dec)
    assert est.n_samples == 100
    assert abs(est.value - 2.0) <= 4 * est.stderr


def test_halving_dt_reduces_bias():
    sys, state, dec, _ = solved("rot-ou")
    bias = []
    for dt in (0.08, 0.04):
        ens = simulate(sys, SimConfig(dt=dt, t_max=2000, n_paths=32, master_seed=11, window=20.0),
                       rho=state.rho, dec=dec)
        bias.append(abs(epr_estimator(ens, dec).value - 2.0))
    assert bias[1] < bias[0]


# ---------------------------------------------------------------------------
# uncertainty-relation bound


@pytest.mark.slow
def test_rot_ou_uncertainty_bound():
    ens = ensemble("rot-ou", 1e-3, 1e4, 64)
    _, _, dec, fs = solved("rot-ou")
    tur = tur_lower_bound(ens, dec.f_irr)
    assert tur.defined and tur.value > 0
    assert tur.value <= 2.0 + 3 * tur.stderr
    longer = tur_lower_bound(ens, dec.f_irr, T_window=20.0)
    assert longer.n_samples == 64 * 500
    assert longer.value <= fs.epr + 3 * longer.stderr


def test_gradient_system_uncertainty_bound_vanishes():
    sys, state, dec, fs = solved("grad-dw")
    ens = simulate(sys, SimConfig(dt=1e-3, t_max=200, n_paths=16, master_seed=1, window=2.0),
                   rho=state.rho, dec=dec, weights={"rot": _rotation_weight(state.grid)})
    tur = tur_lower_bound(ens, ens.weight_fields["rot"])
    assert tur.value <= fs.epr + 3 * tur.stderr
    assert tur.value <= 1e-2


def test_designed_sandwich():
    sys, state, dec, fs = solved("designed-dw")
    c2 = domain_constants(sys.domain).c2
    ens = simulate(sys, SimConfig(dt=1e-3, t_max=500, n_paths=16, master_seed=2, window=5.0),
                   rho=state.rho, dec=dec, weights={"rot": _rotation_weight(state.grid)})
    rhs = check_theorem1(fs, c2, sys.D.lambda_min)[0].rhs
    for w in (dec.f_irr, ens.weight_fields["rot"]):
        tur = tur_lower_bound(ens, w)
        assert tur.value <= fs.epr + 3 * tur.stderr
    est = epr_estimator(ens, dec)
    assert abs(est.value - fs.epr) <= 3 * est.stderr + 0.01 * fs.epr
    assert fs.epr <= rhs


@pytest.mark.slow
def test_rot_ou_sandwich():
    ens = ensemble("rot-ou", 1e-3, 1e4, 64)
    sys, _, dec, fs = solved("rot-ou")
    tur = tur_lower_bound(ens, dec.f_irr)
    rhs = check_theorem1(fs, domain_constants(sys.domain).c2, 1.0)[0].rhs
    assert tur.value - 3 * tur.stderr <= fs.epr <= rhs


def test_uncertainty_bound_validation():
    sys, state, dec, _ = solved("rot-ou")
    ens = simulate(sys, SimConfig(dt=1e-3, t_max=10, n_paths=2, window=0.5), rho=state.rho, dec=dec)
    with pytest.raises(ValueError, match="multiple"):
        tur_lower_bound(ens, dec.f_irr, T_window=0.75)
    with pytest.raises(ValueError, match="50 windows"):
        tur_lower_bound(ens, dec.f_irr, T_window=1.0)
    with pytest.raises(ValueError, match="registered"):
        tur_lower_bound(ens, _rotation_weight(state.grid))


def test_zero_variance_current_is_undefined():
    sys, state, dec, _ = solved("rot-ou")
    zero = CellVectorField(state.grid, np.zeros(state.grid.shape), np.zeros(state.grid.shape))
    ens = simulate(sys, SimConfig(dt=1e-3, t_max=10, n_paths=2, window=0.1), rho=state.rho,
                   weights={"zero": zero})
    tur = tur_lower_bound(ens, zero)
    assert not tur.defined and math.isnan(tur.value)
