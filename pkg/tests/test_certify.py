import dataclasses
import math

import numpy as np
import pytest

from eprbound import certify
from eprbound.certify import (
    BoundCheck,
    all_checks,
    check_corollary_bounds,
    check_theorem1,
    check_theorem2,
    fw_sweep,
    laplacian_5pt,
    parabolic_locality,
    ratio_trend,
)
from eprbound.fpe import SolverError
from eprbound.model import CATALOG, Domain, Grid, build_system
from eprbound.sobolev import domain_constants

from oracles import designed_dw_reference


def catalog(name, **params):
    spec = {"variant": "catalog", "name": name}
    if params:
        spec["params"] = params
    return build_system(spec)


def _c2(sys):
    return domain_constants(sys.domain).c2


# ---------------------------------------------------------------------------
# BoundCheck semantics


def test_bound_check_slack_and_margin():
    assert BoundCheck("t", 1.0 + 1e-10, 1.0, 1.0, "").holds
    assert not BoundCheck("t", 1.0 + 1e-8, 1.0, 1.0, "").holds
    zero = BoundCheck("t", 0.0, 3.0, 1.0, "")
    assert zero.holds and zero.margin == math.inf
    assert BoundCheck("t", 2.0, 5.0, 1.0, "").margin == 2.5


def test_missing_constants_are_rejected(solved_catalog):
    _, _, dec, fs = solved_catalog("rot-ou")
    with pytest.raises(ValueError):
        check_theorem1(fs, None, 1.0)
    with pytest.raises(ValueError):
        check_theorem2(fs, 1.0, 0.0, 2.0)
    with pytest.raises(ValueError):
        check_theorem2(fs, 1.0, 1.0, 1.0)
    with pytest.raises(ValueError, match="not computed"):
        check_theorem2(fs, 1.0, 1.0, 4.0)


# ---------------------------------------------------------------------------
# vorticity bounds


def test_rot_ou_theorem1_margin(solved_catalog):
    sys, _, _, fs = solved_catalog("rot-ou")
    loose, exact = check_theorem1(fs, _c2(sys), sys.D.lambda_min)
    analytic_rhs = 4 * (12 / math.pi) ** 2 * (4 + 0.25 * 8)
    assert loose.holds and exact.holds
    assert loose.lhs == pytest.approx(2.0, rel=0.02)
    assert loose.rhs == pytest.approx(analytic_rhs, rel=0.02)
    assert loose.margin == pytest.approx(analytic_rhs / 2.0, rel=0.03)


def test_gradient_system_checks_hold(solved_catalog):
    sys, _, dec, fs = solved_catalog("grad-dw")
    checks = all_checks(fs, dec, _c2(sys), sys.D.lambda_min, (1.5, 2.0, 3.0))
    for c in checks:
        assert c.holds, c.name
        # the discrete current of a gradient system is zero up to round-off
        assert c.lhs <= 1e-20


@pytest.mark.parametrize("name", CATALOG)
def test_every_check_holds_on_catalog(solved_catalog, name):
    sys, _, dec, fs = solved_catalog(name)
    checks = all_checks(fs, dec, _c2(sys), sys.D.lambda_min, (1.5, 2.0, 3.0))
    assert len(checks) == 7
    for c in checks:
        assert c.holds, (c.name, c.lhs, c.rhs)
    loose, exact = checks[:2]
    assert exact.rhs <= loose.rhs


def test_designed_checks_match_quadrature_values(solved_catalog):
    sys, _, dec, fs = solved_catalog("designed-dw")
    ref = designed_dw_reference()
    c2 = 4 / math.pi  # side-4 square
    loose, exact = check_theorem1(fs, _c2(sys), 1.0)
    assert loose.rhs == pytest.approx(4 * c2 ** 2 * (ref["v"] + 0.25 * (ref["delta_ls"] + ref["delta_perp"])), rel=0.01)
    assert exact.rhs == pytest.approx(2 * c2 ** 2 * (2 * ref["v"] + 0.5 * ref["delta_perp"] + 0.25 * ref["delta_ls"]),
                                      rel=0.01)
    assert loose.lhs == pytest.approx(ref["epr"], rel=0.005)
    t2 = check_theorem2(fs, _c2(sys), 1.0, 2.0)
    ref_t2 = 2 * c2 ** 2 * ref["sup_rho"] * ref["holder2"] * (math.sqrt(ref["v2"]) + math.sqrt(fs.delta_ls_q[2.0]))
    assert t2.holds
    assert t2.rhs == pytest.approx(ref_t2, rel=0.01)


def test_rot_ou_margin_survives_doubled_rotation(solved_catalog):
    sys, _, _, fs = solved_catalog("rot-ou")
    _, _, _, fs2 = solved_catalog("rot-ou", alpha=2.0)
    c2 = _c2(sys)
    a = check_theorem1(fs, c2, 1.0)[0]
    b = check_theorem1(fs2, c2, 1.0)[0]
    assert b.lhs / a.lhs == pytest.approx(4.0, rel=0.02)
    assert b.rhs / a.rhs == pytest.approx(4.0, rel=0.02)
    assert b.margin == pytest.approx(a.margin, rel=0.02)


def test_theorem2_on_designed_for_several_q(solved_catalog):
    sys, _, _, fs = solved_catalog("designed-dw")
    for q in (1.5, 3.0):
        c = check_theorem2(fs, _c2(sys), 1.0, q)
        assert c.holds and not c.vacuous and c.name == f"theorem2[q={q:g}]"


def test_theorem2_vacuous_cases(solved_catalog):
    sys, _, _, fs = solved_catalog("rot-ou")
    overflow = dataclasses.replace(fs, holder_q={**fs.holder_q, 2.0: math.inf})
    c = check_theorem2(overflow, _c2(sys), 1.0, 2.0)
    assert c.vacuous and c.holds and c.rhs == math.inf
    empty_wall = dataclasses.replace(fs, inf_rho_boundary=0.0)
    assert check_theorem2(empty_wall, _c2(sys), 1.0, 2.0).vacuous


def test_corollary_forms(solved_catalog):
    sys, _, dec, fs = solved_catalog("designed-dw")
    form1, form2 = check_corollary_bounds(fs, dec, _c2(sys), 1.0)
    assert form1.holds and form2.holds
    assert form1.constant_used == pytest.approx(2 * _c2(sys) ** 2 * fs.sup_rho)
    sys, _, dec, fs = solved_catalog("rot-ou")
    _, ratio = check_corollary_bounds(fs, dec, _c2(sys), 1.0)
    assert fs.inf_rho < 1e-14
    assert ratio.holds and ratio.margin > 1e12
    none_inside = dataclasses.replace(fs, inf_rho=0.0)
    assert check_corollary_bounds(none_inside, dec, _c2(sys), 1.0)[1].vacuous


# ---------------------------------------------------------------------------
# low-noise sweep


def test_rot_ou_sweep_is_scale_free():
    res = fw_sweep(catalog("rot-ou"), [1.0, 0.5, 0.25])
    assert not res.truncated and res.last_good_eps == 0.25
    for rec in res.records:
        assert rec.epr == pytest.approx(2.0, rel=0.02)
        assert rec.delta_perp == pytest.approx(8.0, rel=0.02)
        assert rec.epr <= rec.fw_rhs
        assert rec.isotropic_gap <= 1e-10
        assert rec.delta_perp_drift == pytest.approx(rec.delta_perp, rel=0.01)


def test_nl_rot_level_set_share_decreases():
    res = fw_sweep(catalog("nl-rot"), [1.0, 0.5, 0.25, 0.125])
    ratios = [r.ratio_ls_perp for r in res.records]
    assert len(ratios) == 4
    assert all(b < a for a, b in zip(ratios, ratios[1:]))
    for rec in res.records:
        assert all(math.isfinite(v) for v in (rec.epr, rec.v, rec.delta_ls, rec.delta_perp, rec.fw_rhs))
        assert rec.epr <= rec.fw_rhs


def test_sweep_uses_normalised_anisotropic_diffusion():
    s = build_system({"variant": "custom", "fx": "-x - y", "fy": "-y + x", "diffusion": {"d1": 2.0, "d2": 1.0},
                      "domain": {"x_min": -4, "x_max": 4, "y_min": -4, "y_max": 4}})
    res = fw_sweep(s, [1.0, 0.5], grid=64)
    assert len(res.records) == 2
    assert res.records[0].isotropic_gap is None


@pytest.mark.parametrize("eps", [[0.5, 1.0], [1.0, 1.0], [1.0, 0.05]])
def test_sweep_rejects_bad_eps(eps):
    with pytest.raises(ValueError):
        fw_sweep(catalog("rot-ou"), eps, grid=32, c2=1.0)


def test_sweep_truncates_on_solver_failure(monkeypatch):
    real = certify.solve_system

    def flaky(sys, grid):
        if sys.D.d1 < 0.4:
            raise SolverError("no convergence")
        return real(sys, grid)

    monkeypatch.setattr(certify, "solve_system", flaky)
    res = fw_sweep(catalog("rot-ou"), [1.0, 0.5, 0.25, 0.125], grid=32, c2=1.0)
    assert res.truncated and res.last_good_eps == 0.5
    assert [r.eps for r in res.records] == [1.0, 0.5]
    assert "no convergence" in res.error


# ---------------------------------------------------------------------------
# locality


def test_laplacian_of_quadratic():
    g = Grid(Domain(-1, 1, -1, 1), 16, 16)
    X, Y = g.centers()
    lap = laplacian_5pt(3 * X ** 2 + Y ** 2, g)
    np.testing.assert_allclose(lap[1:-1, 1:-1], 8.0, rtol=1e-10)


def test_rot_ou_level_set_numerator_vanishes(solved_catalog):
    sys, state, dec, _ = solved_catalog("rot-ou")
    table = parabolic_locality(sys, state, dec, [0.5, 0.25, 0.125])
    assert abs(table.center[0]) < 1e-12 and abs(table.center[1]) < 1e-12
    assert table.curvature == pytest.approx(2.0, rel=1e-5)
    for row in table.rows:
        assert row.numerator <= 1e-6 * row.numerator_scale
        assert row.ratio is not None and row.ratio <= 1e-6


def test_gradient_system_ratio_undefined(solved_catalog):
    sys, state, dec, _ = solved_catalog("grad-dw")
    table = parabolic_locality(sys, state, dec, [0.5, 0.25])
    assert all(r.ratio is None for r in table.rows)
    assert ratio_trend(table) is None


def test_designed_ratio_near_minimum(solved_catalog):
    sys, state, dec, _ = solved_catalog("designed-dw")
    table = parabolic_locality(sys, state, dec, [0.5, 0.25, 0.125], center=(1.0, 0.0))
    assert table.center == pytest.approx((1.0, 0.0))
    ratios = [r.ratio for r in table.rows]
    assert all(0 < r <= 10 for r in ratios)
    assert ratio_trend(table) >= 0.0
    diams = [r.diam for r in table.rows]
    assert diams == sorted(diams, reverse=True)
    # only the smallest square satisfies diam * sqrt(K) < 1 at this curvature
    assert [r.admissible for r in table.rows] == [False, False, True]


def test_trend_needs_two_distinct_squares(solved_catalog):
    sys, state, dec, _ = solved_catalog("rot-ou", 32)
    table = parabolic_locality(sys, state, dec, [0.5, 0.25, 0.125])
    assert len({r.diam for r in table.rows}) == 1
    assert ratio_trend(table) is None


def test_locality_defaults_to_a_global_minimum(solved_catalog):
    sys, state, dec, _ = solved_catalog("designed-dw")
    table = parabolic_locality(sys, state, dec, [0.25])
    assert abs(abs(table.center[0]) - 1.0) < 0.02 and abs(table.center[1]) < 0.02
    with pytest.raises(ValueError):
        parabolic_locality(sys, state, dec, [])
