import math

import numpy as np
import pytest

from neutronpinn.oracles import (
    ConvergenceError,
    FieldGrid,
    anchors_from_oracle,
    eigensolve_two_group,
    fdm_evolve,
    stable_dt,
)
from neutronpinn.physics import (
    MaterialMap,
    ProblemP1Spec,
    ProblemP2Spec,
    SeriesSolution,
    make_problem,
    two_group_materials,
)

K_INF_MAT1 = 1.1096189919536512
ALL_NEUMANN = dict(left="neumann", right="neumann", bottom="neumann", top="neumann")


def series_on(grid, spec):
    return SeriesSolution(spec)(grid.points()).reshape(grid.shape)


def test_fdm_zero_ic_stays_zero():
    g = fdm_evolve(ProblemP1Spec(), nx=41, nt=5, ic=lambda x: np.zeros_like(x))
    assert np.all(g.fields["phi"] == 0)


def test_fdm_p1_matches_series_on_100x100():
    spec = ProblemP1Spec()
    g = fdm_evolve(spec, 100, 100)
    err = g.fields["phi"] - series_on(g, spec)
    assert g.shape == (100, 100)
    assert np.max(np.abs(err)) < 5e-4
    assert np.mean(err**2) < 1e-7


def test_fdm_single_mode_decay_rate():
    spec = ProblemP1Spec(ic_id="cos", k_inf=1.0001)
    g = fdm_evolve(spec, nx=400, nt=2)
    i0 = np.argmin(np.abs(g.axes[0]))
    rate = math.log(g.fields["phi"][i0, -1] / g.fields["phi"][i0, 0]) / spec.t_end
    exact = spec.D * spec.v * (spec.k_inf - 1 - math.pi**2 * spec.L2 / spec.a**2) / spec.L2
    assert rate == pytest.approx(exact, rel=0.01)


def test_fdm_rejects_unstable_dt():
    spec = ProblemP1Spec()
    dx = 1.0 / 99
    with pytest.raises(ValueError, match="stability"):
        fdm_evolve(spec, 100, 100, dt=stable_dt(spec, dx) * 1.5)


def test_fdm_nonnegative_for_nonnegative_ic():
    g = fdm_evolve(ProblemP1Spec(ic_id="phi2"), 60, 20)
    assert np.all(g.fields["phi"] >= 0)


def test_fdm_p2_small_grid():
    spec = ProblemP2Spec(t_end=0.01)
    g = fdm_evolve(spec, nx=21, nt=3)
    assert g.shape == (21, 21, 3) and g.names == ("x", "y", "t")
    phi = g.fields["phi"]
    assert np.all(phi[0] == 0) and np.all(phi[:, -1] == 0)
    assert np.allclose(phi[..., -1], phi[::-1, :, -1], atol=1e-14)
    assert np.allclose(phi[..., -1], phi[..., -1].T, atol=1e-14)


def test_fieldgrid_csv_and_binary(tmp_path):
    spec = ProblemP1Spec()
    g = fdm_evolve(spec, 100, 100)
    assert g.to_csv(tmp_path / "g.csv") == 10_000
    lines = open(tmp_path / "g.csv").read().splitlines()
    assert lines[0] == "x,t,phi" and len(lines) == 10_001
    g.save(tmp_path / "g.bin")
    back = FieldGrid.load(tmp_path / "g.bin")
    assert back.names == g.names and back.meta == g.meta
    assert np.array_equal(back.fields["phi"], g.fields["phi"])
    assert all(np.array_equal(a, b) for a, b in zip(back.axes, g.axes))
    last = g.slice_last()
    assert last.shape == (100, 1) and last.axes[1][0] == spec.t_end


def test_fieldgrid_shape_check():
    with pytest.raises(ValueError):
        FieldGrid(("x",), [np.arange(3.0)], {"a": np.zeros(4)})


def test_infinite_medium_eigenvalue():
    mats = {1: two_group_materials()[1]}
    mmap = MaterialMap(np.ones((4, 4), int), 5.0, ALL_NEUMANN)
    res = eigensolve_two_group(mats, mmap)
    assert res.k_eff == pytest.approx(K_INF_MAT1, abs=1e-7)
    assert np.ptp(res.phi1[res.grid.mask]) < 1e-10
    ratio = res.phi2 / res.phi1
    assert np.allclose(ratio, mats[1].s12 / mats[1].sa2, rtol=1e-9)


def test_bare_square_matches_buckling():
    m = two_group_materials()[1]
    n, h = 40, 2.5
    mmap = MaterialMap(np.ones((n, n), int), h,
                       dict(left="dirichlet", right="dirichlet", bottom="dirichlet", top="dirichlet"))
    res = eigensolve_two_group({1: m}, mmap)
    B2 = 2 * (math.pi / (n * h)) ** 2
    k = (m.nsf1 + m.nsf2 * m.s12 / (m.sa2 + m.D2 * B2)) / (m.sa1 + m.s12 + m.D1 * B2)
    assert res.k_eff == pytest.approx(k, abs=2e-4)
    assert 0 < res.dominance_ratio < 1


def test_iaea_eigenvalue():
    p = make_problem("p4")
    res = eigensolve_two_group(p.materials, p.mmap, refine=1)
    assert res.k_eff == pytest.approx(1.0296, abs=0.003)
    assert np.all(res.phi1[res.grid.mask] >= 0)
    assert max(res.phi1.max(), res.phi2.max()) == 1.0


def test_symmetric_map_symmetric_flux():
    p = make_problem("p3")
    res = eigensolve_two_group(p.materials, p.mmap, refine=2, tol_k=1e-12, tol_src=1e-11,
                               inner_tol=1e-13)
    for f in (res.phi1, res.phi2):
        assert np.max(np.abs(f - f[::-1, :])) < 1e-10
        assert np.max(np.abs(f - f.T)) < 1e-10


def test_sor_and_gauss_seidel_agree():
    p = make_problem("p4")
    a = eigensolve_two_group(p.materials, p.mmap, refine=1)
    b = eigensolve_two_group(p.materials, p.mmap, refine=1, omega=1.0)
    assert a.k_eff == pytest.approx(b.k_eff, abs=1e-7)


def test_power_iteration_cap():
    p = make_problem("p4")
    with pytest.raises(ConvergenceError):
        eigensolve_two_group(p.materials, p.mmap, max_outer=2)


def test_anchor_selection():
    p = make_problem("p4")
    res = eigensolve_two_group(p.materials, p.mmap, refine=1)
    pts, vals = anchors_from_oracle(res, 0)
    assert pts.shape == (0, 2) and vals.shape == (0, 2)
    pts, vals = anchors_from_oracle(res, 76, np.random.default_rng(0))
    assert len({tuple(x) for x in pts}) == 76
    assert np.all(p.mmap.inside(pts))
    g = res.grid
    for x, v in zip(pts, vals):
        i = np.flatnonzero(g.axes[0] == x[0])[0]
        j = np.flatnonzero(g.axes[1] == x[1])[0]
        assert v[0] == g.fields["phi1"][i, j] and v[1] == g.fields["phi2"][i, j]
    with pytest.raises(ValueError):
        anchors_from_oracle(res, int(g.mask.sum()) + 1)
