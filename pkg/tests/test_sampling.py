import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neutronpinn.physics import ProblemP1Spec, ProblemP2Spec, make_problem
from neutronpinn.sampling import (
    RarConfig,
    cell_box,
    cell_indices,
    export_csv,
    lhs_sample,
    rar_step,
    sample_roles,
    star_discrepancy_l2,
)

UNIT = (np.zeros(2), np.ones(2))


def test_lhs_single_point(rng):
    p = lhs_sample(1, (np.array([2.0, -1.0]), np.array([3.0, 1.0])), rng)
    assert p.shape == (1, 2)
    assert 2.0 <= p[0, 0] <= 3.0 and -1.0 <= p[0, 1] <= 1.0


@settings(max_examples=40, deadline=None, derandomize=True)
@given(n=st.integers(1, 200), d=st.integers(1, 3), seed=st.integers(0, 2**31))
def test_lhs_stratified(n, d, seed):
    p = lhs_sample(n, (np.zeros(d), np.ones(d)), np.random.default_rng(seed))
    for k in range(d):
        strata = np.floor(p[:, k] * n).astype(int)
        assert np.array_equal(np.sort(strata), np.arange(n))


def test_lhs_rejects_degenerate(rng):
    with pytest.raises(ValueError):
        lhs_sample(5, (np.array([0.0, 1.0]), np.array([1.0, 1.0])), rng)
    with pytest.raises(ValueError):
        lhs_sample(0, UNIT, rng)


def test_lhs_beats_iid_discrepancy():
    a = lhs_sample(3000, UNIT, np.random.default_rng(0))
    b = np.random.default_rng(0).random((3000, 2))
    assert star_discrepancy_l2(a, UNIT) < star_discrepancy_l2(b, UNIT)


def _base(n=3000, seed=0):
    spec = ProblemP1Spec()
    S = sample_roles(spec, {"pde": n, "initial": 10, "boundary": 10}, np.random.default_rng(seed))
    return spec, S


def test_rar_m_zero_unchanged(rng):
    spec, S = _base()
    out = rar_step(S, lambda X: np.ones(len(X)), RarConfig(m=0), spec.box, rng)
    assert out is S


def test_rar_indicator_quadrant(rng):
    spec, S = _base()
    lo, hi = spec.box
    mid = 0.5 * (lo + hi)

    def indicator(X):  # upper-left quadrant in (x, t)
        return ((X[:, 0] < mid[0]) & (X[:, 1] >= mid[1])).astype(float)

    out = rar_step(S, indicator, RarConfig(alpha=2, m=500), spec.box, rng)
    new = out.pde[len(S.pde):]
    assert len(new) == 500
    assert np.all(indicator(new) == 1.0)
    assert np.array_equal(out.pde[: len(S.pde)], S.pde)


def test_rar_respects_cap_and_rounds(rng):
    spec, S = _base()
    cfg = RarConfig(alpha=2, m=500, cap=5000, initial=3000)
    assert cfg.max_rounds == 4
    rounds = 0
    for _ in range(10):
        before = len(S.pde)
        S = rar_step(S, lambda X: np.abs(X[:, 0]), cfg, spec.box, rng)
        assert len(S.pde) == before + min(cfg.m, cfg.cap - before)
        rounds += len(S.pde) > before
        assert len(S.pde) <= 5000
    assert rounds == 4 and S.rar_rounds == 4


@settings(max_examples=20, deadline=None, derandomize=True)
@given(scale=st.floats(1e-6, 1e6), seed=st.integers(0, 1000), alpha=st.integers(1, 4))
def test_rar_cell_choice_scale_invariant(scale, seed, alpha):
    spec, S = _base(400, seed)
    r = np.random.default_rng(seed)
    w = r.random(alpha * alpha)

    def f(X):
        return w[cell_indices(X, spec.box, alpha)] * (1 + X[:, 1])

    cfg = RarConfig(alpha=alpha, m=20, cap=5000, initial=400)
    a = rar_step(S, f, cfg, spec.box, np.random.default_rng(1))
    b = rar_step(S, lambda X: scale * f(X), cfg, spec.box, np.random.default_rng(1))
    assert a.added[-1][0] == b.added[-1][0]
    lo, hi = cell_box(a.added[-1][0], spec.box, alpha)
    new = a.pde[400:]
    assert np.all((new >= lo) & (new <= hi))


def test_rar_config_validation():
    with pytest.raises(ValueError):
        RarConfig(alpha=0)
    with pytest.raises(ValueError):
        RarConfig(cap=100, initial=3000)


def test_roles_p1(rng):
    spec = ProblemP1Spec()
    S = sample_roles(spec, {"pde": 300, "initial": 40, "boundary": 30}, rng)
    assert S.counts() == {"pde": 300, "initial": 40, "boundary": 30, "data": 0}
    assert np.all(S.initial[:, 1] == 0)
    assert np.allclose(np.abs(S.boundary[:, 0]), 0.5)
    assert np.all(S.boundary_normal == 0)


def test_roles_p2_boundary_on_edges(rng):
    spec = ProblemP2Spec()
    S = sample_roles(spec, {"pde": 50, "initial": 20, "boundary": 80}, rng)
    on_edge = np.isclose(np.abs(S.boundary[:, 0]), 10) | np.isclose(np.abs(S.boundary[:, 1]), 10)
    assert on_edge.all()


def test_roles_iaea_inside_and_neumann(rng):
    p = make_problem("p4")
    S = sample_roles(p, {"pde": 500, "boundary": 200}, rng)
    assert np.all(p.mmap.inside(S.pde))
    neu = np.any(S.boundary_normal != 0, axis=1)
    # symmetry edges (x = 0 or y = 0) carry the Neumann normals
    on_axis = np.isclose(S.boundary[:, 0], 0) | np.isclose(S.boundary[:, 1], 0)
    assert np.array_equal(neu, on_axis)


def test_anchor_columns_checked(rng):
    p = make_problem("p3")
    with pytest.raises(ValueError):
        sample_roles(p, {"pde": 10, "boundary": 10}, rng, anchors=(np.ones((3, 2)), np.ones((3, 3))))


def test_export_csv(tmp_path, rng):
    spec, S = _base(50)
    S = rar_step(S, lambda X: np.abs(X[:, 0]), RarConfig(m=5, initial=50), spec.box, rng)
    path = tmp_path / "s.csv"
    export_csv(S, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["role", "c0", "c1", "residual"]
    assert len(rows) - 1 == sum(S.counts().values())
    pde = [r for r in rows[1:] if r[0] == "pde"]
    assert pde[0][3] != "" and pde[-1][3] == ""
