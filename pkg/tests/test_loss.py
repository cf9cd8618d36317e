import numpy as np
import pytest

from neutronpinn.autodiff import DivergenceError
from neutronpinn.loss import LossBreakdown, LossConfig, PinnModel, assemble_loss, point_residual
from neutronpinn.network import NetworkConfig, init_gaussian
from neutronpinn.oracles import anchors_from_oracle, eigensolve_two_group
from neutronpinn.physics import MaterialMap, ProblemP1Spec, SeriesSolution, TwoGroupProblem, make_problem
from neutronpinn.sampling import SampleSet, sample_roles


def _p1_samples(n=200, seed=0):
    spec = ProblemP1Spec()
    S = sample_roles(spec, {"pde": n, "initial": n // 2, "boundary": n // 2}, np.random.default_rng(seed))
    return spec, S


def test_exact_solution_all_terms_tiny():
    spec, S = _p1_samples()
    br = assemble_loss(SeriesSolution(spec), S, spec, LossConfig())
    for k in ("pde", "initial", "boundary", "data", "total"):
        assert getattr(br, k) < 1e-12


def test_total_arithmetic():
    # pde + w * (initial + boundary + data) with all terms 1e-4 and w = 100
    br = LossBreakdown(1e-4, 1e-4, 1e-4, 1e-4, 1e-4 + 100 * 3e-4)
    assert br.total == pytest.approx(0.0301, rel=1e-14)


def test_doubling_w_doubles_non_pde_part():
    spec, S = _p1_samples()
    net = init_gaussian(NetworkConfig(seed=2), box=spec.box)
    a = assemble_loss(net, S, spec, LossConfig(w=100))
    b = assemble_loss(net, S, spec, LossConfig(w=200))
    assert a.pde == b.pde
    assert b.total - b.pde == pytest.approx(2 * (a.total - a.pde), rel=1e-13)
    assert a.total == pytest.approx(a.pde + 100 * (a.initial + a.boundary + a.data), rel=1e-14)


def test_terms_zero_iff_match():
    spec = ProblemP1Spec()
    net = init_gaussian(NetworkConfig(seed=3), box=spec.box)
    X = np.array([[0.1, 0.0], [0.2, 0.0]])
    vals = net.forward(X)
    S = SampleSet(np.empty((0, 2)), X, vals.copy(), np.empty((0, 2)), np.empty((0, 2)),
                  np.empty((0, 2)), np.empty((0, 1)))
    assert assemble_loss(net, S, spec, LossConfig()).initial == 0.0
    S.initial_values[1] += 1e-9
    assert assemble_loss(net, S, spec, LossConfig()).initial > 0.0


def test_nan_names_the_term():
    spec, S = _p1_samples(20)
    S.initial_values[0] = np.nan
    net = init_gaussian(NetworkConfig(seed=1), box=spec.box)
    with pytest.raises(DivergenceError, match="initial"):
        assemble_loss(net, S, spec, LossConfig())


def test_empty_set_rejected():
    spec = ProblemP1Spec()
    e = np.empty((0, 2))
    S = SampleSet(e, e, np.empty(0), e, e, e, np.empty((0, 1)))
    with pytest.raises(ValueError):
        assemble_loss(init_gaussian(NetworkConfig()), S, spec, LossConfig())


def _fd_check(model, S, problem, cfg, n_check, rng, tol=1e-5):
    br, g = assemble_loss(model, S, problem, cfg, grad=True)
    th = model.get_flat()
    idx = rng.choice(len(th), n_check, replace=False)
    if model.lam is not None:
        idx = np.append(idx, len(th) - 1)
    for i in idx:
        h = 1e-6 * max(1.0, abs(th[i]))
        vals = []
        for s in (1, -1):
            m = model.copy()
            t = th.copy()
            t[i] += s * h
            m.set_flat(t)
            vals.append(assemble_loss(m, S, problem, cfg).total)
        fd = (vals[0] - vals[1]) / (2 * h)
        assert abs(fd - g[i]) <= tol * abs(g[i]) + 1e-9, (i, fd, g[i])


def test_two_group_gradient_with_lambda_and_neumann():
    p = make_problem("p4")
    rng = np.random.default_rng(5)
    res = eigensolve_two_group(p.materials, p.mmap, refine=1)
    anchors = anchors_from_oracle(res, 8, rng)
    S = sample_roles(p, {"pde": 30, "boundary": 30}, rng, anchors=anchors)
    assert np.any(S.boundary_normal != 0)
    nets = [init_gaussian(NetworkConfig(depth=4, seed=s, init_std=0.3), box=p.box) for s in (0, 1)]
    model = PinnModel(nets, lam=0.97)
    _fd_check(model, S, p, LossConfig(), 40, rng)


def test_point_residual_nonnegative():
    spec, S = _p1_samples(50)
    net = init_gaussian(NetworkConfig(seed=0), box=spec.box)
    r = point_residual(net, spec, S.pde)
    assert r.shape == (50,) and np.all(r >= 0)
