import csv

import numpy as np
import pytest

from neutronpinn.autodiff import DivergenceError
from neutronpinn.lbfgs import LbfgsConfig, TrainState, lbfgs_minimize, strong_wolfe, two_loop
from neutronpinn.loss import LossConfig, PinnModel
from neutronpinn.network import NetworkConfig, init_gaussian
from neutronpinn.optimize import (
    LOG_COLUMNS,
    AdamConfig,
    Hook,
    TrainOptions,
    adam_minimize,
    load_model,
    save_model,
    train,
)
from neutronpinn.physics import ProblemP1Spec
from neutronpinn.sampling import RarConfig, sample_roles


def quad(c):
    def f(x):
        d = x - c
        return float(d @ d), 2 * d
    return f


def rosen(x):
    a, b = x
    f = (1 - a) ** 2 + 100 * (b - a * a) ** 2
    g = np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])
    return f, g


def test_quadratic_in_five_iterations():
    c = np.array([1.0, -2.0, 3.5, 0.25])
    x, st = lbfgs_minimize(quad(c), np.zeros(4), LbfgsConfig(max_epochs=5, grad_tol=1e-12))
    assert np.max(np.abs(x - c)) < 1e-10
    assert st.epoch <= 5


def test_rosenbrock():
    x, st = lbfgs_minimize(rosen, np.array([-1.2, 1.0]), LbfgsConfig(max_epochs=500, grad_tol=1e-12))
    assert rosen(x)[0] < 1e-8


def test_zero_gradient_returns_start():
    x0 = np.array([1.0, 2.0])
    x, st = lbfgs_minimize(quad(x0), x0.copy())
    assert np.array_equal(x, x0) and st.epoch == 0 and st.stop_reason == "grad_tol"


def test_best_loss_monotone_and_curvature_guard():
    x, st = lbfgs_minimize(rosen, np.array([-1.2, 1.0]), LbfgsConfig(max_epochs=60))
    assert np.all(np.diff(st.best_history) <= 0)
    for s, y in zip(st.s_hist, st.y_hist):
        assert s @ y > 0


def test_two_loop_empty_is_steepest_descent():
    g = np.array([0.3, -1.0, 2.0])
    assert np.array_equal(two_loop(g, [], []), -g)


def test_line_search_failure_restarts_steepest(monkeypatch):
    import neutronpinn.lbfgs as L

    calls = []
    real = L.strong_wolfe

    def flaky(fun, x, f0, g0, d, step, *a, **k):
        calls.append((x.copy(), d.copy()))
        if len(calls) == 3:
            return 0.0, f0, g0, 1, False
        return real(fun, x, f0, g0, d, step, *a, **k)

    monkeypatch.setattr(L, "strong_wolfe", flaky)
    x, st = L.lbfgs_minimize(rosen, np.array([-1.2, 1.0]), LbfgsConfig(max_epochs=5))
    assert st.ls_failures == 1
    # the retry starts from the same iterate along exactly -g
    x_fail, _ = calls[2]
    x_retry, d_retry = calls[3]
    assert np.array_equal(x_fail, x_retry)
    assert np.array_equal(d_retry, -rosen(x_retry)[1])
    assert st.epoch == 5


def test_strong_wolfe_conditions():
    f = rosen
    x = np.array([-1.2, 1.0])
    f0, g0 = f(x)
    d = -g0
    a, fa, ga, _, ok = strong_wolfe(f, x, f0, g0, d, 1e-3)
    assert ok
    assert fa <= f0 + 1e-4 * a * (g0 @ d)
    assert abs(ga @ d) <= 0.9 * abs(g0 @ d)


def test_nonfinite_is_divergence():
    with pytest.raises(DivergenceError):
        lbfgs_minimize(lambda x: (np.nan, np.zeros_like(x)), np.ones(2))


def test_adam_reduces_quadratic():
    c = np.array([0.5, -0.5])
    x, st = adam_minimize(quad(c), np.zeros(2), AdamConfig(lr=0.05, max_epochs=400))
    assert np.max(np.abs(x - c)) < 1e-2


# -- PINN training loop -------------------------------------------------------


def _setup(seed=0, n=300):
    spec = ProblemP1Spec()
    rng = np.random.default_rng(seed)
    S = sample_roles(spec, {"pde": n, "initial": 100, "boundary": 100}, rng)
    net = init_gaussian(NetworkConfig(depth=5, seed=seed), box=spec.box)
    return spec, S, net, rng


def test_train_deterministic():
    hist = []
    for _ in range(2):
        spec, S, net, rng = _setup()
        _, st, _ = train(net, spec, S, LossConfig(), LbfgsConfig(max_epochs=30), None, rng)
        hist.append(st.loss_history)
    assert hist[0] == hist[1]


def test_train_plain_without_rar():
    spec, S, net, rng = _setup()
    model, st, S2 = train(net, spec, S, LossConfig(), LbfgsConfig(max_epochs=25), None, rng)
    assert S2 is S and st.epoch == 25
    assert st.loss_history[-1] < st.loss_history[0]


def test_train_rar_rounds_and_log(tmp_path):
    spec, S, net, rng = _setup(n=300)
    rar = RarConfig(alpha=2, m=50, period=10, cap=400, initial=300)
    opts = TrainOptions(log_path=tmp_path / "log.csv", checkpoint_dir=tmp_path / "ck", checkpoint_every=10)
    model, st, S2 = train(net, spec, S, LossConfig(), LbfgsConfig(max_epochs=40), rar, rng, opts)
    assert len(S2.pde) == 400 and S2.rar_rounds == 2
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert tuple(rows[0]) == LOG_COLUMNS
    assert len(rows) == 41
    assert {int(r[7]) for r in rows[1:]} == {300, 350, 400}
    back = load_model(tmp_path / "ck")
    X = S.pde[:10]
    assert np.array_equal(back.nets[0].forward(X), model.nets[0].forward(X))


def test_hook_stops_training():
    class Stop(Hook):
        period = 5

        def __init__(self):
            self.calls = 0

        def __call__(self, state, model):
            self.calls += 1
            return self.calls == 2

    spec, S, net, rng = _setup()
    h = Stop()
    _, st, _ = train(net, spec, S, LossConfig(), LbfgsConfig(max_epochs=100), None, rng,
                     TrainOptions(hooks=[h]))
    assert st.epoch == 10 and st.stop_reason == "callback"


def test_divergence_restores_and_checkpoints(tmp_path, monkeypatch):
    import neutronpinn.optimize as O

    spec, S, net, rng = _setup()
    real = O.assemble_loss
    count = {"n": 0}

    def bad(*a, **k):
        count["n"] += 1
        if count["n"] > 15:
            raise DivergenceError("pde loss is not finite (nan)")
        return real(*a, **k)

    monkeypatch.setattr(O, "assemble_loss", bad)
    with pytest.raises(DivergenceError) as ei:
        train(net, spec, S, LossConfig(), LbfgsConfig(max_epochs=50), None, rng,
              TrainOptions(checkpoint_dir=tmp_path / "ck"))
    assert ei.value.state.epoch > 0
    back = load_model(tmp_path / "ck")
    assert np.all(np.isfinite(back.get_flat()))


def test_model_save_load_lambda(tmp_path):
    nets = [init_gaussian(NetworkConfig(seed=s)) for s in (0, 1)]
    m = PinnModel(nets, lam=0.971)
    save_model(m, tmp_path / "m")
    back = load_model(tmp_path / "m")
    assert back.lam == 0.971 and np.array_equal(back.get_flat(), m.get_flat())


def test_adam_path_in_train():
    spec, S, net, rng = _setup()
    _, st, _ = train(net, spec, S, LossConfig(), LbfgsConfig(max_epochs=20), None, rng,
                     TrainOptions(optimizer="adam"))
    assert st.epoch == 20
