import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ddhinf import DataDrivenHinfController, MovingHorizonHinfController, excite
from ddhinf.plant import decaying_disturbance, spectral_radius

from conftest import X0


def xy(plant, seed=0):
    d = excite(plant, seed=seed)
    return np.hstack([d.X.T, d.U.T]), d.Xplus.T


def constrained_kwargs(plant):
    return dict(C1=plant.C1, D1=plant.D1, C2=plant.C2, D2=plant.D2, y2max=plant.y2max, x0=X0)


def test_matches_functional_api(plant, bench):
    X, y = xy(plant)
    est = DataDrivenHinfController(**constrained_kwargs(plant)).fit(X, y)
    assert est.gamma_ == pytest.approx(bench["ctrl"].gamma, rel=1e-6)
    assert np.allclose(est.K_, bench["ctrl"].K, rtol=1e-5)
    assert np.allclose(est.predict(X0[None, :]), est.K_ @ X0)
    assert est.n_features_in_ == 4


def test_unconstrained_default(plant):
    X, y = xy(plant)
    est = DataDrivenHinfController().fit(X, y)
    assert spectral_radius(plant.A + plant.B @ est.K_) < 1
    assert est.predict(np.eye(3)).shape == (3, 1)


def test_params_and_clone(plant):
    est = DataDrivenHinfController(eps=2e-2, r0=20.0)
    params = est.get_params()
    assert params["eps"] == 2e-2 and params["r0"] == 20.0
    twin = clone(est)
    assert twin.get_params()["r0"] == 20.0
    assert not hasattr(twin, "K_")
    est.set_params(sigma0=5e-3)
    assert est.sigma0 == 5e-3


def test_not_fitted():
    with pytest.raises(NotFittedError):
        DataDrivenHinfController().predict(np.zeros((1, 3)))


def test_input_validation(plant):
    X, y = xy(plant)
    est = DataDrivenHinfController()
    with pytest.raises(ValueError):
        est.fit(X[:, :3], y)  # no input columns
    Xn = X.copy()
    Xn[0, 0] = np.nan
    with pytest.raises(ValueError):
        est.fit(Xn, y)
    with pytest.raises(ValueError):
        est.fit(X[:-1], y)
    est.fit(X, y)
    with pytest.raises(ValueError):
        est.predict(np.zeros((2, 4)))


def test_moving_horizon_loop(plant):
    X, y = xy(plant)
    est = MovingHorizonHinfController(**constrained_kwargs(plant)).fit(X, y)
    w = decaying_disturbance(3, 40, 1e-2, seed=1)
    est.reset(sigma0=float(np.sum(w**2)))
    x = X0.copy()
    for t in range(40):
        u = est.control(x)
        assert u[0] <= 0.5 + 1e-9
        x = plant.A @ x + plant.B @ u + w[t]
        est.observe(float(w[t] @ w[t]))
    etas = [h["eta"] for h in est.history_]
    assert len(etas) == 40
    assert np.all(np.diff(etas) >= -1e-9)
    assert est.gamma_ < est.controller_.gamma
