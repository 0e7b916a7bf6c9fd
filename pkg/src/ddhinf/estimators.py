"""scikit-learn style wrappers.

``fit(X, y)`` takes one transition per row: ``X = [x(t), u(t)]`` and
``y = x(t+1)``.  ``predict(states)`` returns the control inputs ``K x``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import mhc, sdp
from .datagen import DataSet, consistency_form, noise_model_pointwise, slater_point
from .synth import SynthesisSpec, synthesize


class DataDrivenHinfController(BaseEstimator):
    """Static state-feedback gain certified for every plant consistent with the
    data under the pointwise noise bound ``||w_j|| <= eps``.

    Parameters
    ----------
    C1, D1 : performance output ``y1 = C1 x + D1 u``.
    C2, D2, y2max : constrained outputs ``C2 x + D2 u <= y2max``; leave ``None``
        for an unconstrained design.
    x0, sigma0, r0 : initial state, disturbance energy budget and ellipsoid
        level used by the constrained design.
    eps : noise bound of the training data.
    tol : solver feasibility and gap tolerance.
    """

    def __init__(self, C1=None, D1=None, C2=None, D2=None, y2max=None, x0=None,
                 eps=1e-2, sigma0=1e-2, r0=10.0, tol=1e-8):
        self.C1 = C1
        self.D1 = D1
        self.C2 = C2
        self.D2 = D2
        self.y2max = y2max
        self.x0 = x0
        self.eps = eps
        self.sigma0 = sigma0
        self.r0 = r0
        self.tol = tol

    def _spec(self, X, y) -> SynthesisSpec:
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        y = y.reshape(len(y), -1)
        n = y.shape[1]
        m = X.shape[1] - n
        if m < 1:
            raise ValueError(f"X needs n + m columns with m >= 1; got {X.shape[1]} for n = {n}")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        data = DataSet(y.T, X[:, :n].T, X[:, n:].T)
        form = consistency_form(data, noise_model_pointwise(self.eps, data.J, n))
        slater_point(data, form)
        C1 = np.eye(n) if self.C1 is None else self.C1
        D1 = np.zeros((np.atleast_2d(C1).shape[0], m)) if self.D1 is None else self.D1
        constrained = self.C2 is not None
        C2 = np.zeros((0, n)) if self.C2 is None else self.C2
        D2 = np.zeros((np.atleast_2d(C2).shape[0], m)) if self.D2 is None else self.D2
        y2max = np.zeros(0) if self.y2max is None else self.y2max
        x0 = np.zeros(n) if self.x0 is None else self.x0
        if constrained and self.y2max is None:
            raise ValueError("y2max is required when C2 is given")
        self.n_states_, self.n_inputs_ = n, m
        self.n_features_in_ = X.shape[1]
        return SynthesisSpec(form, C1, D1, C2, D2, y2max, x0, self.sigma0, self.r0, constrained)

    def _settings(self) -> sdp.SolverSettings:
        return sdp.SolverSettings(tol_feas=self.tol, tol_gap=self.tol)

    def fit(self, X, y):
        self.spec_ = self._spec(X, y)
        self.controller_, self.report_ = synthesize(self.spec_, self._settings())
        self.K_ = self.controller_.K
        self.P_ = self.controller_.P
        self.gamma_ = self.controller_.gamma
        return self

    def predict(self, X):
        check_is_fitted(self, "K_")
        X = check_array(X)
        if X.shape[1] != self.n_states_:
            raise ValueError(f"expected {self.n_states_} state columns, got {X.shape[1]}")
        return X @ self.K_.T


class MovingHorizonHinfController(DataDrivenHinfController):
    """Re-solves the synthesis program at every measured state.

    After ``fit``, drive the loop with ``control(x)`` followed by
    ``observe(w_energy)`` once the step's disturbance energy is known.
    """

    def fit(self, X, y):
        super().fit(X, y)
        return self.reset()

    def reset(self, x0=None, sigma0=None):
        check_is_fitted(self, "spec_")
        self.state_ = mhc.init(self.spec_, x0=x0, sigma0=sigma0, settings=self._settings())
        self.decisions_ = []
        return self

    def control(self, x) -> np.ndarray:
        check_is_fitted(self, "state_")
        decision, self.state_ = mhc.mhc_step(self.state_, x)
        self.decisions_.append(decision)
        self.K_, self.gamma_ = decision.K, decision.gamma
        return decision.K @ np.asarray(x, dtype=float).reshape(-1)

    def observe(self, w_energy: float):
        self.state_ = mhc.record_disturbance(self.state_, w_energy)
        return self

    @property
    def history_(self) -> list[dict]:
        check_is_fitted(self, "state_")
        return self.state_.history
