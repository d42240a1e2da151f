"""scikit-learn style wrappers around the HV metric and the FWI driver.

These only adapt argument handling (``get_params``/``set_params``, input
validation, fitted-state checks); the numerics live in the functional modules.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .acoustic import ShotRecord, VelocityModel
from .hv_metric import HVParams, PeakMatch, Zero, hv_distance
from .inversion import RunInputs, build_acquisition, build_misfit, invert, model_rmse
from .numerics import Grid1D, Signal
from .optimize import OptimizerConfig


class HVMetric(TransformerMixin, BaseEstimator):
    """Squared HV distances from each row of ``X`` to each fitted reference signal.

    Rows are samples of a signal on the uniform grid of ``[0, 1]``.
    """

    def __init__(self, kappa=1.0, lam=1.0, epsilon=1.0, n_time=16, max_outer_iters=15, tol=1e-8, n_peaks=0):
        self.kappa = kappa
        self.lam = lam
        self.epsilon = epsilon
        self.n_time = n_time
        self.max_outer_iters = max_outer_iters
        self.tol = tol
        self.n_peaks = n_peaks

    def _params(self) -> HVParams:
        init = PeakMatch(self.n_peaks) if self.n_peaks else Zero()
        return HVParams(self.kappa, self.lam, self.epsilon, None, self.n_time, self.max_outer_iters, self.tol, init)

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_features=3)
        self._params()  # validate early
        self.references_ = X.copy()
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "references_")
        X = check_array(X, ensure_min_features=3)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} samples per signal, expected {self.n_features_in_}")
        grid = Grid1D(self.n_features_in_)
        p = self._params()
        out = np.empty((X.shape[0], self.references_.shape[0]))
        for i, row in enumerate(X):
            for j, ref in enumerate(self.references_):
                out[i, j] = hv_distance(Signal(grid, ref), Signal(grid, row), p).distance_sq
        return out


class FullWaveformInversion(BaseEstimator):
    """FWI as an estimator: ``fit`` on observed shot gathers, ``predict`` the speed model.

    ``X`` passed to ``fit`` has shape ``(n_shots, n_receivers, nt)``.
    ``initial_model`` is an ``(nz, nx)`` speed array on spacing ``(dx, dz)``.
    ``score(X, y)`` returns the negative speed RMSE of the fitted model against ``y``.
    """

    def __init__(
        self,
        initial_model=None,
        dx=10.0,
        dz=10.0,
        acquisition=None,
        misfit=None,
        max_iters=30,
        memory=10,
        speed_bounds=(300.0, 6000.0),
        first_step=0.02,
    ):
        self.initial_model = initial_model
        self.dx = dx
        self.dz = dz
        self.acquisition = acquisition
        self.misfit = misfit
        self.max_iters = max_iters
        self.memory = memory
        self.speed_bounds = speed_bounds
        self.first_step = first_step

    def fit(self, X, y=None):
        if self.initial_model is None or self.acquisition is None:
            raise ValueError("initial_model and acquisition must be set before fit")
        X = check_array(X, allow_nd=True)
        if X.ndim != 3:
            raise ValueError("X must have shape (n_shots, n_receivers, nt)")
        acq = build_acquisition(self.acquisition)
        c0 = check_array(self.initial_model)
        vmin, vmax = self.speed_bounds
        opt = OptimizerConfig(memory=self.memory, max_iters=self.max_iters, bounds=(1.0 / vmax**2, 1.0 / vmin**2))
        inputs = RunInputs(acq, [ShotRecord(t, acq.dt) for t in X], VelocityModel(c0, self.dx, self.dz), None)
        self.report_ = invert(inputs, build_misfit(self.misfit), opt, self.first_step)
        self.model_ = self.report_.final_model
        return self

    def predict(self, X=None):
        check_is_fitted(self, "model_")
        return self.model_

    def score(self, X, y):
        check_is_fitted(self, "model_")
        return -model_rmse(self.model_, check_array(y))
