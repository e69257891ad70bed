"""scikit-learn style wrappers around IDM calibration and HMMIL training."""
from __future__ import annotations

from dataclasses import asdict

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .egat import forward
from .graph import GraphConfig
from .ingest import TrajectoryDataset
from .rulebase import CalibrationConfig, IdmParams, calibrate_idm, idm_acceleration
from .train import SnapshotSource, TrainConfig, evaluate_nll, train


class IDMCalibrator(RegressorMixin, BaseEstimator):
    """Fit IDM parameters to observed accelerations.

    ``X`` columns are (speed, approach rate v - v_leader, gap); ``y`` is the
    follower acceleration.
    """

    def __init__(self, v0=15.0, T_hw=1.5, s0=2.0, a_max=1.5, b_comf=2.0, delta=4.0,
                 lr=0.02, iterations=3000, fit_delta=True, b_emergency=9.0):
        self.v0 = v0
        self.T_hw = T_hw
        self.s0 = s0
        self.a_max = a_max
        self.b_comf = b_comf
        self.delta = delta
        self.lr = lr
        self.iterations = iterations
        self.fit_delta = fit_delta
        self.b_emergency = b_emergency

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        if X.shape[1] != 3:
            raise ValueError(f"X must have 3 columns (v, dv, s), got {X.shape[1]}")
        init = IdmParams(self.v0, self.T_hw, self.s0, self.a_max, self.b_comf, self.delta)
        cfg = CalibrationConfig(lr=self.lr, iterations=self.iterations, fit_delta=self.fit_delta)
        self.params_, self.loss_history_ = calibrate_idm(np.column_stack([X, y]), init, cfg,
                                                         self.b_emergency)
        self.n_features_in_ = 3
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 3:
            raise ValueError(f"X must have 3 columns (v, dv, s), got {X.shape[1]}")
        return idm_acceleration(X[:, 0], X[:, 1], X[:, 2], self.params_, self.b_emergency)


def _as_list(X):
    if isinstance(X, TrajectoryDataset):
        return [X]
    X = list(X)
    if not X or not all(isinstance(d, TrajectoryDataset) for d in X):
        raise TypeError("X must be a TrajectoryDataset or a non-empty list of them")
    return X


class HMMILPolicy(BaseEstimator):
    """EGAT policy trained by Gaussian NLL on recorded trajectories.

    ``fit`` takes a list of datasets (one per recording) plus the road
    network; ``predict`` maps a GraphSnapshot to a GaussianPrediction;
    ``score`` is the negative mean NLL per agent-step.
    """

    def __init__(self, network=None, schedule=None, history_mode="none", perturb=True,
                 sigma_p=0.5, k_nn=8, neighbor_radius=30.0, k_route=10, horizon=10,
                 hidden=64, lr=1e-3, epochs=50, batch=8, seed=0):
        self.network = network
        self.schedule = schedule
        self.history_mode = history_mode
        self.perturb = perturb
        self.sigma_p = sigma_p
        self.k_nn = k_nn
        self.neighbor_radius = neighbor_radius
        self.k_route = k_route
        self.horizon = horizon
        self.hidden = hidden
        self.lr = lr
        self.epochs = epochs
        self.batch = batch
        self.seed = seed

    def _graph(self):
        return GraphConfig(k_nn=self.k_nn, neighbor_radius=self.neighbor_radius, sigma_p=self.sigma_p,
                           k_route=self.k_route, horizon=self.horizon, history_mode=self.history_mode)

    def fit(self, X, y=None, validation=None):
        if self.network is None:
            raise ValueError("HMMILPolicy needs a road network")
        graph = self._graph()
        src = SnapshotSource(_as_list(X), self.network, graph, self.schedule)
        val = None if validation is None else SnapshotSource(_as_list(validation), self.network,
                                                             graph, self.schedule)
        cfg = TrainConfig(lr=self.lr, epochs=self.epochs, batch=self.batch, sigma_p=self.sigma_p,
                          history_mode=self.history_mode, perturb=self.perturb, seed=self.seed)
        res = train(src, val, cfg, model_kw={"hidden": self.hidden})
        self.params_ = res.best_params
        self.history_ = res.history
        self.graph_config_ = asdict(graph)
        return self

    def predict(self, snapshot):
        check_is_fitted(self, "params_")
        return forward(snapshot, self.params_)

    def score(self, X, y=None):
        check_is_fitted(self, "params_")
        src = SnapshotSource(_as_list(X), self.network, GraphConfig(**self.graph_config_), self.schedule)
        return -evaluate_nll(src, self.params_)
