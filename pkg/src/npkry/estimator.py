"""Estimator-style wrapper around the two-phase training pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import training, unet
from .krylov import NetworkPreconditioner, fgmres
from .problems import ProblemInstance

__all__ = ["NeuralPreconditioner", "check_instances"]


def check_instances(X, grid=None):
    """Validate a non-empty sequence of instances sharing one grid."""
    if isinstance(X, ProblemInstance):
        X = [X]
    X = list(X)
    if not X:
        raise ValueError("expected at least one ProblemInstance")
    for inst in X:
        if not isinstance(inst, ProblemInstance):
            raise TypeError(f"expected ProblemInstance, got {type(inst).__name__}")
    grids = {inst.grid for inst in X}
    if len(grids) != 1:
        raise ValueError(f"instances mix grids {sorted(grids)}")
    if grid is not None and X[0].grid != tuple(grid):
        raise ValueError(f"instances on grid {X[0].grid}, model expects {tuple(grid)}")
    return X


class NeuralPreconditioner(BaseEstimator):
    """Learned preconditioner for flexible GMRES.

    ``fit`` runs residual pretraining followed by Krylov-angle fine-tuning;
    ``transform`` turns instances into ready-to-use preconditioners;
    ``predict`` solves ``A x = b`` for each instance; ``score`` is the
    negated mean iteration count (higher is better).

    Parameters
    ----------
    widths : tuple of int
        Channel widths per network level.
    static_epochs, dynamic_epochs : int
    static_lr, dynamic_lr : float
    batch : int
        Instances per optimizer step in both phases.
    M : int
        Angle window of the dynamic loss.
    gamma : float
        Per-epoch learning-rate decay.
    tol, max_iter : float, int
        Solver settings used by ``predict`` and ``score``.
    random_state : int
    """

    def __init__(self, widths=(8, 16, 32), static_epochs=60, dynamic_epochs=60, static_lr=1e-2,
                 dynamic_lr=3e-3, batch=5, M=10, gamma=0.99, tol=1e-6, max_iter=400, random_state=0):
        self.widths = widths
        self.static_epochs = static_epochs
        self.dynamic_epochs = dynamic_epochs
        self.static_lr = static_lr
        self.dynamic_lr = dynamic_lr
        self.batch = batch
        self.M = M
        self.gamma = gamma
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None, X_val=None):
        X = check_instances(X)
        X_val = check_instances(X_val, X[0].grid) if X_val is not None else []
        self.alpha_ = training.alpha_norm(X)
        desc = unet.UNetDescriptor(grid=X[0].grid, widths=tuple(self.widths), out_scale=self.alpha_ ** 2)
        params = unet.init_params(desc, seed=self.random_state)
        self.history_ = []
        for phase, epochs, lr in (("static", self.static_epochs, self.static_lr),
                                  ("dynamic", self.dynamic_epochs, self.dynamic_lr)):
            if epochs == 0:
                continue
            cfg = training.TrainConfig(phase=phase, epochs=epochs, lr=lr, batch=self.batch, M=self.M,
                                       gamma=self.gamma, seed=self.random_state)
            params, reports = training.train(cfg, X, X_val, params, alpha=self.alpha_)
            self.history_.extend(reports)
        self.params_ = params
        self.grid_ = X[0].grid
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        return [NetworkPreconditioner(self.params_, inst.d) for inst in check_instances(X, self.grid_)]

    def _solve(self, X):
        return [fgmres(inst.A, inst.b, pre, tol=self.tol, max_iter=self.max_iter)
                for inst, pre in zip(check_instances(X, self.grid_), self.transform(X))]

    def predict(self, X):
        return np.array([x for x, _, _ in self._solve(X)])

    def iterations(self, X):
        return np.array([it for _, _, it in self._solve(X)])

    def score(self, X, y=None):
        return -float(self.iterations(X).mean())
