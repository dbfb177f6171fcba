"""scikit-learn style wrapper around the completion model."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import metrics
from .config import model_preset, train_preset
from .model import CompletionModel
from .training import Trainer, load_model, save_model
from .validation import check_cloud_batch


class ProxyCompletion(BaseEstimator):
    """Point cloud completion estimator.

    ``X`` is an array of partial clouds (n_samples, n_input, 3) and ``y`` the
    matching complete clouds (n_samples, n_gt, 3). ``predict`` returns dense
    completions (n_samples, n_output, 3).

    Parameters
    ----------
    preset : str
        Model and training preset name (``desk``, ``pcn``, ``shapenet55``, ``gradcheck``).
    mode : str or None
        ``pointr`` or ``adapointr``; None keeps the preset's mode.
    steps, batch_size, lr : optional overrides of the preset's training schedule.
    denoise : bool
        Train with denoising queries.
    random_state : int
        Seeds weight initialisation, batch order and query noise.
    """

    def __init__(self, preset: str = "desk", mode: str | None = None, steps: int | None = None,
                 batch_size: int | None = None, lr: float | None = None, denoise: bool = True,
                 random_state: int = 0):
        self.preset = preset
        self.mode = mode
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.denoise = denoise
        self.random_state = random_state

    def _configs(self):
        model_over = {} if self.mode is None else {"mode": self.mode}
        train_over = {k: v for k, v in (("steps", self.steps), ("batch_size", self.batch_size),
                                        ("lr", self.lr)) if v is not None}
        return (model_preset(self.preset, **model_over),
                train_preset(self.preset, seed=self.random_state, **train_over))

    def fit(self, X, y, log=None):
        X = check_cloud_batch(X, "X", dtype=np.float64)
        y = check_cloud_batch(y, "y", dtype=np.float64)
        mcfg, tcfg = self._configs()
        self.model_ = CompletionModel(mcfg, seed=self.random_state)
        trainer = Trainer(self.model_, X, y, tcfg, denoise=self.denoise)
        self.history_ = trainer.run(log=log)
        self.n_steps_ = trainer.step
        self._optimizer = trainer.optimizer
        return self

    def predict(self, X, batch_size: int = 16) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_cloud_batch(X, "X", dtype=np.float64)
        parts = [self.model_.complete(X[i:i + batch_size]) for i in range(0, len(X), batch_size)]
        return np.concatenate(parts, axis=0)

    def transform(self, X) -> np.ndarray:
        return self.predict(X)

    def score(self, X, y) -> float:
        """Negative mean cd_l2, so larger is better."""
        pred = self.predict(X)
        y = check_cloud_batch(y, "y", dtype=np.float64)
        return -float(np.mean([metrics.chamfer(p, g, "cd_l2") for p, g in zip(pred, y)]))

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_model(path, self.model_, getattr(self, "_optimizer", None), self.n_steps_)

    @classmethod
    def load(cls, path, **params) -> ProxyCompletion:
        model, step = load_model(path)
        est = cls(mode=model.config.mode, **params)
        est.model_ = model
        est.n_steps_ = step
        est.history_ = []
        return est
