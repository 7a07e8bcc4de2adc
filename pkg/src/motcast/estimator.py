"""scikit-learn style front end for the forecasting system."""

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_field
from .data import SampleWindow, SeriesStore, compute_norm_stats
from .evaluate import InferenceModel, evaluate, evaluation_inits, rollout, rollout_from_store
from .net import NetConfig
from .objectives import LossConfig
from .train import Trainer, TrainConfig


class MoTForecaster(BaseEstimator):
    """Autoregressive 6-hourly forecaster with mixture-of-time routing.

    ``fit`` takes a :class:`~motcast.data.SeriesStore`, computes normalisation
    statistics on its chronological training split, pretrains on single-step
    targets and, if ``finetune_iterations`` > 0, finetunes on autoregressive
    rollouts of ``horizon`` steps.

    Parameters mirror :class:`NetConfig`, :class:`TrainConfig` and
    :class:`LossConfig`. Defaults are the full-scale learning-rate
    schedule (2.5e-4 -> 1e-8, betas 0.9/0.95).
    """

    def __init__(self, latent_dim=96, patch=4, depth=4, window=8, heads=4, mlp_ratio=4,
                 n_inputs=4, k=1, alpha=0.99, routing="topk", pretrain_iterations=2000,
                 finetune_iterations=0, horizon=4, batch_size=1, peak_lr=2.5e-4, floor_lr=1e-8,
                 weight_decay=0.01, grad_clip=1.0, eps=1e-3, candidate_weight=0.25, seed=0):
        self.latent_dim = latent_dim
        self.patch = patch
        self.depth = depth
        self.window = window
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.n_inputs = n_inputs
        self.k = k
        self.alpha = alpha
        self.routing = routing
        self.pretrain_iterations = pretrain_iterations
        self.finetune_iterations = finetune_iterations
        self.horizon = horizon
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.floor_lr = floor_lr
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.eps = eps
        self.candidate_weight = candidate_weight
        self.seed = seed

    def _configs(self):
        net = NetConfig(latent_dim=self.latent_dim, patch=self.patch, depth=self.depth, window=self.window,
                        heads=self.heads, mlp_ratio=self.mlp_ratio, n_inputs=self.n_inputs)
        train = TrainConfig(iterations=self.pretrain_iterations, batch_size=self.batch_size,
                            peak_lr=self.peak_lr, floor_lr=self.floor_lr, weight_decay=self.weight_decay,
                            grad_clip=self.grad_clip, alpha=self.alpha, k=self.k, routing=self.routing,
                            horizon=self.horizon, seed=self.seed)
        loss = LossConfig(eps=self.eps, horizon=self.horizon, candidate_weight=self.candidate_weight)
        return net, train, loss

    def fit(self, X, y=None):
        if not isinstance(X, SeriesStore):
            raise TypeError("fit expects a SeriesStore")
        net_cfg, train_cfg, loss_cfg = self._configs()
        train_range = X.split()[0]
        stats = compute_norm_stats(X, train_range)
        trainer = Trainer(X, stats, net_cfg, train_cfg, loss_cfg, train_range)
        trainer.run()
        self.pretrain_loss_ = list(trainer.loss_history)
        if self.finetune_iterations:
            ft_cfg = TrainConfig(**{**train_cfg.to_dict(), "stage": "finetune",
                                    "iterations": self.finetune_iterations})
            trainer = Trainer.from_checkpoint(trainer.checkpoint(), X, ft_cfg, train_range)
            trainer.run()
        self.finetune_loss_ = list(trainer.loss_history) if self.finetune_iterations else []
        self.checkpoint_ = trainer.checkpoint()
        self._set_model(InferenceModel.from_checkpoint(self.checkpoint_))
        return self

    def _set_model(self, model):
        self.model_ = model
        self.selection_ = model.mot.selection_
        self.n_features_in_ = model.layout.total_channels

    @classmethod
    def from_checkpoint(cls, ckpt):
        n, t, l = ckpt.net_config, ckpt.train_config, ckpt.loss_config
        est = cls(latent_dim=n.latent_dim, patch=n.patch, depth=n.depth, window=n.window, heads=n.heads,
                  mlp_ratio=n.mlp_ratio, n_inputs=n.n_inputs, k=t.k, alpha=t.alpha, routing=t.routing,
                  horizon=t.horizon, batch_size=t.batch_size, peak_lr=t.peak_lr, floor_lr=t.floor_lr,
                  weight_decay=t.weight_decay, grad_clip=t.grad_clip, eps=l.eps,
                  candidate_weight=l.candidate_weight, seed=t.seed)
        est.checkpoint_ = ckpt
        est._set_model(InferenceModel.from_checkpoint(ckpt))
        return est

    def _inputs(self, X):
        if isinstance(X, SampleWindow):
            return X.inputs, X.t
        raise TypeError("expected a SampleWindow")

    def predict_candidates(self, X):
        """Candidate forecasts (N, C, H, W) for the step after window ``X``."""
        check_is_fitted(self, "model_")
        inputs, t = self._inputs(X)
        inputs = check_field(inputs, self.n_features_in_, ndim=4, name="window inputs")
        net = self.model_.net
        valid = X.timestamps[-1]
        with torch.no_grad():
            x = torch.as_tensor(inputs, dtype=next(net.parameters()).dtype)[None]
            return net(x, [valid.hour // 6], [valid.timetuple().tm_yday])[0].numpy()

    def predict(self, X):
        """Merged normalised one-step forecast (C, H, W)."""
        return self.rollout(X, 1).states[0]

    def rollout(self, X, steps):
        check_is_fitted(self, "model_")
        inputs, t = self._inputs(X)
        return rollout(inputs, t, steps, self.model_)

    def score(self, X, y=None, steps=1):
        """Negative mean latitude-weighted RMSE (physical units) over the test split."""
        check_is_fitted(self, "model_")
        inits = evaluation_inits(X, X.split()[2], self.model_.n_inputs, steps, max_inits=40)
        runs = [rollout_from_store(X, self.model_, t, steps) for t in inits]
        return -float(np.mean(evaluate(runs, X, self.model_).table.rmse))
