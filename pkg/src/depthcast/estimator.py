"""Estimator-style facade: fit on sequences, predict future frames.

Thin wrapper tying the model, losses, and trainer together behind the
familiar fit/predict surface; all hyperparameters are constructor arguments
so searches and clones work the usual way.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .model import FrameBatch, ModelConfig, VrnnModel, rollout
from .training import (EvalConfig, TrainConfig, train_joint_autoregressive,
                       train_next_frame)
from .validation import check_sequences


class SparseDepthForecaster(BaseEstimator):
    """Stochastic future-frame prediction for sparse depth sequences.

    fit() runs both training phases on a list of sequences; predict() warms
    up on each sequence's first ``warmup_len`` frames and rolls the model
    forward, returning composed sparse frames.
    """

    def __init__(self, height=48, width=160, latent_channels=64,
                 stage_channels=(32, 48, 64, 64), sparse_channels=(16, 16, 16),
                 sparse_kernels=(11, 7, 5), rnn_hidden=64, predictor_hidden=128,
                 gn_groups=8, max_range=100.0, mask_threshold=0.5,
                 warmup_len=15, predict_len=15, batch_size=8,
                 epochs_phase1=2, epochs_phase2=1, learning_rate=2e-4,
                 lambda1=1e-4, seed=0):
        self.height = height
        self.width = width
        self.latent_channels = latent_channels
        self.stage_channels = stage_channels
        self.sparse_channels = sparse_channels
        self.sparse_kernels = sparse_kernels
        self.rnn_hidden = rnn_hidden
        self.predictor_hidden = predictor_hidden
        self.gn_groups = gn_groups
        self.max_range = max_range
        self.mask_threshold = mask_threshold
        self.warmup_len = warmup_len
        self.predict_len = predict_len
        self.batch_size = batch_size
        self.epochs_phase1 = epochs_phase1
        self.epochs_phase2 = epochs_phase2
        self.learning_rate = learning_rate
        self.lambda1 = lambda1
        self.seed = seed

    # -- internals ----------------------------------------------------------
    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            height=self.height, width=self.width,
            latent_channels=self.latent_channels,
            stage_channels=tuple(self.stage_channels),
            sparse_channels=tuple(self.sparse_channels),
            sparse_kernels=tuple(self.sparse_kernels),
            rnn_hidden=self.rnn_hidden, predictor_hidden=self.predictor_hidden,
            gn_groups=self.gn_groups, max_range=self.max_range,
            mask_threshold=self.mask_threshold)

    def _train_config(self, phase: str, epochs: int) -> TrainConfig:
        return TrainConfig(
            phase=phase, warmup_len=self.warmup_len,
            predict_len=self.predict_len, batch_size=self.batch_size,
            lambda1=self.lambda1, learning_rate=self.learning_rate,
            max_epochs=epochs, seed=self.seed)

    # -- estimator surface ----------------------------------------------------
    def fit(self, X, y=None):
        """Two-phase training on a list of sequences; y is ignored."""
        seqs = check_sequences(X, min_len=self.warmup_len + self.predict_len
                               if self.epochs_phase2 > 0 else 2)
        cfg = self._model_config()
        if seqs[0].shape != (self.height, self.width):
            raise ValueError(f"sequences are {seqs[0].shape}, estimator is "
                             f"({self.height}, {self.width})")
        rng = np.random.default_rng(self.seed)
        self.depth_model_ = VrnnModel(cfg, "depth", rng)
        self.mask_model_ = VrnnModel(cfg, "mask", rng)

        p1 = self._train_config("next_frame", self.epochs_phase1)
        self.report_depth_ = train_next_frame(self.depth_model_, seqs, p1)
        self.report_mask_ = train_next_frame(self.mask_model_, seqs, p1)
        if self.epochs_phase2 > 0:
            p2 = self._train_config("joint_autoregressive", self.epochs_phase2)
            self.report_joint_ = train_joint_autoregressive(
                self.depth_model_, self.mask_model_, seqs, p2)
        else:
            self.report_joint_ = None
        return self

    def predict(self, X, horizon: int | None = None):
        """Deterministic rollout (latents pinned to the prior mean).

        Returns one list of composed SparseDepthFrame per input sequence.
        """
        check_is_fitted(self, "depth_model_")
        horizon = self.predict_len if horizon is None else horizon
        seqs = check_sequences(X, min_len=self.warmup_len)
        rng = np.random.default_rng(self.seed)
        out = []
        for seq in seqs:
            warmup = [FrameBatch.single(f) for f in seq.frames[:self.warmup_len]]
            result = rollout(self.depth_model_, self.mask_model_, warmup,
                             horizon, rng, force_sigma_zero=True)
            out.append([s.composed.to_frames()[0] for s in result.steps])
        return out

    def sample(self, X, horizon: int | None = None, n_samples: int = 20,
               seed: int | None = None):
        """Stochastic rollouts; returns [sequence][sample][step] frames."""
        check_is_fitted(self, "depth_model_")
        horizon = self.predict_len if horizon is None else horizon
        seqs = check_sequences(X, min_len=self.warmup_len)
        rng = np.random.default_rng(self.seed if seed is None else seed)
        out = []
        for seq in seqs:
            warmup = [FrameBatch.replicate(f, n_samples)
                      for f in seq.frames[:self.warmup_len]]
            result = rollout(self.depth_model_, self.mask_model_, warmup,
                             horizon, rng)
            steps = [s.composed.to_frames() for s in result.steps]
            out.append([[steps[t][i] for t in range(horizon)]
                        for i in range(n_samples)])
        return out

    def score(self, X, y=None) -> float:
        """Negative mean rollout RMSE (higher is better, sklearn convention)."""
        check_is_fitted(self, "depth_model_")
        from .training import evaluate
        seqs = check_sequences(X, min_len=self.warmup_len + self.predict_len)
        table = evaluate(self.depth_model_, self.mask_model_, seqs,
                         EvalConfig(warmup_len=self.warmup_len,
                                    predict_len=self.predict_len,
                                    n_samples=1, seed=self.seed,
                                    with_chamfer=False))
        return -float(np.mean([row["rmse_mean"] for row in table]))
