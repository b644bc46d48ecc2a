"""Sklearn-style estimator facade over the training loop and retrieval."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .data import Example, QueryTokens, VideoFeatures
from .alignment import GaussianConfig
from .inference import ProposalConfig, RetrievalResult
from .model import ModelConfig
from .training import TrainConfig, predict_examples, train
from .evaluation import temporal_iou
from .validation import ValidationError


class MomentRetriever(BaseEstimator):
    """Glance-supervised moment retriever with a fit/predict interface.

    fit consumes a list of Example objects (glance annotation + video
    features + tokenized query); predict returns one (start, end) second
    pair per example. Hyperparameters mirror the underlying model, Gaussian
    alignment, and optimizer configs, so the estimator composes with
    sklearn tooling (get_params/set_params/clone) while the heavy lifting
    stays in the functional modules.
    """

    def __init__(
        self,
        d_model: int = 64,
        heads: int = 4,
        layers: int = 2,
        d_ff: int | None = None,
        dropout: float = 0.1,
        max_positions: int = 256,
        guidance_layer: str = "last",
        sigma: float = 0.4,
        clip_len: int = 8,
        stride: int = 4,
        epochs: int = 20,
        batch_size: int = 16,
        learning_rate: float = 1e-4,
        weight_decay: float = 0.01,
        grad_clip_norm: float = 1.0,
        loss_variant: str = "gls_nce",
        use_qag_kl: bool = True,
        inference_mode: str = "qagi",
        window_fractions: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8),
        stride_fraction: float = 0.5,
        seed: int = 0,
    ):
        self.d_model = d_model
        self.heads = heads
        self.layers = layers
        self.d_ff = d_ff
        self.dropout = dropout
        self.max_positions = max_positions
        self.guidance_layer = guidance_layer
        self.sigma = sigma
        self.clip_len = clip_len
        self.stride = stride
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.grad_clip_norm = grad_clip_norm
        self.loss_variant = loss_variant
        self.use_qag_kl = use_qag_kl
        self.inference_mode = inference_mode
        self.window_fractions = window_fractions
        self.stride_fraction = stride_fraction
        self.seed = seed

    def _configs(self, d_feat: int, d_word: int):
        model = ModelConfig(
            d_feat=d_feat,
            d_word=d_word,
            d_model=self.d_model,
            heads=self.heads,
            layers=self.layers,
            d_ff=self.d_ff,
            dropout=self.dropout,
            max_positions=self.max_positions,
            guidance_layer=self.guidance_layer,
        )
        gaussian = GaussianConfig(sigma=self.sigma, clip_len=self.clip_len, stride=self.stride)
        train_cfg = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            grad_clip_norm=self.grad_clip_norm,
            seed=self.seed,
            loss_variant=self.loss_variant,
            use_qag_kl=self.use_qag_kl,
            inference_mode=self.inference_mode,
        )
        proposals = ProposalConfig(
            window_fractions=tuple(self.window_fractions),
            stride_fraction=self.stride_fraction,
            mode=self.inference_mode,
        )
        return model, gaussian, train_cfg, proposals

    def fit(self, X: list[Example], y=None, val: list[Example] | None = None) -> "MomentRetriever":
        """Train on glance-annotated examples; optional val set drives the
        plateau schedule and best-model selection."""
        if not X:
            raise ValidationError("fit needs at least one example")
        d_feat = X[0].features.features.shape[1]
        d_word = X[0].tokens.embeddings.shape[1]
        model_cfg, gaussian_cfg, train_cfg, proposal_cfg = self._configs(d_feat, d_word)
        state, history = train(X, val, model_cfg, gaussian_cfg, train_cfg, proposal_cfg)
        self.model_ = state.model
        self.history_ = history
        self.proposal_config_ = proposal_cfg
        return self

    def _require_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise ValidationError("estimator is not fitted")

    @staticmethod
    def _as_pairs(X) -> list[tuple[VideoFeatures, QueryTokens]]:
        pairs = []
        for item in X:
            if isinstance(item, Example):
                pairs.append((item.features, item.tokens))
            else:
                video, tokens = item
                pairs.append((video, tokens))
        return pairs

    def predict_results(self, X) -> list[RetrievalResult]:
        """Full retrieval results (score, anchor, proposal) per example."""
        self._require_fitted()
        from .inference import retrieve

        return [
            retrieve(video, tokens, self.model_, self.proposal_config_)
            for video, tokens in self._as_pairs(X)
        ]

    def predict(self, X) -> np.ndarray:
        """(n, 2) array of retrieved [start, end] in seconds."""
        results = self.predict_results(X)
        return np.array([[r.start, r.end] for r in results])

    def score(self, X, y=None) -> float:
        """Mean temporal IoU in [0, 1]; y is an optional (n, 2) array of
        ground-truth intervals, defaulting to the examples' eval bounds."""
        predictions = self.predict(X)
        if y is None:
            y = []
            for item in X:
                if not isinstance(item, Example) or item.annotation.eval_start is None:
                    raise ValidationError("score needs eval bounds or explicit y")
                y.append((item.annotation.eval_start, item.annotation.eval_end))
        y = np.asarray(y, dtype=float)
        ious = [
            temporal_iou((p[0], p[1]), (t[0], t[1])) for p, t in zip(predictions, y)
        ]
        return float(np.mean(ious))
