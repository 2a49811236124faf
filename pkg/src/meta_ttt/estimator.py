"""Scikit-learn style facade over the full pipeline.

``MetaTTTClassifier`` trains the source model in ``fit``, predicts with the
frozen model in ``predict``, and exposes one-pass streaming adaptation via
``adapt_predict``. Inputs are flat feature rows (h*w values per sample) or
image tensors [n, 1, h, w]; get_params/set_params come from BaseEstimator so
the classifier composes with pipelines and grid search.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, column_or_1d

from .config import AdaptationConfig
from .harness import IMAGE_SIZE, Corpus
from .meta_engine import fit_source
from .models import DigitCNN, set_stats_mode
from .tta import adapt_stream, make_stream, reset_adaptation, take_deployment_snapshot


class MetaTTTClassifier(BaseEstimator, ClassifierMixin):
    def __init__(
        self,
        lam: float = 1.0,
        kappa: float = 0.9,
        lr: float = 0.001,
        meta_lr: float = 0.05,
        alpha_lr: float = 0.1,
        alpha_init: float = 0.75,
        layer_selector: str = "last",
        k: int = 1,
        batch_size: int = 64,
        shift_p: float = 0.1,
        epochs: int = 2,
        pretrain_epochs: int = 3,
        image_size: int = IMAGE_SIZE,
        random_state: int = 0,
    ):
        self.lam = lam
        self.kappa = kappa
        self.lr = lr
        self.meta_lr = meta_lr
        self.alpha_lr = alpha_lr
        self.alpha_init = alpha_init
        self.layer_selector = layer_selector
        self.k = k
        self.batch_size = batch_size
        self.shift_p = shift_p
        self.epochs = epochs
        self.pretrain_epochs = pretrain_epochs
        self.image_size = image_size
        self.random_state = random_state

    def _adapt_config(self) -> AdaptationConfig:
        cfg = AdaptationConfig(
            lam=self.lam,
            kappa=self.kappa,
            lr=self.lr,
            meta_lr=self.meta_lr,
            alpha_lr=self.alpha_lr,
            alpha_init=self.alpha_init,
            layer_selector=self.layer_selector,
            k=self.k,
            batch_size=self.batch_size,
            shift_p=self.shift_p,
        )
        cfg.validate()
        return cfg

    def _as_images(self, X: np.ndarray) -> np.ndarray:
        s = self.image_size
        X = np.asarray(X, dtype=np.float32)
        if X.ndim == 2:
            if X.shape[1] != s * s:
                raise ValueError(f"expected {s * s} features per row, got {X.shape[1]}")
            return X.reshape(-1, 1, s, s)
        if X.ndim == 4 and X.shape[1] == 1:
            return X
        raise ValueError(f"unsupported input shape {X.shape}")

    def fit(self, X, y):
        images = self._as_images(check_array(X, allow_nd=True))
        y = column_or_1d(y)
        if len(y) != len(images):
            raise ValueError("X and y length mismatch")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        torch.manual_seed(self.random_state)
        self.model_ = DigitCNN(
            num_classes=len(self.classes_), alpha_init=self.alpha_init, shift_p=self.shift_p
        )
        fit_source(
            self.model_,
            [(images, y_idx.astype(np.int64))],
            self._adapt_config(),
            epochs=self.epochs,
            pretrain_epochs=self.pretrain_epochs,
            seed=self.random_state,
        )
        take_deployment_snapshot(self.model_)
        self.n_features_in_ = int(np.prod(images.shape[1:]))
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        images = self._as_images(check_array(X, allow_nd=True))
        set_stats_mode(self.model_, "source")
        with torch.no_grad():
            logits = self.model_(torch.from_numpy(images))
        return self.classes_[logits.argmax(dim=1).numpy()]

    def adapt_predict(self, X, reset: bool = True):
        """One-pass streaming adaptation over X, returning its predictions."""
        check_is_fitted(self, "model_")
        images = self._as_images(check_array(X, allow_nd=True))
        if reset:
            reset_adaptation(self.model_)
        corpus = Corpus(
            images=images,
            labels=np.zeros(len(images), dtype=np.int32),
            class_count=len(self.classes_),
            provenance="adapt_predict",
        )
        stream = make_stream(corpus, self.batch_size)
        for batch in stream:
            batch.labels = None  # unlabeled deployment stream
        preds, _, _ = adapt_stream(self.model_, stream, self._adapt_config())
        return self.classes_[preds]
