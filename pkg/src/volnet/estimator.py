"""Scikit-learn style front door: fit volumes, predict classes, explain.

VolumeNetClassifier wraps model construction and the Adam training loop
behind the usual fit/predict/predict_proba surface so the networks compose
with sklearn tooling (get_params/set_params, clone, CV splitters).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .architectures import build, make_spec
from .gradcam import GradCamResult, compute_gradcam
from .layers import softmax
from .training import TrainConfig, train
from .validation import check_labels, check_volumes, zscore_volumes


class VolumeNetClassifier(BaseEstimator, ClassifierMixin):
    """Binary volumetric classifier over the vgg/resnet/resattnet family.

    Parameters mirror the training configuration: `arch` is one of
    vgg | resnet18 | resnet34 | resattnet18 | resattnet34 (optionally with a
    micro- prefix for 1/8 width), `width_mult` scales channel counts, and
    `attention_stages` picks which stages of the resattnet variants carry
    attention blocks.
    """

    def __init__(self, arch: str = "resattnet18", width_mult: float = 1.0,
                 attention_stages: tuple[int, ...] = (3, 4), epochs: int = 20,
                 batch_size: int = 8, lr_start: float = 1e-4,
                 lr_end: float = 1e-6, lr_schedule: str = "cosine",
                 seed: int = 0, dtype: str = "f32", normalize: bool = True):
        self.arch = arch
        self.width_mult = width_mult
        self.attention_stages = attention_stages
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.lr_schedule = lr_schedule
        self.seed = seed
        self.dtype = dtype
        self.normalize = normalize

    def _prepare(self, x):
        dt = np.float64 if self.dtype == "f64" else np.float32
        x = check_volumes(x, dtype=dt)
        if self.normalize:
            x = zscore_volumes(x)
        return x

    def fit(self, X, y):
        X = self._prepare(X)
        y = check_labels(y, len(X))
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        spec = make_spec(self.arch, self.width_mult, tuple(self.attention_stages))
        model = build(spec, input_spatial=X.shape[2:], seed=self.seed,
                      dtype=self.dtype)
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                          lr_start=self.lr_start, lr_end=self.lr_end,
                          lr_schedule=self.lr_schedule, seed=self.seed)
        self.report_ = train(model, X, y_idx, cfg)
        self.model_ = model
        return self

    def decision_logits(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = self._prepare(X)
        logits = np.empty((len(X), 2), dtype=X.dtype)
        for lo in range(0, len(X), self.batch_size):
            logits[lo:lo + self.batch_size] = self.model_.forward(
                X[lo:lo + self.batch_size], mode="eval")
        return logits

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_logits(X))

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]

    def explain(self, volume, class_index: int = 1,
                layer_name: str | None = None) -> GradCamResult:
        """Grad-CAM heatmap for a single volume at a named feature layer
        (default: the deepest one)."""
        check_is_fitted(self, "model_")
        v = np.asarray(volume)
        if v.ndim == 3:
            v = v[None]
        x = self._prepare(v)
        if layer_name is None:
            layer_name = self.model_.feature_layer_names()[-1]
        return compute_gradcam(self.model_, x, class_index, layer_name)
