"""scikit-learn style wrapper around the training engine.

UNetSegmenter treats a stack of grayscale slices (n, H, W) as X and the
matching binary masks as y, so it slots into sklearn tooling (clone,
get_params/set_params, cross-validation drivers that accept 3-D X).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import CineSample
from .engine import TrainConfig, evaluate, predict_masks, train
from .model import UNetSpec, build, forward
from .tensor import Tensor

__all__ = ["UNetSegmenter"]


def _check_stack(X, name: str) -> np.ndarray:
    a = np.asarray(X, dtype=np.float64)
    if a.ndim != 3:
        raise ValueError(f"{name} must be a 3-D (n, height, width) array, got shape {a.shape}")
    if a.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    return a


def _to_samples(X: np.ndarray, y: np.ndarray | None, spacing_mm) -> list[CineSample]:
    out = []
    for i in range(X.shape[0]):
        mask = np.zeros(X.shape[1:], dtype=np.uint8) if y is None else y[i]
        out.append(
            CineSample(
                image=X[i], mask=mask, spacing_mm=spacing_mm,
                case_id="array", slice_id=f"{i:04d}",
            )
        )
    return out


class UNetSegmenter(BaseEstimator):
    """Binary segmenter with fit/predict semantics.

    Parameters mirror the network and trainer knobs one-to-one; all are
    plain values so sklearn's clone() works. Images within one call
    must share a single (H, W); 'same' padding additionally needs both
    sides divisible by 2**depth.
    """

    def __init__(self, variant: str = "gbu", depth: int = 3, base_channels: int = 8,
                 kernel_size: int = 3, activation: str = "elu", groups: int = 4,
                 dropconnect_rate: float = 0.0, padding_mode: str = "same",
                 epochs: int = 30, batch_size: int = 16, learning_rate: float = 1e-3,
                 optimizer: str = "adam", loss: str = "soft_dice",
                 augment: bool = False, val_fraction: float = 0.2,
                 spacing_mm: tuple[float, float] = (1.0, 1.0), seed: int = 0):
        self.variant = variant
        self.depth = depth
        self.base_channels = base_channels
        self.kernel_size = kernel_size
        self.activation = activation
        self.groups = groups
        self.dropconnect_rate = dropconnect_rate
        self.padding_mode = padding_mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.loss = loss
        self.augment = augment
        self.val_fraction = val_fraction
        self.spacing_mm = spacing_mm
        self.seed = seed

    # -- internals ---------------------------------------------------

    def _spec(self) -> UNetSpec:
        return UNetSpec(
            variant=self.variant, depth=self.depth,
            base_channels=self.base_channels, kernel_size=self.kernel_size,
            activation=self.activation, groups=self.groups,
            dropconnect_rate=self.dropconnect_rate,
            padding_mode=self.padding_mode,
        )

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this UNetSegmenter is not fitted yet; call fit() first")

    # -- sklearn API --------------------------------------------------

    def fit(self, X, y):
        X = _check_stack(X, "X")
        y = np.asarray(y)
        if y.shape != X.shape:
            raise ValueError(f"y shape {y.shape} != X shape {X.shape}")
        if not (0.0 < self.val_fraction < 1.0):
            raise ValueError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        samples = _to_samples(X, y, self.spacing_mm)
        # deterministic tail split; at least one sample on each side
        n_val = min(max(1, int(round(self.val_fraction * len(samples)))),
                    len(samples) - 1) if len(samples) > 1 else 0
        if n_val == 0:
            train_set = val_set = samples
        else:
            train_set, val_set = samples[:-n_val], samples[-n_val:]
        spec = self._spec()
        cfg = TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate, optimizer=self.optimizer,
            loss=self.loss, seed=self.seed, augment=self.augment,
            variant=self.variant, activation=self.activation,
        )
        model = build(spec, seed=self.seed)
        model, history = train(model, spec, train_set, val_set, cfg)
        self.model_ = model
        self.spec_ = spec
        self.history_ = history
        self.n_features_in_ = X.shape[1] * X.shape[2]
        return self

    def predict(self, X):
        """Binary masks, shape (n, H, W), dtype uint8."""
        self._require_fitted()
        X = _check_stack(X, "X")
        samples = _to_samples(X, None, self.spacing_mm)
        return predict_masks(self.model_, self.spec_, samples)

    def predict_proba(self, X):
        """Foreground probability maps, shape (n, H, W), float64."""
        self._require_fitted()
        X = _check_stack(X, "X")
        out = []
        for i in range(0, X.shape[0], 8):
            chunk = X[i:i + 8][:, None, :, :]
            logits = forward(self.model_, self.spec_, Tensor(chunk), "infer")
            z = logits.data[:, 0]
            out.append(1.0 / (1.0 + np.exp(-z)))
        return np.concatenate(out)

    def score(self, X, y):
        """Mean overlap coefficient of predictions against y."""
        self._require_fitted()
        X = _check_stack(X, "X")
        y = np.asarray(y)
        if y.shape != X.shape:
            raise ValueError(f"y shape {y.shape} != X shape {X.shape}")
        samples = _to_samples(X, y, self.spacing_mm)
        return evaluate(self.model_, self.spec_, samples).dice_mean
