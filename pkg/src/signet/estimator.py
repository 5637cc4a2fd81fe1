"""scikit-learn estimator wrapper around the model graphs and training loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted

from . import evaluation, models, training
from .validation import check_iq_array


class SigNetClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """IQ-signal classifier with a trainable (or fixed) signal-to-matrix front end.

    ``transform`` returns the penultimate features of the fitted network.
    Validation data for best-epoch selection is either passed to ``fit`` or
    carved out of the training data (stratified, ``validation_fraction``).
    ``model_options`` forwards any other :class:`~signet.models.ModelConfig` field.
    """

    def __init__(
        self,
        architecture="signet",
        k=3,
        stride=1,
        widths=(16, 32, 64, 128),
        blocks=(1, 1, 1, 1),
        image_transform="gram",
        epochs=30,
        batch_size=32,
        optimizer="adam",
        initial_lr=1e-3,
        warmup_fraction=0.05,
        weight_decay=0.0,
        validation_fraction=0.2,
        model_options=None,
        random_state=0,
    ):
        self.architecture = architecture
        self.k = k
        self.stride = stride
        self.widths = widths
        self.blocks = blocks
        self.image_transform = image_transform
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.initial_lr = initial_lr
        self.warmup_fraction = warmup_fraction
        self.weight_decay = weight_decay
        self.validation_fraction = validation_fraction
        self.model_options = model_options
        self.random_state = random_state

    def _seed(self):
        return 0 if self.random_state is None else int(self.random_state)

    def _model_config(self, n_classes, length):
        return models.ModelConfig(
            architecture=self.architecture,
            num_classes=n_classes,
            input_length=length,
            k=self.k,
            stride=self.stride,
            widths=tuple(self.widths),
            blocks=tuple(self.blocks),
            transform=self.image_transform,
            seed=self._seed(),
            **(self.model_options or {}),
        )

    def _train_config(self):
        return training.TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            optimizer=self.optimizer,
            initial_lr=self.initial_lr,
            warmup_fraction=self.warmup_fraction,
            weight_decay=self.weight_decay,
            seed=self._seed(),
        )

    def fit(self, X, y=None, X_val=None, y_val=None):
        if y is None and hasattr(X, "labels"):
            y = X.labels
        X = check_iq_array(X, min_length=self.k)
        y = np.asarray(y)
        check_classification_targets(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if X_val is None:
            X, X_val, y_enc, yv_enc = train_test_split(
                X, y_enc, test_size=self.validation_fraction, stratify=y_enc, random_state=self._seed()
            )
        else:
            X_val = check_iq_array(X_val, min_length=self.k)
            yv_enc = np.searchsorted(self.classes_, np.asarray(y_val))
            if np.any(self.classes_[np.minimum(yv_enc, len(self.classes_) - 1)] != np.asarray(y_val)):
                raise ValueError("y_val contains labels not seen in y")
        self.model_ = models.build_model(self._model_config(len(self.classes_), X.shape[2]))
        _, self.history_ = training.train(self.model_, (X, y_enc), (X_val, yv_enc), self._train_config())
        self.n_features_in_ = X.shape[2]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.logits(check_iq_array(X, min_length=self.k))

    def predict_proba(self, X):
        return evaluation.softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def transform(self, X):
        check_is_fitted(self, "model_")
        return self.model_.features(check_iq_array(X, min_length=self.k))
