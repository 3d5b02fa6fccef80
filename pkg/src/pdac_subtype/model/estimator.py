"""scikit-learn compatible wrapper around the MIL model."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .._rng import subseed
from ..evaluation import stratified_kfold
from ..exceptions import InputValidationError
from .bags import SlideBag
from .network import export_attention
from .training import TrainConfig, initial_params, predict_probs, train


def _check_bags(X, y=None):
    bags = list(X)
    if not bags or not all(isinstance(b, SlideBag) for b in bags):
        raise InputValidationError("X must be a non-empty sequence of SlideBag")
    if y is None:
        return bags, None
    y = np.asarray(y)
    if y.shape != (len(bags),) or not np.all(np.isin(y, (0, 1))):
        raise InputValidationError("y must hold one 0/1 label per bag")
    return bags, y.astype(np.int64)


def _with_labels(bags, y):
    return [SlideBag(b.slide_id, b.patch_emb, b.grid, b.cell_emb, b.centroids, b.cell_class, int(t))
            for b, t in zip(bags, y)]


class PanSubNetClassifier(ClassifierMixin, BaseEstimator):
    """Dual-scale attention-MIL classifier over :class:`SlideBag` inputs.

    Class 1 is BASAL, class 0 CLASSICAL. ``mode="attmil"`` gives the
    patch-only baseline. When ``fit`` gets no ``eval_set``, a stratified
    ``validation_fraction`` of the bags is held out for early stopping.
    """

    def __init__(
        self,
        mode="pansubnet",
        lr=5e-5,
        weight_decay=1e-5,
        max_epochs=100,
        patience=10,
        d_att=128,
        lambda_mode="learned",
        cls_position="centroid",
        pos_enc=False,
        validation_fraction=0.2,
        threshold=0.5,
        random_state=0,
    ):
        self.mode = mode
        self.lr = lr
        self.weight_decay = weight_decay
        self.max_epochs = max_epochs
        self.patience = patience
        self.d_att = d_att
        self.lambda_mode = lambda_mode
        self.cls_position = cls_position
        self.pos_enc = pos_enc
        self.validation_fraction = validation_fraction
        self.threshold = threshold
        self.random_state = random_state

    def _config(self):
        return TrainConfig(
            mode=self.mode,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=self.random_state,
            lr=self.lr,
            weight_decay=self.weight_decay,
            d_att=self.d_att,
            lambda_mode=self.lambda_mode,
            cls_position=self.cls_position,
            pos_enc=self.pos_enc,
            threshold=self.threshold,
        )

    def fit(self, X, y, eval_set=None):
        bags, y = _check_bags(X, y)
        config = self._config()
        if eval_set is not None:
            val_bags, val_y = _check_bags(*eval_set)
            slides = _with_labels(bags, y) + _with_labels(val_bags, val_y)
            fit_idx = np.arange(len(bags))
            val_idx = np.arange(len(bags), len(slides))
        else:
            slides = _with_labels(bags, y)
            k = max(2, int(round(1.0 / self.validation_fraction)))
            folds = stratified_kfold(y, k=k, seed=subseed(self.random_state, "split"))
            val_idx = folds[0]
            fit_idx = np.setdiff1d(np.arange(len(slides)), val_idx)
        self.params_, self.history_ = train(slides, fit_idx, val_idx, config)
        self.classes_ = np.array([0, 1])
        self.n_epochs_ = len(self.history_)
        self.best_val_auc_ = max(h["val_auc"] for h in self.history_)
        return self

    def init_untrained(self, X):
        """Set randomly initialized parameters without training (for inspection and tests)."""
        bags, _ = _check_bags(X)
        self.params_ = initial_params(bags, self._config(), subseed(self.random_state, "init", 0))
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        bags, _ = _check_bags(X)
        p = predict_probs(bags, self.params_, self._config())
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= self.threshold).astype(np.int64)

    def decision_function(self, X):
        return self.predict_proba(X)[:, 1]

    def attention(self, bag):
        check_is_fitted(self, "params_")
        return export_attention(bag, self.params_, config=self._config().model_config())
