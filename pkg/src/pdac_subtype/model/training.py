"""Training loop with early stopping on validation AUC, and k-fold orchestration."""

import logging
from dataclasses import asdict, dataclass, replace

import numpy as np

from .._rng import substream, subseed
from ..evaluation import (
    MetricsReport,
    PredictionRecord,
    UndefinedAUCError,
    auc_score,
    confusion_metrics,
    stratified_kfold,
)
from ..exceptions import InputValidationError
from .network import ClsPosition, Mode, ModelConfig, _forward, backward
from .optim import OptState, adamw_step
from .params import CELL_BRANCH, init_params

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "pansubnet"
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    lr: float = 5e-5
    weight_decay: float = 1e-5
    d_att: int = 128
    # "learned" starts at 1/512 and is optimized; "fixed" holds lambda_dist at 1
    lambda_mode: str = "learned"
    cls_position: str = "centroid"
    pos_enc: bool = False
    threshold: float = 0.5
    # "inner": early stopping on a stratified slice of the training folds, so the
    # held-out fold is never used for model selection; "fold": select on the held-out fold
    early_stopping: str = "inner"
    inner_folds: int = 5

    def __post_init__(self):
        Mode(self.mode)
        ClsPosition(self.cls_position)
        if self.lambda_mode not in ("learned", "fixed"):
            raise InputValidationError(f"lambda_mode must be 'learned' or 'fixed', got {self.lambda_mode!r}")
        if self.early_stopping not in ("inner", "fold"):
            raise InputValidationError(f"early_stopping must be 'inner' or 'fold', got {self.early_stopping!r}")
        if self.inner_folds < 2:
            raise InputValidationError("inner_folds must be >= 2")
        if self.max_epochs < 1 or self.patience < 0:
            raise InputValidationError("max_epochs must be >= 1 and patience >= 0")

    def model_config(self):
        return ModelConfig(Mode(self.mode), ClsPosition(self.cls_position), self.pos_enc)

    def to_dict(self):
        return asdict(self)


def trainable_names(params, config):
    names = list(params.names())
    if Mode(config.mode) is Mode.ATTMIL_BASELINE:
        names = [n for n in names if n not in CELL_BRANCH]
    if config.lambda_mode == "fixed" and "lambda_dist" in names:
        names.remove("lambda_dist")
    return names


def initial_params(slides, config, init_seed):
    d_patch = slides[0].patch_emb.shape[1]
    d_cells = {b.d_cell for b in slides if b.n_cells}
    if len(d_cells) > 1:
        raise InputValidationError(f"inconsistent cell embedding dims {sorted(d_cells)}")
    d_cell = d_cells.pop() if d_cells else 1
    lam = 1.0 if config.lambda_mode == "fixed" else 1.0 / 512
    return init_params(d_patch, d_cell, config.d_att, seed=init_seed, lambda_dist=lam)


def predict_probs(slides, params, config):
    mc = config.model_config() if isinstance(config, TrainConfig) else config
    return np.array([_forward(b, params, mc)[0] for b in slides])


def _labels(slides):
    y = [b.label for b in slides]
    if any(v is None for v in y):
        raise InputValidationError("every training/validation slide needs a label")
    return np.array(y, dtype=np.int64)


def train(slides, train_idx, val_idx, config=TrainConfig(), params=None, fold=0):
    """Fit on ``slides[train_idx]``, keeping the epoch with the best validation AUC.

    Returns ``(best_params, history)``; ``history`` has one dict per epoch with
    ``epoch``, ``train_loss`` and ``val_auc``. Ties on AUC keep the earlier
    epoch; training stops once ``patience`` epochs pass without improvement.
    """
    slides = list(slides)
    train_idx = np.asarray(train_idx, dtype=np.int64)
    val_idx = np.asarray(val_idx, dtype=np.int64)
    if train_idx.size == 0 or val_idx.size == 0:
        raise InputValidationError("train and validation splits must be non-empty")
    y_train = _labels([slides[i] for i in train_idx])
    y_val = _labels([slides[i] for i in val_idx])
    if len(set(y_train.tolist())) < 2:
        raise InputValidationError("training split must contain both classes")
    if len(set(y_val.tolist())) < 2:
        raise UndefinedAUCError("validation split has a single class; AUC undefined")

    mc = config.model_config()
    if params is None:
        params = initial_params(slides, config, subseed(config.seed, "init", fold))
    else:
        params = params.copy()
    names = trainable_names(params, config)
    state = OptState()
    shuffle_rng = substream(config.seed, "shuffle", fold)
    val_slides = [slides[i] for i in val_idx]

    best_auc, best_params, best_epoch = -np.inf, params.copy(), 0
    history = []
    stale = 0
    grads = params.zeros_like()
    for epoch in range(1, config.max_epochs + 1):
        order = train_idx[shuffle_rng.permutation(train_idx.size)]
        total = 0.0
        for i in order:
            bag = slides[i]
            loss, _ = backward(bag, params, bag.label, config=mc, out=grads)
            adamw_step(params, grads, state, lr=config.lr, wd=config.weight_decay, names=names)
            # projected step: the distance scale stays non-negative
            if params.lambda_dist < 0:
                params.lambda_dist[...] = 0.0
            total += loss
        val_auc = auc_score(y_val, predict_probs(val_slides, params, mc))
        history.append({"epoch": epoch, "train_loss": total / train_idx.size, "val_auc": val_auc})
        logger.debug("fold %d epoch %d loss %.6f val_auc %.4f", fold, epoch, total / train_idx.size, val_auc)
        if val_auc > best_auc:
            best_auc, best_params, best_epoch = val_auc, params.copy(), epoch
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                break
    for h in history:
        h["best"] = h["epoch"] == best_epoch
    return best_params, history


@dataclass
class FoldResult:
    fold: int
    train_ids: list
    stop_ids: list
    val_ids: list
    params: object
    history: list
    report: MetricsReport
    predictions: list


def selection_split(slides, train_idx, config, fold):
    """Indices used for fitting and for early stopping within one outer fold."""
    if config.early_stopping == "fold":
        return train_idx, None
    y = _labels([slides[i] for i in train_idx])
    # small cohorts: fewer inner folds so every class still reaches the stopping slice
    k = min(config.inner_folds, int(np.bincount(y, minlength=2).min()))
    if k < 2:
        raise InputValidationError("each class needs >= 2 training slides for the stopping split")
    inner = stratified_kfold(y, k=k, seed=subseed(config.seed, "split", fold + 1))
    stop_idx = train_idx[inner[0]]
    fit_idx = np.setdiff1d(train_idx, stop_idx)
    return fit_idx, stop_idx


def run_fold(slides, folds, fold, config):
    val_idx = folds[fold]
    train_idx = np.sort(np.concatenate([f for j, f in enumerate(folds) if j != fold]))
    fit_idx, stop_idx = selection_split(slides, train_idx, config, fold)
    params, history = train(slides, fit_idx, val_idx if stop_idx is None else stop_idx, config, fold=fold)
    probs = predict_probs([slides[i] for i in val_idx], params, config)
    preds = [PredictionRecord(slides[i].slide_id, slides[i].label, float(p)) for i, p in zip(val_idx, probs)]
    return FoldResult(
        fold=fold,
        train_ids=[slides[i].slide_id for i in fit_idx],
        stop_ids=[] if stop_idx is None else [slides[i].slide_id for i in stop_idx],
        val_ids=[slides[i].slide_id for i in val_idx],
        params=params,
        history=history,
        report=confusion_metrics(preds, threshold=config.threshold),
        predictions=preds,
    )


def cross_validate(slides, k=5, config=TrainConfig(), n_jobs=1):
    """Stratified k-fold training. Fold results do not depend on ``n_jobs``."""
    slides = list(slides)
    folds = stratified_kfold(_labels(slides), k=k, seed=subseed(config.seed, "split"))
    if n_jobs == 1:
        return [run_fold(slides, folds, f, config) for f in range(k)]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=n_jobs)(delayed(run_fold)(slides, folds, f, config) for f in range(k))


def best_fold(results):
    """Fold with the highest validation AUC; the lowest index wins ties."""
    return max(results, key=lambda r: (r.report.auc, -r.fold))


def with_seed(config, seed):
    return replace(config, seed=seed)
