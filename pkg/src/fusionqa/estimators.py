"""scikit-learn estimators for 4-way multiple choice over encoded QA datasets."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .grounding import N_CHOICES, DataError
from .model import ModelConfig, choice_probabilities, load_checkpoint, save_checkpoint
from .pipeline import QADataset
from .train import TrainConfig, accuracy, predict_scores, train


def check_dataset(X, y=None, require_labels: bool = False) -> tuple[QADataset, np.ndarray | None]:
    """Validate an encoded dataset and optional labels."""
    if not isinstance(X, QADataset):
        raise TypeError(f"expected a QADataset, got {type(X).__name__}")
    if len(X) == 0:
        raise DataError("empty dataset")
    dim = X.input_dim
    for q in X.questions:
        if len(q.graphs) != N_CHOICES or q.contexts.shape != (N_CHOICES, dim):
            raise DataError(f"{q.example_id}: expected {N_CHOICES} choices of dim {dim}")
        if not np.all(np.isfinite(q.contexts)):
            raise DataError(f"{q.example_id}: non-finite context vector")
    if y is None:
        y = X.labels if (require_labels or all(q.label is not None for q in X.questions)) else None
    else:
        y = np.asarray(y, dtype=np.int64)
        if y.shape != (len(X),):
            raise DataError(f"labels have shape {y.shape}, expected ({len(X)},)")
    if y is not None and (y.min() < 0 or y.max() >= N_CHOICES):
        raise DataError("labels must lie in 0..3")
    return X, y


def _with_labels(X: QADataset, y: np.ndarray) -> QADataset:
    qs = X.questions
    if all(q.label == int(lbl) for q, lbl in zip(qs, y)):
        return X
    from dataclasses import replace

    return QADataset([replace(q, label=int(lbl)) for q, lbl in zip(qs, y)], X.node_table, X.k, X.facts)


class _ChoiceClassifier(ClassifierMixin, BaseEstimator):
    _kind = "qagnn"

    def _model_config(self, input_dim: int) -> ModelConfig:
        raise NotImplementedError

    def _train_config(self) -> TrainConfig:
        raise NotImplementedError

    def fit(self, X, y=None, eval_set=None, test_set=None):
        """Train on ``X``; ``eval_set`` (defaults to ``X``) drives epoch selection."""
        X, y = check_dataset(X, y, require_labels=True)
        X = _with_labels(X, y)
        dev = X if eval_set is None else check_dataset(eval_set, require_labels=True)[0]
        self.config_ = self._model_config(X.input_dim)
        self.params_, self.run_ = train(X, dev, self.config_, self._train_config(), test_set=test_set)
        self.classes_ = np.arange(N_CHOICES)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X, _ = check_dataset(X)
        if X.input_dim != self.config_.input_dim:
            raise DataError(f"inputs have dim {X.input_dim}, model was fit on {self.config_.input_dim}")
        return predict_scores(self.params_, X, self.config_)

    def predict_proba(self, X) -> np.ndarray:
        return choice_probabilities(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1)

    def score(self, X, y=None, sample_weight=None) -> float:
        X, y = check_dataset(X, y, require_labels=y is None)
        return accuracy(self.decision_function(X), y)

    def save(self, path, extra: dict | None = None) -> None:
        check_is_fitted(self, "params_")
        save_checkpoint(self.params_, self.config_, path, extra)

    @classmethod
    def load(cls, path):
        params, cfg, extra = load_checkpoint(path)
        est = QAGNNClassifier() if cfg.kind == "qagnn" else ContextBaselineClassifier()
        est.set_params(**{k: v for k, v in _params_from_config(cfg).items() if k in est.get_params()})
        est.params_, est.config_, est.classes_ = params, cfg, np.arange(N_CHOICES)
        est.checkpoint_extra_ = extra
        return est


def _params_from_config(cfg: ModelConfig) -> dict:
    return {
        "gnn_dim": cfg.gnn_dim, "fc_dim": cfg.fc_dim, "gnn_layers": cfg.gnn_layers,
        "fc_layers": cfg.fc_layers, "pooling": cfg.pooling, "bidirectional": cfg.bidirectional,
        "seed": cfg.seed,
    }


class QAGNNClassifier(_ChoiceClassifier):
    """Attention GNN over per-choice working graphs fused with the context vector.

    Parameters mirror :class:`~fusionqa.model.ModelConfig` and
    :class:`~fusionqa.train.TrainConfig`; ``gnn_layers`` must equal the hop
    radius the dataset was extracted with.
    """

    def __init__(self, gnn_dim=200, fc_dim=200, gnn_layers=2, fc_layers=0, pooling="attention",
                 bidirectional=True, optimizer="radam", learning_rate=1e-4, weight_decay=0.0,
                 batch_size=128, epochs=20, clip_norm=1.0, seed=0):
        self.gnn_dim = gnn_dim
        self.fc_dim = fc_dim
        self.gnn_layers = gnn_layers
        self.fc_layers = fc_layers
        self.pooling = pooling
        self.bidirectional = bidirectional
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.clip_norm = clip_norm
        self.seed = seed

    def _model_config(self, input_dim):
        return ModelConfig(input_dim, self.gnn_dim, self.fc_dim, self.gnn_layers, self.fc_layers,
                           self.pooling, self.bidirectional, "qagnn", self.seed)

    def _train_config(self):
        return TrainConfig(self.batch_size, self.epochs, self.learning_rate, self.optimizer,
                           self.weight_decay, self.clip_norm, self.seed, k=self.gnn_layers,
                           fc_layers=self.fc_layers)


class ContextBaselineClassifier(_ChoiceClassifier):
    """Context-vector-only head (one ReLU hidden layer); ignores the graphs."""

    def __init__(self, fc_dim=200, optimizer="adamw", learning_rate=5e-5, weight_decay=0.0,
                 batch_size=16, epochs=20, clip_norm=1.0, seed=0):
        self.fc_dim = fc_dim
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.clip_norm = clip_norm
        self.seed = seed

    def _model_config(self, input_dim):
        return ModelConfig(input_dim, 1, self.fc_dim, 1, 1, kind="baseline", seed=self.seed)

    def _train_config(self):
        return TrainConfig(self.batch_size, self.epochs, self.learning_rate, self.optimizer,
                           self.weight_decay, self.clip_norm, self.seed)
