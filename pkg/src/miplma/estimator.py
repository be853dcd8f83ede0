"""scikit-learn style front end.

``X`` is a sequence of bags (each an ``n_i x d`` array-like).  ``y`` is either
a sequence of candidate label collections, a boolean ``m x k`` candidate
indicator matrix, or a 1-D vector of exact labels (singleton candidate sets).
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import Bag, Dataset, DatasetMeta
from .exceptions import ConfigurationError, SchemaError
from .model import predict_bag
from .trainer import TrainConfig, mil_mode_adapter, train


def check_bags(X, d=None):
    """Validate a sequence of bags and return them as 2-D float64 arrays."""
    if isinstance(X, Dataset):
        X = [bag.instances for bag in X.bags]
    if isinstance(X, np.ndarray) and X.ndim == 2:
        # a plain feature matrix: every row is a singleton bag
        X = list(X[:, None, :])
    bags = []
    for i, bag in enumerate(X):
        arr = np.asarray(bag.instances if isinstance(bag, Bag) else bag, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2 or arr.shape[0] == 0:
            raise SchemaError(f"bag {i}: expected a non-empty n x d array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise SchemaError(f"bag {i}: non-finite feature values")
        if d is not None and arr.shape[1] != d:
            raise SchemaError(f"bag {i}: width {arr.shape[1]} != {d}")
        d = arr.shape[1]
        bags.append(arr)
    if not bags:
        raise SchemaError("no bags given")
    return bags


def check_candidates(y, m, k=None):
    """Normalise ``y`` to a list of sorted candidate tuples and infer ``k``."""
    if isinstance(y, np.ndarray) and y.ndim == 2:
        if y.shape[0] != m:
            raise SchemaError(f"{y.shape[0]} candidate rows for {m} bags")
        sets = [tuple(np.flatnonzero(row).tolist()) for row in y]
        k = y.shape[1] if k is None else k
    else:
        y = list(y)
        if len(y) != m:
            raise SchemaError(f"{len(y)} label entries for {m} bags")
        sets = []
        for entry in y:
            if np.ndim(entry) == 0:
                sets.append((int(entry),))
            else:
                sets.append(tuple(sorted({int(c) for c in entry})))
    for i, s in enumerate(sets):
        if not s:
            raise SchemaError(f"bag {i}: empty candidate set")
        if min(s) < 0:
            raise SchemaError(f"bag {i}: negative class index")
    inferred = max(max(s) for s in sets) + 1
    k = max(inferred, 2) if k is None else k
    if inferred > k:
        raise SchemaError(f"candidate index {inferred - 1} outside [0, {k})")
    return sets, k


class MIPLMAClassifier(ClassifierMixin, BaseEstimator):
    """Margin-adjusted attention classifier for bags with candidate label sets.

    Hyperparameters mirror :class:`miplma.trainer.TrainConfig`.  After ``fit``,
    ``params_``, ``tau_``, ``report_`` and ``weights_`` hold the trained model,
    the final temperature, the per-epoch log and the disambiguation weights.
    """

    def __init__(self, epochs=100, batch_size=32, lr=0.01, momentum=0.9, weight_decay=1e-4,
                 lam=1.0, tau0=5.0, tau_min=0.1, tau_decay=0.95, anneal=True, mode="mipl",
                 margin_variant="distribution", feature_dim=32, hidden_sizes=(),
                 attention_dim=128, activation="tanh", grad_clip=10.0, n_classes=None,
                 random_state=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lam = lam
        self.tau0 = tau0
        self.tau_min = tau_min
        self.tau_decay = tau_decay
        self.anneal = anneal
        self.mode = mode
        self.margin_variant = margin_variant
        self.feature_dim = feature_dim
        self.hidden_sizes = hidden_sizes
        self.attention_dim = attention_dim
        self.activation = activation
        self.grad_clip = grad_clip
        self.n_classes = n_classes
        self.random_state = random_state

    def _config(self):
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
            weight_decay=self.weight_decay, lam=self.lam, tau0=self.tau0, tau_min=self.tau_min,
            tau_decay=self.tau_decay, anneal=self.anneal,
            seed=0 if self.random_state is None else int(self.random_state),
            mode=self.mode, margin_variant=self.margin_variant, feature_dim=self.feature_dim,
            hidden_sizes=tuple(self.hidden_sizes), attention_dim=self.attention_dim,
            activation=self.activation, grad_clip=self.grad_clip,
        )

    def fit(self, X, y):
        cfg = self._config()
        cfg.validate()
        bags = check_bags(X)
        cand_sets, k = check_candidates(y, len(bags), self.n_classes)
        if cfg.mode == "mil" and any(len(s) != 1 for s in cand_sets):
            raise ConfigurationError("mil mode expects exact labels (one candidate per bag)")
        ds = Dataset(DatasetMeta(bags[0].shape[1], k, "fit"),
                     tuple(Bag(f"bag-{i}", x, s) for i, (x, s) in enumerate(zip(bags, cand_sets))))
        if cfg.mode == "mil":
            ds = mil_mode_adapter(ds.replace_bags(
                [Bag(b.id, b.instances, b.candidates, b.candidates[0]) for b in ds.bags]))
        self.params_, self.report_, self.weights_ = train(cfg, ds)
        self.tau_ = self.report_.tau_final
        self.classes_ = np.arange(k)
        self.n_features_in_ = bags[0].shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        bags = check_bags(X, self.n_features_in_)
        return np.vstack([predict_bag(self.params_, x, self.tau_)[0] for x in bags])

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def attention(self, X, normalized=False):
        """Per-bag attention score vectors at the final temperature."""
        check_is_fitted(self, "params_")
        bags = check_bags(X, self.n_features_in_)
        pick = 2 if normalized else 1
        return [predict_bag(self.params_, x, self.tau_)[pick] for x in bags]
