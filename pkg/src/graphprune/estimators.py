"""scikit-learn style wrappers around training, search and correlation analysis."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .correlation import ActivationStack, correlation_report, pearson_matrix
from .data import Dataset
from .ddpg import SearchConfig
from .graph import BUNDLED, ModelGraph, apply_ratio_sharing, load_bundled, load_model_description, uniform_ratios
from .pipeline import ModelReward, budget_from_fraction, search_model
from .trainer import DEFAULT_GRID, GraphPruningModel, TrainConfig, _ratio_key, predict_logits, recalibrate_bn, train


def _graph(description) -> ModelGraph:
    if isinstance(description, ModelGraph):
        return description
    if description in BUNDLED:
        return load_bundled(description)
    return load_model_description(description)


def _images(X) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=None, ensure_all_finite=True)
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (n, channels, height, width), got {X.shape}")
    if X.dtype != np.uint8:
        if X.min() < 0 or X.max() > 255:
            raise ValueError("pixel values must lie in [0, 255]")
        X = np.round(X).astype(np.uint8)
    return X


class PruningNetClassifier(BaseEstimator, ClassifierMixin):
    """Train a PruningNet once, then classify under any channel configuration.

    ``ratios`` selects the configuration used by :meth:`predict`; ``None``
    means the unpruned network.  The last ``recal_fraction`` of the training
    images is held back for batch-norm recalibration.
    """

    def __init__(self, description="mobilenet_v1_reduced", epochs=8, batch_size=32, init_lr=0.05,
                 momentum=0.9, weight_decay=4e-5, lr_schedule="cosine", ratio_grid=DEFAULT_GRID,
                 crop=True, flip=True, mix_neighbors=True, hypernet_hidden=None, recal_fraction=0.1,
                 ratios=None, random_state=0):
        self.description = description
        self.epochs = epochs
        self.batch_size = batch_size
        self.init_lr = init_lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_schedule = lr_schedule
        self.ratio_grid = ratio_grid
        self.crop = crop
        self.flip = flip
        self.mix_neighbors = mix_neighbors
        self.hypernet_hidden = hypernet_hidden
        self.recal_fraction = recal_fraction
        self.ratios = ratios
        self.random_state = random_state

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, init_lr=self.init_lr,
                           momentum=self.momentum, weight_decay=self.weight_decay,
                           lr_schedule=self.lr_schedule, seed=int(self.random_state or 0),
                           ratio_grid=tuple(self.ratio_grid), crop=self.crop, flip=self.flip,
                           mix_neighbors=self.mix_neighbors, hypernet_hidden=self.hypernet_hidden)

    def fit(self, X, y):
        X = _images(X)
        y = np.asarray(y)
        if y.shape != (len(X),):
            raise ValueError(f"y must have shape ({len(X)},), got {y.shape}")
        self.classes_, codes = np.unique(y, return_inverse=True)
        data = Dataset(X, codes.astype(np.uint8), len(self.classes_))
        train_set, recal_set = data.split(1.0 - self.recal_fraction)
        self.graph_ = _graph(self.description)
        self.model_ = GraphPruningModel(self.graph_, len(self.classes_), self.train_config())
        train(self.model_, train_set, self.model_.config)
        self.recal_set_ = recal_set
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def resolve_ratios(self, ratios=None):
        ratios = self.ratios if ratios is None else ratios
        if ratios is None:
            return uniform_ratios(self.graph_, 1.0)
        return ratios if hasattr(ratios, "free") else apply_ratio_sharing(self.graph_, ratios)

    def recalibrate(self, ratios=None):
        check_is_fitted(self, "model_")
        r = self.resolve_ratios(ratios)
        if self.model_.calibrated_for != _ratio_key(r):
            recalibrate_bn(self.model_, r, self.recal_set_)
        return r

    def decision_function(self, X, ratios=None):
        r = self.recalibrate(ratios)
        return predict_logits(self.model_, r, _images(X))

    def predict(self, X, ratios=None):
        check_is_fitted(self, "model_")
        return self.classes_[self.decision_function(X, ratios).argmax(axis=1)]


class RatioSearch(BaseEstimator):
    """Search per-layer ratios of a fitted :class:`PruningNetClassifier` under a FLOPs budget.

    ``fit(X, y)`` uses ``(X, y)`` as the reward split.
    """

    def __init__(self, classifier=None, budget_fraction=0.5, episodes=300, warmup_episodes=100,
                 noise_init=0.5, noise_decay=0.995, discount=0.9, batch_size=64, tau=0.01,
                 random_state=0):
        self.classifier = classifier
        self.budget_fraction = budget_fraction
        self.episodes = episodes
        self.warmup_episodes = warmup_episodes
        self.noise_init = noise_init
        self.noise_decay = noise_decay
        self.discount = discount
        self.batch_size = batch_size
        self.tau = tau
        self.random_state = random_state

    def fit(self, X, y):
        check_is_fitted(self.classifier, "model_")
        clf = self.classifier
        X = _images(X)
        codes = np.searchsorted(clf.classes_, np.asarray(y))
        eval_set = Dataset(X, codes.astype(np.uint8), len(clf.classes_))
        model = clf.model_
        config = SearchConfig(episodes=self.episodes, warmup_episodes=self.warmup_episodes,
                              noise_init=self.noise_init, noise_decay=self.noise_decay,
                              discount=self.discount, budget=budget_from_fraction(model, self.budget_fraction),
                              batch_size=self.batch_size, tau=self.tau, seed=int(self.random_state or 0),
                              ratio_grid=tuple(clf.ratio_grid))
        result = search_model(model, clf.recal_set_, eval_set, config)
        self.best_ratios_ = result.best_ratios
        self.best_reward_ = result.best_reward
        self.best_flops_ = result.best_flops
        self.log_ = result.log
        return self

    def score(self, X, y):
        check_is_fitted(self, "best_ratios_")
        clf = self.classifier
        clf.recalibrate(self.best_ratios_)
        return ModelReward(clf.model_, clf.recal_set_, Dataset(
            _images(X), np.searchsorted(clf.classes_, np.asarray(y)).astype(np.uint8),
            len(clf.classes_)))(self.best_ratios_)


class FilterCorrelation(BaseEstimator, TransformerMixin):
    """Correlate the channels of a reference activation stack with those of another.

    ``fit`` takes the reference ``h x w x m`` stack; ``transform`` returns the
    ``m x n`` matrix against an ``h x w x n`` stack.
    """

    def __init__(self, mode="standard", tau=0.8):
        self.mode = mode
        self.tau = tau

    def fit(self, X, y=None):
        X = check_array(X, allow_nd=True, ensure_min_features=1)
        if X.ndim != 3:
            raise ValueError(f"expected an h x w x m stack, got shape {X.shape}")
        self.reference_ = X
        self.n_channels_ = X.shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "reference_")
        X = check_array(X, allow_nd=True)
        P, self.skipped_ = pearson_matrix(self.reference_, X, self.mode)
        return P

    def report(self, X, layers=(-1, -1)):
        check_is_fitted(self, "reference_")
        return correlation_report(ActivationStack(layers[0], self.reference_),
                                  ActivationStack(layers[1], check_array(X, allow_nd=True)), self.mode, self.tau)
