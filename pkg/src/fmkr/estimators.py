"""scikit-learn compatible wrappers.

``MetaStageClassifier`` runs class-balanced meta-training (optionally followed
by local fine-tuning); ``BalancedMLPClassifier`` is plain mini-batch SGD on
the same MLP, with or without class weights, and serves as the ERM baseline.
``SyslogFeaturizer`` turns raw syslog messages into the 14-dim vectors.
"""

from __future__ import annotations

from collections import Counter

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from fmkr import nn
from fmkr.episodes import EpisodeConfig
from fmkr.finetune import FinetuneConfig, finetune
from fmkr.ingest import SYSLOG_DIM, compute_class_weights, dataset_from_arrays, featurize_syslog_line
from fmkr.meta import TrainConfig, meta_train
from fmkr.stages import N_STAGES, StageLabel


def _stage_codes(y) -> np.ndarray:
    return np.array([int(StageLabel.parse(v)) for v in np.asarray(y).ravel()], dtype=np.int64)


class _MlpPredictMixin:
    """predict/predict_proba over a fitted ``model_``."""

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X)
        return nn.forward(self.model_, X)

    def predict_proba(self, X):
        return np.exp(nn.log_softmax(self.decision_function(X)))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]


class MetaStageClassifier(_MlpPredictMixin, ClassifierMixin, BaseEstimator):
    """Kill-chain stage classifier trained by episodic meta-learning.

    ``y`` may hold stage names or integer codes; predictions are integer
    codes (see :class:`~fmkr.stages.StageLabel`). DE samples form the query
    pool, every other stage feeds the k-way support tasks.

    Parameters mirror :class:`~fmkr.meta.TrainConfig` and
    :class:`~fmkr.episodes.EpisodeConfig`. ``syslog_dim`` marks how many
    trailing columns are syslog features (only used to flag matched samples).
    """

    def __init__(self, hidden_sizes=(64, 32), alpha=0.01, beta=0.01, rounds=200, batch_size=64,
                 k=3, n_shot=5, n_query=15, tasks_per_batch=4, class_balance=True,
                 syslog_dim=SYSLOG_DIM, random_state=0):
        self.hidden_sizes = hidden_sizes
        self.alpha = alpha
        self.beta = beta
        self.rounds = rounds
        self.batch_size = batch_size
        self.k = k
        self.n_shot = n_shot
        self.n_query = n_query
        self.tasks_per_batch = tasks_per_batch
        self.class_balance = class_balance
        self.syslog_dim = syslog_dim
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        codes = _stage_codes(y)
        syslog_dim = self.syslog_dim if self.syslog_dim <= X.shape[1] else 0
        ds = dataset_from_arrays(X, codes, syslog_dim=syslog_dim)
        seed = 0 if self.random_state is None else int(self.random_state)
        ep_cfg = EpisodeConfig(k=self.k, n_shot=self.n_shot, n_query=self.n_query,
                               tasks_per_batch=self.tasks_per_batch, seed=seed)
        tr_cfg = TrainConfig(alpha=self.alpha, beta=self.beta, batch_size=self.batch_size,
                             rounds=self.rounds, seed=seed, class_balance=self.class_balance,
                             hidden_sizes=tuple(self.hidden_sizes), n_classes=N_STAGES)
        self.model_, self.report_ = meta_train(ds, ep_cfg, tr_cfg)
        self.classes_ = np.arange(N_STAGES)
        self.n_features_in_ = X.shape[1]
        return self

    def finetune(self, X, y, **cfg):
        """Adapt the fitted model to local data; keyword args go to :class:`FinetuneConfig`."""
        check_is_fitted(self, "model_")
        X, y = check_X_y(X, y, dtype=np.float64)
        cfg.setdefault("seed", 0 if self.random_state is None else int(self.random_state))
        self.model_, self.finetune_report_ = finetune(self.model_, (X, _stage_codes(y)),
                                                      FinetuneConfig(**cfg))
        self.classes_ = np.arange(self.model_.n_classes)
        return self


class BalancedMLPClassifier(_MlpPredictMixin, ClassifierMixin, BaseEstimator):
    """Same MLP trained by plain mini-batch SGD for ``n_steps`` updates.

    With ``class_balance=False`` this is ordinary empirical risk
    minimization; with ``True`` every class is weighted by its inverse
    frequency relative to the largest class.
    """

    def __init__(self, hidden_sizes=(64, 32), lr=0.01, batch_size=64, n_steps=1000,
                 class_balance=False, random_state=0):
        self.hidden_sizes = hidden_sizes
        self.lr = lr
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.class_balance = class_balance
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        codes = _stage_codes(y)
        rng = np.random.default_rng(self.random_state)
        model = nn.mlp_init([X.shape[1], *self.hidden_sizes, N_STAGES], rng)
        weights = None
        if self.class_balance:
            weights = np.ones(N_STAGES)
            for c, w in compute_class_weights(Counter(codes.tolist())).items():
                weights[c] = w
        size = min(self.batch_size, len(X))
        for _ in range(self.n_steps):
            idx = rng.choice(len(X), size=size, replace=False)
            _, grads = nn.backward(model, X[idx], codes[idx], weights)
            nn.sgd_step(model, grads, self.lr, inplace=True)
        self.model_ = model
        self.classes_ = np.arange(N_STAGES)
        self.n_features_in_ = X.shape[1]
        return self


class SyslogFeaturizer(TransformerMixin, BaseEstimator):
    """Stateless: maps an iterable of message strings to an ``(n, 14)`` array."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return np.vstack([featurize_syslog_line(str(t)) for t in X]) if len(X) else np.zeros((0, 14))
