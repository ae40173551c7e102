"""scikit-learn style wrappers around meta-training and exemplar estimation.

``ReFOCSClassifier.fit`` meta-trains on base classes. A few-shot task is then
set with :meth:`ReFOCSClassifier.adapt` and queries are scored against it.
Queries judged to come from none of the support classes are labelled ``-1``.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .core import forward_episode
from .data import DatasetManifest, ExemplarImage
from .engine import run_training
from .episodes import EpisodeBatch
from .exemplars import (nearest_to_centroid, penultimate_features,
                        pretrain_encoder_nonepisodic, select_support_exemplar)
from .nets import ArchConfig
from .validation import check_exemplars, check_images, check_labels, check_support

OPEN_LABEL = -1


def _manifest(X, y, exemplars, name) -> DatasetManifest:
    order = np.argsort(y, kind="stable")
    X, y = X[order], y[order]
    samples = {}
    for i, c in enumerate(y.tolist()):
        samples.setdefault(int(c), []).append(f"{name}-{int(order[i]):06d}")
    ex = {c: ExemplarImage(img, c, "canonical") for c, img in exemplars.items()}
    return DatasetManifest(name, tuple(X.shape[2:]), samples, X, ex)


class ReFOCSClassifier(ClassifierMixin, BaseEstimator):
    """Few-shot open-set classifier with exemplar reconstruction.

    Parameters mirror the most used run settings; ``overrides`` takes any
    further dotted config keys, e.g. ``{"loss.lambda_bce": 5.0}``.
    """

    def __init__(self, n_way=5, k_shot=1, episodes=3000, lr=1e-3, exemplar_mode="canonical",
                 encoder="vae", d_z=64, channels=32, n_blocks=4, threshold=0.5,
                 random_state=0, overrides=None):
        self.n_way = n_way
        self.k_shot = k_shot
        self.episodes = episodes
        self.lr = lr
        self.exemplar_mode = exemplar_mode
        self.encoder = encoder
        self.d_z = d_z
        self.channels = channels
        self.n_blocks = n_blocks
        self.threshold = threshold
        self.random_state = random_state
        self.overrides = overrides

    def _config(self, image_size) -> RunConfig:
        dotted = {
            "data.image_size": list(image_size), "episodes.n_way": self.n_way,
            "episodes.k_shot": self.k_shot, "episodes.episodes_train": self.episodes,
            "train.lr": self.lr, "train.seed": self.random_state,
            "method.exemplar_mode": self.exemplar_mode, "model.encoder": self.encoder,
            "model.d_z": self.d_z, "model.channels": self.channels, "model.n_blocks": self.n_blocks,
            "episodes.k_query_in_per_class": 3, "episodes.k_query_out_total": 3 * self.n_way,
        }
        if self.exemplar_mode == "estimated":
            dotted["loss.reconstruction"] = "l2"
        dotted.update(self.overrides or {})
        return RunConfig().replace(**dotted)

    def fit(self, X, y, exemplars=None):
        """Meta-train on base-class images ``X`` with labels ``y``.

        ``exemplars`` maps class id to one clean image; it is required for
        the canonical exemplar mode.
        """
        X = check_images(X)
        y = check_labels(y, len(X))
        self.config_ = self._config(X.shape[2:])
        ex = check_exemplars(exemplars, np.unique(y), X.shape[2:])
        manifest = _manifest(X, y, ex, "fit")
        self.state_ = run_training(manifest, self.config_)
        self.net_ = self.state_.net
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.history_ = list(self.state_.history)
        return self

    def adapt(self, X_support, y_support, exemplars=None):
        """Set the few-shot task: ``n_way`` classes with equally many shots each."""
        check_is_fitted(self, "net_")
        X, y, classes = check_support(X_support, y_support, self.n_way)
        size = tuple(self.config_.data.image_size)
        X = check_images(X, size, name="X_support")
        self.classes_ = classes
        slot_x = [X[y == c] for c in classes]
        if self.config_.method.exemplar_mode == "none":
            ex = None
        elif exemplars is not None:
            given = check_exemplars(exemplars, classes, size)
            ex = np.stack([given[int(c)] for c in classes])
        else:
            picks = []
            for xs in slot_x:
                feats = penultimate_features(self.net_.encoder, xs)
                picks.append(xs[select_support_exemplar(feats, self.config_.method.exemplar_distance)])
            ex = np.stack(picks)
        self.support_ = (np.concatenate(slot_x), ex, int(len(slot_x[0])))
        return self

    @torch.no_grad()
    def _forward(self, X):
        check_is_fitted(self, "net_")
        if not hasattr(self, "support_"):
            raise NotFittedError("call adapt() with a support set before predicting")
        X = check_images(X, tuple(self.config_.data.image_size))
        sup, ex, k = self.support_
        dtype = next(self.net_.parameters()).dtype
        n = len(self.classes_)
        batch = EpisodeBatch(
            support_x=torch.from_numpy(sup).to(dtype),
            support_slots=torch.arange(n).repeat_interleave(k),
            query_x=torch.from_numpy(X).to(dtype),
            query_slots=torch.zeros(len(X), dtype=torch.long),  # unused by the scores
            exemplar_x=None if ex is None else torch.from_numpy(ex).to(dtype),
            n_way=n, k_shot=k)
        self.net_.eval()
        out, _ = forward_episode(self.net_, batch, self.config_.method, self.config_.loss,
                                 encoder_kind=self.config_.model.encoder, deterministic=True)
        probs = out.class_probs.double().numpy()
        if self.config_.method.open_score == "softmax":
            score = 1.0 - probs.max(axis=1)
        else:
            score = out.openness_prob.double().numpy()
        return probs, score

    def predict_proba(self, X):
        """Closed-set class probabilities over the support classes."""
        return self._forward(X)[0]

    def decision_function(self, X):
        """Probability that each query is out-of-distribution."""
        return self._forward(X)[1]

    def predict(self, X):
        probs, score = self._forward(X)
        labels = self.classes_[probs.argmax(axis=1)]
        return np.where(score >= self.threshold, OPEN_LABEL, labels)


class ExemplarEstimator(TransformerMixin, BaseEstimator):
    """Pick one representative image per class.

    ``fit`` trains an encoder as a plain classifier over all classes and keeps,
    for each class, the sample nearest the class centroid in penultimate
    feature space. ``transform`` returns those penultimate features.
    """

    def __init__(self, epochs=5, lr=1e-3, d_z=64, channels=32, n_blocks=4,
                 distance="l2", random_state=0):
        self.epochs = epochs
        self.lr = lr
        self.d_z = d_z
        self.channels = channels
        self.n_blocks = n_blocks
        self.distance = distance
        self.random_state = random_state

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, len(X))
        arch = ArchConfig(image_size=tuple(X.shape[2:]), channels=self.channels,
                          n_blocks=self.n_blocks, d_z=self.d_z)
        manifest = _manifest(X, y, {}, "est")
        self.encoder_, self.loss_history_ = pretrain_encoder_nonepisodic(
            manifest, self.epochs, self.lr, self.random_state, arch=arch)
        feats = penultimate_features(self.encoder_, X)
        self.classes_ = np.unique(y)
        self.exemplar_indices_ = {}
        for c in self.classes_:
            idx = np.flatnonzero(y == c)
            self.exemplar_indices_[int(c)] = int(idx[nearest_to_centroid(feats[idx], idx, self.distance)])
        self.exemplars_ = {c: X[i] for c, i in self.exemplar_indices_.items()}
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "encoder_")
        X = check_images(X, tuple(self.encoder_.arch.image_size))
        return penultimate_features(self.encoder_, X)
