"""scikit-learn style facade over the federated trainer.

``FederatedSegmenter.fit(X, y, groups)`` treats each distinct value in
``groups`` as one client, splits its images into train/test, and runs the
chosen preset. Prediction uses a client's personalized model when
``client`` is given and the final global model otherwise.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_random_state

from .data import Sample, majority_pool, split
from .errors import ValidationError
from .federation import FedConfig, clients_from_samples, federate, final_global_model, get_preset, thread_count
from .losses import LossWeights
from .metrics import evaluate_logits
from .numerics import _sigmoid
from .segmodel import ModelConfig


def _check_images(X, image_size):
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1] != 1 or X.shape[2:] != (image_size, image_size):
        raise ValidationError(f"expected images of shape (n, {image_size}, {image_size}), got {X.shape}")
    return X


def _check_masks(y, n, image_size):
    y = check_array(y, allow_nd=True, ensure_2d=False, dtype=None)
    if y.shape != (n, image_size, image_size):
        raise ValidationError(f"expected masks of shape ({n}, {image_size}, {image_size}), got {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValidationError("masks must be binary")
    return y.astype(np.uint8)


class FederatedSegmenter(BaseEstimator):
    """Personalized federated segmentation with a frozen toy backbone.

    Parameters mirror :class:`FedConfig`, :class:`LossWeights` and
    :class:`ModelConfig`; ``random_state`` is the root seed.
    """

    def __init__(
        self,
        preset="Ours",
        rounds=5,
        local_epochs=1,
        batch_size=4,
        learning_rate=1e-3,
        lambda_lmoe=1.5,
        lambda_kd=0.1,
        tau=0.5,
        image_size=64,
        patch_size=8,
        embed_dim=32,
        depth=2,
        heads=2,
        mask_scale=4,
        rank=4,
        alpha=16.0,
        train_fraction=0.9,
        random_state=0,
        n_jobs=None,
    ):
        self.preset = preset
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lambda_lmoe = lambda_lmoe
        self.lambda_kd = lambda_kd
        self.tau = tau
        self.image_size = image_size
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.depth = depth
        self.heads = heads
        self.mask_scale = mask_scale
        self.rank = rank
        self.alpha = alpha
        self.train_fraction = train_fraction
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _seed(self) -> int:
        if isinstance(self.random_state, (int, np.integer)):
            return int(self.random_state)
        return int(check_random_state(self.random_state).randint(2**31 - 1))

    def _configs(self, seed):
        fed = FedConfig(
            rounds=self.rounds,
            local_epochs_personalized=self.local_epochs,
            local_epochs_global=self.local_epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            loss_weights=LossWeights(self.lambda_lmoe, self.lambda_kd, self.tau),
            seed=seed,
        )
        model = ModelConfig(
            image_size=self.image_size,
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            depth=self.depth,
            heads=self.heads,
            mask_scale=self.mask_scale,
            rank=self.rank,
            alpha=self.alpha,
        )
        return fed, model

    def fit(self, X, y, groups=None):
        """Fit on images ``X`` (n, S, S), binary masks ``y`` (n, S, S) and client labels ``groups``."""
        preset = get_preset(self.preset)
        X = _check_images(X, self.image_size)
        y = _check_masks(y, len(X), self.image_size)
        if groups is None:
            raise ValidationError("groups is required: one client label per image")
        groups = np.asarray(groups)
        if groups.shape != (len(X),):
            raise ValidationError(f"groups must have length {len(X)}")
        if not 0 < self.train_fraction < 1:
            raise ValidationError("train_fraction must lie in (0, 1)")
        seed = self._seed()
        fed, model_config = self._configs(seed)

        datasets = []
        for cid in sorted({str(g) for g in groups}):
            idx = np.flatnonzero(groups.astype(str) == cid)
            samples = [Sample(X[i], y[i], majority_pool(y[i], self.mask_scale)) for i in idx]
            if len(samples) < 10:
                raise ValidationError(f"client {cid!r} needs at least 10 images, got {len(samples)}")
            train, test = split(samples, self.train_fraction, seed)
            datasets.append((cid, train, test))
        if len(datasets) < 2 and preset.name != "A":
            raise ValidationError("federated presets need at least 2 clients")

        threads = self.n_jobs if self.n_jobs is not None else thread_count()
        clients, proto = clients_from_samples(preset, model_config, datasets, seed)
        server, reports = federate(preset, fed, clients, proto, threads)
        self.clients_ = {c.client_id: c for c in clients}
        self.client_ids_ = list(self.clients_)
        self.global_model_ = final_global_model(preset, proto, server, clients)
        self.round_reports_ = reports
        self.base_hash_ = proto.base_hash()
        return self

    def _model(self, client):
        check_is_fitted(self, "global_model_")
        if client is None:
            return self.global_model_
        if client not in self.clients_:
            raise ValidationError(f"unknown client {client!r}; fitted clients are {self.client_ids_}")
        return self.clients_[client].eval_model

    def decision_function(self, X, client=None) -> np.ndarray:
        """Mask logits at the decoder resolution, shape (n, S/mask_scale, S/mask_scale)."""
        model = self._model(client)
        return model.predict_logits(_check_images(X, self.image_size))

    def predict_proba(self, X, client=None) -> np.ndarray:
        return _sigmoid(self.decision_function(X, client))

    def predict(self, X, client=None) -> np.ndarray:
        return (self.predict_proba(X, client) > 0.5).astype(np.uint8)

    def score(self, X, y, client=None) -> float:
        """Micro-averaged Dice of the thresholded prediction."""
        logits = self.decision_function(X, client)
        y = _check_masks(y, len(logits), self.image_size)
        masks = np.stack([majority_pool(m, self.mask_scale) for m in y])
        return evaluate_logits(logits, masks).dice
