"""scikit-learn style wrappers around the training loops and transforms.

Images are ``[N, C, H, W]`` float arrays in [0, 1]. Labels may be any
hashable values; they are encoded to ``0..K-1`` internally.
"""
from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted

from .augment import WEAK_KINDS, augment_batch
from .autodiff import Tensor
from .corruptions import KINDS, SeverityTable, corrupt_images
from .datasets import LabeledImages
from .networks import Classifier, PatchDiscriminator, UNetTranslator
from .training import TrainConfig, harvest_gan_pairs, robust_train, train_erm, train_translator


def check_images(X, min_side: int = 1, channels: Optional[int] = None) -> np.ndarray:
    """Validate an image batch: rank 4, finite, within [0, 1]; returns float32."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_all_finite=True, ensure_min_samples=1)
    if X.ndim != 4:
        raise ValueError(f"expected images shaped [N, C, H, W], got {X.shape}")
    if X.min() < 0 or X.max() > 1:
        raise ValueError(f"pixel values must lie in [0, 1], got range [{X.min():.4g}, {X.max():.4g}]")
    if min(X.shape[2:]) < min_side:
        raise ValueError(f"images must be at least {min_side} pixels per side, got {X.shape[2:]}")
    if channels is not None and X.shape[1] != channels:
        raise ValueError(f"expected {channels} channels, got {X.shape[1]}")
    return np.ascontiguousarray(X)


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"y must be a 1-D array of length {n}, got shape {y.shape}")
    return y


def _train_config(est, **extra) -> TrainConfig:
    doc = {"mode": est.mode, "beta": est.beta, "lambda": est.lam, "fractions": tuple(est.fractions),
           "epochs": est.epochs, "batch_size": est.batch_size, "lr": est.lr, "seed": est.random_state,
           "harvest_steps": est.harvest_steps, "gan_epochs": est.gan_epochs,
           "pretrain_epochs": est.pretrain_epochs}
    doc.update(extra)
    return TrainConfig.model_validate(doc)


class _ImageClassifier(ClassifierMixin, BaseEstimator):
    def _encode(self, X, y) -> LabeledImages:
        X = check_images(X)
        y = check_labels(y, len(X))
        self.label_encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.label_encoder_.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.n_channels_ = X.shape[1]
        return LabeledImages(X, self.label_encoder_.transform(y), len(self.classes_))

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.predict_logits(check_images(X, channels=self.n_channels_))

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class ErmClassifier(_ImageClassifier):
    """Plain cross-entropy training of the desk classifier."""

    def __init__(self, width: int = 16, epochs: int = 10, batch_size: int = 32, lr: float = 0.1,
                 random_state: int = 0):
        self.width = width
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.random_state = random_state

    def fit(self, X, y):
        data = self._encode(X, y)
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, seed=self.random_state)
        self.model_ = Classifier(data.images.shape[1], data.n_classes, self.width, seed=self.random_state)
        self.history_ = train_erm(self.model_, data, cfg).history
        return self


class VicinalTranslator(TransformerMixin, BaseEstimator):
    """Translator trained on augmented and adversarial vicinal pairs.

    ``transform`` maps images through the trained network.
    """

    def __init__(self, base_channels: int = 32, depth: int = 3, gan_epochs: int = 10, lam: float = 1.0,
                 pretrain_epochs: int = 3, harvest_steps: Optional[int] = 10, random_state: int = 0):
        self.base_channels = base_channels
        self.depth = depth
        self.gan_epochs = gan_epochs
        self.lam = lam
        self.pretrain_epochs = pretrain_epochs
        self.harvest_steps = harvest_steps
        self.random_state = random_state

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, len(X))
        enc = LabelEncoder().fit(y)
        data = LabeledImages(X, enc.transform(y), len(enc.classes_))
        cfg = TrainConfig.model_validate({"lambda": self.lam, "gan_epochs": self.gan_epochs,
                                          "harvest_steps": self.harvest_steps, "seed": self.random_state,
                                          "pretrain_epochs": self.pretrain_epochs})
        source = Classifier(X.shape[1], data.n_classes, 16, seed=self.random_state + 100)
        train_erm(source, data, cfg.model_copy(update={"epochs": self.pretrain_epochs}))
        pairs = harvest_gan_pairs(data, source, cfg, self.random_state)
        self.translator_ = UNetTranslator(X.shape[1], self.depth, self.base_channels, seed=self.random_state)
        self.discriminator_ = PatchDiscriminator(X.shape[1], seed=self.random_state + 1)
        self.trace_ = train_translator(self.translator_, self.discriminator_, pairs, cfg)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "translator_")
        X = check_images(X, channels=self.translator_.channels)
        out = [self.translator_(Tensor(X[i:i + 256])).data for i in range(0, len(X), 256)]
        return np.clip(np.concatenate(out), 0.0, 1.0).astype(np.float32)


class VitaClassifier(_ImageClassifier):
    """Multi-source robust training: weak augmentation, adversarial samples and
    translator-generated samples, with a consistency regularizer.

    ``translator`` may be a fitted :class:`VicinalTranslator` or a raw
    :class:`~vita.networks.UNetTranslator`; when omitted one is trained on the
    same data inside ``fit``.
    """

    def __init__(self, mode: str = "corruption", beta: float = 1.0, lam: float = 1.0,
                 fractions: Sequence[float] = (0.25, 0.25, 0.5), epochs: int = 10, batch_size: int = 32,
                 lr: float = 0.1, width: int = 16, translator=None, translator_base: int = 32,
                 gan_epochs: int = 10, pretrain_epochs: int = 3, harvest_steps: Optional[int] = 10,
                 random_state: int = 0):
        self.mode = mode
        self.beta = beta
        self.lam = lam
        self.fractions = fractions
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.width = width
        self.translator = translator
        self.translator_base = translator_base
        self.gan_epochs = gan_epochs
        self.pretrain_epochs = pretrain_epochs
        self.harvest_steps = harvest_steps
        self.random_state = random_state

    def _translator(self, X, y) -> Optional[UNetTranslator]:
        if tuple(self.fractions)[2] == 0:
            return None
        t = self.translator
        if t is None:
            t = VicinalTranslator(self.translator_base, gan_epochs=self.gan_epochs, lam=self.lam,
                                  pretrain_epochs=self.pretrain_epochs, harvest_steps=self.harvest_steps,
                                  random_state=self.random_state).fit(X, y)
        if isinstance(t, VicinalTranslator):
            check_is_fitted(t, "translator_")
            t = t.translator_
        return t

    def fit(self, X, y):
        data = self._encode(X, y)
        cfg = _train_config(self)
        self.translator_ = self._translator(data.images, y)
        self.model_ = Classifier(data.images.shape[1], data.n_classes, self.width, seed=self.random_state)
        self.history_ = robust_train(self.model_, data, self.translator_, cfg).history
        return self


class CorruptionTransformer(TransformerMixin, BaseEstimator):
    """Apply one evaluation corruption at a fixed severity (stateless)."""

    def __init__(self, kind: str = "gaussian_noise", severity: int = 1, random_state: int = 0):
        self.kind = kind
        self.severity = severity
        self.random_state = random_state

    def fit(self, X, y=None):
        if self.kind not in KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if self.severity not in (1, 2, 3, 4, 5):
            raise ValueError(f"severity must be in 1..5, got {self.severity}")
        check_images(X, min_side=8)
        self.table_ = SeverityTable.default()
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "table_")
        X = check_images(X, min_side=8)
        return corrupt_images(X, self.kind, self.severity, self.table_, self.random_state)


class WeakAugmenter(TransformerMixin, BaseEstimator):
    """Random weak augmentation per image with the L2 difference cap."""

    def __init__(self, kinds: Tuple[str, ...] = WEAK_KINDS, epsilon2: float = 0.5, random_state: int = 0):
        self.kinds = kinds
        self.epsilon2 = epsilon2
        self.random_state = random_state

    def fit(self, X, y=None):
        check_images(X)
        self.config_ = TrainConfig(augment_kinds=tuple(self.kinds), epsilon2=self.epsilon2)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "config_")
        X = check_images(X)
        return augment_batch(X, np.random.default_rng(self.random_state), self.config_.augment_kinds,
                             self.config_.budget)
