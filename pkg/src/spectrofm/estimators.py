"""scikit-learn style wrappers around the normalizer, pretrainer, heads, and router."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .encoder import EncoderConfig, Heads, TransformerEncoder, pooled_features
from .moe import EXPERT_ORDER, Router, RouterConfig, protocol_index
from .objectives import AdamW, Finetuner, MaskedPretrainer, TrainConfig, cross_entropy, stratified_batches
from .specgen import LOG_FLOOR, fit_norm_stats, preprocess


def _check_spectrograms(X) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float32)
    if X.ndim == 4 and X.shape[-1] == 1:
        X = X[..., 0]
    if X.ndim != 3:
        raise ValueError(f"expected (n, T, K) spectrograms, got shape {X.shape}")
    return X


class SpectrogramNormalizer(TransformerMixin, BaseEstimator):
    """Raw power (n, T, K) -> global z-scored log10 spectrograms."""

    def __init__(self, epsilon: float = LOG_FLOOR):
        self.epsilon = epsilon

    def fit(self, X, y=None):
        X = check_array(X, allow_nd=True, dtype=np.float64)
        self.stats_ = fit_norm_stats(list(X), self.epsilon)
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        return preprocess(X, self.stats_)[..., 0].astype(np.float32)


class SpectroPretrainer(TransformerMixin, BaseEstimator):
    """Masked spectrogram modeling; ``transform`` returns pooled encoder features."""

    def __init__(
        self,
        patch: int = 8,
        depth: int = 2,
        dim: int = 32,
        heads: int = 4,
        mask_ratio: float = 0.7,
        epochs: int = 30,
        batch_size: int = 32,
        base_lr: float = 5e-4,
        val_fraction: float = 0.1,
        random_state: int = 0,
    ):
        self.patch = patch
        self.depth = depth
        self.dim = dim
        self.heads = heads
        self.mask_ratio = mask_ratio
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.val_fraction = val_fraction
        self.random_state = random_state

    def fit(self, X, y=None):
        X = _check_spectrograms(X)
        cfg = EncoderConfig(patch=self.patch, depth=self.depth, dim=self.dim, heads=self.heads, mask_ratio=self.mask_ratio)
        self.encoder_ = TransformerEncoder(cfg, self.random_state)
        self.heads_ = Heads(cfg, 0, self.random_state + 1)
        perm = np.random.default_rng(self.random_state).permutation(len(X))
        n_val = max(1, int(round(self.val_fraction * len(X))))
        tc = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            base_lr=self.base_lr,
            warmup_epochs=min(5, self.epochs / 2),
            seed=self.random_state,
        )
        self.result_ = MaskedPretrainer(self.encoder_, self.heads_, tc).fit(X[perm[n_val:]], X[perm[:n_val]])
        return self

    def transform(self, X):
        check_is_fitted(self, "encoder_")
        return pooled_features(self.encoder_, _check_spectrograms(X))


class FewShotClassifier(ClassifierMixin, BaseEstimator):
    """Residual-conv head over a frozen (or fine-tuned) encoder.

    ``encoder`` is a fitted TransformerEncoder; None gives a random init of
    ``encoder_config``.
    """

    def __init__(
        self,
        encoder=None,
        encoder_config: dict | None = None,
        mode: str = "FROZEN",
        epochs: int = 100,
        batch_size: int = 40,
        base_lr: float = 1e-3,
        weight_decay: float = 5e-4,
        random_state: int = 0,
    ):
        self.encoder = encoder
        self.encoder_config = encoder_config
        self.mode = mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.random_state = random_state

    def fit(self, X, y):
        X = _check_spectrograms(X)
        self.classes_, yi = np.unique(np.asarray(y), return_inverse=True)
        enc = self.encoder
        if enc is None:
            enc = TransformerEncoder(EncoderConfig.from_dict(self.encoder_config or {}), self.random_state)
        tc = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            base_lr=self.base_lr,
            warmup_epochs=min(2, self.epochs / 2),
            weight_decay=self.weight_decay,
            mode=self.mode,
            seed=self.random_state,
        )
        self.tuner_ = Finetuner(enc, Heads(enc.config, len(self.classes_), 1000 + self.random_state), tc)
        self.result_ = self.tuner_.fit(X, yi)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "tuner_")
        return self.tuner_.logits(_check_spectrograms(X))

    def predict_proba(self, X):
        z = self.decision_function(X).astype(np.float64)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


class ProtocolRouter(ClassifierMixin, BaseEstimator):
    """Gate that maps a spectrogram to one of the three protocol experts."""

    def __init__(self, patch: int = 8, dim: int = 64, depth: int = 2, heads: int = 4, epochs: int = 20, random_state: int = 0):
        self.patch = patch
        self.dim = dim
        self.depth = depth
        self.heads = heads
        self.epochs = epochs
        self.random_state = random_state

    def fit(self, X, y):
        X = _check_spectrograms(X)
        yi = protocol_index(y)
        self.classes_ = np.array([p.value for p in EXPERT_ORDER])
        self.router_ = Router(RouterConfig(dim=self.dim, depth=self.depth, heads=self.heads, patch=self.patch), self.random_state)
        tc = TrainConfig(epochs=self.epochs, batch_size=32, base_lr=1e-3, warmup_epochs=min(2, self.epochs / 2), seed=self.random_state)
        params = self.router_.params.requires_grad_(True)
        opt, sched = AdamW(params, weight_decay=tc.weight_decay), tc.schedule()
        for epoch in range(tc.epochs):
            batches = stratified_batches(yi, tc.batch_size, np.random.default_rng([tc.seed, 5, epoch]))
            for j, idx in enumerate(batches):
                params.zero_grad()
                cross_entropy(self.router_.logits(X[idx]), yi[idx]).backward()
                opt.step(sched(epoch + j / len(batches)))
        params.requires_grad_(False)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "router_")
        return self.router_.route(_check_spectrograms(X)).weights

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
