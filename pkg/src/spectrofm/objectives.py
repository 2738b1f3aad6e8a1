"""Losses, AdamW, the warmup-cosine schedule, and the training loops."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import Heads, ParamSet, TransformerEncoder, mask_to_bool, sample_batch_masks, sequence_features
from .errors import BatchTooSmall, ConfigError, EmptyMask, ShapeError

log = logging.getLogger(__name__)

_NEG = -1e9


# ---------------------------------------------------------------- losses


@dataclass(frozen=True)
class LossWeights:
    recon: float = 1.0
    cont: float = 0.3
    temperature: float = 0.2

    def __post_init__(self):
        if self.recon < 0 or self.cont < 0:
            raise ValueError("loss weights must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def loss_recon(pred: Tensor, target) -> Tensor:
    """Mean over masked tokens of the squared L2 reconstruction error."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    if pred.shape[0] == 0:
        raise EmptyMask("no masked tokens to reconstruct")
    diff = pred - target
    return ad.scale(ad.tsum(diff * diff), 1.0 / pred.shape[0])


def contrastive_views(labels) -> tuple[np.ndarray, np.ndarray]:
    """Positive mask P(i) and candidate mask A(i) as (B, B) booleans."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    eye = np.eye(labels.size, dtype=bool)
    return same & ~eye, ~eye


def loss_supcon(z: Tensor, labels, temperature: float = 0.2) -> Tensor:
    """Supervised contrastive loss summed over anchors; anchors without positives add 0."""
    labels = np.asarray(labels)
    b = z.shape[0]
    if b < 2 or labels.size != b:
        raise BatchTooSmall(f"need a batch of at least 2 labelled embeddings, got {b}")
    norms = np.linalg.norm(z.data, axis=1)
    if not np.allclose(norms, 1.0, atol=1e-5):
        raise ValueError("contrastive inputs must be unit vectors")
    pos, cand = contrastive_views(labels)
    n_pos = pos.sum(axis=1)
    weights = np.where(n_pos[:, None] > 0, pos / np.maximum(n_pos, 1)[:, None], 0.0).astype(z.dtype)
    logits = ad.scale(z @ ad.transpose(z), 1.0 / temperature)
    logits = logits + Tensor(np.where(cand, 0.0, _NEG).astype(z.dtype))
    log_prob = ad.log_softmax(logits, axis=1)
    return ad.neg(ad.tsum(log_prob * Tensor(weights)))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    lp = ad.log_softmax(logits, axis=-1)
    picked = lp[np.arange(labels.size), labels]
    return ad.neg(ad.mean(picked))


def combine_losses(l_recon: Tensor, l_cont: Tensor | None, weights: LossWeights) -> Tensor:
    total = ad.scale(l_recon, weights.recon)
    if l_cont is not None:
        total = total + ad.scale(l_cont, weights.cont)
    return total


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05


def adamw_step(params: dict, grads: dict, state: OptimState, lr: float, lr_scale: dict | None = None) -> dict:
    """One decoupled-weight-decay Adam update; returns new arrays, advances ``state``.

    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad {g.shape} vs param {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m.astype(p.dtype), v.astype(p.dtype)
        step_lr = lr * (lr_scale or {}).get(name, 1.0)
        upd = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p
        out[name] = (p - step_lr * upd).astype(p.dtype)
    return out


class AdamW:
    """Applies ``adamw_step`` to a ParamSet in place, skipping params without grad tracking."""

    def __init__(self, params: ParamSet, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.05, lr_scale=None):
        self.params = params
        self.state = OptimState(beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
        self.lr_scale = dict(lr_scale or {})

    def step(self, lr: float, clip_norm: float | None = None) -> None:
        live = {k: t for k, t in self.params.items() if t.requires_grad}
        grads = {k: t.grad for k, t in live.items() if t.grad is not None}
        if clip_norm is not None:
            total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if total > clip_norm:
                grads = {k: g * (clip_norm / total) for k, g in grads.items()}
        new = adamw_step({k: t.data for k, t in live.items()}, grads, self.state, lr, self.lr_scale)
        for k, arr in new.items():
            live[k].data = arr

    def state_arrays(self) -> dict:
        out = {}
        for k in self.state.m:
            out[f"opt.m.{k}"] = self.state.m[k]
            out[f"opt.v.{k}"] = self.state.v[k]
        return out

    def load_state_arrays(self, arrays: dict, step: int) -> None:
        self.state.step = step
        for key, arr in arrays.items():
            if key.startswith("opt.m."):
                self.state.m[key[6:]] = arr.astype(self.params[key[6:]].dtype)
            elif key.startswith("opt.v."):
                self.state.v[key[6:]] = arr.astype(self.params[key[6:]].dtype)


@dataclass(frozen=True)
class CosineWarmup:
    """Linear warmup to ``base_lr``, then cosine decay to ``floor_lr`` at ``total_epochs``."""

    base_lr: float = 5e-4
    warmup_epochs: float = 5.0
    total_epochs: float = 100.0
    floor_lr: float = 1e-8

    def __post_init__(self):
        if self.total_epochs <= self.warmup_epochs:
            raise ValueError("total_epochs must exceed warmup_epochs")

    def __call__(self, epoch: float) -> float:
        if epoch <= self.warmup_epochs:
            return self.base_lr * epoch / self.warmup_epochs if self.warmup_epochs > 0 else self.base_lr
        frac = min(1.0, (epoch - self.warmup_epochs) / (self.total_epochs - self.warmup_epochs))
        return self.floor_lr + 0.5 * (self.base_lr - self.floor_lr) * (1.0 + math.cos(math.pi * frac))


def lr_schedule(epoch_fraction: float, schedule: CosineWarmup | None = None) -> float:
    return (schedule or CosineWarmup())(epoch_fraction)


# ---------------------------------------------------------------- training config


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    base_lr: float = 5e-4
    warmup_epochs: float = 5.0
    floor_lr: float = 1e-8
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 10
    min_delta: float = 1e-4
    seed: int = 0
    clip_norm: float | None = None
    recon_weight: float = 1.0
    cont_weight: float = 0.3
    temperature: float = 0.2
    cls_weight: float = 1.0
    encoder_lr_factor: float = 0.1
    mode: str = "FROZEN"

    def __post_init__(self):
        if self.mode not in ("FROZEN", "FT"):
            raise ConfigError("mode must be FROZEN or FT")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.recon_weight, self.cont_weight, self.temperature)

    def schedule(self) -> CosineWarmup:
        warm = min(self.warmup_epochs, self.epochs * 0.5)
        return CosineWarmup(self.base_lr, warm, float(self.epochs), self.floor_lr)


@dataclass
class EarlyStopping:
    patience: int = 10
    min_delta: float = 1e-4
    best: float = math.inf
    best_epoch: int = -1
    wait: int = 0
    snapshot: dict | None = None

    def update(self, epoch: int, value: float, snapshot_fn) -> bool:
        """Record ``value``; returns True when training should stop."""
        if value < self.best - self.min_delta:
            self.best, self.best_epoch, self.wait = value, epoch, 0
            self.snapshot = snapshot_fn()
            return False
        self.wait += 1
        return self.wait >= self.patience


@dataclass
class TrainResult:
    curve: list[dict]
    best_epoch: int
    best_val: float
    initial_val: float
    stopped_early: bool

    def write_csv(self, path) -> None:
        write_curve(self.curve, path)


CURVE_FIELDS = ("epoch", "split", "L_recon", "L_cont", "L_cls", "lr")


def write_curve(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in CURVE_FIELDS})


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _masked_targets(heads_target: str, X: Tensor, patches: Tensor, index: np.ndarray) -> np.ndarray:
    src = patches.data if heads_target == "patch" else X.data
    b, n, f = src.shape
    return src.reshape(b * n, f)[(np.arange(b)[:, None] * n + index).ravel()]


# ---------------------------------------------------------------- pretraining


class MaskedPretrainer:
    """Masked spectrogram modeling with the reconstruction loss only."""

    def __init__(self, encoder: TransformerEncoder, heads: Heads, config: TrainConfig):
        self.encoder = encoder
        self.heads = heads
        self.config = config
        self.params = ParamSet({**encoder.params, **heads.decoder})
        self.params.requires_grad_(True)
        self.opt = AdamW(self.params, config.beta1, config.beta2, config.eps, config.weight_decay)
        self.schedule = config.schedule()
        self.epoch = 0
        self.global_step = 0

    def _recon(self, S: np.ndarray, index: np.ndarray) -> Tensor:
        Z, X, patches = self.encoder.encode(S, mask_to_bool(index, self._n_tokens(S)))
        pred = self.heads.decode_masked(Z, index)
        target = _masked_targets(self.encoder.config.recon_target, X, patches, index)
        return loss_recon(pred, target)

    def _n_tokens(self, S) -> int:
        gt, gk = self.encoder.grid_shape(S)
        return gt * gk

    def train_step(self, S: np.ndarray, lr: float) -> float:
        rng = np.random.default_rng([self.config.seed, 1, self.global_step])
        index = sample_batch_masks(len(S), self._n_tokens(S), self.encoder.config.mask_ratio, rng)
        self.params.zero_grad()
        loss = self._recon(S, index)
        loss.backward()
        self.opt.step(lr, self.config.clip_norm)
        self.global_step += 1
        return loss.item()

    def val_loss(self, S: np.ndarray, batch_size: int = 64) -> float:
        """Reconstruction loss with masks fixed by the seed, comparable across epochs."""
        if len(S) == 0:
            return math.nan
        rng = np.random.default_rng([self.config.seed, 99])
        index = sample_batch_masks(len(S), self._n_tokens(S), self.encoder.config.mask_ratio, rng)
        total, count = 0.0, 0
        with ad.no_grad():
            for i in range(0, len(S), batch_size):
                sl = slice(i, i + batch_size)
                loss = self._recon(S[sl], index[sl])
                total += loss.item() * index[sl].size
                count += index[sl].size
        return total / count

    def run_epoch(self, S: np.ndarray) -> float:
        rng = np.random.default_rng([self.config.seed, 2, self.epoch])
        batches = _batches(len(S), self.config.batch_size, rng)
        losses = []
        for j, idx in enumerate(batches):
            lr = self.schedule(self.epoch + j / len(batches))
            losses.append(self.train_step(S[idx], lr))
        self.epoch += 1
        return float(np.mean(losses))

    def fit(self, train_S: np.ndarray, val_S: np.ndarray, csv_path=None) -> TrainResult:
        cfg = self.config
        stopper = EarlyStopping(cfg.patience, cfg.min_delta)
        initial = self.val_loss(val_S)
        curve = [{"epoch": 0, "split": "val", "L_recon": initial, "lr": self.schedule(0)}]
        stopper.update(0, initial, self.params.arrays)
        stopped = False
        while self.epoch < cfg.epochs:
            lr = self.schedule(self.epoch)
            tr = self.run_epoch(train_S)
            va = self.val_loss(val_S)
            curve.append({"epoch": self.epoch, "split": "train", "L_recon": tr, "lr": lr})
            curve.append({"epoch": self.epoch, "split": "val", "L_recon": va, "lr": lr})
            log.info("pretrain epoch %d train %.4f val %.4f", self.epoch, tr, va)
            if stopper.update(self.epoch, va, self.params.arrays):
                stopped = True
                break
        self.params.load_arrays(stopper.snapshot)
        result = TrainResult(curve, stopper.best_epoch, stopper.best, initial, stopped)
        if csv_path is not None:
            result.write_csv(csv_path)
        return result

    def save(self, path) -> None:
        tensors = {**self.params.arrays(), **self.opt.state_arrays()}
        meta = {
            "kind": "pretrainer",
            "encoder": self.encoder.config.to_dict(),
            "train": asdict(self.config),
            "epoch": self.epoch,
            "global_step": self.global_step,
            "opt_step": self.opt.state.step,
        }
        ad.save_checkpoint(path, tensors, meta)

    def load(self, path) -> None:
        tensors, meta = ad.load_checkpoint(path)
        self.params.load_arrays(tensors)
        self.opt.load_state_arrays({k: v for k, v in tensors.items() if k.startswith("opt.")}, meta["opt_step"])
        self.epoch = meta["epoch"]
        self.global_step = meta["global_step"]


def pretrain(encoder: TransformerEncoder, heads: Heads, train_S, val_S, config: TrainConfig, csv_path=None):
    trainer = MaskedPretrainer(encoder, heads, config)
    return trainer.fit(np.asarray(train_S, dtype=encoder.dtype), np.asarray(val_S, dtype=encoder.dtype), csv_path)


# ---------------------------------------------------------------- fine-tuning


def stratified_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Round-robin over shuffled classes so each batch mixes classes evenly."""
    labels = np.asarray(labels)
    per_class = [rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)]
    order = []
    depth = max(len(p) for p in per_class)
    for i in range(depth):
        for p in per_class:
            if i < len(p):
                order.append(p[i])
    order = np.asarray(order)
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


class Finetuner:
    """Trains the classifier head (FROZEN) or encoder + heads jointly (FT)."""

    def __init__(self, encoder: TransformerEncoder, heads: Heads, config: TrainConfig):
        if not heads.n_classes:
            raise ConfigError("heads need n_classes > 0 for fine-tuning")
        self.encoder, self.heads, self.config = encoder, heads, config
        self.schedule = config.schedule()
        if config.mode == "FROZEN":
            encoder.params.requires_grad_(False)
            self.params = ParamSet(heads.classifier).requires_grad_(True)
            scale = {}
        else:
            encoder.params.requires_grad_(True)
            self.params = ParamSet({**encoder.params, **heads.params}).requires_grad_(True)
            scale = {k: config.encoder_lr_factor for k in encoder.params}
        self.opt = AdamW(self.params, config.beta1, config.beta2, config.eps, config.weight_decay, scale)
        self.global_step = 0

    # FROZEN mode works on cached (n, d, T/P) frequency-pooled features.
    def _frozen_loss(self, U: np.ndarray, y: np.ndarray) -> Tensor:
        return cross_entropy(self.heads.classify_sequence(Tensor(U)), y)

    def _ft_loss(self, S: np.ndarray, y: np.ndarray) -> tuple[Tensor, dict]:
        cfg, enc = self.config, self.encoder
        gt, gk = enc.grid_shape(S)
        n_tok = gt * gk
        rng = np.random.default_rng([cfg.seed, 3, self.global_step])
        index = sample_batch_masks(len(S), n_tok, enc.config.mask_ratio, rng)
        Zm, X, patches = enc.encode(S, mask_to_bool(index, n_tok))
        l_rec = loss_recon(self.heads.decode_masked(Zm, index), _masked_targets(enc.config.recon_target, X, patches, index))
        Z, _, _ = enc.encode(S)
        z = self.heads.project(ad.mean(Z, axis=1))
        l_con = loss_supcon(z, y, cfg.temperature) if len(S) >= 2 else None
        l_cls = cross_entropy(self.heads.classify(Z, (gt, gk)), y)
        total = combine_losses(l_rec, l_con, cfg.weights) + ad.scale(l_cls, cfg.cls_weight)
        parts = {"L_recon": l_rec.item(), "L_cont": l_con.item() if l_con is not None else 0.0, "L_cls": l_cls.item()}
        return total, parts

    def _inputs(self, S):
        if self.config.mode == "FROZEN":
            return sequence_features(self.encoder, S)
        return np.asarray(S, dtype=self.encoder.dtype)

    def _loss(self, data, y):
        if self.config.mode == "FROZEN":
            loss = self._frozen_loss(data, y)
            return loss, {"L_cls": loss.item()}
        return self._ft_loss(data, y)

    def logits(self, S, batch_size: int = 64) -> np.ndarray:
        return self.logits_from_inputs(self._inputs(S), batch_size)

    def prepare(self, S) -> np.ndarray:
        """Inputs for ``fit_inputs``: cached (n, d, T/P) features in FROZEN mode, spectrograms in FT."""
        return self._inputs(S)

    def logits_from_inputs(self, data, batch_size: int = 64) -> np.ndarray:
        out = []
        with ad.no_grad():
            for i in range(0, len(data), batch_size):
                chunk = data[i : i + batch_size]
                if self.config.mode == "FROZEN":
                    out.append(self.heads.classify_sequence(Tensor(chunk)).data)
                else:
                    Z, _, _ = self.encoder.encode(chunk)
                    out.append(self.heads.classify(Z, self.encoder.grid_shape(chunk)).data)
        return np.concatenate(out)

    def fit(self, S, y, val_S=None, val_y=None) -> TrainResult:
        vdata = self._inputs(val_S) if val_S is not None and len(val_S) else None
        return self.fit_inputs(self._inputs(S), y, vdata, val_y)

    def fit_inputs(self, data, y, vdata=None, val_y=None) -> TrainResult:
        """Like ``fit`` but on prepared inputs (cached features in FROZEN mode)."""
        cfg = self.config
        y = np.asarray(y, dtype=np.int64)
        if vdata is not None:
            val_y = np.asarray(val_y, dtype=np.int64)
        stopper = EarlyStopping(cfg.patience, cfg.min_delta)
        curve, stopped = [], False

        def val_loss():
            with ad.no_grad():
                lg = self.logits_from_inputs(vdata)
                return cross_entropy(Tensor(lg.astype(np.float64)), val_y).item()

        initial = val_loss() if vdata is not None else math.nan
        for epoch in range(cfg.epochs):
            rng = np.random.default_rng([cfg.seed, 4, epoch])
            batches = stratified_batches(y, cfg.batch_size, rng)
            parts_acc = []
            for j, idx in enumerate(batches):
                lr = self.schedule(epoch + j / len(batches))
                self.params.zero_grad()
                loss, parts = self._loss(data[idx], y[idx])
                loss.backward()
                self.opt.step(lr, cfg.clip_norm)
                self.global_step += 1
                parts_acc.append(parts)
            row = {"epoch": epoch + 1, "split": "train", "lr": self.schedule(epoch)}
            for k in parts_acc[0]:
                row[k] = float(np.mean([p[k] for p in parts_acc]))
            curve.append(row)
            if vdata is not None:
                vl = val_loss()
                curve.append({"epoch": epoch + 1, "split": "val", "L_cls": vl, "lr": row["lr"]})
                if stopper.update(epoch + 1, vl, self.params.arrays):
                    stopped = True
                    break
        if stopper.snapshot is not None:
            self.params.load_arrays(stopper.snapshot)
        return TrainResult(curve, stopper.best_epoch, stopper.best, initial, stopped)

    def predict(self, S) -> np.ndarray:
        return np.argmax(self.logits(S), axis=1)


def finetune(encoder: TransformerEncoder, heads: Heads, S, y, config: TrainConfig, val_S=None, val_y=None):
    tuner = Finetuner(encoder, heads, config)
    result = tuner.fit(S, y, val_S, val_y)
    return tuner, result
