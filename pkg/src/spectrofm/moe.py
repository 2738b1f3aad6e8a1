"""Protocol experts, the gating router, and top-1 / dense aggregation."""

from __future__ import annotations

import enum
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .baseband import ProtocolId
from .encoder import EncoderConfig, ParamSet, TransformerEncoder, load_model, save_model, trunc_normal
from .errors import ConfigError, MissingExpertOutput, ShapeError, UnbalancedDataset
from .objectives import AdamW, EarlyStopping, TrainConfig, TrainResult, cross_entropy, stratified_batches

log = logging.getLogger(__name__)

EXPERT_ORDER = (ProtocolId.WIFI_LIKE, ProtocolId.LTE_LIKE, ProtocolId.NR_LIKE)
N_EXPERTS = len(EXPERT_ORDER)


class RouteMode(str, enum.Enum):
    DENSE = "DENSE"
    TOP1 = "TOP1"


@dataclass(frozen=True)
class RouteDecision:
    """Batched gate output: ``weights`` (B, 3) on the simplex, ``chosen`` (B,)."""

    weights: np.ndarray
    chosen: np.ndarray
    mode: RouteMode = RouteMode.TOP1


def top1(weights: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest expert
    return np.argmax(np.asarray(weights), axis=-1)


class ExpertBank:
    """Three protocol encoders in fixed order (WIFI_LIKE, LTE_LIKE, NR_LIKE)."""

    def __init__(self, experts: list[TransformerEncoder], frozen: bool = True):
        if len(experts) != N_EXPERTS:
            raise ConfigError(f"expected {N_EXPERTS} experts, got {len(experts)}")
        c0 = experts[0].config
        for e in experts[1:]:
            if (e.config.dim, e.config.patch) != (c0.dim, c0.patch):
                raise ConfigError("experts must share embedding width and patch size")
        self.experts = list(experts)
        self.frozen = frozen
        if frozen:
            for e in self.experts:
                e.params.requires_grad_(False)
        self.eval_count = 0

    @property
    def dim(self) -> int:
        return self.experts[0].config.dim

    def expert_output(self, k: int, S) -> np.ndarray:
        """h_k = mean over final-layer tokens of expert k, (B, d)."""
        S = np.asarray(S)
        with ad.no_grad():
            h = self.experts[k].pooled(S).data
        self.eval_count += len(S)
        return h

    def checksum(self) -> str:
        merged = ParamSet()
        for k, e in enumerate(self.experts):
            merged.update({f"expert{k}.{n}": t for n, t in e.params.items()})
        return merged.checksum()


@dataclass
class RouterConfig:
    dim: int = 64
    depth: int = 2
    heads: int = 4
    ffn_mult: int = 4
    patch: int = 4
    max_len: int = 1024

    @classmethod
    def from_dict(cls, d: dict) -> "RouterConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown router config keys: {sorted(unknown)}")
        return cls(**d)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            patch=self.patch, depth=self.depth, dim=self.dim, heads=self.heads, ffn_mult=self.ffn_mult, max_len=self.max_len
        )


class Router:
    """Small transformer over the patch tokens, GAP, then a 3-way linear gate."""

    def __init__(self, config: RouterConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config or RouterConfig()
        self.body = TransformerEncoder(self.config.encoder_config(), seed, dtype)
        rng = np.random.default_rng([seed, 7])
        self.gate = ParamSet(
            {
                "gate.w": Tensor(trunc_normal(rng, (self.config.dim, N_EXPERTS), 0.02, self.body.dtype), requires_grad=True),
                "gate.b": Tensor(np.zeros(N_EXPERTS, self.body.dtype), requires_grad=True),
            }
        )

    @property
    def params(self) -> ParamSet:
        return ParamSet({**self.body.params, **self.gate})

    def logits(self, S) -> Tensor:
        S = np.asarray(S)
        if S.ndim not in (3, 4):
            raise ShapeError(f"router expects a batch of spectrograms, got shape {S.shape}")
        g = self.body.pooled(S)
        return ad.add_bias(g @ self.gate["gate.w"], self.gate["gate.b"])

    def route(self, S, mode: RouteMode = RouteMode.TOP1) -> RouteDecision:
        with ad.no_grad():
            z = self.logits(S).data.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        w = np.exp(z)
        w /= w.sum(axis=1, keepdims=True)
        return RouteDecision(w, top1(w), RouteMode(mode))

    def save(self, path, meta: dict | None = None) -> None:
        info = {"kind": "router", "router": self.config.__dict__.copy(), **(meta or {})}
        ad.save_checkpoint(path, self.params.arrays(), info)

    @classmethod
    def load(cls, path) -> "Router":
        tensors, meta = ad.load_checkpoint(path)
        r = cls(RouterConfig.from_dict(meta["router"]))
        r.params.load_arrays(tensors)
        return r


def route(S, router: Router, mode: RouteMode = RouteMode.TOP1) -> RouteDecision:
    return router.route(S, mode)


def aggregate(decision: RouteDecision, outputs, mode: RouteMode | None = None) -> np.ndarray:
    """Combine expert outputs; ``outputs[k]`` is (B, d) or None when expert k was not run.

    In TOP1 mode a partially filled array is accepted as long as the rows for
    the samples routed to k are present.
    """
    mode = RouteMode(mode or decision.mode)
    outputs = list(outputs) + [None] * (N_EXPERTS - len(outputs))
    w = np.asarray(decision.weights)
    if mode is RouteMode.DENSE:
        if any(o is None for o in outputs):
            raise MissingExpertOutput("dense aggregation needs all expert outputs")
        return sum(w[:, k : k + 1] * np.asarray(outputs[k]) for k in range(N_EXPERTS))
    chosen = np.asarray(decision.chosen)
    ref = next((o for o in outputs if o is not None), None)
    if ref is None:
        raise MissingExpertOutput("no expert outputs provided")
    h = np.empty((chosen.size, np.asarray(ref).shape[-1]), dtype=np.asarray(ref).dtype)
    for k in np.unique(chosen):
        if outputs[k] is None:
            raise MissingExpertOutput(f"expert {EXPERT_ORDER[k].value} was selected but not evaluated")
        rows = chosen == k
        h[rows] = np.asarray(outputs[k])[rows]
    return h


@dataclass
class MoeOutput:
    embedding: np.ndarray
    decision: RouteDecision
    expert_evals: np.ndarray  # per-sample count of expert forward passes
    logits: np.ndarray | None = None


def moe_infer(S, router: Router, bank: ExpertBank, mode: RouteMode = RouteMode.TOP1, head=None) -> MoeOutput:
    """Route, evaluate the needed experts, aggregate, then apply an optional head.

    TOP1 runs each expert only on the samples routed to it, so every sample
    costs the router plus exactly one expert.
    """
    S = np.asarray(S)
    mode = RouteMode(mode)
    decision = router.route(S, mode)
    n = len(S)
    counts = np.zeros(n, dtype=np.int64)
    outputs: list = [None] * N_EXPERTS
    if mode is RouteMode.DENSE:
        for k in range(N_EXPERTS):
            outputs[k] = bank.expert_output(k, S)
        counts += N_EXPERTS
    else:
        for k in np.unique(decision.chosen):
            rows = decision.chosen == k
            full = np.zeros((n, bank.dim), dtype=bank.experts[k].dtype)
            full[rows] = bank.expert_output(int(k), S[rows])
            outputs[k] = full
            counts[rows] += 1
    h = aggregate(decision, outputs, mode)
    logits = None if head is None else np.asarray(head(h))
    return MoeOutput(h, decision, counts, logits)


def protocol_index(labels) -> np.ndarray:
    """Protocol names or ids -> expert indices."""
    order = list(EXPERT_ORDER)
    return np.array([int(x) if isinstance(x, (int, np.integer)) else order.index(ProtocolId(x)) for x in labels])


def train_router(
    bank: ExpertBank,
    S,
    protocols,
    config: TrainConfig | None = None,
    router: Router | None = None,
    val_S=None,
    val_protocols=None,
) -> tuple[Router, TrainResult]:
    """Fit the gate with cross-entropy against protocol labels; experts stay untouched."""
    config = config or TrainConfig(epochs=20, batch_size=32, base_lr=1e-3, warmup_epochs=2)
    S = np.asarray(S)
    y = protocol_index(protocols)
    counts = np.bincount(y, minlength=N_EXPERTS)
    if counts.min() != counts.max():
        warnings.warn(f"router training set is unbalanced: {counts.tolist()}", UnbalancedDataset, stacklevel=2)
    before = bank.checksum()
    router = router or Router(RouterConfig(patch=bank.experts[0].config.patch), config.seed)
    params = router.params.requires_grad_(True)
    opt = AdamW(params, config.beta1, config.beta2, config.eps, config.weight_decay)
    sched = config.schedule()
    has_val = val_S is not None and len(val_S) > 0
    vy = protocol_index(val_protocols) if has_val else None
    stopper = EarlyStopping(config.patience, config.min_delta)
    curve, stopped = [], False

    def val_loss() -> float:
        with ad.no_grad():
            return cross_entropy(router.logits(val_S), vy).item()

    initial = val_loss() if has_val else float("nan")
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, 5, epoch])
        batches = stratified_batches(y, config.batch_size, rng)
        losses = []
        for j, idx in enumerate(batches):
            params.zero_grad()
            loss = cross_entropy(router.logits(S[idx]), y[idx])
            loss.backward()
            opt.step(sched(epoch + j / len(batches)), config.clip_norm)
            losses.append(loss.item())
        lr = sched(epoch)
        curve.append({"epoch": epoch + 1, "split": "train", "L_cls": float(np.mean(losses)), "lr": lr})
        if has_val:
            vl = val_loss()
            curve.append({"epoch": epoch + 1, "split": "val", "L_cls": vl, "lr": lr})
            log.info("router epoch %d val %.4f", epoch + 1, vl)
            if stopper.update(epoch + 1, vl, params.arrays):
                stopped = True
                break
    if stopper.snapshot is not None:
        params.load_arrays(stopper.snapshot)
    params.requires_grad_(False)
    if bank.checksum() != before:
        raise RuntimeError("expert parameters changed during router training")
    return router, TrainResult(curve, stopper.best_epoch, stopper.best, initial, stopped)


# ---------------------------------------------------------------- bundle


@dataclass
class MoeBundle:
    router_ckpt: str
    expert_ckpts: list[str]
    expert_order: list[str] = field(default_factory=lambda: [p.value for p in EXPERT_ORDER])
    mode: str = RouteMode.TOP1.value

    def to_json(self) -> dict:
        return {
            "router_ckpt": self.router_ckpt,
            "expert_ckpts": list(self.expert_ckpts),
            "expert_order": list(self.expert_order),
            "mode": self.mode,
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def read(cls, path) -> "MoeBundle":
        obj = json.loads(Path(path).read_text())
        if obj.get("expert_order") != [p.value for p in EXPERT_ORDER] or len(obj.get("expert_ckpts", [])) != N_EXPERTS:
            raise ConfigError("bundle expert order or count does not match the fixed expert order")
        return cls(obj["router_ckpt"], obj["expert_ckpts"], obj["expert_order"], obj.get("mode", "TOP1"))

    def load(self, base_dir=None) -> tuple[Router, ExpertBank]:
        base = Path(base_dir) if base_dir is not None else Path(".")
        experts = [load_model(base / p)[0] for p in self.expert_ckpts]
        return Router.load(base / self.router_ckpt), ExpertBank(experts)


def save_bank(bank: ExpertBank, router: Router, out_dir, mode: RouteMode = RouteMode.TOP1) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for p, e in zip(EXPERT_ORDER, bank.experts):
        name = f"expert_{p.value.lower()}.ckpt"
        save_model(out / name, e, meta={"protocol": p.value})
        names.append(name)
    router.save(out / "router.ckpt")
    bundle = MoeBundle("router.ckpt", names, mode=RouteMode(mode).value)
    bundle.write(out / "moe_bundle.json")
    return out / "moe_bundle.json"
