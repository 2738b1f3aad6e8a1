"""Few-shot evaluation harness, metrics, embedding export, and PGM rendering."""

from __future__ import annotations

import enum
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, Heads, TransformerEncoder, load_model, pooled_features
from .errors import ConfigError, InsufficientSamples, ShapeError
from .objectives import Finetuner, TrainConfig
from .specgen import LABEL_FIELDS, MOBILITIES, MODULATIONS, PROTOCOLS, NormStats, SpectrogramDataset

log = logging.getLogger(__name__)


class Task(str, enum.Enum):
    MODULATION = "MODULATION"
    SNR_DOPPLER = "SNR_DOPPLER"
    MULTIPROTOCOL = "MULTIPROTOCOL"

    @classmethod
    def parse(cls, name: str) -> "Task":
        key = name.upper().replace("-", "_")
        aliases = {"SNR_MOBILITY": "SNR_DOPPLER", "PROTOCOL": "MULTIPROTOCOL"}
        return cls(aliases.get(key, key))


def class_key(label: dict, task: Task) -> str:
    if task is Task.MODULATION:
        return label["modulation"]
    if task is Task.SNR_DOPPLER:
        return f"{float(label['snr_db']):g}dB|{label['mobility']}"
    return label["protocol"]


def _key_order(key: str, task: Task):
    if task is Task.MODULATION:
        return MODULATIONS.index(key)
    if task is Task.MULTIPROTOCOL:
        return PROTOCOLS.index(key)
    snr, mob = key.split("dB|")
    return (float(snr), MOBILITIES.index(mob))


def class_keys(labels: list[dict], task: Task) -> tuple[np.ndarray, list[str]]:
    """Per-sample class index and the ordered class names present."""
    keys = [class_key(lab, task) for lab in labels]
    classes = sorted(set(keys), key=lambda k: _key_order(k, task))
    lookup = {k: i for i, k in enumerate(classes)}
    return np.array([lookup[k] for k in keys], dtype=np.int64), classes


# ---------------------------------------------------------------- splits


@dataclass
class SplitPlan:
    n_per_class: int
    seed: int
    classes: list[str]
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    task: Task | None = None

    def to_dict(self) -> dict:
        return {
            "n_per_class": self.n_per_class,
            "seed": self.seed,
            "task": self.task.value if self.task else None,
            "classes": list(self.classes),
            "train": self.train.tolist(),
            "val": self.val.tolist(),
            "test": self.test.tolist(),
        }


def stratified_split(
    y,
    n_per_class: int,
    seed: int,
    n_val: int = 0,
    n_test: int | None = None,
    classes: list[str] | None = None,
    task: Task | None = None,
) -> SplitPlan:
    """Exactly ``n_per_class`` train samples per class, then ``n_val`` val, then test.

    ``n_test=None`` puts every remaining sample in the test split (at least one per class).
    """
    y = np.asarray(y)
    if n_per_class < 1 or n_val < 0 or (n_test is not None and n_test < 1):
        raise ValueError("n_per_class must be >= 1, n_val >= 0, n_test >= 1")
    uniq = np.unique(y)
    names = classes or [str(c) for c in uniq]
    need = n_per_class + n_val + (n_test or 1)
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for c in uniq:
        idx = np.flatnonzero(y == c)
        if idx.size < need:
            name = names[int(c)] if classes is not None else str(c)
            raise InsufficientSamples(name, int(idx.size), need)
        perm = rng.permutation(idx)
        train.append(perm[:n_per_class])
        val.append(perm[n_per_class : n_per_class + n_val])
        stop = None if n_test is None else n_per_class + n_val + n_test
        test.append(perm[n_per_class + n_val : stop])
    cat = lambda parts: np.sort(np.concatenate(parts)).astype(np.int64)  # noqa: E731
    return SplitPlan(n_per_class, seed, list(names), cat(train), cat(val), cat(test), task)


# ---------------------------------------------------------------- metrics


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)), 1)
    return conf


def per_class_prf(conf) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    conf = np.asarray(conf, dtype=float)
    if conf.ndim != 2 or conf.shape[0] != conf.shape[1]:
        raise ShapeError("confusion matrix must be square")
    tp = np.diag(conf)
    pred = conf.sum(axis=0)
    support = conf.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred > 0, tp / pred, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    return precision, recall, f1


def macro_f1(conf) -> float:
    return float(per_class_prf(conf)[2].mean())


@dataclass
class MetricReport:
    accuracy: float
    macro_f1: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    confusion: list[list[int]]
    classes: list[str]
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, y_true, y_pred, classes: list[str], meta: dict | None = None) -> "MetricReport":
        conf = confusion_matrix(y_true, y_pred, len(classes))
        p, r, f = per_class_prf(conf)
        acc = float(np.trace(conf) / conf.sum()) if conf.sum() else 0.0
        return cls(acc, float(f.mean()), p.tolist(), r.tolist(), f.tolist(), conf.tolist(), list(classes), dict(meta or {}))

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(reports: list[MetricReport]) -> dict:
    """Mean and sample standard deviation over runs, ordered by seed."""
    reports = sorted(reports, key=lambda r: r.meta.get("seed", 0))
    out = {"runs": len(reports)}
    for name in ("accuracy", "macro_f1"):
        vals = np.array([getattr(r, name) for r in reports])
        out[name] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0}
    return out


# ---------------------------------------------------------------- task runner

HEAD_TRAIN_DEFAULTS = {
    "epochs": 100,
    "batch_size": 40,
    "base_lr": 1e-3,
    "warmup_epochs": 2,
    "weight_decay": 5e-4,
    "mode": "FROZEN",
}


@dataclass
class ModelSpec:
    """Which encoder to evaluate: a checkpoint, or a random init of ``encoder``."""

    checkpoint: str | None = None
    encoder: dict = field(default_factory=dict)
    init_seed: int = 0
    train: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model spec keys: {sorted(unknown)}")
        return cls(**d)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig.from_dict({**HEAD_TRAIN_DEFAULTS, **self.train, "seed": seed})

    def build(self) -> tuple[TransformerEncoder, NormStats | None]:
        if self.checkpoint:
            enc, _, meta = load_model(self.checkpoint)
            stats = NormStats(**meta["norm_stats"]) if "norm_stats" in meta else None
            return enc, stats
        return TransformerEncoder(EncoderConfig.from_dict(self.encoder), self.init_seed), None


@dataclass
class TaskResult:
    task: Task
    reports: list[MetricReport]
    summary: dict

    def to_dict(self) -> dict:
        return {"task": self.task.value, "summary": self.summary, "runs": [r.to_dict() for r in self.reports]}


def select(dataset: SpectrogramDataset, **criteria) -> SpectrogramDataset:
    """Subset whose label fields take one of the listed values, e.g. ``snr_db=[20.0]``."""
    keep = np.ones(len(dataset), dtype=bool)
    for name, values in criteria.items():
        if values is None:
            continue
        if name not in LABEL_FIELDS:
            raise ConfigError(f"unknown label field {name!r}")
        col = dataset.column(name)
        allowed = [float(v) for v in values] if name == "snr_db" else list(values)
        keep &= np.isin(col.astype(float) if name == "snr_db" else col, allowed)
    return dataset.subset(np.flatnonzero(keep))


def run_task(
    task: Task | str,
    dataset: SpectrogramDataset,
    spec: ModelSpec,
    n_per_class: int,
    repeats: int = 5,
    seed: int = 0,
    n_val: int = 0,
    n_test: int | None = None,
    stats: NormStats | None = None,
) -> TaskResult:
    """Few-shot train a head per repeat on a fresh stratified split and score the test split."""
    task = Task.parse(task) if isinstance(task, str) else task
    y, classes = class_keys(dataset.labels, task)
    encoder, ckpt_stats = spec.build()
    S = dataset.normalized(stats or ckpt_stats)
    base_cfg = spec.train_config(seed)
    cached = None
    if base_cfg.mode == "FROZEN":
        # the frozen encoder is shared across repeats, so features are computed once
        cached = Finetuner(encoder, Heads(encoder.config, len(classes), 0), base_cfg).prepare(S)
    reports = []
    for r in range(repeats):
        run_seed = seed + r
        plan = stratified_split(y, n_per_class, run_seed, n_val, n_test, classes, task)
        cfg = spec.train_config(run_seed)
        enc = encoder if cfg.mode == "FROZEN" else spec.build()[0]
        tuner = Finetuner(enc, Heads(enc.config, len(classes), 1000 + run_seed), cfg)
        data = cached if cached is not None else S
        vdata = data[plan.val] if plan.val.size else None
        tuner.fit_inputs(data[plan.train], y[plan.train], vdata, y[plan.val] if plan.val.size else None)
        pred = np.argmax(tuner.logits_from_inputs(data[plan.test]), axis=1)
        meta = {"seed": run_seed, "n_per_class": n_per_class, "task": task.value, "mode": cfg.mode}
        reports.append(MetricReport.from_predictions(y[plan.test], pred, classes, meta))
        log.info("%s repeat %d macro-F1 %.4f", task.value, r, reports[-1].macro_f1)
    return TaskResult(task, reports, summarize(reports))


# ---------------------------------------------------------------- export / render


def export_embeddings(
    encoder: TransformerEncoder, dataset: SpectrogramDataset, out, stats: NormStats | None = None, batch_size: int = 64
) -> int:
    """TSV with one row per sample: id, label fields, then the d pooled features."""
    H = pooled_features(encoder, dataset.normalized(stats), batch_size)
    cols = ["sample_id", *LABEL_FIELDS] + [f"e{j}" for j in range(H.shape[1])]
    with open(out, "w") as fh:
        fh.write("\t".join(cols) + "\n")
        for i, (lab, h) in enumerate(zip(dataset.labels, H)):
            fields = [str(i)] + [str(lab[f]) for f in LABEL_FIELDS] + [f"{v:.9g}" for v in h]
            fh.write("\t".join(fields) + "\n")
    return len(H)


def quantize(S) -> np.ndarray:
    """Min-max scale to 0..255; a constant input maps to 0."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim == 3 and S.shape[-1] == 1:
        S = S[..., 0]
    if S.ndim != 2:
        raise ShapeError(f"expected a (T, K) spectrogram, got {S.shape}")
    lo, hi = S.min(), S.max()
    if hi == lo:
        return np.zeros(S.shape, dtype=np.uint8)
    return np.rint((S - lo) / (hi - lo) * 255.0).astype(np.uint8)


def render(S, out) -> np.ndarray:
    """Write a binary PGM (P5) with T rows and K columns; returns the pixels."""
    img = quantize(S)
    t, k = img.shape
    Path(out).write_bytes(b"P5\n%d %d\n255\n" % (k, t) + img.tobytes())
    return img


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # header: magic, width, height, maxval, each followed by whitespace; exactly
    # one whitespace byte separates maxval from the pixels
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError("not a binary PGM file")
    width, height, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    data = raw[m.end() :]
    if len(data) != width * height:
        raise ValueError("PGM pixel data length mismatch")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width)
