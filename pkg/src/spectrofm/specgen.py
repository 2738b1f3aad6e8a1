"""STFT spectrograms, log/z-score preprocessing, and labelled dataset shards."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .baseband import Code, ComplexSignal, Mcs, Modulation, ProtocolId, get_template, synthesize_frame
from .channel import (
    DEFAULT_CARRIER_HZ,
    Mobility,
    MobilityClass,
    PathProfile,
    add_awgn,
    apply_tdl,
    gen_scenario,
    load_profile,
    make_realization,
)
from .errors import BadMagic, ConfigError, SignalTooShort, TruncatedShard, VersionMismatch

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
STD_FLOOR = 1e-6


@dataclass(frozen=True)
class StftConfig:
    window: np.ndarray = field(repr=False)
    hop: int
    kept_bins: int | None = None

    def __post_init__(self):
        w = np.asarray(self.window, dtype=float)
        if w.ndim != 1 or w.size == 0 or not np.any(w != 0):
            raise ValueError("window must be a non-zero 1-D vector")
        if not 1 <= self.hop <= w.size:
            raise ValueError("hop must satisfy 1 <= R <= N_w")
        if self.kept_bins is not None and not 1 <= self.kept_bins <= w.size:
            raise ValueError("kept_bins must satisfy 1 <= K <= N_w")
        object.__setattr__(self, "window", w)

    @property
    def n_window(self) -> int:
        return self.window.size

    @property
    def n_bins(self) -> int:
        return self.kept_bins or self.n_window

    @classmethod
    def hann(cls, n_window: int = 128, hop: int = 64, kept_bins: int | None = None) -> "StftConfig":
        # periodic Hann
        return cls(np.hanning(n_window + 1)[:-1], hop, kept_bins)

    @classmethod
    def rectangular(cls, n_window: int, hop: int, kept_bins: int | None = None) -> "StftConfig":
        return cls(np.ones(n_window), hop, kept_bins)

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.n_window) // self.hop + 1

    def samples_for(self, n_frames: int) -> int:
        return (n_frames - 1) * self.hop + self.n_window


def stft(y, cfg: StftConfig) -> np.ndarray:
    """Y[t, k] = sum_m y[tR + m] w[m] exp(-j 2 pi k m / N_w), no padding."""
    ys = np.asarray(y.samples if isinstance(y, ComplexSignal) else y, dtype=complex)
    if ys.size < cfg.n_window:
        raise SignalTooShort(f"signal has {ys.size} samples, window needs {cfg.n_window}")
    t = cfg.n_frames(ys.size)
    frames = np.lib.stride_tricks.sliding_window_view(ys, cfg.n_window)[:: cfg.hop][:t]
    return np.fft.fft(frames * cfg.window, axis=1)


def power(Y, kept_bins: int | None = None) -> np.ndarray:
    Y = np.asarray(Y)
    k = kept_bins or Y.shape[-1]
    if k > Y.shape[-1]:
        raise ValueError("kept_bins exceeds STFT size")
    return np.abs(Y[..., :k]) ** 2


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float
    epsilon: float = LOG_FLOOR

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError("std must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def fit_norm_stats(powers, epsilon: float = LOG_FLOOR) -> NormStats:
    """Global mean/std of log10(P + eps) over every entry of every matrix."""
    mats = [powers] if isinstance(powers, np.ndarray) else list(powers)
    if not mats:
        raise ValueError("need at least one power matrix")
    logs = np.concatenate([np.log10(np.asarray(p, dtype=np.float64) + epsilon).ravel() for p in mats])
    return NormStats(float(logs.mean()), max(float(logs.std()), STD_FLOOR), epsilon)


def preprocess(P, stats: NormStats) -> np.ndarray:
    """(log10(P + eps) - mean) / std with a trailing channel axis (C = 1)."""
    P = np.asarray(P, dtype=np.float64)
    S = (np.log10(P + stats.epsilon) - stats.mean) / stats.std
    return S[..., None]


@dataclass
class Spectrogram:
    data: np.ndarray  # (T, K, C)
    label: dict
    normalized: bool = False

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != 1:
            raise ValueError("spectrogram data must be (T, K, 1)")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("spectrogram contains non-finite entries")


def simulate_received(
    protocol: ProtocolId | str,
    mcs: Mcs,
    profile: PathProfile,
    mobility: MobilityClass,
    snr_db: float,
    seed: int,
    n_samples: int,
    sample_rate_hz: float,
    template_overrides: dict | None = None,
) -> ComplexSignal:
    """Transmit frame -> TDL fading -> AWGN, all randomness derived from ``seed``."""
    ss = np.random.SeedSequence([seed, 0x51A1])
    s_tx, s_ch, s_noise = (int(s) for s in ss.generate_state(3, dtype=np.uint64))
    template = get_template(protocol, template_overrides)
    frame = synthesize_frame(template, mcs, s_tx, min_samples=n_samples, sample_rate_hz=sample_rate_hz)
    real = make_realization(profile, mobility, 1.0 / sample_rate_hz, n_samples, s_ch, snr_db)
    y = apply_tdl(frame.signal, real)
    return add_awgn(y, snr_db, s_noise)


# ---------------------------------------------------------------- shards

SHARD_MAGIC = b"SGS1"
SHARD_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
_LABEL = struct.Struct("<BBBBd24sQ")

PROTOCOLS = [p.value for p in ProtocolId]
MODULATIONS = [m.value for m in Modulation]
MOBILITIES = [m.value for m in Mobility]
CODES = [c.value for c in Code]

LABEL_FIELDS = ("protocol", "modulation", "mobility", "code", "snr_db", "scenario_id", "seed")


def _pack_label(label: dict) -> bytes:
    sid = label.get("scenario_id", "").encode("ascii")
    if len(sid) > 24:
        raise ValueError("scenario_id longer than 24 bytes")
    return _LABEL.pack(
        PROTOCOLS.index(label["protocol"]),
        MODULATIONS.index(label["modulation"]),
        MOBILITIES.index(label["mobility"]),
        CODES.index(label.get("code", "IDENTITY")),
        float(label["snr_db"]),
        sid,
        int(label["seed"]),
    )


def _unpack_label(raw: bytes) -> dict:
    p, m, mob, c, snr, sid, seed = _LABEL.unpack(raw)
    return {
        "protocol": PROTOCOLS[p],
        "modulation": MODULATIONS[m],
        "mobility": MOBILITIES[mob],
        "code": CODES[c],
        "snr_db": snr,
        "scenario_id": sid.rstrip(b"\0").decode("ascii"),
        "seed": seed,
    }


def write_shard(path, data: np.ndarray, labels: list[dict]) -> None:
    """Write ``data`` (n, T, K, C) float32 records with fixed-size label blocks."""
    data = np.asarray(data)
    if data.ndim != 4:
        raise ValueError("shard data must be (n, T, K, C)")
    n, t, k, c = data.shape
    if len(labels) != n:
        raise ValueError("label count does not match record count")
    recs = data.astype("<f4", copy=False)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SHARD_MAGIC, SHARD_VERSION, n, t, k, c))
        for i in range(n):
            fh.write(recs[i].tobytes(order="C"))
            fh.write(_pack_label(labels[i]))


def read_shard(path) -> tuple[np.ndarray, list[dict]]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedShard(f"{path}: shorter than header")
    magic, version, n, t, k, c = _HEADER.unpack_from(raw)
    if magic != SHARD_MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != SHARD_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {SHARD_VERSION}")
    rec_floats = t * k * c
    rec_bytes = rec_floats * 4 + _LABEL.size
    if len(raw) != _HEADER.size + n * rec_bytes:
        raise TruncatedShard(f"{path}: {len(raw)} bytes, header implies {_HEADER.size + n * rec_bytes}")
    data = np.empty((n, t, k, c), dtype=np.float32)
    labels = []
    off = _HEADER.size
    for i in range(n):
        data[i] = np.frombuffer(raw, dtype="<f4", count=rec_floats, offset=off).reshape(t, k, c)
        off += rec_floats * 4
        labels.append(_unpack_label(raw[off : off + _LABEL.size]))
        off += _LABEL.size
    return data, labels


# ---------------------------------------------------------------- dataset generation


@dataclass
class DatasetConfig:
    protocols: list[str] = field(default_factory=lambda: list(PROTOCOLS))
    modulations: list[str] = field(default_factory=lambda: list(MODULATIONS))
    snr_db: list[float] = field(default_factory=lambda: [0.0, 20.0])
    mobilities: list[str] = field(default_factory=lambda: ["STATIC", "VEHICULAR"])
    n_realizations: int = 10
    code: str = "REPEAT_2"
    n_window: int = 64
    hop: int = 32
    n_frames: int = 64
    window: str = "hann"
    sample_rate_hz: float = 20e3
    carrier_hz: float = DEFAULT_CARRIER_HZ
    n_paths: int = 6
    delay_spread_s: float = 250e-6
    decay_db: float = 15.0
    profile_files: list[str] = field(default_factory=list)
    records_per_shard: int = 256
    epsilon: float = LOG_FLOOR
    templates: dict = field(default_factory=dict)

    def __post_init__(self):
        try:
            for p in self.protocols:
                ProtocolId(p)
            for m in self.modulations:
                Modulation(m)
            for m in self.mobilities:
                Mobility(m)
            Code(self.code)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.n_realizations < 1 or self.records_per_shard < 1:
            raise ConfigError("n_realizations and records_per_shard must be >= 1")
        if self.window not in ("hann", "rect"):
            raise ConfigError(f"unknown window {self.window!r}")
        for pid in self.templates:
            if pid not in PROTOCOLS:
                raise ConfigError(f"template override for unknown protocol {pid!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown dataset config keys: {sorted(unknown)}")
        return cls(**d)

    def stft_config(self) -> StftConfig:
        make = StftConfig.hann if self.window == "hann" else StftConfig.rectangular
        return make(self.n_window, self.hop)

    @property
    def n_samples(self) -> int:
        return self.stft_config().samples_for(self.n_frames)

    def grid(self):
        return itertools.product(self.protocols, self.modulations, self.snr_db, self.mobilities)

    @property
    def n_records(self) -> int:
        return (
            len(self.protocols) * len(self.modulations) * len(self.snr_db) * len(self.mobilities) * self.n_realizations
        )


def derive_seed(*parts) -> int:
    h = hashlib.blake2b(":".join(str(p) for p in parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def config_hash(obj) -> str:
    """Git-style blob hash of the canonical JSON form."""
    body = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def spectrogram_power(y: ComplexSignal, cfg: StftConfig) -> np.ndarray:
    return power(stft(y, cfg), cfg.n_bins)


def scenario_profiles(config: DatasetConfig, master_seed: int) -> list[PathProfile]:
    if config.profile_files:
        return [load_profile(p) for p in config.profile_files]
    return [
        gen_scenario(derive_seed(master_seed, "scenario", r), config.n_paths, config.delay_spread_s, config.decay_db)
        for r in range(config.n_realizations)
    ]


def generate_records(config: DatasetConfig, master_seed: int):
    """Yield (power matrix, label) for every grid cell x realization in fixed order."""
    cfg = config.stft_config()
    n_samples = config.n_samples
    profiles = scenario_profiles(config, master_seed)
    for protocol, modulation, snr, mob in config.grid():
        mobility = MobilityClass.preset(mob, config.carrier_hz)
        for r in range(config.n_realizations):
            seed = derive_seed(master_seed, protocol, modulation, snr, mob, r)
            profile = profiles[r % len(profiles)]
            y = simulate_received(
                protocol,
                Mcs(modulation, config.code),
                profile,
                mobility,
                snr,
                seed,
                n_samples,
                config.sample_rate_hz,
                config.templates.get(protocol),
            )
            label = {
                "protocol": protocol,
                "modulation": modulation,
                "mobility": mob,
                "code": config.code,
                "snr_db": float(snr),
                "scenario_id": profile.scenario_id[:24],
                "seed": seed,
            }
            yield spectrogram_power(y, cfg), label


def label_key(label: dict) -> str:
    return f"{label['protocol']}|{label['modulation']}|{label['snr_db']:g}|{label['mobility']}"


def generate_dataset(config: DatasetConfig, out_dir, master_seed: int) -> dict:
    """Write SGS1 shards of raw power spectrograms plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = config.stft_config()
    t, k = config.n_frames, cfg.n_bins
    shards, counts = [], Counter()
    buf_data, buf_labels, all_powers = [], [], []

    def flush():
        name = f"shard-{len(shards):05d}.sgs"
        write_shard(out / name, np.stack(buf_data)[..., None], buf_labels)
        shards.append({"file": name, "count": len(buf_labels)})
        buf_data.clear()
        buf_labels.clear()

    for P, label in generate_records(config, master_seed):
        P32 = P.astype(np.float32)
        buf_data.append(P32)
        buf_labels.append(label)
        all_powers.append(P32)
        counts[label_key(label)] += 1
        if len(buf_labels) == config.records_per_shard:
            flush()
    if buf_labels:
        flush()

    stats = fit_norm_stats(all_powers, config.epsilon)
    manifest = {
        "format": "SGS1",
        "content": "power",
        "shape": [t, k, 1],
        "count": sum(s["count"] for s in shards),
        "master_seed": master_seed,
        "config": asdict(config),
        "config_hash": config_hash(asdict(config)),
        "norm_stats": stats.to_dict(),
        "shards": shards,
        "counts": dict(sorted(counts.items())),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    log.info("wrote %d records in %d shards to %s", manifest["count"], len(shards), out)
    return manifest


@dataclass
class SpectrogramDataset:
    """In-memory view of a generated dataset: raw power plus label columns."""

    power: np.ndarray  # (n, T, K) float32
    labels: list[dict]
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def column(self, name: str) -> np.ndarray:
        return np.array([lab[name] for lab in self.labels])

    @property
    def norm_stats(self) -> NormStats:
        return NormStats(**self.manifest["norm_stats"])

    def normalized(self, stats: NormStats | None = None) -> np.ndarray:
        """(n, T, K) float32 z-scored log spectrograms."""
        stats = stats or self.norm_stats
        return preprocess(self.power, stats)[..., 0].astype(np.float32)

    def subset(self, idx) -> "SpectrogramDataset":
        idx = np.asarray(idx, dtype=int)
        return SpectrogramDataset(self.power[idx], [self.labels[i] for i in idx], self.manifest)


def load_dataset(path) -> SpectrogramDataset:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    datas, labels = [], []
    for s in manifest["shards"]:
        d, lab = read_shard(path / s["file"])
        datas.append(d[..., 0])
        labels.extend(lab)
    return SpectrogramDataset(np.concatenate(datas), labels, manifest)


def build_dataset(config: DatasetConfig, master_seed: int) -> SpectrogramDataset:
    """Generate a dataset in memory (no files) with the same records as ``generate_dataset``."""
    powers, labels = [], []
    for P, label in generate_records(config, master_seed):
        powers.append(P.astype(np.float32))
        labels.append(label)
    stats = fit_norm_stats(powers, config.epsilon)
    manifest = {"master_seed": master_seed, "norm_stats": stats.to_dict(), "config": asdict(config)}
    return SpectrogramDataset(np.stack(powers), labels, manifest)


def temporal_variation(S: np.ndarray) -> float:
    """Mean |S[t+1, k] - S[t, k]| over a (T, K[, 1]) spectrogram."""
    S = np.asarray(S)
    return float(np.mean(np.abs(np.diff(S, axis=0))))

