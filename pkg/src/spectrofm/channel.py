"""Time-varying tapped-delay-line channel with Jakes fading and AWGN."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baseband import ComplexSignal
from .errors import AliasError, ShapeError, ZeroSignal

SPEED_OF_LIGHT = 299_792_458.0
DEFAULT_CARRIER_HZ = 3.5e9
N_RAYS = 32


@dataclass(frozen=True)
class PathProfile:
    delays: np.ndarray
    powers: np.ndarray
    scenario_id: str = ""

    def __post_init__(self):
        d = np.asarray(self.delays, dtype=float)
        p = np.asarray(self.powers, dtype=float)
        if d.ndim != 1 or d.shape != p.shape or d.size == 0:
            raise ShapeError("delays and powers must be equal-length non-empty vectors")
        if np.any(p <= 0):
            raise ValueError("path powers must be positive")
        if np.any(np.diff(d) < 0) or np.any(d < 0):
            raise ValueError("delays must be non-negative and nondecreasing")
        object.__setattr__(self, "delays", d)
        object.__setattr__(self, "powers", p / p.sum())

    def to_json(self) -> dict:
        return {"scenario_id": self.scenario_id, "delays_s": self.delays.tolist(), "powers": self.powers.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "PathProfile":
        try:
            return cls(np.asarray(obj["delays_s"], float), np.asarray(obj["powers"], float), str(obj["scenario_id"]))
        except KeyError as e:
            raise ValueError(f"path profile missing key {e}") from None


def load_profile(path) -> PathProfile:
    return PathProfile.from_json(json.loads(Path(path).read_text()))


def gen_scenario(seed: int, n_paths: int = 6, delay_spread_s: float = 250e-6, decay_db: float = 15.0) -> PathProfile:
    """Procedural multipath profile: first path at zero delay, exponential power decay."""
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5CE7]))
    delays = np.sort(np.concatenate([[0.0], rng.uniform(0.0, delay_spread_s, n_paths - 1)]))
    rel = delays / delay_spread_s if delay_spread_s > 0 else np.zeros_like(delays)
    powers = 10.0 ** (-decay_db * rel / 10.0)
    return PathProfile(delays, powers / powers.sum(), f"proc-{seed & 0xFFFFFFFFFFFFFFFF:016x}")


def discretize_delays(profile: PathProfile, sample_period_s: float) -> tuple[np.ndarray, np.ndarray]:
    """Round delays to the nearest sample, merge coincident taps, renormalize power."""
    if sample_period_s <= 0:
        raise ValueError("sample period must be positive")
    idx = np.floor(profile.delays / sample_period_s + 0.5).astype(np.int64)
    taps, inverse = np.unique(idx, return_inverse=True)
    powers = np.zeros(taps.size)
    np.add.at(powers, inverse, profile.powers)
    return taps, powers / powers.sum()


class Mobility(str, enum.Enum):
    STATIC = "STATIC"
    PEDESTRIAN = "PEDESTRIAN"
    VEHICULAR = "VEHICULAR"


DEFAULT_SPEEDS_KMH = {Mobility.STATIC: 0.0, Mobility.PEDESTRIAN: 3.0, Mobility.VEHICULAR: 30.0}


@dataclass(frozen=True)
class MobilityClass:
    name: Mobility
    speed_mps: float
    carrier_hz: float = DEFAULT_CARRIER_HZ

    def __post_init__(self):
        object.__setattr__(self, "name", Mobility(self.name))
        if self.speed_mps < 0:
            raise ValueError("speed must be non-negative")
        if self.name is Mobility.STATIC and self.speed_mps != 0:
            raise ValueError("STATIC mobility must have zero speed")

    @classmethod
    def preset(cls, name: Mobility | str, carrier_hz: float = DEFAULT_CARRIER_HZ) -> "MobilityClass":
        name = Mobility(name)
        return cls(name, DEFAULT_SPEEDS_KMH[name] / 3.6, carrier_hz)


def doppler_from_speed(mobility: MobilityClass) -> float:
    return mobility.speed_mps * mobility.carrier_hz / SPEED_OF_LIGHT


def jakes_fading(doppler_hz: float, sample_period_s: float, length: int, seed: int, n_rays: int = N_RAYS) -> np.ndarray:
    """Sum-of-sinusoids Rayleigh process with J0 autocorrelation and unit variance.

    Zero Doppler gives a constant unit-magnitude sequence with a random phase.
    """
    if doppler_hz < 0:
        raise ValueError("Doppler must be non-negative")
    if doppler_hz * sample_period_s >= 0.5:
        raise AliasError(f"f_D*T_s = {doppler_hz * sample_period_s:.3g} >= 0.5")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFAD1]))
    if doppler_hz == 0:
        return np.full(length, np.exp(1j * rng.uniform(0, 2 * np.pi)))
    angles = rng.uniform(0, 2 * np.pi, n_rays)
    phases = rng.uniform(0, 2 * np.pi, n_rays)
    n = np.arange(length)
    arg = 2 * np.pi * doppler_hz * sample_period_s * np.outer(n, np.cos(angles)) + phases
    return np.exp(1j * arg).sum(axis=1) / math.sqrt(n_rays)


@dataclass(frozen=True)
class ChannelRealization:
    tap_indices: np.ndarray
    tap_gains: np.ndarray = field(repr=False)  # (L, n): h_l[n]
    snr_db: float = math.inf
    doppler_hz: float = 0.0

    def __post_init__(self):
        idx = np.asarray(self.tap_indices)
        gains = np.asarray(self.tap_gains)
        if gains.ndim != 2 or gains.shape[0] != idx.size:
            raise ShapeError("tap_gains must be (n_taps, length)")


def make_realization(
    profile: PathProfile,
    mobility: MobilityClass,
    sample_period_s: float,
    length: int,
    seed: int,
    snr_db: float = math.inf,
) -> ChannelRealization:
    taps, powers = discretize_delays(profile, sample_period_s)
    f_d = doppler_from_speed(mobility)
    ss = np.random.SeedSequence([seed, 0xC4A7])
    tap_seeds = ss.generate_state(taps.size, dtype=np.uint64)
    gains = np.stack(
        [np.sqrt(p) * jakes_fading(f_d, sample_period_s, length, int(s)) for p, s in zip(powers, tap_seeds)]
    )
    return ChannelRealization(taps, gains, snr_db, f_d)


def apply_tdl(x: ComplexSignal, realization: ChannelRealization) -> ComplexSignal:
    """y[n] = sum_l h_l[n] x[n - d_l], x[m] = 0 for m < 0; same length as x."""
    xs = np.asarray(x.samples, dtype=complex)
    n = xs.size
    if realization.tap_gains.shape[1] != n:
        raise ShapeError(f"tap gains cover {realization.tap_gains.shape[1]} samples, signal has {n}")
    y = np.zeros(n, dtype=complex)
    for d, h in zip(realization.tap_indices, realization.tap_gains):
        d = int(d)
        if d < n:
            y[d:] += h[d:] * xs[: n - d]
    return ComplexSignal(y, x.sample_rate_hz, x.origin_seed)


def awgn_noise(length: int, noise_var: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA56]))
    w = rng.standard_normal((2, length))
    return math.sqrt(noise_var / 2.0) * (w[0] + 1j * w[1])


def noise_variance(y: ComplexSignal, snr_db: float) -> float:
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    p = float(np.mean(np.abs(y.samples) ** 2))
    if p == 0.0:
        raise ZeroSignal("cannot set SNR on a zero-power signal")
    return p / 10.0 ** (snr_db / 10.0)


def add_awgn(y: ComplexSignal, snr_db: float, seed: int) -> ComplexSignal:
    """Add circularly-symmetric Gaussian noise at ``snr_db`` relative to mean |y|^2."""
    var = noise_variance(y, snr_db)
    if var == 0.0:
        return y
    return ComplexSignal(y.samples + awgn_noise(len(y), var, seed), y.sample_rate_hz, y.origin_seed)
