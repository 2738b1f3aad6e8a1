"""Transmit chain: bits -> coding -> interleaving -> mapping -> pulse shaping / OFDM."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .errors import InvalidBits, ShapeError


class Code(str, enum.Enum):
    IDENTITY = "IDENTITY"
    REPEAT_2 = "REPEAT_2"

    @property
    def rate(self) -> Fraction:
        return Fraction(1, 1) if self is Code.IDENTITY else Fraction(1, 2)


class Modulation(str, enum.Enum):
    BPSK = "BPSK"
    QPSK = "QPSK"
    QAM16 = "QAM16"
    QAM64 = "QAM64"
    QAM256 = "QAM256"

    @property
    def order(self) -> int:
        return {"BPSK": 2, "QPSK": 4, "QAM16": 16, "QAM64": 64, "QAM256": 256}[self.value]


class CarrierMode(str, enum.Enum):
    SINGLE_CARRIER = "SINGLE_CARRIER"
    OFDM = "OFDM"


class ProtocolId(str, enum.Enum):
    WIFI_LIKE = "WIFI_LIKE"
    LTE_LIKE = "LTE_LIKE"
    NR_LIKE = "NR_LIKE"


@dataclass(frozen=True)
class BitFrame:
    bits: np.ndarray
    coded: np.ndarray
    code_rate: Fraction

    def __post_init__(self):
        if Fraction(len(self.bits)) != self.code_rate * len(self.coded):
            raise ShapeError("coded length does not match code rate")


def _check_bits(bits) -> np.ndarray:
    bits = np.asarray(bits)
    if bits.ndim != 1:
        raise ShapeError("bit vector must be 1-D")
    if bits.size and not np.all((bits == 0) | (bits == 1)):
        raise InvalidBits("bits must be 0 or 1")
    return bits.astype(np.uint8)


def encode_bits(bits, scheme: Code | str = Code.IDENTITY) -> np.ndarray:
    bits = _check_bits(bits)
    scheme = Code(scheme)
    if scheme is Code.IDENTITY:
        return bits.copy()
    return np.repeat(bits, 2)


def make_bitframe(bits, scheme: Code | str = Code.IDENTITY) -> BitFrame:
    scheme = Code(scheme)
    bits = _check_bits(bits)
    return BitFrame(bits=bits, coded=encode_bits(bits, scheme), code_rate=scheme.rate)


def interleave(coded, rows: int) -> np.ndarray:
    """Block interleaver: write row-major into ``rows`` rows, read column-major."""
    coded = np.asarray(coded)
    if rows < 1 or coded.size % rows:
        raise ShapeError(f"length {coded.size} not divisible by rows={rows}")
    return coded.reshape(rows, -1).T.ravel().copy()


def deinterleave(data, rows: int) -> np.ndarray:
    data = np.asarray(data)
    if rows < 1 or data.size % rows:
        raise ShapeError(f"length {data.size} not divisible by rows={rows}")
    return data.reshape(-1, rows).T.ravel().copy()


def _gray_to_binary(g: np.ndarray) -> np.ndarray:
    b = g.copy()
    shift = g >> 1
    while np.any(shift):
        b ^= shift
        shift >>= 1
    return b


@dataclass(frozen=True)
class Constellation:
    """Gray-labelled constellation with unit mean energy.

    ``points[label]`` is the symbol for the integer whose big-endian bits
    are the ``bits_per_symbol`` coded bits.
    """

    order: int
    points: np.ndarray = field(repr=False)

    @property
    def bits_per_symbol(self) -> int:
        return int(np.log2(self.order))

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(_raw_energy(self.order))


def _axis_levels(bits_per_axis: int) -> np.ndarray:
    # level for each Gray label on one axis; label 0 -> most positive level
    n = 1 << bits_per_axis
    idx = _gray_to_binary(np.arange(n))
    return ((n - 1) - 2 * idx).astype(float)


def _raw_grid(order: int) -> np.ndarray:
    if order == 2:
        return np.array([1.0, -1.0], dtype=complex)
    m = int(np.log2(order))
    if order not in (4, 16, 64, 256):
        raise ValueError(f"unsupported constellation order {order}")
    half = m // 2
    levels = _axis_levels(half)
    labels = np.arange(order)
    i_lab = labels >> half
    q_lab = labels & ((1 << half) - 1)
    return levels[i_lab] + 1j * levels[q_lab]


def _raw_energy(order: int) -> float:
    if order == 2:
        return 1.0
    side = int(np.sqrt(order))
    return 2.0 * (side * side - 1) / 3.0


@lru_cache(maxsize=None)
def constellation(modulation: Modulation | str | int) -> Constellation:
    order = modulation if isinstance(modulation, int) else Modulation(modulation).order
    pts = _raw_grid(order) / np.sqrt(_raw_energy(order))
    pts.setflags(write=False)
    return Constellation(order=order, points=pts)


def map_symbols(coded, const: Constellation) -> np.ndarray:
    coded = _check_bits(coded)
    m = const.bits_per_symbol
    if coded.size % m:
        raise ShapeError(f"{coded.size} bits not divisible by {m} bits/symbol")
    groups = coded.reshape(-1, m).astype(np.int64)
    weights = 1 << np.arange(m - 1, -1, -1)
    return const.points[groups @ weights]


def demap_symbols(symbols, const: Constellation) -> np.ndarray:
    """Nearest-point hard decision back to bits."""
    symbols = np.asarray(symbols, dtype=complex)
    d = np.abs(symbols[:, None] - const.points[None, :])
    labels = np.argmin(d, axis=1)
    m = const.bits_per_symbol
    bits = (labels[:, None] >> np.arange(m - 1, -1, -1)) & 1
    return bits.ravel().astype(np.uint8)


def rrc_taps(rolloff: float, span_symbols: int, n_os: int) -> np.ndarray:
    """Root-raised-cosine taps, length ``span * n_os + 1``, unit energy."""
    if not 0.0 <= rolloff <= 1.0:
        raise ValueError("rolloff must lie in [0, 1]")
    if span_symbols < 4 or n_os < 2:
        raise ValueError("need span >= 4 and n_os >= 2")
    half = span_symbols * n_os // 2
    t = np.arange(-half, half + 1) / n_os
    b = rolloff
    h = np.empty_like(t)
    for i, ti in enumerate(t):
        if ti == 0.0:
            h[i] = 1.0 - b + 4.0 * b / np.pi
        elif b > 0 and np.isclose(abs(ti), 1.0 / (4.0 * b)):
            h[i] = (b / np.sqrt(2.0)) * (
                (1 + 2 / np.pi) * np.sin(np.pi / (4 * b)) + (1 - 2 / np.pi) * np.cos(np.pi / (4 * b))
            )
        else:
            num = np.sin(np.pi * ti * (1 - b)) + 4 * b * ti * np.cos(np.pi * ti * (1 + b))
            h[i] = num / (np.pi * ti * (1 - (4 * b * ti) ** 2))
    return h / np.sqrt(np.sum(h**2))


@dataclass(frozen=True)
class PulseShaper:
    taps: np.ndarray = field(repr=False)
    oversampling: int
    rolloff: float

    @classmethod
    def rrc(cls, rolloff: float = 0.25, span_symbols: int = 12, n_os: int = 4) -> "PulseShaper":
        return cls(taps=rrc_taps(rolloff, span_symbols, n_os), oversampling=n_os, rolloff=rolloff)


@dataclass(frozen=True)
class ComplexSignal:
    samples: np.ndarray = field(repr=False)
    sample_rate_hz: float
    origin_seed: int = 0

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim != 1 or s.size == 0:
            raise ShapeError("signal must be a non-empty 1-D vector")
        if not np.all(np.isfinite(s)):
            raise ValueError("signal contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)


def pulse_shape(symbols, shaper: PulseShaper, sample_rate_hz: float = 1.0, seed: int = 0) -> ComplexSignal:
    """x[n] = sum_i s[i] g[n - i*N_os]; length (N_s - 1) * N_os + N_g."""
    symbols = np.asarray(symbols, dtype=complex)
    if symbols.size < 1:
        raise ShapeError("need at least one symbol")
    up = np.zeros((symbols.size - 1) * shaper.oversampling + 1, dtype=complex)
    up[:: shaper.oversampling] = symbols
    x = np.convolve(up, np.asarray(shaper.taps, dtype=float))
    return ComplexSignal(x, sample_rate_hz, seed)


def ofdm_modulate(symbols, fft_size: int, cp_len: int, sample_rate_hz: float = 1.0, seed: int = 0) -> ComplexSignal:
    """Unitary IDFT per block of ``fft_size`` symbols, then a cyclic prefix."""
    symbols = np.asarray(symbols, dtype=complex)
    if symbols.size == 0 or symbols.size % fft_size:
        raise ShapeError(f"{symbols.size} symbols not divisible by fft_size={fft_size}")
    if not 0 <= cp_len <= fft_size:
        raise ShapeError("cp_len must lie in [0, fft_size]")
    blocks = np.fft.ifft(symbols.reshape(-1, fft_size), axis=1, norm="ortho")
    with_cp = np.concatenate([blocks[:, fft_size - cp_len :], blocks], axis=1)
    return ComplexSignal(with_cp.ravel(), sample_rate_hz, seed)


def zadoff_chu(root: int, length: int) -> np.ndarray:
    n = np.arange(length)
    return np.exp(-1j * np.pi * root * n * (n + (length % 2)) / length)


@dataclass(frozen=True)
class ProtocolTemplate:
    """Parameterized stand-in for one air interface."""

    id: ProtocolId
    carrier_mode: CarrierMode
    n_os: int = 4
    rolloff: float = 0.25
    span_symbols: int = 12
    fft_size: int = 0
    cp_len: int = 0
    n_active: int = 0
    preamble_len: int = 16
    preamble_root: int = 1
    interleaver_rows: int = 8

    def __post_init__(self):
        object.__setattr__(self, "id", ProtocolId(self.id))
        object.__setattr__(self, "carrier_mode", CarrierMode(self.carrier_mode))
        if self.carrier_mode is CarrierMode.OFDM:
            if not 0 < self.n_active < self.fft_size:
                raise ValueError("OFDM template needs 0 < n_active < fft_size")

    @property
    def shaper(self) -> PulseShaper:
        return PulseShaper.rrc(self.rolloff, self.span_symbols, self.n_os)

    def active_subcarriers(self) -> np.ndarray:
        # symmetric allocation around DC, DC itself left empty
        half = self.n_active // 2
        pos = np.arange(1, self.n_active - half + 1)
        neg = self.fft_size - np.arange(1, half + 1)[::-1]
        return np.concatenate([pos, neg])

    def preamble(self) -> np.ndarray:
        n = self.n_active if self.carrier_mode is CarrierMode.OFDM else self.preamble_len
        return zadoff_chu(self.preamble_root, n)

    def signal_length(self, n_symbols: int) -> int:
        """N_x for a frame with ``n_symbols`` data symbols (preamble included)."""
        if self.carrier_mode is CarrierMode.SINGLE_CARRIER:
            n_s = n_symbols + self.preamble_len
            return (n_s - 1) * self.n_os + self.span_symbols * self.n_os + 1
        blocks = 1 + -(-n_symbols // self.n_active)
        return blocks * (self.fft_size + self.cp_len)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["id"] = self.id.value
        d["carrier_mode"] = self.carrier_mode.value
        return d


DEFAULT_TEMPLATES = {
    ProtocolId.WIFI_LIKE: ProtocolTemplate(ProtocolId.WIFI_LIKE, CarrierMode.SINGLE_CARRIER, n_os=4, rolloff=0.25, preamble_root=1),
    ProtocolId.LTE_LIKE: ProtocolTemplate(
        ProtocolId.LTE_LIKE, CarrierMode.OFDM, fft_size=64, cp_len=16, n_active=36, preamble_root=5
    ),
    ProtocolId.NR_LIKE: ProtocolTemplate(
        ProtocolId.NR_LIKE, CarrierMode.OFDM, fft_size=128, cp_len=9, n_active=100, preamble_root=7
    ),
}


def get_template(protocol: ProtocolId | str, overrides: dict | None = None) -> ProtocolTemplate:
    base = DEFAULT_TEMPLATES[ProtocolId(protocol)]
    if not overrides:
        return base
    d = base.to_dict()
    d.update(overrides)
    return ProtocolTemplate(**d)


@dataclass(frozen=True)
class Mcs:
    modulation: Modulation
    code: Code = Code.IDENTITY

    def __post_init__(self):
        object.__setattr__(self, "modulation", Modulation(self.modulation))
        object.__setattr__(self, "code", Code(self.code))


@dataclass(frozen=True)
class Frame:
    signal: ComplexSignal
    protocol: ProtocolId
    modulation: Modulation
    code: Code
    n_bits: int
    n_symbols: int
    seed: int

    @property
    def label(self) -> dict:
        return {
            "protocol": self.protocol.value,
            "modulation": self.modulation.value,
            "code": self.code.value,
            "seed": self.seed,
        }


def _data_symbol_count(template: ProtocolTemplate, m: int, min_samples: int | None, default: int) -> int:
    step = template.interleaver_rows * 2
    if min_samples is None:
        n = default
    elif template.carrier_mode is CarrierMode.SINGLE_CARRIER:
        n = max(1, -(-(min_samples - template.signal_length(0)) // template.n_os) + 1)
    else:
        per_block = template.fft_size + template.cp_len
        n = max(1, -(-min_samples // per_block) - 1) * template.n_active
    return -(-n // step) * step


def synthesize_frame(
    template: ProtocolTemplate,
    mcs: Mcs,
    seed: int,
    *,
    min_samples: int | None = None,
    n_symbols: int = 256,
    sample_rate_hz: float = 1.0,
) -> Frame:
    """Random-bit frame for one template, unit mean power, deterministic in ``seed``.

    ``min_samples`` sizes the frame so the waveform is at least that long
    (the waveform is truncated to exactly ``min_samples``).
    """
    const = constellation(mcs.modulation)
    m = const.bits_per_symbol
    n_sym = _data_symbol_count(template, m, min_samples, n_symbols)
    n_coded = n_sym * m
    n_bits = int(Fraction(n_coded) * mcs.code.rate)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB175]))
    bits = rng.integers(0, 2, size=n_bits, dtype=np.uint8)
    coded = interleave(encode_bits(bits, mcs.code), template.interleaver_rows)
    data = map_symbols(coded, const)
    pre = template.preamble()

    if template.carrier_mode is CarrierMode.SINGLE_CARRIER:
        x = pulse_shape(np.concatenate([pre, data]), template.shaper).samples * np.sqrt(template.n_os)
    else:
        sc = template.active_subcarriers()
        n_blocks = 1 + -(-data.size // template.n_active)
        payload = np.zeros(n_blocks * template.n_active, dtype=complex)
        payload[: template.n_active] = pre
        payload[template.n_active : template.n_active + data.size] = data
        # fill the tail of the last block so every block carries full power
        n_pad = payload.size - template.n_active - data.size
        payload[payload.size - n_pad :] = const.points[rng.integers(0, const.order, n_pad)]
        grid = np.zeros((n_blocks, template.fft_size), dtype=complex)
        grid[:, sc] = payload.reshape(n_blocks, template.n_active)
        grid *= np.sqrt(template.fft_size / template.n_active)
        x = ofdm_modulate(grid.ravel(), template.fft_size, template.cp_len).samples

    if min_samples is not None:
        if x.size < min_samples:
            raise AssertionError("frame sizing produced a short waveform")
        x = x[:min_samples]
    sig = ComplexSignal(x, sample_rate_hz, seed)
    return Frame(sig, template.id, mcs.modulation, mcs.code, n_bits, n_sym, seed)
