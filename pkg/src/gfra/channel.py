"""WSSUS multipath Rayleigh fading over an OFDM time-frequency block.

Each path fades independently following a sum-of-sinusoids process, the
paths are pulse-shaped with a root-raised-cosine filter into a discrete
impulse response per OFDM symbol, and a DFT over the taps gives the
frequency response on every subcarrier of the block.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.constants import c as SPEED_OF_LIGHT

CHANNEL_MAGIC = b"MACH1"

# pairs are processed in chunks so the phase array stays below this many entries
_CHUNK_ENTRIES = 2_000_000


class ConfigurationError(ValueError):
    """Invalid geometry or channel parameters."""


@dataclass(frozen=True)
class BlockGrid:
    """Time-frequency resource block with ``T`` OFDM symbols and ``F`` subcarriers."""

    T: int
    F: int
    subcarrier_spacing: float = 5e3

    def __post_init__(self):
        if self.T < 1 or self.F < 1:
            raise ConfigurationError(f"grid needs T >= 1 and F >= 1, got T={self.T}, F={self.F}")
        if self.subcarrier_spacing <= 0:
            raise ConfigurationError("subcarrier_spacing must be positive")

    @property
    def L(self) -> int:
        return self.T * self.F

    @property
    def bandwidth(self) -> float:
        return self.F * self.subcarrier_spacing

    def time_indices(self) -> np.ndarray:
        """1-based symbol index t_l for l = 1..L."""
        return np.arange(self.L) % self.T + 1

    def freq_indices(self) -> np.ndarray:
        """1-based subcarrier index f_l for l = 1..L."""
        return np.arange(self.L) // self.T + 1


def map_index(l: int, grid: BlockGrid) -> tuple[int, int]:
    """Map a 1-based pilot dimension ``l`` to its (symbol, subcarrier) pair.

    The symbol index cycles fastest with period ``T``.
    """
    if not 1 <= l <= grid.L:
        raise IndexError(f"pilot index {l} outside [1, {grid.L}]")
    return (l - 1) % grid.T + 1, (l - 1) // grid.T + 1


def unmap_index(t: int, f: int, grid: BlockGrid) -> int:
    if not (1 <= t <= grid.T and 1 <= f <= grid.F):
        raise IndexError(f"(t, f) = ({t}, {f}) outside the {grid.T}x{grid.F} block")
    return (f - 1) * grid.T + t


@dataclass(frozen=True)
class PowerDelayProfile:
    delays: np.ndarray  # seconds
    powers: np.ndarray  # fractional, sums to one

    def __post_init__(self):
        delays = np.atleast_1d(np.asarray(self.delays, dtype=float))
        powers = np.atleast_1d(np.asarray(self.powers, dtype=float))
        if delays.shape != powers.shape or delays.size == 0:
            raise ConfigurationError("delays and powers must be non-empty and equally long")
        if np.any(delays < 0):
            raise ConfigurationError("path delays must be non-negative")
        if np.any(powers <= 0):
            raise ConfigurationError("path powers must be positive")
        if abs(powers.sum() - 1.0) > 1e-12:
            raise ConfigurationError(f"path powers sum to {powers.sum()!r}, expected 1")
        object.__setattr__(self, "delays", delays)
        object.__setattr__(self, "powers", powers)

    @classmethod
    def from_relative(cls, delays, powers) -> PowerDelayProfile:
        powers = np.asarray(powers, dtype=float)
        return cls(np.asarray(delays, dtype=float), powers / powers.sum())

    @property
    def n_paths(self) -> int:
        return self.delays.size

    @property
    def max_excess_delay(self) -> float:
        return float(self.delays.max())


def load_pdp(path) -> PowerDelayProfile:
    """Read a ``delay_us power_linear`` profile; powers are renormalized."""
    delays, powers = [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ConfigurationError(f"{path}:{lineno}: expected 'delay_us power_linear'")
        delays.append(float(parts[0]) * 1e-6)
        powers.append(float(parts[1]))
    if not delays:
        raise ConfigurationError(f"{path}: no paths found")
    return PowerDelayProfile.from_relative(delays, powers)


def builtin_pdp(name: str) -> PowerDelayProfile:
    """Load one of the shipped profiles (``hilly_terrain`` or ``two_path``)."""
    ref = resources.files("gfra") / "data" / f"{name}.pdp"
    if not ref.is_file():
        raise ConfigurationError(f"unknown built-in profile {name!r}")
    with resources.as_file(ref) as p:
        return load_pdp(p)


def resolve_pdp(spec: str) -> PowerDelayProfile:
    """Accept either a built-in profile name or a path to a profile file."""
    if Path(spec).is_file():
        return load_pdp(spec)
    return builtin_pdp(spec)


def max_doppler(carrier_freq: float, speed: float) -> float:
    """Maximum Doppler shift in rad/s for a carrier in Hz and a speed in m/s."""
    return 2 * math.pi * carrier_freq * speed / SPEED_OF_LIGHT


@dataclass(frozen=True)
class DopplerConfig:
    carrier_freq: float = 3.5e9
    speed: float = 120 / 3.6
    n_sin: int = 20

    def __post_init__(self):
        if self.n_sin < 1:
            raise ConfigurationError("n_sin must be at least 1")
        if self.speed < 0 or self.carrier_freq < 0:
            raise ConfigurationError("speed and carrier frequency must be non-negative")

    @property
    def omega_d(self) -> float:
        return max_doppler(self.carrier_freq, self.speed)


@dataclass(frozen=True)
class PathState:
    """Frozen random parameters of one sum-of-sinusoids path."""

    psi: np.ndarray
    zeta: np.ndarray

    @property
    def n_sin(self) -> int:
        return self.psi.size

    @property
    def alpha(self) -> np.ndarray:
        n = np.arange(1, self.n_sin + 1)
        return (2 * np.pi * n + self.zeta) / self.n_sin

    @classmethod
    def draw(cls, rng: np.random.Generator, n_sin: int) -> PathState:
        psi, zeta = rng.uniform(-np.pi, np.pi, size=(2, n_sin))
        return cls(psi, zeta)


@dataclass(frozen=True)
class PulseShape:
    rolloff: float = 0.22
    lag_min: int = -3
    lag_max: int = 4

    def __post_init__(self):
        if not 0 < self.rolloff <= 1:
            raise ConfigurationError("rolloff must lie in (0, 1]")
        if self.lag_min >= 0:
            raise ConfigurationError("lag_min must be a negative integer")
        if self.lag_max < 0:
            raise ConfigurationError("lag_max must be non-negative")

    @classmethod
    def for_channel(cls, pdp: PowerDelayProfile, grid: BlockGrid,
                    rolloff: float = 0.22, lag_min: int = -3) -> PulseShape:
        lag_max = math.ceil(grid.bandwidth * pdp.max_excess_delay) - lag_min
        return cls(rolloff, lag_min, lag_max)

    @property
    def n_taps(self) -> int:
        return self.lag_max - self.lag_min + 1

    def lags(self) -> np.ndarray:
        """Lags in DFT order: 0..lag_max, then lag_min..-1."""
        return np.concatenate([np.arange(0, self.lag_max + 1), np.arange(self.lag_min, 0)])


def rrc_pulse(t, rolloff: float):
    """Root-raised-cosine impulse response for a unit symbol period."""
    b = rolloff
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    at_zero = np.isclose(t, 0.0, atol=1e-12, rtol=0)
    at_sing = np.isclose(np.abs(t), 1 / (4 * b), atol=1e-12, rtol=0)
    regular = ~(at_zero | at_sing)
    x = t[regular]
    out[regular] = (np.sin(np.pi * x * (1 - b)) + 4 * b * x * np.cos(np.pi * x * (1 + b))) / (
        np.pi * x * (1 - (4 * b * x) ** 2)
    )
    out[at_zero] = 1 - b + 4 * b / np.pi
    out[at_sing] = (b / math.sqrt(2)) * (
        (1 + 2 / np.pi) * math.sin(np.pi / (4 * b)) + (1 - 2 / np.pi) * math.cos(np.pi / (4 * b))
    )
    return out if out.ndim else float(out)


def path_gain_sos(t, state: PathState, omega_d: float):
    """Complex gain of one sum-of-sinusoids path at time(s) ``t`` in seconds."""
    t = np.asarray(t, dtype=float)
    phase = omega_d * t[..., None] * np.cos(state.alpha) + state.psi
    return np.exp(1j * phase).sum(axis=-1) / math.sqrt(state.n_sin)


def symbol_times(grid: BlockGrid, symbol_time_scale: str = "sample") -> np.ndarray:
    """Time instants (seconds) at which the fading of each OFDM symbol is sampled.

    ``"sample"`` advances by one sampling period ``1/B`` per symbol;
    ``"symbol"`` advances by the useful symbol duration ``F/B``.
    """
    if symbol_time_scale == "sample":
        step = 1.0 / grid.bandwidth
    elif symbol_time_scale == "symbol":
        step = grid.F / grid.bandwidth
    else:
        raise ConfigurationError(f"unknown symbol_time_scale {symbol_time_scale!r}")
    return np.arange(grid.T) * step


def discrete_impulse_response(t_sym: int, pdp: PowerDelayProfile, pulse: PulseShape,
                              states, grid: BlockGrid, omega_d: float,
                              symbol_time_scale: str = "sample") -> np.ndarray:
    """Taps q_{t,lag} for lag = lag_min..lag_max (natural order) at 1-based symbol ``t_sym``."""
    if len(states) != pdp.n_paths:
        raise ConfigurationError("need one PathState per path")
    t = symbol_times(grid, symbol_time_scale)[t_sym - 1]
    lags = np.arange(pulse.lag_min, pulse.lag_max + 1)
    taps = np.zeros(lags.size, dtype=complex)
    for c_i, tau_i, st in zip(pdp.powers, pdp.delays, states):
        taps += math.sqrt(c_i) * path_gain_sos(t, st, omega_d) * rrc_pulse(
            lags - grid.bandwidth * tau_i, pulse.rolloff)
    return taps


def to_dft_order(taps: np.ndarray, pulse: PulseShape) -> np.ndarray:
    """Reorder natural-order taps to [lag 0..lag_max, lag_min..-1]."""
    return np.roll(taps, pulse.lag_min, axis=-1)


def block_frequency_response(taps, grid: BlockGrid) -> np.ndarray:
    """Channel vector h (length L) from DFT-ordered tap vectors, one row per symbol."""
    taps = np.atleast_2d(np.asarray(taps, dtype=complex))
    if taps.shape[0] != grid.T:
        raise ConfigurationError(f"expected {grid.T} tap vectors, got {taps.shape[0]}")
    n_taps = taps.shape[1]
    if n_taps < 1:
        raise ConfigurationError("tap vectors must be non-empty")
    i = np.arange(n_taps)
    f = np.arange(grid.F)
    dft = np.exp(-2j * np.pi * np.outer(i, f) / n_taps)
    Q = taps @ dft  # T x F
    return Q.T.reshape(grid.L)


def path_response(pdp: PowerDelayProfile, pulse: PulseShape, grid: BlockGrid) -> np.ndarray:
    """Per-path frequency response ``sqrt(c_i) * DFT(p(lag - B tau_i))`` (n_paths x F)."""
    lags = pulse.lags()
    p = rrc_pulse(lags[None, :] - grid.bandwidth * pdp.delays[:, None], pulse.rolloff)
    i = np.arange(pulse.n_taps)
    dft = np.exp(-2j * np.pi * np.outer(i, np.arange(grid.F)) / pulse.n_taps)
    return np.sqrt(pdp.powers)[:, None] * (p @ dft)


def _as_seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def pair_rng(seed, k: int, m: int) -> np.random.Generator:
    """Independent generator for user ``k`` and antenna ``m``."""
    base = _as_seed_sequence(seed)
    child = np.random.SeedSequence(base.entropy, spawn_key=tuple(base.spawn_key) + (k, m))
    return np.random.default_rng(child)


def draw_pair_states(seed, k: int, m: int, n_paths: int, n_sin: int) -> list[PathState]:
    rng = pair_rng(seed, k, m)
    return [PathState.draw(rng, n_sin) for _ in range(n_paths)]


@dataclass
class ChannelTensor:
    """Fading coefficients ``h[l, k, m]`` over pilot dimension, user and antenna."""

    coefficients: np.ndarray
    grid: BlockGrid | None = field(default=None, compare=False)

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=complex)
        if self.coefficients.ndim != 3:
            raise ValueError("channel tensor must be L x K x M")

    @property
    def shape(self):
        return self.coefficients.shape

    def as_matrix(self) -> np.ndarray:
        """L x (K*M) matrix whose columns are the fading vectors."""
        L = self.coefficients.shape[0]
        return self.coefficients.reshape(L, -1, order="F")

    def save(self, path) -> None:
        L, K, M = self.coefficients.shape
        body = self.coefficients.astype("<c8").ravel(order="F")
        with open(path, "wb") as fh:
            fh.write(CHANNEL_MAGIC + struct.pack("<III", L, K, M))
            fh.write(body.tobytes())

    @classmethod
    def load(cls, path, grid: BlockGrid | None = None) -> ChannelTensor:
        raw = Path(path).read_bytes()
        if raw[:5] != CHANNEL_MAGIC:
            raise ValueError(f"{path}: not a channel tensor file")
        L, K, M = struct.unpack("<III", raw[5:17])
        data = np.frombuffer(raw[17:], dtype="<c8")
        if data.size != L * K * M:
            raise ValueError(f"{path}: truncated body")
        return cls(data.reshape((L, K, M), order="F").astype(complex), grid)


def generate_channels(grid: BlockGrid, pdp: PowerDelayProfile, pulse: PulseShape,
                      dop: DopplerConfig, K: int, M: int, seed,
                      symbol_time_scale: str = "sample", users=None) -> ChannelTensor:
    """Draw an L x K x M channel tensor.

    Every (user, antenna) pair gets its own derived random stream, so
    enlarging ``K`` or ``M`` leaves the existing pairs untouched.  With
    ``users`` only those user indices are drawn (tensor is L x len(users) x M),
    with exactly the values they would have in the full tensor.
    """
    users = list(range(K)) if users is None else [int(k) for k in users]
    if any(not 0 <= k < K for k in users):
        raise ConfigurationError(f"user indices must lie in [0, {K})")
    n_paths, n_sin = pdp.n_paths, dop.n_sin
    times = symbol_times(grid, symbol_time_scale)
    response = path_response(pdp, pulse, grid)  # n_paths x F
    n = np.arange(1, n_sin + 1)
    omega = dop.omega_d

    pairs = [(k, m) for m in range(M) for k in users]
    out = np.empty((grid.L, len(pairs)), dtype=complex)
    chunk = max(1, _CHUNK_ENTRIES // (n_paths * n_sin * grid.T))
    for start in range(0, len(pairs), chunk):
        block = pairs[start:start + chunk]
        draws = np.empty((len(block), n_paths, 2, n_sin))
        for j, (k, m) in enumerate(block):
            draws[j] = pair_rng(seed, k, m).uniform(-np.pi, np.pi, size=(n_paths, 2, n_sin))
        psi, zeta = draws[:, :, 0], draws[:, :, 1]
        doppler = omega * np.cos((2 * np.pi * n + zeta) / n_sin)  # pairs x paths x sin
        phase = doppler[..., None] * times + psi[..., None]
        q = np.exp(1j * phase).sum(axis=2) / math.sqrt(n_sin)  # pairs x paths x T
        H = np.einsum("pit,if->pft", q, response)  # pairs x F x T
        out[:, start:start + len(block)] = H.reshape(len(block), grid.L).T
    return ChannelTensor(out.reshape(grid.L, len(users), M, order="F"), grid)
