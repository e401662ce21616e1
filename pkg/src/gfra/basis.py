"""Low-dimensional channel approximation bases and their accuracy metrics."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .channel import BlockGrid, ChannelTensor, ConfigurationError

BASIS_MAGIC = b"MABS1"

MODELS = ("block_fading", "bwl", "dft", "pca")


class RankError(ValueError):
    """A basis or covariance does not have the rank the operation needs."""


@dataclass(frozen=True)
class Basis:
    """L x N matrix ``G`` whose columns span the approximation subspace."""

    G: np.ndarray
    model: str
    time_aware: bool = True
    grid: BlockGrid | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}")
        G = np.asarray(self.G, dtype=complex)
        if G.ndim == 1:
            G = G[:, None]
        if not np.all(np.isfinite(G)):
            raise ValueError("basis has non-finite entries")
        if np.any(np.linalg.norm(G, axis=0) == 0):
            raise ValueError("basis has a zero column")
        object.__setattr__(self, "G", G)

    @property
    def L(self) -> int:
        return self.G.shape[0]

    @property
    def N(self) -> int:
        return self.G.shape[1]

    @property
    def name(self) -> str:
        return self.model if self.time_aware else f"{self.model}_freq"

    def tag(self) -> int:
        return MODELS.index(self.model) | (0 if self.time_aware else 0x10)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(BASIS_MAGIC + struct.pack("<IIB", self.L, self.N, self.tag()))
            fh.write(self.G.astype("<c8").ravel(order="F").tobytes())

    @classmethod
    def load(cls, path, grid: BlockGrid | None = None) -> Basis:
        raw = Path(path).read_bytes()
        if raw[:5] != BASIS_MAGIC:
            raise ValueError(f"{path}: not a basis file")
        L, N, tag = struct.unpack("<IIB", raw[5:14])
        data = np.frombuffer(raw[14:], dtype="<c8")
        if data.size != L * N:
            raise ValueError(f"{path}: truncated body")
        G = data.reshape((L, N), order="F").astype(complex)
        return cls(G, MODELS[tag & 0x0F], not tag & 0x10, grid)


@dataclass(frozen=True)
class CovarianceEstimate:
    R: np.ndarray
    sample_count: int
    eigvals: np.ndarray  # descending
    eigvecs: np.ndarray

    @property
    def degenerate(self) -> bool:
        return bool(self.eigvals[0] <= 0)

    def numerical_rank(self) -> int:
        if self.degenerate:
            return 0
        tol = self.R.shape[0] * np.finfo(float).eps * self.eigvals[0]
        return int(np.sum(self.eigvals > tol))


def covariance_from_vectors(H: np.ndarray) -> CovarianceEstimate:
    """Sample covariance of the columns of an L x S matrix."""
    H = np.asarray(H, dtype=complex)
    S = H.shape[1]
    if S < 2:
        raise ValueError("need at least two fading vectors")
    R = H @ H.conj().T / S
    R = (R + R.conj().T) / 2
    w, V = np.linalg.eigh(R)
    order = np.argsort(w)[::-1]
    return CovarianceEstimate(R, S, w[order], V[:, order])


def sample_covariance(channels: ChannelTensor) -> CovarianceEstimate:
    return covariance_from_vectors(channels.as_matrix())


def pca_basis(cov: CovarianceEstimate, N: int, grid: BlockGrid | None = None) -> Basis:
    """Scaled principal directions ``u_n * sqrt(rho_n)`` for the N largest eigenvalues."""
    L = cov.R.shape[0]
    if not 1 <= N <= L:
        raise ValueError(f"order N={N} outside [1, {L}]")
    rank = cov.numerical_rank()
    if N > rank:
        raise RankError(f"order N={N} exceeds the numerical rank {rank} of the covariance")
    return Basis(cov.eigvecs[:, :N] * np.sqrt(cov.eigvals[:N]), "pca", True, grid)


def _normalized(col: np.ndarray) -> np.ndarray:
    # ||g||^2 = L, the all-ones convention
    return col * np.sqrt(col.size) / np.linalg.norm(col)


def block_fading_basis(grid: BlockGrid) -> Basis:
    return Basis(np.ones((grid.L, 1), dtype=complex), "block_fading", True, grid)


def _half_linear(idx: np.ndarray, size: int) -> list[np.ndarray]:
    cols = []
    half = size // 2
    for lo, hi in ((1, half), (half + 1, size)):
        inside = (idx >= lo) & (idx <= hi)
        col = np.where(inside, idx - (lo + hi) / 2, 0.0)
        cols.append(_normalized(col.astype(complex)))
    return cols


def bwl_basis(grid: BlockGrid, time_aware: bool = True) -> Basis:
    """Block-wise linear basis: a mean column plus linear ramps on block halves.

    The time-aware variant has N=5 (ramps over both symbol halves and both
    subcarrier halves); the frequency-only variant keeps N=3.
    """
    dims = [("F", grid.F)] + ([("T", grid.T)] if time_aware else [])
    for label, size in dims:
        if size % 2:
            raise ConfigurationError(f"BWL basis needs even {label}, got {size}")
        if size < 4:
            raise ConfigurationError(f"BWL basis needs {label} >= 4 so each half carries a ramp")
    cols = [np.ones(grid.L, dtype=complex)]
    if time_aware:
        cols += _half_linear(grid.time_indices(), grid.T)
    cols += _half_linear(grid.freq_indices(), grid.F)
    return Basis(np.column_stack(cols), "bwl", time_aware, grid)


def dft_basis(grid: BlockGrid, time_aware: bool = True) -> Basis:
    """All-ones column plus the second and last DFT columns along time and frequency.

    Columns that coincide with an earlier one (T or F <= 2) are dropped,
    so ``N`` may come out smaller than 5 (or 3).
    """
    t, f = grid.time_indices() - 1, grid.freq_indices() - 1
    cand = [np.ones(grid.L, dtype=complex)]
    if time_aware:
        cand += [np.exp(-2j * np.pi * t * kk / grid.T) for kk in (1, grid.T - 1)]
    cand += [np.exp(-2j * np.pi * f * kk / grid.F) for kk in (1, grid.F - 1)]
    cols: list[np.ndarray] = []
    for col in cand:
        if not any(np.allclose(col, prev, atol=1e-12) for prev in cols):
            cols.append(col)
    return Basis(np.column_stack(cols), "dft", time_aware, grid)


def build_basis(model: str, grid: BlockGrid, N: int | None = None,
                cov: CovarianceEstimate | None = None, time_aware: bool = True) -> Basis:
    if model == "block_fading":
        return block_fading_basis(grid)
    if model == "bwl":
        return bwl_basis(grid, time_aware)
    if model == "dft":
        return dft_basis(grid, time_aware)
    if model == "pca":
        if cov is None or N is None:
            raise ValueError("PCA basis needs a covariance estimate and an order")
        return pca_basis(cov, N, grid)
    raise ValueError(f"unknown model {model!r}")


class _Projector:
    """Cached thin QR of a basis for repeated least-squares fits."""

    def __init__(self, basis: Basis):
        G = basis.G
        Q, R = sla.qr(G, mode="economic")
        d = np.abs(np.diag(R))
        tol = 1e3 * max(G.shape) * np.finfo(float).eps * d.max()
        bad = np.flatnonzero(d <= tol)
        if bad.size:
            raise RankError(f"basis columns {bad.tolist()} are linearly dependent on earlier columns")
        self.G, self.Q, self.R = G, Q, R

    def fit(self, H: np.ndarray):
        coef = sla.solve_triangular(self.R, self.Q.conj().T @ H)
        return coef, self.G @ coef


def ls_project(h: np.ndarray, basis: Basis):
    """Least-squares fit of ``h`` onto the basis columns.

    Returns the coefficients, the fitted vector and the residual norm.
    """
    h = np.asarray(h, dtype=complex)
    theta, h_hat = _Projector(basis).fit(h)
    return theta, h_hat, float(np.linalg.norm(h - h_hat))


@dataclass
class ApproxReport:
    kappa: float
    epsilon: float
    model: str = ""
    N: int = 0
    curve: list[tuple[int, float]] = field(default_factory=list)


def _fit_all(H: np.ndarray, basis: Basis):
    _, H_hat = _Projector(basis).fit(H)
    return H_hat, np.linalg.norm(H - H_hat, axis=0)


def approx_error_kappa(channels: ChannelTensor | np.ndarray, basis: Basis) -> ApproxReport:
    """Frobenius error of the fit relative to the block-fading (mean) fit."""
    H = channels.as_matrix() if isinstance(channels, ChannelTensor) else np.asarray(channels)
    H_hat, residuals = _fit_all(H, basis)
    H_bar = np.broadcast_to(H.mean(axis=0), H.shape)
    denom = np.linalg.norm(H_bar - H)
    if denom == 0:
        raise ValueError("channels are exactly block-fading; kappa is undefined")
    kappa = float(np.linalg.norm(H_hat - H) / denom)
    return ApproxReport(kappa, float(residuals.mean()), basis.name, basis.N, [(basis.N, kappa)])


def prediction_horizon_error(channels: ChannelTensor | np.ndarray, basis: Basis) -> float:
    """Empirical mean 2-norm approximation error over all fading vectors."""
    H = channels.as_matrix() if isinstance(channels, ChannelTensor) else np.asarray(channels)
    return float(_fit_all(H, basis)[1].mean())


def kappa_curve(channels: ChannelTensor, cov: CovarianceEstimate, orders) -> list[ApproxReport]:
    """PCA approximation reports for each order in ``orders``."""
    reports = [approx_error_kappa(channels, pca_basis(cov, N)) for N in orders]
    curve = [(r.N, r.kappa) for r in reports]
    for r in reports:
        r.curve = curve
    return reports


def write_kappa_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "N", "kappa", "epsilon"])
        for r in reports:
            w.writerow([r.model, r.N, repr(r.kappa), repr(r.epsilon)])
