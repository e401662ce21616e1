"""Covariance-based maximum-likelihood activity detection.

The activity profile ``gamma`` is estimated by coordinate descent on the
negative log-likelihood ``log|Sigma_gamma| + tr(Sigma_gamma^{-1} Sigma_hat)``,
where every user contributes a rank-N term ``gamma_k S_k S_k^H``.  Each
coordinate step is an exact line search: the 1-D cost only depends on the
eigenvalues of ``Psi_k = S_k^H Sigma^{-1} S_k`` and on the diagonal of
``Xi_k``, and its stationary points are the real roots of a polynomial of
degree ``2N - 1``.  The inverse covariance is maintained by the Woodbury
identity between full refactorizations.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from numpy.polynomial import polynomial as P
from scipy.optimize import brentq

from .basis import Basis


class NumericalError(ArithmeticError):
    """The detector state left the domain where the cost is defined."""


class CapWarning(RuntimeWarning):
    """A line search settled on the artificial upper bound of the step."""


# condition number of (I + d Psi_k) beyond which the Woodbury step is replaced
COND_LIMIT = 1e12
EIG_CLAMP = 1e-10


@dataclass(frozen=True)
class EffectivePilotSet:
    """Effective pilots ``s_nk = g_n * phi_k`` for all users and basis vectors."""

    pilots: np.ndarray  # L x K
    G: np.ndarray  # L x N

    @property
    def L(self) -> int:
        return self.pilots.shape[0]

    @property
    def K(self) -> int:
        return self.pilots.shape[1]

    @property
    def N(self) -> int:
        return self.G.shape[1]

    def S(self, k: int) -> np.ndarray:
        return self.G * self.pilots[:, k, None]

    def stacked(self, users=None) -> np.ndarray:
        """L x len(users) x N array of effective pilot matrices."""
        phi = self.pilots if users is None else self.pilots[:, users]
        return phi[:, :, None] * self.G[:, None, :]


def effective_pilots(pilots: np.ndarray, basis: Basis | np.ndarray) -> EffectivePilotSet:
    G = basis.G if isinstance(basis, Basis) else np.asarray(basis, dtype=complex)
    pilots = np.asarray(pilots, dtype=complex)
    if G.ndim == 1:
        G = G[:, None]
    if pilots.ndim != 2 or pilots.shape[0] != G.shape[0]:
        raise ValueError(f"pilot matrix {pilots.shape} does not match basis with L={G.shape[0]}")
    return EffectivePilotSet(pilots, G)


def sample_covariance(Y: np.ndarray) -> np.ndarray:
    """``(1/M) sum_m y_m y_m^H`` for an L x M matrix of received pilots."""
    Y = np.asarray(Y)
    S = Y @ Y.conj().T / Y.shape[1]
    return (S + S.conj().T) / 2


def model_covariance(gamma, pilots: EffectivePilotSet, noise_var: float) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=float)
    Sigma = noise_var * np.eye(pilots.L, dtype=complex)
    active = np.flatnonzero(gamma)
    if active.size:
        X = pilots.stacked(active).reshape(pilots.L, -1)
        w = np.repeat(gamma[active], pilots.N)
        Sigma += (X * w) @ X.conj().T
    return Sigma


def _cholesky(Sigma: np.ndarray):
    try:
        return sla.cho_factor(Sigma, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("model covariance is not positive definite") from exc


def _cost_from_factor(cf, sigma_hat: np.ndarray) -> float:
    logdet = 2 * np.sum(np.log(np.diag(cf[0]).real))
    return float(logdet + np.trace(sla.cho_solve(cf, sigma_hat)).real)


def nll_cost(gamma, sigma_hat: np.ndarray, pilots: EffectivePilotSet, noise_var: float) -> float:
    """Negative log-likelihood ``log|Sigma_gamma| + tr(Sigma_gamma^{-1} Sigma_hat)``."""
    return _cost_from_factor(_cholesky(model_covariance(gamma, pilots, noise_var)), sigma_hat)


# 1-D line search pieces, in terms of the eigenvalues lam and the diagonal xi

def cost_increment(d, lam, xi):
    """Change of the cost when ``gamma_k`` moves by ``d``."""
    d = np.asarray(d, dtype=float)
    den = 1 + d[..., None] * lam
    return np.sum(np.log(den) - d[..., None] * xi / den, axis=-1)


def cost_derivative(d, lam, xi):
    d = np.asarray(d, dtype=float)
    den = 1 + d[..., None] * lam
    return np.sum(lam / den - xi / den**2, axis=-1)


def stationary_polynomial(lam, xi) -> np.ndarray:
    """Coefficients (lowest degree first) of the derivative with denominators cleared.

    ``sum_n (lam_n (1 + d lam_n) - xi_n) prod_{m != n} (1 + d lam_m)^2``
    """
    out = np.zeros(1)
    for n in range(len(lam)):
        term = np.array([lam[n] - xi[n], lam[n] ** 2])
        for m in range(len(lam)):
            if m != n:
                term = P.polymul(term, [1.0, 2 * lam[m], lam[m] ** 2])
        out = P.polyadd(out, term)
    return out


def _bracket_grid(lo: float, hi: float, lam, xi, per_side: int) -> np.ndarray:
    pts = [lo, hi, 0.0]
    with np.errstate(divide="ignore", invalid="ignore"):
        single = np.where(lam > 0, (xi - lam) / lam**2, np.nan)
    pts += [r for r in single if np.isfinite(r) and lo < r < hi]
    if hi > 0:
        pts += list(np.geomspace(hi * 1e-12, hi, per_side))
    if lo < 0:
        pts += list(-np.geomspace(-lo * 1e-12, -lo, per_side))
    return np.unique(np.clip(pts, lo, hi))


def stationary_points(lam, xi, lo: float, hi: float, method: str = "bracket") -> list[float]:
    """Real stationary points of the 1-D cost inside ``[lo, hi]``.

    ``bracket`` locates sign changes of the derivative on a grid that is
    log-spaced away from zero on both sides (plus the single-term roots)
    and refines each bracket to 1e-10.  ``companion`` takes the real
    eigenvalues of the companion matrix of the stationary polynomial.
    """
    lam = np.asarray(lam, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if method == "companion":
        coef = np.trim_zeros(stationary_polynomial(lam, xi), "b")
        if coef.size < 2:
            return []
        roots = P.polyroots(coef)
        real = roots.real[np.abs(roots.imag) <= 1e-8 * (1 + np.abs(roots.real))]
        return sorted(float(r) for r in real if lo <= r <= hi)
    if method != "bracket":
        raise ValueError(f"unknown root method {method!r}")

    grid = _bracket_grid(lo, hi, lam, xi, per_side=max(32, 8 * lam.size))
    g = cost_derivative(grid, lam, xi)
    roots = [float(x) for x in grid[g == 0]]
    sign = np.sign(g)
    for i in np.flatnonzero(sign[:-1] * sign[1:] < 0):
        a, b = grid[i], grid[i + 1]
        roots.append(brentq(lambda x: float(cost_derivative(x, lam, xi)), a, b,
                            xtol=1e-12, rtol=1e-10))
    return sorted(roots)


@dataclass
class CoordinateUpdateWork:
    k: int
    Psi: np.ndarray
    lam: np.ndarray
    V: np.ndarray
    xi: np.ndarray  # diagonal of Xi_k
    interval: tuple[float, float]
    candidates: list[float]
    d_star: float = 0.0
    at_cap: bool = False


@dataclass
class GammaState:
    """Mutable detector state: ``gamma``, the maintained inverse covariance and the cost."""

    gamma: np.ndarray
    sigma_inv: np.ndarray
    cost: float
    noise_var: float
    upper: np.ndarray | None = None  # box constraint; None means gamma >= 0 only
    d_max: float = np.inf
    refactorizations: int = 0

    @classmethod
    def initial(cls, sigma_hat, pilots: EffectivePilotSet, noise_var: float,
                upper=None, d_max: float | None = None,
                d_max_factor: float = 1e3) -> GammaState:
        L = pilots.L
        if d_max is None:
            d_max = d_max_factor * float(np.trace(sigma_hat).real) / (L * noise_var)
        cost = L * math.log(noise_var) + float(np.trace(sigma_hat).real) / noise_var
        upper = None if upper is None else np.broadcast_to(np.asarray(upper, float), (pilots.K,)).copy()
        return cls(np.zeros(pilots.K), np.eye(L, dtype=complex) / noise_var, cost, noise_var,
                   upper, d_max)

    def refresh(self, sigma_hat, pilots: EffectivePilotSet) -> None:
        """Recompute the inverse and the cost from scratch."""
        cf = _cholesky(model_covariance(self.gamma, pilots, self.noise_var))
        inv = sla.cho_solve(cf, np.eye(pilots.L, dtype=complex))
        self.sigma_inv = (inv + inv.conj().T) / 2
        self.cost = _cost_from_factor(cf, sigma_hat)
        self.refactorizations += 1

    def check(self, sigma_hat, pilots: EffectivePilotSet, rtol: float = 1e-7) -> None:
        Sigma = model_covariance(self.gamma, pilots, self.noise_var)
        err = np.linalg.norm(self.sigma_inv @ Sigma - np.eye(pilots.L))
        if err > rtol * math.sqrt(pilots.L):
            raise NumericalError(f"inverse covariance drifted (residual {err:.3g})")
        ref = nll_cost(self.gamma, sigma_hat, pilots, self.noise_var)
        if abs(ref - self.cost) > rtol * max(1.0, abs(ref)):
            raise NumericalError(f"tracked cost {self.cost!r} differs from {ref!r}")


def _clamped_eigh(Psi: np.ndarray):
    lam, V = np.linalg.eigh((Psi + Psi.conj().T) / 2)
    top = max(lam.max(), 0.0)
    if lam.min() < -EIG_CLAMP * max(top, 1e-300):
        raise NumericalError(f"Psi_k has eigenvalue {lam.min():.3g}; detector state is corrupted")
    return np.maximum(lam, 0.0), V


def line_search(state: GammaState, sigma_hat, pilots: EffectivePilotSet, k: int,
                method: str = "bracket") -> tuple[CoordinateUpdateWork, np.ndarray]:
    """Exact minimization of the cost along coordinate ``k`` (state untouched)."""
    S = pilots.S(k)
    B = state.sigma_inv @ S
    Psi = S.conj().T @ B
    lam, V = _clamped_eigh(Psi)
    A = B @ V
    xi = np.sum(A.conj() * (sigma_hat @ A), axis=0).real

    g_k = state.gamma[k]
    lo = -g_k
    hi = state.d_max if state.upper is None else state.upper[k] - g_k
    if lam.max() > 0:
        pole = -1.0 / lam.max()
        if lo <= pole:
            lo = pole + 1e-12 * abs(pole)
    cands = stationary_points(lam, xi, lo, hi, method) if hi > lo else []
    pts = np.array(sorted(set(cands) | {lo, hi, 0.0} if hi > lo else {0.0}))
    vals = cost_increment(pts, lam, xi)
    best = vals.min()
    tied = pts[vals <= best + 1e-15 * max(1.0, abs(best))]
    d_star = float(tied[np.argmin(np.abs(tied))])
    work = CoordinateUpdateWork(k, Psi, lam, V, xi, (lo, hi), cands, d_star,
                                at_cap=state.upper is None and np.isfinite(hi) and d_star == hi and hi > 0)
    return work, A


def _apply_update(state: GammaState, sigma_hat, pilots: EffectivePilotSet, k: int,
                  method: str) -> CoordinateUpdateWork:
    work, A = line_search(state, sigma_hat, pilots, k, method)
    d = work.d_star
    if d == 0.0:
        return work
    scale = 1 + d * work.lam
    new_gamma = state.gamma[k] + d
    if state.upper is not None:
        new_gamma = min(new_gamma, state.upper[k])
    state.gamma[k] = max(new_gamma, 0.0)
    if scale.max() / scale.min() > COND_LIMIT:
        state.refresh(sigma_hat, pilots)
        return work
    state.sigma_inv -= (A * (d / scale)) @ A.conj().T
    state.cost += float(cost_increment(d, work.lam, work.xi))
    return work


def coordinate_update(state: GammaState, sigma_hat, pilots: EffectivePilotSet, k: int,
                      method: str = "bracket") -> tuple[float, GammaState]:
    """Move ``gamma_k`` to the minimizer of the cost along that coordinate."""
    work = _apply_update(state, sigma_hat, pilots, k, method)
    if work.at_cap:
        warnings.warn(f"step for user {k} hit the cap d_max={state.d_max:.4g}", CapWarning,
                      stacklevel=2)
    return work.d_star, state


@dataclass
class DetectionDiagnostics:
    epoch_costs: list[float] = field(default_factory=list)
    updates: list[tuple[int, int, int, float, float]] = field(default_factory=list)
    cap_hits: int = 0
    refactorizations: int = 0

    @property
    def cost_trace(self) -> np.ndarray:
        return np.array([u[4] for u in self.updates])

    def d_star_stats(self) -> dict:
        d = np.array([u[3] for u in self.updates])
        if d.size == 0:
            return {"count": 0}
        return {"count": int(d.size), "nonzero": int(np.count_nonzero(d)),
                "mean_abs": float(np.abs(d).mean()), "max_abs": float(np.abs(d).max())}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "update_idx", "user", "d_star", "cost"])
            for epoch, idx, user, d, cost in self.updates:
                w.writerow([epoch, idx, user, repr(d), repr(cost)])


def run_detection(sigma_hat, pilots: EffectivePilotSet, noise_var: float, epochs: int = 10,
                  upper=None, seed=0, d_max_factor: float = 1e3,
                  method: str = "bracket") -> tuple[np.ndarray, DetectionDiagnostics]:
    """Coordinate descent from ``gamma = 0`` with a fresh random user order per epoch.

    ``upper`` switches to the box constraint ``0 <= gamma_k <= upper_k``.
    """
    sigma_hat = np.asarray(sigma_hat, dtype=complex)
    state = GammaState.initial(sigma_hat, pilots, noise_var, upper, d_max_factor=d_max_factor)
    d_max = state.d_max
    rng = np.random.default_rng(seed)
    diag = DetectionDiagnostics()
    idx = 0
    for epoch in range(epochs):
        for k in rng.permutation(pilots.K):
            work = _apply_update(state, sigma_hat, pilots, int(k), method)
            diag.cap_hits += work.at_cap
            diag.updates.append((epoch, idx, int(k), work.d_star, state.cost))
            idx += 1
        state.refresh(sigma_hat, pilots)
        diag.epoch_costs.append(state.cost)
    if diag.cap_hits:
        warnings.warn(f"{diag.cap_hits} line searches stopped at d_max={d_max:.4g}", CapWarning,
                      stacklevel=2)
    diag.refactorizations = state.refactorizations
    return state.gamma.copy(), diag


def threshold_activities(gamma_hat, threshold: float) -> np.ndarray:
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    return (np.asarray(gamma_hat) > threshold).astype(int)


def write_gamma_csv(path, gamma_hat) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user", "gamma_hat"])
        for k, g in enumerate(gamma_hat):
            w.writerow([k, repr(float(g))])
