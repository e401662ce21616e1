"""Seeded end-to-end experiments: pilots, activity, received signals and metrics."""

from __future__ import annotations

import csv
import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import basis as bm
from . import detector as det
from .channel import (BlockGrid, ChannelTensor, DopplerConfig, PulseShape, generate_channels,
                      resolve_pdp)


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class GridConfig:
    T: int = 10
    F: int = 10
    subcarrier_spacing: float = 5e3


@dataclass
class ChannelConfig:
    pdp: str = "hilly_terrain"
    carrier_freq: float = 3.5e9
    speed_kmh: float = 120.0
    n_sin: int = 20
    lag_min: int = -3
    rolloff: float = 0.22
    symbol_time_scale: str = "sample"


@dataclass
class PopulationConfig:
    K: int = 256
    K_act: int = 25
    M: int = 64
    noise_var: float = 1.0
    power_control: bool = True  # ideal channel inversion: beta_k = 1
    beta: float | list[float] = 1.0


@dataclass
class BasisConfig:
    models: list[str] = field(default_factory=lambda: ["block_fading", "bwl", "dft", "pca:4"])
    train_seed: int | None = None
    train_pairs: int = 4000
    eval_pairs: int = 4000
    on_sample: bool = False
    max_order: int = 8


@dataclass
class DetectorConfig:
    epochs: int = 10
    constraint: str = "nonnegative"
    d_max_factor: float = 1e3
    root_method: str = "bracket"


@dataclass
class ExperimentConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    population: PopulationConfig = field(default_factory=PopulationConfig)
    basis: BasisConfig = field(default_factory=BasisConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    trials: int = 10
    seed: int = 0
    redraw_pilots: bool = False
    workers: int = 1

    # derived objects

    def block_grid(self) -> BlockGrid:
        g = self.grid
        return BlockGrid(g.T, g.F, g.subcarrier_spacing)

    def doppler(self) -> DopplerConfig:
        c = self.channel
        return DopplerConfig(c.carrier_freq, c.speed_kmh / 3.6, c.n_sin)

    def channel_setup(self):
        grid = self.block_grid()
        pdp = resolve_pdp(self.channel.pdp)
        pulse = PulseShape.for_channel(pdp, grid, self.channel.rolloff, self.channel.lag_min)
        return grid, pdp, pulse, self.doppler()

    def beta_vector(self) -> np.ndarray:
        K = self.population.K
        if self.population.power_control:
            return np.ones(K)
        return np.broadcast_to(np.asarray(self.population.beta, dtype=float), (K,)).copy()

    def model_specs(self) -> list[tuple[str, bool, int | None]]:
        return [parse_model(s) for s in self.basis.models]


_SECTIONS = {"grid": GridConfig, "channel": ChannelConfig, "population": PopulationConfig,
             "basis": BasisConfig, "detector": DetectorConfig}


def parse_model(spec: str) -> tuple[str, bool, int | None]:
    """``"pca:4"`` -> ("pca", True, 4); ``"bwl_freq"`` -> ("bwl", False, None)."""
    name, _, order = spec.partition(":")
    time_aware = True
    if name.endswith("_freq"):
        name, time_aware = name[: -len("_freq")], False
    if name not in bm.MODELS:
        raise ConfigError("basis.models", f"unknown model {spec!r}")
    if name == "pca":
        if not order.isdigit() or int(order) < 1:
            raise ConfigError("basis.models", f"PCA needs an order, e.g. 'pca:4', got {spec!r}")
        return name, True, int(order)
    if order:
        raise ConfigError("basis.models", f"order only applies to PCA, got {spec!r}")
    if name in ("block_fading",) and not time_aware:
        raise ConfigError("basis.models", "block_fading has no frequency-only variant")
    return name, time_aware, None


def model_label(name: str, time_aware: bool, order: int | None) -> str:
    if name == "pca":
        return f"pca{order}"
    return name if time_aware else f"{name}_freq"


def config_from_dict(raw: dict | None) -> ExperimentConfig:
    raw = dict(raw or {})
    cfg = ExperimentConfig()
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key, value in raw.items():
        if key not in top:
            raise ConfigError(key, "unknown key")
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(key, "expected a mapping")
            section = getattr(cfg, key)
            allowed = {f.name for f in dataclasses.fields(section)}
            for sub, v in value.items():
                if sub not in allowed:
                    raise ConfigError(f"{key}.{sub}", "unknown key")
                setattr(section, sub, v)
        else:
            setattr(cfg, key, value)
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"not valid YAML ({exc})") from exc
    return config_from_dict(raw)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def _require(cond: bool, name: str, msg: str) -> None:
    if not cond:
        raise ConfigError(name, msg)


def validate(cfg: ExperimentConfig) -> None:
    g, c, p, b, d = cfg.grid, cfg.channel, cfg.population, cfg.basis, cfg.detector
    for name, v in (("grid.T", g.T), ("grid.F", g.F), ("population.K", p.K), ("population.M", p.M),
                    ("channel.n_sin", c.n_sin), ("detector.epochs", d.epochs), ("trials", cfg.trials),
                    ("basis.train_pairs", b.train_pairs), ("basis.eval_pairs", b.eval_pairs),
                    ("basis.max_order", b.max_order), ("workers", cfg.workers)):
        _require(isinstance(v, int) and not isinstance(v, bool) and v >= 1, name, "must be an integer >= 1")
    _require(isinstance(p.K_act, int) and 0 <= p.K_act <= p.K, "population.K_act", "must lie in [0, K]")
    _require(isinstance(cfg.seed, int) and cfg.seed >= 0, "seed", "must be a non-negative integer")
    _require(p.noise_var > 0, "population.noise_var", "must be positive")
    _require(g.subcarrier_spacing > 0, "grid.subcarrier_spacing", "must be positive")
    _require(c.speed_kmh >= 0, "channel.speed_kmh", "must be non-negative")
    _require(c.carrier_freq > 0, "channel.carrier_freq", "must be positive")
    _require(isinstance(c.lag_min, int) and c.lag_min < 0, "channel.lag_min", "must be a negative integer")
    _require(0 < c.rolloff <= 1, "channel.rolloff", "must lie in (0, 1]")
    _require(c.symbol_time_scale in ("sample", "symbol"), "channel.symbol_time_scale",
             "must be 'sample' or 'symbol'")
    _require(d.constraint in ("nonnegative", "box"), "detector.constraint", "must be 'nonnegative' or 'box'")
    _require(d.root_method in ("bracket", "companion"), "detector.root_method",
             "must be 'bracket' or 'companion'")
    _require(d.d_max_factor > 0, "detector.d_max_factor", "must be positive")
    if not p.power_control:
        beta = np.asarray(p.beta, dtype=float)
        _require(beta.ndim == 0 or beta.shape == (p.K,), "population.beta", "scalar or one value per user")
        _require(bool(np.all(beta > 0)), "population.beta", "must be positive")
    _require(isinstance(b.models, list) and len(b.models) > 0, "basis.models", "non-empty list")
    L = g.T * g.F
    for name, time_aware, order in (parse_model(s) for s in b.models):
        if name == "pca":
            _require(order <= L, "basis.models", f"PCA order {order} exceeds L={L}")
        if name == "bwl":
            sizes = [("F", g.F)] + ([("T", g.T)] if time_aware else [])
            for lbl, n in sizes:
                _require(n % 2 == 0 and n >= 4, "basis.models", f"BWL needs even {lbl} >= 4")
    _require(b.max_order <= L, "basis.max_order", f"must not exceed L={L}")
    try:
        resolve_pdp(c.pdp)
    except (ValueError, OSError) as exc:
        raise ConfigError("channel.pdp", str(exc)) from exc


def estimate_resources(cfg: ExperimentConfig) -> dict:
    """Rough per-run sizes for a configuration, without running anything."""
    L = cfg.grid.T * cfg.grid.F
    p = cfg.population
    n_models = len(cfg.basis.models)
    max_n = max(o or 5 for _, _, o in cfg.model_specs())
    updates = cfg.trials * n_models * cfg.detector.epochs * p.K
    return {
        "L": L,
        "channel_pairs_per_trial": p.K_act * p.M,
        "received_bytes_per_trial": L * p.M * 16,
        "covariance_bytes": L * L * 16,
        "coordinate_updates": updates,
        "approx_flops": float(updates) * 4 * L * L * max_n,
    }


# random streams, all derived from the master seed

def _stream(seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=key)


PILOTS, TRAIN, CHANNELS, ACTIVITY, NOISE, ORDER = range(6)


def generate_pilots(K: int, L: int, seed) -> np.ndarray:
    """L x K pilot matrix with i.i.d. CN(0, 1) entries, columns scaled to norm^2 = L."""
    if K < 1 or L < 1:
        raise ValueError("K and L must be positive")
    rng = np.random.default_rng(seed)
    phi = (rng.standard_normal((L, K)) + 1j * rng.standard_normal((L, K))) / math.sqrt(2)
    return phi * (math.sqrt(L) / np.linalg.norm(phi, axis=0))


def generate_activity(K: int, K_act: int, seed) -> np.ndarray:
    if not 0 <= K_act <= K:
        raise ValueError("K_act must lie in [0, K]")
    rng = np.random.default_rng(seed)
    a = np.zeros(K, dtype=int)
    a[rng.choice(K, size=K_act, replace=False)] = 1
    return a


def synthesize_received(channels, pilots, a, beta, noise_var: float, seed, users=None):
    """Received pilots ``y_m`` (as an L x M matrix) and their sample covariance.

    ``channels`` holds one slice per user; when ``users`` is given it holds
    only those users (in that order) and all other users are taken as silent.
    """
    h = channels.coefficients if isinstance(channels, ChannelTensor) else np.asarray(channels)
    L, _, M = h.shape
    a = np.asarray(a)
    beta = np.broadcast_to(np.asarray(beta, dtype=float), a.shape)
    idx = np.arange(a.size) if users is None else np.asarray(users, dtype=int)
    amp = a[idx] * np.sqrt(beta[idx])
    Y = np.einsum("lkm,lk->lm", h, pilots[:, idx] * amp)
    rng = np.random.default_rng(seed)
    if noise_var > 0:
        Y = Y + math.sqrt(noise_var / 2) * (rng.standard_normal((L, M)) + 1j * rng.standard_normal((L, M)))
    return Y, det.sample_covariance(Y)


@dataclass
class TrialResult:
    a: np.ndarray
    gamma_hat: np.ndarray
    thresholds: np.ndarray
    p_md: np.ndarray  # NaN when there are no active users
    p_fa: np.ndarray  # NaN when every user is active
    min_total_error: float


def default_thresholds(gamma_hat) -> np.ndarray:
    return np.unique(np.concatenate([[0.0], np.asarray(gamma_hat, dtype=float)]))


def sweep(a, gamma_hat, thresholds):
    a = np.asarray(a).astype(bool)
    g = np.asarray(gamma_hat, dtype=float)
    th = np.asarray(thresholds, dtype=float)
    n_act, n_inact = a.sum(), (~a).sum()
    # sorted scores turn each threshold into a count via binary search
    act = np.sort(g[a])
    inact = np.sort(g[~a])
    misses = np.searchsorted(act, th, side="right")
    false_alarms = n_inact - np.searchsorted(inact, th, side="right")
    p_md = misses / n_act if n_act else np.full(th.shape, np.nan)
    p_fa = false_alarms / n_inact if n_inact else np.full(th.shape, np.nan)
    return misses, false_alarms, p_md, p_fa


def evaluate_metrics(a, gamma_hat, thresholds=None) -> TrialResult:
    a = np.asarray(a)
    if thresholds is None:
        thresholds = default_thresholds(gamma_hat)
    thresholds = np.asarray(thresholds, dtype=float)
    if np.any(np.diff(thresholds) < 0):
        raise ValueError("thresholds must be sorted ascending")
    misses, fas, p_md, p_fa = sweep(a, gamma_hat, thresholds)
    total = (misses + fas) / a.size
    return TrialResult(a, np.asarray(gamma_hat, float), thresholds, p_md, p_fa, float(total.min()))


@dataclass
class ModelCurve:
    label: str
    thresholds: np.ndarray
    p_md: np.ndarray
    p_fa: np.ndarray
    min_errors: np.ndarray  # one entry per trial
    trials: int


@dataclass
class DetectionReport:
    models: dict[str, ModelCurve]
    trial_results: dict[str, list[TrialResult]]
    traces: dict[str, list[det.DetectionDiagnostics]]
    config: ExperimentConfig

    def summary(self) -> dict[str, tuple[float, float]]:
        out = {}
        for label, m in self.models.items():
            std = float(m.min_errors.std(ddof=1)) if m.trials > 1 else 0.0
            out[label] = (float(m.min_errors.mean()), std)
        return out

    def paired_difference(self, worse: str, better: str) -> tuple[float, float]:
        """Mean and standard error of the per-trial error difference ``worse - better``."""
        diff = self.models[worse].min_errors - self.models[better].min_errors
        se = float(diff.std(ddof=1) / math.sqrt(diff.size)) if diff.size > 1 else 0.0
        return float(diff.mean()), se

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "detection.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "threshold", "p_md", "p_fa", "trials"])
            for label, m in self.models.items():
                for th, md, fa in zip(m.thresholds, m.p_md, m.p_fa):
                    w.writerow([label, repr(float(th)), repr(float(md)), repr(float(fa)), m.trials])
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "min_total_error_mean", "min_total_error_std"])
            for label, (mean, std) in self.summary().items():
                w.writerow([label, repr(mean), repr(std)])
        with open(out / "trace.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "trial", "epoch", "update_idx", "user", "d_star", "cost"])
            for label, diags in self.traces.items():
                for t, dg in enumerate(diags):
                    for epoch, idx, user, d, cost in dg.updates:
                        w.writerow([label, t, epoch, idx, user, repr(d), repr(cost)])


def training_channels(cfg: ExperimentConfig) -> ChannelTensor:
    grid, pdp, pulse, dop = cfg.channel_setup()
    seed = cfg.basis.train_seed if cfg.basis.train_seed is not None else _stream(cfg.seed, TRAIN)
    return generate_channels(grid, pdp, pulse, dop, cfg.basis.train_pairs, 1, seed,
                             cfg.channel.symbol_time_scale)


def build_bases(cfg: ExperimentConfig, train: ChannelTensor | None = None) -> dict[str, bm.Basis]:
    grid = cfg.block_grid()
    specs = cfg.model_specs()
    cov = None
    if any(name == "pca" for name, _, _ in specs):
        cov = bm.sample_covariance(train if train is not None else training_channels(cfg))
    return {model_label(*s): bm.build_basis(s[0], grid, s[2], cov, s[1]) for s in specs}


def pilots_for_trial(cfg: ExperimentConfig, trial: int) -> np.ndarray:
    L = cfg.grid.T * cfg.grid.F
    key = (PILOTS, trial) if cfg.redraw_pilots else (PILOTS,)
    return generate_pilots(cfg.population.K, L, _stream(cfg.seed, *key))


def run_trial(cfg: ExperimentConfig, trial: int, bases: dict[str, bm.Basis] | None = None):
    """One paired trial: every model sees the same channels, pilots, activity and noise."""
    grid, pdp, pulse, dop = cfg.channel_setup()
    p = cfg.population
    pilots = pilots_for_trial(cfg, trial)
    a = generate_activity(p.K, p.K_act, _stream(cfg.seed, ACTIVITY, trial))
    beta = cfg.beta_vector()
    active = np.flatnonzero(a)
    chan_seed = _stream(cfg.seed, CHANNELS, trial)
    H = generate_channels(grid, pdp, pulse, dop, p.K, p.M, chan_seed,
                          cfg.channel.symbol_time_scale, users=active)
    _, sigma_hat = synthesize_received(H, pilots, a, beta, p.noise_var,
                                       _stream(cfg.seed, NOISE, trial), users=active)
    if cfg.basis.on_sample:
        # train on this trial's channels of every user
        full = generate_channels(grid, pdp, pulse, dop, p.K, p.M, chan_seed,
                                 cfg.channel.symbol_time_scale)
        bases = build_bases(cfg, full)
    upper = beta if cfg.detector.constraint == "box" else None
    results, traces = {}, {}
    for label, basis in bases.items():
        eff = det.effective_pilots(pilots, basis)
        gamma_hat, diag = det.run_detection(
            sigma_hat, eff, p.noise_var, epochs=cfg.detector.epochs, upper=upper,
            seed=_stream(cfg.seed, ORDER, trial), d_max_factor=cfg.detector.d_max_factor,
            method=cfg.detector.root_method)
        results[label] = evaluate_metrics(a, gamma_hat)
        traces[label] = diag
    return results, traces


def _run_trial_star(args):
    return run_trial(*args)


def aggregate(trials: list[tuple[dict, dict]], cfg: ExperimentConfig) -> DetectionReport:
    labels = list(trials[0][0])
    models, per_model, traces = {}, {}, {}
    for label in labels:
        res = [t[0][label] for t in trials]
        per_model[label] = res
        traces[label] = [t[1][label] for t in trials]
        grid = np.unique(np.concatenate([r.thresholds for r in res]))
        curves = [sweep(r.a, r.gamma_hat, grid) for r in res]
        with np.errstate(invalid="ignore"):
            p_md = np.mean([c[2] for c in curves], axis=0)
            p_fa = np.mean([c[3] for c in curves], axis=0)
        models[label] = ModelCurve(label, grid, p_md, p_fa,
                                   np.array([r.min_total_error for r in res]), len(res))
    return DetectionReport(models, per_model, traces, cfg)


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> DetectionReport:
    validate(cfg)
    bases = None if cfg.basis.on_sample else build_bases(cfg)
    jobs = [(cfg, t, bases) for t in range(cfg.trials)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            trials = list(pool.map(_run_trial_star, jobs))
    else:
        trials = [run_trial(*j) for j in jobs]
    report = aggregate(trials, cfg)
    if out_dir is not None:
        report.write(out_dir)
    return report


def kappa_reports(cfg: ExperimentConfig, orders=None) -> list[bm.ApproxReport]:
    """Approximation accuracy of every configured model on a fresh evaluation tensor.

    With ``orders`` the PCA basis is swept over those orders instead of the
    configured ones.
    """
    grid, pdp, pulse, dop = cfg.channel_setup()
    ev = generate_channels(grid, pdp, pulse, dop, cfg.basis.eval_pairs, 1,
                           _stream(cfg.seed, CHANNELS, 10**6), cfg.channel.symbol_time_scale)
    train = ev if cfg.basis.on_sample else training_channels(cfg)
    cov = bm.sample_covariance(train)
    reports = []
    for name, time_aware, order in cfg.model_specs():
        if name == "pca" and orders is not None:
            continue
        b = bm.build_basis(name, grid, order, cov, time_aware)
        reports.append(bm.approx_error_kappa(ev, b))
    if orders is not None:
        reports.extend(bm.kappa_curve(ev, cov, orders))
    return reports
