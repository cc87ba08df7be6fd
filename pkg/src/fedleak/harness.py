"""Seeded, reproducible experiment runner with CSV outputs.

Four studies are wired end to end on top of the simulator, the estimator
and the attack:

* convergence: hierarchical vs flat statistic network training curves at
  the epoch-1 checkpoint, one trace per (variant, batch size) cell.
* validate-attack: MI estimate, covariance baseline and inversion error
  over a batch-size or gradient-noise grid at the epoch-3 checkpoint.
* factors: MI over training epochs, or over class-imbalance ratios of a
  resampled client dataset.
* prealarm: the client-side gate that estimates MI for the gradient it is
  about to publish and withholds when the estimate crosses a threshold.

Every grid point derives its own seed from (master seed, config hash,
axis value), so points can run in any order, in processes or serially,
and reruns reproduce the same numbers.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .attack import AttackConfig, run_attack
from .dataio import (Dataset, generate_adult_like_rows, load_adult, parse_adult_rows,
                     preprocess, resample_imbalance, sample_batch)
from .errors import AttackError, ConfigError, ContractError, EstimationError
from .fedsim import (FedConfig, TaskModel, add_gradient_noise, compute_gradient,
                     make_task_model, run_fedsgd)
from .miest import (EstimatorConfig, GaussianPairSource, GradientPairSource, MITrace,
                    covariance_metric, estimate_mi)

EXPERIMENTS = ("convergence", "validate-attack", "factors", "estimate", "prealarm")
DEFAULT_GRIDS = {
    "batch_size": (1, 2, 3, 4),
    "noise": (0.0, 0.01, 0.05, 0.1),
    "epoch": (1, 3, 5, 10),
    "imbalance": (0.5, 0.7, 0.9),
}
GRID_CSV_HEADER = "axis_value,mi_nats,cov_baseline,epsilon,converged"


@dataclass
class DataConfig:
    adult_path: str | None = None
    synthetic_rows: int = 32561
    synthetic_positive: int = 7841
    synthetic_seed: int = 20260613


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int = 0
    out_dir: str | None = None
    task_model: str = "logreg"       # "logreg" or "mlp"
    eta: float = 0.1
    batch_size: int = 3
    epoch: int = 3
    noise_sigma: float = 0.0
    axis: str = "batch_size"
    grid: tuple = ()
    variants: tuple[str, ...] = ("hierarchical", "flat")
    imbalance_size: int = 10000
    cov_draws: int = 256
    threshold: float | None = None
    workers: int = 1
    gaussian_dim: int | None = None
    gaussian_rho: float | None = None
    data: DataConfig = field(default_factory=DataConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        nested = {"data": DataConfig, "estimator": EstimatorConfig, "attack": AttackConfig}
        kwargs = {}
        for name, sub_cls in nested.items():
            if name in raw:
                sub_raw = raw.pop(name)
                allowed = {f.name for f in fields(sub_cls)}
                unknown = set(sub_raw) - allowed
                if unknown:
                    raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
                try:
                    kwargs[name] = sub_cls(**sub_raw)
                except ContractError as exc:
                    raise ConfigError(f"bad {name} config: {exc}") from None
        allowed = {f.name for f in fields(cls)}
        unknown = set(raw) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("grid", "variants"):
            if key in raw and raw[key] is not None:
                raw[key] = tuple(raw[key])
        cfg = cls(**raw, **kwargs)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; "
                              f"expected one of {EXPERIMENTS}")
        if self.task_model not in ("logreg", "mlp"):
            raise ConfigError(f"unknown task model {self.task_model!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.batch_size < 1 or self.epoch < 1:
            raise ConfigError("batch_size and epoch must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.experiment == "convergence":
            if not self.variants:
                raise ConfigError("convergence needs a non-empty variant list")
            bad = set(self.variants) - {"hierarchical", "flat"}
            if bad:
                raise ConfigError(f"unknown statistic network variants: {sorted(bad)}")
            if not self.grid:
                self.grid = (1, 3)
            if any(int(b) < 1 for b in self.grid):
                raise ConfigError("convergence batch grid must be >= 1 everywhere")
        elif self.experiment == "validate-attack":
            if self.axis not in ("batch_size", "noise"):
                raise ConfigError(f"validate-attack axis must be batch_size or noise, "
                                  f"got {self.axis!r}")
            if not self.grid:
                self.grid = DEFAULT_GRIDS[self.axis]
            if self.axis == "batch_size" and any(int(b) < 1 for b in self.grid):
                raise ConfigError("batch grid must be >= 1 everywhere")
            if self.axis == "noise" and any(s < 0 for s in self.grid):
                raise ConfigError("noise grid must be >= 0 everywhere")
        elif self.experiment == "factors":
            if self.axis not in ("epoch", "imbalance"):
                raise ConfigError(f"factors axis must be epoch or imbalance, got {self.axis!r}")
            if not self.grid:
                self.grid = DEFAULT_GRIDS[self.axis]
            if self.axis == "epoch" and any(int(e) < 1 for e in self.grid):
                raise ConfigError("epoch grid must be >= 1 everywhere")
            if self.axis == "imbalance" and any(not 0 < r < 1 for r in self.grid):
                raise ConfigError("imbalance ratios must lie in (0, 1)")
        elif self.experiment == "prealarm":
            if self.threshold is None:
                raise ConfigError("prealarm requires a threshold (nats)")
            if self.threshold < 0:
                raise ConfigError("threshold must be >= 0")
        if (self.gaussian_dim is None) != (self.gaussian_rho is None):
            raise ConfigError("gaussian_dim and gaussian_rho must be given together")


def config_hash(cfg: ExperimentConfig) -> str:
    """Stable 16-hex-digit digest of the full configuration."""
    blob = json.dumps(asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def derive_seed(*parts) -> int:
    """Deterministic 128-bit seed from arbitrary labelled parts."""
    blob = "|".join(repr(p) for p in parts)
    return int.from_bytes(hashlib.sha256(blob.encode()).digest()[:16], "big")


@dataclass
class RunRecord:
    config_hash: str
    axis_value: float
    mi_nats: float
    cov_baseline: float
    epsilon: float | None
    converged: bool
    wall_time: float


def write_grid_csv(path, records: list[RunRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(GRID_CSV_HEADER + "\n")
        for r in records:
            eps = "" if r.epsilon is None or not np.isfinite(r.epsilon) else repr(r.epsilon)
            fh.write(f"{r.axis_value!r},{r.mi_nats!r},{r.cov_baseline!r},{eps},"
                     f"{str(r.converged).lower()}\n")


def read_grid_csv(path) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != GRID_CSV_HEADER:
            raise ContractError(f"unrecognized grid header {header!r}")
        for line in fh:
            a, mi, cov, eps, conv = line.strip().split(",")
            rows.append({"axis_value": float(a), "mi_nats": float(mi),
                         "cov_baseline": float(cov),
                         "epsilon": float(eps) if eps else None,
                         "converged": conv == "true"})
    return rows


# -- shared context ----------------------------------------------------------

_DATASET_CACHE: dict[tuple, Dataset] = {}


def load_dataset(data: DataConfig) -> Dataset:
    """Dataset from the configured Adult file, or a generated stand-in."""
    key = (data.adult_path, data.synthetic_rows, data.synthetic_positive,
           data.synthetic_seed)
    if key not in _DATASET_CACHE:
        if data.adult_path:
            raw = load_adult(data.adult_path)
        else:
            rows = generate_adult_like_rows(data.synthetic_rows, data.synthetic_positive,
                                            data.synthetic_seed)
            raw = parse_adult_rows(rows)
        _DATASET_CACHE[key] = preprocess(raw)
    return _DATASET_CACHE[key]


def _make_model(cfg: ExperimentConfig, dataset: Dataset) -> TaskModel:
    return make_task_model(cfg.task_model, input_dim=dataset.dim,
                           seed=derive_seed("model-init", cfg.seed))


def train_checkpoints(cfg: ExperimentConfig, dataset: Dataset, batch_size: int,
                      epochs: tuple[int, ...]) -> tuple[TaskModel, dict[int, np.ndarray]]:
    """Train FedSGD (one client) and return probe parameters per epoch."""
    model = _make_model(cfg, dataset)
    fed = FedConfig(batch_size=batch_size, epochs=max(epochs), eta=cfg.eta,
                    seed=derive_seed("fed", cfg.seed, batch_size),
                    checkpoint_epochs=tuple(sorted(set(epochs))))
    trajectory = run_fedsgd(model, dataset, fed)
    return model, trajectory.checkpoints


# -- convergence study ---------------------------------------------------------

@dataclass
class ConvergenceCell:
    variant: str
    batch_size: int
    mi_nats: float
    converged: bool
    failed: bool
    wall_time: float
    trace: MITrace | None = None


def _convergence_cell(args) -> ConvergenceCell:
    cfg, dataset, theta, variant, batch_size = args
    model = _make_model(cfg, dataset)
    est_cfg = replace(cfg.estimator,
                      seed=derive_seed(config_hash(cfg), "conv", variant, batch_size))
    source = GradientPairSource(model, dataset, batch_size,
                                include_labels=est_cfg.include_labels, params=theta)
    start = time.perf_counter()
    try:
        trace = estimate_mi(source, est_cfg, variant=variant)
    except EstimationError:
        return ConvergenceCell(variant, batch_size, float("nan"), False, True,
                               time.perf_counter() - start)
    mi = trace.final_estimate if trace.converged else trace.last_window_mean
    return ConvergenceCell(variant, batch_size, mi, trace.converged, False,
                           time.perf_counter() - start, trace=trace)


def run_convergence(cfg: ExperimentConfig) -> list[ConvergenceCell]:
    """One estimator training curve per (variant, batch size) cell at epoch 1."""
    cfg.validate()
    dataset = load_dataset(cfg.data)
    probes = {}
    for b in cfg.grid:
        _, checkpoints = train_checkpoints(cfg, dataset, int(b), (1,))
        probes[int(b)] = checkpoints[1]
    points = [(cfg, dataset, probes[int(b)], variant, int(b))
              for variant in cfg.variants for b in cfg.grid]
    cells = _map_points(_convergence_cell, points, cfg.workers)
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        for cell in cells:
            if cell.trace is not None:
                cell.trace.to_csv(os.path.join(
                    cfg.out_dir, f"trace_{cell.variant}_B{cell.batch_size}.csv"))
        with open(os.path.join(cfg.out_dir, "convergence_summary.csv"), "w",
                  encoding="utf-8") as fh:
            fh.write("variant,batch_size,mi_nats,converged,failed\n")
            for cell in cells:
                fh.write(f"{cell.variant},{cell.batch_size},{cell.mi_nats!r},"
                         f"{str(cell.converged).lower()},{str(cell.failed).lower()}\n")
    return cells


# -- attack validation study ---------------------------------------------------

def _validate_point(args) -> RunRecord:
    cfg, dataset, theta, axis_value = args
    start = time.perf_counter()
    batch_size = int(axis_value) if cfg.axis == "batch_size" else cfg.batch_size
    sigma = float(axis_value) if cfg.axis == "noise" else 0.0
    chash = config_hash(cfg)
    pseed = derive_seed(cfg.seed, chash, cfg.axis, axis_value)
    model = _make_model(cfg, dataset)
    model.params = theta.copy()

    est_cfg = replace(cfg.estimator, seed=derive_seed(pseed, "estimator"))
    source = GradientPairSource(model, dataset, batch_size, noise_sigma=sigma,
                                include_labels=est_cfg.include_labels, params=theta)
    try:
        trace = estimate_mi(source, est_cfg)
        mi = trace.final_estimate if trace.converged else trace.last_window_mean
        converged = trace.converged
    except EstimationError:
        mi, converged = float("nan"), False

    cov_rng = np.random.default_rng(np.random.SeedSequence([derive_seed(pseed, "cov")]))
    xs, gs = source.draw_flat_pairs(cov_rng, cfg.cov_draws)
    cov = covariance_metric(xs, gs)

    target_rng = np.random.default_rng(np.random.SeedSequence([derive_seed(pseed, "target")]))
    batch = sample_batch(dataset, batch_size, target_rng)
    target = compute_gradient(model, batch)
    if sigma > 0:
        target = add_gradient_noise(target, sigma, target_rng)
    att_cfg = replace(cfg.attack, seed=derive_seed(pseed, "attack"))
    try:
        report = run_attack(model, target, batch_size, batch.labels, att_cfg)
        epsilon = report.epsilon
    except AttackError:
        epsilon = None

    return RunRecord(config_hash=chash, axis_value=float(axis_value), mi_nats=mi,
                     cov_baseline=cov, epsilon=epsilon, converged=converged,
                     wall_time=time.perf_counter() - start)


def run_validate_attack(cfg: ExperimentConfig) -> list[RunRecord]:
    """Paired (MI, inversion error, covariance) grid at the epoch-3 probe."""
    cfg.validate()
    dataset = load_dataset(cfg.data)
    if cfg.axis == "batch_size":
        probes = {}
        for b in cfg.grid:
            _, checkpoints = train_checkpoints(cfg, dataset, int(b), (cfg.epoch,))
            probes[int(b)] = checkpoints[cfg.epoch]
        points = [(cfg, dataset, probes[int(b)], float(b)) for b in cfg.grid]
    else:
        _, checkpoints = train_checkpoints(cfg, dataset, cfg.batch_size, (cfg.epoch,))
        theta = checkpoints[cfg.epoch]
        points = [(cfg, dataset, theta, float(s)) for s in cfg.grid]
    records = _map_points(_validate_point, points, cfg.workers)
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        write_grid_csv(os.path.join(cfg.out_dir, f"validate_{cfg.axis}.csv"), records)
    return records


# -- inherent factors study ----------------------------------------------------

def _factors_epoch_point(args) -> RunRecord:
    cfg, dataset, theta, epoch = args
    start = time.perf_counter()
    chash = config_hash(cfg)
    pseed = derive_seed(cfg.seed, chash, "epoch", epoch)
    model = _make_model(cfg, dataset)
    model.params = theta.copy()
    est_cfg = replace(cfg.estimator, seed=derive_seed(pseed, "estimator"))
    source = GradientPairSource(model, dataset, cfg.batch_size,
                                include_labels=est_cfg.include_labels, params=theta)
    try:
        trace = estimate_mi(source, est_cfg)
        mi = trace.final_estimate if trace.converged else trace.last_window_mean
        converged = trace.converged
    except EstimationError:
        mi, converged = float("nan"), False
    cov_rng = np.random.default_rng(np.random.SeedSequence([derive_seed(pseed, "cov")]))
    xs, gs = source.draw_flat_pairs(cov_rng, cfg.cov_draws)
    return RunRecord(config_hash=chash, axis_value=float(epoch), mi_nats=mi,
                     cov_baseline=covariance_metric(xs, gs), epsilon=None,
                     converged=converged, wall_time=time.perf_counter() - start)


def _factors_imbalance_point(args) -> RunRecord:
    cfg, dataset, ratio = args
    start = time.perf_counter()
    chash = config_hash(cfg)
    pseed = derive_seed(cfg.seed, chash, "imbalance", ratio)
    resample_rng = np.random.default_rng(np.random.SeedSequence([derive_seed(pseed, "resample")]))
    client_data = resample_imbalance(dataset, float(ratio), cfg.imbalance_size, resample_rng)
    model = _make_model(cfg, client_data)
    fed = FedConfig(batch_size=cfg.batch_size, epochs=cfg.epoch, eta=cfg.eta,
                    seed=derive_seed(pseed, "fed"), checkpoint_epochs=(cfg.epoch,))
    trajectory = run_fedsgd(model, client_data, fed)
    theta = trajectory.checkpoints[cfg.epoch]
    est_cfg = replace(cfg.estimator, seed=derive_seed(pseed, "estimator"))
    source = GradientPairSource(model, client_data, cfg.batch_size,
                                include_labels=est_cfg.include_labels, params=theta)
    try:
        trace = estimate_mi(source, est_cfg)
        mi = trace.final_estimate if trace.converged else trace.last_window_mean
        converged = trace.converged
    except EstimationError:
        mi, converged = float("nan"), False
    cov_rng = np.random.default_rng(np.random.SeedSequence([derive_seed(pseed, "cov")]))
    xs, gs = source.draw_flat_pairs(cov_rng, cfg.cov_draws)
    return RunRecord(config_hash=chash, axis_value=float(ratio), mi_nats=mi,
                     cov_baseline=covariance_metric(xs, gs), epsilon=None,
                     converged=converged, wall_time=time.perf_counter() - start)


def run_factors(cfg: ExperimentConfig) -> list[RunRecord]:
    """MI versus training epoch, or versus client class-imbalance ratio."""
    cfg.validate()
    dataset = load_dataset(cfg.data)
    if cfg.axis == "epoch":
        epochs = tuple(int(e) for e in cfg.grid)
        _, checkpoints = train_checkpoints(cfg, dataset, cfg.batch_size, epochs)
        missing = [e for e in epochs if e not in checkpoints]
        if missing:
            raise ContractError(f"missing checkpoints for epochs {missing}")
        points = [(cfg, dataset, checkpoints[e], e) for e in epochs]
        records = _map_points(_factors_epoch_point, points, cfg.workers)
    else:
        points = [(cfg, dataset, float(r)) for r in cfg.grid]
        records = _map_points(_factors_imbalance_point, points, cfg.workers)
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        write_grid_csv(os.path.join(cfg.out_dir, f"factors_{cfg.axis}.csv"), records)
    return records


# -- one-shot estimation and the pre-alarm gate ---------------------------------

def build_source(cfg: ExperimentConfig):
    """Pair source described by the config: Gaussian oracle or task model."""
    if cfg.gaussian_dim is not None:
        return GaussianPairSource(cfg.gaussian_dim, cfg.gaussian_rho)
    dataset = load_dataset(cfg.data)
    _, checkpoints = train_checkpoints(cfg, dataset, cfg.batch_size, (cfg.epoch,))
    model = _make_model(cfg, dataset)
    return GradientPairSource(model, dataset, cfg.batch_size,
                              noise_sigma=cfg.noise_sigma,
                              include_labels=cfg.estimator.include_labels,
                              params=checkpoints[cfg.epoch])


def run_estimate(cfg: ExperimentConfig) -> MITrace:
    """Single MI estimation run; writes the trace CSV when out_dir is set."""
    cfg.validate()
    source = build_source(cfg)
    est_cfg = replace(cfg.estimator,
                      seed=derive_seed(cfg.seed, config_hash(cfg), "estimate"))
    trace = estimate_mi(source, est_cfg)
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        trace.to_csv(os.path.join(cfg.out_dir, "trace.csv"))
    return trace


@dataclass
class PrealarmResult:
    decision: str            # "publish" or "withhold"
    mi_nats: float | None
    converged: bool
    reason: str


def risk_prealarm(source, threshold: float, config: EstimatorConfig) -> PrealarmResult:
    """Estimate the leakage risk and gate publication on it.

    Withholds when the clamped-nonnegative estimate reaches the threshold,
    and fails safe: estimator failure or non-convergence also withholds.
    """
    if threshold < 0:
        raise ContractError("threshold must be >= 0 nats")
    try:
        trace = estimate_mi(source, config)
    except EstimationError as exc:
        return PrealarmResult("withhold", None, False, f"estimation failed: {exc}")
    if not trace.converged:
        return PrealarmResult("withhold", trace.last_window_mean, False,
                              "estimator did not converge")
    risk = max(trace.final_estimate, 0.0)
    if risk >= threshold:
        return PrealarmResult("withhold", trace.final_estimate, True,
                              f"estimated risk {risk:.4f} nats >= threshold {threshold:.4f}")
    return PrealarmResult("publish", trace.final_estimate, True,
                          f"estimated risk {risk:.4f} nats < threshold {threshold:.4f}")


def prealarm_for_model(model: TaskModel, dataset: Dataset, batch_size: int,
                       threshold: float, config: EstimatorConfig,
                       params: np.ndarray | None = None) -> PrealarmResult:
    source = GradientPairSource(model, dataset, batch_size,
                                include_labels=config.include_labels, params=params)
    return risk_prealarm(source, threshold, config)


def run_prealarm(cfg: ExperimentConfig) -> PrealarmResult:
    cfg.validate()
    source = build_source(cfg)
    est_cfg = replace(cfg.estimator,
                      seed=derive_seed(cfg.seed, config_hash(cfg), "prealarm"))
    return risk_prealarm(source, cfg.threshold, est_cfg)


# -- execution helper -----------------------------------------------------------

def _map_points(fn, points, workers: int):
    """Run grid points serially or in a process pool; order is preserved."""
    if workers <= 1 or len(points) <= 1:
        return [fn(p) for p in points]
    with ProcessPoolExecutor(max_workers=min(workers, len(points))) as pool:
        return list(pool.map(fn, points))
