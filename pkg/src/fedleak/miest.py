"""Mutual-information estimation between batched inputs and gradients.

The estimate is the Donsker-Varadhan lower bound on the KL divergence
between the joint law of (X_B, G) and the product of its marginals,

    V = E_joint[T] - log E_marginal[e^T],

maximized over a statistic network T.  Two network shapes are provided:

* flat: one MLP over the concatenation of the flattened batch and the
  gradient.  Its input width grows linearly with the batch size, which is
  what makes it fragile in high dimension.
* hierarchical: a shared BlockModel embeds each (x_j, G) pair into a short
  vector h_j; a MixModel maps the concatenated embeddings (plus G) to the
  scalar score.  The shared block keeps the input layer B times smaller
  on the data side.

Training follows the sampled objective: per iteration draw S batch pairs,
compute their gradients at the fixed probe parameters, score the joint
pairs (X_B, G) and the mismatched pairs (X_B, G_hat), and ascend

    V = (1/S) sum_k v_k - log((1/S) sum_k e^{v_hat_k})

with Adam.  The log-mean-exp is always evaluated with max subtraction so
score outliers cannot overflow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .dataio import Dataset, gaussian_mi_nats, gaussian_pairs
from .errors import ContractError, EstimationError, NumericError
from .fedsim import TaskModel
from .ndcore import AdamState, Mlp, Tensor, adam_step

BLOCK_WIDTHS = (200, 200)
EMBED_DIM = 5
MIX_HIDDEN = 500
FLAT_WIDTHS = (200, 200)


def logmeanexp(values: np.ndarray) -> float:
    """log of the mean of exp(values), stabilized by max subtraction."""
    values = np.asarray(values, dtype=np.float64).ravel()
    c = values.max()
    if not np.isfinite(c):
        return float(c)
    return float(c + np.log(np.mean(np.exp(values - c))))


def dv_lower_bound(joint_scores, marginal_scores) -> float:
    """mean(joint) - logmeanexp(marginal), in nats."""
    joint = np.asarray(joint_scores, dtype=np.float64).ravel()
    marginal = np.asarray(marginal_scores, dtype=np.float64).ravel()
    if joint.size < 2 or marginal.size != joint.size:
        raise ContractError(
            f"need two equally sized score lists of length >= 2, got {joint.size} and {marginal.size}")
    if not (np.all(np.isfinite(joint)) and np.all(np.isfinite(marginal))):
        raise NumericError("non-finite statistic scores")
    return float(joint.mean() - logmeanexp(marginal))


# -- pair sources -----------------------------------------------------------

class GradientPairSource:
    """Draws (X_B blocks, G) pairs from a task model at fixed parameters.

    The probe parameters are copied at construction: one estimation run
    examines a single communication round.  Labels ride along with the
    features in each block by default, since the gradient depends on them.
    """

    def __init__(self, model: TaskModel, dataset: Dataset, batch_size: int,
                 noise_sigma: float = 0.0, include_labels: bool = True,
                 params: np.ndarray | None = None):
        if batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {batch_size}")
        if noise_sigma < 0:
            raise ContractError("noise_sigma must be >= 0")
        self.model = model
        self.dataset = dataset
        self.batch_size = batch_size
        self.noise_sigma = noise_sigma
        self.include_labels = include_labels
        self.params = (model.params if params is None else np.asarray(params,
                                                                      dtype=np.float64)).copy()
        self.block_dim = dataset.dim + (1 if include_labels else 0)
        self.g_dim = model.n_params

    def draw(self, rng: np.random.Generator, count: int):
        """(blocks, grads): blocks (count, B, block_dim), grads (count, g_dim)."""
        idx = rng.integers(0, self.dataset.n, size=(count, self.batch_size))
        feats = self.dataset.features[idx]
        labels = self.dataset.labels[idx]
        grads = self.model.batch_gradient_matrix(feats, labels.astype(np.float64),
                                                 params=self.params)
        if self.noise_sigma > 0:
            grads = grads + rng.normal(0.0, self.noise_sigma, size=grads.shape)
        if self.include_labels:
            blocks = np.concatenate([feats, labels[:, :, None].astype(np.float64)], axis=2)
        else:
            blocks = feats
        return blocks, grads

    def draw_flat_pairs(self, rng: np.random.Generator, count: int):
        """Flattened (X, G) draws for the covariance baseline (features only)."""
        idx = rng.integers(0, self.dataset.n, size=(count, self.batch_size))
        feats = self.dataset.features[idx]
        labels = self.dataset.labels[idx]
        grads = self.model.batch_gradient_matrix(feats, labels.astype(np.float64),
                                                 params=self.params)
        if self.noise_sigma > 0:
            grads = grads + rng.normal(0.0, self.noise_sigma, size=grads.shape)
        return feats.reshape(count, -1), grads


class GaussianPairSource:
    """Synthetic oracle: coordinatewise bivariate-normal pairs with known MI."""

    def __init__(self, dim: int, rho: float):
        if dim < 1:
            raise ContractError(f"dim must be >= 1, got {dim}")
        if not abs(rho) < 1.0:
            raise ContractError(f"|rho| must be < 1, got {rho}")
        self.dim = dim
        self.rho = rho
        self.batch_size = 1
        self.block_dim = dim
        self.g_dim = dim

    @property
    def analytic_mi(self) -> float:
        return gaussian_mi_nats(self.dim, self.rho)

    def draw(self, rng: np.random.Generator, count: int):
        x, g = gaussian_pairs(self.dim, self.rho, count, rng)
        return x[:, None, :], g

    def draw_flat_pairs(self, rng: np.random.Generator, count: int):
        x, g = gaussian_pairs(self.dim, self.rho, count, rng)
        return x, g


# -- statistic networks -------------------------------------------------------

class HierarchicalStatNet:
    """Shared BlockModel over (x_j, G) pairs plus a MixModel head."""

    variant = "hierarchical"

    def __init__(self, block_dim: int, g_dim: int, batch_size: int,
                 rng: np.random.Generator, mix_gets_gradient: bool = True):
        self.block_dim = block_dim
        self.g_dim = g_dim
        self.batch_size = batch_size
        self.mix_gets_gradient = mix_gets_gradient
        self.block_model = Mlp([block_dim + g_dim, *BLOCK_WIDTHS, EMBED_DIM], rng)
        mix_in = batch_size * EMBED_DIM + (g_dim if mix_gets_gradient else 0)
        self.mix_model = Mlp([mix_in, MIX_HIDDEN, 1], rng)

    def parameters(self) -> list[Tensor]:
        return self.block_model.parameters() + self.mix_model.parameters()

    @property
    def param_count(self) -> int:
        return self.block_model.param_count + self.mix_model.param_count

    @property
    def data_input_weight_count(self) -> int:
        """Input-layer weights wired to data columns (excludes the G columns)."""
        return self.block_dim * self.block_model.layer_dims[1]

    def block_embed(self, x_blocks, gradient) -> Tensor:
        """Embed one or more (x_j, G) blocks; rows share the same G."""
        x_blocks = np.atleast_2d(np.asarray(x_blocks, dtype=np.float64))
        gradient = np.asarray(gradient, dtype=np.float64).ravel()
        if x_blocks.shape[1] != self.block_dim or gradient.shape[0] != self.g_dim:
            raise ContractError(
                f"block inputs {x_blocks.shape} + gradient {gradient.shape} do not match "
                f"(block_dim={self.block_dim}, g_dim={self.g_dim})")
        tiled = np.broadcast_to(gradient, (x_blocks.shape[0], self.g_dim))
        return self.block_model(nd.const(np.concatenate([x_blocks, tiled], axis=1)))

    def mix_score(self, embeddings, gradient) -> Tensor:
        """Scalar score from B embeddings (and the gradient, when wired in)."""
        emb = embeddings if isinstance(embeddings, Tensor) else nd.const(
            np.asarray(embeddings, dtype=np.float64))
        if emb.data.shape != (self.batch_size, EMBED_DIM):
            raise ContractError(
                f"expected {self.batch_size} embeddings of dim {EMBED_DIM}, got {emb.data.shape}")
        flat = nd.reshape(emb, (1, -1))
        if self.mix_gets_gradient:
            g_row = np.asarray(gradient, dtype=np.float64).reshape(1, self.g_dim)
            flat = nd.concat([flat, nd.const(g_row)], axis=1)
        return nd.reshape(self.mix_model(flat), ())

    def score(self, blocks, gradient) -> Tensor:
        """T(X_B, G) for a single batch."""
        return self.mix_score(self.block_embed(blocks, gradient), gradient)

    def scores(self, blocks: np.ndarray, grads: np.ndarray) -> Tensor:
        """Vectorized scores for `count` batches: (count, B, bd), (count, gd) -> (count, 1)."""
        count = blocks.shape[0]
        if blocks.shape[1] != self.batch_size:
            raise ContractError(f"expected batches of size {self.batch_size}, got {blocks.shape[1]}")
        block_in = np.concatenate(
            [blocks.reshape(count * self.batch_size, self.block_dim),
             np.repeat(grads, self.batch_size, axis=0)], axis=1)
        h = self.block_model(nd.const(block_in))
        mix_in = nd.reshape(h, (count, self.batch_size * EMBED_DIM))
        if self.mix_gets_gradient:
            mix_in = nd.concat([mix_in, nd.const(grads)], axis=1)
        return self.mix_model(mix_in)


class FlatStatNet:
    """Conventional statistic network: one MLP over concat(X_B, G)."""

    variant = "flat"

    def __init__(self, block_dim: int, g_dim: int, batch_size: int,
                 rng: np.random.Generator):
        self.block_dim = block_dim
        self.g_dim = g_dim
        self.batch_size = batch_size
        self.mlp = Mlp([batch_size * block_dim + g_dim, *FLAT_WIDTHS, 1], rng)

    def parameters(self) -> list[Tensor]:
        return self.mlp.parameters()

    @property
    def param_count(self) -> int:
        return self.mlp.param_count

    @property
    def data_input_weight_count(self) -> int:
        return self.batch_size * self.block_dim * self.mlp.layer_dims[1]

    def score(self, blocks, gradient) -> Tensor:
        blocks = np.asarray(blocks, dtype=np.float64).reshape(1, -1)
        g_row = np.asarray(gradient, dtype=np.float64).reshape(1, self.g_dim)
        return nd.reshape(self.mlp(nd.const(np.concatenate([blocks, g_row], axis=1))), ())

    def scores(self, blocks: np.ndarray, grads: np.ndarray) -> Tensor:
        count = blocks.shape[0]
        if blocks.shape[1] != self.batch_size:
            raise ContractError(f"expected batches of size {self.batch_size}, got {blocks.shape[1]}")
        inputs = np.concatenate([blocks.reshape(count, -1), grads], axis=1)
        return self.mlp(nd.const(inputs))


def build_statnet(variant: str, source, rng: np.random.Generator,
                  mix_gets_gradient: bool = True):
    if variant == "hierarchical":
        return HierarchicalStatNet(source.block_dim, source.g_dim, source.batch_size,
                                   rng, mix_gets_gradient=mix_gets_gradient)
    if variant == "flat":
        return FlatStatNet(source.block_dim, source.g_dim, source.batch_size, rng)
    raise ContractError(f"unknown statistic network variant {variant!r}")


# -- estimator ---------------------------------------------------------------

@dataclass
class EstimatorConfig:
    sample_size: int = 64          # S: batch pairs scored per iteration
    max_iters: int = 20000
    min_iters: int = 2000
    window: int = 500
    tolerance: float = 0.05        # std of the smoothed trace over the window
    smoothing: float = 0.99        # EMA factor for the reported trace
    lr: float = 5e-5
    seed: int = 0
    include_labels: bool = True
    mix_gets_gradient: bool = True
    ema_correction: bool = False   # moving-average correction of the exp-term gradient
    correction_decay: float = 0.99
    nan_limit: int = 50

    def __post_init__(self):
        if self.sample_size < 2:
            raise ContractError("sample_size must be >= 2 for a meaningful marginal mean")
        if self.window < 2 or self.min_iters < self.window:
            raise ContractError("need min_iters >= window >= 2")
        if not 0.0 <= self.smoothing < 1.0:
            raise ContractError("smoothing must be in [0, 1)")


@dataclass
class MITrace:
    """Per-iteration DV values with convergence diagnostics."""
    values: np.ndarray
    smoothed: np.ndarray
    converged: bool
    final_estimate: float | None
    iterations: int
    nan_count: int
    max_abs_value: float
    window: int
    tolerance: float
    variant: str = "hierarchical"

    @property
    def last_window_mean(self) -> float:
        """Mean of the trailing window of the smoothed trace (NaN-safe)."""
        tail = self.smoothed[-self.window:]
        tail = tail[np.isfinite(tail)]
        return float(tail.mean()) if tail.size else float("nan")

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("iteration,v_raw,v_smoothed\n")
            for i, (v, s) in enumerate(zip(self.values, self.smoothed)):
                fh.write(f"{i},{v!r},{s!r}\n")
            est = "" if self.final_estimate is None else repr(self.final_estimate)
            fh.write(f"# converged={str(self.converged).lower()},final_estimate_nats={est}\n")

    @staticmethod
    def read_csv(path) -> "MITrace":
        values, smoothed = [], []
        converged, final = False, None
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != "iteration,v_raw,v_smoothed":
                raise ContractError(f"unrecognized trace header {header!r}")
            for line in fh:
                line = line.strip()
                if line.startswith("#"):
                    fields = dict(part.split("=", 1) for part in line[1:].strip().split(","))
                    converged = fields.get("converged") == "true"
                    raw = fields.get("final_estimate_nats", "")
                    final = float(raw) if raw else None
                elif line:
                    _, v, s = line.split(",")
                    values.append(float(v))
                    smoothed.append(float(s))
        values = np.array(values)
        smoothed = np.array(smoothed)
        finite = values[np.isfinite(values)]
        return MITrace(values=values, smoothed=smoothed, converged=converged,
                       final_estimate=final, iterations=len(values),
                       nan_count=int(np.sum(~np.isfinite(values))),
                       max_abs_value=float(np.abs(finite).max()) if finite.size else float("nan"),
                       window=0, tolerance=float("nan"))


def check_convergence(smoothed, window: int, tolerance: float):
    """(converged, estimate): std over the trailing window below tolerance.

    Any non-finite entry inside the window blocks convergence.  The
    estimate is the window mean once converged, else None.
    """
    smoothed = np.asarray(smoothed, dtype=np.float64)
    if smoothed.size < window:
        raise ContractError(f"trace length {smoothed.size} < window {window}")
    tail = smoothed[-window:]
    if not np.all(np.isfinite(tail)):
        return False, None
    if float(tail.std()) >= tolerance:
        return False, None
    return True, float(tail.mean())


def estimate_mi(source, config: EstimatorConfig, variant: str = "hierarchical") -> MITrace:
    """Train a statistic network against `source` and return its MI trace.

    Per iteration: draw S (X_B, G) pairs and S independent (X_hat, G_hat)
    pairs, score the joint pairs and the (X_B, G_hat) mismatches, evaluate
    the lower bound, and take one ascending Adam step.  Stops once the
    smoothed trace is flat to `tolerance` over `window` iterations (after
    `min_iters`), or at `max_iters` with converged=False.
    """
    init_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 11]))
    draw_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 12]))
    statnet = build_statnet(variant, source, init_rng,
                            mix_gets_gradient=config.mix_gets_gradient)
    params = statnet.parameters()
    adam = AdamState.for_params(params, lr=config.lr)

    values: list[float] = []
    smoothed: list[float] = []
    ema = None
    log_ma = None
    nan_count = 0
    nan_run = 0
    max_abs = 0.0
    converged = False
    estimate = None

    for _ in range(config.max_iters):
        blocks, grads = source.draw(draw_rng, config.sample_size)
        blocks_hat, grads_hat = source.draw(draw_rng, config.sample_size)
        joint = statnet.scores(blocks, grads)
        marginal = statnet.scores(blocks, grads_hat)

        j_data = joint.data.ravel()
        m_data = marginal.data.ravel()
        finite = np.all(np.isfinite(j_data)) and np.all(np.isfinite(m_data))
        v = float(j_data.mean() - logmeanexp(m_data)) if finite else float("nan")
        if not np.isfinite(v):
            finite = False

        if not finite:
            nan_count += 1
            nan_run += 1
            values.append(float("nan"))
            smoothed.append(float("nan"))
            if nan_run > config.nan_limit:
                raise EstimationError(
                    f"persistent non-finite bound: {nan_count} bad iterations "
                    f"(last {nan_run} consecutive) after {len(values)} steps")
            continue
        nan_run = 0
        max_abs = max(max_abs, abs(v))

        term1 = nd.tmean(joint)
        shift = float(m_data.max())
        mean_exp = nd.tmean(nd.exp(nd.sub(marginal, shift)))
        if config.ema_correction:
            lme = logmeanexp(m_data)
            if log_ma is None:
                log_ma = lme
            else:
                log_ma = float(np.logaddexp(np.log(config.correction_decay) + log_ma,
                                            np.log1p(-config.correction_decay) + lme))
            # gradient-only surrogate: mean(e^{v_hat}) / moving-average denominator
            objective = nd.sub(term1, nd.mul(mean_exp, float(np.exp(shift - log_ma))))
        else:
            objective = nd.sub(term1, nd.add(nd.log(mean_exp), shift))

        grads_phi = nd.gradients(objective, params)
        new_params = adam_step(adam, [p.data for p in params], grads_phi, maximize=True)
        for p, fresh in zip(params, new_params):
            p.data = fresh

        values.append(v)
        ema = v if ema is None else config.smoothing * ema + (1.0 - config.smoothing) * v
        smoothed.append(ema)

        if len(values) >= config.min_iters:
            converged, estimate = check_convergence(smoothed, config.window, config.tolerance)
            if converged:
                break

    return MITrace(values=np.array(values), smoothed=np.array(smoothed),
                   converged=converged, final_estimate=estimate,
                   iterations=len(values), nan_count=nan_count,
                   max_abs_value=max_abs, window=config.window,
                   tolerance=config.tolerance, variant=variant)


def estimate_mi_for_model(model: TaskModel, dataset: Dataset, batch_size: int,
                          config: EstimatorConfig, variant: str = "hierarchical",
                          params: np.ndarray | None = None,
                          noise_sigma: float = 0.0) -> MITrace:
    """Estimate I(X_B; G) for a task model at fixed probe parameters."""
    source = GradientPairSource(model, dataset, batch_size, noise_sigma=noise_sigma,
                                include_labels=config.include_labels, params=params)
    return estimate_mi(source, config, variant=variant)


# -- covariance baseline -------------------------------------------------------

def covariance_metric(batches, gradients) -> float:
    """Sum of all entries of the cross-covariance matrix of (X, G) draws.

    `batches` is (m, ...) and is flattened per draw; `gradients` is (m, g).
    Sample covariance with the n-1 denominator; needs at least two draws.
    """
    x = np.asarray(batches, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    g = np.asarray(gradients, dtype=np.float64)
    g = g.reshape(g.shape[0], -1)
    if x.shape[0] != g.shape[0]:
        raise ContractError(f"paired draws required, got {x.shape[0]} vs {g.shape[0]}")
    if x.shape[0] < 2:
        raise ContractError("need at least 2 paired draws")
    xc = x - x.mean(axis=0)
    gc = g - g.mean(axis=0)
    cross = xc.T @ gc / (x.shape[0] - 1)
    return float(cross.sum())
