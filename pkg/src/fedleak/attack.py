"""Gradient-matching inversion attack used to validate the risk metric.

Given a published gradient G computed at known model parameters, each
restart initializes dummy features from a standard normal and minimizes
||grad(loss(X_hat)) - G||^2 over X_hat with Adam.  The attacker is handed
the true labels, which isolates feature leakage and keeps the inference
error comparable across configurations.  The inference error is the
per-coordinate sample variance of the reconstructions across restarts,
averaged over all coordinates: restarts that keep landing on the same
solution mean the inversion is reliable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .errors import AttackError, ContractError
from .fedsim import GradientVector, TaskModel
from .ndcore import AdamState, adam_step


@dataclass
class AttackConfig:
    restarts: int = 5
    iterations: int = 2000
    lr: float = 0.01
    init_std: float = 1.0
    seed: int = 0
    restart_seeds: tuple[int, ...] | None = None  # override per-restart streams

    def __post_init__(self):
        if self.restarts < 2:
            raise ContractError("need >= 2 restarts: the inference error is a variance")
        if self.iterations < 0:
            raise ContractError("iterations must be >= 0")
        if self.restart_seeds is not None and len(self.restart_seeds) != self.restarts:
            raise ContractError("restart_seeds must list one seed per restart")


@dataclass
class AttackReport:
    reconstructions: np.ndarray   # (K, B, d); NaN rows for aborted restarts
    losses: np.ndarray            # (K,) final gradient-matching loss
    aborted: np.ndarray           # (K,) bool
    epsilon: float
    config: AttackConfig


def inference_error(reconstructions) -> float:
    """Mean over coordinates of the across-restart sample variance (n-1)."""
    recons = np.asarray(reconstructions, dtype=np.float64)
    if recons.ndim < 2 or recons.shape[0] < 2:
        raise ContractError("need >= 2 reconstructions of identical shape")
    return float(recons.var(axis=0, ddof=1).mean())


def _matching_loss(model: TaskModel, x: np.ndarray, labels: np.ndarray,
                   target: np.ndarray) -> float:
    g = model.batch_gradient_matrix(x[None, :, :], labels[None, :].astype(np.float64))[0]
    return float(np.sum((g - target) ** 2))


def run_attack(model: TaskModel, target_gradient, batch_size: int, labels,
               config: AttackConfig) -> AttackReport:
    """Reconstruct the batch behind `target_gradient` over several restarts.

    Returns one reconstruction and final loss per restart plus the
    inference error over the restarts that finished.  A restart aborts on
    a non-finite matching loss; if every restart aborts (or fewer than two
    survive) the attack itself fails.
    """
    target = np.asarray(target_gradient.values if isinstance(target_gradient, GradientVector)
                        else target_gradient, dtype=np.float64)
    if target.shape != (model.n_params,):
        raise ContractError(f"target gradient {target.shape} does not match "
                            f"{model.n_params} model parameters")
    labels = np.asarray(labels)
    if labels.shape != (batch_size,):
        raise ContractError(f"need {batch_size} labels, got {labels.shape}")
    dim = model.input_dim
    recons = np.full((config.restarts, batch_size, dim), np.nan)
    losses = np.full(config.restarts, np.nan)
    aborted = np.zeros(config.restarts, dtype=bool)

    for k in range(config.restarts):
        entropy = (config.restart_seeds[k] if config.restart_seeds is not None
                   else [config.seed, k])
        rng = np.random.default_rng(np.random.SeedSequence(entropy))
        x = rng.normal(0.0, config.init_std, size=(batch_size, dim))
        adam = AdamState([(batch_size, dim)], lr=config.lr)
        ok = True
        for _ in range(config.iterations):
            x_node = nd.param(x)
            diff = nd.sub(model.gradient_expr(x_node, labels), nd.const(target))
            loss = nd.tsum(nd.square(diff))
            if not np.isfinite(loss.data):
                ok = False
                break
            grad_x = nd.gradients(loss, [x_node])[0]
            x = adam_step(adam, [x], [grad_x])[0]
        final = _matching_loss(model, x, labels, target) if ok else float("nan")
        if ok and np.isfinite(final):
            recons[k] = x
            losses[k] = final
        else:
            aborted[k] = True

    survivors = np.flatnonzero(~aborted)
    if survivors.size == 0:
        raise AttackError("all restarts aborted with non-finite matching loss")
    if survivors.size < 2:
        raise AttackError(f"only {survivors.size} restart finished; "
                          "the inference error needs at least two")
    epsilon = inference_error(recons[survivors])
    return AttackReport(reconstructions=recons, losses=losses, aborted=aborted,
                        epsilon=epsilon, config=config)


def save_report(path, report: AttackReport) -> None:
    """CSV of (restart, final_loss) rows plus a summary row with epsilon."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("restart,final_loss\n")
        for k, loss in enumerate(report.losses):
            fh.write(f"{k},{'' if np.isnan(loss) else repr(float(loss))}\n")
        fh.write(f"# epsilon={report.epsilon!r}\n")
