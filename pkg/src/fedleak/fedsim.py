"""Task models and the federated-SGD protocol simulation.

One communication round: every client samples a batch from its local
dataset, computes the mean loss gradient at the current global parameters,
optionally perturbs it with Gaussian noise, and the server applies
theta <- theta - eta * sum_i G_i.  An epoch is ceil(|D|/B) rounds.

Two task models are provided: a logistic regression (sigmoid output,
binary cross-entropy) and a two-hidden-layer softmax classifier.  Both
expose three gradient routes with identical numbers:

* ``gradient_from_graph``   reverse-mode on the loss graph (the reference),
* ``per_sample_gradients``  closed-form vectorized path for bulk sampling,
* ``gradient_expr``         the gradient as a graph expression that is
  itself differentiable w.r.t. the *inputs*, which is what the inversion
  attack optimizes through.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ndcore as nd
from .dataio import Dataset, sample_batch
from .errors import ContractError, NumericError, RunError, ShapeError


def _stable_sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                    np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


@dataclass
class GradientVector:
    """Flat gradient with provenance for later bookkeeping."""
    values: np.ndarray
    round_index: int | None = None
    client_id: int | None = None
    batch_size: int | None = None
    noise_sigma: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)


class TaskModel:
    """Shared packing/unpacking and bulk-gradient plumbing."""

    kind = "base"
    layout: list[tuple[str, tuple[int, ...]]]
    input_dim: int
    params: np.ndarray
    loss_scale: float = 1.0

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout)

    def unpack(self, flat: np.ndarray) -> list[np.ndarray]:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} parameters, got {flat.shape}")
        out, off = [], 0
        for _, shape in self.layout:
            size = int(np.prod(shape))
            out.append(flat[off:off + size].reshape(shape))
            off += size
        return out

    def pack(self, arrays) -> np.ndarray:
        return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])

    def _theta(self, params):
        return self.params if params is None else np.asarray(params, dtype=np.float64)

    def gradient_from_graph(self, x: np.ndarray, y: np.ndarray, params=None) -> np.ndarray:
        leaves = [nd.param(a) for a in self.unpack(self._theta(params))]
        loss = self.loss_graph(leaves, x, y)
        grads = nd.gradients(loss, leaves)
        return self.pack(grads)

    def batch_gradient_matrix(self, x: np.ndarray, y: np.ndarray, params=None) -> np.ndarray:
        """Mean gradient of each batch: x is (m, B, d), y is (m, B) -> (m, p)."""
        m, batch, d = x.shape
        per = self.per_sample_gradients(x.reshape(m * batch, d), y.reshape(m * batch),
                                        params=params)
        return per.reshape(m, batch, self.n_params).mean(axis=1)

    def loss(self, x: np.ndarray, y: np.ndarray, params=None) -> float:
        return float(self.per_sample_losses(x, y, params=params).mean())


class LogisticRegression(TaskModel):
    """input_dim -> 1 sigmoid with binary cross-entropy; starts at theta = 0."""

    kind = "logreg"

    def __init__(self, input_dim: int = 14, loss_scale: float = 1.0):
        self.input_dim = input_dim
        self.layout = [("w", (input_dim,)), ("b", (1,))]
        self.loss_scale = loss_scale
        self.params = np.zeros(self.n_params)

    def per_sample_losses(self, x, y, params=None):
        w, b = self.unpack(self._theta(params))
        z = x @ w + b[0]
        return self.loss_scale * (np.logaddexp(0.0, z) - z * y)

    def per_sample_gradients(self, x, y, params=None):
        w, b = self.unpack(self._theta(params))
        err = _stable_sigmoid(x @ w + b[0]) - y
        return self.loss_scale * np.concatenate([err[:, None] * x, err[:, None]], axis=1)

    def loss_graph(self, leaves, x, y):
        w, b = leaves
        z = nd.add(nd.matmul(nd.const(x), nd.reshape(w, (-1, 1))), b)
        y_col = nd.const(np.asarray(y, dtype=np.float64).reshape(-1, 1))
        per = nd.sub(nd.softplus(z), nd.mul(z, y_col))
        return nd.mul(nd.tmean(per), self.loss_scale)

    def gradient_expr(self, x_node: nd.Tensor, y, params=None) -> nd.Tensor:
        """Batch-mean gradient as a graph expression differentiable in x."""
        w, b = self.unpack(self._theta(params))
        batch = x_node.data.shape[0]
        z = nd.add(nd.matmul(x_node, nd.const(w.reshape(-1, 1))), nd.const(b))
        err = nd.sub(nd.sigmoid(z), nd.const(np.asarray(y, dtype=np.float64).reshape(-1, 1)))
        g_w = nd.mul(nd.matmul(nd.transpose(x_node), err), 1.0 / batch)
        g_b = nd.tmean(err, axis=0)
        return nd.mul(nd.concat([nd.ravel(g_w), nd.ravel(g_b)]), self.loss_scale)


class MlpClassifier(TaskModel):
    """Fully connected softmax classifier, e.g. 14-100-100-2, relu hidden."""

    kind = "mlp"

    def __init__(self, layer_dims=(14, 100, 100, 2), rng: np.random.Generator | None = None,
                 loss_scale: float = 1.0):
        if len(layer_dims) < 2 or layer_dims[-1] < 2:
            raise ContractError(f"bad classifier dims {layer_dims}")
        self.layer_dims = tuple(layer_dims)
        self.input_dim = layer_dims[0]
        self.n_classes = layer_dims[-1]
        self.loss_scale = loss_scale
        self.layout = []
        for i, (fi, fo) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
            self.layout.append((f"w{i}", (fi, fo)))
            self.layout.append((f"b{i}", (fo,)))
        rng = rng if rng is not None else np.random.default_rng(0)
        arrays = []
        for fi, fo in zip(layer_dims[:-1], layer_dims[1:]):
            bound = np.sqrt(6.0 / (fi + fo))
            arrays.append(rng.uniform(-bound, bound, size=(fi, fo)))
            arrays.append(np.zeros(fo))
        self.params = self.pack(arrays)

    def _onehot(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.int64)
        out = np.zeros((y.shape[0], self.n_classes))
        out[np.arange(y.shape[0]), y] = 1.0
        return out

    def _forward_np(self, x, theta):
        arrays = self.unpack(theta)
        acts = [np.asarray(x, dtype=np.float64)]
        pre = []
        h = acts[0]
        n_layers = len(self.layer_dims) - 1
        for i in range(n_layers):
            z = h @ arrays[2 * i] + arrays[2 * i + 1]
            pre.append(z)
            h = np.maximum(z, 0.0) if i < n_layers - 1 else z
            acts.append(h)
        return pre, acts

    def per_sample_losses(self, x, y, params=None):
        _, acts = self._forward_np(x, self._theta(params))
        logits = acts[-1]
        lse = np.logaddexp.reduce(logits, axis=1)
        picked = logits[np.arange(logits.shape[0]), np.asarray(y, dtype=np.int64)]
        return self.loss_scale * (lse - picked)

    def per_sample_gradients(self, x, y, params=None):
        theta = self._theta(params)
        arrays = self.unpack(theta)
        pre, acts = self._forward_np(x, theta)
        logits = acts[-1]
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        probs = e / e.sum(axis=1, keepdims=True)
        delta = probs - self._onehot(y)
        n_layers = len(self.layer_dims) - 1
        pieces = [None] * (2 * n_layers)
        for i in range(n_layers - 1, -1, -1):
            pieces[2 * i] = np.einsum("bi,bj->bij", acts[i], delta).reshape(x.shape[0], -1)
            pieces[2 * i + 1] = delta
            if i > 0:
                delta = (delta @ arrays[2 * i].T) * (pre[i - 1] > 0)
        return self.loss_scale * np.concatenate(pieces, axis=1)

    def loss_graph(self, leaves, x, y):
        h = nd.const(np.asarray(x, dtype=np.float64))
        n_layers = len(self.layer_dims) - 1
        for i in range(n_layers):
            h = nd.add(nd.matmul(h, leaves[2 * i]), leaves[2 * i + 1])
            if i < n_layers - 1:
                h = nd.relu(h)
        row_max = nd.const(h.data.max(axis=1, keepdims=True))
        lse = nd.add(nd.log(nd.tsum(nd.exp(nd.sub(h, row_max)), axis=1, keepdims=True)),
                     row_max)
        logp = nd.sub(h, lse)
        picked = nd.tsum(nd.mul(nd.const(self._onehot(y)), logp))
        return nd.mul(picked, -self.loss_scale / h.data.shape[0])

    def gradient_expr(self, x_node: nd.Tensor, y, params=None) -> nd.Tensor:
        """Batch-mean parameter gradient, differentiable w.r.t. the inputs.

        Relu masks enter as constants: they are piecewise constant in x, so
        their almost-everywhere derivative contribution is zero.
        """
        theta = self._theta(params)
        arrays = self.unpack(theta)
        n_layers = len(self.layer_dims) - 1
        batch = x_node.data.shape[0]
        acts = [x_node]
        masks = []
        h = x_node
        for i in range(n_layers):
            z = nd.add(nd.matmul(h, nd.const(arrays[2 * i])), nd.const(arrays[2 * i + 1]))
            if i < n_layers - 1:
                mask = nd.const((z.data > 0).astype(np.float64))
                masks.append(mask)
                h = nd.mul(z, mask)
            else:
                h = z
            acts.append(h)
        row_max = nd.const(h.data.max(axis=1, keepdims=True))
        e = nd.exp(nd.sub(h, row_max))
        probs = nd.div(e, nd.tsum(e, axis=1, keepdims=True))
        delta = nd.mul(nd.sub(probs, nd.const(self._onehot(y))), 1.0 / batch)
        pieces = [None] * (2 * n_layers)
        for i in range(n_layers - 1, -1, -1):
            pieces[2 * i] = nd.ravel(nd.matmul(nd.transpose(acts[i]), delta))
            pieces[2 * i + 1] = nd.tsum(delta, axis=0)
            if i > 0:
                delta = nd.mul(nd.matmul(delta, nd.const(arrays[2 * i].T)), masks[i - 1])
        return nd.mul(nd.concat(pieces), self.loss_scale)


def make_task_model(kind: str, input_dim: int = 14, hidden=(100, 100),
                    n_classes: int = 2, seed: int = 0) -> TaskModel:
    if kind == "logreg":
        return LogisticRegression(input_dim=input_dim)
    if kind == "mlp":
        dims = (input_dim, *hidden, n_classes)
        return MlpClassifier(dims, rng=np.random.default_rng(np.random.SeedSequence([seed, 7001])))
    raise ContractError(f"unknown task model kind {kind!r}")


# -- protocol operations ---------------------------------------------------

def compute_gradient(model: TaskModel, batch, *, round_index=None,
                     client_id=None) -> GradientVector:
    """Mean-over-batch loss gradient at the model's current parameters."""
    x = np.asarray(batch.features, dtype=np.float64)
    y = np.asarray(batch.labels, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"batch features {x.shape} do not match input dim {model.input_dim}")
    per_losses = model.per_sample_losses(x, y)
    bad = np.flatnonzero(~np.isfinite(per_losses))
    if bad.size:
        raise NumericError(f"non-finite loss at batch sample index {int(bad[0])}")
    values = model.gradient_from_graph(x, y)
    return GradientVector(values=values, round_index=round_index, client_id=client_id,
                          batch_size=x.shape[0])


def add_gradient_noise(grad: GradientVector, sigma: float,
                       rng: np.random.Generator) -> GradientVector:
    """G + iid N(0, sigma^2) per coordinate; sigma=0 returns G unchanged."""
    if sigma < 0:
        raise ContractError(f"sigma must be >= 0, got {sigma}")
    values = grad.values if sigma == 0 else grad.values + rng.normal(0.0, sigma,
                                                                     size=grad.values.shape)
    return GradientVector(values=values.copy(), round_index=grad.round_index,
                          client_id=grad.client_id, batch_size=grad.batch_size,
                          noise_sigma=sigma)


def aggregate(theta: np.ndarray, gradients: list[GradientVector], eta: float) -> np.ndarray:
    """Server update theta' = theta - eta * sum_i G_i (sum, not mean)."""
    theta = np.asarray(theta, dtype=np.float64)
    total = np.zeros_like(theta)
    for g in gradients:
        if g.values.shape != theta.shape:
            raise ContractError(f"gradient layout {g.values.shape} != theta {theta.shape}")
        total += g.values
    return theta - eta * total


@dataclass
class FedConfig:
    batch_size: int
    epochs: int = 1
    n_clients: int = 1
    eta: float = 0.1
    noise_sigma: float = 0.0
    seed: int = 0
    checkpoint_epochs: tuple[int, ...] = ()
    record_rounds: bool = False

    def __post_init__(self):
        if self.n_clients < 1 or self.batch_size < 1:
            raise ContractError("n_clients and batch_size must be >= 1")
        if self.eta <= 0:
            raise ContractError("eta must be > 0")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be >= 0")


@dataclass
class FedTrajectory:
    initial_params: np.ndarray
    checkpoints: dict[int, np.ndarray]      # epoch -> theta after that epoch
    epoch_losses: list[float]
    rounds_per_epoch: int
    final_params: np.ndarray
    round_params: list[np.ndarray] | None = None


def client_rng(seed: int, client_id: int, purpose: int) -> np.random.Generator:
    """Per-client deterministic stream; purpose 0 = batches, 1 = noise."""
    return np.random.default_rng(np.random.SeedSequence([seed, client_id, purpose]))


def run_fedsgd(model: TaskModel, datasets, config: FedConfig) -> FedTrajectory:
    """Simulate FedSGD rounds, storing theta after each requested epoch."""
    if isinstance(datasets, Dataset):
        datasets = [datasets]
    if len(datasets) != config.n_clients:
        raise ContractError(f"{config.n_clients} clients need {config.n_clients} datasets")
    batch_rngs = [client_rng(config.seed, c, 0) for c in range(config.n_clients)]
    noise_rngs = [client_rng(config.seed, c, 1) for c in range(config.n_clients)]
    rounds_per_epoch = math.ceil(datasets[0].n / config.batch_size)
    theta = model.params.copy()
    trajectory = FedTrajectory(initial_params=theta.copy(), checkpoints={},
                               epoch_losses=[], rounds_per_epoch=rounds_per_epoch,
                               final_params=theta,
                               round_params=[theta.copy()] if config.record_rounds else None)
    wanted = set(config.checkpoint_epochs)
    for epoch in range(1, config.epochs + 1):
        for r in range(rounds_per_epoch):
            round_index = (epoch - 1) * rounds_per_epoch + r
            grads = []
            for c in range(config.n_clients):
                batch = sample_batch(datasets[c], config.batch_size, batch_rngs[c])
                model.params = theta
                grad = compute_gradient(model, batch, round_index=round_index, client_id=c)
                if config.noise_sigma > 0:
                    grad = add_gradient_noise(grad, config.noise_sigma, noise_rngs[c])
                grads.append(grad)
            theta = aggregate(theta, grads, config.eta)
            if not np.all(np.isfinite(theta)):
                raise RunError(f"parameters diverged at round {round_index}")
            if config.record_rounds:
                trajectory.round_params.append(theta.copy())
        model.params = theta
        trajectory.epoch_losses.append(
            float(np.mean([model.loss(d.features, d.labels) for d in datasets])))
        if not wanted or epoch in wanted:
            trajectory.checkpoints[epoch] = theta.copy()
    model.params = theta
    trajectory.final_params = theta
    return trajectory


CHECKPOINT_HEADER = "# fedleak-checkpoints v1"


def save_checkpoints(path, trajectory: FedTrajectory) -> None:
    """CSV rows (round, theta...) for every stored epoch checkpoint."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{CHECKPOINT_HEADER} rounds_per_epoch={trajectory.rounds_per_epoch}\n")
        for epoch in sorted(trajectory.checkpoints):
            theta = trajectory.checkpoints[epoch]
            row = ",".join([str(epoch * trajectory.rounds_per_epoch)]
                           + [repr(v) for v in theta])
            fh.write(row + "\n")


def load_checkpoints(path) -> dict[int, np.ndarray]:
    """Round -> theta map from a checkpoint CSV; validates the version header."""
    out: dict[int, np.ndarray] = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith(CHECKPOINT_HEADER):
            raise ContractError(f"unrecognized checkpoint header: {header.strip()!r}")
        for line in fh:
            if not line.strip():
                continue
            parts = line.split(",")
            out[int(parts[0])] = np.array([float(v) for v in parts[1:]])
    return out
