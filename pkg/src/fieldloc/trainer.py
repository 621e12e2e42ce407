"""Two-stage training: shuffled minibatch Adam, then full-batch L-BFGS.

The loss is the weighted sum of per-axis mean squared errors between the
network output and the target position, both in normalized coordinates.
Metric (meters) errors are recovered downstream in evaluation. Normalization
stats are fitted on the training split only and frozen.

Seed derivation: init uses config.seed, the train/validation split uses
config.seed + 1, epoch shuffling uses config.seed + 2.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import network
from .dataset import Dataset, NormStats, fit_norm_stats, normalize, split
from .network import NetworkParams, backward, flatten_params, forward, unflatten_params
from .optim import AdamState, LbfgsConfig, NonFiniteLoss, adam_step, lbfgs_minimize

DEFAULT_CHUNK = 1 << 18


@dataclass(frozen=True)
class LossWeights:
    """Per-axis weighting of the squared-error terms."""

    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0.0:
            raise ValueError("loss weights must be non-negative")
        if self.alpha + self.beta + self.gamma <= 0.0:
            raise ValueError("at least one loss weight must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.gamma], dtype=np.float64)


@dataclass
class TrainConfig:
    max_epochs: int = 50000  # Adam epoch budget (early stopping usually ends sooner)
    batch_size: int = 4096
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    holdout_fraction: float = 0.1
    patience: int = 500  # epochs without validation improvement before stopping
    min_delta: float = 1e-9
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    lbfgs: LbfgsConfig = field(default_factory=LbfgsConfig)
    hidden_layers: int = network.DEFAULT_HIDDEN_LAYERS
    hidden_units: int = network.DEFAULT_HIDDEN_UNITS
    chunk_size: int = DEFAULT_CHUNK


@dataclass
class TrainReport:
    """Per-epoch (Adam) and per-iteration (L-BFGS) loss curves.

    Adam rows are minibatch means over each epoch; L-BFGS rows are exact
    full-batch values, starting with a row for the handoff point itself so
    the stage boundary is visible in the curve.
    """

    loss_x: list = field(default_factory=list)
    loss_y: list = field(default_factory=list)
    loss_z: list = field(default_factory=list)
    loss_total: list = field(default_factory=list)
    stages: list = field(default_factory=list)  # 'adam' or 'lbfgs' per row
    stage_boundary: int = 0  # index of the first lbfgs row
    termination: str = ""
    wall_time: float = 0.0

    def append(self, stage: str, lx: float, ly: float, lz: float, total: float) -> None:
        self.stages.append(stage)
        self.loss_x.append(float(lx))
        self.loss_y.append(float(ly))
        self.loss_z.append(float(lz))
        self.loss_total.append(float(total))

    def __len__(self) -> int:
        return len(self.loss_total)

    def save_csv(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write("epoch,stage,loss_x,loss_y,loss_z,loss_total\n")
            rows = zip(self.stages, self.loss_x, self.loss_y, self.loss_z, self.loss_total)
            for epoch, (stage, lx, ly, lz, total) in enumerate(rows):
                fh.write(f"{epoch},{stage},{lx!r},{ly!r},{lz!r},{total!r}\n")


def loss(params: NetworkParams, inputs, targets, weights: LossWeights):
    """Weighted per-axis MSE; returns (total, loss_x, loss_y, loss_z)."""
    x = np.asarray(inputs, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("loss needs a non-empty batch")
    out, _ = forward(params, x)
    err = out - t
    per_axis = np.mean(err * err, axis=0)
    total = float(weights.as_array() @ per_axis)
    return total, float(per_axis[0]), float(per_axis[1]), float(per_axis[2])


def loss_gradient(params: NetworkParams, inputs, targets, weights: LossWeights):
    """Gradient of the total loss w.r.t. every parameter, via backpropagation.

    Returns (grad: NetworkParams, (total, loss_x, loss_y, loss_z)). The 1/C
    batch averaging is folded into the output gradient.
    """
    x = np.asarray(inputs, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("loss gradient needs a non-empty batch")
    out, trace = forward(params, x)
    err = out - t
    per_axis = np.mean(err * err, axis=0)
    w = weights.as_array()
    total = float(w @ per_axis)
    grad_out = err * (2.0 / len(x)) * w
    grad = backward(params, trace, grad_out)
    return grad, (total, float(per_axis[0]), float(per_axis[1]), float(per_axis[2]))


def _chunked_loss(theta, layer_sizes, inputs, targets, weights, chunk_size):
    """Full-batch per-axis MSE computed in fixed-size chunks (bounded memory)."""
    params = unflatten_params(theta, layer_sizes)
    n = len(inputs)
    sums = np.zeros(3)
    for start in range(0, n, chunk_size):
        out, _ = forward(params, inputs[start:start + chunk_size])
        err = out - targets[start:start + chunk_size]
        sums += np.sum(err * err, axis=0)
    per_axis = sums / n
    return float(weights.as_array() @ per_axis), per_axis


def _chunked_loss_and_grad(theta, layer_sizes, inputs, targets, weights, chunk_size):
    params = unflatten_params(theta, layer_sizes)
    n = len(inputs)
    w = weights.as_array()
    sums = np.zeros(3)
    grad_total = np.zeros_like(theta)
    for start in range(0, n, chunk_size):
        x = inputs[start:start + chunk_size]
        t = targets[start:start + chunk_size]
        out, trace = forward(params, x)
        err = out - t
        sums += np.sum(err * err, axis=0)
        grad_out = err * (2.0 / n) * w
        grad_total += flatten_params(backward(params, trace, grad_out))
    per_axis = sums / n
    return float(w @ per_axis), grad_total, per_axis


def train(config: TrainConfig, data: Dataset):
    """Run the two-stage schedule on a raw (unnormalized) dataset.

    Returns (params, stats, report). Stats are fitted on the training split;
    validation shares them. Identical config and dataset reproduce the same
    parameters bit for bit.
    """
    if len(data) < 2:
        raise ValueError(f"training needs at least 2 samples, got {len(data)}")
    t_start = time.perf_counter()

    train_raw, val_raw = split(data, config.holdout_fraction, config.seed + 1)
    stats = fit_norm_stats(train_raw)
    train_norm = normalize(train_raw, stats)
    val_norm = normalize(val_raw, stats) if len(val_raw) else None
    train_in, train_tgt = train_norm.fields, train_norm.positions

    layer_sizes = network.layer_sizes_for(config.hidden_layers, config.hidden_units)
    params = network.init_params(config.seed, layer_sizes)
    theta = flatten_params(params)
    report = TrainReport()

    # Stage 1: shuffled minibatch Adam with validation-plateau early stopping.
    adam = AdamState.fresh(
        len(theta),
        learning_rate=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        epsilon=config.epsilon,
    )
    shuffle_rng = np.random.default_rng(config.seed + 2)
    n_train = len(train_in)
    batch = max(1, min(config.batch_size, n_train))
    best_plateau_loss = np.inf
    epochs_since_improvement = 0
    adam_stop = "max_epochs"
    for epoch in range(config.max_epochs):
        perm = shuffle_rng.permutation(n_train)
        epoch_sums = np.zeros(3)
        epoch_total = 0.0
        n_batches = 0
        for start in range(0, n_train, batch):
            idx = perm[start:start + batch]
            params = unflatten_params(theta, layer_sizes)
            grad, (total, lx, ly, lz) = loss_gradient(
                params, train_in[idx], train_tgt[idx], config.weights
            )
            gvec = flatten_params(grad)
            if not (np.isfinite(total) and np.all(np.isfinite(gvec))):
                raise NonFiniteLoss(
                    f"non-finite loss/gradient in epoch {epoch}, batch {n_batches} "
                    f"(samples {start}..{start + len(idx) - 1} of the shuffled order, "
                    f"loss={total})"
                )
            adam, theta = adam_step(adam, theta, gvec)
            epoch_sums += (lx, ly, lz)
            epoch_total += total
            n_batches += 1
        report.append(
            "adam",
            epoch_sums[0] / n_batches,
            epoch_sums[1] / n_batches,
            epoch_sums[2] / n_batches,
            epoch_total / n_batches,
        )
        # Plateau detection on the validation split (training loss when there
        # is no holdout).
        if val_norm is not None:
            plateau_loss, _ = _chunked_loss(
                theta, layer_sizes, val_norm.fields, val_norm.positions,
                config.weights, config.chunk_size,
            )
        else:
            plateau_loss = epoch_total / n_batches
        if plateau_loss < best_plateau_loss - config.min_delta:
            best_plateau_loss = plateau_loss
            epochs_since_improvement = 0
        else:
            epochs_since_improvement += 1
            if epochs_since_improvement >= config.patience:
                adam_stop = "early_stop"
                break

    # Stage 2: full-batch L-BFGS from the Adam parameters.
    report.stage_boundary = len(report)

    def objective(th):
        total, grad, per_axis = _chunked_loss_and_grad(
            th, layer_sizes, train_in, train_tgt, config.weights, config.chunk_size
        )
        objective.last_per_axis = per_axis
        return total, grad

    def objective_loss_only(th):
        total, _ = _chunked_loss(
            th, layer_sizes, train_in, train_tgt, config.weights, config.chunk_size
        )
        return total

    start_total, start_axes = _chunked_loss(
        theta, layer_sizes, train_in, train_tgt, config.weights, config.chunk_size
    )
    report.append("lbfgs", start_axes[0], start_axes[1], start_axes[2], start_total)

    def record(iteration, th, f, g):
        axes = objective.last_per_axis
        report.append("lbfgs", axes[0], axes[1], axes[2], f)

    theta, reason = lbfgs_minimize(
        theta, objective, config.lbfgs, loss_fn=objective_loss_only, callback=record
    )

    report.termination = f"adam:{adam_stop};lbfgs:{reason.value}"
    report.wall_time = time.perf_counter() - t_start
    return unflatten_params(theta, layer_sizes), stats, report
