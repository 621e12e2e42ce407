"""Localization metrics in meters and the synthetic test trajectories.

predict() runs the inverse map end to end: normalize a measured field triplet
with the training stats, evaluate the network, denormalize the output back to
meters. evaluate() synthesizes fields along a trajectory of true positions,
optionally perturbs them with the dataset noise model, and reports per-axis
MAE/RMSE plus mean Euclidean error and a percent-of-extent figure.
"""

from dataclasses import dataclass

import numpy as np

from .dataset import (
    Dataset,
    GridSpec,
    NormStats,
    add_noise,
    denormalize_positions,
    normalize_fields,
)
from .field_model import FieldVector, PhysicalConstants, Position, field_at_points
from .network import NetworkParams, forward


class DomainTooSmall(Exception):
    """The grid domain cannot host the requested trajectory."""


@dataclass(frozen=True)
class EvalMetrics:
    """Localization errors in meters; percent_error is relative to axis extent."""

    mae_x: float
    mae_y: float
    mae_z: float
    rmse_x: float
    rmse_y: float
    rmse_z: float
    mean_euclidean: float
    percent_error: float

    def __post_init__(self):
        values = (self.mae_x, self.mae_y, self.mae_z, self.rmse_x, self.rmse_y,
                  self.rmse_z, self.mean_euclidean, self.percent_error)
        if not all(np.isfinite(v) and v >= 0.0 for v in values):
            raise ValueError(f"metrics must be finite and non-negative, got {values}")

    def as_mapping(self) -> dict:
        return {
            "mae_x": self.mae_x, "mae_y": self.mae_y, "mae_z": self.mae_z,
            "rmse_x": self.rmse_x, "rmse_y": self.rmse_y, "rmse_z": self.rmse_z,
            "mean_euclidean": self.mean_euclidean, "percent_error": self.percent_error,
        }


@dataclass
class Trajectory:
    """True positions and the model's predictions for them, both (N, 3) meters."""

    name: str
    true_positions: np.ndarray
    predicted_positions: np.ndarray

    def __post_init__(self):
        self.true_positions = np.asarray(self.true_positions, dtype=np.float64).reshape(-1, 3)
        self.predicted_positions = np.asarray(self.predicted_positions, dtype=np.float64).reshape(-1, 3)
        if len(self.true_positions) != len(self.predicted_positions):
            raise ValueError("true and predicted point lists must have equal length")


def predict_positions(params: NetworkParams, stats: NormStats, fields) -> np.ndarray:
    """Batched inverse map: (N, 3) field components -> (N, 3) positions in meters."""
    out, _ = forward(params, normalize_fields(fields, stats))
    return denormalize_positions(out, stats)


def predict(params: NetworkParams, stats: NormStats, field: FieldVector) -> Position:
    """Single-measurement inverse map."""
    out = predict_positions(params, stats, field.as_array()[None, :])[0]
    return Position(float(out[0]), float(out[1]), float(out[2]))


def _is_grid_node(point: np.ndarray, grid: GridSpec) -> bool:
    """Exact check: every coordinate sits on a grid plane."""
    for c in point:
        k = round((c - grid.min) / grid.step)
        if not (0 <= k < grid.points_per_axis and c == grid.min + k * grid.step):
            return False
    return True


def _off_node(points: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Shift the z of any point that lands exactly on a grid node by step/2."""
    for row in points:
        if _is_grid_node(row, grid):
            row[2] += grid.step / 2.0
    return points


def make_trajectory(kind: str, n_points: int, seed: int, grid: GridSpec) -> np.ndarray:
    """Build a test path of true positions, guaranteed off the sampling grid.

    kind 'spiral': a 3-turn helix centered mid-domain, radius 0.3*extent,
    z spanning the middle 80% of the domain. kind 'circle': a horizontal
    circle at mid-depth with the same radius; its z plane is snapped to a
    half-step offset so no point can coincide with a grid node. kind
    'random': uniform over the interior. Any remaining exact node hit is
    nudged by +step/2 in z.
    """
    if n_points < 2:
        raise ValueError(f"need at least 2 trajectory points, got {n_points}")
    extent = grid.max - grid.min
    if 0.1 * extent <= 0.5 * grid.step:
        raise DomainTooSmall(
            f"extent {extent} is too small relative to step {grid.step} to keep "
            f"off-grid trajectories inside the domain"
        )
    center = grid.min + 0.5 * extent
    radius = 0.3 * extent
    if kind == "spiral":
        t = np.linspace(0.0, 1.0, n_points)
        angle = 2.0 * np.pi * 3.0 * t
        x = center + radius * np.cos(angle)
        y = center + radius * np.sin(angle)
        z = (grid.min + 0.1 * extent) + 0.8 * extent * t
        points = np.stack([x, y, z], axis=1)
    elif kind == "circle":
        angle = 2.0 * np.pi * np.arange(n_points) / n_points
        # Snap the plane to min + (k + 1/2)*step nearest mid-depth.
        k = np.floor((0.5 * extent) / grid.step)
        z_plane = grid.min + (k + 0.5) * grid.step
        x = center + radius * np.cos(angle)
        y = center + radius * np.sin(angle)
        points = np.stack([x, y, np.full(n_points, z_plane)], axis=1)
    elif kind == "random":
        rng = np.random.default_rng(seed)
        points = rng.uniform(grid.min, grid.max, size=(n_points, 3))
        points[points <= grid.min] += grid.step / 2.0
    else:
        raise ValueError(f"unknown trajectory kind '{kind}'")
    return _off_node(points, grid)


def compute_metrics(true_positions, predicted_positions, axis_extent: float) -> EvalMetrics:
    """Per-axis MAE and RMSE, mean Euclidean error, and percent location error.

    percent_error = mean(MAE_x, MAE_y, MAE_z) / axis_extent * 100.
    """
    truth = np.asarray(true_positions, dtype=np.float64).reshape(-1, 3)
    pred = np.asarray(predicted_positions, dtype=np.float64).reshape(-1, 3)
    err = pred - truth
    mae = np.mean(np.abs(err), axis=0)
    rmse = np.sqrt(np.mean(err * err, axis=0))
    euclid = float(np.mean(np.linalg.norm(err, axis=1)))
    percent = float(np.mean(mae) / axis_extent * 100.0)
    return EvalMetrics(
        float(mae[0]), float(mae[1]), float(mae[2]),
        float(rmse[0]), float(rmse[1]), float(rmse[2]),
        euclid, percent,
    )


def evaluate(
    params: NetworkParams,
    stats: NormStats,
    points,
    electrodes,
    constants: PhysicalConstants,
    noise_intensity: float = 0.0,
    seed: int = 0,
    name: str = "points",
):
    """Synthesize fields at true points, invert them, and score the result.

    Measurement noise reuses the dataset noise model (Gaussian with std
    intensity * per-component std over this point set). Axis extent for the
    percent figure comes from the training stats. Returns
    (EvalMetrics, Trajectory).
    """
    truth = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    fields = field_at_points(truth, electrodes, constants)
    if noise_intensity > 0.0:
        fields = add_noise(Dataset(truth, fields), noise_intensity, seed).fields
    pred = predict_positions(params, stats, fields)
    extent = float(np.mean(stats.position_max - stats.position_min))
    metrics = compute_metrics(truth, pred, extent)
    return metrics, Trajectory(name, truth, pred)


def save_trajectory_csv(trajectory: Trajectory, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("idx,true_x,true_y,true_z,pred_x,pred_y,pred_z\n")
        rows = zip(trajectory.true_positions, trajectory.predicted_positions)
        for i, (t, p) in enumerate(rows):
            fh.write(
                f"{i},{float(t[0])!r},{float(t[1])!r},{float(t[2])!r},"
                f"{float(p[0])!r},{float(p[1])!r},{float(p[2])!r}\n"
            )


def save_metrics_text(metrics: EvalMetrics, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for key, value in metrics.as_mapping().items():
            fh.write(f"{key}={value!r}\n")


def save_metrics_csv(metrics: EvalMetrics, path) -> None:
    mapping = metrics.as_mapping()
    with open(path, "w", encoding="ascii") as fh:
        fh.write(",".join(mapping) + "\n")
        fh.write(",".join(repr(v) for v in mapping.values()) + "\n")
