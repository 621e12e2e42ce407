"""Position->field training corpus: grid generation, noise, normalization, I/O.

Datasets are stored as parallel (M, 3) float64 arrays of positions (meters)
and field components (V/m). Noise is additive Gaussian per field component
with standard deviation ``intensity * std(component)`` measured on the clean
data. Normalization is per-component min-max to [0, 1]. All randomness goes
through numpy's seeded PCG64 generator so runs reproduce across platforms.
"""

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .field_model import FieldVector, PhysicalConstants, Position, field_at_points

# Column order used throughout: positions x,y,z then fields ex,ey,ez.
CSV_HEADER = "x,y,z,ex,ey,ez"
STATS_KEYS = (
    "x_min", "x_max", "y_min", "y_max", "z_min", "z_max",
    "ex_min", "ex_max", "ey_min", "ey_max", "ez_min", "ez_max",
)

_GENERATION_CHUNK = 1 << 18


class DegenerateComponent(Exception):
    """A position or field component has zero spread (max == min)."""


class CsvSchemaError(Exception):
    """A dataset CSV file does not match the x,y,z,ex,ey,ez schema."""


@dataclass(frozen=True)
class GridSpec:
    """Cubic sampling grid: the same [min, max] range and step on each axis."""

    min: float = 10.0
    max: float = 110.0
    step: float = 0.5

    def __post_init__(self):
        if not (self.min < self.max):
            raise ValueError(f"grid needs min < max, got [{self.min}, {self.max}]")
        if self.step <= 0.0:
            raise ValueError(f"grid step must be positive, got {self.step}")

    @property
    def points_per_axis(self) -> int:
        """Node count per axis; both endpoints included when the range divides evenly."""
        ratio = (self.max - self.min) / self.step
        if abs(ratio - round(ratio)) <= 1e-9 * max(1.0, abs(ratio)):
            return int(round(ratio)) + 1
        return int(math.floor(ratio)) + 1

    @property
    def total_points(self) -> int:
        return self.points_per_axis ** 3

    @property
    def has_overhang(self) -> bool:
        ratio = (self.max - self.min) / self.step
        return abs(ratio - round(ratio)) > 1e-9 * max(1.0, abs(ratio))

    def axis_coordinates(self) -> np.ndarray:
        return self.min + self.step * np.arange(self.points_per_axis, dtype=np.float64)


@dataclass(frozen=True)
class Sample:
    """One paired (position, field) record."""

    position: Position
    field: FieldVector


@dataclass(frozen=True)
class NormStats:
    """Per-component extrema used by the min-max normalization."""

    position_min: np.ndarray  # (3,)
    position_max: np.ndarray
    field_min: np.ndarray
    field_max: np.ndarray

    def as_mapping(self) -> dict:
        values = []
        for axis in range(3):
            values.append(float(self.position_min[axis]))
            values.append(float(self.position_max[axis]))
        for axis in range(3):
            values.append(float(self.field_min[axis]))
            values.append(float(self.field_max[axis]))
        return dict(zip(STATS_KEYS, values))

    @classmethod
    def from_mapping(cls, mapping: dict) -> "NormStats":
        missing = [k for k in STATS_KEYS if k not in mapping]
        if missing:
            raise CsvSchemaError(f"stats mapping missing keys: {missing}")
        pmin = np.array([mapping["x_min"], mapping["y_min"], mapping["z_min"]], dtype=np.float64)
        pmax = np.array([mapping["x_max"], mapping["y_max"], mapping["z_max"]], dtype=np.float64)
        fmin = np.array([mapping["ex_min"], mapping["ey_min"], mapping["ez_min"]], dtype=np.float64)
        fmax = np.array([mapping["ex_max"], mapping["ey_max"], mapping["ez_max"]], dtype=np.float64)
        return cls(pmin, pmax, fmin, fmax)


@dataclass
class Dataset:
    """Ordered (position, field) records plus normalization/noise provenance."""

    positions: np.ndarray  # (M, 3) meters
    fields: np.ndarray  # (M, 3) V/m
    stats: NormStats | None = None
    noise_intensity: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.fields = np.asarray(self.fields, dtype=np.float64).reshape(-1, 3)
        if len(self.positions) != len(self.fields):
            raise ValueError("positions and fields must have the same length")

    def __len__(self) -> int:
        return len(self.positions)

    def sample(self, i: int) -> Sample:
        p = self.positions[i]
        f = self.fields[i]
        return Sample(Position(*map(float, p)), FieldVector(*map(float, f)))

    def __iter__(self):
        for i in range(len(self)):
            yield self.sample(i)


def generate_grid(
    spec: GridSpec,
    electrodes,
    constants: PhysicalConstants,
    r_min: float = 1e-6,
) -> Dataset:
    """Evaluate the forward field model on every grid node.

    Samples are ordered row-major x -> y -> z (z varies fastest). Raises
    SourceCoincidence if a node falls inside a source exclusion radius.
    """
    if spec.has_overhang:
        warnings.warn(
            f"grid range [{spec.min}, {spec.max}] is not a multiple of step "
            f"{spec.step}; dropping the overhanging point",
            stacklevel=2,
        )
    axis = spec.axis_coordinates()
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    positions = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    fields = np.empty_like(positions)
    for start in range(0, len(positions), _GENERATION_CHUNK):
        stop = start + _GENERATION_CHUNK
        fields[start:stop] = field_at_points(positions[start:stop], electrodes, constants, r_min=r_min)
    return Dataset(positions, fields)


def add_noise(d: Dataset, intensity: float, seed: int) -> Dataset:
    """Additive Gaussian noise on field components, std = intensity * std(component).

    Positions are untouched. intensity 0 returns a value-identical copy.
    Deterministic for a given seed (PCG64 stream).
    """
    if intensity < 0.0:
        raise ValueError(f"noise intensity must be non-negative, got {intensity}")
    if intensity == 0.0:
        return Dataset(d.positions.copy(), d.fields.copy(), stats=d.stats,
                       noise_intensity=0.0, seed=seed)
    sigma = d.fields.std(axis=0)
    rng = np.random.default_rng(seed)
    noisy = d.fields + rng.standard_normal(d.fields.shape) * (intensity * sigma)
    return Dataset(d.positions.copy(), noisy, stats=d.stats,
                   noise_intensity=intensity, seed=seed)


def fit_norm_stats(d: Dataset) -> NormStats:
    """Exact per-component extrema of positions and (possibly noisy) fields."""
    if len(d) < 2:
        raise DegenerateComponent(f"need at least 2 samples to fit stats, got {len(d)}")
    pmin, pmax = d.positions.min(axis=0), d.positions.max(axis=0)
    fmin, fmax = d.fields.min(axis=0), d.fields.max(axis=0)
    names = ("x", "y", "z", "ex", "ey", "ez")
    lows = np.concatenate([pmin, fmin])
    highs = np.concatenate([pmax, fmax])
    for name, lo, hi in zip(names, lows, highs):
        if not hi > lo:
            raise DegenerateComponent(f"component {name} has max == min ({lo})")
    return NormStats(pmin, pmax, fmin, fmax)


def normalize_positions(positions, stats: NormStats) -> np.ndarray:
    p = np.asarray(positions, dtype=np.float64)
    return (p - stats.position_min) / (stats.position_max - stats.position_min)


def denormalize_positions(normalized, stats: NormStats) -> np.ndarray:
    p = np.asarray(normalized, dtype=np.float64)
    return stats.position_min + p * (stats.position_max - stats.position_min)


def normalize_fields(fields, stats: NormStats) -> np.ndarray:
    f = np.asarray(fields, dtype=np.float64)
    return (f - stats.field_min) / (stats.field_max - stats.field_min)


def normalize(d: Dataset, stats: NormStats) -> Dataset:
    """Affine per-component map to [0, 1] on the fitted data.

    Out-of-range inputs map outside [0, 1] by the same rule, which is what
    off-grid trajectory points need.
    """
    return Dataset(
        normalize_positions(d.positions, stats),
        normalize_fields(d.fields, stats),
        stats=stats,
        noise_intensity=d.noise_intensity,
        seed=d.seed,
    )


def denormalize_position(p_norm, stats: NormStats) -> Position:
    """Inverse of the position half of normalize(), for a single point."""
    arr = p_norm.as_array() if isinstance(p_norm, Position) else np.asarray(p_norm, dtype=np.float64)
    out = denormalize_positions(arr, stats)
    return Position(float(out[0]), float(out[1]), float(out[2]))


def split(d: Dataset, holdout_fraction: float, seed: int):
    """Deterministic shuffled split into (train, validation)."""
    if not 0.0 <= holdout_fraction < 1.0:
        raise ValueError(f"holdout fraction must be in [0, 1), got {holdout_fraction}")
    m = len(d)
    n_val = int(round(m * holdout_fraction))
    perm = np.random.default_rng(seed).permutation(m)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    train = Dataset(d.positions[train_idx], d.fields[train_idx], stats=d.stats,
                    noise_intensity=d.noise_intensity, seed=d.seed)
    val = Dataset(d.positions[val_idx], d.fields[val_idx], stats=d.stats,
                  noise_intensity=d.noise_intensity, seed=d.seed)
    return train, val


def save_csv(d: Dataset, path) -> None:
    """Write the x,y,z,ex,ey,ez schema with full round-trip precision."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(CSV_HEADER + "\n")
        for p, f in zip(d.positions, d.fields):
            fh.write(
                f"{float(p[0])!r},{float(p[1])!r},{float(p[2])!r},"
                f"{float(f[0])!r},{float(f[1])!r},{float(f[2])!r}\n"
            )


def load_csv(path) -> Dataset:
    """Read a dataset CSV, reporting schema violations with their row number."""
    positions, fields = [], []
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise CsvSchemaError(f"{path}: row 1: expected header '{CSV_HEADER}', got '{header}'")
        for row_number, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 6:
                raise CsvSchemaError(f"{path}: row {row_number}: expected 6 columns, got {len(parts)}")
            try:
                values = [float(v) for v in parts]
            except ValueError as exc:
                raise CsvSchemaError(f"{path}: row {row_number}: {exc}") from None
            positions.append(values[:3])
            fields.append(values[3:])
    if not positions:
        raise CsvSchemaError(f"{path}: no data rows")
    return Dataset(np.array(positions), np.array(fields))


def save_stats(stats: NormStats, path) -> None:
    """Key-value sidecar with the twelve normalization extrema."""
    mapping = stats.as_mapping()
    with open(path, "w", encoding="ascii") as fh:
        for key in STATS_KEYS:
            fh.write(f"{key}={mapping[key]!r}\n")


def load_stats(path) -> NormStats:
    mapping = {}
    with open(path, "r", encoding="ascii") as fh:
        for row_number, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CsvSchemaError(f"{path}: row {row_number}: expected key=value")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in STATS_KEYS:
                raise CsvSchemaError(f"{path}: row {row_number}: unknown key '{key}'")
            try:
                mapping[key] = float(value)
            except ValueError as exc:
                raise CsvSchemaError(f"{path}: row {row_number}: {exc}") from None
    return NormStats.from_mapping(mapping)
