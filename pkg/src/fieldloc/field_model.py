"""Point-charge electrostatics: the forward map from positions to fields.

Every electrode system is modeled as a single point charge. The field at a
point is the component-wise superposition of per-charge Coulomb terms. All
arithmetic is float64; evaluation inside a small exclusion radius around any
source is an error rather than a clamped value.
"""

import math
from dataclasses import dataclass

import numpy as np

# Exclusion radius around each source (meters). Evaluating closer is an error.
DEFAULT_EXCLUSION_RADIUS = 1e-6


class SourceCoincidence(Exception):
    """Field requested at (or within the exclusion radius of) a source."""


@dataclass(frozen=True)
class Position:
    """A point in 3-D space, meters."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise ValueError(f"position components must be finite, got {self!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


@dataclass(frozen=True)
class FieldVector:
    """Electric field components, volts/meter."""

    ex: float
    ey: float
    ez: float

    def as_array(self) -> np.ndarray:
        return np.array([self.ex, self.ey, self.ez], dtype=np.float64)

    def magnitude(self) -> float:
        return float(np.linalg.norm(self.as_array()))


@dataclass(frozen=True)
class ElectrodeSystem:
    """A charged source: position in meters, charge in coulombs."""

    source: Position
    charge: float

    def __post_init__(self):
        if not math.isfinite(self.charge) or self.charge == 0.0:
            raise ValueError(f"charge must be finite and nonzero, got {self.charge}")


@dataclass(frozen=True)
class PhysicalConstants:
    """Injected constants so tests can use k = 1/(4*pi*eps0) of their choosing."""

    epsilon0: float = 8.854e-12  # vacuum permittivity, F/m

    @property
    def coulomb_constant(self) -> float:
        return 1.0 / (4.0 * math.pi * self.epsilon0)


def field_at_points(
    points,
    electrodes,
    constants: PhysicalConstants,
    r_min: float = DEFAULT_EXCLUSION_RADIUS,
) -> np.ndarray:
    """Vectorized superposition field at an (N, 3) array of points.

    Returns an (N, 3) float64 array. Raises SourceCoincidence if any point
    lies within ``r_min`` of any source.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) array of points, got shape {pts.shape}")
    if not electrodes:
        raise ValueError("electrode list must be non-empty")
    total = np.zeros_like(pts)
    k = constants.coulomb_constant
    for e in electrodes:
        d = pts - e.source.as_array()
        r2 = np.einsum("ij,ij->i", d, d)
        r = np.sqrt(r2)
        if np.any(r <= r_min):
            idx = int(np.argmin(r))
            raise SourceCoincidence(
                f"point {pts[idx]} is within {r_min} m of source at "
                f"({e.source.x}, {e.source.y}, {e.source.z})"
            )
        total += (k * e.charge) * d / (r2 * r)[:, None]
    return total


def field_of_single_charge(
    p: Position,
    e: ElectrodeSystem,
    constants: PhysicalConstants,
    r_min: float = DEFAULT_EXCLUSION_RADIUS,
) -> FieldVector:
    """Coulomb field of one point charge: q * (p - source) / (4 pi eps0 r^3)."""
    out = field_at_points(p.as_array()[None, :], [e], constants, r_min=r_min)[0]
    return FieldVector(float(out[0]), float(out[1]), float(out[2]))


def field_at(
    p: Position,
    electrodes,
    constants: PhysicalConstants,
    r_min: float = DEFAULT_EXCLUSION_RADIUS,
) -> FieldVector:
    """Superposed field of all electrode systems at a single point."""
    out = field_at_points(p.as_array()[None, :], electrodes, constants, r_min=r_min)[0]
    return FieldVector(float(out[0]), float(out[1]), float(out[2]))


def nearest_source_distance(p: Position, electrodes) -> float:
    """Distance from p to the closest source, meters."""
    pa = p.as_array()
    return min(float(np.linalg.norm(pa - e.source.as_array())) for e in electrodes)


def numerical_divergence(
    p: Position,
    electrodes,
    constants: PhysicalConstants,
    h: float,
    r_min: float = DEFAULT_EXCLUSION_RADIUS,
) -> float:
    """Central-difference estimate of div E at p with stencil step h.

    In a charge-free region the exact divergence is zero, so this is a
    consistency check on the forward model rather than a production quantity.
    """
    if h <= 0.0:
        raise ValueError(f"stencil step must be positive, got {h}")
    pa = p.as_array()
    stencil = np.repeat(pa[None, :], 6, axis=0)
    for axis in range(3):
        stencil[2 * axis, axis] += h
        stencil[2 * axis + 1, axis] -= h
    fields = field_at_points(stencil, electrodes, constants, r_min=r_min)
    div = 0.0
    for axis in range(3):
        div += (fields[2 * axis, axis] - fields[2 * axis + 1, axis]) / (2.0 * h)
    return float(div)
