from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from errors import InvalidParameters

SQRT3 = math.sqrt(3.0)

# Column order of every parameter vector and Jacobian in this package.
PARAM_NAMES: Tuple[str, str, str, str] = ('c1', 'c2', 'm1', 'm2')


@dataclass(frozen=True)
class GaussianParams:
    """Parameters of F(x) = C1 exp(-|x - m|^2 / C2)."""

    c1: float
    c2: float
    m1: float
    m2: float

    def __post_init__(self) -> None:
        values = (self.c1, self.c2, self.m1, self.m2)
        if not all(math.isfinite(v) for v in values):
            raise InvalidParameters(f"Gaussian parameters must be finite, got {values}")
        if self.c1 <= 0 or self.c2 <= 0:
            raise InvalidParameters(f"C1 and C2 must be positive, got C1={self.c1}, C2={self.c2}")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.m1, self.m2], dtype=float)

    @property
    def mod_m(self) -> float:
        return math.hypot(self.m1, self.m2)

    @property
    def angle(self) -> float:
        """Full-quadrant direction of the center, atan2(m2, m1)."""
        return math.atan2(self.m2, self.m1)

    def as_array(self) -> np.ndarray:
        return np.array([self.c1, self.c2, self.m1, self.m2], dtype=float)

    def with_center(self, center: Sequence[float]) -> 'GaussianParams':
        return GaussianParams(self.c1, self.c2, float(center[0]), float(center[1]))

    def with_amplitude(self, c1: float) -> 'GaussianParams':
        return GaussianParams(c1, self.c2, self.m1, self.m2)

    @classmethod
    def from_array(cls, values: Iterable[float]) -> 'GaussianParams':
        c1, c2, m1, m2 = (float(v) for v in values)
        return cls(c1, c2, m1, m2)

    @classmethod
    def parse(cls, text: str) -> 'GaussianParams':
        """Parse the CLI form 'C1,C2,m1,m2'."""
        parts = [p.strip() for p in text.split(',') if p.strip()]
        if len(parts) != 4:
            raise InvalidParameters(f"Expected 'C1,C2,m1,m2', got '{text}'")
        try:
            return cls.from_array(float(p) for p in parts)
        except ValueError as exc:
            if isinstance(exc, InvalidParameters):
                raise
            raise InvalidParameters(f"Could not parse parameters '{text}': {exc}") from exc


@dataclass(frozen=True)
class MeasurementQuad:
    """Measurements (center, north, southwest, southeast) of one canonical neighborhood."""

    mu: Tuple[float, float, float, float]
    l: float

    def __post_init__(self) -> None:
        if len(self.mu) != 4:
            raise InvalidParameters(f"A measurement quad needs 4 values, got {len(self.mu)}")
        if not all(math.isfinite(v) for v in self.mu):
            raise InvalidParameters(f"Measurements must be finite, got {self.mu}")
        if not (self.l > 0 and math.isfinite(self.l)):
            raise InvalidParameters(f"Edge length must be positive, got {self.l}")

    def as_array(self) -> np.ndarray:
        return np.array(self.mu, dtype=float)


class NoiseStream:
    """Seeded stream of N(0, sigma^2) draws.

    Normals come from the Box-Muller cosine branch applied to consecutive pairs
    of PCG64 uniforms, u in (0, 1]. Every draw consumes exactly two uniforms, so
    the sequence depends only on (seed, number of draws), never on chunking.
    """

    def __init__(self, sigma: float, seed: Union[int, np.random.SeedSequence]):
        if not sigma >= 0:
            raise InvalidParameters(f"Noise sigma must be >= 0, got {sigma}")
        self.sigma = float(sigma)
        self.seed = seed
        self._rng = np.random.Generator(np.random.PCG64(seed))
        self.drawn = 0

    def standard_normal(self, count: int) -> np.ndarray:
        uniforms = self._rng.random(2 * count).reshape(count, 2)
        radius = np.sqrt(-2.0 * np.log1p(-uniforms[:, 0]))
        self.drawn += count
        return radius * np.cos(2.0 * math.pi * uniforms[:, 1])

    def draw(self, count: int) -> np.ndarray:
        if self.sigma == 0.0:
            # Keep the stream position identical to a noisy run.
            self._rng.random(2 * count)
            self.drawn += count
            return np.zeros(count)
        return self.sigma * self.standard_normal(count)


@dataclass(frozen=True)
class NoiseModel:
    sigma: float
    seed: int = 0

    def __post_init__(self) -> None:
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise InvalidParameters(f"Noise sigma must be finite and >= 0, got {self.sigma}")

    def stream(self) -> NoiseStream:
        return NoiseStream(self.sigma, self.seed)


def canonical_offsets(l: float) -> np.ndarray:
    """Positions of the four sensors of the canonical frame, rows ordered mu1..mu4."""
    half = 0.5 * l
    return np.array([
        [0.0, 0.0],
        [0.0, l],
        [-SQRT3 * half, -half],
        [SQRT3 * half, -half],
    ])


def evaluate(params: GaussianParams, point: Union[Sequence[float], np.ndarray]) -> Union[float, np.ndarray]:
    """Field value at `point`; accepts a single (x, y) or an array of shape (..., 2)."""
    pts = np.asarray(point, dtype=float)
    d1 = pts[..., 0] - params.m1
    d2 = pts[..., 1] - params.m2
    values = params.c1 * np.exp(-(d1 * d1 + d2 * d2) / params.c2)
    if values.ndim == 0:
        return float(values)
    return values


def _phi_array(theta: np.ndarray, l: float) -> np.ndarray:
    c1, c2, m1, m2 = theta
    offsets = canonical_offsets(l)
    sq = (offsets[:, 0] - m1) ** 2 + (offsets[:, 1] - m2) ** 2
    return c1 * np.exp(-sq / c2)


def forward_phi(params: GaussianParams, l: float) -> MeasurementQuad:
    if not l > 0:
        raise InvalidParameters(f"Edge length must be positive, got {l}")
    mu = _phi_array(params.as_array(), l)
    return MeasurementQuad(tuple(float(v) for v in mu), float(l))


def jacobian_phi(params: GaussianParams, l: float, step: float = 1e-6, stencil: int = 2) -> np.ndarray:
    """Central finite-difference Jacobian of the forward map.

    Rows follow mu1..mu4, columns follow PARAM_NAMES (C1, C2, m1, m2). The step
    for parameter k is step * max(|p_k|, 1); the C2 step is capped at C2 / 2 so
    the perturbed width stays positive. `stencil` is 2 (second order) or 4
    (fourth order).
    """
    if not l > 0:
        raise InvalidParameters(f"Edge length must be positive, got {l}")
    if not step > 0:
        raise InvalidParameters(f"Finite-difference step must be positive, got {step}")
    if stencil not in (2, 4):
        raise InvalidParameters(f"Stencil must be 2 or 4, got {stencil}")
    theta = params.as_array()
    jac = np.empty((4, 4))
    for k in range(4):
        h = step * max(abs(theta[k]), 1.0)
        if k == 1:
            h = min(h, 0.5 * theta[1] / (2 if stencil == 4 else 1))
        e = np.zeros(4)
        e[k] = h
        forward = _phi_array(theta + e, l)
        backward = _phi_array(theta - e, l)
        if stencil == 2:
            jac[:, k] = (forward - backward) / (2.0 * h)
        else:
            forward2 = _phi_array(theta + 2 * e, l)
            backward2 = _phi_array(theta - 2 * e, l)
            jac[:, k] = (8.0 * (forward - backward) - (forward2 - backward2)) / (12.0 * h)
    return jac


def add_noise(quad: MeasurementQuad, noise: NoiseModel, stream: Optional[NoiseStream] = None) -> MeasurementQuad:
    """Perturb the quad with i.i.d. Gaussian noise.

    Without `stream` a fresh stream is seeded from `noise.seed`, so repeated calls
    give identical output; pass a stream to keep drawing from one experiment RNG.
    """
    source = stream if stream is not None else noise.stream()
    delta = source.draw(4)
    return MeasurementQuad(tuple(float(v) for v in quad.as_array() + delta), quad.l)


def perturb_values(values: np.ndarray, stream: NoiseStream) -> np.ndarray:
    """Add one noise draw per node, consumed in node-index order."""
    values = np.asarray(values, dtype=float)
    return values + stream.draw(values.shape[0])
