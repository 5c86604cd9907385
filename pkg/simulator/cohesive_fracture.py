"""
Cohesive Fracture
Exponential traction-separation law, stress-based insertion criterion and
the process-zone length estimate used to size the crack-path elements
"""

import logging
from dataclasses import dataclass
from typing import Union

import numpy as np

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

# exp() argument cap for strongly negative openings (interpenetration penalty)
_MAX_EXPONENT = 200.0


@dataclass(frozen=True)
class CohesiveParams:
    """Strength, fracture energy and local frame of one interface segment"""

    f_t: float
    Gc: float = 10.0
    normal: tuple = (1.0, 0.0)
    tangent: tuple = (0.0, -1.0)

    def __post_init__(self):
        if self.f_t <= 0 or self.Gc <= 0:
            raise ValueError(f"cohesive strength and fracture energy must be positive "
                             f"(f_t={self.f_t}, Gc={self.Gc})")
        n = np.asarray(self.normal, dtype=float)
        s = np.asarray(self.tangent, dtype=float)
        if abs(np.linalg.norm(n) - 1.0) > 1e-12 or abs(np.linalg.norm(s) - 1.0) > 1e-12:
            raise ValueError("interface normal and tangent must be unit vectors")
        if abs(float(n @ s)) > 1e-12:
            raise ValueError("interface normal and tangent must be orthogonal")

    @property
    def rotation(self) -> np.ndarray:
        """Rows map global (x, y) components to local (tangential, normal) ones"""
        return np.array([self.tangent, self.normal], dtype=float)

    @property
    def critical_opening(self) -> float:
        """Opening at which the traction has decayed to f_t/e"""
        return self.Gc / self.f_t


def _decay(opening: ArrayLike, f_t: ArrayLike, Gc: ArrayLike) -> np.ndarray:
    return np.exp(np.minimum(-np.asarray(opening, dtype=float) * f_t / Gc, _MAX_EXPONENT))


def cohesive_traction(opening: ArrayLike, f_t: ArrayLike, Gc: ArrayLike = 10.0) -> ArrayLike:
    """Closing traction t = f_t exp(-opening f_t / Gc); grows for negative openings"""
    t = np.asarray(f_t) * _decay(opening, f_t, Gc)
    return float(t) if np.ndim(t) == 0 else t


def cohesive_stiffness(opening: ArrayLike, f_t: ArrayLike, Gc: ArrayLike = 10.0) -> ArrayLike:
    """d traction / d opening, always negative"""
    f_t = np.asarray(f_t, dtype=float)
    k = -(f_t * f_t / Gc) * _decay(opening, f_t, Gc)
    return float(k) if np.ndim(k) == 0 else k


def check_propagation(sigma_normal: float, f_t_local: float) -> bool:
    """A new segment is inserted once the tip normal stress strictly exceeds the strength"""
    return bool(sigma_normal > f_t_local)


def process_zone_length(E: float, Gc: float, f_t: float) -> float:
    """Characteristic cohesive-zone length E Gc / f_t^2"""
    if E <= 0 or Gc <= 0 or f_t <= 0:
        raise ValueError(f"process-zone length needs positive E, Gc and f_t (got {E}, {Gc}, {f_t})")
    return E * Gc / f_t ** 2


def tip_normal_stress(sigma: np.ndarray, weights: np.ndarray, normal: np.ndarray) -> float:
    """
    Weighted average of n.sigma.n over integration points around a crack tip.

    sigma holds Voigt stresses (..., 4), weights the matching w*detJ values.
    """
    sigma = np.asarray(sigma, dtype=float).reshape(-1, 4)
    weights = np.asarray(weights, dtype=float).reshape(-1)
    nx, ny = normal
    sigma_nn = sigma[:, 0] * nx * nx + sigma[:, 1] * ny * ny + 2.0 * sigma[:, 3] * nx * ny
    total = weights.sum()
    if total <= 0:
        raise ValueError("tip stress average needs a positive total weight")
    return float(np.dot(weights, sigma_nn) / total)


def dissipated_energy(max_opening: ArrayLike, f_t: ArrayLike, Gc: ArrayLike = 10.0) -> ArrayLike:
    """Work done against the cohesive traction when opening monotonically from zero"""
    return np.asarray(Gc) * (1.0 - _decay(max_opening, f_t, Gc))
