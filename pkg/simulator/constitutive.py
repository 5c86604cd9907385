"""
Constitutive Models
Plane-strain elasticity, Glen's-law creep with return mapping and the
temperature dependence of ice creep and strength
"""

import logging
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

logger = logging.getLogger(__name__)

GAS_CONSTANT = 8.314  # J/(mol K)
ZERO_CELSIUS = 273.15  # K

# Voigt order used everywhere: [xx, yy, zz, xy], engineering shear strain
VOIGT_SIZE = 4
DEVIATORIC_PROJECTION = np.array([
    [2.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0, 0.0],
    [-1.0 / 3.0, 2.0 / 3.0, -1.0 / 3.0, 0.0],
    [-1.0 / 3.0, -1.0 / 3.0, 2.0 / 3.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
])

ArrayLike = Union[float, np.ndarray]


class MaterialError(ValueError):
    """Invalid material constants or temperature data"""


class ConvergenceError(RuntimeError):
    """A local or global iterative solve did not converge"""

    def __init__(self, message: str, history: Optional[List[float]] = None):
        super().__init__(message)
        self.history = list(history or [])


class SolidProperties(BaseModel):
    """Elastic, creep, thermal and fracture constants of one solid material"""

    model_config = ConfigDict(frozen=True)

    name: str
    E: float = Field(gt=0)
    nu: float = Field(gt=0, lt=0.5)
    rho: float = Field(gt=0)
    A0: float = Field(default=0.0, ge=0)
    Qc: float = Field(default=0.0, ge=0)
    n: float = Field(default=3.0, ge=1)
    Tref: float = Field(default=ZERO_CELSIUS, gt=0)
    k: float = Field(default=2.0, gt=0)
    cp: float = Field(default=2115.0, gt=0)
    ft0: float = Field(default=2.0e6, gt=0)
    fdeg: float = Field(default=0.068e6, ge=0)
    Gc: float = Field(default=10.0, gt=0)
    latent_heat: float = Field(default=335000.0, gt=0)


class TemperatureProfile(BaseModel):
    """Piecewise-linear ice temperature (degC) against depth below the surface (m)"""

    model_config = ConfigDict(frozen=True)

    depths: Tuple[float, ...]
    temperatures: Tuple[float, ...]

    @field_validator("temperatures")
    @classmethod
    def _not_above_melting(cls, values: Tuple[float, ...]) -> Tuple[float, ...]:
        if any(t > 0.0 for t in values):
            raise ValueError("ice temperatures must not exceed 0 degC")
        return values

    @model_validator(mode="after")
    def _check_table(self) -> "TemperatureProfile":
        if len(self.depths) != len(self.temperatures) or len(self.depths) == 0:
            raise ValueError("depth and temperature columns must have the same, non-zero length")
        if self.depths[0] != 0.0:
            raise ValueError("temperature profile must start at the surface (depth 0)")
        if any(b <= a for a, b in zip(self.depths, self.depths[1:])):
            raise ValueError("profile depths must be strictly increasing")
        return self

    @classmethod
    def constant(cls, temperature: float, thickness: float) -> "TemperatureProfile":
        return cls(depths=(0.0, float(thickness)), temperatures=(float(temperature),) * 2)

    def temperature_at(self, depth: ArrayLike) -> ArrayLike:
        """Temperature in degC, clamped beyond the ends of the table"""
        return np.interp(depth, self.depths, self.temperatures)

    def covers(self, thickness: float) -> bool:
        return self.depths[-1] >= thickness - 1e-9 * max(thickness, 1.0)


def load_temperature_profile(path: Union[str, Path]) -> TemperatureProfile:
    """Read a two-column (depth_m, T_degC) text file"""
    try:
        table = np.loadtxt(path, comments="#", delimiter=None, ndmin=2)
    except (OSError, ValueError) as e:
        raise MaterialError(f"cannot read temperature profile {path}: {e}") from e
    if table.shape[1] != 2:
        raise MaterialError(f"temperature profile {path} must have exactly two columns")
    try:
        profile = TemperatureProfile(depths=tuple(table[:, 0]), temperatures=tuple(table[:, 1]))
    except ValueError as e:
        raise MaterialError(f"invalid temperature profile {path}: {e}") from e
    logger.info(f"Loaded temperature profile with {len(profile.depths)} rows from {path}")
    return profile


def plane_strain_stiffness(E: float, nu: float) -> np.ndarray:
    """4x4 plane-strain stiffness mapping [exx, eyy, ezz, gxy] to [sxx, syy, szz, sxy]"""
    if E <= 0:
        raise MaterialError(f"Young's modulus must be positive, got {E}")
    if nu >= 0.5 or nu <= -1.0:
        raise MaterialError(f"Poisson ratio must lie in (-1, 0.5), got {nu}")
    factor = E / ((1.0 + nu) * (1.0 - 2.0 * nu))
    D = np.zeros((VOIGT_SIZE, VOIGT_SIZE))
    D[:3, :3] = nu
    D[[0, 1, 2], [0, 1, 2]] = 1.0 - nu
    D[3, 3] = 0.5 * (1.0 - 2.0 * nu)
    return factor * D


def creep_coefficient(T: ArrayLike, A0: float = 5e-24, Qc: float = 150e3,
                      Tref: float = ZERO_CELSIUS) -> ArrayLike:
    """Arrhenius creep coefficient A(T) in Pa^-3 s^-1, T in Kelvin"""
    T_arr = np.asarray(T, dtype=float)
    if np.any(T_arr <= 0.0):
        raise MaterialError("absolute temperature must be positive")
    A = A0 * np.exp(-Qc / GAS_CONSTANT * (1.0 / T_arr - 1.0 / Tref))
    return float(A) if A.ndim == 0 else A


def tensile_strength(T: ArrayLike, ft0: float = 2.0e6, fdeg: float = 0.068e6) -> ArrayLike:
    """
    Tensile strength in Pa for an ice temperature T in degC.

    Strength grows linearly as the ice gets colder; 0 degC gives ft0.
    """
    ft = ft0 - fdeg * np.asarray(T, dtype=float)
    return float(ft) if ft.ndim == 0 else ft


def stress(eps_total: np.ndarray, eps_v: np.ndarray, D: np.ndarray) -> np.ndarray:
    """sigma = D (eps - eps_v); works on any leading batch shape"""
    elastic = np.asarray(eps_total) - np.asarray(eps_v)
    if D.ndim == 2:
        return elastic @ D.T
    return np.einsum("...ij,...j->...i", D, elastic)


def deviatoric_norm(sigma: np.ndarray) -> np.ndarray:
    """sqrt(s^T s) of the deviatoric stress vector"""
    s = np.asarray(sigma) @ DEVIATORIC_PROJECTION.T
    return np.sqrt(np.sum(s * s, axis=-1))


def update_viscous_strain(eps_total: np.ndarray, eps_v_old: np.ndarray, D: np.ndarray,
                          A: ArrayLike, n: float, dt: float, tol: float = 1e-12,
                          max_iterations: int = 50) -> np.ndarray:
    """
    Implicit return map for the Glen's-law viscous strain.

    Solves eps_v = eps_v_old + dt A (s^T s)^((n-1)/2) s with the deviatoric stress
    s = P D (eps_total - eps_v), batched over all leading dimensions of the inputs.
    """
    if dt <= 0:
        raise ValueError(f"time step must be positive, got {dt}")

    eps_total = np.asarray(eps_total, dtype=float)
    eps_v_old = np.asarray(eps_v_old, dtype=float)
    batch_shape = eps_total.shape[:-1]
    e_tot = eps_total.reshape(-1, VOIGT_SIZE)
    e_old = np.broadcast_to(eps_v_old, eps_total.shape).reshape(-1, VOIGT_SIZE)
    m = e_tot.shape[0]

    A_pt = np.broadcast_to(np.asarray(A, dtype=float), batch_shape).reshape(-1)
    if D.ndim == 2:
        D_pt = np.broadcast_to(D, (m, VOIGT_SIZE, VOIGT_SIZE))
    else:
        D_pt = np.broadcast_to(D, batch_shape + (VOIGT_SIZE, VOIGT_SIZE)).reshape(m, VOIGT_SIZE, VOIGT_SIZE)

    result = e_old.copy()
    active = np.flatnonzero(A_pt > 0.0)
    if active.size == 0:
        return result.reshape(eps_total.shape)

    PD = np.einsum("ij,mjk->mik", DEVIATORIC_PROJECTION, D_pt[active])
    s_trial = np.einsum("mij,mj->mi", PD, e_tot[active] - e_old[active])
    c = dt * A_pt[active]
    x = np.zeros_like(s_trial)
    eye = np.eye(VOIGT_SIZE)

    def residual(x_now: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        s = s_trial - np.einsum("mij,mj->mi", PD, x_now)
        norm2 = np.sum(s * s, axis=1)
        phi = norm2 ** (0.5 * (n - 1.0))
        return x_now - (c * phi)[:, None] * s, s, norm2

    trial_rate = np.linalg.norm((c * np.sum(s_trial ** 2, axis=1) ** (0.5 * (n - 1.0)))[:, None] * s_trial, axis=1)
    history: List[float] = []
    R, s, norm2 = residual(x)
    for _ in range(max_iterations):
        scale = np.maximum(np.maximum(trial_rate, np.linalg.norm(x, axis=1)), 1e-300)
        rel = np.linalg.norm(R, axis=1) / scale
        history.append(float(rel.max()))
        if rel.max() <= tol:
            break

        phi = norm2 ** (0.5 * (n - 1.0))
        dphi = np.zeros_like(norm2)
        positive = norm2 > 0.0
        dphi[positive] = (n - 1.0) * norm2[positive] ** (0.5 * (n - 3.0))
        inner = dphi[:, None, None] * np.einsum("mi,mj->mij", s, s) + phi[:, None, None] * eye
        J = eye + c[:, None, None] * np.einsum("mij,mjk->mik", inner, PD)
        dx = np.linalg.solve(J, -R[..., None])[..., 0]
        if np.max(np.linalg.norm(dx, axis=1) / scale) < 1e-15:
            break  # stagnated at round-off

        # backtrack when a full step increases the residual
        step = 1.0
        old_norm = np.linalg.norm(R, axis=1)
        for _ in range(20):
            x_try = x + step * dx
            R_try, s_try, norm2_try = residual(x_try)
            if np.all(np.linalg.norm(R_try, axis=1) <= old_norm * (1.0 + 1e-12) + 1e-300):
                break
            step *= 0.5
        x, R, s, norm2 = x_try, R_try, s_try, norm2_try
    else:
        raise ConvergenceError(
            f"viscous return map did not converge in {max_iterations} iterations "
            f"(dt={dt:g} s is probably too large)", history)

    result[active] = e_old[active] + x
    return result.reshape(eps_total.shape)


def maxwell_time(sigma_dev_eff: ArrayLike, T: ArrayLike, E: float = 9e9, nu: float = 0.33,
                 A0: float = 5e-24, Qc: float = 150e3, Tref: float = ZERO_CELSIUS,
                 n: float = 3.0) -> ArrayLike:
    """Maxwell relaxation time 2(1+nu)/(E A(T) sigma^(n-1)); +inf where stress or A vanish"""
    sigma = np.asarray(sigma_dev_eff, dtype=float)
    A = np.asarray(creep_coefficient(T, A0, Qc, Tref)) if A0 > 0 else np.zeros_like(sigma)
    rate = E * A * np.power(np.abs(sigma), n - 1.0)
    with np.errstate(divide="ignore"):
        tau = np.where(rate > 0.0, 2.0 * (1.0 + nu) / np.where(rate > 0.0, rate, 1.0), np.inf)
    return float(tau) if tau.ndim == 0 else tau
