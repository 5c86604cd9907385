"""
Channel Thermo-Hydraulics
Turbulent flux law, frictional and conductive heat fluxes and the local
per-point solve for flux, melt thickness and total aperture
"""

import logging
import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import erfc

from constitutive import ConvergenceError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]


class FlowParams(BaseModel):
    """Water and wall-roughness constants of the fracture flow"""

    model_config = ConfigDict(frozen=True)

    rho_w: float = Field(default=1000.0, gt=0)
    K_w: float = Field(default=1e9, gt=0)
    k_wall: float = Field(default=1e-2, gt=0)
    f0: float = Field(default=0.143, gt=0)
    gravity: float = Field(default=9.81, ge=0)
    h_min: float = Field(default=1e-6, gt=0)
    grad_eps: float = Field(default=1e-3, gt=0)
    mu_w: float = Field(default=1.8e-3, gt=0)

    @property
    def flux_coefficient(self) -> float:
        """c in q = -c h^(5/3) |G|^(-1/2) G"""
        return 2.0 * self.rho_w ** -0.5 * self.k_wall ** (-1.0 / 6.0) * self.f0 ** -0.5


class ThermalParams(BaseModel):
    """Ice constants entering melting and conduction at the channel walls"""

    model_config = ConfigDict(frozen=True)

    rho_i: float = Field(default=910.0, gt=0)
    latent_heat: float = Field(default=335000.0, gt=0)
    k: float = Field(default=2.0, gt=0)
    cp: float = Field(default=2115.0, gt=0)
    T_w: float = 0.0
    T_inf: float = Field(default=0.0, le=0)

    @property
    def diffusivity(self) -> float:
        return self.k / (self.rho_i * self.cp)


def _check_aperture(h: ArrayLike, params: FlowParams) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    if np.any(h < params.h_min * (1.0 - 1e-12)):
        raise ValueError(f"aperture below the floor h_min={params.h_min:g} m; clamp before calling")
    return h


def effective_aperture(h: ArrayLike, params: FlowParams) -> np.ndarray:
    """Smooth floor 0.5 (h + sqrt(h^2 + h_min^2)); tends to h above h_min and to h_min/2 at h = 0"""
    h = np.asarray(h, dtype=float)
    return 0.5 * (h + np.sqrt(h * h + params.h_min ** 2))


def effective_aperture_slope(h: ArrayLike, params: FlowParams) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    return 0.5 * (1.0 + h / np.sqrt(h * h + params.h_min ** 2))


def friction_factor(h: ArrayLike, params: FlowParams) -> ArrayLike:
    """Darcy-Weisbach factor f0 (k_wall / h)^(1/3)"""
    h = _check_aperture(h, params)
    f = params.f0 * (params.k_wall / h) ** (1.0 / 3.0)
    return float(f) if f.ndim == 0 else f


def _gradient_factor(G: np.ndarray, eps: float) -> np.ndarray:
    # G |G|^(-1/2), smoothed so that it is differentiable and zero at G = 0
    return G * (G * G + eps * eps) ** -0.25


def _gradient_factor_slope(G: np.ndarray, eps: float) -> np.ndarray:
    g2 = G * G + eps * eps
    return (0.5 * G * G + eps * eps) * g2 ** -1.25


def fluid_flux(h: ArrayLike, G: ArrayLike, params: FlowParams) -> ArrayLike:
    """Volumetric flux per unit width; points down the effective gradient G"""
    h = _check_aperture(h, params)
    q = -params.flux_coefficient * h ** (5.0 / 3.0) * _gradient_factor(np.asarray(G, dtype=float), params.grad_eps)
    return float(q) if q.ndim == 0 else q


def heat_flux_flow(q: ArrayLike, G: ArrayLike) -> ArrayLike:
    """Frictional heat per wall area, -q G (non-negative for physical flow)"""
    return -np.asarray(q) * np.asarray(G)


def heat_flux_ice(T_inf: ArrayLike, elapsed: ArrayLike, params: ThermalParams) -> ArrayLike:
    """Conductive flux at a 0 degC wall into ice at T_inf, negative for cold ice"""
    elapsed = np.asarray(elapsed, dtype=float)
    if np.any(elapsed <= 0.0):
        raise ValueError("time since wall exposure must be positive")
    j = (2.0 * math.sqrt(params.k * params.rho_i * params.cp) * (np.asarray(T_inf) - params.T_w)
         / np.sqrt(math.pi * elapsed))
    return float(j) if np.ndim(j) == 0 else j


def wall_temperature(distance: ArrayLike, elapsed: float, T_inf: float, params: ThermalParams) -> ArrayLike:
    """Temperature at a distance from a wall held at T_w since `elapsed` seconds"""
    if elapsed <= 0:
        raise ValueError("time since wall exposure must be positive")
    eta = np.asarray(distance, dtype=float) / (2.0 * math.sqrt(params.diffusivity * elapsed))
    return T_inf + (params.T_w - T_inf) * erfc(eta)


def thermal_length(elapsed: float, params: ThermalParams) -> float:
    """Diffusion length sqrt(kappa t) of the wall temperature disturbance"""
    return math.sqrt(params.diffusivity * elapsed)


def reynolds_number(q: ArrayLike, params: FlowParams) -> ArrayLike:
    """Channel Reynolds number rho_w |q| / mu_w"""
    return params.rho_w * np.abs(q) / params.mu_w


def dominance_ratio(h: float, G: float, elapsed: float, T_inf: float,
                    flow: FlowParams, thermal: ThermalParams) -> float:
    """Frictional heating over conductive loss; +inf when the ice is temperate"""
    if T_inf >= thermal.T_w:
        return math.inf
    h = float(_check_aperture(h, flow))
    j_flow = flow.flux_coefficient * h ** (5.0 / 3.0) * abs(G) ** 1.5
    j_ice = heat_flux_ice(T_inf, elapsed, thermal)
    return float(j_flow / -j_ice)


@dataclass
class LocalSolution:
    """Converged channel unknowns at a batch of integration points and their
    derivatives with respect to the effective gradient G and the opening"""

    q: np.ndarray
    h_melt: np.ndarray
    h: np.ndarray
    j_flow: np.ndarray
    j_ice: np.ndarray
    dq_dG: np.ndarray
    dq_djump: np.ndarray
    dhm_dG: np.ndarray
    dhm_djump: np.ndarray
    dh_dG: np.ndarray
    dh_djump: np.ndarray
    iterations: int


def local_newton(G: ArrayLike, jump: ArrayLike, h_melt_old: ArrayLike, elapsed: ArrayLike,
                 T_inf: ArrayLike, dt: float, flow: FlowParams, thermal: ThermalParams,
                 thermal_active: bool = True, tol: float = 1e-10,
                 max_iterations: int = 25) -> LocalSolution:
    """
    Solve flux law, wall energy balance and aperture identity at every point.

    Unknowns per point are (q, h_melt, h). The energy balance reads
    rho_i L (h_melt - h_melt_old)/dt + q G - j_ice = 0; with the thermal model
    inactive h_melt is frozen at its old value. Derivatives are the consistent
    tangent -C^-1 df/d(G, jump) of the converged system.
    """
    G = np.atleast_1d(np.asarray(G, dtype=float))
    jump = np.broadcast_to(np.asarray(jump, dtype=float), G.shape)
    hm_old = np.broadcast_to(np.asarray(h_melt_old, dtype=float), G.shape)
    m = G.shape[0]
    if dt <= 0:
        raise ValueError(f"time step must be positive, got {dt}")

    c = flow.flux_coefficient
    phi = _gradient_factor(G, flow.grad_eps)
    dphi = _gradient_factor_slope(G, flow.grad_eps)
    storage = thermal.rho_i * thermal.latent_heat / dt

    if thermal_active:
        j_ice = np.broadcast_to(np.asarray(heat_flux_ice(T_inf, elapsed, thermal), dtype=float), G.shape)
    else:
        j_ice = np.zeros(m)

    h_melt = hm_old.copy()
    h = h_melt + jump
    q = -c * effective_aperture(h, flow) ** (5.0 / 3.0) * phi

    C = np.zeros((m, 3, 3))
    C[:, 0, 0] = 1.0
    C[:, 2, 1] = -1.0
    C[:, 2, 2] = 1.0

    iterations = 0
    for iterations in range(1, max_iterations + 1):
        h_eff = effective_aperture(h, flow)
        slope = effective_aperture_slope(h, flow)
        flux_scale = c * h_eff ** (5.0 / 3.0) * np.abs(phi)
        f1 = q + c * h_eff ** (5.0 / 3.0) * phi
        if thermal_active:
            f2 = storage * (h_melt - hm_old) + q * G - j_ice
            energy_scale = storage * (np.abs(h_melt) + np.abs(hm_old)) + np.abs(q * G) + np.abs(j_ice)
        else:
            f2 = h_melt - hm_old
            energy_scale = np.abs(h_melt) + np.abs(hm_old)
        f3 = h - h_melt - jump

        scaled = np.maximum.reduce([
            np.abs(f1) / (np.abs(q) + flux_scale + 1e-30),
            np.abs(f2) / (energy_scale + 1e-30),
            np.abs(f3) / (np.abs(h) + np.abs(h_melt) + np.abs(jump) + 1e-30),
        ])
        if scaled.max(initial=0.0) < tol:
            break

        C[:, 0, 2] = (5.0 / 3.0) * c * h_eff ** (2.0 / 3.0) * phi * slope
        if thermal_active:
            C[:, 1, 0] = G
            C[:, 1, 1] = storage
        else:
            C[:, 1, 0] = 0.0
            C[:, 1, 1] = 1.0
        step = np.linalg.solve(C, -np.stack([f1, f2, f3], axis=1)[..., None])[..., 0]
        q = q + step[:, 0]
        h_melt = h_melt + step[:, 1]
        h = h + step[:, 2]
    else:
        raise ConvergenceError(f"local channel solve did not converge in {max_iterations} iterations")

    # consistent tangent at the converged point
    h_eff = effective_aperture(h, flow)
    slope = effective_aperture_slope(h, flow)
    C[:, 0, 2] = (5.0 / 3.0) * c * h_eff ** (2.0 / 3.0) * phi * slope
    df = np.zeros((m, 3, 2))
    df[:, 0, 0] = c * h_eff ** (5.0 / 3.0) * dphi
    if thermal_active:
        C[:, 1, 0] = G
        C[:, 1, 1] = storage
        df[:, 1, 0] = q
    else:
        C[:, 1, 0] = 0.0
        C[:, 1, 1] = 1.0
    df[:, 2, 1] = -1.0
    dy = -np.linalg.solve(C, df)

    return LocalSolution(
        q=q, h_melt=h_melt, h=h,
        j_flow=heat_flux_flow(q, G) if thermal_active else np.zeros(m),
        j_ice=j_ice,
        dq_dG=dy[:, 0, 0], dq_djump=dy[:, 0, 1],
        dhm_dG=dy[:, 1, 0], dhm_djump=dy[:, 1, 1],
        dh_dG=dy[:, 2, 0], dh_djump=dy[:, 2, 1],
        iterations=iterations,
    )
