"""Isotropic linear elasticity in two dimensions (plane strain or plane stress)."""
import logging
from typing import Literal, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from errors import ValidationError

logger = logging.getLogger(__name__)

DIM = 2
IDENTITY = np.eye(DIM)


def tensor_trace(t: np.ndarray) -> np.ndarray:
    return np.trace(t, axis1=-2, axis2=-1)


def deviatoric(t: np.ndarray) -> np.ndarray:
    return t - tensor_trace(t)[..., None, None] / DIM * IDENTITY


def symmetric_part(t: np.ndarray) -> np.ndarray:
    return 0.5 * (t + np.swapaxes(t, -1, -2))


def asymmetry(t: np.ndarray) -> np.ndarray:
    """t - t^T, the quantity weak symmetry controls."""
    return t - np.swapaxes(t, -1, -2)


class Material(BaseModel):
    """Lamé parameters and reduction mode; stress and strain tensors are arrays of shape (..., 2, 2)."""

    model_config = ConfigDict(frozen=True)

    mu: float
    lam: float
    mode: Literal["plane_strain", "plane_stress"] = "plane_strain"

    @field_validator("mu")
    @classmethod
    def validate_mu(cls, v):
        if v <= 0:
            raise ValueError("shear modulus mu must be positive")
        return v

    @field_validator("lam")
    @classmethod
    def validate_lambda(cls, v):
        if v < 0:
            raise ValueError("Lame parameter lambda must be nonnegative")
        return v

    @model_validator(mode="after")
    def validate_range(self):
        if not np.isfinite(self.lam) or self.lam > 1e8 * max(self.mu, 1.0):
            raise ValueError("lambda too large; the incompressible limit is not representable")
        return self

    @classmethod
    def from_young_poisson(cls, E: float, nu: float, mode: str = "plane_strain") -> "Material":
        if E <= 0:
            raise ValidationError(f"Young modulus must be positive, got {E}")
        if not 0 <= nu < 0.5:
            raise ValidationError(f"Poisson ratio must satisfy 0 <= nu < 0.5, got {nu}")
        lam = E * nu / ((1 + nu) * (1 - 2 * nu))
        mu = E / (2 * (1 + nu))
        return cls(mu=mu, lam=lam, mode=mode)

    @property
    def lambda_eff(self) -> float:
        if self.mode == "plane_stress":
            return 2 * self.mu * self.lam / (self.lam + 2 * self.mu)
        return self.lam

    @property
    def nu(self) -> float:
        return self.lam / (2 * (self.lam + self.mu))

    @property
    def young(self) -> float:
        return self.mu * (3 * self.lam + 2 * self.mu) / (self.lam + self.mu)

    @property
    def kappa(self) -> float:
        """Kolosov constant, plane strain convention."""
        return 3 - 4 * self.nu

    def compliance_apply(self, tau: np.ndarray) -> np.ndarray:
        tau = np.asarray(tau, dtype=float)
        lam = self.lambda_eff
        tr = tensor_trace(tau)[..., None, None]
        return (tau - lam / (2 * self.mu + DIM * lam) * tr * IDENTITY) / (2 * self.mu)

    def elasticity_apply(self, eps: np.ndarray, check_symmetry: bool = True) -> np.ndarray:
        eps = np.asarray(eps, dtype=float)
        if check_symmetry:
            skew = np.abs(asymmetry(eps)).max(initial=0.0)
            if skew > 1e-12 * max(1.0, np.abs(eps).max(initial=0.0)):
                raise ValidationError("elasticity_apply expects a symmetric strain", {"skew": float(skew)})
        tr = tensor_trace(eps)[..., None, None]
        return 2 * self.mu * eps + self.lambda_eff * tr * IDENTITY

    def compliance_inner(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Pointwise (C a):b."""
        return np.einsum("...ij,...ij->...", self.compliance_apply(a), b)

    def compliance_split(self, tau: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(C tau):tau as |tau^D|^2 / (2 mu) and (tr tau)^2 / (d (2 mu + d lam))."""
        tau = np.asarray(tau, dtype=float)
        dev = deviatoric(tau)
        lam = self.lambda_eff
        dev_part = np.einsum("...ij,...ij->...", dev, dev) / (2 * self.mu)
        vol_part = tensor_trace(tau) ** 2 / (DIM * (2 * self.mu + DIM * lam))
        return dev_part, vol_part


def compliance_apply(m: Material, tau: np.ndarray) -> np.ndarray:
    return m.compliance_apply(tau)


def elasticity_apply(m: Material, eps: np.ndarray) -> np.ndarray:
    return m.elasticity_apply(eps)


def from_young_poisson(E: float, nu: float, mode: str = "plane_strain") -> Material:
    return Material.from_young_poisson(E, nu, mode)
