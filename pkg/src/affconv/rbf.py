"""Scattered-data interpolation with radial basis functions.

Fits solve the augmented symmetric system

    [[Phi + lambda I, P], [P^T, 0]] [w; c] = [y; 0],    P = [1 | x],

so the radial weights satisfy the vanishing-moments constraints (sum w = 0 and
sum w x^T = 0 for degree 1), which is what guarantees exact reproduction of
affine targets.  The thin-plate kernel r^2 log r (0 at r = 0) minimizes the
bending energy w^T Phi w among interpolants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class RBFError(ValueError):
    pass


class SingularSystem(RBFError):
    pass


class WrongKernel(RBFError):
    pass


class DimensionMismatch(RBFError):
    pass


@dataclass(frozen=True)
class RBFKernel:
    """tps: r^2 log r; polyharmonic: r^k (odd k); gaussian: exp(-r^2/(2 s^2))."""

    kind: str = "tps"
    exponent: int = 3
    sigma: float = 1.0
    dim: int | None = None

    def __post_init__(self):
        if self.kind not in ("tps", "polyharmonic", "gaussian"):
            raise WrongKernel(f"unknown kernel {self.kind!r}")
        if self.kind == "polyharmonic" and (self.exponent < 1
                                            or self.exponent % 2 == 0):
            raise WrongKernel("polyharmonic exponent must be odd and >= 1")
        if self.kind == "gaussian" and self.sigma <= 0:
            raise WrongKernel("gaussian sigma must be positive")

    def __call__(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=np.float64)
        if self.kind == "tps":
            safe = np.where(r > 0, r, 1.0)
            return np.where(r > 0, r * r * np.log(safe), 0.0)
        if self.kind == "polyharmonic":
            return r ** self.exponent
        return np.exp(-0.5 * (r / self.sigma) ** 2)


def kernel_matrix(points: np.ndarray, kernel: RBFKernel) -> np.ndarray:
    """Symmetric N x N matrix Phi_ji = phi(|x_i - x_j|); diagonal phi(0)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise DimensionMismatch("points must be (N, d)")
    diff = pts[:, None, :] - pts[None, :, :]
    r = np.sqrt(np.sum(diff * diff, axis=2))
    return kernel(r)


@dataclass
class RBFModel:
    """Fitted interpolant: radial weights plus an optional polynomial part."""

    centers: np.ndarray          # (N, d)
    weights: np.ndarray          # (N, q)
    poly_coeffs: np.ndarray | None  # (1 + d, q) for degree 1, (1, q) for 0
    kernel: RBFKernel
    degree: int | None
    lam: float
    condition_estimate: float

    @property
    def affine_matrix(self) -> np.ndarray | None:
        if self.degree == 1:
            return self.poly_coeffs[1:]
        return None

    @property
    def intercept(self) -> np.ndarray | None:
        if self.degree in (0, 1):
            return self.poly_coeffs[0]
        return None


def _poly_basis(points: np.ndarray, degree: int | None) -> np.ndarray | None:
    if degree is None:
        return None
    n = points.shape[0]
    if degree == 0:
        return np.ones((n, 1))
    if degree == 1:
        return np.concatenate([np.ones((n, 1)), points], axis=1)
    raise RBFError("only degree 0 or 1 polynomial augmentation is supported")


def fit(points, targets, kernel: RBFKernel | None = None,
        degree: int | None = 1, lam: float = 0.0) -> RBFModel:
    """Solve the (regularized) interpolation system with a dense LU solve.

    degree None fits radial terms only; 0 adds a constant; 1 adds an affine
    polynomial and requires affinely independent points.
    """
    pts = np.asarray(points, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if pts.ndim != 2:
        raise DimensionMismatch("points must be (N, d)")
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] != pts.shape[0]:
        raise DimensionMismatch("one target row per point required")
    if lam < 0:
        raise RBFError("regularization weight must be >= 0")
    kernel = kernel or RBFKernel()
    if kernel.dim is not None and kernel.dim != pts.shape[1]:
        raise DimensionMismatch(
            f"kernel expects dimension {kernel.dim}, got {pts.shape[1]}")
    n, q = y.shape
    phi = kernel_matrix(pts, kernel)
    p = _poly_basis(pts, degree)
    if p is None:
        system = phi + lam * np.eye(n)
        rhs = y
    else:
        k = p.shape[1]
        if np.linalg.matrix_rank(p) < k:
            raise SingularSystem("points are affinely degenerate for the "
                                 "requested polynomial degree")
        system = np.zeros((n + k, n + k))
        system[:n, :n] = phi + lam * np.eye(n)
        system[:n, n:] = p
        system[n:, :n] = p.T
        rhs = np.concatenate([y, np.zeros((k, q))], axis=0)
    try:
        sol = np.linalg.solve(system, rhs)
        cond = float(np.linalg.norm(system, 1)
                     * np.linalg.norm(np.linalg.inv(system), 1))
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"linear system is singular: {exc}") from exc
    weights = sol[:n]
    poly = sol[n:] if p is not None else None
    return RBFModel(centers=pts.copy(), weights=weights, poly_coeffs=poly,
                    kernel=kernel, degree=degree, lam=lam,
                    condition_estimate=cond)


def evaluate(model: RBFModel, queries) -> np.ndarray:
    """f(x) = sum_i w_i phi(|x - x_i|) + P(x)."""
    x = np.asarray(queries, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.centers.shape[1]:
        raise DimensionMismatch(
            f"queries have dimension {x.shape[1]}, model has "
            f"{model.centers.shape[1]}")
    diff = x[:, None, :] - model.centers[None, :, :]
    r = np.sqrt(np.sum(diff * diff, axis=2))
    out = model.kernel(r) @ model.weights
    if model.degree == 0:
        out = out + model.poly_coeffs[0]
    elif model.degree == 1:
        out = out + model.poly_coeffs[0] + x @ model.poly_coeffs[1:]
    return out


def bending_energy(model: RBFModel) -> float:
    """w^T Phi w summed over output channels, clamped at zero; zero for
    exactly affine data by the vanishing-moments constraints."""
    if model.kernel.kind != "tps":
        raise WrongKernel("bending energy is defined for the tps kernel")
    if model.degree != 1:
        raise WrongKernel("bending energy needs a degree-1 fit")
    phi = kernel_matrix(model.centers, model.kernel)
    energy = float(np.sum(model.weights * (phi @ model.weights)))
    return max(energy, 0.0)


def vanishing_moments_residual(model: RBFModel) -> float:
    """Max abs violation of sum w = 0 and sum w x^T = 0 (degree-1 fits)."""
    if model.degree is None:
        return 0.0
    p = _poly_basis(model.centers, model.degree)
    return float(np.max(np.abs(p.T @ model.weights)))
