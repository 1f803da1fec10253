"""Weak-convergence diagnostics: spectral modes, norm gaps, rate fits.

Weak convergence of an oscillatory field phi^eps(t, E) toward phi_hom is
monitored through the first few Legendre modes

    m_k(t) = (phi(t, .), l_k)_{L2(E_min, E_max)},

the per-mode sweep errors  e_k = max_t |m_k^eps(t) - m_k^hom(t)|, a
strong-convergence norm gap, and log-log slope fits over the eps sweep.

The polynomials are orthonormalized against the field's own quadrature
(Stieltjes three-term recurrence on the grid), so discrete orthogonality
is exact and mode errors measure only the field difference, never the
quadrature of the test functions themselves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_MODE = 16


@dataclass(frozen=True, eq=False)
class ModeSeries:
    """Time series of one spectral mode."""

    k: int
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.k < 0:
            raise ValueError("mode index must be nonnegative")
        if len(self.times) != len(self.values):
            raise ValueError("mode series times/values length mismatch")


@dataclass(frozen=True, eq=False)
class EnergyField:
    """Field over (t, E) with its own energy quadrature weights."""

    times: np.ndarray
    energies: np.ndarray
    e_weights: np.ndarray
    values: np.ndarray  # (nt, nE)

    def l2_norm_time_energy(self) -> float:
        sq = (self.values**2) @ self.e_weights
        return float(np.sqrt(np.trapezoid(sq, self.times)))


@dataclass(frozen=True, eq=False)
class CellEnergyField:
    """Field over (t, E, y); y carries cell-average weights."""

    times: np.ndarray
    energies: np.ndarray
    e_weights: np.ndarray
    y_weights: np.ndarray
    values: np.ndarray  # (nt, nE, ny)

    def l2_norm(self) -> float:
        sq = np.einsum("tey,e,y->t", self.values**2, self.e_weights, self.y_weights)
        return float(np.sqrt(np.trapezoid(sq, self.times)))


def orthonormal_polynomials(
    nodes: np.ndarray, weights: np.ndarray, k_max: int
) -> np.ndarray:
    """Rows l_0..l_kmax of grid-orthonormal polynomials (Stieltjes recurrence).

    Orthonormal w.r.t. the discrete inner product sum_i w_i f_i g_i; for a
    midpoint grid with uniform weights these approach the orthonormal
    shifted Legendre family.
    """
    if k_max < 0 or k_max > MAX_MODE:
        raise ValueError(f"k_max must lie in [0, {MAX_MODE}], got {k_max}")
    if k_max >= len(nodes):
        raise ValueError("need more quadrature nodes than modes")
    nodes = np.asarray(nodes, dtype=float)
    weights = np.asarray(weights, dtype=float)
    polys = np.empty((k_max + 1, len(nodes)))
    p_prev = np.zeros_like(nodes)
    p = np.ones_like(nodes)
    p = p / np.sqrt(weights @ p**2)
    polys[0] = p
    for k in range(k_max):
        alpha = float(weights @ (nodes * p * p))
        q = (nodes - alpha) * p
        if k > 0:
            q -= beta * p_prev
        # re-orthogonalize against the two previous rows for stability
        q -= polys[k] * float(weights @ (polys[k] * q))
        if k > 0:
            q -= polys[k - 1] * float(weights @ (polys[k - 1] * q))
        beta = float(np.sqrt(weights @ q**2))
        if beta == 0.0:
            raise ValueError("grid cannot support the requested mode count")
        p_prev, p = p, q / beta
        polys[k + 1] = p
    return polys


def legendre_modes(field: EnergyField, k_max: int) -> list[ModeSeries]:
    """Modes m_k(t) for k = 0..k_max using the field's quadrature."""
    polys = orthonormal_polynomials(field.energies, field.e_weights, k_max)
    coeffs = field.values @ (field.e_weights[None, :] * polys).T  # (nt, k_max+1)
    return [
        ModeSeries(k, field.times, coeffs[:, k].copy()) for k in range(k_max + 1)
    ]


def mode_error(eps_modes: ModeSeries, hom_modes: ModeSeries) -> float:
    """max_t |m_k^eps(t) - m_k^hom(t)|, hom interpolated onto the eps grid."""
    if eps_modes.k != hom_modes.k:
        raise ValueError(
            f"mode mismatch: {eps_modes.k} vs {hom_modes.k}"
        )
    hom_on_eps = np.interp(eps_modes.times, hom_modes.times, hom_modes.values)
    return float(np.max(np.abs(eps_modes.values - hom_on_eps)))


def norm_difference(phi_eps: EnergyField, phi0: CellEnergyField) -> float:
    """| ||phi_eps||_{L2(t,E)} - ||phi0||_{L2(t,E,y)} |, native quadratures."""
    return abs(phi_eps.l2_norm_time_energy() - phi0.l2_norm())


@dataclass(frozen=True)
class RateFit:
    slope: float
    residual: float  # max log-space deviation of the fit


def fit_rate(epsilons, errors) -> RateFit:
    """Least-squares slope of log(error) against log(epsilon)."""
    eps = np.asarray(epsilons, dtype=float)
    err = np.asarray(errors, dtype=float)
    if len(eps) < 3:
        raise ValueError("rate fit needs at least 3 sweep points")
    if np.any(err <= 0):
        raise ValueError("cannot fit a rate through nonpositive errors")
    x = np.log(eps)
    y = np.log(err)
    slope, intercept = np.polyfit(x, y, 1)
    residual = float(np.max(np.abs(slope * x + intercept - y)))
    return RateFit(float(slope), residual)


@dataclass(frozen=True, eq=False)
class ConvergenceReport:
    """Per-mode sweep errors with fitted slopes and norm differences."""

    epsilons: np.ndarray           # strictly decreasing
    mode_errors: np.ndarray        # (n_eps, k_max+1)
    norm_diffs: np.ndarray         # (n_eps,)
    fits: list[RateFit]            # one per mode

    def __post_init__(self) -> None:
        eps = np.asarray(self.epsilons, dtype=float)
        if np.any(np.diff(eps) >= 0):
            raise ValueError("sweep epsilons must be strictly decreasing")
        if np.any(np.asarray(self.mode_errors) < 0) or np.any(
            np.asarray(self.norm_diffs) < 0
        ):
            raise ValueError("errors must be nonnegative")
        object.__setattr__(self, "epsilons", eps)

    @classmethod
    def from_sweep(cls, epsilons, mode_errors, norm_diffs) -> "ConvergenceReport":
        mode_errors = np.asarray(mode_errors, dtype=float)
        fits = []
        for k in range(mode_errors.shape[1]):
            try:
                fits.append(fit_rate(epsilons, mode_errors[:, k]))
            except ValueError:
                fits.append(RateFit(float("nan"), float("nan")))
        return cls(
            np.asarray(epsilons, dtype=float),
            mode_errors,
            np.asarray(norm_diffs, dtype=float),
            fits,
        )
