"""Homogenization of the oscillatory planar rotation system dU/dt = b A U.

A is the fixed skew matrix [[0, 1], [-1, 0]], so each realization rotates:
U(t) = R(b t) U_in with R(th) = [[cos th, sin th], [-sin th, cos th]].
The weak limit over an oscillatory coefficient family b(x/eps) averages
rotations against the induced Young measure nu and solves a Volterra
system whose kernel is known through its Laplace transform:

    Khat(p) = p Id + b* A - B(p),     B(p) = M(p)^{-1},
    M(p)    = sum_i w_i (p^2 + l_i^2)^{-1} [[p, l_i], [-l_i, p]].

Khat tends to 2 b* A as p grows, i.e. the kernel carries a Dirac mass at
lag zero.  The solver therefore uses the regularized kernel

    Ktilde_hat(p) = B(p) - p Id + b* A  =  2 b* A - Khat(p),

which decays like Var(l)/p, and the algebraically equivalent equation

    dU0/dt - b* A U0 = - int_0^t Ktilde(t - s) U0(s) ds.

Ktilde is recovered on the time grid by fixed-Talbot contour quadrature;
B's poles sit on the imaginary axis inside [-i l_max, i l_max] (they are
zeros of the Cauchy transform of nu, hence in the convex hull of the
atoms), so the contour parameter grows linearly with l_max * t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cell import CellFunction
from .kernels import KernelTable
from .volterra import TimeGrid, VolterraProblem, solve_volterra

SKEW = np.array([[0.0, 1.0], [-1.0, 0.0]])


@dataclass(frozen=True, eq=False)
class YoungMeasure:
    """Finite atomic probability measure on the coefficient values."""

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        atoms = np.asarray(self.atoms, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if atoms.shape != weights.shape or atoms.ndim != 1:
            raise ValueError("atoms and weights must be 1-d arrays of equal length")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_cell_function(cls, b: CellFunction) -> "YoungMeasure":
        """Pushforward of the uniform cell measure under a periodic b(y)."""
        return cls(b.values.copy(), b.grid.weights.copy())

    @classmethod
    def two_atoms(cls, low: float, high: float) -> "YoungMeasure":
        return cls(np.array([low, high]), np.array([0.5, 0.5]))

    @property
    def mean(self) -> float:
        return float(self.weights @ self.atoms)

    @property
    def variance(self) -> float:
        return float(self.weights @ self.atoms**2) - self.mean**2

    @property
    def max_abs_atom(self) -> float:
        return float(np.max(np.abs(self.atoms)))


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, s], [-s, c]])


def exact_rotation(b: float, t: float, u_in: np.ndarray) -> np.ndarray:
    """Flow of dU/dt = b A U: a rotation by angle b t."""
    return rotation_matrix(b * t) @ np.asarray(u_in, dtype=float)


def cell_averaged_limit(nu: YoungMeasure, t, u_in: np.ndarray) -> np.ndarray:
    """Measure-averaged rotations: the reference weak limit.

    Scalar t gives a 2-vector; an array of times gives shape (nt, 2).
    """
    u_in = np.asarray(u_in, dtype=float)
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    angles = np.outer(ts, nu.atoms)
    c = np.cos(angles) @ nu.weights
    s = np.sin(angles) @ nu.weights
    out = np.stack(
        [c * u_in[0] + s * u_in[1], -s * u_in[0] + c * u_in[1]], axis=-1
    )
    return out[0] if np.isscalar(t) else out


def _resolvent_scalars(nu: YoungMeasure, p):
    """a(p), c(p) with M(p) = a Id + c A; complex p allowed."""
    p = np.asarray(p)
    denom = p[..., None] ** 2 + nu.atoms**2
    a = ((p[..., None] / denom) * nu.weights).sum(axis=-1)
    c = ((nu.atoms / denom) * nu.weights).sum(axis=-1)
    return a, c


def _commutant_matrix(alpha, beta) -> np.ndarray:
    """alpha Id + beta A as an explicit 2x2 (works for complex entries)."""
    return np.array([[alpha, beta], [-beta, alpha]])


def matrix_B(nu: YoungMeasure, p) -> np.ndarray:
    """B(p) = M(p)^{-1}; M's commutant form inverts in closed form."""
    if not np.iscomplexobj(np.asarray(p)) and np.real(p) <= 0:
        raise ValueError(f"p must be positive, got {p}")
    a, c = _resolvent_scalars(nu, p)
    det = a * a + c * c
    return _commutant_matrix(a / det, -c / det)


def regularized_kernel_laplace(nu: YoungMeasure, p) -> np.ndarray:
    """Ktilde_hat(p) = B(p) - p Id + b* A; decays like Var/p at large p."""
    if not np.iscomplexobj(np.asarray(p)) and np.real(p) <= 0:
        raise ValueError(f"p must be positive, got {p}")
    a, c = _resolvent_scalars(nu, p)
    det = a * a + c * c
    return _commutant_matrix(a / det - p, -c / det + nu.mean)


def inverse_laplace_talbot(F, t: float, nodes: int = 32):
    """Fixed-Talbot inversion of a (matrix- or scalar-valued) transform.

    The contour is the standard cotangent parabola with abscissa
    r = 2*nodes/5; every singularity of F must lie inside it, which for
    the oscillator kernels means nodes must grow like l_max * t.
    """
    if t <= 0:
        raise ValueError(f"t must be positive, got {t}")
    M = int(nodes)
    if M < 4:
        raise ValueError("need at least 4 quadrature nodes")
    r = 2.0 * M / 5.0
    theta = np.arange(1, M) * np.pi / M
    cot = 1.0 / np.tan(theta)
    p = (r / t) * theta * (cot + 1j)
    gamma = np.exp(t * p) * (1.0 + 1j * theta * (1.0 + cot**2) - 1j * cot)
    f0 = np.asarray(F(r / t + 0j))
    total = 0.5 * np.exp(r) * f0
    for pk, gk in zip(p, gamma):
        total = total + gk * np.asarray(F(pk))
    out = (2.0 / (5.0 * t)) * np.real(total)
    return out if out.shape else float(out)


def talbot_nodes_for(nu: YoungMeasure, t_max: float, base: int = 32) -> int:
    """Node count enclosing the kernel poles up to time t_max.

    Pole enclosure needs r = 2M/5 > (2/pi) l_max t; the 1.15 factor and
    additive margin keep the contour clear of the imaginary-axis poles
    without inflating the exp(r) round-off amplification needlessly.
    """
    need = 1.15 * (5.0 / np.pi) * nu.max_abs_atom * t_max
    return max(base, int(np.ceil(need)) + 8)


def kernel_time_table(
    nu: YoungMeasure, grid: TimeGrid, nodes: int | None = None
) -> KernelTable:
    """Tabulate the regularized kernel Ktilde on the solver grid.

    Entries are recovered via the commutant components alpha, beta with
    Ktilde = alpha Id + beta A; the lag-zero value is the analytic limit
    alpha(0+) = Var(l), beta(0+) = 0.
    """
    times = grid.times
    values = np.empty((len(times), 2, 2))
    values[0] = nu.variance * np.eye(2)

    bstar = nu.mean
    atoms, wts = nu.atoms, nu.weights

    def hat_components(p):
        # Ktilde_hat on the skew eigenbasis: k+- = 1/m+- - p +- i b* with
        # m+- the Cauchy transforms sum w/(p -+ i l).  The subtraction is
        # rewritten as (1 - (p -+ i b*) m+-)/m+- whose numerator sums
        # i (b* - l) w/(p -+ i l) termwise: no large-p cancellation, which
        # matters because Talbot multiplies round-off by exp(r).
        p = p[..., None]
        mp = (wts / (p - 1j * atoms)).sum(axis=-1)
        mm = (wts / (p + 1j * atoms)).sum(axis=-1)
        np_ = (wts * 1j * (bstar - atoms) / (p - 1j * atoms)).sum(axis=-1)
        nm_ = (wts * (-1j) * (bstar - atoms) / (p + 1j * atoms)).sum(axis=-1)
        kp = np_ / mp
        km = nm_ / mm
        return 0.5 * (kp + km), -0.5j * (kp - km)

    ts = times[1:]
    # Node counts grow with t (pole enclosure) but exp(r) amplifies
    # round-off, so short lags run with fewer nodes.  Times are bucketed
    # by node count and each bucket is evaluated vectorized.
    if nodes is None:
        per_t = np.array([talbot_nodes_for(nu, t) for t in ts])
    else:
        per_t = np.full(len(ts), int(nodes))
    for M in np.unique(per_t):
        sel = np.nonzero(per_t == M)[0]
        tt = ts[sel]
        r = 2.0 * M / 5.0
        theta = np.arange(1, M) * np.pi / M
        cot = 1.0 / np.tan(theta)
        base_p = r * theta * (cot + 1j)  # t * p_k, independent of t
        gamma = np.exp(base_p) * (1.0 + 1j * theta * (1.0 + cot**2) - 1j * cot)
        ah, bh = hat_components(base_p[None, :] / tt[:, None])
        a0, b0 = hat_components(np.full(len(tt), r + 0j) / tt)
        scale = 2.0 / (5.0 * tt)
        alpha = scale * np.real(0.5 * np.exp(r) * a0 + (gamma * ah).sum(axis=1))
        beta = scale * np.real(0.5 * np.exp(r) * b0 + (gamma * bh).sum(axis=1))
        values[sel + 1, 0, 0] = alpha
        values[sel + 1, 1, 1] = alpha
        values[sel + 1, 0, 1] = beta
        values[sel + 1, 1, 0] = -beta
    return KernelTable(times, values)


def solve_oscillator_limit(
    nu: YoungMeasure,
    u_in: np.ndarray,
    grid: TimeGrid,
    nodes: int | None = None,
) -> np.ndarray:
    """March the regularized limit equation; returns U0 on the grid nodes.

    In the solver's convention du/dt + a u - int K(t-s) u = 0 the decay
    coefficient is a = -b* A and the kernel is K = -Ktilde.
    """
    table = kernel_time_table(nu, grid, nodes)
    neg_table = KernelTable(table.taus, -table.values)
    problem = VolterraProblem(
        dim=2,
        a=-nu.mean * SKEW,
        kernel=neg_table,
        source=None,
        u0=np.asarray(u_in, dtype=float),
    )
    return solve_volterra(problem, grid)


def kernel_components(table: KernelTable) -> tuple[np.ndarray, np.ndarray]:
    """Split a commutant-structured matrix table into (alpha, beta)."""
    vals = table.values
    alpha = 0.5 * (vals[:, 0, 0] + vals[:, 1, 1])
    beta = 0.5 * (vals[:, 0, 1] - vals[:, 1, 0])
    return alpha, beta


def averaged_rotation_laplace_numeric(
    nu: YoungMeasure, p: float, u_in: np.ndarray, tail_tol: float = 1e-6
) -> np.ndarray:
    """Trapezoid Laplace transform of the averaged rotations.

    The averages oscillate without decay, so the horizon is set from
    exp(-p T)/p <= tail_tol and the step resolves the fastest rotation.
    """
    if p <= 0:
        raise ValueError(f"p must be positive, got {p}")
    t_max = np.log(1.0 / (p * tail_tol)) / p
    dt = min(2e-4, 0.05 / max(nu.max_abs_atom, 1.0))
    n = int(np.ceil(t_max / dt))
    ts = np.linspace(0.0, n * dt, n + 1)
    vals = cell_averaged_limit(nu, ts, np.asarray(u_in, dtype=float))
    weights = np.exp(-p * ts)
    return np.trapezoid(weights[:, None] * vals, ts, axis=0)
