"""Planar kinetic transport with energy-oscillatory optical parameters.

Geometry is d = 2: angles live on the unit circle with uniform nodes and
trapezoid weights (exact for trigonometric polynomials), energies on a
cell-centered window [e_min, e_max], the fast variable y = E/eps on the
periodic cell.  The optical parameters follow the separable form

    sigma_eps(w, E)       = sqrt(E) sigma(w, E, E/eps)
    kappa_eps(mu, E, E')  = sqrt(E) kappa1(mu, E) kappa2(mu, E', E'/eps),

with mu = cos(angle difference).  After the characteristics change of
variables the spatial label r rides along passively, so the oscillatory
problem is a family of Volterra fixed points

    psi = phi_in e^{-t sigma_eps} + int_0^t int kappa_eps e^{-(t-s) sigma_eps} psi(s)

solved by product trapezoid in s with a recursively updated history (the
s-kernel is a pure exponential per (w, E), so no quadratic-cost sum).
The homogenized limit is the coupled system for the y-average psi_hom and
the mean-free corrector rho; an independent closed-kernel route rebuilds
psi_hom from memory kernels with energy-scaled decay sqrt(E) L_sigma and
must agree with the coupled route to solver accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .cell import PeriodicGrid


class ConfigurationError(ValueError):
    """Raised when characteristics would leave the spatial box."""


@dataclass(frozen=True, eq=False)
class TransportGrids:
    n_omega: int = 16
    n_e: int = 32
    n_y: int = 128
    n_r: int = 32
    e_min: float = 0.25
    e_max: float = 1.0
    r_box: float = 2.0
    n_mu: int = 64

    def __post_init__(self) -> None:
        if self.e_min < 0 or self.e_max <= self.e_min:
            raise ValueError("need 0 <= e_min < e_max")
        if min(self.n_omega, self.n_e, self.n_y, self.n_r, self.n_mu) < 2:
            raise ValueError("grids need at least two nodes per axis")

    @property
    def angles(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_omega) / self.n_omega

    @property
    def angle_weight(self) -> float:
        return 2.0 * np.pi / self.n_omega

    def energy_nodes(self, n: int | None = None) -> np.ndarray:
        n = self.n_e if n is None else n
        h = (self.e_max - self.e_min) / n
        return self.e_min + (np.arange(n) + 0.5) * h

    def energy_weight(self, n: int | None = None) -> float:
        n = self.n_e if n is None else n
        return (self.e_max - self.e_min) / n

    @property
    def r_nodes(self) -> np.ndarray:
        h = 2.0 * self.r_box / self.n_r
        return -self.r_box + (np.arange(self.n_r) + 0.5) * h

    def eps_energy_count(self, epsilon: float, nodes_per_period: int = 100) -> int:
        return int(round((self.e_max - self.e_min) * nodes_per_period / epsilon))


@dataclass(frozen=True, eq=False)
class OpticalParameters:
    """Optical data as callables plus the mu-tabulation policy.

    ``sigma(theta, E, y)`` is the base cross-section without the sqrt(E)
    factor, applied at use sites.  ``kappa1(mu, E)`` and
    ``kappa2(mu, E', y')`` are evaluated on a uniform mu-grid and linearly
    interpolated to the exact angle-difference cosines.
    """

    sigma: Callable
    kappa1: Callable
    kappa2: Callable

    def sample_sigma(self, angles, energies, y) -> np.ndarray:
        th = np.asarray(angles)[:, None, None]
        ee = np.asarray(energies)[None, :, None]
        yy = np.asarray(y)[None, None, :]
        return np.asarray(self.sigma(th, ee, yy) * np.ones_like(th * ee * yy))

    def sigma_eps(self, angles, energies, epsilon: float) -> np.ndarray:
        """sqrt(E) sigma(theta, E, E/eps) on the (angle, energy) grid."""
        energies = np.asarray(energies)
        y = np.mod(energies / epsilon, 1.0)
        th = np.asarray(angles)[:, None]
        base = self.sigma(th, energies[None, :], y[None, :])
        return np.sqrt(energies)[None, :] * np.asarray(
            base * np.ones_like(th * energies[None, :])
        )


def _mu_interp_table(fn, angles: np.ndarray, second, third, n_mu: int) -> np.ndarray:
    """Tabulate fn on a uniform mu-grid, interpolate to cos(angle gaps).

    Returns an array indexed (omega, omega', *rest) where rest are the
    broadcast shapes of the remaining arguments.
    """
    mu_grid = np.linspace(-1.0, 1.0, n_mu)
    if third is None:
        samples = np.asarray(
            fn(mu_grid[:, None], np.asarray(second)[None, :])
            * np.ones((n_mu, len(second)))
        )
    else:
        samples = np.asarray(
            fn(
                mu_grid[:, None, None],
                np.asarray(second)[None, :, None],
                np.asarray(third)[None, None, :],
            )
            * np.ones((n_mu, len(second), len(third)))
        )
    mu = np.cos(angles[:, None] - angles[None, :])
    pos = (np.clip(mu, -1.0, 1.0) + 1.0) / 2.0 * (n_mu - 1)
    j0 = np.clip(np.floor(pos).astype(int), 0, n_mu - 2)
    frac = pos - j0
    w = frac[..., None] if third is None else frac[..., None, None]
    return (1.0 - w) * samples[j0] + w * samples[j0 + 1]


def kappa_tables(
    params: OpticalParameters,
    grids: TransportGrids,
    energies_out: np.ndarray,
    energies_in: np.ndarray,
    y_in: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """K1[w, w', E] and K2[w, w', E', y'] on explicit node sets."""
    k1 = _mu_interp_table(params.kappa1, grids.angles, energies_out, None, grids.n_mu)
    k2 = _mu_interp_table(params.kappa2, grids.angles, energies_in, y_in, grids.n_mu)
    return k1, k2


def kappa2_paired(
    params: OpticalParameters,
    grids: TransportGrids,
    energies: np.ndarray,
    y: np.ndarray,
) -> np.ndarray:
    """kappa2(mu, E'_j, y_j) with E' and y paired: shape (w, w', E').

    The oscillatory solvers evaluate kappa2 along the curve y = E'/eps;
    sampling it pairwise avoids materializing the full (E', y') tensor.
    """
    n_mu = grids.n_mu
    mu_grid = np.linspace(-1.0, 1.0, n_mu)
    samples = np.asarray(
        params.kappa2(mu_grid[:, None], np.asarray(energies)[None, :], np.asarray(y)[None, :])
        * np.ones((n_mu, len(energies)))
    )
    angles = grids.angles
    mu = np.cos(angles[:, None] - angles[None, :])
    pos = (np.clip(mu, -1.0, 1.0) + 1.0) / 2.0 * (n_mu - 1)
    j0 = np.clip(np.floor(pos).astype(int), 0, n_mu - 2)
    frac = (pos - j0)[..., None]
    return (1.0 - frac) * samples[j0] + frac * samples[j0 + 1]


def kappa_bars(
    params: OpticalParameters,
    epsilon: float,
    grids: TransportGrids,
    n_e: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Outgoing and incoming integrated scattering rates on (omega, E).

    kappa_bar(w, E)  integrates kappa_eps(mu, E, E') over (w', E'),
    kappa_tilde(w,E) integrates kappa_eps(mu, E', E) over (w', E');
    trapezoid in angle (uniform circle nodes), midpoint in energy.
    """
    energies = grids.energy_nodes(n_e)
    we = grids.energy_weight(n_e)
    y = np.mod(energies / epsilon, 1.0)
    k1 = _mu_interp_table(params.kappa1, grids.angles, energies, None, grids.n_mu)
    k2_diag = kappa2_paired(params, grids, energies, y)  # kappa2(mu, E', E'/eps)
    sqrtE = np.sqrt(energies)
    aw = grids.angle_weight
    # bar(w, E): integrate sqrt(E) k1(mu, E) k2(mu, E', y(E')) over (w', E')
    bar = sqrtE[None, :] * aw * np.einsum(
        "vwE,vw->vE", k1, we * k2_diag.sum(axis=2)
    )
    # tilde(w, E): roles swapped, sqrt(E') k1(mu, E') k2(mu, E, y(E))
    c1 = we * np.einsum("vwe,e->vw", k1, sqrtE)
    tilde = aw * np.einsum("vw,vwE->vE", c1, k2_diag)
    return bar, tilde


def subcriticality_check(
    params: OpticalParameters,
    epsilon: float,
    grids: TransportGrids,
    n_e: int | None = None,
) -> float:
    """Margin min over the grid of min(sigma_eps - bar, sigma_eps - tilde).

    A positive value certifies the subcritical hypothesis on the grid; a
    negative one is a valid (flagged) answer, not an error.
    """
    energies = grids.energy_nodes(n_e)
    sig = params.sigma_eps(grids.angles, energies, epsilon)
    bar, tilde = kappa_bars(params, epsilon, grids, n_e)
    return float(min(np.min(sig - bar), np.min(sig - tilde)))


def scattering_matrix(
    params: OpticalParameters,
    epsilon: float,
    grids: TransportGrids,
    n_e: int | None = None,
) -> np.ndarray:
    """Dense kernel action K[(w,E),(w',E')] including quadrature weights."""
    energies = grids.energy_nodes(n_e)
    we = grids.energy_weight(n_e)
    y = np.mod(energies / epsilon, 1.0)
    k1 = _mu_interp_table(params.kappa1, grids.angles, energies, None, grids.n_mu)
    k2_diag = kappa2_paired(params, grids, energies, y)
    sqrtE = np.sqrt(energies)
    n = grids.n_omega * len(energies)
    # kernel(v,E; w,E') = sqrt(E) k1(mu_vw, E) k2(mu_vw, E', y(E')) w_angle w_E
    kern = np.einsum("E,vwE,vwf->vEwf", sqrtE, k1, k2_diag)
    kern *= grids.angle_weight * we
    return kern.reshape(n, n)


def coercivity_test(
    params: OpticalParameters,
    epsilon: float,
    grids: TransportGrids,
    trials: int = 100,
    seed: int = 0,
    n_e: int | None = None,
) -> float:
    """Minimum Rayleigh quotient of Q over seeded random grid functions."""
    if trials < 1:
        raise ValueError("need at least one trial")
    energies = grids.energy_nodes(n_e)
    we = grids.energy_weight(n_e)
    sig = params.sigma_eps(grids.angles, energies, epsilon).reshape(-1)
    K = scattering_matrix(params, epsilon, grids, n_e)
    weights = np.full(len(sig), grids.angle_weight * we)
    rng = np.random.default_rng(seed)
    best = np.inf
    for _ in range(trials):
        f = rng.standard_normal(len(sig))
        qf = sig * f - K @ f
        quotient = float((weights * f) @ qf) / float((weights * f) @ f)
        best = min(best, quotient)
    return best


@dataclass(frozen=True, eq=False)
class PhaseSpaceField:
    """Kinetic field over (t, r, omega, E) with optional cell axis."""

    times: np.ndarray
    r_nodes: np.ndarray
    angles: np.ndarray
    energies: np.ndarray
    values: np.ndarray          # (nt, nr, nw, nE[, ny])
    y_nodes: np.ndarray | None = None


def export_field_csv(field: PhaseSpaceField, path) -> None:
    """Long-format dump `t,r,omega,E,value`; cell axes are y-averaged.

    Row count is the full product of the grids, so dump reduced runs only.
    """
    values = field.values
    if values.ndim == 5:
        values = values.mean(axis=4)
    with open(path, "w", newline="\n") as fh:
        fh.write("t,r,omega,E,value\n")
        for it, t in enumerate(field.times):
            for ir, rv in enumerate(field.r_nodes):
                for iw, th in enumerate(field.angles):
                    for ie, en in enumerate(field.energies):
                        fh.write(
                            f"{t:.17g},{rv:.17g},{th:.17g},{en:.17g},"
                            f"{values[it, ir, iw, ie]:.17g}\n"
                        )


def transport_preset(name: str) -> OpticalParameters:
    """Named parameter sets used by the checks and the CLI."""
    if name == "transport-subcritical-1":
        return OpticalParameters(
            sigma=lambda th, E, y: 2.0 + 0.5 * np.sin(2 * np.pi * y),
            kappa1=lambda mu, E: (1.0 + 0.5 * mu) / (2.0 * np.pi),
            kappa2=lambda mu, Ep, yp: 0.6 * (1.0 + 0.5 * np.sin(2 * np.pi * yp)),
        )
    if name == "transport-kappa0":
        return OpticalParameters(
            sigma=lambda th, E, y: 2.0 + 0.5 * np.sin(2 * np.pi * y),
            kappa1=lambda mu, E: np.zeros_like(mu * E),
            kappa2=lambda mu, Ep, yp: np.zeros_like(mu * Ep * yp),
        )
    raise ValueError(f"unknown transport preset {name!r}")


def hat_initial_data(support: float = 0.5):
    """phi_in(r, theta, E, y) = hat(r) (1 + sin(2 pi y)), angle-blind."""

    def phi_in(r, theta, E, y):
        shape = np.broadcast(r, theta, E, y).shape
        hat = np.maximum(0.0, 1.0 - np.abs(r) / support)
        return np.broadcast_to(hat * (1.0 + np.sin(2 * np.pi * y)), shape).copy()

    phi_in.support = support
    return phi_in


def check_characteristics_interior(
    grids: TransportGrids, support: float, t_end: float
) -> None:
    reach = support + np.sqrt(grids.e_max) * t_end
    if reach > grids.r_box + 1e-12:
        raise ConfigurationError(
            f"characteristics reach {reach:.3f} > r_box {grids.r_box}; "
            "shrink T or the initial support"
        )


@dataclass(frozen=True, eq=False)
class CharacteristicsSolution:
    """Oscillatory transport solution restricted to the active r-slices.

    ``values`` holds the full field only when the run was small enough to
    ask for it; sweep-scale runs keep the windowed-in-E averages, the
    final-time field, and the running L2 norm instead.
    """

    times: np.ndarray
    r_nodes: np.ndarray          # active slices only
    angles: np.ndarray
    energies: np.ndarray
    values: np.ndarray | None    # (nt+1, na, nw, nE) if stored
    windowed: np.ndarray | None  # (nt+1, na, nw, n_windows)
    final: np.ndarray            # (na, nw, nE)
    sup_l2: float                # max_t L2(r, w, E) norm
    min_value: float


def solve_characteristics_eps(
    params: OpticalParameters,
    phi_in,
    epsilon: float,
    grids: TransportGrids,
    t_end: float = 1.5,
    n_steps: int = 200,
    nodes_per_period: int = 100,
    picard_tol: float = 1e-13,
    store_full: bool = False,
    n_windows: int = 6,
) -> CharacteristicsSolution:
    """Product-trapezoid march of the characteristics fixed point.

    r-slices are independent; slices where phi_in vanishes identically
    stay zero and are dropped.  The lag kernel is exp(-(t-s) sigma_eps)
    per (omega, E), so the history integral is updated recursively and
    each step costs one scattering application per Picard iteration.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    support = getattr(phi_in, "support", grids.r_box)
    check_characteristics_interior(grids, support, t_end)
    n_e = grids.eps_energy_count(epsilon, nodes_per_period)
    energies = grids.energy_nodes(n_e)
    we = grids.energy_weight(n_e)
    y = np.mod(energies / epsilon, 1.0)
    sig = params.sigma_eps(grids.angles, energies, epsilon)  # (nw, nE)
    k1 = _mu_interp_table(params.kappa1, grids.angles, energies, None, grids.n_mu)
    k2_diag = np.ascontiguousarray(kappa2_paired(params, grids, energies, y))
    sqrtE = np.sqrt(energies)

    r = grids.r_nodes
    psi0 = np.stack(
        [
            phi_in(rv, grids.angles[:, None], energies[None, :], y[None, :])
            for rv in r
        ]
    )  # (nr, nw, nE)
    active = np.nonzero(np.abs(psi0).max(axis=(1, 2)) > 0)[0]
    if len(active) == 0:
        raise ValueError("initial data vanishes on every r-node")
    times = np.linspace(0.0, t_end, n_steps + 1)
    dt = times[1] - times[0]
    decay_step = np.exp(-dt * sig)

    k2_batched = np.ascontiguousarray(k2_diag.transpose(1, 2, 0))  # (w, E', v)
    scale_out = sqrtE[None, None, :] * grids.angle_weight

    def apply_K(f):
        # f: (na, nw, nE') over active slices; both contractions run as
        # batched matmuls (BLAS) rather than generic einsums
        g = np.matmul(f.transpose(1, 0, 2), k2_batched) * we  # (w, na, v)
        gv = np.ascontiguousarray(g.transpose(2, 1, 0))       # (v, na, w)
        out = np.matmul(gv, k1)                               # (v, na, E)
        return scale_out * out.transpose(1, 0, 2)

    if n_e % n_windows != 0:
        raise ValueError("window count must divide the energy grid")
    per_win = n_e // n_windows
    r_weight = 2.0 * grids.r_box / grids.n_r

    def windowed_avg(f):
        return f.reshape(f.shape[:-1] + (n_windows, per_win)).mean(axis=-1)

    def l2_norm(f):
        return float(
            np.sqrt((f**2).sum() * we * grids.angle_weight * r_weight)
        )

    psi = psi0[active].copy()
    base0 = psi0[active]
    full = (
        np.empty((n_steps + 1,) + psi.shape) if store_full else None
    )
    windowed = np.empty((n_steps + 1,) + psi.shape[:-1] + (n_windows,))
    if store_full:
        full[0] = psi
    windowed[0] = windowed_avg(psi)
    sup_l2 = l2_norm(psi)
    min_value = float(psi.min())

    decay_t = np.ones_like(sig)
    G = np.zeros_like(psi)
    F = apply_K(psi)
    for n in range(n_steps):
        decay_t = decay_t * decay_step
        G = decay_step[None] * (G + 0.5 * F)
        known = decay_t[None] * base0 + dt * G
        # Picard for psi_{n+1} = known + (dt/2) K psi_{n+1}
        nxt = known + dt * 0.5 * F  # warm start from the previous slope
        for _ in range(60):
            upd = known + dt * 0.5 * apply_K(nxt)
            delta = np.max(np.abs(upd - nxt))
            nxt = upd
            if delta < picard_tol:
                break
        psi = nxt
        F = apply_K(psi)
        G = G + 0.5 * F
        if store_full:
            full[n + 1] = psi
        windowed[n + 1] = windowed_avg(psi)
        sup_l2 = max(sup_l2, l2_norm(psi))
        min_value = min(min_value, float(psi.min()))
    return CharacteristicsSolution(
        times,
        r[active],
        grids.angles,
        energies,
        full,
        windowed,
        psi,
        sup_l2,
        min_value,
    )


@dataclass(frozen=True, eq=False)
class TwoScaleTransportSolution:
    psi_hom: PhaseSpaceField
    rho: PhaseSpaceField
    max_mean_rho: float


def _two_scale_operators(params: OpticalParameters, grids: TransportGrids):
    energies = grids.energy_nodes()
    we = grids.energy_weight()
    ygrid = PeriodicGrid(grids.n_y)
    sig = params.sample_sigma(grids.angles, energies, ygrid.nodes)  # (nw, nE, ny)
    k1, k2y = kappa_tables(params, grids, energies, energies, ygrid.nodes)
    k2bar = k2y.mean(axis=3)  # y-average of kappa2(mu, E', .)
    sqrtE = np.sqrt(energies)
    return energies, we, ygrid, sig, k1, k2y, k2bar, sqrtE


def solve_two_scale_transport(
    params: OpticalParameters,
    phi_in,
    grids: TransportGrids,
    t_end: float = 1.5,
    n_steps: int = 300,
) -> TwoScaleTransportSolution:
    """RK4 march of the coupled mean/corrector transport system.

    State: psi_hom(r, w, E) and mean-free rho(r, w, E, y).  The corrector
    feels only the sigma-oscillation; scattering couples through the
    y-averaged source terms.
    """
    support = getattr(phi_in, "support", grids.r_box)
    check_characteristics_interior(grids, support, t_end)
    energies, we, ygrid, sig, k1, k2y, k2bar, sqrtE = _two_scale_operators(
        params, grids
    )
    sig_mean = sig.mean(axis=2)  # (nw, nE)
    sig_fluct = sig - sig_mean[:, :, None]
    r = grids.r_nodes
    wy = 1.0 / grids.n_y

    phi0 = np.stack(
        [
            phi_in(
                rv,
                grids.angles[:, None, None],
                energies[None, :, None],
                ygrid.nodes[None, None, :],
            )
            for rv in r
        ]
    )  # (nr, nw, nE, ny)
    psi = phi0.mean(axis=3)
    rho = phi0 - psi[..., None]

    aw = grids.angle_weight

    def s_of_rho(rh):
        g = np.einsum("vwey,rwey->rvwe", k2y, rh, optimize=True) * wy
        inner = we * g.sum(axis=3)  # (nr, nv, nw)
        return sqrtE[None, None, :] * aw * np.einsum("vwE,rvw->rvE", k1, inner)

    def s_of_psi(ps):
        g = np.einsum("vwe,rwe->rvw", k2bar, ps) * we
        return sqrtE[None, None, :] * aw * np.einsum("vwE,rvw->rvE", k1, g)

    def rhs(ps, rh):
        sig_rho_mean = np.einsum("wey,rwey->rwe", sig, rh) * wy
        dps = (
            -sqrtE[None, None, :] * sig_mean[None] * ps
            + s_of_psi(ps)
            + s_of_rho(rh)
            - sqrtE[None, None, :] * sig_rho_mean
        )
        drh = -sqrtE[None, None, :, None] * (
            sig[None] * rh - sig_rho_mean[..., None] + sig_fluct[None] * ps[..., None]
        )
        return dps, drh

    times = np.linspace(0.0, t_end, n_steps + 1)
    dt = times[1] - times[0]
    psis = np.empty((n_steps + 1,) + psi.shape)
    psis[0] = psi
    max_mean = float(np.max(np.abs(rho.mean(axis=3))))
    for n in range(n_steps):
        k1p, k1r = rhs(psi, rho)
        k2p, k2r = rhs(psi + 0.5 * dt * k1p, rho + 0.5 * dt * k1r)
        k3p, k3r = rhs(psi + 0.5 * dt * k2p, rho + 0.5 * dt * k2r)
        k4p, k4r = rhs(psi + dt * k3p, rho + dt * k3r)
        psi = psi + (dt / 6.0) * (k1p + 2 * k2p + 2 * k3p + k4p)
        rho = rho + (dt / 6.0) * (k1r + 2 * k2r + 2 * k3r + k4r)
        psis[n + 1] = psi
        max_mean = max(max_mean, float(np.max(np.abs(rho.mean(axis=3)))))
    hom_field = PhaseSpaceField(times, r, grids.angles, energies, psis)
    # only the final corrector state is kept; its history would dominate
    # memory and downstream consumers need the invariant, not the path
    rho_field = PhaseSpaceField(
        times[-1:],
        r,
        grids.angles,
        energies,
        rho[None],
        y_nodes=ygrid.nodes,
    )
    return TwoScaleTransportSolution(hom_field, rho_field, max_mean)


def solve_closed_kernel_transport(
    params: OpticalParameters,
    phi_in,
    grids: TransportGrids,
    t_end: float = 1.5,
    n_steps: int = 300,
    picard_tol: float = 1e-13,
) -> PhaseSpaceField:
    """Verification route: march the closed memory-kernel equation.

    The corrector is eliminated through its Duhamel formula, leaving a
    Volterra equation for psi_hom whose kernels are cell averages of the
    energy-scaled semigroup exp(-tau sqrt(E) L_sigma) applied to the
    sigma fluctuation, weighted by sigma (local part) or kappa2
    (scattering part).  History cost is quadratic in n_steps: this route
    exists to verify the coupled system, so run it on reduced grids.
    """
    support = getattr(phi_in, "support", grids.r_box)
    check_characteristics_interior(grids, support, t_end)
    energies, we, ygrid, sig, k1, k2y, k2bar, sqrtE = _two_scale_operators(
        params, grids
    )
    sig_mean = sig.mean(axis=2)
    sig_fluct = sig - sig_mean[:, :, None]
    wy = 1.0 / grids.n_y
    aw = grids.angle_weight
    r = grids.r_nodes
    times = np.linspace(0.0, t_end, n_steps + 1)
    dt = times[1] - times[0]

    phi0 = np.stack(
        [
            phi_in(
                rv,
                grids.angles[:, None, None],
                energies[None, :, None],
                ygrid.nodes[None, None, :],
            )
            for rv in r
        ]
    )
    psi0 = phi0.mean(axis=3)
    rho0 = phi0 - psi0[..., None]

    # cell generator applied per (w, E): L_sig v = sig v - <sig v>
    def apply_L(v):
        sv = sig[None] * v if v.ndim == 4 else sig * v
        return sv - sv.mean(axis=-1, keepdims=True)

    scaled = sqrtE[None, :, None]

    def decay_rhs(v):
        # d/dt v = -sqrt(E) L_sigma v, batched over leading axes
        if v.ndim == 4:
            return -scaled[None] * apply_L(v)
        return -scaled * apply_L(v)

    # march the kernel state W and the source state V together with RK4
    W = sig_fluct.copy()  # L_1 sigma
    V = rho0.copy()       # L_1 phi_in per r-slice

    kd = np.empty((n_steps + 1,) + sig_mean.shape)            # E <sig W>
    kc = np.empty((n_steps + 1,) + k2y.shape[:3])             # sqrt(E') <k2 W>
    src = np.empty((n_steps + 1,) + psi0.shape)

    def record(j, Wj, Vj):
        kd[j] = energies[None, :] * (sig * Wj).mean(axis=2)
        kc[j] = sqrtE[None, None, :] * np.einsum("vwey,wey->vwe", k2y, Wj) * wy
        g = np.einsum("vwey,rwey->rvwe", k2y, Vj, optimize=True) * wy
        inner = we * g.sum(axis=3)
        s_kappa = sqrtE[None, None, :] * aw * np.einsum("vwE,rvw->rvE", k1, inner)
        s_local = sqrtE[None, None, :] * np.einsum("wey,rwey->rwe", sig, Vj) * wy
        src[j] = s_kappa - s_local

    record(0, W, V)
    nsub = max(1, int(np.ceil(dt / 2e-3)))
    h = dt / nsub
    for j in range(1, n_steps + 1):
        for _ in range(nsub):
            kW1 = decay_rhs(W)
            kW2 = decay_rhs(W + 0.5 * h * kW1)
            kW3 = decay_rhs(W + 0.5 * h * kW2)
            kW4 = decay_rhs(W + h * kW3)
            W = W + (h / 6.0) * (kW1 + 2 * kW2 + 2 * kW3 + kW4)
            kV1 = decay_rhs(V)
            kV2 = decay_rhs(V + 0.5 * h * kV1)
            kV3 = decay_rhs(V + 0.5 * h * kV2)
            kV4 = decay_rhs(V + h * kV3)
            V = V + (h / 6.0) * (kV1 + 2 * kV2 + 2 * kV3 + kV4)
        record(j, W, V)

    # instantaneous scattering of the mean field
    def c_inst(ps):
        g = np.einsum("vwe,rwe->rvw", k2bar, ps) * we
        return sqrtE[None, None, :] * aw * np.einsum("vwE,rvw->rvE", k1, g)

    def kc_apply(kc_slice, ps):
        # kc_slice: (nv, nw, nE'), ps: (nr, nw, nE')
        g = np.einsum("vwe,rwe->rvw", kc_slice, ps) * we
        return sqrtE[None, None, :] * aw * np.einsum("vwE,rvw->rvE", k1, g)

    # product-trapezoid march of
    # dpsi/dt + sqrt(E)<sig> psi - c_inst(psi)
    #   = src(t) + int_0^t [kd(t-s) psi(s) - kc(t-s) psi(s)] ds
    diag = sqrtE[None, :] * sig_mean
    denom = 1.0 + 0.5 * dt * diag - 0.25 * dt * dt * kd[0]
    psis = np.empty((n_steps + 1,) + psi0.shape)
    psis[0] = psi0
    conv_prev = np.zeros_like(psi0)
    for n in range(n_steps):
        # known part of the trapezoid history at t_{n+1}
        hist = np.zeros_like(psi0)
        if n >= 1:
            hist = np.einsum(
                "lwe,lrwe->rwe", kd[1 : n + 1][::-1], psis[1 : n + 1]
            )
            g = np.einsum("lvwe,lrwe->rvw", kc[1 : n + 1][::-1], psis[1 : n + 1]) * we
            hist = hist - sqrtE[None, None, :] * aw * np.einsum(
                "vwE,rvw->rvE", k1, g
            )
        conv_known = dt * (
            0.5 * (kd[n + 1] * psis[0] - kc_apply(kc[n + 1], psis[0])) + hist
        )
        rhs_fixed = (
            psis[n] * (1.0 - 0.5 * dt * diag)
            + 0.5 * dt * (c_inst(psis[n]) + src[n] + src[n + 1])
            + 0.5 * dt * (conv_known + conv_prev)
        )
        # Picard over the off-diagonal implicit couplings
        nxt = psis[n].copy()
        for _ in range(80):
            coupling = 0.5 * dt * c_inst(nxt) - 0.25 * dt * dt * kc_apply(kc[0], nxt)
            upd = (rhs_fixed + coupling) / denom
            delta = np.max(np.abs(upd - nxt))
            nxt = upd
            if delta < picard_tol:
                break
        psis[n + 1] = nxt
        conv_prev = conv_known + 0.5 * dt * (
            kd[0] * nxt - kc_apply(kc[0], nxt)
        )
    return PhaseSpaceField(times, r, grids.angles, energies, psis)


def windowed_weak_error(
    eps_sol: CharacteristicsSolution,
    hom_field: PhaseSpaceField,
    n_windows: int = 6,
) -> float:
    """Max over (t, r, omega, window) of the windowed-in-E average gap.

    Each field integrates over the windows with its own quadrature, the
    homogenized reference is restricted to the oscillatory run's active
    r-slices and interpolated linearly onto its time grid.  Window edges
    must align with the cells of both energy grids.
    """
    per_hom = len(hom_field.energies) // n_windows
    if per_hom * n_windows != len(hom_field.energies):
        raise ValueError("window count must divide the reference energy grid")
    if eps_sol.windowed is None or eps_sol.windowed.shape[-1] != n_windows:
        raise ValueError("oscillatory solution lacks matching windowed data")
    r_idx = []
    for rv in eps_sol.r_nodes:
        matches = np.nonzero(np.abs(hom_field.r_nodes - rv) < 1e-12)[0]
        if len(matches) != 1:
            raise ValueError("r-grids of the two solutions do not align")
        r_idx.append(matches[0])
    hom_vals = hom_field.values[:, r_idx]
    hom_win = hom_vals.reshape(hom_vals.shape[:-1] + (n_windows, per_hom)).mean(
        axis=-1
    )
    # linear time interpolation onto the oscillatory grid
    pos = np.interp(eps_sol.times, hom_field.times, np.arange(len(hom_field.times)))
    j0 = np.clip(np.floor(pos).astype(int), 0, len(hom_field.times) - 2)
    w = (pos - j0)[:, None, None, None]
    hom_on_eps = (1.0 - w) * hom_win[j0] + w * hom_win[j0 + 1]
    return float(np.max(np.abs(eps_sol.windowed - hom_on_eps)))
