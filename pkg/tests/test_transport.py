"""Transport tests: subcriticality, coercivity, solvers, equivalences."""

import numpy as np
import pytest

from homokin.boltzmann import solve_separable_energy_model
from homokin.transport import (
    ConfigurationError,
    OpticalParameters,
    TransportGrids,
    coercivity_test,
    hat_initial_data,
    kappa_bars,
    scattering_matrix,
    solve_characteristics_eps,
    solve_closed_kernel_transport,
    solve_two_scale_transport,
    subcriticality_check,
    transport_preset,
    windowed_weak_error,
)

GRIDS = TransportGrids()
SUB = transport_preset("transport-subcritical-1")
KAPPA0 = transport_preset("transport-kappa0")


class TestKappaBars:
    def test_zero_kernel(self):
        bar, tilde = kappa_bars(KAPPA0, 0.125, GRIDS)
        assert np.max(np.abs(bar)) == 0.0
        assert np.max(np.abs(tilde)) == 0.0

    def test_isotropic_closed_form(self):
        # kappa1 = kappa2 = 1 on E in (0, 1): bar = 2 pi sqrt(E) * range
        params = OpticalParameters(
            sigma=lambda th, E, y: 2.0 + 0.0 * y,
            kappa1=lambda mu, E: np.ones_like(mu * E),
            kappa2=lambda mu, Ep, yp: np.ones_like(mu * Ep * yp),
        )
        grids = TransportGrids(e_min=0.0, e_max=1.0)
        bar, tilde = kappa_bars(params, 0.1, grids)
        expect = 2.0 * np.pi * np.sqrt(grids.energy_nodes())
        assert np.max(np.abs(bar - expect[None, :])) < 1e-12
        # tilde integrates sqrt(E') over the outgoing energy: constant
        expect_tilde = 2.0 * np.pi * np.mean(np.sqrt(grids.energy_nodes()))
        assert np.max(np.abs(tilde - expect_tilde)) < 1e-12

    def test_y_independent_kappa2_is_eps_independent(self):
        params = OpticalParameters(
            sigma=lambda th, E, y: 2.0 + 0.0 * y,
            kappa1=lambda mu, E: (1.0 + 0.5 * mu) / (2 * np.pi),
            kappa2=lambda mu, Ep, yp: 0.5 + 0.0 * yp,
        )
        a1, t1 = kappa_bars(params, 0.1, GRIDS)
        a2, t2 = kappa_bars(params, 0.025, GRIDS)
        assert np.max(np.abs(a1 - a2)) < 1e-14
        assert np.max(np.abs(t1 - t2)) < 1e-14


class TestSubcriticality:
    def test_kappa0_margin_is_min_sigma(self):
        margin = subcriticality_check(KAPPA0, 0.125, GRIDS)
        sig = KAPPA0.sigma_eps(GRIDS.angles, GRIDS.energy_nodes(), 0.125)
        assert abs(margin - float(np.min(sig))) < 1e-14

    def test_constant_sigma_on_upper_window(self):
        # kappa = 0 with flat sigma = 2 on E in [0.5, 1]: the margin is the
        # grid minimum of 2 sqrt(E), approached from sqrt(0.5)*2 as the
        # first cell center converges to the window edge
        params = OpticalParameters(
            sigma=lambda th, E, y: 2.0 + 0.0 * y,
            kappa1=KAPPA0.kappa1,
            kappa2=KAPPA0.kappa2,
        )
        grids = TransportGrids(e_min=0.5, e_max=1.0)
        n_e = 4096
        margin = subcriticality_check(params, 0.125, grids, n_e=n_e)
        first_node = grids.energy_nodes(n_e)[0]
        assert margin == 2.0 * np.sqrt(first_node)
        assert margin == pytest.approx(2.0 * np.sqrt(0.5), abs=1e-3)

    def test_kappa0_margin_matches_dense_sampling_oracle(self):
        # the continuous minimum of sqrt(E)(2 + sin(2 pi E/eps)/2) sits where
        # the sine dip closest to the window edge wins over the sqrt growth
        margin = subcriticality_check(KAPPA0, 0.125, GRIDS, n_e=4096)
        E = np.linspace(0.25, 1.0, 200001)
        oracle = np.min(np.sqrt(E) * (2.0 + 0.5 * np.sin(2 * np.pi * E / 0.125)))
        assert margin == pytest.approx(oracle, abs=1e-4)

    def test_subcritical_preset_has_positive_margin(self):
        assert subcriticality_check(SUB, 0.125, GRIDS) > 0.1

    def test_violating_configuration_flags_negative(self):
        params = OpticalParameters(
            sigma=lambda th, E, y: 0.1 + 0.0 * y,
            kappa1=lambda mu, E: np.ones_like(mu * E),
            kappa2=lambda mu, Ep, yp: np.ones_like(mu * Ep * yp),
        )
        assert subcriticality_check(params, 0.125, GRIDS) < 0.0

    def test_margin_scaling_inequality(self):
        # margin(2 sigma, kappa) >= margin(sigma, kappa) + min sigma_eps
        doubled = OpticalParameters(
            sigma=lambda th, E, y: 2.0 * SUB.sigma(th, E, y),
            kappa1=SUB.kappa1,
            kappa2=SUB.kappa2,
        )
        m1 = subcriticality_check(SUB, 0.125, GRIDS)
        m2 = subcriticality_check(doubled, 0.125, GRIDS)
        sig_min = float(np.min(SUB.sigma_eps(GRIDS.angles, GRIDS.energy_nodes(), 0.125)))
        assert m2 >= m1 + sig_min - 1e-12


class TestCoercivity:
    def test_quotient_dominates_margin(self):
        margin = subcriticality_check(SUB, 0.125, GRIDS)
        q = coercivity_test(SUB, 0.125, GRIDS, trials=100, seed=42)
        assert q >= margin - 1e-6

    def test_kappa0_quotient_at_least_min_sigma(self):
        sig = KAPPA0.sigma_eps(GRIDS.angles, GRIDS.energy_nodes(), 0.125)
        q = coercivity_test(KAPPA0, 0.125, GRIDS, trials=25, seed=7)
        assert q >= float(np.min(sig)) - 1e-12

    def test_constant_field_value(self):
        sig = SUB.sigma_eps(GRIDS.angles, GRIDS.energy_nodes(), 0.125).reshape(-1)
        K = scattering_matrix(SUB, 0.125, GRIDS)
        we = GRIDS.energy_weight()
        w = np.full(len(sig), GRIDS.angle_weight * we)
        f = np.ones(len(sig))
        expect = float((w * f) @ (sig * f - K @ f)) / float((w * f) @ f)
        # oracle recomputation with independent loops
        qf = sig - K.sum(axis=1)
        oracle = float((w * qf).sum() / w.sum())
        assert abs(expect - oracle) < 1e-12

    def test_deterministic_under_seed(self):
        q1 = coercivity_test(SUB, 0.125, GRIDS, trials=10, seed=3)
        q2 = coercivity_test(SUB, 0.125, GRIDS, trials=10, seed=3)
        assert q1 == q2


class TestCharacteristicsSolver:
    def test_kappa0_pure_decay(self):
        grids = TransportGrids(n_r=8, n_e=48)
        phi_in = hat_initial_data(0.5)
        eps = 0.125
        sol = solve_characteristics_eps(
            KAPPA0, phi_in, eps, grids, t_end=1.0, n_steps=20, store_full=True
        )
        y = np.mod(sol.energies / eps, 1.0)
        sig = KAPPA0.sigma_eps(grids.angles, sol.energies, eps)
        for i, rv in enumerate(sol.r_nodes):
            base = phi_in(rv, grids.angles[:, None], sol.energies[None, :], y[None, :])
            exact = base[None] * np.exp(-sol.times[:, None, None] * sig[None])
            assert np.max(np.abs(sol.values[:, i] - exact)) < 1e-8

    def test_linearity_in_initial_data(self):
        grids = TransportGrids(n_r=8, n_e=48)
        eps = 0.25
        sol1 = solve_characteristics_eps(
            SUB, hat_initial_data(0.5), eps, grids, t_end=0.5, n_steps=20,
            store_full=True,
        )

        def scaled(r, th, E, y):
            return 2.5 * hat_initial_data(0.5)(r, th, E, y)

        scaled.support = 0.5
        sol2 = solve_characteristics_eps(
            SUB, scaled, eps, grids, t_end=0.5, n_steps=20, store_full=True
        )
        assert np.max(np.abs(sol2.values - 2.5 * sol1.values)) < 1e-12

    def test_positivity_preserved(self):
        grids = TransportGrids(n_r=8, n_e=48)
        sol = solve_characteristics_eps(
            SUB, hat_initial_data(0.5), 0.125, grids, t_end=1.0, n_steps=50
        )
        assert sol.min_value >= 0.0

    def test_exterior_characteristics_rejected(self):
        with pytest.raises(ConfigurationError):
            solve_characteristics_eps(
                SUB, hat_initial_data(0.5), 0.25, GRIDS, t_end=5.0
            )

    def test_matches_energy_model_when_isotropic(self):
        # omega-blind configuration: kappa1 = 1/(2 pi), kappa2 = 1, sigma = 2
        params = OpticalParameters(
            sigma=lambda th, E, y: 2.0 + 0.0 * y,
            kappa1=lambda mu, E: np.full_like(mu * E, 1.0 / (2 * np.pi)),
            kappa2=lambda mu, Ep, yp: np.ones_like(mu * Ep * yp),
        )
        grids = TransportGrids(n_r=8, n_omega=8, n_e=64)

        def phi_in(r, th, E, y):
            shape = np.broadcast(r, th, E, y).shape
            hat = np.maximum(0.0, 1.0 - np.abs(r) / 0.5)
            return np.broadcast_to(hat * np.ones_like(E + y), shape).copy()

        phi_in.support = 0.5
        t_end = 1.0
        sol = solve_characteristics_eps(
            params, phi_in, 0.5, grids, t_end, n_steps=4000, store_full=True
        )
        energies = sol.energies
        times, ref = solve_separable_energy_model(
            decay=2.0 * np.sqrt(energies),
            emit=np.sqrt(energies),
            collect=np.ones_like(energies),
            phi0=np.ones_like(energies),
            e_weight=grids.energy_weight(len(energies)),
            t_end=t_end,
            n_steps=1000,
        )
        hat0 = np.maximum(0.0, 1.0 - np.abs(sol.r_nodes[0]) / 0.5)
        got = sol.values[::4, 0, 0, :] / hat0
        assert np.max(np.abs(got - ref)) < 1e-6


class TestTwoScaleTransport:
    def test_y_independent_data_has_zero_corrector(self):
        params = OpticalParameters(
            sigma=lambda th, E, y: 2.0 + 0.0 * y,
            kappa1=SUB.kappa1,
            kappa2=lambda mu, Ep, yp: 0.3 + 0.0 * yp,
        )

        def phi_in(r, th, E, y):
            shape = np.broadcast(r, th, E, y).shape
            hat = np.maximum(0.0, 1.0 - np.abs(r) / 0.5)
            return np.broadcast_to(hat * np.ones_like(y), shape).copy()

        phi_in.support = 0.5
        grids = TransportGrids(n_r=8, n_omega=4, n_e=12, n_y=16)
        sol = solve_two_scale_transport(params, phi_in, grids, t_end=0.5, n_steps=100)
        assert np.max(np.abs(sol.rho.values)) < 1e-14
        assert sol.max_mean_rho < 1e-14

    def test_kappa0_two_valued_sigma_pointwise_average(self):
        params = OpticalParameters(
            sigma=lambda th, E, y: np.where(np.mod(y, 1.0) < 0.5, 1.0, 3.0),
            kappa1=KAPPA0.kappa1,
            kappa2=KAPPA0.kappa2,
        )
        phi_in = hat_initial_data(0.5)
        grids = TransportGrids(n_r=8, n_omega=4, n_e=12, n_y=64)
        sol = solve_two_scale_transport(params, phi_in, grids, t_end=1.0, n_steps=400)
        E = grids.energy_nodes()
        hats = np.maximum(0.0, 1.0 - np.abs(grids.r_nodes) / 0.5)
        sq = np.sqrt(E)
        # phi_in = hat(r)(1 + sin(2 pi y)): the sin part couples to sigma's
        # two-valued profile; the mean part relaxes as the two-point average
        t = sol.psi_hom.times[:, None]
        mean_decay = 0.5 * (np.exp(-sq * t) + np.exp(-3.0 * sq * t))
        sin_coupling = 0.0  # <sin * exp(-t sqrt(E) sigma)> for two-valued sigma
        yg = (np.arange(grids.n_y) + 0.5) / grids.n_y
        sig_y = np.where(yg < 0.5, 1.0, 3.0)
        osc = np.array(
            [
                np.mean(
                    np.sin(2 * np.pi * yg)
                    * np.exp(-tv * np.sqrt(E)[:, None] * sig_y[None, :]),
                    axis=1,
                )
                for tv in sol.psi_hom.times
            ]
        )
        expect = (mean_decay + osc)[:, None, None, :] * hats[None, :, None, None]
        got = np.moveaxis(sol.psi_hom.values, 1, 1)
        assert np.max(np.abs(got - expect)) < 1e-6

    def test_zero_mean_constraint(self):
        grids = TransportGrids(n_r=8, n_omega=4, n_e=12, n_y=32)
        sol = solve_two_scale_transport(
            SUB, hat_initial_data(0.5), grids, t_end=0.5, n_steps=100
        )
        assert sol.max_mean_rho < 1e-10


class TestClosedKernelEquivalence:
    def test_routes_agree(self):
        grids = TransportGrids(n_omega=4, n_e=8, n_y=32, n_r=8)
        phi_in = hat_initial_data(0.5)
        ts = solve_two_scale_transport(SUB, phi_in, grids, t_end=0.75, n_steps=600)
        ck = solve_closed_kernel_transport(SUB, phi_in, grids, t_end=0.75, n_steps=600)
        assert np.max(np.abs(ts.psi_hom.values - ck.values)) < 1e-6


class TestFieldExport:
    def test_long_format_roundtrip(self, tmp_path):
        from homokin.transport import PhaseSpaceField, export_field_csv

        times = np.array([0.0, 0.5])
        r = np.array([-0.25, 0.25])
        angles = np.array([0.0, np.pi])
        energies = np.array([0.375, 0.625])
        values = np.arange(16, dtype=float).reshape(2, 2, 2, 2)
        field = PhaseSpaceField(times, r, angles, energies, values)
        path = tmp_path / "field.csv"
        export_field_csv(field, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "t,r,omega,E,value"
        assert len(lines) == 17
        first = [float(v) for v in lines[1].split(",")]
        assert first == [0.0, -0.25, 0.0, 0.375, 0.0]
        last = [float(v) for v in lines[-1].split(",")]
        assert last[-1] == 15.0


class TestWeakSweep:
    def test_windowed_error_halves(self):
        grids = TransportGrids(n_e=48, n_r=16)
        phi_in = hat_initial_data(0.5)
        hom = solve_two_scale_transport(SUB, phi_in, grids, t_end=1.0, n_steps=150)
        errs = []
        sups = []
        for eps in (1 / 8, 1 / 16):
            sol = solve_characteristics_eps(
                SUB, phi_in, eps, grids, t_end=1.0, n_steps=150
            )
            errs.append(windowed_weak_error(sol, hom.psi_hom))
            sups.append(sol.sup_l2)
        assert 1.5 <= errs[0] / errs[1] <= 3.0
        assert max(sups) / min(sups) < 1.05  # uniform a-priori bound
