import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from htsco.core import Dataset, MomentSpec, RngStream, ScheduleWarning, ZCDP
from htsco.estimators import MeanEstimate
from htsco.sco import (
    ConstraintSet,
    LossOracle,
    T_CAP,
    cdp_sco_convex_hdme,
    cdp_sco_convex_nsme,
    cdp_sco_strongly_convex,
    excess_risk,
    project_ball,
    resolve_strongly_convex_T,
    scof,
    _resolve_convex_T,
)


def quadratic_loss(diameter=1.0, R=1.0, k=2.0, lam=1.0):
    return LossOracle(
        grad=lambda w, x: w - x,
        value=lambda w, x: 0.5 * float(np.sum((w - x) ** 2)),
        grad_batch=lambda w, X: w[None, :] - X,
        value_batch=lambda w, X: 0.5 * np.sum((w[None, :] - X) ** 2, axis=1),
        smoothness=1.0, strong_convexity=lam, diameter=diameter,
        grad_mean_bound=R, moment=MomentSpec(k=k))


def exact_mean_oracle(gds, srng):
    return MeanEstimate(value=gds.samples.mean(axis=0), tau_used=1.0,
                        m_used=None, budget_spent=None, noise_sigma=0.0)


def zero_oracle(gds, srng):
    return MeanEstimate(value=np.zeros(gds.d), tau_used=1.0,
                        m_used=None, budget_spent=None, noise_sigma=0.0)


class TestProjectBall:
    def test_interior_identity(self):
        cset = ConstraintSet(center=np.zeros(2), radius=1.0)
        theta = np.array([0.3, -0.4])
        np.testing.assert_array_equal(project_ball(theta, cset), theta)

    def test_radial_scaling(self):
        cset = ConstraintSet(center=np.zeros(2), radius=1.0)
        np.testing.assert_allclose(project_ball(np.array([3.0, 4.0]), cset),
                                   [0.6, 0.8])

    def test_offcenter(self):
        cset = ConstraintSet(center=np.array([1.0, 1.0]), radius=2.0)
        out = project_ball(np.array([1.0, 5.0]), cset)
        np.testing.assert_allclose(out, [1.0, 3.0])

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=2),
           st.lists(st.floats(-50, 50), min_size=2, max_size=2))
    def test_nonexpansive(self, a, b):
        cset = ConstraintSet(center=np.array([0.5, -0.5]), radius=1.5)
        pa, pb = project_ball(np.array(a), cset), project_ball(np.array(b), cset)
        assert np.linalg.norm(pa - pb) <= np.linalg.norm(np.array(a) - np.array(b)) + 1e-12
        assert cset.contains(pa) and cset.contains(pb)


class TestConstraintSet:
    def test_rejects_bad_radius(self):
        with pytest.raises(ValueError):
            ConstraintSet(center=np.zeros(2), radius=0.0)

    def test_diameter(self):
        assert ConstraintSet(center=np.zeros(3), radius=0.2).diameter == 0.4


class TestLossOracle:
    def test_rejects_lam_above_L(self):
        with pytest.raises(ValueError):
            quadratic_loss(lam=2.0)

    def test_rejects_bad_diameter(self):
        with pytest.raises(ValueError):
            LossOracle(grad=lambda w, x: w, value=lambda w, x: 0.0,
                       smoothness=1.0, strong_convexity=0.0, diameter=0.0,
                       grad_mean_bound=1.0, moment=MomentSpec(k=2.0))


class TestScof:
    CSET = ConstraintSet(center=np.zeros(2), radius=5.0)

    def test_single_exact_step_lands_on_sample_mean(self):
        rng = np.random.default_rng(0)
        ds = Dataset(rng.normal(size=(100, 2)))
        traj = scof(ds, quadratic_loss(), exact_mean_oracle, eta=1.0, T=1,
                    mode="convex", constraint=self.CSET, rng=RngStream(1))
        np.testing.assert_allclose(traj.iterates[1], ds.samples.mean(axis=0),
                                   atol=1e-14)

    def test_exact_oracle_matches_contraction(self):
        # iterate error must follow (1 - eta)^t for the quadratic loss
        rng = np.random.default_rng(1)
        ds = Dataset(rng.normal(size=(300, 2)) * 0.1)
        eta = 0.6
        traj = scof(ds, quadratic_loss(), exact_mean_oracle, eta=eta, T=50,
                    mode="convex", constraint=self.CSET, rng=RngStream(1))
        xbar = ds.samples.mean(axis=0)
        errs = np.linalg.norm(traj.iterates - xbar, axis=1)
        pred = (1 - eta) ** np.arange(51) * errs[0]
        assert np.max(np.abs(errs - pred)) < 1e-12

    def test_zero_oracle_freezes_trajectory(self):
        ds = Dataset(np.ones((10, 2)))
        w0 = np.array([0.5, -0.25])
        traj = scof(ds, quadratic_loss(), zero_oracle, eta=0.5, T=7,
                    mode="convex", constraint=self.CSET, rng=RngStream(1), w0=w0)
        np.testing.assert_array_equal(traj.iterates,
                                      np.tile(w0, (8, 1)))

    def test_oracle_called_once_per_step(self):
        calls = []

        def counting(gds, srng):
            calls.append(gds.n)
            return exact_mean_oracle(gds, srng)

        ds = Dataset(np.ones((12, 2)))
        scof(ds, quadratic_loss(), counting, eta=0.1, T=4, mode="convex",
             constraint=self.CSET, rng=RngStream(1))
        assert calls == [12, 12, 12, 12]

    def test_strongly_convex_batches_partition(self):
        seen = []

        def recording(gds, srng):
            seen.append(gds.samples.copy())
            return zero_oracle(gds, srng)

        ds = Dataset(np.arange(22.0).reshape(11, 2))
        scof(ds, quadratic_loss(), recording, eta=0.1, T=3,
             mode="strongly_convex", constraint=self.CSET, rng=RngStream(1),
             w0=np.zeros(2))
        # zero oracle keeps w at 0, so gradients are w - x = -x per block
        blocks = [-s for s in seen]
        assert [len(b) for b in blocks] == [3, 3, 3]  # floor(11/3), remainder unused
        np.testing.assert_array_equal(np.vstack(blocks), ds.samples[:9])

    def test_strongly_convex_needs_n_at_least_T(self):
        ds = Dataset(np.ones((3, 2)))
        with pytest.raises(ValueError):
            scof(ds, quadratic_loss(), zero_oracle, eta=0.1, T=4,
                 mode="strongly_convex", constraint=self.CSET, rng=RngStream(1))

    def test_w0_outside_set_rejected(self):
        ds = Dataset(np.ones((5, 2)))
        with pytest.raises(ValueError):
            scof(ds, quadratic_loss(), zero_oracle, eta=0.1, T=1, mode="convex",
                 constraint=self.CSET, rng=RngStream(1), w0=np.array([10.0, 0.0]))

    def test_iterates_stay_feasible(self):
        # gradients large enough that unprojected steps would leave the ball
        rng = np.random.default_rng(5)
        ds = Dataset(rng.normal(size=(50, 2)) * 40.0)
        cset = ConstraintSet(center=np.zeros(2), radius=0.5)
        traj = scof(ds, quadratic_loss(), exact_mean_oracle, eta=1.0, T=20,
                    mode="convex", constraint=cset, rng=RngStream(2))
        gaps = np.linalg.norm(traj.iterates, axis=1)
        assert np.all(gaps <= 0.5 + 1e-9)


class TestConvexDrivers:
    @staticmethod
    def _data(n, d, seed=0):
        rng = np.random.default_rng(seed)
        return Dataset(rng.standard_t(2.1, size=(n, d)) * 0.2182178902)

    def test_hdme_reference_schedule(self):
        # R=1, rho=1, n=1e4, M=1, d=2, k=2
        ds = self._data(10**4, 2)
        cset = ConstraintSet(center=np.zeros(2), radius=0.5)
        res = cdp_sco_convex_hdme(ds, quadratic_loss(), 1.0,
                                  RngStream(7).child("h"), constraint=cset)
        assert res.tau == pytest.approx(59.46035575013605, abs=1e-10)
        assert res.T == 1767
        assert res.eta == pytest.approx(1.0 / math.sqrt(1767))

    def test_nsme_reference_schedule(self):
        # R=1, rho=1, n=1e4, M=1, d=4, q=1
        ds = self._data(10**4, 4)
        cset = ConstraintSet(center=np.zeros(4), radius=0.5)
        res = cdp_sco_convex_nsme(ds, quadratic_loss(), 1.0, 1.0,
                                  RngStream(7).child("n"), constraint=cset)
        assert res.tau == 50.0
        assert res.T == 2500
        assert res.q == 1.0 and res.calibration == "exact"

    def test_budget_composes_exactly(self):
        ds = self._data(500, 2)
        cset = ConstraintSet(center=np.zeros(2), radius=0.5)
        res = cdp_sco_convex_hdme(ds, quadratic_loss(), 0.7,
                                  RngStream(8).child("b"), constraint=cset)
        total = res.ledger.total()
        assert isinstance(total, ZCDP)
        assert abs(total.rho - 0.7) <= np.spacing(0.7)
        assert len(res.ledger.entries) == res.T

    def test_output_is_iterate_average(self):
        ds = self._data(500, 2)
        cset = ConstraintSet(center=np.zeros(2), radius=0.5)
        res = cdp_sco_convex_hdme(ds, quadratic_loss(), 1.0,
                                  RngStream(9).child("a"), constraint=cset)
        np.testing.assert_allclose(res.w_priv,
                                   res.trajectory.iterates[1:].mean(axis=0))

    def test_nsme_q_range_enforced(self):
        ds = self._data(100, 2)
        with pytest.raises(ValueError):
            cdp_sco_convex_nsme(ds, quadratic_loss(), 1.0, 2.5, RngStream(1))

    def test_q_endpoints_run(self):
        ds = self._data(200, 2)
        cset = ConstraintSet(center=np.zeros(2), radius=0.5)
        for q in (0.5, 2.0):
            res = cdp_sco_convex_nsme(ds, quadratic_loss(), 1.0, q,
                                      RngStream(10).child(q), constraint=cset)
            assert abs(res.ledger.total().rho - 1.0) <= np.spacing(1.0)

    def test_T_clamped_to_1_warns(self):
        with pytest.warns(ScheduleWarning):
            assert _resolve_convex_T(0.3) == 1

    def test_T_capped_warns(self):
        with pytest.warns(ScheduleWarning):
            assert _resolve_convex_T(3.2e7) == T_CAP

    def test_deterministic_given_stream(self):
        ds = self._data(500, 2)
        cset = ConstraintSet(center=np.zeros(2), radius=0.5)
        a = cdp_sco_convex_hdme(ds, quadratic_loss(), 1.0,
                                RngStream(11).child("s"), constraint=cset)
        b = cdp_sco_convex_hdme(ds, quadratic_loss(), 1.0,
                                RngStream(11).child("s"), constraint=cset)
        np.testing.assert_array_equal(a.w_priv, b.w_priv)


class TestStronglyConvexDriver:
    def test_step_counts_across_n(self):
        got = {}
        for n in (2**10, 2**12, 2**14, 2**16):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ScheduleWarning)
                got[n] = resolve_strongly_convex_T(n, 2, 2.0, 1.0, 1.0, 1.0)
        assert got == {2**10: 7, 2**12: 1, 2**14: 2, 2**16: 3}

    def test_degenerate_falls_back_to_log_n(self):
        with pytest.warns(ScheduleWarning):
            T = resolve_strongly_convex_T(2**10, 2, 2.0, 1.0, 1.0, 1.0)
        assert T == math.ceil(math.log(2**10))

    def test_eta_is_inverse_lam_plus_L(self):
        rng = np.random.default_rng(3)
        ds = Dataset(rng.standard_t(2.1, size=(2**14, 2)) * 0.2182178902)
        cset = ConstraintSet(center=np.zeros(2), radius=0.5)
        res = cdp_sco_strongly_convex(ds, quadratic_loss(), 1.0,
                                      RngStream(12).child("sc"), constraint=cset)
        assert res.eta == 0.5  # lam = L = 1

    def test_returns_last_iterate_and_full_budget(self):
        rng = np.random.default_rng(4)
        ds = Dataset(rng.standard_t(2.1, size=(2**14, 2)) * 0.2182178902)
        cset = ConstraintSet(center=np.zeros(2), radius=0.5)
        res = cdp_sco_strongly_convex(ds, quadratic_loss(), 1.0,
                                      RngStream(13).child("sc"), constraint=cset)
        np.testing.assert_array_equal(res.w_priv, res.trajectory.iterates[-1])
        assert abs(res.ledger.total().rho - 1.0) <= np.spacing(1.0)
        assert len(res.ledger.entries) == res.T

    def test_requires_strong_convexity(self):
        ds = Dataset(np.ones((100, 2)))
        with pytest.raises(ValueError):
            cdp_sco_strongly_convex(ds, quadratic_loss(lam=0.0), 1.0, RngStream(1))


class TestExcessRisk:
    def test_same_point_is_zero(self):
        ds = Dataset(np.random.default_rng(0).normal(size=(100, 2)))
        val, se = excess_risk(quadratic_loss(), ds, np.ones(2), np.ones(2))
        assert val == 0.0

    def test_quadratic_matches_closed_form(self):
        rng = np.random.default_rng(6)
        ds = Dataset(rng.standard_t(2.1, size=(10**5, 2)) * 0.2182178902)
        w = np.array([0.12, -0.05])
        val, se = excess_risk(quadratic_loss(), ds, w, np.zeros(2))
        # population identity: 0.5 ||w - mu||^2 with mu = 0
        assert abs(val - 0.5 * float(np.sum(w**2))) <= 4 * se

    def test_linear_is_exact_inner_product(self):
        rng = np.random.default_rng(7)
        ds = Dataset(rng.normal(size=(500, 3)))
        loss = LossOracle(grad=lambda w, x: -x, value=lambda w, x: -float(np.dot(w, x)),
                          value_batch=lambda w, X: -(X @ w),
                          smoothness=0.0, strong_convexity=0.0, diameter=2.0,
                          grad_mean_bound=1.0, moment=MomentSpec(k=2.0))
        w, w_star = np.array([1.0, 0.0, 2.0]), np.array([0.5, 1.0, 0.0])
        val, _ = excess_risk(loss, ds, w, w_star)
        expect = -float(np.dot(w - w_star, ds.samples.mean(axis=0)))
        assert val == pytest.approx(expect, abs=1e-12)
