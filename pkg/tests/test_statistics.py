import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakiv.model import Hypothesis, ReducedForm, null_rotate, null_stats, st_decompose
from weakiv.numerics import (
    NumericalError,
    RngStream,
    SymPD,
    gauss_legendre,
    gauss_legendre_split,
)
from weakiv.statistics import (
    LROptConfig,
    ar,
    il,
    il0,
    il_original,
    lc,
    lm,
    lr,
    lr_dense_grid,
    lr_equivalence_check,
    qlr,
    theta_of_beta,
    wald,
)

from .test_model import random_group_element, random_rf, random_spd


def kronecker_rf(rng, k, beta0_scale=1.0):
    om = rng.standard_normal((2, 2))
    om = om @ om.T + 2 * np.eye(2)
    ph = rng.standard_normal((k, k))
    ph = ph @ ph.T + k * np.eye(k)
    r = rng.standard_normal((k, 2)) * 2
    return ReducedForm(R=r, sigma=SymPD(np.kron(om, ph)))


class TestWald:
    def test_zero_when_data_fit_null(self):
        rng = np.random.default_rng(0)
        r2 = rng.standard_normal(4)
        beta0 = 0.7
        r = np.column_stack([beta0 * r2, r2])
        rf = ReducedForm(R=r, sigma=SymPD(np.eye(8)))
        assert wald(rf, Hypothesis(beta0=beta0)).value == pytest.approx(0.0, abs=1e-12)

    def test_no_identification_errors(self):
        rf = ReducedForm(
            R=np.column_stack([np.ones(3), np.zeros(3)]), sigma=SymPD(np.eye(6))
        )
        with pytest.raises(NumericalError, match="Wald"):
            wald(rf, Hypothesis(beta0=0.0))

    def test_strong_instrument_normality(self):
        # lambda/k = 100: the t-ratio is near standard normal under the null
        rng = np.random.default_rng(1)
        k = 3
        mu = np.full(k, math.sqrt(100.0 * k / k))  # lambda = 100 k
        beta0 = 0.5
        mean = np.kron(np.array([beta0, 1.0]), mu)
        n = 10_000
        draws = mean + rng.standard_normal((n, 2 * k))
        sigma = SymPD(np.eye(2 * k))
        rejects = 0
        for row in draws:
            rf = ReducedForm(R=row.reshape((k, 2), order="F"), sigma=sigma)
            if abs(wald(rf, Hypothesis(beta0=beta0)).value) > 1.96:
                rejects += 1
        assert abs(rejects / n - 0.05) < 0.02


class TestARLM:
    def test_ar_zero_and_unit(self):
        rng = np.random.default_rng(2)
        rf = random_rf(rng, 3)
        st_obj = st_decompose(rf, Hypothesis(beta0=0.1))
        assert ar(st_obj).value == pytest.approx(float(st_obj.S @ st_obj.S))

    def test_ar_null_mean_is_k(self):
        rng = np.random.default_rng(3)
        k = 4
        s_draws = rng.standard_normal((10**6, k))
        vals = (s_draws**2).sum(axis=1)
        assert abs(vals.mean() - k) < 3 * math.sqrt(2 * k / 10**6) * 2

    def test_lm_orthogonal_and_parallel(self):
        rng = np.random.default_rng(4)
        k = 3
        rf = random_rf(rng, k)
        st_obj = st_decompose(rf, Hypothesis(beta0=0.0))
        from weakiv.statistics import lm_direction

        u = lm_direction(st_obj)
        s_orth = np.cross(u, np.array([1.0, 0.0, 0.0]))
        if np.linalg.norm(s_orth) < 1e-8:
            s_orth = np.cross(u, np.array([0.0, 1.0, 0.0]))
        st_perp = type(st_obj)(
            S=s_orth, T=st_obj.T, c_mat=st_obj.c_mat, d_mat=st_obj.d_mat
        )
        assert lm(st_perp).value == pytest.approx(0.0, abs=1e-16)
        st_par = type(st_obj)(
            S=2.0 * u, T=st_obj.T, c_mat=st_obj.c_mat, d_mat=st_obj.d_mat
        )
        assert lm(st_par).value == pytest.approx(float(4.0 * u @ u))

    def test_k1_lm_equals_ar(self):
        rng = np.random.default_rng(5)
        rf = random_rf(rng, 1)
        st_obj = st_decompose(rf, Hypothesis(beta0=0.3))
        assert lm(st_obj).value == pytest.approx(ar(st_obj).value, rel=1e-12)


class TestQLRLC:
    def test_qlr_zero_r(self):
        assert qlr(3.0, 1.0, np.zeros(3)).value == pytest.approx(3.0)

    def test_qlr_lm_equals_ar(self):
        t = np.array([1.0, 2.0])
        v = qlr(4.0, 4.0, t).value
        assert v == pytest.approx(4.0)

    def test_qlr_lm_zero(self):
        t = np.array([3.0, 0.0])
        assert qlr(4.0, 0.0, t).value == pytest.approx(max(4.0 - 9.0, 0.0))
        assert qlr(12.0, 0.0, t).value == pytest.approx(3.0)

    def test_qlr_rejects_lm_above_ar(self):
        with pytest.raises(ValueError, match="exceeds"):
            qlr(1.0, 2.0, np.ones(2))

    @given(
        ar_v=st.floats(0.0, 50.0),
        frac=st.floats(0.0, 1.0),
        r=st.floats(0.0, 50.0),
    )
    @settings(max_examples=200, deadline=None)
    def test_qlr_bounds(self, ar_v, frac, r):
        lm_v = frac * ar_v
        t = np.array([math.sqrt(r)])
        v = qlr(ar_v, lm_v, t).value
        assert v >= -1e-12
        assert v <= ar_v + 1e-9 * (1 + ar_v)
        assert v >= lm_v - 1e-9 * (1 + lm_v)

    def test_lm_never_exceeds_ar(self):
        # the score statistic is a squared projection of S
        rng = np.random.default_rng(50)
        for _ in range(200):
            k = int(rng.integers(1, 6))
            rf = random_rf(rng, k)
            st_obj = st_decompose(rf, Hypothesis(beta0=float(rng.uniform(-1, 1))))
            lm_v = lm(st_obj).value
            ar_v = ar(st_obj).value
            assert -1e-12 <= lm_v <= ar_v + 1e-10 * max(ar_v, 1.0)

    def test_lc_endpoints_and_midpoint(self):
        assert lc(4.0, 2.0, 1.0).value == pytest.approx(4.0)
        assert lc(4.0, 2.0, 0.0).value == pytest.approx(2.0)
        assert lc(4.0, 2.0, 0.5).value == pytest.approx(3.0)
        with pytest.raises(ValueError):
            lc(4.0, 2.0, 1.5)


class TestLR:
    def test_zero_data(self):
        rng = np.random.default_rng(6)
        rf = ReducedForm(R=np.zeros((3, 2)), sigma=SymPD(random_spd(rng, 6)))
        v = lr(rf, Hypothesis(beta0=0.2), LROptConfig(), RngStream(0))
        assert v.value == pytest.approx(0.0, abs=1e-12)

    def test_kronecker_equals_qlr(self):
        rng = np.random.default_rng(7)
        for i in range(50):
            k = int(rng.integers(2, 6))
            rf = kronecker_rf(rng, k)
            hyp = Hypothesis(beta0=float(rng.uniform(-1.5, 1.5)))
            st_obj = st_decompose(rf, hyp)
            qv = qlr(ar(st_obj).value, lm(st_obj).value, st_obj.T).value
            lv = lr(rf, hyp, LROptConfig(), RngStream(i)).value
            assert abs(lv - qv) / max(qv, 1.0) < 1e-8

    def test_multistart_matches_dense_grid(self):
        rng = np.random.default_rng(8)
        for i in range(20):
            rf = random_rf(rng, 4, scale=2.0)
            hyp = Hypothesis(beta0=0.4)
            lv = lr(rf, hyp, LROptConfig(), RngStream(100 + i)).value
            gv = lr_dense_grid(rf, hyp, n_grid=10_000).value
            assert abs(lv - gv) < 1e-6
            assert lv <= gv + 1e-6

    def test_nonnegative(self):
        rng = np.random.default_rng(9)
        for i in range(20):
            rf = random_rf(rng, 3)
            v = lr(rf, Hypothesis(beta0=0.0), LROptConfig(), RngStream(i))
            assert v.value >= -1e-10

    def test_diagnostics_present(self):
        rng = np.random.default_rng(10)
        rf = random_rf(rng, 3)
        v = lr(rf, Hypothesis(beta0=0.0), LROptConfig(n_random_starts=5), RngStream(3))
        assert {"theta_star", "winner_start", "n_starts"} <= set(v.diagnostics)

    def test_beta_domain_starts(self):
        rng = np.random.default_rng(11)
        rf = random_rf(rng, 3)
        cfg = LROptConfig(
            n_random_starts=1, include_beta0=False, random_start_domain="beta"
        )
        v = lr(rf, Hypothesis(beta0=0.0), cfg, RngStream(12))
        assert np.isfinite(v.value)

    def test_no_starts_raises(self):
        rng = np.random.default_rng(12)
        rf = random_rf(rng, 2)
        cfg = LROptConfig(n_random_starts=0, include_beta0=False)
        with pytest.raises(ValueError, match="start"):
            lr(rf, Hypothesis(beta0=0.0), cfg, RngStream(0))


class TestLRDualForm:
    def test_agreement_on_random_instances(self):
        rng = np.random.default_rng(13)
        for _ in range(30):
            k = int(rng.integers(2, 6))
            rf = random_rf(rng, k, scale=2.0)
            hyp = Hypothesis(beta0=float(rng.uniform(-1, 1)))
            assert lr_equivalence_check(rf, hyp, n_grid=2000) < 1e-6

    def test_zero_data(self):
        rng = np.random.default_rng(14)
        rf = ReducedForm(R=np.zeros((3, 2)), sigma=SymPD(random_spd(rng, 6)))
        assert lr_equivalence_check(rf, Hypothesis(beta0=0.3)) < 1e-12

    def test_kronecker_both_equal_qlr(self):
        rng = np.random.default_rng(15)
        rf = kronecker_rf(rng, 3)
        hyp = Hypothesis(beta0=0.5)
        st_obj = st_decompose(rf, hyp)
        qv = qlr(ar(st_obj).value, lm(st_obj).value, st_obj.T).value
        gv = lr_dense_grid(rf, hyp).value
        assert abs(gv - qv) / max(qv, 1.0) < 1e-8
        assert lr_equivalence_check(rf, hyp) < 1e-6


class TestIntegratedLikelihood:
    def test_requires_overidentification(self):
        rng = np.random.default_rng(16)
        rf = random_rf(rng, 1)
        nr = null_rotate(rf, Hypothesis(beta0=0.0))
        with pytest.raises(ValueError, match="k >= 2"):
            il(nr, np.ones(1), gauss_legendre(21))

    def test_positive_k2(self):
        rng = np.random.default_rng(17)
        rf = random_rf(rng, 2)
        hyp = Hypothesis(beta0=0.1)
        nr = null_rotate(rf, hyp)
        st_obj = st_decompose(rf, hyp)
        quad = gauss_legendre(201)
        assert il(nr, st_obj.T, quad).value > 0.0

    def test_k2_il0_equals_il(self):
        rng = np.random.default_rng(18)
        rf = random_rf(rng, 2)
        hyp = Hypothesis(beta0=-0.4)
        nr = null_rotate(rf, hyp)
        st_obj = st_decompose(rf, hyp)
        quad = gauss_legendre(201)
        a = il(nr, st_obj.T, quad)
        b = il0(nr, st_obj.T, quad)
        assert a.value == pytest.approx(b.value, rel=1e-14)

    def test_refinement(self):
        # panels split at the angular-weight kink; doubling the rule must not move values
        rng = np.random.default_rng(19)
        q1 = gauss_legendre_split(201, 0.0)
        q2 = gauss_legendre_split(401, 0.0)
        for _ in range(30):
            k = int(rng.integers(3, 7))
            rf = random_rf(rng, k, scale=2.0)
            hyp = Hypothesis(beta0=float(rng.uniform(-1, 1)))
            nr = null_rotate(rf, hyp)
            st_obj = st_decompose(rf, hyp)
            v1 = il(nr, st_obj.T, q1)
            v2 = il(nr, st_obj.T, q2)
            rel = abs(
                math.expm1(
                    v2.diagnostics["log_value"] - v1.diagnostics["log_value"]
                )
            )
            assert rel < 1e-8

    def test_plain_rule_refines_on_smooth_weight(self):
        # even k leaves a polynomial angular weight: the single-panel rule
        # already converges; 200 vs 400 nodes agree to 1e-8
        rng = np.random.default_rng(191)
        rf = random_rf(rng, 4, scale=1.0)
        hyp = Hypothesis(beta0=0.3)
        nr = null_rotate(rf, hyp)
        st_obj = st_decompose(rf, hyp)
        v1 = il(nr, st_obj.T, gauss_legendre(200))
        v2 = il(nr, st_obj.T, gauss_legendre(400))
        rel = abs(
            math.expm1(v2.diagnostics["log_value"] - v1.diagnostics["log_value"])
        )
        assert rel < 1e-8

    def test_single_panel_converges_slowly_through_kink(self):
        # odd k-2 leaves an |sin| kink at 0: a single panel converges only
        # algebraically, which is why the default rule splits there
        rng = np.random.default_rng(190)
        rf = random_rf(rng, 3, scale=1.0)
        hyp = Hypothesis(beta0=0.2)
        nr = null_rotate(rf, hyp)
        st_obj = st_decompose(rf, hyp)
        plain = abs(
            math.expm1(
                il(nr, st_obj.T, gauss_legendre(401)).diagnostics["log_value"]
                - il(nr, st_obj.T, gauss_legendre(201)).diagnostics["log_value"]
            )
        )
        split = abs(
            math.expm1(
                il(nr, st_obj.T, gauss_legendre_split(401)).diagnostics["log_value"]
                - il(nr, st_obj.T, gauss_legendre_split(201)).diagnostics["log_value"]
            )
        )
        assert split < 1e-10
        assert split < plain

    def test_original_data_identity(self):
        rng = np.random.default_rng(20)
        for beta0 in (-2.0, -1.0, 0.0, 0.5, 1.0, 2.0):
            k = int(rng.integers(3, 7))
            rf = random_rf(rng, k, scale=1.5)
            hyp = Hypothesis(beta0=beta0)
            nr = null_rotate(rf, hyp)
            st_obj = st_decompose(rf, hyp)
            a = il(nr, st_obj.T, gauss_legendre_split(201, 0.0))
            b = il_original(rf, hyp, gauss_legendre_split(201, theta_of_beta(beta0)))
            factor = (1.0 + beta0 * beta0) ** ((rf.k - 2) / 2.0)
            lhs = b.diagnostics["log_value"] + math.log(factor)
            rel = abs(math.expm1(lhs - a.diagnostics["log_value"]))
            assert rel < 1e-8

    def test_beta0_zero_original_matches_il(self):
        rng = np.random.default_rng(21)
        rf = random_rf(rng, 3)
        hyp = Hypothesis(beta0=0.0)
        nr = null_rotate(rf, hyp)
        st_obj = st_decompose(rf, hyp)
        quad = gauss_legendre(201)
        a = il(nr, st_obj.T, quad)
        b = il_original(rf, hyp, quad)
        assert a.value == pytest.approx(b.value, rel=1e-12)

    def test_confidence_sweep_is_finite(self):
        rng = np.random.default_rng(22)
        rf = random_rf(rng, 4)
        quad = gauss_legendre(201)
        for beta0 in np.linspace(-5, 5, 100):
            v = il_original(rf, Hypothesis(beta0=float(beta0)), quad)
            assert np.isfinite(v.value)
            assert np.isfinite(v.diagnostics["log_value"])

    def test_ratio_constancy_under_group_action(self):
        # the statistic is relatively invariant: the ratio after/before a
        # fixed transformation is the same constant for every draw
        rng = np.random.default_rng(23)
        k = 3
        from weakiv.model import act

        g = random_group_element(rng, k)
        quad = gauss_legendre_split(201, 0.0)
        ratios = []
        for _ in range(50):
            rf = random_rf(rng, k, scale=1.5)
            hyp = Hypothesis(beta0=0.0)
            nr = null_rotate(rf, hyp)
            st_obj = st_decompose(rf, hyp)
            before = il(nr, st_obj.T, quad).diagnostics["log_value"]
            nr2 = act(g, nr)
            st2 = null_stats(nr2)
            after = il(nr2, st2.T, quad).diagnostics["log_value"]
            ratios.append(after - before)
        spread = max(ratios) - min(ratios)
        assert spread < 1e-6

    def test_angular_weight_identity(self):
        # |sin|^k (1 + tan^2)/tan^2 == |sin|^(k-2) pointwise away from 0
        etas = np.linspace(-math.pi / 2 + 0.05, math.pi / 2 - 0.05, 201)
        etas = etas[np.abs(etas) > 1e-3]
        for k in range(2, 11):
            lhs = (
                np.abs(np.sin(etas)) ** k
                * (1.0 + np.tan(etas) ** 2)
                / np.tan(etas) ** 2
            )
            rhs = np.abs(np.sin(etas)) ** (k - 2)
            np.testing.assert_allclose(lhs, rhs, rtol=1e-12)


class TestExactInvariance:
    def test_ar_lm_qlr_gridlr_invariant(self):
        rng = np.random.default_rng(24)
        k = 3
        for _ in range(25):
            rf = random_rf(rng, k, scale=1.5)
            hyp = Hypothesis(beta0=0.0)
            nr = null_rotate(rf, hyp)
            st1 = null_stats(nr)
            from weakiv.model import act
            from weakiv.model import ReducedForm as RF

            g = random_group_element(rng, k)
            nr2 = act(g, nr)
            st2 = null_stats(nr2)

            assert ar(st2).value == pytest.approx(ar(st1).value, rel=1e-8)
            assert lm(st2).value == pytest.approx(lm(st1).value, rel=1e-8)
            q1 = qlr(ar(st1).value, lm(st1).value, st1.T).value
            q2 = qlr(ar(st2).value, lm(st2).value, st2.T).value
            assert q2 == pytest.approx(q1, rel=1e-8, abs=1e-10)
            g1 = lr_dense_grid(
                RF(R=nr.R0, sigma=nr.sigma0), Hypothesis(beta0=0.0), n_grid=4000
            ).value
            g2 = lr_dense_grid(
                RF(R=nr2.R0, sigma=nr2.sigma0), Hypothesis(beta0=0.0), n_grid=4000
            ).value
            assert g2 == pytest.approx(g1, rel=1e-8, abs=1e-8)


def test_theta_of_beta():
    assert theta_of_beta(0.0) == 0.0
    assert theta_of_beta(1.0) == pytest.approx(math.pi / 4)
    assert theta_of_beta(-1e6) == pytest.approx(-math.pi / 2, abs=1e-5)
