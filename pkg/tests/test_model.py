import json

import numpy as np
import pytest
from scipy.special import logsumexp

import warpfit.model as M
from warpfit.data import Dataset, SimSpec, default_template, simulate
from warpfit.exceptions import FitError, ParameterError
from warpfit.model import (
    Curve,
    FitConfig,
    TemplateModel,
    conditional_loglik,
    design_matrix,
    e_step,
    fit_em,
    log_integrand,
    m_step,
    marginal_loglik,
    orthonormalize_components,
    posterior_theta_map,
    register_curve,
    subject_effects,
)
from warpfit.splines import (
    BSplineBasis,
    bspline_eval,
    jupp_forward,
    jupp_inverse,
    make_warp,
    warp_eval,
    warp_invert,
)

from oracles import gaussian_logpdf_dense

I = (-80.0, 0.0)


@pytest.fixture(scope="module")
def template():
    return default_template(p=2, lam=(4.0, 1.0), sigma=0.1, Sigma=0.04)


@pytest.fixture(scope="module")
def small_data(template):
    ds, truth = simulate(SimSpec(template, n=6, m=30, seed=11))
    return ds, truth


def toy_model(Sigma=0.04, sigma2=0.01, p=1):
    """One warp knot at -40 (theta0 = 0), template from the default shapes."""
    full = default_template(p=max(p, 1))
    return TemplateModel(full.basis, full.a, full.C[:, :p], full.lam[:p], sigma2,
                         np.array([-40.0]), np.array([[Sigma]]))


def toy_curve(model, theta=0.15, z=0.6, seed=0, m=30):
    grid = np.linspace(-80, 0, m)
    Phi = design_matrix(Curve("x", grid, np.zeros(m)), [theta], model)
    y = Phi @ (model.a + model.C @ np.full(model.p, z))
    y = y + np.sqrt(model.sigma2) * np.random.default_rng(seed).standard_normal(m)
    return Curve("toy", grid, y)


def grid_posterior(curve, model, half_width=10.0, n=10001):
    """Brute-force posterior of a scalar warp parameter on a fine grid."""
    sd = np.sqrt(model.Sigma[0, 0])
    th = np.linspace(-half_width * sd, half_width * sd, n)
    lf = np.array([log_integrand(curve, [t], model) for t in th])
    dx = th[1] - th[0]
    # trapezoid rule in log space
    logw = np.full(n, np.log(dx))
    logw[[0, -1]] -= np.log(2)
    logZ = logsumexp(lf + logw)
    post = np.exp(lf + logw - logZ)
    return th, lf, logZ, post


class TestDesignMatrix:
    def test_identity_warp_rows_are_basis(self, template):
        c = Curve("a", np.linspace(-80, 0, 17), np.zeros(17))
        np.testing.assert_allclose(design_matrix(c, template.theta0, template),
                                   bspline_eval(template.basis, c.grid), atol=1e-12)

    def test_rows_sum_to_one(self, template):
        c = Curve("a", np.sort(np.random.default_rng(0).uniform(-80, 0, 25)), np.zeros(25))
        for theta in np.random.default_rng(1).normal(0, 1, (10, 3)):
            np.testing.assert_allclose(design_matrix(c, theta, template).sum(axis=1), 1.0, atol=1e-12)

    def test_compositional_oracle(self, template):
        c = Curve("a", np.linspace(-79, -1, 23), np.zeros(23))
        theta = np.array([0.1, -0.2, 0.05])
        tau = jupp_inverse(theta, I)
        h = make_warp(template.tau0, tau, I)
        expected = np.array([bspline_eval(template.basis, warp_invert(h, t)) for t in c.grid])
        np.testing.assert_allclose(design_matrix(c, theta, template), expected, atol=1e-12)


class TestConditionalLoglik:
    def test_woodbury_matches_dense(self, template):
        rng = np.random.default_rng(2)
        for _ in range(10):
            grid = np.sort(rng.uniform(-80, 0, 30))
            c = Curve("a", grid, rng.normal(0.3, 0.5, 30))
            theta = rng.normal(0, 0.3, 3)
            Phi = design_matrix(c, theta, template)
            B = Phi @ template.C
            cov = B @ np.diag(template.lam) @ B.T + template.sigma2 * np.eye(30)
            dense = gaussian_logpdf_dense(c.values, Phi @ template.a, cov)
            assert conditional_loglik(c, theta, template) == pytest.approx(dense, abs=1e-8)

    def test_zero_residual_p0(self, template):
        model = template.with_params(C=np.zeros((template.q, 0)), lam=np.zeros(0))
        grid = np.linspace(-70, -5, 12)
        theta = np.array([0.2, -0.1, 0.3])
        y = design_matrix(Curve("a", grid, np.zeros(12)), theta, model) @ model.a
        expected = -6 * np.log(2 * np.pi * model.sigma2)
        assert conditional_loglik(Curve("a", grid, y), theta, model) == pytest.approx(expected, abs=1e-10)

    def test_nonpositive_sigma2_rejected(self, template):
        with pytest.raises(ParameterError):
            template.with_params(sigma2=0.0)
        with pytest.raises(ParameterError):
            template.with_params(sigma2=-1.0)


@pytest.fixture(scope="module")
def toy():
    model = toy_model()
    curve = toy_curve(model)
    th, lf, logZ, post = grid_posterior(curve, model)
    return model, curve, th, lf, logZ, post


class TestOneKnotToy:
    """r = 1: every integral over the warp parameter is checkable on a grid."""

    def test_marginal_matches_grid(self, toy):
        model, curve, th, lf, logZ, post = toy
        cfg = FitConfig(p=1, tau0=(-40.0,))
        assert marginal_loglik([curve], model, cfg) == pytest.approx(logZ, abs=1e-4)

    def test_posterior_mean_matches_grid(self, toy):
        model, curve, th, lf, logZ, post = toy
        cfg = FitConfig(p=1, tau0=(-40.0,))
        _, eff = e_step(curve, model, cfg)
        assert eff.theta_hat[0] == pytest.approx(post @ th, abs=1e-3)

    def test_map_matches_grid_search(self, toy):
        model, curve, th, lf, logZ, post = toy
        theta_map, hess = posterior_theta_map(curve, model)
        assert abs(theta_map[0] - th[np.argmax(lf)]) <= th[1] - th[0]
        assert hess.shape == (1, 1) and hess[0, 0] > 0


class TestPosteriorMode:
    def test_stationarity(self, template, small_data):
        ds, _ = small_data
        for c in ds.curves:
            theta, _ = posterior_theta_map(c, template)
            step = 1e-6
            g = [(log_integrand(c, theta + step * e, template) - log_integrand(c, theta - step * e, template))
                 / (2 * step) for e in np.eye(3)]
            assert np.linalg.norm(g) < 1e-5

    def test_noise_free_curve_at_theta0(self, template):
        grid = np.linspace(-80, 0, 30)
        y = design_matrix(Curve("a", grid, np.zeros(30)), template.theta0, template) @ template.a
        model = template.with_params(sigma2=1e-6)
        theta, _ = posterior_theta_map(Curve("a", grid, y), model)
        assert np.max(np.abs(theta - template.theta0)) < 0.05

    def test_internal_gradient_matches_finite_differences(self, template, small_data):
        ds, _ = small_data
        rng = np.random.default_rng(4)
        post = M._WarpPosterior(ds.curves[0], template)
        Linv = np.linalg.inv(post.L)
        for _ in range(20):
            u = rng.normal(0, 0.7, 3)
            _, g_u, _ = post.grad_hess(u)
            g_theta = Linv.T @ g_u
            theta = post.theta(u)[0]
            step = 1e-6
            fd = np.array([(log_integrand(ds.curves[0], theta + step * e, template)
                            - log_integrand(ds.curves[0], theta - step * e, template)) / (2 * step)
                           for e in np.eye(3)])
            assert np.linalg.norm(fd - g_theta) <= 1e-4 * max(np.linalg.norm(fd), 1.0)


class TestEStep:
    def test_one_node_equals_map_hard(self, template, small_data):
        ds, _ = small_data
        for c in ds.curves[:3]:
            s1, e1 = e_step(c, template, FitConfig(quad_points_per_dim=1))
            s2, e2 = e_step(c, template, FitConfig(estep_mode="map_hard"))
            for f in ("A", "b", "Ezz", "Ett", "Et"):
                np.testing.assert_array_equal(getattr(s1, f), getattr(s2, f))
            assert s1.yy == s2.yy and e1.loglik_contrib == e2.loglik_contrib

    def test_zero_sigma_concentrates_at_theta0(self, template, small_data):
        ds, _ = small_data
        model = template.with_params(Sigma=np.zeros((3, 3)))
        cfg = FitConfig()
        total = 0.0
        for c in ds.curves:
            _, eff = e_step(c, model, cfg)
            np.testing.assert_allclose(eff.theta_hat, model.theta0, atol=1e-15)
            Phi = design_matrix(c, model.theta0, model)
            B = Phi @ model.C
            Lam = np.diag(model.lam)
            S = B @ Lam @ B.T + model.sigma2 * np.eye(c.m)
            zmean = Lam @ B.T @ np.linalg.solve(S, c.values - Phi @ model.a)
            zcov = Lam - Lam @ B.T @ np.linalg.solve(S, B @ Lam)
            np.testing.assert_allclose(eff.z_hat, zmean, atol=1e-10)
            np.testing.assert_allclose(eff.z_cov, zcov, atol=1e-10)
            total += conditional_loglik(c, model.theta0, model)
        assert marginal_loglik(ds, model, cfg) == pytest.approx(total, abs=1e-9)

    def test_effects_are_valid(self, template, small_data):
        ds, _ = small_data
        for eff in subject_effects(ds, template):
            assert np.all(np.diff(np.concatenate(([-80.0], eff.tau_hat, [0.0]))) > 0)
            for cov in (eff.theta_cov, eff.z_cov):
                np.testing.assert_allclose(cov, cov.T, atol=1e-14)
                assert np.linalg.eigvalsh(cov).min() > -1e-12
            assert not eff.flagged

    def test_marginal_invariant_to_order(self, template, small_data):
        ds, _ = small_data
        a = marginal_loglik(list(ds.curves), template)
        b = marginal_loglik(list(reversed(ds.curves)), template)
        assert a == b

    def test_trailing_deletion_changes_only_that_subject(self, template, small_data):
        ds, _ = small_data
        before = subject_effects(ds, template)
        short = Curve(ds.curves[2].id, ds.curves[2].grid[:18], ds.curves[2].values[:18])
        curves = list(ds.curves)
        curves[2] = short
        after = subject_effects(curves, template)
        for i, (x, y) in enumerate(zip(before, after)):
            if i == 2:
                assert x.loglik_contrib != y.loglik_contrib
            else:
                assert x.loglik_contrib == y.loglik_contrib


class TestMStep:
    def test_matches_expected_complete_data_oracle(self):
        """n=3, m=5, p=1, r=1: minimize the expected complete-data criterion
        over (a, c) by stacked least squares built directly from the
        quadrature nodes, then apply the orthonormalization by hand."""
        basis = BSplineBasis(3, [-40.0], I)
        c0 = np.array([0.3, -0.2, 0.5, 0.1, 0.4])
        model = TemplateModel(basis, [0.2, 0.6, 0.1, 0.5, 0.3], c0 / np.sqrt(c0 @ basis.gram @ c0),
                              [0.5], 0.02, [-40.0], [[0.09]])
        rng = np.random.default_rng(7)
        curves = []
        for i in range(3):
            grid = np.sort(rng.uniform(-78, -2, 5))
            curves.append(toy_curve(model, theta=rng.normal(0, 0.3), z=rng.normal(), seed=i, m=5))
            curves[-1] = Curve(f"c{i}", grid, curves[-1].values)
        cfg = FitConfig(p=1, tau0=(-40.0,))
        rows, rhs, N = [], [], 0
        lam_sum, sig_sum = 0.0, 0.0
        stats = None
        for c in curves:
            pos = M._posterior(c, model, cfg)
            s, _ = e_step(c, model, cfg)
            stats = s if stats is None else stats + s
            N += c.m
            for w, Phi, zm, zc, th in zip(pos.weights, pos.Phi, pos.zmean, pos.zcov, pos.thetas):
                sw = np.sqrt(w)
                rows.append(sw * np.hstack([Phi, zm[0] * Phi]))
                rhs.append(sw * c.values)
                rows.append(np.sqrt(w * zc[0, 0]) * np.hstack([np.zeros_like(Phi), Phi]))
                rhs.append(np.zeros(c.m))
                lam_sum += w * (zm[0] ** 2 + zc[0, 0])
                sig_sum += w * (th[0] - model.theta0[0]) ** 2
        X, Y = np.vstack(rows), np.concatenate(rhs)
        coef = np.linalg.lstsq(X, Y, rcond=None)[0]
        q = model.q
        a, c = coef[:q], coef[q:]
        sigma2 = np.sum((Y - X @ coef) ** 2) / N
        lam = lam_sum / 3
        J = model.gram
        norm2 = c @ J @ c
        c_unit = c / np.sqrt(norm2)
        c_unit = c_unit * np.sign(c_unit[np.argmax(np.abs(c_unit))])

        new = m_step(stats, model)
        np.testing.assert_allclose(new.a, a, atol=1e-8)
        np.testing.assert_allclose(new.C[:, 0], c_unit, atol=1e-8)
        assert new.lam[0] == pytest.approx(lam * norm2, rel=1e-8)
        assert new.sigma2 == pytest.approx(sigma2, rel=1e-8)
        assert new.Sigma[0, 0] == pytest.approx(sig_sum / 3, rel=1e-10)
        np.testing.assert_array_equal(new.tau0, model.tau0)

    def test_identifiability_constraints(self, template, small_data):
        ds, _ = small_data
        cfg = FitConfig()
        stats = None
        for c in ds.curves:
            s, _ = e_step(c, template, cfg)
            stats = s if stats is None else stats + s
        new = m_step(stats, template)
        np.testing.assert_allclose(new.C.T @ new.gram @ new.C, np.eye(2), atol=1e-8)
        assert np.all(np.diff(new.lam) <= 0) and np.all(new.lam > 0)
        big = np.argmax(np.abs(new.C), axis=0)
        assert np.all(new.C[big, [0, 1]] > 0)
        np.testing.assert_allclose(new.Sigma, new.Sigma.T, atol=0)
        assert np.linalg.eigvalsh(new.Sigma).min() >= 0

    def test_orthonormalize_preserves_covariance_operator(self, template):
        rng = np.random.default_rng(5)
        C = rng.normal(size=(template.q, 3))
        L = np.diag([2.0, 0.5, 1.0])
        Cn, lam = orthonormalize_components(C, L, template.gram)
        np.testing.assert_allclose(Cn @ np.diag(lam) @ Cn.T, C @ L @ C.T, atol=1e-9)


class TestFitEM:
    def test_p0_zero_sigma_is_least_squares(self, small_data):
        ds, _ = small_data
        cfg = FitConfig(p=0, max_em_iters=5)
        init = M.initial_model(ds.curves, cfg).with_params(Sigma=np.zeros((3, 3)), sigma2=1.0)
        res = fit_em(ds, cfg, init=init)
        Phi = np.vstack([bspline_eval(init.basis, c.grid) for c in ds.curves])
        y = np.concatenate([c.values for c in ds.curves])
        a = np.linalg.lstsq(Phi, y, rcond=None)[0]
        np.testing.assert_allclose(res.model.a, a, atol=1e-8)
        assert res.model.sigma2 == pytest.approx(np.sum((y - Phi @ a) ** 2) / y.size, abs=1e-8)
        np.testing.assert_array_equal(res.model.Sigma, np.zeros((3, 3)))

    def test_trace_nondecreasing(self, template):
        ds, _ = simulate(SimSpec(template, n=12, m=20, seed=3, grid="random"))
        cfg = FitConfig(p=2, max_em_iters=25)
        res = fit_em(ds, cfg)
        tr = np.array(res.trace)
        slack = 10 * cfg.em_tol * np.abs(tr[:-1])
        assert np.all(np.diff(tr) >= -slack)
        assert res.model.diagnostics["iterations"] == len(tr)
        assert res.model.diagnostics["final_loglik"] == tr[-1]
        assert [e.id for e in res.effects] == ds.ids

    def test_all_flagged_raises(self, small_data, monkeypatch):
        ds, _ = small_data
        real = M._find_mode
        monkeypatch.setattr(M, "_find_mode", lambda post, start=None: (real(post)[0], True))
        with pytest.raises(FitError, match="every subject"):
            fit_em(ds, FitConfig(p=1, max_em_iters=2))

    def test_needs_two_curves(self, small_data):
        ds, _ = small_data
        with pytest.raises(FitError):
            fit_em(ds.curves[:1], FitConfig(p=1))


class TestRegistration:
    def test_identity(self, template, small_data):
        ds, _ = small_data
        eff = subject_effects(ds, template)[0]
        eff.tau_hat = template.tau0.copy()
        out = register_curve(ds.curves[0], eff, template)
        np.testing.assert_allclose(out.grid, ds.curves[0].grid, atol=1e-12)

    def test_roundtrip_through_forward_warp(self, template, small_data):
        ds, _ = small_data
        for c, eff in zip(ds.curves, subject_effects(ds, template)):
            out = register_curve(c, eff, template)
            assert np.all(np.diff(out.grid) > 0)
            np.testing.assert_array_equal(out.values, c.values)
            h = make_warp(template.tau0, eff.tau_hat, I)
            np.testing.assert_allclose(warp_eval(h, out.grid), c.grid, atol=1e-9)

    def test_wrong_subject_rejected(self, template, small_data):
        ds, _ = small_data
        eff = subject_effects(ds, template)[0]
        with pytest.raises(ParameterError):
            register_curve(ds.curves[1], eff, template)


class TestSerialization:
    def test_json_roundtrip_exact(self, template):
        back = TemplateModel.from_json(template.to_json())
        for f in ("a", "C", "lam", "tau0", "Sigma"):
            np.testing.assert_array_equal(getattr(back, f), getattr(template, f))
        assert back.sigma2 == template.sigma2 and back.basis == template.basis

    def test_schema_fields(self, template):
        d = json.loads(template.to_json())
        assert d["schema"] == "warpfit-model-v1"
        assert d["theta0"] == [0.0, 0.0, 0.0]
        assert {"diagnostics", "gram", "basis", "lambda"} <= set(d)

    def test_wrong_schema_rejected(self, template):
        d = template.to_dict()
        d["schema"] = "other"
        with pytest.raises(ParameterError):
            TemplateModel.from_dict(d)


def test_curve_validation():
    with pytest.raises(ValueError):
        Curve("a", [0.0, -1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        Curve("a", [-1.0, 0.0], [1.0, np.nan])
    with pytest.raises(ValueError):
        Curve("a", [], [])
