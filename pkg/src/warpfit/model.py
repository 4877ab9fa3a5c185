"""Random-effects warping model for sparsely sampled curves.

Each curve is modelled as

    y_i | theta_i, z_i ~ N(Phi_i(theta_i) (a + C z_i), sigma2 I),
    theta_i ~ N(theta0, Sigma),   z_i ~ N(0, diag(lam)),

where ``Phi_i(theta)`` evaluates the template B-spline basis at the
inverse-warped observation times. The amplitude scores ``z_i`` are
integrated out in closed form; the warp parameters ``theta_i`` by adaptive
Gauss-Hermite quadrature around each subject's posterior mode. Parameters
are estimated by EM.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from itertools import product
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from .exceptions import ConstraintError, FitError, ParameterError
from .splines import (
    BSplineBasis,
    _clip_to_interval,
    _fc_slopes_batch,
    _hermite_invert_batch,
    _jupp_inverse_batch,
    bspline_eval,
    check_knots,
    jupp_forward,
    jupp_inverse,
    make_warp,
    warp_eval,
    warp_invert,
)

logger = logging.getLogger(__name__)

MODEL_SCHEMA = "warpfit-model-v1"
LOG_2PI = math.log(2.0 * math.pi)

# finite-difference steps in whitened warp coordinates
_GRAD_STEP = 1e-5
_HESS_STEP = 1e-3
_EIG_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class Curve:
    """One subject's observations ``values`` at strictly increasing ``grid``."""

    id: str
    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float).ravel()
        values = np.asarray(self.values, dtype=float).ravel()
        if grid.size == 0:
            raise ConstraintError(f"curve {self.id!r} has no observations")
        if grid.shape != values.shape:
            raise ConstraintError(
                f"curve {self.id!r}: grid has {grid.size} points but values has {values.size}"
            )
        if not np.all(np.isfinite(grid)) or not np.all(np.isfinite(values)):
            raise ConstraintError(f"curve {self.id!r} contains non-finite entries")
        if np.any(np.diff(grid) <= 0):
            raise ConstraintError(f"curve {self.id!r}: grid must be strictly increasing")
        grid.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @property
    def m(self) -> int:
        return self.grid.size

    def __eq__(self, other):
        if not isinstance(other, Curve):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.grid, other.grid)
            and np.array_equal(self.values, other.values)
        )


def _sqrtm_psd(J):
    w, V = np.linalg.eigh(J)
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T, (V / np.sqrt(w)) @ V.T


@dataclass(frozen=True, eq=False)
class TemplateModel:
    """Fitted population parameters.

    Attributes
    ----------
    basis : BSplineBasis
        Basis for the mean and the amplitude components.
    a : ndarray, shape (q,)
        Mean-function coefficients.
    C : ndarray, shape (q, p)
        Component coefficients, orthonormal in L2 (``C.T @ J @ C = I``).
    lam : ndarray, shape (p,)
        Component variances, positive and non-increasing.
    sigma2 : float
        Measurement-error variance.
    tau0 : ndarray, shape (r,)
        Reference warp knots; ``theta0`` is their Jupp transform.
    Sigma : ndarray, shape (r, r)
        Covariance of the warp parameters.
    """

    basis: BSplineBasis
    a: np.ndarray
    C: np.ndarray
    lam: np.ndarray
    sigma2: float
    tau0: np.ndarray
    Sigma: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        q = self.basis.q
        a = np.asarray(self.a, dtype=float).reshape(q)
        C = np.asarray(self.C, dtype=float).reshape(q, -1)
        lam = np.asarray(self.lam, dtype=float).reshape(C.shape[1])
        tau0 = check_knots(self.tau0, self.basis.interval)
        Sigma = np.asarray(self.Sigma, dtype=float).reshape(tau0.size, tau0.size)
        for name, val in (("a", a), ("C", C), ("lam", lam), ("Sigma", Sigma)):
            if not np.all(np.isfinite(val)):
                raise ParameterError(f"{name} contains non-finite values")
        if not (np.isfinite(self.sigma2) and self.sigma2 > 0):
            raise ParameterError(f"sigma2 must be positive, got {self.sigma2}")
        if np.any(lam < 0):
            raise ParameterError(f"component variances must be non-negative, got {lam}")
        for name, val in (("a", a), ("C", C), ("lam", lam), ("tau0", tau0), ("Sigma", Sigma)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "sigma2", float(self.sigma2))

    @property
    def p(self) -> int:
        return self.C.shape[1]

    @property
    def q(self) -> int:
        return self.basis.q

    @property
    def r(self) -> int:
        return self.tau0.size

    @property
    def interval(self) -> Tuple[float, float]:
        return self.basis.interval

    @property
    def theta0(self) -> np.ndarray:
        return jupp_forward(self.tau0, self.interval)

    @property
    def gram(self) -> np.ndarray:
        return self.basis.gram

    def mean_function(self, t) -> np.ndarray:
        return bspline_eval(self.basis, t) @ self.a

    def components(self, t) -> np.ndarray:
        """Amplitude components evaluated at ``t``; shape ``t.shape + (p,)``."""
        return bspline_eval(self.basis, t) @ self.C

    def with_params(self, **changes) -> "TemplateModel":
        return replace(self, **changes)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema": MODEL_SCHEMA,
            "basis": self.basis.to_dict(),
            "p": self.p,
            "q": self.q,
            "r": self.r,
            "a": self.a.tolist(),
            "C": self.C.tolist(),
            "lambda": self.lam.tolist(),
            "sigma2": self.sigma2,
            "tau0": self.tau0.tolist(),
            "theta0": self.theta0.tolist(),
            "Sigma": self.Sigma.tolist(),
            "gram": self.gram.tolist(),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TemplateModel":
        if d.get("schema") != MODEL_SCHEMA:
            raise ParameterError(f"unsupported model schema {d.get('schema')!r}")
        basis = BSplineBasis.from_dict(d["basis"])
        p = int(d["p"])
        C = np.asarray(d["C"], dtype=float).reshape(basis.q, p)
        return cls(
            basis=basis,
            a=d["a"],
            C=C,
            lam=d["lambda"],
            sigma2=d["sigma2"],
            tau0=d["tau0"],
            Sigma=d["Sigma"],
            diagnostics=d.get("diagnostics", {}),
        )

    def to_json(self, path=None) -> str:
        # json writes floats via repr, which round-trips exactly
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_json(cls, src) -> "TemplateModel":
        if isinstance(src, str) and src.lstrip().startswith("{"):
            return cls.from_dict(json.loads(src))
        with open(src) as fh:
            return cls.from_dict(json.load(fh))


def orthonormalize_components(C, lam, gram) -> Tuple[np.ndarray, np.ndarray]:
    """Re-express ``C diag(lam) C^T`` with L2-orthonormal, sorted components.

    Solves the eigenproblem of ``J^{1/2} C Λ C^T J^{1/2}``; the returned
    columns satisfy ``C^T J C = I``, variances are non-increasing and each
    column's largest-magnitude coefficient is positive.
    """
    C = np.asarray(C, dtype=float)
    lam = np.asarray(lam, dtype=float)
    p = C.shape[1]
    if p == 0:
        return C.copy(), lam.copy()
    if lam.ndim == 1:
        lam = np.diag(lam)
    Jh, Jmh = _sqrtm_psd(gram)
    M = Jh @ (C @ lam @ C.T) @ Jh
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    order = np.argsort(w)[::-1][:p]
    w, V = w[order], V[:, order]
    Cn = Jmh @ V
    big = np.argmax(np.abs(Cn), axis=0)
    signs = np.sign(Cn[big, np.arange(p)])
    signs[signs == 0] = 1.0
    Cn = Cn * signs
    scale = max(float(np.max(w)), 1.0)
    w = np.maximum(w, 1e-12 * scale)
    return Cn, w


# ---------------------------------------------------------------------------
# Likelihood pieces (batched over warp parameters)
# ---------------------------------------------------------------------------


def _design_batch(model: TemplateModel, grid: np.ndarray, thetas: np.ndarray) -> np.ndarray:
    """Design matrices for a stack of warp parameters; shape (K, m, q)."""
    lo, hi = model.interval
    thetas = np.atleast_2d(thetas)
    tau = _jupp_inverse_batch(thetas, lo, hi)
    K = thetas.shape[0]
    x = np.concatenate(([lo], model.tau0, [hi]))
    Y = np.concatenate((np.full((K, 1), lo), tau, np.full((K, 1), hi)), axis=1)
    D = _fc_slopes_batch(x, Y)
    s = _hermite_invert_batch(x, Y, D, grid[None, :])
    return bspline_eval(model.basis, s)


def _gaussian_terms(model: TemplateModel, y: np.ndarray, Phi: np.ndarray, want_z: bool = True):
    """Log-density of ``y`` given each design with ``z`` integrated out.

    Uses the Woodbury / determinant-lemma form of
    ``N(Phi a, Phi C Λ C^T Phi^T + σ² I)``. Also returns the Gaussian
    posterior mean and covariance of ``z`` for every design.
    """
    s2 = model.sigma2
    if not s2 > 0:
        raise ParameterError(f"sigma2 must be positive, got {s2}")
    K, m, _ = Phi.shape
    p = model.p
    resid = y[None, :] - Phi @ model.a
    rr = np.einsum("km,km->k", resid, resid)
    if p == 0:
        ll = -0.5 * (m * (LOG_2PI + math.log(s2)) + rr / s2)
        return ll, np.zeros((K, 0)), np.zeros((K, 0, 0))
    sl = np.sqrt(model.lam)
    U = (Phi @ model.C) * sl  # B Λ^{1/2}
    Kmat = np.eye(p) + np.einsum("kmi,kmj->kij", U, U) / s2
    w = np.einsum("kmi,km->ki", U, resid)
    Lk = np.linalg.cholesky(Kmat)
    v = np.linalg.solve(Kmat, w[..., None])[..., 0]
    quad = (rr - np.einsum("ki,ki->k", w, v) / s2) / s2
    logdet = m * math.log(s2) + 2.0 * np.sum(np.log(np.diagonal(Lk, axis1=1, axis2=2)), axis=1)
    ll = -0.5 * (m * LOG_2PI + logdet + quad)
    if not want_z:
        return ll, None, None
    zmean = sl * v / s2
    Kinv = np.linalg.inv(Kmat)
    zcov = sl[None, :, None] * Kinv * sl[None, None, :]
    return ll, zmean, zcov


def _check_curve(curve: Curve, model: TemplateModel):
    _clip_to_interval(curve.grid, *model.interval)


def design_matrix(curve: Curve, theta, model: TemplateModel) -> np.ndarray:
    """Basis evaluated at the inverse-warped grid ``g^{-1}(t_ij, theta)``."""
    _check_curve(curve, model)
    theta = np.asarray(theta, dtype=float).reshape(1, model.r)
    return _design_batch(model, curve.grid, theta)[0]


def conditional_loglik(curve: Curve, theta, model: TemplateModel) -> float:
    """log p(y_i | theta_i) with the amplitude scores integrated out."""
    Phi = design_matrix(curve, theta, model)
    ll, _, _ = _gaussian_terms(model, curve.values, Phi[None], want_z=False)
    return float(ll[0])


# ---------------------------------------------------------------------------
# Warp posterior: mode, curvature and quadrature
# ---------------------------------------------------------------------------


@dataclass
class FitConfig:
    """Settings for template construction and EM fitting.

    Defaults follow the AneuRisk analysis: curves on [-80, 0], warp knots at
    (-60, -40, -20), cubic B-splines with 10 equispaced interior knots.
    """

    p: int = 2
    max_em_iters: int = 200
    min_em_iters: int = 1
    em_tol: float = 1e-6
    quad_points_per_dim: int = 5
    estep_mode: str = "laplace_ghq"
    seed: int = 0
    interval: Tuple[float, float] = (-80.0, 0.0)
    tau0: Tuple[float, ...] = (-60.0, -40.0, -20.0)
    degree: int = 3
    n_interior_knots: int = 10
    sigma_theta_init: float = 0.25
    ridge: float = 1e-6

    def __post_init__(self):
        if self.p < 0:
            raise ParameterError("p must be >= 0")
        if self.quad_points_per_dim < 1:
            raise ParameterError("quad_points_per_dim must be >= 1")
        if not (self.em_tol > 0):
            raise ParameterError("em_tol must be positive")
        if self.max_em_iters < 1 or self.min_em_iters < 0:
            raise ParameterError("iteration limits must be positive")
        if self.estep_mode not in ("laplace_ghq", "map_hard"):
            raise ParameterError(f"unknown estep_mode {self.estep_mode!r}")
        if self.sigma_theta_init < 0 or self.ridge < 0:
            raise ParameterError("sigma_theta_init and ridge must be non-negative")
        self.interval = tuple(float(v) for v in self.interval)
        self.tau0 = tuple(float(v) for v in self.tau0)
        check_knots(self.tau0, self.interval)

    def make_basis(self) -> BSplineBasis:
        return BSplineBasis.equispaced(self.degree, self.n_interior_knots, self.interval)

    @property
    def n_nodes(self) -> int:
        return 1 if self.estep_mode == "map_hard" else self.quad_points_per_dim

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["interval"] = list(self.interval)
        d["tau0"] = list(self.tau0)
        return d


class _WarpPosterior:
    """Log of ``p(y | theta) N(theta; theta0, Sigma)`` in whitened coordinates.

    ``theta = theta0 + L u`` with ``L L^T = Sigma`` restricted to the range
    of ``Sigma``, so ``u`` has a standard normal prior and zero-variance
    directions drop out.
    """

    def __init__(self, curve: Curve, model: TemplateModel):
        self.curve = curve
        self.model = model
        self.theta0 = model.theta0
        w, V = np.linalg.eigh(0.5 * (model.Sigma + model.Sigma.T))
        keep = w > 1e-12 * max(1.0, float(np.max(np.abs(w))))
        self.L = V[:, keep] * np.sqrt(w[keep])
        self.d = int(keep.sum())
        self.n_evals = 0

    def theta(self, U: np.ndarray) -> np.ndarray:
        return self.theta0 + np.atleast_2d(U) @ self.L.T

    def u_from_theta(self, theta: np.ndarray) -> np.ndarray:
        return np.linalg.lstsq(self.L, np.asarray(theta) - self.theta0, rcond=None)[0]

    def evaluate(self, U: np.ndarray, want_z: bool = False):
        U = np.atleast_2d(U)
        thetas = self.theta(U)
        Phi = _design_batch(self.model, self.curve.grid, thetas)
        ll, zm, zc = _gaussian_terms(self.model, self.curve.values, Phi, want_z=want_z)
        logprior = -0.5 * np.sum(U * U, axis=1) - 0.5 * self.d * LOG_2PI
        self.n_evals += U.shape[0]
        return ll + logprior, thetas, Phi, zm, zc

    def logf(self, U: np.ndarray) -> np.ndarray:
        return self.evaluate(U)[0]

    def grad_hess(self, u: np.ndarray):
        """Central-difference gradient and negative Hessian in one batch."""
        d = self.d
        E = np.eye(d)
        pts = [u]
        pts += [u + _GRAD_STEP * E[i] for i in range(d)]
        pts += [u - _GRAD_STEP * E[i] for i in range(d)]
        pts += [u + _HESS_STEP * E[i] for i in range(d)]
        pts += [u - _HESS_STEP * E[i] for i in range(d)]
        pairs = [(i, j) for i in range(d) for j in range(i + 1, d)]
        for i, j in pairs:
            for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                pts.append(u + _HESS_STEP * (si * E[i] + sj * E[j]))
        f = self.logf(np.array(pts))
        f0 = f[0]
        gp, gm = f[1 : 1 + d], f[1 + d : 1 + 2 * d]
        hp, hm = f[1 + 2 * d : 1 + 3 * d], f[1 + 3 * d : 1 + 4 * d]
        g = (gp - gm) / (2 * _GRAD_STEP)
        H = np.zeros((d, d))
        H[np.diag_indices(d)] = -(hp - 2 * f0 + hm) / _HESS_STEP**2
        off = f[1 + 4 * d :].reshape(-1, 4)
        for (i, j), (fpp, fpm, fmp, fmm) in zip(pairs, off):
            H[i, j] = H[j, i] = -(fpp - fpm - fmp + fmm) / (4 * _HESS_STEP**2)
        return f0, g, H


def _floor_pd(H: np.ndarray, floor: float = _EIG_FLOOR) -> np.ndarray:
    H = 0.5 * (H + H.T)
    w, V = np.linalg.eigh(H)
    return (V * np.maximum(w, floor)) @ V.T


class _ModeResult(NamedTuple):
    u: np.ndarray
    logf: float
    grad: np.ndarray
    hess: np.ndarray
    converged: bool


def _search_matrix(H: np.ndarray) -> np.ndarray:
    # |eigenvalues| with a relative floor, so saddles and flat directions
    # still give an ascent direction of sensible length
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    floor = max(_EIG_FLOOR, 1e-6 * float(np.max(np.abs(w))))
    return (V * np.maximum(np.abs(w), floor)) @ V.T


def _newton_mode(post: _WarpPosterior, u0: np.ndarray, gtol: float = 1e-6, max_iter: int = 50,
                 max_step: float = 2.0) -> _ModeResult:
    """Damped modified-Newton ascent with finite-difference derivatives."""
    u = np.array(u0, dtype=float)
    steps = 0.5 ** np.arange(0, 24)
    f0, g, H = post.grad_hess(u)
    for _ in range(max_iter):
        w, V = np.linalg.eigh(0.5 * (H + H.T))
        if np.linalg.norm(g) <= gtol:
            if w[0] >= -_EIG_FLOOR:
                return _ModeResult(u, f0, g, _floor_pd(H), True)
            # stationary but not a maximum: follow negative curvature
            directions = (V[:, 0], -V[:, 0])
        else:
            Hm = _search_matrix(H)
            directions = (np.linalg.solve(Hm, g), g / np.linalg.norm(Hm, 2))
        moved = False
        for direction in directions:
            norm = np.linalg.norm(direction)
            if norm > max_step:
                direction = direction * (max_step / norm)
            cand = u[None, :] + steps[:, None] * direction[None, :]
            fc = post.logf(cand)
            ok = fc >= f0 + 1e-4 * steps * (g @ direction)
            if np.linalg.norm(g) <= gtol:
                ok = fc > f0
            if np.any(ok):
                u = cand[int(np.argmax(ok))]
                moved = True
                break
        if not moved:
            break
        f0, g, H = post.grad_hess(u)
    at_max = np.linalg.norm(g) <= gtol and np.linalg.eigvalsh(0.5 * (H + H.T))[0] >= -_EIG_FLOOR
    return _ModeResult(u, f0, g, _floor_pd(H), bool(at_max))


# gradient norm beyond which a multistart mode search counts as failed
_FLAG_GTOL = 1e-3


def _find_mode(post: _WarpPosterior, start: Optional[np.ndarray] = None) -> Tuple[_ModeResult, bool]:
    """Mode search from theta0 (and from ``start`` if given, keeping the
    better of the two), with multistart fallback. Returns (result, flagged)."""
    best = _newton_mode(post, np.zeros(post.d))
    if start is not None:
        res = _newton_mode(post, post.u_from_theta(start))
        if res.converged and (not best.converged or res.logf > best.logf):
            best = res
    if best.converged:
        return best, False
    r = post.model.r
    for j in range(r):
        for sgn in (1.0, -1.0):
            delta = np.zeros(r)
            delta[j] = 0.5 * sgn
            u0 = post.u_from_theta(post.theta0 + delta)
            res = _newton_mode(post, u0)
            if res.logf > best.logf:
                best = res
    flagged = np.linalg.norm(best.grad) > _FLAG_GTOL
    return best, bool(flagged)


def posterior_theta_map(curve: Curve, model: TemplateModel) -> Tuple[np.ndarray, np.ndarray]:
    """Posterior mode of the warp parameters and the negative log-posterior Hessian.

    Both are expressed in theta coordinates. The Hessian is symmetrized and
    its eigenvalues floored at 1e-8.
    """
    _check_curve(curve, model)
    post = _WarpPosterior(curve, model)
    if post.d == 0:
        return model.theta0.copy(), np.full((model.r, model.r), np.inf)
    res, _ = _find_mode(post)
    theta = post.theta(res.u)[0]
    Linv = np.linalg.pinv(post.L)
    return theta, _floor_pd(Linv.T @ res.hess @ Linv)


def log_integrand(curve: Curve, theta, model: TemplateModel) -> float:
    """``log p(y | theta) + log N(theta; theta0, Sigma)`` for full-rank Sigma."""
    theta = np.asarray(theta, dtype=float)
    diff = theta - model.theta0
    sign, logdet = np.linalg.slogdet(model.Sigma)
    if sign <= 0:
        raise ParameterError("Sigma must be positive definite to evaluate the prior density")
    prior = -0.5 * (model.r * LOG_2PI + logdet + diff @ np.linalg.solve(model.Sigma, diff))
    return conditional_loglik(curve, theta, model) + prior


@dataclass
class _Posterior:
    thetas: np.ndarray     # (K, r) quadrature nodes
    weights: np.ndarray    # (K,) normalized posterior weights
    Phi: np.ndarray        # (K, m, q)
    zmean: np.ndarray      # (K, p)
    zcov: np.ndarray       # (K, p, p)
    log_marginal: float
    theta_map: np.ndarray
    flagged: bool


def _gh_grid(n_points: int, d: int):
    x, w = np.polynomial.hermite.hermgauss(n_points)
    X = np.array(list(product(x, repeat=d))).reshape(-1, d)
    logw = np.sum(np.log(np.array(list(product(w, repeat=d))).reshape(-1, d)), axis=1)
    return X, logw


def _posterior(curve: Curve, model: TemplateModel, config: FitConfig,
               start: Optional[np.ndarray] = None) -> _Posterior:
    post = _WarpPosterior(curve, model)
    if post.d == 0:
        lf, thetas, Phi, zm, zc = post.evaluate(np.zeros((1, 0)), want_z=True)
        return _Posterior(thetas, np.ones(1), Phi, zm, zc, float(lf[0]), thetas[0], False)

    mode, flagged = _find_mode(post, start)
    if flagged:
        logger.warning("curve %s: warp mode search failed; using theta0", curve.id)
        u_hat = np.zeros(post.d)
        _, _, H = post.grad_hess(u_hat)
        H = _floor_pd(H)
        n_points = 1
    else:
        u_hat, H = mode.u, mode.hess
        n_points = config.n_nodes

    R = np.linalg.cholesky(np.linalg.inv(H))
    X, logw = _gh_grid(n_points, post.d)
    U = u_hat[None, :] + math.sqrt(2.0) * X @ R.T
    lf, thetas, Phi, zm, zc = post.evaluate(U, want_z=True)
    log_jac = 0.5 * post.d * math.log(2.0) + np.sum(np.log(np.diag(R)))
    terms = logw + np.sum(X * X, axis=1) + log_jac + lf
    log_marginal = float(logsumexp(terms))
    weights = np.exp(terms - log_marginal)
    return _Posterior(thetas, weights, Phi, zm, zc, log_marginal, post.theta(u_hat)[0], flagged)


# ---------------------------------------------------------------------------
# E-step / M-step
# ---------------------------------------------------------------------------


@dataclass
class SubjectEffects:
    """Posterior summaries of one subject's random effects."""

    id: str
    theta_hat: np.ndarray
    theta_cov: np.ndarray
    tau_hat: np.ndarray
    z_hat: np.ndarray
    z_cov: np.ndarray
    loglik_contrib: float
    theta_map: np.ndarray = None
    flagged: bool = False

    def to_row(self) -> dict:
        row = {"id": self.id}
        row.update({f"theta{j + 1}": v for j, v in enumerate(self.theta_hat)})
        row.update({f"tau{j + 1}": v for j, v in enumerate(self.tau_hat)})
        row.update({f"z{k + 1}": v for k, v in enumerate(self.z_hat)})
        row["loglik"] = self.loglik_contrib
        row["flagged"] = int(self.flagged)
        return row


@dataclass
class SuffStats:
    """Expected complete-data sufficient statistics, summed over subjects.

    ``A`` and ``b`` hold the normal equations for ``vec([a, C])``:
    ``A = Σ E[z̃ z̃^T] ⊗ Φ^T Φ`` and ``b = Σ vec(Φ^T y E[z̃]^T)`` with
    ``z̃ = (1, z)``.
    """

    A: np.ndarray
    b: np.ndarray
    yy: float
    Ezz: np.ndarray
    Ett: np.ndarray
    Et: np.ndarray
    n: int
    n_obs: int

    def __add__(self, other: "SuffStats") -> "SuffStats":
        return SuffStats(
            self.A + other.A,
            self.b + other.b,
            self.yy + other.yy,
            self.Ezz + other.Ezz,
            self.Ett + other.Ett,
            self.Et + other.Et,
            self.n + other.n,
            self.n_obs + other.n_obs,
        )

    def expected_rss(self, W: np.ndarray) -> float:
        w = W.T.ravel()
        return float(self.yy - 2.0 * w @ self.b + w @ self.A @ w)


def _stats_from_posterior(curve: Curve, model: TemplateModel, pos: _Posterior) -> SuffStats:
    K, _, q = pos.Phi.shape
    p = model.p
    om = pos.weights
    Ezt = np.concatenate((np.ones((K, 1)), pos.zmean), axis=1)
    Ezzt = np.einsum("ki,kj->kij", Ezt, Ezt)
    Ezzt[:, 1:, 1:] += pos.zcov
    G = np.einsum("kmi,kmj->kij", pos.Phi, pos.Phi)
    Py = np.einsum("kmi,m->ki", pos.Phi, curve.values)
    A = np.einsum("k,kab,kij->aibj", om, Ezzt, G).reshape((p + 1) * q, (p + 1) * q)
    b = np.einsum("k,kj,kb->bj", om, Py, Ezt).ravel()
    diff = pos.thetas - model.theta0
    return SuffStats(
        A=0.5 * (A + A.T),
        b=b,
        yy=float(curve.values @ curve.values),
        Ezz=np.einsum("k,kij->ij", om, Ezzt[:, 1:, 1:]),
        Ett=np.einsum("k,ki,kj->ij", om, diff, diff),
        Et=om @ pos.thetas,
        n=1,
        n_obs=curve.m,
    )


def _effects_from_posterior(curve: Curve, model: TemplateModel, pos: _Posterior) -> SubjectEffects:
    om = pos.weights
    th = om @ pos.thetas
    dth = pos.thetas - th
    z = om @ pos.zmean
    dz = pos.zmean - z
    zcov = np.einsum("k,kij->ij", om, pos.zcov) + np.einsum("k,ki,kj->ij", om, dz, dz)
    return SubjectEffects(
        id=curve.id,
        theta_hat=th,
        theta_cov=np.einsum("k,ki,kj->ij", om, dth, dth),
        tau_hat=jupp_inverse(th, model.interval),
        z_hat=z,
        z_cov=0.5 * (zcov + zcov.T),
        loglik_contrib=pos.log_marginal,
        theta_map=pos.theta_map,
        flagged=pos.flagged,
    )


def e_step(curve: Curve, model: TemplateModel, config: FitConfig,
           start: Optional[np.ndarray] = None) -> Tuple[SuffStats, SubjectEffects]:
    """Posterior expectations for one subject.

    The warp posterior is integrated with adaptive Gauss-Hermite quadrature
    (``config.quad_points_per_dim`` nodes per dimension) centred at the mode
    and scaled by the inverse-Hessian Cholesky factor; ``map_hard`` uses the
    mode alone. Score moments are exact Gaussian conditionals at each node.
    ``start`` is an optional extra starting point for the mode search (the
    EM driver passes the subject's previous mode).
    """
    _check_curve(curve, model)
    pos = _posterior(curve, model, config, start)
    return _stats_from_posterior(curve, model, pos), _effects_from_posterior(curve, model, pos)


def _solve_normal(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        L = np.linalg.cholesky(A)
        if np.min(np.diag(L)) ** 2 > 1e-13 * np.max(np.diag(A)):
            return np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        pass
    warnings.warn("singular normal equations in M-step; adding a 1e-10 ridge", RuntimeWarning)
    ridge = 1e-10 * max(float(np.mean(np.diag(A))), 1.0)
    return np.linalg.solve(A + ridge * np.eye(A.shape[0]), b)


def m_step(stats: SuffStats, model: TemplateModel) -> TemplateModel:
    """Closed-form parameter update followed by identifiability repair."""
    q, p = model.q, model.p
    w = _solve_normal(stats.A, stats.b)
    W = w.reshape(p + 1, q).T
    a, C = W[:, 0], W[:, 1:]
    sigma2 = max(stats.expected_rss(W) / stats.n_obs, 1e-12)
    lam_full = stats.Ezz / stats.n
    C, lam = orthonormalize_components(C, lam_full, model.gram)
    Sigma = stats.Ett / stats.n
    return model.with_params(a=a, C=C, lam=lam, sigma2=sigma2, Sigma=0.5 * (Sigma + Sigma.T))


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


class FitResult(NamedTuple):
    model: TemplateModel
    trace: List[float]
    effects: List[SubjectEffects]


def _curves_of(dataset) -> List[Curve]:
    curves = list(getattr(dataset, "curves", dataset))
    return sorted(curves, key=lambda c: c.id)


def initial_model(curves: Sequence[Curve], config: FitConfig) -> TemplateModel:
    """Deterministic starting values from unwarped spline fits."""
    basis = config.make_basis()
    J = basis.gram
    q, p = basis.q, config.p
    Phis = [bspline_eval(basis, c.grid) for c in curves]
    Phi_all = np.vstack(Phis)
    y_all = np.concatenate([c.values for c in curves])
    a = np.linalg.lstsq(Phi_all, y_all, rcond=None)[0]

    # per-curve ridge fits around the mean
    kappa = 1e-3 * np.trace(Phi_all.T @ Phi_all) / (q * len(curves))
    deltas = []
    for Phi, c in zip(Phis, curves):
        res = c.values - Phi @ a
        deltas.append(np.linalg.solve(Phi.T @ Phi + kappa * np.eye(q), Phi.T @ res))
    deltas = np.array(deltas)
    if p > 0:
        S = np.cov(deltas, rowvar=False) if len(curves) > 1 else np.eye(q)
        Jh, Jmh = _sqrtm_psd(J)
        w, V = np.linalg.eigh(Jh @ S @ Jh)
        order = np.argsort(w)[::-1][:p]
        C0 = Jmh @ V[:, order]
        lam0 = np.maximum(w[order], 1e-6 * max(w.max(), 1e-12))
        C, lam = orthonormalize_components(C0, lam0, J)
    else:
        C, lam = np.zeros((q, 0)), np.zeros(0)

    rss = 0.0
    for Phi, c in zip(Phis, curves):
        res = c.values - Phi @ a
        if p > 0:
            B = Phi @ C
            z = np.linalg.lstsq(B, res, rcond=None)[0]
            res = res - B @ z
        rss += float(res @ res)
    sigma2 = max(rss / y_all.size, 1e-6 * max(float(np.var(y_all)), 1e-12))
    r = len(config.tau0)
    return TemplateModel(
        basis=basis,
        a=a,
        C=C,
        lam=lam,
        sigma2=sigma2,
        tau0=np.array(config.tau0),
        Sigma=config.sigma_theta_init * np.eye(r),
    )


def _run_estep(curves, model, config, starts=None):
    stats = None
    effects = []
    for c in curves:
        start = None if starts is None else starts.get(c.id)
        s, e = e_step(c, model, config, start)
        stats = s if stats is None else stats + s
        effects.append(e)
    return stats, effects


def fit_em(dataset, config: Optional[FitConfig] = None, init: Optional[TemplateModel] = None,
           callback=None) -> FitResult:
    """Maximum-likelihood fit of the warping model by EM.

    Iterates E- and M-steps until the relative change of the marginal
    log-likelihood falls below ``config.em_tol`` (after at least
    ``config.min_em_iters`` iterations) or ``config.max_em_iters`` is
    reached. The returned effects come from the E-step at the returned model.
    """
    config = config or FitConfig()
    curves = _curves_of(dataset)
    if len(curves) < 2:
        raise FitError("fit_em needs at least two curves")
    if len({c.id for c in curves}) != len(curves):
        raise FitError("curve ids must be unique")
    model = init if init is not None else initial_model(curves, config)
    for c in curves:
        _check_curve(c, model)

    trace: List[float] = []
    converged = False
    starts = None
    for it in range(config.max_em_iters):
        stats, effects = _run_estep(curves, model, config, starts)
        starts = {e.id: e.theta_map for e in effects if not e.flagged}
        flagged = [e.id for e in effects if e.flagged]
        if len(flagged) == len(curves):
            raise FitError(f"warp mode search failed for every subject at iteration {it}")
        ll = float(sum(e.loglik_contrib for e in effects))
        trace.append(ll)
        if callback is not None:
            callback(it, ll, model)
        logger.info("EM iteration %d: loglik %.8f", it, ll)
        if len(trace) > max(1, config.min_em_iters):
            change = abs(trace[-1] - trace[-2]) / max(abs(trace[-2]), 1.0)
            if change < config.em_tol:
                converged = True
                break
        if it == config.max_em_iters - 1:
            break
        model = m_step(stats, model)

    diagnostics = {
        "iterations": len(trace),
        "converged": converged,
        "final_loglik": trace[-1],
        "flagged_subjects": flagged,
        "config": config.to_dict(),
    }
    model = model.with_params(diagnostics=diagnostics)
    return FitResult(model, trace, effects)


def marginal_loglik(dataset, model: TemplateModel, config: Optional[FitConfig] = None) -> float:
    """Sum over subjects of the quadrature-integrated marginal log-likelihood."""
    config = config or FitConfig(p=model.p, tau0=tuple(model.tau0), interval=model.interval)
    total = 0.0
    for c in _curves_of(dataset):
        _check_curve(c, model)
        total += _posterior(c, model, config).log_marginal
    return total


def subject_effects(dataset, model: TemplateModel, config: Optional[FitConfig] = None) -> List[SubjectEffects]:
    """Run one E-step at ``model`` and return the per-subject posteriors."""
    config = config or FitConfig(p=model.p, tau0=tuple(model.tau0), interval=model.interval)
    return [e_step(c, model, config)[1] for c in _curves_of(dataset)]


def subject_warp(effects: SubjectEffects, model: TemplateModel):
    return make_warp(model.tau0, effects.tau_hat, model.interval)


def register_curve(curve: Curve, effects: SubjectEffects, model: TemplateModel) -> Curve:
    """Curve re-plotted on the template time axis, ``t -> h_i^{-1}(t)``."""
    if effects.id != curve.id:
        raise ParameterError(f"effects for {effects.id!r} do not belong to curve {curve.id!r}")
    h = subject_warp(effects, model)
    return Curve(curve.id, warp_invert(h, curve.grid), curve.values)


def unregister_grid(grid, effects: SubjectEffects, model: TemplateModel) -> np.ndarray:
    return warp_eval(subject_warp(effects, model), grid)
