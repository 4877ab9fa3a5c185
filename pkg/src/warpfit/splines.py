"""Spline machinery: B-spline template bases, monotone Hermite warps and the
Jupp reparametrization of warp knots.

Most functions come in two flavours. The public ones operate on a single
warp or knot vector; the underscored ``*_batch`` helpers take a leading batch
axis and are what the likelihood code calls in its inner loops.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from .exceptions import ConstraintError, DomainError

# relative slack (in units of interval width) inside which points are snapped
# onto the interval end instead of being rejected
_BOUNDARY_SLACK = 1e-9


def _as_interval(interval: Sequence[float]) -> Tuple[float, float]:
    lo, hi = float(interval[0]), float(interval[1])
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
        raise ConstraintError(f"invalid interval [{lo}, {hi}]")
    return lo, hi


def _clip_to_interval(t: np.ndarray, lo: float, hi: float) -> np.ndarray:
    slack = _BOUNDARY_SLACK * (hi - lo)
    bad = (t < lo - slack) | (t > hi + slack) | ~np.isfinite(t)
    if np.any(bad):
        offending = np.asarray(t)[bad].ravel()[0]
        raise DomainError(f"t={offending!r} lies outside the interval [{lo}, {hi}]")
    return np.clip(t, lo, hi)


def check_knots(tau: Sequence[float], interval: Sequence[float]) -> np.ndarray:
    """Validate an interior knot vector and return it as a float array.

    Raises
    ------
    ConstraintError
        If ``tau`` is not strictly increasing or touches/exceeds the interval.
    """
    lo, hi = _as_interval(interval)
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    if tau.ndim != 1 or tau.size == 0:
        raise ConstraintError("knot vector must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(tau)):
        raise ConstraintError(f"knot vector contains non-finite values: {tau}")
    aug = np.concatenate(([lo], tau, [hi]))
    if np.any(np.diff(aug) <= 0):
        raise ConstraintError(
            f"knots {tau.tolist()} must be strictly increasing and strictly inside ({lo}, {hi})"
        )
    return tau


# ---------------------------------------------------------------------------
# B-splines
# ---------------------------------------------------------------------------


class BSplineBasis:
    """Clamped B-spline basis on a closed interval.

    Parameters
    ----------
    degree : int
        Polynomial degree (3 for cubic).
    interior_knots : sequence of float
        Strictly increasing breakpoints strictly inside ``interval``.
    interval : (float, float)
        The closed interval ``[t_lo, t_hi]``.
    """

    def __init__(self, degree: int, interior_knots: Sequence[float], interval: Sequence[float]):
        if int(degree) != degree or degree < 0:
            raise ConstraintError(f"degree must be a non-negative integer, got {degree}")
        self.degree = int(degree)
        self.interval = _as_interval(interval)
        lo, hi = self.interval
        knots = np.asarray(interior_knots, dtype=float).ravel()
        if knots.size:
            check_knots(knots, self.interval)
        self.interior_knots = knots
        k = self.degree
        self.knots = np.concatenate(([lo] * (k + 1), knots, [hi] * (k + 1)))
        self.knots.setflags(write=False)
        self.interior_knots.setflags(write=False)

    @classmethod
    def equispaced(cls, degree: int, n_interior: int, interval: Sequence[float]) -> "BSplineBasis":
        """Basis with ``n_interior`` equally spaced interior knots."""
        lo, hi = _as_interval(interval)
        knots = np.linspace(lo, hi, n_interior + 2)[1:-1]
        return cls(degree, knots, (lo, hi))

    @property
    def q(self) -> int:
        return self.interior_knots.size + self.degree + 1

    def __repr__(self) -> str:
        return (
            f"BSplineBasis(degree={self.degree}, interior_knots={self.interior_knots.tolist()}, "
            f"interval={self.interval})"
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BSplineBasis):
            return NotImplemented
        return (
            self.degree == other.degree
            and self.interval == other.interval
            and np.array_equal(self.interior_knots, other.interior_knots)
        )

    def to_dict(self) -> dict:
        return {
            "degree": self.degree,
            "interior_knots": self.interior_knots.tolist(),
            "interval": list(self.interval),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BSplineBasis":
        return cls(d["degree"], d["interior_knots"], d["interval"])

    def __call__(self, t) -> np.ndarray:
        return bspline_eval(self, t)

    @cached_property
    def gram(self) -> np.ndarray:
        return gram_matrix(self)


def _spans(basis: BSplineBasis, t: np.ndarray) -> np.ndarray:
    k, q = basis.degree, basis.q
    span = np.searchsorted(basis.knots, t, side="right") - 1
    # t == t_hi falls in the last non-degenerate span (left limit)
    return np.clip(span, k, q - 1)


def bspline_eval(basis: BSplineBasis, t) -> np.ndarray:
    """Evaluate all basis functions at ``t``.

    Returns an array of shape ``t.shape + (q,)``. Uses the triangular
    de Boor recursion restricted to the non-zero functions of each span.
    """
    t_arr = np.asarray(t, dtype=float)
    lo, hi = basis.interval
    x = _clip_to_interval(t_arr.ravel(), lo, hi)
    k, kv = basis.degree, basis.knots
    span = _spans(basis, x)

    n = x.size
    N = np.zeros((n, k + 1))
    N[:, 0] = 1.0
    left = np.empty((n, k + 1))
    right = np.empty((n, k + 1))
    for j in range(1, k + 1):
        left[:, j] = x - kv[span + 1 - j]
        right[:, j] = kv[span + j] - x
        saved = np.zeros(n)
        for r in range(j):
            temp = N[:, r] / (right[:, r + 1] + left[:, j - r])
            N[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        N[:, j] = saved

    out = np.zeros((n, basis.q))
    cols = span[:, None] - k + np.arange(k + 1)
    out[np.arange(n)[:, None], cols] = N
    return out.reshape(t_arr.shape + (basis.q,))


def gram_matrix(basis: BSplineBasis) -> np.ndarray:
    """L2 inner products of the basis functions over the interval.

    Uses Gauss-Legendre quadrature of order ``degree + 1`` on every knot
    span, which integrates the degree ``2 * degree`` products exactly.
    """
    nodes, weights = np.polynomial.legendre.leggauss(basis.degree + 1)
    brk = np.unique(basis.knots)
    a, b = brk[:-1], brk[1:]
    half = 0.5 * (b - a)
    pts = (0.5 * (a + b))[:, None] + half[:, None] * nodes[None, :]
    w = (half[:, None] * weights[None, :]).ravel()
    Phi = bspline_eval(basis, pts.ravel())
    J = Phi.T @ (w[:, None] * Phi)
    return 0.5 * (J + J.T)


# ---------------------------------------------------------------------------
# Monotone Hermite warps
# ---------------------------------------------------------------------------


def _fc_slopes_batch(x: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Fritsch-Carlson slopes for ordinates ``Y`` (batch, n) at abscissae ``x`` (n,)."""
    h = np.diff(x)
    delta = np.diff(Y, axis=-1) / h
    D = np.empty_like(Y)
    D[..., 0] = delta[..., 0]
    D[..., -1] = delta[..., -1]
    D[..., 1:-1] = 0.5 * (delta[..., :-1] + delta[..., 1:])
    # flat or sign-changing neighbourhoods get a zero slope
    flat = delta[..., :-1] * delta[..., 1:] <= 0
    D[..., 1:-1] = np.where(flat, 0.0, D[..., 1:-1])
    for j in range(h.size):
        dj = delta[..., j]
        zero = dj == 0
        D[..., j] = np.where(zero, 0.0, D[..., j])
        D[..., j + 1] = np.where(zero, 0.0, D[..., j + 1])
        safe = np.where(zero, 1.0, dj)
        alpha = D[..., j] / safe
        beta = D[..., j + 1] / safe
        rad = alpha * alpha + beta * beta
        shrink = (rad > 9.0) & ~zero
        tau = np.where(shrink, 3.0 / np.sqrt(np.where(shrink, rad, 1.0)), 1.0)
        D[..., j] = np.where(shrink, tau * alpha * dj, D[..., j])
        D[..., j + 1] = np.where(shrink, tau * beta * dj, D[..., j + 1])
    return D


def _hermite_pieces(x, Y, D, idx):
    x0, x1 = x[idx], x[idx + 1]
    y0 = np.take_along_axis(Y, idx, axis=-1)
    y1 = np.take_along_axis(Y, idx + 1, axis=-1)
    d0 = np.take_along_axis(D, idx, axis=-1)
    d1 = np.take_along_axis(D, idx + 1, axis=-1)
    return x0, x1 - x0, y0, y1, d0, d1


def _cubic(u, h, y0, y1, d0, d1):
    u2 = u * u
    u3 = u2 * u
    return (
        (2 * u3 - 3 * u2 + 1) * y0
        + (u3 - 2 * u2 + u) * h * d0
        + (-2 * u3 + 3 * u2) * y1
        + (u3 - u2) * h * d1
    )


def _cubic_du(u, h, y0, y1, d0, d1):
    """Derivative with respect to the local coordinate ``u``."""
    u2 = u * u
    return (
        (6 * u2 - 6 * u) * (y0 - y1)
        + (3 * u2 - 4 * u + 1) * h * d0
        + (3 * u2 - 2 * u) * h * d1
    )


def _hermite_eval_batch(x, Y, D, s, deriv=False):
    """Evaluate warps with ordinates ``Y`` (batch, n) at ``s`` (batch, m)."""
    idx = np.clip(np.searchsorted(x, s, side="right") - 1, 0, x.size - 2)
    x0, h, y0, y1, d0, d1 = _hermite_pieces(x, Y, D, idx)
    u = (s - x0) / h
    if deriv:
        return _cubic_du(u, h, y0, y1, d0, d1) / h
    return _cubic(u, h, y0, y1, d0, d1)


def _hermite_invert_batch(x, Y, D, t, max_iter=100):
    """Solve h(s) = t for each row of ``Y``; ``t`` broadcasts to (batch, m).

    Safeguarded Newton on the local cubic of the bracketing piece: a Newton
    step is accepted only if it stays strictly inside the current bracket,
    otherwise the bracket is bisected. Targets equal to a knot ordinate map
    to the knot abscissa (the leftmost preimage).
    """
    t = np.broadcast_to(t, Y.shape[:-1] + np.shape(t)[-1:]).astype(float)
    # index of the piece [Y_k, Y_k+1) with Y_k < t <= Y_k+1 (leftmost on ties)
    idx = np.sum(Y[..., None, 1:-1] < t[..., None], axis=-1)
    x0, h, y0, y1, d0, d1 = _hermite_pieces(x, Y, D, idx)
    span = y1 - y0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(span > 0, np.clip((t - y0) / span, 0.0, 1.0), 0.0)
    lo = np.zeros_like(u)
    hi = np.ones_like(u)
    scale = np.abs(Y[..., -1:] - Y[..., :1]) + 1.0
    tol = 4 * np.finfo(float).eps * scale
    active = np.ones(u.shape, dtype=bool)
    for _ in range(max_iter):
        f = _cubic(u, h, y0, y1, d0, d1) - t
        lo = np.where(f < 0, u, lo)
        hi = np.where(f > 0, u, hi)
        active = (np.abs(f) > tol) & (hi - lo > 1e-16)
        if not np.any(active):
            break
        fp = _cubic_du(u, h, y0, y1, d0, d1)
        with np.errstate(divide="ignore", invalid="ignore"):
            un = u - f / fp
        bad = ~np.isfinite(un) | (un <= lo) | (un >= hi)
        un = np.where(bad, 0.5 * (lo + hi), un)
        u = np.where(active, un, u)
    s = x0 + u * h
    s = np.where(t >= y1, x0 + h, s)
    s = np.where(t <= y0, x0, s)
    return s


@dataclass(frozen=True, eq=False)
class MonotoneWarp:
    """Monotone piecewise-cubic Hermite map of an interval onto itself.

    ``knots`` are the augmented abscissae ``(t_lo, tau0, t_hi)``, ``values``
    the augmented ordinates ``(t_lo, tau, t_hi)`` and ``slopes`` the
    Fritsch-Carlson knot derivatives.
    """

    knots: np.ndarray
    values: np.ndarray
    slopes: np.ndarray

    @property
    def interval(self) -> Tuple[float, float]:
        return float(self.knots[0]), float(self.knots[-1])

    @property
    def tau0(self) -> np.ndarray:
        return self.knots[1:-1]

    @property
    def tau(self) -> np.ndarray:
        return self.values[1:-1]

    def __call__(self, t):
        return warp_eval(self, t)


def make_warp(tau0: Sequence[float], tau: Sequence[float], interval: Sequence[float]) -> MonotoneWarp:
    """Build the monotone Hermite warp with ``h(tau0) = tau`` and fixed endpoints.

    Raises
    ------
    ConstraintError
        If either knot vector is not strictly increasing inside the interval,
        or the two have different lengths.
    """
    lo, hi = _as_interval(interval)
    tau0 = check_knots(tau0, (lo, hi))
    tau = check_knots(tau, (lo, hi))
    if tau0.size != tau.size:
        raise ConstraintError(f"tau has length {tau.size}, reference tau0 has {tau0.size}")
    x = np.concatenate(([lo], tau0, [hi]))
    y = np.concatenate(([lo], tau, [hi]))
    d = _fc_slopes_batch(x, y[None, :])[0]
    for arr in (x, y, d):
        arr.setflags(write=False)
    return MonotoneWarp(x, y, d)


def identity_warp(tau0: Sequence[float], interval: Sequence[float]) -> MonotoneWarp:
    return make_warp(tau0, tau0, interval)


def warp_eval(h: MonotoneWarp, t):
    """Evaluate ``h`` at ``t`` (scalar or array)."""
    t_arr = np.asarray(t, dtype=float)
    s = _clip_to_interval(t_arr.ravel(), *h.interval)
    out = _hermite_eval_batch(h.knots, h.values[None, :], h.slopes[None, :], s[None, :])[0]
    # knot abscissae map exactly onto knot ordinates
    hit = np.searchsorted(h.knots, s)
    hit = np.clip(hit, 0, h.knots.size - 1)
    exact = h.knots[hit] == s
    out = np.where(exact, h.values[hit], out)
    return out.reshape(t_arr.shape) if t_arr.ndim else float(out[0])


def warp_deriv(h: MonotoneWarp, t):
    """Analytic derivative of ``h`` at ``t``."""
    t_arr = np.asarray(t, dtype=float)
    s = _clip_to_interval(t_arr.ravel(), *h.interval)
    out = _hermite_eval_batch(h.knots, h.values[None, :], h.slopes[None, :], s[None, :], deriv=True)[0]
    return out.reshape(t_arr.shape) if t_arr.ndim else float(out[0])


def warp_invert(h: MonotoneWarp, t):
    """Return ``s`` with ``h(s) = t``; the leftmost preimage on flat stretches."""
    t_arr = np.asarray(t, dtype=float)
    tt = _clip_to_interval(t_arr.ravel(), *h.interval)
    out = _hermite_invert_batch(h.knots, h.values[None, :], h.slopes[None, :], tt[None, :])[0]
    return out.reshape(t_arr.shape) if t_arr.ndim else float(out[0])


# ---------------------------------------------------------------------------
# Jupp transform
# ---------------------------------------------------------------------------


def jupp_forward(tau: Sequence[float], interval: Sequence[float]) -> np.ndarray:
    """Map strictly increasing interior knots to unconstrained log gap ratios.

    With gaps ``g_1..g_{r+1}`` of ``(t_lo, tau, t_hi)``, returns
    ``theta_j = log(g_{j+1} / g_j)``.
    """
    lo, hi = _as_interval(interval)
    tau = check_knots(tau, (lo, hi))
    gaps = np.diff(np.concatenate(([lo], tau, [hi])))
    return np.diff(np.log(gaps))


def _jupp_inverse_batch(theta: np.ndarray, lo: float, hi: float) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    zeros = np.zeros(theta.shape[:-1] + (1,))
    log_gaps = np.concatenate((zeros, np.cumsum(theta, axis=-1)), axis=-1)
    log_gaps = log_gaps - logsumexp(log_gaps, axis=-1, keepdims=True)
    gaps = np.exp(log_gaps) * (hi - lo)
    return lo + np.cumsum(gaps[..., :-1], axis=-1)


def jupp_inverse(theta: Sequence[float], interval: Sequence[float]) -> np.ndarray:
    """Inverse of :func:`jupp_forward`: rebuild knots from log gap ratios."""
    lo, hi = _as_interval(interval)
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if not np.all(np.isfinite(theta)):
        raise ConstraintError(f"theta must be finite, got {theta}")
    return _jupp_inverse_batch(theta, lo, hi)
