"""Gaussian-prior inverse problem: forward map, loss, posterior moments.

The forward map is G(u) = A u + m(u) with a linear part A and an optional
bounded perturbation m.  Observations carry Gaussian noise with covariance
gamma, the prior is N(u0, gamma0).  The regularized least-squares loss

    phi_r(u) = 0.5 |y - G(u)|^2_gamma + 0.5 |u - u0|^2_gamma0

(with |z|^2_M = z^T M^{-1} z) defines the posterior exp(-phi_r) up to
normalization.  For linear G the posterior is Gaussian with precision
B = A^T gamma^{-1} A + gamma0^{-1} and mean B^{-1} r,
r = A^T gamma^{-1} y + gamma0^{-1} u0; those closed forms live here next
to a tensor-grid quadrature that does not know about them, so the two can
be played against each other in tests and demos.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .errors import (
    DegenerateDirection,
    DimensionMismatch,
    EksError,
    NonFinite,
    NonlinearUnsupported,
    NonPositive,
    NotPSD,
    TooLarge,
)
from .spd import lambda_min, spd_invert, spd_solve, spd_sqrt, symmetrize

__all__ = [
    "GaussianMoments",
    "NonlinearPerturbation",
    "InverseProblem",
    "apply_forward",
    "apply_forward_batch",
    "loss_phi_r",
    "grad_phi_r",
    "precision_matrix",
    "posterior_moments",
    "make_perpendicular_perturbation",
    "quadrature_moments",
]


def _vector(x, n, name):
    x = np.asarray(x, dtype=float)
    if x.shape != (n,):
        raise DimensionMismatch(f"{name} must have shape ({n},), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFinite(f"{name} contains non-finite entries")
    return x


@dataclass(frozen=True)
class GaussianMoments:
    """Mean vector and covariance matrix of a Gaussian distribution."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        if mean.ndim != 1:
            raise DimensionMismatch(f"mean must be 1-d, got shape {mean.shape}")
        cov = symmetrize(self.cov)
        if cov.shape[0] != mean.shape[0]:
            raise DimensionMismatch(
                f"cov size {cov.shape[0]} does not match mean size {mean.shape[0]}")
        if not np.all(np.isfinite(mean)):
            raise NonFinite("mean contains non-finite entries")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self):
        return self.mean.shape[0]


@dataclass(frozen=True)
class NonlinearPerturbation:
    """Bounded perturbation m of the forward map, with its derivative.

    evaluate(u) returns m(u) with shape (K,); gradient(u) returns the
    derivative in (L, K) orientation, so the full forward derivative is
    A^T + gradient(u).  amplitude_bound is an upper bound on
    |m(u)| + ||grad m(u)|| over all u.  direction_basis columns span the
    range of m; for perturbations built by make_perpendicular_perturbation
    they are gamma^{-1}-orthogonal to the columns of A.

    evaluate_batch / gradient_apply_batch are optional vectorized hooks:
    evaluate_batch(U) maps (J, L) -> (J, K), gradient_apply_batch(U, Z)
    maps particles (J, L) and covectors (J, K) to rows grad m(u_j) @ z_j
    of shape (J, L).  When absent, plain Python loops fill in.
    """

    evaluate: Callable
    gradient: Callable
    amplitude_bound: float
    direction_basis: np.ndarray
    evaluate_batch: Optional[Callable] = None
    gradient_apply_batch: Optional[Callable] = None

    def eval_batch(self, u_all):
        if self.evaluate_batch is not None:
            out = np.asarray(self.evaluate_batch(u_all), dtype=float)
        else:
            out = np.stack([np.asarray(self.evaluate(u), dtype=float)
                            for u in u_all])
        if not np.all(np.isfinite(out)):
            raise NonFinite("perturbation produced non-finite values")
        peak = float(np.max(np.linalg.norm(out, axis=1))) if out.size else 0.0
        if peak > self.amplitude_bound * (1.0 + 1e-9) + 1e-12:
            raise EksError(
                f"perturbation exceeded its stated bound: |m(u)| = {peak:.3e} "
                f"> {self.amplitude_bound:.3e}")
        return out

    def grad_apply_batch(self, u_all, z_all):
        if self.gradient_apply_batch is not None:
            out = np.asarray(self.gradient_apply_batch(u_all, z_all), dtype=float)
        else:
            out = np.stack([np.asarray(self.gradient(u), dtype=float) @ z
                            for u, z in zip(u_all, z_all)])
        if not np.all(np.isfinite(out)):
            raise NonFinite("perturbation gradient produced non-finite values")
        return out


@dataclass(frozen=True)
class InverseProblem:
    """Forward map, noise and prior covariances, data, and prior mean.

    Fields
    ------
    a : (K, L) observation operator
    gamma : (K, K) SPD observation-noise covariance
    gamma0 : (L, L) SPD prior covariance
    y : (K,) observed data
    u0 : (L,) prior mean
    nonlinear : optional NonlinearPerturbation added to A u

    Instances are treated as immutable; Cholesky factors of gamma and
    gamma0 and the vector r = A^T gamma^{-1} y + gamma0^{-1} u0 are
    precomputed once at construction.
    """

    a: np.ndarray
    gamma: np.ndarray
    gamma0: np.ndarray
    y: np.ndarray
    u0: np.ndarray
    nonlinear: Optional[NonlinearPerturbation] = None
    _gamma_chol: tuple = field(init=False, repr=False, compare=False)
    _gamma0_chol: tuple = field(init=False, repr=False, compare=False)
    r: np.ndarray = field(init=False, repr=False, compare=False)
    gamma_inv: np.ndarray = field(init=False, repr=False, compare=False)
    gamma0_inv: np.ndarray = field(init=False, repr=False, compare=False)
    _precision: np.ndarray = field(init=False, repr=False, compare=False)
    _linear_mean: np.ndarray = field(init=False, repr=False, compare=False)
    _linear_cov: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        if a.ndim != 2:
            raise DimensionMismatch(f"a must be 2-d (K, L), got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise NonFinite("a contains non-finite entries")
        k, l = a.shape
        gamma = symmetrize(self.gamma)
        gamma0 = symmetrize(self.gamma0)
        if gamma.shape != (k, k):
            raise DimensionMismatch(
                f"gamma must be ({k}, {k}) to match a, got {gamma.shape}")
        if gamma0.shape != (l, l):
            raise DimensionMismatch(
                f"gamma0 must be ({l}, {l}) to match a, got {gamma0.shape}")
        if lambda_min(gamma) <= 0.0:
            raise NotPSD("gamma must be strictly positive definite")
        if lambda_min(gamma0) <= 0.0:
            raise NotPSD("gamma0 must be strictly positive definite")
        y = _vector(self.y, k, "y")
        u0 = _vector(self.u0, l, "u0")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "gamma0", gamma0)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "u0", u0)
        object.__setattr__(
            self, "_gamma_chol",
            scipy.linalg.cho_factor(gamma, lower=True, check_finite=False))
        object.__setattr__(
            self, "_gamma0_chol",
            scipy.linalg.cho_factor(gamma0, lower=True, check_finite=False))
        r = a.T @ self.solve_gamma(y) + self.solve_gamma0(u0)
        object.__setattr__(self, "r", r)
        # explicit inverses and linear-posterior moments, computed once;
        # the particle dynamics apply these row by row every step
        object.__setattr__(self, "gamma_inv", spd_invert(gamma))
        object.__setattr__(self, "gamma0_inv", spd_invert(gamma0))
        b = symmetrize(a.T @ self.solve_gamma(a) + self.gamma0_inv)
        object.__setattr__(self, "_precision", b)
        object.__setattr__(self, "_linear_mean", spd_solve(b, r))
        object.__setattr__(self, "_linear_cov", spd_invert(b))

    @property
    def dim_k(self):
        return self.a.shape[0]

    @property
    def dim_l(self):
        return self.a.shape[1]

    def solve_gamma(self, z):
        """gamma^{-1} z for a vector (K,) or matrix (K, n)."""
        return scipy.linalg.cho_solve(self._gamma_chol, z, check_finite=False)

    def solve_gamma0(self, z):
        """gamma0^{-1} z for a vector (L,) or matrix (L, n)."""
        return scipy.linalg.cho_solve(self._gamma0_chol, z, check_finite=False)


def apply_forward(problem, u):
    """Evaluate G(u) = A u + m(u) for a single point u of shape (L,)."""
    u = _vector(u, problem.dim_l, "u")
    out = problem.a @ u
    if problem.nonlinear is not None:
        out = out + np.asarray(problem.nonlinear.evaluate(u), dtype=float)
    return out


def apply_forward_batch(problem, u_all):
    """Evaluate the forward map on all rows of u_all, shape (J, L) -> (J, K)."""
    u_all = np.asarray(u_all, dtype=float)
    if u_all.ndim != 2 or u_all.shape[1] != problem.dim_l:
        raise DimensionMismatch(
            f"batch must have shape (J, {problem.dim_l}), got {u_all.shape}")
    # einsum instead of @: its fixed-order scalar loop gives every row the
    # same rounding regardless of row position or thread count
    out = np.einsum("jl,kl->jk", u_all, problem.a)
    if problem.nonlinear is not None:
        out = out + problem.nonlinear.eval_batch(u_all)
    return out


def loss_phi_r(problem, u):
    """Regularized least-squares loss phi_r(u); the posterior density is
    proportional to exp(-phi_r)."""
    u = _vector(u, problem.dim_l, "u")
    misfit = problem.y - apply_forward(problem, u)
    shift = u - problem.u0
    data_term = 0.5 * float(misfit @ problem.solve_gamma(misfit))
    prior_term = 0.5 * float(shift @ problem.solve_gamma0(shift))
    return data_term + prior_term


def grad_phi_r(problem, u):
    """Gradient of phi_r at u.

    For linear G this equals B (u - u_star) with B the posterior precision
    and u_star the posterior mean; in general it is
    (A^T + grad m(u)) gamma^{-1} (G(u) - y) + gamma0^{-1} (u - u0).
    """
    u = _vector(u, problem.dim_l, "u")
    residual = apply_forward(problem, u) - problem.y
    z = problem.solve_gamma(residual)
    g = problem.a.T @ z
    if problem.nonlinear is not None:
        g = g + np.asarray(problem.nonlinear.gradient(u), dtype=float) @ z
    return g + problem.solve_gamma0(u - problem.u0)


def precision_matrix(problem):
    """Posterior precision of the linear part, B = A^T gamma^{-1} A + gamma0^{-1}."""
    return problem._precision


def posterior_moments(problem):
    """Closed-form Gaussian posterior moments for a linear forward map.

    Returns GaussianMoments(mean = B^{-1} r, cov = B^{-1}).  Raises
    NonlinearUnsupported when the problem carries a perturbation, because
    then the posterior is not Gaussian and has no closed form here; use
    quadrature_moments for small L instead.
    """
    if problem.nonlinear is not None:
        raise NonlinearUnsupported(
            "closed-form posterior moments require a linear forward map")
    return GaussianMoments(mean=problem._linear_mean, cov=problem._linear_cov)


def make_perpendicular_perturbation(a, gamma, seed_direction, frequency,
                                    amplitude):
    """Build a bounded tanh perturbation orthogonal to the range of A.

    The perturbation is m(u) = amplitude * b * tanh(frequency @ u) where b
    is the unit vector obtained by projecting seed_direction onto the
    gamma^{-1}-orthogonal complement of the columns of A.  That makes
    A^T gamma^{-1} m(u) = 0 identically, so the data misfit splits into a
    part the linear map sees and a part it cannot.

    Parameters
    ----------
    a : (K, L) array_like
        Observation operator whose range the perturbation must avoid.
    gamma : (K, K) array_like
        SPD noise covariance defining the inner product.
    seed_direction : (K,) array_like
        Any vector with a component outside the range of A.
    frequency : (L,) array_like
        The scalar argument of tanh is frequency @ u.
    amplitude : float
        Scale of the perturbation; |m(u)| <= amplitude for all u.  Zero is
        allowed and gives m == 0, i.e. the map degenerates to the plain
        linear forward map (useful as a control case).

    Raises
    ------
    DegenerateDirection
        If the projected direction has norm below 1e-10, i.e. the seed lies
        (numerically) inside the range of A.
    NonPositive
        If amplitude < 0.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise DimensionMismatch(f"a must be 2-d (K, L), got shape {a.shape}")
    k, l = a.shape
    gamma = symmetrize(gamma)
    if gamma.shape != (k, k):
        raise DimensionMismatch(
            f"gamma must be ({k}, {k}) to match a, got {gamma.shape}")
    seed_direction = _vector(seed_direction, k, "seed_direction")
    frequency = _vector(frequency, l, "frequency")
    if amplitude < 0.0:
        raise NonPositive(f"amplitude must be nonnegative, got {amplitude}")

    # project the seed off Range(A) in the gamma^{-1} inner product by
    # whitening with gamma^{-1/2} and using an ordinary least-squares fit
    white = spd_sqrt(spd_invert(gamma))
    coef, *_ = np.linalg.lstsq(white @ a, white @ seed_direction, rcond=None)
    residual = seed_direction - a @ coef
    norm = np.linalg.norm(residual)
    if norm <= 1e-10:
        raise DegenerateDirection(
            "seed_direction lies inside the range of A; nothing is left "
            "after projection")
    b = residual / norm
    freq_norm = float(np.linalg.norm(frequency))

    def evaluate(u):
        return amplitude * np.tanh(float(frequency @ u)) * b

    def gradient(u):
        s = amplitude * (1.0 - np.tanh(float(frequency @ u)) ** 2)
        return s * np.outer(frequency, b)

    # batched closures stick to einsum for row-order-independent rounding
    def evaluate_batch(u_all):
        t = np.tanh(np.einsum("jl,l->j", u_all, frequency))
        return amplitude * t[:, None] * b[None, :]

    def gradient_apply_batch(u_all, z_all):
        t = np.tanh(np.einsum("jl,l->j", u_all, frequency))
        s = amplitude * (1.0 - t**2)
        return (s * np.einsum("jk,k->j", z_all, b))[:, None] * frequency[None, :]

    return NonlinearPerturbation(
        evaluate=evaluate,
        gradient=gradient,
        amplitude_bound=amplitude * (1.0 + freq_norm),
        direction_basis=b[:, None],
        evaluate_batch=evaluate_batch,
        gradient_apply_batch=gradient_apply_batch,
    )


def _log_density_batch(problem, points):
    """-phi_r on all rows of points, vectorized; used by the quadrature."""
    g_all = apply_forward_batch(problem, points)
    misfit = problem.y[None, :] - g_all
    data_term = 0.5 * np.einsum(
        "nk,km,nm->n", misfit, problem.gamma_inv, misfit)
    shift = points - problem.u0[None, :]
    prior_term = 0.5 * np.einsum(
        "nl,lm,nm->n", shift, problem.gamma0_inv, shift)
    return -(data_term + prior_term)


def _grid_moments(problem, center, widths, n_points):
    axes = [np.linspace(c - w, c + w, n_points)
            for c, w in zip(center, widths)]
    if len(axes) == 1:
        points = axes[0][:, None]
    else:
        xx, yy = np.meshgrid(axes[0], axes[1], indexing="ij")
        points = np.column_stack([xx.ravel(), yy.ravel()])
    logw = _log_density_batch(problem, points)
    w = np.exp(logw - np.max(logw))
    w /= np.sum(w)
    mean = w @ points
    centered = points - mean[None, :]
    cov = (w[:, None] * centered).T @ centered
    return GaussianMoments(mean=mean, cov=symmetrize(cov))


def quadrature_moments(problem, n_points=400, half_width=8.0):
    """Posterior mean and covariance by dense tensor-grid quadrature.

    Only for dimension L <= 2 (TooLarge otherwise).  The grid spans
    half_width linear-posterior standard deviations around the linear
    posterior mean, and is re-centered once on the first pass's moments so
    bounded perturbations that shift the posterior stay well inside the
    window.  Deliberately ignorant of the closed-form Gaussian answer:
    this is the reference the closed form gets checked against.
    """
    if problem.dim_l > 2:
        raise TooLarge("tensor-grid quadrature is limited to L <= 2")
    if n_points < 10:
        raise NonPositive("n_points must be at least 10")
    linear = InverseProblem(a=problem.a, gamma=problem.gamma,
                            gamma0=problem.gamma0, y=problem.y,
                            u0=problem.u0)
    start = posterior_moments(linear)
    widths = half_width * np.sqrt(np.diag(start.cov))
    first = _grid_moments(problem, start.mean, widths, n_points)
    widths = half_width * np.sqrt(np.diag(first.cov))
    return _grid_moments(problem, first.mean, widths, n_points)
