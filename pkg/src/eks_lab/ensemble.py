"""Particle ensembles and their empirical statistics.

Statistics use the 1/J (biased) normalization throughout — the particle
dynamics and their mean-field constants assume it, and 1/(J-1) would
change the flow.

Reductions over particles are done by pairwise summation of a canonically
sorted copy of the summands.  Sorting first makes the result independent
of particle order (so permuting an ensemble permutes trajectories exactly),
and the fixed pairwise tree on top makes it bit-stable across runs and
thread counts.  Centering subtracts the componentwise minimum before any
arithmetic, so an ensemble whose particles all coincide produces exactly
zero covariance, not merely a small one — the degenerate-freeze invariant
of the dynamics depends on that exactness.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NonFinite, NonPositive
from .model import apply_forward_batch

__all__ = [
    "Ensemble",
    "EnsembleStats",
    "empirical_stats",
    "centered_moment",
    "affine_span_distance",
    "save_csv",
    "load_csv",
]


@dataclass(frozen=True)
class Ensemble:
    """J particles in R^L plus the clock of the dynamics."""

    particles: np.ndarray
    time: float = 0.0
    step: int = 0

    def __post_init__(self):
        particles = np.asarray(self.particles, dtype=float)
        if particles.ndim != 2 or particles.shape[0] < 1:
            raise DimensionMismatch(
                f"particles must be (J >= 1, L), got shape {particles.shape}")
        if not np.all(np.isfinite(particles)):
            raise NonFinite("particles contain non-finite entries")
        if not np.isfinite(self.time) or self.time < 0.0:
            raise NonPositive(f"time must be finite and >= 0, got {self.time}")
        if self.step < 0:
            raise NonPositive(f"step must be >= 0, got {self.step}")
        object.__setattr__(self, "particles", particles)

    @property
    def j_particles(self):
        return self.particles.shape[0]

    @property
    def dim(self):
        return self.particles.shape[1]


@dataclass(frozen=True)
class EnsembleStats:
    """Empirical mean of u, mean of G(u), and the two covariances
    cov_uu = (1/J) sum (u - mean_u) x (u - mean_u)  and
    cov_ug = (1/J) sum (u - mean_u) x (G(u) - mean_g)."""

    mean_u: np.ndarray
    mean_g: np.ndarray
    cov_uu: np.ndarray
    cov_ug: np.ndarray


def _sorted_sum(arr):
    # canonical-order pairwise reduction along the particle axis
    return np.sum(np.sort(arr, axis=0), axis=0)


def _mean_rows(rows):
    pivot = rows.min(axis=0)
    return pivot + _sorted_sum(rows - pivot) / rows.shape[0]


def empirical_stats(ens, problem):
    """Empirical means and covariances of an ensemble under a problem's
    forward map, 1/J normalization.

    cov_uu is PSD with rank at most min(L, J-1); for all-identical
    particles both covariances are exactly zero.
    """
    u = ens.particles
    j = u.shape[0]
    g = apply_forward_batch(problem, u)
    if not np.all(np.isfinite(g)):
        raise NonFinite("forward map produced non-finite values")
    mean_u = _mean_rows(u)
    mean_g = _mean_rows(g)
    cu = u - mean_u
    cg = g - mean_g
    cov_uu = _sorted_sum(cu[:, :, None] * cu[:, None, :]) / j
    cov_ug = _sorted_sum(cu[:, :, None] * cg[:, None, :]) / j
    return EnsembleStats(mean_u=mean_u, mean_g=mean_g,
                         cov_uu=cov_uu, cov_ug=cov_ug)


def centered_moment(ens, p):
    """(1/J) sum_j |u_j - mean|^p for even p in {2, 4, 6, 8}."""
    if p not in (2, 4, 6, 8):
        raise NonPositive(f"p must be one of 2, 4, 6, 8, got {p}")
    u = ens.particles
    cu = u - _mean_rows(u)
    sq = np.einsum("jl,jl->j", cu, cu)
    return float(_sorted_sum(sq ** (p // 2)) / u.shape[0])


def affine_span_distance(ens, reference):
    """Largest distance from a particle of ens to the affine span of the
    reference ensemble's particles (least squares on the centered basis)."""
    if ens.dim != reference.dim:
        raise DimensionMismatch(
            f"dimension mismatch: {ens.dim} vs {reference.dim}")
    ref = reference.particles
    ref_mean = _mean_rows(ref)
    basis = (ref - ref_mean).T
    rhs = (ens.particles - ref_mean).T
    coef, *_ = np.linalg.lstsq(basis, rhs, rcond=None)
    residual = rhs - basis @ coef
    dists = np.sqrt(np.einsum("lj,lj->j", residual, residual))
    return float(np.max(dists))


def save_csv(ens, path):
    """Write one row per particle; header comments carry time and step.

    The %.17g format round-trips float64 exactly, so save/load is lossless
    and same-seed runs produce byte-identical files.
    """
    names = ",".join(f"u{i}" for i in range(ens.dim))
    header = f"time={ens.time:.17g} step={ens.step}\n{names}"
    np.savetxt(path, ens.particles, delimiter=",", fmt="%.17g",
               header=header, comments="# ")


def load_csv(path):
    """Read an ensemble written by save_csv."""
    with open(path) as fh:
        first = fh.readline().strip()
    if not first.startswith("# time="):
        raise DimensionMismatch(f"{path} does not look like an ensemble CSV")
    fields = dict(item.split("=") for item in first[2:].split())
    particles = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    return Ensemble(particles=particles, time=float(fields["time"]),
                    step=int(fields["step"]))
