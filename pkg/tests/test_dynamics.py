"""Tests for the particle dynamics: hand-transcribed step oracles,
degenerate/identity cases, structural invariants (affine span,
permutation equivariance, bit-reproducibility), and the coupled run
driver."""

import numpy as np
import pytest

from eks_lab.dynamics import (
    CoupledState,
    SdeConfig,
    condition_check,
    eks_gradient_step,
    eks_step,
    mean_field_step,
    run,
    sample_gaussian,
)
from eks_lab.ensemble import Ensemble, affine_span_distance, empirical_stats
from eks_lab.errors import (
    DimensionMismatch,
    NonFinite,
    NonPositive,
    SingularImplicitSystem,
    SingularMatrix,
)
from eks_lab.model import (
    GaussianMoments,
    InverseProblem,
    make_perpendicular_perturbation,
    posterior_moments,
    precision_matrix,
)
from eks_lab.noise import NoiseSource
from eks_lab.reference import MomentFlow


class FixedNoise:
    """Noise stub returning a preset array regardless of the step index."""

    def __init__(self, xi):
        self.xi = np.asarray(xi, dtype=float)

    def normal_block(self, step, n_particles, n_components):
        assert self.xi.shape == (n_particles, n_components)
        return self.xi.copy()


class ZeroNoise:
    def normal_block(self, step, n_particles, n_components):
        return np.zeros((n_particles, n_components))


class PermutedNoise:
    """Wrap a NoiseSource so that row j receives what row perm[j] would
    have received — the reindexing that accompanies permuting particles."""

    def __init__(self, base, perm):
        self.base = base
        self.perm = np.asarray(perm)

    def normal_block(self, step, n_particles, n_components):
        return self.base.normal_block(step, n_particles, n_components)[self.perm]


def scalar_problem():
    return InverseProblem(a=[[1.0]], gamma=[[1.0]], gamma0=[[1.0]],
                          y=[0.0], u0=[0.0])


def default_problem():
    return InverseProblem(a=[[1.0, 0.0], [0.0, 2.0]],
                          gamma=np.eye(2), gamma0=np.eye(2),
                          y=[1.0, 1.0], u0=[0.0, 0.0])


def random_problem(seed, l=3, k=4):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(k, l))
    qg = rng.normal(size=(k, k))
    q0 = rng.normal(size=(l, l))
    return InverseProblem(
        a=a,
        gamma=qg @ qg.T + 0.5 * np.eye(k),
        gamma0=q0 @ q0.T + 0.5 * np.eye(l),
        y=rng.normal(size=k),
        u0=rng.normal(size=l),
    )


def random_ensemble(seed, j, l, spread=1.0, time=0.0, step=0):
    rng = np.random.default_rng(seed)
    return Ensemble(particles=rng.normal(scale=spread, size=(j, l)),
                    time=time, step=step)


# ---------------------------------------------------------------- config


def test_sde_config_validation():
    SdeConfig(h=0.0, n_steps=0, j_particles=1, seed=0)
    SdeConfig(h=0.5, n_steps=10, j_particles=2, seed=0)
    with pytest.raises(NonPositive):
        SdeConfig(h=-0.1, n_steps=1, j_particles=1, seed=0)
    with pytest.raises(NonPositive):
        SdeConfig(h=0.6, n_steps=1, j_particles=1, seed=0)
    with pytest.raises(NonPositive):
        SdeConfig(h=0.1, n_steps=-1, j_particles=1, seed=0)
    with pytest.raises(NonPositive):
        SdeConfig(h=0.1, n_steps=1, j_particles=0, seed=0)
    with pytest.raises(NonPositive):
        SdeConfig(h=0.1, n_steps=1, j_particles=1, seed=0, sqrt_tol=0.0)
    assert SdeConfig(h=0.01, n_steps=300, j_particles=4, seed=1).t_final == \
        pytest.approx(3.0)


def test_coupled_state_validation():
    u = random_ensemble(0, 4, 2)
    v = random_ensemble(1, 4, 2)
    CoupledState(u_ens=u, v_ens=v)
    with pytest.raises(DimensionMismatch):
        CoupledState(u_ens=u, v_ens=random_ensemble(1, 5, 2))
    with pytest.raises(DimensionMismatch):
        CoupledState(u_ens=u, v_ens=random_ensemble(1, 4, 2, step=3))


# ---------------------------------------------------- scalar hand oracle


def test_eks_step_scalar_hand_case():
    # L=K=1, A=1, gamma=gamma0=1, y=0, u0=0, u=(0,2), h=0.1, noise
    # (0.3, -0.7).  Every quantity below is transcribed by hand:
    #   mean = 1, cov_uu = cov_ug = ((0-1)^2 + (2-1)^2)/2 = 1
    #   misfit = (0, 2), drift = cov_ug * misfit = (0, 2)
    #   rhs = u - h*drift = (0, 1.8); system = 1 + h = 1.1
    #   u_star = (0, 1.8/1.1); root = sqrt(2*0.1*1)
    problem = scalar_problem()
    ens = Ensemble(particles=[[0.0], [2.0]], time=0.0, step=0)
    cfg = SdeConfig(h=0.1, n_steps=1, j_particles=2, seed=0)
    noise = FixedNoise([[0.3], [-0.7]])
    out = eks_step(ens, problem, cfg, noise)
    root = np.sqrt(0.2)
    expected = np.array([[0.0 + root * 0.3],
                         [1.8 / 1.1 - root * 0.7]])
    np.testing.assert_allclose(out.particles, expected, atol=1e-14)
    assert out.time == pytest.approx(0.1)
    assert out.step == 1


def test_eks_step_matches_direct_transcription():
    # independent dense-matrix transcription of the update, classic
    # mean/cov formulas and explicit inverses throughout
    for seed in range(5):
        problem = random_problem(seed)
        ens = random_ensemble(seed + 100, j=7, l=3)
        cfg = SdeConfig(h=0.05, n_steps=1, j_particles=7, seed=seed)
        noise = NoiseSource(seed=seed)
        out = eks_step(ens, problem, cfg, noise)

        u = ens.particles
        j = u.shape[0]
        ubar = u.mean(axis=0)
        g = u @ problem.a.T
        gbar = g.mean(axis=0)
        cov_uu = (u - ubar).T @ (u - ubar) / j
        cov_ug = (u - ubar).T @ (g - gbar) / j
        gamma_inv = np.linalg.inv(problem.gamma)
        gamma0_inv = np.linalg.inv(problem.gamma0)
        h = cfg.h
        rhs = (u
               - h * (g - problem.y) @ gamma_inv @ cov_ug.T
               + h * (cov_uu @ gamma0_inv @ problem.u0))
        system = np.eye(3) + h * cov_uu @ gamma0_inv
        u_star = np.linalg.solve(system, rhs.T).T
        root = np.real(scipy_sqrtm(2.0 * h * cov_uu))
        expected = u_star + noise.normal_block(0, j, 3) @ root.T
        np.testing.assert_allclose(out.particles, expected,
                                   rtol=1e-11, atol=1e-11)


def scipy_sqrtm(m):
    import scipy.linalg
    return scipy.linalg.sqrtm(m)


def test_eks_gradient_step_nonlinear_transcription():
    # L=2, K=3 nonlinear case checked against a literal per-particle
    # transcription of the gradient-variant drift
    a = np.array([[1.0, 0.0], [0.0, 2.0], [0.0, 0.0]])
    gamma = np.diag([1.0, 2.0, 0.5])
    pert = make_perpendicular_perturbation(
        a, gamma, seed_direction=[1.0, 1.0, 1.0], frequency=[0.7, -0.4],
        amplitude=1.5)
    problem = InverseProblem(a=a, gamma=gamma, gamma0=np.eye(2),
                             y=[1.0, 1.0, 1.5], u0=[0.1, -0.2],
                             nonlinear=pert)
    ens = random_ensemble(7, j=6, l=2)
    cfg = SdeConfig(h=0.05, n_steps=1, j_particles=6, seed=3)
    noise = NoiseSource(seed=3)
    out = eks_gradient_step(ens, problem, cfg, noise)

    u = ens.particles
    j = u.shape[0]
    ubar = u.mean(axis=0)
    cov_uu = (u - ubar).T @ (u - ubar) / j
    gamma_inv = np.linalg.inv(gamma)
    gamma0_inv = np.linalg.inv(problem.gamma0)
    h = cfg.h
    rows = np.zeros_like(u)
    for idx in range(j):
        g_j = a @ u[idx] + pert.evaluate(u[idx])
        grad_g = a.T + pert.gradient(u[idx])      # (L, K)
        rows[idx] = cov_uu @ grad_g @ gamma_inv @ (g_j - problem.y)
    rhs = u - h * rows + h * (cov_uu @ gamma0_inv @ problem.u0)
    system = np.eye(2) + h * cov_uu @ gamma0_inv
    u_star = np.linalg.solve(system, rhs.T).T
    root = np.real(scipy_sqrtm(2.0 * h * cov_uu))
    expected = u_star + noise.normal_block(0, j, 2) @ root.T
    np.testing.assert_allclose(out.particles, expected, rtol=1e-11,
                               atol=1e-12)


# ------------------------------------------------- trivial step behavior


def test_degenerate_freeze_is_exact():
    # identical particles: covariances are exactly zero, so drift and
    # noise vanish exactly in every step mode
    problem = default_problem()
    particles = np.tile([[0.37, -1.2]], (5, 1))
    ens = Ensemble(particles=particles, time=0.0, step=0)
    cfg = SdeConfig(h=0.1, n_steps=1, j_particles=5, seed=11)
    noise = NoiseSource(seed=11)

    out = eks_step(ens, problem, cfg, noise)
    assert np.array_equal(out.particles, particles)
    out = eks_gradient_step(ens, problem, cfg, noise)
    assert np.array_equal(out.particles, particles)

    frozen_rho = GaussianMoments(mean=[0.0, 0.0], cov=np.zeros((2, 2)))
    out = mean_field_step(ens, frozen_rho, problem, cfg, noise)
    assert np.array_equal(out.particles, particles)


def test_h_zero_is_identity():
    problem = default_problem()
    ens = random_ensemble(4, j=6, l=2)
    cfg = SdeConfig(h=0.0, n_steps=1, j_particles=6, seed=0)
    noise = NoiseSource(seed=0)
    rho = GaussianMoments(mean=[0.0, 0.0], cov=np.eye(2))
    for stepper in (eks_step, eks_gradient_step):
        out = stepper(ens, problem, cfg, noise)
        assert np.array_equal(out.particles, ens.particles)
        assert out.time == ens.time
        assert out.step == ens.step + 1
    out = mean_field_step(ens, rho, problem, cfg, noise)
    assert np.array_equal(out.particles, ens.particles)


def test_mean_field_fixed_point():
    # all particles at the posterior mean, noise forced to zero: unchanged
    problem = default_problem()
    u_star = posterior_moments(problem).mean
    ens = Ensemble(particles=np.tile(u_star, (4, 1)), time=0.0, step=0)
    cfg = SdeConfig(h=0.2, n_steps=1, j_particles=4, seed=0)
    rho = GaussianMoments(mean=u_star, cov=np.eye(2))
    out = mean_field_step(ens, rho, problem, cfg, ZeroNoise())
    np.testing.assert_allclose(out.particles, ens.particles, atol=1e-15)


def test_mean_field_ou_transition_oracle():
    # A = I, gamma = gamma0 = 2I makes B = I and u* = 0; with C = I and
    # zero noise one Euler-Maruyama step is (1-h)v, which must match the
    # exact Ornstein-Uhlenbeck transition mean e^{-h} v to O(h^2)
    problem = InverseProblem(a=np.eye(2), gamma=2.0 * np.eye(2),
                             gamma0=2.0 * np.eye(2), y=[0.0, 0.0],
                             u0=[0.0, 0.0])
    np.testing.assert_allclose(precision_matrix(problem), np.eye(2),
                               atol=1e-14)
    h = 1e-3
    ens = random_ensemble(2, j=5, l=2)
    cfg = SdeConfig(h=h, n_steps=1, j_particles=5, seed=0)
    rho = GaussianMoments(mean=[0.0, 0.0], cov=np.eye(2))
    out = mean_field_step(ens, rho, problem, cfg, ZeroNoise())
    exact = np.exp(-h) * ens.particles
    assert np.max(np.abs(out.particles - exact)) <= 5e-6


def test_mean_field_rejects_nonlinear():
    a = np.array([[1.0, 0.0], [0.0, 2.0], [0.0, 0.0]])
    gamma = np.diag([1.0, 2.0, 0.5])
    pert = make_perpendicular_perturbation(
        a, gamma, seed_direction=[1.0, 1.0, 1.0], frequency=[0.7, -0.4],
        amplitude=1.0)
    problem = InverseProblem(a=a, gamma=gamma, gamma0=np.eye(2),
                             y=[1.0, 1.0, 1.5], u0=[0.0, 0.0],
                             nonlinear=pert)
    ens = random_ensemble(0, j=4, l=2)
    cfg = SdeConfig(h=0.1, n_steps=1, j_particles=4, seed=0)
    rho = GaussianMoments(mean=[0.0, 0.0], cov=np.eye(2))
    from eks_lab.errors import NonlinearUnsupported
    with pytest.raises(NonlinearUnsupported):
        mean_field_step(ens, rho, problem, cfg, NoiseSource(seed=0))


# ------------------------------------------------------ algebraic checks


def test_linear_agreement_of_the_two_steps():
    # for a linear forward map cov_ug = cov_uu A^T makes the two drifts
    # identical, so the steps agree to rounding
    for seed in range(5):
        problem = random_problem(seed)
        ens = random_ensemble(seed + 50, j=8, l=3)
        cfg = SdeConfig(h=0.05, n_steps=1, j_particles=8, seed=seed)
        a_out = eks_step(ens, problem, cfg, NoiseSource(seed=seed))
        b_out = eks_gradient_step(ens, problem, cfg, NoiseSource(seed=seed))
        np.testing.assert_allclose(a_out.particles, b_out.particles,
                                   rtol=1e-12, atol=1e-12)


def test_linear_agreement_over_trajectory():
    problem = default_problem()
    for seed in range(3):
        ens_a = random_ensemble(seed, j=10, l=2, spread=1.5)
        ens_b = ens_a
        cfg = SdeConfig(h=0.02, n_steps=100, j_particles=10, seed=seed)
        noise = NoiseSource(seed=cfg.seed)
        for _ in range(cfg.n_steps):
            ens_a = eks_step(ens_a, problem, cfg, noise)
            ens_b = eks_gradient_step(ens_b, problem, cfg, noise)
        np.testing.assert_allclose(ens_a.particles, ens_b.particles,
                                   rtol=1e-11, atol=1e-11)


def test_implicit_step_consistency_order():
    # || implicit u* - explicit-Euler u* || should shrink like h^2; the
    # ratio between successive halvings is close to 4
    problem = default_problem()
    ens = random_ensemble(9, j=6, l=2, spread=1.3)
    stats = empirical_stats(ens, problem)
    u = ens.particles
    g = u @ problem.a.T
    gamma_inv = np.linalg.inv(problem.gamma)
    gamma0_inv = np.linalg.inv(problem.gamma0)
    diffs = []
    for h in (1e-2, 5e-3, 2.5e-3):
        cfg = SdeConfig(h=h, n_steps=1, j_particles=6, seed=0)
        implicit = eks_step(ens, problem, cfg, ZeroNoise()).particles
        explicit = (u
                    - h * (g - problem.y) @ gamma_inv @ stats.cov_ug.T
                    - h * (u - problem.u0) @ gamma0_inv @ stats.cov_uu.T)
        diffs.append(np.max(np.linalg.norm(implicit - explicit, axis=1)))
    assert diffs[0] / diffs[1] == pytest.approx(4.0, abs=0.5)
    assert diffs[1] / diffs[2] == pytest.approx(4.0, abs=0.5)


def test_affine_span_invariance():
    # J=3 particles in L=5: drift and noise live in range(cov_uu), so
    # iterates never leave the affine span of the initial ensemble
    problem = random_problem(21, l=5, k=5)
    initial = random_ensemble(22, j=3, l=5)
    cfg = SdeConfig(h=0.05, n_steps=100, j_particles=3, seed=5)
    noise = NoiseSource(seed=cfg.seed)
    ens = initial
    for _ in range(cfg.n_steps):
        ens = eks_step(ens, problem, cfg, noise)
    assert affine_span_distance(ens, initial) <= 1e-8

    ens = initial
    for _ in range(cfg.n_steps):
        ens = eks_gradient_step(ens, problem, cfg, noise)
    assert affine_span_distance(ens, initial) <= 1e-8


# -------------------------------------------------- structural invariants


def test_permutation_equivariance_exact():
    problem = random_problem(31)
    rng = np.random.default_rng(77)
    for trial in range(4):
        perm = rng.permutation(6)
        base = random_ensemble(trial, j=6, l=3)
        permuted = Ensemble(particles=base.particles[perm],
                            time=base.time, step=base.step)
        cfg = SdeConfig(h=0.05, n_steps=1, j_particles=6, seed=trial)
        for stepper in (eks_step, eks_gradient_step):
            out_base = stepper(base, problem, cfg,
                               NoiseSource(seed=cfg.seed))
            out_perm = stepper(permuted, problem, cfg,
                               PermutedNoise(NoiseSource(seed=cfg.seed),
                                             perm))
            assert np.array_equal(out_perm.particles,
                                  out_base.particles[perm])


def test_permutation_equivariance_over_trajectory():
    problem = default_problem()
    perm = np.array([3, 0, 4, 1, 2])
    base = random_ensemble(8, j=5, l=2)
    permuted = Ensemble(particles=base.particles[perm],
                        time=base.time, step=base.step)
    cfg = SdeConfig(h=0.05, n_steps=25, j_particles=5, seed=13)
    noise = NoiseSource(seed=cfg.seed)
    wrapped = PermutedNoise(NoiseSource(seed=cfg.seed), perm)
    for _ in range(cfg.n_steps):
        base = eks_step(base, problem, cfg, noise)
        permuted = eks_step(permuted, problem, cfg, wrapped)
    assert np.array_equal(permuted.particles, base.particles[perm])


def test_bit_identical_reruns():
    problem = default_problem()
    cfg = SdeConfig(h=0.05, n_steps=40, j_particles=16, seed=99)

    def trajectory():
        ens = sample_gaussian(
            GaussianMoments(mean=[2.0, -2.0], cov=np.eye(2)),
            cfg.j_particles, cfg.seed)
        noise = NoiseSource(seed=cfg.seed)
        for _ in range(cfg.n_steps):
            ens = eks_step(ens, problem, cfg, noise)
        return ens.particles

    first = trajectory()
    second = trajectory()
    assert np.array_equal(first, second)


def test_no_blowup_across_seeds():
    # T=5 at h=0.01 for 50 seeds: the centered fourth moment must stay
    # finite and within a factor 10^3 of (1 + its initial value)
    from eks_lab.ensemble import centered_moment
    problem = default_problem()
    moments0 = GaussianMoments(mean=[2.0, -2.0], cov=np.eye(2))
    cfg_template = dict(h=0.01, n_steps=500, j_particles=100)
    for seed in range(50):
        cfg = SdeConfig(seed=seed, **cfg_template)
        ens = sample_gaussian(moments0, cfg.j_particles, seed)
        bound = 1e3 * (1.0 + centered_moment(ens, 4))
        noise = NoiseSource(seed=seed)
        for _ in range(cfg.n_steps):
            ens = eks_step(ens, problem, cfg, noise)
        m4 = centered_moment(ens, 4)
        assert np.isfinite(m4)
        assert m4 <= bound


# ------------------------------------------------------------ run driver


def flow_for(problem, mean, cov):
    return MomentFlow(problem=problem, m0=np.asarray(mean, dtype=float),
                      c0=np.asarray(cov, dtype=float))


def test_run_zero_steps_returns_initial():
    problem = default_problem()
    ens = random_ensemble(3, j=4, l=2)
    cfg = SdeConfig(h=0.1, n_steps=0, j_particles=4, seed=0)
    res = run(ens, problem, cfg, "eks")
    assert res.final is ens
    assert res.coupling_error is None


def test_run_mode_and_dim_validation():
    problem = default_problem()
    ens = random_ensemble(3, j=4, l=2)
    cfg = SdeConfig(h=0.1, n_steps=1, j_particles=4, seed=0)
    with pytest.raises(ValueError):
        run(ens, problem, cfg, "nonsense")
    with pytest.raises(ValueError):
        run(ens, problem, cfg, "coupled")          # missing flow
    bad_cfg = SdeConfig(h=0.1, n_steps=1, j_particles=5, seed=0)
    with pytest.raises(DimensionMismatch):
        run(ens, problem, bad_cfg, "eks")


def test_run_matches_manual_stepping():
    problem = default_problem()
    ens = random_ensemble(17, j=8, l=2)
    cfg = SdeConfig(h=0.05, n_steps=30, j_particles=8, seed=4)
    res = run(ens, problem, cfg, "eks")
    manual = ens
    noise = NoiseSource(seed=cfg.seed)
    for _ in range(cfg.n_steps):
        manual = eks_step(manual, problem, cfg, noise)
    assert np.array_equal(res.final.particles, manual.particles)
    assert res.final.step == cfg.n_steps
    assert res.final.time == pytest.approx(cfg.t_final)


def test_coupled_run_starts_at_zero_error():
    problem = default_problem()
    moments0 = GaussianMoments(mean=[2.0, -2.0], cov=np.eye(2))
    ens = sample_gaussian(moments0, 32, 7)
    cfg = SdeConfig(h=0.05, n_steps=10, j_particles=32, seed=7)
    flow = flow_for(problem, moments0.mean, moments0.cov)
    res = run(ens, problem, cfg, "coupled", flow=flow)
    assert res.coupling_error.shape == (cfg.n_steps + 1,)
    assert res.coupling_error[0] == 0.0
    assert np.all(np.isfinite(res.coupling_error))
    assert res.v_final is not None
    assert res.v_final.particles.shape == res.final.particles.shape


def test_coupling_error_shrinks_with_ensemble_size():
    # the squared coupling distance at fixed T behaves like C/J
    problem = default_problem()
    moments0 = GaussianMoments(mean=[2.0, -2.0], cov=np.eye(2))
    flow = flow_for(problem, moments0.mean, moments0.cov)
    errs = {}
    for j in (32, 128, 512):
        vals = []
        for seed in (1, 2, 3):
            cfg = SdeConfig(h=0.02, n_steps=50, j_particles=j, seed=seed)
            ens = sample_gaussian(moments0, j, seed)
            res = run(ens, problem, cfg, "coupled", flow=flow)
            vals.append(res.coupling_error[-1])
        errs[j] = np.mean(vals)
    assert errs[128] < errs[32]
    assert errs[512] < errs[128]
    # 16x more particles should buy roughly 16x; demand at least 4x
    assert errs[512] < errs[32] / 4.0


def test_shared_noise_tightens_coupling():
    problem = default_problem()
    moments0 = GaussianMoments(mean=[2.0, -2.0], cov=np.eye(2))
    flow = flow_for(problem, moments0.mean, moments0.cov)
    cfg = SdeConfig(h=0.02, n_steps=50, j_particles=64, seed=5)
    ens = sample_gaussian(moments0, 64, 5)
    shared = run(ens, problem, cfg, "coupled", flow=flow)
    independent = run(ens, problem, cfg, "coupled", flow=flow,
                      share_noise=False)
    assert shared.coupling_error[-1] * 5.0 < independent.coupling_error[-1]


def test_mean_field_run_tracks_reference_marginals():
    # long mean-field run: empirical moments approach rho(T)
    problem = default_problem()
    moments0 = GaussianMoments(mean=[2.0, -2.0], cov=np.eye(2))
    flow = flow_for(problem, moments0.mean, moments0.cov)
    j = 4000
    cfg = SdeConfig(h=0.01, n_steps=300, j_particles=j, seed=12)
    ens = sample_gaussian(moments0, j, 12)
    res = run(ens, problem, cfg, "mean_field", flow=flow)
    from eks_lab.reference import rho_at
    target = rho_at(flow, cfg.t_final)
    stats = empirical_stats(res.final, problem)
    assert np.linalg.norm(stats.mean_u - target.mean) < 0.1
    assert np.linalg.norm(stats.cov_uu - target.cov, ord=2) < 0.15


def test_run_diagnostics_recorded():
    problem = default_problem()
    moments0 = GaussianMoments(mean=[2.0, -2.0], cov=np.eye(2))
    flow = flow_for(problem, moments0.mean, moments0.cov)
    ens = sample_gaussian(moments0, 16, 3)
    cfg = SdeConfig(h=0.05, n_steps=8, j_particles=16, seed=3)
    res = run(ens, problem, cfg, "coupled", flow=flow,
              record_diagnostics=True)
    diag = res.diagnostics
    assert set(diag) == {"step", "time", "coupling_error", "condition",
                         "trace_cov_uu", "fourth_moment"}
    for key in diag:
        assert diag[key].shape == (cfg.n_steps + 1,)
    assert np.all(np.diff(diag["time"]) > 0)
    np.testing.assert_allclose(diag["coupling_error"],
                               res.coupling_error, rtol=0, atol=0)


# ------------------------------------------------------------- utilities


def test_sample_gaussian_reproduces_moments():
    moments = GaussianMoments(mean=[1.0, -3.0],
                              cov=[[2.0, 0.5], [0.5, 1.0]])
    ens = sample_gaussian(moments, 20000, 42)
    assert ens.time == 0.0 and ens.step == 0
    emp_mean = ens.particles.mean(axis=0)
    centered = ens.particles - emp_mean
    emp_cov = centered.T @ centered / ens.j_particles
    np.testing.assert_allclose(emp_mean, moments.mean, atol=0.05)
    np.testing.assert_allclose(emp_cov, moments.cov, atol=0.08)


def test_sample_gaussian_prefix_property():
    # addressable noise: the first 100 particles of a 200-particle draw
    # equal the 100-particle draw bit for bit
    moments = GaussianMoments(mean=[1.0, -3.0],
                              cov=[[2.0, 0.5], [0.5, 1.0]])
    small = sample_gaussian(moments, 100, 7)
    big = sample_gaussian(moments, 200, 7)
    assert np.array_equal(big.particles[:100], small.particles)


def test_condition_check_values():
    # B = 4I against C = I
    problem = InverseProblem(a=np.eye(2), gamma=np.eye(2) / 3.0,
                             gamma0=np.eye(2), y=[0.0, 0.0],
                             u0=[0.0, 0.0])
    rho = GaussianMoments(mean=[0.0, 0.0], cov=np.eye(2))
    assert condition_check(problem, rho) == pytest.approx(4.0, abs=1e-12)
    # B = I against C = I
    problem = InverseProblem(a=np.eye(2), gamma=2.0 * np.eye(2),
                             gamma0=2.0 * np.eye(2), y=[0.0, 0.0],
                             u0=[0.0, 0.0])
    assert condition_check(problem, rho) == pytest.approx(1.0, abs=1e-12)
    # C = B^{-1}: product of extreme eigenvalues
    problem = default_problem()
    b = precision_matrix(problem)
    rho = GaussianMoments(mean=[0.0, 0.0], cov=np.linalg.inv(b))
    w = np.linalg.eigvalsh(b)
    assert condition_check(problem, rho) == pytest.approx(w[0] / w[-1],
                                                          rel=1e-10)


# ------------------------------------------------------------- failures


def test_overflow_raises_nonfinite_with_step_index():
    problem = scalar_problem()
    ens = Ensemble(particles=[[-1e150], [1e150]], time=0.0, step=0)
    cfg = SdeConfig(h=0.1, n_steps=1, j_particles=2, seed=0)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NonFinite, match="step 0"):
            eks_step(ens, problem, cfg, NoiseSource(seed=0))


def test_singular_implicit_system_reports_step(monkeypatch):
    problem = default_problem()
    ens = random_ensemble(0, j=4, l=2, step=17)

    def broken_solve(a, rhs):
        raise SingularMatrix("synthetic failure")

    monkeypatch.setattr("eks_lab.dynamics.general_solve", broken_solve)
    cfg = SdeConfig(h=0.1, n_steps=1, j_particles=4, seed=0)
    with pytest.raises(SingularImplicitSystem, match="step 17"):
        eks_step(ens, problem, cfg, NoiseSource(seed=0))


def test_step_dim_mismatch():
    problem = default_problem()
    ens = random_ensemble(0, j=4, l=3)
    cfg = SdeConfig(h=0.1, n_steps=1, j_particles=4, seed=0)
    with pytest.raises(DimensionMismatch):
        eks_step(ens, problem, cfg, NoiseSource(seed=0))
    with pytest.raises(DimensionMismatch):
        eks_gradient_step(ens, problem, cfg, NoiseSource(seed=0))
    rho = GaussianMoments(mean=np.zeros(3), cov=np.eye(3))
    with pytest.raises(DimensionMismatch):
        mean_field_step(ens, rho, problem, cfg, NoiseSource(seed=0))
