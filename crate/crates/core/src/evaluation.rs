//! Closed-loop cost evaluation, the three-way cost decomposition, and a
//! seeded Monte-Carlo simulator.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::problem::ProblemInstance;
use crate::riccati::{self, DEFAULT_LYAPUNOV_TOL};
use crate::synthesis::{assemble_realization, u2_selector, ControllerRealization, GainSet};

/// Plant and controller over the lifted state `[x; η]`, driven by `[w; v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopModel {
    pub acl: DMatrix<f64>,
    pub bcl: DMatrix<f64>,
    /// Stage cost is `[x; η]ᵀ·M·[x; η]`.
    pub m: DMatrix<f64>,
    /// `[[W, U], [Uᵀ, V]]`.
    pub noise_cov: DMatrix<f64>,
}

impl ClosedLoopModel {
    pub fn radius(&self) -> f64 {
        riccati::spectral_radius(&self.acl)
    }

    /// Stationary covariance of the lifted state.
    pub fn stationary_covariance(&self, tol: f64) -> Result<DMatrix<f64>> {
        let drive = linalg::symmetrize(&(&self.bcl * &self.noise_cov * self.bcl.transpose()));
        riccati::solve_dlyap(&self.acl, &drive, tol).map_err(|e| match e {
            Error::Unstable { radius, .. } => Error::Unstable {
                what: "closed loop".into(),
                radius,
            },
            other => other,
        })
    }
}

pub fn closed_loop(instance: &ProblemInstance, realization: &ControllerRealization) -> Result<ClosedLoopModel> {
    let d = instance.dims();
    realization.check_against(&d)?;
    let sys = &instance.system;
    let (n, p, q) = (d.n(), d.p(), realization.q());
    let bh = &sys.b * &realization.h;
    let gc = &realization.g * &sys.c;
    let acl = linalg::block(&[&[&sys.a, &bh], &[&gc, &realization.f]]);

    let mut bcl = DMatrix::zeros(n + q, n + p);
    bcl.view_mut((0, 0), (n, n)).fill_with_identity();
    bcl.view_mut((n, n), (q, p)).copy_from(&realization.g);

    let mut lift = DMatrix::zeros(n + d.m(), n + q);
    lift.view_mut((0, 0), (n, n)).fill_with_identity();
    lift.view_mut((n, n), (d.m(), q)).copy_from(&realization.h);
    let m = linalg::symmetrize(&(lift.transpose() * instance.cost.joint() * &lift));

    Ok(ClosedLoopModel {
        acl,
        bcl,
        m,
        noise_cov: instance.noise.joint(),
    })
}

/// Stationary average cost `tr(M·Σ)`.
pub fn analytic_cost(model: &ClosedLoopModel, tol: f64) -> Result<f64> {
    let sigma = model.stationary_covariance(tol)?;
    Ok((&model.m * sigma).trace())
}

/// Largest entries of the stationary cross-covariances between the three
/// error signals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossCovarianceNorms {
    pub zhat_ztilde: f64,
    pub zhat_xtilde: f64,
    pub ztilde_xtilde: f64,
}

impl CrossCovarianceNorms {
    pub fn max(&self) -> f64 {
        self.zhat_ztilde.max(self.zhat_xtilde).max(self.ztilde_xtilde)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub j_total: f64,
    pub j_hat_z: f64,
    pub j_tilde_z: f64,
    pub j_tilde_x: f64,
    pub cross_covariance_norms: CrossCovarianceNorms,
    /// Relative difference between the stationary `Cov(x̃)` and `P`.
    pub estimation_error_mismatch: f64,
}

impl DecompositionReport {
    /// `|J − (Ĵ_z + J̃_z + J̃_x)| / max(1, J)`.
    pub fn sum_defect(&self) -> f64 {
        (self.j_total - (self.j_hat_z + self.j_tilde_z + self.j_tilde_x)).abs() / self.j_total.max(1.0)
    }
}

/// Splits the cost of the synthesized controller into the common-information
/// part `Ĵ_z`, the correction part `J̃_z` and the estimation part `J̃_x`.
pub fn cost_decomposition(instance: &ProblemInstance, gains: &GainSet, tol: f64) -> Result<DecompositionReport> {
    let d = instance.dims();
    let n = d.n();
    let realization = assemble_realization(gains, &instance.system)?;
    let model = closed_loop(instance, &realization)?;
    let sigma = model.stationary_covariance(tol)?;
    let j_total = (&model.m * &sigma).trace();

    // Rows map [x; ẑ; z] to ẑ, z̃ = z − ẑ and x̃ = x − z.
    let eye = DMatrix::<f64>::identity(n, n);
    let zero = DMatrix::<f64>::zeros(n, n);
    let neg = -&eye;
    let t_zhat = linalg::block(&[&[&zero, &eye, &zero]]);
    let t_ztilde = linalg::block(&[&[&zero, &neg, &eye]]);
    let t_xtilde = linalg::block(&[&[&eye, &zero, &neg]]);
    let cov = |a: &DMatrix<f64>, b: &DMatrix<f64>| a * &sigma * b.transpose();

    let xi = instance.cost.joint();
    let stage = |gain: &DMatrix<f64>, c: &DMatrix<f64>| {
        let lift = linalg::block(&[&[&eye], &[gain]]);
        (lift.transpose() * &xi * &lift * c).trace()
    };
    let cov_zhat = cov(&t_zhat, &t_zhat);
    let cov_ztilde = cov(&t_ztilde, &t_ztilde);
    let cov_xtilde = linalg::symmetrize(&cov(&t_xtilde, &t_xtilde));
    let j_hat_z = stage(&(-&gains.l), &cov_zhat);
    let j_tilde_z = stage(&(-(u2_selector(&d) * &gains.l2)), &cov_ztilde);
    let j_tilde_x = (&instance.cost.q * &cov_xtilde).trace();

    Ok(DecompositionReport {
        j_total,
        j_hat_z,
        j_tilde_z,
        j_tilde_x,
        cross_covariance_norms: CrossCovarianceNorms {
            zhat_ztilde: linalg::max_abs(&cov(&t_zhat, &t_ztilde)),
            zhat_xtilde: linalg::max_abs(&cov(&t_zhat, &t_xtilde)),
            ztilde_xtilde: linalg::max_abs(&cov(&t_ztilde, &t_xtilde)),
        },
        estimation_error_mismatch: linalg::relative_difference(&cov_xtilde, &gains.p),
    })
}

/// Analytic cost of a realization on an instance, with the default Lyapunov tolerance.
pub fn realization_cost(instance: &ProblemInstance, realization: &ControllerRealization) -> Result<f64> {
    analytic_cost(&closed_loop(instance, realization)?, DEFAULT_LYAPUNOV_TOL)
}

// ---------------------------------------------------------------------------
// Monte Carlo

/// Running means and covariances of the state and input trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub mean_x: Vec<f64>,
    pub mean_u: Vec<f64>,
    pub cov_x: Vec<Vec<f64>>,
    pub cov_u: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub empirical_cost: f64,
    pub steps: u64,
    pub seed: u64,
    pub shards: usize,
    pub summary: TraceSummary,
}

#[derive(Debug, Clone)]
struct Accumulator {
    steps: u64,
    cost: f64,
    sum_x: DVector<f64>,
    sum_u: DVector<f64>,
    sum_xx: DMatrix<f64>,
    sum_uu: DMatrix<f64>,
}

impl Accumulator {
    fn new(n: usize, m: usize) -> Self {
        Accumulator {
            steps: 0,
            cost: 0.0,
            sum_x: DVector::zeros(n),
            sum_u: DVector::zeros(m),
            sum_xx: DMatrix::zeros(n, n),
            sum_uu: DMatrix::zeros(m, m),
        }
    }

    fn merge(&mut self, other: &Accumulator) {
        self.steps += other.steps;
        self.cost += other.cost;
        self.sum_x += &other.sum_x;
        self.sum_u += &other.sum_u;
        self.sum_xx += &other.sum_xx;
        self.sum_uu += &other.sum_uu;
    }

    fn finish(&self, seed: u64, shards: usize) -> SimulationResult {
        let t = self.steps as f64;
        let mean_x = &self.sum_x / t;
        let mean_u = &self.sum_u / t;
        let cov_x = &self.sum_xx / t - &mean_x * mean_x.transpose();
        let cov_u = &self.sum_uu / t - &mean_u * mean_u.transpose();
        SimulationResult {
            empirical_cost: self.cost / t,
            steps: self.steps,
            seed,
            shards,
            summary: TraceSummary {
                mean_x: mean_x.iter().copied().collect(),
                mean_u: mean_u.iter().copied().collect(),
                cov_x: crate::matrix_io::to_rows(&cov_x),
                cov_u: crate::matrix_io::to_rows(&cov_u),
            },
        }
    }
}

/// Lower factor `F` with `F·Fᵀ` equal to the joint noise covariance, adding
/// `1e-12·I` if the plain Cholesky factorization fails.
pub fn noise_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if cov.iter().all(|&v| v == 0.0) {
        return Ok(cov.clone());
    }
    let sym = linalg::symmetrize(cov);
    if let Some(c) = sym.clone().cholesky() {
        return Ok(c.l());
    }
    let jittered = &sym + DMatrix::identity(sym.nrows(), sym.ncols()) * 1e-12;
    jittered.cholesky().map(|c| c.l()).ok_or_else(|| {
        Error::NoiseModel(format!(
            "noise covariance has no Cholesky factor (min eigenvalue {:e})",
            linalg::min_eigenvalue(&sym)
        ))
    })
}

fn run_shard(
    instance: &ProblemInstance,
    realization: &ControllerRealization,
    factor: &DMatrix<f64>,
    steps: u64,
    rng: &mut ChaCha8Rng,
) -> Accumulator {
    let d = instance.dims();
    let (n, m, p, q) = (d.n(), d.m(), d.p(), realization.q());
    let (a, b, c) = (&instance.system.a, &instance.system.b, &instance.system.c);
    let (cq, cs, cr) = (&instance.cost.q, &instance.cost.s, &instance.cost.r);
    let (f, g, h) = (&realization.f, &realization.g, &realization.h);

    let mut acc = Accumulator::new(n, m);
    let mut x = DVector::zeros(n);
    let mut eta = DVector::zeros(q);
    let mut u = DVector::zeros(m);
    let mut y = DVector::zeros(p);
    let mut x_next = DVector::zeros(n);
    let mut eta_next = DVector::zeros(q);
    let mut white = DVector::zeros(n + p);
    let mut noise = DVector::zeros(n + p);
    let mut qx = DVector::zeros(n);
    let mut su = DVector::zeros(n);
    let mut ru = DVector::zeros(m);

    for _ in 0..steps {
        for v in white.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        noise.gemv(1.0, factor, &white, 0.0);
        let w = noise.rows(0, n);
        let v = noise.rows(n, p);

        u.gemv(1.0, h, &eta, 0.0);
        y.gemv(1.0, c, &x, 0.0);
        y += v;

        qx.gemv(1.0, cq, &x, 0.0);
        su.gemv(1.0, cs, &u, 0.0);
        ru.gemv(1.0, cr, &u, 0.0);
        acc.cost += x.dot(&qx) + 2.0 * x.dot(&su) + u.dot(&ru);
        acc.sum_x += &x;
        acc.sum_u += &u;
        acc.sum_xx.ger(1.0, &x, &x, 1.0);
        acc.sum_uu.ger(1.0, &u, &u, 1.0);

        x_next.gemv(1.0, a, &x, 0.0);
        x_next.gemv(1.0, b, &u, 1.0);
        x_next += w;
        eta_next.gemv(1.0, f, &eta, 0.0);
        eta_next.gemv(1.0, g, &y, 1.0);
        std::mem::swap(&mut x, &mut x_next);
        std::mem::swap(&mut eta, &mut eta_next);
    }
    acc.steps = steps;
    acc
}

/// Simulates the closed loop from zero initial state with i.i.d. Gaussian
/// noise drawn from a ChaCha8 stream seeded by `seed`.
pub fn simulate(
    instance: &ProblemInstance,
    realization: &ControllerRealization,
    steps: u64,
    seed: u64,
) -> Result<SimulationResult> {
    simulate_sharded(instance, realization, steps, seed, 1)
}

/// Splits the run into `shards` independent trajectories, each from zero
/// initial state on ChaCha8 stream `k` of `seed`, run on separate threads.
/// The result depends only on `(seed, steps, shards)`.
pub fn simulate_sharded(
    instance: &ProblemInstance,
    realization: &ControllerRealization,
    steps: u64,
    seed: u64,
    shards: usize,
) -> Result<SimulationResult> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be ≥ 1".into()));
    }
    if shards == 0 || shards as u64 > steps {
        return Err(Error::InvalidArgument(format!(
            "shard count must lie in 1..={steps}, got {shards}"
        )));
    }
    let d = instance.dims();
    instance.check_shapes()?;
    realization.check_against(&d)?;
    let factor = noise_factor(&instance.noise.joint())?;

    let per = steps / shards as u64;
    let extra = steps % shards as u64;
    let lengths: Vec<u64> = (0..shards as u64).map(|k| per + u64::from(k < extra)).collect();
    let parts: Vec<Accumulator> = std::thread::scope(|scope| {
        let handles: Vec<_> = lengths
            .iter()
            .enumerate()
            .map(|(k, &len)| {
                let factor = &factor;
                scope.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(k as u64);
                    run_shard(instance, realization, factor, len, &mut rng)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("simulation shard panicked")).collect()
    });

    let mut total = Accumulator::new(d.n(), d.m());
    for part in &parts {
        total.merge(part);
    }
    Ok(total.finish(seed, shards))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{random_instance, BlockDims, CostModel, NoiseModel, PartitionedSystem};
    use crate::synthesis::{synthesize, ControllerLayout, SynthesisOptions};

    fn scalar_plant() -> ProblemInstance {
        let d = BlockDims::scalar();
        let sys = PartitionedSystem::new(
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            d,
        )
        .unwrap();
        let mut noise = NoiseModel {
            w: DMatrix::zeros(2, 2),
            u: DMatrix::zeros(2, 2),
            v: DMatrix::identity(2, 2),
        };
        noise.w[(0, 0)] = 1.0;
        let mut cost = CostModel {
            q: DMatrix::zeros(2, 2),
            s: DMatrix::zeros(2, 2),
            r: DMatrix::identity(2, 2),
        };
        cost.q[(0, 0)] = 1.0;
        ProblemInstance::new(sys, noise, cost).unwrap()
    }

    fn zero_controller(d: &BlockDims) -> ControllerRealization {
        ControllerRealization::new(
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, d.p()),
            DMatrix::zeros(d.m(), 1),
            ControllerLayout::new(d, vec![]),
        )
        .unwrap()
    }

    fn seed7() -> ProblemInstance {
        random_instance(7, BlockDims::scalar(), 0.9).unwrap()
    }

    #[test]
    fn zero_controller_gives_block_diagonal_loop() {
        let inst = seed7();
        let model = closed_loop(&inst, &zero_controller(&inst.dims())).unwrap();
        assert_eq!(model.acl.view((0, 0), (2, 2)), inst.system.a.view((0, 0), (2, 2)));
        assert!(model.acl.view((0, 2), (2, 1)).iter().all(|&v| v == 0.0));
        assert!(model.acl.view((2, 0), (1, 3)).iter().all(|&v| v == 0.0));
        assert_eq!(model.m.view((0, 0), (2, 2)).into_owned(), inst.cost.q);
        assert!(model.m.view((2, 0), (1, 3)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pure_noise_state_costs_trace_q_w() {
        let inst = scalar_plant();
        let model = closed_loop(&inst, &zero_controller(&inst.dims())).unwrap();
        let j = analytic_cost(&model, 1e-12).unwrap();
        assert!((j - 1.0).abs() < 1e-14, "{j}");
    }

    #[test]
    fn noiseless_loop_has_zero_cost() {
        let inst = seed7();
        let syn = synthesize(&inst, &SynthesisOptions::default()).unwrap();
        let quiet = inst.with_noise_scaled(0.0);
        let model = closed_loop(&quiet, &syn.realization).unwrap();
        assert_eq!(analytic_cost(&model, 1e-12).unwrap(), 0.0);
        let sim = simulate(&quiet, &syn.realization, 100, 1).unwrap();
        assert_eq!(sim.empirical_cost, 0.0);
    }

    #[test]
    fn seed7_loop_is_stable_and_decomposes() {
        let inst = seed7();
        let syn = synthesize(&inst, &SynthesisOptions::default()).unwrap();
        let model = closed_loop(&inst, &syn.realization).unwrap();
        assert!(model.radius() < 1.0);
        let rep = cost_decomposition(&inst, &syn.gains, DEFAULT_LYAPUNOV_TOL).unwrap();
        assert!(rep.sum_defect() <= 1e-8, "{rep:?}");
        assert!(rep.cross_covariance_norms.max() <= 1e-8, "{rep:?}");
        let trace_qp = (&inst.cost.q * &syn.gains.p).trace();
        assert!((rep.j_tilde_x - trace_qp).abs() <= 1e-8 * trace_qp);
        assert!(rep.estimation_error_mismatch <= 1e-8);
        let j = analytic_cost(&model, DEFAULT_LYAPUNOV_TOL).unwrap();
        assert!((rep.j_total - j).abs() <= 1e-12 * j);
        assert!(rep.j_hat_z >= 0.0 && rep.j_tilde_z >= 0.0 && rep.j_tilde_x >= 0.0);
    }

    #[test]
    fn unstable_loop_is_reported() {
        let mut inst = scalar_plant();
        inst.system.a[(0, 0)] = 1.5;
        let model = closed_loop(&inst, &zero_controller(&inst.dims())).unwrap();
        assert!(matches!(analytic_cost(&model, 1e-12), Err(Error::Unstable { .. })));
    }

    #[test]
    fn simulation_is_deterministic_in_seed() {
        let inst = seed7();
        let syn = synthesize(&inst, &SynthesisOptions::default()).unwrap();
        let a = simulate(&inst, &syn.realization, 5_000, 3).unwrap();
        let b = simulate(&inst, &syn.realization, 5_000, 3).unwrap();
        let c = simulate(&inst, &syn.realization, 5_000, 4).unwrap();
        assert_eq!(a.empirical_cost.to_bits(), b.empirical_cost.to_bits());
        assert_eq!(a, b);
        assert_ne!(a.empirical_cost, c.empirical_cost);
        let s1 = simulate_sharded(&inst, &syn.realization, 5_000, 3, 3).unwrap();
        let s2 = simulate_sharded(&inst, &syn.realization, 5_000, 3, 3).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.steps, 5_000);
    }

    #[test]
    fn simulation_matches_pure_noise_cost() {
        let inst = scalar_plant();
        let sim = simulate_sharded(&inst, &zero_controller(&inst.dims()), 200_000, 9, 4).unwrap();
        assert!((sim.empirical_cost - 1.0).abs() < 0.02, "{}", sim.empirical_cost);
        assert!((sim.summary.cov_x[0][0] - 1.0).abs() < 0.02);
    }

    #[test]
    fn singular_noise_uses_jitter_and_indefinite_noise_fails() {
        let mut cov = DMatrix::zeros(2, 2);
        cov[(0, 0)] = 1.0;
        let f = noise_factor(&cov).unwrap();
        assert!((&f * f.transpose() - &cov).abs().max() < 1e-11);
        cov[(1, 1)] = -1.0;
        assert!(matches!(noise_factor(&cov), Err(Error::NoiseModel(_))));
    }

    #[test]
    fn bad_step_and_shard_counts_are_rejected() {
        let inst = seed7();
        let r = zero_controller(&inst.dims());
        assert!(simulate(&inst, &r, 0, 1).is_err());
        assert!(simulate_sharded(&inst, &r, 10, 1, 0).is_err());
        assert!(simulate_sharded(&inst, &r, 10, 1, 11).is_err());
    }
}
