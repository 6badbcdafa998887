//! Second-layer estimation noise and the coupled Riccati pair.
//!
//! The centralized predictor `z` (gain `K`) is driven by `ω = K(Cx̃ + v)`
//! and observed by controller 1 through `y1 = C1 z + ν`, `ν = C1x̃ + v1`.
//! [`ScriptNoise`] is the joint covariance of `(ω, ν)`.
//!
//! The pair `(P1, K1)` / `(Π2, L2)` is found by alternating two standard
//! DAREs: the estimation DARE on `(A − B2·L2, C1, 𝒲, 𝒰, 𝒱)` for fixed `L2`,
//! then the control DARE on `(A − K1·C1, B2, Q, S2, R22)` for fixed `K1`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, symmetrize};
use crate::problem::{CostModel, NoiseModel, PartitionedSystem};
use crate::riccati::{self, RiccatiOptions};

/// Joint covariance `[[𝒲, 𝒰], [𝒰ᵀ, 𝒱]]` of `(ω, ν)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptNoise {
    /// `𝒲` (`n × n`).
    pub w: DMatrix<f64>,
    /// `𝒰` (`n × p1`).
    pub u: DMatrix<f64>,
    /// `𝒱` (`p1 × p1`).
    pub v: DMatrix<f64>,
}

impl ScriptNoise {
    pub fn joint(&self) -> DMatrix<f64> {
        let ut = self.u.transpose();
        linalg::block(&[&[&self.w, &self.u], &[&ut, &self.v]])
    }
}

/// `𝒲 = K(CPCᵀ+V)Kᵀ`, `𝒰 = K(CPC1ᵀ + V1)`, `𝒱 = C1PC1ᵀ + V11`.
pub fn build_script_noise(
    p: &DMatrix<f64>,
    k: &DMatrix<f64>,
    system: &PartitionedSystem,
    noise: &NoiseModel,
) -> Result<ScriptNoise> {
    let d = system.dims;
    let (n, pd) = (d.n(), d.p());
    if p.shape() != (n, n) {
        return Err(Error::dim("P", (n, n), p.shape()));
    }
    if k.shape() != (n, pd) {
        return Err(Error::dim("K", (n, pd), k.shape()));
    }
    let c = &system.c;
    let c1 = system.c1();
    let innovation = symmetrize(&(c * p * c.transpose() + &noise.v));
    Ok(ScriptNoise {
        w: symmetrize(&(k * &innovation * k.transpose())),
        u: k * (c * p * c1.transpose() + noise.v1(&d)),
        v: symmetrize(&(&c1 * p * c1.transpose() + noise.v11(&d))),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoupledOptions {
    /// Relative gain-step tolerance; also the certification bound on residuals.
    pub tol: f64,
    /// Maximum outer (Gauss–Seidel) iterations.
    pub max_iter: usize,
    /// `L2 ← (1 − d)·L2_prev + d·L2_new`, `d ∈ (0, 1]`.
    pub damping: f64,
    /// Options for the inner DARE solves.
    pub dare: RiccatiOptions,
}

impl Default for CoupledOptions {
    fn default() -> Self {
        CoupledOptions {
            tol: 1e-9,
            max_iter: 200,
            damping: 1.0,
            dare: RiccatiOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledSolution {
    pub p1: DMatrix<f64>,
    pub pi2: DMatrix<f64>,
    /// `K1` (`n × p1`).
    pub k1: DMatrix<f64>,
    /// `L2` (`m2 × n`).
    pub l2: DMatrix<f64>,
    pub iterations: usize,
    pub final_step_size: f64,
    pub step_history: Vec<f64>,
    /// `ρ(A − K1·C1 − B2·L2)`.
    pub radius_est: f64,
    pub residual_p1: f64,
    pub residual_pi2: f64,
    /// Starting point the iteration converged from.
    pub initial_guess: InitialGuess,
}

/// Starting `L2` of the iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialGuess {
    /// The warm start supplied by the caller (normally the last `m2` rows of `L`).
    WarmStart,
    Zero,
    /// `[0 | L22]` with `L22` the LQR gain of subsystem 2 alone.
    Subsystem,
    /// An explicit `L2` passed to [`solve_coupled_from`].
    Explicit,
}

/// Substitution residuals of the coupled pair for the given matrices and gains.
///
/// Returns `(r1, r2)`, the relative residuals of the `P1` and `Π2` equations,
/// with `K1` and `L2` taken as given rather than recomputed.
pub fn coupled_residuals(
    system: &PartitionedSystem,
    cost: &CostModel,
    script: &ScriptNoise,
    p1: &DMatrix<f64>,
    pi2: &DMatrix<f64>,
    k1: &DMatrix<f64>,
    l2: &DMatrix<f64>,
) -> (f64, f64) {
    let d = system.dims;
    let (c1, b2) = (system.c1(), system.b2());
    let a_est = &system.a - &b2 * l2;
    let rhs_p1 = riccati::estimation_rhs(&a_est, &c1, &script.w, &script.u, &script.v, p1, k1);
    let a_ctl = &system.a - k1 * &c1;
    let rhs_pi2 = riccati::control_rhs(&a_ctl, &b2, &cost.q, &cost.s2(&d), &cost.r22(&d), pi2, l2);
    (
        linalg::relative_difference(&rhs_p1, p1),
        linalg::relative_difference(&rhs_pi2, pi2),
    )
}

/// Gains recomputed from `(P1, Π2)`: `K1` from `(P1, L2)` and `L2` from `(Π2, K1)`.
pub fn coupled_gains(
    system: &PartitionedSystem,
    cost: &CostModel,
    script: &ScriptNoise,
    p1: &DMatrix<f64>,
    pi2: &DMatrix<f64>,
    k1: &DMatrix<f64>,
    l2: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = system.dims;
    let (c1, b2) = (system.c1(), system.b2());
    let a_est = &system.a - &b2 * l2;
    let k1_new = riccati::estimation_gain(&a_est, &c1, &script.u, &script.v, p1)?;
    let a_ctl = &system.a - k1 * &c1;
    let l2_new = riccati::control_gain(&a_ctl, &b2, &cost.s2(&d), &cost.r22(&d), pi2)?;
    Ok((k1_new, l2_new))
}

/// Solves the coupled pair, warm-started from the last `m2` rows of the
/// centralized control gain.
pub fn solve_coupled(
    system: &PartitionedSystem,
    cost: &CostModel,
    script: &ScriptNoise,
    opts: CoupledOptions,
) -> Result<CoupledSolution> {
    let central = riccati::solve_control_dare(&system.a, &system.b, &cost.q, &cost.s, &cost.r, opts.dare)?;
    let d = system.dims;
    let warm = central.gain.rows(d.m1, d.m2).into_owned();
    solve_coupled_warm(system, cost, script, &warm, opts)
}

/// Runs the iteration from `warm`, then from `L2 = 0`, then from the
/// subsystem-2 LQR gain, moving on only when the first iteration fails.
///
/// `(A − B2·L2, C1)` is detectable only if `A22 − B22·L2[:, n1..]` is stable,
/// which a centralized warm start does not guarantee.
pub fn solve_coupled_warm(
    system: &PartitionedSystem,
    cost: &CostModel,
    script: &ScriptNoise,
    warm: &DMatrix<f64>,
    opts: CoupledOptions,
) -> Result<CoupledSolution> {
    let mut first_err = None;
    for (guess, l2) in initial_guesses(system, cost, warm, opts.dare) {
        match solve_coupled_from(system, cost, script, &l2, opts) {
            Ok(mut sol) => {
                sol.initial_guess = guess;
                return Ok(sol);
            }
            Err(e) => {
                let retry = matches!(e, Error::CoupledStage { iteration: 1, .. });
                first_err.get_or_insert(e);
                if !retry {
                    break;
                }
            }
        }
    }
    Err(first_err.expect("at least one initial guess"))
}

fn initial_guesses(
    system: &PartitionedSystem,
    cost: &CostModel,
    warm: &DMatrix<f64>,
    dare: RiccatiOptions,
) -> Vec<(InitialGuess, DMatrix<f64>)> {
    let d = system.dims;
    let zero = DMatrix::zeros(d.m2, d.n());
    let mut out = vec![(InitialGuess::WarmStart, warm.clone()), (InitialGuess::Zero, zero.clone())];
    let sub = |m: &DMatrix<f64>, r0, nr, c0, nc| m.view((r0, c0), (nr, nc)).into_owned();
    let lqr = riccati::solve_control_dare(
        &sub(&system.a, d.n1, d.n2, d.n1, d.n2),
        &sub(&system.b, d.n1, d.n2, d.m1, d.m2),
        &sub(&cost.q, d.n1, d.n2, d.n1, d.n2),
        &sub(&cost.s, d.n1, d.n2, d.m1, d.m2),
        &sub(&cost.r, d.m1, d.m2, d.m1, d.m2),
        dare,
    );
    if let Ok(lqr) = lqr {
        let mut l2 = zero;
        l2.view_mut((0, d.n1), (d.m2, d.n2)).copy_from(&lqr.gain);
        out.push((InitialGuess::Subsystem, l2));
    }
    out
}

struct Iterate {
    k1: DMatrix<f64>,
    pi2: DMatrix<f64>,
    l2: DMatrix<f64>,
}

/// Gauss–Seidel iteration from an explicit initial `L2`.
pub fn solve_coupled_from(
    system: &PartitionedSystem,
    cost: &CostModel,
    script: &ScriptNoise,
    l2_init: &DMatrix<f64>,
    opts: CoupledOptions,
) -> Result<CoupledSolution> {
    let d = system.dims;
    let n = d.n();
    if l2_init.shape() != (d.m2, n) {
        return Err(Error::dim("L2", (d.m2, n), l2_init.shape()));
    }
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "damping must lie in (0, 1], got {}",
            opts.damping
        )));
    }
    let (c1, b2) = (system.c1(), system.b2());
    let (s2, r22) = (cost.s2(&d), cost.r22(&d));

    let half_steps = |l2: &DMatrix<f64>, iteration: usize| -> Result<Iterate> {
        let stage = |e: Error| Error::CoupledStage {
            iteration,
            source: Box::new(e),
        };
        let a_est = &system.a - &b2 * l2;
        let est = riccati::solve_estimation_dare(&a_est, &c1, &script.w, &script.u, &script.v, opts.dare)
            .map_err(stage)?;
        let a_ctl = &system.a - &est.gain * &c1;
        let ctl = riccati::solve_control_dare(&a_ctl, &b2, &cost.q, &s2, &r22, opts.dare).map_err(stage)?;
        Ok(Iterate {
            k1: est.gain,
            pi2: ctl.pi,
            l2: ctl.gain,
        })
    };

    let mut l2 = l2_init.clone();
    let mut k1_prev: Option<DMatrix<f64>> = None;
    let mut history = Vec::new();
    let mut converged_at = None;
    let mut current = None;
    // After the step tolerance is met, keep iterating while the step still
    // shrinks so the returned pair is consistent to near machine precision.
    let polish_limit = 20;
    let mut iteration = 0;
    loop {
        iteration += 1;
        if converged_at.is_none() && iteration > opts.max_iter {
            break;
        }
        let it = half_steps(&l2, iteration)?;
        let l2_next = &l2 * (1.0 - opts.damping) + &it.l2 * opts.damping;
        let scale = it.k1.norm().max(l2_next.norm()).max(1.0);
        let dk = k1_prev.as_ref().map_or(f64::INFINITY, |k| (&it.k1 - k).norm());
        let step = dk.max((&l2_next - &l2).norm()) / scale;
        history.push(step);
        k1_prev = Some(it.k1.clone());
        l2 = l2_next;
        current = Some(it);

        if converged_at.is_none() && step <= opts.tol {
            converged_at = Some(iteration);
        }
        if let Some(at) = converged_at {
            let stalled = iteration > at && step > 0.9 * history[history.len() - 2];
            if step <= opts.tol * 1e-4 || stalled || iteration - at >= polish_limit {
                break;
            }
        }
    }

    if converged_at.is_none() {
        return Err(Error::CoupledNotConverged {
            iterations: history.len(),
            last_step: history.last().copied().unwrap_or(f64::INFINITY),
            step_history: history,
        });
    }
    let Iterate { pi2, l2, .. } = current.expect("at least one iteration ran");
    // Final estimation half-step against the undamped L2, so (P1, K1) solve
    // their equation for exactly that L2.
    let a_est = &system.a - &b2 * &l2;
    let est = riccati::solve_estimation_dare(&a_est, &c1, &script.w, &script.u, &script.v, opts.dare).map_err(
        |e| Error::CoupledStage {
            iteration: iteration + 1,
            source: Box::new(e),
        },
    )?;
    let (p1, k1) = (est.p, est.gain);

    let (residual_p1, residual_pi2) = coupled_residuals(system, cost, script, &p1, &pi2, &k1, &l2);
    for (what, residual) in [("P1 equation", residual_p1), ("Π2 equation", residual_pi2)] {
        if !(residual <= opts.tol) {
            return Err(Error::Certification {
                what: what.into(),
                residual,
                tolerance: opts.tol,
            });
        }
    }
    let radius_est = riccati::spectral_radius(&(&system.a - &k1 * &c1 - &b2 * &l2));
    if !(radius_est < 1.0) {
        return Err(Error::Unstable {
            what: "A − K1·C1 − B2·L2".into(),
            radius: radius_est,
        });
    }
    Ok(CoupledSolution {
        p1,
        pi2,
        k1,
        l2,
        iterations: history.len(),
        final_step_size: *history.last().unwrap(),
        step_history: history,
        radius_est,
        residual_p1,
        residual_pi2,
        initial_guess: InitialGuess::Explicit,
    })
}
