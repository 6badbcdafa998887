//! Reference controllers and the finite-horizon structured oracle.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::coupled;
use crate::error::{Error, Result};
use crate::evaluation::realization_cost;
use crate::linalg;
use crate::problem::ProblemInstance;
use crate::riccati::{self, RiccatiOptions};
use crate::synthesis::{
    assemble_from_gains, synthesize, ControllerLayout, ControllerRealization, StateBlock, Synthesis,
    SynthesisOptions,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    pub realization: ControllerRealization,
    pub cost: f64,
}

/// Centralized LQG with one-step-delayed output feedback: `x̂⁺ = (A − KC − BL)·x̂ + K·y`, `u = −L·x̂`.
pub fn centralized_lqg(instance: &ProblemInstance, opts: RiccatiOptions) -> Result<Baseline> {
    let (sys, nz, cost) = (&instance.system, &instance.noise, &instance.cost);
    let d = sys.dims;
    let est = riccati::solve_estimation_dare(&sys.a, &sys.c, &nz.w, &nz.u, &nz.v, opts)?;
    let ctl = riccati::solve_control_dare(&sys.a, &sys.b, &cost.q, &cost.s, &cost.r, opts)?;
    let f = &sys.a - &est.gain * &sys.c - &sys.b * &ctl.gain;
    let layout = ControllerLayout::new(
        &d,
        vec![StateBlock {
            name: "xhat".into(),
            range: 0..d.n(),
        }],
    );
    let realization = ControllerRealization::new(f, est.gain, -ctl.gain, layout)?;
    let cost = realization_cost(instance, &realization)?;
    Ok(Baseline { realization, cost })
}

/// Both inputs driven by `ẑ` alone: `u = −L·ẑ`, with `K1` from the estimation
/// DARE on `(A, C1)` under the script noise.
pub fn common_info_controller(instance: &ProblemInstance, opts: RiccatiOptions) -> Result<Baseline> {
    let (sys, nz, cost) = (&instance.system, &instance.noise, &instance.cost);
    let d = sys.dims;
    let est = riccati::solve_estimation_dare(&sys.a, &sys.c, &nz.w, &nz.u, &nz.v, opts)?;
    let ctl = riccati::solve_control_dare(&sys.a, &sys.b, &cost.q, &cost.s, &cost.r, opts)?;
    let script = coupled::build_script_noise(&est.p, &est.gain, sys, nz)?;
    let l2 = DMatrix::zeros(d.m2, d.n());
    let a_est = &sys.a - sys.b2() * &l2;
    let first = riccati::solve_estimation_dare(&a_est, &sys.c1(), &script.w, &script.u, &script.v, opts)?;
    let realization = assemble_from_gains(sys, &est.gain, &ctl.gain, &first.gain, &l2)?;
    let cost = realization_cost(instance, &realization)?;
    Ok(Baseline { realization, cost })
}

// ---------------------------------------------------------------------------
// Finite-horizon oracle

/// Largest `n·M` accepted by the dense oracle.
pub const ORACLE_SIZE_LIMIT: usize = 4000;
const ORACLE_RIDGE: f64 = 1e-10;

/// Expected `M`-step average cost of linear policies `u(t) = Σ_{s<t} Θ[t,s]·ỹ(s)`
/// over purified outputs `ỹ`, from `x(0) = 0`.
///
/// Rows of `Θ` are indexed by `(t, i)` for input `i` at time `t`, columns by
/// `(s, j)`. Entries with `s ≥ t`, and entries from `y2` into `u1`, are fixed
/// at zero. The average cost is `(c0 + 2⟨G, Θ⟩ + ⟨Θ, H·Θ·Σy⟩) / M`.
#[derive(Debug, Clone)]
pub struct FiniteHorizonProblem {
    pub horizon: usize,
    m1: usize,
    p1: usize,
    m: usize,
    p: usize,
    h: DMatrix<f64>,
    g: DMatrix<f64>,
    sigma_y: DMatrix<f64>,
    c0: f64,
    mask: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub horizon: usize,
    pub j_oracle: f64,
    pub iterations: usize,
    pub relative_residual: f64,
    pub free_entries: usize,
    /// Whether a `1e-10` ridge was needed to factor the preconditioner.
    pub regularized: bool,
    pub max_abs_theta: f64,
}

#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub theta: DMatrix<f64>,
    pub summary: OracleSummary,
}

struct Group {
    rows: Vec<usize>,
    cols: Vec<usize>,
    r: DMatrix<f64>,
    ls: DMatrix<f64>,
    mask: DMatrix<f64>,
}

impl FiniteHorizonProblem {
    pub fn new(instance: &ProblemInstance, horizon: usize) -> Result<Self> {
        let d = instance.dims();
        instance.check_shapes()?;
        let (n, m, p) = (d.n(), d.m(), d.p());
        if horizon < 2 {
            return Err(Error::InvalidArgument(format!("horizon must be ≥ 2, got {horizon}")));
        }
        if n * horizon > ORACLE_SIZE_LIMIT {
            return Err(Error::TooLarge {
                size: n * horizon,
                limit: ORACLE_SIZE_LIMIT,
            });
        }
        let (sys, nz, cost) = (&instance.system, &instance.noise, &instance.cost);
        let big = |x: &DMatrix<f64>| DMatrix::<f64>::identity(horizon, horizon).kronecker(x);

        // x(t) = Σ_{k<t} A^{t−1−k}·(w(k) + B·u(k))
        let mut powers = vec![DMatrix::<f64>::identity(n, n)];
        for k in 1..horizon {
            powers.push(&sys.a * &powers[k - 1]);
        }
        let mut gx = DMatrix::zeros(horizon * n, horizon * n);
        for t in 0..horizon {
            for k in 0..t {
                gx.view_mut((t * n, k * n), (n, n)).copy_from(&powers[t - 1 - k]);
            }
        }
        let bb = &gx * big(&sys.b);
        let cb = big(&sys.c);
        let gxu = &gx * big(&nz.u);
        let sigma_x0 = &gx * big(&nz.w) * gx.transpose();
        let sigma_xy = &sigma_x0 * cb.transpose() + &gxu;
        let cgu = &cb * &gxu;
        let sigma_y = linalg::symmetrize(&(&cb * &sigma_x0 * cb.transpose() + &cgu + cgu.transpose() + big(&nz.v)));

        let (qb, sb, rb) = (big(&cost.q), big(&cost.s), big(&cost.r));
        let bt_sb = bb.transpose() * &sb;
        let h = linalg::symmetrize(&(bb.transpose() * &qb * &bb + &bt_sb + bt_sb.transpose() + rb));
        let g = (bb.transpose() * &qb + sb.transpose()) * sigma_xy;
        let c0 = (&qb * &sigma_x0).trace();

        let mask = DMatrix::from_fn(horizon * m, horizon * p, |r, c| {
            let (t, i) = (r / m, r % m);
            let (s, j) = (c / p, c % p);
            if s < t && (i >= d.m1 || j < d.p1) {
                1.0
            } else {
                0.0
            }
        });
        Ok(FiniteHorizonProblem {
            horizon,
            m1: d.m1,
            p1: d.p1,
            m,
            p,
            h,
            g,
            sigma_y,
            c0,
            mask,
        })
    }

    /// 0/1 pattern of the free entries of `Θ`.
    pub fn mask(&self) -> &DMatrix<f64> {
        &self.mask
    }

    pub fn free_entries(&self) -> usize {
        self.mask.iter().filter(|&&v| v != 0.0).count()
    }

    /// Average cost of the policy `Θ` (masked entries are ignored).
    pub fn cost(&self, theta: &DMatrix<f64>) -> f64 {
        let th = theta.component_mul(&self.mask);
        let quad = (th.transpose() * &self.h * &th * &self.sigma_y).trace();
        (self.c0 + 2.0 * self.g.dot(&th) + quad) / self.horizon as f64
    }

    /// Exact change in average cost when entry `(i, j)` of `Θ` moves by `delta`.
    pub fn cost_change(&self, theta: &DMatrix<f64>, i: usize, j: usize, delta: f64) -> f64 {
        let th = theta.component_mul(&self.mask);
        let lin = self.g[(i, j)] + self.h.row(i).dot(&(&th * self.sigma_y.column(j)).transpose());
        (2.0 * delta * lin + delta * delta * self.h[(i, i)] * self.sigma_y[(j, j)]) / self.horizon as f64
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        (&self.h * x * &self.sigma_y).component_mul(&self.mask)
    }

    fn groups(&self) -> Result<(Vec<Group>, bool)> {
        let (m, p, m1, p1) = (self.m, self.p, self.m1, self.p1);
        let total_rows = self.horizon * m;
        let total_cols = self.horizon * p;
        let rows1: Vec<usize> = (0..total_rows).filter(|r| r % m < m1).collect();
        let cols1: Vec<usize> = (0..total_cols).filter(|c| c % p < p1).collect();
        let rows2: Vec<usize> = (0..total_rows).filter(|r| r % m >= m1).collect();
        let cols2: Vec<usize> = (0..total_cols).collect();
        let mut regularized = false;
        let mut groups = Vec::new();
        for (rows, cols) in [(rows1, cols1), (rows2, cols2)] {
            let hg = self.h.select_rows(&rows).select_columns(&rows);
            let sg = self.sigma_y.select_rows(&cols).select_columns(&cols);
            let (r, reg_h) = reversed_cholesky(&hg)?;
            let (ls, reg_s) = cholesky_with_ridge(&sg, "Σy")?;
            regularized |= reg_h || reg_s;
            let mask = self.mask.select_rows(&rows).select_columns(&cols);
            groups.push(Group {
                rows,
                cols,
                r,
                ls,
                mask,
            });
        }
        Ok((groups, regularized))
    }

    fn precondition(&self, groups: &[Group], res: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(res.nrows(), res.ncols());
        for grp in groups {
            let block = res.select_rows(&grp.rows).select_columns(&grp.cols);
            // Exact solve of mask(Rᵀ·R·X·Ls·Lsᵀ) = block on the staircase pattern.
            let t = grp.r.tr_solve_lower_triangular(&block).expect("nonsingular factor");
            let t = grp.ls.solve_lower_triangular(&t.transpose()).expect("nonsingular factor").transpose();
            let t = t.component_mul(&grp.mask);
            let t = grp.r.solve_lower_triangular(&t).expect("nonsingular factor");
            let t = grp.ls.tr_solve_lower_triangular(&t.transpose()).expect("nonsingular factor").transpose();
            for (a, &r) in grp.rows.iter().enumerate() {
                for (b, &c) in grp.cols.iter().enumerate() {
                    z[(r, c)] = t[(a, b)];
                }
            }
        }
        z
    }

    /// Minimizes the average cost by preconditioned conjugate gradients on the
    /// masked normal equations `mask(H·Θ·Σy) = −mask(G)`.
    pub fn solve(&self) -> Result<OracleSolution> {
        const MAX_ITER: usize = 5000;
        const REL_TOL: f64 = 1e-13;
        let (groups, regularized) = self.groups()?;
        let mut x = DMatrix::zeros(self.g.nrows(), self.g.ncols());
        let mut r = -self.g.component_mul(&self.mask);
        let r0 = r.norm();
        let mut z = self.precondition(&groups, &r);
        let mut d = z.clone();
        let mut rz = r.dot(&z);
        let mut iterations = 0;
        let mut rel = if r0 > 0.0 { 1.0 } else { 0.0 };
        while rel > REL_TOL {
            if iterations == MAX_ITER {
                return Err(Error::NotConverged {
                    solver: "finite-horizon oracle",
                    iterations,
                    residual: rel,
                });
            }
            iterations += 1;
            let ad = self.apply(&d);
            let alpha = rz / d.dot(&ad);
            x += &d * alpha;
            r -= &ad * alpha;
            rel = r.norm() / r0;
            if rel <= REL_TOL {
                break;
            }
            z = self.precondition(&groups, &r);
            let rz_next = r.dot(&z);
            d = &z + &d * (rz_next / rz);
            rz = rz_next;
        }
        let j_oracle = self.cost(&x);
        Ok(OracleSolution {
            summary: OracleSummary {
                horizon: self.horizon,
                j_oracle,
                iterations,
                relative_residual: rel,
                free_entries: self.free_entries(),
                regularized,
                max_abs_theta: linalg::max_abs(&x),
            },
            theta: x,
        })
    }
}

fn cholesky_with_ridge(a: &DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, bool)> {
    if let Some(c) = a.clone().cholesky() {
        return Ok((c.l(), false));
    }
    let ridged = a + DMatrix::identity(a.nrows(), a.ncols()) * ORACLE_RIDGE;
    match ridged.cholesky() {
        Some(c) => Ok((c.l(), true)),
        None => Err(Error::Definiteness {
            what: what.to_string(),
            min_eigenvalue: linalg::min_eigenvalue(a),
        }),
    }
}

/// Lower-triangular `R` with `a = Rᵀ·R`.
fn reversed_cholesky(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    let k = a.nrows();
    let flip = |x: &DMatrix<f64>| DMatrix::from_fn(k, k, |i, j| x[(k - 1 - i, k - 1 - j)]);
    let (l, reg) = cholesky_with_ridge(&flip(a), "H")?;
    Ok((flip(&l.transpose()), reg))
}

pub fn finite_horizon_oracle(instance: &ProblemInstance, horizon: usize) -> Result<OracleSolution> {
    FiniteHorizonProblem::new(instance, horizon)?.solve()
}

// ---------------------------------------------------------------------------
// Comparison

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaps {
    /// `(J_distributed − J_central) / J_distributed`.
    pub central: f64,
    /// `(J_common_info − J_distributed) / J_distributed`.
    pub common_info: f64,
    /// `(J_distributed − J_oracle) / J_distributed`.
    pub oracle: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub j_central: f64,
    pub j_distributed: f64,
    pub j_common_info: f64,
    pub j_oracle: Option<f64>,
    pub horizon: Option<usize>,
    pub sandwich_ok: bool,
    /// Absolute slack used by the sandwich check, `1e-9·max(1, J_distributed)`.
    pub slack: f64,
    pub gaps: Gaps,
    pub oracle: Option<OracleSummary>,
    pub options: SynthesisOptions,
}

pub const SANDWICH_RELATIVE_SLACK: f64 = 1e-9;

/// Whether `J_central ≤ J_distributed ≤ J_common_info` within the slack.
pub fn sandwich_holds(j_central: f64, j_distributed: f64, j_common_info: f64) -> bool {
    let eps = SANDWICH_RELATIVE_SLACK * j_distributed.max(1.0);
    j_central <= j_distributed + eps && j_distributed <= j_common_info + eps
}

/// Runs the synthesized controller against both baselines and, when a
/// horizon is given, the finite-horizon oracle.
pub fn compare(instance: &ProblemInstance, horizon: Option<usize>, opts: &SynthesisOptions) -> Result<ComparisonReport> {
    let syn: Synthesis = synthesize(instance, opts)?;
    let j_distributed = realization_cost(instance, &syn.realization).map_err(|e| e.at_stage("evaluation"))?;
    let central = centralized_lqg(instance, opts.dare).map_err(|e| e.at_stage("centralized"))?;
    let common = common_info_controller(instance, opts.dare).map_err(|e| e.at_stage("common_info"))?;
    let oracle = horizon
        .map(|m| finite_horizon_oracle(instance, m).map_err(|e| e.at_stage("oracle")))
        .transpose()?
        .map(|s| s.summary);
    let j_oracle = oracle.as_ref().map(|s| s.j_oracle);
    let rel = |x: f64| x / j_distributed;
    Ok(ComparisonReport {
        j_central: central.cost,
        j_distributed,
        j_common_info: common.cost,
        j_oracle,
        horizon,
        sandwich_ok: sandwich_holds(central.cost, j_distributed, common.cost),
        slack: SANDWICH_RELATIVE_SLACK * j_distributed.max(1.0),
        gaps: Gaps {
            central: rel(j_distributed - central.cost),
            common_info: rel(common.cost - j_distributed),
            oracle: j_oracle.map(|j| rel(j_distributed - j)),
        },
        oracle,
        options: *opts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{random_decoupled_instance, random_instance, BlockDims, CostModel, NoiseModel, PartitionedSystem};

    fn seed7() -> ProblemInstance {
        random_instance(7, BlockDims::scalar(), 0.9).unwrap()
    }

    fn prediction_free() -> ProblemInstance {
        let d = BlockDims::scalar();
        let sys = PartitionedSystem::new(
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            d,
        )
        .unwrap();
        let noise = NoiseModel {
            w: DMatrix::identity(2, 2),
            u: DMatrix::zeros(2, 2),
            v: DMatrix::identity(2, 2),
        };
        let cost = CostModel {
            q: DMatrix::identity(2, 2),
            s: DMatrix::zeros(2, 2),
            r: DMatrix::identity(2, 2),
        };
        ProblemInstance::new(sys, noise, cost).unwrap()
    }

    #[test]
    fn centralized_realization_has_kalman_form() {
        let inst = seed7();
        let base = centralized_lqg(&inst, RiccatiOptions::default()).unwrap();
        assert_eq!(base.realization.q(), 2);
        assert!(base.cost > 0.0);
        let quiet = inst.with_noise_scaled(0.0);
        assert_eq!(realization_cost(&quiet, &base.realization).unwrap(), 0.0);
    }

    #[test]
    fn seed7_sandwich() {
        let inst = seed7();
        let rep = compare(&inst, None, &SynthesisOptions::default()).unwrap();
        assert!(rep.sandwich_ok, "{rep:?}");
        assert!(rep.j_central <= rep.j_distributed);
    }

    #[test]
    fn zero_l2_makes_common_info_identical() {
        let mut inst = random_instance(4, BlockDims::new(2, 1, 1, 1, 1, 1), 0.8).unwrap();
        inst.system.b.view_mut((0, 1), (3, 1)).fill(0.0);
        inst.cost.s.fill(0.0);
        let syn = synthesize(&inst, &SynthesisOptions::default()).unwrap();
        assert!(syn.gains.l2.iter().all(|&v| v == 0.0));
        let common = common_info_controller(&inst, RiccatiOptions::default()).unwrap();
        assert_eq!(common.realization, syn.realization);
        assert_eq!(common.cost, realization_cost(&inst, &syn.realization).unwrap());
    }

    #[test]
    fn decoupled_instance_has_no_information_penalty() {
        let inst = random_decoupled_instance(11, BlockDims::new(2, 2, 1, 1, 1, 1), 0.8).unwrap();
        let rep = compare(&inst, None, &SynthesisOptions::default()).unwrap();
        assert!(rep.gaps.central.abs() <= 1e-8, "{rep:?}");
        // u2 still needs y2, which the common-information law discards.
        assert!(rep.gaps.common_info > 1e-3, "{rep:?}");
    }

    #[test]
    fn prediction_free_oracle_is_zero_policy() {
        let inst = prediction_free();
        for horizon in [2, 5] {
            let sol = finite_horizon_oracle(&inst, horizon).unwrap();
            let expected = 2.0 * (horizon as f64 - 1.0) / horizon as f64;
            assert!((sol.summary.j_oracle - expected).abs() < 1e-12, "{:?}", sol.summary);
            assert!(sol.summary.max_abs_theta < 1e-12);
        }
    }

    #[test]
    fn masked_entries_stay_exactly_zero() {
        let inst = random_instance(2, BlockDims::new(1, 2, 1, 1, 1, 2), 0.8).unwrap();
        let prob = FiniteHorizonProblem::new(&inst, 12).unwrap();
        let sol = prob.solve().unwrap();
        for (t, mk) in sol.theta.iter().zip(prob.mask().iter()) {
            if *mk == 0.0 {
                assert_eq!(*t, 0.0);
            }
        }
        assert!(sol.theta.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn oracle_optimum_is_stationary() {
        let inst = seed7();
        let prob = FiniteHorizonProblem::new(&inst, 20).unwrap();
        let sol = prob.solve().unwrap();
        let j0 = prob.cost(&sol.theta);
        let free: Vec<(usize, usize)> = (0..sol.theta.nrows())
            .flat_map(|i| (0..sol.theta.ncols()).map(move |j| (i, j)))
            .filter(|&(i, j)| prob.mask()[(i, j)] != 0.0)
            .collect();
        for &(i, j) in free.iter().step_by(7) {
            for delta in [1e-4, -1e-4] {
                assert!(prob.cost_change(&sol.theta, i, j, delta) >= 0.0);
                let mut moved = sol.theta.clone();
                moved[(i, j)] += delta;
                let direct = prob.cost(&moved) - j0;
                assert!((direct - prob.cost_change(&sol.theta, i, j, delta)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn oracle_rejects_large_and_short_horizons() {
        let inst = seed7();
        assert!(matches!(
            finite_horizon_oracle(&inst, 2001),
            Err(Error::TooLarge { size: 4002, limit: 4000 })
        ));
        assert!(matches!(finite_horizon_oracle(&inst, 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn oracle_stays_below_distributed_cost() {
        let inst = seed7();
        let rep = compare(&inst, Some(50), &SynthesisOptions::default()).unwrap();
        assert!(rep.j_oracle.unwrap() <= rep.j_distributed, "{rep:?}");
        assert!(rep.oracle.as_ref().unwrap().relative_residual <= 1e-13);
    }
}
