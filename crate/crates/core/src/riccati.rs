//! Discrete algebraic Riccati equations in the two forms used by the
//! synthesis, plus the discrete Lyapunov solver and spectral radius.
//!
//! Control form (gain `L`, `u = −Lx`):
//!
//! ```text
//! Π = (A − BL)ᵀ Π (A − BL) + Q − LᵀSᵀ − SL + LᵀRL
//! L = (BᵀΠB + R)⁻¹ (AᵀΠB + S)ᵀ
//! ```
//!
//! Estimation form (predictor gain `K`):
//!
//! ```text
//! P = (A − KC) P (A − KC)ᵀ + W − KUᵀ − UKᵀ + KVKᵀ
//! K = (APCᵀ + U)(CPCᵀ + V)⁻¹
//! ```
//!
//! The estimation form is the control form applied to `(Aᵀ, Cᵀ, W, U, V)`
//! with `K = Lᵀ`, and is solved that way.
//!
//! Solutions come from the structure-preserving doubling algorithm, polished
//! with Newton (Hewer) steps, and are certified by substitution residual and
//! closed-loop spectral radius before being returned.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, symmetrize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiccatiOptions {
    /// Bound on `‖Π − rhs(Π)‖_F / max(1, ‖Π‖_F)`.
    pub tol: f64,
    /// Iteration cap for the fallback fixed-point iteration.
    pub max_iter: usize,
}

impl Default for RiccatiOptions {
    fn default() -> Self {
        RiccatiOptions {
            tol: 1e-10,
            max_iter: 10_000,
        }
    }
}

pub const DEFAULT_LYAPUNOV_TOL: f64 = 1e-11;

#[derive(Debug, Clone, PartialEq)]
pub struct ControlDareSolution {
    pub pi: DMatrix<f64>,
    /// `L` (`m × n`).
    pub gain: DMatrix<f64>,
    /// `ρ(A − BL)`.
    pub closed_loop_radius: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationDareSolution {
    pub p: DMatrix<f64>,
    /// `K` (`n × p`).
    pub gain: DMatrix<f64>,
    /// `ρ(A − KC)`.
    pub closed_loop_radius: f64,
    pub residual: f64,
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    linalg::eigenvalues(a)
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max)
}

/// `L = (BᵀΠB + R)⁻¹ (AᵀΠB + S)ᵀ`.
pub fn control_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    s: &DMatrix<f64>,
    r: &DMatrix<f64>,
    pi: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let pb = pi * b;
    let lhs = symmetrize(&(b.transpose() * &pb + r));
    let rhs = (a.transpose() * &pb + s).transpose();
    linalg::solve_spd(&lhs, &rhs, "BᵀΠB + R")
}

/// `K = (APCᵀ + U)(CPCᵀ + V)⁻¹`.
pub fn estimation_gain(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let pct = p * c.transpose();
    let innov = symmetrize(&(c * &pct + v));
    let num = a * &pct + u;
    // K = num · innov⁻¹  ⇔  innov · Kᵀ = numᵀ
    Ok(linalg::solve_spd(&innov, &num.transpose(), "CPCᵀ + V")?.transpose())
}

/// Right-hand side of the control-form equation for a given `Π` and `L`.
pub fn control_rhs(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    s: &DMatrix<f64>,
    r: &DMatrix<f64>,
    pi: &DMatrix<f64>,
    l: &DMatrix<f64>,
) -> DMatrix<f64> {
    let acl = a - b * l;
    let lt = l.transpose();
    acl.transpose() * pi * &acl + q - &lt * s.transpose() - s * l + &lt * r * l
}

/// Right-hand side of the estimation-form equation for a given `P` and `K`.
pub fn estimation_rhs(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    w: &DMatrix<f64>,
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    p: &DMatrix<f64>,
    k: &DMatrix<f64>,
) -> DMatrix<f64> {
    let acl = a - k * c;
    let kt = k.transpose();
    &acl * p * acl.transpose() + w - k * u.transpose() - u * &kt + k * v * &kt
}

/// Relative substitution residual of the control form, with `L` recomputed from `Π`.
pub fn control_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    s: &DMatrix<f64>,
    r: &DMatrix<f64>,
    pi: &DMatrix<f64>,
) -> Result<f64> {
    let l = control_gain(a, b, s, r, pi)?;
    Ok(linalg::relative_difference(&control_rhs(a, b, q, s, r, pi, &l), pi))
}

/// Relative substitution residual of the estimation form, with `K` recomputed from `P`.
pub fn estimation_residual(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    w: &DMatrix<f64>,
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<f64> {
    let k = estimation_gain(a, c, u, v, p)?;
    Ok(linalg::relative_difference(&estimation_rhs(a, c, w, u, v, p, &k), p))
}

fn check(name: &str, m: &DMatrix<f64>, shape: (usize, usize)) -> Result<()> {
    if m.shape() != shape {
        return Err(Error::dim(name, shape, m.shape()));
    }
    Ok(())
}

/// Stabilizing solution of the control-form DARE.
pub fn solve_control_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    s: &DMatrix<f64>,
    r: &DMatrix<f64>,
    opts: RiccatiOptions,
) -> Result<ControlDareSolution> {
    let n = a.nrows();
    let m = b.ncols();
    check("A", a, (n, n))?;
    check("B", b, (n, m))?;
    check("Q", q, (n, n))?;
    check("S", s, (n, m))?;
    check("R", r, (m, m))?;

    let r_chol = symmetrize(r).cholesky().ok_or_else(|| Error::Definiteness {
        what: "R".into(),
        min_eigenvalue: linalg::min_eigenvalue(r),
    })?;
    // Remove the cross term: Ā = A − BR⁻¹Sᵀ, Q̄ = Q − SR⁻¹Sᵀ, G = BR⁻¹Bᵀ.
    let r_inv_st = r_chol.solve(&s.transpose());
    let a_bar = a - b * &r_inv_st;
    let q_bar = symmetrize(&(q - s * &r_inv_st));
    let g = symmetrize(&(b * r_chol.solve(&b.transpose())));

    let residual_of = |pi: &DMatrix<f64>| -> f64 {
        control_residual(a, b, q, s, r, pi).unwrap_or(f64::INFINITY)
    };

    let mut pi = match doubling(&a_bar, &g, &q_bar) {
        Some(pi) if residual_of(&pi).is_finite() => pi,
        _ => value_iteration(&a_bar, b, r, &q_bar, opts)?,
    };
    let mut residual = residual_of(&pi);

    // Newton polishing.
    for _ in 0..20 {
        if residual <= opts.tol * 1e-3 {
            break;
        }
        let l = control_gain(a, b, s, r, &pi)?;
        let acl = a - b * &l;
        if spectral_radius(&acl) >= 1.0 {
            break;
        }
        let lt = l.transpose();
        let stage = symmetrize(&(q - &lt * s.transpose() - s * &l + &lt * r * &l));
        let Ok(next) = solve_dlyap(&acl.transpose(), &stage, DEFAULT_LYAPUNOV_TOL * 1e-2) else {
            break;
        };
        let next_residual = residual_of(&next);
        if next_residual < residual {
            pi = next;
            residual = next_residual;
        } else {
            break;
        }
    }

    if !(residual <= opts.tol) {
        return Err(Error::NotConverged {
            solver: "control DARE",
            iterations: opts.max_iter,
            residual,
        });
    }
    let gain = control_gain(a, b, s, r, &pi)?;
    let closed_loop_radius = spectral_radius(&(a - b * &gain));
    if !(closed_loop_radius < 1.0) {
        return Err(Error::Unstable {
            what: "A − B·L".into(),
            radius: closed_loop_radius,
        });
    }
    Ok(ControlDareSolution {
        pi,
        gain,
        closed_loop_radius,
        residual,
    })
}

/// Stabilizing solution of the estimation-form DARE (solved as the dual control problem).
pub fn solve_estimation_dare(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    w: &DMatrix<f64>,
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    opts: RiccatiOptions,
) -> Result<EstimationDareSolution> {
    let n = a.nrows();
    let p = c.nrows();
    check("A", a, (n, n))?;
    check("C", c, (p, n))?;
    check("W", w, (n, n))?;
    check("U", u, (n, p))?;
    check("V", v, (p, p))?;
    let dual = solve_control_dare(&a.transpose(), &c.transpose(), w, u, v, opts).map_err(|e| match e {
        Error::Definiteness { min_eigenvalue, .. } => Error::Definiteness {
            what: "V".into(),
            min_eigenvalue,
        },
        Error::NotConverged {
            iterations, residual, ..
        } => Error::NotConverged {
            solver: "estimation DARE",
            iterations,
            residual,
        },
        Error::Unstable { radius, .. } => Error::Unstable {
            what: "A − K·C".into(),
            radius,
        },
        other => other,
    })?;
    let gain = estimation_gain(a, c, u, v, &dual.pi)?;
    let closed_loop_radius = spectral_radius(&(a - &gain * c));
    Ok(EstimationDareSolution {
        residual: estimation_residual(a, c, w, u, v, &dual.pi)?,
        p: dual.pi,
        gain,
        closed_loop_radius,
    })
}

/// Structure-preserving doubling for `X = ĀᵀX(I + GX)⁻¹Ā + Q̄`.
fn doubling(a: &DMatrix<f64>, g: &DMatrix<f64>, h: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let eye = linalg::identity(n);
    let (mut ak, mut gk, mut hk) = (a.clone(), g.clone(), h.clone());
    for _ in 0..100 {
        let lu = (&eye + &gk * &hk).lu();
        let w_a = lu.solve(&ak)?;
        let w_g = lu.solve(&gk)?;
        let h_next = symmetrize(&(&hk + ak.transpose() * &hk * &w_a));
        let g_next = symmetrize(&(&gk + &ak * &w_g * ak.transpose()));
        let a_next = &ak * &w_a;
        if !h_next.iter().all(|v| v.is_finite()) {
            return None;
        }
        let delta = (&h_next - &hk).norm();
        hk = h_next;
        gk = g_next;
        ak = a_next;
        if delta <= 1e-15 * hk.norm().max(1.0) || ak.norm() <= 1e-300 {
            return Some(hk);
        }
    }
    None
}

/// Plain iteration of the Riccati map; slow but robust fallback.
fn value_iteration(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    q: &DMatrix<f64>,
    opts: RiccatiOptions,
) -> Result<DMatrix<f64>> {
    let mut pi = q.clone();
    let mut step = f64::INFINITY;
    for _ in 0..opts.max_iter {
        let pb = &pi * b;
        let lhs = symmetrize(&(b.transpose() * &pb + r));
        let l = linalg::solve_spd(&lhs, &(pb.transpose() * a), "BᵀΠB + R")?;
        let next = symmetrize(&(a.transpose() * &pi * a - a.transpose() * &pb * &l + q));
        step = linalg::relative_difference(&next, &pi);
        pi = next;
        if !step.is_finite() {
            break;
        }
        if step <= opts.tol * 1e-3 {
            return Ok(pi);
        }
    }
    Err(Error::NotConverged {
        solver: "control DARE",
        iterations: opts.max_iter,
        residual: step,
    })
}

/// Solves `X = A X Aᵀ + Σ` for stable `A` by Smith doubling with residual refinement.
pub fn solve_dlyap(a: &DMatrix<f64>, sigma: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    check("A", a, (n, n))?;
    check("Sigma", sigma, (n, n))?;
    let radius = spectral_radius(a);
    if !(radius < 1.0) {
        return Err(Error::Unstable {
            what: "Lyapunov operator A".into(),
            radius,
        });
    }
    let mut x = smith(a, &symmetrize(sigma));
    let mut residual = lyapunov_residual(a, sigma, &x);
    for _ in 0..4 {
        if residual <= tol {
            break;
        }
        let err = a * &x * a.transpose() + sigma - &x;
        x = symmetrize(&(&x + smith(a, &symmetrize(&err))));
        residual = lyapunov_residual(a, sigma, &x);
    }
    if !(residual <= tol) {
        return Err(Error::NotConverged {
            solver: "discrete Lyapunov",
            iterations: 4,
            residual,
        });
    }
    Ok(x)
}

/// `‖A X Aᵀ + Σ − X‖_F / max(1, ‖X‖_F)`.
pub fn lyapunov_residual(a: &DMatrix<f64>, sigma: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
    linalg::relative_difference(&(a * x * a.transpose() + sigma), x)
}

fn smith(a: &DMatrix<f64>, sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let mut x = sigma.clone();
    let mut ak = a.clone();
    for _ in 0..200 {
        let term = &ak * &x * ak.transpose();
        let done = term.norm() <= f64::EPSILON * 1e-2 * x.norm();
        x += term;
        x = symmetrize(&x);
        if done || ak.norm() == 0.0 {
            break;
        }
        ak = &ak * &ak;
    }
    x
}
