//! Problem data: the two-system plant, its noise model and quadratic cost,
//! admissibility checks, and the JSON problem file.
//!
//! Subsystem 1 is upstream of subsystem 2: `A`, `B` and `C` are lower block
//! triangular, so `x1` evolves independently of `x2`, `u2` does not enter
//! `x1`, and `y1` does not observe `x2`.

use std::fmt;
use std::path::Path;

use nalgebra::{Complex, DMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, asymmetry, min_eigenvalue};
use crate::matrix_io::{from_rows, to_rows};

/// Block dimensions of the two subsystems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockDims {
    pub n1: usize,
    pub n2: usize,
    pub m1: usize,
    pub m2: usize,
    pub p1: usize,
    pub p2: usize,
}

impl BlockDims {
    pub const fn new(n1: usize, n2: usize, m1: usize, m2: usize, p1: usize, p2: usize) -> Self {
        BlockDims { n1, n2, m1, m2, p1, p2 }
    }

    /// All six dimensions equal to one.
    pub const fn scalar() -> Self {
        BlockDims::new(1, 1, 1, 1, 1, 1)
    }

    pub fn n(&self) -> usize {
        self.n1 + self.n2
    }

    pub fn m(&self) -> usize {
        self.m1 + self.m2
    }

    pub fn p(&self) -> usize {
        self.p1 + self.p2
    }

    pub fn is_valid(&self) -> bool {
        [self.n1, self.n2, self.m1, self.m2, self.p1, self.p2]
            .iter()
            .all(|&d| d >= 1)
    }
}

impl fmt::Display for BlockDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "n=({},{}) m=({},{}) p=({},{})",
            self.n1, self.n2, self.m1, self.m2, self.p1, self.p2
        )
    }
}

/// Plant matrices `x⁺ = Ax + Bu + w`, `y = Cx + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub dims: BlockDims,
}

impl PartitionedSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, dims: BlockDims) -> Result<Self> {
        let sys = PartitionedSystem { a, b, c, dims };
        sys.check_shapes()?;
        Ok(sys)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (n, m, p) = (self.dims.n(), self.dims.m(), self.dims.p());
        check_shape("A", &self.a, (n, n))?;
        check_shape("B", &self.b, (n, m))?;
        check_shape("C", &self.c, (p, n))
    }

    /// First block row of `C` (`p1 × n`).
    pub fn c1(&self) -> DMatrix<f64> {
        self.c.rows(0, self.dims.p1).into_owned()
    }

    /// Second block row of `C` (`p2 × n`).
    pub fn c2(&self) -> DMatrix<f64> {
        self.c.rows(self.dims.p1, self.dims.p2).into_owned()
    }

    /// First block column of `B` (`n × m1`).
    pub fn b1(&self) -> DMatrix<f64> {
        self.b.columns(0, self.dims.m1).into_owned()
    }

    /// Second block column of `B` (`n × m2`).
    pub fn b2(&self) -> DMatrix<f64> {
        self.b.columns(self.dims.m1, self.dims.m2).into_owned()
    }
}

/// Joint covariance `[[W, U], [Uᵀ, V]]` of process noise `w` and measurement noise `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub w: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl NoiseModel {
    /// First block column of `V` (`p × p1`).
    pub fn v1(&self, dims: &BlockDims) -> DMatrix<f64> {
        self.v.columns(0, dims.p1).into_owned()
    }

    /// Top-left `p1 × p1` block of `V`.
    pub fn v11(&self, dims: &BlockDims) -> DMatrix<f64> {
        self.v.view((0, 0), (dims.p1, dims.p1)).into_owned()
    }

    pub fn joint(&self) -> DMatrix<f64> {
        let ut = self.u.transpose();
        linalg::block(&[&[&self.w, &self.u], &[&ut, &self.v]])
    }

    /// Same model with every covariance multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        NoiseModel {
            w: &self.w * factor,
            u: &self.u * factor,
            v: &self.v * factor,
        }
    }
}

/// Stage cost weights `[x; u]ᵀ [[Q, S], [Sᵀ, R]] [x; u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    pub q: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl CostModel {
    /// Last `m2` columns of `S` (`n × m2`).
    pub fn s2(&self, dims: &BlockDims) -> DMatrix<f64> {
        self.s.columns(dims.m1, dims.m2).into_owned()
    }

    /// Bottom-right `m2 × m2` block of `R`.
    pub fn r22(&self, dims: &BlockDims) -> DMatrix<f64> {
        self.r.view((dims.m1, dims.m1), (dims.m2, dims.m2)).into_owned()
    }

    pub fn joint(&self) -> DMatrix<f64> {
        let st = self.s.transpose();
        linalg::block(&[&[&self.q, &self.s], &[&st, &self.r]])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    pub system: PartitionedSystem,
    pub noise: NoiseModel,
    pub cost: CostModel,
}

impl ProblemInstance {
    pub fn new(system: PartitionedSystem, noise: NoiseModel, cost: CostModel) -> Result<Self> {
        let inst = ProblemInstance { system, noise, cost };
        inst.check_shapes()?;
        Ok(inst)
    }

    pub fn dims(&self) -> BlockDims {
        self.system.dims
    }

    pub fn check_shapes(&self) -> Result<()> {
        self.system.check_shapes()?;
        let d = self.dims();
        let (n, m, p) = (d.n(), d.m(), d.p());
        check_shape("W", &self.noise.w, (n, n))?;
        check_shape("U", &self.noise.u, (n, p))?;
        check_shape("V", &self.noise.v, (p, p))?;
        check_shape("Q", &self.cost.q, (n, n))?;
        check_shape("S", &self.cost.s, (n, m))?;
        check_shape("R", &self.cost.r, (m, m))
    }

    /// Copy with the noise covariances scaled by `factor`.
    pub fn with_noise_scaled(&self, factor: f64) -> Self {
        ProblemInstance {
            noise: self.noise.scaled(factor),
            ..self.clone()
        }
    }
}

fn check_shape(name: &str, m: &DMatrix<f64>, expected: (usize, usize)) -> Result<()> {
    if m.shape() != expected {
        return Err(Error::dim(name, expected, m.shape()));
    }
    Ok(())
}

/// Numerical thresholds used by [`validate_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Allowed asymmetry of covariance and weight matrices.
    pub symmetry: f64,
    /// Minimum eigenvalue required for positive definiteness (and `-definiteness`
    /// allowed for semidefiniteness).
    pub definiteness: f64,
    /// Relative singular-value cutoff in the PBH rank tests.
    pub rank: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            symmetry: 1e-12,
            definiteness: 1e-10,
            rank: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationCode {
    DimsOutOfRange,
    Sparsity,
    NotSymmetric,
    NoiseNotPsd,
    MeasurementNoiseNotPd,
    CostNotPd,
    NotStabilizable,
    NotDetectable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, code: ViolationCode) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }

    fn push(&mut self, code: ViolationCode, message: impl Into<String>) {
        self.violations.push(Violation {
            code,
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "no violations");
        }
        let msgs: Vec<&str> = self.violations.iter().map(|v| v.message.as_str()).collect();
        write!(f, "{}", msgs.join("; "))
    }
}

pub fn validate(instance: &ProblemInstance) -> Result<ValidationReport> {
    validate_with(instance, &Tolerances::default())
}

/// Lists every violated admissibility condition; an empty report means the
/// instance is admissible. Shape mismatches are errors, not violations.
pub fn validate_with(instance: &ProblemInstance, tol: &Tolerances) -> Result<ValidationReport> {
    let mut report = ValidationReport::default();
    let d = instance.dims();
    if !d.is_valid() {
        report.push(ViolationCode::DimsOutOfRange, format!("dims must be ≥ 1 (got {d})"));
        return Ok(report);
    }
    instance.check_shapes()?;

    let sys = &instance.system;
    let upper_right = [
        ("A", &sys.a, d.n1, d.n1, d.n2),
        ("B", &sys.b, d.n1, d.m1, d.m2),
        ("C", &sys.c, d.p1, d.n1, d.n2),
    ];
    for (name, m, rows, col0, cols) in upper_right {
        if m.view((0, col0), (rows, cols)).iter().any(|&v| v != 0.0) {
            report.push(ViolationCode::Sparsity, format!("sparsity: {name} block (1,2) nonzero"));
        }
    }

    for (name, m) in [
        ("W", &instance.noise.w),
        ("V", &instance.noise.v),
        ("Q", &instance.cost.q),
        ("R", &instance.cost.r),
    ] {
        let asym = asymmetry(m);
        if asym > tol.symmetry {
            report.push(
                ViolationCode::NotSymmetric,
                format!("{name} is not symmetric (asymmetry {asym:e})"),
            );
        }
    }

    let noise_min = min_eigenvalue(&instance.noise.joint());
    if noise_min < -tol.definiteness {
        report.push(
            ViolationCode::NoiseNotPsd,
            format!("noise covariance not positive semidefinite (min eigenvalue {noise_min:e})"),
        );
    }
    let v_min = min_eigenvalue(&instance.noise.v);
    if v_min < tol.definiteness {
        report.push(
            ViolationCode::MeasurementNoiseNotPd,
            format!("measurement noise V not positive definite (min eigenvalue {v_min:e})"),
        );
    }
    let cost_min = min_eigenvalue(&instance.cost.joint());
    if cost_min < tol.definiteness {
        report.push(
            ViolationCode::CostNotPd,
            format!("cost matrix not positive definite (min eigenvalue {cost_min:e})"),
        );
    }

    if let Some(lambda) = pbh_failure(&sys.a, &sys.b, tol.rank) {
        report.push(
            ViolationCode::NotStabilizable,
            format!("(A, B) not stabilizable: uncontrollable mode {lambda}"),
        );
    }
    let at = sys.a.transpose();
    let ct = sys.c.transpose();
    if let Some(lambda) = pbh_failure(&at, &ct, tol.rank) {
        report.push(
            ViolationCode::NotDetectable,
            format!("(A, C) not detectable: unobservable mode {lambda}"),
        );
    }
    Ok(report)
}

/// First eigenvalue `λ` of `a` with `|λ| ≥ 1` at which `[λI − A, B]` loses rank.
fn pbh_failure(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> Option<Complex<f64>> {
    let n = a.nrows();
    linalg::eigenvalues(a)
        .into_iter()
        .filter(|l| l.norm() >= 1.0 - tol)
        .find(|&lambda| {
            let mut pencil = DMatrix::<Complex<f64>>::zeros(n, n + b.ncols());
            for i in 0..n {
                for j in 0..n {
                    let diag = if i == j { lambda } else { Complex::new(0.0, 0.0) };
                    pencil[(i, j)] = diag - Complex::new(a[(i, j)], 0.0);
                }
                for j in 0..b.ncols() {
                    pencil[(i, n + j)] = Complex::new(b[(i, j)], 0.0);
                }
            }
            linalg::complex_rank(pencil, tol) < n
        })
}

// ---------------------------------------------------------------------------
// Random fixtures

const GENERATOR_ATTEMPTS: usize = 100;
const FIXTURE_EPSILON: f64 = 1e-3;

/// Deterministic random admissible instance.
///
/// `A` is scaled to spectral radius `spectral_target`; the forbidden
/// upper-right blocks of `A`, `B`, `C` are zeroed, and the joint noise and
/// cost matrices are `GᵀG + 1e-3·I`. Draws are repeated (deterministically)
/// until the instance validates.
pub fn random_instance(seed: u64, dims: BlockDims, spectral_target: f64) -> Result<ProblemInstance> {
    if !dims.is_valid() {
        let mut report = ValidationReport::default();
        report.push(ViolationCode::DimsOutOfRange, format!("dims must be ≥ 1 (got {dims})"));
        return Err(Error::Invalid(report));
    }
    if !(spectral_target > 0.0 && spectral_target < 2.0) {
        return Err(Error::InvalidArgument(format!(
            "spectral_target must lie in (0, 2), got {spectral_target}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = ValidationReport::default();
    for _ in 0..GENERATOR_ATTEMPTS {
        let inst = draw_instance(&mut rng, dims, spectral_target)?;
        last = validate(&inst)?;
        if last.is_empty() {
            return Ok(inst);
        }
    }
    Err(Error::Invalid(last))
}

/// Random instance with no coupling between the subsystems: `A21 = B21 =
/// C21 = 0`, block-diagonal `W`, `V`, `Q`, `R`, and `U = S = 0`.
pub fn random_decoupled_instance(seed: u64, dims: BlockDims, spectral_target: f64) -> Result<ProblemInstance> {
    let mut inst = random_instance(seed, dims, spectral_target)?;
    let d = dims;
    inst.system.a.view_mut((d.n1, 0), (d.n2, d.n1)).fill(0.0);
    inst.system.b.view_mut((d.n1, 0), (d.n2, d.m1)).fill(0.0);
    inst.system.c.view_mut((d.p1, 0), (d.p2, d.n1)).fill(0.0);
    for (m, k1, k2) in [
        (&mut inst.noise.w, d.n1, d.n2),
        (&mut inst.noise.v, d.p1, d.p2),
        (&mut inst.cost.q, d.n1, d.n2),
        (&mut inst.cost.r, d.m1, d.m2),
    ] {
        m.view_mut((0, k1), (k1, k2)).fill(0.0);
        m.view_mut((k1, 0), (k2, k1)).fill(0.0);
    }
    inst.noise.u.fill(0.0);
    inst.cost.s.fill(0.0);
    let report = validate(&inst)?;
    if !report.is_empty() {
        return Err(Error::Invalid(report));
    }
    Ok(inst)
}

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn gram_plus_eps(rng: &mut ChaCha8Rng, k: usize) -> DMatrix<f64> {
    let g = gaussian(rng, k, k);
    let gram = g.transpose() * &g + DMatrix::identity(k, k) * FIXTURE_EPSILON;
    linalg::symmetrize(&gram)
}

fn draw_instance(rng: &mut ChaCha8Rng, d: BlockDims, spectral_target: f64) -> Result<ProblemInstance> {
    let (n, m, p) = (d.n(), d.m(), d.p());
    let mut a = gaussian(rng, n, n);
    a.view_mut((0, d.n1), (d.n1, d.n2)).fill(0.0);
    let radius = crate::riccati::spectral_radius(&a);
    if radius > 1e-8 {
        a *= spectral_target / radius;
    }
    let mut b = gaussian(rng, n, m);
    b.view_mut((0, d.m1), (d.n1, d.m2)).fill(0.0);
    let mut c = gaussian(rng, p, n);
    c.view_mut((0, d.n1), (d.p1, d.n2)).fill(0.0);

    let noise = gram_plus_eps(rng, n + p);
    let cost = gram_plus_eps(rng, n + m);
    ProblemInstance::new(
        PartitionedSystem::new(a, b, c, d)?,
        NoiseModel {
            w: noise.view((0, 0), (n, n)).into_owned(),
            u: noise.view((0, n), (n, p)).into_owned(),
            v: noise.view((n, n), (p, p)).into_owned(),
        },
        CostModel {
            q: cost.view((0, 0), (n, n)).into_owned(),
            s: cost.view((0, n), (n, m)).into_owned(),
            r: cost.view((n, n), (m, m)).into_owned(),
        },
    )
}

// ---------------------------------------------------------------------------
// Problem file

#[allow(non_snake_case)]
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProblemFile {
    dims: BlockDims,
    A: Vec<Vec<f64>>,
    B: Vec<Vec<f64>>,
    C: Vec<Vec<f64>>,
    W: Vec<Vec<f64>>,
    U: Vec<Vec<f64>>,
    V: Vec<Vec<f64>>,
    Q: Vec<Vec<f64>>,
    S: Vec<Vec<f64>>,
    R: Vec<Vec<f64>>,
}

impl From<&ProblemInstance> for ProblemFile {
    fn from(inst: &ProblemInstance) -> Self {
        ProblemFile {
            dims: inst.dims(),
            A: to_rows(&inst.system.a),
            B: to_rows(&inst.system.b),
            C: to_rows(&inst.system.c),
            W: to_rows(&inst.noise.w),
            U: to_rows(&inst.noise.u),
            V: to_rows(&inst.noise.v),
            Q: to_rows(&inst.cost.q),
            S: to_rows(&inst.cost.s),
            R: to_rows(&inst.cost.r),
        }
    }
}

impl ProblemFile {
    fn into_instance(self) -> Result<ProblemInstance> {
        let d = self.dims;
        if !d.is_valid() {
            let mut report = ValidationReport::default();
            report.push(ViolationCode::DimsOutOfRange, format!("dims must be ≥ 1 (got {d})"));
            return Err(Error::Invalid(report));
        }
        let (n, m, p) = (d.n(), d.m(), d.p());
        ProblemInstance::new(
            PartitionedSystem::new(
                from_rows("A", &self.A, Some((n, n)))?,
                from_rows("B", &self.B, Some((n, m)))?,
                from_rows("C", &self.C, Some((p, n)))?,
                d,
            )?,
            NoiseModel {
                w: from_rows("W", &self.W, Some((n, n)))?,
                u: from_rows("U", &self.U, Some((n, p)))?,
                v: from_rows("V", &self.V, Some((p, p)))?,
            },
            CostModel {
                q: from_rows("Q", &self.Q, Some((n, n)))?,
                s: from_rows("S", &self.S, Some((n, m)))?,
                r: from_rows("R", &self.R, Some((m, m)))?,
            },
        )
    }
}

pub fn problem_to_json(instance: &ProblemInstance) -> Result<String> {
    serde_json::to_string_pretty(&ProblemFile::from(instance)).map_err(|e| Error::Parse(e.to_string()))
}

/// Parses a problem document and checks shapes, without validating admissibility.
pub fn problem_from_json(text: &str) -> Result<ProblemInstance> {
    let file: ProblemFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    file.into_instance()
}

/// Reads a problem file without checking admissibility.
pub fn read_problem(path: impl AsRef<Path>) -> Result<ProblemInstance> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    problem_from_json(&text).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Reads a problem file and rejects it unless it validates.
pub fn load_problem(path: impl AsRef<Path>) -> Result<ProblemInstance> {
    let inst = read_problem(path)?;
    let report = validate(&inst)?;
    if !report.is_empty() {
        return Err(Error::Invalid(report));
    }
    Ok(inst)
}

pub fn save_problem(instance: &ProblemInstance, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, problem_to_json(instance)?)?;
    Ok(())
}
