//! End-to-end synthesis of the two-layer controller and its state-space form.
//!
//! The controller state is `η = [ẑ; z]`: `ẑ` is the estimate built from `y1`
//! alone and `z` the centralized predictor. Inputs are `u = −L·ẑ − E2·L2·(z − ẑ)`,
//! so `u1` never sees `y2`.

use std::ops::Range;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::coupled::{self, CoupledOptions, InitialGuess, ScriptNoise};
use crate::error::{Error, Result};
use crate::linalg;
use crate::problem::{validate, BlockDims, PartitionedSystem, ProblemInstance};
use crate::riccati::{self, RiccatiOptions};

/// Riccati solutions and gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainSet {
    #[serde(rename = "P", with = "crate::matrix_io::rows")]
    pub p: DMatrix<f64>,
    #[serde(rename = "Pi", with = "crate::matrix_io::rows")]
    pub pi: DMatrix<f64>,
    #[serde(rename = "P1", with = "crate::matrix_io::rows")]
    pub p1: DMatrix<f64>,
    #[serde(rename = "Pi2", with = "crate::matrix_io::rows")]
    pub pi2: DMatrix<f64>,
    /// `n × p`.
    #[serde(rename = "K", with = "crate::matrix_io::rows")]
    pub k: DMatrix<f64>,
    /// `m × n`.
    #[serde(rename = "L", with = "crate::matrix_io::rows")]
    pub l: DMatrix<f64>,
    /// `n × p1`.
    #[serde(rename = "K1", with = "crate::matrix_io::rows")]
    pub k1: DMatrix<f64>,
    /// `m2 × n`.
    #[serde(rename = "L2", with = "crate::matrix_io::rows")]
    pub l2: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Radii {
    /// `ρ(A − K·C)`.
    pub estimation: f64,
    /// `ρ(A − B·L)`.
    pub control: f64,
    /// `ρ(A − K1·C1 − B2·L2)`.
    pub coupled: f64,
}

impl Radii {
    pub fn all_stable(&self) -> bool {
        self.estimation < 1.0 && self.control < 1.0 && self.coupled < 1.0
    }
}

/// Relative substitution residuals of the four Riccati equations, using the
/// stored gains as given.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainResiduals {
    pub p: f64,
    pub pi: f64,
    pub p1: f64,
    pub pi2: f64,
}

impl GainResiduals {
    pub fn max(&self) -> f64 {
        self.p.max(self.pi).max(self.p1).max(self.pi2)
    }
}

impl GainSet {
    pub fn check_shapes(&self, d: &BlockDims) -> Result<()> {
        let (n, m, p) = (d.n(), d.m(), d.p());
        for (name, mat, shape) in [
            ("P", &self.p, (n, n)),
            ("Pi", &self.pi, (n, n)),
            ("P1", &self.p1, (n, n)),
            ("Pi2", &self.pi2, (n, n)),
            ("K", &self.k, (n, p)),
            ("L", &self.l, (m, n)),
            ("K1", &self.k1, (n, d.p1)),
            ("L2", &self.l2, (d.m2, n)),
        ] {
            if mat.shape() != shape {
                return Err(Error::dim(name, shape, mat.shape()));
            }
        }
        Ok(())
    }

    pub fn radii(&self, system: &PartitionedSystem) -> Radii {
        let a = &system.a;
        Radii {
            estimation: riccati::spectral_radius(&(a - &self.k * &system.c)),
            control: riccati::spectral_radius(&(a - &system.b * &self.l)),
            coupled: riccati::spectral_radius(&(a - &self.k1 * system.c1() - system.b2() * &self.l2)),
        }
    }

    pub fn residuals(&self, instance: &ProblemInstance, script: &ScriptNoise) -> GainResiduals {
        let (sys, nz, cost) = (&instance.system, &instance.noise, &instance.cost);
        let p_rhs = riccati::estimation_rhs(&sys.a, &sys.c, &nz.w, &nz.u, &nz.v, &self.p, &self.k);
        let pi_rhs = riccati::control_rhs(&sys.a, &sys.b, &cost.q, &cost.s, &cost.r, &self.pi, &self.l);
        let (p1, pi2) = coupled::coupled_residuals(sys, cost, script, &self.p1, &self.pi2, &self.k1, &self.l2);
        GainResiduals {
            p: linalg::relative_difference(&p_rhs, &self.p),
            pi: linalg::relative_difference(&pi_rhs, &self.pi),
            p1,
            pi2,
        }
    }
}

/// Named contiguous block of the controller state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateBlock {
    pub name: String,
    pub range: Range<usize>,
}

/// Index ranges of the controller state blocks and the plant channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerLayout {
    pub state: Vec<StateBlock>,
    pub y1: Range<usize>,
    pub y2: Range<usize>,
    pub u1: Range<usize>,
    pub u2: Range<usize>,
}

impl ControllerLayout {
    /// Channel ranges for `dims` with the given state blocks.
    pub fn new(dims: &BlockDims, state: Vec<StateBlock>) -> Self {
        ControllerLayout {
            state,
            y1: 0..dims.p1,
            y2: dims.p1..dims.p(),
            u1: 0..dims.m1,
            u2: dims.m1..dims.m(),
        }
    }

    pub fn block(&self, name: &str) -> Option<Range<usize>> {
        self.state.iter().find(|b| b.name == name).map(|b| b.range.clone())
    }
}

/// Strictly proper controller `η⁺ = F·η + G·y`, `u = H·η`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerRealization {
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub layout: ControllerLayout,
}

impl ControllerRealization {
    pub fn new(f: DMatrix<f64>, g: DMatrix<f64>, h: DMatrix<f64>, layout: ControllerLayout) -> Result<Self> {
        let r = ControllerRealization { f, g, h, layout };
        r.check_shapes()?;
        Ok(r)
    }

    /// Controller state dimension.
    pub fn q(&self) -> usize {
        self.f.nrows()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let q = self.f.nrows();
        let p = self.layout.y2.end;
        let m = self.layout.u2.end;
        if self.f.ncols() != q {
            return Err(Error::dim("F", (q, q), self.f.shape()));
        }
        if self.g.shape() != (q, p) {
            return Err(Error::dim("G", (q, p), self.g.shape()));
        }
        if self.h.shape() != (m, q) {
            return Err(Error::dim("H", (m, q), self.h.shape()));
        }
        if let Some(b) = self.layout.state.iter().find(|b| b.range.end > q || b.range.start > b.range.end) {
            return Err(Error::InvalidArgument(format!(
                "state block {} ({:?}) outside 0..{q}",
                b.name, b.range
            )));
        }
        Ok(())
    }

    /// Checks that the realization's channels match the plant's block dims.
    pub fn check_against(&self, dims: &BlockDims) -> Result<()> {
        let l = &self.layout;
        if l.y1 != (0..dims.p1) || l.y2 != (dims.p1..dims.p()) || l.u1 != (0..dims.m1) || l.u2 != (dims.m1..dims.m()) {
            return Err(Error::Dimension {
                matrix: "controller layout".into(),
                expected: format!("channels for dims {dims}"),
                actual: format!("y1 {:?}, y2 {:?}, u1 {:?}, u2 {:?}", l.y1, l.y2, l.u1, l.u2),
            });
        }
        self.check_shapes()
    }

    pub fn radius(&self) -> f64 {
        riccati::spectral_radius(&self.f)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOptions {
    pub dare: RiccatiOptions,
    pub coupled: CoupledOptions,
}

/// Coupled-iteration diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledReport {
    pub initial_guess: InitialGuess,
    pub iterations: usize,
    pub final_step_size: f64,
    pub step_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub gains: GainSet,
    pub realization: ControllerRealization,
    pub script: ScriptNoise,
    pub radii: Radii,
    pub controller_radius: f64,
    pub residuals: GainResiduals,
    pub coupled: CoupledReport,
}

/// Runs the full pipeline. Failures carry the stage name: `validate`,
/// `estimation`, `control`, `script_noise`, `coupled` or `realization`.
pub fn synthesize(instance: &ProblemInstance, opts: &SynthesisOptions) -> Result<Synthesis> {
    let report = validate(instance).map_err(|e| e.at_stage("validate"))?;
    if !report.is_empty() {
        return Err(Error::Invalid(report).at_stage("validate"));
    }
    let (sys, nz, cost) = (&instance.system, &instance.noise, &instance.cost);
    let d = sys.dims;

    let est = riccati::solve_estimation_dare(&sys.a, &sys.c, &nz.w, &nz.u, &nz.v, opts.dare)
        .map_err(|e| e.at_stage("estimation"))?;
    let ctl = riccati::solve_control_dare(&sys.a, &sys.b, &cost.q, &cost.s, &cost.r, opts.dare)
        .map_err(|e| e.at_stage("control"))?;
    let script = coupled::build_script_noise(&est.p, &est.gain, sys, nz).map_err(|e| e.at_stage("script_noise"))?;
    let coupled_opts = CoupledOptions {
        dare: opts.dare,
        ..opts.coupled
    };
    let l2_init = ctl.gain.rows(d.m1, d.m2).into_owned();
    let sol = coupled::solve_coupled_warm(sys, cost, &script, &l2_init, coupled_opts)
        .map_err(|e| e.at_stage("coupled"))?;

    let gains = GainSet {
        p: est.p,
        pi: ctl.pi,
        p1: sol.p1,
        pi2: sol.pi2,
        k: est.gain,
        l: ctl.gain,
        k1: sol.k1,
        l2: sol.l2,
    };
    let realization = assemble_realization(&gains, sys).map_err(|e| e.at_stage("realization"))?;
    let controller_radius = realization.radius();
    if !(controller_radius < 1.0) {
        return Err(Error::Unstable {
            what: "controller F".into(),
            radius: controller_radius,
        }
        .at_stage("realization"));
    }
    let radii = gains.radii(sys);
    let residuals = gains.residuals(instance, &script);
    Ok(Synthesis {
        gains,
        realization,
        script,
        radii,
        controller_radius,
        residuals,
        coupled: CoupledReport {
            initial_guess: sol.initial_guess,
            iterations: sol.iterations,
            final_step_size: sol.final_step_size,
            step_history: sol.step_history,
        },
    })
}

/// `m × m2` selector `[0; I]` placing `u2` inside `u`.
pub fn u2_selector(d: &BlockDims) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(d.m(), d.m2);
    e.view_mut((d.m1, 0), (d.m2, d.m2)).fill_with_identity();
    e
}

/// State-space form of the two-layer controller over `η = [ẑ; z]`.
pub fn assemble_realization(gains: &GainSet, system: &PartitionedSystem) -> Result<ControllerRealization> {
    gains.check_shapes(&system.dims)?;
    assemble_from_gains(system, &gains.k, &gains.l, &gains.k1, &gains.l2)
}

/// [`assemble_realization`] from the four gains alone.
pub fn assemble_from_gains(
    system: &PartitionedSystem,
    k: &DMatrix<f64>,
    l: &DMatrix<f64>,
    k1: &DMatrix<f64>,
    l2: &DMatrix<f64>,
) -> Result<ControllerRealization> {
    let d = system.dims;
    system.check_shapes()?;
    let n = d.n();
    for (name, mat, shape) in [
        ("K", k, (n, d.p())),
        ("L", l, (d.m(), n)),
        ("K1", k1, (n, d.p1)),
        ("L2", l2, (d.m2, n)),
    ] {
        if mat.shape() != shape {
            return Err(Error::dim(name, shape, mat.shape()));
        }
    }
    let (a, b, c) = (&system.a, &system.b, &system.c);
    let (b2, c1) = (system.b2(), system.c1());
    let bl = b * l;
    let b2l2 = &b2 * l2;

    let f11 = a - k1 * &c1 - &bl;
    let f21 = -&bl + &b2l2;
    let f22 = a - k * c - &b2l2;
    let zero_nn = DMatrix::zeros(n, n);
    let f = linalg::block(&[&[&f11, &zero_nn], &[&f21, &f22]]);

    let mut g = DMatrix::zeros(2 * n, d.p());
    g.view_mut((0, 0), (n, d.p1)).copy_from(k1);
    g.view_mut((n, 0), (n, d.p())).copy_from(k);

    let e2l2 = u2_selector(&d) * l2;
    let mut h = DMatrix::zeros(d.m(), 2 * n);
    h.view_mut((0, 0), (d.m(), n)).copy_from(&(-l + &e2l2));
    h.view_mut((0, n), (d.m(), n)).copy_from(&(-e2l2));

    let layout = ControllerLayout::new(
        &d,
        vec![
            StateBlock {
                name: "zhat".into(),
                range: 0..n,
            },
            StateBlock {
                name: "z".into(),
                range: n..2 * n,
            },
        ],
    );
    ControllerRealization::new(f, g, h, layout)
}

/// `H·Fᵏ·G` for `k = 0..horizon`.
pub fn markov_parameters(realization: &ControllerRealization, horizon: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(horizon);
    let mut fg = realization.g.clone();
    for _ in 0..horizon {
        out.push(&realization.h * &fg);
        fg = &realization.f * fg;
    }
    out
}

/// Largest `|(H·Fᵏ·G)[u1, y2]|` over `k < horizon`.
pub fn information_leak(realization: &ControllerRealization, horizon: usize) -> f64 {
    let l = &realization.layout;
    markov_parameters(realization, horizon)
        .iter()
        .map(|mk| {
            linalg::max_abs(
                &mk.view((l.u1.start, l.y2.start), (l.u1.len(), l.y2.len()))
                    .into_owned(),
            )
        })
        .fold(0.0, f64::max)
}

/// Whether `u1` is unaffected by `y2` over the first `horizon` Markov parameters.
///
/// Realizations have no feedthrough term, so strict properness holds by
/// construction.
pub fn check_information_pattern(realization: &ControllerRealization, horizon: usize) -> bool {
    information_leak(realization, horizon) <= 1e-12
}

// ---------------------------------------------------------------------------
// Controller files

#[allow(non_snake_case)]
#[derive(Serialize, Deserialize)]
struct ControllerFile {
    dims: BlockDims,
    q: usize,
    #[serde(with = "crate::matrix_io::rows")]
    F: DMatrix<f64>,
    #[serde(with = "crate::matrix_io::rows")]
    G: DMatrix<f64>,
    #[serde(with = "crate::matrix_io::rows")]
    H: DMatrix<f64>,
    layout: ControllerLayout,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gains: Option<GainSet>,
}

/// Stored controller: realization, plant dims, and optionally its gains.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerDocument {
    pub dims: BlockDims,
    pub realization: ControllerRealization,
    pub gains: Option<GainSet>,
}

pub fn controller_to_json(doc: &ControllerDocument) -> Result<String> {
    let file = ControllerFile {
        dims: doc.dims,
        q: doc.realization.q(),
        F: doc.realization.f.clone(),
        G: doc.realization.g.clone(),
        H: doc.realization.h.clone(),
        layout: doc.realization.layout.clone(),
        gains: doc.gains.clone(),
    };
    serde_json::to_string_pretty(&file).map_err(|e| Error::Parse(e.to_string()))
}

pub fn controller_from_json(text: &str) -> Result<ControllerDocument> {
    let file: ControllerFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    if file.F.nrows() != file.q {
        return Err(Error::dim("F", (file.q, file.q), file.F.shape()));
    }
    let realization = ControllerRealization::new(file.F, file.G, file.H, file.layout)?;
    realization.check_against(&file.dims)?;
    if let Some(g) = &file.gains {
        g.check_shapes(&file.dims)?;
    }
    Ok(ControllerDocument {
        dims: file.dims,
        realization,
        gains: file.gains,
    })
}

pub fn read_controller(path: &Path) -> Result<ControllerDocument> {
    let text = std::fs::read_to_string(path)?;
    controller_from_json(&text).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_controller(doc: &ControllerDocument, path: &Path) -> Result<()> {
    std::fs::write(path, controller_to_json(doc)?)?;
    Ok(())
}
