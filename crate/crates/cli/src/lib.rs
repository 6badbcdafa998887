//! Command-line front end: validate, synthesize, analyze, simulate, compare
//! and generate problem instances.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nested_lqg::baselines::{compare, ComparisonReport};
use nested_lqg::coupled::CoupledOptions;
use nested_lqg::evaluation::{
    analytic_cost, closed_loop, cost_decomposition, simulate_sharded, DecompositionReport, SimulationResult,
};
use nested_lqg::problem::{
    load_problem, random_decoupled_instance, random_instance, read_problem, save_problem, validate, BlockDims,
    ValidationReport,
};
use nested_lqg::riccati::{RiccatiOptions, DEFAULT_LYAPUNOV_TOL};
use nested_lqg::synthesis::{
    check_information_pattern, read_controller, save_controller, synthesize, ControllerDocument, CoupledReport,
    GainResiduals, Radii, SynthesisOptions,
};
use nested_lqg::Error;
use serde::Serialize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_SOLVER: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "nested-lqg", version, about = "Distributed LQG synthesis for two nested subsystems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a problem file and list every violated condition.
    Validate {
        problem: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Synthesize the controller and write it with its gains.
    Synth {
        problem: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Closed-loop cost, decomposition and stability margins of a controller.
    Analyze {
        problem: PathBuf,
        controller: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Monte-Carlo estimate of the closed-loop cost.
    Simulate {
        problem: PathBuf,
        controller: PathBuf,
        #[arg(long, default_value_t = 100_000, value_parser = clap::value_parser!(u64).range(1..))]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        shards: u64,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Compare against the centralized and common-information baselines and
    /// the finite-horizon oracle.
    Compare {
        problem: PathBuf,
        #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(2..))]
        horizon: u64,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Write a random admissible instance.
    Rand {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Block dims as n1,n2,m1,m2,p1,p2.
        #[arg(long, value_parser = parse_dims, default_value = "1,1,1,1,1,1")]
        dims: BlockDims,
        /// Spectral radius of A.
        #[arg(long, default_value_t = 0.9)]
        target: f64,
        /// Zero all coupling between the two subsystems.
        #[arg(long)]
        decoupled: bool,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Print machine-readable JSON on standard output.
    #[arg(long, global = true)]
    pub json: bool,
    #[arg(long, default_value_t = RiccatiOptions::default().tol, value_parser = positive)]
    pub dare_tol: f64,
    #[arg(long, default_value_t = DEFAULT_LYAPUNOV_TOL, value_parser = positive)]
    pub lyap_tol: f64,
    #[arg(long, default_value_t = CoupledOptions::default().tol, value_parser = positive)]
    pub coupled_tol: f64,
    /// Outer iteration cap of the coupled solver.
    #[arg(long, default_value_t = CoupledOptions::default().max_iter)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1.0)]
    pub damping: f64,
}

impl CommonArgs {
    fn synthesis_options(&self) -> SynthesisOptions {
        let dare = RiccatiOptions {
            tol: self.dare_tol,
            ..RiccatiOptions::default()
        };
        SynthesisOptions {
            dare,
            coupled: CoupledOptions {
                tol: self.coupled_tol,
                max_iter: self.max_iter,
                damping: self.damping,
                dare,
            },
        }
    }

    fn provenance(&self) -> Provenance {
        Provenance {
            dare_tol: self.dare_tol,
            lyap_tol: self.lyap_tol,
            coupled_tol: self.coupled_tol,
            max_iter: self.max_iter,
            damping: self.damping,
        }
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be positive, got {v}"))
    }
}

fn parse_dims(s: &str) -> Result<BlockDims, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [n1, n2, m1, m2, p1, p2] => Ok(BlockDims::new(n1, n2, m1, m2, p1, p2)),
        _ => Err(format!("expected six comma-separated dims, got {}", parts.len())),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub dare_tol: f64,
    pub lyap_tol: f64,
    pub coupled_tol: f64,
    pub max_iter: usize,
    pub damping: f64,
}

#[derive(Debug, Serialize)]
struct SynthReport {
    controller: PathBuf,
    q: usize,
    radii: Radii,
    controller_radius: f64,
    residuals: GainResiduals,
    coupled: CoupledReport,
    provenance: Provenance,
}

#[derive(Debug, Serialize)]
struct AnalysisReport {
    j_total: f64,
    closed_loop_radius: f64,
    controller_radius: f64,
    gain_radii: Option<Radii>,
    decomposition: Option<DecompositionReport>,
    information_pattern_ok: bool,
    provenance: Provenance,
}

#[derive(Debug, Serialize)]
struct SimulationReport {
    #[serde(flatten)]
    result: SimulationResult,
    provenance: Provenance,
}

#[derive(Debug, Serialize)]
struct CompareOutput {
    #[serde(flatten)]
    report: ComparisonReport,
    provenance: Provenance,
}

#[derive(Debug, Serialize)]
struct RandReport {
    output: PathBuf,
    seed: u64,
    dims: BlockDims,
    target: f64,
    decoupled: bool,
}

/// Outcome of a subcommand: exit code plus what to print.
struct Output {
    code: i32,
    text: String,
    json: serde_json::Value,
}

impl Output {
    fn ok(text: String, json: impl Serialize) -> Self {
        Output {
            code: EXIT_OK,
            text,
            json: serde_json::to_value(json).expect("reports serialize"),
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Invalid(_) => EXIT_VALIDATION,
        Error::Io(_) | Error::Parse(_) | Error::Dimension { .. } => EXIT_IO,
        _ => EXIT_SOLVER,
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_IO } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let json = match &cli.command {
        Command::Validate { common, .. }
        | Command::Synth { common, .. }
        | Command::Analyze { common, .. }
        | Command::Simulate { common, .. }
        | Command::Compare { common, .. }
        | Command::Rand { common, .. } => common.json,
    };
    match execute(&cli.command) {
        Ok(out) => {
            if json {
                println!("{}", serde_json::to_string_pretty(&out.json).expect("json value"));
            } else {
                print!("{}", out.text);
            }
            out.code
        }
        Err(e) => {
            eprintln!("error: {e}");
            if json {
                let body = serde_json::json!({
                    "error": e.to_string(),
                    "stage": e.stage(),
                    "exit_code": exit_code(&e),
                });
                println!("{}", serde_json::to_string_pretty(&body).expect("json value"));
            }
            exit_code(&e)
        }
    }
}

fn execute(command: &Command) -> nested_lqg::Result<Output> {
    match command {
        Command::Validate { problem, .. } => cmd_validate(problem),
        Command::Synth { problem, output, common } => cmd_synth(problem, output, common),
        Command::Analyze {
            problem,
            controller,
            common,
        } => cmd_analyze(problem, controller, common),
        Command::Simulate {
            problem,
            controller,
            steps,
            seed,
            shards,
            common,
        } => cmd_simulate(problem, controller, *steps, *seed, *shards as usize, common),
        Command::Compare {
            problem,
            horizon,
            common,
        } => cmd_compare(problem, *horizon as usize, common),
        Command::Rand {
            seed,
            dims,
            target,
            decoupled,
            output,
            ..
        } => cmd_rand(*seed, *dims, *target, *decoupled, output),
    }
}

fn cmd_validate(problem: &Path) -> nested_lqg::Result<Output> {
    let instance = read_problem(problem)?;
    let report: ValidationReport = validate(&instance)?;
    let mut text = String::new();
    if report.is_empty() {
        text += &format!("{}: valid ({})\n", problem.display(), instance.dims());
    } else {
        for v in &report.violations {
            text += &format!("{}: {}\n", problem.display(), v.message);
        }
    }
    let code = if report.is_empty() { EXIT_OK } else { EXIT_VALIDATION };
    Ok(Output {
        code,
        ..Output::ok(text, &report)
    })
}

fn cmd_synth(problem: &Path, output: &Path, common: &CommonArgs) -> nested_lqg::Result<Output> {
    let instance = load_problem(problem)?;
    let syn = synthesize(&instance, &common.synthesis_options())?;
    let doc = ControllerDocument {
        dims: instance.dims(),
        realization: syn.realization.clone(),
        gains: Some(syn.gains.clone()),
    };
    save_controller(&doc, output)?;
    let report = SynthReport {
        controller: output.to_path_buf(),
        q: syn.realization.q(),
        radii: syn.radii,
        controller_radius: syn.controller_radius,
        residuals: syn.residuals,
        coupled: syn.coupled,
        provenance: common.provenance(),
    };
    let text = format!(
        "wrote {} (q = {})\nradii: A-KC {:.6}, A-BL {:.6}, A-K1C1-B2L2 {:.6}, F {:.6}\nmax Riccati residual {:.3e}\ncoupled iterations {} (final step {:.3e})\n",
        output.display(),
        report.q,
        report.radii.estimation,
        report.radii.control,
        report.radii.coupled,
        report.controller_radius,
        report.residuals.max(),
        report.coupled.iterations,
        report.coupled.final_step_size,
    );
    Ok(Output::ok(text, &report))
}

fn cmd_analyze(problem: &Path, controller: &Path, common: &CommonArgs) -> nested_lqg::Result<Output> {
    let instance = load_problem(problem)?;
    let doc = read_controller(controller)?;
    doc.realization.check_against(&instance.dims())?;
    let model = closed_loop(&instance, &doc.realization)?;
    let j_total = analytic_cost(&model, common.lyap_tol)?;
    let decomposition = doc
        .gains
        .as_ref()
        .map(|g| cost_decomposition(&instance, g, common.lyap_tol))
        .transpose()?;
    let report = AnalysisReport {
        j_total,
        closed_loop_radius: model.radius(),
        controller_radius: doc.realization.radius(),
        gain_radii: doc.gains.as_ref().map(|g| g.radii(&instance.system)),
        decomposition,
        information_pattern_ok: check_information_pattern(&doc.realization, 50),
        provenance: common.provenance(),
    };
    let mut text = format!(
        "J = {}\nclosed-loop radius {:.6}, controller radius {:.6}\ninformation pattern: {}\n",
        report.j_total,
        report.closed_loop_radius,
        report.controller_radius,
        if report.information_pattern_ok { "ok" } else { "violated" },
    );
    if let Some(r) = &report.gain_radii {
        text += &format!(
            "radii: A-KC {:.6}, A-BL {:.6}, A-K1C1-B2L2 {:.6}\n",
            r.estimation, r.control, r.coupled
        );
    }
    if let Some(d) = &report.decomposition {
        text += &format!(
            "decomposition: J_hat_z {}, J_tilde_z {}, J_tilde_x {} (sum defect {:.3e}, max cross-covariance {:.3e})\n",
            d.j_hat_z,
            d.j_tilde_z,
            d.j_tilde_x,
            d.sum_defect(),
            d.cross_covariance_norms.max()
        );
    }
    Ok(Output::ok(text, &report))
}

fn cmd_simulate(
    problem: &Path,
    controller: &Path,
    steps: u64,
    seed: u64,
    shards: usize,
    common: &CommonArgs,
) -> nested_lqg::Result<Output> {
    let instance = load_problem(problem)?;
    let doc = read_controller(controller)?;
    let result = simulate_sharded(&instance, &doc.realization, steps, seed, shards)?;
    let text = format!(
        "empirical cost {} ({} steps, seed {}, {} shard{})\n",
        result.empirical_cost,
        result.steps,
        result.seed,
        result.shards,
        if result.shards == 1 { "" } else { "s" }
    );
    Ok(Output::ok(
        text,
        SimulationReport {
            result,
            provenance: common.provenance(),
        },
    ))
}

fn cmd_compare(problem: &Path, horizon: usize, common: &CommonArgs) -> nested_lqg::Result<Output> {
    let instance = load_problem(problem)?;
    let report = compare(&instance, Some(horizon), &common.synthesis_options())?;
    let mut text = format!(
        "J_central      {}\nJ_distributed  {}\nJ_common_info  {}\n",
        report.j_central, report.j_distributed, report.j_common_info
    );
    if let (Some(j), Some(gap)) = (report.j_oracle, report.gaps.oracle) {
        text += &format!("J_oracle({horizon}) {j} (gap {:.3}%)\n", 100.0 * gap);
    }
    text += &format!("sandwich {}\n", if report.sandwich_ok { "ok" } else { "violated" });
    Ok(Output::ok(
        text,
        CompareOutput {
            report,
            provenance: common.provenance(),
        },
    ))
}

fn cmd_rand(seed: u64, dims: BlockDims, target: f64, decoupled: bool, output: &Path) -> nested_lqg::Result<Output> {
    let instance = if decoupled {
        random_decoupled_instance(seed, dims, target)?
    } else {
        random_instance(seed, dims, target)?
    };
    save_problem(&instance, output)?;
    let text = format!("wrote {} ({dims}, seed {seed})\n", output.display());
    Ok(Output::ok(
        text,
        RandReport {
            output: output.to_path_buf(),
            seed,
            dims,
            target,
            decoupled,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_parse() {
        assert_eq!(parse_dims("2,1,1,2,1,1").unwrap(), BlockDims::new(2, 1, 1, 2, 1, 1));
        assert!(parse_dims("1,2").is_err());
        assert!(parse_dims("1,x,1,1,1,1").is_err());
    }

    #[test]
    fn tolerances_must_be_positive() {
        assert!(positive("1e-9").is_ok());
        assert!(positive("0").is_err());
        assert!(positive("-1").is_err());
        assert!(positive("inf").is_err());
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        let io = Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, "x"));
        assert_eq!(exit_code(&io), EXIT_IO);
        assert_eq!(exit_code(&Error::Parse("x".into())), EXIT_IO);
        let invalid = Error::Stage {
            stage: "validate",
            source: Box::new(Error::Invalid(ValidationReport::default())),
        };
        assert_eq!(exit_code(&invalid), EXIT_VALIDATION);
        let unstable = Error::Unstable {
            what: "F".into(),
            radius: 1.2,
        };
        assert_eq!(exit_code(&unstable), EXIT_SOLVER);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
