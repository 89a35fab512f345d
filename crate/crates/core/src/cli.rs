//! `noir` command-line front end.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::mpc::build_program;
use crate::scenario::{Scenario, ScenarioDocument, ScenarioError};
use crate::sim::{run, summarize, Summary};
use crate::tendency::ActionId;
use crate::trace::{write_atomic, write_json, write_trace};

pub const OUT_DIR_ENV: &str = "NOIR_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "noir", version, about = "Traffic network simulation with adaptive boundary control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario and write its trace.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, env = OUT_DIR_ENV, default_value = "noir-out")]
        out: PathBuf,
        /// Overrides `run.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `run.steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Check path conditions and per-action spectral radii.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Run the scenario once per value of one parameter.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum)]
        vary: SweepParam,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
        #[arg(long, env = OUT_DIR_ENV, default_value = "noir-out")]
        out: PathBuf,
    },
    /// Write the first-step QP and its constraint rows.
    DumpConstraints {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, env = OUT_DIR_ENV, default_value = "noir-out")]
        out: PathBuf,
        /// Action assumed by the controller; defaults to the first.
        #[arg(long)]
        action: Option<u32>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum SweepParam {
    #[value(name = "beta")]
    Beta,
    #[value(name = "N_tau", alias = "n_tau", alias = "horizon")]
    NTau,
    #[value(name = "u0")]
    U0,
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::Beta => "beta",
            SweepParam::NTau => "N_tau",
            SweepParam::U0 => "u0",
        })
    }
}

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Clean = 0,
    InputError = 1,
    Violations = 2,
    InternalFailure = 3,
}

impl From<Outcome> for ExitCode {
    fn from(o: Outcome) -> Self {
        ExitCode::from(o as u8)
    }
}

#[derive(Debug)]
enum Failure {
    Input(String),
    Internal(String),
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Internal(format!("i/o: {e}"))
    }
}

pub fn execute(cli: Cli) -> Outcome {
    let result = match cli.command {
        Command::Run {
            scenario,
            out,
            seed,
            steps,
        } => cmd_run(&scenario, &out, seed, steps),
        Command::Validate { scenario } => cmd_validate(&scenario),
        Command::Sweep {
            scenario,
            vary,
            values,
            out,
        } => cmd_sweep(&scenario, vary, &values, &out),
        Command::DumpConstraints {
            scenario,
            out,
            action,
        } => cmd_dump(&scenario, &out, action),
    };
    match result {
        Ok(o) => o,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            Outcome::InputError
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            Outcome::InternalFailure
        }
    }
}

fn load(path: &Path) -> Result<ScenarioDocument, Failure> {
    ScenarioDocument::from_path(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn resolve(path: &Path, doc: &ScenarioDocument) -> Result<Scenario, Failure> {
    Scenario::from_document(doc).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn outcome_of(summary: &Summary) -> Outcome {
    if summary.aborted.is_some() {
        Outcome::InternalFailure
    } else if summary.violation_count > 0 {
        Outcome::Violations
    } else {
        Outcome::Clean
    }
}

fn cmd_run(path: &Path, out: &Path, seed: Option<u64>, steps: Option<usize>) -> Result<Outcome, Failure> {
    let mut doc = load(path)?;
    if let Some(s) = seed {
        doc.run.seed = s;
    }
    if let Some(k) = steps {
        doc.run.steps = k;
    }
    let scenario = resolve(path, &doc)?;
    let trace = run(&scenario).map_err(|e| Failure::Internal(e.to_string()))?;
    let summary = summarize(&trace);
    write_trace(out, &trace, &summary)?;
    println!(
        "{} steps, steady state at step {}, peak density {:.3}, {} violations, trace in {}",
        summary.steps,
        summary
            .steady_state_step
            .map_or("-".to_string(), |s| s.to_string()),
        summary.peak_density,
        summary.violation_count,
        out.display()
    );
    if let Some(msg) = &summary.aborted {
        eprintln!("run aborted: {msg}");
    }
    for v in trace.violations.iter().take(10) {
        eprintln!(
            "violation: step {} {} at {}: {:.6} vs {:.6}",
            v.step, v.condition, v.location, v.lhs, v.bound
        );
    }
    Ok(outcome_of(&summary))
}

fn cmd_validate(path: &Path) -> Result<Outcome, Failure> {
    let doc = load(path)?;
    let scenario = resolve(path, &doc)?;
    let diag = scenario
        .diagnostics()
        .map_err(|e| Failure::Input(e.to_string()))?;
    let g = &scenario.graph;
    println!(
        "graph: {} elements, inlets 1..={}, outlets {}..={}, {} interior, {} edges",
        g.n_total(),
        g.n_in(),
        g.n_in() + 1,
        g.n_out_end(),
        g.n_interior(),
        g.edge_count()
    );
    let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
    println!("inlet reachability: {}", mark(diag.paths.inlet_reachability));
    if !diag.paths.unreachable_from_inlets.is_empty() {
        println!("  unreachable from inlets: {}", join(&diag.paths.unreachable_from_inlets));
    }
    println!("outlet reachability: {}", mark(diag.paths.outlet_reachability));
    if !diag.paths.cannot_reach_outlet.is_empty() {
        println!("  cannot reach an outlet: {}", join(&diag.paths.cannot_reach_outlet));
    }
    for a in &diag.actions {
        println!(
            "action {}: spectral radius {:.9}, column sums [{:.6}, {:.6}] {}",
            a.action,
            a.spectral_radius,
            a.min_column_sum,
            a.max_column_sum,
            mark(a.contracting)
        );
        if !a.contracting {
            eprintln!(
                "warning: action {} has spectral radius {:.9} >= 1",
                a.action, a.spectral_radius
            );
        }
    }
    Ok(if diag.passed() {
        Outcome::Clean
    } else {
        Outcome::InputError
    })
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Serialize)]
struct SweepRow {
    param: String,
    value: f64,
    status: String,
    steady_state_step: Option<usize>,
    peak_density: Option<f64>,
    mean_input_norm: Option<f64>,
    learner_accuracy: Option<f64>,
    violation_count: Option<usize>,
    fallback_steps: Option<usize>,
    mean_solve_seconds: Option<f64>,
}

fn apply(doc: &mut ScenarioDocument, param: SweepParam, value: f64) -> Result<(), String> {
    match param {
        SweepParam::Beta => doc.mpc.beta = value,
        SweepParam::NTau => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(format!("N_tau must be a positive integer, got {value}"));
            }
            doc.mpc.horizon = value as usize;
        }
        SweepParam::U0 => doc.spec.u0 = value,
    }
    Ok(())
}

fn sweep_one(base: &ScenarioDocument, param: SweepParam, value: f64, dir: &Path) -> SweepRow {
    let mut row = SweepRow {
        param: param.to_string(),
        value,
        status: String::new(),
        steady_state_step: None,
        peak_density: None,
        mean_input_norm: None,
        learner_accuracy: None,
        violation_count: None,
        fallback_steps: None,
        mean_solve_seconds: None,
    };
    let mut doc = base.clone();
    let outcome = apply(&mut doc, param, value)
        .and_then(|_| Scenario::from_document(&doc).map_err(|e| e.to_string()))
        .and_then(|s| run(&s).map_err(|e| e.to_string()))
        .and_then(|t| {
            let s = summarize(&t);
            write_trace(dir, &t, &s).map_err(|e| e.to_string())?;
            Ok(s)
        });
    match outcome {
        Ok(s) => {
            row.status = match outcome_of(&s) {
                Outcome::Clean => "clean",
                Outcome::Violations => "violations",
                _ => "aborted",
            }
            .to_string();
            row.steady_state_step = s.steady_state_step;
            row.peak_density = Some(s.peak_density);
            row.mean_input_norm = Some(s.mean_input_norm);
            row.learner_accuracy = s.learner_accuracy;
            row.violation_count = Some(s.violation_count);
            row.fallback_steps = Some(s.fallback_steps);
            row.mean_solve_seconds = Some(s.mean_solve_seconds);
        }
        Err(e) => {
            log::warn!("{param}={value}: {e}");
            row.status = format!("failed: {e}");
        }
    }
    row
}

fn cmd_sweep(path: &Path, param: SweepParam, values: &[f64], out: &Path) -> Result<Outcome, Failure> {
    if values.is_empty() {
        return Err(Failure::Input("--values must list at least one value".into()));
    }
    let base = load(path)?;
    resolve(path, &base)?;
    fs::create_dir_all(out)?;
    let rows: Vec<SweepRow> = std::thread::scope(|s| {
        let handles: Vec<_> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let dir = out.join(format!("run{i:03}_{param}_{v}"));
                let base = &base;
                s.spawn(move || sweep_one(base, param, v, &dir))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| Failure::Internal(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::Internal(e.to_string()))?;
    write_atomic(&out.join("sweep.csv"), &bytes)?;
    for r in &rows {
        println!(
            "{}={}: {} steady={} ‖u‖={}",
            r.param,
            r.value,
            r.status,
            r.steady_state_step.map_or("-".into(), |s| s.to_string()),
            r.mean_input_norm.map_or("-".into(), |s| format!("{s:.6}"))
        );
    }
    Ok(if rows.iter().any(|r| r.status.starts_with("failed") || r.status == "aborted") {
        Outcome::InternalFailure
    } else if rows.iter().any(|r| r.status == "violations") {
        Outcome::Violations
    } else {
        Outcome::Clean
    })
}

fn cmd_dump(path: &Path, out: &Path, action: Option<u32>) -> Result<Outcome, Failure> {
    let doc = load(path)?;
    let scenario = resolve(path, &doc)?;
    let model = scenario
        .model()
        .map_err(|e| Failure::Input(e.to_string()))?;
    let action = action.map_or(scenario.actions.first().id, ActionId);
    let program = build_program(&model, &scenario.initial, action, &scenario.mpc)
        .map_err(|e| Failure::Input(e.to_string()))?;
    fs::create_dir_all(out)?;
    let mut mtx = Vec::new();
    program.constraints.write_matrix_market(&mut mtx)?;
    write_atomic(&out.join("constraints.mtx"), &mtx)?;
    let mut dense = Vec::new();
    program.problem.write_dense(&mut dense)?;
    write_atomic(&out.join("qp.txt"), &dense)?;
    let rows: Vec<String> = program
        .constraints
        .ineq_prov
        .iter()
        .chain(&program.constraints.eq_prov)
        .map(|p| p.to_string())
        .collect();
    write_json(&out.join("rows.json"), &rows)?;
    println!(
        "{} variables, {} inequality rows, {} equality rows, written to {}",
        program.problem.n(),
        program.problem.n_ineq(),
        program.problem.n_eq(),
        out.display()
    );
    Ok(Outcome::Clean)
}
