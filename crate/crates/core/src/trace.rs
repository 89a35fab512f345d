//! CSV and JSON persistence of run traces.
//!
//! Every file is written to a temporary sibling and renamed into place.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::sim::{RunTrace, Summary};

pub const DENSITIES_CSV: &str = "densities.csv";
pub const FLOWS_CSV: &str = "flows.csv";
pub const INPUTS_CSV: &str = "inputs.csv";
pub const LEARNER_CSV: &str = "learner.csv";
pub const CONTROLLER_CSV: &str = "controller.csv";
pub const VIOLATIONS_CSV: &str = "violations.csv";
pub const SUMMARY_JSON: &str = "summary.json";

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp: PathBuf = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

fn csv_bytes<F>(fill: F) -> io::Result<Vec<u8>>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    fill(&mut w).map_err(io::Error::other)?;
    w.into_inner().map_err(|e| io::Error::other(e.to_string()))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn densities(t: &RunTrace) -> io::Result<Vec<u8>> {
    csv_bytes(|w| {
        w.write_record(["step", "element", "density", "inflow", "outflow"])?;
        for (k, s) in t.trajectory.states.iter().enumerate() {
            let rec = t.trajectory.records.get(k);
            for (c, rho) in s.densities.iter().enumerate() {
                w.write_record([
                    k.to_string(),
                    t.graph.interior_node(c).to_string(),
                    rho.to_string(),
                    opt(rec.map(|r| r.inflow[c])),
                    opt(rec.map(|r| r.outflow[c])),
                ])?;
            }
        }
        Ok(())
    })
}

fn flows(t: &RunTrace) -> io::Result<Vec<u8>> {
    csv_bytes(|w| {
        w.write_record(["step", "from", "to", "flow"])?;
        for (k, rec) in t.trajectory.records.iter().enumerate() {
            for e in &rec.edge_flows {
                w.write_record([
                    k.to_string(),
                    e.from.to_string(),
                    e.to.to_string(),
                    e.flow.to_string(),
                ])?;
            }
        }
        Ok(())
    })
}

fn inputs(t: &RunTrace) -> io::Result<Vec<u8>> {
    csv_bytes(|w| {
        w.write_record(["step", "inlet", "inflow"])?;
        for (k, u) in t.trajectory.inputs.iter().enumerate() {
            for (j, v) in u.inflows.iter().enumerate() {
                w.write_record([k.to_string(), (j + 1).to_string(), v.to_string()])?;
            }
        }
        Ok(())
    })
}

fn learner(t: &RunTrace) -> io::Result<Vec<u8>> {
    csv_bytes(|w| {
        w.write_record(["step", "true_action", "learned_action", "margin", "action", "cost"])?;
        for s in &t.steps {
            let head = [
                s.step.to_string(),
                s.true_action.to_string(),
                s.learned_action.to_string(),
                opt(s.margin),
            ];
            if s.costs.is_empty() {
                w.write_record(head.iter().cloned().chain([String::new(), String::new()]))?;
            }
            for (id, c) in &s.costs {
                w.write_record(head.iter().cloned().chain([id.to_string(), c.to_string()]))?;
            }
        }
        Ok(())
    })
}

fn controller(t: &RunTrace) -> io::Result<Vec<u8>> {
    csv_bytes(|w| {
        w.write_record([
            "step",
            "qp_status",
            "fallback",
            "predicted_cost",
            "stage_cost",
            "qp_iterations",
            "solve_seconds",
            "mass_residual",
            "active_constraints",
        ])?;
        for s in &t.steps {
            w.write_record([
                s.step.to_string(),
                opt(s.qp_status.map(|v| format!("{v:?}"))),
                opt(s.fallback.map(|v| format!("{v:?}"))),
                opt(s.predicted_cost),
                s.stage_cost.to_string(),
                s.qp_iterations.to_string(),
                s.solve_seconds.to_string(),
                s.mass_residual.to_string(),
                s.active_constraints.join(";"),
            ])?;
        }
        Ok(())
    })
}

fn violations(t: &RunTrace) -> io::Result<Vec<u8>> {
    csv_bytes(|w| {
        w.write_record(["step", "condition", "location", "lhs", "bound", "slack"])?;
        for v in &t.violations {
            w.write_record([
                v.step.to_string(),
                v.condition.to_string(),
                v.location.to_string(),
                v.lhs.to_string(),
                v.bound.to_string(),
                v.slack.to_string(),
            ])?;
        }
        Ok(())
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(io::Error::other)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Writes all trace files and `summary.json` into `dir`, creating it if
/// needed. Returns the paths written.
pub fn write_trace(dir: &Path, t: &RunTrace, summary: &Summary) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    type Render = fn(&RunTrace) -> io::Result<Vec<u8>>;
    let files: [(&str, Render); 6] = [
        (DENSITIES_CSV, densities),
        (FLOWS_CSV, flows),
        (INPUTS_CSV, inputs),
        (LEARNER_CSV, learner),
        (CONTROLLER_CSV, controller),
        (VIOLATIONS_CSV, violations),
    ];
    let mut written = Vec::with_capacity(files.len() + 1);
    for (name, render) in files {
        let path = dir.join(name);
        write_atomic(&path, &render(t)?)?;
        written.push(path);
    }
    let path = dir.join(SUMMARY_JSON);
    write_json(&path, summary)?;
    written.push(path);
    Ok(written)
}
