//! Experiment runner behind the `heatvar` binary.

pub mod config;

use std::fmt;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use heatvar::builtin::{self, Builtin};
use heatvar::curvature::{
    conformal_perturbation, domination_check, scalar_potentials, spectral_parts, sup_bound_check,
    EndomorphismField, OneFormHeatOperator, Potential, RicciDecomposition,
};
use heatvar::error::Error;
use heatvar::geometry::{DiscreteManifold, ScalarField};
use heatvar::heat::{HeatOperator, HeatParams};
use heatvar::io;
use heatvar::stochastic::{estimate, kasminskii_certify, kato_modulus, Functional, KilledPaths, WalkModel};
use heatvar::suite::run_suite;
use heatvar::variation::{self, gradient_l1, polar_decompose, variation_heatflow};
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{json, Value};

pub use config::{ExperimentConfig, FieldSource, FormSource, ManifoldSource, Task, Values};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_SUITE_FAILED: i32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Validation,
    Solver,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Validation,
            message: message.into(),
        }
    }

    pub fn solver(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Solver,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Validation => EXIT_VALIDATION,
            ErrorKind::Solver => EXIT_SOLVER,
        }
    }

    /// `{"error": {"kind", "exit_code", "message"}}`.
    pub fn record(&self) -> Value {
        json!({ "error": { "kind": self.kind, "exit_code": self.exit_code(), "message": self.message } })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Solver(_) | Error::Unsupported(_) => CliError::solver(e.to_string()),
            _ => CliError::validation(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub task: String,
    pub config: ExperimentConfig,
    pub result: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub passed: Option<bool>,
    /// File names of the CSV tables written next to the report.
    pub tables: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runtime_seconds: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Table {
    pub name: String,
    pub csv: String,
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub report: Report,
    pub tables: Vec<Table>,
    pub exit_code: i32,
}

impl Outcome {
    pub fn report_json(&self) -> String {
        serde_json::to_string_pretty(&self.report).expect("report serializes")
    }

    /// Writes `report.json` and the tables into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let io_err = |e: std::io::Error| CliError::validation(format!("cannot write to {}: {e}", dir.display()));
        std::fs::create_dir_all(dir).map_err(io_err)?;
        std::fs::write(dir.join("report.json"), self.report_json() + "\n").map_err(io_err)?;
        for t in &self.tables {
            std::fs::write(dir.join(&t.name), &t.csv).map_err(io_err)?;
        }
        Ok(())
    }
}

struct TaskOutput {
    result: Value,
    tables: Vec<Table>,
    passed: Option<bool>,
}

impl TaskOutput {
    fn new(result: Value) -> Self {
        Self {
            result,
            tables: Vec::new(),
            passed: None,
        }
    }

    fn table(mut self, name: &str, csv: String) -> Self {
        self.tables.push(Table {
            name: name.into(),
            csv,
        });
        self
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("result serializes")
}

/// Runs the configured task on a thread pool of the configured size.
pub fn run(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate()?;
    let start = Instant::now();
    let out = match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::solver(format!("cannot start {n} threads: {e}")))?
            .install(|| run_task(cfg))?,
        None => run_task(cfg)?,
    };
    let secs = start.elapsed().as_secs_f64();
    let exit_code = match (&cfg.task, out.passed) {
        (Task::Suite { .. }, Some(false)) => EXIT_SUITE_FAILED,
        _ => EXIT_OK,
    };
    Ok(Outcome {
        report: Report {
            schema_version: config::CONFIG_SCHEMA_VERSION,
            task: cfg.task.name().into(),
            config: cfg.clone(),
            result: out.result,
            passed: out.passed,
            tables: out.tables.iter().map(|t| t.name.clone()).collect(),
            runtime_seconds: cfg.timings.then_some(secs),
        },
        tables: out.tables,
        exit_code,
    })
}

fn load_manifold(src: &ManifoldSource) -> Result<Builtin> {
    match src {
        ManifoldSource::Builtin(sel) => Ok(builtin::generate_builtin(sel)?),
        ManifoldSource::File(p) => Ok(Builtin {
            name: p.display().to_string(),
            manifold: io::read_manifold(p)?,
            coords: Vec::new(),
            periodic: false,
            radii: None,
        }),
    }
}

fn load_field(src: &FieldSource, b: &Builtin) -> Result<ScalarField> {
    match src {
        FieldSource::Builtin(sel) => {
            if b.coords.is_empty() && !sel.trim_start().starts_with("random") {
                return Err(CliError::validation(format!(
                    "builtin field `{sel}` needs a builtin manifold; use random(seed) or a CSV field"
                )));
            }
            Ok(builtin::generate_field(b, sel)?)
        }
        FieldSource::Csv(p) => Ok(io::parse_field_csv(&read(p)?, b.manifold.n_vertices())?),
    }
}

fn read(p: &Path) -> Result<String> {
    std::fs::read_to_string(p).map_err(|e| CliError::validation(format!("cannot read {}: {e}", p.display())))
}

fn resolve(v: &Values, n: usize, what: &str) -> Result<Vec<f64>> {
    match v {
        Values::Constant(c) => Ok(vec![*c; n]),
        Values::Spike { vertex, value } => {
            if *vertex >= n {
                return Err(CliError::validation(format!("{what}: spike at {vertex} is out of range (n = {n})")));
            }
            let mut out = vec![0.0; n];
            out[*vertex] = *value;
            Ok(out)
        }
        Values::List(xs) => {
            if xs.len() != n {
                return Err(CliError::validation(format!("{what}: expected {n} values, got {}", xs.len())));
            }
            Ok(xs.clone())
        }
        Values::Csv(p) => Ok(io::parse_field_csv(&read(p)?, n)?.real_parts()),
    }
}

fn run_task(cfg: &ExperimentConfig) -> Result<TaskOutput> {
    let mut task = cfg.task.clone();
    if let Some(seed) = cfg.seed {
        match &mut task {
            Task::Fk { mc, .. } | Task::Dominate { mc, .. } => mc.seed = seed,
            Task::Kasminskii { params, .. } => params.mc.seed = seed,
            Task::Suite { params } => params.seed = seed,
            _ => {}
        }
        if let Task::Dominate {
            sup_bound: Some(p), ..
        } = &mut task
        {
            p.mc.seed = seed;
        }
    }
    let b = cfg.manifold.as_ref().map(load_manifold).transpose()?;
    let field = match (&cfg.field, &b) {
        (Some(src), Some(b)) if task.needs_field() => Some(load_field(src, b)?),
        _ => None,
    };
    let manifold = || -> Arc<DiscreteManifold> { Arc::new(b.as_ref().expect("validated").manifold.clone()) };
    let field = || field.as_ref().expect("validated");

    match &task {
        Task::Var { method, params } => {
            let m = manifold();
            let r = variation::methods().get(method)?.compute(&m, field(), params)?;
            let l1 = gradient_l1(&m, field())?;
            let mut v = to_value(&r);
            v["gradient_l1"] = json!(l1);
            v["relative_gap_to_l1"] = json!((r.value - l1).abs() / (1.0 + l1));
            let mut out = TaskOutput::new(v);
            if let Some(c) = &r.curve {
                out = out.table("curve.csv", curve_csv(c));
            }
            Ok(out)
        }
        Task::Curve {
            schedule,
            extrapolation,
            heat,
        } => {
            let m = manifold();
            let hop = HeatOperator::build(m.clone(), heat)?;
            let c = variation_heatflow(&hop, field(), schedule, *extrapolation)?;
            let var = gradient_l1(&m, field())?;
            let v = json!({
                "heat_strategy": hop.strategy(),
                "gradient_l1": var,
                "min_value": c.min_value(),
                "curve": c,
            });
            Ok(TaskOutput::new(v).table("curve.csv", curve_csv(&c)))
        }
        Task::Polar {} => {
            let m = manifold();
            let nu = polar_decompose(&m, field())?;
            let support = nu.support();
            let mut csv = String::from("site,mass");
            for j in 0..nu.sigma.components() {
                csv += &format!(",sigma{j}_re,sigma{j}_im");
            }
            csv.push('\n');
            for &s in &support {
                csv += &format!("{},{:e}", s, nu.mass[s]);
                for z in nu.sigma.site(s) {
                    csv += &format!(",{:e},{:e}", z.re, z.im);
                }
                csv.push('\n');
            }
            let v = json!({
                "total_mass": nu.total_mass(),
                "gradient_l1": gradient_l1(&m, field())?,
                "support_size": support.len(),
                "sites": nu.mass.len(),
            });
            Ok(TaskOutput::new(v).table("polar.csv", csv))
        }
        Task::HeatApply { t, heat } => {
            let hop = HeatOperator::build(manifold(), heat)?;
            let u = hop.apply(field(), *t)?;
            let v = json!({ "t": t, "heat_strategy": hop.strategy(), "vertices": u.len() });
            Ok(TaskOutput::new(v).table("heat.csv", io::field_to_csv(&u)))
        }
        Task::KernelRow { t, vertex, heat } => {
            let hop = HeatOperator::build(manifold(), heat)?;
            let row = hop.kernel_row(*t, *vertex)?;
            let mut csv = String::from("vertex,kernel\n");
            for (y, k) in row.iter().enumerate() {
                csv += &format!("{y},{k:e}\n");
            }
            let v = json!({ "t": t, "vertex": vertex, "heat_strategy": hop.strategy(), "row_mass": row
                .iter()
                .zip(hop.manifold().volumes())
                .map(|(k, v)| k * v)
                .sum::<f64>() });
            Ok(TaskOutput::new(v).table("kernel_row.csv", csv))
        }
        Task::Kato { potential, t_grid } => {
            let m = manifold();
            let w = resolve(potential, m.n_vertices(), "potential")?;
            let hop = HeatOperator::build(m, &HeatParams::spectral())?;
            let r = kato_modulus(&hop, &w, t_grid)?;
            let mut csv = String::from("t,modulus,argmax\n");
            for i in 0..r.t_grid.len() {
                csv += &format!("{:e},{:e},{}\n", r.t_grid[i], r.modulus[i], r.argmax[i]);
            }
            Ok(TaskOutput::new(to_value(&r)).table("kato.csv", csv))
        }
        Task::Fk {
            potential,
            terminal,
            t,
            starts,
            killing,
            mc,
        } => {
            let m = manifold();
            let n = m.n_vertices();
            let v = resolve(potential, n, "potential")?;
            let g = terminal.as_ref().map(|g| resolve(g, n, "terminal")).transpose()?;
            let hop = HeatOperator::build(m, &HeatParams::default())?;
            let walk = WalkModel::build(&hop, killing)?;
            let f = Functional {
                potential: &v,
                terminal: g.as_deref(),
                killed: KilledPaths::Drop,
            };
            let xs: Vec<usize> = starts.clone().unwrap_or_else(|| (0..n).collect());
            let est = xs
                .iter()
                .map(|&x| estimate(&walk, &f, x, *t, mc, xs.len()))
                .collect::<heatvar::error::Result<Vec<_>>>()?;
            let mut csv = String::from("start,mean,std_error,lower,upper\n");
            for e in &est {
                csv += &format!("{},{:e},{:e},{:e},{:e}\n", e.start, e.mean, e.std_error, e.lower, e.upper);
            }
            let v = json!({ "t": t, "samples": mc.samples, "confidence": mc.confidence, "estimates": est });
            Ok(TaskOutput::new(v).table("fk.csv", csv))
        }
        Task::Kasminskii { potential, params } => {
            let m = manifold();
            let v = resolve(potential, m.n_vertices(), "potential")?;
            let hop = HeatOperator::build(m, &HeatParams::spectral())?;
            let walk = WalkModel::build(&hop, &Default::default())?;
            let c = kasminskii_certify(&walk, &hop, &v, params)?;
            let mut csv = String::from("t,bound,sup_estimate,sup_upper,holds\n");
            for r in &c.rows {
                csv += &format!("{:e},{:e},{:e},{:e},{}\n", r.t, r.bound, r.sup_estimate, r.sup_upper, r.holds);
            }
            let mut out = TaskOutput::new(to_value(&c)).table("kasminskii.csv", csv);
            out.passed = Some(c.valid);
            Ok(out)
        }
        Task::Parts { ricci, dim } => {
            let text = read(ricci)?;
            let n = count_points(&text);
            let r = io::parse_endomorphism_csv(&text, *dim, n)?;
            let (plus, minus) = spectral_parts(&r);
            let dec = RicciDecomposition::from_ricci(&r);
            let (w1, w2) = scalar_potentials(&dec);
            let v = json!({
                "points": n,
                "dim": dim,
                "eigenvalues": r.eigenvalues(),
                "w1": w1,
                "w2": w2,
            });
            Ok(TaskOutput::new(v)
                .table("parts_plus.csv", io::endomorphism_to_csv(&plus))
                .table("parts_minus.csv", io::endomorphism_to_csv(&minus)))
        }
        Task::Conformal { m, metric, data } => {
            let g = match metric {
                Some(g) if g.len() == m * m => DMatrix::from_row_slice(*m, *m, g),
                Some(g) => {
                    return Err(CliError::validation(format!(
                        "metric: expected {} entries, got {}",
                        m * m,
                        g.len()
                    )))
                }
                None => DMatrix::identity(*m, *m),
            };
            let t = conformal_perturbation(*m, &g, data)?;
            let rows: Vec<Vec<f64>> = (0..*m).map(|i| t.row(i).iter().copied().collect()).collect();
            Ok(TaskOutput::new(json!({ "m": m, "perturbation": rows })))
        }
        Task::Dominate {
            ricci,
            alpha,
            t,
            mc,
            sup_bound,
        } => {
            let m = manifold();
            let ne = m.edges().len();
            let r = resolve(ricci, ne, "ricci")?;
            let dec = RicciDecomposition::from_ricci(&EndomorphismField::scalar(1, &r));
            let (_, w2) = scalar_potentials(&dec);
            let v: Vec<f64> = w2.iter().map(|w| -w).collect();
            let op = OneFormHeatOperator::build(m, &Potential::Scalar(v))?;
            let a = match alpha {
                FormSource::Random(seed) => builtin::random_field(ne, *seed).0,
                FormSource::Csv(p) => io::parse_field_csv(&read(p)?, ne)?.0,
            };
            let rep = domination_check(&op, &w2, &a, *t, mc)?;
            let mut csv = String::from("site,lhs,majorant_mean,majorant_upper,violated\n");
            for row in &rep.rows {
                csv += &format!(
                    "{},{:e},{:e},{:e},{}\n",
                    row.site, row.lhs, row.majorant.mean, row.majorant.upper, row.violated
                );
            }
            let mut passed = rep.violations.is_empty();
            let mut v = json!({ "domination": rep });
            if let Some(p) = sup_bound {
                let s = sup_bound_check(&op, &w2, &a, p)?;
                passed &= s.rows.iter().all(|r| r.holds) && s.certificate.valid;
                v["sup_bound"] = to_value(&s);
            }
            let mut out = TaskOutput::new(v).table("dominate.csv", csv);
            out.passed = Some(passed);
            Ok(out)
        }
        Task::Suite { params } => {
            let mut p = params.clone();
            p.timings = cfg.timings;
            let rep = run_suite(&p);
            let mut csv = String::from("id,passed,value,tolerance,known_limitation\n");
            for c in &rep.checks {
                csv += &format!(
                    "{},{},{:e},{:e},{}\n",
                    c.id,
                    c.passed,
                    c.value,
                    c.tolerance,
                    c.known_limitation.is_some()
                );
            }
            let mut out = TaskOutput::new(to_value(&rep)).table("suite.csv", csv);
            out.passed = Some(rep.passed);
            Ok(out)
        }
    }
}

fn curve_csv(c: &variation::HeatflowCurve) -> String {
    let mut csv = String::from("t,value\n");
    for p in &c.points {
        csv += &format!("{:e},{:e}\n", p.t, p.value);
    }
    csv
}

/// One more than the largest leading integer id in a CSV.
fn count_points(text: &str) -> usize {
    text.lines()
        .filter_map(|l| l.split(',').next()?.trim().parse::<usize>().ok())
        .max()
        .map_or(0, |m| m + 1)
}
