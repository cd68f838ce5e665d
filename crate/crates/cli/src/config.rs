//! Experiment configuration files.

use std::path::{Path, PathBuf};

use heatvar::curvature::ConformalData;
use heatvar::heat::HeatParams;
use heatvar::stochastic::{KasminskiiParams, Killing, MonteCarloParams};
use heatvar::suite::SuiteParams;
use heatvar::variation::{Extrapolation, Schedule, VariationParams};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifold: Option<ManifoldSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<FieldSource>,
    pub task: Task,
    /// Overrides every seed inside the task parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Directory for `report.json` and CSV tables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Include wall-clock times in the report.
    #[serde(default)]
    pub timings: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifoldSource {
    /// Generator selector such as `cycle(64)` or `flat_torus(16)`.
    Builtin(String),
    /// JSON manifold document or OFF mesh.
    File(PathBuf),
}

impl ManifoldSource {
    /// A string that names an existing file, or ends in `.json`/`.off`,
    /// is a file; anything else is a builtin selector.
    pub fn from_arg(s: &str) -> Self {
        let p = Path::new(s);
        let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("");
        if p.is_file() || ext.eq_ignore_ascii_case("json") || ext.eq_ignore_ascii_case("off") {
            ManifoldSource::File(p.into())
        } else {
            ManifoldSource::Builtin(s.into())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldSource {
    /// Generator selector such as `step` or `random(7)`.
    Builtin(String),
    /// `vertex_id,re,im` table.
    Csv(PathBuf),
}

impl FieldSource {
    pub fn from_arg(s: &str) -> Self {
        if s.to_ascii_lowercase().ends_with(".csv") {
            FieldSource::Csv(s.into())
        } else {
            FieldSource::Builtin(s.into())
        }
    }
}

/// Real values per vertex (or per edge, for edge data).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Values {
    Constant(f64),
    Spike { vertex: usize, value: f64 },
    List(Vec<f64>),
    /// Real parts of a `vertex_id,re,im` table.
    Csv(PathBuf),
}

impl Values {
    /// `constant(c)`, `spike(vertex, value)`, a comma list, or a CSV path.
    pub fn from_arg(s: &str) -> Result<Self, CliError> {
        let s = s.trim();
        let bad = || CliError::validation(format!("cannot read values from `{s}`"));
        let args = |prefix: &str| -> Option<Vec<String>> {
            s.strip_prefix(prefix)?
                .strip_suffix(')')
                .map(|inner| inner.split(',').map(|a| a.trim().to_string()).collect())
        };
        if s.to_ascii_lowercase().ends_with(".csv") {
            return Ok(Values::Csv(s.into()));
        }
        if let Some(a) = args("constant(") {
            return match a.as_slice() {
                [c] => Ok(Values::Constant(c.parse().map_err(|_| bad())?)),
                _ => Err(bad()),
            };
        }
        if let Some(a) = args("spike(") {
            return match a.as_slice() {
                [v, x] => Ok(Values::Spike {
                    vertex: v.parse().map_err(|_| bad())?,
                    value: x.parse().map_err(|_| bad())?,
                }),
                _ => Err(bad()),
            };
        }
        Ok(Values::List(parse_list(s).map_err(|_| bad())?))
    }
}

pub fn parse_list(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .filter(|x| !x.trim().is_empty())
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| CliError::validation(format!("`{x}` is not a number")))
        })
        .collect()
}

/// Edge 1-form for `dominate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormSource {
    /// Complex entries uniform in `[-1,1]^2`.
    Random(u64),
    /// `edge_id,re,im` table.
    Csv(PathBuf),
}

impl Default for FormSource {
    fn default() -> Self {
        FormSource::Random(0)
    }
}

fn default_method() -> String {
    "dual".into()
}

fn default_kato_grid() -> Vec<f64> {
    (0..=16).map(|k| 0.5f64.powi(k)).collect()
}

fn default_fk_time() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Task {
    /// Variation by `dual`, `l1` or `heatflow`.
    Var {
        #[serde(default = "default_method")]
        method: String,
        #[serde(default)]
        params: VariationParams,
    },
    /// Heat-flow curve `(t, V(t))`.
    Curve {
        #[serde(default)]
        schedule: Schedule,
        #[serde(default)]
        extrapolation: Extrapolation,
        #[serde(default)]
        heat: HeatParams,
    },
    Polar {},
    HeatApply {
        t: f64,
        #[serde(default)]
        heat: HeatParams,
    },
    KernelRow {
        t: f64,
        vertex: usize,
        #[serde(default)]
        heat: HeatParams,
    },
    Kato {
        potential: Values,
        #[serde(default = "default_kato_grid")]
        t_grid: Vec<f64>,
    },
    /// `E_x[exp(int_0^t v) g(X_t)]` at each start.
    Fk {
        potential: Values,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        terminal: Option<Values>,
        #[serde(default = "default_fk_time")]
        t: f64,
        /// Defaults to every vertex.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        starts: Option<Vec<usize>>,
        #[serde(default)]
        killing: Killing,
        #[serde(default)]
        mc: MonteCarloParams,
    },
    Kasminskii {
        potential: Values,
        #[serde(default)]
        params: KasminskiiParams,
    },
    /// Spectral parts of an endomorphism field read from CSV.
    Parts { ricci: PathBuf, dim: usize },
    Conformal {
        m: usize,
        /// Row-major metric; the identity when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        metric: Option<Vec<f64>>,
        data: ConformalData,
    },
    /// Semigroup domination on a path or cycle, with the Ricci term given
    /// per edge.
    Dominate {
        ricci: Values,
        #[serde(default)]
        alpha: FormSource,
        t: f64,
        #[serde(default)]
        mc: MonteCarloParams,
        /// Also check the sup-norm bound with these certificate settings.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sup_bound: Option<KasminskiiParams>,
    },
    Suite {
        #[serde(default)]
        params: SuiteParams,
    },
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Var { .. } => "var",
            Task::Curve { .. } => "curve",
            Task::Polar {} => "polar",
            Task::HeatApply { .. } => "heat_apply",
            Task::KernelRow { .. } => "kernel_row",
            Task::Kato { .. } => "kato",
            Task::Fk { .. } => "fk",
            Task::Kasminskii { .. } => "kasminskii",
            Task::Parts { .. } => "parts",
            Task::Conformal { .. } => "conformal",
            Task::Dominate { .. } => "dominate",
            Task::Suite { .. } => "suite",
        }
    }

    pub fn needs_manifold(&self) -> bool {
        !matches!(self, Task::Parts { .. } | Task::Conformal { .. } | Task::Suite { .. })
    }

    pub fn needs_field(&self) -> bool {
        matches!(
            self,
            Task::Var { .. } | Task::Curve { .. } | Task::Polar {} | Task::HeatApply { .. }
        )
    }
}

impl ExperimentConfig {
    pub fn new(task: Task) -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            manifold: None,
            field: None,
            task,
            seed: None,
            out: None,
            threads: None,
            timings: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| CliError::validation(format!("config field `{}`: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Schema version, required inputs and referenced files.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(CliError::validation(format!(
                "config field `schema_version`: expected {CONFIG_SCHEMA_VERSION}, got {}",
                self.schema_version
            )));
        }
        if self.task.needs_manifold() && self.manifold.is_none() {
            return Err(CliError::validation(format!(
                "config field `manifold`: task {} needs a manifold",
                self.task.name()
            )));
        }
        if self.task.needs_field() && self.field.is_none() {
            return Err(CliError::validation(format!(
                "config field `field`: task {} needs a field",
                self.task.name()
            )));
        }
        if self.threads == Some(0) {
            return Err(CliError::validation("config field `threads`: must be >= 1"));
        }
        let mut files: Vec<(&str, &Path)> = Vec::new();
        if let Some(ManifoldSource::File(p)) = &self.manifold {
            files.push(("manifold.file", p));
        }
        if let Some(FieldSource::Csv(p)) = &self.field {
            files.push(("field.csv", p));
        }
        match &self.task {
            Task::Kato { potential: v, .. } | Task::Kasminskii { potential: v, .. } => {
                if let Values::Csv(p) = v {
                    files.push(("task.potential.csv", p));
                }
            }
            Task::Fk { potential, terminal, .. } => {
                if let Values::Csv(p) = potential {
                    files.push(("task.potential.csv", p));
                }
                if let Some(Values::Csv(p)) = terminal {
                    files.push(("task.terminal.csv", p));
                }
            }
            Task::Parts { ricci, .. } => files.push(("task.ricci", ricci)),
            Task::Dominate { ricci, alpha, .. } => {
                if let Values::Csv(p) = ricci {
                    files.push(("task.ricci.csv", p));
                }
                if let FormSource::Csv(p) = alpha {
                    files.push(("task.alpha.csv", p));
                }
            }
            _ => {}
        }
        for (field, p) in files {
            if !p.is_file() {
                return Err(CliError::validation(format!(
                    "config field `{field}`: no such file {}",
                    p.display()
                )));
            }
        }
        Ok(())
    }
}
