use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use heatvar::curvature::ConformalData;
use heatvar::heat::HeatParams;
use heatvar::stochastic::{KasminskiiParams, MonteCarloParams};
use heatvar::suite::SuiteParams;
use heatvar::variation::{Extrapolation, Schedule, VariationParams};
use heatvar_cli::config::{parse_list, FormSource};
use heatvar_cli::{run, CliError, ExperimentConfig, FieldSource, ManifoldSource, Task, Values};

/// Variation of fields on weighted graphs and triangulated surfaces.
#[derive(Parser, Debug)]
#[command(name = "heatvar", version)]
struct Cli {
    /// Run the experiment described by a JSON config instead of a subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for random fields, forms and Monte Carlo streams.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for report.json and CSV tables.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Include wall-clock times in the report.
    #[arg(long, global = true)]
    timings: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Variation of a field.
    Bv {
        #[command(subcommand)]
        cmd: BvCmd,
    },
    /// Heat semigroup on functions.
    Heat {
        #[command(subcommand)]
        cmd: HeatCmd,
    },
    /// Curvature terms and the 1-form semigroup.
    Curv {
        #[command(subcommand)]
        cmd: CurvCmd,
    },
    /// Random walks, Kato moduli and exponential-moment certificates.
    Mc {
        #[command(subcommand)]
        cmd: McCmd,
    },
    /// Run the acceptance battery.
    Suite {
        /// Criterion ids, e.g. `1,3,12`.
        #[arg(long, value_delimiter = ',')]
        only: Vec<u32>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        perimeter_c: Option<f64>,
    },
}

#[derive(Args, Debug)]
struct Input {
    /// Builtin such as `cycle(64)`, or a .json/.off file.
    #[arg(long)]
    manifold: String,
    /// Builtin such as `step` or `random(7)`, or a .csv file.
    #[arg(long)]
    field: String,
}

#[derive(Args, Debug)]
struct HeatArgs {
    /// `auto`, `spectral`, `crank_nicolson` or `implicit_stepper`.
    #[arg(long, default_value = "auto")]
    heat: String,
    /// Time steps for the stepping strategies.
    #[arg(long)]
    steps: Option<usize>,
}

impl HeatArgs {
    fn params(&self) -> HeatParams {
        let mut p = HeatParams {
            strategy: self.heat.clone(),
            ..HeatParams::default()
        };
        if let Some(s) = self.steps {
            p.steps = s;
        }
        p
    }
}

#[derive(Args, Debug)]
struct ScheduleArgs {
    /// Explicit times, e.g. `1,0.5,0.1`.
    #[arg(long, value_delimiter = ',')]
    times: Vec<f64>,
    /// Tie times to the mesh size: `t = c h ratio^k`.
    #[arg(long)]
    coupled: Option<f64>,
    #[arg(long)]
    t0: Option<f64>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    ratio: f64,
    #[arg(long)]
    down_to: Option<f64>,
    /// `richardson` or `last_value`.
    #[arg(long, default_value = "richardson")]
    extrapolation: String,
}

impl ScheduleArgs {
    fn schedule(&self) -> Schedule {
        if !self.times.is_empty() {
            Schedule::Explicit {
                times: self.times.clone(),
            }
        } else if let Some(c) = self.coupled {
            Schedule::Coupled {
                c,
                points: self.points.unwrap_or(2),
                ratio: self.ratio,
            }
        } else {
            Schedule::Geometric {
                t0: self.t0,
                points: self.points.unwrap_or(12),
                ratio: self.ratio,
                down_to: self.down_to,
            }
        }
    }

    fn extrapolation(&self) -> Result<Extrapolation, CliError> {
        match self.extrapolation.as_str() {
            "richardson" => Ok(Extrapolation::Richardson),
            "last_value" | "last" => Ok(Extrapolation::LastValue),
            other => Err(CliError::validation(format!(
                "unknown extrapolation `{other}` (use richardson or last_value)"
            ))),
        }
    }
}

#[derive(Subcommand, Debug)]
enum BvCmd {
    /// Variation by one method.
    Var {
        #[command(flatten)]
        input: Input,
        /// `dual`, `l1` or `heatflow`.
        #[arg(long, default_value = "dual")]
        method: String,
        #[command(flatten)]
        schedule: ScheduleArgs,
        #[command(flatten)]
        heat: HeatArgs,
    },
    /// Polar decomposition of the derivative measure.
    Polar {
        #[command(flatten)]
        input: Input,
    },
    /// Heat-flow curve `(t, V(t))`.
    Curve {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        schedule: ScheduleArgs,
        #[command(flatten)]
        heat: HeatArgs,
    },
}

#[derive(Subcommand, Debug)]
enum HeatCmd {
    /// `e^{-tH} f` as CSV.
    Apply {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        t: f64,
        #[command(flatten)]
        heat: HeatArgs,
    },
    /// One row of the heat kernel.
    KernelRow {
        #[arg(long)]
        manifold: String,
        #[arg(long)]
        t: f64,
        #[arg(long)]
        vertex: usize,
        #[command(flatten)]
        heat: HeatArgs,
    },
}

#[derive(Subcommand, Debug)]
enum CurvCmd {
    /// Positive and negative spectral parts of a field of endomorphisms.
    Parts {
        /// CSV with `vertex_id` and row-major entries.
        #[arg(long)]
        ricci: PathBuf,
        #[arg(long)]
        dim: usize,
    },
    /// Ricci change under a conformal factor at one point.
    Conformal {
        #[arg(long)]
        m: usize,
        /// Row-major metric; identity when absent.
        #[arg(long)]
        metric: Option<String>,
        #[arg(long, default_value_t = 0.0)]
        psi: f64,
        #[arg(long)]
        dpsi: String,
        /// Row-major Hessian; zero when absent.
        #[arg(long)]
        hess: Option<String>,
        #[arg(long, default_value_t = 0.0)]
        laplacian: f64,
    },
    /// Domination of the 1-form semigroup on a path or cycle.
    Dominate {
        #[arg(long)]
        manifold: String,
        /// Ricci term per edge: `constant(c)`, a list or a CSV.
        #[arg(long)]
        ricci: String,
        /// Edge form as CSV; random when absent.
        #[arg(long)]
        alpha: Option<PathBuf>,
        #[arg(long)]
        t: f64,
        #[arg(long)]
        samples: Option<usize>,
        /// Also check the sup-norm bound with this delta.
        #[arg(long)]
        sup_bound_delta: Option<f64>,
    },
}

#[derive(Subcommand, Debug)]
enum McCmd {
    /// Feynman-Kac expectations.
    Fk {
        #[arg(long)]
        manifold: String,
        /// `constant(c)`, `spike(vertex, value)`, a list or a CSV.
        #[arg(long)]
        potential: String,
        #[arg(long)]
        terminal: Option<String>,
        #[arg(long, default_value_t = 1.0)]
        t: f64,
        #[arg(long, value_delimiter = ',')]
        starts: Vec<usize>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Kato modulus curve.
    Kato {
        #[arg(long)]
        manifold: String,
        #[arg(long)]
        potential: String,
        #[arg(long, value_delimiter = ',')]
        t_grid: Vec<f64>,
    },
    /// Exponential-moment certificate.
    Kasminskii {
        #[arg(long)]
        manifold: String,
        #[arg(long)]
        potential: String,
        #[arg(long, default_value_t = 2.0)]
        delta: f64,
        #[arg(long, value_delimiter = ',')]
        test_times: Vec<f64>,
        #[arg(long)]
        samples: Option<usize>,
    },
}

fn mc_params(samples: Option<usize>) -> MonteCarloParams {
    let mut p = MonteCarloParams::default();
    if let Some(n) = samples {
        p.samples = n;
    }
    p
}

fn with_input(task: Task, input: &Input) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(task);
    c.manifold = Some(ManifoldSource::from_arg(&input.manifold));
    c.field = Some(FieldSource::from_arg(&input.field));
    c
}

fn with_manifold(task: Task, manifold: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(task);
    c.manifold = Some(ManifoldSource::from_arg(manifold));
    c
}

fn lower(cmd: Command) -> Result<ExperimentConfig, CliError> {
    Ok(match cmd {
        Command::Bv { cmd } => match cmd {
            BvCmd::Var {
                input,
                method,
                schedule,
                heat,
            } => {
                let params = VariationParams {
                    schedule: schedule.schedule(),
                    extrapolation: schedule.extrapolation()?,
                    heat: heat.params(),
                    ..VariationParams::default()
                };
                with_input(Task::Var { method, params }, &input)
            }
            BvCmd::Polar { input } => with_input(Task::Polar {}, &input),
            BvCmd::Curve { input, schedule, heat } => with_input(
                Task::Curve {
                    schedule: schedule.schedule(),
                    extrapolation: schedule.extrapolation()?,
                    heat: heat.params(),
                },
                &input,
            ),
        },
        Command::Heat { cmd } => match cmd {
            HeatCmd::Apply { input, t, heat } => with_input(Task::HeatApply { t, heat: heat.params() }, &input),
            HeatCmd::KernelRow { manifold, t, vertex, heat } => with_manifold(
                Task::KernelRow {
                    t,
                    vertex,
                    heat: heat.params(),
                },
                &manifold,
            ),
        },
        Command::Curv { cmd } => match cmd {
            CurvCmd::Parts { ricci, dim } => ExperimentConfig::new(Task::Parts { ricci, dim }),
            CurvCmd::Conformal {
                m,
                metric,
                psi,
                dpsi,
                hess,
                laplacian,
            } => ExperimentConfig::new(Task::Conformal {
                m,
                metric: metric.as_deref().map(parse_list).transpose()?,
                data: ConformalData {
                    psi,
                    dpsi: parse_list(&dpsi)?,
                    hess: match hess {
                        Some(h) => parse_list(&h)?,
                        None => vec![0.0; m * m],
                    },
                    laplacian,
                },
            }),
            CurvCmd::Dominate {
                manifold,
                ricci,
                alpha,
                t,
                samples,
                sup_bound_delta,
            } => with_manifold(
                Task::Dominate {
                    ricci: Values::from_arg(&ricci)?,
                    alpha: alpha.map_or(FormSource::default(), FormSource::Csv),
                    t,
                    mc: mc_params(samples),
                    sup_bound: sup_bound_delta.map(|delta| KasminskiiParams {
                        delta,
                        mc: mc_params(samples),
                        ..KasminskiiParams::default()
                    }),
                },
                &manifold,
            ),
        },
        Command::Mc { cmd } => match cmd {
            McCmd::Fk {
                manifold,
                potential,
                terminal,
                t,
                starts,
                samples,
            } => with_manifold(
                Task::Fk {
                    potential: Values::from_arg(&potential)?,
                    terminal: terminal.as_deref().map(Values::from_arg).transpose()?,
                    t,
                    starts: (!starts.is_empty()).then_some(starts),
                    killing: Default::default(),
                    mc: mc_params(samples),
                },
                &manifold,
            ),
            McCmd::Kato {
                manifold,
                potential,
                t_grid,
            } => with_manifold(
                Task::Kato {
                    potential: Values::from_arg(&potential)?,
                    t_grid: if t_grid.is_empty() {
                        (0..=16).map(|k| 0.5f64.powi(k)).collect()
                    } else {
                        t_grid
                    },
                },
                &manifold,
            ),
            McCmd::Kasminskii {
                manifold,
                potential,
                delta,
                test_times,
                samples,
            } => {
                let mut params = KasminskiiParams {
                    delta,
                    mc: mc_params(samples),
                    ..KasminskiiParams::default()
                };
                if !test_times.is_empty() {
                    params.test_times = test_times;
                }
                with_manifold(
                    Task::Kasminskii {
                        potential: Values::from_arg(&potential)?,
                        params,
                    },
                    &manifold,
                )
            }
        },
        Command::Suite {
            only,
            samples,
            perimeter_c,
        } => {
            let mut params = SuiteParams {
                only,
                ..SuiteParams::default()
            };
            if let Some(n) = samples {
                params.samples = n;
            }
            if let Some(c) = perimeter_c {
                params.perimeter_c = c;
            }
            ExperimentConfig::new(Task::Suite { params })
        }
    })
}

fn config_from(cli: Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match (cli.config, cli.command) {
        (Some(path), None) => ExperimentConfig::load(&path)?,
        (None, Some(cmd)) => lower(cmd)?,
        (Some(_), Some(_)) => return Err(CliError::validation("give either --config or a subcommand, not both")),
        (None, None) => return Err(CliError::validation("nothing to do: give --config or a subcommand (see --help)")),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.out.is_some() {
        cfg.out = cli.out;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    cfg.timings |= cli.timings;
    cfg.validate()?;
    Ok(cfg)
}

fn fail(e: &CliError, out: Option<&PathBuf>) -> ExitCode {
    let record = serde_json::to_string_pretty(&e.record()).expect("record serializes");
    eprintln!("{record}");
    if let Some(dir) = out {
        if std::fs::create_dir_all(dir).is_ok() {
            let _ = std::fs::write(dir.join("error.json"), record + "\n");
        }
    }
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = cli.out.clone();
    let cfg = match config_from(cli) {
        Ok(c) => c,
        Err(e) => return fail(&e, out.as_ref()),
    };
    let outcome = match run(&cfg) {
        Ok(o) => o,
        Err(e) => return fail(&e, cfg.out.as_ref()),
    };
    if let Some(dir) = &cfg.out {
        if let Err(e) = outcome.write(dir) {
            return fail(&e, None);
        }
    }
    // A closed pipe (e.g. `| head`) is not an error.
    let _ = writeln!(std::io::stdout().lock(), "{}", outcome.report_json());
    ExitCode::from(outcome.exit_code as u8)
}
