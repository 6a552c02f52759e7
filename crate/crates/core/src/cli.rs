//! Command-line front end.
//!
//! Every command reads one JSON config: the model parameters plus optional
//! defaults (`horizon`, `theta_res`, `initial`, `y`) that flags override.
//! Exit status: 0 on success, 2 for bad input, 3 for numerical failures.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::mdp::{self, PolicyTable, ValueIterationConfig, ValueTable};
use crate::model::{enumerate_mdp_states, enumerate_states, enumerate_wait_states, ModelParams, Reservation, State};
use crate::sim::{self, SimConfig, SimPolicy};
use crate::transient::{self, Objective, TransientModel};
use crate::waiting::{self, ChainMode};

#[derive(Debug, Parser)]
#[command(name = "callcenter", version, about = "Multi-level call center: reservation policies, transient costs, service levels")]
pub struct Cli {
    /// Worker threads for parallel scans (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List the states of a model as `index,state`.
    Enumerate(EnumerateArgs),
    /// Finite-horizon optimal policy for the 2-level model.
    MdpFinite(MdpFiniteArgs),
    /// Discounted infinite-horizon optimal policy for the 2-level model.
    MdpDiscounted(MdpDiscountedArgs),
    /// Expected abandonment and blocking cost over (0, T).
    Cost(CostArgs),
    /// Best reservation vector for a cost or service-level objective (JSON).
    Scan(ScanArgs),
    /// Service-level curves P(y) and per-level P^j(y).
    Waitdist(WaitArgs),
    /// Monte Carlo estimates (JSON report).
    Simulate(SimArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Model config (JSON).
    #[arg(short, long)]
    pub config: PathBuf,
    /// Output file; stdout when omitted.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EnumerateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Reservation vector, e.g. `0,1,1`.
    #[arg(long, value_parser = parse_theta)]
    pub theta: Option<Reservation>,
    /// List the tagged-caller state space of this level instead.
    #[arg(long)]
    pub level: Option<usize>,
    /// List the 2-level decision-model states instead.
    #[arg(long, conflicts_with_all = ["theta", "level"])]
    pub mdp: bool,
}

#[derive(Debug, Args)]
pub struct MdpFiniteArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of decision steps.
    #[arg(short = 'M', long, default_value_t = 100)]
    pub steps: usize,
    /// Also write the value table here.
    #[arg(long)]
    pub values: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MdpDiscountedArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = ValueIterationConfig::default().delta)]
    pub delta: f64,
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = ValueIterationConfig::default().max_iter)]
    pub max_iter: usize,
    /// Start from the finite-horizon values at m = 0 with this many steps.
    #[arg(long)]
    pub init_steps: Option<usize>,
    #[arg(long)]
    pub values: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Horizon {
    /// Horizon T.
    #[arg(short = 'T', long)]
    pub horizon: Option<f64>,
    /// Initial state, e.g. `1,0,2,0,1,0,0` (default: empty system).
    #[arg(long)]
    pub initial: Option<String>,
}

#[derive(Debug, Args)]
pub struct ThetaChoice {
    #[arg(long, value_parser = parse_theta)]
    pub theta: Option<Reservation>,
    /// Evaluate every reservation vector.
    #[arg(long, conflicts_with = "theta")]
    pub all_theta: bool,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub horizon: Horizon,
    #[command(flatten)]
    pub theta: ThetaChoice,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScanObjective {
    Cost,
    ServiceLevel,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub horizon: Horizon,
    #[arg(long, value_enum, default_value = "cost")]
    pub objective: ScanObjective,
    /// Answer-time target for the service-level objective.
    #[arg(long, value_parser = parse_number)]
    pub y: Option<f64>,
    #[arg(long, default_value = "reduced")]
    pub mode: ChainMode,
}

#[derive(Debug, Args)]
pub struct WaitArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub horizon: Horizon,
    #[command(flatten)]
    pub theta: ThetaChoice,
    /// Targets, comma separated; fractions like `1/3` are accepted.
    #[arg(long, value_delimiter = ',', value_parser = parse_number)]
    pub y: Vec<f64>,
    /// Evenly spaced targets `start,stop,count`.
    #[arg(long, value_delimiter = ',', value_parser = parse_number, conflicts_with = "y")]
    pub y_grid: Vec<f64>,
    #[arg(long, default_value = "reduced")]
    pub mode: ChainMode,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub horizon: Horizon,
    #[arg(long, value_parser = parse_theta)]
    pub theta: Option<Reservation>,
    /// Follow the finite-horizon optimal policy with this many steps (2 levels).
    #[arg(long, conflicts_with_all = ["theta", "mdp_discounted"])]
    pub mdp_steps: Option<usize>,
    /// Follow the discounted optimal policy (2 levels).
    #[arg(long, conflicts_with = "theta")]
    pub mdp_discounted: bool,
    #[arg(short = 'n', long, default_value_t = 100_000)]
    pub replications: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', value_parser = parse_number)]
    pub y: Vec<f64>,
    /// Report time fractions per state.
    #[arg(long)]
    pub occupancy: bool,
}

/// Model parameters plus optional command defaults.
#[derive(Debug, Clone, Deserialize)]
pub struct Config {
    #[serde(flatten)]
    pub params: ModelParams,
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default)]
    pub theta_res: Option<Vec<u32>>,
    #[serde(default)]
    pub initial: Option<String>,
    #[serde(default)]
    pub y: Option<Vec<f64>>,
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::params("config", format!("{}: {e}", path.display())))?;
        let c: Config = serde_json::from_str(&text)?;
        c.params.validate()?;
        Ok(c)
    }

    fn horizon(&self, flag: Option<f64>) -> Result<f64> {
        let t = flag.or(self.horizon).ok_or_else(|| Error::params("T", "no horizon given (flag -T or config `horizon`)"))?;
        if t > 0.0 && t.is_finite() {
            Ok(t)
        } else {
            Err(Error::params("T", format!("must be positive, got {t}")))
        }
    }

    fn initial(&self, flag: &Option<String>) -> Result<State> {
        match flag.as_ref().or(self.initial.as_ref()) {
            Some(s) => {
                let st: State = s.parse()?;
                if st.len() != self.params.state_len() {
                    return Err(Error::InvalidState {
                        state: s.clone(),
                        reason: format!("expected {} coordinates", self.params.state_len()),
                    });
                }
                Ok(st)
            }
            None => Ok(State::zero(self.params.state_len())),
        }
    }

    fn theta(&self, flag: &Option<Reservation>) -> Result<Reservation> {
        let r = match (flag, &self.theta_res) {
            (Some(r), _) => r.clone(),
            (None, Some(v)) => Reservation::new(v.clone()),
            (None, None) => Reservation::zero(&self.params),
        };
        r.validate(&self.params)?;
        Ok(r)
    }

    fn thetas(&self, choice: &ThetaChoice) -> Result<Vec<Reservation>> {
        if choice.all_theta {
            Ok(Reservation::grid(&self.params))
        } else {
            Ok(vec![self.theta(&choice.theta)?])
        }
    }
}

fn parse_theta(s: &str) -> std::result::Result<Reservation, String> {
    let inner = s.trim().trim_start_matches('(').trim_end_matches(')');
    inner
        .split(',')
        .map(|x| x.trim().parse::<u32>().map_err(|e| format!("`{x}`: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(Reservation::new)
}

fn parse_number(s: &str) -> std::result::Result<f64, String> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|e| format!("`{s}`: {e}"))?;
            let b: f64 = b.trim().parse().map_err(|e| format!("`{s}`: {e}"))?;
            a / b
        }
        None => s.parse().map_err(|e| format!("`{s}`: {e}"))?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{s}` is not a finite number"))
    }
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn theta_header(p: &ModelParams) -> String {
    (2..=p.num_levels).map(|i| format!("theta{i}")).collect::<Vec<_>>().join(",")
}

fn theta_cells(r: &Reservation) -> String {
    r.theta_res.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
}

fn ys(c: &Config, a: &WaitArgs) -> Result<Vec<f64>> {
    let ys = if !a.y_grid.is_empty() {
        if a.y_grid.len() != 3 {
            return Err(Error::params("y-grid", "expected start,stop,count"));
        }
        let (lo, hi, n) = (a.y_grid[0], a.y_grid[1], a.y_grid[2]);
        if n < 1.0 || n.fract() != 0.0 || hi < lo {
            return Err(Error::params("y-grid", "expected start,stop,count with start <= stop and count >= 1"));
        }
        let n = n as usize;
        (0..n)
            .map(|i| if n == 1 { lo } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
            .collect()
    } else if !a.y.is_empty() {
        a.y.clone()
    } else {
        c.y.clone().ok_or_else(|| Error::params("y", "no targets given (flag --y, --y-grid or config `y`)"))?
    };
    if let Some(y) = ys.iter().find(|y| !(**y >= 0.0)) {
        return Err(Error::params("y", format!("targets must be nonnegative, got {y}")));
    }
    Ok(ys)
}

/// Runs one parsed invocation.
pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::params("threads", "must be at least 1"));
        }
        // Fails only if a global pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Enumerate(a) => enumerate(a),
        Command::MdpFinite(a) => mdp_finite(a),
        Command::MdpDiscounted(a) => mdp_discounted(a),
        Command::Cost(a) => cost(a),
        Command::Scan(a) => scan(a),
        Command::Waitdist(a) => waitdist(a),
        Command::Simulate(a) => simulate(a),
    }
}

fn enumerate(a: EnumerateArgs) -> Result<()> {
    let c = Config::from_file(&a.common.config)?;
    let space = if a.mdp {
        enumerate_mdp_states(&c.params)?
    } else {
        let res = c.theta(&a.theta)?;
        match a.level {
            Some(j) => enumerate_wait_states(j, &c.params, &res)?,
            None => enumerate_states(&c.params, &res)?,
        }
    };
    let mut w = output(&a.common.out)?;
    writeln!(w, "index,state")?;
    for (i, s) in space.iter().enumerate() {
        writeln!(w, "{i},\"{s}\"")?;
    }
    w.flush()?;
    Ok(())
}

fn mdp_finite(a: MdpFiniteArgs) -> Result<()> {
    let c = Config::from_file(&a.common.config)?;
    let sol = mdp::backward_induction(&c.params, a.steps)?;
    write_mdp(&a.common.out, &a.values, &sol.space, &sol.policy, &sol.values)
}

fn mdp_discounted(a: MdpDiscountedArgs) -> Result<()> {
    let c = Config::from_file(&a.common.config)?;
    let cfg = ValueIterationConfig {
        delta: a.delta,
        alpha: a.alpha,
        max_iter: a.max_iter,
        tol: a.tol,
    };
    let init = match a.init_steps {
        Some(m) => match mdp::backward_induction(&c.params, m)?.values {
            ValueTable::FiniteHorizon { mut values } => Some(values.swap_remove(0)),
            ValueTable::Stationary { values } => Some(values),
        },
        None => None,
    };
    let sol = mdp::value_iteration_discounted(&c.params, &cfg, init.as_deref())?;
    let last = sol.residuals.last().copied().unwrap_or(0.0);
    if sol.converged {
        eprintln!("converged after {} sweeps, residual {last:e}", sol.iterations);
    } else {
        eprintln!("warning: not converged after {} sweeps, residual {last:e}", sol.iterations);
    }
    write_mdp(&a.common.out, &a.values, &sol.space, &sol.policy, &sol.values)
}

fn write_mdp(
    out: &Option<PathBuf>,
    values: &Option<PathBuf>,
    space: &crate::model::StateSpace,
    policy: &PolicyTable,
    table: &ValueTable,
) -> Result<()> {
    let mut w = output(out)?;
    policy.write_csv(space, &mut w)?;
    w.flush()?;
    if let Some(path) = values {
        let mut w = BufWriter::new(File::create(path)?);
        table.write_csv(space, &mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn cost(a: CostArgs) -> Result<()> {
    use rayon::prelude::*;
    let c = Config::from_file(&a.common.config)?;
    let t = c.horizon(a.horizon.horizon)?;
    let nu0 = c.initial(&a.horizon.initial)?;
    let thetas = c.thetas(&a.theta)?;
    let values = thetas
        .par_iter()
        .map(|th| TransientModel::new(&c.params, th)?.expected_cost(&nu0, t))
        .collect::<Result<Vec<_>>>()?;
    let mut w = output(&a.common.out)?;
    writeln!(w, "{},cost", theta_header(&c.params))?;
    for (th, v) in thetas.iter().zip(values) {
        writeln!(w, "{},{v}", theta_cells(th))?;
    }
    w.flush()?;
    Ok(())
}

fn scan(a: ScanArgs) -> Result<()> {
    let c = Config::from_file(&a.common.config)?;
    let t = c.horizon(a.horizon.horizon)?;
    let nu0 = c.initial(&a.horizon.initial)?;
    let objective = match a.objective {
        ScanObjective::Cost => Objective::ExpectedCost,
        ScanObjective::ServiceLevel => {
            let y = a.y.or_else(|| c.y.as_ref().and_then(|v| v.first().copied()));
            let y = y.ok_or_else(|| Error::params("y", "service-level objective needs --y"))?;
            Objective::ServiceLevel { y, mode: a.mode }
        }
    };
    let result = transient::optimize_reservation(&c.params, &nu0, t, objective)?;
    let mut w = output(&a.common.out)?;
    serde_json::to_writer_pretty(&mut w, &result)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn waitdist(a: WaitArgs) -> Result<()> {
    let c = Config::from_file(&a.common.config)?;
    let t = c.horizon(a.horizon.horizon)?;
    let nu0 = c.initial(&a.horizon.initial)?;
    let ys = ys(&c, &a)?;
    let thetas = c.thetas(&a.theta)?;
    let many = thetas.len() > 1;
    let results = thetas
        .iter()
        .map(|th| waiting::service_level(&c.params, th, &nu0, t, &ys, a.mode))
        .collect::<Result<Vec<_>>>()?;
    let mut w = output(&a.common.out)?;
    let levels: Vec<String> = (1..=c.params.num_levels).map(|j| format!("P{j}")).collect();
    if many {
        write!(w, "{},", theta_header(&c.params))?;
    }
    writeln!(w, "y,P,{}", levels.join(","))?;
    for (th, rows) in thetas.iter().zip(results) {
        for r in rows {
            if many {
                write!(w, "{},", theta_cells(th))?;
            }
            let per: Vec<String> = r.per_level.iter().map(|x| x.to_string()).collect();
            writeln!(w, "{},{},{}", r.y, r.overall, per.join(","))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn simulate(a: SimArgs) -> Result<()> {
    let c = Config::from_file(&a.common.config)?;
    let t = c.horizon(a.horizon.horizon)?;
    let nu0 = c.initial(&a.horizon.initial)?;
    let policy = if let Some(m) = a.mdp_steps {
        SimPolicy::Table(mdp::backward_induction(&c.params, m)?.policy)
    } else if a.mdp_discounted {
        SimPolicy::Table(mdp::value_iteration_discounted(&c.params, &ValueIterationConfig::default(), None)?.policy)
    } else {
        SimPolicy::Reservation(c.theta(&a.theta)?)
    };
    let y = if a.y.is_empty() { c.y.clone().unwrap_or_default() } else { a.y };
    let cfg = SimConfig {
        replications: a.replications,
        horizon: t,
        seed: a.seed,
        policy,
        occupancy: a.occupancy,
        wait_targets: y,
    };
    let report = sim::simulate(&c.params, &cfg, &nu0)?;
    let mut w = output(&a.common.out)?;
    serde_json::to_writer_pretty(&mut w, &report)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(Error::Io(e)) if e.kind() == io::ErrorKind::BrokenPipe => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                2
            } else {
                3
            }
        }
    }
}
