//! Command-line front end.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::decoupling::decouple_network;
use crate::error::{Error, Result};
use crate::greedy::{sample_size, select_facilities, GreedyConfig, GreedyTrace};
use crate::instance::{self, GeneratorSpec};
use crate::model::{ObjectiveBreakdown, SupplyNetwork, DEFAULT_FEASIBILITY_TOL};
use crate::oracles::{CallCounts, ExactOracle, MultiStageOracle, SingleStageOracle, ValueOracle};
use crate::reference::{solve_exhaustive, DEFAULT_MAX_FACILITIES};
use crate::sinkhorn::{default_mu, SinkhornParams, DEFAULT_MAX_ITERS, DEFAULT_TOL};

#[derive(Debug, Parser)]
#[command(name = "mcflp", version, about = "Multi-channel capacitated facility location")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic instance.
    Generate(GenerateArgs),
    /// Select facilities for one instance.
    Solve(SolveArgs),
    /// Run several oracles over a list of budgets and write a CSV report.
    Compare(CompareArgs),
    /// Apply channel decoupling and write the report and the transformed instance.
    Decouple(DecoupleArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// JSON generator spec; flags given explicitly override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long)]
    pub capacity_ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    Exact,
    Sinkhorn2,
    Sinkhorn1,
    Exhaustive,
}

impl OracleKind {
    pub fn name(self) -> &'static str {
        match self {
            OracleKind::Exact => "exact",
            OracleKind::Sinkhorn2 => "sinkhorn2",
            OracleKind::Sinkhorn1 => "sinkhorn1",
            OracleKind::Exhaustive => "exhaustive",
        }
    }
}

/// Solver settings shared by `solve` and `compare`.
#[derive(Debug, Clone, Args, Serialize)]
pub struct SolverArgs {
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
    /// Entropic weight; defaults to 5% of the positive profit range.
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sinkhorn marginal tolerance.
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
    /// Exact-oracle flow quantum; defaults to a power of two near max demand / 1e6.
    #[arg(long)]
    pub flow_quantum: Option<f64>,
    /// Worker threads, 0 for all cores.
    #[arg(long, default_value_t = 0)]
    #[serde(skip)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub instance: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = OracleKind::Sinkhorn2)]
    pub oracle: OracleKind,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Include the per-iteration greedy trace in the solution.
    #[arg(long)]
    pub trace: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub instance: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub k_list: Vec<usize>,
    /// Comma-separated oracle names; the first is the baseline.
    #[arg(long, value_delimiter = ',', default_value = "exact,sinkhorn2,sinkhorn1")]
    pub oracles: Vec<String>,
    /// Greedy runs per (k, oracle), with seeds `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecoupleArgs {
    #[arg(long)]
    pub instance: PathBuf,
    /// Decoupling report (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Transformed instance (JSON).
    #[arg(long)]
    pub network_out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllocationRow {
    pub facility: String,
    pub client: String,
    pub channel: String,
    pub x: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveConfigEcho {
    pub k: usize,
    pub oracle: &'static str,
    pub epsilon: f64,
    pub mu: Option<f64>,
    pub sinkhorn_tol: f64,
    pub sinkhorn_max_iters: usize,
    pub flow_quantum: f64,
    pub feasibility_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveDiagnostics {
    pub oracle: &'static str,
    pub seed: u64,
    pub rng: &'static str,
    pub sample_size: usize,
    pub counters: CallCounts,
    /// `g(S)` reported by the selecting oracle.
    pub oracle_g: f64,
    /// Objective implied by `oracle_g`.
    pub oracle_objective: f64,
    pub config: SolveConfigEcho,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<GreedyTrace>,
}

/// Solution document. `objective` and `allocations` always come from the
/// exact oracle on the selected set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Solution {
    pub selected: Vec<String>,
    pub allocations: Vec<AllocationRow>,
    pub objective: ObjectiveBreakdown,
    pub diagnostics: SolveDiagnostics,
}

/// Outcome of one solver run, before serialisation.
#[derive(Debug, Clone)]
pub struct SolveRun {
    pub selected: Vec<usize>,
    pub solution: Solution,
    pub exact_g: f64,
    pub wall_time: f64,
}

fn exact_oracle(net: &SupplyNetwork, solver: &SolverArgs) -> Result<ExactOracle> {
    let oracle = ExactOracle::new(net);
    match solver.flow_quantum {
        Some(q) => oracle.with_quantum(q),
        None => Ok(oracle),
    }
}

fn sinkhorn_params(net: &SupplyNetwork, solver: &SolverArgs) -> Result<SinkhornParams> {
    let mu = solver
        .mu
        .unwrap_or_else(|| default_mu(net.index().profit_range()));
    if !(mu.is_finite() && mu > 0.0) {
        return Err(Error::InvalidConfig(format!("mu must be > 0, got {mu}")));
    }
    if !(solver.tol > 0.0) || solver.max_iters == 0 {
        return Err(Error::InvalidConfig("tol must be > 0 and max-iters >= 1".into()));
    }
    Ok(SinkhornParams::new(mu).with_tol(solver.tol).with_max_iters(solver.max_iters))
}

/// Runs one solver end to end and scores the selection exactly.
pub fn solve(net: &SupplyNetwork, k: usize, kind: OracleKind, solver: &SolverArgs, keep_trace: bool) -> Result<SolveRun> {
    let start = Instant::now();
    let exact = exact_oracle(net, solver)?;
    let config = GreedyConfig::new(k, solver.epsilon, solver.seed);
    config.check(net.facilities.len())?;

    let (selected, oracle_g, counters, trace, mu) = match kind {
        OracleKind::Exhaustive => {
            let reference = solve_exhaustive(net, k, DEFAULT_MAX_FACILITIES, &exact, false)?;
            (reference.selected, reference.g_value, exact.counters(), None, None)
        }
        OracleKind::Exact => {
            let (s, t) = select_facilities(net, &config, &exact)?;
            (s, t.g_value, t.counters, Some(t), None)
        }
        OracleKind::Sinkhorn2 => {
            let params = sinkhorn_params(net, solver)?;
            let oracle = MultiStageOracle::with_params(net, params);
            let (s, t) = select_facilities(net, &config, &oracle)?;
            (s, t.g_value, t.counters, Some(t), Some(params.mu))
        }
        OracleKind::Sinkhorn1 => {
            let params = sinkhorn_params(net, solver)?;
            let oracle = SingleStageOracle::with_params(net, params);
            let (s, t) = select_facilities(net, &config, &oracle)?;
            (s, t.g_value, t.counters, Some(t), Some(params.mu))
        }
    };

    let mut sorted = selected.clone();
    sorted.sort_unstable();
    let scored = exact.evaluate(&sorted)?;
    let plan = scored.plan.expect("exact oracle returns a plan");
    let objective = exact.index().evaluate(&sorted, &plan, DEFAULT_FEASIBILITY_TOL)?;
    let allocations = plan
        .iter()
        .filter(|&(_, x)| x > 1e-12)
        .map(|(key, x)| AllocationRow {
            facility: net.facilities[key.facility].id.clone(),
            client: net.clients[key.client].id.clone(),
            channel: exact.index().channels[key.channel].clone(),
            x,
        })
        .collect();
    let constant = net.penalty * net.total_demand();
    let oracle_objective = net.fixed_cost(&selected) + constant - oracle_g;
    let sample = trace.as_ref().map_or(0, |t| t.sample_size);

    let solution = Solution {
        selected: net.facility_ids(&sorted),
        allocations,
        objective,
        diagnostics: SolveDiagnostics {
            oracle: kind.name(),
            seed: solver.seed,
            rng: crate::greedy::RNG_ALGORITHM,
            sample_size: if kind == OracleKind::Exhaustive {
                0
            } else {
                sample.max(sample_size(net.facilities.len(), k, solver.epsilon))
            },
            counters,
            oracle_g,
            oracle_objective,
            config: SolveConfigEcho {
                k,
                oracle: kind.name(),
                epsilon: solver.epsilon,
                mu,
                sinkhorn_tol: solver.tol,
                sinkhorn_max_iters: solver.max_iters,
                flow_quantum: exact.quantum(),
                feasibility_tol: DEFAULT_FEASIBILITY_TOL,
            },
            trace: if keep_trace { trace } else { None },
        },
    };
    Ok(SolveRun {
        selected: sorted,
        exact_g: scored.g_value,
        solution,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

fn parse_oracle(name: &str) -> Result<OracleKind> {
    OracleKind::from_str(name, true).map_err(|_| {
        Error::InvalidConfig(format!(
            "unknown oracle `{name}` (expected exact, sinkhorn2, sinkhorn1 or exhaustive)"
        ))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub k: usize,
    pub run: usize,
    pub seed: u64,
    pub oracle: &'static str,
    pub selected_count: usize,
    #[serde(rename = "J")]
    pub objective: f64,
    pub delta_j_pct: f64,
    pub overlap_pct: f64,
    pub g_oracle: f64,
    pub g_exact: f64,
    pub delta_g_pct: f64,
    pub wall_time_s: f64,
    pub oracle_invocations: u64,
    pub stage1_calls: u64,
    pub stage2_calls: u64,
}

/// Percentage of `baseline` also present in `other`; 100 when both are empty.
pub fn overlap_pct(other: &[usize], baseline: &[usize]) -> f64 {
    if baseline.is_empty() {
        return if other.is_empty() { 100.0 } else { 0.0 };
    }
    let a: BTreeSet<_> = other.iter().collect();
    let common = baseline.iter().filter(|i| a.contains(i)).count();
    100.0 * common as f64 / baseline.len() as f64
}

/// `(value - reference) / reference * 100`, or 0 when both are 0.
pub fn relative_pct(value: f64, reference: f64) -> f64 {
    if reference == 0.0 {
        if value == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(value)
        }
    } else {
        (value - reference) / reference.abs() * 100.0
    }
}

pub fn compare(net: &SupplyNetwork, args: &CompareArgs) -> Result<Vec<CompareRow>> {
    let kinds: Vec<OracleKind> = args.oracles.iter().map(|o| parse_oracle(o)).collect::<Result<_>>()?;
    if kinds.is_empty() {
        return Err(Error::InvalidConfig("no oracles given".into()));
    }
    if args.runs == 0 {
        return Err(Error::InvalidConfig("runs must be at least 1".into()));
    }
    let mut rows = Vec::new();
    for &k in &args.k_list {
        for run in 0..args.runs {
            let mut solver = args.solver.clone();
            solver.seed = args.solver.seed + run as u64;
            let mut baseline: Option<(f64, Vec<usize>)> = None;
            for &kind in &kinds {
                let out = solve(net, k, kind, &solver, false)?;
                let d = &out.solution.diagnostics;
                let j = out.solution.objective.total;
                let (base_j, base_s) = baseline.get_or_insert_with(|| (j, out.selected.clone())).clone();
                rows.push(CompareRow {
                    k,
                    run,
                    seed: solver.seed,
                    oracle: kind.name(),
                    selected_count: out.selected.len(),
                    objective: j,
                    delta_j_pct: relative_pct(j, base_j),
                    overlap_pct: overlap_pct(&out.selected, &base_s),
                    g_oracle: d.oracle_g,
                    g_exact: out.exact_g,
                    delta_g_pct: relative_pct(d.oracle_g, out.exact_g),
                    wall_time_s: out.wall_time,
                    oracle_invocations: d.counters.oracle_invocations,
                    stage1_calls: d.counters.stage1_calls,
                    stage2_calls: d.counters.stage2_calls,
                });
            }
        }
    }
    Ok(rows)
}

fn load_instance(path: &PathBuf) -> Result<SupplyNetwork> {
    let (net, report) = instance::load(path)?;
    if report.penalty_defaulted {
        log::info!("penalty_C missing; defaulted to {}", net.penalty);
    }
    Ok(net)
}

fn generator_spec(args: &GenerateArgs) -> Result<GeneratorSpec> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?
        }
        None => GeneratorSpec::default(),
    };
    if let Some(v) = args.m {
        spec.m = v;
    }
    if let Some(v) = args.n {
        spec.n = v;
    }
    if let Some(v) = args.channels {
        spec.channels = v;
    }
    if let Some(v) = args.density {
        spec.edge_density = v;
    }
    if let Some(v) = args.capacity_ratio {
        spec.capacity_ratio = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    Ok(spec)
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(f)
}

/// Executes a parsed command, printing a short summary to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => {
            let spec = generator_spec(&args)?;
            let net = instance::generate(&spec)?;
            instance::save(&args.out, &net)?;
            println!(
                "wrote {} ({} facilities, {} clients, {} channels, {} edges)",
                args.out.display(),
                net.facilities.len(),
                net.clients.len(),
                net.channels.len(),
                net.edges.len()
            );
        }
        Command::Solve(args) => {
            let net = load_instance(&args.instance)?;
            let out = with_threads(args.solver.threads, || {
                solve(&net, args.k, args.oracle, &args.solver, args.trace)
            })?;
            let s = &out.solution;
            println!("J = {:.6}", s.objective.total);
            println!("|S| = {}", s.selected.len());
            println!("wall time = {:.3} s", out.wall_time);
            let c = &s.diagnostics.counters;
            println!(
                "oracle calls = {}, sinkhorn stage-1 = {}, stage-2 = {}",
                c.oracle_invocations, c.stage1_calls, c.stage2_calls
            );
            if let Some(path) = &args.out {
                instance::save_json(path, s)?;
            }
        }
        Command::Compare(args) => {
            let net = load_instance(&args.instance)?;
            let rows = with_threads(args.solver.threads, || compare(&net, &args))?;
            let mut w = csv::Writer::from_path(&args.out).map_err(|e| Error::Oracle(e.to_string()))?;
            for row in &rows {
                w.serialize(row).map_err(|e| Error::Oracle(e.to_string()))?;
            }
            w.flush()?;
            println!("wrote {} rows to {}", rows.len(), args.out.display());
        }
        Command::Decouple(args) => {
            let net = load_instance(&args.instance)?;
            let report = decouple_network(&net);
            instance::save_json(&args.out, &report)?;
            if let Some(path) = &args.network_out {
                instance::save(path, &report.network)?;
            }
            println!(
                "{} facilities decoupled, {} coupled, {} reduced",
                report.decoupled.len(),
                report.coupled.len(),
                report.reductions.len()
            );
        }
    }
    Ok(())
}

/// Process exit code for an error: 1 for bad input, 2 for runtime failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) | Error::Schema(_) | Error::InvalidNetwork(_) | Error::UnknownFacility(_) => 1,
        _ => 2,
    }
}
