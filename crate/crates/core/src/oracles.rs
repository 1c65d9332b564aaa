//! Value oracles for `g(S)`, the best allocation profit with facility set `S` open.
//!
//! Facility sets are given as positions into the (canonical) network's
//! facility list.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use crate::decoupling::{decouple_network, reduce_indexed, DecoupleReport, ReducedNetwork};
use crate::error::{Error, Result};
use crate::model::{AllocationPlan, NetworkIndex, SupplyNetwork};
use crate::sinkhorn::{clip_to_marginals, default_mu, sinkhorn_solve, SinkhornParams, TransportProblem};

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct OracleDiagnostics {
    pub sinkhorn_calls: u64,
    pub iterations: u64,
    pub converged: bool,
    pub max_marginal_violation: f64,
    #[serde(skip)]
    pub wall_time: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub g_value: f64,
    /// Absent for the single-stage oracle.
    pub plan: Option<AllocationPlan>,
    pub diagnostics: OracleDiagnostics,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CallCounts {
    pub stage1_calls: u64,
    pub stage2_calls: u64,
    pub oracle_invocations: u64,
}

impl CallCounts {
    pub fn sinkhorn_calls(&self) -> u64 {
        self.stage1_calls + self.stage2_calls
    }
}

/// Monotone counters shared by concurrent oracle calls.
#[derive(Debug, Default)]
pub struct CallCounter {
    stage1: AtomicU64,
    stage2: AtomicU64,
    invocations: AtomicU64,
}

impl CallCounter {
    pub fn snapshot(&self) -> CallCounts {
        CallCounts {
            stage1_calls: self.stage1.load(AtomicOrdering::Relaxed),
            stage2_calls: self.stage2.load(AtomicOrdering::Relaxed),
            oracle_invocations: self.invocations.load(AtomicOrdering::Relaxed),
        }
    }

    fn bump(counter: &AtomicU64, by: u64) {
        counter.fetch_add(by, AtomicOrdering::Relaxed);
    }
}

pub trait ValueOracle: Sync {
    fn name(&self) -> &'static str;

    fn evaluate(&self, set: &[usize]) -> Result<OracleResult>;

    fn counters(&self) -> CallCounts;
}

/// Largest power of two not above `max_demand / 1e6`.
pub fn default_flow_quantum(max_demand: f64) -> f64 {
    if max_demand > 0.0 && max_demand.is_finite() {
        2f64.powi((max_demand / 1e6).log2().floor() as i32)
    } else {
        1.0
    }
}

fn check_set(set: &[usize], m: usize) -> Result<()> {
    for (k, &i) in set.iter().enumerate() {
        if i >= m {
            return Err(Error::Oracle(format!("facility position {i} out of range (m = {m})")));
        }
        if set[..k].contains(&i) {
            return Err(Error::Oracle(format!("facility position {i} listed twice")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct FlowArc {
    to: usize,
    rev: usize,
    cap: i64,
    cost: f64,
}

/// Residual graph for successive shortest paths.
#[derive(Debug, Default)]
struct FlowGraph {
    adj: Vec<Vec<FlowArc>>,
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl FlowGraph {
    fn add_node(&mut self) -> usize {
        self.adj.push(Vec::new());
        self.adj.len() - 1
    }

    /// Returns the arc's position `(from, index)`.
    fn add_arc(&mut self, from: usize, to: usize, cap: i64, cost: f64) -> (usize, usize) {
        let fwd = self.adj[from].len();
        let bwd = self.adj[to].len();
        self.adj[from].push(FlowArc { to, rev: bwd, cap, cost });
        self.adj[to].push(FlowArc { to: from, rev: fwd, cap: 0, cost: -cost });
        (from, fwd)
    }

    fn flow_on(&self, (from, k): (usize, usize)) -> i64 {
        let a = &self.adj[from][k];
        self.adj[a.to][a.rev].cap
    }

    /// Min-cost flow of any amount from `s` to `t`; nodes must be numbered
    /// in topological order of the initial arcs.
    fn min_cost_flow(&mut self, s: usize, t: usize) {
        let n = self.adj.len();
        let mut pot = vec![f64::INFINITY; n];
        pot[s] = 0.0;
        for u in 0..n {
            if pot[u].is_finite() {
                for a in &self.adj[u] {
                    if a.cap > 0 && pot[u] + a.cost < pot[a.to] {
                        pot[a.to] = pot[u] + a.cost;
                    }
                }
            }
        }
        for p in &mut pot {
            if !p.is_finite() {
                *p = 0.0;
            }
        }

        let mut dist = vec![f64::INFINITY; n];
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; n];
        let mut done = vec![false; n];
        let mut heap = BinaryHeap::new();
        loop {
            dist.fill(f64::INFINITY);
            parent.fill(None);
            done.fill(false);
            dist[s] = 0.0;
            heap.push(HeapItem(0.0, s));
            while let Some(HeapItem(d, u)) = heap.pop() {
                if done[u] {
                    continue;
                }
                done[u] = true;
                for (k, a) in self.adj[u].iter().enumerate() {
                    if a.cap <= 0 || done[a.to] {
                        continue;
                    }
                    let nd = d + (a.cost + pot[u] - pot[a.to]).max(0.0);
                    if nd < dist[a.to] {
                        dist[a.to] = nd;
                        parent[a.to] = Some((u, k));
                        heap.push(HeapItem(nd, a.to));
                    }
                }
            }
            if !dist[t].is_finite() {
                break;
            }
            let dt = dist[t];
            for v in 0..n {
                pot[v] += dist[v].min(dt);
            }
            let path_cost = pot[t] - pot[s];
            if path_cost >= -1e-12 * (1.0 + path_cost.abs()) {
                break;
            }
            let mut push = i64::MAX;
            let mut v = t;
            while let Some((u, k)) = parent[v] {
                push = push.min(self.adj[u][k].cap);
                v = u;
            }
            let mut v = t;
            while let Some((u, k)) = parent[v] {
                self.adj[u][k].cap -= push;
                let (to, rev) = (self.adj[u][k].to, self.adj[u][k].rev);
                self.adj[to][rev].cap += push;
                v = u;
            }
        }
    }
}

/// Exact `g(S)` by min-cost flow on
/// source -> facility (fcap) -> facility-channel (ccap) -> client (cost -p) -> sink (d).
///
/// Capacities are rounded down to whole multiples of the flow quantum, so
/// plans are always feasible and `g` is optimal to within one quantum per
/// capacity.
#[derive(Debug)]
pub struct ExactOracle {
    index: NetworkIndex,
    quantum: f64,
    counter: CallCounter,
}

impl ExactOracle {
    pub fn new(net: &SupplyNetwork) -> Self {
        Self::from_index(NetworkIndex::build(net))
    }

    pub fn from_index(index: NetworkIndex) -> Self {
        let quantum = default_flow_quantum(index.max_demand());
        ExactOracle {
            index,
            quantum,
            counter: CallCounter::default(),
        }
    }

    pub fn with_quantum(mut self, quantum: f64) -> Result<Self> {
        if !(quantum.is_finite() && quantum > 0.0) {
            return Err(Error::InvalidConfig(format!("flow quantum must be > 0, got {quantum}")));
        }
        self.quantum = quantum;
        Ok(self)
    }

    pub fn quantum(&self) -> f64 {
        self.quantum
    }

    pub fn index(&self) -> &NetworkIndex {
        &self.index
    }

    fn units(&self, x: f64) -> i64 {
        (x / self.quantum + 1e-9).floor() as i64
    }

    fn solve(&self, set: &[usize]) -> AllocationPlan {
        let idx = &self.index;
        let mut graph = FlowGraph::default();
        let source = graph.add_node();
        let mut channel_nodes = Vec::new();
        for &i in set {
            let f = &idx.facilities[i];
            let cap = self.units(f.fcap);
            if cap <= 0 {
                continue;
            }
            let node = graph.add_node();
            graph.add_arc(source, node, cap, 0.0);
            for &(c, ccap) in &f.channel_caps {
                let cap = self.units(ccap);
                if cap > 0 && f.arcs.iter().any(|a| a.channel == c && a.profit > 0.0) {
                    let ch = graph.add_node();
                    graph.add_arc(node, ch, cap, 0.0);
                    channel_nodes.push((i, c, ch));
                }
            }
        }
        let client_base = graph.adj.len();
        let n = idx.client_count();
        for _ in 0..n {
            graph.add_node();
        }
        let sink = graph.add_node();
        let mut shipping = Vec::new();
        for &(i, c, ch) in &channel_nodes {
            for a in idx.facilities[i].arcs.iter().filter(|a| a.channel == c && a.profit > 0.0) {
                let cap = self.units(idx.demands[a.client]);
                if cap > 0 {
                    let pos = graph.add_arc(ch, client_base + a.client, cap, -a.profit);
                    shipping.push((i, a.client, c, pos));
                }
            }
        }
        for j in 0..n {
            let cap = self.units(idx.demands[j]);
            if cap > 0 {
                graph.add_arc(client_base + j, sink, cap, 0.0);
            }
        }

        graph.min_cost_flow(source, sink);

        let mut plan = AllocationPlan::new();
        for (i, j, c, pos) in shipping {
            let flow = graph.flow_on(pos);
            if flow > 0 {
                plan.set(i, j, c, (flow as f64 * self.quantum / idx.demands[j]).min(1.0));
            }
        }
        plan
    }
}

impl ValueOracle for ExactOracle {
    fn name(&self) -> &'static str {
        "exact"
    }

    fn evaluate(&self, set: &[usize]) -> Result<OracleResult> {
        check_set(set, self.index.facility_count())?;
        CallCounter::bump(&self.counter.invocations, 1);
        let start = Instant::now();
        let plan = self.solve(set);
        let g_value = self.index.plan_profit(&plan);
        Ok(OracleResult {
            g_value,
            plan: Some(plan),
            diagnostics: OracleDiagnostics {
                converged: true,
                wall_time: start.elapsed(),
                ..Default::default()
            },
        })
    }

    fn counters(&self) -> CallCounts {
        self.counter.snapshot()
    }
}

/// One row of the stage-1 problem: a reduced facility of the decoupled network.
#[derive(Debug, Clone)]
struct Unit {
    /// Position in the decoupled network index.
    decoupled: usize,
    /// Position in the reduced network.
    reduced: usize,
    /// Decoupled channel position to original channel position.
    channel_map: Vec<(usize, usize)>,
}

/// Decoupled and reduced views shared by both Sinkhorn oracles.
#[derive(Debug)]
struct Staged {
    original: NetworkIndex,
    decoupled: NetworkIndex,
    reduced: ReducedNetwork,
    /// Units per original facility position.
    units: Vec<Vec<Unit>>,
    params: SinkhornParams,
    counter: CallCounter,
}

impl Staged {
    fn build(net: &SupplyNetwork, params: SinkhornParams) -> (Self, DecoupleReport) {
        let original = NetworkIndex::build(net);
        let report = decouple_network(net);
        let decoupled = NetworkIndex::build(&report.network);
        let reduced = reduce_indexed(&report.network, &decoupled);
        let channel_pos: BTreeMap<&str, usize> = original
            .channels
            .iter()
            .enumerate()
            .map(|(k, c)| (c.as_str(), k))
            .collect();
        let dec_pos: BTreeMap<&str, usize> = report
            .network
            .facilities
            .iter()
            .enumerate()
            .map(|(k, f)| (f.id.as_str(), k))
            .collect();
        let mut units = vec![Vec::new(); original.facility_count()];
        for (r, rf) in reduced.facilities.iter().enumerate() {
            let origin = report.original_facility(&rf.id);
            let i = net.facility_position(origin).expect("decoupled facility has an origin");
            let d = dec_pos[rf.id.as_str()];
            let channel_map = decoupled.facilities[d]
                .channel_caps
                .iter()
                .map(|&(c, _)| (c, channel_pos[decoupled.channels[c].as_str()]))
                .collect();
            units[i].push(Unit {
                decoupled: d,
                reduced: r,
                channel_map,
            });
        }
        let staged = Staged {
            original,
            decoupled,
            reduced,
            units,
            params,
            counter: CallCounter::default(),
        };
        (staged, report)
    }

    fn selected_units(&self, set: &[usize]) -> Result<Vec<(usize, &Unit)>> {
        check_set(set, self.original.facility_count())?;
        let mut sorted = set.to_vec();
        sorted.sort_unstable();
        Ok(sorted
            .into_iter()
            .flat_map(|i| self.units[i].iter().map(move |u| (i, u)))
            .collect())
    }

    /// Stage 1 over the abstract channel; returns the clipped coupling.
    fn stage_one(&self, units: &[(usize, &Unit)], diag: &mut OracleDiagnostics) -> Result<Array2<f64>> {
        let n = self.reduced.demands.len();
        let rows = units.len();
        let mut profit = Array2::zeros((rows, n));
        let mut supply = Vec::with_capacity(rows);
        for (r, (_, u)) in units.iter().enumerate() {
            let rf = &self.reduced.facilities[u.reduced];
            supply.push(rf.fcap);
            for &(j, p) in &rf.profits {
                profit[[r, j]] = p.max(0.0);
            }
        }
        let demand = self.reduced.demands.clone();
        let problem = TransportProblem::new(supply, demand, profit);
        let plan = sinkhorn_solve(&problem, &self.params)?;
        CallCounter::bump(&self.counter.stage1, 1);
        record(diag, plan.iterations, plan.converged, plan.marginal_violation);
        let coupling = unshippable_removed(plan.coupling, &problem);
        Ok(coupling)
    }

    fn abstract_profit(&self, units: &[(usize, &Unit)], coupling: &Array2<f64>) -> f64 {
        units
            .iter()
            .enumerate()
            .map(|(r, (_, u))| {
                self.reduced.facilities[u.reduced]
                    .profits
                    .iter()
                    .map(|&(j, p)| p * coupling[[r, j]])
                    .sum::<f64>()
            })
            .sum()
    }
}

/// Drops mass on zero-profit pairs (no edge) and clips the rest to the marginals.
fn unshippable_removed(mut coupling: Array2<f64>, problem: &TransportProblem) -> Array2<f64> {
    coupling.zip_mut_with(&problem.profit, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    clip_to_marginals(&mut coupling, &problem.supply, &problem.demand);
    coupling
}

fn record(diag: &mut OracleDiagnostics, iterations: usize, converged: bool, violation: f64) {
    diag.sinkhorn_calls += 1;
    diag.iterations += iterations as u64;
    diag.converged &= converged;
    diag.max_marginal_violation = diag.max_marginal_violation.max(violation);
}

fn params_for(net: &SupplyNetwork, mu: Option<f64>) -> SinkhornParams {
    let mu = mu.unwrap_or_else(|| default_mu(NetworkIndex::build(net).profit_range()));
    SinkhornParams::new(mu)
}

/// Two-stage Sinkhorn: stage 1 allocates demand to facilities through the
/// abstract channel; stage 2 splits each coupled facility's allocation across
/// its real channels. Facilities that decouple into single-channel units
/// skip stage 2.
#[derive(Debug)]
pub struct MultiStageOracle {
    staged: Staged,
    report: DecoupleReport,
}

impl MultiStageOracle {
    /// `mu = None` uses the default derived from the network's profit range.
    pub fn new(net: &SupplyNetwork, mu: Option<f64>) -> Self {
        Self::with_params(net, params_for(net, mu))
    }

    pub fn with_params(net: &SupplyNetwork, params: SinkhornParams) -> Self {
        let (staged, report) = Staged::build(net, params);
        MultiStageOracle { staged, report }
    }

    pub fn params(&self) -> &SinkhornParams {
        &self.staged.params
    }

    pub fn decouple_report(&self) -> &DecoupleReport {
        &self.report
    }

    /// Stage 2 for one coupled unit; `row` is its stage-1 allocation per client.
    fn stage_two(&self, unit: &Unit, row: &[f64]) -> Result<(Vec<(usize, usize, f64)>, usize, bool, f64)> {
        let fi = &self.staged.decoupled.facilities[unit.decoupled];
        let clients: Vec<usize> = (0..row.len()).filter(|&j| row[j] > 0.0).collect();
        let channels = &unit.channel_map;
        let mut profit = Array2::zeros((channels.len(), clients.len()));
        for (e, &(c, _)) in channels.iter().enumerate() {
            for (k, &j) in clients.iter().enumerate() {
                if let Some(a) = fi.arc(j, c) {
                    profit[[e, k]] = a.profit.max(0.0);
                }
            }
        }
        let supply: Vec<f64> = channels
            .iter()
            .map(|&(c, _)| fi.channel_cap(c).unwrap_or(0.0))
            .collect();
        let demand: Vec<f64> = clients.iter().map(|&j| row[j]).collect();
        let problem = TransportProblem::new(supply, demand, profit);
        let plan = sinkhorn_solve(&problem, &self.staged.params)?;
        let coupling = unshippable_removed(plan.coupling, &problem);
        let mut flows = Vec::new();
        for (e, &(_, orig_c)) in channels.iter().enumerate() {
            for (k, &j) in clients.iter().enumerate() {
                if coupling[[e, k]] > 0.0 {
                    flows.push((j, orig_c, coupling[[e, k]]));
                }
            }
        }
        Ok((flows, plan.iterations, plan.converged, plan.marginal_violation))
    }
}

impl ValueOracle for MultiStageOracle {
    fn name(&self) -> &'static str {
        "sinkhorn2"
    }

    fn evaluate(&self, set: &[usize]) -> Result<OracleResult> {
        let start = Instant::now();
        let s = &self.staged;
        let units = s.selected_units(set)?;
        CallCounter::bump(&s.counter.invocations, 1);
        let mut diag = OracleDiagnostics {
            converged: true,
            ..Default::default()
        };
        let mut plan = AllocationPlan::new();
        if !units.is_empty() {
            let coupling = s.stage_one(&units, &mut diag)?;
            let demands = &s.original.demands;
            let coupled: Vec<usize> = (0..units.len())
                .filter(|&r| units[r].1.channel_map.len() > 1 && coupling.row(r).sum() > 0.0)
                .collect();
            let stage_two: Vec<_> = coupled
                .par_iter()
                .map(|&r| {
                    let row = coupling.row(r).to_vec();
                    self.stage_two(units[r].1, &row)
                })
                .collect::<Result<_>>()?;
            CallCounter::bump(&s.counter.stage2, stage_two.len() as u64);
            for ((flows, iters, conv, viol), &r) in stage_two.into_iter().zip(&coupled) {
                record(&mut diag, iters, conv, viol);
                for (j, c, v) in flows {
                    plan.add(units[r].0, j, c, v / demands[j]);
                }
            }
            for (r, (i, u)) in units.iter().enumerate() {
                if let [(_, c)] = u.channel_map[..] {
                    for (j, &v) in coupling.row(r).iter().enumerate() {
                        if v > 0.0 {
                            plan.add(*i, j, c, v / demands[j]);
                        }
                    }
                }
            }
        }
        let g_value = s.original.plan_profit(&plan);
        diag.wall_time = start.elapsed();
        Ok(OracleResult {
            g_value,
            plan: Some(plan),
            diagnostics: diag,
        })
    }

    fn counters(&self) -> CallCounts {
        self.staged.counter.snapshot()
    }
}

/// Stage 1 only: `g` is the abstract-channel profit of the stage-1 coupling
/// and no channel-level plan is produced.
#[derive(Debug)]
pub struct SingleStageOracle {
    staged: Staged,
}

impl SingleStageOracle {
    pub fn new(net: &SupplyNetwork, mu: Option<f64>) -> Self {
        Self::with_params(net, params_for(net, mu))
    }

    pub fn with_params(net: &SupplyNetwork, params: SinkhornParams) -> Self {
        SingleStageOracle {
            staged: Staged::build(net, params).0,
        }
    }

    pub fn params(&self) -> &SinkhornParams {
        &self.staged.params
    }
}

impl ValueOracle for SingleStageOracle {
    fn name(&self) -> &'static str {
        "sinkhorn1"
    }

    fn evaluate(&self, set: &[usize]) -> Result<OracleResult> {
        let start = Instant::now();
        let s = &self.staged;
        let units = s.selected_units(set)?;
        CallCounter::bump(&s.counter.invocations, 1);
        let mut diag = OracleDiagnostics {
            converged: true,
            ..Default::default()
        };
        let g_value = if units.is_empty() {
            0.0
        } else {
            let coupling = s.stage_one(&units, &mut diag)?;
            s.abstract_profit(&units, &coupling)
        };
        diag.wall_time = start.elapsed();
        Ok(OracleResult {
            g_value,
            plan: None,
            diagnostics: diag,
        })
    }

    fn counters(&self) -> CallCounts {
        self.staged.counter.snapshot()
    }
}
