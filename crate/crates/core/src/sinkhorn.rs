//! Entropic-regularised optimal transport for profit maximisation.
//!
//! Supplies and demands are inequality marginals: a plan may leave supply
//! unused and demand unmet. Before scaling, the problem is balanced with
//! zero-profit pseudo nodes so that the Sinkhorn iterations see equal
//! totals. When every pair is allowed one pseudo node on the short side is
//! enough. With forbidden pairs a single pseudo node can leave the balanced
//! system without any feasible coupling (a supply row that reaches too
//! little demand, say), so in that case both a pseudo supply and a pseudo
//! demand are added; that system is always feasible and encodes the
//! inequalities exactly.
//!
//! The scaling runs on `Omega = exp(P / mu)` directly while `max |P| / mu`
//! stays below [`LOG_DOMAIN_THRESHOLD`], and on log-potentials otherwise.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};

/// Above this value of `max |P| / mu` the iterations switch to log domain.
pub const LOG_DOMAIN_THRESHOLD: f64 = 500.0;
pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITERS: usize = 10_000;
/// Fraction of the profit range used as the default regularisation.
pub const DEFAULT_MU_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct TransportProblem {
    pub supply: Vec<f64>,
    pub demand: Vec<f64>,
    /// Unit profit, `supply.len() x demand.len()`.
    pub profit: Array2<f64>,
    /// Allowed pairs; `None` allows every pair.
    pub mask: Option<Array2<bool>>,
}

impl TransportProblem {
    pub fn new(supply: Vec<f64>, demand: Vec<f64>, profit: Array2<f64>) -> Self {
        TransportProblem {
            supply,
            demand,
            profit,
            mask: None,
        }
    }

    pub fn with_mask(mut self, mask: Array2<bool>) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn rows(&self) -> usize {
        self.supply.len()
    }

    pub fn cols(&self) -> usize {
        self.demand.len()
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[[i, j]])
    }

    fn check(&self) -> Result<()> {
        if self.profit.dim() != (self.rows(), self.cols()) {
            return Err(Error::InvalidConfig(format!(
                "profit matrix is {:?}, marginals are {}x{}",
                self.profit.dim(),
                self.rows(),
                self.cols()
            )));
        }
        if let Some(m) = &self.mask {
            if m.dim() != self.profit.dim() {
                return Err(Error::InvalidConfig("mask and profit shapes differ".into()));
            }
        }
        if self
            .supply
            .iter()
            .chain(&self.demand)
            .any(|&v| !(v.is_finite() && v >= 0.0))
        {
            return Err(Error::InvalidConfig("marginals must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Balancing {
    /// Totals already agree.
    None,
    PseudoSupply,
    PseudoDemand,
    /// Both pseudo nodes, used when some pairs are forbidden.
    Slack,
}

/// A problem with equal supply and demand totals, normalised by `kappa`.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancedProblem {
    pub supply: Vec<f64>,
    pub demand: Vec<f64>,
    pub profit: Array2<f64>,
    pub allowed: Array2<bool>,
    pub kappa: f64,
    pub balancing: Balancing,
    /// Row and column count before pseudo nodes were appended.
    pub original: (usize, usize),
}

impl BalancedProblem {
    pub fn normalized_supply(&self) -> Vec<f64> {
        self.supply.iter().map(|v| v / self.kappa).collect()
    }

    pub fn normalized_demand(&self) -> Vec<f64> {
        self.demand.iter().map(|v| v / self.kappa).collect()
    }
}

/// Appends one zero-profit pseudo node on the short side. Returns `None`
/// when both totals are zero.
pub fn balance(problem: &TransportProblem) -> Option<BalancedProblem> {
    let total_supply: f64 = problem.supply.iter().sum();
    let total_demand: f64 = problem.demand.iter().sum();
    if total_supply == 0.0 && total_demand == 0.0 {
        return None;
    }
    let balancing = if total_supply < total_demand {
        Balancing::PseudoSupply
    } else if total_demand < total_supply {
        Balancing::PseudoDemand
    } else {
        Balancing::None
    };
    Some(augment(problem, balancing, total_supply, total_demand))
}

/// Appends both pseudo nodes: supply `sum q` and demand `sum p`.
pub fn balance_with_slack(problem: &TransportProblem) -> Option<BalancedProblem> {
    let total_supply: f64 = problem.supply.iter().sum();
    let total_demand: f64 = problem.demand.iter().sum();
    if total_supply == 0.0 && total_demand == 0.0 {
        return None;
    }
    Some(augment(problem, Balancing::Slack, total_supply, total_demand))
}

fn augment(problem: &TransportProblem, balancing: Balancing, total_supply: f64, total_demand: f64) -> BalancedProblem {
    let (m, n) = (problem.rows(), problem.cols());
    let (extra_row, extra_col) = match balancing {
        Balancing::None => (None, None),
        Balancing::PseudoSupply => (Some(total_demand - total_supply), None),
        Balancing::PseudoDemand => (None, Some(total_supply - total_demand)),
        Balancing::Slack => (Some(total_demand), Some(total_supply)),
    };
    let rows = m + usize::from(extra_row.is_some());
    let cols = n + usize::from(extra_col.is_some());
    let mut profit = Array2::zeros((rows, cols));
    let mut allowed = Array2::from_elem((rows, cols), true);
    for i in 0..m {
        for j in 0..n {
            profit[[i, j]] = problem.profit[[i, j]];
            allowed[[i, j]] = problem.allowed(i, j);
        }
    }
    let mut supply = problem.supply.clone();
    supply.extend(extra_row);
    let mut demand = problem.demand.clone();
    demand.extend(extra_col);
    let kappa = supply.iter().sum();
    BalancedProblem {
        supply,
        demand,
        profit,
        allowed,
        kappa,
        balancing,
        original: (m, n),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornParams {
    pub mu: f64,
    pub tol: f64,
    pub max_iters: usize,
    /// Run the log-domain iterations regardless of the profit scale.
    pub force_log_domain: bool,
}

impl SinkhornParams {
    pub fn new(mu: f64) -> Self {
        SinkhornParams {
            mu,
            tol: DEFAULT_TOL,
            max_iters: DEFAULT_MAX_ITERS,
            force_log_domain: false,
        }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }
}

/// `0.05 * (max P - min positive P)`, falling back to `0.05 * max P` for a
/// flat profit table and 1 when there is no positive profit.
pub fn default_mu(profit_range: Option<(f64, f64)>) -> f64 {
    match profit_range {
        Some((lo, hi)) if hi > lo => DEFAULT_MU_FRACTION * (hi - lo),
        Some((_, hi)) if hi > 0.0 => DEFAULT_MU_FRACTION * hi,
        _ => 1.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// Flow on the original pairs, in units.
    pub coupling: Array2<f64>,
    /// Per original row, mass routed to the pseudo demand (unused supply).
    pub unused_supply: Vec<f64>,
    /// Per original column, mass routed from the pseudo supply (unmet demand).
    pub unmet_demand: Vec<f64>,
    pub balancing: Balancing,
    pub kappa: f64,
    pub iterations: usize,
    pub converged: bool,
    /// L1 marginal violation of the normalised balanced plan.
    pub marginal_violation: f64,
    pub log_domain: bool,
}

impl TransportPlan {
    fn empty(m: usize, n: usize) -> Self {
        TransportPlan {
            coupling: Array2::zeros((m, n)),
            unused_supply: vec![0.0; m],
            unmet_demand: vec![0.0; n],
            balancing: Balancing::None,
            kappa: 0.0,
            iterations: 0,
            converged: true,
            marginal_violation: 0.0,
            log_domain: false,
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.coupling.rows().into_iter().map(|r| r.sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        self.coupling.columns().into_iter().map(|c| c.sum()).collect()
    }
}

/// `<P, gamma>` over the original pairs.
pub fn plan_objective(problem: &TransportProblem, plan: &TransportPlan) -> f64 {
    problem
        .profit
        .iter()
        .zip(plan.coupling.iter())
        .map(|(p, g)| p * g)
        .sum()
}

/// Scales down rows whose total exceeds `supply`, then columns whose total
/// exceeds `demand`, so the coupling satisfies both inequalities exactly.
pub fn clip_to_marginals(coupling: &mut Array2<f64>, supply: &[f64], demand: &[f64]) {
    for (mut row, &cap) in coupling.rows_mut().into_iter().zip(supply) {
        let s = row.sum();
        if s > cap {
            let f = if s > 0.0 { cap / s } else { 0.0 };
            row.mapv_inplace(|v| v * f);
        }
    }
    for (mut col, &cap) in coupling.columns_mut().into_iter().zip(demand) {
        let s = col.sum();
        if s > cap {
            let f = if s > 0.0 { cap / s } else { 0.0 };
            col.mapv_inplace(|v| v * f);
        }
    }
}

/// Solves the entropic transport problem.
///
/// Rows or columns with a zero marginal or no allowed pair are removed
/// before balancing and come back as zero flow. The iterations stop once
/// the L1 violation of the implied plan's marginals is at most `tol`; if
/// `max_iters` runs out first the plan is returned with `converged = false`.
pub fn sinkhorn_solve(problem: &TransportProblem, params: &SinkhornParams) -> Result<TransportPlan> {
    problem.check()?;
    if !(params.mu.is_finite() && params.mu > 0.0) {
        return Err(Error::InvalidConfig(format!("mu must be > 0, got {}", params.mu)));
    }
    if !(params.tol > 0.0) {
        return Err(Error::InvalidConfig("sinkhorn tolerance must be > 0".into()));
    }
    let (m, n) = (problem.rows(), problem.cols());

    let (rows, cols) = active_support(problem);
    let mut out = TransportPlan::empty(m, n);
    if rows.is_empty() || cols.is_empty() {
        return Ok(out);
    }

    let sub = restrict(problem, &rows, &cols);
    let full_support = sub.mask.as_ref().is_none_or(|mk| mk.iter().all(|&a| a));
    let balanced = if full_support {
        balance(&sub)
    } else {
        balance_with_slack(&sub)
    }
    .expect("active support has positive marginals");

    let scaled = run_scaling(&balanced, params);
    let (sm, sn) = balanced.original;
    for (si, &i) in rows.iter().enumerate() {
        for (sj, &j) in cols.iter().enumerate() {
            out.coupling[[i, j]] = scaled.plan[[si, sj]];
        }
    }
    let (rows_aug, cols_aug) = scaled.plan.dim();
    if cols_aug > sn {
        for (si, &i) in rows.iter().enumerate() {
            out.unused_supply[i] = scaled.plan[[si, sn]];
        }
    }
    if rows_aug > sm {
        for (sj, &j) in cols.iter().enumerate() {
            out.unmet_demand[j] = scaled.plan[[sm, sj]];
        }
    }
    out.balancing = balanced.balancing;
    out.kappa = balanced.kappa;
    out.iterations = scaled.iterations;
    out.converged = scaled.converged;
    out.marginal_violation = scaled.violation;
    out.log_domain = scaled.log_domain;
    Ok(out)
}

/// Rows and columns that can carry flow.
fn active_support(problem: &TransportProblem) -> (Vec<usize>, Vec<usize>) {
    let (m, n) = (problem.rows(), problem.cols());
    let mut row_on: Vec<bool> = problem.supply.iter().map(|&s| s > 0.0).collect();
    let mut col_on: Vec<bool> = problem.demand.iter().map(|&d| d > 0.0).collect();
    loop {
        let mut changed = false;
        for i in 0..m {
            if row_on[i] && !(0..n).any(|j| col_on[j] && problem.allowed(i, j)) {
                row_on[i] = false;
                changed = true;
            }
        }
        for j in 0..n {
            if col_on[j] && !(0..m).any(|i| row_on[i] && problem.allowed(i, j)) {
                col_on[j] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    (
        (0..m).filter(|&i| row_on[i]).collect(),
        (0..n).filter(|&j| col_on[j]).collect(),
    )
}

fn restrict(problem: &TransportProblem, rows: &[usize], cols: &[usize]) -> TransportProblem {
    let profit = Array2::from_shape_fn((rows.len(), cols.len()), |(a, b)| problem.profit[[rows[a], cols[b]]]);
    let mask = problem
        .mask
        .as_ref()
        .map(|mk| Array2::from_shape_fn((rows.len(), cols.len()), |(a, b)| mk[[rows[a], cols[b]]]));
    TransportProblem {
        supply: rows.iter().map(|&i| problem.supply[i]).collect(),
        demand: cols.iter().map(|&j| problem.demand[j]).collect(),
        profit,
        mask,
    }
}

struct Scaled {
    plan: Array2<f64>,
    iterations: usize,
    converged: bool,
    violation: f64,
    log_domain: bool,
}

fn run_scaling(problem: &BalancedProblem, params: &SinkhornParams) -> Scaled {
    let max_ratio = problem
        .profit
        .iter()
        .zip(problem.allowed.iter())
        .filter(|(_, &a)| a)
        .map(|(p, _)| (p / params.mu).abs())
        .fold(0.0, f64::max);
    if !params.force_log_domain && max_ratio <= LOG_DOMAIN_THRESHOLD {
        if let Some(out) = scale_standard(problem, params) {
            return out;
        }
    }
    scale_log(problem, params)
}

/// Alternating diagonal scaling of `Omega`. Returns `None` if the scaling
/// vectors leave the representable range.
fn scale_standard(problem: &BalancedProblem, params: &SinkhornParams) -> Option<Scaled> {
    let p = problem.normalized_supply();
    let q = problem.normalized_demand();
    let (m, n) = problem.profit.dim();
    let omega = Array2::from_shape_fn((m, n), |(i, j)| {
        if problem.allowed[[i, j]] {
            (problem.profit[[i, j]] / params.mu).exp()
        } else {
            0.0
        }
    });
    let omega_s = omega.as_slice().expect("standard layout");

    let mut a = p.clone();
    let mut b = q.clone();
    let mut omega_b = vec![0.0; m];
    let mut omega_t_a = vec![0.0; n];
    mat_vec(omega_s, m, n, &b, &mut omega_b);

    let mut iterations = 0;
    let mut violation = f64::INFINITY;
    let mut converged = false;
    while iterations < params.max_iters {
        iterations += 1;
        for i in 0..m {
            a[i] = p[i] / omega_b[i];
        }
        mat_t_vec(omega_s, m, n, &a, &mut omega_t_a);
        for j in 0..n {
            b[j] = q[j] / omega_t_a[j];
        }
        mat_vec(omega_s, m, n, &b, &mut omega_b);
        // Columns match exactly after the b update; only rows can be off.
        violation = (0..m).map(|i| (a[i] * omega_b[i] - p[i]).abs()).sum();
        if !violation.is_finite() || a.iter().chain(&b).any(|v| !v.is_finite()) {
            return None;
        }
        if violation <= params.tol {
            converged = true;
            break;
        }
    }

    // Column shares times the unnormalised demand: equal to kappa a Omega b,
    // and exact for columns served by a single row.
    let plan = Array2::from_shape_fn((m, n), |(i, j)| problem.demand[j] * (a[i] * omega[[i, j]] / omega_t_a[j]));
    Some(Scaled {
        plan,
        iterations,
        converged,
        violation,
        log_domain: false,
    })
}

fn scale_log(problem: &BalancedProblem, params: &SinkhornParams) -> Scaled {
    let p = problem.normalized_supply();
    let q = problem.normalized_demand();
    let log_p: Vec<f64> = p.iter().map(|v| v.ln()).collect();
    let log_q: Vec<f64> = q.iter().map(|v| v.ln()).collect();
    let (m, n) = problem.profit.dim();
    let kernel = Array2::from_shape_fn((m, n), |(i, j)| {
        if problem.allowed[[i, j]] {
            problem.profit[[i, j]] / params.mu
        } else {
            f64::NEG_INFINITY
        }
    });
    let ks = kernel.as_slice().expect("standard layout");

    let mut f = log_p.clone();
    let mut g = log_q.clone();
    let mut row_lse = vec![0.0; m];
    let mut col_lse = vec![0.0; n];
    row_log_sum_exp(ks, m, n, &g, &mut row_lse);

    let mut iterations = 0;
    let mut violation = f64::INFINITY;
    let mut converged = false;
    while iterations < params.max_iters {
        iterations += 1;
        for i in 0..m {
            f[i] = log_p[i] - row_lse[i];
        }
        col_log_sum_exp(ks, m, n, &f, &mut col_lse);
        for j in 0..n {
            g[j] = log_q[j] - col_lse[j];
        }
        row_log_sum_exp(ks, m, n, &g, &mut row_lse);
        violation = (0..m).map(|i| ((f[i] + row_lse[i]).exp() - p[i]).abs()).sum();
        if violation <= params.tol {
            converged = true;
            break;
        }
    }

    let plan = Array2::from_shape_fn((m, n), |(i, j)| {
        let k = kernel[[i, j]];
        if k == f64::NEG_INFINITY {
            0.0
        } else {
            problem.demand[j] * (f[i] + k - col_lse[j]).exp()
        }
    });
    Scaled {
        plan,
        iterations,
        converged,
        violation,
        log_domain: true,
    }
}

fn mat_vec(a: &[f64], m: usize, n: usize, x: &[f64], out: &mut [f64]) {
    for i in 0..m {
        out[i] = a[i * n..(i + 1) * n].iter().zip(x).map(|(u, v)| u * v).sum();
    }
}

fn mat_t_vec(a: &[f64], m: usize, n: usize, x: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..m {
        let xi = x[i];
        for (o, u) in out.iter_mut().zip(&a[i * n..(i + 1) * n]) {
            *o += u * xi;
        }
    }
}

fn row_log_sum_exp(k: &[f64], m: usize, n: usize, g: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let row = &k[i * n..(i + 1) * n];
        let mx = row.iter().zip(g).map(|(a, b)| a + b).fold(f64::NEG_INFINITY, f64::max);
        out[i] = if mx == f64::NEG_INFINITY {
            mx
        } else {
            mx + row.iter().zip(g).map(|(a, b)| (a + b - mx).exp()).sum::<f64>().ln()
        };
    }
}

fn col_log_sum_exp(k: &[f64], m: usize, n: usize, f: &[f64], out: &mut [f64]) {
    let mut mx = vec![f64::NEG_INFINITY; n];
    for i in 0..m {
        for (slot, v) in mx.iter_mut().zip(&k[i * n..(i + 1) * n]) {
            *slot = slot.max(v + f[i]);
        }
    }
    let mut acc = vec![0.0; n];
    for i in 0..m {
        for ((a, v), &c) in acc.iter_mut().zip(&k[i * n..(i + 1) * n]).zip(&mx) {
            if c != f64::NEG_INFINITY {
                *a += (v + f[i] - c).exp();
            }
        }
    }
    for j in 0..n {
        out[j] = if mx[j] == f64::NEG_INFINITY { mx[j] } else { mx[j] + acc[j].ln() };
    }
}
