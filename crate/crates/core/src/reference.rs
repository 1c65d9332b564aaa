//! Exhaustive reference solver for small instances.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::SupplyNetwork;
use crate::oracles::{ExactOracle, ValueOracle};

pub const DEFAULT_MAX_FACILITIES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsetValue {
    pub set: Vec<usize>,
    pub fixed_cost: f64,
    /// `None` when the subset was pruned on fixed cost alone.
    pub g_value: Option<f64>,
    pub objective: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceSolution {
    pub selected: Vec<usize>,
    pub objective: f64,
    pub g_value: f64,
    /// Every enumerated subset in enumeration order, when requested.
    pub table: Vec<SubsetValue>,
}

/// All `size`-subsets of `0..m` in lexicographic order.
pub fn combinations(m: usize, size: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if size > m {
        return out;
    }
    let mut idx: Vec<usize> = (0..size).collect();
    loop {
        out.push(idx.clone());
        let Some(p) = (0..size).rev().find(|&p| idx[p] < m - size + p) else {
            return out;
        };
        idx[p] += 1;
        for q in p + 1..size {
            idx[q] = idx[q - 1] + 1;
        }
    }
}

/// Minimises `J(S) = h(S) + C sum(d) - g(S)` over all `|S| <= k` with the
/// exact oracle. Subsets are visited by size, then lexicographically; a
/// subset whose fixed cost alone exceeds the best `J` of the smaller sizes
/// is skipped. Ties go to the lexicographically smallest set.
pub fn solve_exhaustive(
    net: &SupplyNetwork,
    k: usize,
    max_facilities: usize,
    oracle: &ExactOracle,
    keep_table: bool,
) -> Result<ReferenceSolution> {
    let m = net.facilities.len();
    if m > max_facilities {
        return Err(Error::TooManyFacilities { m, cap: max_facilities });
    }
    let constant = net.penalty * net.total_demand();
    let mut best = ReferenceSolution {
        selected: Vec::new(),
        objective: constant,
        g_value: 0.0,
        table: Vec::new(),
    };
    if keep_table {
        best.table.push(SubsetValue {
            set: Vec::new(),
            fixed_cost: 0.0,
            g_value: Some(0.0),
            objective: Some(constant),
        });
    }
    for size in 1..=k.min(m) {
        let bound = best.objective;
        let level: Vec<SubsetValue> = combinations(m, size)
            .into_par_iter()
            .map(|set| {
                let fixed_cost = net.fixed_cost(&set);
                if fixed_cost > bound {
                    return Ok(SubsetValue {
                        set,
                        fixed_cost,
                        g_value: None,
                        objective: None,
                    });
                }
                let g = oracle.evaluate(&set)?.g_value;
                Ok(SubsetValue {
                    objective: Some(fixed_cost + constant - g),
                    g_value: Some(g),
                    set,
                    fixed_cost,
                })
            })
            .collect::<Result<_>>()?;
        for v in &level {
            if let (Some(j), Some(g)) = (v.objective, v.g_value) {
                if j < best.objective || (j == best.objective && v.set < best.selected) {
                    best.objective = j;
                    best.g_value = g;
                    best.selected = v.set.clone();
                }
            }
        }
        if keep_table {
            best.table.extend(level);
        }
    }
    Ok(best)
}
