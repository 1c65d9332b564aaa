//! Domain types for the multi-channel supply network and the objective
//! algebra shared by every solver.
//!
//! A [`SupplyNetwork`] is plain data keyed by string ids. Solvers work on a
//! [`NetworkIndex`], a positional view built once per network in which
//! facilities, clients and channels are numbered by their sorted id order.
//! Every summation walks those positions in ascending order so results do
//! not depend on how the input happened to list its edges.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multiplier applied to the largest edge cost when no penalty is given.
pub const DEFAULT_PENALTY_MULTIPLIER: f64 = 5.0;

/// Default plan feasibility tolerance, relative to the largest demand.
pub const DEFAULT_FEASIBILITY_TOL: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Facility {
    pub id: String,
    pub fixed_cost: f64,
    pub fcap: f64,
    /// Channel id to channel capacity.
    pub channels: BTreeMap<String, f64>,
}

impl Facility {
    pub fn new(id: impl Into<String>, fixed_cost: f64, fcap: f64) -> Self {
        Facility {
            id: id.into(),
            fixed_cost,
            fcap,
            channels: BTreeMap::new(),
        }
    }

    pub fn with_channel(mut self, channel: impl Into<String>, ccap: f64) -> Self {
        self.channels.insert(channel.into(), ccap);
        self
    }

    pub fn total_channel_capacity(&self) -> f64 {
        self.channels.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Client {
    pub id: String,
    pub demand: f64,
}

impl Client {
    pub fn new(id: impl Into<String>, demand: f64) -> Self {
        Client {
            id: id.into(),
            demand,
        }
    }
}

/// A shipment edge `(facility, client, channel)` with its unit cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub facility: String,
    pub client: String,
    pub channel: String,
    pub cost: f64,
}

impl Edge {
    pub fn new(
        facility: impl Into<String>,
        client: impl Into<String>,
        channel: impl Into<String>,
        cost: f64,
    ) -> Self {
        Edge {
            facility: facility.into(),
            client: client.into(),
            channel: channel.into(),
            cost,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupplyNetwork {
    pub facilities: Vec<Facility>,
    pub clients: Vec<Client>,
    pub channels: BTreeSet<String>,
    pub edges: Vec<Edge>,
    /// Unit penalty `C` on unfulfilled demand.
    pub penalty: f64,
}

impl SupplyNetwork {
    /// Builds a network in canonical order. A missing penalty defaults to
    /// five times the largest edge cost.
    pub fn new(
        facilities: Vec<Facility>,
        clients: Vec<Client>,
        edges: Vec<Edge>,
        penalty: Option<f64>,
    ) -> Self {
        let penalty = penalty.unwrap_or_else(|| default_penalty(&edges));
        let mut net = SupplyNetwork {
            facilities,
            clients,
            channels: BTreeSet::new(),
            edges,
            penalty,
        };
        net.canonicalize();
        net
    }

    /// Sorts facilities, clients and edges by id and recomputes the channel set.
    pub fn canonicalize(&mut self) {
        self.facilities.sort_by(|a, b| a.id.cmp(&b.id));
        self.clients.sort_by(|a, b| a.id.cmp(&b.id));
        self.edges.sort_by(|a, b| {
            (&a.facility, &a.client, &a.channel).cmp(&(&b.facility, &b.client, &b.channel))
        });
        self.channels = self
            .facilities
            .iter()
            .flat_map(|f| f.channels.keys().cloned())
            .collect();
    }

    pub fn total_demand(&self) -> f64 {
        self.clients.iter().map(|c| c.demand).sum()
    }

    pub fn max_demand(&self) -> f64 {
        self.clients.iter().map(|c| c.demand).fold(0.0, f64::max)
    }

    pub fn max_edge_cost(&self) -> f64 {
        self.edges.iter().map(|e| e.cost).fold(0.0, f64::max)
    }

    pub fn facility_position(&self, id: &str) -> Option<usize> {
        self.facilities.iter().position(|f| f.id == id)
    }

    /// Positions of the given facility ids, sorted and deduplicated.
    pub fn facility_positions<S: AsRef<str>>(&self, ids: &[S]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let id = id.as_ref();
            out.push(
                self.facility_position(id)
                    .ok_or_else(|| Error::UnknownFacility(id.to_string()))?,
            );
        }
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    pub fn facility_ids(&self, set: &[usize]) -> Vec<String> {
        set.iter().map(|&i| self.facilities[i].id.clone()).collect()
    }

    /// Total fixed cost `h(S)`.
    pub fn fixed_cost(&self, set: &[usize]) -> f64 {
        set.iter().map(|&i| self.facilities[i].fixed_cost).sum()
    }

    pub fn index(&self) -> NetworkIndex {
        NetworkIndex::build(self)
    }
}

pub fn default_penalty(edges: &[Edge]) -> f64 {
    let max_cost = edges.iter().map(|e| e.cost).fold(0.0, f64::max);
    if max_cost > 0.0 {
        DEFAULT_PENALTY_MULTIPLIER * max_cost
    } else {
        1.0
    }
}

/// Unit profit `C - c` of edge `(facility, client, channel)`, or 0 when the
/// edge does not exist.
pub fn profit_of(net: &SupplyNetwork, facility: &str, client: &str, channel: &str) -> f64 {
    net.edges
        .iter()
        .find(|e| e.facility == facility && e.client == client && e.channel == channel)
        .map(|e| net.penalty - e.cost)
        .unwrap_or(0.0)
}

/// One broken network invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub entity: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.entity, self.rule)
    }
}

fn violation(entity: String, rule: String) -> Violation {
    Violation { entity, rule }
}

/// Checks every structural invariant of the network. An empty list means
/// the network is well formed.
pub fn validate(net: &SupplyNetwork) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut facilities: HashMap<&str, &Facility> = HashMap::new();
    for f in &net.facilities {
        let entity = format!("facility `{}`", f.id);
        if facilities.insert(f.id.as_str(), f).is_some() {
            out.push(violation(entity.clone(), "duplicate facility id".into()));
        }
        if !(f.fixed_cost.is_finite() && f.fixed_cost >= 0.0) {
            out.push(violation(entity.clone(), format!("fixed cost {} must be finite and >= 0", f.fixed_cost)));
        }
        if !(f.fcap.is_finite() && f.fcap >= 0.0) {
            out.push(violation(entity.clone(), format!("fcap {} must be finite and >= 0", f.fcap)));
        }
        for (ch, &ccap) in &f.channels {
            if !(ccap.is_finite() && ccap >= 0.0) {
                out.push(violation(entity.clone(), format!("ccap[{ch}]={ccap} must be finite and >= 0")));
            } else if ccap > f.fcap {
                out.push(violation(entity.clone(), format!("ccap[{ch}]={ccap} exceeds fcap={}", f.fcap)));
            }
        }
    }

    let mut clients: HashMap<&str, &Client> = HashMap::new();
    for c in &net.clients {
        let entity = format!("client `{}`", c.id);
        if clients.insert(c.id.as_str(), c).is_some() {
            out.push(violation(entity.clone(), "duplicate client id".into()));
        }
        if !(c.demand.is_finite() && c.demand >= 0.0) {
            out.push(violation(entity, format!("demand {} must be finite and >= 0", c.demand)));
        }
    }

    let mut seen = BTreeSet::new();
    let mut max_cost = 0.0f64;
    for e in &net.edges {
        let entity = format!("edge ({}, {}, {})", e.facility, e.client, e.channel);
        match facilities.get(e.facility.as_str()) {
            None => out.push(violation(entity.clone(), "unknown facility".into())),
            Some(f) if !f.channels.contains_key(&e.channel) => out.push(violation(
                entity.clone(),
                format!("channel `{}` not declared by the facility", e.channel),
            )),
            Some(_) => {}
        }
        if !clients.contains_key(e.client.as_str()) {
            out.push(violation(entity.clone(), "unknown client".into()));
        }
        if !(e.cost.is_finite() && e.cost >= 0.0) {
            out.push(violation(entity.clone(), format!("cost {} must be finite and >= 0", e.cost)));
        } else {
            max_cost = max_cost.max(e.cost);
        }
        if !seen.insert((&e.facility, &e.client, &e.channel)) {
            out.push(violation(entity, "duplicate edge".into()));
        }
    }

    if !(net.penalty.is_finite() && net.penalty > max_cost) {
        out.push(violation(
            "network".into(),
            format!("penalty C={} must exceed the largest edge cost {max_cost}", net.penalty),
        ));
    }
    out
}

/// Returns the network back if valid, or an error listing every violation.
pub fn ensure_valid(net: &SupplyNetwork) -> Result<()> {
    let violations = validate(net);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidNetwork(
            violations.iter().map(ToString::to_string).collect(),
        ))
    }
}

/// A shipment arc as seen from its facility.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arc {
    pub client: usize,
    pub channel: usize,
    pub cost: f64,
    pub profit: f64,
}

#[derive(Debug, Clone)]
pub struct FacilityIndex {
    pub fixed_cost: f64,
    pub fcap: f64,
    /// `(channel position, ccap)` sorted by channel.
    pub channel_caps: Vec<(usize, f64)>,
    /// Arcs sorted by `(client, channel)`.
    pub arcs: Vec<Arc>,
}

impl FacilityIndex {
    pub fn arc(&self, client: usize, channel: usize) -> Option<&Arc> {
        self.arcs
            .binary_search_by(|a| (a.client, a.channel).cmp(&(client, channel)))
            .ok()
            .map(|k| &self.arcs[k])
    }

    pub fn channel_cap(&self, channel: usize) -> Option<f64> {
        self.channel_caps
            .binary_search_by(|&(c, _)| c.cmp(&channel))
            .ok()
            .map(|k| self.channel_caps[k].1)
    }
}

/// Positional view of a [`SupplyNetwork`].
#[derive(Debug, Clone)]
pub struct NetworkIndex {
    pub penalty: f64,
    pub channels: Vec<String>,
    pub demands: Vec<f64>,
    pub facilities: Vec<FacilityIndex>,
}

impl NetworkIndex {
    /// Edges with dangling references are skipped; validate first.
    pub fn build(net: &SupplyNetwork) -> Self {
        let channels: Vec<String> = net.channels.iter().cloned().collect();
        let channel_pos: HashMap<&str, usize> = channels
            .iter()
            .enumerate()
            .map(|(k, c)| (c.as_str(), k))
            .collect();
        let facility_pos: HashMap<&str, usize> = net
            .facilities
            .iter()
            .enumerate()
            .map(|(k, f)| (f.id.as_str(), k))
            .collect();
        let client_pos: HashMap<&str, usize> = net
            .clients
            .iter()
            .enumerate()
            .map(|(k, c)| (c.id.as_str(), k))
            .collect();

        let mut facilities: Vec<FacilityIndex> = net
            .facilities
            .iter()
            .map(|f| {
                let mut channel_caps: Vec<(usize, f64)> = f
                    .channels
                    .iter()
                    .filter_map(|(c, &cap)| channel_pos.get(c.as_str()).map(|&k| (k, cap)))
                    .collect();
                channel_caps.sort_by_key(|&(c, _)| c);
                FacilityIndex {
                    fixed_cost: f.fixed_cost,
                    fcap: f.fcap,
                    channel_caps,
                    arcs: Vec::new(),
                }
            })
            .collect();

        for e in &net.edges {
            let (Some(&i), Some(&j), Some(&c)) = (
                facility_pos.get(e.facility.as_str()),
                client_pos.get(e.client.as_str()),
                channel_pos.get(e.channel.as_str()),
            ) else {
                continue;
            };
            facilities[i].arcs.push(Arc {
                client: j,
                channel: c,
                cost: e.cost,
                profit: net.penalty - e.cost,
            });
        }
        for f in &mut facilities {
            f.arcs.sort_by_key(|a| (a.client, a.channel));
            f.arcs.dedup_by_key(|a| (a.client, a.channel));
        }

        NetworkIndex {
            penalty: net.penalty,
            channels,
            demands: net.clients.iter().map(|c| c.demand).collect(),
            facilities,
        }
    }

    pub fn facility_count(&self) -> usize {
        self.facilities.len()
    }

    pub fn client_count(&self) -> usize {
        self.demands.len()
    }

    pub fn total_demand(&self) -> f64 {
        self.demands.iter().sum()
    }

    pub fn max_demand(&self) -> f64 {
        self.demands.iter().copied().fold(0.0, f64::max)
    }

    /// Unit profit by position; 0 for a missing edge.
    pub fn profit(&self, facility: usize, client: usize, channel: usize) -> f64 {
        self.facilities[facility]
            .arc(client, channel)
            .map_or(0.0, |a| a.profit)
    }

    /// Largest and smallest positive edge profit.
    pub fn profit_range(&self) -> Option<(f64, f64)> {
        let mut it = self
            .facilities
            .iter()
            .flat_map(|f| f.arcs.iter().map(|a| a.profit))
            .filter(|&p| p > 0.0);
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), p| (lo.min(p), hi.max(p))))
    }

    pub fn fixed_cost(&self, set: &[usize]) -> f64 {
        set.iter().map(|&i| self.facilities[i].fixed_cost).sum()
    }

    /// Profit `sum p x d` of a plan, without feasibility checks.
    pub fn plan_profit(&self, plan: &AllocationPlan) -> f64 {
        plan.iter()
            .map(|(k, x)| self.profit(k.facility, k.client, k.channel) * x * self.demands[k.client])
            .sum()
    }

    /// Checks the plan against the allocation constraints for the open set
    /// and returns the objective breakdown. `feasibility_tol` is relative to
    /// the largest demand.
    pub fn evaluate(
        &self,
        open: &[usize],
        plan: &AllocationPlan,
        feasibility_tol: f64,
    ) -> Result<ObjectiveBreakdown> {
        let tol = feasibility_tol * self.max_demand().max(f64::MIN_POSITIVE);
        let is_open: Vec<bool> = {
            let mut v = vec![false; self.facilities.len()];
            for &i in open {
                v[i] = true;
            }
            v
        };

        let mut served = vec![0.0; self.demands.len()];
        let mut facility_out: BTreeMap<usize, f64> = BTreeMap::new();
        let mut channel_out: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        let mut shipping = 0.0;
        let mut profit = 0.0;

        for (k, x) in plan.iter() {
            if x == 0.0 {
                continue;
            }
            let loc = || format!("x[{}, {}, {}]", k.facility, k.client, k.channel);
            if !(x.is_finite() && x >= -feasibility_tol && x <= 1.0 + feasibility_tol) {
                return Err(Error::InfeasiblePlan {
                    constraint: "fraction bounds",
                    location: loc(),
                    excess: if x < 0.0 { -x } else { x - 1.0 },
                });
            }
            if k.facility >= self.facilities.len() || !is_open[k.facility] {
                return Err(Error::InfeasiblePlan {
                    constraint: "shipment from a closed facility",
                    location: loc(),
                    excess: x,
                });
            }
            let Some(arc) = self.facilities[k.facility].arc(k.client, k.channel) else {
                return Err(Error::InfeasiblePlan {
                    constraint: "shipment on a missing edge",
                    location: loc(),
                    excess: x,
                });
            };
            let units = x * self.demands[k.client];
            served[k.client] += units;
            *facility_out.entry(k.facility).or_default() += units;
            *channel_out.entry((k.facility, k.channel)).or_default() += units;
            shipping += arc.cost * units;
            profit += arc.profit * units;
        }

        for (j, (&s, &d)) in served.iter().zip(&self.demands).enumerate() {
            if s > d + tol {
                return Err(Error::InfeasiblePlan {
                    constraint: "client demand",
                    location: format!("client {j}"),
                    excess: s - d,
                });
            }
        }
        for (&i, &out) in &facility_out {
            let cap = self.facilities[i].fcap;
            if out > cap + tol {
                return Err(Error::InfeasiblePlan {
                    constraint: "facility capacity",
                    location: format!("facility {i}"),
                    excess: out - cap,
                });
            }
        }
        for (&(i, c), &out) in &channel_out {
            let cap = self.facilities[i].channel_cap(c).unwrap_or(0.0);
            if out > cap + tol {
                return Err(Error::InfeasiblePlan {
                    constraint: "channel capacity",
                    location: format!("facility {i}, channel {}", self.channels[c]),
                    excess: out - cap,
                });
            }
        }

        let fulfilled: f64 = served.iter().sum();
        let fixed_cost = self.fixed_cost(open);
        let penalty_cost = self.penalty * (self.total_demand() - fulfilled);
        Ok(ObjectiveBreakdown {
            fixed_cost,
            shipping_cost: shipping,
            penalty_cost,
            total: fixed_cost + shipping + penalty_cost,
            profit,
        })
    }
}

/// Objective `J = h(S) + shipping + penalty`, plus the profit `sum p x d`
/// of the plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub fixed_cost: f64,
    pub shipping_cost: f64,
    pub penalty_cost: f64,
    pub total: f64,
    pub profit: f64,
}

/// Evaluates a plan on `net` for open facility positions `open`.
pub fn evaluate_objective(
    net: &SupplyNetwork,
    open: &[usize],
    plan: &AllocationPlan,
    feasibility_tol: f64,
) -> Result<ObjectiveBreakdown> {
    net.index().evaluate(open, plan, feasibility_tol)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AllocKey {
    pub facility: usize,
    pub client: usize,
    pub channel: usize,
}

/// Fractions `x[i, j, e]` of client demand assigned to facility-channel
/// pairs, keyed by network positions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AllocationPlan {
    entries: BTreeMap<AllocKey, f64>,
}

impl AllocationPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, facility: usize, client: usize, channel: usize, x: f64) {
        let key = AllocKey {
            facility,
            client,
            channel,
        };
        if x == 0.0 {
            self.entries.remove(&key);
        } else {
            self.entries.insert(key, x);
        }
    }

    pub fn add(&mut self, facility: usize, client: usize, channel: usize, x: f64) {
        if x == 0.0 {
            return;
        }
        *self
            .entries
            .entry(AllocKey {
                facility,
                client,
                channel,
            })
            .or_default() += x;
    }

    pub fn get(&self, facility: usize, client: usize, channel: usize) -> f64 {
        self.entries
            .get(&AllocKey {
                facility,
                client,
                channel,
            })
            .copied()
            .unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (AllocKey, f64)> + '_ {
        self.entries.iter().map(|(k, &x)| (*k, x))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn fulfilled_units(&self, demands: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; demands.len()];
        for (k, x) in self.iter() {
            out[k.client] += x * demands[k.client];
        }
        out
    }

    pub fn unfulfilled_units(&self, demands: &[f64]) -> Vec<f64> {
        self.fulfilled_units(demands)
            .into_iter()
            .zip(demands)
            .map(|(f, &d)| (d - f).max(0.0))
            .collect()
    }
}
