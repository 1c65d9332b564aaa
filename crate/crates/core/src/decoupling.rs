//! Channel decoupling and the abstract single-channel network.
//!
//! A facility whose channel capacities sum to at most its facility capacity
//! never hits `fcap`, so each of its channels behaves like an independent
//! facility. Facilities that do not qualify can sometimes be brought there
//! by shrinking a channel that is the least profitable one for every client
//! the facility serves. Whatever cannot be decoupled is later merged into a
//! single abstract channel whose profit is the capacity-weighted average of
//! the real channel profits.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::model::{Edge, Facility, NetworkIndex, SupplyNetwork};

/// Channel id of the merged channel in a [`ReducedNetwork`].
pub const ABSTRACT_CHANNEL: &str = "alpha";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reduction {
    pub channel: String,
    pub old_ccap: f64,
    pub new_ccap: f64,
}

/// Result of running the capacity reduction on one facility.
#[derive(Debug, Clone, PartialEq)]
pub struct ReductionFragment {
    pub facility: String,
    pub reductions: Vec<Reduction>,
    /// Channels whose capacity reached zero and were deleted.
    pub removed: Vec<String>,
    /// Channel capacities after all reductions, zero-capacity channels dropped.
    pub channel_caps: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecoupleReport {
    /// Capacity reductions per facility, in application order.
    pub reductions: BTreeMap<String, Vec<Reduction>>,
    /// Facilities split into one pseudo-facility per channel.
    pub decoupled: BTreeSet<String>,
    /// Facilities whose channels stay coupled through `fcap`.
    pub coupled: BTreeSet<String>,
    /// Pseudo-facility id to `(facility, channel)`.
    pub origin: BTreeMap<String, (String, String)>,
    #[serde(serialize_with = "crate::instance::serialize_network")]
    pub network: SupplyNetwork,
}

impl DecoupleReport {
    /// Original facility of a facility in the transformed network.
    pub fn original_facility<'a>(&'a self, id: &'a str) -> &'a str {
        self.origin.get(id).map_or(id, |(f, _)| f.as_str())
    }
}

/// True when the channel capacities cannot jointly exceed `fcap`.
pub fn lemma1_check(facility: &Facility) -> bool {
    facility.total_channel_capacity() <= facility.fcap
}

/// Repeatedly shrinks the channel that is least profitable for every served
/// client until the facility capacity is no longer binding, or no such
/// channel exists.
///
/// A channel `e'` qualifies when `p[j, e'] <= p[j, e]` for every client `j`
/// served by the facility on any active channel and every active channel
/// `e`, with a missing edge counting as profit 0 on either side. A
/// competing channel that cannot reach some client therefore disqualifies
/// every channel that can. Among qualifying channels the smallest id wins.
pub fn lemma2_reduce(net: &SupplyNetwork, facility: usize) -> ReductionFragment {
    let fac = &net.facilities[facility];
    let mut caps: BTreeMap<String, f64> = fac
        .channels
        .iter()
        .filter(|(_, &c)| c > 0.0)
        .map(|(e, &c)| (e.clone(), c))
        .collect();
    // client -> channel -> profit
    let mut profits: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    for e in net.edges.iter().filter(|e| e.facility == fac.id) {
        profits
            .entry(e.client.as_str())
            .or_default()
            .insert(e.channel.as_str(), net.penalty - e.cost);
    }

    let mut reductions = Vec::new();
    let mut removed = Vec::new();
    while caps.values().sum::<f64>() > fac.fcap {
        let profit = |client: &BTreeMap<&str, f64>, ch: &str| client.get(ch).copied().unwrap_or(0.0);
        let served: Vec<&BTreeMap<&str, f64>> = profits
            .values()
            .filter(|by_channel| by_channel.keys().any(|ch| caps.contains_key(*ch)))
            .collect();
        let candidate = caps.keys().find(|cand| {
            served.iter().all(|client| {
                let own = profit(client, cand);
                caps.keys().all(|other| own <= profit(client, other))
            })
        });
        let Some(channel) = candidate.cloned() else {
            break;
        };
        let others: f64 = caps
            .iter()
            .filter(|(e, _)| **e != channel)
            .map(|(_, &c)| c)
            .sum();
        let old = caps[&channel];
        let new = (fac.fcap - others).max(0.0);
        reductions.push(Reduction {
            channel: channel.clone(),
            old_ccap: old,
            new_ccap: new,
        });
        if new == 0.0 {
            caps.remove(&channel);
            removed.push(channel);
        } else {
            caps.insert(channel, new);
        }
    }

    ReductionFragment {
        facility: fac.id.clone(),
        reductions,
        removed,
        channel_caps: caps,
    }
}

/// Pseudo-facility id for channel `channel` of facility `facility`.
pub fn split_id(facility: &str, channel: &str) -> String {
    format!("{facility}-{channel}")
}

/// Applies the capacity reductions to every facility, then splits each
/// facility whose channels no longer compete for `fcap` into single-channel
/// pseudo-facilities. Pseudo-facilities carry no fixed cost; the opening
/// cost stays with the original facility.
pub fn decouple_network(net: &SupplyNetwork) -> DecoupleReport {
    let mut reductions = BTreeMap::new();
    let mut decoupled = BTreeSet::new();
    let mut coupled = BTreeSet::new();
    let mut origin = BTreeMap::new();
    let mut facilities = Vec::new();
    let mut kept_channels: BTreeMap<&str, (BTreeMap<String, f64>, bool)> = BTreeMap::new();

    for (pos, fac) in net.facilities.iter().enumerate() {
        let fragment = lemma2_reduce(net, pos);
        if !fragment.reductions.is_empty() {
            reductions.insert(fac.id.clone(), fragment.reductions.clone());
        }
        let caps = fragment.channel_caps;
        let split = caps.values().sum::<f64>() <= fac.fcap;
        if split {
            decoupled.insert(fac.id.clone());
            for (ch, &ccap) in &caps {
                let id = split_id(&fac.id, ch);
                origin.insert(id.clone(), (fac.id.clone(), ch.clone()));
                facilities.push(Facility::new(id, 0.0, ccap).with_channel(ch.clone(), ccap));
            }
        } else {
            coupled.insert(fac.id.clone());
            facilities.push(Facility {
                id: fac.id.clone(),
                fixed_cost: fac.fixed_cost,
                fcap: fac.fcap,
                channels: caps.clone(),
            });
        }
        kept_channels.insert(fac.id.as_str(), (caps, split));
    }

    let edges = net
        .edges
        .iter()
        .filter_map(|e| {
            let (caps, split) = kept_channels.get(e.facility.as_str())?;
            if !caps.contains_key(&e.channel) {
                return None;
            }
            let facility = if *split {
                split_id(&e.facility, &e.channel)
            } else {
                e.facility.clone()
            };
            Some(Edge::new(facility, e.client.clone(), e.channel.clone(), e.cost))
        })
        .collect();

    DecoupleReport {
        reductions,
        decoupled,
        coupled,
        origin,
        network: SupplyNetwork::new(facilities, net.clients.clone(), edges, Some(net.penalty)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedFacility {
    pub id: String,
    /// Capacity of the abstract channel, equal to `fcap`.
    pub fcap: f64,
    /// Channel id to capacity share; sums to 1.
    pub weights: BTreeMap<String, f64>,
    /// `(client position, abstract profit)` for every client the facility serves.
    pub profits: Vec<(usize, f64)>,
}

/// Network in which every facility ships through one abstract channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedNetwork {
    pub facilities: Vec<ReducedFacility>,
    /// Facilities with no channel capacity at all.
    pub dropped: Vec<String>,
    pub client_ids: Vec<String>,
    pub demands: Vec<f64>,
    pub penalty: f64,
}

impl ReducedNetwork {
    /// Abstract profit of `(facility, client)`, 0 when not served.
    pub fn profit(&self, facility: usize, client: usize) -> f64 {
        let p = &self.facilities[facility].profits;
        p.binary_search_by_key(&client, |&(j, _)| j)
            .map_or(0.0, |k| p[k].1)
    }

    /// The reduced model as a plain network with channel [`ABSTRACT_CHANNEL`].
    pub fn to_network(&self) -> SupplyNetwork {
        let facilities = self
            .facilities
            .iter()
            .map(|f| Facility::new(f.id.clone(), 0.0, f.fcap).with_channel(ABSTRACT_CHANNEL, f.fcap))
            .collect();
        let clients = self
            .client_ids
            .iter()
            .zip(&self.demands)
            .map(|(id, &d)| crate::model::Client::new(id.clone(), d))
            .collect();
        let edges = self
            .facilities
            .iter()
            .flat_map(|f| {
                f.profits.iter().map(move |&(j, p)| {
                    Edge::new(f.id.clone(), self.client_ids[j].clone(), ABSTRACT_CHANNEL, self.penalty - p)
                })
            })
            .collect();
        SupplyNetwork::new(facilities, clients, edges, Some(self.penalty))
    }
}

/// Merges each facility's channels into one abstract channel with weights
/// `w[e] = ccap[e] / sum ccap` and profits `p[j] = sum_e w[e] p[j, e]`,
/// where a channel without an edge to `j` contributes profit 0.
pub fn reduce_to_single_channel(net: &SupplyNetwork) -> ReducedNetwork {
    let index = NetworkIndex::build(net);
    reduce_indexed(net, &index)
}

pub(crate) fn reduce_indexed(net: &SupplyNetwork, index: &NetworkIndex) -> ReducedNetwork {
    let mut facilities = Vec::new();
    let mut dropped = Vec::new();
    for (fac, fi) in net.facilities.iter().zip(&index.facilities) {
        let total: f64 = fi.channel_caps.iter().map(|&(_, c)| c).sum();
        if total <= 0.0 {
            dropped.push(fac.id.clone());
            continue;
        }
        let mut weight_by_pos = vec![0.0; index.channels.len()];
        for &(c, cap) in &fi.channel_caps {
            weight_by_pos[c] = cap / total;
        }
        let mut profits: Vec<(usize, f64)> = Vec::new();
        for arc in &fi.arcs {
            let contribution = weight_by_pos[arc.channel] * arc.profit;
            match profits.last_mut() {
                Some((j, p)) if *j == arc.client => *p += contribution,
                _ => profits.push((arc.client, contribution)),
            }
        }
        facilities.push(ReducedFacility {
            id: fac.id.clone(),
            fcap: fac.fcap,
            weights: fi
                .channel_caps
                .iter()
                .map(|&(c, _)| (index.channels[c].clone(), weight_by_pos[c]))
                .collect(),
            profits,
        });
    }
    ReducedNetwork {
        facilities,
        dropped,
        client_ids: net.clients.iter().map(|c| c.id.clone()).collect(),
        demands: index.demands.clone(),
        penalty: net.penalty,
    }
}

/// Worked three-client, three-channel facility used to illustrate channel
/// decoupling. `case` selects one of three profit tables (1, 2 or 3).
///
/// Channel capacities are 15, 15, 20 against `fcap = 30`, penalty 5 and
/// edge costs `5 - profit`; a profit of 0 in the table means the channel
/// does not reach that client.
pub fn decoupling_example(case: u8) -> SupplyNetwork {
    const CHANNELS: [&str; 3] = ["ch1-red", "ch2-blue", "ch3-green"];
    let table: [[f64; 3]; 3] = match case {
        1 => [[3.5, 4.2, 3.9], [4.5, 4.3, 4.1], [4.9, 4.8, 4.7]],
        2 => [[3.5, 0.0, 3.9], [3.5, 4.4, 4.1], [4.9, 3.6, 4.7]],
        3 => [[3.5, 4.2, 3.9], [4.5, 4.3, 0.0], [4.9, 4.8, 4.7]],
        _ => panic!("decoupling example case must be 1, 2 or 3"),
    };
    let penalty = 5.0;
    let facility = Facility::new("f1", 100.0, 30.0)
        .with_channel(CHANNELS[0], 15.0)
        .with_channel(CHANNELS[1], 15.0)
        .with_channel(CHANNELS[2], 20.0);
    let clients = (1..=3).map(|j| crate::model::Client::new(format!("c{j}"), 10.0)).collect();
    let mut edges = Vec::new();
    for (ch, row) in CHANNELS.iter().zip(table) {
        for (j, p) in row.into_iter().enumerate() {
            if p > 0.0 {
                edges.push(Edge::new("f1", format!("c{}", j + 1), *ch, penalty - p));
            }
        }
    }
    SupplyNetwork::new(vec![facility], clients, edges, Some(penalty))
}
