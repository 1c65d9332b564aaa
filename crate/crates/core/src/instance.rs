//! Instance files and the synthetic instance generator.
//!
//! Instances are single JSON documents:
//!
//! ```json
//! {
//!   "facilities": [{"id": "f1", "fixed_cost": 7.0, "fcap": 10.0,
//!                   "channels": [{"channel": "ground", "ccap": 10.0}]}],
//!   "clients": [{"id": "c1", "demand": 5.0}],
//!   "edges": [{"facility": "f1", "client": "c1", "channel": "ground", "cost": 1.0}],
//!   "penalty_C": 5.0
//! }
//! ```
//!
//! `penalty_C` is optional and defaults to five times the largest edge cost.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{validate, Client, Edge, Facility, SupplyNetwork, DEFAULT_PENALTY_MULTIPLIER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelDoc {
    pub channel: String,
    pub ccap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FacilityDoc {
    pub id: String,
    pub fixed_cost: f64,
    pub fcap: f64,
    pub channels: Vec<ChannelDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientDoc {
    pub id: String,
    pub demand: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeDoc {
    pub facility: String,
    pub client: String,
    pub channel: String,
    pub cost: f64,
}

/// On-disk form of a [`SupplyNetwork`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDoc {
    pub facilities: Vec<FacilityDoc>,
    pub clients: Vec<ClientDoc>,
    pub edges: Vec<EdgeDoc>,
    #[serde(rename = "penalty_C", default, skip_serializing_if = "Option::is_none")]
    pub penalty: Option<f64>,
}

impl From<&SupplyNetwork> for NetworkDoc {
    fn from(net: &SupplyNetwork) -> Self {
        NetworkDoc {
            facilities: net
                .facilities
                .iter()
                .map(|f| FacilityDoc {
                    id: f.id.clone(),
                    fixed_cost: f.fixed_cost,
                    fcap: f.fcap,
                    channels: f
                        .channels
                        .iter()
                        .map(|(c, &ccap)| ChannelDoc {
                            channel: c.clone(),
                            ccap,
                        })
                        .collect(),
                })
                .collect(),
            clients: net
                .clients
                .iter()
                .map(|c| ClientDoc {
                    id: c.id.clone(),
                    demand: c.demand,
                })
                .collect(),
            edges: net
                .edges
                .iter()
                .map(|e| EdgeDoc {
                    facility: e.facility.clone(),
                    client: e.client.clone(),
                    channel: e.channel.clone(),
                    cost: e.cost,
                })
                .collect(),
            penalty: Some(net.penalty),
        }
    }
}

pub(crate) fn serialize_network<S: Serializer>(net: &SupplyNetwork, s: S) -> std::result::Result<S::Ok, S::Error> {
    NetworkDoc::from(net).serialize(s)
}

/// Notes produced while loading an instance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    /// The file had no `penalty_C`; the default was applied.
    pub penalty_defaulted: bool,
}

impl NetworkDoc {
    /// Converts to a canonical network, rejecting anything that fails validation.
    pub fn into_network(self) -> Result<(SupplyNetwork, LoadReport)> {
        let mut facilities = Vec::with_capacity(self.facilities.len());
        for (k, f) in self.facilities.into_iter().enumerate() {
            let mut channels = BTreeMap::new();
            for c in f.channels {
                if channels.insert(c.channel.clone(), c.ccap).is_some() {
                    return Err(Error::Schema(format!(
                        "facilities[{k}] (`{}`).channels: duplicate channel `{}`",
                        f.id, c.channel
                    )));
                }
            }
            facilities.push(Facility {
                id: f.id,
                fixed_cost: f.fixed_cost,
                fcap: f.fcap,
                channels,
            });
        }
        let clients = self.clients.into_iter().map(|c| Client::new(c.id, c.demand)).collect();
        let edges = self
            .edges
            .into_iter()
            .map(|e| Edge::new(e.facility, e.client, e.channel, e.cost))
            .collect();
        let report = LoadReport {
            penalty_defaulted: self.penalty.is_none(),
        };
        let net = SupplyNetwork::new(facilities, clients, edges, self.penalty);
        let violations = validate(&net);
        if !violations.is_empty() {
            let listed: Vec<String> = violations.iter().map(ToString::to_string).collect();
            return Err(Error::Schema(listed.join("; ")));
        }
        Ok((net, report))
    }
}

pub fn from_json_str(text: &str) -> Result<(SupplyNetwork, LoadReport)> {
    let doc: NetworkDoc = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    doc.into_network()
}

pub fn to_json_string(net: &SupplyNetwork) -> String {
    let mut s = serde_json::to_string_pretty(&NetworkDoc::from(net)).expect("network serialises");
    s.push('\n');
    s
}

pub fn load(path: impl AsRef<Path>) -> Result<(SupplyNetwork, LoadReport)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    from_json_str(&text).map_err(|e| match e {
        Error::Schema(msg) => Error::Schema(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save(path: impl AsRef<Path>, net: &SupplyNetwork) -> Result<()> {
    fs::write(path, to_json_string(net))?;
    Ok(())
}

/// Writes any serialisable document (solutions, reports) as pretty JSON.
pub fn save_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Parameters of the synthetic generator.
///
/// Facilities and clients are dropped uniformly in the unit square. Each
/// `(facility, client, channel)` triple becomes an edge with probability
/// `edge_density`; its cost grows with distance and with the channel rank,
/// with multiplicative noise. Fixed costs, facility capacities and channel
/// capacities follow truncated normals whose coefficients of variation are
/// matched exactly before rounding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub m: usize,
    pub n: usize,
    pub channels: usize,
    pub edge_density: f64,
    pub fixed_cost_cov: f64,
    pub fcap_cov: f64,
    pub ccap_cov: f64,
    /// Mean fixed cost; defaults to `0.1 * penalty * mean fcap`.
    pub fixed_cost_mean: Option<f64>,
    pub demand_mean: f64,
    pub demand_cov: f64,
    /// Total facility capacity over total demand.
    pub capacity_ratio: f64,
    /// Mean channel capacity as a fraction of mean facility capacity.
    pub channel_share: f64,
    pub cost_scale: f64,
    pub cost_noise: f64,
    pub penalty_multiplier: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            m: 20,
            n: 100,
            channels: 3,
            edge_density: DEFAULT_EDGE_DENSITY,
            fixed_cost_cov: 0.30,
            fcap_cov: 0.28,
            ccap_cov: 0.24,
            fixed_cost_mean: None,
            demand_mean: 100.0,
            demand_cov: 0.5,
            capacity_ratio: 1.0,
            channel_share: 0.5,
            cost_scale: 10.0,
            cost_noise: 0.15,
            penalty_multiplier: DEFAULT_PENALTY_MULTIPLIER,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn new(m: usize, n: usize, channels: usize, seed: u64) -> Self {
        GeneratorSpec {
            m,
            n,
            channels,
            seed,
            ..Default::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.m == 0 || self.n == 0 || self.channels == 0 {
            return bad("m, n and channels must all be at least 1".into());
        }
        if !(self.edge_density > 0.0 && self.edge_density <= 1.0) {
            return bad(format!("edge density must lie in (0, 1], got {}", self.edge_density));
        }
        for (name, v) in [
            ("fixed_cost_cov", self.fixed_cost_cov),
            ("fcap_cov", self.fcap_cov),
            ("ccap_cov", self.ccap_cov),
            ("demand_cov", self.demand_cov),
            ("cost_noise", self.cost_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if self.cost_noise >= 1.0 {
            return bad("cost_noise must be below 1".into());
        }
        if !(0.5..=1.5).contains(&self.capacity_ratio) {
            return bad(format!("capacity_ratio must lie in [0.5, 1.5], got {}", self.capacity_ratio));
        }
        if !(self.channel_share > 0.0 && self.channel_share <= 1.0) {
            return bad(format!("channel_share must lie in (0, 1], got {}", self.channel_share));
        }
        if !(self.demand_mean >= 1.0 && self.cost_scale > 0.0) {
            return bad("demand_mean must be >= 1 and cost_scale > 0".into());
        }
        if !(self.penalty_multiplier > 1.0) {
            return bad("penalty_multiplier must exceed 1".into());
        }
        if let Some(f) = self.fixed_cost_mean {
            if !(f.is_finite() && f >= 0.0) {
                return bad("fixed_cost_mean must be >= 0".into());
            }
        }
        Ok(())
    }
}

/// About 800,000 edges on a 150 x 2000 x 3 network.
pub const DEFAULT_EDGE_DENSITY: f64 = 0.89;

fn width(count: usize) -> usize {
    count.saturating_sub(1).to_string().len()
}

/// Draws `count` values with the given mean and coefficient of variation,
/// then shifts and rescales them so the sample moments match exactly and
/// floors them at `floor`.
fn matched_normal(rng: &mut ChaCha8Rng, count: usize, mean: f64, cov: f64, floor: f64) -> Vec<f64> {
    let sd = mean * cov;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let raw: Vec<f64> = (0..count).map(|_| normal.sample(rng)).collect();
    let k = count as f64;
    let m = raw.iter().sum::<f64>() / k;
    let s = (raw.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / k).sqrt();
    raw.into_iter()
        .map(|v| {
            let z = if s > 0.0 { (v - m) / s } else { 0.0 };
            (mean + z * sd).max(floor)
        })
        .collect()
}

fn round_to(v: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    (v * f).round() / f
}

/// Generates a network from `spec`. The result always validates, gives
/// every client at least one edge, and is a pure function of the spec.
pub fn generate(spec: &GeneratorSpec) -> Result<SupplyNetwork> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (m, n, nc) = (spec.m, spec.n, spec.channels);
    let fid = |i: usize| format!("f{:0w$}", i, w = width(m));
    let cid = |j: usize| format!("c{:0w$}", j, w = width(n));
    let chid = |e: usize| format!("ch{:0w$}", e, w = width(nc));

    let fac_pos: Vec<(f64, f64)> = (0..m).map(|_| (rng.random(), rng.random())).collect();
    let cli_pos: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();

    let demands: Vec<f64> = matched_normal(&mut rng, n, spec.demand_mean, spec.demand_cov, 1.0)
        .into_iter()
        .map(|d| d.round().max(1.0))
        .collect();
    let total_demand: f64 = demands.iter().sum();

    let fcap_mean = spec.capacity_ratio * total_demand / m as f64;
    let fcaps: Vec<f64> = matched_normal(&mut rng, m, 1.0, spec.fcap_cov, 0.05)
        .into_iter()
        .map(|r| (r * fcap_mean).round().max(1.0))
        .collect();
    let ccaps: Vec<f64> = matched_normal(&mut rng, m * nc, spec.channel_share, spec.ccap_cov, 0.05 * spec.channel_share)
        .into_iter()
        .enumerate()
        .map(|(k, r)| (r * fcap_mean).round().max(1.0).min(fcaps[k / nc]))
        .collect();

    let mut edges = Vec::new();
    let mut client_has_edge = vec![false; n];
    for i in 0..m {
        for j in 0..n {
            let dist = ((fac_pos[i].0 - cli_pos[j].0).powi(2) + (fac_pos[i].1 - cli_pos[j].1).powi(2)).sqrt();
            for e in 0..nc {
                let keep = rng.random::<f64>() < spec.edge_density;
                let noise = 1.0 + spec.cost_noise * (2.0 * rng.random::<f64>() - 1.0);
                if keep {
                    let mult = 1.0 + 0.3 * e as f64;
                    let cost = round_to(spec.cost_scale * mult * (0.2 + dist) * noise, 4);
                    edges.push(Edge::new(fid(i), cid(j), chid(e), cost));
                    client_has_edge[j] = true;
                }
            }
        }
    }
    for j in (0..n).filter(|&j| !client_has_edge[j]) {
        let nearest = (0..m)
            .min_by(|&a, &b| {
                let da = (fac_pos[a].0 - cli_pos[j].0).powi(2) + (fac_pos[a].1 - cli_pos[j].1).powi(2);
                let db = (fac_pos[b].0 - cli_pos[j].0).powi(2) + (fac_pos[b].1 - cli_pos[j].1).powi(2);
                da.total_cmp(&db)
            })
            .expect("m >= 1");
        let dist = ((fac_pos[nearest].0 - cli_pos[j].0).powi(2) + (fac_pos[nearest].1 - cli_pos[j].1).powi(2)).sqrt();
        edges.push(Edge::new(fid(nearest), cid(j), chid(0), round_to(spec.cost_scale * (0.2 + dist), 4)));
    }

    let max_cost = edges.iter().map(|e| e.cost).fold(0.0, f64::max);
    let penalty = round_to(spec.penalty_multiplier * max_cost, 4);
    let fixed_mean = spec
        .fixed_cost_mean
        .unwrap_or(0.1 * penalty * fcaps.iter().sum::<f64>() / m as f64);
    let fixed: Vec<f64> = matched_normal(&mut rng, m, fixed_mean, spec.fixed_cost_cov, 0.0)
        .into_iter()
        .map(|f| round_to(f, 2))
        .collect();

    let facilities = (0..m)
        .map(|i| {
            let mut f = Facility::new(fid(i), fixed[i], fcaps[i]);
            for e in 0..nc {
                f.channels.insert(chid(e), ccaps[i * nc + e]);
            }
            f
        })
        .collect();
    let clients = (0..n).map(|j| Client::new(cid(j), demands[j])).collect();
    let net = SupplyNetwork::new(facilities, clients, edges, Some(penalty));
    debug_assert!(validate(&net).is_empty(), "{:?}", validate(&net));
    Ok(net)
}

/// Empirical coefficient of variation (population standard deviation over mean).
pub fn coefficient_of_variation(values: &[f64]) -> f64 {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
    if mean == 0.0 {
        0.0
    } else {
        var.sqrt() / mean
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_FACILITY: &str = r#"{
      "facilities": [
        {"id": "f1", "fixed_cost": 7.0, "fcap": 10.0, "channels": [{"channel": "ground", "ccap": 10.0}]},
        {"id": "f2", "fixed_cost": 4.0, "fcap": 6.0,
         "channels": [{"channel": "air", "ccap": 4.0}, {"channel": "ground", "ccap": 5.0}]}
      ],
      "clients": [{"id": "c1", "demand": 5.0}, {"id": "c2", "demand": 3.0}],
      "edges": [
        {"facility": "f1", "client": "c1", "channel": "ground", "cost": 1.0},
        {"facility": "f2", "client": "c1", "channel": "air", "cost": 2.5},
        {"facility": "f2", "client": "c2", "channel": "ground", "cost": 0.5}
      ]
    }"#;

    #[test]
    fn missing_penalty_defaults_to_five_times_max_cost() {
        let (net, report) = from_json_str(TWO_FACILITY).unwrap();
        assert!(report.penalty_defaulted);
        assert_eq!(net.penalty, 12.5);
        assert_eq!(net.channels.len(), 2);
    }

    #[test]
    fn negative_demand_is_rejected() {
        let text = TWO_FACILITY.replace(r#""demand": 3.0"#, r#""demand": -3.0"#);
        let err = from_json_str(&text).unwrap_err().to_string();
        assert!(err.contains("client `c2`"), "{err}");
    }

    #[test]
    fn schema_errors_name_the_field() {
        let text = TWO_FACILITY.replace(r#""demand": 5.0"#, r#""demnd": 5.0"#);
        let err = from_json_str(&text).unwrap_err().to_string();
        assert!(err.contains("demnd") && err.contains("line"), "{err}");
    }

    #[test]
    fn duplicate_channel_is_rejected() {
        let text = TWO_FACILITY.replace(r#"{"channel": "air", "ccap": 4.0}"#, r#"{"channel": "ground", "ccap": 4.0}"#);
        assert!(from_json_str(&text).unwrap_err().to_string().contains("duplicate channel"));
    }

    #[test]
    fn round_trip_is_exact() {
        let net = generate(&GeneratorSpec::new(6, 15, 3, 4)).unwrap();
        let (back, report) = from_json_str(&to_json_string(&net)).unwrap();
        assert!(!report.penalty_defaulted);
        assert_eq!(back, net);
    }

    #[test]
    fn zero_density_is_rejected() {
        let spec = GeneratorSpec {
            edge_density: 0.0,
            ..GeneratorSpec::new(3, 3, 1, 0)
        };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn zero_cov_gives_equal_fixed_costs() {
        let spec = GeneratorSpec {
            fixed_cost_cov: 0.0,
            ..GeneratorSpec::new(10, 20, 2, 3)
        };
        let net = generate(&spec).unwrap();
        let first = net.facilities[0].fixed_cost;
        assert!(net.facilities.iter().all(|f| f.fixed_cost == first));
    }

    #[test]
    fn same_seed_same_network() {
        let spec = GeneratorSpec::new(8, 30, 3, 11);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = GeneratorSpec { seed: 12, ..spec };
        assert_ne!(generate(&other).unwrap(), generate(&GeneratorSpec::new(8, 30, 3, 11)).unwrap());
    }

    #[test]
    fn sparse_instances_still_reach_every_client() {
        let spec = GeneratorSpec {
            edge_density: 0.01,
            ..GeneratorSpec::new(3, 40, 2, 5)
        };
        let net = generate(&spec).unwrap();
        for c in &net.clients {
            assert!(net.edges.iter().any(|e| e.client == c.id), "{} unreachable", c.id);
        }
    }
}
