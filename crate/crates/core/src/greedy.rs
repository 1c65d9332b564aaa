//! Stochastic distorted greedy facility selection.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::SupplyNetwork;
use crate::oracles::{CallCounts, ValueOracle};

/// Identifier of the candidate-sampling generator, recorded in every trace.
pub const RNG_ALGORITHM: &str = "chacha8";

/// `ceil((m / k) ln(1 / epsilon))`, clamped to `[1, m]`.
pub fn sample_size(m: usize, k: usize, epsilon: f64) -> usize {
    if m == 0 || k == 0 {
        return 0;
    }
    let r = ((m as f64 / k as f64) * (1.0 / epsilon).ln()).ceil();
    if r.is_nan() {
        return 1;
    }
    (r.max(1.0) as usize).min(m)
}

/// `(1 - 1/k)^(k - l) * g_gain - h_gain` for iteration `l` in `1..=k`.
pub fn distorted_gain(g_gain: f64, h_gain: f64, l: usize, k: usize) -> f64 {
    let factor = (1.0 - 1.0 / k as f64).powi((k - l) as i32);
    factor * g_gain - h_gain
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GreedyConfig {
    pub k: usize,
    pub epsilon: f64,
    pub seed: u64,
}

impl GreedyConfig {
    pub fn new(k: usize, epsilon: f64, seed: u64) -> Self {
        GreedyConfig { k, epsilon, seed }
    }

    pub fn check(&self, m: usize) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidConfig(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        if self.k > m {
            return Err(Error::InvalidConfig(format!("k = {} exceeds the {m} facilities", self.k)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateEval {
    pub facility: String,
    /// `g(S + u)`; absent when the oracle failed.
    pub g_value: Option<f64>,
    pub g_gain: Option<f64>,
    pub h_gain: f64,
    pub distorted_gain: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationTrace {
    pub iteration: usize,
    pub sample: Vec<String>,
    pub candidates: Vec<CandidateEval>,
    /// Facility added this round, if its distorted gain was positive.
    pub chosen: Option<String>,
    pub selected: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GreedyTrace {
    pub rng: &'static str,
    pub k: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub sample_size: usize,
    pub iterations: Vec<IterationTrace>,
    pub selected: Vec<String>,
    /// `g(S)` of the final set as reported by the oracle.
    pub g_value: f64,
    pub counters: CallCounts,
}

/// Runs `k` rounds. Each round draws `min(r, |M - S|)` candidates uniformly
/// without replacement, evaluates `g(S + u)` for all of them in parallel and
/// adds the one with the largest distorted gain (smallest position on ties)
/// if that gain is positive. Candidates whose oracle call fails are skipped.
///
/// Returns the selected facility positions in the order they were added.
pub fn select_facilities(
    net: &SupplyNetwork,
    config: &GreedyConfig,
    oracle: &dyn ValueOracle,
) -> Result<(Vec<usize>, GreedyTrace)> {
    let m = net.facilities.len();
    config.check(m)?;
    let k = config.k;
    let r = sample_size(m, k, config.epsilon);
    let ids = |set: &[usize]| -> Vec<String> { set.iter().map(|&i| net.facilities[i].id.clone()).collect() };

    let mut selected: Vec<usize> = Vec::new();
    let mut in_set = vec![false; m];
    let mut g_current = 0.0;
    let mut iterations = Vec::with_capacity(k);

    for l in 1..=k {
        let remaining: Vec<usize> = (0..m).filter(|&i| !in_set[i]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(l as u64);
        let mut drawn: Vec<usize> = if remaining.len() <= r {
            remaining.clone()
        } else {
            sample(&mut rng, remaining.len(), r)
                .into_iter()
                .map(|p| remaining[p])
                .collect()
        };
        drawn.sort_unstable();

        let results: Vec<Result<f64>> = drawn
            .par_iter()
            .map(|&u| {
                let mut set = selected.clone();
                set.push(u);
                oracle.evaluate(&set).map(|res| res.g_value)
            })
            .collect();

        let mut best: Option<(f64, usize, f64)> = None;
        let mut candidates = Vec::with_capacity(drawn.len());
        for (&u, res) in drawn.iter().zip(results) {
            let h_gain = net.facilities[u].fixed_cost;
            let eval = match res {
                Ok(g) => {
                    let g_gain = g - g_current;
                    let gain = distorted_gain(g_gain, h_gain, l, k);
                    if best.is_none_or(|(b, _, _)| gain > b) {
                        best = Some((gain, u, g));
                    }
                    CandidateEval {
                        facility: net.facilities[u].id.clone(),
                        g_value: Some(g),
                        g_gain: Some(g_gain),
                        h_gain,
                        distorted_gain: Some(gain),
                        error: None,
                    }
                }
                Err(e) => {
                    log::warn!("oracle failed on candidate {}: {e}", net.facilities[u].id);
                    CandidateEval {
                        facility: net.facilities[u].id.clone(),
                        g_value: None,
                        g_gain: None,
                        h_gain,
                        distorted_gain: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            candidates.push(eval);
        }

        let mut chosen = None;
        if let Some((gain, u, g)) = best {
            if gain > 0.0 {
                selected.push(u);
                in_set[u] = true;
                g_current = g;
                chosen = Some(net.facilities[u].id.clone());
            }
        }
        log::debug!("iteration {l}: sampled {}, chose {:?}", drawn.len(), chosen);
        iterations.push(IterationTrace {
            iteration: l,
            sample: ids(&drawn),
            candidates,
            chosen,
            selected: ids(&selected),
        });
    }

    let trace = GreedyTrace {
        rng: RNG_ALGORITHM,
        k,
        epsilon: config.epsilon,
        seed: config.seed,
        sample_size: r,
        iterations,
        selected: ids(&selected),
        g_value: g_current,
        counters: oracle.counters(),
    };
    Ok((selected, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Client, Edge, Facility};
    use crate::oracles::ExactOracle;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sample_size_examples() {
        assert_eq!(sample_size(150, 10, 0.01), 70);
        assert_eq!(sample_size(10, 10, 0.01), 5);
        assert_eq!(sample_size(10, 3, 0.999_999), 1);
        assert_eq!(sample_size(5, 1, 1e-9), 5);
    }

    #[test]
    fn distorted_gain_examples() {
        assert_abs_diff_eq!(distorted_gain(10.0, 2.0, 1, 4), 2.218_75, epsilon = 1e-12);
        assert_eq!(distorted_gain(10.0, 2.0, 4, 4), 8.0);
        assert_eq!(distorted_gain(7.0, 3.0, 1, 1), 4.0);
    }

    fn two_facilities(fixed_b: f64) -> SupplyNetwork {
        let a = Facility::new("a", 1.0, 10.0).with_channel("x", 10.0);
        let b = Facility::new("b", fixed_b, 10.0).with_channel("x", 10.0);
        let edges = vec![Edge::new("a", "c1", "x", 1.0), Edge::new("b", "c2", "x", 4.0)];
        let clients = vec![Client::new("c1", 5.0), Client::new("c2", 5.0)];
        SupplyNetwork::new(vec![a, b], clients, edges, Some(5.0))
    }

    #[test]
    fn picks_the_only_profitable_facility() {
        let net = two_facilities(50.0);
        let oracle = ExactOracle::new(&net);
        let (s, trace) = select_facilities(&net, &GreedyConfig::new(1, 0.01, 3), &oracle).unwrap();
        assert_eq!(s, vec![0]);
        assert_eq!(trace.selected, vec!["a"]);
        assert_abs_diff_eq!(trace.g_value, 20.0, epsilon = 1e-9);
    }

    #[test]
    fn expensive_facilities_are_never_opened() {
        let mut net = two_facilities(500.0);
        net.facilities[0].fixed_cost = 500.0;
        let oracle = ExactOracle::new(&net);
        let (s, trace) = select_facilities(&net, &GreedyConfig::new(2, 0.01, 0), &oracle).unwrap();
        assert!(s.is_empty());
        assert!(trace.iterations.iter().all(|it| it.chosen.is_none()));
    }

    #[test]
    fn zero_rounds_select_nothing() {
        let net = two_facilities(1.0);
        let oracle = ExactOracle::new(&net);
        let (s, trace) = select_facilities(&net, &GreedyConfig::new(0, 0.01, 0), &oracle).unwrap();
        assert!(s.is_empty() && trace.iterations.is_empty());
        assert_eq!(oracle.counters().oracle_invocations, 0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let net = two_facilities(1.0);
        let oracle = ExactOracle::new(&net);
        assert!(select_facilities(&net, &GreedyConfig::new(3, 0.01, 0), &oracle).is_err());
        assert!(select_facilities(&net, &GreedyConfig::new(1, 1.0, 0), &oracle).is_err());
    }
}
