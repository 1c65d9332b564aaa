#![allow(dead_code)]

use mcflp::instance::{generate, GeneratorSpec};
use mcflp::SupplyNetwork;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small random instance with integer demands and capacities. Fixed costs
/// are scaled by a random factor so that some facilities are not worth opening.
pub fn small_instance(seed: u64, m: usize, n: usize, channels: usize) -> SupplyNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x5eed);
    let spec = GeneratorSpec {
        edge_density: rng.random_range(0.4..0.9),
        capacity_ratio: rng.random_range(0.5..1.5),
        channel_share: rng.random_range(0.25..0.6),
        demand_mean: 10.0,
        ..GeneratorSpec::new(m, n, channels, seed)
    };
    let mut net = generate(&spec).unwrap();
    let factor: f64 = rng.random_range(1.0..6.0);
    for f in &mut net.facilities {
        f.fixed_cost = (f.fixed_cost * factor * 100.0).round() / 100.0;
    }
    net
}

/// Every subset of `0..m`, as sorted position lists.
pub fn all_subsets(m: usize) -> Vec<Vec<usize>> {
    (0u32..1 << m)
        .map(|mask| (0..m).filter(|&i| mask & (1 << i) != 0).collect())
        .collect()
}

/// Worst-case rounding of the exact oracle: one quantum of profit per
/// capacity arc in the flow network.
pub fn quantum_slack(net: &SupplyNetwork, quantum: f64) -> f64 {
    let arcs = net.facilities.len() * (1 + net.channels.len()) + 2 * net.clients.len();
    quantum * net.penalty * arcs as f64
}
