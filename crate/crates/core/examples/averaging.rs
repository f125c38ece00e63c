//! Push-pull averaging on 32 delegates, cycle by cycle.

use anongoss::aggregation::{AveragingAggregator, CycleDriver};
use anongoss::crypto::PeerId;
use anongoss::delegation::Profile;
use anongoss::sim::NodeId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let nodes: Vec<NodeId> = (0..32u8)
        .map(|i| NodeId(PeerId::from_bytes([i + 1; 32])))
        .collect();
    let values: Vec<f64> = (0..32).map(|_| rng.random_range(0.0..10.0)).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let profiles: Vec<Profile> = values
        .iter()
        .map(|v| Profile::new(vec![*v]).unwrap())
        .collect();

    let mut d = CycleDriver::new(AveragingAggregator::new(1e-9, 5), nodes, &profiles);
    println!("true mean {mean:.6}");
    for round in 1..=30 {
        let r = d.round(&mut rng).unwrap();
        let worst = r
            .estimates
            .iter()
            .map(|e| (e[0] - mean).abs())
            .fold(0.0, f64::max);
        if round % 5 == 0 {
            println!(
                "round {round:>2}: worst error {worst:.3e}, total mass s={:.6} w={:.6}",
                r.mass.0[0], r.mass.1
            );
        }
    }
}
