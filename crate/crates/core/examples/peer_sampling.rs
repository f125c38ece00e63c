//! Gossip peer sampling on 100 nodes, then how uniform one node's samples are.

use std::collections::BTreeMap;

use anongoss::crypto::PeerId;
use anongoss::sampling::PeerSampler;
use anongoss::sim::NodeId;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let n = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ids: Vec<NodeId> = (0..n as u64)
        .map(|i| {
            let mut b = [0u8; 32];
            b[..8].copy_from_slice(&(i + 1).to_le_bytes());
            NodeId(PeerId::from_bytes(b))
        })
        .collect();
    let pos: BTreeMap<NodeId, usize> = ids.iter().enumerate().map(|(i, x)| (*x, i)).collect();
    // Ring bootstrap: everyone starts knowing only their next five neighbours.
    let mut net: Vec<PeerSampler> = (0..n)
        .map(|i| {
            let boot: Vec<NodeId> = (1..=5).map(|d| ids[(i + d) % n]).collect();
            PeerSampler::new(ids[i], 20, 10, &boot)
        })
        .collect();

    for round in 1..=50 {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for i in order {
            let Ok((partner, offer)) = net[i].begin_round(&mut rng) else {
                continue;
            };
            let j = pos[&partner];
            let reply = net[j].handle_request(ids[i], &offer, &mut rng);
            net[i].handle_reply(&reply);
        }
        if round % 10 == 0 {
            println!(
                "round {round:>2}: node 0 has seen {} distinct peers",
                net[0].history_size()
            );
        }
    }

    let draws = 20_000;
    let mut counts = vec![0usize; n];
    for _ in 0..draws {
        let s = net[0].sample(1, 0, &mut rng).unwrap();
        counts[pos[&s.peers[0]]] += 1;
    }
    let uniform = 1.0 / (n - 1) as f64;
    let tvd: f64 = 0.5
        * (1..n)
            .map(|i| (counts[i] as f64 / draws as f64 - uniform).abs())
            .sum::<f64>();
    println!("total variation distance from uniform over {draws} draws: {tvd:.4}");

    let phi = net[0].sample(30, 0, &mut rng).unwrap();
    println!(
        "a 30-peer sample set: {} peers, self included: {}",
        phi.len(),
        phi.contains(&ids[0])
    );
}
