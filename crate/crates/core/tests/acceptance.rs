//! End-to-end acceptance checks. Each test prints one `ACCEPTANCE <n>` line.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use anongoss::adversary;
use anongoss::aggregation::{AggregatorKind, AveragingAggregator, CycleDriver};
use anongoss::config::ScenarioConfig;
use anongoss::crypto::{Crypto, PeerId};
use anongoss::delegation::{DelegationMsg, Profile};
use anongoss::onion::{self, ForwardAction, RoutePlan, RouteTable};
use anongoss::result_return::{self, ReturnMode};
use anongoss::sampling::PeerSampler;
use anongoss::sim::NodeId;
use anongoss::world::World;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

fn verdict(n: u32, ok: bool, detail: String) -> bool {
    // Straight to the handle so the line shows without --nocapture.
    let line = format!(
        "ACCEPTANCE {n:>2} {}: {detail}\n",
        if ok { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    ok
}

/// N=50, zero churn, k ~ U{5..20}, identity aggregation.
fn delegation_run(delegations: usize, seed: u64) -> ScenarioConfig {
    let mut c = ScenarioConfig::seeded(seed);
    c.n_nodes = 50;
    c.sim.record_transmissions = false;
    c.delegation.phi_size = 40;
    c.workload.delegations = delegations;
    c.workload.start_tick = 500;
    c.workload.spread_ticks = 2000;
    c.sim_ticks = 4000;
    c.aggregation.aggregator = AggregatorKind::Identity;
    c
}

#[test]
fn criteria_1_and_2_round_trip_and_knowledge_bound() {
    let started = Instant::now();
    let mut c = delegation_run(1000, 11);
    // Keep every record so the scan sees all of them at the end.
    c.onion.route_ttl_ticks = None;
    let mut w = World::new(&c).unwrap();
    w.run();
    let elapsed = started.elapsed().as_secs_f64();

    let mut recovered = 0;
    let mut within_bound = 0;
    let lmax = w.config().sim.latency_max;
    for t in &w.ledger().delegations {
        let origin = w.node(&t.origin).unwrap();
        let Some(p) = origin.delegation(t.id) else {
            continue;
        };
        let sent = DelegationMsg {
            profile: p.profile.clone(),
            reply_key: p.reply_key.clone(),
        }
        .encode();
        let delegate = w.node(&p.plan.delegate).unwrap();
        let got: Vec<Vec<u8>> = delegate
            .tasks
            .iter()
            .filter(|x| x.route_tag == p.route_tag)
            .map(|x| {
                DelegationMsg {
                    profile: x.profile.clone(),
                    reply_key: x.reply_key.clone(),
                }
                .encode()
            })
            .collect();
        if got == vec![sent] {
            recovered += 1;
        }
        if matches!((t.first_delivery_hops, t.first_delivery_ticks), (Some(h), Some(x)) if x <= h as u64 * lmax)
        {
            within_bound += 1;
        }
    }
    let wrong_key = w.counters().wrong_key;
    let ok1 = verdict(
        1,
        recovered == 1000 && within_bound == 1000 && wrong_key == 0 && elapsed < 10.0,
        format!("{recovered}/1000 delegations recovered byte-exact, {within_bound} within (k+1) hop latencies, {wrong_key} WrongKey, {elapsed:.2}s"),
    );

    let h = w.hygiene_scan();
    let expected_routes = w.ledger().routes.len() + w.ledger().probe_routes.len();
    let ok2 = verdict(
        2,
        h.clean() && h.routes == expected_routes && h.records > 0,
        format!(
            "{} routes, {} hop records scanned: {} adjacency violations, {} origin leaks",
            h.routes, h.records, h.adjacency_violations, h.origin_leaks
        ),
    );
    assert!(ok1 && ok2);
}

#[test]
fn criterion_3_route_length_secrecy() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut crypto = Crypto::new();
    let keys: Vec<_> = (0..30).map(|_| crypto.keygen(&mut rng)).collect();
    let ids: Vec<NodeId> = keys.iter().map(|k| NodeId(k.public)).collect();
    let slots = onion::OnionConfig::default().slots();
    let mut sizes = std::collections::BTreeSet::new();
    let mut hop_sizes = std::collections::BTreeSet::new();
    for k in [5usize, 20] {
        for _ in 0..100 {
            let mut pick = ids.clone();
            pick.shuffle(&mut rng);
            let plan = RoutePlan {
                relays: pick[1..=k].to_vec(),
                delegate: pick[k + 1],
            };
            let payload = DelegationMsg {
                profile: Profile::new(vec![rng.random_range(0.0..1.0)]).unwrap(),
                reply_key: anongoss::crypto::SymKey::generate(&mut rng),
            }
            .encode();
            let (pkt, _) = onion::build_onion(&crypto, &plan, &payload, slots, &mut rng).unwrap();
            sizes.insert(pkt.to_message().encode().len());
            // Every hop forwards a packet of the same size too.
            let mut table = RouteTable::new();
            let mut cur = pkt;
            let mut from = pick[0];
            for hop in plan.hops() {
                let i = ids.iter().position(|x| *x == hop).unwrap();
                match onion::peel_and_forward(&keys[i].secret, from, &cur, 0, &mut table, &mut rng)
                    .unwrap()
                {
                    ForwardAction::Forward { packet, .. } => {
                        hop_sizes.insert(packet.to_message().encode().len());
                        cur = packet;
                    }
                    ForwardAction::DeliverLocal { .. } => break,
                }
                from = hop;
            }
        }
    }
    let ok = verdict(
        3,
        sizes.len() == 1 && hop_sizes == sizes,
        format!(
            "wire sizes over 100 builds at k=5 and k=20: {sizes:?}; after each peel: {hop_sizes:?}"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_4_collusion_oracle() {
    let results: Vec<_> = [0.1, 0.3, 0.5]
        .par_iter()
        .map(|f| {
            adversary::collusion_experiment(100, *f, 10_000, 5, 20, 40 + (*f * 10.0) as u64, |_| {})
        })
        .collect();
    let mut ok = true;
    let mut parts = Vec::new();
    for s in &results {
        // Oracle from the plain sum, independent of the closed form.
        let direct: f64 = (5..=20).map(|k| s.colluder_fraction.powi(k)).sum::<f64>() / 16.0;
        let sigma = (direct * (1.0 - direct) / s.routes as f64).sqrt();
        let good = (s.rate - direct).abs() <= 3.0 * sigma
            && (s.oracle - direct).abs() < 1e-12
            && s.origin_always_candidate;
        ok &= good;
        parts.push(format!(
            "f={}: {}/{} = {:.5} vs oracle {:.5} (3σ={:.5})",
            s.colluder_fraction,
            s.deanonymized,
            s.routes,
            s.rate,
            direct,
            3.0 * sigma
        ));
    }
    assert!(verdict(4, ok, parts.join("; ")));
}

fn pull_run(mode: ReturnMode) -> World {
    let mut c = delegation_run(520, 21);
    c.sim.record_transmissions = true;
    c.adversary.sniffer = true;
    c.result.return_mode = mode;
    c.workload.spread_ticks = 5000;
    c.sim_ticks = 7000;
    let mut w = World::new(&c).unwrap();
    w.run();
    w
}

#[test]
fn criterion_5_sniffer_contrast() {
    let (naive, reenc) = rayon::join(
        || pull_run(ReturnMode::PullNaive),
        || pull_run(ReturnMode::PullReenc),
    );
    let mut detail = Vec::new();
    let mut ok = true;
    for (name, w) in [("pull_naive", &naive), ("pull_reenc", &reenc)] {
        let pulls = &w.ledger().pulls;
        ok &= pulls.len() >= 500;
        let pulls = &pulls[..pulls.len().min(500)];
        let honest = w.honest();
        let s = adversary::sniffer_trace(w.transmissions(), pulls, &honest, 99, |_| {});
        if name == "pull_naive" {
            ok &= s.identified == s.pulls;
            detail.push(format!("{name}: identified {}/{}", s.identified, s.pulls));
        } else {
            let good = s.multi_hop_chains == 0 && (s.rate - s.baseline).abs() <= 3.0 * s.sigma;
            ok &= good;
            detail.push(format!(
                "{name}: {} multi-hop chains, rate {:.4} vs baseline {:.4} ± {:.4}",
                s.multi_hop_chains,
                s.rate,
                s.baseline,
                3.0 * s.sigma
            ));
        }
    }
    assert!(verdict(5, ok, detail.join("; ")));
}

/// N=100, sparse delegations, window long enough to cover each epoch.
fn flood_run(mode: ReturnMode, seed: u64) -> World {
    let mut c = ScenarioConfig::seeded(seed);
    c.n_nodes = 100;
    c.sim.record_transmissions = false;
    c.workload.delegations = 100;
    c.workload.start_tick = 500;
    c.workload.spread_ticks = 10_000;
    c.sim_ticks = 12_000;
    c.aggregation.aggregator = AggregatorKind::Identity;
    c.result.return_mode = mode;
    c.result.window_ticks = Some(1000);
    let mut w = World::new(&c).unwrap();
    w.run();
    w
}

#[test]
fn criteria_6_and_7_flooding() {
    let seeds: Vec<u64> = (0..5).map(|i| 600 + i).collect();
    let runs: Vec<(World, World)> = seeds
        .par_iter()
        .map(|s| {
            (
                flood_run(ReturnMode::PushWindow, *s),
                flood_run(ReturnMode::PushFull, *s),
            )
        })
        .collect();
    let mut trials = 0;
    let mut received = 0;
    let mut paired = Vec::new();
    for (win, _) in &runs {
        for t in &win.ledger().delegations {
            trials += 1;
            received += usize::from(t.result_at.is_some() && t.result_correct == Some(true));
        }
    }
    let mut fewer = true;
    for (win, full) in &runs {
        let (a, b) = (win.counters().msg_flood, full.counters().msg_flood);
        fewer &= a < b;
        paired.push(format!("{a}<{b}"));
    }
    let ok6 = verdict(
        6,
        trials == 500 && received == 500 && fewer,
        format!(
            "onion-window origin receipt {received}/{trials}; flood transmissions window vs full per seed: {}",
            paired.join(", ")
        ),
    );

    let mut records = Vec::new();
    let mut origins = BTreeMap::new();
    for (win, full) in &runs {
        for w in [win, full] {
            records.extend(w.ledger().forwards.iter().cloned());
            origins.extend(w.ledger().origins.iter().map(|(k, v)| (*k, *v)));
        }
    }
    let cmp = result_return::compare_flood_traces(&records, &origins);
    let ok7 = verdict(
        7,
        cmp.indistinguishable() && cmp.origin_records > 0 && cmp.other_records > 0,
        format!(
            "{} origin and {} other forwarding records, {} rule violations, distinguishing features: {:?}",
            cmp.origin_records, cmp.other_records, cmp.rule_violations, cmp.distinguishing
        ),
    );
    assert!(ok6 && ok7);
}

#[test]
fn criterion_8_aggregation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let nodes: Vec<NodeId> = (0..64u8)
        .map(|i| NodeId(PeerId::from_bytes([i + 1; 32])))
        .collect();
    let values: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..100.0)).collect();
    let mean = values.iter().sum::<f64>() / 64.0;
    let profiles: Vec<Profile> = values
        .iter()
        .map(|v| Profile::new(vec![*v]).unwrap())
        .collect();
    let mut d = CycleDriver::new(AveragingAggregator::new(1e-8, 5), nodes, &profiles);
    let (s0, w0) = d.plugin.total_mass();
    let mut worst_mass: f64 = 0.0;
    let mut converged_at = None;
    let mut worst_err = f64::INFINITY;
    for round in 1..=50 {
        let r = d.round(&mut rng).unwrap();
        let (s, w) = &r.mass;
        worst_mass = worst_mass
            .max(((s[0] - s0[0]) / s0[0]).abs())
            .max(((w - w0) / w0).abs());
        worst_err = r
            .estimates
            .iter()
            .map(|e| ((e[0] - mean) / mean).abs())
            .fold(0.0, f64::max);
        if worst_err <= 1e-6 && converged_at.is_none() {
            converged_at = Some(round);
        }
    }
    let ok = verdict(
        8,
        converged_at.is_some() && worst_err <= 1e-6 && worst_mass <= 1e-9,
        format!("64 delegates within 1e-6 of the mean from round {converged_at:?} (error at round 50: {worst_err:.2e}); worst per-round mass drift {worst_mass:.2e}"),
    );
    assert!(ok);
}

#[test]
fn criterion_9_sampling_quality() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 100;
    let ids: Vec<NodeId> = (0..n as u64)
        .map(|i| {
            let mut b = [0u8; 32];
            b[..8].copy_from_slice(&(i + 1).to_le_bytes());
            NodeId(PeerId::from_bytes(b))
        })
        .collect();
    let pos: BTreeMap<NodeId, usize> = ids.iter().enumerate().map(|(i, x)| (*x, i)).collect();
    let mut net: Vec<PeerSampler> = (0..n)
        .map(|i| {
            let boot: Vec<NodeId> = rand::seq::index::sample(&mut rng, n - 1, 5)
                .into_iter()
                .map(|j| ids[if j >= i { j + 1 } else { j }])
                .collect();
            PeerSampler::new(ids[i], 20, 10, &boot)
        })
        .collect();
    let mut violations = 0;
    for _ in 0..50 {
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
        violations += net
            .iter()
            .filter(|s| s.view().check_invariants(&s.owner()).is_err() || s.view().len() > 20)
            .count();
    }
    let me = &net[0];
    let mut counts = vec![0usize; n];
    let draws = 10_000;
    for _ in 0..draws {
        let s = me.sample(1, 0, &mut rng).unwrap();
        counts[pos[&s.peers[0]]] += 1;
    }
    let uniform = 1.0 / (n - 1) as f64;
    let tvd = 0.5
        * (1..n)
            .map(|i| (counts[i] as f64 / draws as f64 - uniform).abs())
            .sum::<f64>()
        + 0.5 * counts[0] as f64 / draws as f64;
    let ok = verdict(
        9,
        tvd < 0.1 && violations == 0,
        format!("TVD {tvd:.4} over {draws} draws (history {}), {violations} view invariant violations in 50 rounds", me.history_size()),
    );
    assert!(ok);
}

#[test]
fn criterion_10_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("scenario.toml");
    std::fs::write(
        &cfg,
        r#"
seed = 77
name = "determinism"
n_nodes = 40
sim_ticks = 3000
[delegation]
phi_size = 30
[workload]
delegations = 15
[adversary]
colluder_fraction = 0.2
sniffer = true
[sweep]
"result.return_mode" = ["pull_reenc", "push_window"]
"#,
    )
    .unwrap();
    let mut outs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        anongoss::cli::run(&cfg, &out, None, &[]).unwrap();
        outs.push(out);
    }
    let mut same = true;
    let mut sizes = Vec::new();
    for f in ["summary.csv", "events.jsonl", "reports.jsonl"] {
        let a = std::fs::read(outs[0].join(f)).unwrap();
        let b = std::fs::read(outs[1].join(f)).unwrap();
        same &= a == b && !a.is_empty();
        sizes.push(format!("{f} {} bytes", a.len()));
    }
    assert!(verdict(
        10,
        same,
        format!(
            "two runs, two sweep cells, byte-identical: {}",
            sizes.join(", ")
        )
    ));
}
