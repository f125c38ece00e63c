//! Honest-but-curious adversaries and the anonymity they are left with.
//!
//! Analyses only read what the adversary could hold: colluders' route
//! records (looked up through [`StateSource`]) and recorded link traffic.
//! Ground truth is used to score the analysis, never to feed it, with one
//! exception spelled out on [`analyze_collusion`].

use std::collections::{BTreeMap, BTreeSet, HashMap};

use bytes::Bytes;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::crypto::Crypto;
use crate::onion::{
    self, Downstream, ForwardAction, RouteHopState, RoutePlan, RouteTable, RouteTag,
};
use crate::sampling::SampleSet;
use crate::sim::{LinkTransmission, NodeId, Tick};
use crate::wire::MessageKind;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AdversaryError {
    #[error("route {0} has no completed record")]
    UnknownRoute(u64),
    #[error("delegate holds no task on that route")]
    UnknownTask,
}

/// Read access to nodes' stored route records.
pub trait StateSource {
    fn route_state(&self, node: NodeId, tag: &RouteTag) -> Option<RouteHopState>;
}

impl StateSource for BTreeMap<NodeId, RouteTable> {
    fn route_state(&self, node: NodeId, tag: &RouteTag) -> Option<RouteHopState> {
        self.get(&node).and_then(|t| t.get(tag)).copied()
    }
}

impl StateSource for HashMap<NodeId, RouteTable> {
    fn route_state(&self, node: NodeId, tag: &RouteTag) -> Option<RouteHopState> {
        self.get(&node).and_then(|t| t.get(tag)).copied()
    }
}

/// Ground truth for one forward route.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RouteTrace {
    pub id: u64,
    pub origin: NodeId,
    pub plan: RoutePlan,
    pub route_tag: RouteTag,
    pub started_at: Tick,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CollusionSet {
    pub members: BTreeSet<NodeId>,
}

impl CollusionSet {
    pub fn new(members: impl IntoIterator<Item = NodeId>) -> Self {
        Self {
            members: members.into_iter().collect(),
        }
    }

    pub fn contains(&self, n: &NodeId) -> bool {
        self.members.contains(n)
    }

    /// Every member's record for `tag`.
    pub fn pooled(
        &self,
        src: &impl StateSource,
        tag: &RouteTag,
    ) -> BTreeMap<NodeId, RouteHopState> {
        self.members
            .iter()
            .filter_map(|m| src.route_state(*m, tag).map(|s| (*m, s)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Collusion,
    Delegate,
    Sniffer,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnonymityReport {
    pub kind: ReportKind,
    pub route_id: u64,
    pub k: usize,
    pub colluder_fraction: f64,
    #[serde(skip)]
    pub candidate_set: BTreeSet<NodeId>,
    pub candidates: usize,
    pub honest: usize,
    pub degree: f64,
    pub fully_deanonymized: bool,
    pub origin_in_candidates: bool,
}

/// Normalized entropy of a uniform posterior over `candidates` out of
/// `honest` nodes.
pub fn degree(candidates: usize, honest: usize) -> f64 {
    if candidates <= 1 || honest <= 1 {
        0.0
    } else {
        ((candidates as f64).log2() / (honest as f64).log2()).min(1.0)
    }
}

/// Honest nodes the pooled records prove are not the origin: anyone a
/// colluder forwarded to, and the upstream of a colluding chain ending at the
/// delegate when that chain is shorter than `k_min` relays.
fn excluded(
    members: &CollusionSet,
    pooled: &BTreeMap<NodeId, RouteHopState>,
    k_min: usize,
) -> BTreeSet<NodeId> {
    let mut out = BTreeSet::new();
    for st in pooled.values() {
        if let Downstream::Next(x) = st.downstream {
            if !members.contains(&x) {
                out.insert(x);
            }
        }
    }
    if let Some((_, st)) = pooled
        .iter()
        .find(|(_, s)| s.downstream == Downstream::Terminal)
    {
        let mut relays = 0;
        let mut up = st.upstream;
        while let Some(s) = pooled.get(&up) {
            relays += 1;
            up = s.upstream;
        }
        if relays < k_min && !members.contains(&up) {
            out.insert(up);
        }
    }
    out
}

fn report(
    kind: ReportKind,
    route: &RouteTrace,
    population: &[NodeId],
    members: &CollusionSet,
    candidate_set: BTreeSet<NodeId>,
    fully: bool,
    f: f64,
) -> AnonymityReport {
    let honest = population.iter().filter(|n| !members.contains(n)).count();
    AnonymityReport {
        kind,
        route_id: route.id,
        k: route.plan.k(),
        colluder_fraction: f,
        candidates: candidate_set.len(),
        honest,
        degree: degree(candidate_set.len(), honest),
        fully_deanonymized: fully,
        origin_in_candidates: candidate_set.contains(&route.origin),
        candidate_set,
    }
}

/// Pools the colluders' records for `route` and bounds the origin.
///
/// Full deanonymization follows the model rule: it holds exactly when every
/// relay of the route colludes (checked against the route's plan), in which
/// case the origin is read off `ρ_1`'s record. Otherwise the candidate set is
/// every honest node not excluded by pooled knowledge.
pub fn analyze_collusion(
    cs: &CollusionSet,
    src: &impl StateSource,
    route: &RouteTrace,
    population: &[NodeId],
    k_min: usize,
    f: f64,
) -> Result<AnonymityReport, AdversaryError> {
    if src
        .route_state(route.plan.delegate, &route.route_tag)
        .is_none()
    {
        return Err(AdversaryError::UnknownRoute(route.id));
    }
    let pooled = cs.pooled(src, &route.route_tag);
    let fully = route.plan.relays.iter().all(|r| cs.contains(r));
    let candidates = if fully {
        let first = pooled
            .get(&route.plan.relays[0])
            .expect("colluding first relay holds a record");
        BTreeSet::from([first.upstream])
    } else {
        let ex = excluded(cs, &pooled, k_min);
        population
            .iter()
            .filter(|n| !cs.contains(n) && !ex.contains(n))
            .copied()
            .collect()
    };
    Ok(report(
        ReportKind::Collusion,
        route,
        population,
        cs,
        candidates,
        fully,
        f,
    ))
}

/// What the delegate alone can say about who sent it the task on `route`.
pub fn delegate_view(
    delegate: NodeId,
    src: &impl StateSource,
    route: &RouteTrace,
    population: &[NodeId],
    k_min: usize,
) -> Result<AnonymityReport, AdversaryError> {
    match src.route_state(delegate, &route.route_tag) {
        Some(s) if s.downstream == Downstream::Terminal => {}
        _ => return Err(AdversaryError::UnknownTask),
    }
    let cs = CollusionSet::new([delegate]);
    let pooled = cs.pooled(src, &route.route_tag);
    let ex = excluded(&cs, &pooled, k_min);
    let candidates = population
        .iter()
        .filter(|n| **n != delegate && !ex.contains(n))
        .copied()
        .collect();
    Ok(report(
        ReportKind::Delegate,
        route,
        population,
        &cs,
        candidates,
        false,
        0.0,
    ))
}

/// `P[all k relays collude]` with `k ~ U{k_min..=k_max}` and each relay
/// colluding independently with probability `f`.
pub fn full_deanonymization_oracle(f: f64, k_min: usize, k_max: usize) -> f64 {
    let m = (k_max - k_min + 1) as f64;
    if f == 1.0 {
        return 1.0;
    }
    // Geometric sum f^k_min + ... + f^k_max.
    let sum = f.powi(k_min as i32) * (1.0 - f.powi((k_max - k_min + 1) as i32)) / (1.0 - f);
    sum / m
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CollusionSummary {
    pub colluder_fraction: f64,
    pub routes: usize,
    pub deanonymized: usize,
    pub rate: f64,
    pub oracle: f64,
    pub sigma: f64,
    pub mean_degree: f64,
    pub origin_always_candidate: bool,
}

impl CollusionSummary {
    pub fn within_3_sigma(&self) -> bool {
        (self.rate - self.oracle).abs() <= 3.0 * self.sigma
    }
}

/// Runs `routes` independent routes through the real onion code on an
/// `n`-node population. For each route, every node other than the origin
/// colludes independently with probability `f`.
pub fn collusion_experiment(
    n: usize,
    f: f64,
    routes: usize,
    k_min: usize,
    k_max: usize,
    seed: u64,
    mut on_report: impl FnMut(&AnonymityReport),
) -> CollusionSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut crypto = Crypto::new();
    let keys: Vec<_> = (0..n).map(|_| crypto.keygen(&mut rng)).collect();
    let population: Vec<NodeId> = keys.iter().map(|k| NodeId(k.public)).collect();
    let secret: HashMap<NodeId, usize> = population
        .iter()
        .enumerate()
        .map(|(i, n)| (*n, i))
        .collect();
    let slots = k_max + 1;
    let mut deanonymized = 0;
    let mut degree_sum = 0.0;
    let mut origin_always = true;
    for id in 0..routes {
        let o = rng.random_range(0..n);
        let origin = population[o];
        let peers: Vec<NodeId> = population
            .iter()
            .copied()
            .filter(|p| *p != origin)
            .collect();
        let cs = CollusionSet::new(peers.iter().copied().filter(|_| rng.random_bool(f)));
        let phi = SampleSet { peers, drawn_at: 0 };
        let plan =
            onion::plan_route(&phi, k_min, k_max, &mut rng).expect("population exceeds k_max");
        let (mut pkt, tag) =
            onion::build_onion(&crypto, &plan, b"task", slots, &mut rng).expect("registered keys");
        let mut tables: BTreeMap<NodeId, RouteTable> = BTreeMap::new();
        let mut from = origin;
        for hop in plan.hops() {
            let table = tables.entry(hop).or_default();
            match onion::peel_and_forward(
                &keys[secret[&hop]].secret,
                from,
                &pkt,
                0,
                table,
                &mut rng,
            )
            .expect("planned hop")
            {
                ForwardAction::Forward { packet, .. } => pkt = packet,
                ForwardAction::DeliverLocal { .. } => break,
            }
            from = hop;
        }
        let route = RouteTrace {
            id: id as u64,
            origin,
            plan,
            route_tag: tag,
            started_at: 0,
        };
        let rep = analyze_collusion(&cs, &tables, &route, &population, k_min, f)
            .expect("route completed");
        deanonymized += usize::from(rep.fully_deanonymized);
        degree_sum += rep.degree;
        origin_always &= rep.origin_in_candidates;
        on_report(&rep);
    }
    let oracle = full_deanonymization_oracle(f, k_min, k_max);
    CollusionSummary {
        colluder_fraction: f,
        routes,
        deanonymized,
        rate: deanonymized as f64 / routes as f64,
        oracle,
        sigma: (oracle * (1.0 - oracle) / routes as f64).sqrt(),
        mean_degree: degree_sum / routes as f64,
        origin_always_candidate: origin_always,
    }
}

/// Reply transmissions grouped by identical wire bytes.
#[derive(Clone, Debug)]
pub struct ReplyChain {
    pub wire: Bytes,
    pub hops: Vec<(NodeId, NodeId, Tick)>,
}

impl ReplyChain {
    /// The one receiver that never re-sends these bytes, if unique.
    pub fn terminal(&self) -> Option<NodeId> {
        let senders: BTreeSet<NodeId> = self.hops.iter().map(|h| h.0).collect();
        let ends: BTreeSet<NodeId> = self
            .hops
            .iter()
            .map(|h| h.1)
            .filter(|n| !senders.contains(n))
            .collect();
        (ends.len() == 1).then(|| *ends.iter().next().expect("one element"))
    }
}

/// A passive observer's view: links reply-kind transmissions by byte
/// equality. Only the kind byte and raw bytes are used.
pub fn link_reply_chains(transmissions: &[LinkTransmission]) -> Vec<ReplyChain> {
    let mut order: Vec<Bytes> = Vec::new();
    let mut groups: HashMap<Bytes, Vec<(NodeId, NodeId, Tick)>> = HashMap::new();
    for t in transmissions {
        if !MessageKind::of_wire(&t.wire_bytes).is_some_and(MessageKind::is_reply) {
            continue;
        }
        let g = groups.entry(t.wire_bytes.clone()).or_insert_with(|| {
            order.push(t.wire_bytes.clone());
            Vec::new()
        });
        g.push((t.from, t.to, t.at));
    }
    order
        .into_iter()
        .map(|w| {
            let hops = groups.remove(&w).expect("grouped");
            ReplyChain { wire: w, hops }
        })
        .collect()
}

/// Ground truth for one pull reply: the bytes the delegate put on the wire
/// and the origin they were meant for.
#[derive(Clone, Debug)]
pub struct PullTruth {
    pub id: u64,
    pub k: usize,
    pub first_wire: Bytes,
    pub origin: NodeId,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SnifferSummary {
    pub pulls: usize,
    pub identified: usize,
    pub rate: f64,
    pub baseline: f64,
    pub sigma: f64,
    pub multi_hop_chains: usize,
}

/// For each pull, names a terminal: the chain end if byte equality links
/// more than one hop, else a uniform guess among `honest`.
pub fn sniffer_trace(
    transmissions: &[LinkTransmission],
    pulls: &[PullTruth],
    honest: &[NodeId],
    seed: u64,
    mut on_report: impl FnMut(&AnonymityReport),
) -> SnifferSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chains = link_reply_chains(transmissions);
    let multi_hop_chains = chains.iter().filter(|c| c.hops.len() > 1).count();
    let by_wire: HashMap<&Bytes, &ReplyChain> = chains.iter().map(|c| (&c.wire, c)).collect();
    let mut identified = 0;
    for p in pulls {
        let linked = by_wire
            .get(&p.first_wire)
            .filter(|c| c.hops.len() > 1)
            .and_then(|c| c.terminal());
        let (guess, candidates) = match linked {
            Some(t) => (Some(t), BTreeSet::from([t])),
            None => (
                honest.choose(&mut rng).copied(),
                honest.iter().copied().collect(),
            ),
        };
        identified += usize::from(guess == Some(p.origin));
        let n = candidates.len();
        on_report(&AnonymityReport {
            kind: ReportKind::Sniffer,
            route_id: p.id,
            k: p.k,
            colluder_fraction: 0.0,
            origin_in_candidates: candidates.contains(&p.origin),
            candidate_set: candidates,
            candidates: n,
            honest: honest.len(),
            degree: degree(n, honest.len()),
            fully_deanonymized: n == 1,
        });
    }
    let baseline = if honest.is_empty() {
        0.0
    } else {
        1.0 / honest.len() as f64
    };
    let pulls_n = pulls.len().max(1) as f64;
    SnifferSummary {
        pulls: pulls.len(),
        identified,
        rate: identified as f64 / pulls_n,
        baseline,
        sigma: (baseline * (1.0 - baseline) / pulls_n).sqrt(),
        multi_hop_chains,
    }
}

/// Nodes a sniffer sees receiving a flooded result: under full flooding,
/// everyone.
pub fn flood_candidates(transmissions: &[LinkTransmission]) -> BTreeMap<Bytes, BTreeSet<NodeId>> {
    let mut out: BTreeMap<Bytes, BTreeSet<NodeId>> = BTreeMap::new();
    for t in transmissions {
        if MessageKind::of_wire(&t.wire_bytes) == Some(MessageKind::Flood) {
            out.entry(t.wire_bytes.clone()).or_default().insert(t.to);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{KeyPair, PeerId};
    use crate::wire::Message;

    struct Routed {
        population: Vec<NodeId>,
        tables: BTreeMap<NodeId, RouteTable>,
        route: RouteTrace,
    }

    fn routed(n: usize, k: usize, seed: u64) -> Routed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut crypto = Crypto::new();
        let keys: Vec<KeyPair> = (0..n).map(|_| crypto.keygen(&mut rng)).collect();
        let population: Vec<NodeId> = keys.iter().map(|k| NodeId(k.public)).collect();
        let plan = RoutePlan {
            relays: population[1..=k].to_vec(),
            delegate: population[k + 1],
        };
        let (mut pkt, tag) = onion::build_onion(&crypto, &plan, b"x", 21, &mut rng).unwrap();
        let mut tables: BTreeMap<NodeId, RouteTable> = BTreeMap::new();
        let mut from = population[0];
        for (i, hop) in plan.hops().enumerate() {
            let t = tables.entry(hop).or_default();
            if let ForwardAction::Forward { packet, .. } =
                onion::peel_and_forward(&keys[i + 1].secret, from, &pkt, 0, t, &mut rng).unwrap()
            {
                pkt = packet;
            }
            from = hop;
        }
        Routed {
            route: RouteTrace {
                id: 1,
                origin: population[0],
                plan,
                route_tag: tag,
                started_at: 0,
            },
            population,
            tables,
        }
    }

    #[test]
    fn no_colluders_leaves_every_honest_node() {
        let r = routed(30, 5, 1);
        let rep = analyze_collusion(
            &CollusionSet::default(),
            &r.tables,
            &r.route,
            &r.population,
            5,
            0.0,
        )
        .unwrap();
        assert_eq!(rep.candidates, 30);
        assert!(!rep.fully_deanonymized);
        assert_eq!(rep.degree, 1.0);
    }

    #[test]
    fn all_relays_collude() {
        let r = routed(30, 5, 2);
        let cs = CollusionSet::new(r.route.plan.relays.clone());
        let rep = analyze_collusion(&cs, &r.tables, &r.route, &r.population, 5, 0.0).unwrap();
        assert!(rep.fully_deanonymized);
        assert_eq!(rep.candidate_set, BTreeSet::from([r.route.origin]));
        assert_eq!(rep.degree, 0.0);
    }

    #[test]
    fn enlarging_collusion_never_grows_candidates() {
        let r = routed(40, 8, 3);
        let mut order: Vec<NodeId> = r.population[1..].to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
            let mut prev: Option<BTreeSet<NodeId>> = None;
            for m in 0..=order.len() {
                let cs = CollusionSet::new(order[..m].iter().copied());
                let rep =
                    analyze_collusion(&cs, &r.tables, &r.route, &r.population, 5, 0.0).unwrap();
                assert!(rep.origin_in_candidates);
                assert!((0.0..=1.0).contains(&rep.degree));
                assert_eq!(rep.degree == 0.0, rep.candidates == 1);
                if let Some(p) = &prev {
                    assert!(rep.candidate_set.is_subset(p));
                }
                prev = Some(rep.candidate_set);
            }
        }
    }

    #[test]
    fn delegate_alone_and_with_last_relay() {
        let r = routed(30, 6, 4);
        let mu = r.route.plan.delegate;
        let rk = *r.route.plan.relays.last().unwrap();
        let rep = delegate_view(mu, &r.tables, &r.route, &r.population, 5).unwrap();
        assert!(rep.origin_in_candidates);
        assert!(rep.candidates >= 30 - 6 - 1);
        assert_eq!(
            rep.candidate_set,
            r.population
                .iter()
                .copied()
                .filter(|n| *n != mu && *n != rk)
                .collect()
        );

        // Enumerate exactly which honest nodes {μ, ρ_k} can rule out.
        let cs = CollusionSet::new([mu, rk]);
        let rep = analyze_collusion(&cs, &r.tables, &r.route, &r.population, 5, 0.0).unwrap();
        let rk1 = r.route.plan.relays[r.route.plan.k() - 2];
        let want: BTreeSet<NodeId> = r
            .population
            .iter()
            .copied()
            .filter(|n| ![mu, rk, rk1].contains(n))
            .collect();
        assert_eq!(rep.candidate_set, want);

        // Delegate with every relay is the full case.
        let mut all = r.route.plan.relays.clone();
        all.push(mu);
        let rep = analyze_collusion(
            &CollusionSet::new(all),
            &r.tables,
            &r.route,
            &r.population,
            5,
            0.0,
        )
        .unwrap();
        assert!(rep.fully_deanonymized && rep.candidates == 1);

        let stranger = NodeId(PeerId::from_bytes([0; 32]));
        assert_eq!(
            delegate_view(stranger, &r.tables, &r.route, &r.population, 5).unwrap_err(),
            AdversaryError::UnknownTask
        );
        let mut broken = r.route.clone();
        broken.route_tag = [9; 16];
        assert_eq!(
            analyze_collusion(&cs, &r.tables, &broken, &r.population, 5, 0.0).unwrap_err(),
            AdversaryError::UnknownRoute(1)
        );
    }

    #[test]
    fn oracle_matches_direct_sum() {
        for f in [0.0, 0.1, 0.3, 0.5, 0.9, 1.0] {
            let direct: f64 = (5..=20).map(|k| f64::powi(f, k)).sum::<f64>() / 16.0;
            let closed = full_deanonymization_oracle(f, 5, 20);
            assert!((direct - closed).abs() <= 1e-15 + 1e-12 * direct, "f={f}");
        }
    }

    #[test]
    fn small_experiment_is_near_oracle() {
        let s = collusion_experiment(60, 0.6, 2000, 1, 4, 5, |_| {});
        assert!(s.within_3_sigma(), "{s:?}");
        assert!(s.origin_always_candidate);
    }

    fn tx(from: u8, to: u8, at: Tick, wire: &[u8]) -> LinkTransmission {
        LinkTransmission {
            from: NodeId(PeerId::from_bytes([from; 32])),
            to: NodeId(PeerId::from_bytes([to; 32])),
            at,
            wire_bytes: Bytes::copy_from_slice(wire),
        }
    }

    #[test]
    fn sniffer_links_only_identical_reply_bytes() {
        let naive = Message::ReplyNaive {
            route_tag: [1; 16],
            body: vec![5; 10],
        }
        .encode();
        let trace = vec![
            tx(9, 8, 1, &naive),
            tx(8, 7, 3, &naive),
            tx(7, 1, 6, &naive),
            tx(7, 1, 6, &[MessageKind::Onion as u8, 1, 2]),
            tx(1, 2, 7, &[MessageKind::Onion as u8, 1, 2]),
        ];
        let chains = link_reply_chains(&trace);
        assert_eq!(chains.len(), 1);
        assert_eq!(
            chains[0].terminal(),
            Some(NodeId(PeerId::from_bytes([1; 32])))
        );
    }
}
