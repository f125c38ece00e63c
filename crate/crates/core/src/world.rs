//! A whole population running the protocol on the simulator, plus the
//! ground-truth ledger that metrics and the adversary harness read. Nothing a
//! node does consults the ledger.

use std::collections::{BTreeMap, HashMap};

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::adversary::{self, AnonymityReport, CollusionSet, PullTruth, RouteTrace, StateSource};
use crate::aggregation::{AggregateResult, AggregationError, AggregatorPlugin};
use crate::config::{ConfigError, ScenarioConfig};
use crate::crypto::{Crypto, CryptoError, MatchTag, SecretKey};
use crate::delegation::{
    self, DelegatedTask, DelegationError, PendingDelegation, Profile, RetryDecision, TaskStatus,
    DELEGATION_MAGIC,
};
use crate::onion::{
    self, Downstream, ForwardAction, OnionError, OnionPacket, ReplyMode, RouteHopState, RouteTable,
    RouteTag,
};
use crate::result_return::{
    self, FloodMessage, FloodMode, FloodState, ForwardRecord, Holding, OnionUpstreamLog, ProbeMsg,
    PullOutcome, PullReply, ReturnError, TaskLookup, PROBE_MAGIC,
};
use crate::sampling::{self, PeerSampler, ShuffleOffer};
use crate::sim::{EventKind, LinkTransmission, NodeId, SimEvent, SimStats, Simulator, Tick};
use crate::wire::{Message, MessageKind};

const T_AGG: u64 = 1;
const T_START: u64 = 2;
const T_RETRY: u64 = 3;
const T_PROBE: u64 = 4;

fn token(kind: u64, arg: u64) -> u64 {
    (kind << 56) | arg
}

fn untoken(t: u64) -> (u64, u64) {
    (t >> 56, t & ((1 << 56) - 1))
}

fn stream(seed: u64, n: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(n);
    r
}

#[derive(Debug, Error)]
pub enum WorldError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

struct OpenProbe {
    delegation: u64,
    probe: ProbeMsg,
    delegate: NodeId,
}

/// Everything one node keeps.
pub struct NodeState {
    pub id: NodeId,
    secret: SecretKey,
    pub sampler: PeerSampler,
    pub routes: RouteTable,
    pub onion_log: OnionUpstreamLog,
    pub flood: FloodState,
    pub tasks: Vec<DelegatedTask>,
    pub delegations: Vec<PendingDelegation>,
    holdings: Vec<Holding>,
    probes: HashMap<RouteTag, OpenProbe>,
}

impl NodeState {
    pub fn delegation(&self, id: u64) -> Option<&PendingDelegation> {
        self.delegations.iter().find(|d| d.id == id)
    }
}

/// Simulator-side truth about one delegation.
#[derive(Clone, Debug, Serialize)]
pub struct DelegationTruth {
    pub id: u64,
    pub origin: NodeId,
    pub planned_at: Tick,
    pub first_sent: Option<Tick>,
    pub attempts: u32,
    /// Tasks created at delegates for this delegation, across attempts.
    pub tasks_created: u32,
    pub first_delivery: Option<Tick>,
    /// Hop count and ticks taken by the first delivered attempt.
    pub first_delivery_hops: Option<usize>,
    pub first_delivery_ticks: Option<Tick>,
    pub result_at: Option<Tick>,
    pub result_correct: Option<bool>,
    pub gave_up: bool,
}

#[derive(Clone, Debug)]
struct RouteInfo {
    delegation: u64,
    probe: bool,
    index: usize,
    sent_at: Tick,
}

#[derive(Default)]
pub struct Ledger {
    pub delegations: Vec<DelegationTruth>,
    /// Forward routes carrying a delegation, in send order.
    pub routes: Vec<RouteTrace>,
    /// Forward routes carrying a probe.
    pub probe_routes: Vec<RouteTrace>,
    pub pulls: Vec<PullTruth>,
    pub forwards: Vec<ForwardRecord>,
    /// Flood tag to the origin that holds its key.
    pub origins: BTreeMap<MatchTag, NodeId>,
    pub colluders: CollusionSet,
    by_tag: HashMap<RouteTag, RouteInfo>,
}

impl Ledger {
    pub fn route_kind(&self, tag: &RouteTag) -> Option<(u64, bool)> {
        self.by_tag.get(tag).map(|r| (r.delegation, r.probe))
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Counters {
    pub msg_onion: u64,
    pub msg_reply: u64,
    pub msg_shuffle: u64,
    pub msg_aggregation: u64,
    pub msg_flood: u64,
    pub wrong_key: u64,
    pub malformed: u64,
    pub unknown_route: u64,
    pub bad_signature: u64,
    pub invalid_flood: u64,
    pub duplicate_flood: u64,
    pub probes: u64,
    pub pull_pending: u64,
    pub pull_unknown: u64,
    pub retries: u64,
    pub give_ups: u64,
    pub phi_too_small: u64,
    pub tasks_created: u64,
    pub results_ready: u64,
    pub routes_expired: u64,
}

/// One line of `events.jsonl`.
#[derive(Clone, Debug, Serialize)]
pub struct ProtocolEvent {
    pub t: Tick,
    pub event: &'static str,
    pub node: NodeId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delegation: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub peer: Option<NodeId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metric {
    pub scenario: String,
    pub metric: String,
    pub value: f64,
    pub unit: &'static str,
}

/// What a finished run hands to the CLI.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub scenario: String,
    pub metrics: Vec<Metric>,
    pub events: Vec<ProtocolEvent>,
    pub reports: Vec<AnonymityReport>,
}

/// Route-state identity scan over every completed route.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct HygieneReport {
    pub routes: usize,
    pub records: usize,
    /// Records naming anything beyond the holder's two route neighbors.
    pub adjacency_violations: usize,
    /// Records or stored tasks naming the origin where it is not adjacent.
    pub origin_leaks: usize,
}

impl HygieneReport {
    pub fn clean(&self) -> bool {
        self.adjacency_violations == 0 && self.origin_leaks == 0
    }
}

pub struct World {
    cfg: ScenarioConfig,
    seed: u64,
    sim: Simulator,
    crypto: Crypto,
    rng: ChaCha8Rng,
    nodes: Vec<NodeState>,
    index: HashMap<NodeId, usize>,
    plugin: Option<Box<dyn AggregatorPlugin>>,
    workload: Vec<(usize, Tick, Profile)>,
    next_task: u64,
    ledger: Ledger,
    counters: Counters,
    events: Vec<ProtocolEvent>,
    reports: Vec<AnonymityReport>,
}

impl StateSource for World {
    fn route_state(&self, node: NodeId, tag: &RouteTag) -> Option<RouteHopState> {
        self.index
            .get(&node)
            .and_then(|i| self.nodes[*i].routes.get(tag).copied())
    }
}

impl World {
    /// Builds the population, bootstraps views and schedules the workload.
    pub fn new(cfg: &ScenarioConfig) -> Result<Self, WorldError> {
        cfg.validate()?;
        let seed = cfg.seed()?;
        let mut sim = Simulator::new(cfg.sim.clone(), seed);
        let mut setup = stream(seed, 1);
        let mut crypto = Crypto::new();
        let keys: Vec<_> = (0..cfg.n_nodes)
            .map(|_| crypto.keygen(&mut setup))
            .collect();
        let ids: Vec<NodeId> = keys.iter().map(|k| NodeId(k.public)).collect();
        let index: HashMap<NodeId, usize> = ids.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        let degree = cfg.sampling.bootstrap_degree.min(cfg.n_nodes - 1);
        let mut nodes = Vec::with_capacity(cfg.n_nodes);
        for (i, kp) in keys.into_iter().enumerate() {
            let boot: Vec<NodeId> = rand::seq::index::sample(&mut setup, cfg.n_nodes - 1, degree)
                .into_iter()
                .map(|j| ids[if j >= i { j + 1 } else { j }])
                .collect();
            nodes.push(NodeState {
                id: ids[i],
                secret: kp.secret,
                sampler: PeerSampler::new(
                    ids[i],
                    cfg.sampling.view_capacity,
                    cfg.sampling.shuffle_size,
                    &boot,
                ),
                routes: RouteTable::new(),
                onion_log: OnionUpstreamLog::default(),
                flood: FloodState::default(),
                tasks: Vec::new(),
                delegations: Vec::new(),
                holdings: Vec::new(),
                probes: HashMap::new(),
            });
            sim.add_node(ids[i]);
        }
        sim.churn_schedule(cfg.churn.clone())
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;

        let mut adv = stream(seed, 4);
        let colluders = CollusionSet::new(
            ids.iter()
                .copied()
                .filter(|_| adv.random_bool(cfg.adversary.colluder_fraction)),
        );
        let mut honest: Vec<usize> = (0..ids.len())
            .filter(|i| !colluders.contains(&ids[*i]))
            .collect();
        if honest.is_empty() {
            honest = (0..ids.len()).collect();
        }

        let mut wl = stream(seed, 2);
        let mut workload = Vec::with_capacity(cfg.workload.delegations);
        let mut ledger = Ledger {
            colluders,
            ..Ledger::default()
        };
        for id in 0..cfg.workload.delegations {
            let origin = honest[wl.random_range(0..honest.len())];
            let at = cfg.workload.start_tick
                + if cfg.workload.spread_ticks > 0 {
                    wl.random_range(0..cfg.workload.spread_ticks)
                } else {
                    0
                };
            let values = (0..cfg.workload.profile_dim)
                .map(|_| wl.random_range(0.0..100.0))
                .collect();
            let profile = Profile::new(values).expect("finite draws");
            ledger.delegations.push(DelegationTruth {
                id: id as u64,
                origin: ids[origin],
                planned_at: at,
                first_sent: None,
                attempts: 0,
                tasks_created: 0,
                first_delivery: None,
                first_delivery_hops: None,
                first_delivery_ticks: None,
                result_at: None,
                result_correct: None,
                gave_up: false,
            });
            workload.push((origin, at, profile));
            sim.schedule(SimEvent {
                at,
                kind: EventKind::TimerFire(ids[origin], token(T_START, id as u64)),
            })
            .expect("future tick");
        }

        let mut rng = stream(seed, 3);
        for id in &ids {
            let g = rng.random_range(1..=cfg.sampling.round_interval_ticks);
            sim.schedule(SimEvent {
                at: g,
                kind: EventKind::GossipRound(*id),
            })
            .expect("future tick");
            let a = rng.random_range(1..=cfg.aggregation.round_interval_ticks);
            sim.schedule(SimEvent {
                at: a,
                kind: EventKind::TimerFire(*id, token(T_AGG, 0)),
            })
            .expect("future tick");
        }

        Ok(Self {
            plugin: cfg.aggregation.plugin(),
            cfg: cfg.clone(),
            seed,
            sim,
            crypto,
            rng,
            nodes,
            index,
            workload,
            next_task: 0,
            ledger,
            counters: Counters::default(),
            events: Vec::new(),
            reports: Vec::new(),
        })
    }

    /// Installs an aggregator when the config named none.
    pub fn register_plugin(
        &mut self,
        plugin: Box<dyn AggregatorPlugin>,
    ) -> Result<(), AggregationError> {
        if self.plugin.is_some() {
            return Err(AggregationError::AlreadyRegistered);
        }
        self.plugin = Some(plugin);
        Ok(())
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn now(&self) -> Tick {
        self.sim.now()
    }

    pub fn population(&self) -> Vec<NodeId> {
        self.nodes.iter().map(|n| n.id).collect()
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    pub fn node(&self, id: &NodeId) -> Option<&NodeState> {
        self.index.get(id).map(|i| &self.nodes[*i])
    }

    pub fn is_live(&self, id: &NodeId) -> bool {
        self.sim.is_live(id)
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn events(&self) -> &[ProtocolEvent] {
        &self.events
    }

    pub fn sim_stats(&self) -> &SimStats {
        self.sim.stats()
    }

    pub fn transmissions(&self) -> &[LinkTransmission] {
        self.sim.transmissions()
    }

    pub fn plugin(&self) -> Option<&dyn AggregatorPlugin> {
        self.plugin.as_deref()
    }

    /// Runs to the configured horizon.
    pub fn run(&mut self) {
        self.run_until(self.cfg.sim_ticks);
    }

    pub fn run_until(&mut self, until: Tick) {
        while let Some(ev) = self.sim.next_event(until) {
            self.handle(ev);
        }
        self.sim.advance_to(until);
    }

    fn reply_mode(&self) -> ReplyMode {
        self.cfg
            .result
            .return_mode
            .reply_mode()
            .unwrap_or(ReplyMode::PerhopReenc)
    }

    fn flood_mode(&self) -> FloodMode {
        self.cfg.result.flood_mode()
    }

    fn log(
        &mut self,
        event: &'static str,
        node: NodeId,
        delegation: Option<u64>,
        peer: Option<NodeId>,
        detail: Option<String>,
    ) {
        log::debug!("t={} {event} node={}", self.sim.now(), node.short());
        self.events.push(ProtocolEvent {
            t: self.sim.now(),
            event,
            node,
            delegation,
            peer,
            detail,
        });
    }

    fn send(&mut self, from: NodeId, to: NodeId, msg: &Message) -> Bytes {
        let wire = msg.encode();
        self.send_wire(from, to, msg.kind(), wire.clone());
        wire
    }

    fn send_wire(&mut self, from: NodeId, to: NodeId, kind: MessageKind, wire: Bytes) {
        let c = &mut self.counters;
        match kind {
            MessageKind::Onion => c.msg_onion += 1,
            MessageKind::ReplyNaive | MessageKind::ReplyReenc => c.msg_reply += 1,
            MessageKind::ShuffleRequest | MessageKind::ShuffleReply => c.msg_shuffle += 1,
            MessageKind::Aggregation => c.msg_aggregation += 1,
            MessageKind::Flood => c.msg_flood += 1,
        }
        self.sim.send(from, to, wire);
    }

    fn after(&mut self, node: NodeId, delay: Tick, kind: u64, arg: u64) {
        let at = self.sim.now() + delay.max(1);
        self.sim
            .schedule(SimEvent {
                at,
                kind: EventKind::TimerFire(node, token(kind, arg)),
            })
            .expect("future tick");
    }

    fn handle(&mut self, ev: SimEvent) {
        match ev.kind {
            EventKind::GossipRound(n) => self.gossip_round(n),
            EventKind::TimerFire(n, t) => {
                let (kind, arg) = untoken(t);
                match kind {
                    T_AGG => self.aggregation_round(n),
                    T_START => self.start_delegation(n, arg as usize),
                    T_RETRY => self.retry_check(n, arg),
                    T_PROBE => self.probe(n, arg),
                    _ => unreachable!("unknown timer {kind}"),
                }
            }
            EventKind::Churn(kind, n) => {
                let name = match kind {
                    crate::sim::ChurnKind::Leave => "node_left",
                    crate::sim::ChurnKind::Join => "node_joined",
                };
                self.log(name, n, None, None, None);
            }
            EventKind::Deliver { from, to, msg } => self.deliver(from, to, msg),
        }
    }

    fn gossip_round(&mut self, n: NodeId) {
        let now = self.sim.now();
        let interval = self.cfg.sampling.round_interval_ticks;
        self.sim
            .schedule(SimEvent {
                at: now + interval,
                kind: EventKind::GossipRound(n),
            })
            .expect("future tick");
        if !self.sim.is_live(&n) {
            return;
        }
        let ttl = self.cfg.onion.route_ttl_ticks;
        let window = match self.flood_mode() {
            FloodMode::OnionWindow(t) => t,
            FloodMode::Full => Some(1),
        };
        let i = self.index[&n];
        let node = &mut self.nodes[i];
        self.counters.routes_expired += node.routes.expire(now, ttl) as u64;
        node.onion_log.prune(now, window);
        if let Ok((partner, offer)) = node.sampler.begin_round(&mut self.rng) {
            self.send(n, partner, &Message::ShuffleRequest(offer.encode()));
        }
    }

    fn aggregation_round(&mut self, n: NodeId) {
        self.after(n, self.cfg.aggregation.round_interval_ticks, T_AGG, 0);
        if !self.sim.is_live(&n) || self.plugin.is_none() {
            return;
        }
        let i = self.index[&n];
        let partner = self.nodes[i].sampler.random_view_peer(&mut self.rng);
        let out = self
            .plugin
            .as_mut()
            .expect("checked")
            .on_gossip_round(n, partner);
        for o in out {
            self.send(n, o.to, &Message::Aggregation(o.body));
        }
        self.poll_tasks(i);
    }

    fn start_delegation(&mut self, n: NodeId, id: usize) {
        let retry_later = self.cfg.sampling.round_interval_ticks * 10;
        if !self.sim.is_live(&n) {
            self.after(
                n,
                self.cfg.sampling.round_interval_ticks,
                T_START,
                id as u64,
            );
            return;
        }
        let now = self.sim.now();
        let i = self.index[&n];
        let profile = self.workload[id].2.clone();
        let node = &self.nodes[i];
        match delegation::delegate_task(
            &self.crypto,
            &node.sampler,
            id as u64,
            profile,
            &self.cfg.delegation,
            &self.cfg.onion,
            now,
            &mut self.rng,
        ) {
            Ok((pending, out)) => {
                let truth = &mut self.ledger.delegations[id];
                truth.first_sent = Some(now);
                truth.attempts = 1;
                self.ledger.origins.insert(pending.tag, n);
                self.record_route(id as u64, n, pending.plan.clone(), pending.route_tag, false);
                let node = &mut self.nodes[i];
                node.holdings.push(Holding {
                    delegation: pending.id,
                    reply_key: pending.reply_key.clone(),
                    tag: pending.tag,
                });
                let delegate = pending.delegate;
                node.delegations.push(pending);
                self.log("delegation_sent", n, Some(id as u64), Some(delegate), None);
                self.send(n, out.first_hop, &out.packet.to_message());
                self.after(n, self.cfg.delegation.retry_ticks, T_RETRY, id as u64);
                if !self.cfg.result.return_mode.is_push() {
                    self.after(n, self.cfg.result.probe_backoff_ticks, T_PROBE, id as u64);
                }
            }
            Err(DelegationError::PhiTooSmall(m)) => {
                self.counters.phi_too_small += 1;
                self.log("phi_too_small", n, Some(id as u64), None, Some(m));
                self.after(n, retry_later, T_START, id as u64);
            }
            Err(e) => {
                self.log(
                    "delegation_failed",
                    n,
                    Some(id as u64),
                    None,
                    Some(e.to_string()),
                );
            }
        }
    }

    fn record_route(
        &mut self,
        id: u64,
        origin: NodeId,
        plan: onion::RoutePlan,
        tag: RouteTag,
        probe: bool,
    ) {
        let list = if probe {
            &mut self.ledger.probe_routes
        } else {
            &mut self.ledger.routes
        };
        let index = list.len();
        list.push(RouteTrace {
            id: index as u64,
            origin,
            plan,
            route_tag: tag,
            started_at: self.sim.now(),
        });
        self.ledger.by_tag.insert(
            tag,
            RouteInfo {
                delegation: id,
                probe,
                index,
                sent_at: self.sim.now(),
            },
        );
    }

    fn retry_check(&mut self, n: NodeId, id: u64) {
        let i = self.index[&n];
        let now = self.sim.now();
        let Some(p) = self.nodes[i].delegation(id) else {
            return;
        };
        if !p.is_live() {
            return;
        }
        if !self.sim.is_live(&n) {
            self.after(n, self.cfg.delegation.retry_ticks, T_RETRY, id);
            return;
        }
        match delegation::retry_policy(p, now, &self.cfg.delegation) {
            RetryDecision::Wait => {
                let at = p.last_sent + self.cfg.delegation.retry_ticks;
                self.after(n, at - now, T_RETRY, id);
            }
            RetryDecision::RebuildAndResend => {
                let node = &mut self.nodes[i];
                let pos = node
                    .delegations
                    .iter()
                    .position(|d| d.id == id)
                    .expect("found above");
                let mut p = node.delegations[pos].clone();
                match delegation::rebuild(
                    &self.crypto,
                    &node.sampler,
                    &mut p,
                    &self.cfg.delegation,
                    &self.cfg.onion,
                    now,
                    &mut self.rng,
                ) {
                    Ok(out) => {
                        self.counters.retries += 1;
                        self.ledger.delegations[id as usize].attempts = p.attempts;
                        self.record_route(id, n, p.plan.clone(), p.route_tag, false);
                        self.log(
                            "delegation_retry",
                            n,
                            Some(id),
                            Some(p.delegate),
                            Some(format!("attempt {}", p.attempts)),
                        );
                        self.nodes[i].delegations[pos] = p;
                        self.send(n, out.first_hop, &out.packet.to_message());
                    }
                    Err(e) => {
                        self.counters.phi_too_small += 1;
                        self.log("phi_too_small", n, Some(id), None, Some(e.to_string()));
                    }
                }
                self.after(n, self.cfg.delegation.retry_ticks, T_RETRY, id);
            }
            RetryDecision::GiveUp => {
                let node = &mut self.nodes[i];
                if let Some(p) = node.delegations.iter_mut().find(|d| d.id == id) {
                    p.gave_up = true;
                }
                self.counters.give_ups += 1;
                self.ledger.delegations[id as usize].gave_up = true;
                self.log("delegation_gave_up", n, Some(id), None, None);
            }
        }
    }

    fn probe(&mut self, n: NodeId, id: u64) {
        let i = self.index[&n];
        let now = self.sim.now();
        let Some(p) = self.nodes[i].delegation(id) else {
            return;
        };
        if !p.is_live() {
            return;
        }
        let (delegate, tag) = (p.delegate, p.tag);
        self.after(n, self.cfg.result.probe_backoff_ticks, T_PROBE, id);
        if !self.sim.is_live(&n) {
            return;
        }
        let node = &self.nodes[i];
        let phi = match node
            .sampler
            .sample(self.cfg.delegation.phi_size, now, &mut self.rng)
        {
            Ok(phi) => phi,
            Err(e) => {
                self.counters.phi_too_small += 1;
                self.log("phi_too_small", n, Some(id), None, Some(e.to_string()));
                return;
            }
        };
        let built = onion::plan_route_to(
            &phi,
            delegate,
            self.cfg.onion.k_min,
            self.cfg.onion.k_max,
            &mut self.rng,
        )
        .and_then(|plan| {
            let probe = ProbeMsg::new(tag, &mut self.rng);
            onion::build_onion(
                &self.crypto,
                &plan,
                &probe.encode(),
                self.cfg.onion.slots(),
                &mut self.rng,
            )
            .map(|(pkt, route_tag)| (plan, probe, pkt, route_tag))
        });
        match built {
            Ok((plan, probe, pkt, route_tag)) => {
                self.counters.probes += 1;
                let first = plan.relays[0];
                self.record_route(id, n, plan, route_tag, true);
                self.nodes[i].probes.insert(
                    route_tag,
                    OpenProbe {
                        delegation: id,
                        probe,
                        delegate,
                    },
                );
                self.log("probe_sent", n, Some(id), Some(delegate), None);
                self.send(n, first, &pkt.to_message());
            }
            Err(e) => {
                self.counters.phi_too_small += 1;
                self.log("phi_too_small", n, Some(id), None, Some(e.to_string()));
            }
        }
    }

    fn deliver(&mut self, from: NodeId, to: NodeId, wire: Bytes) {
        let msg = match Message::decode(&wire) {
            Ok(m) => m,
            Err(_) => {
                self.counters.malformed += 1;
                return;
            }
        };
        let i = self.index[&to];
        match msg {
            Message::ShuffleRequest(b) => match ShuffleOffer::decode(&b) {
                Ok(offer) => {
                    let reply = self.nodes[i]
                        .sampler
                        .handle_request(from, &offer, &mut self.rng);
                    self.send(
                        to,
                        from,
                        &Message::ShuffleReply(sampling::encode_entries(&reply)),
                    );
                }
                Err(_) => self.counters.malformed += 1,
            },
            Message::ShuffleReply(b) => match sampling::decode_entries(&b) {
                Ok(entries) => self.nodes[i].sampler.handle_reply(&entries),
                Err(_) => self.counters.malformed += 1,
            },
            Message::Aggregation(b) => {
                let Some(plugin) = self.plugin.as_mut() else {
                    return;
                };
                match plugin.on_message(to, from, &b) {
                    Ok(out) => {
                        for o in out {
                            self.send(to, o.to, &Message::Aggregation(o.body));
                        }
                    }
                    Err(_) => self.counters.malformed += 1,
                }
            }
            Message::Onion(b) => self.on_onion(i, from, &b),
            m @ (Message::ReplyNaive { .. } | Message::ReplyReenc(_)) => self.on_reply(i, &m),
            Message::Flood(b) => match FloodMessage::decode(&b) {
                Ok(fm) => self.on_flood(i, Some(from), fm, wire),
                Err(_) => self.counters.malformed += 1,
            },
        }
    }

    fn count_onion_error(&mut self, n: NodeId, e: &OnionError) {
        match e {
            OnionError::Crypto(CryptoError::WrongKey) => {
                self.counters.wrong_key += 1;
                self.log("wrong_key", n, None, None, None);
            }
            OnionError::UnknownRoute => {
                self.counters.unknown_route += 1;
                self.log("unknown_route", n, None, None, None);
            }
            _ => self.counters.malformed += 1,
        }
    }

    fn on_onion(&mut self, i: usize, from: NodeId, b: &[u8]) {
        let now = self.sim.now();
        let n = self.nodes[i].id;
        let Ok(packet) = OnionPacket::decode(b) else {
            self.counters.malformed += 1;
            return;
        };
        if matches!(self.flood_mode(), FloodMode::OnionWindow(_)) {
            self.nodes[i].onion_log.record(now, from);
        }
        let node = &mut self.nodes[i];
        match onion::peel_and_forward(
            &node.secret,
            from,
            &packet,
            now,
            &mut node.routes,
            &mut self.rng,
        ) {
            Ok(ForwardAction::Forward { packet, next }) => {
                self.send(n, next, &packet.to_message());
            }
            Ok(ForwardAction::DeliverLocal { payload, route_tag }) => match payload.first() {
                Some(&DELEGATION_MAGIC) => self.accept_task(i, &payload, route_tag),
                Some(&PROBE_MAGIC) => self.answer(i, &payload, route_tag),
                _ => self.counters.malformed += 1,
            },
            Err(e) => self.count_onion_error(n, &e),
        }
    }

    fn accept_task(&mut self, i: usize, payload: &[u8], route_tag: RouteTag) {
        let now = self.sim.now();
        let n = self.nodes[i].id;
        let task_id = self.next_task;
        match delegation::on_delegation_received(task_id, payload, route_tag, now) {
            Ok(task) => {
                self.next_task += 1;
                self.counters.tasks_created += 1;
                if let Some(p) = self.plugin.as_mut() {
                    p.on_task(n, task_id, &task.profile);
                }
                self.nodes[i].tasks.push(task);
                let info = self.ledger.by_tag.get(&route_tag).cloned();
                if let Some(info) = &info {
                    let hops = self.ledger.routes[info.index].plan.k() + 1;
                    let t = &mut self.ledger.delegations[info.delegation as usize];
                    t.tasks_created += 1;
                    if t.first_delivery.is_none() {
                        t.first_delivery = Some(now);
                        t.first_delivery_hops = Some(hops);
                        t.first_delivery_ticks = Some(now - info.sent_at);
                    }
                }
                if let Some(info) = info.as_ref().filter(|x| !x.probe) {
                    self.analyze_route(info.index);
                }
                self.log("task_received", n, info.map(|x| x.delegation), None, None);
                self.poll_tasks(i);
            }
            Err(e) => {
                self.counters.malformed += 1;
                self.log("task_rejected", n, None, None, Some(e.to_string()));
            }
        }
    }

    fn answer(&mut self, i: usize, payload: &[u8], route_tag: RouteTag) {
        let Ok(probe) = ProbeMsg::decode(payload) else {
            self.counters.malformed += 1;
            return;
        };
        let n = self.nodes[i].id;
        let mode = self.reply_mode();
        let node = &self.nodes[i];
        let matching: Vec<&DelegatedTask> = node
            .tasks
            .iter()
            .filter(|t| t.match_tag() == probe.task_ref)
            .collect();
        let ready = matching.iter().find_map(|t| match &t.status {
            TaskStatus::Aggregated(r) => Some((&t.reply_key, r)),
            TaskStatus::Pending => None,
        });
        let (lookup, status) = match (ready, matching.is_empty()) {
            (Some((reply_key, result)), _) => (TaskLookup::Ready { reply_key, result }, "ready"),
            (None, false) => (TaskLookup::Pending, "pending"),
            (None, true) => (TaskLookup::Unknown, "unknown"),
        };
        let reply = result_return::answer_probe(&node.secret, &probe, lookup, &mut self.rng);
        match onion::reply_upstream(
            &self.crypto,
            &node.routes,
            &route_tag,
            &reply.encode(),
            mode,
            &mut self.rng,
        ) {
            Ok((up, msg)) => {
                let info = self.ledger.by_tag.get(&route_tag).cloned();
                self.log(
                    "probe_answered",
                    n,
                    info.as_ref().map(|x| x.delegation),
                    None,
                    Some(status.into()),
                );
                let wire = self.send(n, up, &msg);
                if let (Some(info), "ready") = (info, status) {
                    let route = &self.ledger.probe_routes[info.index];
                    self.ledger.pulls.push(PullTruth {
                        id: route.id,
                        k: route.plan.k(),
                        first_wire: wire,
                        origin: route.origin,
                    });
                }
            }
            Err(e) => self.count_onion_error(n, &e),
        }
    }

    fn on_reply(&mut self, i: usize, msg: &Message) {
        let n = self.nodes[i].id;
        let mode = self.reply_mode();
        let (tag, body) = match onion::open_reply(&self.nodes[i].secret, msg) {
            Ok(x) => x,
            Err(e) => return self.count_onion_error(n, &e),
        };
        if let Some(open) = self.nodes[i].probes.get(&tag) {
            let (id, delegate, probe) = (open.delegation, open.delegate, open.probe);
            let Some(p) = self.nodes[i].delegation(id) else {
                return;
            };
            let outcome = PullReply::decode(&body).and_then(|r| {
                result_return::check_pull_reply(
                    &self.crypto,
                    delegate.peer(),
                    &probe,
                    &p.reply_key,
                    &r,
                )
            });
            match outcome {
                Ok(PullOutcome::Ready(r)) => self.origin_result(i, id, r, delegate),
                Ok(PullOutcome::Pending) => self.counters.pull_pending += 1,
                Ok(PullOutcome::Unknown) => self.counters.pull_unknown += 1,
                Err(ReturnError::BadSignature) => {
                    self.counters.bad_signature += 1;
                    self.log("bad_signature", n, Some(id), None, None);
                }
                Err(_) => self.counters.malformed += 1,
            }
            return;
        }
        let node = &self.nodes[i];
        match onion::reply_upstream(&self.crypto, &node.routes, &tag, &body, mode, &mut self.rng) {
            Ok((up, m)) => {
                self.send(n, up, &m);
            }
            Err(e) => self.count_onion_error(n, &e),
        }
    }

    fn origin_result(&mut self, i: usize, id: u64, r: AggregateResult, delegate: NodeId) {
        let now = self.sim.now();
        let n = self.nodes[i].id;
        let Some(p) = self.nodes[i].delegations.iter_mut().find(|d| d.id == id) else {
            return;
        };
        if !p.is_live() {
            return;
        }
        p.result = Some((r.clone(), now));
        let tag = p.tag;
        let correct = self.index.get(&delegate).is_some_and(|d| {
            self.nodes[*d]
                .tasks
                .iter()
                .any(|t| t.match_tag() == tag && t.status == TaskStatus::Aggregated(r.clone()))
        });
        let t = &mut self.ledger.delegations[id as usize];
        t.result_at = Some(now);
        t.result_correct = Some(correct);
        self.log("result_received", n, Some(id), None, None);
    }

    fn poll_tasks(&mut self, i: usize) {
        let Some(plugin) = self.plugin.as_ref() else {
            return;
        };
        let n = self.nodes[i].id;
        let mut ready = Vec::new();
        for (k, t) in self.nodes[i].tasks.iter().enumerate() {
            if t.status == TaskStatus::Pending {
                if let Ok(Some(r)) = plugin.poll_result(n, t.id) {
                    ready.push((k, r));
                }
            }
        }
        for (k, r) in ready {
            self.counters.results_ready += 1;
            self.nodes[i].tasks[k].status = TaskStatus::Aggregated(r.clone());
            let route_tag = self.nodes[i].tasks[k].route_tag;
            let d = self.ledger.by_tag.get(&route_tag).map(|x| x.delegation);
            self.log("result_ready", n, d, None, None);
            if self.cfg.result.return_mode.is_push() {
                let task = &self.nodes[i].tasks[k];
                let tag = task.match_tag();
                if self.nodes[i].flood.seen(&tag) {
                    continue;
                }
                let fm = FloodMessage::new(
                    &self.nodes[i].secret,
                    &task.reply_key,
                    tag,
                    &r,
                    &mut self.rng,
                );
                let wire = Message::Flood(fm.encode()).encode();
                self.log("flood_started", n, d, None, None);
                self.on_flood(i, None, fm, wire);
            }
        }
    }

    fn on_flood(&mut self, i: usize, from: Option<NodeId>, fm: FloodMessage, wire: Bytes) {
        let now = self.sim.now();
        let mode = self.flood_mode();
        let node = &mut self.nodes[i];
        let n = node.id;
        let neighbors: Vec<NodeId> =
            result_return::flood_neighbors(node.sampler.view().peers(), &node.onion_log, now, mode)
                .into_iter()
                .collect();
        let mut rec = ForwardRecord {
            node: n,
            tag: fm.tag,
            from,
            received_at: now,
            forwarded_at: None,
            recipients: Vec::new(),
            neighbors,
            duplicate: false,
            invalid: false,
        };
        if !fm.verify(&self.crypto) {
            rec.invalid = true;
            self.counters.invalid_flood += 1;
        } else if !node.flood.first_sight(fm.tag) {
            rec.duplicate = true;
            self.counters.duplicate_flood += 1;
        } else {
            let matched = result_return::try_match(&node.holdings, &fm);
            rec.recipients = rec
                .neighbors
                .iter()
                .copied()
                .filter(|x| Some(*x) != from && *x != n)
                .collect();
            rec.forwarded_at = Some(now);
            for to in rec.recipients.clone() {
                self.send_wire(n, to, MessageKind::Flood, wire.clone());
            }
            if let Some((id, r)) = matched {
                let delegate = NodeId(fm.delegate);
                self.origin_result(i, id, r, delegate);
            }
        }
        self.ledger.forwards.push(rec);
    }

    /// Checks every completed delegation and probe route: each record holds
    /// exactly its holder's route neighbors, and the origin appears only
    /// where it is adjacent.
    pub fn hygiene_scan(&self) -> HygieneReport {
        let mut rep = HygieneReport::default();
        for (route, probe) in self
            .ledger
            .routes
            .iter()
            .map(|r| (r, false))
            .chain(self.ledger.probe_routes.iter().map(|r| (r, true)))
        {
            let hops: Vec<NodeId> = route.plan.hops().collect();
            let Some(last) = self.route_state(route.plan.delegate, &route.route_tag) else {
                continue;
            };
            rep.routes += 1;
            for (j, h) in hops.iter().enumerate() {
                let Some(st) = self.route_state(*h, &route.route_tag) else {
                    continue;
                };
                rep.records += 1;
                let prev = if j == 0 { route.origin } else { hops[j - 1] };
                let expect = match hops.get(j + 1) {
                    Some(next) => vec![prev, *next],
                    None => vec![prev],
                };
                if st.identities() != expect {
                    rep.adjacency_violations += 1;
                }
                if j > 0 && st.identities().contains(&route.origin) {
                    rep.origin_leaks += 1;
                }
            }
            debug_assert_eq!(last.downstream, Downstream::Terminal);
            if !probe {
                let origin = route.origin.peer().as_bytes();
                let node = self.node(&route.plan.delegate).expect("known node");
                for t in node.tasks.iter().filter(|t| t.route_tag == route.route_tag) {
                    if t.stored_bytes().windows(origin.len()).any(|w| w == origin) {
                        rep.origin_leaks += 1;
                    }
                }
            }
        }
        rep
    }

    /// Pools what the adversary holds on a delegation route the moment it
    /// completes, before any record can expire.
    fn analyze_route(&mut self, index: usize) {
        let population = self.population();
        let k_min = self.cfg.onion.k_min;
        let f = self.cfg.adversary.colluder_fraction;
        let route = &self.ledger.routes[index];
        let mut out = Vec::new();
        if !self.ledger.colluders.members.is_empty() {
            if let Ok(r) = adversary::analyze_collusion(
                &self.ledger.colluders,
                self,
                route,
                &population,
                k_min,
                f,
            ) {
                out.push(r);
            }
        }
        if self.cfg.adversary.delegate_view {
            if let Ok(r) =
                adversary::delegate_view(route.plan.delegate, self, route, &population, k_min)
            {
                out.push(r);
            }
        }
        self.reports.extend(out);
    }

    /// Collusion and delegate-view reports, one per delivered route.
    pub fn anonymity_reports(&self) -> &[AnonymityReport] {
        &self.reports
    }

    pub fn honest(&self) -> Vec<NodeId> {
        self.population()
            .into_iter()
            .filter(|n| !self.ledger.colluders.contains(n))
            .collect()
    }

    /// Metrics, events and reports for this run.
    pub fn finish(&self) -> RunOutput {
        let name = self.cfg.name.clone();
        let mut metrics = Vec::new();
        let mut m = |metric: &str, value: f64, unit: &'static str| {
            metrics.push(Metric {
                scenario: name.clone(),
                metric: metric.to_string(),
                value,
                unit,
            })
        };
        let d = &self.ledger.delegations;
        let total = d.len() as f64;
        let ratio = |x: usize| if d.is_empty() { 0.0 } else { x as f64 / total };
        let sent = d.iter().filter(|t| t.first_sent.is_some()).count();
        let delivered = d.iter().filter(|t| t.tasks_created > 0).count();
        let results = d.iter().filter(|t| t.result_at.is_some()).count();
        let correct = d.iter().filter(|t| t.result_correct == Some(true)).count();
        let lat: Vec<f64> = d
            .iter()
            .filter_map(|t| Some((t.result_at? - t.first_sent?) as f64))
            .collect();
        let lmax = self.cfg.sim.latency_max;
        let within = d
            .iter()
            .filter(|t| matches!((t.first_delivery_hops, t.first_delivery_ticks), (Some(h), Some(x)) if x <= h as u64 * lmax))
            .count();
        let c = &self.counters;
        let protocol = c.msg_onion + c.msg_reply + c.msg_flood;
        m("seed", self.seed as f64, "value");
        m("nodes", self.nodes.len() as f64, "count");
        m("delegations", total, "count");
        m("delegations_sent", sent as f64, "count");
        m("delivery_rate", ratio(delivered), "ratio");
        m("delivery_within_hop_bound", within as f64, "count");
        m("result_rate", ratio(results), "ratio");
        m("result_correct", correct as f64, "count");
        m(
            "mean_result_latency",
            if lat.is_empty() {
                0.0
            } else {
                lat.iter().sum::<f64>() / lat.len() as f64
            },
            "ticks",
        );
        m(
            "mean_route_relays",
            if self.ledger.routes.is_empty() {
                0.0
            } else {
                self.ledger
                    .routes
                    .iter()
                    .map(|r| r.plan.k() as f64)
                    .sum::<f64>()
                    / self.ledger.routes.len() as f64
            },
            "relays",
        );
        m("tasks_created", c.tasks_created as f64, "count");
        m("messages_onion", c.msg_onion as f64, "messages");
        m("messages_reply", c.msg_reply as f64, "messages");
        m("messages_flood", c.msg_flood as f64, "messages");
        m("messages_shuffle", c.msg_shuffle as f64, "messages");
        m("messages_aggregation", c.msg_aggregation as f64, "messages");
        m(
            "messages_per_delegation",
            if d.is_empty() {
                0.0
            } else {
                protocol as f64 / total
            },
            "messages",
        );
        m("probes", c.probes as f64, "count");
        m("retries", c.retries as f64, "count");
        m("give_ups", c.give_ups as f64, "count");
        m("phi_too_small", c.phi_too_small as f64, "count");
        m("wrong_key", c.wrong_key as f64, "count");
        m("malformed", c.malformed as f64, "count");
        m("unknown_route", c.unknown_route as f64, "count");
        m("bad_signature", c.bad_signature as f64, "count");
        m("invalid_flood", c.invalid_flood as f64, "count");
        m("routes_expired", c.routes_expired as f64, "count");
        let st = self.sim.stats();
        m("sim_messages_sent", st.messages_sent as f64, "messages");
        m("sim_delivered", st.delivered as f64, "messages");
        m(
            "sim_dropped_departed",
            st.dropped_departed as f64,
            "messages",
        );
        m("sim_dropped_loss", st.dropped_loss as f64, "messages");
        m("departures", st.departures as f64, "count");
        m("joins", st.joins as f64, "count");

        let h = self.hygiene_scan();
        m("hygiene_routes", h.routes as f64, "count");
        m(
            "hygiene_violations",
            (h.adjacency_violations + h.origin_leaks) as f64,
            "count",
        );

        let cmp = result_return::compare_flood_traces(&self.ledger.forwards, &self.ledger.origins);
        if !self.ledger.forwards.is_empty() {
            m("flood_rule_violations", cmp.rule_violations as f64, "count");
            m(
                "flood_distinguishing_features",
                cmp.distinguishing.len() as f64,
                "count",
            );
        }

        let mut reports = self.reports.clone();
        let mean = |kind: adversary::ReportKind, rs: &[AnonymityReport]| {
            let v: Vec<&AnonymityReport> = rs.iter().filter(|r| r.kind == kind).collect();
            (!v.is_empty()).then(|| {
                (
                    v.iter().map(|r| r.degree).sum::<f64>() / v.len() as f64,
                    v.iter().filter(|r| r.fully_deanonymized).count() as f64 / v.len() as f64,
                )
            })
        };
        if let Some((deg, full)) = mean(adversary::ReportKind::Collusion, &reports) {
            m(
                "colluders",
                self.ledger.colluders.members.len() as f64,
                "count",
            );
            m("collusion_mean_degree", deg, "degree");
            m("collusion_full_deanonymization_rate", full, "ratio");
            m(
                "collusion_oracle_rate",
                adversary::full_deanonymization_oracle(
                    self.cfg.adversary.colluder_fraction,
                    self.cfg.onion.k_min,
                    self.cfg.onion.k_max,
                ),
                "ratio",
            );
        }
        if let Some((deg, _)) = mean(adversary::ReportKind::Delegate, &reports) {
            m("delegate_view_mean_degree", deg, "degree");
        }
        if self.cfg.adversary.sniffer {
            let mut sniff = Vec::new();
            let s = adversary::sniffer_trace(
                self.sim.transmissions(),
                &self.ledger.pulls,
                &self.honest(),
                self.seed ^ 0x5eed,
                |r| sniff.push(r.clone()),
            );
            m("sniffer_pulls", s.pulls as f64, "count");
            m("sniffer_identification_rate", s.rate, "ratio");
            m("sniffer_baseline_rate", s.baseline, "ratio");
            m(
                "sniffer_multi_hop_chains",
                s.multi_hop_chains as f64,
                "count",
            );
            reports.extend(sniff);
        }
        RunOutput {
            scenario: self.cfg.name.clone(),
            metrics,
            events: self.events.clone(),
            reports,
        }
    }

    /// Invariants whose failure means the simulation itself is wrong.
    pub fn check_invariants(&self) -> Result<(), WorldError> {
        let st = self.sim.stats();
        let accounted = st.delivered + st.dropped_departed + st.dropped_loss + st.in_flight();
        if accounted != st.messages_sent {
            return Err(WorldError::Invariant(format!(
                "{} messages sent but {accounted} accounted for",
                st.messages_sent
            )));
        }
        for n in &self.nodes {
            n.sampler
                .view()
                .check_invariants(&n.id)
                .map_err(WorldError::Invariant)?;
        }
        let h = self.hygiene_scan();
        if !h.clean() {
            return Err(WorldError::Invariant(format!("route state hygiene: {h:?}")));
        }
        Ok(())
    }
}

/// Builds, runs and summarizes one scenario.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutput, WorldError> {
    let mut w = World::new(cfg)?;
    w.run();
    w.check_invariants()?;
    Ok(w.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::{AggregatorKind, IdentityAggregator};
    use crate::result_return::ReturnMode;

    fn small(mode: ReturnMode) -> ScenarioConfig {
        let mut c = ScenarioConfig {
            n_nodes: 30,
            ..ScenarioConfig::default()
        };
        c.sim_ticks = 3000;
        c.delegation.phi_size = 25;
        c.onion.k_max = 8;
        c.workload.delegations = 6;
        c.workload.start_tick = 300;
        c.workload.spread_ticks = 200;
        c.aggregation.aggregator = AggregatorKind::Identity;
        c.result.return_mode = mode;
        c
    }

    #[test]
    fn timer_tokens_round_trip() {
        assert_eq!(untoken(token(T_PROBE, 12345)), (T_PROBE, 12345));
    }

    #[test]
    fn every_mode_returns_the_profile() {
        for mode in [
            ReturnMode::PullNaive,
            ReturnMode::PullReenc,
            ReturnMode::PushFull,
            ReturnMode::PushWindow,
        ] {
            let mut w = World::new(&small(mode)).unwrap();
            w.run();
            w.check_invariants().unwrap();
            for t in &w.ledger().delegations {
                assert!(t.tasks_created >= 1, "{mode:?}: {t:?}");
                assert_eq!(t.result_correct, Some(true), "{mode:?}: {t:?}");
                let origin = w.node(&t.origin).unwrap();
                let (r, _) = origin.delegation(t.id).unwrap().result.clone().unwrap();
                assert_eq!(r.values, w.workload[t.id as usize].2.values());
            }
            assert_eq!(w.counters().wrong_key, 0);
            assert_eq!(w.counters().bad_signature, 0);
        }
    }

    #[test]
    fn plugin_registration() {
        let mut c = small(ReturnMode::PullReenc);
        let mut w = World::new(&c).unwrap();
        assert!(matches!(
            w.register_plugin(Box::new(IdentityAggregator::default())),
            Err(AggregationError::AlreadyRegistered)
        ));
        c.aggregation.aggregator = AggregatorKind::None;
        let mut w = World::new(&c).unwrap();
        w.register_plugin(Box::new(IdentityAggregator::default()))
            .unwrap();
        w.run();
        assert!(w
            .ledger()
            .delegations
            .iter()
            .all(|t| t.result_correct == Some(true)));
    }

    #[test]
    fn without_aggregator_probes_stay_pending() {
        let mut c = small(ReturnMode::PullReenc);
        c.aggregation.aggregator = AggregatorKind::None;
        c.delegation.max_retries = 1;
        c.delegation.retry_ticks = 1000;
        let mut w = World::new(&c).unwrap();
        w.run();
        assert!(w.counters().pull_pending > 0);
        assert!(w
            .ledger()
            .delegations
            .iter()
            .all(|t| t.result_at.is_none() && t.gave_up));
    }

    #[test]
    fn same_seed_same_run() {
        let c = small(ReturnMode::PushWindow);
        let a = run_scenario(&c).unwrap();
        let b = run_scenario(&c).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(
            serde_json::to_string(&a.events).unwrap(),
            serde_json::to_string(&b.events).unwrap()
        );
    }
}
