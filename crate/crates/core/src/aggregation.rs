//! Aggregation among delegates, behind a plugin interface.
//!
//! The reference plugin is push-pull averaging over `(s, w)` mass pairs: the
//! initiator sends its pair, the responder moves halfway toward it and
//! returns the delta, the initiator applies the opposite delta. Because only
//! deltas travel, the total mass is conserved even when exchanges overlap.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::delegation::Profile;
use crate::sim::NodeId;
use crate::wire::{Reader, WireError, Writer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub values: Vec<f64>,
    pub rounds_used: u32,
}

impl AggregateResult {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(6 + 8 * self.values.len());
        w.u16(self.values.len() as u16);
        for v in &self.values {
            w.f64(*v);
        }
        w.u32(self.rounds_used);
        w.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(buf);
        let n = r.u16()? as usize;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let v = r.f64()?;
            if !v.is_finite() {
                return Err(WireError::Invalid("non-finite aggregate"));
            }
            values.push(v);
        }
        let rounds_used = r.u32()?;
        r.finish()?;
        Ok(Self {
            values,
            rounds_used,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    None,
    Identity,
    Average,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationConfig {
    pub aggregator: AggregatorKind,
    /// Relative change threshold. `inf` accepts the first round.
    pub epsilon: f64,
    pub window_rounds: usize,
    pub round_interval_ticks: u64,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            aggregator: AggregatorKind::Average,
            epsilon: 1e-8,
            window_rounds: 5,
            round_interval_ticks: 10,
        }
    }
}

impl AggregationConfig {
    pub fn plugin(&self) -> Option<Box<dyn AggregatorPlugin>> {
        match self.aggregator {
            AggregatorKind::None => None,
            AggregatorKind::Identity => Some(Box::new(IdentityAggregator::default())),
            AggregatorKind::Average => Some(Box::new(AveragingAggregator::new(
                self.epsilon,
                self.window_rounds,
            ))),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AggregationError {
    #[error("no task {task} at {node}")]
    UnknownTask { node: NodeId, task: u64 },
    #[error("an aggregator plugin is already registered")]
    AlreadyRegistered,
    #[error("malformed aggregation message: {0}")]
    Malformed(#[from] WireError),
}

/// A message a plugin wants sent over the simulated network.
#[derive(Clone, Debug, PartialEq)]
pub struct Outgoing {
    pub to: NodeId,
    pub body: Vec<u8>,
}

pub trait AggregatorPlugin: Send {
    fn name(&self) -> &'static str;

    /// A delegate accepted a task.
    fn on_task(&mut self, node: NodeId, task: u64, profile: &Profile);

    /// Periodic tick for a node. `partner` is a random peer from its sampler.
    fn on_gossip_round(&mut self, node: NodeId, partner: Option<NodeId>) -> Vec<Outgoing>;

    fn on_message(
        &mut self,
        node: NodeId,
        from: NodeId,
        body: &[u8],
    ) -> Result<Vec<Outgoing>, AggregationError>;

    fn poll_result(
        &self,
        node: NodeId,
        task: u64,
    ) -> Result<Option<AggregateResult>, AggregationError>;

    /// Whether the node has anything to drive rounds for.
    fn has_tasks(&self, node: NodeId) -> bool;
}

/// Returns every profile unchanged.
#[derive(Default)]
pub struct IdentityAggregator {
    tasks: BTreeMap<(NodeId, u64), Vec<f64>>,
}

impl AggregatorPlugin for IdentityAggregator {
    fn name(&self) -> &'static str {
        "identity"
    }

    fn on_task(&mut self, node: NodeId, task: u64, profile: &Profile) {
        self.tasks.insert((node, task), profile.values().to_vec());
    }

    fn on_gossip_round(&mut self, _: NodeId, _: Option<NodeId>) -> Vec<Outgoing> {
        Vec::new()
    }

    fn on_message(
        &mut self,
        _: NodeId,
        _: NodeId,
        _: &[u8],
    ) -> Result<Vec<Outgoing>, AggregationError> {
        Ok(Vec::new())
    }

    fn poll_result(
        &self,
        node: NodeId,
        task: u64,
    ) -> Result<Option<AggregateResult>, AggregationError> {
        self.tasks
            .get(&(node, task))
            .map(|v| {
                Some(AggregateResult {
                    values: v.clone(),
                    rounds_used: 0,
                })
            })
            .ok_or(AggregationError::UnknownTask { node, task })
    }

    fn has_tasks(&self, node: NodeId) -> bool {
        self.tasks
            .range((node, 0)..=(node, u64::MAX))
            .next()
            .is_some()
    }
}

const PUSH: u8 = 1;
const DELTA: u8 = 2;
/// A responder without tasks declines; no mass moves.
const NACK: u8 = 3;

/// How many rounds an unanswered exchange blocks new ones.
const BUSY_ROUNDS: u32 = 3;

#[derive(Clone, Debug, Default)]
struct AvgNode {
    s: Vec<f64>,
    w: f64,
    tasks: Vec<u64>,
    busy_since: Option<u32>,
    rounds: u32,
    /// An exchange with another task holder finished since the last round.
    exchanged: bool,
    history: VecDeque<Vec<f64>>,
    converged: Option<AggregateResult>,
}

impl AvgNode {
    fn estimate(&self) -> Option<Vec<f64>> {
        (self.w > 0.0).then(|| self.s.iter().map(|x| x / self.w).collect())
    }

    fn fit(&mut self, dim: usize) {
        if self.s.len() < dim {
            self.s.resize(dim, 0.0);
        }
    }
}

fn encode_mass(kind: u8, s: &[f64], w: f64) -> Vec<u8> {
    let mut out = Writer::with_capacity(11 + 8 * s.len());
    out.u8(kind).f64(w).u16(s.len() as u16);
    for v in s {
        out.f64(*v);
    }
    out.finish()
}

fn decode_mass(buf: &[u8]) -> Result<(u8, Vec<f64>, f64), WireError> {
    let mut r = Reader::new(buf);
    let kind = r.u8()?;
    if !matches!(kind, PUSH | DELTA | NACK) {
        return Err(WireError::Invalid("aggregation message kind"));
    }
    let w = r.f64()?;
    let n = r.u16()? as usize;
    let mut s = Vec::with_capacity(n);
    for _ in 0..n {
        s.push(r.f64()?);
    }
    r.finish()?;
    if !w.is_finite() || s.iter().any(|v| !v.is_finite()) {
        return Err(WireError::Invalid("non-finite mass"));
    }
    Ok((kind, s, w))
}

fn relative_change(prev: &[f64], cur: &[f64]) -> f64 {
    let scale = cur.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = prev
        .iter()
        .zip(cur)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Push-pull averaging of profiles across task holders.
pub struct AveragingAggregator {
    epsilon: f64,
    window: usize,
    nodes: BTreeMap<NodeId, AvgNode>,
}

impl AveragingAggregator {
    pub fn new(epsilon: f64, window: usize) -> Self {
        Self {
            epsilon,
            window: window.max(1),
            nodes: BTreeMap::new(),
        }
    }

    pub fn estimate(&self, node: NodeId) -> Option<Vec<f64>> {
        self.nodes.get(&node).and_then(AvgNode::estimate)
    }

    /// `(Σ s, Σ w)` over every node.
    pub fn total_mass(&self) -> (Vec<f64>, f64) {
        let dim = self.nodes.values().map(|n| n.s.len()).max().unwrap_or(0);
        let mut s = vec![0.0; dim];
        let mut w = 0.0;
        for n in self.nodes.values() {
            for (acc, v) in s.iter_mut().zip(&n.s) {
                *acc += v;
            }
            w += n.w;
        }
        (s, w)
    }

    fn check_convergence(&mut self, node: NodeId) {
        let (epsilon, window) = (self.epsilon, self.window);
        let n = self.nodes.get_mut(&node).expect("node exists");
        if n.converged.is_some() || n.tasks.is_empty() {
            return;
        }
        let Some(est) = n.estimate() else { return };
        // Rounds without a real exchange say nothing about convergence.
        if !std::mem::take(&mut n.exchanged) && !epsilon.is_infinite() {
            return;
        }
        n.history.push_back(est.clone());
        while n.history.len() > window + 1 {
            n.history.pop_front();
        }
        let done = if epsilon.is_infinite() {
            true
        } else {
            n.history.len() == window + 1
                && n.history
                    .iter()
                    .zip(n.history.iter().skip(1))
                    .all(|(a, b)| relative_change(a, b) < epsilon)
        };
        if done {
            n.converged = Some(AggregateResult {
                values: est,
                rounds_used: n.rounds,
            });
        }
    }
}

impl AggregatorPlugin for AveragingAggregator {
    fn name(&self) -> &'static str {
        "average"
    }

    fn on_task(&mut self, node: NodeId, task: u64, profile: &Profile) {
        let n = self.nodes.entry(node).or_default();
        n.fit(profile.dim());
        for (acc, v) in n.s.iter_mut().zip(profile.values()) {
            *acc += v;
        }
        n.w += 1.0;
        n.tasks.push(task);
        n.history.clear();
        n.converged = None;
    }

    fn on_gossip_round(&mut self, node: NodeId, partner: Option<NodeId>) -> Vec<Outgoing> {
        let Some(n) = self.nodes.get_mut(&node) else {
            return Vec::new();
        };
        if n.tasks.is_empty() {
            return Vec::new();
        }
        n.rounds += 1;
        let mut out = Vec::new();
        let free = match n.busy_since {
            Some(at) => n.rounds - at >= BUSY_ROUNDS,
            None => true,
        };
        if let (true, Some(p)) = (free, partner) {
            if p != node {
                n.busy_since = Some(n.rounds);
                out.push(Outgoing {
                    to: p,
                    body: encode_mass(PUSH, &n.s, n.w),
                });
            }
        }
        self.check_convergence(node);
        out
    }

    fn on_message(
        &mut self,
        node: NodeId,
        from: NodeId,
        body: &[u8],
    ) -> Result<Vec<Outgoing>, AggregationError> {
        let (kind, s, w) = decode_mass(body)?;
        if kind == PUSH && !self.has_tasks(node) {
            return Ok(vec![Outgoing {
                to: from,
                body: encode_mass(NACK, &[], 0.0),
            }]);
        }
        let n = self.nodes.entry(node).or_default();
        match kind {
            PUSH => {
                // Missing components count as zero on either side.
                n.fit(s.len());
                let mut s = s;
                s.resize(n.s.len(), 0.0);
                let ds: Vec<f64> = s.iter().zip(&n.s).map(|(a, b)| (a - b) / 2.0).collect();
                for (acc, d) in n.s.iter_mut().zip(&ds) {
                    *acc += d;
                }
                let dw = (w - n.w) / 2.0;
                n.w += dw;
                n.exchanged = true;
                Ok(vec![Outgoing {
                    to: from,
                    body: encode_mass(DELTA, &ds, dw),
                }])
            }
            DELTA => {
                n.fit(s.len());
                for (acc, d) in n.s.iter_mut().zip(&s) {
                    *acc -= d;
                }
                n.w -= w;
                n.busy_since = None;
                n.exchanged = true;
                Ok(Vec::new())
            }
            _ => {
                n.busy_since = None;
                Ok(Vec::new())
            }
        }
    }

    fn poll_result(
        &self,
        node: NodeId,
        task: u64,
    ) -> Result<Option<AggregateResult>, AggregationError> {
        match self.nodes.get(&node) {
            Some(n) if n.tasks.contains(&task) => Ok(n.converged.clone()),
            _ => Err(AggregationError::UnknownTask { node, task }),
        }
    }

    fn has_tasks(&self, node: NodeId) -> bool {
        self.nodes.get(&node).is_some_and(|n| !n.tasks.is_empty())
    }
}

/// One round's snapshot from [`CycleDriver`].
#[derive(Clone, Debug)]
pub struct CycleRound {
    pub estimates: Vec<Vec<f64>>,
    pub mass: (Vec<f64>, f64),
}

/// Cycle-driven runner: every round each node, in random order, does one
/// exchange with a uniformly random other node, delivered atomically.
pub struct CycleDriver {
    pub plugin: AveragingAggregator,
    pub nodes: Vec<NodeId>,
}

impl CycleDriver {
    pub fn new(plugin: AveragingAggregator, nodes: Vec<NodeId>, profiles: &[Profile]) -> Self {
        let mut plugin = plugin;
        for (i, (n, p)) in nodes.iter().zip(profiles).enumerate() {
            plugin.on_task(*n, i as u64, p);
        }
        Self { plugin, nodes }
    }

    pub fn round<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<CycleRound, AggregationError> {
        let n = self.nodes.len();
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], rng);
        for i in order {
            let partner = if n > 1 {
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                Some(self.nodes[j])
            } else {
                None
            };
            let me = self.nodes[i];
            for push in self.plugin.on_gossip_round(me, partner) {
                for reply in self.plugin.on_message(push.to, me, &push.body)? {
                    self.plugin.on_message(reply.to, push.to, &reply.body)?;
                }
            }
        }
        Ok(CycleRound {
            estimates: self
                .nodes
                .iter()
                .filter_map(|n| self.plugin.estimate(*n))
                .collect(),
            mass: self.plugin.total_mass(),
        })
    }
}
