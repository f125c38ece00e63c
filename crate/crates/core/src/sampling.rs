//! Gossip peer sampling: a push-pull view shuffle that gives every node a
//! continuously refreshed random view, plus an accumulated history of every
//! peer the node has ever seen. Samples (`Φ`) are drawn from the history, so a
//! draw never touches the network.

use std::collections::HashSet;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{NodeId, Tick};
use crate::wire::{Reader, WireError, Writer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub view_capacity: usize,
    pub shuffle_size: usize,
    pub round_interval_ticks: Tick,
    pub bootstrap_degree: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            view_capacity: 20,
            shuffle_size: 10,
            round_interval_ticks: 10,
            bootstrap_degree: 5,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SamplingError {
    #[error("history holds {available} peers, {requested} requested")]
    InsufficientHistory { requested: usize, available: usize },
    #[error("view is empty")]
    EmptyView,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewEntry {
    pub peer: NodeId,
    pub age: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct View {
    entries: Vec<ViewEntry>,
    capacity: usize,
}

impl View {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: Vec::with_capacity(capacity),
            capacity,
        }
    }

    pub fn entries(&self) -> &[ViewEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn contains(&self, peer: &NodeId) -> bool {
        self.entries.iter().any(|e| e.peer == *peer)
    }

    pub fn peers(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.entries.iter().map(|e| e.peer)
    }

    /// Size bound, no self entry, no duplicates.
    pub fn check_invariants(&self, owner: &NodeId) -> Result<(), String> {
        if self.entries.len() > self.capacity {
            return Err(format!(
                "view size {} exceeds capacity {}",
                self.entries.len(),
                self.capacity
            ));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.peer == *owner {
                return Err("view contains its owner".into());
            }
            if !seen.insert(e.peer) {
                return Err(format!("duplicate view entry {}", e.peer));
            }
        }
        Ok(())
    }
}

/// `Φ`: a random set of peers drawn by one node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleSet {
    pub peers: Vec<NodeId>,
    pub drawn_at: Tick,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.peers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peers.is_empty()
    }

    pub fn contains(&self, peer: &NodeId) -> bool {
        self.peers.contains(peer)
    }
}

/// What a shuffle initiator sends: its half-view, plus the ids of the view
/// entries it kept so the responder can avoid answering with duplicates.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ShuffleOffer {
    pub entries: Vec<ViewEntry>,
    pub held: Vec<NodeId>,
}

fn write_entries(w: &mut Writer, entries: &[ViewEntry]) {
    w.u16(entries.len() as u16);
    for e in entries {
        w.peer(e.peer.peer()).u32(e.age);
    }
}

fn read_entries(r: &mut Reader<'_>) -> Result<Vec<ViewEntry>, WireError> {
    let n = r.u16()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let peer = NodeId(r.peer()?);
        let age = r.u32()?;
        out.push(ViewEntry { peer, age });
    }
    Ok(out)
}

pub fn encode_entries(entries: &[ViewEntry]) -> Vec<u8> {
    let mut w = Writer::with_capacity(2 + entries.len() * 36);
    write_entries(&mut w, entries);
    w.finish()
}

pub fn decode_entries(buf: &[u8]) -> Result<Vec<ViewEntry>, WireError> {
    let mut r = Reader::new(buf);
    let out = read_entries(&mut r)?;
    r.finish()?;
    Ok(out)
}

impl ShuffleOffer {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(4 + self.entries.len() * 36 + self.held.len() * 32);
        write_entries(&mut w, &self.entries);
        w.u16(self.held.len() as u16);
        for p in &self.held {
            w.peer(p.peer());
        }
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(buf);
        let entries = read_entries(&mut r)?;
        let n = r.u16()? as usize;
        let mut held = Vec::with_capacity(n);
        for _ in 0..n {
            held.push(NodeId(r.peer()?));
        }
        r.finish()?;
        Ok(Self { entries, held })
    }
}

/// Per-node peer sampling state.
#[derive(Clone, Debug)]
pub struct PeerSampler {
    owner: NodeId,
    view: View,
    shuffle_size: usize,
    history: Vec<NodeId>,
    history_set: HashSet<NodeId>,
    last_sent: Vec<NodeId>,
    partner: Option<NodeId>,
}

impl PeerSampler {
    pub fn new(owner: NodeId, capacity: usize, shuffle_size: usize, bootstrap: &[NodeId]) -> Self {
        let mut s = Self {
            owner,
            view: View::new(capacity),
            shuffle_size: shuffle_size.max(1),
            history: Vec::new(),
            history_set: HashSet::new(),
            last_sent: Vec::new(),
            partner: None,
        };
        let seeds: Vec<ViewEntry> = bootstrap
            .iter()
            .map(|&peer| ViewEntry { peer, age: 0 })
            .collect();
        s.merge(&seeds, &[]);
        s
    }

    pub fn owner(&self) -> NodeId {
        self.owner
    }

    pub fn view(&self) -> &View {
        &self.view
    }

    pub fn history(&self) -> &[NodeId] {
        &self.history
    }

    /// Distinct peers ever seen. Never decreases.
    pub fn history_size(&self) -> usize {
        self.history.len()
    }

    fn remember(&mut self, peer: NodeId) {
        if self.history_set.insert(peer) {
            self.history.push(peer);
        }
    }

    fn random_subset<R: Rng + ?Sized>(&self, take: usize, rng: &mut R) -> Vec<ViewEntry> {
        let take = take.min(self.view.len());
        index::sample(rng, self.view.len(), take)
            .into_iter()
            .map(|i| self.view.entries[i])
            .collect()
    }

    /// Starts a shuffle: ages every entry, removes the oldest one as the
    /// partner and returns the half-view to send it. If the partner is gone
    /// its entry simply stays removed.
    pub fn begin_round<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
    ) -> Result<(NodeId, ShuffleOffer), SamplingError> {
        if self.view.is_empty() {
            return Err(SamplingError::EmptyView);
        }
        for e in &mut self.view.entries {
            e.age = e.age.saturating_add(1);
        }
        let oldest = self
            .view
            .entries
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.age.cmp(&b.age).then(ib.cmp(ia)))
            .map(|(i, _)| i)
            .expect("non-empty view");
        let partner = self.view.entries.remove(oldest).peer;
        let mut subset = self.random_subset(self.shuffle_size - 1, rng);
        self.last_sent = subset.iter().map(|e| e.peer).collect();
        let held = self
            .view
            .peers()
            .filter(|p| !self.last_sent.contains(p))
            .collect();
        subset.push(ViewEntry {
            peer: self.owner,
            age: 0,
        });
        self.partner = Some(partner);
        Ok((
            partner,
            ShuffleOffer {
                entries: subset,
                held,
            },
        ))
    }

    /// Answers a shuffle request and merges the received half-view.
    ///
    /// Entries the requester sent that are already in this view are handed
    /// back, so both sides keep them; the rest of the reply is a random
    /// subset of entries the requester does not already hold.
    pub fn handle_request<R: Rng + ?Sized>(
        &mut self,
        from: NodeId,
        offer: &ShuffleOffer,
        rng: &mut R,
    ) -> Vec<ViewEntry> {
        let received = &offer.entries[..];
        let mut reply: Vec<ViewEntry> = received
            .iter()
            .filter(|e| e.peer != from && self.view.contains(&e.peer))
            .copied()
            .collect();
        let returned = reply.len();
        let candidates: Vec<ViewEntry> = self
            .view
            .entries
            .iter()
            .copied()
            .filter(|e| {
                e.peer != from
                    && !received.iter().any(|r| r.peer == e.peer)
                    && !offer.held.contains(&e.peer)
            })
            .collect();
        let take = self
            .shuffle_size
            .saturating_sub(returned)
            .min(candidates.len());
        reply.extend(
            index::sample(rng, candidates.len(), take)
                .into_iter()
                .map(|i| candidates[i]),
        );
        let sent: Vec<NodeId> = reply[returned..].iter().map(|e| e.peer).collect();
        self.merge(received, &sent);
        reply
    }

    /// Merges the partner's answer. The partner's own entry was consumed by
    /// the shuffle; it is put back only if the view would otherwise be empty.
    pub fn handle_reply(&mut self, received: &[ViewEntry]) {
        let mut sent = std::mem::take(&mut self.last_sent);
        sent.retain(|p| !received.iter().any(|e| e.peer == *p));
        self.merge(received, &sent);
        if let Some(partner) = self.partner.take() {
            if self.view.is_empty() {
                self.merge(
                    &[ViewEntry {
                        peer: partner,
                        age: 0,
                    }],
                    &[],
                );
            }
        }
    }

    /// Merges entries keeping the freshest age per peer. When full, entries
    /// that were just sent away make room first, then the oldest entry if the
    /// incoming one is fresher.
    fn merge(&mut self, received: &[ViewEntry], sent_away: &[NodeId]) {
        for e in received {
            if e.peer == self.owner {
                continue;
            }
            self.remember(e.peer);
            if let Some(existing) = self.view.entries.iter_mut().find(|x| x.peer == e.peer) {
                existing.age = existing.age.min(e.age);
                continue;
            }
            if self.view.entries.len() < self.view.capacity {
                self.view.entries.push(*e);
                continue;
            }
            if let Some(slot) = self
                .view
                .entries
                .iter()
                .position(|x| sent_away.contains(&x.peer))
            {
                self.view.entries[slot] = *e;
                continue;
            }
        }
    }

    /// Draws `n` distinct peers uniformly from the accumulated history.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        n: usize,
        now: Tick,
        rng: &mut R,
    ) -> Result<SampleSet, SamplingError> {
        if n > self.history.len() {
            return Err(SamplingError::InsufficientHistory {
                requested: n,
                available: self.history.len(),
            });
        }
        let peers = index::sample(rng, self.history.len(), n)
            .into_iter()
            .map(|i| self.history[i])
            .collect();
        Ok(SampleSet {
            peers,
            drawn_at: now,
        })
    }

    pub fn random_view_peer<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<NodeId> {
        if self.view.is_empty() {
            None
        } else {
            Some(self.view.entries[rng.random_range(0..self.view.len())].peer)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::PeerId;
    use rand::seq::SliceRandom;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn node(i: usize) -> NodeId {
        let mut b = [0u8; 32];
        b[..8].copy_from_slice(&(i as u64 + 1).to_le_bytes());
        NodeId(PeerId::from_bytes(b))
    }

    /// Cycle-driven network: each round every node shuffles once, in random
    /// order, with the exchange completing atomically.
    fn network(n: usize, cfg: &SamplingConfig, rng: &mut ChaCha8Rng) -> Vec<PeerSampler> {
        (0..n)
            .map(|i| {
                let mut boot = vec![node((i + 1) % n)];
                while boot.len() < cfg.bootstrap_degree.min(n - 1) {
                    let j = rng.random_range(0..n);
                    if j != i && !boot.contains(&node(j)) {
                        boot.push(node(j));
                    }
                }
                PeerSampler::new(node(i), cfg.view_capacity, cfg.shuffle_size, &boot)
            })
            .collect()
    }

    fn index_of(id: NodeId) -> usize {
        let mut b = [0u8; 8];
        b.copy_from_slice(&id.peer().as_bytes()[..8]);
        u64::from_le_bytes(b) as usize - 1
    }

    fn round(net: &mut [PeerSampler], rng: &mut ChaCha8Rng) {
        let mut order: Vec<usize> = (0..net.len()).collect();
        order.shuffle(rng);
        for i in order {
            let Ok((partner, sent)) = net[i].begin_round(rng) else {
                continue;
            };
            let j = index_of(partner);
            let reply = net[j].handle_request(node(i), &sent, rng);
            net[i].handle_reply(&reply);
        }
    }

    #[test]
    fn two_nodes_learn_each_other() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = PeerSampler::new(node(0), 20, 10, &[node(1)]);
        let mut b = PeerSampler::new(node(1), 20, 10, &[node(0)]);
        let (partner, sent) = a.begin_round(&mut rng).unwrap();
        assert_eq!(partner, node(1));
        let reply = b.handle_request(node(0), &sent, &mut rng);
        a.handle_reply(&reply);
        assert!(a.view().contains(&node(1)));
        assert!(b.view().contains(&node(0)));
    }

    #[test]
    fn merge_truncates_to_capacity() {
        let boot: Vec<NodeId> = (1..=4).map(node).collect();
        let mut s = PeerSampler::new(node(0), 5, 3, &boot);
        let incoming: Vec<ViewEntry> = (10..20)
            .map(|i| ViewEntry {
                peer: node(i),
                age: 0,
            })
            .collect();
        s.handle_reply(&incoming);
        assert_eq!(s.view().len(), 5);
        s.view().check_invariants(&node(0)).unwrap();
        assert_eq!(s.history_size(), 14);
    }

    #[test]
    fn merge_keeps_freshest_age_and_skips_self() {
        let mut s = PeerSampler::new(node(0), 5, 3, &[node(1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        s.handle_request(
            node(2),
            &ShuffleOffer {
                entries: vec![
                    ViewEntry {
                        peer: node(1),
                        age: 0,
                    },
                    ViewEntry {
                        peer: node(0),
                        age: 0,
                    },
                ],
                held: vec![],
            },
            &mut rng,
        );
        assert!(!s.view().contains(&node(0)));
        for _ in 0..3 {
            // Ages grow on begin_round; re-inserting node 1 fresh resets it.
            let _ = s.begin_round(&mut rng);
            s.handle_reply(&[ViewEntry {
                peer: node(1),
                age: 0,
            }]);
        }
        assert_eq!(
            s.view()
                .entries()
                .iter()
                .find(|e| e.peer == node(1))
                .unwrap()
                .age,
            0
        );
    }

    #[test]
    fn empty_view_cannot_start_round() {
        let mut s = PeerSampler::new(node(0), 5, 3, &[]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(
            s.begin_round(&mut rng).unwrap_err(),
            SamplingError::EmptyView
        );
    }

    #[test]
    fn sample_edge_cases() {
        let boot: Vec<NodeId> = (1..=5).map(node).collect();
        let s = PeerSampler::new(node(0), 20, 10, &boot);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(s.history_size(), 5);
        let all = s.sample(5, 0, &mut rng).unwrap();
        let mut got = all.peers.clone();
        got.sort();
        let mut want = boot.clone();
        want.sort();
        assert_eq!(got, want);
        assert!(s.sample(0, 0, &mut rng).unwrap().is_empty());
        assert_eq!(
            s.sample(6, 0, &mut rng).unwrap_err(),
            SamplingError::InsufficientHistory {
                requested: 6,
                available: 5
            }
        );
    }

    #[test]
    fn entries_codec_round_trip_and_trailing() {
        let es = vec![
            ViewEntry {
                peer: node(3),
                age: 7,
            },
            ViewEntry {
                peer: node(4),
                age: 0,
            },
        ];
        let buf = encode_entries(&es);
        assert_eq!(decode_entries(&buf).unwrap(), es);
        let mut bad = buf.clone();
        bad.push(0);
        assert_eq!(decode_entries(&bad), Err(WireError::Trailing));
        let offer = ShuffleOffer {
            entries: es,
            held: vec![node(9), node(10)],
        };
        assert_eq!(ShuffleOffer::decode(&offer.encode()).unwrap(), offer);
    }

    #[test]
    fn view_invariants_and_connectivity_every_round() {
        let cfg = SamplingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 60;
        let mut net = network(n, &cfg, &mut rng);
        for _ in 0..40 {
            round(&mut net, &mut rng);
            for s in &net {
                s.view().check_invariants(&s.owner()).unwrap();
            }
            // Weak connectivity of the union view graph.
            let mut adj = vec![Vec::new(); n];
            for (i, s) in net.iter().enumerate() {
                for p in s.view().peers() {
                    let j = index_of(p);
                    adj[i].push(j);
                    adj[j].push(i);
                }
            }
            let mut seen = vec![false; n];
            let mut stack = vec![0];
            seen[0] = true;
            while let Some(u) = stack.pop() {
                for &v in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
            assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn history_grows_toward_population_and_is_bounded() {
        let cfg = SamplingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 100;
        let mut net = network(n, &cfg, &mut rng);
        let mut prev: Vec<usize> = net.iter().map(|s| s.history_size()).collect();
        for _ in 0..50 {
            round(&mut net, &mut rng);
            for (s, p) in net.iter().zip(prev.iter_mut()) {
                assert!(s.history_size() >= *p);
                assert!(s.history_size() < n);
                *p = s.history_size();
            }
        }
        let min = prev.iter().min().unwrap();
        assert!(*min >= 95, "history after warmup: min {min}");
    }

    #[test]
    fn in_degree_is_balanced_after_warmup() {
        let cfg = SamplingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100;
        let mut net = network(n, &cfg, &mut rng);
        for _ in 0..50 {
            round(&mut net, &mut rng);
        }
        let mut indeg = vec![0usize; n];
        for s in &net {
            for p in s.view().peers() {
                indeg[index_of(p)] += 1;
            }
        }
        let max = *indeg.iter().max().unwrap() as f64;
        let min = *indeg.iter().min().unwrap() as f64;
        assert!(
            min > 0.0 && max / min < 3.0,
            "in-degree max {max} min {min}"
        );
    }
}
