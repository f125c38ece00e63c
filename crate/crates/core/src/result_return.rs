//! Getting `π′` back to an origin nobody can name.
//!
//! Pull: the origin probes its delegate over a new route and the answer
//! travels back hop by hop. Push: the delegate floods a signed, encrypted
//! result that only the origin can recognize, and every node (the origin
//! included) forwards it by the same rule.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::AggregateResult;
use crate::crypto::{
    self, Crypto, MatchTag, PeerId, SecretKey, Signature, SymCiphertext, SymKey, SIGNATURE_LEN,
};
use crate::onion::ReplyMode;
use crate::sim::{NodeId, Tick};
use crate::wire::{Reader, WireError, Writer};

/// First payload byte of a probe inside an onion.
pub const PROBE_MAGIC: u8 = 0x50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReturnMode {
    PullNaive,
    PullReenc,
    PushFull,
    PushWindow,
}

impl ReturnMode {
    pub fn reply_mode(self) -> Option<ReplyMode> {
        match self {
            Self::PullNaive => Some(ReplyMode::Naive),
            Self::PullReenc => Some(ReplyMode::PerhopReenc),
            Self::PushFull | Self::PushWindow => None,
        }
    }

    pub fn is_push(self) -> bool {
        self.reply_mode().is_none()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::PullNaive => "pull_naive",
            Self::PullReenc => "pull_reenc",
            Self::PushFull => "push_full",
            Self::PushWindow => "push_window",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReturnConfig {
    pub return_mode: ReturnMode,
    /// Onion-window length; `None` means all history.
    #[serde(with = "crate::config::ticks_or_inf")]
    pub window_ticks: Option<Tick>,
    pub probe_backoff_ticks: Tick,
}

impl Default for ReturnConfig {
    fn default() -> Self {
        Self {
            return_mode: ReturnMode::PullReenc,
            window_ticks: Some(2000),
            probe_backoff_ticks: 300,
        }
    }
}

impl ReturnConfig {
    pub fn flood_mode(&self) -> FloodMode {
        match self.return_mode {
            ReturnMode::PushWindow => FloodMode::OnionWindow(self.window_ticks),
            _ => FloodMode::Full,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReturnError {
    #[error("signature check failed")]
    BadSignature,
    #[error("reply does not answer this probe")]
    Mismatch,
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Crypto(#[from] crypto::CryptoError),
}

/// Asks the delegate about the task recognized by `task_ref`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProbeMsg {
    pub task_ref: MatchTag,
    pub nonce: [u8; 16],
}

impl ProbeMsg {
    pub fn new<R: RngCore + ?Sized>(task_ref: MatchTag, rng: &mut R) -> Self {
        let mut nonce = [0u8; 16];
        rng.fill_bytes(&mut nonce);
        Self { task_ref, nonce }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(49);
        w.u8(PROBE_MAGIC)
            .raw(self.task_ref.as_bytes())
            .raw(&self.nonce);
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(buf);
        if r.u8()? != PROBE_MAGIC {
            return Err(WireError::Invalid("not a probe"));
        }
        let task_ref = MatchTag::from_bytes(r.array()?);
        let nonce = r.array()?;
        r.finish()?;
        Ok(Self { task_ref, nonce })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PullStatus {
    Ready(SymCiphertext),
    Pending,
    Unknown,
}

/// The delegate's signed answer to a probe.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PullReply {
    pub status: PullStatus,
    pub sig: Signature,
}

fn pull_signed_bytes(probe: &ProbeMsg, status: &PullStatus) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(b"anongoss/pull")
        .raw(probe.task_ref.as_bytes())
        .raw(&probe.nonce);
    match status {
        PullStatus::Ready(ct) => {
            w.u8(1).bytes(ct.as_bytes());
        }
        PullStatus::Pending => {
            w.u8(2);
        }
        PullStatus::Unknown => {
            w.u8(3);
        }
    }
    w.finish()
}

impl PullReply {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match &self.status {
            PullStatus::Ready(ct) => {
                w.u8(1).bytes(ct.as_bytes());
            }
            PullStatus::Pending => {
                w.u8(2);
            }
            PullStatus::Unknown => {
                w.u8(3);
            }
        }
        w.raw(&self.sig.to_bytes());
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, ReturnError> {
        let mut r = Reader::new(buf);
        let status = match r.u8()? {
            1 => PullStatus::Ready(SymCiphertext::from_wire(r.bytes()?.to_vec())),
            2 => PullStatus::Pending,
            3 => PullStatus::Unknown,
            _ => return Err(WireError::Invalid("pull status").into()),
        };
        let sig = Signature::from_bytes(r.take(SIGNATURE_LEN)?)?;
        r.finish()?;
        Ok(Self { status, sig })
    }
}

/// What the delegate knows about the probed task.
pub enum TaskLookup<'a> {
    Ready {
        reply_key: &'a SymKey,
        result: &'a AggregateResult,
    },
    Pending,
    Unknown,
}

pub fn answer_probe<R: RngCore + ?Sized>(
    secret: &SecretKey,
    probe: &ProbeMsg,
    lookup: TaskLookup<'_>,
    rng: &mut R,
) -> PullReply {
    let status = match lookup {
        TaskLookup::Ready { reply_key, result } => {
            PullStatus::Ready(crypto::sym_seal(reply_key, &result.to_bytes(), rng))
        }
        TaskLookup::Pending => PullStatus::Pending,
        TaskLookup::Unknown => PullStatus::Unknown,
    };
    let sig = crypto::sign(secret, &pull_signed_bytes(probe, &status));
    PullReply { status, sig }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PullOutcome {
    Ready(AggregateResult),
    Pending,
    Unknown,
}

/// Origin side: checks the delegate's signature against the probe it sent,
/// then opens the result with `κ`.
pub fn check_pull_reply(
    crypto: &Crypto,
    delegate: &PeerId,
    probe: &ProbeMsg,
    reply_key: &SymKey,
    reply: &PullReply,
) -> Result<PullOutcome, ReturnError> {
    if !crypto.verify(
        delegate,
        &pull_signed_bytes(probe, &reply.status),
        &reply.sig,
    ) {
        return Err(ReturnError::BadSignature);
    }
    Ok(match &reply.status {
        PullStatus::Ready(ct) => PullOutcome::Ready(AggregateResult::from_bytes(
            &crypto::sym_open(ct, reply_key)?,
        )?),
        PullStatus::Pending => PullOutcome::Pending,
        PullStatus::Unknown => PullOutcome::Unknown,
    })
}

/// `(κ(π′), α_μ, tag, sig)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FloodMessage {
    pub result_ct: SymCiphertext,
    pub delegate: PeerId,
    pub tag: MatchTag,
    pub sig: Signature,
}

fn flood_signed_bytes(ct: &SymCiphertext, tag: &MatchTag) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(b"anongoss/flood")
        .raw(tag.as_bytes())
        .bytes(ct.as_bytes());
    w.finish()
}

impl FloodMessage {
    pub fn new<R: RngCore + ?Sized>(
        secret: &SecretKey,
        reply_key: &SymKey,
        tag: MatchTag,
        result: &AggregateResult,
        rng: &mut R,
    ) -> Self {
        let result_ct = crypto::sym_seal(reply_key, &result.to_bytes(), rng);
        let sig = crypto::sign(secret, &flood_signed_bytes(&result_ct, &tag));
        Self {
            result_ct,
            delegate: secret.public(),
            tag,
            sig,
        }
    }

    pub fn verify(&self, crypto: &Crypto) -> bool {
        crypto.verify(
            &self.delegate,
            &flood_signed_bytes(&self.result_ct, &self.tag),
            &self.sig,
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.peer(&self.delegate)
            .raw(self.tag.as_bytes())
            .raw(&self.sig.to_bytes())
            .bytes(self.result_ct.as_bytes());
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, ReturnError> {
        let mut r = Reader::new(buf);
        let delegate = r.peer()?;
        let tag = MatchTag::from_bytes(r.array()?);
        let sig = Signature::from_bytes(r.take(SIGNATURE_LEN)?)?;
        let result_ct = SymCiphertext::from_wire(r.bytes()?.to_vec());
        r.finish()?;
        Ok(Self {
            result_ct,
            delegate,
            tag,
            sig,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FloodMode {
    Full,
    /// Upstreams of onion packets received in `(now − T, now]`; `None` is
    /// unbounded.
    OnionWindow(Option<Tick>),
}

/// Who sent this node onion packets, and when.
#[derive(Clone, Debug, Default)]
pub struct OnionUpstreamLog {
    entries: Vec<(Tick, NodeId)>,
}

impl OnionUpstreamLog {
    pub fn record(&mut self, at: Tick, from: NodeId) {
        self.entries.push((at, from));
    }

    pub fn within(&self, now: Tick, window: Option<Tick>) -> BTreeSet<NodeId> {
        self.entries
            .iter()
            .filter(|(at, _)| *at <= now && window.is_none_or(|t| now - at < t))
            .map(|(_, n)| *n)
            .collect()
    }

    /// Drops entries that can no longer fall inside any window of length `keep`.
    pub fn prune(&mut self, now: Tick, keep: Option<Tick>) {
        if let Some(t) = keep {
            self.entries.retain(|(at, _)| now - at < t);
        }
    }
}

/// The flood fan-out rule. Same function for every node.
pub fn flood_neighbors(
    view: impl IntoIterator<Item = NodeId>,
    log: &OnionUpstreamLog,
    now: Tick,
    mode: FloodMode,
) -> BTreeSet<NodeId> {
    match mode {
        FloodMode::Full => view.into_iter().collect(),
        FloodMode::OnionWindow(t) => log.within(now, t),
    }
}

/// A key and profile this node delegated, kept to recognize its own result.
#[derive(Clone, Debug)]
pub struct Holding {
    pub delegation: u64,
    pub reply_key: SymKey,
    pub tag: MatchTag,
}

/// Matches a flood against what the node delegated; on success opens it.
/// The caller's forwarding must not depend on the answer.
pub fn try_match(holdings: &[Holding], fm: &FloodMessage) -> Option<(u64, AggregateResult)> {
    let h = holdings.iter().find(|h| h.tag == fm.tag)?;
    let pt = crypto::sym_open(&fm.result_ct, &h.reply_key).ok()?;
    AggregateResult::from_bytes(&pt)
        .ok()
        .map(|r| (h.delegation, r))
}

#[derive(Clone, Debug, Default)]
pub struct FloodState {
    seen: HashSet<MatchTag>,
}

impl FloodState {
    /// True the first time a tag is seen.
    pub fn first_sight(&mut self, tag: MatchTag) -> bool {
        self.seen.insert(tag)
    }

    pub fn seen(&self, tag: &MatchTag) -> bool {
        self.seen.contains(tag)
    }
}

/// One flood receipt at one node, as logged by the simulation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ForwardRecord {
    pub node: NodeId,
    #[serde(serialize_with = "ser_tag")]
    pub tag: MatchTag,
    pub from: Option<NodeId>,
    pub received_at: Tick,
    pub forwarded_at: Option<Tick>,
    pub recipients: Vec<NodeId>,
    /// Flood neighbors at receipt, from the node's own state.
    pub neighbors: Vec<NodeId>,
    pub duplicate: bool,
    pub invalid: bool,
}

fn ser_tag<S: serde::Serializer>(t: &MatchTag, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&hex::encode(t.as_bytes()))
}

/// Result of comparing origin forwarding against everyone else's.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TraceComparison {
    pub origin_records: usize,
    pub other_records: usize,
    pub rule_violations: usize,
    /// Features whose values separate origins from other nodes.
    pub distinguishing: Vec<String>,
}

impl TraceComparison {
    pub fn indistinguishable(&self) -> bool {
        self.rule_violations == 0 && self.distinguishing.is_empty()
    }
}

fn expected_recipients(r: &ForwardRecord) -> Vec<NodeId> {
    r.neighbors
        .iter()
        .copied()
        .filter(|n| Some(*n) != r.from && *n != r.node)
        .collect()
}

/// Checks every record against the forwarding rule, then compares the
/// origin's records (for its own tag) with all other records feature by
/// feature: delay, fan-out relative to neighbors, and duplicate suppression.
pub fn compare_flood_traces(
    records: &[ForwardRecord],
    origins: &BTreeMap<MatchTag, NodeId>,
) -> TraceComparison {
    let mut cmp = TraceComparison::default();
    let mut delays: [BTreeSet<Option<Tick>>; 2] = Default::default();
    let mut fanout_ok: [BTreeSet<bool>; 2] = Default::default();
    let mut dup_forwards: [BTreeSet<bool>; 2] = Default::default();
    for r in records {
        let is_origin = origins.get(&r.tag) == Some(&r.node);
        let side = usize::from(is_origin);
        if is_origin {
            cmp.origin_records += 1;
        } else {
            cmp.other_records += 1;
        }
        let conforming = if r.duplicate || r.invalid {
            r.forwarded_at.is_none() && r.recipients.is_empty()
        } else {
            r.forwarded_at == Some(r.received_at) && r.recipients == expected_recipients(r)
        };
        if !conforming {
            cmp.rule_violations += 1;
        }
        if r.duplicate {
            dup_forwards[side].insert(!r.recipients.is_empty());
        } else if !r.invalid {
            delays[side].insert(r.forwarded_at.map(|f| f - r.received_at));
            fanout_ok[side].insert(r.recipients == expected_recipients(r));
        }
    }
    let mut check = |name: &str, sets: &[BTreeSet<_>; 2]| {
        if !sets[1].is_subset(&sets[0]) {
            cmp.distinguishing.push(name.to_string());
        }
    };
    check("delay", &delays);
    check(
        "fanout",
        &fanout_ok
            .clone()
            .map(|s| s.into_iter().map(|b| Some(u64::from(b))).collect()),
    );
    check(
        "suppression",
        &dup_forwards
            .clone()
            .map(|s| s.into_iter().map(|b| Some(u64::from(b))).collect()),
    );
    cmp
}

/// Graph flood oracle: nodes reached from `source` over `adj` and the
/// worst-case transmission count (every reached node sends to all its
/// neighbors once).
pub fn flood_oracle(
    adj: &BTreeMap<NodeId, BTreeSet<NodeId>>,
    source: NodeId,
) -> (BTreeSet<NodeId>, usize) {
    let mut reached = BTreeSet::from([source]);
    let mut frontier = vec![source];
    let mut bound = 0;
    while let Some(u) = frontier.pop() {
        let out = adj.get(&u).cloned().unwrap_or_default();
        bound += out.len();
        for v in out {
            if reached.insert(v) {
                frontier.push(v);
            }
        }
    }
    (reached, bound)
}
