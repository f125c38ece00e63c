//! Handing a profile and a reply key to an anonymous delegate.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::AggregateResult;
use crate::crypto::{self, Crypto, MatchTag, SymKey};
use crate::onion::{self, OnionConfig, OnionError, OnionPacket, RoutePlan, RouteTag};
use crate::sampling::PeerSampler;
use crate::sim::{NodeId, Tick};
use crate::wire::{Reader, WireError, Writer};

/// First payload byte of a delegation message inside an onion.
pub const DELEGATION_MAGIC: u8 = 0x44;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelegationConfig {
    /// `|Φ|`, the sample each route is drawn from.
    pub phi_size: usize,
    pub retry_ticks: Tick,
    pub max_retries: u32,
}

impl Default for DelegationConfig {
    fn default() -> Self {
        Self {
            phi_size: 50,
            retry_ticks: 3000,
            max_retries: 3,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DelegationError {
    #[error("sample too small: {0}")]
    PhiTooSmall(String),
    #[error("malformed delegation message: {0}")]
    Malformed(#[from] WireError),
    #[error("non-finite profile entry")]
    NonFinite,
    #[error(transparent)]
    Onion(#[from] OnionError),
}

/// `π`: a fixed-dimension numeric profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    values: Vec<f64>,
}

impl Profile {
    pub fn new(values: Vec<f64>) -> Result<Self, DelegationError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DelegationError::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(2 + 8 * self.values.len());
        w.u16(self.values.len() as u16);
        for v in &self.values {
            w.f64(*v);
        }
        w.finish()
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, DelegationError> {
        let dim = r.u16()? as usize;
        let mut values = Vec::with_capacity(dim);
        for _ in 0..dim {
            values.push(r.f64()?);
        }
        Self::new(values)
    }
}

/// `(π, κ)`. Carries nothing about who sent it.
#[derive(Clone, Debug, PartialEq)]
pub struct DelegationMsg {
    pub profile: Profile,
    pub reply_key: SymKey,
}

impl DelegationMsg {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(DELEGATION_MAGIC)
            .raw(&self.profile.to_bytes())
            .raw(self.reply_key.as_bytes());
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, DelegationError> {
        let mut r = Reader::new(buf);
        if r.u8()? != DELEGATION_MAGIC {
            return Err(WireError::Invalid("not a delegation message").into());
        }
        let profile = Profile::read(&mut r)?;
        let reply_key = SymKey::from_bytes(r.array()?);
        r.finish()?;
        Ok(Self { profile, reply_key })
    }

    /// Tag the origin will recognize the result by.
    pub fn match_tag(&self) -> MatchTag {
        crypto::match_tag(&self.reply_key, &self.profile.to_bytes())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskStatus {
    Pending,
    Aggregated(AggregateResult),
}

/// The delegate's record of one accepted task.
#[derive(Clone, Debug, PartialEq)]
pub struct DelegatedTask {
    pub id: u64,
    pub profile: Profile,
    pub reply_key: SymKey,
    pub route_tag: RouteTag,
    pub received_at: Tick,
    pub status: TaskStatus,
}

impl DelegatedTask {
    pub fn match_tag(&self) -> MatchTag {
        crypto::match_tag(&self.reply_key, &self.profile.to_bytes())
    }

    /// Every byte the delegate stores for this task.
    pub fn stored_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.id)
            .raw(&self.profile.to_bytes())
            .raw(self.reply_key.as_bytes())
            .raw(&self.route_tag)
            .u64(self.received_at);
        if let TaskStatus::Aggregated(r) = &self.status {
            w.raw(&r.to_bytes());
        }
        w.finish()
    }
}

/// Accepts a delivered payload as a new pending task. Duplicates are stored
/// separately: without an origin identity there is nothing to dedup on.
pub fn on_delegation_received(
    id: u64,
    payload: &[u8],
    route_tag: RouteTag,
    now: Tick,
) -> Result<DelegatedTask, DelegationError> {
    let msg = DelegationMsg::decode(payload)?;
    Ok(DelegatedTask {
        id,
        profile: msg.profile,
        reply_key: msg.reply_key,
        route_tag,
        received_at: now,
        status: TaskStatus::Pending,
    })
}

/// The origin's private record of one delegation.
#[derive(Clone, Debug)]
pub struct PendingDelegation {
    pub id: u64,
    pub profile: Profile,
    pub reply_key: SymKey,
    pub tag: MatchTag,
    pub delegate: NodeId,
    pub plan: RoutePlan,
    pub route_tag: RouteTag,
    pub attempts: u32,
    pub first_sent: Tick,
    pub last_sent: Tick,
    pub result: Option<(AggregateResult, Tick)>,
    pub gave_up: bool,
}

impl PendingDelegation {
    pub fn is_live(&self) -> bool {
        self.result.is_none() && !self.gave_up
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetryDecision {
    Wait,
    RebuildAndResend,
    GiveUp,
}

pub fn retry_policy(p: &PendingDelegation, now: Tick, cfg: &DelegationConfig) -> RetryDecision {
    if now < p.last_sent + cfg.retry_ticks {
        RetryDecision::Wait
    } else if p.attempts < cfg.max_retries {
        RetryDecision::RebuildAndResend
    } else {
        RetryDecision::GiveUp
    }
}

/// A built delegation ready for its first hop.
pub struct Outbound {
    pub packet: OnionPacket,
    pub first_hop: NodeId,
}

fn route<R: RngCore + Rng>(
    crypto: &Crypto,
    sampler: &PeerSampler,
    msg: &DelegationMsg,
    dcfg: &DelegationConfig,
    ocfg: &OnionConfig,
    now: Tick,
    rng: &mut R,
) -> Result<(RoutePlan, RouteTag, Outbound), DelegationError> {
    let phi = sampler
        .sample(dcfg.phi_size, now, rng)
        .map_err(|e| DelegationError::PhiTooSmall(e.to_string()))?;
    let plan = onion::plan_route(&phi, ocfg.k_min, ocfg.k_max, rng)?;
    let (packet, tag) = onion::build_onion(crypto, &plan, &msg.encode(), ocfg.slots(), rng)?;
    let first_hop = plan.relays[0];
    Ok((plan, tag, Outbound { packet, first_hop }))
}

/// Draws `Φ`, picks a route and delegate, and wraps `(π, κ)` for them with a
/// fresh `κ`.
#[allow(clippy::too_many_arguments)]
pub fn delegate_task<R: RngCore + Rng>(
    crypto: &Crypto,
    sampler: &PeerSampler,
    id: u64,
    profile: Profile,
    dcfg: &DelegationConfig,
    ocfg: &OnionConfig,
    now: Tick,
    rng: &mut R,
) -> Result<(PendingDelegation, Outbound), DelegationError> {
    let msg = DelegationMsg {
        profile,
        reply_key: SymKey::generate(rng),
    };
    let (plan, route_tag, out) = route(crypto, sampler, &msg, dcfg, ocfg, now, rng)?;
    let pending = PendingDelegation {
        id,
        tag: msg.match_tag(),
        profile: msg.profile,
        reply_key: msg.reply_key,
        delegate: plan.delegate,
        plan,
        route_tag,
        attempts: 1,
        first_sent: now,
        last_sent: now,
        result: None,
        gave_up: false,
    };
    Ok((pending, out))
}

/// Sends the same `(π, κ)` again over a fresh route, possibly to a different
/// delegate.
pub fn rebuild<R: RngCore + Rng>(
    crypto: &Crypto,
    sampler: &PeerSampler,
    pending: &mut PendingDelegation,
    dcfg: &DelegationConfig,
    ocfg: &OnionConfig,
    now: Tick,
    rng: &mut R,
) -> Result<Outbound, DelegationError> {
    let msg = DelegationMsg {
        profile: pending.profile.clone(),
        reply_key: pending.reply_key.clone(),
    };
    let (plan, route_tag, out) = route(crypto, sampler, &msg, dcfg, ocfg, now, rng)?;
    pending.delegate = plan.delegate;
    pending.plan = plan;
    pending.route_tag = route_tag;
    pending.attempts += 1;
    pending.last_sent = now;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::onion::{peel_and_forward, ForwardAction, RouteTable};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn profile(v: &[f64]) -> Profile {
        Profile::new(v.to_vec()).unwrap()
    }

    #[test]
    fn message_round_trip_and_no_origin_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = Crypto::new();
        let origin = c.keygen(&mut rng);
        let msg = DelegationMsg {
            profile: profile(&[1.5, -2.0, 3.25]),
            reply_key: SymKey::generate(&mut rng),
        };
        let bytes = msg.encode();
        assert_eq!(DelegationMsg::decode(&bytes).unwrap(), msg);
        let id = origin.public.as_bytes();
        assert!(!bytes.windows(id.len()).any(|w| w == id));
        // Not even an 8-byte fragment of the id.
        assert!(!bytes.windows(8).any(|w| id.windows(8).any(|x| x == w)));
    }

    #[test]
    fn malformed_and_non_finite() {
        assert!(matches!(
            DelegationMsg::decode(&[0x44, 1]),
            Err(DelegationError::Malformed(_))
        ));
        assert!(matches!(
            DelegationMsg::decode(&[0x50]),
            Err(DelegationError::Malformed(_))
        ));
        assert_eq!(
            Profile::new(vec![f64::NAN]).unwrap_err(),
            DelegationError::NonFinite
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let good = DelegationMsg {
            profile: profile(&[1.0]),
            reply_key: SymKey::generate(&mut rng),
        }
        .encode();
        let mut bad = good.clone();
        bad[3..11].copy_from_slice(&f64::INFINITY.to_le_bytes());
        assert_eq!(
            DelegationMsg::decode(&bad).unwrap_err(),
            DelegationError::NonFinite
        );
        let mut trailing = good;
        trailing.push(0);
        assert!(DelegationMsg::decode(&trailing).is_err());
    }

    #[test]
    fn duplicate_messages_become_separate_tasks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let msg = DelegationMsg {
            profile: profile(&[4.0]),
            reply_key: SymKey::generate(&mut rng),
        }
        .encode();
        let a = on_delegation_received(1, &msg, [1; 16], 10).unwrap();
        let b = on_delegation_received(2, &msg, [2; 16], 11).unwrap();
        assert_ne!(a.id, b.id);
        assert_eq!(a.match_tag(), b.match_tag());
        assert_eq!(a.status, TaskStatus::Pending);
    }

    fn population(n: usize, rng: &mut ChaCha8Rng) -> (Crypto, Vec<crate::crypto::KeyPair>) {
        let mut c = Crypto::new();
        let keys = (0..n).map(|_| c.keygen(rng)).collect();
        (c, keys)
    }

    #[test]
    fn delegation_reaches_delegate_and_retry_changes_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (c, keys) = population(40, &mut rng);
        let ids: Vec<NodeId> = keys.iter().map(|k| NodeId(k.public)).collect();
        let sampler = PeerSampler::new(ids[0], 20, 10, &ids[1..]);
        let dcfg = DelegationConfig {
            phi_size: 30,
            ..Default::default()
        };
        let ocfg = OnionConfig::default();
        let p = profile(&[7.0, 8.0]);
        let (mut pending, out) =
            delegate_task(&c, &sampler, 1, p.clone(), &dcfg, &ocfg, 5, &mut rng).unwrap();
        assert!(pending.plan.hops().all(|h| h != ids[0]));

        let secret = |id: NodeId| &keys.iter().find(|k| k.public == *id.peer()).unwrap().secret;
        let (mut pkt, mut at, mut from) = (out.packet, out.first_hop, ids[0]);
        let mut table = RouteTable::new();
        let task = loop {
            match peel_and_forward(secret(at), from, &pkt, 0, &mut table, &mut rng).unwrap() {
                ForwardAction::Forward { packet, next } => {
                    pkt = packet;
                    from = at;
                    at = next;
                }
                ForwardAction::DeliverLocal { payload, route_tag } => {
                    assert_eq!(at, pending.delegate);
                    break on_delegation_received(1, &payload, route_tag, 9).unwrap();
                }
            }
        };
        assert_eq!(task.profile.to_bytes(), p.to_bytes());
        assert_eq!(task.match_tag(), pending.tag);
        let stored = task.stored_bytes();
        assert!(!stored.windows(32).any(|w| w == ids[0].peer().as_bytes()));

        let first_tag = pending.route_tag;
        let first_plan = pending.plan.clone();
        rebuild(&c, &sampler, &mut pending, &dcfg, &ocfg, 100, &mut rng).unwrap();
        assert_eq!(pending.attempts, 2);
        assert_ne!(pending.route_tag, first_tag);
        assert_ne!(pending.plan, first_plan);

        let (second, _) = delegate_task(&c, &sampler, 2, p, &dcfg, &ocfg, 5, &mut rng).unwrap();
        assert_ne!(second.reply_key, pending.reply_key);
    }

    #[test]
    fn phi_too_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c, keys) = population(10, &mut rng);
        let ids: Vec<NodeId> = keys.iter().map(|k| NodeId(k.public)).collect();
        let sampler = PeerSampler::new(ids[0], 20, 10, &ids[1..]);
        let r = delegate_task(
            &c,
            &sampler,
            1,
            profile(&[1.0]),
            &DelegationConfig::default(),
            &OnionConfig::default(),
            0,
            &mut rng,
        );
        assert!(matches!(r, Err(DelegationError::PhiTooSmall(_))));
    }

    #[test]
    fn retry_schedule() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = NodeId(crate::crypto::PeerId::from_bytes([1; 32]));
        let cfg = DelegationConfig {
            retry_ticks: 100,
            max_retries: 2,
            ..Default::default()
        };
        let mut p = PendingDelegation {
            id: 0,
            profile: profile(&[0.0]),
            reply_key: SymKey::generate(&mut rng),
            tag: crypto::match_tag(&SymKey::generate(&mut rng), b""),
            delegate: n,
            plan: RoutePlan {
                relays: vec![n],
                delegate: n,
            },
            route_tag: [0; 16],
            attempts: 1,
            first_sent: 0,
            last_sent: 0,
            result: None,
            gave_up: false,
        };
        assert_eq!(retry_policy(&p, 99, &cfg), RetryDecision::Wait);
        assert_eq!(retry_policy(&p, 100, &cfg), RetryDecision::RebuildAndResend);
        p.attempts = 2;
        assert_eq!(retry_policy(&p, 100, &cfg), RetryDecision::GiveUp);
    }
}
