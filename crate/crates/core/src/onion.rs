//! Layered forward routes and hop-by-hop replies.
//!
//! A packet is a header of fixed-size slots followed by a payload envelope.
//! Slot 0 is sealed to the current holder and names the next hop (or marks
//! the holder as terminal). Each relay strips its slot, unmasks the remaining
//! slots and the payload with a per-hop layer key, shifts the header left and
//! appends a random slot, so the wire size never depends on route length or
//! position.

use std::collections::HashMap;

use rand::seq::index;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, Crypto, CryptoError, PeerId, SealedEnvelope, SecretKey, SymKey, ID_LEN};
use crate::sampling::SampleSet;
use crate::sim::{NodeId, Tick};
use crate::wire::{Message, Reader, WireError, Writer, ROUTE_TAG_LEN};

pub type RouteTag = [u8; ROUTE_TAG_LEN];

/// Sealed size of one header slot.
pub const SLOT_LEN: usize = 128;
const SLOT_PLAINTEXT: usize = 1 + ID_LEN + ROUTE_TAG_LEN + 32;
const HOP: u8 = 1;
const TERMINAL: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplyMode {
    Naive,
    PerhopReenc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnionConfig {
    pub k_min: usize,
    pub k_max: usize,
    /// `None` keeps route state forever.
    #[serde(with = "crate::config::ticks_or_inf")]
    pub route_ttl_ticks: Option<Tick>,
}

impl Default for OnionConfig {
    fn default() -> Self {
        Self {
            k_min: 5,
            k_max: 20,
            route_ttl_ticks: Some(2000),
        }
    }
}

impl OnionConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.k_min == 0 || self.k_min > self.k_max {
            return Err(format!(
                "invalid route length range [{}, {}]",
                self.k_min, self.k_max
            ));
        }
        if self.route_ttl_ticks == Some(0) {
            return Err("route_ttl_ticks must be positive".into());
        }
        Ok(())
    }

    /// Header slots: one per relay plus the delegate, at the longest route.
    pub fn slots(&self) -> usize {
        self.k_max + 1
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OnionError {
    #[error("sample holds {have} peers, route needs {need}")]
    PhiTooSmall { need: usize, have: usize },
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("route longer than header")]
    TooManyHops,
    #[error("no state for route")]
    UnknownRoute,
    #[error("upstream peer has left")]
    UpstreamGone,
}

/// Relays `ρ_1..ρ_k` in forwarding order, then the delegate `μ`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutePlan {
    pub relays: Vec<NodeId>,
    pub delegate: NodeId,
}

impl RoutePlan {
    pub fn k(&self) -> usize {
        self.relays.len()
    }

    pub fn hops(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.relays
            .iter()
            .copied()
            .chain(std::iter::once(self.delegate))
    }
}

/// Picks `k ~ U{k_min..=k_max}` and `k + 1` distinct members of `phi`; the
/// last one becomes the delegate.
pub fn plan_route<R: Rng + ?Sized>(
    phi: &SampleSet,
    k_min: usize,
    k_max: usize,
    rng: &mut R,
) -> Result<RoutePlan, OnionError> {
    if phi.len() < k_max + 1 {
        return Err(OnionError::PhiTooSmall {
            need: k_max + 1,
            have: phi.len(),
        });
    }
    let k = rng.random_range(k_min..=k_max);
    let mut picked: Vec<NodeId> = index::sample(rng, phi.len(), k + 1)
        .into_iter()
        .map(|i| phi.peers[i])
        .collect();
    let delegate = picked.pop().expect("k + 1 > 0");
    Ok(RoutePlan {
        relays: picked,
        delegate,
    })
}

/// Like [`plan_route`], but towards a delegate chosen earlier. Relays come
/// from `phi` minus the delegate.
pub fn plan_route_to<R: Rng + ?Sized>(
    phi: &SampleSet,
    delegate: NodeId,
    k_min: usize,
    k_max: usize,
    rng: &mut R,
) -> Result<RoutePlan, OnionError> {
    let pool: Vec<NodeId> = phi
        .peers
        .iter()
        .copied()
        .filter(|p| *p != delegate)
        .collect();
    if pool.len() < k_max {
        return Err(OnionError::PhiTooSmall {
            need: k_max + 1,
            have: pool.len() + 1,
        });
    }
    let k = rng.random_range(k_min..=k_max);
    let relays = index::sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    Ok(RoutePlan { relays, delegate })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OnionPacket {
    header: Vec<u8>,
    payload: Vec<u8>,
}

impl OnionPacket {
    pub fn slots(&self) -> usize {
        self.header.len() / SLOT_LEN
    }

    pub fn wire_len(&self) -> usize {
        self.encode().len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(6 + self.header.len() + self.payload.len());
        w.u16(self.slots() as u16)
            .raw(&self.header)
            .raw(&self.payload);
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(buf);
        let slots = r.u16()? as usize;
        if slots == 0 {
            return Err(WireError::Invalid("empty onion header"));
        }
        let header = r.take(slots * SLOT_LEN)?.to_vec();
        let payload = r.rest().to_vec();
        if payload.is_empty() {
            return Err(WireError::Invalid("missing onion payload"));
        }
        Ok(Self { header, payload })
    }

    pub fn to_message(&self) -> Message {
        Message::Onion(self.encode())
    }
}

fn hop_slot(next: &PeerId, tag: &RouteTag, layer: &SymKey) -> Vec<u8> {
    let mut w = Writer::with_capacity(SLOT_PLAINTEXT);
    w.u8(HOP).peer(next).raw(tag).raw(layer.as_bytes());
    w.finish()
}

fn terminal_slot(tag: &RouteTag) -> Vec<u8> {
    let mut v = Vec::with_capacity(SLOT_PLAINTEXT);
    v.push(TERMINAL);
    v.extend_from_slice(tag);
    v.resize(SLOT_PLAINTEXT, 0);
    v
}

fn unmask(layer: &SymKey, rest: &mut [u8], payload: &mut [u8]) {
    crypto::stream_xor(layer, b"header", rest);
    crypto::stream_xor(layer, b"payload", payload);
}

/// Wraps `payload` for the delegate, then one layer per relay from `ρ_k`
/// outward to `ρ_1`. Returns the packet to hand to `ρ_1` and the route tag.
pub fn build_onion<R: RngCore + ?Sized>(
    crypto: &Crypto,
    plan: &RoutePlan,
    payload: &[u8],
    slots: usize,
    rng: &mut R,
) -> Result<(OnionPacket, RouteTag), OnionError> {
    if plan.k() + 1 > slots {
        return Err(OnionError::TooManyHops);
    }
    let mut tag = [0u8; ROUTE_TAG_LEN];
    rng.fill_bytes(&mut tag);

    let mu = plan.delegate.peer();
    let mut header = crypto.seal(mu, &terminal_slot(&tag), rng)?.into_bytes();
    debug_assert_eq!(header.len(), SLOT_LEN);
    let mut filler = vec![0u8; (slots - 1) * SLOT_LEN];
    rng.fill_bytes(&mut filler);
    header.extend_from_slice(&filler);
    let mut body = crypto.seal(mu, payload, rng)?.into_bytes();

    let mut next = *mu;
    for relay in plan.relays.iter().rev() {
        let layer = SymKey::generate(rng);
        let mut rest = header[..(slots - 1) * SLOT_LEN].to_vec();
        unmask(&layer, &mut rest, &mut body);
        let mut h = crypto
            .seal(relay.peer(), &hop_slot(&next, &tag, &layer), rng)?
            .into_bytes();
        h.extend_from_slice(&rest);
        header = h;
        next = *relay.peer();
    }
    Ok((
        OnionPacket {
            header,
            payload: body,
        },
        tag,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Downstream {
    Next(NodeId),
    Terminal,
}

/// What one node remembers about one route it served.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RouteHopState {
    pub route_tag: RouteTag,
    pub upstream: NodeId,
    pub downstream: Downstream,
    pub created_at: Tick,
}

impl RouteHopState {
    /// Every node identity this record mentions.
    pub fn identities(&self) -> Vec<NodeId> {
        let mut v = vec![self.upstream];
        if let Downstream::Next(n) = self.downstream {
            v.push(n);
        }
        v
    }
}

#[derive(Clone, Debug, Default)]
pub struct RouteTable {
    routes: HashMap<RouteTag, RouteHopState>,
}

impl RouteTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, tag: &RouteTag) -> Option<&RouteHopState> {
        self.routes.get(tag)
    }

    pub fn len(&self) -> usize {
        self.routes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.routes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &RouteHopState> {
        self.routes.values()
    }

    pub fn insert(&mut self, state: RouteHopState) {
        self.routes.insert(state.route_tag, state);
    }

    /// Drops records older than `ttl`; `None` never expires anything.
    pub fn expire(&mut self, now: Tick, ttl: Option<Tick>) -> usize {
        let Some(ttl) = ttl else { return 0 };
        let before = self.routes.len();
        self.routes
            .retain(|_, s| now.saturating_sub(s.created_at) <= ttl);
        before - self.routes.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ForwardAction {
    Forward {
        packet: OnionPacket,
        next: NodeId,
    },
    DeliverLocal {
        payload: Vec<u8>,
        route_tag: RouteTag,
    },
}

/// Peels the outer layer, records route state and says what to do next.
pub fn peel_and_forward<R: RngCore + ?Sized>(
    secret: &SecretKey,
    from: NodeId,
    packet: &OnionPacket,
    now: Tick,
    table: &mut RouteTable,
    rng: &mut R,
) -> Result<ForwardAction, OnionError> {
    let slots = packet.slots();
    let slot = crypto::open(
        &SealedEnvelope::from_wire(packet.header[..SLOT_LEN].to_vec()),
        secret,
    )?;
    let mut r = Reader::new(&slot);
    match r.u8()? {
        HOP => {
            let next = NodeId(r.peer()?);
            let tag: RouteTag = r.array()?;
            let layer = SymKey::from_bytes(r.array()?);
            let mut header = packet.header[SLOT_LEN..].to_vec();
            let mut payload = packet.payload.clone();
            unmask(&layer, &mut header, &mut payload);
            let mut pad = vec![0u8; SLOT_LEN];
            rng.fill_bytes(&mut pad);
            header.extend_from_slice(&pad);
            debug_assert_eq!(header.len(), slots * SLOT_LEN);
            table.insert(RouteHopState {
                route_tag: tag,
                upstream: from,
                downstream: Downstream::Next(next),
                created_at: now,
            });
            Ok(ForwardAction::Forward {
                packet: OnionPacket { header, payload },
                next,
            })
        }
        TERMINAL => {
            let tag: RouteTag = r.array()?;
            let payload = crypto::open(&SealedEnvelope::from_wire(packet.payload.clone()), secret)?;
            table.insert(RouteHopState {
                route_tag: tag,
                upstream: from,
                downstream: Downstream::Terminal,
                created_at: now,
            });
            Ok(ForwardAction::DeliverLocal {
                payload,
                route_tag: tag,
            })
        }
        _ => Err(WireError::Invalid("onion slot kind").into()),
    }
}

/// Wraps a reply for the next hop upstream.
pub fn reply_message<R: RngCore + ?Sized>(
    crypto: &Crypto,
    mode: ReplyMode,
    upstream: NodeId,
    tag: &RouteTag,
    body: &[u8],
    rng: &mut R,
) -> Result<Message, OnionError> {
    Ok(match mode {
        ReplyMode::Naive => Message::ReplyNaive {
            route_tag: *tag,
            body: body.to_vec(),
        },
        ReplyMode::PerhopReenc => {
            let mut pt = Vec::with_capacity(ROUTE_TAG_LEN + body.len());
            pt.extend_from_slice(tag);
            pt.extend_from_slice(body);
            Message::ReplyReenc(crypto.seal(upstream.peer(), &pt, rng)?.into_bytes())
        }
    })
}

/// Sends a reply one hop up the route identified by `tag`. Returns the peer
/// to send to and the message.
pub fn reply_upstream<R: RngCore + ?Sized>(
    crypto: &Crypto,
    table: &RouteTable,
    tag: &RouteTag,
    body: &[u8],
    mode: ReplyMode,
    rng: &mut R,
) -> Result<(NodeId, Message), OnionError> {
    let state = table.get(tag).ok_or(OnionError::UnknownRoute)?;
    let msg = reply_message(crypto, mode, state.upstream, tag, body, rng)?;
    Ok((state.upstream, msg))
}

/// Reads `(route_tag, body)` out of an incoming reply.
pub fn open_reply(secret: &SecretKey, msg: &Message) -> Result<(RouteTag, Vec<u8>), OnionError> {
    match msg {
        Message::ReplyNaive { route_tag, body } => Ok((*route_tag, body.clone())),
        Message::ReplyReenc(bytes) => {
            let pt = crypto::open(&SealedEnvelope::from_wire(bytes.clone()), secret)?;
            if pt.len() < ROUTE_TAG_LEN {
                return Err(WireError::Truncated.into());
            }
            let mut tag = [0u8; ROUTE_TAG_LEN];
            tag.copy_from_slice(&pt[..ROUTE_TAG_LEN]);
            Ok((tag, pt[ROUTE_TAG_LEN..].to_vec()))
        }
        _ => Err(WireError::Invalid("not a reply").into()),
    }
}

/// Route-table expiry as a free function over one node's table.
pub fn expire_routes(table: &mut RouteTable, now: Tick, ttl: Option<Tick>) -> usize {
    table.expire(now, ttl)
}
