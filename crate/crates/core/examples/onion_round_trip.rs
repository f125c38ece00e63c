//! Builds an onion, walks it hop by hop, then sends a reply back up the route
//! in both reply modes.

use anongoss::crypto::{Crypto, SymKey};
use anongoss::delegation::{DelegationMsg, Profile};
use anongoss::onion::{self, ForwardAction, ReplyMode, RoutePlan, RouteTable};
use anongoss::sim::NodeId;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut crypto = Crypto::new();
    let keys: Vec<_> = (0..7).map(|_| crypto.keygen(&mut rng)).collect();
    let ids: Vec<NodeId> = keys.iter().map(|k| NodeId(k.public)).collect();
    let origin = ids[0];
    let plan = RoutePlan {
        relays: ids[1..6].to_vec(),
        delegate: ids[6],
    };
    let slots = onion::OnionConfig::default().slots();
    let payload = DelegationMsg {
        profile: Profile::new(vec![3.5, -1.0]).unwrap(),
        reply_key: SymKey::generate(&mut rng),
    }
    .encode();

    let (mut pkt, tag) = onion::build_onion(&crypto, &plan, &payload, slots, &mut rng).unwrap();
    println!(
        "route: {} relays, packet {} bytes on the wire",
        plan.k(),
        pkt.to_message().encode().len()
    );

    let mut tables: Vec<RouteTable> = (0..ids.len()).map(|_| RouteTable::new()).collect();
    let mut from = origin;
    for (i, hop) in plan.hops().enumerate() {
        match onion::peel_and_forward(
            &keys[i + 1].secret,
            from,
            &pkt,
            0,
            &mut tables[i + 1],
            &mut rng,
        )
        .unwrap()
        {
            ForwardAction::Forward { packet, next } => {
                println!(
                    "  {} peeled, forwards {} bytes to {}",
                    hop.short(),
                    packet.to_message().encode().len(),
                    next.short()
                );
                pkt = packet;
            }
            ForwardAction::DeliverLocal { payload: got, .. } => {
                println!(
                    "  {} is the delegate; payload intact: {}",
                    hop.short(),
                    got == payload
                );
            }
        }
        from = hop;
    }

    for mode in [ReplyMode::Naive, ReplyMode::PerhopReenc] {
        let mut at = 6;
        let mut body = b"result bytes".to_vec();
        let mut wires = Vec::new();
        loop {
            let (up, msg) =
                onion::reply_upstream(&crypto, &tables[at], &tag, &body, mode, &mut rng).unwrap();
            wires.push(msg.encode());
            let j = ids.iter().position(|x| *x == up).unwrap();
            let (_, b) = onion::open_reply(&keys[j].secret, &msg).unwrap();
            body = b;
            if up == origin {
                break;
            }
            at = j;
        }
        let same = wires.windows(2).all(|w| w[0] == w[1]);
        println!(
            "{mode:?}: {} reply hops, identical bytes on every link: {same}",
            wires.len()
        );
    }
}
