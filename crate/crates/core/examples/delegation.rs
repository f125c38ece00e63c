//! Origins delegate tasks through onion routes in a simulated network and
//! get the identity aggregate back.

use anongoss::aggregation::AggregatorKind;
use anongoss::config::ScenarioConfig;
use anongoss::world::World;

fn main() {
    let mut c = ScenarioConfig::seeded(3);
    c.n_nodes = 40;
    c.sim_ticks = 4000;
    c.delegation.phi_size = 30;
    c.workload.delegations = 25;
    c.aggregation.aggregator = AggregatorKind::Identity;
    // Keep route state so the scan at the end has something to look at.
    c.onion.route_ttl_ticks = None;

    let mut w = World::new(&c).unwrap();
    w.run();
    w.check_invariants().unwrap();

    for t in w.ledger().delegations.iter().take(8) {
        println!(
            "delegation {:>2} from {}: attempts {}, delivered after {:?} hops / {:?} ticks, result at {:?}, correct {:?}",
            t.id,
            t.origin.short(),
            t.attempts,
            t.first_delivery_hops,
            t.first_delivery_ticks,
            t.result_at,
            t.result_correct
        );
    }
    let done = w
        .ledger()
        .delegations
        .iter()
        .filter(|t| t.result_correct == Some(true))
        .count();
    println!(
        "{done}/{} delegations returned a correct result",
        w.ledger().delegations.len()
    );
    let h = w.hygiene_scan();
    println!(
        "route state: {} routes, {} hop records, clean: {}",
        h.routes,
        h.records,
        h.clean()
    );
}
