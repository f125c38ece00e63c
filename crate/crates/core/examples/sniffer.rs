//! A global passive observer linking pull replies by their bytes.

use anongoss::adversary::sniffer_trace;
use anongoss::aggregation::AggregatorKind;
use anongoss::config::ScenarioConfig;
use anongoss::result_return::ReturnMode;
use anongoss::world::World;

fn main() {
    for mode in [ReturnMode::PullNaive, ReturnMode::PullReenc] {
        let mut c = ScenarioConfig::seeded(21);
        c.n_nodes = 50;
        c.delegation.phi_size = 40;
        c.workload.delegations = 100;
        c.workload.spread_ticks = 2000;
        c.aggregation.aggregator = AggregatorKind::Identity;
        c.result.return_mode = mode;
        c.sim.record_transmissions = true;
        let mut w = World::new(&c).unwrap();
        w.run();
        let s = sniffer_trace(w.transmissions(), &w.ledger().pulls, &w.honest(), 1, |_| {});
        println!(
            "{:<11} pulls {}, linked chains {}, origin named {}/{} (chance {:.3})",
            mode.name(),
            s.pulls,
            s.multi_hop_chains,
            s.identified,
            s.pulls,
            s.baseline
        );
    }
}
