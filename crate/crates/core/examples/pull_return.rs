//! Results fetched by probing the delegate over a fresh onion route, in both
//! reply modes.

use anongoss::aggregation::AggregatorKind;
use anongoss::cli::metric_map;
use anongoss::config::ScenarioConfig;
use anongoss::result_return::ReturnMode;
use anongoss::world::run_scenario;

fn main() {
    for mode in [ReturnMode::PullNaive, ReturnMode::PullReenc] {
        let mut c = ScenarioConfig::seeded(11);
        c.n_nodes = 40;
        c.delegation.phi_size = 30;
        c.workload.delegations = 20;
        c.aggregation.aggregator = AggregatorKind::Identity;
        c.result.return_mode = mode;
        let out = run_scenario(&c).unwrap();
        let m = metric_map(&out.metrics);
        println!(
            "{:<11} result rate {:.2}, probes {}, mean latency {:.1} ticks, messages/delegation {:.1}",
            mode.name(),
            m["result_rate"],
            m["probes"],
            m["mean_result_latency"],
            m["messages_per_delegation"]
        );
    }
}
