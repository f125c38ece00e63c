//! Results flooded back to origins: full flooding against flooding restricted
//! to recent onion neighbours.

use anongoss::aggregation::AggregatorKind;
use anongoss::cli::metric_map;
use anongoss::config::ScenarioConfig;
use anongoss::result_return::ReturnMode;
use anongoss::world::run_scenario;

fn main() {
    for mode in [ReturnMode::PushFull, ReturnMode::PushWindow] {
        let mut c = ScenarioConfig::seeded(12);
        c.n_nodes = 80;
        c.workload.delegations = 30;
        c.workload.spread_ticks = 4000;
        c.sim_ticks = 6000;
        c.aggregation.aggregator = AggregatorKind::Identity;
        c.result.return_mode = mode;
        c.result.window_ticks = Some(1000);
        let out = run_scenario(&c).unwrap();
        let m = metric_map(&out.metrics);
        println!(
            "{:<11} result rate {:.2}, flood messages {}, distinguishing features {}",
            mode.name(),
            m["result_rate"],
            m["messages_flood"],
            m["flood_distinguishing_features"]
        );
    }
}
