//! Loads a TOML scenario and prints its metric rows.
//!
//! `cargo run --example scenario_file -- path/to/scenario.toml`

use anongoss::config::ScenarioConfig;
use anongoss::world::run_scenario;

fn main() {
    let path = std::env::args().nth(1).unwrap_or_else(|| {
        concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/basic.toml").into()
    });
    let cfg = ScenarioConfig::load(std::path::Path::new(&path)).expect("scenario config");
    cfg.validate().expect("valid config");
    let out = run_scenario(&cfg).expect("run");
    for m in &out.metrics {
        println!("{:<40} {:>14.4} {}", m.metric, m.value, m.unit);
    }
    println!(
        "{} protocol events, {} anonymity reports",
        out.events.len(),
        out.reports.len()
    );
}
