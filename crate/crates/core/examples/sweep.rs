//! A colluder-fraction sweep through the same path as `anongoss run`, then
//! the text report.

use anongoss::cli;

fn main() {
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/basic.toml");
    let out = std::env::temp_dir().join("anongoss-sweep-example");
    let outputs = cli::run(
        std::path::Path::new(cfg),
        &out,
        None,
        &["adversary.colluder_fraction=0.1,0.3,0.5".into()],
    )
    .expect("sweep");
    println!("{} cells written to {}", outputs.len(), out.display());
    print!("{}", cli::report(&out).expect("report"));
}
