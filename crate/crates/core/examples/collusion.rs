//! Colluding relays pooling their route state, against the closed-form rate
//! at which they learn the origin outright.

use anongoss::adversary::collusion_experiment;

fn main() {
    println!(
        "{:>5} {:>10} {:>10} {:>8} {:>12}",
        "f", "observed", "expected", "sigma", "mean degree"
    );
    for f in [0.1, 0.3, 0.5, 0.7] {
        let s = collusion_experiment(100, f, 5000, 3, 10, 1, |_| {});
        println!(
            "{:>5.1} {:>10.5} {:>10.5} {:>8.5} {:>12.4}",
            f, s.rate, s.oracle, s.sigma, s.mean_degree
        );
    }
}
