//! Runs the desk-scale adaptation experiment and prints the results.
//!
//! `cargo run --release --example adaptation -- [seed]`

use std::time::Instant;

use udma::experiment::{run_experiment, ExperimentConfig};

fn main() {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = ExperimentConfig::desk_scale(seed);
    let start = Instant::now();
    let mut log = Vec::new();
    let report = run_experiment(&cfg, &mut log).expect("experiment");
    for r in &report.runs {
        let pc: Vec<String> = r.per_class.iter().map(|v| format!("{:.2}", v.unwrap_or(f64::NAN))).collect();
        println!("{:<12} mIoU {:.4}  [{}]", r.name, r.miou, pc.join(" "));
    }
    println!("disc balanced accuracy {:.3}", report.disc_balanced_accuracy);
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
}
