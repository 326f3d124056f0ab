//! Write one replication of the simulation design as a CSV dataset.
//!
//! `cargo run --example export_replication -- <b> <seed> <path>`

use elastic_hte::simulate::{generate_replication, DgpConfig};
use elastic_hte_cli::data::Dataset;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let b: f64 = args.get(1).map_or(0.0, |s| s.parse().expect("b"));
    let seed: u64 = args.get(2).map_or(0, |s| s.parse().expect("seed"));
    let path = args.get(3).map_or("replication.csv", String::as_str);
    let cfg = DgpConfig { b, seed, ..DgpConfig::default() };
    let sample = generate_replication(&cfg, 0).expect("replication");
    let file = std::fs::File::create(path).expect("create output");
    Dataset::from_sample(&sample).write(file).expect("write csv");
}
