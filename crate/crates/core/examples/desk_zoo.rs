//! Builds a desk-scale zoo and prints the evaluation table in both modes.
//!
//! cargo run --release -p trodo-core --example desk_zoo -- [n_clean] [n_per_attack]

use std::time::Instant;

use trodo_core::benchmark::zoo::{build_zoo, ZooConfig};
use trodo_core::{run_protocol, EvalMode, EvalProtocol, ModelBundle};

fn main() -> trodo_core::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("counts are integers"));
    let mut cfg = ZooConfig::desk();
    cfg.n_clean = args.next().unwrap_or(cfg.n_clean);
    cfg.n_trojaned_per_attack = args.next().unwrap_or(cfg.n_trojaned_per_attack);

    let start = Instant::now();
    let zoo = build_zoo(&cfg, rayon_threads())?;
    println!("built {} models in {:.0}s", zoo.models.len() + 1, start.elapsed().as_secs_f64());
    let admitted: Vec<(&str, &ModelBundle)> = zoo.admitted().into_iter().map(|(e, m)| (e.id.as_str(), m)).collect();

    for mode in [EvalMode::Trodo, EvalMode::TrodoZero] {
        let protocol = EvalProtocol::desk(mode);
        let sources = protocol.sources(&zoo.data.train)?;
        let run = run_protocol(&zoo.surrogate, &admitted, &sources, &protocol)?;
        println!("\n{mode:?}: gamma {:.4}", run.calibration.gamma);
        print!("{}", run.evaluation.table());
    }
    Ok(())
}

fn rayon_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}
