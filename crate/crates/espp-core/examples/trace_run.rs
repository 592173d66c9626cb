//! Runs one scenario with per-step trace logging so closed-loop behaviour
//! can be inspected offline:
//!
//! ```sh
//! RUST_LOG=espp_core=trace cargo run --release --example trace_run -- espp-apf 30
//! ```

use espp_core::{run_scenario, PlannerKind, SimConfig};

fn main() {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let planner: PlannerKind = args
        .next()
        .unwrap_or_else(|| "espp-apf".into())
        .parse()
        .expect("planner name");
    let speed: f64 = args
        .next()
        .unwrap_or_else(|| "30".into())
        .parse()
        .expect("speed");

    let mut cfg = SimConfig::default();
    cfg.scenario.ego_speed = speed;
    let out = run_scenario(&cfg, planner).expect("simulation");
    for e in &out.events {
        println!("{e:?}");
    }
    println!("{}", serde_json::to_string_pretty(&out.metrics).unwrap());
}
