//! Prints the composed field's descent heading at a grid of lateral offsets
//! for a few obstacle states, to inspect the force balance offline.

use espp_core::geometry::Point2;
use espp_core::potential_field::{
    descend_gradient, total_potential, FieldMode, GradientOutcome, ObstaclePfParams,
};
use espp_core::SimConfig;

fn main() {
    let cfg = SimConfig::default();
    let road = &cfg.road;
    let ego_x = 40.0;
    let target = Point2::new(ego_x + 100.0, road.lower_lane_center());

    let cases = [
        ("cruise: obstacle y=6 ahead 15, a=0", 15.0, 6.0, 0.0, 0.0),
        ("ramp mid: ahead 5.5, y=3.8, brake+swing", 5.5, 3.8, -7.36, 12.0),
        ("settle: ahead 5.5, y=2.6, brake, a_lat 8", 5.5, 2.6, -7.36, 8.0),
        ("late: ahead 5.0, y=2.35, brake, a_lat 3", 5.0, 2.35, -7.36, 3.0),
    ];
    for (name, ahead, oy, a_long, a_lat) in cases {
        println!("--- {name}");
        let p = ObstaclePfParams::adaptive(
            Point2::new(ego_x + ahead, oy),
            30.0,
            a_long,
            a_lat,
            &cfg.apf,
        );
        let obstacles = [p];
        let field = |q: Point2| {
            total_potential(q, road, &obstacles, target, &cfg.apf, FieldMode::Normal)
        };
        for ey in [2.5, 2.0, 1.5, 1.2, 1.0, 0.8, 0.5] {
            let q = Point2::new(ego_x, ey);
            match descend_gradient(q, &field, &cfg.gradient) {
                GradientOutcome::Force { force, psi_ref } => println!(
                    "  y={ey:4.1}  U={:8.4}  F=({:8.4},{:8.4})  psi_ref={psi_ref:7.3}  sin={:6.3}",
                    field(q),
                    force.x,
                    force.y,
                    psi_ref.sin()
                ),
                GradientOutcome::LocalMinimum => println!("  y={ey:4.1}  local minimum"),
            }
        }
    }
}
