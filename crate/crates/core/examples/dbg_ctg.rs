//! Scratch diagnostic for the cost-to-go recursion (not part of the build).

use ecodrive::energy::EnergyModel;
use ecodrive::geometry::Point2;
use ecodrive::learning::{cost_to_go, Dataset, LearnParams};
use ecodrive::plant::{SystemMatrices, VehicleState};

fn main() {
    let mut d = Dataset::new(14.0, -3.0, 2.0);
    let sys = SystemMatrices::default();
    for (k, v0) in [3.0f64, 5.0, 7.0, 9.0, 11.0].iter().enumerate() {
        for (r, u_acc) in [0.0f64, 0.5, -0.5].iter().enumerate() {
            let mut x = VehicleState::new(-200.0, *v0);
            let mut traj = Vec::new();
            for _ in 0..220 {
                let u = if x.v + u_acc < 0.0 {
                    1.0
                } else if x.v + u_acc > 14.0 {
                    0.0
                } else {
                    *u_acc
                };
                traj.push((Point2::new(x.s, x.v), u));
                x = sys.step(x, u);
                if x.s > 40.0 {
                    break;
                }
            }
            d.augment(&traj, k as u32, r as u32).unwrap();
        }
    }
    for (r, stop_at) in [-70.0f64, -55.0, -40.0, -10.0].iter().enumerate() {
        let mut x = VehicleState::new(stop_at - 40.0, 6.0);
        let mut traj = Vec::new();
        for step in 0..80 {
            let dist = stop_at - x.s;
            let u = if x.v > 0.0 && dist <= x.v * x.v / 4.0 + x.v {
                (-x.v * x.v / (2.0 * dist.max(0.5))).max(-x.v).max(-3.0)
            } else if x.v < 0.05 && step < 40 {
                0.0
            } else if x.v < 6.0 && x.s < 5.0 {
                1.0
            } else {
                0.0
            };
            traj.push((Point2::new(x.s, x.v), u));
            x = sys.step(x, u);
            if x.s > 30.0 {
                break;
            }
        }
        d.augment(&traj, 9, r as u32).unwrap();
    }
    println!("dataset {} pairs", d.len());
    let p = LearnParams {
        sys,
        gain: 0.05,
        w_max: 3.0,
    };
    let energy = EnergyModel::default_ground_truth();
    let t0 = std::time::Instant::now();
    match cost_to_go(&d, 0.0, &p, &energy, 4, 7) {
        Ok(t) => println!(
            "converged: finite {} of {} in {:?}",
            t.finite_count(),
            t.points().len(),
            t0.elapsed()
        ),
        Err(e) => println!("error after {:?}: {e}", t0.elapsed()),
    }
}
