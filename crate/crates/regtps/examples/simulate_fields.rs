//! Simulate ground-truth Gaussian random fields from the three
//! stationary kernel families and summarize the observations.

use regtps::geometry::BoundingDomain;
use regtps::kernels::{simulate_scenario, KernelSpec, ScenarioSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let kernels = [
        ("matern 3/2", KernelSpec::matern(1.0, 0.3, 1.5)?),
        ("exponential", KernelSpec::exponential(1.0, 0.3)?),
        ("squared exp", KernelSpec::squared_exponential(1.0, 0.3)?),
    ];
    for (name, kernel) in kernels {
        let spec = ScenarioSpec {
            kernel,
            sigma_e: 0.2,
            n_obs: 100,
            grid_resolution: 15,
            mesh_nodes: 114,
            domain: BoundingDomain::unit_square(),
        };
        let sim = simulate_scenario(&spec, 23)?;
        let mean = sim.y.mean();
        let sd = sim.y.variance().sqrt();
        println!(
            "{name:<12} {} obs on {} mesh nodes: y mean {mean:+.3}, sd {sd:.3}, truth grid {} points",
            sim.y.len(),
            sim.field_nodes.len(),
            sim.truth_grid.len()
        );
    }
    Ok(())
}
