//! Compare predictive performance of the two models on one simulated
//! data set with truncated-importance-sampling leave-one-out.

use regtps::evaluation::{loo_elpd, loo_table};
use regtps::fem::FemSystem;
use regtps::geometry::BoundingDomain;
use regtps::inference::{PriorConfig, SamplerSettings};
use regtps::io::{fit_regtps, fit_spde, KleSettings};
use regtps::kernels::{simulate_scenario, KernelSpec, ScenarioSpec};
use std::sync::Arc;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = ScenarioSpec {
        kernel: KernelSpec::exponential(1.0, 0.2)?,
        sigma_e: 0.25,
        n_obs: 60,
        grid_resolution: 8,
        mesh_nodes: 49,
        domain: BoundingDomain::unit_square(),
    };
    let sim = simulate_scenario(&spec, 5)?;
    let prior = PriorConfig::default_for_data(&sim.y, spec.domain.diameter())?;
    let sampler = SamplerSettings {
        chains: 4,
        warmup: 600,
        draws: 500,
        seed: 9,
        leapfrog_base: 64,
    };

    let reg = fit_regtps(&sim.obs, &sim.y, &KleSettings::default(), &prior, &sampler)?;
    let system = Arc::new(FemSystem::new(sim.mesh.clone())?);
    let spde = fit_spde(&system, &sim.obs, &sim.y, &prior, &sampler)?;

    let reg_loo = loo_elpd(&reg.draws.pointwise_loglik)?;
    let spde_loo = loo_elpd(&spde.draws.pointwise_loglik)?;
    let clipped = reg_loo.warnings.iter().filter(|w| **w).count();
    println!("spline LOO: {} of {} observations heavily clipped", clipped, reg_loo.warnings.len());

    let rows = loo_table(&[
        ("spline".to_string(), reg_loo),
        ("spde".to_string(), spde_loo),
    ])?;
    println!("{:<8} {:>10} {:>10} {:>8}", "model", "elpd", "elpd_diff", "se_diff");
    for row in &rows {
        println!(
            "{:<8} {:>10.2} {:>10.2} {:>8.2}",
            row.model, row.elpd, row.elpd_diff, row.se_diff
        );
    }
    Ok(())
}
