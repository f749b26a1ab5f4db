//! Simulate one Matern scenario, fit both models with the in-crate HMC
//! sampler, and compare recovery metrics against the known truth.

use regtps::evaluation::compute_metrics;
use regtps::fem::{self, FemSystem};
use regtps::geometry::BoundingDomain;
use regtps::inference::{self, PriorConfig, SamplerSettings};
use regtps::io::{fit_regtps, fit_spde, KleSettings};
use regtps::kernels::{simulate_scenario, KernelSpec, ScenarioSpec};
use std::sync::Arc;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = ScenarioSpec {
        kernel: KernelSpec::matern(1.0, 0.3, 1.5)?,
        sigma_e: 0.2,
        n_obs: 60,
        grid_resolution: 10,
        mesh_nodes: 49,
        domain: BoundingDomain::unit_square(),
    };
    let sim = simulate_scenario(&spec, 11)?;
    let prior = PriorConfig::default_for_data(&sim.y, spec.domain.diameter())?;
    let sampler = SamplerSettings {
        chains: 4,
        warmup: 600,
        draws: 500,
        seed: 3,
        leapfrog_base: 64,
    };

    let reg = fit_regtps(&sim.obs, &sim.y, &KleSettings::default(), &prior, &sampler)?;
    let grid_design = reg.basis.design(&sim.grid);
    let fields = reg.field_draws(&grid_design);
    let median = pointwise_median(&fields);
    let m1 = compute_metrics(&median, &sim.truth_grid, "spline", "demo")?;

    let system = Arc::new(FemSystem::new(sim.mesh.clone())?);
    let spde = fit_spde(&system, &sim.obs, &sim.y, &prior, &sampler)?;
    let a_grid = fem::projection_matrix(&system.mesh, &sim.grid)?;
    let fields = spde.field_draws(&a_grid);
    let median = pointwise_median(&fields);
    let m2 = compute_metrics(&median, &sim.truth_grid, "spde", "demo")?;

    for m in [&m1, &m2] {
        println!(
            "{:<8} rmse {:.4}  mae {:.4}  r2 {:.4}",
            m.method,
            m.rmse,
            m.mae,
            m.r_squared.unwrap_or(f64::NAN)
        );
    }
    for (name, draws, idx) in [
        ("spline log alpha", &reg.draws, reg.target.log_alpha_index()),
        ("spde log rho", &spde.draws, spde.target.log_rho_index()),
    ] {
        let chains = draws.coordinate_chains(idx);
        println!(
            "{name}: split R-hat {:.3}, bulk ESS {:.0}, {} divergences",
            inference::split_rhat(&chains)?,
            inference::ess_bulk(&chains)?,
            draws.divergence_count()
        );
    }
    Ok(())
}

fn pointwise_median(fields: &[nalgebra::DVector<f64>]) -> nalgebra::DVector<f64> {
    nalgebra::DVector::from_fn(fields[0].len(), |i, _| {
        let mut v: Vec<f64> = fields.iter().map(|f| f[i]).collect();
        v.sort_by(|a, b| a.total_cmp(b));
        v[v.len() / 2]
    })
}
