//! End-to-end station workflow: write a synthetic station CSV, ingest it
//! (missing-value handling, square-root transform, km projection), run
//! the full comparison analysis and list the artifacts.

use rand::{Rng, SeedableRng};
use regtps::geometry::BoundingDomain;
use regtps::io::{
    ingest_stations, run_station_analysis, KleSettings, RunConfig, ScenarioSettings,
    StationSchema, StationSettings,
};
use regtps::inference::SamplerSettings;
use regtps::kernels::KernelSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("regtps_station_example");
    std::fs::create_dir_all(&dir)?;
    let csv_path = dir.join("stations.csv");

    // Hourly long format with a few negative (missing) readings.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    let mut text = String::from("station_id,lon,lat,timestamp,value\n");
    for i in 0..90 {
        let lon = 9.0 + 2.0 * rng.gen::<f64>();
        let lat = 49.0 + 2.0 * rng.gen::<f64>();
        let level = (4.0 + 1.2 * (4.0 * (lon - 10.0)).sin() + 0.8 * (4.0 * (lat - 50.0)).cos()).powi(2);
        for hour in 0..5 {
            let v = if rng.gen::<f64>() < 0.1 {
                -1.0
            } else {
                level * (0.7 + 0.6 * rng.gen::<f64>())
            };
            text.push_str(&format!("s{i},{lon},{lat},2023-01-01T{hour:02}:00,{v}\n"));
        }
    }
    std::fs::write(&csv_path, text)?;

    let table = ingest_stations(&csv_path, StationSchema::Hourly)?;
    println!(
        "ingested {} stations ({} dropped), first transformed value {:.3}",
        table.len(),
        table.dropped,
        table.records[0].value_sqrt
    );

    let config = RunConfig {
        output_dir: dir.clone(),
        seed: 7,
        domain: BoundingDomain::unit_square(),
        kernel: KernelSpec::matern(1.0, 0.3, 1.5)?,
        scenarios: ScenarioSettings::default(),
        kle: KleSettings::default(),
        sampler: SamplerSettings {
            chains: 4,
            warmup: 1000,
            draws: 2000,
            seed: 0,
            leapfrog_base: 192,
        },
        priors: None,
        stations: Some(StationSettings {
            path: csv_path,
            schema: StationSchema::Hourly,
            complexity: 64,
            grid_resolution: 8,
        }),
    };
    run_station_analysis(&config)?;
    println!("artifacts in {}:", dir.join("stations").display());
    let mut names: Vec<String> = std::fs::read_dir(dir.join("stations"))?
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    for name in names {
        println!("  {name}");
    }
    Ok(())
}
