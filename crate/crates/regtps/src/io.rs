//! Configuration, station-data ingestion, scenario orchestration and all
//! file outputs. Every CSV is written with a header row and a metadata
//! sidecar (config hash, seed, crate version), and identical
//! configuration plus seeds reproduce every artifact byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::{self, FitMetrics};
use crate::fem::{self, FemSystem};
use crate::geometry::{make_grid, BoundingDomain, Point2, PointRole, PointSet};
use crate::inference::{
    self, PosteriorDraws, PriorConfig, RegTpsTarget, SamplerSettings, SpdeTarget,
};
use crate::kernels::{simulate_scenario, KernelSpec, ScenarioSpec, SimulatedScenario};
use crate::kle::{self, KleModel};
use crate::tps;

/// Mean Earth radius in kilometres, for the equirectangular projection.
const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Convergence gate on scenario fits.
pub const RHAT_GATE: f64 = 1.05;
pub const ESS_GATE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSettings {
    /// Observation counts, one scenario per entry.
    pub n_obs: Vec<usize>,
    pub grid_resolution: usize,
    pub mesh_nodes: usize,
    pub noise_sd: f64,
}

impl Default for ScenarioSettings {
    fn default() -> Self {
        ScenarioSettings {
            n_obs: vec![50, 100, 150, 200],
            grid_resolution: 25,
            mesh_nodes: 114,
            noise_sd: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KleSettings {
    /// Cumulative variance fraction retained at the reference alpha.
    pub variance_fraction: f64,
    pub alpha_ref: f64,
}

impl Default for KleSettings {
    fn default() -> Self {
        KleSettings {
            variance_fraction: 0.95,
            alpha_ref: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StationSchema {
    /// One row per station: station_id, lon, lat, value.
    Annual,
    /// Long format: station_id, lon, lat, timestamp, value.
    Hourly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationSettings {
    pub path: PathBuf,
    pub schema: StationSchema,
    /// Matched model complexity: KLE mode count and mesh node target.
    #[serde(default = "default_complexity")]
    pub complexity: usize,
    #[serde(default = "default_station_grid")]
    pub grid_resolution: usize,
}

fn default_complexity() -> usize {
    308
}

fn default_station_grid() -> usize {
    40
}

/// Top-level run configuration, parsed from TOML. Unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seed: u64,
    #[serde(default = "BoundingDomain::unit_square")]
    pub domain: BoundingDomain,
    pub kernel: KernelSpec,
    #[serde(default)]
    pub scenarios: ScenarioSettings,
    #[serde(default)]
    pub kle: KleSettings,
    #[serde(default)]
    pub sampler: SamplerSettings,
    /// Data-driven defaults are used when absent.
    #[serde(default)]
    pub priors: Option<PriorConfig>,
    #[serde(default)]
    pub stations: Option<StationSettings>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        // serde bypasses constructors, so re-check the kernel invariants.
        KernelSpec::new(self.kernel.family, self.kernel.sigma_u, self.kernel.rho, self.kernel.nu)
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.scenarios.n_obs.is_empty() {
            return Err(Error::Config("scenario list must be non-empty".into()));
        }
        if self.scenarios.n_obs.iter().any(|n| *n < 10) {
            return Err(Error::Config("each scenario needs at least 10 observations".into()));
        }
        if self.scenarios.grid_resolution < 2 {
            return Err(Error::Config("grid_resolution must be >= 2".into()));
        }
        if !(self.scenarios.noise_sd >= 0.0) {
            return Err(Error::Config("noise_sd must be nonnegative".into()));
        }
        if !(self.kle.variance_fraction > 0.0 && self.kle.variance_fraction <= 1.0) {
            return Err(Error::Config("kle variance_fraction must lie in (0, 1]".into()));
        }
        if !(self.kle.alpha_ref > 0.0) {
            return Err(Error::Config("kle alpha_ref must be positive".into()));
        }
        if self.sampler.chains < 2 {
            return Err(Error::Config("sampler needs at least 2 chains".into()));
        }
        if let Some(p) = &self.priors {
            p.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some(s) = &self.stations {
            if s.complexity < 4 {
                return Err(Error::Config("station complexity must be >= 4".into()));
            }
        }
        Ok(())
    }

    /// Content hash of the canonical serialized form, recorded in every
    /// output sidecar.
    pub fn hash(&self) -> Result<String> {
        let text = self.to_toml()?;
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        Ok(format!("{:x}", hasher.finalize()))
    }
}

/// One ingested station after preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationRecord {
    pub id: String,
    pub lon: f64,
    pub lat: f64,
    /// Square root of the (annual mean) concentration.
    pub value_sqrt: f64,
    pub n_records: usize,
    pub n_missing: usize,
}

/// Preprocessed station data with planar coordinates in kilometres.
#[derive(Debug, Clone)]
pub struct StationTable {
    pub records: Vec<StationRecord>,
    /// Equirectangular projection about the data centroid.
    pub points_km: PointSet,
    /// Stations dropped because every record was missing.
    pub dropped: usize,
}

impl StationTable {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn values(&self) -> DVector<f64> {
        DVector::from_iterator(self.records.len(), self.records.iter().map(|r| r.value_sqrt))
    }
}

fn require_column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Schema(name.to_string()))
}

fn parse_f64(rec: &csv::StringRecord, idx: usize, line: u64, col: &str) -> Result<f64> {
    let raw = rec.get(idx).unwrap_or("");
    raw.trim()
        .parse::<f64>()
        .map_err(|_| Error::Data(format!("line {line}: cannot parse {col} value `{raw}`")))
}

/// Read a station CSV, treat negative values as missing, average the
/// remaining records per station (hourly schema), apply the square-root
/// transform, and project lon/lat to planar kilometres about the
/// centroid.
pub fn ingest_stations(path: &Path, schema: StationSchema) -> Result<StationTable> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::Data(format!("cannot read {}: {e}", path.display())),
        _ => Error::Csv(e),
    })?;
    let headers = rdr.headers()?.clone();
    let id_col = require_column(&headers, "station_id")?;
    let lon_col = require_column(&headers, "lon")?;
    let lat_col = require_column(&headers, "lat")?;
    let value_col = require_column(&headers, "value")?;
    if schema == StationSchema::Hourly {
        require_column(&headers, "timestamp")?;
    }

    struct Acc {
        lon: f64,
        lat: f64,
        sum: f64,
        n_valid: usize,
        n_missing: usize,
    }
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<String, Acc> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        let id = rec.get(id_col).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(Error::Data(format!("line {line}: empty station_id")));
        }
        let lon = parse_f64(&rec, lon_col, line, "lon")?;
        let lat = parse_f64(&rec, lat_col, line, "lat")?;
        let value = parse_f64(&rec, value_col, line, "value")?;
        let entry = acc.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Acc {
                lon,
                lat,
                sum: 0.0,
                n_valid: 0,
                n_missing: 0,
            }
        });
        if schema == StationSchema::Annual && entry.n_valid + entry.n_missing > 0 {
            return Err(Error::Data(format!(
                "line {line}: duplicate station_id `{id}` in annual schema"
            )));
        }
        if value < 0.0 {
            entry.n_missing += 1;
        } else {
            entry.sum += value;
            entry.n_valid += 1;
        }
    }

    let mut records = Vec::new();
    let mut dropped = 0usize;
    for id in order {
        let a = &acc[&id];
        if a.n_valid == 0 {
            dropped += 1;
            continue;
        }
        let mean = a.sum / a.n_valid as f64;
        records.push(StationRecord {
            id,
            lon: a.lon,
            lat: a.lat,
            value_sqrt: mean.sqrt(),
            n_records: a.n_valid + a.n_missing,
            n_missing: a.n_missing,
        });
    }
    if dropped > 0 {
        eprintln!("ingest: dropped {dropped} station(s) with no valid records");
    }
    if records.is_empty() {
        return Err(Error::Data("no stations with valid records".into()));
    }

    let lon0 = records.iter().map(|r| r.lon).sum::<f64>() / records.len() as f64;
    let lat0 = records.iter().map(|r| r.lat).sum::<f64>() / records.len() as f64;
    let rad = std::f64::consts::PI / 180.0;
    let points: Vec<Point2> = records
        .iter()
        .map(|r| Point2 {
            s1: EARTH_RADIUS_KM * lat0.to_radians().cos() * (r.lon - lon0) * rad,
            s2: EARTH_RADIUS_KM * (r.lat - lat0) * rad,
        })
        .collect();
    let points_km = PointSet::new(points, PointRole::Observation)?;
    Ok(StationTable {
        records,
        points_km,
        dropped,
    })
}

/// Sidecar metadata written next to every CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SidecarMeta {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    /// Free-form notes, e.g. which transform a column carries.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

pub fn write_sidecar(csv_path: &Path, meta: &SidecarMeta) -> Result<()> {
    let side = csv_path.with_extension("meta.json");
    let text = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    std::fs::write(side, text)?;
    Ok(())
}

fn write_matrix_csv(m: &DMatrix<f64>, header_prefix: &str, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = (0..m.ncols()).map(|j| format!("{header_prefix}{j}")).collect();
    w.write_record(&header)?;
    for i in 0..m.nrows() {
        let rec: Vec<String> = m.row(i).iter().map(|v| format!("{v:.17e}")).collect();
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn write_point_values_csv(
    pts: &PointSet,
    columns: &[(&str, &DVector<f64>)],
    path: &Path,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["s1".to_string(), "s2".to_string()];
    header.extend(columns.iter().map(|(n, _)| n.to_string()));
    w.write_record(&header)?;
    for (i, p) in pts.points().iter().enumerate() {
        let mut rec = vec![format!("{:.17e}", p.s1), format!("{:.17e}", p.s2)];
        rec.extend(columns.iter().map(|(_, v)| format!("{:.17e}", v[i])));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn pointwise_quantile(fields: &[DVector<f64>], q: f64) -> DVector<f64> {
    let n = fields[0].len();
    DVector::from_fn(n, |i, _| {
        let mut vals: Vec<f64> = fields.iter().map(|f| f[i]).collect();
        vals.sort_by(|a, b| a.total_cmp(b));
        let pos = q * (vals.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        vals[lo] * (1.0 - frac) + vals[hi] * frac
    })
}

fn check_convergence_gate(
    draws: &PosteriorDraws,
    coords: &[(usize, &str)],
    context: &str,
) -> Result<()> {
    for (coord, name) in coords {
        let chains = draws.coordinate_chains(*coord);
        let rhat = inference::split_rhat(&chains)?;
        let ess = inference::ess_bulk(&chains)?;
        if rhat > RHAT_GATE || ess < ESS_GATE {
            return Err(Error::Convergence(format!(
                "{context}: {name} has split R-hat {rhat:.4} and bulk ESS {ess:.1} \
                 (gates: R-hat <= {RHAT_GATE}, ESS >= {ESS_GATE})"
            )));
        }
    }
    Ok(())
}

/// A fitted spline model on one data set: basis, retained modes, target
/// and posterior draws.
pub struct RegTpsFit {
    pub basis: Arc<tps::TpsBasisSystem>,
    pub model: KleModel,
    pub target: RegTpsTarget,
    pub draws: PosteriorDraws,
}

impl RegTpsFit {
    /// Per-draw fields at arbitrary points, via the retained modes.
    pub fn field_draws(&self, eval_design: &DMatrix<f64>) -> Vec<DVector<f64>> {
        let b = eval_design * self.model.modes();
        let pooled = self.draws.pooled();
        (0..pooled.nrows())
            .map(|i| {
                let x = pooled.row(i).transpose();
                &b * self.target.coefficients(&x)
            })
            .collect()
    }

    pub fn alpha_median(&self) -> f64 {
        self.draws.median()[self.target.log_alpha_index()].exp()
    }
}

/// Fit the spline model: knots from the observations (all of them up to
/// 200, else a farthest-point subsample), truncation by cumulative
/// variance, HMC over the non-centered coefficients and hyperparameters.
pub fn fit_regtps(
    obs: &PointSet,
    y: &DVector<f64>,
    kle_settings: &KleSettings,
    prior: &PriorConfig,
    sampler: &SamplerSettings,
) -> Result<RegTpsFit> {
    let knots = tps::select_knots(obs, 200, sampler.seed)?;
    let basis = Arc::new(tps::build_basis(&knots)?);
    let model = kle::truncate(&basis, kle_settings.variance_fraction, kle_settings.alpha_ref)?;
    let obs_design = basis.design(obs) * model.modes();
    let target = RegTpsTarget::new(
        obs_design,
        y.clone(),
        model.penalty_eigvals().clone(),
        *prior,
    )?;
    let draws = inference::run_hmc(&target, sampler)?;
    Ok(RegTpsFit {
        basis,
        model,
        target,
        draws,
    })
}

/// A fitted SPDE model: mesh system, target and posterior draws.
pub struct SpdeFit {
    pub system: Arc<FemSystem>,
    pub target: SpdeTarget,
    pub draws: PosteriorDraws,
}

impl SpdeFit {
    pub fn field_draws(&self, projection: &nalgebra_sparse::CscMatrix<f64>) -> Vec<DVector<f64>> {
        let pooled = self.draws.pooled();
        (0..pooled.nrows())
            .map(|i| {
                let x = pooled.row(i).transpose();
                projection * self.target.field_nodes(&x)
            })
            .collect()
    }

    pub fn median_hyperparams(&self) -> (f64, f64, f64) {
        let med = self.draws.median();
        (
            med[self.target.log_sigma_e_index()].exp(),
            med[self.target.log_rho_index()].exp(),
            med[self.target.log_sigma_u_index()].exp(),
        )
    }
}

pub fn fit_spde(
    system: &Arc<FemSystem>,
    obs: &PointSet,
    y: &DVector<f64>,
    prior: &PriorConfig,
    sampler: &SamplerSettings,
) -> Result<SpdeFit> {
    let a_obs = fem::projection_matrix(&system.mesh, obs)?;
    let target = SpdeTarget::new(Arc::clone(system), a_obs, y.clone(), *prior)?;
    let draws = inference::run_hmc(&target, sampler)?;
    Ok(SpdeFit {
        system: Arc::clone(system),
        target,
        draws,
    })
}

/// Everything produced for one scenario.
pub struct ScenarioOutcome {
    pub scenario: String,
    pub sim: SimulatedScenario,
    pub regtps_metrics: FitMetrics,
    pub spde_metrics: FitMetrics,
}

fn scenario_spec(config: &RunConfig, n_obs: usize) -> ScenarioSpec {
    ScenarioSpec {
        kernel: config.kernel,
        sigma_e: config.scenarios.noise_sd,
        n_obs,
        grid_resolution: config.scenarios.grid_resolution,
        mesh_nodes: config.scenarios.mesh_nodes,
        domain: config.domain,
    }
}

fn scenario_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(1000 * (index as u64 + 1))
}

/// Simulate all configured scenarios and write the data files without
/// fitting anything.
pub fn run_simulate(config: &RunConfig) -> Result<()> {
    let meta = SidecarMeta {
        config_hash: config.hash()?,
        seed: config.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        notes: Vec::new(),
    };
    std::fs::create_dir_all(&config.output_dir)?;
    for (i, &n_obs) in config.scenarios.n_obs.iter().enumerate() {
        let spec = scenario_spec(config, n_obs);
        let sim = simulate_scenario(&spec, scenario_seed(config.seed, i))?;
        let dir = config.output_dir.join(format!("scenario_{}", i + 1));
        std::fs::create_dir_all(&dir)?;
        let obs_path = dir.join("observations.csv");
        write_point_values_csv(&sim.obs, &[("y", &sim.y)], &obs_path)?;
        write_sidecar(&obs_path, &meta)?;
        let truth_path = dir.join("grid_truth.csv");
        write_point_values_csv(&sim.grid, &[("truth", &sim.truth_grid)], &truth_path)?;
        write_sidecar(&truth_path, &meta)?;
        sim.mesh
            .export_csv(&dir.join("mesh_nodes.csv"), &dir.join("mesh_triangles.csv"))?;
    }
    Ok(())
}

fn fit_one_scenario(
    config: &RunConfig,
    index: usize,
    n_obs: usize,
    meta: &SidecarMeta,
) -> Result<ScenarioOutcome> {
    let scenario = format!("scenario_{}", index + 1);
    let dir = config.output_dir.join(&scenario);
    std::fs::create_dir_all(&dir)?;
    let spec = scenario_spec(config, n_obs);
    let seed = scenario_seed(config.seed, index);
    let sim = simulate_scenario(&spec, seed)?;

    let prior = match &config.priors {
        Some(p) => *p,
        None => PriorConfig::default_for_data(&sim.y, config.domain.diameter())?,
    };

    // Spline model.
    let mut sampler = config.sampler;
    sampler.seed = seed.wrapping_add(10);
    let reg = fit_regtps(&sim.obs, &sim.y, &config.kle, &prior, &sampler)?;
    let grid_design = reg.basis.design(&sim.grid);
    let reg_fields = reg.field_draws(&grid_design);
    let reg_median = pointwise_quantile(&reg_fields, 0.5);
    let regtps_metrics =
        evaluation::compute_metrics(&reg_median, &sim.truth_grid, "regtps_kle", &scenario)?;

    // SPDE baseline on the simulation mesh.
    let system = Arc::new(FemSystem::new(sim.mesh.clone())?);
    sampler.seed = seed.wrapping_add(20);
    let spde = fit_spde(&system, &sim.obs, &sim.y, &prior, &sampler)?;
    let a_grid = fem::projection_matrix(&system.mesh, &sim.grid)?;
    let spde_fields = spde.field_draws(&a_grid);
    let spde_median = pointwise_quantile(&spde_fields, 0.5);
    let spde_metrics =
        evaluation::compute_metrics(&spde_median, &sim.truth_grid, "spde", &scenario)?;

    // Artifacts (written before the convergence gate so partial results
    // survive a gate failure).
    for (name, fit_draws, param_names) in [
        (
            "regtps",
            &reg.draws,
            regtps_param_names(&reg.target),
        ),
        ("spde", &spde.draws, spde_param_names(&spde.target)),
    ] {
        let p = dir.join(format!("{name}_draws.csv"));
        inference::write_draws_csv(fit_draws, &param_names, &p)?;
        write_sidecar(&p, meta)?;
        let p = dir.join(format!("{name}_loglik.csv"));
        inference::write_loglik_csv(fit_draws, &p)?;
        write_sidecar(&p, meta)?;
    }

    let metrics_path = dir.join("metrics.csv");
    evaluation::write_metrics_csv(
        &[regtps_metrics.clone(), spde_metrics.clone()],
        &metrics_path,
    )?;
    write_sidecar(&metrics_path, meta)?;

    let spectrum = evaluation::spectrum_report(&reg.basis, reg.alpha_median())?;
    let spectrum_path = dir.join("spectrum.csv");
    evaluation::write_spectrum_csv(&spectrum, &spectrum_path)?;
    write_sidecar(&spectrum_path, meta)?;

    // Covariance comparison at the mesh nodes against the generating
    // kernel.
    let truth_cov = crate::kernels::covariance_from_kernel(&config.kernel, system.mesh.nodes())?;
    let mesh_design = reg.basis.design(system.mesh.nodes());
    let reg_cov = evaluation::kle_point_covariance(&reg.model, &mesh_design, reg.alpha_median())?;
    let reg_diff = evaluation::covariance_difference(&truth_cov, &reg_cov)?;
    let (_, rho_med, sigma_u_med) = spde.median_hyperparams();
    let (kappa, tau) = fem::hyperparam_transform(rho_med, sigma_u_med);
    let q = fem::build_precision(&system.matrices, kappa, tau)?;
    let spde_cov = evaluation::spde_node_covariance(&q)?;
    let spde_diff = evaluation::covariance_difference(&truth_cov, &spde_cov)?;
    for (name, diff) in [("regtps", &reg_diff), ("spde", &spde_diff)] {
        let p = dir.join(format!("{name}_cov_diff.csv"));
        write_matrix_csv(&diff.difference, "node_", &p)?;
        let mut m = meta.clone();
        m.notes.push(format!(
            "truth minus estimate; max_abs={:.6e} frobenius={:.6e}",
            diff.max_abs, diff.frobenius
        ));
        write_sidecar(&p, &m)?;
    }

    // Posterior predictive replicates at the observation points.
    let obs_design = reg.basis.design(&sim.obs);
    let reg_reps = inference::posterior_predictive(
        &reg.draws,
        inference::DEFAULT_REPLICATES,
        seed.wrapping_add(30),
        |x| {
            let b = &obs_design * reg.model.modes();
            &b * reg.target.coefficients(x)
        },
        |x| reg.target.noise_sd(x),
    )?;
    let a_obs = fem::projection_matrix(&system.mesh, &sim.obs)?;
    let spde_reps = inference::posterior_predictive(
        &spde.draws,
        inference::DEFAULT_REPLICATES,
        seed.wrapping_add(40),
        |x| &a_obs * spde.target.field_nodes(x),
        |x| spde.target.noise_sd(x),
    )?;
    for (name, reps) in [("regtps", &reg_reps), ("spde", &spde_reps)] {
        let p = dir.join(format!("{name}_replicates.csv"));
        let mut w = csv::Writer::from_path(&p)?;
        let mut header = vec!["replicate".to_string()];
        header.extend((0..sim.obs.len()).map(|i| format!("obs_{i}")));
        w.write_record(&header)?;
        for (r, rep) in reps.iter().enumerate() {
            let mut rec = vec![r.to_string()];
            rec.extend(rep.iter().map(|v| format!("{v:.17e}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        write_sidecar(&p, meta)?;
    }

    // Convergence gate on the hyperparameters.
    check_convergence_gate(
        &reg.draws,
        &[
            (reg.target.log_sigma_index(), "log_sigma"),
            (reg.target.log_alpha_index(), "log_alpha"),
        ],
        &format!("{scenario}/regtps"),
    )?;
    check_convergence_gate(
        &spde.draws,
        &[
            (spde.target.log_sigma_e_index(), "log_sigma_e"),
            (spde.target.log_rho_index(), "log_rho"),
            (spde.target.log_sigma_u_index(), "log_sigma_u"),
        ],
        &format!("{scenario}/spde"),
    )?;

    Ok(ScenarioOutcome {
        scenario,
        sim,
        regtps_metrics,
        spde_metrics,
    })
}

fn regtps_param_names(target: &RegTpsTarget) -> Vec<String> {
    let mut names: Vec<String> = (0..target.modes()).map(|k| format!("z_raw_{k}")).collect();
    names.push("log_sigma".into());
    names.push("log_alpha".into());
    names
}

fn spde_param_names(target: &SpdeTarget) -> Vec<String> {
    let mut names: Vec<String> = (0..target.nodes()).map(|k| format!("w_{k}")).collect();
    names.push("log_sigma_e".into());
    names.push("log_rho".into());
    names.push("log_sigma_u".into());
    names
}

/// Run every configured scenario, fit both models, and write all
/// artifacts plus a combined summary table. Scenario-level parallelism
/// is opt-in; chains always run in parallel.
pub fn run_scenarios(config: &RunConfig, parallel: bool) -> Result<Vec<ScenarioOutcome>> {
    std::fs::create_dir_all(&config.output_dir)?;
    let meta = SidecarMeta {
        config_hash: config.hash()?,
        seed: config.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        notes: Vec::new(),
    };
    let jobs: Vec<(usize, usize)> = config
        .scenarios
        .n_obs
        .iter()
        .copied()
        .enumerate()
        .collect();
    let outcomes: Result<Vec<ScenarioOutcome>> = if parallel {
        jobs.par_iter()
            .map(|&(i, n)| fit_one_scenario(config, i, n, &meta))
            .collect()
    } else {
        jobs.iter()
            .map(|&(i, n)| fit_one_scenario(config, i, n, &meta))
            .collect()
    };
    let outcomes = outcomes?;

    let mut all = Vec::new();
    for o in &outcomes {
        all.push(o.regtps_metrics.clone());
        all.push(o.spde_metrics.clone());
    }
    let summary_path = config.output_dir.join("summary.csv");
    evaluation::write_metrics_csv(&all, &summary_path)?;
    write_sidecar(&summary_path, &meta)?;
    Ok(outcomes)
}

/// Fit both models to the station data at matched complexity, write
/// prediction surfaces (square-root scale and back-transformed) and the
/// LOO comparison table.
pub fn run_station_analysis(config: &RunConfig) -> Result<()> {
    let settings = config
        .stations
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [stations] section".into()))?;
    let table = ingest_stations(&settings.path, settings.schema)?;
    if table.len() < 30 {
        return Err(Error::Data(format!(
            "station analysis needs at least 30 stations, got {}",
            table.len()
        )));
    }
    std::fs::create_dir_all(&config.output_dir)?;
    let meta = SidecarMeta {
        config_hash: config.hash()?,
        seed: config.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        notes: vec![
            "value columns on the square-root concentration scale unless suffixed _sq".into(),
            "columns with suffix _sq are back-transformed by squaring".into(),
        ],
    };
    let dir = config.output_dir.join("stations");
    std::fs::create_dir_all(&dir)?;

    // Center the transformed values. The SPDE field is zero mean, so
    // fitting the raw level would push the range parameter into its
    // prior tail; the mean is added back to every prediction below.
    let y_raw = table.values();
    let y_mean = y_raw.mean();
    let y = y_raw.map(|v| v - y_mean);
    let obs = &table.points_km;
    let domain = obs.bounds(0.05)?;
    let grid = make_grid(&domain, settings.grid_resolution)?;
    let prior = match &config.priors {
        Some(p) => *p,
        None => PriorConfig::default_for_data(&y, domain.diameter())?,
    };

    // Matched complexity: the same mode count and mesh-node target.
    let mut sampler = config.sampler;
    sampler.seed = config.seed.wrapping_add(1);
    let knots = tps::select_knots(obs, settings.complexity.min(obs.len()), sampler.seed)?;
    let basis = Arc::new(tps::build_basis(&knots)?);
    let m_trunc = settings.complexity.min(basis.basis_count());
    let model = kle::with_truncation(&basis, m_trunc)?;
    let obs_design = basis.design(obs) * model.modes();
    let target = RegTpsTarget::new(obs_design, y.clone(), model.penalty_eigvals().clone(), prior)?;
    let reg_draws = inference::run_hmc(&target, &sampler)?;
    let reg = RegTpsFit {
        basis: Arc::clone(&basis),
        model,
        target,
        draws: reg_draws,
    };

    let mesh = fem::build_mesh(&domain, settings.complexity)?;
    let system = Arc::new(FemSystem::new(mesh)?);
    sampler.seed = config.seed.wrapping_add(2);
    let spde = fit_spde(&system, obs, &y, &prior, &sampler)?;

    // Prediction surfaces with 2.5/50/97.5% quantiles, both scales.
    let grid_design = reg.basis.design(&grid);
    let a_grid = fem::projection_matrix(&system.mesh, &grid)?;
    for (name, mut fields) in [
        ("regtps", reg.field_draws(&grid_design)),
        ("spde", spde.field_draws(&a_grid)),
    ] {
        for f in &mut fields {
            f.add_scalar_mut(y_mean);
        }
        let q025 = pointwise_quantile(&fields, 0.025);
        let q50 = pointwise_quantile(&fields, 0.5);
        let q975 = pointwise_quantile(&fields, 0.975);
        let q025_sq = q025.map(|v| v * v);
        let q50_sq = q50.map(|v| v * v);
        let q975_sq = q975.map(|v| v * v);
        let p = dir.join(format!("{name}_surface.csv"));
        write_point_values_csv(
            &grid,
            &[
                ("q025", &q025),
                ("median", &q50),
                ("q975", &q975),
                ("q025_sq", &q025_sq),
                ("median_sq", &q50_sq),
                ("q975_sq", &q975_sq),
            ],
            &p,
        )?;
        write_sidecar(&p, &meta)?;
    }

    // Posterior predictive replicates at the stations.
    let station_design = reg.basis.design(obs);
    let reg_reps = inference::posterior_predictive(
        &reg.draws,
        inference::DEFAULT_REPLICATES,
        config.seed.wrapping_add(3),
        |x| {
            let b = &station_design * reg.model.modes();
            &b * reg.target.coefficients(x)
        },
        |x| reg.target.noise_sd(x),
    )?;
    let a_obs = fem::projection_matrix(&system.mesh, obs)?;
    let spde_reps = inference::posterior_predictive(
        &spde.draws,
        inference::DEFAULT_REPLICATES,
        config.seed.wrapping_add(4),
        |x| &a_obs * spde.target.field_nodes(x),
        |x| spde.target.noise_sd(x),
    )?;
    for (name, reps) in [("regtps", &reg_reps), ("spde", &spde_reps)] {
        let p = dir.join(format!("{name}_replicates.csv"));
        let mut w = csv::Writer::from_path(&p)?;
        let mut header = vec!["replicate".to_string()];
        header.extend(table.records.iter().map(|r| r.id.clone()));
        w.write_record(&header)?;
        for (r, rep) in reps.iter().enumerate() {
            let mut rec = vec![r.to_string()];
            rec.extend(rep.iter().map(|v| format!("{:.17e}", v + y_mean)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        write_sidecar(&p, &meta)?;
    }

    // LOO comparison table.
    let reg_loo = evaluation::loo_elpd(&reg.draws.pointwise_loglik)?;
    let spde_loo = evaluation::loo_elpd(&spde.draws.pointwise_loglik)?;
    let rows = evaluation::loo_table(&[
        ("regtps_kle".to_string(), reg_loo),
        ("spde".to_string(), spde_loo),
    ])?;
    let p = dir.join("loo_comparison.csv");
    evaluation::write_loo_csv(&rows, &p)?;
    write_sidecar(&p, &meta)?;

    check_convergence_gate(
        &reg.draws,
        &[
            (reg.target.log_sigma_index(), "log_sigma"),
            (reg.target.log_alpha_index(), "log_alpha"),
        ],
        "stations/regtps",
    )?;
    check_convergence_gate(
        &spde.draws,
        &[
            (spde.target.log_sigma_e_index(), "log_sigma_e"),
            (spde.target.log_rho_index(), "log_rho"),
            (spde.target.log_sigma_u_index(), "log_sigma_u"),
        ],
        "stations/spde",
    )?;
    Ok(())
}

/// Non-sampling diagnostics from the configuration alone: the penalty
/// spectrum report and covariance curves over a sweep of smoothing
/// weights.
pub fn run_report(config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&config.output_dir)?;
    let meta = SidecarMeta {
        config_hash: config.hash()?,
        seed: config.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        notes: Vec::new(),
    };
    let dir = config.output_dir.join("report");
    std::fs::create_dir_all(&dir)?;

    // A representative scenario basis: knots from the first scenario's
    // observation draw.
    let n_obs = config.scenarios.n_obs[0];
    let spec = scenario_spec(config, n_obs);
    let sim = simulate_scenario(&spec, scenario_seed(config.seed, 0))?;
    let knots = tps::select_knots(&sim.obs, 200, config.seed)?;
    let basis = tps::build_basis(&knots)?;

    let spectrum = evaluation::spectrum_report(&basis, config.kle.alpha_ref)?;
    let p = dir.join("spectrum.csv");
    evaluation::write_spectrum_csv(&spectrum, &p)?;
    write_sidecar(&p, &meta)?;

    // Covariance curves from the eigenvalue-grid spectral density.
    let mut curves = Vec::new();
    let d_max = config.domain.diameter();
    for alpha in [10.0, 1.0, 0.1] {
        let spectrum = crate::spectral::spectrum_from_penalty(basis.eigvals().as_slice(), alpha)?;
        let distances: Vec<f64> = (0..200).map(|i| d_max * i as f64 / 199.0).collect();
        let curve = crate::spectral::inverse_hankel(&spectrum, &distances)?;
        curves.push((alpha, curve));
    }
    let p = dir.join("covariance_curves.csv");
    crate::spectral::write_covariance_csv(&p, &curves)?;
    write_sidecar(&p, &meta)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sample_config(dir: &Path) -> RunConfig {
        RunConfig {
            output_dir: dir.to_path_buf(),
            seed: 7,
            domain: BoundingDomain::unit_square(),
            kernel: KernelSpec::matern(1.0, 0.3, 1.5).unwrap(),
            scenarios: ScenarioSettings {
                n_obs: vec![40],
                grid_resolution: 6,
                mesh_nodes: 25,
                noise_sd: 0.2,
            },
            kle: KleSettings::default(),
            sampler: SamplerSettings {
                chains: 4,
                warmup: 800,
                draws: 500,
                seed: 0,
                leapfrog_base: 96,
            },
            priors: None,
            stations: None,
        }
    }

    #[test]
    fn config_round_trip_identity() {
        let cfg = sample_config(Path::new("/tmp/regtps_cfg"));
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
        let again = RunConfig::parse(&back.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let cfg = sample_config(Path::new("/tmp/regtps_cfg"));
        let mut text = cfg.to_toml().unwrap();
        text.push_str("\nunknown_key = 1\n");
        let err = RunConfig::parse(&text).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn config_rejects_bad_kernel() {
        let text = r#"
output_dir = "/tmp/x"
seed = 1
[kernel]
family = "matern"
sigma_u = 1.0
rho = 0.3
"#;
        let err = RunConfig::parse(text).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    fn temp_dir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("regtps_io_tests").join(name);
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn ingest_hourly_means_and_transforms() {
        let dir = temp_dir("hourly");
        let path = dir.join("stations.csv");
        std::fs::write(
            &path,
            "station_id,lon,lat,timestamp,value\n\
             a,10.0,50.0,2023-01-01T00:00,10\n\
             a,10.0,50.0,2023-01-01T01:00,-1\n\
             a,10.0,50.0,2023-01-01T02:00,30\n\
             b,11.0,51.0,2023-01-01T00:00,-5\n\
             c,10.5,50.5,2023-01-01T00:00,9\n",
        )
        .unwrap();
        let table = ingest_stations(&path, StationSchema::Hourly).unwrap();
        assert_eq!(table.len(), 2);
        assert_eq!(table.dropped, 1);
        let a = &table.records[0];
        assert_eq!(a.id, "a");
        assert_abs_diff_eq!(a.value_sqrt, 20.0_f64.sqrt(), epsilon = 1e-12);
        assert_eq!(a.n_records, 3);
        assert_eq!(a.n_missing, 1);
        assert_abs_diff_eq!(table.records[1].value_sqrt, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn ingest_projection_centered_in_km() {
        let dir = temp_dir("proj");
        let path = dir.join("stations.csv");
        std::fs::write(
            &path,
            "station_id,lon,lat,value\n\
             w,10.0,50.0,4\n\
             e,11.0,50.0,9\n",
        )
        .unwrap();
        let table = ingest_stations(&path, StationSchema::Annual).unwrap();
        let pts = table.points_km.points();
        // Centroid maps to the origin, so the two stations sit
        // symmetrically about it.
        assert_abs_diff_eq!(pts[0].s1 + pts[1].s1, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(pts[0].s2, 0.0, epsilon = 1e-9);
        // One degree of longitude at 50N is about 71.7 km.
        let sep = pts[0].distance(&pts[1]);
        assert!((sep - 71.7).abs() < 1.0, "separation {sep}");
    }

    #[test]
    fn ingest_missing_column_is_schema_error() {
        let dir = temp_dir("schema");
        let path = dir.join("stations.csv");
        std::fs::write(&path, "station_id,lon,value\na,10,4\n").unwrap();
        let err = ingest_stations(&path, StationSchema::Annual).unwrap_err();
        assert!(err.to_string().contains("lat"));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn ingest_all_missing_is_data_error() {
        let dir = temp_dir("empty");
        let path = dir.join("stations.csv");
        std::fs::write(&path, "station_id,lon,lat,value\na,10,50,-1\n").unwrap();
        let err = ingest_stations(&path, StationSchema::Annual).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn ingest_duplicate_annual_ids_rejected() {
        let dir = temp_dir("dup");
        let path = dir.join("stations.csv");
        std::fs::write(&path, "station_id,lon,lat,value\na,10,50,4\na,10,50,5\n").unwrap();
        assert!(ingest_stations(&path, StationSchema::Annual).is_err());
    }

    #[test]
    fn scenario_pipeline_smoke_and_determinism() {
        let dir = temp_dir("pipeline");
        let config = sample_config(&dir);
        let outcomes = run_scenarios(&config, false).unwrap();
        assert_eq!(outcomes.len(), 1);
        let sdir = dir.join("scenario_1");
        for artifact in [
            "metrics.csv",
            "spectrum.csv",
            "regtps_draws.csv",
            "spde_draws.csv",
            "regtps_loglik.csv",
            "spde_loglik.csv",
            "regtps_cov_diff.csv",
            "spde_cov_diff.csv",
            "regtps_replicates.csv",
            "spde_replicates.csv",
        ] {
            let p = sdir.join(artifact);
            assert!(p.exists(), "missing {artifact}");
            assert!(p.with_extension("meta.json").exists(), "missing sidecar for {artifact}");
        }
        assert!(dir.join("summary.csv").exists());
        let first = std::fs::read(dir.join("summary.csv")).unwrap();

        // Rerun: byte-identical outputs.
        let dir2 = temp_dir("pipeline2");
        let mut config2 = sample_config(&dir2);
        config2.output_dir = dir2.clone();
        run_scenarios(&config2, false).unwrap();
        let second = std::fs::read(dir2.join("summary.csv")).unwrap();
        assert_eq!(first, second);
        let d1 = std::fs::read(dir.join("scenario_1/regtps_draws.csv")).unwrap();
        let d2 = std::fs::read(dir2.join("scenario_1/regtps_draws.csv")).unwrap();
        assert_eq!(d1, d2);
    }

    fn synthetic_station_csv(path: &Path, n: usize) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let mut text = String::from("station_id,lon,lat,value\n");
        for i in 0..n {
            let lon = 9.0 + 2.0 * rng.gen::<f64>();
            let lat = 49.0 + 2.0 * rng.gen::<f64>();
            // Smooth spatial signal plus noise, on the concentration scale.
            let root = 4.0
                + 1.2 * (4.0 * (lon - 10.0)).sin()
                + 0.8 * (4.0 * (lat - 50.0)).cos()
                + 0.3 * (rng.gen::<f64>() - 0.5);
            let value = root * root;
            text.push_str(&format!("s{i},{lon},{lat},{value}\n"));
        }
        std::fs::write(path, text).unwrap();
    }

    #[test]
    fn station_analysis_smoke() {
        let dir = temp_dir("stations_run");
        let csv_path = dir.join("stations.csv");
        synthetic_station_csv(&csv_path, 40);
        let mut config = sample_config(&dir);
        config.sampler.warmup = 1000;
        config.sampler.draws = 2000;
        config.sampler.leapfrog_base = 192;
        config.stations = Some(StationSettings {
            path: csv_path,
            schema: StationSchema::Annual,
            complexity: 64,
            grid_resolution: 6,
        });
        run_station_analysis(&config).unwrap();
        let sdir = dir.join("stations");
        for artifact in [
            "regtps_surface.csv",
            "spde_surface.csv",
            "regtps_replicates.csv",
            "spde_replicates.csv",
            "loo_comparison.csv",
        ] {
            assert!(sdir.join(artifact).exists(), "missing {artifact}");
        }
        // Quantile ordering on both scales, and back-transform equals the
        // square of the root-scale columns.
        let mut rdr = csv::Reader::from_path(sdir.join("regtps_surface.csv")).unwrap();
        for rec in rdr.deserialize::<std::collections::HashMap<String, f64>>() {
            let rec = rec.unwrap();
            assert!(rec["q025"] <= rec["median"] && rec["median"] <= rec["q975"]);
            assert!(rec["q025_sq"] >= 0.0 && rec["q975_sq"] >= 0.0);
            assert_abs_diff_eq!(rec["median_sq"], rec["median"] * rec["median"], epsilon = 1e-9);
        }
        // Table convention: reference row is exactly (0, 0).
        let mut rdr = csv::Reader::from_path(sdir.join("loo_comparison.csv")).unwrap();
        let first = rdr.records().next().unwrap().unwrap();
        assert_eq!(first[2].parse::<f64>().unwrap(), 0.0);
        assert_eq!(first[3].parse::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn report_emits_spectrum_and_curves() {
        let dir = temp_dir("report");
        let config = sample_config(&dir);
        run_report(&config).unwrap();
        assert!(dir.join("report/spectrum.csv").exists());
        assert!(dir.join("report/covariance_curves.csv").exists());
    }

    #[test]
    fn simulate_emits_data_files() {
        let dir = temp_dir("simulate");
        let config = sample_config(&dir);
        run_simulate(&config).unwrap();
        let sdir = dir.join("scenario_1");
        for artifact in [
            "observations.csv",
            "grid_truth.csv",
            "mesh_nodes.csv",
            "mesh_triangles.csv",
        ] {
            assert!(sdir.join(artifact).exists(), "missing {artifact}");
        }
        let mut rdr = csv::Reader::from_path(sdir.join("observations.csv")).unwrap();
        assert_eq!(rdr.records().count(), 40);
    }
}
