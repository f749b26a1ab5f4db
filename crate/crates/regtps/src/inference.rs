//! Log posterior densities with analytic gradients for both spatial
//! models, their hyperpriors, a self-contained multinomial HMC sampler
//! with dual-averaging step-size and diagonal mass adaptation, and
//! convergence diagnostics (split R-hat, bulk ESS).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::CscMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::FemSystem;

/// Energy error above which a trajectory is declared divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

/// Default posterior predictive replicate count.
pub const DEFAULT_REPLICATES: usize = 100;

/// A differentiable unnormalized log density. `logpost_grad` returns
/// `None` at numerically bad points; the sampler treats those as
/// divergent rather than erroring.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn logpost_grad(&self, x: &DVector<f64>) -> Option<(f64, DVector<f64>)>;

    /// Per-observation log likelihood at `x`, used for LOO. Targets
    /// without observations return an empty vector.
    fn pointwise_loglik(&self, _x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }

    fn n_obs(&self) -> usize {
        0
    }
}

/// Hyperprior configuration shared by both models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    /// Lognormal prior on the smoothing weight: `log alpha ~ N(mu, sigma^2)`.
    pub alpha_mu: f64,
    pub alpha_sigma: f64,
    /// Exponential rate for the spline model noise SD.
    pub sigma_rate: f64,
    /// Half-Cauchy scale for the SPDE model noise SD.
    pub sigma_e_scale: f64,
    /// Range calibration: `Pr(rho < rho0) = p_rho`.
    pub rho0: f64,
    pub p_rho: f64,
    /// Marginal SD calibration: `Pr(sigma_u > sigma0) = p_sigma`.
    pub sigma0: f64,
    pub p_sigma: f64,
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_sigma", self.alpha_sigma),
            ("sigma_rate", self.sigma_rate),
            ("sigma_e_scale", self.sigma_e_scale),
            ("rho0", self.rho0),
            ("sigma0", self.sigma0),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, p) in [("p_rho", self.p_rho), ("p_sigma", self.p_sigma)] {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1), got {p}")));
            }
        }
        Ok(())
    }

    /// Data-driven defaults: noise scales from the sample SD of `y`,
    /// range target at a tenth of the domain diameter, 5% tails.
    pub fn default_for_data(y: &DVector<f64>, domain_diameter: f64) -> Result<PriorConfig> {
        if y.len() < 2 {
            return Err(Error::invalid("need at least two observations to set priors"));
        }
        let mean = y.mean();
        let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (y.len() - 1) as f64).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        let cfg = PriorConfig {
            alpha_mu: 0.0,
            alpha_sigma: 2.0,
            sigma_rate: -(0.05_f64.ln()) / sd,
            sigma_e_scale: sd,
            rho0: 0.1 * domain_diameter,
            p_rho: 0.05,
            sigma0: sd,
            p_sigma: 0.05,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Inverse-exponential rate for the range prior.
    pub fn lambda_rho(&self) -> f64 {
        -self.p_rho.ln() * self.rho0
    }

    /// Exponential rate for the marginal SD prior.
    pub fn lambda_sigma_u(&self) -> f64 {
        -self.p_sigma.ln() / self.sigma0
    }
}

/// Natural-scale density of the penalized-complexity range prior,
/// `pi(rho) = lambda rho^-2 exp(-lambda / rho)`.
pub fn pc_range_density(rho: f64, prior: &PriorConfig) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(Error::invalid(format!("rho must be positive, got {rho}")));
    }
    let l = prior.lambda_rho();
    Ok(l / (rho * rho) * (-l / rho).exp())
}

/// Joint log density of the penalized-complexity priors on the range and
/// marginal SD, on the natural scale.
pub fn pc_prior_logdensity(rho: f64, sigma_u: f64, prior: &PriorConfig) -> Result<f64> {
    if !(rho > 0.0) || !(sigma_u > 0.0) {
        return Err(Error::invalid(format!(
            "rho and sigma_u must be positive, got ({rho}, {sigma_u})"
        )));
    }
    let lr = prior.lambda_rho();
    let ls = prior.lambda_sigma_u();
    Ok(lr.ln() - 2.0 * rho.ln() - lr / rho + ls.ln() - ls * sigma_u)
}

/// Spline-model target over `(z_raw, log sigma, log alpha)`.
///
/// `design` is the observation-space basis (rows index observations,
/// columns the retained decorrelated modes) and `penalty_eigvals` the
/// matching bending-energy eigenvalues, zero for the polynomial modes.
/// An empty `y` is allowed and reduces the target to the prior, which is
/// how the prior-sampling identity is checked.
#[derive(Debug, Clone)]
pub struct RegTpsTarget {
    design: DMatrix<f64>,
    y: DVector<f64>,
    penalty_eigvals: DVector<f64>,
    prior: PriorConfig,
}

impl RegTpsTarget {
    pub fn new(
        design: DMatrix<f64>,
        y: DVector<f64>,
        penalty_eigvals: DVector<f64>,
        prior: PriorConfig,
    ) -> Result<RegTpsTarget> {
        prior.validate()?;
        if design.nrows() != y.len() {
            return Err(Error::dim("design rows", y.len(), design.nrows()));
        }
        if design.ncols() != penalty_eigvals.len() {
            return Err(Error::dim(
                "penalty eigenvalues",
                design.ncols(),
                penalty_eigvals.len(),
            ));
        }
        if penalty_eigvals.iter().any(|l| *l < 0.0) {
            return Err(Error::invalid("penalty eigenvalues must be nonnegative"));
        }
        Ok(RegTpsTarget {
            design,
            y,
            penalty_eigvals,
            prior,
        })
    }

    pub fn modes(&self) -> usize {
        self.design.ncols()
    }

    /// Index of `log sigma` within the parameter vector.
    pub fn log_sigma_index(&self) -> usize {
        self.modes()
    }

    /// Index of `log alpha` within the parameter vector.
    pub fn log_alpha_index(&self) -> usize {
        self.modes() + 1
    }

    /// Non-centered scales `1 / sqrt(1 + alpha lambda_k)`.
    pub fn scales(&self, log_alpha: f64) -> DVector<f64> {
        let alpha = log_alpha.exp();
        self.penalty_eigvals
            .map(|l| 1.0 / (1.0 + alpha * l).sqrt())
    }

    /// Mode coefficients implied by a parameter vector.
    pub fn coefficients(&self, x: &DVector<f64>) -> DVector<f64> {
        let scales = self.scales(x[self.log_alpha_index()]);
        DVector::from_fn(self.modes(), |k, _| scales[k] * x[k])
    }

    /// Field values at the design points for a parameter vector.
    pub fn field(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.design * self.coefficients(x)
    }

    pub fn noise_sd(&self, x: &DVector<f64>) -> f64 {
        x[self.log_sigma_index()].exp()
    }
}

impl LogDensity for RegTpsTarget {
    fn dim(&self) -> usize {
        self.modes() + 2
    }

    fn logpost_grad(&self, x: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        let m = self.modes();
        let n = self.y.len();
        let log_sigma = x[m];
        let log_alpha = x[m + 1];
        let sigma = log_sigma.exp();
        let alpha = log_alpha.exp();
        if !sigma.is_finite() || !alpha.is_finite() || sigma == 0.0 {
            return None;
        }
        let z_raw = x.rows(0, m).into_owned();
        let scales = self.scales(log_alpha);
        let z = scales.component_mul(&z_raw);
        let r = &self.y - &self.design * &z;
        let rss = r.norm_squared();
        let s2 = sigma * sigma;

        let lp_lik = -(n as f64) * log_sigma - 0.5 * rss / s2;
        let lp_z = -0.5 * z_raw.norm_squared();
        // Exponential prior on sigma in log parameterization.
        let lp_sigma = -self.prior.sigma_rate * sigma + log_sigma;
        let dev = (log_alpha - self.prior.alpha_mu) / self.prior.alpha_sigma;
        let lp_alpha = -0.5 * dev * dev;
        let lp = lp_lik + lp_z + lp_sigma + lp_alpha;
        if !lp.is_finite() {
            return None;
        }

        let btr = self.design.transpose() * &r / s2;
        let mut grad = DVector::zeros(m + 2);
        for k in 0..m {
            grad[k] = scales[k] * btr[k] - z_raw[k];
        }
        grad[m] = -(n as f64) + rss / s2 - self.prior.sigma_rate * sigma + 1.0;
        // d scale_k / d log alpha = -alpha lambda_k scale_k^3 / 2.
        let mut g_alpha = 0.0;
        for k in 0..m {
            let ds = -0.5 * alpha * self.penalty_eigvals[k] * scales[k].powi(3);
            g_alpha += btr[k] * z_raw[k] * ds;
        }
        grad[m + 1] = g_alpha - dev / self.prior.alpha_sigma;
        if grad.iter().any(|g| !g.is_finite()) {
            return None;
        }
        Some((lp, grad))
    }

    fn pointwise_loglik(&self, x: &DVector<f64>) -> DVector<f64> {
        let sigma = self.noise_sd(x);
        let r = &self.y - self.field(x);
        let c = -0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
        r.map(|ri| c - 0.5 * ri * ri / (sigma * sigma))
    }

    fn n_obs(&self) -> usize {
        self.y.len()
    }
}

/// SPDE-model target over `(w, log sigma_e, log rho, log sigma_u)`,
/// fully non-centered: `w` is a standard normal vector and the field is
/// rebuilt as `u = sigma_u sqrt(4 pi) C^{-1/2} V diag(kappa/(kappa^2+gamma)) w`
/// so that `u` has the intended precision `tau^2 Q0(kappa)`. This keeps
/// the latent prior independent of the hyperparameters, which the
/// sampler needs to move `log rho` without dragging the whole field.
#[derive(Clone)]
pub struct SpdeTarget {
    system: Arc<FemSystem>,
    a_obs: CscMatrix<f64>,
    a_obs_t: CscMatrix<f64>,
    y: DVector<f64>,
    prior: PriorConfig,
}

impl SpdeTarget {
    pub fn new(
        system: Arc<FemSystem>,
        a_obs: CscMatrix<f64>,
        y: DVector<f64>,
        prior: PriorConfig,
    ) -> Result<SpdeTarget> {
        prior.validate()?;
        if a_obs.nrows() != y.len() {
            return Err(Error::dim("projection rows", y.len(), a_obs.nrows()));
        }
        if a_obs.ncols() != system.node_count() {
            return Err(Error::dim(
                "projection columns",
                system.node_count(),
                a_obs.ncols(),
            ));
        }
        let a_obs_t = a_obs.transpose();
        Ok(SpdeTarget {
            system,
            a_obs,
            a_obs_t,
            y,
            prior,
        })
    }

    pub fn nodes(&self) -> usize {
        self.system.node_count()
    }

    pub fn log_sigma_e_index(&self) -> usize {
        self.nodes()
    }

    pub fn log_rho_index(&self) -> usize {
        self.nodes() + 1
    }

    pub fn log_sigma_u_index(&self) -> usize {
        self.nodes() + 2
    }

    fn unpack(&self, x: &DVector<f64>) -> (DVector<f64>, f64, f64, f64) {
        let n = self.nodes();
        (
            x.rows(0, n).into_owned(),
            x[n].exp(),
            x[n + 1].exp(),
            x[n + 2].exp(),
        )
    }

    /// Latent field at the mesh nodes.
    pub fn field_nodes(&self, x: &DVector<f64>) -> DVector<f64> {
        let (w, _, rho, sigma_u) = self.unpack(x);
        let (kappa, _) = crate::fem::hyperparam_transform(rho, sigma_u);
        let k2 = kappa * kappa;
        let c0 = sigma_u * (4.0 * std::f64::consts::PI).sqrt();
        let v = DVector::from_fn(self.nodes(), |i, _| {
            kappa / (k2 + self.system.gamma[i]) * w[i]
        });
        let vu = &self.system.eigvecs * v;
        c0 * vu.component_div(&self.system.sqrt_mass)
    }

    pub fn field_obs(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a_obs * self.field_nodes(x)
    }

    pub fn noise_sd(&self, x: &DVector<f64>) -> f64 {
        x[self.log_sigma_e_index()].exp()
    }
}

impl LogDensity for SpdeTarget {
    fn dim(&self) -> usize {
        self.nodes() + 3
    }

    fn logpost_grad(&self, x: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        let n_nodes = self.nodes();
        let n = self.y.len();
        let (w, sigma_e, rho, sigma_u) = self.unpack(x);
        if ![sigma_e, rho, sigma_u].iter().all(|v| v.is_finite() && *v > 0.0) {
            return None;
        }
        let (kappa, _) = crate::fem::hyperparam_transform(rho, sigma_u);
        let k2 = kappa * kappa;
        let c0 = sigma_u * (4.0 * std::f64::consts::PI).sqrt();

        // Scale factors e_i = kappa/(kappa^2 + gamma_i) and their
        // log-rho derivative factor.
        let mut e = DVector::zeros(n_nodes);
        let mut v = DVector::zeros(n_nodes);
        let mut v_rho = DVector::zeros(n_nodes);
        for i in 0..n_nodes {
            let fac = k2 + self.system.gamma[i];
            e[i] = kappa / fac;
            v[i] = e[i] * w[i];
            // d e_i / d log rho = e_i (kappa^2 - gamma_i)/(kappa^2 + gamma_i)
            // via d kappa / d log rho = -kappa.
            v_rho[i] = v[i] * (k2 - self.system.gamma[i]) / fac;
        }
        let inv_sqrt_mass = self.system.sqrt_mass.map(|m| 1.0 / m);
        let u = c0 * (&self.system.eigvecs * v).component_mul(&inv_sqrt_mass);
        let f = &self.a_obs * &u;
        let r = &self.y - &f;
        let rss = r.norm_squared();
        let se2 = sigma_e * sigma_e;

        let lr = self.prior.lambda_rho();
        let ls = self.prior.lambda_sigma_u();
        let lp_lik = -(n as f64) * sigma_e.ln() - 0.5 * rss / se2;
        let lp_w = -0.5 * w.norm_squared();
        // Half-Cauchy on sigma_e, PC priors on rho and sigma_u, all in
        // log parameterization.
        let s = self.prior.sigma_e_scale;
        let lp_sigma_e = -(1.0 + se2 / (s * s)).ln() + sigma_e.ln();
        let lp_rho = -rho.ln() - lr / rho;
        let lp_sigma_u = -ls * sigma_u + sigma_u.ln();
        let lp = lp_lik + lp_w + lp_sigma_e + lp_rho + lp_sigma_u;
        if !lp.is_finite() {
            return None;
        }

        let atr = &self.a_obs_t * &r / se2;
        let vt_atr = self.system.eigvecs.transpose() * atr.component_mul(&inv_sqrt_mass);
        let mut grad = DVector::zeros(self.dim());
        for i in 0..n_nodes {
            grad[i] = c0 * e[i] * vt_atr[i] - w[i];
        }
        grad[n_nodes] = -(n as f64) + rss / se2 - 2.0 * se2 / (s * s + se2) + 1.0;
        let du_rho = c0 * (&self.system.eigvecs * v_rho).component_mul(&inv_sqrt_mass);
        grad[n_nodes + 1] = atr.dot(&du_rho) - 1.0 + lr / rho;
        // u scales linearly with sigma_u.
        grad[n_nodes + 2] = atr.dot(&u) - ls * sigma_u + 1.0;
        if grad.iter().any(|g| !g.is_finite()) {
            return None;
        }
        Some((lp, grad))
    }

    fn pointwise_loglik(&self, x: &DVector<f64>) -> DVector<f64> {
        let sigma_e = self.noise_sd(x);
        let r = &self.y - self.field_obs(x);
        let c = -0.5 * (2.0 * std::f64::consts::PI * sigma_e * sigma_e).ln();
        r.map(|ri| c - 0.5 * ri * ri / (sigma_e * sigma_e))
    }

    fn n_obs(&self) -> usize {
        self.y.len()
    }
}

/// Sampler configuration. Defaults: 4 chains, 1000 warmup, 1000 draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSettings {
    pub chains: usize,
    pub warmup: usize,
    pub draws: usize,
    pub seed: u64,
    /// Base leapfrog path length; each trajectory jitters it by a factor
    /// uniform on [0.5, 1.5].
    pub leapfrog_base: usize,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings {
            chains: 4,
            warmup: 1000,
            draws: 1000,
            seed: 0,
            leapfrog_base: 24,
        }
    }
}

/// One chain's post-warmup output.
#[derive(Debug, Clone)]
pub struct ChainDraws {
    pub params: Vec<DVector<f64>>,
    pub logp: Vec<f64>,
    pub divergent: Vec<bool>,
    pub accept: Vec<f64>,
    pub step_size: f64,
    pub warmup_divergences: usize,
}

/// All chains plus the pointwise log-likelihood matrix
/// (rows: chain-major pooled draws; columns: observations).
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub chains: Vec<ChainDraws>,
    pub pointwise_loglik: DMatrix<f64>,
    pub dim: usize,
}

impl PosteriorDraws {
    pub fn total_draws(&self) -> usize {
        self.chains.iter().map(|c| c.params.len()).sum()
    }

    pub fn divergence_count(&self) -> usize {
        self.chains
            .iter()
            .map(|c| c.divergent.iter().filter(|d| **d).count())
            .sum()
    }

    /// Pooled draws in chain-major order, one row per draw.
    pub fn pooled(&self) -> DMatrix<f64> {
        let total = self.total_draws();
        let mut out = DMatrix::zeros(total, self.dim);
        let mut row = 0;
        for chain in &self.chains {
            for p in &chain.params {
                out.row_mut(row).copy_from(&p.transpose());
                row += 1;
            }
        }
        out
    }

    /// One coordinate as per-chain series, for diagnostics.
    pub fn coordinate_chains(&self, coord: usize) -> Vec<Vec<f64>> {
        self.chains
            .iter()
            .map(|c| c.params.iter().map(|p| p[coord]).collect())
            .collect()
    }

    /// Column-wise median of the pooled draws.
    pub fn median(&self) -> DVector<f64> {
        let pooled = self.pooled();
        DVector::from_fn(self.dim, |j, _| {
            let mut col: Vec<f64> = pooled.column(j).iter().copied().collect();
            col.sort_by(|a, b| a.total_cmp(b));
            let n = col.len();
            if n % 2 == 1 {
                col[n / 2]
            } else {
                0.5 * (col[n / 2 - 1] + col[n / 2])
            }
        })
    }
}

struct DualAveraging {
    mu: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    t: f64,
}

impl DualAveraging {
    const TARGET: f64 = 0.8;
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps0: f64) -> Self {
        DualAveraging {
            mu: (10.0 * eps0).ln(),
            log_eps: eps0.ln(),
            log_eps_bar: 0.0,
            h_bar: 0.0,
            t: 0.0,
        }
    }

    fn update(&mut self, accept: f64) {
        self.t += 1.0;
        let frac = 1.0 / (self.t + Self::T0);
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (Self::TARGET - accept);
        self.log_eps = self.mu - self.t.sqrt() / Self::GAMMA * self.h_bar;
        let eta = self.t.powf(-Self::KAPPA);
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar;
    }

    fn current(&self) -> f64 {
        self.log_eps.exp()
    }

    fn averaged(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

struct State {
    x: DVector<f64>,
    logp: f64,
    grad: DVector<f64>,
}

fn leapfrog(
    target: &dyn LogDensity,
    state: &State,
    p: &mut DVector<f64>,
    eps: f64,
    inv_mass: &DVector<f64>,
) -> Option<State> {
    let mut p_half = &*p + 0.5 * eps * &state.grad;
    let x_new = &state.x + eps * inv_mass.component_mul(&p_half);
    let (logp, grad) = target.logpost_grad(&x_new)?;
    p_half += 0.5 * eps * &grad;
    *p = p_half;
    Some(State {
        x: x_new,
        logp,
        grad,
    })
}

fn kinetic(p: &DVector<f64>, inv_mass: &DVector<f64>) -> f64 {
    0.5 * p.component_mul(inv_mass).dot(p)
}

/// One multinomial HMC transition. The trajectory is placed around the
/// current state with a uniformly random backward/forward split, then a
/// state is drawn with weight proportional to its Boltzmann factor.
fn transition(
    target: &dyn LogDensity,
    current: &mut State,
    rng: &mut ChaCha8Rng,
    eps: f64,
    inv_mass: &DVector<f64>,
    leapfrog_base: usize,
) -> (bool, f64) {
    let d = target.dim();
    let p0 = DVector::from_fn(d, |i, _| {
        let xi: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        xi / inv_mass[i].sqrt()
    });
    let jitter = 0.5 + rng.gen::<f64>();
    let total_steps = ((leapfrog_base as f64 * jitter).round() as usize).max(1);
    let backward = rng.gen_range(0..=total_steps);
    let h0 = -current.logp + kinetic(&p0, inv_mass);

    let mut states: Vec<(DVector<f64>, f64, DVector<f64>, f64)> = Vec::with_capacity(total_steps);
    let mut divergent = false;
    let mut accept_sum = 0.0;
    for (dir_steps, sign) in [(backward, -1.0), (total_steps - backward, 1.0)] {
        let mut p = &p0 * sign;
        let mut here = State {
            x: current.x.clone(),
            logp: current.logp,
            grad: current.grad.clone(),
        };
        for _ in 0..dir_steps {
            match leapfrog(target, &here, &mut p, eps, inv_mass) {
                Some(next) => {
                    let h = -next.logp + kinetic(&p, inv_mass);
                    if !h.is_finite() || h - h0 > DIVERGENCE_THRESHOLD {
                        divergent = true;
                        break;
                    }
                    accept_sum += (h0 - h).exp().min(1.0);
                    states.push((next.x.clone(), next.logp, next.grad.clone(), h));
                    here = next;
                }
                None => {
                    divergent = true;
                    break;
                }
            }
        }
        if divergent {
            break;
        }
    }
    let accept = accept_sum / total_steps as f64;
    if divergent {
        return (true, accept);
    }
    // Multinomial selection over the trajectory, initial state included.
    let mut weights = Vec::with_capacity(states.len() + 1);
    weights.push(1.0);
    for s in &states {
        weights.push((h0 - s.3).exp());
    }
    let total: f64 = weights.iter().sum();
    let mut pick = rng.gen::<f64>() * total;
    let mut chosen = 0;
    for (i, w) in weights.iter().enumerate() {
        pick -= w;
        if pick <= 0.0 {
            chosen = i;
            break;
        }
    }
    if chosen > 0 {
        let (x, logp, grad, _) = states.swap_remove(chosen - 1);
        current.x = x;
        current.logp = logp;
        current.grad = grad;
    }
    (false, accept)
}

fn initial_step_size(
    target: &dyn LogDensity,
    state: &State,
    rng: &mut ChaCha8Rng,
    inv_mass: &DVector<f64>,
) -> f64 {
    let d = target.dim();
    let mut eps = 0.1;
    let p0 = DVector::from_fn(d, |i, _| {
        let xi: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        xi / inv_mass[i].sqrt()
    });
    let h0 = -state.logp + kinetic(&p0, inv_mass);
    let ratio_at = |eps: f64, rng_p: &DVector<f64>| -> f64 {
        let mut p = rng_p.clone();
        match leapfrog(target, state, &mut p, eps, inv_mass) {
            Some(next) => {
                let h = -next.logp + kinetic(&p, inv_mass);
                (h0 - h).exp()
            }
            None => 0.0,
        }
    };
    let first = ratio_at(eps, &p0);
    let grow = first > 0.5;
    for _ in 0..50 {
        eps *= if grow { 2.0 } else { 0.5 };
        let a = ratio_at(eps, &p0);
        if (grow && a <= 0.5) || (!grow && a >= 0.5) {
            break;
        }
        if eps < 1e-10 || eps > 1e6 {
            break;
        }
    }
    eps.clamp(1e-10, 1e6)
}

fn run_chain(
    target: &dyn LogDensity,
    settings: &SamplerSettings,
    chain_id: usize,
) -> Result<ChainDraws> {
    let d = target.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    rng.set_stream(chain_id as u64 + 1);

    // Random start near the origin; retry a few times if the density is
    // unusable there.
    let mut state = None;
    for attempt in 0..20 {
        let spread = 0.5 + 0.5 * attempt as f64 / 20.0;
        let x = DVector::from_fn(d, |_, _| (rng.gen::<f64>() * 2.0 - 1.0) * spread);
        if let Some((logp, grad)) = target.logpost_grad(&x) {
            state = Some(State { x, logp, grad });
            break;
        }
    }
    let mut state = state.ok_or_else(|| {
        Error::Sampling(format!(
            "chain {chain_id}: could not find a usable starting point"
        ))
    })?;

    let mut inv_mass = DVector::from_element(d, 1.0);
    let eps0 = initial_step_size(target, &state, &mut rng, &inv_mass);
    let mut da = DualAveraging::new(eps0);

    let warmup = settings.warmup;
    let collect_start = warmup / 2;
    let collect_end = (9 * warmup) / 10;
    let mut acc_x = DVector::zeros(d);
    let mut acc_x2 = DVector::zeros(d);
    let mut acc_n = 0usize;
    let mut warmup_divergences = 0usize;

    for it in 0..warmup {
        let eps = da.current();
        let (divergent, accept) = transition(
            target,
            &mut state,
            &mut rng,
            eps,
            &inv_mass,
            settings.leapfrog_base,
        );
        if divergent {
            warmup_divergences += 1;
        }
        da.update(accept);
        if it >= collect_start && it < collect_end {
            acc_x += &state.x;
            acc_x2 += state.x.component_mul(&state.x);
            acc_n += 1;
        }
        if it + 1 == collect_end && acc_n >= 10 {
            let n = acc_n as f64;
            let mean = &acc_x / n;
            let var = &acc_x2 / n - mean.component_mul(&mean);
            // Shrink toward a small constant, as a guard for coordinates
            // that barely moved.
            let w = n / (n + 5.0);
            inv_mass = var.map(|v| (w * v.max(0.0) + (1.0 - w) * 1e-3).max(1e-10));
            let eps_now = da.current();
            da = DualAveraging::new(eps_now);
        }
    }
    if warmup > 0 && warmup_divergences == warmup {
        return Err(Error::Sampling(format!(
            "chain {chain_id}: every warmup iteration diverged (step size {:.3e})",
            da.current()
        )));
    }

    let eps = da.averaged().clamp(1e-10, 1e6);
    let mut params = Vec::with_capacity(settings.draws);
    let mut logp = Vec::with_capacity(settings.draws);
    let mut divergent_flags = Vec::with_capacity(settings.draws);
    let mut accepts = Vec::with_capacity(settings.draws);
    for _ in 0..settings.draws {
        let (divergent, accept) = transition(
            target,
            &mut state,
            &mut rng,
            eps,
            &inv_mass,
            settings.leapfrog_base,
        );
        params.push(state.x.clone());
        logp.push(state.logp);
        divergent_flags.push(divergent);
        accepts.push(accept);
    }
    Ok(ChainDraws {
        params,
        logp,
        divergent: divergent_flags,
        accept: accepts,
        step_size: eps,
        warmup_divergences,
    })
}

/// Run multinomial HMC. Chains execute in parallel, each with its own
/// deterministic random stream; identical settings reproduce the draws
/// bit for bit.
pub fn run_hmc(target: &dyn LogDensity, settings: &SamplerSettings) -> Result<PosteriorDraws> {
    if settings.chains < 2 {
        return Err(Error::invalid("at least two chains are required"));
    }
    if settings.draws == 0 {
        return Err(Error::invalid("draws must be positive"));
    }
    let chains: Vec<ChainDraws> = (0..settings.chains)
        .into_par_iter()
        .map(|c| run_chain(target, settings, c))
        .collect::<Result<_>>()?;

    let n_obs = target.n_obs();
    let total: usize = chains.iter().map(|c| c.params.len()).sum();
    let mut pointwise = DMatrix::zeros(total, n_obs);
    if n_obs > 0 {
        let mut row = 0;
        for chain in &chains {
            for p in &chain.params {
                pointwise.row_mut(row).copy_from(&target.pointwise_loglik(p).transpose());
                row += 1;
            }
        }
    }
    Ok(PosteriorDraws {
        chains,
        pointwise_loglik: pointwise,
        dim: target.dim(),
    })
}

/// Posterior predictive replicates: for `n_rep` draws spread evenly
/// through the pooled sample, `y_rep = field(draw) + N(0, sd(draw)^2)`.
pub fn posterior_predictive(
    draws: &PosteriorDraws,
    n_rep: usize,
    seed: u64,
    field: impl Fn(&DVector<f64>) -> DVector<f64>,
    noise_sd: impl Fn(&DVector<f64>) -> f64,
) -> Result<Vec<DVector<f64>>> {
    let total = draws.total_draws();
    if total == 0 || n_rep == 0 {
        return Err(Error::invalid("need draws and a positive replicate count"));
    }
    let pooled: Vec<&DVector<f64>> = draws
        .chains
        .iter()
        .flat_map(|c| c.params.iter())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_rep);
    for j in 0..n_rep {
        let idx = if n_rep == 1 {
            total - 1
        } else {
            (j * (total - 1)) / (n_rep - 1)
        };
        let x = pooled[idx];
        let mean = field(x);
        let sd = noise_sd(x);
        let rep = mean.map(|m| {
            let xi: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            m + sd * xi
        });
        out.push(rep);
    }
    Ok(out)
}

/// Fraction of posterior-median mode coefficients falling outside the
/// prior two-standard-deviation band `±2 sqrt(1/(1+alpha lambda_k))`,
/// with alpha at its posterior median. Well-specified fits keep this
/// small.
pub fn shrinkage_outside_fraction(draws: &PosteriorDraws, target: &RegTpsTarget) -> f64 {
    let median = draws.median();
    let alpha_med = median[target.log_alpha_index()].exp();
    let pooled = draws.pooled();
    let m = target.modes();
    let la = target.log_alpha_index();
    let mut outside = 0usize;
    for k in 0..m {
        // Median of z_k = scale_k(alpha_draw) z_raw_k across draws.
        let mut zs: Vec<f64> = (0..pooled.nrows())
            .map(|i| {
                let alpha = pooled[(i, la)].exp();
                pooled[(i, k)] / (1.0 + alpha * target.penalty_eigvals[k]).sqrt()
            })
            .collect();
        zs.sort_by(|a, b| a.total_cmp(b));
        let z_med = zs[zs.len() / 2];
        let prior_sd = (1.0 / (1.0 + alpha_med * target.penalty_eigvals[k])).sqrt();
        if z_med.abs() > 2.0 * prior_sd {
            outside += 1;
        }
    }
    outside as f64 / m as f64
}

/// Standard normal quantile.
fn inv_phi(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * puruspe::inverfc(2.0 * p)
}

fn split_in_half(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[half..2 * half].to_vec());
    }
    out
}

/// Potential scale reduction on split chains.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    let split = split_in_half(chains);
    let n = split.iter().map(|c| c.len()).min().unwrap_or(0);
    if split.len() < 4 || n < 4 {
        return Err(Error::invalid("need at least two chains of length >= 8"));
    }
    let m = split.len();
    let means: Vec<f64> = split.iter().map(|c| c[..n].iter().sum::<f64>() / n as f64).collect();
    let vars: Vec<f64> = split
        .iter()
        .zip(&means)
        .map(|(c, mu)| c[..n].iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = n as f64 / (m - 1) as f64 * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>();
    let w = vars.iter().sum::<f64>() / m as f64;
    if w <= 0.0 {
        return Ok(1.0);
    }
    let var_plus = (n - 1) as f64 / n as f64 * w + b / n as f64;
    Ok((var_plus / w).sqrt())
}

fn autocovariance(series: &[f64], mean: f64, lag: usize) -> f64 {
    let n = series.len();
    let mut s = 0.0;
    for i in 0..n - lag {
        s += (series[i] - mean) * (series[i + lag] - mean);
    }
    s / n as f64
}

fn ess_raw(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(|c| c.len()).min().unwrap();
    let means: Vec<f64> = chains.iter().map(|c| c[..n].iter().sum::<f64>() / n as f64).collect();
    let vars: Vec<f64> = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c[..n].iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64)
        .collect();
    let w = vars.iter().sum::<f64>() / m as f64;
    if w <= 0.0 {
        return (m * n) as f64;
    }
    let grand = means.iter().sum::<f64>() / m as f64;
    let b_over_n = means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m as f64 - 1.0);
    let var_plus = (n - 1) as f64 / n as f64 * w + b_over_n;

    let max_lag = n - 1;
    let mut rho = Vec::with_capacity(max_lag);
    for t in 1..max_lag {
        let acov: f64 = chains
            .iter()
            .zip(&means)
            .map(|(c, mu)| autocovariance(&c[..n], *mu, t))
            .sum::<f64>()
            / m as f64;
        rho.push(1.0 - (w - acov) / var_plus);
    }
    // Geyer initial monotone positive pair sums.
    let mut tau = 1.0;
    let mut prev_pair = f64::INFINITY;
    let mut t = 0;
    while t + 1 < rho.len() {
        let pair = rho[t] + rho[t + 1];
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        prev_pair = pair;
        tau += 2.0 * pair;
        t += 2;
    }
    ((m * n) as f64 / tau).min((m * n) as f64)
}

/// Bulk effective sample size: rank-normalized split-chain ESS.
pub fn ess_bulk(chains: &[Vec<f64>]) -> Result<f64> {
    let split = split_in_half(chains);
    let n = split.iter().map(|c| c.len()).min().unwrap_or(0);
    if split.len() < 4 || n < 8 {
        return Err(Error::invalid("need at least two chains of length >= 16"));
    }
    // Pooled ranks, then normal scores.
    let total = split.len() * n;
    let mut indexed: Vec<(f64, usize)> = Vec::with_capacity(total);
    for (ci, c) in split.iter().enumerate() {
        for (i, v) in c[..n].iter().enumerate() {
            indexed.push((*v, ci * n + i));
        }
    }
    indexed.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut scores = vec![0.0; total];
    for (rank, (_, pos)) in indexed.iter().enumerate() {
        let u = (rank as f64 + 1.0 - 0.375) / (total as f64 + 0.25);
        scores[*pos] = inv_phi(u);
    }
    let normalized: Vec<Vec<f64>> = (0..split.len())
        .map(|ci| scores[ci * n..(ci + 1) * n].to_vec())
        .collect();
    Ok(ess_raw(&normalized))
}

/// Write pooled draws as CSV: chain, iteration, lp, divergent, then one
/// column per parameter.
pub fn write_draws_csv(
    draws: &PosteriorDraws,
    names: &[String],
    path: &std::path::Path,
) -> Result<()> {
    if names.len() != draws.dim {
        return Err(Error::dim("parameter names", draws.dim, names.len()));
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["chain".to_string(), "iteration".to_string(), "lp".to_string(), "divergent".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (ci, chain) in draws.chains.iter().enumerate() {
        for (i, p) in chain.params.iter().enumerate() {
            let mut rec = vec![
                ci.to_string(),
                i.to_string(),
                format!("{:.17e}", chain.logp[i]),
                (chain.divergent[i] as u8).to_string(),
            ];
            rec.extend(p.iter().map(|v| format!("{v:.17e}")));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Write the pointwise log-likelihood matrix as CSV, one row per draw.
pub fn write_loglik_csv(draws: &PosteriorDraws, path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n_obs = draws.pointwise_loglik.ncols();
    let mut header = vec!["draw".to_string()];
    header.extend((0..n_obs).map(|i| format!("obs_{i}")));
    w.write_record(&header)?;
    for i in 0..draws.pointwise_loglik.nrows() {
        let mut rec = vec![i.to_string()];
        rec.extend(
            draws
                .pointwise_loglik
                .row(i)
                .iter()
                .map(|v| format!("{v:.17e}")),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
