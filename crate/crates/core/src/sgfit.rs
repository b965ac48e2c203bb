//! Levenberg-Marquardt fitting of SG mixtures to environment maps.
//!
//! Each lobe is parameterized as `(ln η_r, ln η_g, ln η_b, ln λ, θ, φ)`. The
//! objective is the solid-angle-weighted mean of squared `ln(1+·)` differences
//! over cells and channels, so a uniform-sphere mismatch of `δ` in log space
//! costs `δ²`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::envmap::EnvironmentMap;
use crate::sg::{Direction, SgEnvironment, SphericalGaussian, VisibilityMap};
use crate::{Error, Result, Rgb, Vec3};

const PARAMS_PER_LOBE: usize = 6;
/// Initial sharpness of greedily placed lobes.
pub const INIT_LAMBDA: f64 = 10.0;
/// Cells where an already placed lobe exceeds this fraction of its peak are
/// skipped when picking the next peak.
const SUPPRESSION_FRACTION: f64 = 0.05;
const LN_LAMBDA_RANGE: (f64, f64) = (-30.0, 9.0);
const LN_ETA_RANGE: (f64, f64) = (-40.0, 40.0);
/// Losses at or below this are treated as an exact fit.
const EXACT_LOSS: f64 = 1e-28;

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub num_lobes: usize,
    pub max_iterations: usize,
    /// Converged once an accepted step lowers the loss by less than this fraction.
    pub tolerance: f64,
    pub damping_init: f64,
    pub damping_grow: f64,
    pub damping_shrink: f64,
    /// Seeds the sub-cell jitter of the initial axes.
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            num_lobes: 3,
            max_iterations: 200,
            tolerance: 1e-12,
            damping_init: 1e-3,
            damping_grow: 10.0,
            damping_shrink: 0.3,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn with_lobes(num_lobes: usize) -> Self {
        FitConfig { num_lobes, ..FitConfig::default() }
    }

    fn validate(&self) -> Result<()> {
        if self.num_lobes == 0 {
            return Err(Error::domain("num_lobes must be at least 1"));
        }
        if !(self.tolerance > 0.0
            && self.damping_init > 0.0
            && self.damping_grow > 1.0
            && self.damping_shrink > 0.0
            && self.damping_shrink < 1.0)
        {
            return Err(Error::domain("tolerance and damping must be positive, grow > 1 and shrink in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub env: SgEnvironment,
    pub loss: f64,
    /// Number of damped linear solves, accepted or not.
    pub iterations: usize,
    pub converged: bool,
    /// Loss at the start and after every accepted step.
    pub trace: Vec<f64>,
}

/// Partial derivatives of `G(l)` with respect to the lobe parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgGradient {
    /// `∂G_c/∂η_c = exp(λ (l·ξ − 1))`, shared by the three channels.
    pub d_eta: f64,
    pub d_lambda: Rgb,
    pub d_theta: Rgb,
    pub d_phi: Rgb,
}

fn axis_derivatives(theta: f64, phi: f64) -> (Vec3, Vec3) {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    (Vec3::new(ct * cp, ct * sp, -st), Vec3::new(-st * sp, st * cp, 0.0))
}

/// Analytic gradient of the lobe at `l`, with the axis as `(θ, φ)` from [`Direction::angles`].
pub fn sg_gradients(lobe: &SphericalGaussian, l: &Direction) -> SgGradient {
    let (theta, phi) = lobe.xi().angles();
    let xi = Direction::from_angles(theta, phi);
    let cos = l.dot(&xi);
    let e = (lobe.lambda() * (cos - 1.0)).exp();
    let g = lobe.eta() * e;
    let (dt, dp) = axis_derivatives(theta, phi);
    SgGradient {
        d_eta: e,
        d_lambda: g * (cos - 1.0),
        d_theta: g * (lobe.lambda() * l.vec().dot(&dt)),
        d_phi: g * (lobe.lambda() * l.vec().dot(&dp)),
    }
}

struct Problem {
    target_log: Vec<Rgb>,
    dirs: Vec<Vec3>,
    sqrt_w: Vec<f64>,
    lobes: usize,
}

impl Problem {
    fn new(target: &EnvironmentMap, lobes: usize) -> Self {
        let (rows, cols) = (target.rows(), target.cols());
        let mut dirs = Vec::with_capacity(rows * cols);
        let mut sqrt_w = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let w = (target.cell_solid_angle(i) / (4.0 * PI * 3.0)).sqrt();
            for j in 0..cols {
                dirs.push(*target.cell_direction(i, j).vec());
                sqrt_w.push(w);
            }
        }
        Problem { target_log: target.data().iter().map(|c| c.map(f64::ln_1p)).collect(), dirs, sqrt_w, lobes }
    }

    fn residual_len(&self) -> usize {
        self.dirs.len() * 3
    }

    fn unpack(&self, p: &DVector<f64>, s: usize) -> (Rgb, f64, Vec3, f64, f64) {
        let b = s * PARAMS_PER_LOBE;
        let eta = Rgb::new(p[b].exp(), p[b + 1].exp(), p[b + 2].exp());
        let (theta, phi) = (p[b + 4], p[b + 5]);
        (eta, p[b + 3].exp(), *Direction::from_angles(theta, phi).vec(), theta, phi)
    }

    fn predict(&self, p: &DVector<f64>, l: &Vec3) -> Rgb {
        (0..self.lobes)
            .map(|s| {
                let (eta, lambda, xi, _, _) = self.unpack(p, s);
                eta * (lambda * (l.dot(&xi) - 1.0)).exp()
            })
            .sum()
    }

    fn residuals(&self, p: &DVector<f64>) -> DVector<f64> {
        let mut r = DVector::zeros(self.residual_len());
        for (k, l) in self.dirs.iter().enumerate() {
            let pred = self.predict(p, l);
            for c in 0..3 {
                r[3 * k + c] = self.sqrt_w[k] * (pred[c].ln_1p() - self.target_log[k][c]);
            }
        }
        r
    }

    fn loss(&self, p: &DVector<f64>) -> f64 {
        self.residuals(p).norm_squared()
    }

    fn jacobian(&self, p: &DVector<f64>) -> DMatrix<f64> {
        let n = self.lobes * PARAMS_PER_LOBE;
        let lobes: Vec<_> = (0..self.lobes)
            .map(|s| {
                let (eta, lambda, xi, theta, phi) = self.unpack(p, s);
                let (dt, dp) = axis_derivatives(theta, phi);
                (eta, lambda, xi, dt, dp)
            })
            .collect();
        let mut j = DMatrix::zeros(self.residual_len(), n);
        for (k, l) in self.dirs.iter().enumerate() {
            let pred = self.predict(p, l);
            for (s, (eta, lambda, xi, dt, dp)) in lobes.iter().enumerate() {
                let cos = l.dot(xi);
                let e = (lambda * (cos - 1.0)).exp();
                let b = s * PARAMS_PER_LOBE;
                for c in 0..3 {
                    // d r / d G_c times G_c
                    let g = self.sqrt_w[k] / (1.0 + pred[c]) * eta[c] * e;
                    let row = 3 * k + c;
                    j[(row, b + c)] = g;
                    j[(row, b + 3)] = g * lambda * (cos - 1.0);
                    j[(row, b + 4)] = g * lambda * l.dot(dt);
                    j[(row, b + 5)] = g * lambda * l.dot(dp);
                }
            }
        }
        j
    }

    fn to_env(&self, p: &DVector<f64>) -> Result<SgEnvironment> {
        let lobes = (0..self.lobes)
            .map(|s| {
                let (eta, lambda, _, theta, phi) = self.unpack(p, s);
                SphericalGaussian::from_angles(theta, phi, lambda, eta)
            })
            .collect::<Result<Vec<_>>>()?;
        SgEnvironment::new(lobes)
    }
}

fn clamp_params(p: &mut DVector<f64>) {
    for (k, v) in p.iter_mut().enumerate() {
        match k % PARAMS_PER_LOBE {
            0..=2 => *v = v.clamp(LN_ETA_RANGE.0, LN_ETA_RANGE.1),
            3 => *v = v.clamp(LN_LAMBDA_RANGE.0, LN_LAMBDA_RANGE.1),
            _ => {}
        }
    }
}

/// Greedy peak extraction: each lobe sits on the brightest remaining cell with
/// `λ = INIT_LAMBDA` and `η` equal to that cell's radiance.
fn initialize(target: &EnvironmentMap, lobes: usize, rng: &mut impl Rng) -> DVector<f64> {
    let (rows, cols) = (target.rows(), target.cols());
    let mut residual: Vec<Rgb> = target.data().to_vec();
    let mut suppressed = vec![false; rows * cols];
    let floor = target.data().iter().map(|c| c.max()).fold(0.0, f64::max).max(1e-6) * 1e-8;
    let (dtheta, dphi) = (PI / rows as f64, 2.0 * PI / cols as f64);
    let mut p = DVector::zeros(lobes * PARAMS_PER_LOBE);
    for s in 0..lobes {
        let pick = |skip: bool| {
            (0..rows * cols).filter(|&k| !skip || !suppressed[k]).max_by(|&a, &b| residual[a].sum().total_cmp(&residual[b].sum()))
        };
        let k = pick(true).or_else(|| pick(false)).unwrap_or(0);
        let (i, j) = (k / cols, k % cols);
        let theta = (i as f64 + 0.5 + rng.gen_range(-0.01..0.01)) * dtheta;
        let phi = (j as f64 + 0.5 + rng.gen_range(-0.01..0.01)) * dphi;
        let eta = residual[k].map(|c| c.max(floor));
        let b = s * PARAMS_PER_LOBE;
        for c in 0..3 {
            p[b + c] = eta[c].ln();
        }
        p[b + 3] = INIT_LAMBDA.ln();
        p[b + 4] = theta;
        p[b + 5] = phi;
        let xi = Direction::from_angles(theta, phi);
        for (m, (r, sup)) in residual.iter_mut().zip(suppressed.iter_mut()).enumerate() {
            let f = (INIT_LAMBDA * (target.cell_direction(m / cols, m % cols).dot(&xi) - 1.0)).exp();
            *r = (*r - eta * f).map(|c| c.max(0.0));
            *sup |= f > SUPPRESSION_FRACTION;
        }
    }
    clamp_params(&mut p);
    p
}

/// Solid-angle-weighted log-space loss of `env` against `target`, as minimized by [`fit_sg`].
pub fn fit_objective(target: &EnvironmentMap, env: &SgEnvironment) -> f64 {
    let mut loss = 0.0;
    for i in 0..target.rows() {
        let w = target.cell_solid_angle(i) / (4.0 * PI * 3.0);
        for j in 0..target.cols() {
            let pred = env.eval_weighted(&target.cell_direction(i, j), None);
            let t = target.at(i, j);
            for c in 0..3 {
                let d = pred[c].ln_1p() - t[c].ln_1p();
                loss += w * d * d;
            }
        }
    }
    loss
}

/// Fits `cfg.num_lobes` lobes to `target`. Returns the best parameters found,
/// with `converged = false` when the iteration budget ran out first.
pub fn fit_sg(target: &EnvironmentMap, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let problem = Problem::new(target, cfg.num_lobes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = initialize(target, cfg.num_lobes, &mut rng);
    let mut loss = problem.loss(&p);
    let mut trace = vec![loss];
    let mut mu = cfg.damping_init;
    let mut iterations = 0;
    let mut converged = loss <= EXACT_LOSS;
    let n = p.len();
    'outer: while !converged && iterations < cfg.max_iterations {
        let r = problem.residuals(&p);
        let j = problem.jacobian(&p);
        let jtj = j.tr_mul(&j);
        let g = j.tr_mul(&r);
        let diag_floor = (0..n).map(|k| jtj[(k, k)]).fold(0.0, f64::max) * 1e-12 + 1e-300;
        loop {
            if iterations >= cfg.max_iterations {
                break 'outer;
            }
            iterations += 1;
            let mut a = jtj.clone();
            for k in 0..n {
                a[(k, k)] += mu * jtj[(k, k)].max(diag_floor);
            }
            let step = a.cholesky().map(|ch| ch.solve(&(-&g)));
            let Some(step) = step.filter(|s| s.iter().all(|v| v.is_finite())) else {
                mu *= cfg.damping_grow;
                continue;
            };
            let mut candidate = &p + step;
            clamp_params(&mut candidate);
            let new_loss = problem.loss(&candidate);
            if new_loss < loss {
                let decrease = (loss - new_loss) / loss;
                p = candidate;
                loss = new_loss;
                trace.push(loss);
                mu = (mu * cfg.damping_shrink).max(1e-15);
                if decrease < cfg.tolerance || loss <= EXACT_LOSS {
                    converged = true;
                }
                break;
            }
            mu *= cfg.damping_grow;
            if mu > 1e20 {
                // no descent direction left at working precision
                converged = true;
                break 'outer;
            }
        }
    }
    Ok(FitResult { env: problem.to_env(&p)?, loss, iterations, converged, trace })
}

/// Per-pixel visibility for fixed lobes: box-constrained (`μ_s ∈ [0, 1]`)
/// linear least squares of the solid-angle-weighted radiance, one problem per pixel.
///
/// `targets` holds one map per pixel in row-major order.
pub fn fit_visibility(env: &SgEnvironment, targets: &[EnvironmentMap], width: usize, height: usize) -> Result<VisibilityMap> {
    if targets.len() != width * height || targets.is_empty() {
        return Err(Error::shape(format!("{} target maps for a {width}x{height} image", targets.len())));
    }
    let (rows, cols) = (targets[0].rows(), targets[0].cols());
    if targets.iter().any(|t| t.rows() != rows || t.cols() != cols) {
        return Err(Error::shape("target maps differ in resolution"));
    }
    let s_count = env.lobes().len();
    // basis[m][s]: lobe s at cell m, premultiplied by sqrt of the cell weight
    let mut basis = vec![vec![Rgb::zeros(); s_count]; rows * cols];
    let mut sqrt_w = vec![0.0; rows * cols];
    for (m, b) in basis.iter_mut().enumerate() {
        let w = targets[0].cell_solid_angle(m / cols).sqrt();
        sqrt_w[m] = w;
        let l = targets[0].cell_direction(m / cols, m % cols);
        for (s, lobe) in env.lobes().iter().enumerate() {
            b[s] = lobe.eval(&l) * w;
        }
    }
    let mut gram = DMatrix::zeros(s_count, s_count);
    for b in &basis {
        for s in 0..s_count {
            for t in 0..s_count {
                gram[(s, t)] += b[s].dot(&b[t]);
            }
        }
    }
    let data: Vec<f64> = targets
        .par_iter()
        .flat_map_iter(|target| {
            let mut rhs = vec![0.0; s_count];
            for (m, b) in basis.iter().enumerate() {
                let t = target.data()[m] * sqrt_w[m];
                for s in 0..s_count {
                    rhs[s] += b[s].dot(&t);
                }
            }
            projected_gauss_seidel(&gram, &rhs)
        })
        .collect();
    VisibilityMap::new(width, height, s_count, data)
}

/// Minimizes `½ μᵀGμ − bᵀμ` over the unit box by cyclic coordinate descent.
fn projected_gauss_seidel(gram: &DMatrix<f64>, rhs: &[f64]) -> Vec<f64> {
    let n = rhs.len();
    let mut mu = vec![1.0; n];
    for _ in 0..10_000 {
        let mut change = 0.0f64;
        for s in 0..n {
            let g = gram[(s, s)];
            if g <= 0.0 {
                mu[s] = 0.0;
                continue;
            }
            let off: f64 = (0..n).filter(|&t| t != s).map(|t| gram[(s, t)] * mu[t]).sum();
            let v = ((rhs[s] - off) / g).clamp(0.0, 1.0);
            change = change.max((v - mu[s]).abs());
            mu[s] = v;
        }
        if change < 1e-15 {
            break;
        }
    }
    mu
}
