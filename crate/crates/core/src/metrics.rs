//! Masked loss functionals over per-pixel grids.
//!
//! Grids are flat `pixels × channels` slices; the mask holds one flag per pixel.
//! Every reduction is a mean over the unmasked entries, so values under a zero
//! mask never influence a result.

use rayon::prelude::*;

use crate::{Error, Result};

/// Largest `|a·b| − 1` accepted as coming from unit vectors; the product is then clamped to `[−1, 1]`.
pub const UNIT_SLACK: f64 = 1e-3;

/// Prediction `a`, reference `b`, and per-pixel mask.
#[derive(Clone, Copy, Debug)]
pub struct MaskedPair<'a> {
    a: &'a [f64],
    b: &'a [f64],
    mask: &'a [bool],
    channels: usize,
}

impl<'a> MaskedPair<'a> {
    pub fn new(a: &'a [f64], b: &'a [f64], mask: &'a [bool], channels: usize) -> Result<Self> {
        if channels == 0 || a.len() != b.len() || a.len() != mask.len() * channels {
            return Err(Error::shape(format!(
                "prediction {} / reference {} values do not match {} pixels × {channels} channels",
                a.len(),
                b.len(),
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::NoData("mask excludes every pixel".into()));
        }
        Ok(MaskedPair { a, b, mask, channels })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn unmasked_pixels(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// `(a, b)` entries at unmasked pixels.
    fn entries(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.a
            .chunks(self.channels)
            .zip(self.b.chunks(self.channels))
            .zip(self.mask)
            .filter(|(_, &m)| m)
            .flat_map(|((a, b), _)| a.iter().copied().zip(b.iter().copied()))
    }

    fn count(&self) -> f64 {
        (self.unmasked_pixels() * self.channels) as f64
    }
}

/// Converts a PFM-style mask plane (nonzero = keep) to flags.
pub fn mask_from_values(values: &[f64]) -> Vec<bool> {
    values.iter().map(|&v| v != 0.0).collect()
}

/// `τ = argmin ‖(τA − B) ⊙ M‖²`, scaling the prediction onto the reference.
pub fn lsq_scale(p: &MaskedPair<'_>) -> Result<f64> {
    let (num, den) = p.entries().fold((0.0, 0.0), |(n, d), (a, b)| (n + a * b, d + a * a));
    if !(den > 0.0) {
        return Err(Error::NoData("prediction has zero energy under the mask".into()));
    }
    Ok(num / den)
}

/// Mean angle in radians between per-pixel vectors (`channels` components each).
pub fn g1_angular(p: &MaskedPair<'_>) -> Result<f64> {
    let c = p.channels;
    let mut total = 0.0;
    for ((a, b), _) in p.a.chunks(c).zip(p.b.chunks(c)).zip(p.mask).filter(|(_, &m)| m) {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        if !dot.is_finite() || dot.abs() > 1.0 + UNIT_SLACK {
            return Err(Error::domain(format!("inner product {dot} is not that of unit vectors")));
        }
        total += dot.clamp(-1.0, 1.0).acos();
    }
    Ok(total / p.unmasked_pixels() as f64)
}

/// Masked mean squared error.
pub fn g2_mse(p: &MaskedPair<'_>) -> f64 {
    p.entries().map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.count()
}

/// MSE after the prediction is scaled by [`lsq_scale`].
pub fn g3_si_mse(p: &MaskedPair<'_>) -> Result<f64> {
    let tau = lsq_scale(p)?;
    Ok(p.entries().map(|(a, b)| (tau * a - b) * (tau * a - b)).sum::<f64>() / p.count())
}

fn check_nonnegative(p: &MaskedPair<'_>) -> Result<()> {
    match p.entries().find(|(a, b)| !(*a >= 0.0 && *b >= 0.0 && a.is_finite() && b.is_finite())) {
        Some((a, b)) => Err(Error::domain(format!("log-space metrics need finite nonnegative values, got ({a}, {b})"))),
        None => Ok(()),
    }
}

fn log_mse_at(p: &MaskedPair<'_>, tau: f64) -> f64 {
    p.entries()
        .map(|(a, b)| {
            let d = (tau * a).ln_1p() - b.ln_1p();
            d * d
        })
        .sum::<f64>()
        / p.count()
}

/// Masked MSE of `ln(1 + ·)`.
pub fn g4_log_mse(p: &MaskedPair<'_>) -> Result<f64> {
    check_nonnegative(p)?;
    Ok(log_mse_at(p, 1.0))
}

/// Scale for the log-space metric: the `τ > 0` minimizing the log-space MSE of `τA`.
///
/// The objective need not be unimodal in `τ`, so `s = ln τ` is scanned on a grid
/// around the better of `τ = 1` and the linear [`lsq_scale`], then refined by
/// golden-section search on the best grid bracket.
pub fn log_scale(p: &MaskedPair<'_>) -> Result<f64> {
    check_nonnegative(p)?;
    let f = |s: f64| log_mse_at(p, s.exp());
    let Ok(linear) = lsq_scale(p) else {
        return Ok(1.0);
    };
    let center = if linear > 0.0 && f(linear.ln()) < f(0.0) { linear.ln() } else { 0.0 };
    const HALF_WIDTH: f64 = 10.0;
    const STEP: f64 = 0.05;
    let steps = (2.0 * HALF_WIDTH / STEP) as usize;
    let grid = |k: usize| center - HALF_WIDTH + k as f64 * STEP;
    let k_best = (0..=steps).min_by(|&i, &j| f(grid(i)).total_cmp(&f(grid(j)))).unwrap_or(0);
    let (mut lo, mut hi) = (grid(k_best.saturating_sub(1)), grid((k_best + 1).min(steps)));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > 1e-12 {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    let s = [0.5 * (lo + hi), center, grid(k_best)].into_iter().min_by(|a, b| f(*a).total_cmp(&f(*b))).unwrap_or(0.0);
    Ok(s.exp())
}

/// Log-space MSE after the prediction is scaled by [`log_scale`].
pub fn g5_si_log_mse(p: &MaskedPair<'_>) -> Result<f64> {
    let tau = log_scale(p)?;
    Ok(log_mse_at(p, tau).min(log_mse_at(p, 1.0)))
}

/// Mean of `−A ln A` over all entries; inputs must lie in `(0, 1]`.
pub fn g6_entropy(a: &[f64]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::NoData("empty input".into()));
    }
    if let Some(x) = a.iter().find(|x| !(**x > 0.0 && **x <= 1.0)) {
        return Err(Error::domain(format!("entropy input {x} outside (0, 1]")));
    }
    Ok(a.par_iter().map(|x| -x * x.ln()).sum::<f64>() / a.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    G1,
    G2,
    G3,
    G4,
    G5,
    G6,
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "g1" => Metric::G1,
            "g2" => Metric::G2,
            "g3" => Metric::G3,
            "g4" => Metric::G4,
            "g5" => Metric::G5,
            "g6" => Metric::G6,
            _ => return Err(Error::domain(format!("metric must be one of g1..g6, got {s:?}"))),
        })
    }
}

impl Metric {
    /// Evaluates the metric; `g6` reads only the prediction at unmasked pixels.
    pub fn eval(self, p: &MaskedPair<'_>) -> Result<f64> {
        match self {
            Metric::G1 => g1_angular(p),
            Metric::G2 => Ok(g2_mse(p)),
            Metric::G3 => g3_si_mse(p),
            Metric::G4 => g4_log_mse(p),
            Metric::G5 => g5_si_log_mse(p),
            Metric::G6 => {
                let kept: Vec<f64> = p.entries().map(|(a, _)| a).collect();
                g6_entropy(&kept)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn scale_examples() {
        let b = [3.0, 6.0, 9.0, 1.5];
        let a: Vec<f64> = b.iter().map(|x| x / 3.0).collect();
        let m = [true; 4];
        assert_relative_eq!(lsq_scale(&MaskedPair::new(&a, &b, &m, 1).unwrap()).unwrap(), 3.0, epsilon = 1e-14);
        assert_eq!(lsq_scale(&MaskedPair::new(&b, &b, &m, 1).unwrap()).unwrap(), 1.0);
        // second half corrupted and masked out
        let a = [1.0, 2.0, 50.0, -3.0];
        let b = [2.0, 4.0, 0.0, 7.0];
        let m = [true, true, false, false];
        assert_eq!(lsq_scale(&MaskedPair::new(&a, &b, &m, 1).unwrap()).unwrap(), 2.0);
        let z = [0.0; 4];
        assert!(lsq_scale(&MaskedPair::new(&z, &b, &[true; 4], 1).unwrap()).is_err());
        assert!(MaskedPair::new(&z, &b, &[false; 4], 1).is_err());
        assert!(MaskedPair::new(&z, &b[..3], &[true; 4], 1).is_err());
    }

    #[test]
    fn angular_examples() {
        let n = [0.0, 0.0, 1.0, 0.6, 0.8, 0.0];
        let neg: Vec<f64> = n.iter().map(|x| -x).collect();
        let m = [true, true];
        assert_eq!(g1_angular(&MaskedPair::new(&n, &n, &m, 3).unwrap()).unwrap(), 0.0);
        assert_relative_eq!(g1_angular(&MaskedPair::new(&n, &neg, &m, 3).unwrap()).unwrap(), PI, epsilon = 1e-12);
        let x = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let y = [0.0, 1.0, 0.0, 1.0, 0.0, 0.0];
        assert_relative_eq!(g1_angular(&MaskedPair::new(&x, &y, &m, 3).unwrap()).unwrap(), PI / 4.0, epsilon = 1e-15);
        let big = [2.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        assert!(g1_angular(&MaskedPair::new(&big, &big, &m, 3).unwrap()).is_err());
    }

    #[test]
    fn scale_invariant_mse_vanishes_on_scaled_reference() {
        let b = [0.3, 1.7, 4.2, 0.01, 9.0, 2.5];
        let m = [true; 6];
        for c in [0.1, 1.0, 7.0] {
            let a: Vec<f64> = b.iter().map(|x| c * x).collect();
            let p = MaskedPair::new(&a, &b, &m, 1).unwrap();
            assert!(g3_si_mse(&p).unwrap() < 1e-28, "c = {c}");
            assert!(g5_si_log_mse(&p).unwrap() < 1e-20, "c = {c}");
        }
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(g6_entropy(&[1.0]).unwrap(), 0.0);
        let e = (-1.0f64).exp();
        assert_relative_eq!(g6_entropy(&[e]).unwrap(), e, epsilon = 1e-16);
        assert!(g6_entropy(&[0.0]).is_err());
        assert!(g6_entropy(&[1.5]).is_err());
    }

    #[test]
    fn log_metrics_reject_negative_values() {
        let a = [1.0, -0.5];
        let b = [1.0, 1.0];
        let p = MaskedPair::new(&a, &b, &[true, true], 1).unwrap();
        assert!(g4_log_mse(&p).is_err());
        // negative value under a zero mask is ignored
        let p = MaskedPair::new(&a, &b, &[true, false], 1).unwrap();
        assert_eq!(g4_log_mse(&p).unwrap(), 0.0);
    }

    #[test]
    fn scaling_never_hurts_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = rng.gen_range(4..64);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..20.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..20.0)).collect();
            let mut m: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
            m[0] = true;
            let p = MaskedPair::new(&a, &b, &m, 1).unwrap();
            assert!(g2_mse(&p) >= g3_si_mse(&p).unwrap());
            assert!(g4_log_mse(&p).unwrap() >= g5_si_log_mse(&p).unwrap());
        }
    }

    proptest! {
        #[test]
        fn masked_values_are_ignored(
            a in proptest::collection::vec(0.01..10.0f64, 8),
            b in proptest::collection::vec(0.01..10.0f64, 8),
            junk in proptest::collection::vec(0.01..1e3f64, 8),
        ) {
            let m = [true, false, true, true, false, false, true, false];
            let mut a2 = a.clone();
            let mut b2 = b.clone();
            for i in 0..8 {
                if !m[i] { a2[i] = junk[i]; b2[i] = junk[7 - i]; }
            }
            let p = MaskedPair::new(&a, &b, &m, 1).unwrap();
            let q = MaskedPair::new(&a2, &b2, &m, 1).unwrap();
            for metric in [Metric::G2, Metric::G3, Metric::G4, Metric::G5] {
                prop_assert_eq!(metric.eval(&p).unwrap(), metric.eval(&q).unwrap());
            }
        }

        #[test]
        fn angular_error_is_bounded(v in proptest::collection::vec(-1.0..1.0f64, 12)) {
            let unit: Vec<f64> = v.chunks(3).flat_map(|c| {
                let n = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt().max(1e-9);
                c.iter().map(move |x| x / n).collect::<Vec<_>>()
            }).collect();
            let (a, b) = unit.split_at(6);
            if let Ok(p) = MaskedPair::new(a, b, &[true, true], 3) {
                if let Ok(g) = g1_angular(&p) {
                    prop_assert!((0.0..=PI).contains(&g));
                }
            }
        }
    }
}
