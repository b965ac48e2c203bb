//! Spherical-Gaussian lobes and mixtures.
//!
//! A lobe is `G(l) = η · exp(λ (l·ξ − 1))` with unit axis `ξ`, sharpness `λ ≥ 0`
//! and RGB intensity `η ≥ 0`. A mixture sums `S` lobes, each optionally scaled by
//! a per-pixel visibility `μ_s ∈ [0, 1]`.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::Rotation3;

use crate::{Error, Result, Rgb, Vec3};

/// Allowed deviation of `‖v‖₂` from 1 for a vector to count as a unit direction.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// A unit 3-vector. Also convertible to the polar form `(θ, φ)` with
/// `θ ∈ [0, π]` measured from `+z` and `φ ∈ [0, 2π)` measured from `+x` towards `+y`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Direction(Vec3);

impl Direction {
    /// Wraps `v`, rejecting vectors whose norm is not 1 within [`UNIT_TOLERANCE`].
    pub fn new(v: Vec3) -> Result<Self> {
        let n = v.norm();
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::domain(format!("non-unit direction, norm {n}")));
        }
        Ok(Direction(v))
    }

    /// Normalizes `v`. Fails on zero or non-finite input.
    pub fn normalize(v: Vec3) -> Result<Self> {
        let n = v.norm();
        if !n.is_finite() || n <= f64::MIN_POSITIVE {
            return Err(Error::domain("cannot normalize zero or non-finite vector"));
        }
        Ok(Direction(v / n))
    }

    /// Wraps `v` without checking its norm. The caller guarantees `‖v‖ ≈ 1`.
    #[inline]
    pub fn new_unchecked(v: Vec3) -> Self {
        Direction(v)
    }

    pub fn from_angles(theta: f64, phi: f64) -> Self {
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        Direction(Vec3::new(st * cp, st * sp, ct))
    }

    /// Returns `(θ, φ)`.
    pub fn angles(&self) -> (f64, f64) {
        let theta = self.0.z.clamp(-1.0, 1.0).acos();
        let mut phi = self.0.y.atan2(self.0.x);
        if phi < 0.0 {
            phi += 2.0 * PI;
        }
        if phi >= 2.0 * PI {
            phi -= 2.0 * PI;
        }
        (theta, phi)
    }

    #[inline]
    pub fn vec(&self) -> &Vec3 {
        &self.0
    }

    #[inline]
    pub fn dot(&self, other: &Direction) -> f64 {
        self.0.dot(&other.0)
    }

    pub fn rotated(&self, rot: &Rotation3<f64>) -> Direction {
        Direction(rot * self.0)
    }
}

impl std::ops::Neg for Direction {
    type Output = Direction;
    fn neg(self) -> Direction {
        Direction(-self.0)
    }
}

/// Evaluates `η · exp(λ (l·ξ − 1))` without checking that `ξ` is unit.
///
/// Used where the axis is a weighted sum that is deliberately left unnormalized.
#[inline]
pub fn sg_value(eta: &Rgb, lambda: f64, xi: &Vec3, l: &Vec3) -> Rgb {
    eta * (lambda * (l.dot(xi) - 1.0)).exp()
}

/// `∫_{S²} exp(λ (l·ξ − 1)) dl = 2π (1 − e^{−2λ}) / λ`, with the `λ → 0` limit `4π`.
pub fn sphere_integral_factor(lambda: f64) -> f64 {
    if lambda <= 1e-12 {
        4.0 * PI
    } else {
        2.0 * PI * (-(-2.0 * lambda).exp_m1()) / lambda
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphericalGaussian {
    xi: Direction,
    lambda: f64,
    eta: Rgb,
}

impl SphericalGaussian {
    pub fn new(xi: Vec3, lambda: f64, eta: Rgb) -> Result<Self> {
        Self::from_direction(Direction::new(xi)?, lambda, eta)
    }

    pub fn from_direction(xi: Direction, lambda: f64, eta: Rgb) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::domain(format!("sharpness must be finite and >= 0, got {lambda}")));
        }
        if eta.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::domain(format!("intensity must be finite and >= 0, got ({}, {}, {})", eta.x, eta.y, eta.z)));
        }
        Ok(SphericalGaussian { xi, lambda, eta })
    }

    pub fn from_angles(theta: f64, phi: f64, lambda: f64, eta: Rgb) -> Result<Self> {
        Self::from_direction(Direction::from_angles(theta, phi), lambda, eta)
    }

    /// A constant (λ = 0) lobe.
    pub fn constant(eta: Rgb) -> Result<Self> {
        Self::new(Vec3::z(), 0.0, eta)
    }

    #[inline]
    pub fn xi(&self) -> &Direction {
        &self.xi
    }

    #[inline]
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    #[inline]
    pub fn eta(&self) -> &Rgb {
        &self.eta
    }

    /// Radiance in direction `l`.
    #[inline]
    pub fn eval(&self, l: &Direction) -> Rgb {
        sg_value(&self.eta, self.lambda, self.xi.vec(), l.vec())
    }

    /// Closed-form integral of the lobe over the whole sphere.
    pub fn integrate_sphere(&self) -> Rgb {
        self.eta * sphere_integral_factor(self.lambda)
    }

    pub fn rotated(&self, rot: &Rotation3<f64>) -> SphericalGaussian {
        SphericalGaussian { xi: self.xi.rotated(rot), ..*self }
    }

    pub fn scaled(&self, c: f64) -> SphericalGaussian {
        SphericalGaussian { eta: self.eta * c, ..*self }
    }
}

/// Free-function form of [`SphericalGaussian::eval`].
pub fn eval_sg(lobe: &SphericalGaussian, l: &Direction) -> Rgb {
    lobe.eval(l)
}

/// Free-function form of [`SphericalGaussian::integrate_sphere`].
pub fn integrate_sg_sphere(lobe: &SphericalGaussian) -> Rgb {
    lobe.integrate_sphere()
}

/// Per-pixel visibility `μ_s`, stored pixel-major (`S` values per pixel).
#[derive(Clone, Debug, PartialEq)]
pub struct VisibilityMap {
    width: usize,
    height: usize,
    lobes: usize,
    data: Vec<f64>,
}

impl VisibilityMap {
    /// Values are clamped to `[0, 1]`; NaN is rejected.
    pub fn new(width: usize, height: usize, lobes: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * lobes {
            return Err(Error::shape(format!("visibility has {} values, expected {}x{}x{}", data.len(), width, height, lobes)));
        }
        for v in data.iter_mut() {
            if v.is_nan() {
                return Err(Error::domain("NaN visibility"));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(VisibilityMap { width, height, lobes, data })
    }

    pub fn filled(width: usize, height: usize, lobes: usize, value: f64) -> Result<Self> {
        Self::new(width, height, lobes, vec![value; width * height * lobes])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn lobes(&self) -> usize {
        self.lobes
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn at(&self, pixel: usize) -> Result<&[f64]> {
        if pixel >= self.pixels() {
            return Err(Error::Index { index: pixel, len: self.pixels() });
        }
        Ok(&self.data[pixel * self.lobes..(pixel + 1) * self.lobes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// An `S`-lobe mixture, optionally with per-pixel visibility.
#[derive(Clone, Debug, PartialEq)]
pub struct SgEnvironment {
    lobes: Vec<SphericalGaussian>,
    visibility: Option<VisibilityMap>,
}

impl SgEnvironment {
    pub fn new(lobes: Vec<SphericalGaussian>) -> Result<Self> {
        if lobes.is_empty() {
            return Err(Error::domain("environment needs at least one lobe"));
        }
        Ok(SgEnvironment { lobes, visibility: None })
    }

    pub fn with_visibility(mut self, vis: VisibilityMap) -> Result<Self> {
        if vis.lobes() != self.lobes.len() {
            return Err(Error::shape(format!("visibility has {} lobes, environment has {}", vis.lobes(), self.lobes.len())));
        }
        self.visibility = Some(vis);
        Ok(self)
    }

    pub fn lobes(&self) -> &[SphericalGaussian] {
        &self.lobes
    }

    pub fn visibility(&self) -> Option<&VisibilityMap> {
        self.visibility.as_ref()
    }

    /// Visibility weights for `pixel`, or `None` meaning all ones.
    ///
    /// Asking for a pixel without a visibility map is an error, as is an
    /// out-of-range pixel.
    pub fn weights(&self, pixel: Option<usize>) -> Result<Option<&[f64]>> {
        match (pixel, &self.visibility) {
            (None, _) => Ok(None),
            (Some(p), Some(vis)) => vis.at(p).map(Some),
            (Some(_), None) => Err(Error::domain("pixel index given but environment has no visibility map")),
        }
    }

    /// `Σ_s μ_s G_s(l)`.
    pub fn eval(&self, l: &Direction, pixel: Option<usize>) -> Result<Rgb> {
        let w = self.weights(pixel)?;
        Ok(self.eval_weighted(l, w))
    }

    /// Mixture radiance with already-resolved weights; `None` means unit weights.
    #[inline]
    pub fn eval_weighted(&self, l: &Direction, weights: Option<&[f64]>) -> Rgb {
        match weights {
            None => self.lobes.iter().fold(Rgb::zeros(), |acc, g| acc + g.eval(l)),
            Some(mu) => self.lobes.iter().zip(mu).fold(Rgb::zeros(), |acc, (g, m)| acc + g.eval(l) * *m),
        }
    }

    pub fn rotated(&self, rot: &Rotation3<f64>) -> SgEnvironment {
        SgEnvironment { lobes: self.lobes.iter().map(|g| g.rotated(rot)).collect(), visibility: self.visibility.clone() }
    }
}

/// Free-function form of [`SgEnvironment::eval`].
pub fn eval_mixture(env: &SgEnvironment, l: &Direction, pixel: Option<usize>) -> Result<Rgb> {
    env.eval(l, pixel)
}

/// Formats one lobe as `xi_x xi_y xi_z lambda eta_r eta_g eta_b`.
///
/// Uses shortest round-trip float formatting so that parsing restores the exact values.
pub fn format_lobe(g: &SphericalGaussian) -> String {
    let x = g.xi().vec();
    let e = g.eta();
    let mut s = String::new();
    let _ = write!(s, "{} {} {} {} {} {} {}", x.x, x.y, x.z, g.lambda(), e.x, e.y, e.z);
    s
}

/// Parses one `xi_x xi_y xi_z lambda eta_r eta_g eta_b` line. The axis is
/// renormalized if it is within 1e-3 of unit length (hand-written files).
pub fn parse_lobe(line: &str) -> std::result::Result<SphericalGaussian, String> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| format!("bad number {t:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    if vals.len() != 7 {
        return Err(format!("expected 7 values, found {}", vals.len()));
    }
    let xi = Vec3::new(vals[0], vals[1], vals[2]);
    let n = xi.norm();
    if (n - 1.0).abs() > 1e-3 {
        return Err(format!("axis norm {n} is not 1"));
    }
    let xi = if (n - 1.0).abs() > UNIT_TOLERANCE { xi / n } else { xi };
    SphericalGaussian::new(xi, vals[3], Rgb::new(vals[4], vals[5], vals[6])).map_err(|e| e.to_string())
}

/// Parses a lobe file. Blank lines and lines starting with `#` are skipped.
pub fn parse_lobes(text: &str) -> Result<Vec<SphericalGaussian>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        out.push(parse_lobe(t).map_err(|msg| Error::Scene { line: i + 1, msg })?);
    }
    if out.is_empty() {
        return Err(Error::NoData("lobe file contains no lobes".into()));
    }
    Ok(out)
}
