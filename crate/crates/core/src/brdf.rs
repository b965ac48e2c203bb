//! Forward rendering under SG lighting.
//!
//! Diffuse: `I_d = A/π · S` with `S = ∫ L(l) max(N·l, 0) dl`.
//! Specular: `I_s = ∫ L(l) B(v, l, N, R) max(N·l, 0) dl` with a GGX normal
//! distribution (`α = R²`), height-correlated Smith masking-shadowing and
//! Schlick Fresnel with `F₀ = 0.04`.
//!
//! Integrals are evaluated with a hemisphere grid around the normal that is
//! uniform in `cos θ` and `φ` (equal solid angle per node). A Monte-Carlo
//! renderer with cosine and GGX importance sampling serves as an independent
//! check, and [`render_uniform`] reproduces the coarse θ–φ environment-map
//! renderer whose artifacts motivate SG-aware integration.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::envmap::{EnvironmentMap, HdrImage};
use crate::multiview::Camera;
use crate::sg::{Direction, SgEnvironment};
use crate::{Error, Result, Rgb, Vec3};

/// Dielectric reflectance at normal incidence.
pub const F0: f64 = 0.04;

/// Tolerance on `‖N‖ − 1` for G-buffer normals.
pub const NORMAL_TOLERANCE: f64 = 1e-4;

#[inline]
pub fn ggx_alpha(roughness: f64) -> f64 {
    roughness * roughness
}

/// GGX / Trowbridge-Reitz normal distribution.
#[inline]
pub fn ggx_d(n_dot_h: f64, alpha: f64) -> f64 {
    if n_dot_h <= 0.0 {
        return 0.0;
    }
    let a2 = alpha * alpha;
    let t = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0;
    a2 / (PI * t * t)
}

#[inline]
fn smith_lambda(cos: f64, alpha: f64) -> f64 {
    let c2 = cos * cos;
    let tan2 = (1.0 - c2).max(0.0) / c2;
    0.5 * (-1.0 + (1.0 + alpha * alpha * tan2).sqrt())
}

/// Height-correlated Smith masking-shadowing `1 / (1 + Λ(v) + Λ(l))`.
#[inline]
pub fn smith_g2(n_dot_v: f64, n_dot_l: f64, alpha: f64) -> f64 {
    if n_dot_v <= 0.0 || n_dot_l <= 0.0 {
        return 0.0;
    }
    1.0 / (1.0 + smith_lambda(n_dot_v, alpha) + smith_lambda(n_dot_l, alpha))
}

#[inline]
pub fn schlick(v_dot_h: f64) -> f64 {
    let m = (1.0 - v_dot_h).clamp(0.0, 1.0);
    F0 + (1.0 - F0) * m.powi(5)
}

/// Specular BRDF value `F D G / (4 (N·l)(N·v))`; zero below either horizon.
pub fn specular_brdf(n: &Vec3, v: &Vec3, l: &Vec3, roughness: f64) -> f64 {
    let nl = n.dot(l);
    let nv = n.dot(v);
    if nl <= 0.0 || nv <= 0.0 {
        return 0.0;
    }
    let h = v + l;
    let len = h.norm();
    if len <= 1e-12 {
        return 0.0;
    }
    let h = h / len;
    let alpha = ggx_alpha(roughness);
    schlick(v.dot(&h)) * ggx_d(n.dot(&h), alpha) * smith_g2(nv, nl, alpha) / (4.0 * nl * nv)
}

/// Mirror reflection `2(n·v)n − v`.
pub fn reflect(v: &Direction, n: &Direction) -> Result<Direction> {
    let r = *n.vec() * (2.0 * n.dot(v)) - v.vec();
    Direction::normalize(r)
}

/// `normalize(v + l)`; fails when `v = −l`.
pub fn half_vector(v: &Direction, l: &Direction) -> Result<Direction> {
    let h = v.vec() + l.vec();
    if h.norm() <= 1e-12 {
        return Err(Error::domain("half vector undefined for opposite directions"));
    }
    Direction::normalize(h)
}

/// Orthonormal tangent frame `(t, b)` completing `n`.
pub fn tangent_frame(n: &Vec3) -> (Vec3, Vec3) {
    let sign = 1.0f64.copysign(n.z);
    let a = -1.0 / (sign + n.z);
    let b = n.x * n.y * a;
    let t = Vec3::new(1.0 + sign * n.x * n.x * a, sign * b, -sign * n.x);
    let bt = Vec3::new(b, sign + n.y * n.y * a, -n.y);
    (t, bt)
}

/// Hemisphere grid resolution: `n_theta` bands uniform in `cos θ` times `n_phi` azimuth steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Quadrature {
    pub n_theta: usize,
    pub n_phi: usize,
}

impl Default for Quadrature {
    fn default() -> Self {
        Quadrature { n_theta: 32, n_phi: 64 }
    }
}

impl Quadrature {
    pub fn new(n_theta: usize, n_phi: usize) -> Result<Self> {
        if n_theta == 0 || n_phi == 0 {
            return Err(Error::domain("quadrature resolution must be positive"));
        }
        Ok(Quadrature { n_theta, n_phi })
    }

    /// Solid angle carried by each node.
    pub fn weight(&self) -> f64 {
        2.0 * PI / (self.n_theta * self.n_phi) as f64
    }

    /// Nodes in the frame `(t, b, n)`, yielding `(direction, cos θ)`.
    pub fn nodes<'a>(&self, n: &'a Vec3) -> impl Iterator<Item = (Direction, f64)> + 'a {
        let (t, b) = tangent_frame(n);
        let (nt, np) = (self.n_theta, self.n_phi);
        let dphi = 2.0 * PI / np as f64;
        let trig: Vec<(f64, f64)> = (0..np).map(|j| ((j as f64 + 0.5) * dphi).sin_cos()).collect();
        (0..nt).flat_map(move |i| {
            let u = (i as f64 + 0.5) / nt as f64;
            let s = (1.0 - u * u).sqrt();
            let trig = trig.clone();
            (0..np).map(move |j| {
                let (sp, cp) = trig[j];
                // stays unit up to rounding; skip the normalization check
                (Direction::new_unchecked(t * (s * cp) + b * (s * sp) + n * u), u)
            })
        })
    }
}

/// Rendering resolution knobs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RenderConfig {
    pub diffuse: Quadrature,
    pub specular: Quadrature,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { diffuse: Quadrature::default(), specular: Quadrature { n_theta: 128, n_phi: 256 } }
    }
}

/// Per-pixel surface attributes, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GBuffer {
    width: usize,
    height: usize,
    albedo: Vec<Rgb>,
    roughness: Vec<f64>,
    normal: Vec<Vec3>,
    depth: Vec<f64>,
    confidence: Option<Vec<f64>>,
}

impl GBuffer {
    pub fn new(width: usize, height: usize, albedo: Vec<Rgb>, roughness: Vec<f64>, normal: Vec<Vec3>, depth: Vec<f64>) -> Result<Self> {
        let n = width * height;
        if n == 0 || albedo.len() != n || roughness.len() != n || normal.len() != n || depth.len() != n {
            return Err(Error::shape(format!("G-buffer planes do not all have {width}x{height} pixels")));
        }
        if albedo.iter().flat_map(|a| a.iter()).any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::domain("albedo outside [0, 1]"));
        }
        if roughness.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::domain("roughness outside [0, 1]"));
        }
        if depth.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::domain("depth must be finite and > 0"));
        }
        let mut normal = normal;
        for v in normal.iter_mut() {
            let len = v.norm();
            if !len.is_finite() || (len - 1.0).abs() > NORMAL_TOLERANCE {
                return Err(Error::domain(format!("normal with norm {len}")));
            }
            *v /= len;
        }
        Ok(GBuffer { width, height, albedo, roughness, normal, depth, confidence: None })
    }

    /// Uniform material and normal on every pixel.
    pub fn uniform(width: usize, height: usize, albedo: Rgb, roughness: f64, normal: Vec3, depth: f64) -> Result<Self> {
        let n = width * height;
        Self::new(width, height, vec![albedo; n], vec![roughness; n], vec![normal; n], vec![depth; n])
    }

    pub fn with_confidence(mut self, confidence: Vec<f64>) -> Result<Self> {
        if confidence.len() != self.pixels() {
            return Err(Error::shape("confidence plane size mismatch"));
        }
        if confidence.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::domain("confidence outside [0, 1]"));
        }
        self.confidence = Some(confidence);
        Ok(self)
    }

    pub fn from_images(albedo: &HdrImage, roughness: &HdrImage, normal: &HdrImage, depth: &HdrImage) -> Result<Self> {
        let (w, h) = (albedo.width(), albedo.height());
        for img in [roughness, normal, depth] {
            if img.width() != w || img.height() != h {
                return Err(Error::shape("G-buffer images differ in size"));
            }
        }
        if normal.channels() != 3 {
            return Err(Error::shape("normal image needs 3 channels"));
        }
        Self::new(w, h, albedo.to_rgb_vec(), roughness.to_scalar_vec(), normal.to_rgb_vec(), depth.to_scalar_vec())
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
    pub fn albedo(&self) -> &[Rgb] {
        &self.albedo
    }
    pub fn roughness(&self) -> &[f64] {
        &self.roughness
    }
    pub fn normal(&self) -> &[Vec3] {
        &self.normal
    }
    pub fn depth(&self) -> &[f64] {
        &self.depth
    }
    pub fn confidence(&self) -> Option<&[f64]> {
        self.confidence.as_deref()
    }
}

fn check_env_shape(env: &SgEnvironment, g: &GBuffer) -> Result<()> {
    if let Some(vis) = env.visibility() {
        if vis.width() != g.width() || vis.height() != g.height() {
            return Err(Error::shape("visibility map and G-buffer differ in size"));
        }
    }
    Ok(())
}

fn pixel_weights(env: &SgEnvironment, p: usize) -> Option<&[f64]> {
    env.visibility().map(|v| v.at(p).expect("visibility shape checked"))
}

/// Cosine-weighted irradiance `∫ L(l) max(N·l, 0) dl` by hemisphere quadrature.
pub fn shading(env: &SgEnvironment, n: &Direction, pixel: Option<usize>, quad: &Quadrature) -> Result<Rgb> {
    let w = env.weights(pixel)?;
    Ok(shading_weighted(env, n, w, quad))
}

fn shading_weighted(env: &SgEnvironment, n: &Direction, mu: Option<&[f64]>, quad: &Quadrature) -> Rgb {
    let mut acc = Rgb::zeros();
    for (l, cos) in quad.nodes(n.vec()) {
        acc += env.eval_weighted(&l, mu) * cos;
    }
    acc * quad.weight()
}

/// `I_d = A/π · S` per pixel.
pub fn render_diffuse(g: &GBuffer, env: &SgEnvironment, quad: &Quadrature) -> Result<HdrImage> {
    check_env_shape(env, g)?;
    let px: Vec<Rgb> = (0..g.pixels())
        .into_par_iter()
        .map(|p| {
            let n = Direction::new_unchecked(g.normal[p]);
            let s = shading_weighted(env, &n, pixel_weights(env, p), quad);
            g.albedo[p].component_mul(&s) / PI
        })
        .collect();
    HdrImage::from_rgb(g.width, g.height, &px)
}

/// Unit vector from the surface point of pixel `p` toward the camera.
pub fn view_direction(g: &GBuffer, cam: &Camera, p: usize) -> Direction {
    let (x, y) = (p % g.width, p / g.width);
    let point = cam.unproject(x as f64, y as f64, g.depth[p]);
    Direction::normalize(cam.center() - point).unwrap_or(Direction::new_unchecked(g.normal[p]))
}

fn check_camera(g: &GBuffer, cam: &Camera) -> Result<()> {
    if cam.width() != g.width || cam.height() != g.height {
        return Err(Error::shape("camera and G-buffer differ in size"));
    }
    Ok(())
}

fn check_roughness(g: &GBuffer) -> Result<()> {
    if let Some(p) = g.roughness.iter().position(|r| *r <= 0.0) {
        return Err(Error::domain(format!("roughness 0 at pixel {p}: delta lobes are unsupported")));
    }
    Ok(())
}

fn specular_pixel(env: &SgEnvironment, n: &Vec3, v: &Vec3, roughness: f64, mu: Option<&[f64]>, quad: &Quadrature) -> Rgb {
    let mut acc = Rgb::zeros();
    for (l, cos) in quad.nodes(n) {
        let f = specular_brdf(n, v, l.vec(), roughness);
        if f > 0.0 {
            acc += env.eval_weighted(&l, mu) * (f * cos);
        }
    }
    acc * quad.weight()
}

/// Specular image by hemisphere quadrature of the microfacet BRDF.
pub fn render_specular(g: &GBuffer, env: &SgEnvironment, cam: &Camera, quad: &Quadrature) -> Result<HdrImage> {
    check_env_shape(env, g)?;
    check_camera(g, cam)?;
    check_roughness(g)?;
    let px: Vec<Rgb> = (0..g.pixels())
        .into_par_iter()
        .map(|p| {
            let v = view_direction(g, cam, p);
            specular_pixel(env, &g.normal[p], v.vec(), g.roughness[p], pixel_weights(env, p), quad)
        })
        .collect();
    HdrImage::from_rgb(g.width, g.height, &px)
}

/// `∫ B(v, l) max(N·l, 0) dl`: the fraction of a white furnace reflected specularly.
pub fn directional_albedo(n: &Direction, v: &Direction, roughness: f64, quad: &Quadrature) -> f64 {
    let mut acc = 0.0;
    for (l, cos) in quad.nodes(n.vec()) {
        acc += specular_brdf(n.vec(), v.vec(), l.vec(), roughness) * cos;
    }
    acc * quad.weight()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub full: HdrImage,
    pub diffuse: HdrImage,
    pub specular: HdrImage,
}

fn sum_images(a: &HdrImage, b: &HdrImage) -> Result<HdrImage> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    HdrImage::new(a.width(), a.height(), a.channels(), data)
}

/// Diffuse, specular and their sum.
pub fn render(g: &GBuffer, env: &SgEnvironment, cam: &Camera, cfg: &RenderConfig) -> Result<Rendered> {
    let diffuse = render_diffuse(g, env, &cfg.diffuse)?;
    let specular = render_specular(g, env, cam, &cfg.specular)?;
    let full = sum_images(&diffuse, &specular)?;
    Ok(Rendered { full, diffuse, specular })
}

/// Physically motivated inputs for one lobe's specular contribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpecEncoding {
    pub fresnel: Rgb,
    pub n_dot_h_sq: f64,
    pub n_dot_xi: f64,
    pub n_dot_v: f64,
    pub eta: Rgb,
    pub lambda: f64,
    pub roughness: f64,
    /// 1 iff `‖η‖₁ (N·ξ) > 0` and the half vector exists.
    pub mask: u8,
}

/// One encoding per lobe, treating the lobe axis as the light direction.
pub fn spec_encode(env: &SgEnvironment, n: &Direction, v: &Direction, roughness: f64) -> Vec<SpecEncoding> {
    env.lobes()
        .iter()
        .map(|lobe| {
            let n_dot_xi = n.dot(lobe.xi());
            let eta = *lobe.eta();
            let l1 = eta.x.abs() + eta.y.abs() + eta.z.abs();
            let (h, ok) = match half_vector(v, lobe.xi()) {
                Ok(h) => (h, true),
                Err(_) => (*n, false),
            };
            let n_dot_h = n.dot(&h);
            SpecEncoding {
                fresnel: Rgb::repeat(schlick(v.dot(&h))),
                n_dot_h_sq: n_dot_h * n_dot_h,
                n_dot_xi,
                n_dot_v: n.dot(v),
                eta,
                lambda: lobe.lambda(),
                roughness,
                mask: u8::from(ok && l1 * n_dot_xi > 0.0),
            }
        })
        .collect()
}

/// Monte-Carlo estimate of diffuse and specular images.
///
/// Diffuse uses cosine-weighted sampling, specular samples GGX half vectors.
/// Each pixel draws from its own ChaCha stream keyed by `(seed, pixel)`, so the
/// result does not depend on scheduling.
pub fn render_monte_carlo(g: &GBuffer, env: &SgEnvironment, cam: &Camera, samples: usize, seed: u64) -> Result<(HdrImage, HdrImage)> {
    check_env_shape(env, g)?;
    check_camera(g, cam)?;
    check_roughness(g)?;
    if samples == 0 {
        return Err(Error::domain("need at least one sample"));
    }
    let px: Vec<(Rgb, Rgb)> = (0..g.pixels())
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            let n = g.normal[p];
            let v = view_direction(g, cam, p);
            let mu = pixel_weights(env, p);
            let irr = mc_irradiance(env, &n, mu, samples, &mut rng);
            let spec = mc_specular(env, &n, v.vec(), g.roughness[p], mu, samples, &mut rng);
            (g.albedo[p].component_mul(&irr) / PI, spec)
        })
        .collect();
    let d: Vec<Rgb> = px.iter().map(|x| x.0).collect();
    let s: Vec<Rgb> = px.iter().map(|x| x.1).collect();
    Ok((HdrImage::from_rgb(g.width, g.height, &d)?, HdrImage::from_rgb(g.width, g.height, &s)?))
}

/// Monte-Carlo irradiance with cosine-weighted sampling.
pub fn mc_irradiance(env: &SgEnvironment, n: &Vec3, mu: Option<&[f64]>, samples: usize, rng: &mut impl Rng) -> Rgb {
    let (t, b) = tangent_frame(n);
    let mut acc = Rgb::zeros();
    for _ in 0..samples {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        let r = u1.sqrt();
        let phi = 2.0 * PI * u2;
        let l = t * (r * phi.cos()) + b * (r * phi.sin()) + n * (1.0 - u1).max(0.0).sqrt();
        // L cos / (cos / π)
        acc += env.eval_weighted(&Direction::new_unchecked(l), mu);
    }
    acc * (PI / samples as f64)
}

/// Monte-Carlo specular radiance with GGX half-vector sampling.
pub fn mc_specular(env: &SgEnvironment, n: &Vec3, v: &Vec3, roughness: f64, mu: Option<&[f64]>, samples: usize, rng: &mut impl Rng) -> Rgb {
    let alpha = ggx_alpha(roughness);
    let (t, b) = tangent_frame(n);
    let nv = n.dot(v);
    if nv <= 0.0 {
        return Rgb::zeros();
    }
    let mut acc = Rgb::zeros();
    for _ in 0..samples {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        let tan2 = alpha * alpha * u1 / (1.0 - u1).max(1e-300);
        let ct = 1.0 / (1.0 + tan2).sqrt();
        let st = (1.0 - ct * ct).max(0.0).sqrt();
        let phi = 2.0 * PI * u2;
        let h = t * (st * phi.cos()) + b * (st * phi.sin()) + n * ct;
        let vh = v.dot(&h);
        if vh <= 0.0 {
            continue;
        }
        let l = h * (2.0 * vh) - v;
        let nl = n.dot(&l);
        if nl <= 0.0 {
            continue;
        }
        // f cos / pdf with pdf(l) = D (N·h) / (4 v·h)
        let weight = schlick(vh) * smith_g2(nv, nl, alpha) * vh / (nv * ct);
        acc += env.eval_weighted(&Direction::new_unchecked(l / l.norm()), mu) * weight;
    }
    acc / samples as f64
}

/// Renders from per-pixel θ–φ environment maps by summing over every cell.
///
/// This is the uniform-sampling scheme: each cell acts as a point light at its
/// center, so narrow specular lobes alias against the grid.
pub fn render_uniform(g: &GBuffer, cam: &Camera, envmaps: &[EnvironmentMap]) -> Result<Rendered> {
    check_camera(g, cam)?;
    if envmaps.len() != g.pixels() {
        return Err(Error::shape(format!("{} environment maps for {} pixels", envmaps.len(), g.pixels())));
    }
    let px: Vec<(Rgb, Rgb)> = (0..g.pixels())
        .into_par_iter()
        .map(|p| {
            let m = &envmaps[p];
            let n = g.normal[p];
            let v = view_direction(g, cam, p);
            let (mut diff, mut spec) = (Rgb::zeros(), Rgb::zeros());
            for i in 0..m.rows() {
                let omega = m.cell_solid_angle(i);
                for j in 0..m.cols() {
                    let l = m.cell_direction(i, j);
                    let cos = n.dot(l.vec());
                    if cos <= 0.0 {
                        continue;
                    }
                    let li = m.at(i, j) * (cos * omega);
                    diff += li;
                    if g.roughness[p] > 0.0 {
                        spec += li * specular_brdf(&n, v.vec(), l.vec(), g.roughness[p]);
                    }
                }
            }
            (g.albedo[p].component_mul(&diff) / PI, spec)
        })
        .collect();
    let d: Vec<Rgb> = px.iter().map(|x| x.0).collect();
    let s: Vec<Rgb> = px.iter().map(|x| x.1).collect();
    let diffuse = HdrImage::from_rgb(g.width, g.height, &d)?;
    let specular = HdrImage::from_rgb(g.width, g.height, &s)?;
    let full = sum_images(&diffuse, &specular)?;
    Ok(Rendered { full, diffuse, specular })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envmap::decode_env;
    use crate::multiview::{Intrinsics, Pose};
    use crate::sg::SphericalGaussian;
    use approx::assert_relative_eq;
    use nalgebra::Rotation3;

    fn random_dir(rng: &mut impl Rng) -> Direction {
        let z: f64 = rng.gen_range(-1.0..1.0);
        Direction::from_angles(z.acos(), rng.gen_range(0.0..2.0 * PI))
    }

    fn upper(rng: &mut impl Rng, n: &Direction) -> Direction {
        loop {
            let d = random_dir(rng);
            if d.dot(n) > 0.05 {
                return d;
            }
        }
    }

    /// Camera at the origin looking down +z at a plane z = depth, whose normal faces the camera.
    fn setup(w: usize, h: usize, albedo: Rgb, rough: f64) -> (GBuffer, Camera) {
        let cam = Camera::new(
            Intrinsics::new(w as f64, w as f64, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0).unwrap(),
            Pose::identity(),
            w,
            h,
        )
        .unwrap();
        let g = GBuffer::uniform(w, h, albedo, rough, -Vec3::z(), 2.0).unwrap();
        (g, cam)
    }

    fn constant_env(l0: f64) -> SgEnvironment {
        SgEnvironment::new(vec![SphericalGaussian::constant(Rgb::repeat(l0)).unwrap()]).unwrap()
    }

    #[test]
    fn shading_of_constant_light_is_pi_l0() {
        let env = constant_env(0.7);
        let s = shading(&env, &Direction::from_angles(1.0, 2.0), None, &Quadrature::default()).unwrap();
        assert_relative_eq!(s, Rgb::repeat(0.7 * PI), max_relative = 1e-12);
    }

    #[test]
    fn shading_is_rotation_invariant() {
        let env = SgEnvironment::new(vec![
            SphericalGaussian::from_angles(0.3, 0.5, 6.0, Rgb::new(1.0, 0.5, 0.2)).unwrap(),
            SphericalGaussian::from_angles(1.8, 3.5, 2.0, Rgb::new(0.2, 0.5, 1.0)).unwrap(),
        ])
        .unwrap();
        let n = Direction::from_angles(0.6, 1.0);
        let rot = Rotation3::from_euler_angles(0.4, -1.1, 2.3);
        let q = Quadrature::new(64, 128).unwrap();
        let a = shading(&env, &n, None, &q).unwrap();
        let b = shading(&env.rotated(&rot), &n.rotated(&rot), None, &q).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-3);
    }

    #[test]
    fn shading_of_aligned_lobe_vs_monte_carlo() {
        let n = Direction::from_angles(0.9, 0.4);
        let env = SgEnvironment::new(vec![SphericalGaussian::from_direction(n, 5.0, Rgb::repeat(1.0)).unwrap()]).unwrap();
        let quad = shading(&env, &n, None, &Quadrature::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mc = mc_irradiance(&env, n.vec(), None, 1_000_000, &mut rng);
        assert!(((quad.x - mc.x) / mc.x).abs() <= 1e-2, "quad {} mc {}", quad.x, mc.x);
        // closed form for an aligned lobe: 2π η ∫₀¹ u e^{λ(u−1)} du
        let lam: f64 = 5.0;
        let exact = 2.0 * PI * (1.0 / lam - (1.0 - (-lam).exp()) / (lam * lam));
        // midpoint rule in cos θ: error ≈ h²/24 · ∫f'' for 32 bands
        assert!(((quad.x - exact) / exact).abs() < 2e-3);
    }

    #[test]
    fn furnace_and_linearity() {
        let (g, _) = setup(4, 3, Rgb::repeat(1.0), 0.5);
        let img = render_diffuse(&g, &constant_env(0.8), &Quadrature::default()).unwrap();
        for v in img.data() {
            assert!((*v as f64 - 0.8).abs() < 1e-6);
        }
        let (g0, _) = setup(2, 2, Rgb::zeros(), 0.5);
        assert!(render_diffuse(&g0, &constant_env(3.0), &Quadrature::default()).unwrap().data().iter().all(|v| *v == 0.0));
        let (g1, _) = setup(2, 2, Rgb::new(0.2, 0.3, 0.4), 0.5);
        let (g2, _) = setup(2, 2, Rgb::new(0.4, 0.6, 0.8), 0.5);
        let env = SgEnvironment::new(vec![SphericalGaussian::from_angles(2.5, 1.0, 3.0, Rgb::new(1.0, 2.0, 3.0)).unwrap()]).unwrap();
        let a = render_diffuse(&g1, &env, &Quadrature::default()).unwrap();
        let b = render_diffuse(&g2, &env, &Quadrature::default()).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_relative_eq!(2.0 * x, *y, max_relative = 1e-6);
        }
    }

    #[test]
    fn diffuse_rejects_mismatched_visibility() {
        let (g, _) = setup(2, 2, Rgb::repeat(0.5), 0.5);
        let env = constant_env(1.0).with_visibility(crate::sg::VisibilityMap::filled(3, 2, 1, 1.0).unwrap()).unwrap();
        assert!(matches!(render_diffuse(&g, &env, &Quadrature::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn specular_black_light_and_zero_roughness() {
        let (g, cam) = setup(2, 2, Rgb::repeat(0.5), 0.5);
        let img = render_specular(&g, &constant_env(0.0), &cam, &Quadrature::default()).unwrap();
        assert!(img.data().iter().all(|v| *v == 0.0));
        let (g, cam) = setup(2, 2, Rgb::repeat(0.5), 0.0);
        assert!(matches!(render_specular(&g, &constant_env(1.0), &cam, &Quadrature::default()), Err(Error::Domain(_))));
    }

    #[test]
    fn white_furnace_energy_bounded() {
        let q = Quadrature::new(256, 256).unwrap();
        let n = Direction::from_angles(0.0, 0.0);
        for rough in [0.2, 0.5, 1.0] {
            for theta_v in [0.0, 0.7, 1.4] {
                let v = Direction::from_angles(theta_v, 0.3);
                let e = directional_albedo(&n, &v, rough, &q);
                assert!(e <= 1.0 + 1e-2, "rough {rough} θv {theta_v}: {e}");
                assert!(e > 0.0);
            }
        }
    }

    #[test]
    fn brdf_is_reciprocal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = Direction::from_angles(0.5, 2.0);
        for _ in 0..1000 {
            let v = upper(&mut rng, &n);
            let l = upper(&mut rng, &n);
            let r = rng.gen_range(0.05..1.0);
            let a = specular_brdf(n.vec(), v.vec(), l.vec(), r);
            let b = specular_brdf(n.vec(), l.vec(), v.vec(), r);
            assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn reflect_and_half_vector() {
        let n = Direction::from_angles(0.4, 1.0);
        assert_relative_eq!(reflect(&n, &n).unwrap().vec(), n.vec(), epsilon = 1e-15);
        let (t, _) = tangent_frame(n.vec());
        let v = Direction::new(t).unwrap();
        assert_relative_eq!(reflect(&v, &n).unwrap().vec(), &-v.vec(), epsilon = 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let (v, n) = (random_dir(&mut rng), random_dir(&mut rng));
            assert!((reflect(&v, &n).unwrap().vec().norm() - 1.0).abs() < 1e-12);
        }
        let l = Direction::from_angles(1.0, 0.0);
        let h = half_vector(&l, &Direction::from_angles(1.0, PI)).unwrap();
        assert_relative_eq!(h.vec(), &Vec3::z(), epsilon = 1e-12);
        assert!(half_vector(&l, &-l).is_err());
    }

    #[test]
    fn tangent_frame_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let n = random_dir(&mut rng);
            let (t, b) = tangent_frame(n.vec());
            assert!((t.norm() - 1.0).abs() < 1e-12 && (b.norm() - 1.0).abs() < 1e-12);
            assert!(t.dot(n.vec()).abs() < 1e-12 && b.dot(n.vec()).abs() < 1e-12 && t.dot(&b).abs() < 1e-12);
            assert!((t.cross(&b) - n.vec()).norm() < 1e-12);
        }
    }

    #[test]
    fn encoding_at_normal_incidence() {
        let n = Direction::from_angles(0.3, 0.2);
        let env = SgEnvironment::new(vec![SphericalGaussian::from_direction(n, 4.0, Rgb::new(1.0, 2.0, 3.0)).unwrap()]).unwrap();
        let e = spec_encode(&env, &n, &n, 0.4)[0];
        assert_relative_eq!(e.fresnel, Rgb::repeat(F0), epsilon = 1e-12);
        assert_relative_eq!(e.n_dot_h_sq, 1.0, epsilon = 1e-12);
        assert_relative_eq!(e.n_dot_xi, 1.0, epsilon = 1e-12);
        assert_relative_eq!(e.n_dot_v, 1.0, epsilon = 1e-12);
        assert_eq!((e.mask, e.lambda, e.roughness), (1, 4.0, 0.4));
    }

    #[test]
    fn encoding_masks() {
        let n = Direction::new(Vec3::z()).unwrap();
        let v = Direction::from_angles(0.5, 0.0);
        let dark = SphericalGaussian::new(Vec3::z(), 4.0, Rgb::zeros()).unwrap();
        // N·ξ = −0.5
        let below = SphericalGaussian::from_angles(2.0 * PI / 3.0, 1.0, 4.0, Rgb::repeat(1.0)).unwrap();
        // ξ = −v: half vector undefined
        let anti = SphericalGaussian::from_direction(-v, 4.0, Rgb::repeat(1.0)).unwrap();
        let env = SgEnvironment::new(vec![dark, below, anti]).unwrap();
        let e = spec_encode(&env, &n, &v, 0.5);
        assert_relative_eq!(e[1].n_dot_xi, -0.5, epsilon = 1e-12);
        assert_eq!(e.iter().map(|x| x.mask).collect::<Vec<_>>(), vec![0, 0, 0]);
        for x in &e {
            assert!((-1.0..=1.0).contains(&x.n_dot_xi) && (0.0..=1.0).contains(&x.n_dot_h_sq));
        }
    }

    #[test]
    fn masked_lobes_carry_no_specular_energy() {
        // a zero-intensity lobe contributes nothing; a sharp lobe well below the
        // horizon contributes nothing measurable
        let (g, cam) = setup(2, 2, Rgb::repeat(0.5), 0.6);
        let q = Quadrature::new(64, 128).unwrap();
        let base = SphericalGaussian::from_angles(PI - 0.3, 0.2, 8.0, Rgb::repeat(2.0)).unwrap();
        let dark = SphericalGaussian::from_angles(PI - 0.2, 1.0, 3.0, Rgb::zeros()).unwrap();
        let below = SphericalGaussian::from_angles(0.6, 2.0, 100.0, Rgb::repeat(5.0)).unwrap();
        let n = Direction::new(g.normal()[0]).unwrap();
        let v = view_direction(&g, &cam, 0);
        let all = SgEnvironment::new(vec![base, dark, below]).unwrap();
        let masks: Vec<u8> = spec_encode(&all, &n, &v, 0.6).iter().map(|e| e.mask).collect();
        assert_eq!(masks, vec![1, 0, 0]);
        let kept = SgEnvironment::new(vec![base]).unwrap();
        let a = render_specular(&g, &all, &cam, &q).unwrap();
        let b = render_specular(&g, &kept, &cam, &q).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1e-12));
        }
    }

    #[test]
    fn uniform_renderer_converges_and_aliases() {
        let (g, cam) = setup(3, 3, Rgb::repeat(0.6), 0.3);
        let lobe = SphericalGaussian::new(Vec3::new(0.1, 0.05, -1.0).normalize(), 30.0, Rgb::repeat(4.0)).unwrap();
        let env = SgEnvironment::new(vec![lobe]).unwrap();
        let reference = render(
            &g,
            &env,
            &cam,
            &RenderConfig { diffuse: Quadrature::new(256, 256).unwrap(), specular: Quadrature::new(1024, 512).unwrap() },
        )
        .unwrap();
        let err = |rows: usize, cols: usize| {
            let maps: Vec<_> = (0..g.pixels()).map(|_| decode_env(&env, rows, cols, None).unwrap()).collect();
            let u = render_uniform(&g, &cam, &maps).unwrap();
            u.specular.data().iter().zip(reference.specular.data()).map(|(a, b)| ((a - b) / b).abs() as f64).fold(0.0, f64::max)
        };
        let coarse = err(8, 16);
        let fine = err(256, 512);
        assert!(coarse > 0.1, "coarse grid error {coarse}");
        assert!(fine < 0.02, "fine grid error {fine}");
    }

    #[test]
    fn monte_carlo_is_seed_deterministic() {
        let (g, cam) = setup(2, 2, Rgb::repeat(0.5), 0.5);
        let env = SgEnvironment::new(vec![SphericalGaussian::from_angles(PI - 0.4, 0.0, 4.0, Rgb::repeat(1.0)).unwrap()]).unwrap();
        let a = render_monte_carlo(&g, &env, &cam, 1000, 3).unwrap();
        let b = render_monte_carlo(&g, &env, &cam, 1000, 3).unwrap();
        let c = render_monte_carlo(&g, &env, &cam, 1000, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
