//! Pinhole cameras, depth reprojection and occlusion handling across views.
//!
//! Conventions: poses map world to camera (`x_c = R x_w + t`), the camera looks
//! down `+z` with `y` pointing down the image, pixel `(x, y)` has its center at
//! image coordinates `(u, v) = (x, y)`, and depth maps hold camera-space `z`.

use nalgebra::Matrix3;
use rayon::prelude::*;

use crate::brdf::GBuffer;
use crate::envmap::HdrImage;
use crate::vsg::Aabb;
use crate::{Error, Result, Vec3};

/// Cap on `−log e_k` before normalization; `e_k = 0` would otherwise be infinite.
pub const RAW_WEIGHT_CAP: f64 = 50.0;
/// Occlusion mask threshold in meters.
pub const DEFAULT_MASK_THRESHOLD: f64 = 0.05;
/// Confidence above which pixels take part in depth-scale regression.
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.9;
/// Depth uncertainty of the Gaussian splatting kernel, meters.
pub const DEFAULT_SIGMA_D: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite() && cx.is_finite() && cy.is_finite()) {
            return Err(Error::domain("focal lengths must be positive and finite"));
        }
        Ok(Intrinsics { fx, fy, cx, cy })
    }
}

/// Rigid world-to-camera transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl Pose {
    /// Rejects rotations that are not orthonormal with determinant 1 (tolerance 1e-6).
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(ortho <= 1e-6 && (det - 1.0).abs() <= 1e-6) || !translation.iter().all(|t| t.is_finite()) {
            return Err(Error::domain(format!("invalid rotation (orthogonality error {ortho:e}, det {det})")));
        }
        Ok(Pose { rotation, translation })
    }

    pub fn identity() -> Self {
        Pose { rotation: Matrix3::identity(), translation: Vec3::zeros() }
    }

    /// Camera at `eye` looking at `target`, with image-up roughly along `up`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let fwd = (target - eye).try_normalize(1e-12).ok_or_else(|| Error::domain("eye equals target"))?;
        let right = fwd.cross(&up).try_normalize(1e-12).ok_or_else(|| Error::domain("up parallel to view"))?;
        let down = fwd.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        Pose::new(r, -(r * eye))
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn to_camera(&self, world: &Vec3) -> Vec3 {
        self.rotation * world + self.translation
    }

    pub fn to_world(&self, cam: &Vec3) -> Vec3 {
        self.rotation.transpose() * (cam - self.translation)
    }
}

/// Intrinsics, pose and image size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    intrinsics: Intrinsics,
    pose: Pose,
    width: usize,
    height: usize,
}

/// Image position and camera-space depth of a projected point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, pose: Pose, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape("camera image size must be positive"));
        }
        Ok(Camera { intrinsics, pose, width, height })
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }
    pub fn pose(&self) -> &Pose {
        &self.pose
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.pose.to_world(&Vec3::zeros())
    }

    /// Pinhole projection; `None` for points on or behind the image plane.
    pub fn project(&self, world: &Vec3) -> Option<Projection> {
        let p = self.pose.to_camera(world);
        if !(p.z > 0.0) {
            return None;
        }
        let k = &self.intrinsics;
        Some(Projection { u: k.fx * p.x / p.z + k.cx, v: k.fy * p.y / p.z + k.cy, z: p.z })
    }

    /// World point at image position `(u, v)` with camera-space depth `depth`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let k = &self.intrinsics;
        let c = Vec3::new((u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth);
        self.pose.to_world(&c)
    }

    /// True when `(u, v)` lies inside the bilinear support `[0, W−1] × [0, H−1]`.
    pub fn in_frame(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }
}

/// Free-function form of [`Camera::project`] returning `(u, v, z)`.
pub fn project(cam: &Camera, world: &Vec3) -> Option<(f64, f64, f64)> {
    cam.project(world).map(|p| (p.u, p.v, p.z))
}

/// Free-function form of [`Camera::unproject`].
pub fn unproject(cam: &Camera, u: f64, v: f64, depth: f64) -> Vec3 {
    cam.unproject(u, v, depth)
}

/// One view: camera plus its image, depth and confidence planes.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub camera: Camera,
    pub image: Option<HdrImage>,
    pub depth: Vec<f64>,
    pub confidence: Option<Vec<f64>>,
}

impl CameraView {
    pub fn new(camera: Camera, depth: Vec<f64>) -> Result<Self> {
        if depth.len() != camera.width * camera.height {
            return Err(Error::shape("depth plane does not match camera size"));
        }
        Ok(CameraView { camera, image: None, depth, confidence: None })
    }

    pub fn with_image(mut self, image: HdrImage) -> Result<Self> {
        if image.width() != self.camera.width || image.height() != self.camera.height {
            return Err(Error::shape("image does not match camera size"));
        }
        self.image = Some(image);
        Ok(self)
    }

    pub fn with_confidence(mut self, confidence: Vec<f64>) -> Result<Self> {
        if confidence.len() != self.depth.len() {
            return Err(Error::shape("confidence plane does not match camera size"));
        }
        self.confidence = Some(confidence);
        Ok(self)
    }

    /// Bilinear depth lookup at `(u, v)`; `None` outside the frame.
    pub fn depth_at(&self, u: f64, v: f64) -> Option<f64> {
        self.camera.in_frame(u, v).then(|| bilinear(&self.depth, self.camera.width, self.camera.height, u, v))
    }
}

/// Bilinear interpolation of a row-major plane at in-frame `(u, v)`.
pub fn bilinear(plane: &[f64], width: usize, height: usize, u: f64, v: f64) -> f64 {
    let x0 = (u.floor() as usize).min(width.saturating_sub(2));
    let y0 = (v.floor() as usize).min(height.saturating_sub(2));
    let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
    let (fx, fy) = ((u - x0 as f64).clamp(0.0, 1.0), (v - y0 as f64).clamp(0.0, 1.0));
    let at = |x: usize, y: usize| plane[y * width + x];
    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
    let bot = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// `K ≥ 2` views and the index of the target view.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewSet {
    views: Vec<CameraView>,
    target: usize,
}

impl MultiViewSet {
    pub fn new(views: Vec<CameraView>, target: usize) -> Result<Self> {
        if views.len() < 2 {
            return Err(Error::domain("a multi-view set needs at least two views"));
        }
        if target >= views.len() {
            return Err(Error::Index { index: target, len: views.len() });
        }
        Ok(MultiViewSet { views, target })
    }

    pub fn views(&self) -> &[CameraView] {
        &self.views
    }

    pub fn target(&self) -> &CameraView {
        &self.views[self.target]
    }

    pub fn target_index(&self) -> usize {
        self.target
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// `e_k = |d_k − z_k|` for every view `k`, where the target pixel is lifted with
/// its own depth and reprojected. Out-of-frame or behind-camera views get `+∞`.
pub fn depth_projection_error(set: &MultiViewSet, pixel: (usize, usize)) -> Result<Vec<f64>> {
    let t = set.target();
    let (w, h) = (t.camera.width, t.camera.height);
    if pixel.0 >= w || pixel.1 >= h {
        return Err(Error::Index { index: pixel.1 * w + pixel.0, len: w * h });
    }
    let d = t.depth[pixel.1 * w + pixel.0];
    if !(d.is_finite() && d > 0.0) {
        return Err(Error::domain(format!("target pixel {pixel:?} has no valid depth")));
    }
    let point = t.camera.unproject(pixel.0 as f64, pixel.1 as f64, d);
    Ok(set
        .views
        .iter()
        .map(|view| match view.camera.project(&point) {
            Some(p) => match view.depth_at(p.u, p.v) {
                Some(dk) => (dk - p.z).abs(),
                None => f64::INFINITY,
            },
            None => f64::INFINITY,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LogBase {
    #[default]
    Natural,
    Ten,
}

/// `w = max(−log e, 0) / ‖max(−log e, 0)‖₁`, raw terms capped at
/// [`RAW_WEIGHT_CAP`]; an all-zero numerator falls back to uniform `1/K`.
#[allow(clippy::manual_clamp)]
pub fn multiview_weight(e: &[f64], base: LogBase) -> Vec<f64> {
    let raw: Vec<f64> = e
        .iter()
        .map(|&x| {
            let l = match base {
                LogBase::Natural => x.ln(),
                LogBase::Ten => x.log10(),
            };
            // max/min rather than clamp: a NaN log maps to weight 0
            (-l).max(0.0).min(RAW_WEIGHT_CAP)
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    if sum > 0.0 {
        raw.iter().map(|r| r / sum).collect()
    } else {
        vec![1.0 / e.len() as f64; e.len()]
    }
}

/// `(1, m_1, …, m_K)` with `m_k = 1` iff `e_k < c_th`.
pub fn multiview_mask(e: &[f64], c_th: f64) -> Vec<u8> {
    std::iter::once(1).chain(e.iter().map(|&x| u8::from(x < c_th))).collect()
}

/// Least-squares `τ` minimizing `Σ (τ·pred − ref)²` over pixels with confidence above `threshold`.
pub fn estimate_depth_scale(pred: &[f64], reference: &[f64], confidence: &[f64], threshold: f64) -> Result<f64> {
    if pred.len() != reference.len() || pred.len() != confidence.len() {
        return Err(Error::shape("depth planes differ in size"));
    }
    let (mut num, mut den, mut count) = (0.0, 0.0, 0usize);
    for ((p, r), c) in pred.iter().zip(reference).zip(confidence) {
        if *c > threshold && p.is_finite() && r.is_finite() {
            num += p * r;
            den += p * p;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::NoData(format!("no pixel with confidence above {threshold}")));
    }
    if den <= 0.0 {
        return Err(Error::NoData("predicted depth is zero on all confident pixels".into()));
    }
    Ok(num / den)
}

/// Depth-agreement kernel used when splatting pixels into a volume.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RhoKernel {
    /// `ρ = exp(−C (d − D)²)` with per-pixel confidence `C`.
    Confidence,
    /// `ρ = exp(−(d − D)² / 2σ_d²)`.
    Gaussian { sigma_d: f64 },
}

impl RhoKernel {
    pub fn rho(&self, d: f64, depth: f64, confidence: f64) -> f64 {
        let gap = d - depth;
        match self {
            RhoKernel::Confidence => (-confidence * gap * gap).exp(),
            RhoKernel::Gaussian { sigma_d } => (-gap * gap / (2.0 * sigma_d * sigma_d)).exp(),
        }
    }
}

impl std::str::FromStr for RhoKernel {
    type Err = Error;
    /// `mair` selects the confidence kernel, `mairpp` the Gaussian with σ_d = 0.15 m.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mair" => Ok(RhoKernel::Confidence),
            "mairpp" => Ok(RhoKernel::Gaussian { sigma_d: DEFAULT_SIGMA_D }),
            _ => Err(Error::domain(format!("splat variant must be mair|mairpp, got {s:?}"))),
        }
    }
}

/// Per-voxel features `ρ·[I, N, A, R, extra…]` and the kernel values `ρ`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisibleSurfaceVolume {
    pub dims: [usize; 3],
    pub bbox: Aabb,
    pub channels: usize,
    pub features: Vec<f64>,
    pub rho: Vec<f64>,
}

/// Base channel count: image RGB, normal, albedo, roughness.
pub const BASE_SPLAT_CHANNELS: usize = 10;

impl VisibleSurfaceVolume {
    pub fn feature(&self, x: usize, y: usize, z: usize) -> &[f64] {
        let i = x + self.dims[0] * (y + self.dims[1] * z);
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    pub fn rho_at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.rho[x + self.dims[0] * (y + self.dims[1] * z)]
    }
}

/// Extra per-pixel channels appended after the base ten (specular image, shading, lighting features…).
#[derive(Clone, Copy, Debug)]
pub struct ExtraChannels<'a> {
    pub channels: usize,
    pub data: &'a [f64],
}

/// Splats an image and G-buffer into a voxel grid. Each voxel center is
/// projected into the camera; the nearest pixel's attributes are scaled by the
/// depth-agreement kernel. Voxels projecting outside the frame stay zero.
///
/// The confidence kernel reads the G-buffer's confidence plane and fails if it is absent.
pub fn splat_visible_surface(
    image: &HdrImage,
    g: &GBuffer,
    extra: Option<ExtraChannels<'_>>,
    cam: &Camera,
    dims: [usize; 3],
    bbox: Aabb,
    kernel: RhoKernel,
) -> Result<VisibleSurfaceVolume> {
    let (w, h) = (g.width(), g.height());
    if image.width() != w || image.height() != h || cam.width() != w || cam.height() != h {
        return Err(Error::shape("image, G-buffer and camera differ in size"));
    }
    if dims.contains(&0) {
        return Err(Error::shape("volume dimensions must be positive"));
    }
    let confidence = match kernel {
        RhoKernel::Confidence => Some(g.confidence().ok_or_else(|| Error::domain("confidence kernel needs a confidence plane"))?),
        RhoKernel::Gaussian { sigma_d } => {
            if !(sigma_d > 0.0) {
                return Err(Error::domain("sigma_d must be positive"));
            }
            None
        }
    };
    let n_extra = match extra {
        Some(e) if e.data.len() != e.channels * w * h => return Err(Error::shape("extra channels do not match image size")),
        Some(e) => e.channels,
        None => 0,
    };
    let channels = BASE_SPLAT_CHANNELS + n_extra;
    let cell = Vec3::new(bbox.size().x / dims[0] as f64, bbox.size().y / dims[1] as f64, bbox.size().z / dims[2] as f64);
    let count = dims[0] * dims[1] * dims[2];
    let per_voxel: Vec<(f64, Vec<f64>)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let (x, y, z) = (i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1]));
            let center = bbox.min + Vec3::new((x as f64 + 0.5) * cell.x, (y as f64 + 0.5) * cell.y, (z as f64 + 0.5) * cell.z);
            let mut f = vec![0.0; channels];
            let Some(p) = cam.project(&center) else {
                return (0.0, f);
            };
            let (pu, pv) = (p.u.round(), p.v.round());
            if pu < 0.0 || pv < 0.0 || pu >= w as f64 || pv >= h as f64 {
                return (0.0, f);
            }
            let px = pv as usize * w + pu as usize;
            let rho = kernel.rho(p.z, g.depth()[px], confidence.map_or(0.0, |c| c[px]));
            let rgb = image.rgb(px);
            let (n, a) = (g.normal()[px], g.albedo()[px]);
            f[..3].copy_from_slice(rgb.as_slice());
            f[3..6].copy_from_slice(n.as_slice());
            f[6..9].copy_from_slice(a.as_slice());
            f[9] = g.roughness()[px];
            if let Some(e) = extra {
                f[BASE_SPLAT_CHANNELS..].copy_from_slice(&e.data[px * e.channels..(px + 1) * e.channels]);
            }
            for v in f.iter_mut() {
                *v *= rho;
            }
            (rho, f)
        })
        .collect();
    let mut rho = Vec::with_capacity(count);
    let mut features = Vec::with_capacity(count * channels);
    for (r, f) in per_voxel {
        rho.push(r);
        features.extend(f);
    }
    Ok(VisibleSurfaceVolume { dims, bbox, channels, features, rho })
}
