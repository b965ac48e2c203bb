//! Volumetric spherical-Gaussian grids and ray compositing.
//!
//! Each voxel holds opacity `α` and one SG lobe `(η, ξ, λ)`. Radiance arriving
//! along a ray is composited front to back with weights
//! `ω_n = Π_{m<n}(1 − α_m) · α_n`, either by evaluating every sample's lobe and
//! summing ([`composite_sg_before`]) or by summing the lobe parameters and
//! evaluating a single lobe ([`composite_sg_after`]).
//!
//! # Binary format
//!
//! ```text
//! VSG 1\n
//! dims X Y Z\n
//! bbox min_x min_y min_z max_x max_y max_z\n
//! channels alpha eta_r eta_g eta_b xi_x xi_y xi_z lambda\n
//! <X·Y·Z·8 little-endian f32>
//! ```
//!
//! Voxels are stored with `x` varying fastest, then `y`, then `z`; the eight
//! channels of a voxel are contiguous in the order given on the `channels` line.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::sg::{sg_value, Direction};
use crate::{Error, Result, Rgb, Vec3};

/// Channels per voxel: α, η (3), ξ (3), λ.
pub const CHANNELS: usize = 8;
/// Default number of samples per ray.
pub const DEFAULT_SAMPLES: usize = 128;
/// Default grid edge length.
pub const DEFAULT_GRID: usize = 128;

const MAGIC: &str = "VSG 1";
const CHANNEL_LINE: &str = "channels alpha eta_r eta_g eta_b xi_x xi_y xi_z lambda";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if (0..3).any(|k| !(max[k] > min[k]) || !min[k].is_finite() || !max[k].is_finite()) {
            return Err(Error::domain("bounding box must have positive finite extent"));
        }
        Ok(Aabb { min, max })
    }

    pub fn size(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    /// Parametric interval `[t0, t1]` (with `t0 ≥ 0`) where the ray is inside the box.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            if dir[k] == 0.0 {
                if origin[k] < self.min[k] || origin[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[k];
            let (mut a, mut b) = ((self.min[k] - origin[k]) * inv, (self.max[k] - origin[k]) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t0 < t1).then_some((t0, t1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelRecord {
    pub alpha: f64,
    pub eta: Rgb,
    pub xi: Vec3,
    pub lambda: f64,
}

impl VoxelRecord {
    /// Fully transparent, black record; what out-of-box samples see.
    pub const EMPTY: VoxelRecord = VoxelRecord { alpha: 0.0, eta: Rgb::new(0.0, 0.0, 0.0), xi: Vec3::new(0.0, 0.0, 1.0), lambda: 0.0 };

    pub fn new(alpha: f64, eta: Rgb, xi: Vec3, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::domain(format!("opacity {alpha} outside [0, 1]")));
        }
        if eta.iter().any(|c| !c.is_finite() || *c < 0.0) || !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::domain("voxel intensity and sharpness must be finite and >= 0"));
        }
        let xi = *Direction::new(xi)?.vec();
        Ok(VoxelRecord { alpha, eta, xi, lambda })
    }

    /// The voxel's SG radiance toward `-l`.
    #[inline]
    pub fn radiance(&self, l: &Direction) -> Rgb {
        sg_value(&self.eta, self.lambda, &self.xi, &-l.vec())
    }
}

/// How voxel records are reconstructed at sample positions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Interpolation {
    #[default]
    Trilinear,
    Nearest,
}

impl std::str::FromStr for Interpolation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trilinear" => Ok(Interpolation::Trilinear),
            "nearest" => Ok(Interpolation::Nearest),
            _ => Err(Error::domain(format!("unknown interpolation {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VsgVolume {
    dims: [usize; 3],
    bbox: Aabb,
    voxels: Vec<VoxelRecord>,
}

impl VsgVolume {
    pub fn new(dims: [usize; 3], bbox: Aabb, voxels: Vec<VoxelRecord>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::shape("volume dimensions must be positive"));
        }
        if voxels.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::shape(format!("{} voxels for dims {:?}", voxels.len(), dims)));
        }
        if voxels.iter().any(|v| !(0.0..=1.0).contains(&v.alpha)) {
            return Err(Error::domain("voxel opacity outside [0, 1]"));
        }
        Ok(VsgVolume { dims, bbox, voxels })
    }

    pub fn homogeneous(dims: [usize; 3], bbox: Aabb, record: VoxelRecord) -> Result<Self> {
        Self::new(dims, bbox, vec![record; dims[0] * dims[1] * dims[2]])
    }

    /// Volume with every voxel produced by `f(ix, iy, iz)`.
    pub fn from_fn(dims: [usize; 3], bbox: Aabb, mut f: impl FnMut(usize, usize, usize) -> VoxelRecord) -> Result<Self> {
        let mut voxels = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    voxels.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, bbox, voxels)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn bbox(&self) -> &Aabb {
        &self.bbox
    }

    pub fn voxels(&self) -> &[VoxelRecord] {
        &self.voxels
    }

    #[inline]
    pub fn voxel(&self, x: usize, y: usize, z: usize) -> &VoxelRecord {
        &self.voxels[x + self.dims[0] * (y + self.dims[1] * z)]
    }

    pub fn voxel_size(&self) -> Vec3 {
        let s = self.bbox.size();
        Vec3::new(s.x / self.dims[0] as f64, s.y / self.dims[1] as f64, s.z / self.dims[2] as f64)
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let c = self.voxel_size();
        self.bbox.min + Vec3::new((x as f64 + 0.5) * c.x, (y as f64 + 0.5) * c.y, (z as f64 + 0.5) * c.z)
    }

    /// Reconstructs a record at world point `p`. Points outside the box are [`VoxelRecord::EMPTY`].
    pub fn lookup(&self, p: &Vec3, interp: Interpolation) -> VoxelRecord {
        if !self.bbox.contains(p) {
            return VoxelRecord::EMPTY;
        }
        let cell = self.voxel_size();
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for k in 0..3 {
            let d = self.dims[k];
            let c = ((p[k] - self.bbox.min[k]) / cell[k] - 0.5).clamp(0.0, (d - 1) as f64);
            match interp {
                Interpolation::Nearest => base[k] = (c.round() as usize).min(d - 1),
                Interpolation::Trilinear => {
                    let i = (c.floor() as usize).min(d.saturating_sub(2));
                    base[k] = i;
                    frac[k] = if d == 1 { 0.0 } else { c - i as f64 };
                }
            }
        }
        if interp == Interpolation::Nearest {
            return *self.voxel(base[0], base[1], base[2]);
        }

        let mut alpha = 0.0;
        let mut eta = Rgb::zeros();
        let mut xi = Vec3::zeros();
        let mut lambda = 0.0;
        let mut heaviest = (0.0, Vec3::z());
        for corner in 0..8 {
            let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for k in 0..3 {
                w *= if off[k] == 1 { frac[k] } else { 1.0 - frac[k] };
                idx[k] = (base[k] + off[k]).min(self.dims[k] - 1);
            }
            if w == 0.0 {
                continue;
            }
            let v = self.voxel(idx[0], idx[1], idx[2]);
            alpha += w * v.alpha;
            eta += v.eta * w;
            xi += v.xi * w;
            lambda += w * v.lambda;
            if w > heaviest.0 {
                heaviest = (w, v.xi);
            }
        }
        let n = xi.norm();
        let xi = if n > 1e-12 { xi / n } else { heaviest.1 };
        VoxelRecord { alpha: alpha.clamp(0.0, 1.0), eta, xi, lambda }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let [x, y, z] = self.dims;
        let (a, b) = (self.bbox.min, self.bbox.max);
        let header = format!("{MAGIC}\ndims {x} {y} {z}\nbbox {} {} {} {} {} {}\n{CHANNEL_LINE}\n", a.x, a.y, a.z, b.x, b.y, b.z);
        let mut out = Vec::with_capacity(header.len() + self.voxels.len() * CHANNELS * 4);
        out.extend_from_slice(header.as_bytes());
        for v in &self.voxels {
            for c in [v.alpha, v.eta.x, v.eta.y, v.eta.z, v.xi.x, v.xi.y, v.xi.z, v.lambda] {
                out.extend_from_slice(&(c as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut line = |what: &str| -> Result<(usize, &str)> {
            let start = pos;
            let end = bytes[pos..]
                .iter()
                .position(|b| *b == b'\n')
                .map(|i| pos + i)
                .ok_or(Error::Parse { offset: start, msg: format!("missing {what} line") })?;
            pos = end + 1;
            let s = std::str::from_utf8(&bytes[start..end])
                .map_err(|_| Error::Parse { offset: start, msg: format!("{what} line is not UTF-8") })?;
            Ok((start, s))
        };
        let bad = |offset: usize, msg: String| Error::Parse { offset, msg };

        let (off, magic) = line("magic")?;
        if magic != MAGIC {
            return Err(bad(off, format!("bad magic {magic:?}")));
        }
        let (off, dims_line) = line("dims")?;
        let dims: Vec<usize> = match dims_line.strip_prefix("dims ") {
            Some(rest) => rest
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(off, format!("dims: {e}")))?,
            None => return Err(bad(off, "expected dims line".into())),
        };
        if dims.len() != 3 || dims.contains(&0) {
            return Err(bad(off, "dims needs three positive integers".into()));
        }
        let (off, bbox_line) = line("bbox")?;
        let bb: Vec<f64> = match bbox_line.strip_prefix("bbox ") {
            Some(rest) => rest
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(off, format!("bbox: {e}")))?,
            None => return Err(bad(off, "expected bbox line".into())),
        };
        if bb.len() != 6 {
            return Err(bad(off, "bbox needs six numbers".into()));
        }
        let bbox = Aabb::new(Vec3::new(bb[0], bb[1], bb[2]), Vec3::new(bb[3], bb[4], bb[5])).map_err(|e| bad(off, e.to_string()))?;
        let (off, ch) = line("channels")?;
        if ch != CHANNEL_LINE {
            return Err(bad(off, format!("unsupported channel layout {ch:?}")));
        }

        let count = dims[0] * dims[1] * dims[2];
        let need = count * CHANNELS * 4;
        let have = bytes.len() - pos;
        if have != need {
            return Err(bad(bytes.len().min(pos + need), format!("payload has {have} bytes, expected {need}")));
        }
        let mut voxels = Vec::with_capacity(count);
        for (i, chunk) in bytes[pos..].chunks_exact(CHANNELS * 4).enumerate() {
            let mut c = [0.0f64; CHANNELS];
            for (k, v) in c.iter_mut().enumerate() {
                let f = f32::from_le_bytes([chunk[4 * k], chunk[4 * k + 1], chunk[4 * k + 2], chunk[4 * k + 3]]);
                if !f.is_finite() {
                    return Err(bad(pos + i * CHANNELS * 4 + 4 * k, "non-finite voxel value".into()));
                }
                *v = f as f64;
            }
            let xi = Vec3::new(c[4], c[5], c[6]);
            let n = xi.norm();
            if (n - 1.0).abs() > 1e-5 {
                return Err(bad(pos + i * CHANNELS * 4 + 16, format!("voxel axis norm {n}")));
            }
            let xi = if (n - 1.0).abs() > crate::sg::UNIT_TOLERANCE { xi / n } else { xi };
            let rec =
                VoxelRecord::new(c[0], Rgb::new(c[1], c[2], c[3]), xi, c[7]).map_err(|e| bad(pos + i * CHANNELS * 4, e.to_string()))?;
            voxels.push(rec);
        }
        Self::new([dims[0], dims[1], dims[2]], bbox, voxels)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Samples along one ray, ordered near to far.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySampleSet {
    pub origin: Vec3,
    pub dir: Direction,
    pub t: Vec<f64>,
    pub records: Vec<VoxelRecord>,
}

impl RaySampleSet {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }
}

/// Places `n_r` samples at the midpoints of `n_r` equal segments of the ray's
/// box intersection. A ray that misses the box yields an empty set.
pub fn sample_ray(vol: &VsgVolume, origin: Vec3, dir: Vec3, n_r: usize, interp: Interpolation) -> Result<RaySampleSet> {
    let dir = Direction::normalize(dir)?;
    let mut set = RaySampleSet { origin, dir, t: Vec::with_capacity(n_r), records: Vec::with_capacity(n_r) };
    fill_samples(vol, &mut set, n_r, interp)?;
    Ok(set)
}

fn fill_samples(vol: &VsgVolume, set: &mut RaySampleSet, n_r: usize, interp: Interpolation) -> Result<()> {
    if n_r == 0 {
        return Err(Error::domain("need at least one sample per ray"));
    }
    set.t.clear();
    set.records.clear();
    let d = *set.dir.vec();
    let Some((t0, t1)) = vol.bbox.intersect(&set.origin, &d) else {
        return Ok(());
    };
    let step = (t1 - t0) / n_r as f64;
    for n in 0..n_r {
        let t = t0 + (n as f64 + 0.5) * step;
        set.t.push(t);
        set.records.push(vol.lookup(&(set.origin + d * t), interp));
    }
    Ok(())
}

/// Front-to-back compositing weights `ω_n` and the residual transmittance `Π(1 − α_n)`.
pub fn compositing_weights(records: &[VoxelRecord]) -> (Vec<f64>, f64) {
    let mut trans = 1.0;
    let w = records
        .iter()
        .map(|r| {
            let w = trans * r.alpha;
            trans *= 1.0 - r.alpha;
            w
        })
        .collect();
    (w, trans)
}

fn before_impl(records: &[VoxelRecord], l: &Direction, evals: &mut u64) -> Rgb {
    let mut trans = 1.0;
    let mut acc = Rgb::zeros();
    for r in records {
        acc += r.radiance(l) * (trans * r.alpha);
        trans *= 1.0 - r.alpha;
    }
    *evals += records.len() as u64;
    acc
}

fn after_impl(records: &[VoxelRecord], l: &Direction, evals: &mut u64) -> Rgb {
    if records.is_empty() {
        return Rgb::zeros();
    }
    let mut trans = 1.0;
    let mut eta = Rgb::zeros();
    let mut xi = Vec3::zeros();
    let mut lambda = 0.0;
    for r in records {
        let w = trans * r.alpha;
        eta += r.eta * w;
        xi += r.xi * w;
        lambda += w * r.lambda;
        trans *= 1.0 - r.alpha;
    }
    *evals += 1;
    // the composited axis is used as-is, without renormalization
    sg_value(&eta, lambda, &xi, &-l.vec())
}

/// `Σ_n ω_n G(−l; η_n, λ_n, ξ_n)`: one lobe evaluation per sample.
pub fn composite_sg_before(samples: &RaySampleSet, l: &Direction) -> Rgb {
    before_impl(&samples.records, l, &mut 0)
}

/// `G(−l; Σω_nη_n, Σω_nλ_n, Σω_nξ_n)`: a single lobe evaluation per ray.
pub fn composite_sg_after(samples: &RaySampleSet, l: &Direction) -> Rgb {
    after_impl(&samples.records, l, &mut 0)
}

/// Which side of the lobe evaluation the compositing happens on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    /// Evaluate each sample's SG, then composite radiance.
    Before,
    /// Composite SG parameters, then evaluate once.
    After,
}

impl Order {
    pub fn name(&self) -> &'static str {
        match self {
            Order::Before => "before",
            Order::After => "after",
        }
    }

    pub fn composite(&self, samples: &RaySampleSet, l: &Direction) -> Rgb {
        match self {
            Order::Before => composite_sg_before(samples, l),
            Order::After => composite_sg_after(samples, l),
        }
    }
}

impl std::str::FromStr for Order {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "before" => Ok(Order::Before),
            "after" => Ok(Order::After),
            _ => Err(Error::domain(format!("order must be before|after, got {s:?}"))),
        }
    }
}

/// Radiance arriving at `origin` from direction `dir`, i.e. compositing along
/// the ray with `l = dir`.
pub fn trace(vol: &VsgVolume, origin: Vec3, dir: Vec3, n_r: usize, order: Order, interp: Interpolation) -> Result<Rgb> {
    let s = sample_ray(vol, origin, dir, n_r, interp)?;
    Ok(order.composite(&s, &s.dir))
}

/// Uniform random rays starting inside the volume, so every ray yields `n_r` samples.
pub fn random_rays(vol: &VsgVolume, count: usize, seed: u64) -> Vec<(Vec3, Direction)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = vol.bbox();
    (0..count)
        .map(|_| {
            let o = Vec3::new(rng.gen_range(b.min.x..b.max.x), rng.gen_range(b.min.y..b.max.y), rng.gen_range(b.min.z..b.max.z));
            let z: f64 = rng.gen_range(-1.0..1.0);
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            (o, Direction::from_angles(z.acos(), phi))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub n_r: usize,
    pub rays: usize,
    pub g_evals_before: u64,
    pub g_evals_after: u64,
    /// Median wall time over the runs, seconds.
    pub seconds_before: f64,
    pub seconds_after: f64,
    /// Sum of all composited radiance per order; keeps the work observable.
    pub checksum_before: Rgb,
    pub checksum_after: Rgb,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Rays sampled together before their compositing passes are timed.
const BENCH_CHUNK: usize = 512;

fn time_pass(
    chunk: &[(Direction, Vec<VoxelRecord>)],
    f: fn(&[VoxelRecord], &Direction, &mut u64) -> Rgb,
    evals: &mut u64,
    sum: &mut Rgb,
) -> f64 {
    let start = Instant::now();
    let mut acc = Rgb::zeros();
    for (d, records) in chunk {
        acc += f(records, d, evals);
    }
    let secs = start.elapsed().as_secs_f64();
    *sum += std::hint::black_box(acc);
    secs
}

/// Times both operation orders on identical samples and counts lobe evaluations.
///
/// Rays are sampled in untimed chunks; each chunk is then composited once per
/// order, alternating which order goes first. Single-threaded; the reported
/// times are medians over `runs` of the per-run totals.
pub fn bench_orders(vol: &VsgVolume, rays: &[(Vec3, Direction)], n_r: usize, runs: usize, interp: Interpolation) -> Result<BenchReport> {
    if rays.is_empty() {
        return Err(Error::domain("benchmark needs at least one ray"));
    }
    if runs == 0 {
        return Err(Error::domain("benchmark needs at least one run"));
    }
    let mut set = RaySampleSet {
        origin: Vec3::zeros(),
        dir: Direction::from_angles(0.0, 0.0),
        t: Vec::with_capacity(n_r),
        records: Vec::with_capacity(n_r),
    };
    let mut chunk: Vec<(Direction, Vec<VoxelRecord>)> = Vec::with_capacity(BENCH_CHUNK);
    let (mut tb, mut ta) = (Vec::with_capacity(runs), Vec::with_capacity(runs));
    let (mut eb, mut ea) = (0, 0);
    let (mut cb, mut ca) = (Rgb::zeros(), Rgb::zeros());
    for _ in 0..runs {
        let (mut sb, mut sa) = (0.0, 0.0);
        (eb, ea, cb, ca) = (0, 0, Rgb::zeros(), Rgb::zeros());
        for (i, batch) in rays.chunks(BENCH_CHUNK).enumerate() {
            chunk.clear();
            for (o, d) in batch {
                set.origin = *o;
                set.dir = *d;
                fill_samples(vol, &mut set, n_r, interp)?;
                chunk.push((*d, set.records.clone()));
            }
            if i % 2 == 0 {
                sb += time_pass(&chunk, before_impl, &mut eb, &mut cb);
                sa += time_pass(&chunk, after_impl, &mut ea, &mut ca);
            } else {
                sa += time_pass(&chunk, after_impl, &mut ea, &mut ca);
                sb += time_pass(&chunk, before_impl, &mut eb, &mut cb);
            }
        }
        tb.push(sb);
        ta.push(sa);
    }
    Ok(BenchReport {
        n_r,
        rays: rays.len(),
        g_evals_before: eb,
        g_evals_after: ea,
        seconds_before: median(tb),
        seconds_after: median(ta),
        checksum_before: cb,
        checksum_after: ca,
    })
}
