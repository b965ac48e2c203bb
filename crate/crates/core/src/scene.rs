//! Plain-text scene description.
//!
//! ```text
//! sglight-scene 1
//! [camera.0]
//! intrinsics 50 50 15.5 11.5
//! size 32 24
//! pose 1 0 0 0
//! pose 0 1 0 0
//! pose 0 0 1 0
//! image view0.pfm
//! depth depth0.pfm
//! confidence conf0.pfm
//! [gbuffer]
//! camera 0
//! albedo albedo.pfm
//! roughness roughness.pfm
//! normal normal.pfm
//! depth depth.pfm
//! [lighting]
//! lobe 0 0 1 10 1 1 1
//! lobes fitted.txt
//! volume light.vsg
//! [render]
//! quadrature 32 64
//! spec_quadrature 128 256
//! seed 7
//! nr 128
//! interp trilinear
//! log_base e
//! mask_threshold 0.05
//! ```
//!
//! The first non-comment line must be the version header. Blank lines and lines
//! starting with `#` are ignored. `pose` rows are `r r r t` of the world-to-camera
//! transform. Relative paths resolve against the scene file's directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Matrix3;

use crate::brdf::{GBuffer, Quadrature, RenderConfig};
use crate::envmap::HdrImage;
use crate::multiview::{Camera, CameraView, Intrinsics, LogBase, MultiViewSet, Pose, DEFAULT_MASK_THRESHOLD};
use crate::sg::{format_lobe, parse_lobe, parse_lobes, SgEnvironment, SphericalGaussian};
use crate::vsg::{Interpolation, VsgVolume, DEFAULT_SAMPLES};
use crate::{Error, Result, Vec3};

pub const HEADER: &str = "sglight-scene 1";

#[derive(Clone, Debug, PartialEq)]
pub struct CameraEntry {
    pub camera: Camera,
    pub image: Option<PathBuf>,
    pub depth: Option<PathBuf>,
    pub confidence: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GBufferEntry {
    pub camera: usize,
    pub albedo: PathBuf,
    pub roughness: PathBuf,
    pub normal: PathBuf,
    pub depth: PathBuf,
    pub confidence: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lighting {
    /// Inline lobes followed by those from `lobes` files, in file order.
    pub lobes: Vec<SphericalGaussian>,
    pub lobe_files: Vec<PathBuf>,
    pub volume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    pub config: RenderConfig,
    pub seed: Option<u64>,
    pub n_r: usize,
    pub interp: Interpolation,
    pub log_base: LogBase,
    pub mask_threshold: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            config: RenderConfig::default(),
            seed: None,
            n_r: DEFAULT_SAMPLES,
            interp: Interpolation::default(),
            log_base: LogBase::Natural,
            mask_threshold: DEFAULT_MASK_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// Directory that relative paths resolve against.
    pub base: PathBuf,
    /// Cameras keyed by their section index.
    pub cameras: BTreeMap<usize, CameraEntry>,
    pub gbuffer: Option<GBufferEntry>,
    pub lighting: Lighting,
    pub render: RenderSettings,
}

#[derive(Default)]
struct CameraDraft {
    intrinsics: Option<Intrinsics>,
    size: Option<(usize, usize)>,
    pose_rows: Vec<[f64; 4]>,
    image: Option<PathBuf>,
    depth: Option<PathBuf>,
    confidence: Option<PathBuf>,
    line: usize,
}

#[derive(Default)]
struct GBufferDraft {
    camera: Option<usize>,
    albedo: Option<PathBuf>,
    roughness: Option<PathBuf>,
    normal: Option<PathBuf>,
    depth: Option<PathBuf>,
    confidence: Option<PathBuf>,
    line: usize,
}

enum Section {
    None,
    Camera(usize),
    GBuffer,
    Lighting,
    Render,
}

fn scene_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Scene { line, msg: msg.into() }
}

fn numbers<T: std::str::FromStr>(args: &[&str], n: usize, line: usize, key: &str) -> Result<Vec<T>> {
    if args.len() != n {
        return Err(scene_err(line, format!("`{key}` takes {n} values, got {}", args.len())));
    }
    args.iter().map(|a| a.parse::<T>().map_err(|_| scene_err(line, format!("`{key}`: cannot parse {a:?}")))).collect()
}

fn path_arg(args: &[&str], line: usize, key: &str) -> Result<PathBuf> {
    match args {
        [p] => Ok(PathBuf::from(p)),
        _ => Err(scene_err(line, format!("`{key}` takes one path"))),
    }
}

impl Scene {
    /// Parses scene text; `base` is the directory for relative paths.
    pub fn parse(text: &str, base: impl Into<PathBuf>) -> Result<Scene> {
        let mut section = Section::None;
        let mut header_seen = false;
        let mut cameras: BTreeMap<usize, CameraDraft> = BTreeMap::new();
        let mut gbuffer: Option<GBufferDraft> = None;
        let mut lighting = Lighting::default();
        let mut render = RenderSettings::default();
        let mut sections_seen: Vec<String> = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if !header_seen {
                if trimmed != HEADER {
                    return Err(scene_err(line, format!("expected header `{HEADER}`")));
                }
                header_seen = true;
                continue;
            }
            if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                if sections_seen.iter().any(|s| s == name) {
                    return Err(scene_err(line, format!("duplicate section [{name}]")));
                }
                sections_seen.push(name.to_string());
                section = match name {
                    "gbuffer" => {
                        gbuffer = Some(GBufferDraft { line, ..Default::default() });
                        Section::GBuffer
                    }
                    "lighting" => Section::Lighting,
                    "render" => Section::Render,
                    _ => match name.strip_prefix("camera.").map(str::parse::<usize>) {
                        Some(Ok(k)) => {
                            cameras.insert(k, CameraDraft { line, ..Default::default() });
                            Section::Camera(k)
                        }
                        _ => return Err(scene_err(line, format!("unknown section [{name}]"))),
                    },
                };
                continue;
            }
            let mut parts = trimmed.split_whitespace();
            let key = parts.next().unwrap_or_default();
            let args: Vec<&str> = parts.collect();
            let unknown = || scene_err(line, format!("unknown key `{key}`"));
            match &section {
                Section::None => return Err(scene_err(line, "key outside of any section")),
                Section::Camera(k) => {
                    let cam = cameras.get_mut(k).expect("camera section registered");
                    match key {
                        "intrinsics" => {
                            let v = numbers::<f64>(&args, 4, line, key)?;
                            cam.intrinsics = Some(Intrinsics::new(v[0], v[1], v[2], v[3]).map_err(|e| scene_err(line, e.to_string()))?);
                        }
                        "size" => {
                            let v = numbers::<usize>(&args, 2, line, key)?;
                            cam.size = Some((v[0], v[1]));
                        }
                        "pose" => {
                            let v = numbers::<f64>(&args, 4, line, key)?;
                            if cam.pose_rows.len() == 3 {
                                return Err(scene_err(line, "more than three pose rows"));
                            }
                            cam.pose_rows.push([v[0], v[1], v[2], v[3]]);
                        }
                        "image" => cam.image = Some(path_arg(&args, line, key)?),
                        "depth" => cam.depth = Some(path_arg(&args, line, key)?),
                        "confidence" => cam.confidence = Some(path_arg(&args, line, key)?),
                        _ => return Err(unknown()),
                    }
                }
                Section::GBuffer => {
                    let g = gbuffer.as_mut().expect("gbuffer section registered");
                    match key {
                        "camera" => g.camera = Some(numbers::<usize>(&args, 1, line, key)?[0]),
                        "albedo" => g.albedo = Some(path_arg(&args, line, key)?),
                        "roughness" => g.roughness = Some(path_arg(&args, line, key)?),
                        "normal" => g.normal = Some(path_arg(&args, line, key)?),
                        "depth" => g.depth = Some(path_arg(&args, line, key)?),
                        "confidence" => g.confidence = Some(path_arg(&args, line, key)?),
                        _ => return Err(unknown()),
                    }
                }
                Section::Lighting => match key {
                    "lobe" => lighting.lobes.push(parse_lobe(&args.join(" ")).map_err(|m| scene_err(line, m))?),
                    "lobes" => lighting.lobe_files.push(path_arg(&args, line, key)?),
                    "volume" => lighting.volume = Some(path_arg(&args, line, key)?),
                    _ => return Err(unknown()),
                },
                Section::Render => match key {
                    "quadrature" | "spec_quadrature" => {
                        let v = numbers::<usize>(&args, 2, line, key)?;
                        let q = Quadrature::new(v[0], v[1]).map_err(|e| scene_err(line, e.to_string()))?;
                        if key == "quadrature" {
                            render.config.diffuse = q;
                        } else {
                            render.config.specular = q;
                        }
                    }
                    "seed" => render.seed = Some(numbers::<u64>(&args, 1, line, key)?[0]),
                    "nr" => {
                        let n = numbers::<usize>(&args, 1, line, key)?[0];
                        if n == 0 {
                            return Err(scene_err(line, "nr must be positive"));
                        }
                        render.n_r = n;
                    }
                    "interp" => {
                        render.interp =
                            args.first().copied().unwrap_or_default().parse().map_err(|e: Error| scene_err(line, e.to_string()))?;
                    }
                    "log_base" => {
                        render.log_base = match args.as_slice() {
                            ["e"] => LogBase::Natural,
                            ["10"] => LogBase::Ten,
                            _ => return Err(scene_err(line, "log_base must be `e` or `10`")),
                        }
                    }
                    "mask_threshold" => {
                        let c = numbers::<f64>(&args, 1, line, key)?[0];
                        if !(c > 0.0 && c.is_finite()) {
                            return Err(scene_err(line, "mask_threshold must be positive"));
                        }
                        render.mask_threshold = c;
                    }
                    _ => return Err(unknown()),
                },
            }
        }
        if !header_seen {
            return Err(scene_err(1, format!("missing header `{HEADER}`")));
        }

        let mut out_cameras = BTreeMap::new();
        for (k, d) in cameras {
            let intr = d.intrinsics.ok_or_else(|| scene_err(d.line, format!("[camera.{k}] lacks intrinsics")))?;
            let (w, h) = d.size.ok_or_else(|| scene_err(d.line, format!("[camera.{k}] lacks size")))?;
            let pose = if d.pose_rows.is_empty() {
                Pose::identity()
            } else if d.pose_rows.len() == 3 {
                let r = Matrix3::from_fn(|i, j| d.pose_rows[i][j]);
                let t = Vec3::new(d.pose_rows[0][3], d.pose_rows[1][3], d.pose_rows[2][3]);
                Pose::new(r, t).map_err(|e| scene_err(d.line, format!("[camera.{k}]: {e}")))?
            } else {
                return Err(scene_err(d.line, format!("[camera.{k}] needs three pose rows")));
            };
            let camera = Camera::new(intr, pose, w, h).map_err(|e| scene_err(d.line, e.to_string()))?;
            out_cameras.insert(k, CameraEntry { camera, image: d.image, depth: d.depth, confidence: d.confidence });
        }
        if out_cameras.is_empty() {
            return Err(scene_err(1, "scene defines no camera"));
        }
        let gbuffer = match gbuffer {
            None => None,
            Some(g) => {
                let need = |p: Option<PathBuf>, what: &str| p.ok_or_else(|| scene_err(g.line, format!("[gbuffer] lacks {what}")));
                let camera = g.camera.unwrap_or(*out_cameras.keys().next().expect("nonempty"));
                if !out_cameras.contains_key(&camera) {
                    return Err(scene_err(g.line, format!("[gbuffer] refers to missing camera {camera}")));
                }
                Some(GBufferEntry {
                    camera,
                    albedo: need(g.albedo, "albedo")?,
                    roughness: need(g.roughness, "roughness")?,
                    normal: need(g.normal, "normal")?,
                    depth: need(g.depth, "depth")?,
                    confidence: g.confidence,
                })
            }
        };
        Ok(Scene { base: base.into(), cameras: out_cameras, gbuffer, lighting, render })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Scene> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Scene::parse(&text, base)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn camera(&self, k: usize) -> Result<&CameraEntry> {
        self.cameras.get(&k).ok_or(Error::Index { index: k, len: self.cameras.len() })
    }

    fn read_image(&self, p: &Path) -> Result<HdrImage> {
        HdrImage::read_pfm(self.resolve(p))
    }

    /// G-buffer and the camera it was rendered from.
    pub fn load_gbuffer(&self) -> Result<(GBuffer, Camera)> {
        let g = self.gbuffer.as_ref().ok_or_else(|| Error::NoData("scene has no [gbuffer] section".into()))?;
        let cam = self.camera(g.camera)?.camera;
        let gb = GBuffer::from_images(
            &self.read_image(&g.albedo)?,
            &self.read_image(&g.roughness)?,
            &self.read_image(&g.normal)?,
            &self.read_image(&g.depth)?,
        )?;
        if gb.width() != cam.width() || gb.height() != cam.height() {
            return Err(Error::shape(format!(
                "G-buffer is {}x{}, camera {} is {}x{}",
                gb.width(),
                gb.height(),
                g.camera,
                cam.width(),
                cam.height()
            )));
        }
        let gb = match &g.confidence {
            Some(c) => gb.with_confidence(self.read_image(c)?.to_scalar_vec())?,
            None => gb,
        };
        Ok((gb, cam))
    }

    /// All inline and file lobes as one mixture.
    pub fn load_environment(&self) -> Result<SgEnvironment> {
        let mut lobes = self.lighting.lobes.clone();
        for f in &self.lighting.lobe_files {
            let path = self.resolve(f);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            lobes.extend(parse_lobes(&text)?);
        }
        if lobes.is_empty() {
            return Err(Error::NoData("scene lighting has no lobes".into()));
        }
        SgEnvironment::new(lobes)
    }

    pub fn load_volume(&self) -> Result<VsgVolume> {
        let v = self.lighting.volume.as_ref().ok_or_else(|| Error::NoData("scene lighting has no volume".into()))?;
        VsgVolume::read(self.resolve(v))
    }

    /// Every camera with its depth (and image / confidence when given), targeting camera `target`.
    pub fn load_multiview(&self, target: usize) -> Result<MultiViewSet> {
        let mut views = Vec::with_capacity(self.cameras.len());
        let mut target_pos = None;
        for (pos, (k, entry)) in self.cameras.iter().enumerate() {
            if *k == target {
                target_pos = Some(pos);
            }
            let depth_path = entry.depth.as_ref().ok_or_else(|| Error::NoData(format!("camera {k} has no depth map")))?;
            let depth = self.read_image(depth_path)?;
            if depth.width() != entry.camera.width() || depth.height() != entry.camera.height() {
                return Err(Error::shape(format!("depth of camera {k} does not match its size")));
            }
            let mut view = CameraView::new(entry.camera, depth.to_scalar_vec())?;
            if let Some(p) = &entry.image {
                view = view.with_image(self.read_image(p)?)?;
            }
            if let Some(p) = &entry.confidence {
                view = view.with_confidence(self.read_image(p)?.to_scalar_vec())?;
            }
            views.push(view);
        }
        let target_pos = target_pos.ok_or(Error::Index { index: target, len: self.cameras.len() })?;
        MultiViewSet::new(views, target_pos)
    }

    /// Serializes the scene; paths are written as stored.
    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER}\n");
        for (k, c) in &self.cameras {
            let i = c.camera.intrinsics();
            let _ = writeln!(
                s,
                "[camera.{k}]\nintrinsics {} {} {} {}\nsize {} {}",
                i.fx,
                i.fy,
                i.cx,
                i.cy,
                c.camera.width(),
                c.camera.height()
            );
            let (r, t) = (c.camera.pose().rotation(), c.camera.pose().translation());
            for row in 0..3 {
                let _ = writeln!(s, "pose {} {} {} {}", r[(row, 0)], r[(row, 1)], r[(row, 2)], t[row]);
            }
            for (key, p) in [("image", &c.image), ("depth", &c.depth), ("confidence", &c.confidence)] {
                if let Some(p) = p {
                    let _ = writeln!(s, "{key} {}", p.display());
                }
            }
        }
        if let Some(g) = &self.gbuffer {
            let _ = writeln!(s, "[gbuffer]\ncamera {}", g.camera);
            for (key, p) in [("albedo", &g.albedo), ("roughness", &g.roughness), ("normal", &g.normal), ("depth", &g.depth)] {
                let _ = writeln!(s, "{key} {}", p.display());
            }
            if let Some(p) = &g.confidence {
                let _ = writeln!(s, "confidence {}", p.display());
            }
        }
        s.push_str("[lighting]\n");
        for l in &self.lighting.lobes {
            let _ = writeln!(s, "lobe {}", format_lobe(l));
        }
        for f in &self.lighting.lobe_files {
            let _ = writeln!(s, "lobes {}", f.display());
        }
        if let Some(v) = &self.lighting.volume {
            let _ = writeln!(s, "volume {}", v.display());
        }
        let r = &self.render;
        let _ = writeln!(
            s,
            "[render]\nquadrature {} {}\nspec_quadrature {} {}\nnr {}\ninterp {}\nlog_base {}\nmask_threshold {}",
            r.config.diffuse.n_theta,
            r.config.diffuse.n_phi,
            r.config.specular.n_theta,
            r.config.specular.n_phi,
            r.n_r,
            match r.interp {
                Interpolation::Trilinear => "trilinear",
                Interpolation::Nearest => "nearest",
            },
            match r.log_base {
                LogBase::Natural => "e",
                LogBase::Ten => "10",
            },
            r.mask_threshold
        );
        if let Some(seed) = r.seed {
            let _ = writeln!(s, "seed {seed}");
        }
        s
    }
}
