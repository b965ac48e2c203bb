//! Fixture builders shared by the CLI integration and acceptance tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sglight::envmap::HdrImage;
use sglight::sg::{format_lobe, SphericalGaussian};
use sglight::{Rgb, Vec3};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sglight"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn sglight")
}

/// Runs the binary and panics with its stderr on failure.
pub fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "sglight {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

pub fn write_lobes(path: &Path, lobes: &[SphericalGaussian]) {
    let text: String = lobes.iter().map(|l| format_lobe(l) + "\n").collect();
    std::fs::write(path, text).unwrap();
}

/// Plane at camera depth 2 seen by an identity-pose camera, with normals
/// tilted across the image so pixels sample different hemispheres.
pub struct PlaneFixture {
    pub width: usize,
    pub height: usize,
    pub albedo: Rgb,
    pub roughness: f64,
}

impl PlaneFixture {
    pub fn normals(&self) -> Vec<Vec3> {
        let (w, h) = (self.width as f64, self.height as f64);
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| Vec3::new((x as f64 + 0.5) / w - 0.5, (y as f64 + 0.5) / h - 0.5, -1.0).normalize()))
            .collect()
    }

    /// Writes the G-buffer PFMs into `dir` and returns the scene text up to (not including) `[lighting]`.
    pub fn write(&self, dir: &Path) -> String {
        let n = self.width * self.height;
        HdrImage::from_rgb(self.width, self.height, &vec![self.albedo; n]).unwrap().write_pfm(dir.join("albedo.pfm")).unwrap();
        HdrImage::from_scalars(self.width, self.height, &vec![self.roughness; n]).unwrap().write_pfm(dir.join("roughness.pfm")).unwrap();
        HdrImage::from_rgb(self.width, self.height, &self.normals()).unwrap().write_pfm(dir.join("normal.pfm")).unwrap();
        HdrImage::from_scalars(self.width, self.height, &vec![2.0; n]).unwrap().write_pfm(dir.join("depth.pfm")).unwrap();
        let f = self.width as f64;
        format!(
            "sglight-scene 1\n[camera.0]\nintrinsics {f} {f} {} {}\nsize {} {}\n[gbuffer]\ncamera 0\nalbedo albedo.pfm\nroughness roughness.pfm\nnormal normal.pfm\ndepth depth.pfm\n",
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.width,
            self.height
        )
    }
}

/// Writes `<dir>/<name>` holding `head` followed by the given lighting and render lines.
pub fn write_scene(dir: &Path, name: &str, head: &str, lighting: &str, render: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, format!("{head}[lighting]\n{lighting}\n[render]\n{render}\n")).unwrap();
    path
}

pub fn read_image(path: &Path) -> HdrImage {
    HdrImage::read_pfm(path).unwrap()
}
