//! Equirectangular environment maps, HDR images and PFM I/O.
//!
//! Environment grid convention: row `i` covers `θ ∈ [iπ/rows, (i+1)π/rows]`,
//! column `j` covers `φ ∈ [2πj/cols, 2π(j+1)/cols]`; cell values are sampled at
//! the cell center.
//!
//! PFM layout: ASCII header `PF` (RGB) or `Pf` (gray), newline, `width height`,
//! newline, scale, newline, then `f32` samples with rows stored bottom to top.
//! A negative scale means little-endian samples. Writers always emit
//! little-endian with scale `-1.0`.

use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;

use crate::sg::{Direction, SgEnvironment};
use crate::{Error, Result, Rgb};

/// Default θ resolution of a per-pixel environment.
pub const DEFAULT_ROWS: usize = 16;
/// Default φ resolution of a per-pixel environment.
pub const DEFAULT_COLS: usize = 32;

/// Row-major (top row first) float image with 1 or 3 channels.
///
/// Values may be negative (normal maps are stored this way) but never NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct HdrImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl HdrImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::shape(format!("images have 1 or 3 channels, got {channels}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::shape("empty image"));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(format!("{} samples for a {width}x{height}x{channels} image", data.len())));
        }
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::domain("NaN sample in image"));
        }
        Ok(HdrImage { width, height, channels, data })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::new(width, height, channels, vec![0.0; width * height * channels])
    }

    /// Builds a 3-channel image from per-pixel RGB values (row-major).
    pub fn from_rgb(width: usize, height: usize, pixels: &[Rgb]) -> Result<Self> {
        let data = pixels.iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect();
        Self::new(width, height, 3, data)
    }

    pub fn from_scalars(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        Self::new(width, height, 1, values.iter().map(|v| *v as f32).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        assert!(!v.is_nan(), "NaN sample");
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// RGB at pixel index `p`; a gray image is broadcast to three channels.
    pub fn rgb(&self, p: usize) -> Rgb {
        if self.channels == 3 {
            let s = &self.data[p * 3..p * 3 + 3];
            Rgb::new(s[0] as f64, s[1] as f64, s[2] as f64)
        } else {
            Rgb::repeat(self.data[p] as f64)
        }
    }

    /// First channel at pixel index `p`.
    pub fn scalar(&self, p: usize) -> f64 {
        self.data[p * self.channels] as f64
    }

    pub fn to_rgb_vec(&self) -> Vec<Rgb> {
        (0..self.pixels()).map(|p| self.rgb(p)).collect()
    }

    pub fn to_scalar_vec(&self) -> Vec<f64> {
        (0..self.pixels()).map(|p| self.scalar(p)).collect()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| *v as f64).collect()
    }

    pub fn read_pfm(path: impl AsRef<Path>) -> Result<Self> {
        read_pfm(path)
    }

    pub fn write_pfm(&self, path: impl AsRef<Path>) -> Result<()> {
        write_pfm(self, path)
    }
}

/// Serializes to little-endian PFM bytes.
pub fn encode_pfm(img: &HdrImage) -> Vec<u8> {
    let magic = if img.channels == 3 { "PF" } else { "Pf" };
    let header = format!("{magic}\n{} {}\n-1.0\n", img.width, img.height);
    let row_len = img.width * img.channels;
    let mut out = Vec::with_capacity(header.len() + img.data.len() * 4);
    out.extend_from_slice(header.as_bytes());
    for y in (0..img.height).rev() {
        for v in &img.data[y * row_len..(y + 1) * row_len] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { offset: self.pos, msg: msg.into() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn token(&mut self, what: &str) -> Result<&'a str> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::Parse { offset: start, msg: format!("{what} is not ASCII") })
    }
}

/// Parses PFM bytes of either endianness.
pub fn decode_pfm(bytes: &[u8]) -> Result<HdrImage> {
    let mut cur = HeaderCursor { bytes, pos: 0 };
    let channels = match cur.token("magic")? {
        "PF" => 3,
        "Pf" => 1,
        m => return Err(Error::Parse { offset: 0, msg: format!("bad magic {m:?}") }),
    };
    let mut dim = |what: &str| -> Result<usize> {
        cur.skip_ws();
        let start = cur.pos;
        let t = cur.token(what)?;
        match t.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(Error::Parse { offset: start, msg: format!("bad {what} {t:?}") }),
        }
    };
    let width = dim("width")?;
    let height = dim("height")?;
    cur.skip_ws();
    let start = cur.pos;
    let scale_tok = cur.token("scale")?;
    let scale: f64 = match scale_tok.parse::<f64>() {
        Ok(s) if s.is_finite() && s != 0.0 => s,
        _ => return Err(Error::Parse { offset: start, msg: format!("bad scale {scale_tok:?}") }),
    };
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(cur.err("header must end with a single whitespace byte"));
    }
    let payload_start = cur.pos + 1;
    let little = scale < 0.0;

    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::Parse { offset: start, msg: "image dimensions overflow".into() })?;
    let need = count * 4;
    let have = bytes.len() - payload_start;
    if have < need {
        return Err(Error::Parse { offset: bytes.len(), msg: format!("truncated payload: {have} of {need} bytes") });
    }
    if have > need {
        return Err(Error::Parse { offset: payload_start + need, msg: format!("{} trailing bytes after payload", have - need) });
    }

    let row_len = width * channels;
    let mut data = vec![0.0f32; count];
    for (i, chunk) in bytes[payload_start..].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        if v.is_nan() {
            return Err(Error::Parse { offset: payload_start + 4 * i, msg: "NaN sample".into() });
        }
        let file_row = i / row_len;
        let y = height - 1 - file_row;
        data[y * row_len + i % row_len] = v;
    }
    HdrImage::new(width, height, channels, data)
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<HdrImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes)
}

pub fn write_pfm(img: &HdrImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pfm(img)).map_err(|e| Error::io(path, e))
}

/// `ln(1 + x)` per channel; the HDR compression used by the log-space metrics.
pub fn hdr_forward(x: &Rgb) -> Result<Rgb> {
    if x.iter().any(|c| !(*c >= 0.0)) {
        return Err(Error::domain("hdr_forward expects nonnegative input"));
    }
    Ok(x.map(f64::ln_1p))
}

/// Inverse of [`hdr_forward`]: `exp(y) − 1`.
pub fn hdr_inverse(y: &Rgb) -> Rgb {
    y.map(f64::exp_m1)
}

/// Equirectangular radiance grid (linear HDR, `rows × cols` cells).
#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentMap {
    rows: usize,
    cols: usize,
    data: Vec<Rgb>,
}

impl EnvironmentMap {
    pub fn new(rows: usize, cols: usize, data: Vec<Rgb>) -> Result<Self> {
        check_resolution(rows, cols)?;
        if data.len() != rows * cols {
            return Err(Error::shape(format!("{} cells for a {rows}x{cols} map", data.len())));
        }
        if data.iter().flat_map(|c| c.iter()).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::domain("environment map values must be finite and >= 0"));
        }
        Ok(EnvironmentMap { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[Rgb] {
        &self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> &Rgb {
        &self.data[i * self.cols + j]
    }

    /// Direction through the center of cell `(i, j)`.
    pub fn cell_direction(&self, i: usize, j: usize) -> Direction {
        cell_direction(self.rows, self.cols, i, j)
    }

    /// Exact solid angle of a cell in row `i`.
    pub fn cell_solid_angle(&self, i: usize) -> f64 {
        cell_solid_angle(self.rows, self.cols, i)
    }

    /// Solid-angle-weighted mean radiance.
    pub fn weighted_mean(&self) -> Rgb {
        let mut acc = Rgb::zeros();
        for i in 0..self.rows {
            let w = self.cell_solid_angle(i);
            for j in 0..self.cols {
                acc += self.at(i, j) * w;
            }
        }
        acc / (4.0 * PI)
    }

    /// Index of the brightest cell by channel sum.
    pub fn argmax(&self) -> (usize, usize) {
        let k = self.data.iter().enumerate().max_by(|a, b| a.1.sum().total_cmp(&b.1.sum())).map(|(k, _)| k).unwrap_or(0);
        (k / self.cols, k % self.cols)
    }

    /// As an image `cols` wide and `rows` high.
    pub fn to_image(&self) -> Result<HdrImage> {
        HdrImage::from_rgb(self.cols, self.rows, &self.data)
    }

    pub fn from_image(img: &HdrImage) -> Result<Self> {
        if img.channels() != 3 {
            return Err(Error::shape("environment map image must have 3 channels"));
        }
        Self::new(img.height(), img.width(), img.to_rgb_vec())
    }
}

fn check_resolution(rows: usize, cols: usize) -> Result<()> {
    if rows < 2 || cols < 4 {
        return Err(Error::shape(format!("environment grid {rows}x{cols} below 2x4")));
    }
    Ok(())
}

pub fn cell_direction(rows: usize, cols: usize, i: usize, j: usize) -> Direction {
    let theta = (i as f64 + 0.5) * PI / rows as f64;
    let phi = (j as f64 + 0.5) * 2.0 * PI / cols as f64;
    Direction::from_angles(theta, phi)
}

pub fn cell_solid_angle(rows: usize, cols: usize, i: usize) -> f64 {
    let t0 = i as f64 * PI / rows as f64;
    let t1 = (i + 1) as f64 * PI / rows as f64;
    (t0.cos() - t1.cos()) * 2.0 * PI / cols as f64
}

/// Evaluates the mixture at every cell center.
pub fn decode_env(env: &SgEnvironment, rows: usize, cols: usize, pixel: Option<usize>) -> Result<EnvironmentMap> {
    check_resolution(rows, cols)?;
    let weights = env.weights(pixel)?;
    let data =
        (0..rows * cols).into_par_iter().map(|k| env.eval_weighted(&cell_direction(rows, cols, k / cols, k % cols), weights)).collect();
    EnvironmentMap::new(rows, cols, data)
}

/// Packs per-pixel environment maps into one `(rows·height) × (cols·width)` image.
///
/// The map of pixel `(x, y)` occupies image rows `y·rows .. (y+1)·rows` and
/// columns `x·cols .. (x+1)·cols`, in the same orientation as [`EnvironmentMap::to_image`].
pub fn tile_envmaps(maps: &[EnvironmentMap], width: usize, height: usize) -> Result<HdrImage> {
    if maps.len() != width * height || maps.is_empty() {
        return Err(Error::shape(format!("{} maps for a {width}x{height} image", maps.len())));
    }
    let (rows, cols) = (maps[0].rows(), maps[0].cols());
    if maps.iter().any(|m| m.rows() != rows || m.cols() != cols) {
        return Err(Error::shape("environment maps differ in resolution"));
    }
    let w = cols * width;
    let mut px = vec![Rgb::zeros(); w * rows * height];
    for (p, m) in maps.iter().enumerate() {
        let (x, y) = (p % width, p / width);
        for i in 0..rows {
            for j in 0..cols {
                px[(y * rows + i) * w + x * cols + j] = *m.at(i, j);
            }
        }
    }
    HdrImage::from_rgb(w, rows * height, &px)
}

/// Inverse of [`tile_envmaps`].
pub fn untile_envmaps(img: &HdrImage, rows: usize, cols: usize) -> Result<(usize, usize, Vec<EnvironmentMap>)> {
    check_resolution(rows, cols)?;
    if img.channels() != 3 || !img.width().is_multiple_of(cols) || !img.height().is_multiple_of(rows) {
        return Err(Error::shape(format!("{}x{} image does not tile into {rows}x{cols} maps", img.width(), img.height())));
    }
    let (width, height) = (img.width() / cols, img.height() / rows);
    let mut maps = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let mut cells = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for j in 0..cols {
                    cells.push(img.rgb((y * rows + i) * img.width() + x * cols + j));
                }
            }
            maps.push(EnvironmentMap::new(rows, cols, cells)?);
        }
    }
    Ok((width, height, maps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sg::SphericalGaussian;
    use crate::Vec3;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn constant_lobe_decodes_to_constant_map() {
        let env = SgEnvironment::new(vec![SphericalGaussian::constant(Rgb::new(1.0, 1.0, 1.0)).unwrap()]).unwrap();
        let m = decode_env(&env, 16, 32, None).unwrap();
        assert!(m.data().iter().all(|c| *c == Rgb::new(1.0, 1.0, 1.0)));
        assert_relative_eq!(m.weighted_mean(), Rgb::new(1.0, 1.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn sharp_lobe_peaks_in_its_cell() {
        let (rows, cols) = (16, 32);
        for (theta, phi) in [(0.3, 0.1), (1.7, 3.3), (2.9, 6.0)] {
            let g = SphericalGaussian::from_angles(theta, phi, 50.0, Rgb::new(1.0, 1.0, 1.0)).unwrap();
            let m = decode_env(&SgEnvironment::new(vec![g]).unwrap(), rows, cols, None).unwrap();
            let i = (theta / PI * rows as f64) as usize;
            let j = (phi / (2.0 * PI) * cols as f64) as usize;
            // exhaustive scan for the cell whose center is angularly nearest the axis
            let mut best = (0, 0, f64::MAX);
            for a in 0..rows {
                for b in 0..cols {
                    let ang = m.cell_direction(a, b).dot(g.xi()).clamp(-1.0, 1.0).acos();
                    if ang < best.2 {
                        best = (a, b, ang);
                    }
                }
            }
            assert_eq!(m.argmax(), (best.0, best.1));
            assert_eq!(m.argmax(), (i, j));
        }
    }

    #[test]
    fn decoding_is_additive() {
        let lobes = vec![
            SphericalGaussian::from_angles(0.4, 1.0, 5.0, Rgb::new(1.0, 0.0, 0.5)).unwrap(),
            SphericalGaussian::from_angles(1.4, 3.0, 20.0, Rgb::new(0.2, 4.0, 0.5)).unwrap(),
            SphericalGaussian::from_angles(2.4, 5.0, 1.0, Rgb::new(0.3, 0.3, 0.3)).unwrap(),
        ];
        let all = decode_env(&SgEnvironment::new(lobes.clone()).unwrap(), 8, 16, None).unwrap();
        let mut sum = vec![Rgb::zeros(); 8 * 16];
        for g in lobes {
            let m = decode_env(&SgEnvironment::new(vec![g]).unwrap(), 8, 16, None).unwrap();
            for (s, c) in sum.iter_mut().zip(m.data()) {
                *s += c;
            }
        }
        for (a, b) in all.data().iter().zip(&sum) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn solid_angles_cover_sphere() {
        let total: f64 = (0..7).map(|i| cell_solid_angle(7, 9, i) * 9.0).sum();
        assert_relative_eq!(total, 4.0 * PI, epsilon = 1e-12);
    }

    #[test]
    fn rejects_small_grids() {
        let env = SgEnvironment::new(vec![SphericalGaussian::constant(Rgb::zeros()).unwrap()]).unwrap();
        assert!(decode_env(&env, 1, 8, None).is_err());
        assert!(decode_env(&env, 4, 3, None).is_err());
    }

    #[test]
    fn hdr_transform_values() {
        assert_eq!(hdr_forward(&Rgb::zeros()).unwrap(), Rgb::zeros());
        let x = Rgb::repeat(std::f64::consts::E - 1.0);
        assert_relative_eq!(hdr_forward(&x).unwrap(), Rgb::repeat(1.0), epsilon = 1e-15);
        assert!(hdr_forward(&Rgb::new(0.0, -1e-9, 0.0)).is_err());
        assert!(hdr_forward(&Rgb::new(0.0, f64::NAN, 0.0)).is_err());
    }

    #[test]
    fn pfm_single_pixel_layout() {
        let img = HdrImage::new(1, 1, 3, vec![0.5; 3]).unwrap();
        let bytes = encode_pfm(&img);
        let mut expect = b"PF\n1 1\n-1.0\n".to_vec();
        for _ in 0..3 {
            expect.extend_from_slice(&[0x00, 0x00, 0x00, 0x3f]);
        }
        assert_eq!(bytes, expect);
    }

    #[test]
    fn pfm_big_endian_and_row_order() {
        // 1x2 gray image, file stores bottom row first
        let mut bytes = b"Pf\n1 2\n1.0\n".to_vec();
        bytes.extend_from_slice(&2.0f32.to_be_bytes());
        bytes.extend_from_slice(&7.0f32.to_be_bytes());
        let img = decode_pfm(&bytes).unwrap();
        assert_eq!(img.channels(), 1);
        assert_eq!(img.get(0, 0, 0), 7.0);
        assert_eq!(img.get(0, 1, 0), 2.0);
    }

    #[test]
    fn pfm_errors_carry_offsets() {
        match decode_pfm(b"P6\n1 1\n-1.0\n").unwrap_err() {
            Error::Parse { offset: 0, .. } => {}
            e => panic!("{e}"),
        }
        let mut trunc = b"PF\n1 1\n-1.0\n".to_vec();
        trunc.extend_from_slice(&[0u8; 8]);
        match decode_pfm(&trunc).unwrap_err() {
            Error::Parse { offset, msg } => {
                assert_eq!(offset, trunc.len());
                assert!(msg.contains("truncated"));
            }
            e => panic!("{e}"),
        }
        let mut nan = b"Pf\n2 1\n-1.0\n".to_vec();
        let header = nan.len();
        nan.extend_from_slice(&1.0f32.to_le_bytes());
        nan.extend_from_slice(&f32::NAN.to_le_bytes());
        match decode_pfm(&nan).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, header + 4),
            e => panic!("{e}"),
        }
        assert!(matches!(decode_pfm(b"PF\n0 1\n-1.0\n"), Err(Error::Parse { offset: 3, .. })));
        assert!(matches!(decode_pfm(b"PF\n1 1\n0\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn envmap_tiling_round_trip() {
        let g = SphericalGaussian::new(Vec3::y(), 3.0, Rgb::new(1.0, 2.0, 3.0)).unwrap();
        let env = SgEnvironment::new(vec![g])
            .unwrap()
            .with_visibility(crate::sg::VisibilityMap::new(3, 2, 1, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap())
            .unwrap();
        let maps: Vec<_> = (0..6).map(|p| decode_env(&env, 4, 8, Some(p)).unwrap()).collect();
        let img = tile_envmaps(&maps, 3, 2).unwrap();
        assert_eq!((img.width(), img.height()), (24, 8));
        let (w, h, back) = untile_envmaps(&img, 4, 8).unwrap();
        assert_eq!((w, h), (3, 2));
        for (a, b) in maps.iter().zip(&back) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_relative_eq!(x, y, max_relative = 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn hdr_round_trip(r in 0.0..1e4f64, g in 0.0..1.0f64, b in 0.0..1e-3f64) {
            let x = Rgb::new(r, g, b);
            let back = hdr_inverse(&hdr_forward(&x).unwrap());
            prop_assert!((back - x).abs().max() < 1e-6 * (1.0 + r));
        }

        #[test]
        fn pfm_round_trip(w in 1usize..6, h in 1usize..6, gray in any::<bool>(), seed in any::<u32>()) {
            let c = if gray { 1 } else { 3 };
            let data: Vec<f32> = (0..w * h * c)
                .map(|i| f32::from_bits((seed as u64 * 2654435761 + i as u64 * 40503) as u32 & 0x7f7f_ffff))
                .collect();
            let img = HdrImage::new(w, h, c, data).unwrap();
            let back = decode_pfm(&encode_pfm(&img)).unwrap();
            prop_assert_eq!(img, back);
        }
    }
}
