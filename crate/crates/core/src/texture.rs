//! Normal-map exemplars: the microstructure whose per-footprint normal
//! distributions get precomputed.
//!
//! Texel `(x, y)` covers `[x, x + 1) × [y, y + 1)` in texel coordinates and
//! its sample position is the texel center. Normals live in tangent space
//! with `z > 0`.
//!
//! Raw file layout (`.nraw`), all little-endian:
//!
//! | offset | size | field                                    |
//! |--------|------|------------------------------------------|
//! | 0      | 4    | magic `NRAW`                             |
//! | 4      | 4    | width (u32)                              |
//! | 8      | 4    | height (u32)                             |
//! | 12     | 4    | channels (u32): 1 height, 2 xy, 3 xyz    |
//! | 16     | ...  | planar f32: channel 0 rows, channel 1 ...|
//!
//! Raw normal channels hold components directly in `[-1, 1]`; PNG channels
//! hold `(n + 1) / 2`.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub type Normal = Vector3<f64>;

const RAW_MAGIC: &[u8; 4] = b"NRAW";

#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    width: usize,
    height: usize,
    normals: Vec<Normal>,
    texel_extent: f64,
    tileable: bool,
}

impl NormalMap {
    /// Builds a map from raw normals, renormalizing each one. Rejects any
    /// normal whose z component is not positive.
    pub fn new(width: usize, height: usize, normals: Vec<Normal>, tileable: bool) -> Result<Self> {
        if width == 0 || height == 0 || normals.len() != width * height {
            return Err(Error::Dimensions { width, height });
        }
        let mut normals = normals;
        for (i, n) in normals.iter_mut().enumerate() {
            let len = n.norm();
            if !len.is_finite() || len == 0.0 || n.z <= 0.0 {
                return Err(Error::DegenerateNormal {
                    x: i % width,
                    y: i / width,
                    z: n.z,
                });
            }
            // already-unit normals are kept bit-exact
            if (len - 1.0).abs() > 2.0 * f64::EPSILON {
                *n /= len;
            }
        }
        Ok(Self {
            width,
            height,
            normals,
            texel_extent: 1.0,
            tileable,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        tileable: bool,
        mut f: impl FnMut(usize, usize) -> Normal,
    ) -> Result<Self> {
        let mut normals = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                normals.push(f(x, y));
            }
        }
        Self::new(width, height, normals, tileable)
    }

    /// All normals pointing straight up.
    pub fn flat(width: usize, height: usize, tileable: bool) -> Self {
        Self::from_fn(width, height, tileable, |_, _| Normal::z()).expect("flat map is valid")
    }

    /// Converts a heightfield (texel units, row-major) to normals by central
    /// differences. Tileable maps wrap; otherwise borders use one-sided
    /// differences.
    pub fn from_heightfield(
        width: usize,
        height: usize,
        heights: &[f64],
        scale: f64,
        tileable: bool,
    ) -> Result<Self> {
        if width < 2 || height < 2 || heights.len() != width * height {
            return Err(Error::Dimensions { width, height });
        }
        let h = |x: usize, y: usize| heights[y * width + x] * scale;
        let deriv = |lo: usize, hi: usize, span: f64, get: &dyn Fn(usize) -> f64| {
            (get(hi) - get(lo)) / span
        };
        let mut normals = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let (x0, x1, sx) = neighbors(x, width, tileable);
                let (y0, y1, sy) = neighbors(y, height, tileable);
                let dx = deriv(x0, x1, sx, &|i| h(i, y));
                let dy = deriv(y0, y1, sy, &|j| h(x, j));
                normals.push(Normal::new(-dx, -dy, 1.0));
            }
        }
        Self::new(width, height, normals, tileable)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn tileable(&self) -> bool {
        self.tileable
    }

    pub fn texel_extent(&self) -> f64 {
        self.texel_extent
    }

    pub fn with_tileable(mut self, tileable: bool) -> Self {
        self.tileable = tileable;
        self
    }

    pub fn with_texel_extent(mut self, extent: f64) -> Self {
        self.texel_extent = extent;
        self
    }

    pub fn normals(&self) -> &[Normal] {
        &self.normals
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Normal {
        self.normals[y * self.width + x]
    }

    /// Periodic lookup.
    #[inline]
    pub fn get_wrapped(&self, x: i64, y: i64) -> Normal {
        let xi = x.rem_euclid(self.width as i64) as usize;
        let yi = y.rem_euclid(self.height as i64) as usize;
        self.get(xi, yi)
    }

    /// Rolls the map so that texel `(x, y)` of the result is texel
    /// `(x + dx, y + dy)` of `self`, wrapping around.
    pub fn shifted(&self, dx: i64, dy: i64) -> NormalMap {
        let mut normals = Vec::with_capacity(self.normals.len());
        for y in 0..self.height as i64 {
            for x in 0..self.width as i64 {
                normals.push(self.get_wrapped(x + dx, y + dy));
            }
        }
        NormalMap {
            normals,
            ..self.clone()
        }
    }

    /// Copies a `w × h` window starting at `(x0, y0)`, wrapping around the
    /// source. The result is not tileable.
    pub fn crop_wrapped(&self, x0: i64, y0: i64, w: usize, h: usize) -> NormalMap {
        let mut normals = Vec::with_capacity(w * h);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                normals.push(self.get_wrapped(x0 + x, y0 + y));
            }
        }
        NormalMap {
            width: w,
            height: h,
            normals,
            texel_extent: self.texel_extent,
            tileable: false,
        }
    }

    pub fn save_raw(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(16 + self.normals.len() * 12);
        out.extend_from_slice(RAW_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&3u32.to_le_bytes());
        for c in 0..3 {
            for n in &self.normals {
                out.extend_from_slice(&(n[c] as f32).to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    /// Heap bytes held by the normals.
    pub fn memory_bytes(&self) -> usize {
        self.normals.len() * std::mem::size_of::<Normal>()
    }
}

fn neighbors(i: usize, n: usize, wrap: bool) -> (usize, usize, f64) {
    if wrap {
        ((i + n - 1) % n, (i + 1) % n, 2.0)
    } else if i == 0 {
        (0, 1, 1.0)
    } else if i == n - 1 {
        (n - 2, n - 1, 1.0)
    } else {
        (i - 1, i + 1, 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Encoding {
    /// Channels hold normal components.
    UnitVector,
    /// Single channel of heights, multiplied by `scale` (texel units).
    Heightfield { scale: f64 },
}

/// Loads a PNG (8 or 16 bit) or `.nraw` file. The result is marked
/// non-tileable; use [`NormalMap::with_tileable`] for periodic inputs.
pub fn load_normal_map(path: &Path, encoding: Encoding) -> Result<NormalMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (width, height, channels, planes) = if bytes.starts_with(RAW_MAGIC) {
        decode_raw(&bytes)?
    } else {
        decode_png(&bytes, encoding)?
    };
    if width == 0 || height == 0 {
        return Err(Error::Dimensions { width, height });
    }
    match encoding {
        Encoding::Heightfield { scale } => {
            NormalMap::from_heightfield(width, height, &planes[0], scale, false)
        }
        Encoding::UnitVector => {
            if channels < 2 {
                return Err(Error::param("unit-vector encoding needs at least 2 channels"));
            }
            let mut normals = Vec::with_capacity(width * height);
            for i in 0..width * height {
                let x = planes[0][i];
                let y = planes[1][i];
                let z = if channels >= 3 {
                    planes[2][i]
                } else {
                    (1.0 - x * x - y * y).max(0.0).sqrt()
                };
                normals.push(Normal::new(x, y, z));
            }
            NormalMap::new(width, height, normals, false)
        }
    }
}

type Planes = (usize, usize, usize, Vec<Vec<f64>>);

fn decode_raw(bytes: &[u8]) -> Result<Planes> {
    if bytes.len() < 16 {
        return Err(Error::Truncated("raw header".into()));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (w, h, c) = (word(4), word(8), word(12));
    if w == 0 || h == 0 {
        return Err(Error::Dimensions {
            width: w,
            height: h,
        });
    }
    if c == 0 || c > 4 {
        return Err(Error::Malformed(format!("{c} channels")));
    }
    let need = 16 + w * h * c * 4;
    if bytes.len() < need {
        return Err(Error::Truncated(format!("raw payload: {} < {need}", bytes.len())));
    }
    let planes = (0..c)
        .map(|ch| {
            let base = 16 + ch * w * h * 4;
            (0..w * h)
                .map(|i| {
                    let o = base + i * 4;
                    f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64
                })
                .collect()
        })
        .collect();
    Ok((w, h, c, planes))
}

fn decode_png(bytes: &[u8], encoding: Encoding) -> Result<Planes> {
    let img = image::load_from_memory(bytes)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match encoding {
        Encoding::Heightfield { .. } => {
            let luma = img.into_luma16();
            Ok((w, h, 1, vec![luma.pixels().map(|p| p.0[0] as f64 / 65535.0).collect()]))
        }
        Encoding::UnitVector => {
            let remap = |v: f32| 2.0 * v as f64 - 1.0;
            if img.color().channel_count() == 2 {
                let la = img.into_luma_alpha16();
                let remap16 = |v: u16| 2.0 * v as f64 / 65535.0 - 1.0;
                let x = la.pixels().map(|p| remap16(p.0[0])).collect();
                let y = la.pixels().map(|p| remap16(p.0[1])).collect();
                Ok((w, h, 2, vec![x, y]))
            } else {
                let rgb = img.into_rgb32f();
                let planes = (0..3)
                    .map(|c| rgb.pixels().map(|p| remap(p.0[c])).collect())
                    .collect();
                Ok((w, h, 3, planes))
            }
        }
    }
}

/// Procedural exemplar classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExemplarKind {
    /// Periodic Gaussian random heightfield with an isotropic correlation
    /// length of `feature_size` texels.
    IsotropicNoise { feature_size: f64, rms_slope: f64 },
    /// Periodic heightfield correlated over `streak_length` texels along x and
    /// `streak_width` texels along y; slopes are almost purely along y.
    BrushedMetal {
        streak_length: f64,
        streak_width: f64,
        rms_slope: f64,
    },
    /// Jittered-grid Voronoi cells with one constant normal per cell.
    /// `density` is cells per texel², `tilt_spread` the std-dev of the tilt
    /// angle in radians.
    MetallicFlakes { density: f64, tilt_spread: f64 },
}

impl ExemplarKind {
    pub fn isotropic_noise() -> Self {
        ExemplarKind::IsotropicNoise {
            feature_size: 4.0,
            rms_slope: 0.12,
        }
    }

    pub fn brushed_metal() -> Self {
        ExemplarKind::BrushedMetal {
            streak_length: 64.0,
            streak_width: 1.5,
            rms_slope: 0.12,
        }
    }

    pub fn metallic_flakes() -> Self {
        ExemplarKind::MetallicFlakes {
            density: 1.0 / 64.0,
            tilt_spread: 0.12,
        }
    }

    fn tag(&self) -> u64 {
        match self {
            ExemplarKind::IsotropicNoise { .. } => 0x1150,
            ExemplarKind::BrushedMetal { .. } => 0xb125,
            ExemplarKind::MetallicFlakes { .. } => 0xf1a6,
        }
    }
}

/// Generates a seamless (tileable) exemplar. Deterministic in all inputs.
pub fn generate_exemplar(kind: ExemplarKind, resolution: usize, seed: u64) -> Result<NormalMap> {
    if resolution < 256 || !resolution.is_power_of_two() {
        return Err(Error::UnsupportedResolution(resolution));
    }
    generate_unchecked(kind, resolution, seed)
}

/// Like [`generate_exemplar`] without the resolution floor; used for small
/// fixtures.
pub fn generate_exemplar_any(kind: ExemplarKind, resolution: usize, seed: u64) -> Result<NormalMap> {
    if resolution < 8 || !resolution.is_power_of_two() {
        return Err(Error::UnsupportedResolution(resolution));
    }
    generate_unchecked(kind, resolution, seed)
}

fn generate_unchecked(kind: ExemplarKind, n: usize, seed: u64) -> Result<NormalMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ kind.tag().rotate_left(32));
    match kind {
        ExemplarKind::IsotropicNoise {
            feature_size,
            rms_slope,
        } => {
            let h = periodic_gaussian_field(n, feature_size, feature_size, &mut rng);
            slope_scaled_normals(n, h, rms_slope)
        }
        ExemplarKind::BrushedMetal {
            streak_length,
            streak_width,
            rms_slope,
        } => {
            let h = periodic_gaussian_field(n, streak_length, streak_width, &mut rng);
            slope_scaled_normals(n, h, rms_slope)
        }
        ExemplarKind::MetallicFlakes {
            density,
            tilt_spread,
        } => flakes(n, density, tilt_spread, &mut rng),
    }
}

fn slope_scaled_normals(n: usize, h: Vec<f64>, rms_slope: f64) -> Result<NormalMap> {
    let unit = NormalMap::from_heightfield(n, n, &h, 1.0, true)?;
    // slope of the unscaled field, recovered from the normals
    let mean_sq: f64 = unit
        .normals()
        .iter()
        .map(|v| (v.x * v.x + v.y * v.y) / (v.z * v.z))
        .sum::<f64>()
        / (n * n) as f64;
    let scale = if mean_sq > 0.0 { rms_slope / mean_sq.sqrt() } else { 0.0 };
    NormalMap::from_heightfield(n, n, &h, scale, true)
}

/// Real part of the inverse DFT of Gaussian-filtered complex white noise:
/// a periodic stationary field with Gaussian correlation of std-dev
/// `len_x`, `len_y` texels.
fn periodic_gaussian_field(n: usize, len_x: f64, len_y: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let signed = |k: usize| if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    let w = 2.0 * std::f64::consts::PI / n as f64;
    let mut spectrum: Vec<Complex<f64>> = Vec::with_capacity(n * n);
    for ky in 0..n {
        for kx in 0..n {
            let fx = signed(kx) * w;
            let fy = signed(ky) * w;
            let amp = (-0.5 * (fx * fx * len_x * len_x + fy * fy * len_y * len_y)).exp();
            let re = rng.normal();
            let im = rng.normal();
            spectrum.push(Complex::new(re * amp, im * amp));
        }
    }
    fft2_inverse(n, &mut spectrum);
    spectrum.into_iter().map(|c| c.re).collect()
}

trait StandardNormalExt {
    fn normal(&mut self) -> f64;
}

impl<R: Rng> StandardNormalExt for R {
    fn normal(&mut self) -> f64 {
        // Box-Muller on two uniforms in (0, 1]
        let u1: f64 = 1.0 - self.gen::<f64>();
        let u2: f64 = self.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

fn fft2_inverse(n: usize, data: &mut [Complex<f64>]) {
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_inverse(n);
    for row in data.chunks_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for x in 0..n {
        for y in 0..n {
            col[y] = data[y * n + x];
        }
        fft.process(&mut col);
        for y in 0..n {
            data[y * n + x] = col[y];
        }
    }
}

fn flakes(n: usize, density: f64, tilt_spread: f64, rng: &mut ChaCha8Rng) -> Result<NormalMap> {
    if !(density > 0.0) {
        return Err(Error::param("flake density must be positive"));
    }
    let g = ((n as f64 * density.sqrt()).round() as usize).clamp(1, n);
    let cell = n as f64 / g as f64;
    let mut seeds = Vec::with_capacity(g * g);
    let mut cell_normals = Vec::with_capacity(g * g);
    for j in 0..g {
        for i in 0..g {
            seeds.push((
                (i as f64 + rng.gen::<f64>()) * cell,
                (j as f64 + rng.gen::<f64>()) * cell,
            ));
            let tilt = (rng.normal() * tilt_spread).abs().min(1.2);
            let phi = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
            cell_normals.push(Normal::new(
                tilt.sin() * phi.cos(),
                tilt.sin() * phi.sin(),
                tilt.cos(),
            ));
        }
    }
    let nf = n as f64;
    let torus = |a: f64, b: f64| {
        let d = (a - b).abs();
        d.min(nf - d)
    };
    let reach = if g >= 5 { 2i64 } else { g as i64 };
    NormalMap::from_fn(n, n, true, |x, y| {
        let px = x as f64 + 0.5;
        let py = y as f64 + 0.5;
        let ci = (px / cell) as i64;
        let cj = (py / cell) as i64;
        let mut best = (f64::INFINITY, 0usize);
        for dj in -reach..=reach {
            for di in -reach..=reach {
                let si = (ci + di).rem_euclid(g as i64) as usize;
                let sj = (cj + dj).rem_euclid(g as i64) as usize;
                let k = sj * g + si;
                let (sx, sy) = seeds[k];
                let d = torus(px, sx).powi(2) + torus(py, sy).powi(2);
                if d < best.0 {
                    best = (d, k);
                }
            }
        }
        cell_normals[best.1]
    })
}
