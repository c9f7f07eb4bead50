//! Brute-force patch NDF: the positional Gaussian of a footprint weights
//! every texel, and each texel contributes a Gaussian lobe of width `σ_r`
//! around its projected normal `(n_x, n_y)`.
//!
//! This is both the precomputation kernel and the reference every
//! compressed query is checked against, so it stays deliberately simple.
//!
//! Both Gaussians are truncated at 4σ. An image pixel holds the exact
//! average of the truncated lobe over the pixel, so the point evaluator
//! and the image agree pixel-by-pixel, and both are normalized so that
//! `Σ value · Δ = 1` over the in-disk pixels (`Δ = (2 / res)²`).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::texture::NormalMap;

/// Truncation radius of both Gaussians, in standard deviations.
pub const TRUNCATION: f64 = 4.0;

/// Default intrinsic roughness in projected half-vector units.
pub const DEFAULT_SIGMA_R: f64 = 0.005;

const NDFI_MAGIC: &[u8; 4] = b"NDFI";

/// Positional Gaussian footprint. `center` is in texel coordinates
/// (texel `(x, y)` spans `[x, x+1) × [y, y+1)`), `sigma_p` in texels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub center: [f64; 2],
    pub sigma_p: f64,
}

impl Footprint {
    pub fn new(u: f64, v: f64, sigma_p: f64) -> Self {
        Self {
            center: [u, v],
            sigma_p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_p > 0.0) || !self.sigma_p.is_finite() {
            return Err(Error::param(format!("sigma_p must be positive, got {}", self.sigma_p)));
        }
        if !self.center[0].is_finite() || !self.center[1].is_finite() {
            return Err(Error::param("footprint center must be finite"));
        }
        Ok(())
    }
}

/// Standard deviation of the per-microfacet lobe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntrinsicRoughness {
    pub sigma_r: f64,
}

impl IntrinsicRoughness {
    pub fn new(sigma_r: f64) -> Result<Self> {
        if !(sigma_r > 0.0) || !sigma_r.is_finite() {
            return Err(Error::param(format!("sigma_r must be positive, got {sigma_r}")));
        }
        Ok(Self { sigma_r })
    }
}

impl Default for IntrinsicRoughness {
    fn default() -> Self {
        Self {
            sigma_r: DEFAULT_SIGMA_R,
        }
    }
}

/// How the footprint support treats the map border.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Border {
    /// Wrap on tileable maps, reject escaping footprints otherwise.
    Auto,
    /// Only texels inside the map contribute.
    Clip,
}

/// Discretized NDF over the projected half-vector square `[-1, 1]²`.
/// Values are channel-planar, rows top to bottom in `h_y`.
#[derive(Debug, Clone, PartialEq)]
pub struct NdfImage {
    resolution: usize,
    channels: usize,
    values: Vec<f32>,
}

impl NdfImage {
    pub fn zeros(resolution: usize, channels: usize) -> Self {
        Self {
            resolution,
            channels,
            values: vec![0.0; resolution * resolution * channels],
        }
    }

    pub fn from_values(resolution: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if resolution == 0 || channels == 0 || values.len() != resolution * resolution * channels {
            return Err(Error::Malformed(format!(
                "{} values for {resolution}² × {channels}",
                values.len()
            )));
        }
        Ok(Self {
            resolution,
            channels,
            values,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.resolution * self.resolution;
        &self.values[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.resolution + x]
    }

    /// Pixel area in projected half-vector units.
    pub fn pixel_area(&self) -> f64 {
        pixel_area(self.resolution)
    }

    /// `Σ value · Δ` of channel 0.
    pub fn integral(&self) -> f64 {
        self.channel(0).iter().map(|&v| v as f64).sum::<f64>() * self.pixel_area()
    }

    pub fn is_blank(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, &v| m.max(v as f64))
    }

    pub fn mse(&self, other: &NdfImage) -> f64 {
        assert_eq!(self.values.len(), other.values.len());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            / self.values.len() as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// 16-byte header (`NDFI`, resolution, channels, reserved) then
    /// little-endian f32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.values.len() * 4);
        out.extend_from_slice(NDFI_MAGIC);
        out.extend_from_slice(&(self.resolution as u32).to_le_bytes());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Truncated("NDFI header".into()));
        }
        if &bytes[..4] != NDFI_MAGIC {
            return Err(Error::BadMagic { expected: "NDFI" });
        }
        let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let (res, ch) = (word(4), word(8));
        let n = res * res * ch;
        if bytes.len() != 16 + n * 4 {
            return Err(Error::Truncated(format!("NDFI payload {} bytes", bytes.len() - 16)));
        }
        let values = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_values(res, ch, values)
    }

    /// Tone-mapped 8-bit grayscale PNG of channel 0, scaled to the image max.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let max = self.max_value().max(1e-30);
        let res = self.resolution as u32;
        let img = image::GrayImage::from_fn(res, res, |x, y| {
            let v = self.get(x as usize, y as usize) as f64 / max;
            image::Luma([(v.sqrt().clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        img.save(path)?;
        Ok(())
    }
}

#[inline]
pub fn pixel_area(resolution: usize) -> f64 {
    let d = 2.0 / resolution as f64;
    d * d
}

/// Pixel containing projected half vector `h`, or `None` outside the unit
/// disk.
#[inline]
pub fn pixel_of(h: [f64; 2], resolution: usize) -> Option<(usize, usize)> {
    if h[0] * h[0] + h[1] * h[1] > 1.0 || !h[0].is_finite() || !h[1].is_finite() {
        return None;
    }
    let to = |v: f64| (((v + 1.0) * 0.5 * resolution as f64) as usize).min(resolution - 1);
    Some((to(h[0]), to(h[1])))
}

#[inline]
pub fn pixel_center(x: usize, y: usize, resolution: usize) -> [f64; 2] {
    let d = 2.0 / resolution as f64;
    [-1.0 + (x as f64 + 0.5) * d, -1.0 + (y as f64 + 0.5) * d]
}

#[inline]
pub fn pixel_in_disk(x: usize, y: usize, resolution: usize) -> bool {
    let c = pixel_center(x, y, resolution);
    c[0] * c[0] + c[1] * c[1] <= 1.0
}

/// Positional weights for one axis: `(texel index, weight)`, possibly
/// folded on wrap so each texel appears once.
fn axis_weights(
    center: f64,
    sigma: f64,
    len: usize,
    wrap: bool,
    clip: bool,
    sides: (&'static str, &'static str),
) -> Result<Vec<(usize, f64)>> {
    let reach = TRUNCATION * sigma;
    let lo = (center - reach - 0.5).ceil() as i64;
    let hi = (center + reach - 0.5).floor() as i64;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let weight = |i: i64| {
        let d = i as f64 + 0.5 - center;
        (-d * d * inv).exp()
    };
    if wrap {
        if hi - lo + 1 >= len as i64 {
            let mut folded = vec![0.0; len];
            for i in lo..=hi {
                folded[i.rem_euclid(len as i64) as usize] += weight(i);
            }
            return Ok(folded.into_iter().enumerate().filter(|(_, w)| *w > 0.0).collect());
        }
        return Ok((lo..=hi)
            .map(|i| (i.rem_euclid(len as i64) as usize, weight(i)))
            .collect());
    }
    if !clip {
        if lo < 0 {
            return Err(Error::FootprintOutOfBounds(sides.0));
        }
        if hi >= len as i64 {
            return Err(Error::FootprintOutOfBounds(sides.1));
        }
    }
    let lo = lo.max(0);
    let hi = hi.min(len as i64 - 1);
    Ok((lo..=hi).map(|i| (i as usize, weight(i))).collect())
}

struct Support {
    xs: Vec<(usize, f64)>,
    ys: Vec<(usize, f64)>,
}

fn support(map: &NormalMap, fp: &Footprint, border: Border) -> Result<Support> {
    fp.validate()?;
    let wrap = map.tileable() && border == Border::Auto;
    let clip = border == Border::Clip;
    let xs = axis_weights(fp.center[0], fp.sigma_p, map.width(), wrap, clip, ("left", "right"))?;
    let ys = axis_weights(fp.center[1], fp.sigma_p, map.height(), wrap, clip, ("top", "bottom"))?;
    Ok(Support { xs, ys })
}

#[inline]
fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z * std::f64::consts::FRAC_1_SQRT_2))
}

/// Per-pixel masses of a truncated 1D Gaussian at `mu` (projected units)
/// over pixel intervals; returns the first pixel and the masses.
#[inline]
fn lobe_masses(mu: f64, sigma: f64, res: usize, out: &mut Vec<f64>) -> usize {
    out.clear();
    let d = 2.0 / res as f64;
    let a = mu - TRUNCATION * sigma;
    let b = mu + TRUNCATION * sigma;
    let first = (((a + 1.0) / d).floor().max(0.0)) as usize;
    let last = ((((b + 1.0) / d).floor()) as i64).min(res as i64 - 1);
    if last < first as i64 || b < -1.0 || a > 1.0 {
        return 0;
    }
    let mut prev = std_normal_cdf((((-1.0 + first as f64 * d).max(a)) - mu) / sigma);
    for k in first..=last as usize {
        let edge = (-1.0 + (k + 1) as f64 * d).min(b);
        let cur = std_normal_cdf((edge - mu) / sigma);
        out.push(cur - prev);
        prev = cur;
    }
    first
}

/// Truncated 2D lobe density at `h` for projected normal `n`.
#[inline]
fn lobe_density(n: [f64; 2], h: [f64; 2], sigma: f64) -> f64 {
    let dx = h[0] - n[0];
    let dy = h[1] - n[1];
    let reach = TRUNCATION * sigma;
    if dx.abs() > reach || dy.abs() > reach {
        return 0.0;
    }
    let s2 = sigma * sigma;
    (-(dx * dx + dy * dy) / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2)
}

/// Accumulates every texel's lobe, pixel-averaged, into `acc`; returns
/// the normalizer `Σ w · (in-disk mass)`.
fn splat(map: &NormalMap, sup: &Support, sigma_r: f64, res: usize, acc: &mut [f64]) -> f64 {
    let inv_area = 1.0 / pixel_area(res);
    let mut mx = Vec::new();
    let mut my = Vec::new();
    let mut total = 0.0;
    for &(ty, wy) in &sup.ys {
        for &(tx, wx) in &sup.xs {
            let w = wx * wy;
            let n = map.get(tx, ty);
            let fx = lobe_masses(n.x, sigma_r, res, &mut mx);
            let fy = lobe_masses(n.y, sigma_r, res, &mut my);
            for (j, &m_y) in my.iter().enumerate() {
                let py = fy + j;
                let row = &mut acc[py * res..(py + 1) * res];
                for (i, &m_x) in mx.iter().enumerate() {
                    let px = fx + i;
                    if !pixel_in_disk(px, py, res) {
                        continue;
                    }
                    let m = w * m_x * m_y;
                    row[px] += m * inv_area;
                    total += m;
                }
            }
        }
    }
    total
}

fn finish(res: usize, acc: Vec<f64>, total: f64) -> NdfImage {
    let scale = if total > 0.0 { 1.0 / total } else { 0.0 };
    NdfImage {
        resolution: res,
        channels: 1,
        values: acc.into_iter().map(|v| (v * scale) as f32).collect(),
    }
}

/// Discretized P-NDF image of one footprint.
pub fn eval_pndf_image(
    map: &NormalMap,
    fp: &Footprint,
    rough: IntrinsicRoughness,
    resolution: usize,
) -> Result<NdfImage> {
    eval_pndf_image_with(map, fp, rough, resolution, Border::Auto)
}

/// As [`eval_pndf_image`] with an explicit border policy. A clipped
/// footprint that misses the map entirely yields an all-zero image.
pub fn eval_pndf_image_with(
    map: &NormalMap,
    fp: &Footprint,
    rough: IntrinsicRoughness,
    resolution: usize,
    border: Border,
) -> Result<NdfImage> {
    if resolution == 0 {
        return Err(Error::param("NDF resolution must be positive"));
    }
    let sup = support(map, fp, border)?;
    let mut acc = vec![0.0; resolution * resolution];
    let total = splat(map, &sup, rough.sigma_r, resolution, &mut acc);
    Ok(finish(resolution, acc, total))
}

/// Reference discretization that point-samples each lobe on an `ss × ss`
/// sub-pixel grid instead of integrating it exactly.
pub fn eval_pndf_image_supersampled(
    map: &NormalMap,
    fp: &Footprint,
    rough: IntrinsicRoughness,
    resolution: usize,
    ss: usize,
) -> Result<NdfImage> {
    let sup = support(map, fp, Border::Auto)?;
    let res = resolution;
    let d = 2.0 / res as f64;
    let sub = d / ss as f64;
    let sigma = rough.sigma_r;
    let reach = TRUNCATION * sigma;
    let mut acc = vec![0.0; res * res];
    let mut total = 0.0;
    let area = pixel_area(res);
    for &(ty, wy) in &sup.ys {
        for &(tx, wx) in &sup.xs {
            let w = wx * wy;
            let n = map.get(tx, ty);
            let nn = [n.x, n.y];
            let lo = |v: f64| ((((v - reach + 1.0) / d).floor()).max(0.0)) as usize;
            let hi = |v: f64| ((((v + reach + 1.0) / d).floor()) as i64).min(res as i64 - 1);
            let (x0, x1, y0, y1) = (lo(n.x), hi(n.x), lo(n.y), hi(n.y));
            if x1 < x0 as i64 || y1 < y0 as i64 {
                continue;
            }
            for py in y0..=y1 as usize {
                for px in x0..=x1 as usize {
                    if !pixel_in_disk(px, py, res) {
                        continue;
                    }
                    let mut s = 0.0;
                    for sy in 0..ss {
                        for sx in 0..ss {
                            let h = [
                                -1.0 + px as f64 * d + (sx as f64 + 0.5) * sub,
                                -1.0 + py as f64 * d + (sy as f64 + 0.5) * sub,
                            ];
                            s += lobe_density(nn, h, sigma);
                        }
                    }
                    let v = w * s / (ss * ss) as f64;
                    acc[py * res + px] += v;
                    total += v * area;
                }
            }
        }
    }
    Ok(finish(res, acc, total))
}

/// Continuous P-NDF at one projected half vector, normalized consistently
/// with [`eval_pndf_image`] at the same resolution.
pub fn eval_pndf_point(
    map: &NormalMap,
    fp: &Footprint,
    h: [f64; 2],
    rough: IntrinsicRoughness,
    resolution: usize,
) -> Result<f64> {
    eval_pndf_point_with(map, fp, h, rough, resolution, Border::Auto)
}

pub fn eval_pndf_point_with(
    map: &NormalMap,
    fp: &Footprint,
    h: [f64; 2],
    rough: IntrinsicRoughness,
    resolution: usize,
    border: Border,
) -> Result<f64> {
    let sup = support(map, fp, border)?;
    Ok(point_from_support(map, &sup, h, rough.sigma_r, resolution))
}

fn point_from_support(map: &NormalMap, sup: &Support, h: [f64; 2], sigma: f64, res: usize) -> f64 {
    // h must sit on an in-disk pixel, as in the image
    let Some((px, py)) = pixel_of(h, res) else {
        return 0.0;
    };
    if !pixel_in_disk(px, py, res) {
        return 0.0;
    }
    let mut mx = Vec::new();
    let mut my = Vec::new();
    let mut num = 0.0;
    let mut total = 0.0;
    let interior = 1.0 - (2.0 * TRUNCATION * sigma + 2.0 * 2.0 / res as f64);
    let full_mass = {
        let m = std_normal_cdf(TRUNCATION) - std_normal_cdf(-TRUNCATION);
        m * m
    };
    for &(ty, wy) in &sup.ys {
        for &(tx, wx) in &sup.xs {
            let w = wx * wy;
            let n = map.get(tx, ty);
            let nn = [n.x, n.y];
            num += w * lobe_density(nn, h, sigma);
            // in-disk mass; lobes well inside the disk keep their full mass
            if (n.x * n.x + n.y * n.y).sqrt() < interior {
                total += w * full_mass;
            } else {
                let fx = lobe_masses(n.x, sigma, res, &mut mx);
                let fy = lobe_masses(n.y, sigma, res, &mut my);
                let mut m = 0.0;
                for (j, &m_y) in my.iter().enumerate() {
                    for (i, &m_x) in mx.iter().enumerate() {
                        if pixel_in_disk(fx + i, fy + j, res) {
                            m += m_x * m_y;
                        }
                    }
                }
                total += w * m;
            }
        }
    }
    if total > 0.0 {
        num / total
    } else {
        0.0
    }
}

/// Number of texels an oracle evaluation visits for this footprint.
pub fn support_texel_count(map: &NormalMap, fp: &Footprint) -> Result<usize> {
    let sup = support(map, fp, Border::Auto)?;
    Ok(sup.xs.len() * sup.ys.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::texture::{generate_exemplar_any, ExemplarKind, Normal};

    const RES: usize = 64;

    fn rough(s: f64) -> IntrinsicRoughness {
        IntrinsicRoughness::new(s).unwrap()
    }

    fn argmax(img: &NdfImage) -> (usize, usize) {
        let i = img
            .channel(0)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        (i % img.resolution(), i / img.resolution())
    }

    #[test]
    fn flat_map_gives_centered_blob() {
        let map = NormalMap::flat(32, 32, true);
        let img = eval_pndf_image(&map, &Footprint::new(10.0, 7.0, 3.0), rough(0.05), RES).unwrap();
        let (x, y) = argmax(&img);
        assert!((x == 31 || x == 32) && (y == 31 || y == 32));
        assert!((img.integral() - 1.0).abs() < 1e-5);
        // symmetric about the center
        assert!((img.get(31, 31) - img.get(32, 32)).abs() < 1e-3 * img.get(31, 31));
    }

    #[test]
    fn tilted_map_blob_position() {
        let n = Normal::new(0.3, 0.0, (1.0f64 - 0.09).sqrt());
        let map = NormalMap::from_fn(16, 16, true, |_, _| n).unwrap();
        let res = 256;
        let img = eval_pndf_image(&map, &Footprint::new(8.0, 8.0, 2.0), rough(0.005), res).unwrap();
        let (x, y) = argmax(&img);
        assert_eq!(x, ((0.3 + 1.0) / 2.0 * res as f64) as usize);
        assert!(y == res / 2 || y == res / 2 - 1);
    }

    #[test]
    fn point_peak_on_flat_map() {
        let map = NormalMap::flat(16, 16, true);
        let s = 0.05;
        let v = eval_pndf_point(&map, &Footprint::new(8.0, 8.0, 2.0), [0.0, 0.0], rough(s), RES)
            .unwrap();
        let mass = std_normal_cdf(4.0) - std_normal_cdf(-4.0);
        let expect = 1.0 / (2.0 * std::f64::consts::PI * s * s) / (mass * mass);
        assert!((v - expect).abs() < 1e-9 * expect, "{v} {expect}");
        let far = eval_pndf_point(&map, &Footprint::new(8.0, 8.0, 2.0), [1.0, 0.0], rough(s), RES)
            .unwrap();
        assert!(far < 1e-12 * v);
    }

    #[test]
    fn non_tileable_escape_names_side() {
        let map = NormalMap::flat(32, 32, false);
        let e = eval_pndf_image(&map, &Footprint::new(2.0, 16.0, 2.0), rough(0.05), RES);
        assert!(matches!(e, Err(Error::FootprintOutOfBounds("left"))));
        let e = eval_pndf_image(&map, &Footprint::new(16.0, 31.0, 2.0), rough(0.05), RES);
        assert!(matches!(e, Err(Error::FootprintOutOfBounds("bottom"))));
        let clipped =
            eval_pndf_image_with(&map, &Footprint::new(2.0, 16.0, 2.0), rough(0.05), RES, Border::Clip)
                .unwrap();
        assert!((clipped.integral() - 1.0).abs() < 1e-5);
        let gone = eval_pndf_image_with(
            &map,
            &Footprint::new(-100.0, 16.0, 2.0),
            rough(0.05),
            RES,
            Border::Clip,
        )
        .unwrap();
        assert!(gone.is_blank());
    }

    #[test]
    fn quadrature_of_point_matches_pixels() {
        let map = generate_exemplar_any(ExemplarKind::isotropic_noise(), 64, 3).unwrap();
        let fp = Footprint::new(20.0, 40.0, 4.0);
        let r = rough(0.02);
        let img = eval_pndf_image(&map, &fp, r, RES).unwrap();
        // densest 4x4 patch
        let (cx, cy) = argmax(&img);
        let (x0, y0) = (cx.saturating_sub(2), cy.saturating_sub(2));
        let mut pix = 0.0;
        for y in y0..y0 + 4 {
            for x in x0..x0 + 4 {
                pix += img.get(x, y) as f64;
            }
        }
        pix /= 16.0;
        let q = 24; // quadrature points per pixel side
        let d = 2.0 / RES as f64;
        let mut quad = 0.0;
        for j in 0..4 * q {
            for i in 0..4 * q {
                let h = [
                    -1.0 + x0 as f64 * d + (i as f64 + 0.5) * d / q as f64,
                    -1.0 + y0 as f64 * d + (j as f64 + 0.5) * d / q as f64,
                ];
                quad += eval_pndf_point(&map, &fp, h, r, RES).unwrap();
            }
        }
        quad /= (16 * q * q) as f64;
        assert!((quad - pix).abs() < 0.01 * pix, "{quad} vs {pix}");
    }

    #[test]
    fn footprint_mixture_is_average() {
        // two disjoint constant-normal halves; footprints centered in each
        let a = Normal::new(0.2, 0.1, 1.0);
        let b = Normal::new(-0.3, 0.2, 1.0);
        let map = NormalMap::from_fn(64, 32, false, |x, _| if x < 32 { a } else { b }).unwrap();
        let r = rough(0.02);
        let left = eval_pndf_image(&map, &Footprint::new(16.0, 16.0, 3.0), r, RES).unwrap();
        let right = eval_pndf_image(&map, &Footprint::new(48.0, 16.0, 3.0), r, RES).unwrap();
        // a wide footprint on the seam weighs both halves equally
        let both = eval_pndf_image_with(&map, &Footprint::new(32.0, 16.0, 200.0), r, RES, Border::Clip)
            .unwrap();
        for i in 0..RES * RES {
            let avg = 0.5 * (left.values()[i] + right.values()[i]);
            assert!((both.values()[i] - avg).abs() < 1e-3 * (1.0 + avg), "pixel {i}");
        }
    }

    #[test]
    fn tiny_footprint_converges_to_single_texel() {
        let map = generate_exemplar_any(ExemplarKind::isotropic_noise(), 32, 8).unwrap();
        let r = rough(0.03);
        let img = eval_pndf_image(&map, &Footprint::new(10.5, 12.5, 0.05), r, RES).unwrap();
        let n = map.get(10, 12);
        let single = NormalMap::from_fn(4, 4, true, |_, _| n).unwrap();
        let reference = eval_pndf_image(&single, &Footprint::new(2.0, 2.0, 0.5), r, RES).unwrap();
        assert!(img.mse(&reference) < 1e-10 * reference.max_value().powi(2));
    }

    #[test]
    fn wider_roughness_spreads_distribution() {
        let map = generate_exemplar_any(ExemplarKind::isotropic_noise(), 64, 1).unwrap();
        let fp = Footprint::new(32.0, 32.0, 6.0);
        let variance = |img: &NdfImage| {
            let mut s = [0.0; 3];
            for y in 0..RES {
                for x in 0..RES {
                    let w = img.get(x, y) as f64;
                    let c = pixel_center(x, y, RES);
                    s[0] += w;
                    s[1] += w * c[0];
                    s[2] += w * (c[0] * c[0] + c[1] * c[1]);
                }
            }
            s[2] / s[0] - (s[1] / s[0]).powi(2)
        };
        let a = eval_pndf_image(&map, &fp, rough(0.01), RES).unwrap();
        let b = eval_pndf_image(&map, &fp, rough(0.02), RES).unwrap();
        assert!(variance(&b) > variance(&a));
    }

    #[test]
    fn ndfi_round_trip_and_bad_magic() {
        let map = NormalMap::flat(8, 8, true);
        let img = eval_pndf_image(&map, &Footprint::new(4.0, 4.0, 1.0), rough(0.1), 16).unwrap();
        let bytes = img.to_bytes();
        assert_eq!(bytes.len(), 16 + 16 * 16 * 4);
        assert_eq!(NdfImage::from_bytes(&bytes).unwrap(), img);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(NdfImage::from_bytes(&bad), Err(Error::BadMagic { .. })));
        assert!(NdfImage::from_bytes(&bytes[..40]).is_err());
    }

    #[test]
    fn values_outside_disk_are_zero() {
        let map = generate_exemplar_any(ExemplarKind::isotropic_noise(), 32, 2).unwrap();
        let img = eval_pndf_image(&map, &Footprint::new(16.0, 16.0, 3.0), rough(0.5), RES).unwrap();
        for y in 0..RES {
            for x in 0..RES {
                let v = img.get(x, y);
                assert!(v >= 0.0);
                if !pixel_in_disk(x, y, RES) {
                    assert_eq!(v, 0.0);
                }
            }
        }
        assert!((img.integral() - 1.0).abs() < 1e-5);
    }
}
