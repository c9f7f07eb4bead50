//! Multi-level grid of precomputed NDF images.
//!
//! Level `ℓ` samples footprint centers every `s · 2^ℓ` texels at cell
//! centers `((i + ½) · stride, (j + ½) · stride)`, each with a positional
//! Gaussian of `σ_p · 2^ℓ`. Any query footprint is answered by trilinear
//! blending in `(u, v, log2 σ_p)`; [`SpatialBlend`] computes the weights
//! and is shared by the compressed store.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndf::{
    eval_pndf_image_with, Border, Footprint, IntrinsicRoughness, NdfImage, DEFAULT_SIGMA_R,
    TRUNCATION,
};
use crate::texture::NormalMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidParams {
    pub base_stride: usize,
    pub base_sigma: f64,
    pub ndf_resolution: usize,
    /// Level growth stops once the mean squared difference between a level
    /// and its 2×2-averaged children, divided by the mean squared pixel
    /// value of the level, drops below this.
    pub convergence_mse: f64,
    pub sigma_r: f64,
}

impl PyramidParams {
    pub fn with_stride(stride: usize) -> Self {
        Self {
            base_stride: stride,
            base_sigma: 1.5 * stride as f64 / 12f64.sqrt(),
            ..Self::default()
        }
    }

    pub fn roughness(&self) -> IntrinsicRoughness {
        IntrinsicRoughness {
            sigma_r: self.sigma_r,
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.base_stride == 0 || width % self.base_stride != 0 || height % self.base_stride != 0
        {
            return Err(Error::param(format!(
                "stride {} does not divide {width}x{height}",
                self.base_stride
            )));
        }
        if !(self.base_sigma > 0.0) {
            return Err(Error::param("base_sigma must be positive"));
        }
        if self.ndf_resolution == 0 {
            return Err(Error::param("ndf_resolution must be positive"));
        }
        IntrinsicRoughness::new(self.sigma_r)?;
        Ok(())
    }
}

impl Default for PyramidParams {
    fn default() -> Self {
        Self {
            base_stride: 32,
            base_sigma: 1.5 * 32.0 / 12f64.sqrt(),
            ndf_resolution: 256,
            convergence_mse: 1e-4,
            sigma_r: DEFAULT_SIGMA_R,
        }
    }
}

/// How sample indices beyond the stored grid resolve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridBorder {
    /// Periodic map: indices wrap.
    Wrap,
    /// Indices clamp to the stored range; footprint supports were clipped to
    /// the map when precomputing.
    Clip,
}

impl GridBorder {
    pub fn oracle_border(self) -> Border {
        match self {
            GridBorder::Wrap => Border::Auto,
            GridBorder::Clip => Border::Clip,
        }
    }
}

/// Sample layout of one level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelGrid {
    pub stride: usize,
    pub sigma: f64,
    /// Global index of the first stored center per axis (negative for
    /// extended grids).
    pub first: [i64; 2],
    pub count: [usize; 2],
}

impl LevelGrid {
    pub fn len(&self) -> usize {
        self.count[0] * self.count[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Center of storage slot `k`, in texels.
    pub fn center(&self, k: usize) -> [f64; 2] {
        let i = self.first[0] + (k % self.count[0]) as i64;
        let j = self.first[1] + (k / self.count[0]) as i64;
        [
            (i as f64 + 0.5) * self.stride as f64,
            (j as f64 + 0.5) * self.stride as f64,
        ]
    }

    /// Storage slot of global index `(i, j)`.
    pub fn slot(&self, i: i64, j: i64, border: GridBorder) -> usize {
        let resolve = |g: i64, axis: usize| -> usize {
            let local = g - self.first[axis];
            let n = self.count[axis] as i64;
            match border {
                GridBorder::Wrap => local.rem_euclid(n) as usize,
                GridBorder::Clip => local.clamp(0, n - 1) as usize,
            }
        };
        resolve(j, 1) * self.count[0] + resolve(i, 0)
    }

    pub fn footprint(&self, k: usize) -> Footprint {
        let c = self.center(k);
        Footprint::new(c[0], c[1], self.sigma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub count: usize,
    pub blank_pixel_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub grid: LevelGrid,
    pub images: Vec<NdfImage>,
    pub stats: LevelStats,
}

#[derive(Debug, Clone)]
pub struct NdfPyramid {
    pub params: PyramidParams,
    pub map_size: [usize; 2],
    pub border: GridBorder,
    pub levels: Vec<PyramidLevel>,
}

/// Where a footprint size falls relative to the precomputed levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LevelChoice {
    /// Smaller than the base level: use the brute-force evaluator.
    Below,
    /// Between `lower` and `lower + 1` with blend fraction `frac` (`frac == 0`
    /// touches `lower` only).
    Blend { lower: usize, frac: f64 },
    /// Larger than the top level: clamped to it.
    Clamped,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BlendTerm {
    pub weight: f64,
    pub level: usize,
    pub slot: usize,
}

/// Up to eight weighted samples (4 spatial neighbors × 2 levels).
#[derive(Debug, Clone, Copy)]
pub struct SpatialBlend {
    terms: [BlendTerm; 8],
    len: usize,
    pub choice: LevelChoice,
}

impl SpatialBlend {
    pub fn terms(&self) -> &[BlendTerm] {
        &self.terms[..self.len]
    }

    /// Trilinear weights for `fp`; `choice` is [`LevelChoice::Below`] (with
    /// no terms) when the footprint is finer than the base level.
    pub fn new(levels: &[LevelGrid], base_sigma: f64, border: GridBorder, fp: &Footprint) -> Self {
        let mut out = SpatialBlend {
            terms: [BlendTerm::default(); 8],
            len: 0,
            choice: LevelChoice::Below,
        };
        if levels.is_empty() {
            return out;
        }
        let top = levels.len() - 1;
        let lstar = (fp.sigma_p / base_sigma).log2();
        if lstar < 0.0 {
            return out;
        }
        let (lower, frac) = if lstar > top as f64 {
            out.choice = LevelChoice::Clamped;
            (top, 0.0)
        } else {
            let lower = (lstar.floor() as usize).min(top);
            let frac = if lower == top { 0.0 } else { lstar - lower as f64 };
            out.choice = LevelChoice::Blend { lower, frac };
            (lower, frac)
        };
        out.push_level(levels, lower, 1.0 - frac, border, fp);
        if frac > 0.0 {
            out.push_level(levels, lower + 1, frac, border, fp);
        }
        out
    }

    fn push_level(
        &mut self,
        levels: &[LevelGrid],
        level: usize,
        w: f64,
        border: GridBorder,
        fp: &Footprint,
    ) {
        let g = &levels[level];
        let s = g.stride as f64;
        let gx = fp.center[0] / s - 0.5;
        let gy = fp.center[1] / s - 0.5;
        let (i0, j0) = (gx.floor(), gy.floor());
        let (fx, fy) = (gx - i0, gy - j0);
        let (i0, j0) = (i0 as i64, j0 as i64);
        for (dj, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (di, wx) in [(0, 1.0 - fx), (1, fx)] {
                let weight = w * wx * wy;
                if weight == 0.0 {
                    continue;
                }
                self.terms[self.len] = BlendTerm {
                    weight,
                    level,
                    slot: g.slot(i0 + di, j0 + dj, border),
                };
                self.len += 1;
            }
        }
    }
}

impl NdfPyramid {
    pub fn grids(&self) -> Vec<LevelGrid> {
        self.levels.iter().map(|l| l.grid).collect()
    }

    pub fn image_count(&self) -> usize {
        self.levels.iter().map(|l| l.images.len()).sum()
    }

    /// Bytes of all NDF images stored as f32, the uncompressed baseline.
    pub fn raw_bytes(&self) -> usize {
        self.levels
            .iter()
            .flat_map(|l| &l.images)
            .map(|img| img.values().len() * 4)
            .sum()
    }

    /// Mean per-pixel squared difference between level `ℓ` images averaged
    /// over each 2×2 child group and the aligned level `ℓ + 1` image,
    /// relative to the mean squared pixel value of level `ℓ + 1`.
    pub fn level_convergence(&self, level: usize) -> Result<f64> {
        if level + 1 >= self.levels.len() {
            return Err(Error::OutOfRange(format!(
                "level {level} has no parent ({} levels)",
                self.levels.len()
            )));
        }
        let (mse, energy) = convergence_between(&self.levels[level], &self.levels[level + 1], self.border);
        Ok(if energy > 0.0 { mse / energy } else { mse })
    }

    /// Mean over a level's images of their MSE against the level's mean
    /// image.
    pub fn level_spread(&self, level: usize) -> f64 {
        let imgs = &self.levels[level].images;
        let n = imgs[0].values().len();
        let mut mean = vec![0.0f64; n];
        for img in imgs {
            for (m, &v) in mean.iter_mut().zip(img.values()) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= imgs.len() as f64);
        imgs.iter()
            .map(|img| {
                img.values()
                    .iter()
                    .zip(&mean)
                    .map(|(&v, m)| (v as f64 - m).powi(2))
                    .sum::<f64>()
                    / n as f64
            })
            .sum::<f64>()
            / imgs.len() as f64
    }

    /// Image of one sample.
    pub fn image(&self, level: usize, slot: usize) -> &NdfImage {
        &self.levels[level].images[slot]
    }

    /// Blended NDF value of the uncompressed pyramid at pixel `(x, y)`.
    pub fn blended_pixel(&self, blend: &SpatialBlend, x: usize, y: usize) -> f64 {
        blend
            .terms()
            .iter()
            .map(|t| t.weight * self.image(t.level, t.slot).get(x, y) as f64)
            .sum()
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            params: self.params.clone(),
            map_size: self.map_size,
            border: self.border,
            levels: self
                .levels
                .iter()
                .map(|l| ManifestLevel {
                    grid: l.grid,
                    stats: l.stats.clone(),
                })
                .collect(),
        };
        let text = toml::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
        let mpath = dir.join(MANIFEST);
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
        for (li, level) in self.levels.iter().enumerate() {
            for (k, img) in level.images.iter().enumerate() {
                img.save(&dir.join(image_name(li, k)))?;
            }
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
        let mut levels = Vec::with_capacity(manifest.levels.len());
        for (li, ml) in manifest.levels.into_iter().enumerate() {
            let images = (0..ml.grid.len())
                .map(|k| NdfImage::load(&dir.join(image_name(li, k))))
                .collect::<Result<Vec<_>>>()?;
            levels.push(PyramidLevel {
                grid: ml.grid,
                images,
                stats: ml.stats,
            });
        }
        if levels.is_empty() {
            return Err(Error::Empty("pyramid has no levels"));
        }
        Ok(Self {
            params: manifest.params,
            map_size: manifest.map_size,
            border: manifest.border,
            levels,
        })
    }
}

const MANIFEST: &str = "manifest.toml";

fn image_name(level: usize, slot: usize) -> String {
    format!("L{level}_{slot:06}.ndfi")
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    params: PyramidParams,
    map_size: [usize; 2],
    border: GridBorder,
    levels: Vec<ManifestLevel>,
}

#[derive(Serialize, Deserialize)]
struct ManifestLevel {
    grid: LevelGrid,
    stats: LevelStats,
}

/// Returns `(mse, mean squared pixel value of the parent images)`.
fn convergence_between(child: &PyramidLevel, parent: &PyramidLevel, border: GridBorder) -> (f64, f64) {
    let cg = &child.grid;
    let pg = &parent.grid;
    let mut sum = 0.0;
    let mut pixels = 0usize;
    let mut energy_sum = 0.0;
    let mut groups = 0usize;
    for k in 0..pg.len() {
        let pi = pg.first[0] + (k % pg.count[0]) as i64;
        let pj = pg.first[1] + (k / pg.count[0]) as i64;
        let kids: Vec<(i64, i64)> = (0..2)
            .flat_map(|dj| (0..2).map(move |di| (2 * pi + di, 2 * pj + dj)))
            .collect();
        let inside = |(i, j): (i64, i64)| {
            i >= cg.first[0]
                && j >= cg.first[1]
                && i < cg.first[0] + cg.count[0] as i64
                && j < cg.first[1] + cg.count[1] as i64
        };
        if border == GridBorder::Clip && !kids.iter().all(|&c| inside(c)) {
            continue;
        }
        let slots: Vec<usize> = kids.iter().map(|&(i, j)| cg.slot(i, j, border)).collect();
        let p = &parent.images[k];
        for (px, &pv) in p.values().iter().enumerate() {
            let avg: f64 = slots
                .iter()
                .map(|&s| child.images[s].values()[px] as f64)
                .sum::<f64>()
                / 4.0;
            sum += (avg - pv as f64).powi(2);
        }
        pixels += p.values().len();
        energy_sum += p.values().iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        groups += 1;
    }
    if groups == 0 {
        return (f64::INFINITY, 0.0);
    }
    (sum / pixels as f64, energy_sum / pixels as f64)
}

fn stats(images: &[NdfImage]) -> LevelStats {
    let total: usize = images.iter().map(|i| i.values().len()).sum();
    let blank: usize = images
        .iter()
        .map(|i| i.values().iter().filter(|&&v| v == 0.0).count())
        .sum();
    LevelStats {
        count: images.len(),
        blank_pixel_fraction: blank as f64 / total.max(1) as f64,
    }
}

fn build_level(
    map: &NormalMap,
    params: &PyramidParams,
    grid: LevelGrid,
    border: GridBorder,
) -> Result<PyramidLevel> {
    let rough = params.roughness();
    let images = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            eval_pndf_image_with(
                map,
                &grid.footprint(k),
                rough,
                params.ndf_resolution,
                border.oracle_border(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let stats = stats(&images);
    Ok(PyramidLevel {
        grid,
        images,
        stats,
    })
}

/// Exhaustive precomputation over the level ladder. Tileable maps wrap;
/// other maps clip each footprint's support to the map.
pub fn build_pyramid(map: &NormalMap, params: &PyramidParams) -> Result<NdfPyramid> {
    let border = if map.tileable() {
        GridBorder::Wrap
    } else {
        GridBorder::Clip
    };
    build(map, params, border, false)
}

/// Precomputation for a tile: supports are clipped to the tile and every
/// level adds a margin of centers outside it, far enough that any footprint
/// whose support still touches the tile has stored neighbors. All levels up
/// to stride = tile size are built.
pub fn build_pyramid_extended(map: &NormalMap, params: &PyramidParams) -> Result<NdfPyramid> {
    build(map, params, GridBorder::Clip, true)
}

fn build(map: &NormalMap, params: &PyramidParams, border: GridBorder, extended: bool) -> Result<NdfPyramid> {
    params.validate(map.width(), map.height())?;
    let limit = map.width().min(map.height());
    let mut levels: Vec<PyramidLevel> = Vec::new();
    let mut stride = params.base_stride;
    let mut sigma = params.base_sigma;
    loop {
        let margin = if extended {
            ((TRUNCATION * sigma / stride as f64) - 0.5).ceil().max(0.0) as i64
        } else {
            0
        };
        let grid = LevelGrid {
            stride,
            sigma,
            first: [-margin, -margin],
            count: [
                map.width() / stride + 2 * margin as usize,
                map.height() / stride + 2 * margin as usize,
            ],
        };
        let level = build_level(map, params, grid, border)?;
        log::debug!(
            "level {}: stride {stride}, sigma {sigma:.3}, {} images",
            levels.len(),
            level.images.len()
        );
        levels.push(level);
        let n = levels.len();
        if n >= 2 && !extended {
            let (mse, energy) = convergence_between(&levels[n - 2], &levels[n - 1], border);
            log::debug!("level {} relative convergence {:.3e}", n - 2, mse / energy);
            if energy > 0.0 && mse / energy < params.convergence_mse {
                break;
            }
        }
        if stride >= limit || map.width() % (stride * 2) != 0 || map.height() % (stride * 2) != 0 {
            break;
        }
        stride *= 2;
        sigma *= 2.0;
    }
    Ok(NdfPyramid {
        params: params.clone(),
        map_size: [map.width(), map.height()],
        border,
        levels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndf::eval_pndf_image;
    use crate::texture::{generate_exemplar_any, ExemplarKind};

    fn small_params() -> PyramidParams {
        PyramidParams {
            ndf_resolution: 32,
            sigma_r: 0.03,
            convergence_mse: 0.0,
            ..PyramidParams::with_stride(8)
        }
    }

    #[test]
    fn level_layout_doubles() {
        let map = generate_exemplar_any(ExemplarKind::isotropic_noise(), 64, 1).unwrap();
        let p = build_pyramid(&map, &small_params()).unwrap();
        assert_eq!(p.levels.len(), 4); // strides 8, 16, 32, 64
        for (l, level) in p.levels.iter().enumerate() {
            assert_eq!(level.grid.stride, 8 << l);
            assert!((level.grid.sigma - small_params().base_sigma * (1 << l) as f64).abs() < 1e-12);
            assert_eq!(level.grid.count, [64 / (8 << l), 64 / (8 << l)]);
            assert_eq!(level.stats.count, level.images.len());
            for img in &level.images {
                assert!((img.integral() - 1.0).abs() < 1e-4);
            }
        }
        assert_eq!(p.levels[0].grid.center(0), [4.0, 4.0]);
    }

    #[test]
    fn stride_must_divide() {
        let map = NormalMap::flat(40, 40, true);
        assert!(build_pyramid(&map, &PyramidParams::with_stride(16)).is_err());
    }

    #[test]
    fn flat_map_identical_everywhere() {
        let map = NormalMap::flat(64, 64, true);
        let mut params = small_params();
        params.convergence_mse = 1e-4;
        let p = build_pyramid(&map, &params).unwrap();
        // converges right after the second level
        assert_eq!(p.levels.len(), 2);
        let first = &p.levels[0].images[0];
        for l in &p.levels {
            for img in &l.images {
                assert_eq!(img, first);
            }
        }
        assert_eq!(p.level_convergence(0).unwrap(), 0.0);
        assert!(p.level_convergence(1).is_err());
    }

    #[test]
    fn spread_and_convergence_decrease_with_level() {
        let map = generate_exemplar_any(ExemplarKind::isotropic_noise(), 128, 5).unwrap();
        let p = build_pyramid(&map, &small_params()).unwrap();
        let spreads: Vec<f64> = (0..p.levels.len()).map(|l| p.level_spread(l)).collect();
        for w in spreads.windows(2).take(spreads.len() - 2) {
            assert!(w[1] < w[0], "{spreads:?}");
        }
        let conv: Vec<f64> = (0..p.levels.len() - 1)
            .map(|l| p.level_convergence(l).unwrap())
            .collect();
        assert!(conv.iter().all(|&c| c > 0.0));
        assert!(conv.windows(2).all(|w| w[1] < w[0]), "{conv:?}");
    }

    #[test]
    fn blend_weights_at_sample_and_between() {
        let grids = vec![
            LevelGrid { stride: 8, sigma: 2.0, first: [0, 0], count: [8, 8] },
            LevelGrid { stride: 16, sigma: 4.0, first: [0, 0], count: [4, 4] },
        ];
        let at = SpatialBlend::new(&grids, 2.0, GridBorder::Wrap, &Footprint::new(12.0, 20.0, 2.0));
        assert_eq!(at.terms().len(), 1);
        assert_eq!(at.terms()[0].weight, 1.0);
        assert_eq!(at.terms()[0].slot, 2 * 8 + 1);
        let mid = SpatialBlend::new(&grids, 2.0, GridBorder::Wrap, &Footprint::new(14.0, 21.0, 2.0 * 2f64.sqrt()));
        assert_eq!(mid.terms().len(), 8);
        let total: f64 = mid.terms().iter().map(|t| t.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let below = SpatialBlend::new(&grids, 2.0, GridBorder::Wrap, &Footprint::new(14.0, 21.0, 1.0));
        assert_eq!(below.choice, LevelChoice::Below);
        assert!(below.terms().is_empty());
        let big = SpatialBlend::new(&grids, 2.0, GridBorder::Wrap, &Footprint::new(14.0, 21.0, 100.0));
        assert_eq!(big.choice, LevelChoice::Clamped);
        assert!(big.terms().iter().all(|t| t.level == 1));
        // wrap at the border
        let wrap = SpatialBlend::new(&grids, 2.0, GridBorder::Wrap, &Footprint::new(0.0, 4.0, 2.0));
        let slots: Vec<usize> = wrap.terms().iter().map(|t| t.slot).collect();
        assert_eq!(slots, vec![7, 0]);
    }

    #[test]
    fn interpolation_error_is_bounded_by_sample_spread() {
        // a fresh NDF between samples is closer to the blend than
        // neighboring samples are to each other, on average
        let map = generate_exemplar_any(ExemplarKind::isotropic_noise(), 128, 2).unwrap();
        let params = small_params();
        let p = build_pyramid(&map, &params).unwrap();
        let grids = p.grids();
        let res = params.ndf_resolution;
        let mut interp = 0.0;
        let mut neighbor = 0.0;
        let trials = 24;
        for t in 0..trials {
            let u = 8.0 + 13.7 * t as f64 % 112.0;
            let v = 8.0 + 29.3 * t as f64 % 112.0;
            let fp = Footprint::new(u, v, params.base_sigma * 1.3);
            let fresh = eval_pndf_image(&map, &fp, params.roughness(), res).unwrap();
            let blend = SpatialBlend::new(&grids, params.base_sigma, p.border, &fp);
            let mut e = 0.0;
            for y in 0..res {
                for x in 0..res {
                    e += (p.blended_pixel(&blend, x, y) - fresh.get(x, y) as f64).powi(2);
                }
            }
            interp += e / (res * res) as f64;
            let a = p.image(0, t % 64);
            let b = p.image(0, (t + 1) % 64);
            neighbor += a.mse(b);
        }
        assert!(interp < 4.0 * neighbor, "{interp} vs {neighbor}");
    }

    #[test]
    fn extended_pyramid_has_margins() {
        let map = generate_exemplar_any(ExemplarKind::isotropic_noise(), 32, 2)
            .unwrap()
            .with_tileable(false);
        let p = build_pyramid_extended(&map, &small_params()).unwrap();
        assert_eq!(p.levels.len(), 3);
        for l in &p.levels {
            assert_eq!(l.grid.first, [-2, -2]);
            assert_eq!(l.grid.count[0], 32 / l.grid.stride + 4);
            // corner samples outside the tile still see part of it
            let corner = &l.images[0];
            assert!(!corner.is_blank());
        }
    }

    #[test]
    fn disk_round_trip() {
        let map = generate_exemplar_any(ExemplarKind::isotropic_noise(), 32, 2).unwrap();
        let p = build_pyramid(&map, &small_params()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        p.save_dir(dir.path()).unwrap();
        let q = NdfPyramid::load_dir(dir.path()).unwrap();
        assert_eq!(q.params, p.params);
        assert_eq!(q.grids(), p.grids());
        for (a, b) in p.levels.iter().zip(&q.levels) {
            assert_eq!(a.images, b.images);
        }
    }
}
