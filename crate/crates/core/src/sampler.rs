//! Importance sampling of projected half vectors proportional to an NDF,
//! by hierarchical descent over range averages.
//!
//! One variate pair drives everything: a block is chosen from the
//! `blocks × blocks` grid of block averages (row by `u1`, then column by
//! `u0`), then each of `log2 t` levels splits the current square into four
//! quads the same way, and the leftover variates jitter the position inside
//! the final pixel. Every choice rescales the variate it consumed.

use crate::error::Result;
use crate::ndf::{eval_pndf_image_with, Footprint};
use crate::pyramid::{LevelChoice, SpatialBlend};
use crate::store::{AngularRange, CompressedNdf};
use crate::texture::NormalMap;

/// Anything that answers non-negative average values over pixel rectangles
/// of a square NDF image.
pub trait RangeSource {
    fn resolution(&self) -> usize;
    /// Side of the top-level blocks; a power of two dividing the resolution.
    fn block(&self) -> usize;
    fn range_average(&self, range: &AngularRange) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleRecord {
    pub h: [f64; 2],
    /// Density in projected-half-vector measure.
    pub pdf: f64,
    pub pixel: (usize, usize),
    pub block: usize,
}

/// Block-level selection table for one NDF.
#[derive(Debug, Clone)]
pub struct BlockTable {
    blocks: usize,
    /// Row sums, cumulative; last entry is the total.
    row_cdf: Vec<f64>,
    /// Per row, cumulative block weights.
    col_cdf: Vec<f64>,
}

impl BlockTable {
    /// `None` when every block is zero.
    pub fn new<S: RangeSource + ?Sized>(src: &S) -> Option<Self> {
        let t = src.block();
        let nb = src.resolution() / t;
        let mut col_cdf = Vec::with_capacity(nb * nb);
        let mut row_cdf = Vec::with_capacity(nb);
        let mut total = 0.0;
        for by in 0..nb {
            let mut acc = 0.0;
            for bx in 0..nb {
                let r = AngularRange {
                    x1: bx * t,
                    x2: bx * t + t - 1,
                    y1: by * t,
                    y2: by * t + t - 1,
                };
                acc += src.range_average(&r).max(0.0);
                col_cdf.push(acc);
            }
            total += acc;
            row_cdf.push(total);
        }
        (total > 0.0).then_some(Self {
            blocks: nb,
            row_cdf,
            col_cdf,
        })
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    /// Probability of choosing block `(bx, by)`.
    pub fn probability(&self, bx: usize, by: usize) -> f64 {
        let row = &self.col_cdf[by * self.blocks..(by + 1) * self.blocks];
        let w = row[bx] - if bx > 0 { row[bx - 1] } else { 0.0 };
        w / self.row_cdf[self.blocks - 1]
    }

    fn choose(&self, u: &mut [f64; 2]) -> Option<(usize, usize)> {
        let (by, v) = pick(&self.row_cdf, u[1])?;
        u[1] = v;
        let (bx, v) = pick(&self.col_cdf[by * self.blocks..(by + 1) * self.blocks], u[0])?;
        u[0] = v;
        Some((bx, by))
    }
}

/// Chooses the bin of cumulative weights `cdf` holding `u · total` and
/// returns it with `u` rescaled to `[0, 1)` inside the bin.
fn pick(cdf: &[f64], u: f64) -> Option<(usize, f64)> {
    let total = *cdf.last()?;
    if !(total > 0.0) {
        return None;
    }
    let target = u * total;
    let lower = |i: usize| if i > 0 { cdf[i - 1] } else { 0.0 };
    let mut i = cdf.partition_point(|&c| c <= target).min(cdf.len() - 1);
    // rounding can push the target onto the end; fall back to the last
    // bin with weight
    while cdf[i] - lower(i) <= 0.0 {
        i = i.checked_sub(1)?;
    }
    let w = cdf[i] - lower(i);
    Some((i, ((target - lower(i)) / w).clamp(0.0, ONE_MINUS)))
}

const ONE_MINUS: f64 = 1.0 - f64::EPSILON / 2.0;

/// Draws one pixel and jittered position. `table` must come from `src`.
pub fn sample_source<S: RangeSource + ?Sized>(src: &S, table: &BlockTable, u: [f64; 2]) -> Option<SampleRecord> {
    let mut u = [u[0].clamp(0.0, ONE_MINUS), u[1].clamp(0.0, ONE_MINUS)];
    let t = src.block();
    let (bx, by) = table.choose(&mut u)?;
    let (mut x, mut y) = (bx * t, by * t);
    let mut side = t;
    while side > 1 {
        let half = side / 2;
        let quad = |qx: usize, qy: usize| {
            src.range_average(&AngularRange {
                x1: x + qx * half,
                x2: x + qx * half + half - 1,
                y1: y + qy * half,
                y2: y + qy * half + half - 1,
            })
            .max(0.0)
        };
        let q = [quad(0, 0), quad(1, 0), quad(0, 1), quad(1, 1)];
        let rows = [q[0] + q[1], q[0] + q[1] + q[2] + q[3]];
        let (qy, v) = pick(&rows, u[1])?;
        u[1] = v;
        let (qx, v) = pick(&[q[2 * qy], q[2 * qy] + q[2 * qy + 1]], u[0])?;
        u[0] = v;
        x += qx * half;
        y += qy * half;
        side = half;
    }
    let d = 2.0 / src.resolution() as f64;
    Some(SampleRecord {
        h: [-1.0 + (x as f64 + u[0]) * d, -1.0 + (y as f64 + u[1]) * d],
        pdf: 0.0,
        pixel: (x, y),
        block: by * table.blocks() + bx,
    })
}

/// Probability that [`sample_source`] ends in pixel `(x, y)`, as the product
/// of the conditional choices along its descent path.
pub fn descent_probability<S: RangeSource + ?Sized>(src: &S, table: &BlockTable, x: usize, y: usize) -> f64 {
    let t = src.block();
    let mut p = table.probability(x / t, y / t);
    let (mut ox, mut oy) = (x / t * t, y / t * t);
    let mut side = t;
    while side > 1 && p > 0.0 {
        let half = side / 2;
        let avg = |qx: usize, qy: usize| {
            src.range_average(&AngularRange {
                x1: ox + qx * half,
                x2: ox + qx * half + half - 1,
                y1: oy + qy * half,
                y2: oy + qy * half + half - 1,
            })
            .max(0.0)
        };
        let q = [avg(0, 0), avg(1, 0), avg(0, 1), avg(1, 1)];
        let qx = usize::from(x - ox >= half);
        let qy = usize::from(y - oy >= half);
        let row = q[2 * qy] + q[2 * qy + 1];
        let total: f64 = q.iter().sum();
        p *= if total > 0.0 { row / total } else { 0.0 };
        p *= if row > 0.0 { q[2 * qy + qx] / row } else { 0.0 };
        ox += qx * half;
        oy += qy * half;
        side = half;
    }
    p
}

/// Dense image with an f64 summed-area table.
#[derive(Debug, Clone)]
pub struct DenseSource {
    resolution: usize,
    block: usize,
    sat: Vec<f64>,
}

impl DenseSource {
    pub fn new(resolution: usize, block: usize, values: &[f64]) -> Self {
        assert_eq!(values.len(), resolution * resolution);
        assert!(block.is_power_of_two() && resolution % block == 0);
        let n = resolution + 1;
        let mut sat = vec![0.0; n * n];
        for y in 0..resolution {
            let mut row = 0.0;
            for x in 0..resolution {
                row += values[y * resolution + x].max(0.0);
                sat[(y + 1) * n + x + 1] = sat[y * n + x + 1] + row;
            }
        }
        Self {
            resolution,
            block,
            sat,
        }
    }
}

impl RangeSource for DenseSource {
    fn resolution(&self) -> usize {
        self.resolution
    }

    fn block(&self) -> usize {
        self.block
    }

    fn range_average(&self, r: &AngularRange) -> f64 {
        let n = self.resolution + 1;
        let s = |x: usize, y: usize| self.sat[y * n + x];
        let sum = s(r.x2 + 1, r.y2 + 1) - s(r.x1, r.y2 + 1) - s(r.x2 + 1, r.y1) + s(r.x1, r.y1);
        (sum / r.area() as f64).max(0.0)
    }
}

/// Blended compressed NDF of one footprint as a range source.
pub struct BlendedSource<'a> {
    pub store: &'a CompressedNdf,
    pub blend: SpatialBlend,
}

impl RangeSource for BlendedSource<'_> {
    fn resolution(&self) -> usize {
        self.store.resolution()
    }

    fn block(&self) -> usize {
        self.store.block()
    }

    fn range_average(&self, range: &AngularRange) -> f64 {
        self.store.blended_range(&self.blend, range)
    }
}

enum Source<'a> {
    Blended(BlendedSource<'a>),
    Dense(DenseSource),
}

impl Source<'_> {
    fn as_dyn(&self) -> &dyn RangeSource {
        match self {
            Source::Blended(b) => b,
            Source::Dense(d) => d,
        }
    }
}

/// Sampler for one footprint with its block table built once; repeated
/// draws reuse it.
pub struct FootprintSampler<'a> {
    store: &'a CompressedNdf,
    fp: Footprint,
    fallback: Option<&'a NormalMap>,
    source: Source<'a>,
    table: BlockTable,
}

impl<'a> FootprintSampler<'a> {
    /// `Ok(None)` when the footprint's NDF is zero everywhere. Footprints
    /// finer than level 0 with a fallback map sample the exact oracle image.
    pub fn new(store: &'a CompressedNdf, fp: &Footprint, fallback: Option<&'a NormalMap>) -> Result<Option<Self>> {
        let blend = store.blend(fp);
        let source = match (blend.choice, fallback) {
            (LevelChoice::Below, Some(map)) => {
                let img = eval_pndf_image_with(
                    map,
                    fp,
                    store.params().roughness(),
                    store.resolution(),
                    store.border().oracle_border(),
                )?;
                let values: Vec<f64> = img.values().iter().map(|&v| v as f64).collect();
                Source::Dense(DenseSource::new(store.resolution(), store.block(), &values))
            }
            (LevelChoice::Below, None) => {
                let base = Footprint::new(fp.center[0], fp.center[1], store.params().base_sigma);
                Source::Blended(BlendedSource {
                    store,
                    blend: store.blend(&base),
                })
            }
            _ => Source::Blended(BlendedSource { store, blend }),
        };
        let Some(table) = BlockTable::new(source.as_dyn()) else {
            return Ok(None);
        };
        Ok(Some(Self {
            store,
            fp: *fp,
            fallback,
            source,
            table,
        }))
    }

    /// One sample; `None` signals a zero contribution.
    pub fn sample(&self, u: [f64; 2]) -> Option<SampleRecord> {
        let mut rec = sample_source(self.source.as_dyn(), &self.table, u)?;
        rec.pdf = self.pdf(rec.h);
        (rec.pdf > 0.0).then_some(rec)
    }

    /// Same code path as [`CompressedNdf::eval_ndf`].
    pub fn pdf(&self, h: [f64; 2]) -> f64 {
        self.store.eval_ndf(&self.fp, h, self.fallback).unwrap_or(0.0)
    }

    pub fn table(&self) -> &BlockTable {
        &self.table
    }

    pub fn source(&self) -> &dyn RangeSource {
        self.source.as_dyn()
    }
}

/// Draws a projected half vector for `fp` with density equal to the
/// evaluated NDF. `Ok(None)` when the NDF is zero.
pub fn sample_half_vector(
    store: &CompressedNdf,
    fp: &Footprint,
    u: [f64; 2],
    fallback: Option<&NormalMap>,
) -> Result<Option<SampleRecord>> {
    Ok(FootprintSampler::new(store, fp, fallback)?.and_then(|s| s.sample(u)))
}

/// Density of [`sample_half_vector`] at `h`: the evaluated NDF.
pub fn pdf(store: &CompressedNdf, fp: &Footprint, h: [f64; 2], fallback: Option<&NormalMap>) -> Result<f64> {
    store.eval_ndf(fp, h, fallback)
}
