//! Footprint NDF back ends behind one interface, so the renderer can swap
//! the compressed store, the uncompressed pyramid, the brute-force
//! evaluator or a tiled field.

use crate::ndf::{eval_pndf_image_with, eval_pndf_point_with, pixel_center, pixel_of, Border, Footprint, IntrinsicRoughness};
use crate::pyramid::{LevelChoice, NdfPyramid, SpatialBlend};
use crate::sampler::{sample_source, BlockTable, DenseSource, FootprintSampler, SampleRecord};
use crate::store::{AngularRange, CompressedNdf};
use crate::texture::NormalMap;

pub trait NdfQuery: Sync {
    fn resolution(&self) -> usize;
    /// Density at projected half vector `h`.
    fn eval(&self, fp: &Footprint, h: [f64; 2]) -> f64;
    /// Mean density over an angular range.
    fn eval_range(&self, fp: &Footprint, range: &AngularRange) -> f64;
    /// Half vector drawn with density [`NdfQuery::eval`]; `None` for a zero
    /// NDF.
    fn sample(&self, fp: &Footprint, u: [f64; 2]) -> Option<SampleRecord>;
    /// Whether `fp` is larger than anything precomputed.
    fn clamped(&self, fp: &Footprint) -> bool;
    /// Texel extent of the underlying map, for wrapping footprint centers;
    /// `None` for unbounded fields.
    fn period(&self) -> Option<[f64; 2]>;
    /// Whether [`NdfQuery::sample`] draws with density exactly
    /// [`NdfQuery::eval`]; otherwise the record's pdf is the true density.
    fn sample_pdf_is_ndf(&self) -> bool {
        true
    }
    /// Footprint covering the whole surface statistics, for roughness
    /// estimates.
    fn coarse_footprint(&self) -> Footprint {
        Footprint::new(0.5, 0.5, 1e7)
    }
}

/// Compressed store, with an optional map for footprints below level 0.
pub struct StoreQuery<'a> {
    pub store: &'a CompressedNdf,
    pub fallback: Option<&'a NormalMap>,
}

impl NdfQuery for StoreQuery<'_> {
    fn resolution(&self) -> usize {
        self.store.resolution()
    }

    fn eval(&self, fp: &Footprint, h: [f64; 2]) -> f64 {
        self.store.eval_ndf(fp, h, self.fallback).unwrap_or(0.0)
    }

    fn eval_range(&self, fp: &Footprint, range: &AngularRange) -> f64 {
        self.store.eval_ndf_range(fp, range, self.fallback).unwrap_or(0.0)
    }

    fn sample(&self, fp: &Footprint, u: [f64; 2]) -> Option<SampleRecord> {
        FootprintSampler::new(self.store, fp, self.fallback)
            .ok()
            .flatten()
            .and_then(|s| s.sample(u))
    }

    fn clamped(&self, fp: &Footprint) -> bool {
        self.store.blend(fp).choice == LevelChoice::Clamped
    }

    fn period(&self) -> Option<[f64; 2]> {
        let [w, h] = self.store.map_size();
        Some([w as f64, h as f64])
    }
}

/// Uncompressed pyramid with the same interpolation as the store.
pub struct PyramidQuery<'a> {
    pub pyramid: &'a NdfPyramid,
    pub fallback: Option<&'a NormalMap>,
}

impl PyramidQuery<'_> {
    fn blend(&self, fp: &Footprint) -> SpatialBlend {
        let p = self.pyramid;
        let b = SpatialBlend::new(&p.grids(), p.params.base_sigma, p.border, fp);
        if b.choice == LevelChoice::Below {
            let base = Footprint::new(fp.center[0], fp.center[1], p.params.base_sigma);
            return SpatialBlend::new(&p.grids(), p.params.base_sigma, p.border, &base);
        }
        b
    }

    fn below(&self, fp: &Footprint) -> Option<&NormalMap> {
        let p = self.pyramid;
        let choice = SpatialBlend::new(&p.grids(), p.params.base_sigma, p.border, fp).choice;
        (choice == LevelChoice::Below).then_some(self.fallback).flatten()
    }

    fn image(&self, fp: &Footprint) -> Vec<f64> {
        let p = self.pyramid;
        let res = p.params.ndf_resolution;
        if let Some(map) = self.below(fp) {
            return eval_pndf_image_with(map, fp, p.params.roughness(), res, p.border.oracle_border())
                .map(|img| img.values().iter().map(|&v| v as f64).collect())
                .unwrap_or_else(|_| vec![0.0; res * res]);
        }
        let blend = self.blend(fp);
        (0..res * res)
            .map(|i| p.blended_pixel(&blend, i % res, i / res))
            .collect()
    }
}

impl NdfQuery for PyramidQuery<'_> {
    fn resolution(&self) -> usize {
        self.pyramid.params.ndf_resolution
    }

    fn eval(&self, fp: &Footprint, h: [f64; 2]) -> f64 {
        let p = self.pyramid;
        let res = p.params.ndf_resolution;
        if let Some(map) = self.below(fp) {
            return eval_pndf_point_with(map, fp, h, p.params.roughness(), res, p.border.oracle_border())
                .unwrap_or(0.0);
        }
        let Some((x, y)) = pixel_of(h, res) else { return 0.0 };
        p.blended_pixel(&self.blend(fp), x, y)
    }

    fn eval_range(&self, fp: &Footprint, range: &AngularRange) -> f64 {
        let res = self.resolution();
        if self.below(fp).is_some() {
            let img = self.image(fp);
            let mut s = 0.0;
            for y in range.y1..=range.y2 {
                for x in range.x1..=range.x2 {
                    s += img[y * res + x];
                }
            }
            return s / range.area() as f64;
        }
        let blend = self.blend(fp);
        let mut s = 0.0;
        for y in range.y1..=range.y2 {
            for x in range.x1..=range.x2 {
                s += self.pyramid.blended_pixel(&blend, x, y);
            }
        }
        s / range.area() as f64
    }

    fn sample(&self, fp: &Footprint, u: [f64; 2]) -> Option<SampleRecord> {
        let res = self.resolution();
        let img = self.image(fp);
        let src = DenseSource::new(res, 16.min(res), &img);
        let table = BlockTable::new(&src)?;
        let mut rec = sample_source(&src, &table, u)?;
        rec.pdf = self.eval(fp, rec.h);
        (rec.pdf > 0.0).then_some(rec)
    }

    fn clamped(&self, fp: &Footprint) -> bool {
        let p = self.pyramid;
        SpatialBlend::new(&p.grids(), p.params.base_sigma, p.border, fp).choice == LevelChoice::Clamped
    }

    fn period(&self) -> Option<[f64; 2]> {
        let [w, h] = self.pyramid.map_size;
        Some([w as f64, h as f64])
    }
}

/// Brute-force evaluation on the normal map for every query.
pub struct OracleQuery<'a> {
    pub map: &'a NormalMap,
    pub rough: IntrinsicRoughness,
    pub resolution: usize,
    pub border: Border,
}

impl NdfQuery for OracleQuery<'_> {
    fn resolution(&self) -> usize {
        self.resolution
    }

    fn eval(&self, fp: &Footprint, h: [f64; 2]) -> f64 {
        eval_pndf_point_with(self.map, fp, h, self.rough, self.resolution, self.border).unwrap_or(0.0)
    }

    fn eval_range(&self, fp: &Footprint, range: &AngularRange) -> f64 {
        let Ok(img) = eval_pndf_image_with(self.map, fp, self.rough, self.resolution, self.border) else {
            return 0.0;
        };
        let mut s = 0.0;
        for y in range.y1..=range.y2 {
            for x in range.x1..=range.x2 {
                s += img.get(x, y) as f64;
            }
        }
        s / range.area() as f64
    }

    fn sample(&self, fp: &Footprint, u: [f64; 2]) -> Option<SampleRecord> {
        let img = eval_pndf_image_with(self.map, fp, self.rough, self.resolution, self.border).ok()?;
        let values: Vec<f64> = img.values().iter().map(|&v| v as f64).collect();
        let src = DenseSource::new(self.resolution, 16.min(self.resolution), &values);
        let table = BlockTable::new(&src)?;
        let mut rec = sample_source(&src, &table, u)?;
        rec.pdf = self.eval(fp, rec.h);
        (rec.pdf > 0.0).then_some(rec)
    }

    fn clamped(&self, _fp: &Footprint) -> bool {
        false
    }

    fn period(&self) -> Option<[f64; 2]> {
        Some([self.map.width() as f64, self.map.height() as f64])
    }
}

/// Dense image of a query at pixel centers.
pub fn eval_image(q: &dyn NdfQuery, fp: &Footprint) -> Vec<f64> {
    let res = q.resolution();
    (0..res * res)
        .map(|i| q.eval(fp, pixel_center(i % res, i / res, res)))
        .collect()
}
