//! Compressed NDF store: every pyramid image is cut into `t × t` blocks,
//! all-zero blocks are dropped, and the rest are grouped by (spatial region
//! of the footprint center, angular block index) across all levels. Each
//! group is one `t × t × L` tensor fitted by a rank-R CP model.
//!
//! Queries never decompress: a point query is one rank-R dot product, a
//! range query one dot product of SAT segment means per block touched.
//!
//! Container layout (sections of the generic container, magic `CNDF`):
//!
//! | kind | content |
//! |---|---|
//! | 1 `PARAMS` | JSON: pyramid parameters, map size, border, compression options |
//! | 2 `LEVELS` | JSON: per-level sample grid |
//! | 3 `OCCUPANCY` | per level, one bit per (center, block), LSB first, byte aligned per level |
//! | 4 `GROUP_DIR` | u32 count, then per group: i32 rx, i32 ry, u32 block, u32 R, u32 t, u32 L, u32 sweeps, f64 fit error, u64 payload offset, u64 length |
//! | 5 `PAYLOAD` | per group f32: C (R), X (t·R), Y (t·R), Z (L·R), X SAT ((t+1)·R), Y SAT ((t+1)·R) |
//!
//! Slabs of a group are ordered by (level, center, block), so the
//! occupancy bits alone rebuild the slab directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{ByteReader, ByteWriter, Container, ContainerWriter};
use crate::cpd::{cp_als, AlsOptions, BlockTensor, CpFactors, SlabOrigin, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::ndf::{eval_pndf_image_with, eval_pndf_point_with, pixel_of, Footprint};
use crate::pyramid::{GridBorder, LevelChoice, LevelGrid, NdfPyramid, PyramidParams, SpatialBlend};
use crate::texture::NormalMap;

pub const MAGIC: &str = "CNDF";
pub const VERSION: u32 = 1;

const PARAMS: u32 = 1;
const LEVELS: u32 = 2;
const OCCUPANCY: u32 = 3;
const GROUP_DIR: u32 = 4;
const PAYLOAD: u32 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressOptions {
    pub rank: usize,
    /// Angular block side `t` in NDF pixels.
    pub block: usize,
    /// Spatial region side, in level-0 sample spacings.
    pub region_centers: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl CompressOptions {
    pub fn rank(rank: usize) -> Self {
        Self {
            rank,
            ..Self::default()
        }
    }
}

impl Default for CompressOptions {
    fn default() -> Self {
        Self {
            rank: 16,
            block: 16,
            region_centers: 8,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            seed: 0x5eed,
        }
    }
}

/// Inclusive pixel rectangle `[x1, x2] × [y1, y2]` of an NDF image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AngularRange {
    pub x1: usize,
    pub x2: usize,
    pub y1: usize,
    pub y2: usize,
}

impl AngularRange {
    pub fn new(x1: usize, x2: usize, y1: usize, y2: usize, resolution: usize) -> Result<Self> {
        if x1 > x2 || y1 > y2 || x2 >= resolution || y2 >= resolution {
            return Err(Error::OutOfRange(format!(
                "range [{x1},{x2}]x[{y1},{y2}] in a {resolution}^2 image"
            )));
        }
        Ok(Self { x1, x2, y1, y2 })
    }

    pub fn pixel(x: usize, y: usize) -> Self {
        Self { x1: x, x2: x, y1: y, y2: y }
    }

    pub fn full(resolution: usize) -> Self {
        Self { x1: 0, x2: resolution - 1, y1: 0, y2: resolution - 1 }
    }

    /// Square of side `side` pixels around the pixel holding `h`, clipped
    /// to the image; `None` when `h` is outside the unit disk.
    pub fn centered(h: [f64; 2], side: usize, resolution: usize) -> Option<Self> {
        let (px, py) = pixel_of(h, resolution)?;
        let side = side.clamp(1, resolution);
        let lo = |p: usize| p.saturating_sub((side - 1) / 2);
        let hi = |p: usize| (p + side / 2).min(resolution - 1);
        Some(Self { x1: lo(px), x2: hi(px), y1: lo(py), y2: hi(py) })
    }

    pub fn width(&self) -> usize {
        self.x2 - self.x1 + 1
    }

    pub fn height(&self) -> usize {
        self.y2 - self.y1 + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupKey {
    pub region: [i32; 2],
    pub block: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub key: GroupKey,
    pub factors: CpFactors,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct SlabRef {
    group: u32,
    z: u32,
}

const BLANK: SlabRef = SlabRef {
    group: u32::MAX,
    z: 0,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    params: PyramidParams,
    map_size: [usize; 2],
    border: GridBorder,
    options: CompressOptions,
    raw_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedNdf {
    header: Header,
    grids: Vec<LevelGrid>,
    groups: Vec<Group>,
    /// Per level, `slot · blocks² + block`.
    slabs: Vec<Vec<SlabRef>>,
}

/// Summary numbers of a compressed store.
#[derive(Debug, Clone, Serialize)]
pub struct StoreStats {
    pub groups: usize,
    pub slabs: usize,
    pub blank_fraction: f64,
    pub fit_error: f64,
    pub serialized_bytes: usize,
    pub raw_bytes: usize,
    pub ratio: f64,
}

impl CompressedNdf {
    pub fn compress(pyramid: &NdfPyramid, opts: &CompressOptions) -> Result<Self> {
        if pyramid.levels.is_empty() {
            return Err(Error::Empty("pyramid has no levels"));
        }
        let res = pyramid.params.ndf_resolution;
        let t = opts.block;
        if t == 0 || res % t != 0 {
            return Err(Error::param(format!("block {t} does not divide resolution {res}")));
        }
        if opts.rank == 0 || opts.region_centers == 0 {
            return Err(Error::param("rank and region size must be positive"));
        }
        let nb = res / t;
        let region_side = (opts.region_centers * pyramid.params.base_stride) as f64;
        let grids = pyramid.grids();

        let mut pending: BTreeMap<GroupKey, Vec<(SlabOrigin, Vec<f64>)>> = BTreeMap::new();
        let mut refs: Vec<Vec<Option<(GroupKey, u32)>>> = Vec::with_capacity(grids.len());
        for (li, level) in pyramid.levels.iter().enumerate() {
            let mut level_refs = vec![None; level.grid.len() * nb * nb];
            for (slot, img) in level.images.iter().enumerate() {
                let region = region_of(level.grid.center(slot), region_side);
                for b in 0..nb * nb {
                    let (bx, by) = (b % nb, b / nb);
                    let mut slab = Vec::with_capacity(t * t);
                    for y in 0..t {
                        for x in 0..t {
                            slab.push(img.get(bx * t + x, by * t + y) as f64);
                        }
                    }
                    if slab.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let key = GroupKey {
                        region,
                        block: b as u32,
                    };
                    let list = pending.entry(key).or_default();
                    level_refs[slot * nb * nb + b] = Some((key, list.len() as u32));
                    list.push((
                        SlabOrigin {
                            level: li as u32,
                            center: slot as u32,
                            block: b as u32,
                        },
                        slab,
                    ));
                }
            }
            refs.push(level_refs);
        }
        if pending.is_empty() {
            return Err(Error::Empty("every NDF block is blank"));
        }

        let keys: Vec<GroupKey> = pending.keys().copied().collect();
        let groups = pending
            .into_par_iter()
            .map(|(key, slabs)| {
                let tensor = BlockTensor::from_slabs(t, slabs)?;
                let als = AlsOptions {
                    rank: opts.rank,
                    tol: opts.tol,
                    max_iter: opts.max_iter,
                    seed: group_seed(opts.seed, key),
                };
                let mut factors = cp_als(&tensor, als)?;
                factors.quantize_for_storage(&tensor);
                factors.history.clear();
                Ok(Group { key, factors })
            })
            .collect::<Result<Vec<_>>>()?;
        let index: BTreeMap<GroupKey, u32> = keys.iter().enumerate().map(|(i, k)| (*k, i as u32)).collect();
        let slabs = refs
            .into_iter()
            .map(|level| {
                level
                    .into_iter()
                    .map(|r| match r {
                        Some((key, z)) => SlabRef { group: index[&key], z },
                        None => BLANK,
                    })
                    .collect()
            })
            .collect();
        let store = Self {
            header: Header {
                params: pyramid.params.clone(),
                map_size: pyramid.map_size,
                border: pyramid.border,
                options: opts.clone(),
                raw_bytes: pyramid.raw_bytes(),
            },
            grids,
            groups,
            slabs,
        };
        log::info!(
            "compressed {} groups, fit error {:.3e}",
            store.groups.len(),
            store.fit_error()
        );
        Ok(store)
    }

    pub fn params(&self) -> &PyramidParams {
        &self.header.params
    }

    pub fn options(&self) -> &CompressOptions {
        &self.header.options
    }

    pub fn border(&self) -> GridBorder {
        self.header.border
    }

    pub fn map_size(&self) -> [usize; 2] {
        self.header.map_size
    }

    pub fn grids(&self) -> &[LevelGrid] {
        &self.grids
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn resolution(&self) -> usize {
        self.header.params.ndf_resolution
    }

    pub fn block(&self) -> usize {
        self.header.options.block
    }

    pub fn blocks_per_side(&self) -> usize {
        self.resolution() / self.block()
    }

    pub fn level_count(&self) -> usize {
        self.grids.len()
    }

    pub fn raw_bytes(&self) -> usize {
        self.header.raw_bytes
    }

    /// Fraction of (level, center, block) cells that are blank.
    pub fn blank_fraction(&self) -> f64 {
        let total: usize = self.slabs.iter().map(|l| l.len()).sum();
        let blank: usize = self
            .slabs
            .iter()
            .map(|l| l.iter().filter(|s| **s == BLANK).count())
            .sum();
        blank as f64 / total.max(1) as f64
    }

    /// Per-group relative fit errors averaged with slab-count weights.
    pub fn fit_error(&self) -> f64 {
        let (num, den) = self.groups.iter().fold((0.0, 0.0), |(n, d), g| {
            (n + g.factors.fit_error * g.factors.len() as f64, d + g.factors.len() as f64)
        });
        num / den.max(1.0)
    }

    pub fn stats(&self) -> StoreStats {
        let serialized = self.to_bytes().len();
        StoreStats {
            groups: self.groups.len(),
            slabs: self.groups.iter().map(|g| g.factors.len()).sum(),
            blank_fraction: self.blank_fraction(),
            fit_error: self.fit_error(),
            serialized_bytes: serialized,
            raw_bytes: self.raw_bytes(),
            ratio: serialized as f64 / self.raw_bytes().max(1) as f64,
        }
    }

    /// Resident bytes of factors, SATs and the slab directory.
    pub fn memory_bytes(&self) -> usize {
        let factors: usize = self.groups.iter().map(|g| g.factors.storage_bytes() * 2).sum();
        let dir: usize = self.slabs.iter().map(|l| l.len() * std::mem::size_of::<SlabRef>()).sum();
        factors + dir
    }

    fn slab(&self, level: usize, slot: usize, block: usize) -> SlabRef {
        let nb = self.blocks_per_side();
        self.slabs[level][slot * nb * nb + block]
    }

    fn check(&self, level: usize, slot: usize) -> Result<()> {
        if level >= self.grids.len() || slot >= self.grids[level].len() {
            return Err(Error::OutOfRange(format!("sample ({level}, {slot})")));
        }
        Ok(())
    }

    /// Whether the block holding NDF pixel `(x, y)` is blank.
    pub fn is_blank(&self, level: usize, slot: usize, x: usize, y: usize) -> bool {
        let t = self.block();
        self.slab(level, slot, (y / t) * self.blocks_per_side() + x / t) == BLANK
    }

    /// Model value before clamping. Indices are not checked.
    #[inline]
    pub fn point_query_raw(&self, level: usize, slot: usize, x: usize, y: usize) -> f64 {
        let t = self.block();
        let s = self.slab(level, slot, (y / t) * self.blocks_per_side() + x / t);
        if s == BLANK {
            return 0.0;
        }
        self.groups[s.group as usize]
            .factors
            .value(x % t, y % t, s.z as usize)
    }

    /// Reconstructed NDF value of one stored sample, clamped at zero.
    pub fn point_query(&self, level: usize, slot: usize, x: usize, y: usize) -> Result<f64> {
        self.check(level, slot)?;
        let res = self.resolution();
        if x >= res || y >= res {
            return Err(Error::OutOfRange(format!("pixel ({x}, {y})")));
        }
        Ok(self.point_query_raw(level, slot, x, y).max(0.0))
    }

    /// Exact mean of the unclamped model over `range`, one SAT evaluation
    /// per block touched. Indices are not checked.
    pub fn range_query_raw(&self, level: usize, slot: usize, range: &AngularRange) -> f64 {
        let t = self.block();
        let nb = self.blocks_per_side();
        let mut sum = 0.0;
        for by in range.y1 / t..=range.y2 / t {
            let y1 = range.y1.max(by * t);
            let y2 = range.y2.min(by * t + t - 1);
            for bx in range.x1 / t..=range.x2 / t {
                let s = self.slab(level, slot, by * nb + bx);
                if s == BLANK {
                    continue;
                }
                let x1 = range.x1.max(bx * t);
                let x2 = range.x2.min(bx * t + t - 1);
                let f = &self.groups[s.group as usize].factors;
                let area = ((x2 - x1 + 1) * (y2 - y1 + 1)) as f64;
                sum += area * f.range_mean(x1 - bx * t, x2 - bx * t, y1 - by * t, y2 - by * t, s.z as usize);
            }
        }
        sum / range.area() as f64
    }

    /// Average NDF value of one stored sample over `range`, clamped at zero.
    pub fn range_query(&self, level: usize, slot: usize, range: &AngularRange) -> Result<f64> {
        self.check(level, slot)?;
        AngularRange::new(range.x1, range.x2, range.y1, range.y2, self.resolution())?;
        Ok(self.range_query_raw(level, slot, range).max(0.0))
    }

    /// Interpolation weights for a footprint, in texel coordinates of the
    /// stored map.
    pub fn blend(&self, fp: &Footprint) -> SpatialBlend {
        let blend = SpatialBlend::new(&self.grids, self.header.params.base_sigma, self.header.border, fp);
        if blend.choice == LevelChoice::Clamped {
            log::trace!("footprint sigma {} clamped to the top level", fp.sigma_p);
        }
        blend
    }

    /// Blend used when the footprint is finer than level 0 and no fallback
    /// map is available: the footprint is treated as level-0 sized.
    fn base_blend(&self, fp: &Footprint) -> SpatialBlend {
        let fp0 = Footprint::new(fp.center[0], fp.center[1], self.header.params.base_sigma);
        SpatialBlend::new(&self.grids, self.header.params.base_sigma, self.header.border, &fp0)
    }

    /// Σ w · max(0, point) over the blend, at pixel `(x, y)`.
    #[inline]
    pub fn blended_point(&self, blend: &SpatialBlend, x: usize, y: usize) -> f64 {
        blend
            .terms()
            .iter()
            .map(|t| t.weight * self.point_query_raw(t.level, t.slot, x, y).max(0.0))
            .sum()
    }

    /// Σ w · max(0, range mean) over the blend.
    #[inline]
    pub fn blended_range(&self, blend: &SpatialBlend, range: &AngularRange) -> f64 {
        blend
            .terms()
            .iter()
            .map(|t| t.weight * self.range_query_raw(t.level, t.slot, range).max(0.0))
            .sum()
    }

    /// NDF density of footprint `fp` at projected half vector `h`.
    /// Footprints finer than level 0 are evaluated exactly on `fallback`
    /// when given.
    pub fn eval_ndf(&self, fp: &Footprint, h: [f64; 2], fallback: Option<&NormalMap>) -> Result<f64> {
        let res = self.resolution();
        let blend = self.blend(fp);
        if blend.choice == LevelChoice::Below {
            if let Some(map) = fallback {
                return eval_pndf_point_with(
                    map,
                    fp,
                    h,
                    self.header.params.roughness(),
                    res,
                    self.header.border.oracle_border(),
                );
            }
            let Some((x, y)) = pixel_of(h, res) else { return Ok(0.0) };
            return Ok(self.blended_point(&self.base_blend(fp), x, y));
        }
        let Some((x, y)) = pixel_of(h, res) else { return Ok(0.0) };
        Ok(self.blended_point(&blend, x, y))
    }

    /// Average NDF density of footprint `fp` over an angular range.
    pub fn eval_ndf_range(
        &self,
        fp: &Footprint,
        range: &AngularRange,
        fallback: Option<&NormalMap>,
    ) -> Result<f64> {
        let res = self.resolution();
        AngularRange::new(range.x1, range.x2, range.y1, range.y2, res)?;
        let blend = self.blend(fp);
        if blend.choice == LevelChoice::Below {
            if let Some(map) = fallback {
                let img = eval_pndf_image_with(
                    map,
                    fp,
                    self.header.params.roughness(),
                    res,
                    self.header.border.oracle_border(),
                )?;
                let mut s = 0.0;
                for y in range.y1..=range.y2 {
                    for x in range.x1..=range.x2 {
                        s += img.get(x, y) as f64;
                    }
                }
                return Ok(s / range.area() as f64);
            }
            return Ok(self.blended_range(&self.base_blend(fp), range));
        }
        Ok(self.blended_range(&blend, range))
    }

    /// Dense reconstruction of one stored sample, clamped at zero.
    pub fn reconstruct_image(&self, level: usize, slot: usize) -> Result<Vec<f64>> {
        self.check(level, slot)?;
        let res = self.resolution();
        Ok((0..res * res)
            .map(|i| self.point_query_raw(level, slot, i % res, i / res).max(0.0))
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut occupancy = Vec::new();
        for level in &self.slabs {
            let mut bytes = vec![0u8; level.len().div_ceil(8)];
            for (i, s) in level.iter().enumerate() {
                if *s != BLANK {
                    bytes[i / 8] |= 1 << (i % 8);
                }
            }
            occupancy.extend_from_slice(&bytes);
        }
        let mut dir = ByteWriter::default();
        let mut payload = ByteWriter::default();
        dir.u32(self.groups.len() as u32);
        for g in &self.groups {
            let f = &g.factors;
            let offset = payload.buf.len() as u64;
            payload.f32s(&f.c);
            payload.f32s(&f.x);
            payload.f32s(&f.y);
            payload.f32s(&f.z);
            payload.f32s(f.x_sat());
            payload.f32s(f.y_sat());
            dir.i32(g.key.region[0]);
            dir.i32(g.key.region[1]);
            dir.u32(g.key.block);
            dir.u32(f.rank() as u32);
            dir.u32(f.t() as u32);
            dir.u32(f.len() as u32);
            dir.u32(f.iterations as u32);
            dir.f64(f.fit_error);
            dir.u64(offset);
            dir.u64(payload.buf.len() as u64 - offset);
        }
        let mut w = ContainerWriter::new(*b"CNDF", VERSION);
        w.section(PARAMS, json(&self.header))
            .section(LEVELS, json(&self.grids))
            .section(OCCUPANCY, occupancy)
            .section(GROUP_DIR, dir.buf)
            .section(PAYLOAD, payload.buf);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = Container::parse(bytes, MAGIC, VERSION)?;
        let parse = |e: serde_json::Error| Error::Parse(e.to_string());
        let header: Header = serde_json::from_slice(c.section(PARAMS)?).map_err(parse)?;
        let grids: Vec<LevelGrid> = serde_json::from_slice(c.section(LEVELS)?).map_err(parse)?;
        let opts = &header.options;
        let res = header.params.ndf_resolution;
        if opts.block == 0 || res % opts.block != 0 || grids.is_empty() {
            return Err(Error::Malformed("inconsistent block size or empty level table".into()));
        }
        let nb = res / opts.block;
        let region_side = (opts.region_centers * header.params.base_stride) as f64;

        let mut r = ByteReader::new(c.section(GROUP_DIR)?);
        let payload = c.section(PAYLOAD)?;
        let count = r.u32()? as usize;
        let mut groups = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let key = GroupKey {
                region: [r.i32()?, r.i32()?],
                block: r.u32()?,
            };
            let (rank, t, len) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
            let iterations = r.u32()? as usize;
            let fit_error = r.f64()?;
            let (offset, length) = (r.u64()? as usize, r.u64()? as usize);
            if t != opts.block || offset.checked_add(length).map_or(true, |e| e > payload.len()) {
                return Err(Error::Malformed(format!("group {key:?} payload")));
            }
            let mut p = ByteReader::new(&payload[offset..offset + length]);
            let c_ = p.f32s(rank)?;
            let x = p.f32s(t * rank)?;
            let y = p.f32s(t * rank)?;
            let z = p.f32s(len * rank)?;
            let xs = p.f32s((t + 1) * rank)?;
            let ys = p.f32s((t + 1) * rank)?;
            if p.remaining() != 0 {
                return Err(Error::Malformed(format!("group {key:?} payload length")));
            }
            let mut factors = CpFactors::from_parts(rank, t, len, c_, x, y, z)?;
            factors.set_sats(xs, ys)?;
            factors.fit_error = fit_error;
            factors.iterations = iterations;
            groups.push(Group { key, factors });
        }
        let index: BTreeMap<GroupKey, u32> = groups.iter().enumerate().map(|(i, g)| (g.key, i as u32)).collect();

        let occ = c.section(OCCUPANCY)?;
        let mut pos = 0usize;
        let mut fill = vec![0u32; groups.len()];
        let mut slabs = Vec::with_capacity(grids.len());
        for grid in &grids {
            let n = grid.len() * nb * nb;
            let nbytes = n.div_ceil(8);
            let bits = occ
                .get(pos..pos + nbytes)
                .ok_or_else(|| Error::Truncated("occupancy".into()))?;
            pos += nbytes;
            let mut level = vec![BLANK; n];
            for (i, s) in level.iter_mut().enumerate() {
                if bits[i / 8] >> (i % 8) & 1 == 0 {
                    continue;
                }
                let slot = i / (nb * nb);
                let key = GroupKey {
                    region: region_of(grid.center(slot), region_side),
                    block: (i % (nb * nb)) as u32,
                };
                let g = *index
                    .get(&key)
                    .ok_or_else(|| Error::Malformed(format!("occupied block without group {key:?}")))?;
                *s = SlabRef { group: g, z: fill[g as usize] };
                fill[g as usize] += 1;
            }
            slabs.push(level);
        }
        if pos != occ.len() {
            return Err(Error::Malformed("occupancy length".into()));
        }
        for (g, &n) in groups.iter().zip(&fill) {
            if n as usize != g.factors.len() {
                return Err(Error::Malformed(format!(
                    "group {:?} holds {} slabs, occupancy names {n}",
                    g.key,
                    g.factors.len()
                )));
            }
        }
        Ok(Self {
            header,
            grids,
            groups,
            slabs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("plain data serializes")
}

fn region_of(center: [f64; 2], side: f64) -> [i32; 2] {
    [
        (center[0] / side).floor() as i32,
        (center[1] / side).floor() as i32,
    ]
}

fn group_seed(seed: u64, key: GroupKey) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [key.region[0] as u32 as u64, key.region[1] as u32 as u64, key.block as u64] {
        h = (h ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndf::{eval_pndf_image, pixel_center};
    use crate::pyramid::build_pyramid;
    use crate::texture::{generate_exemplar_any, ExemplarKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    fn params() -> PyramidParams {
        PyramidParams {
            ndf_resolution: 64,
            sigma_r: 0.02,
            convergence_mse: 0.0,
            ..PyramidParams::with_stride(8)
        }
    }

    fn opts(rank: usize) -> CompressOptions {
        CompressOptions {
            block: 8,
            region_centers: 4,
            ..CompressOptions::rank(rank)
        }
    }

    fn map() -> &'static NormalMap {
        static MAP: OnceLock<NormalMap> = OnceLock::new();
        MAP.get_or_init(|| generate_exemplar_any(ExemplarKind::isotropic_noise(), 64, 3).unwrap())
    }

    fn pyramid() -> &'static NdfPyramid {
        static P: OnceLock<NdfPyramid> = OnceLock::new();
        P.get_or_init(|| build_pyramid(map(), &params()).unwrap())
    }

    fn store() -> &'static CompressedNdf {
        static S: OnceLock<CompressedNdf> = OnceLock::new();
        S.get_or_init(|| CompressedNdf::compress(pyramid(), &opts(8)).unwrap())
    }

    #[test]
    fn flat_map_is_almost_all_blank() {
        let flat = NormalMap::flat(64, 64, true);
        let p = build_pyramid(&flat, &params()).unwrap();
        let s = CompressedNdf::compress(&p, &opts(2)).unwrap();
        assert!(s.blank_fraction() > 0.9);
        assert!(s.stats().ratio < 0.01, "{:?}", s.stats());
        assert!(s.fit_error() < 1e-6);
    }

    #[test]
    fn blank_blocks_answer_zero() {
        let s = store();
        let res = s.resolution();
        let mut seen = false;
        for y in 0..res {
            for x in 0..res {
                if s.is_blank(0, 0, x, y) {
                    assert_eq!(s.point_query(0, 0, x, y).unwrap(), 0.0);
                    seen = true;
                }
            }
        }
        assert!(seen);
        assert_eq!(s.range_query(0, 0, &AngularRange::new(0, 7, 0, 7, res).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn point_query_matches_dense_reconstruction() {
        let s = store();
        let t = s.block();
        let nb = s.blocks_per_side();
        for (li, grid) in s.grids().iter().enumerate() {
            for slot in 0..grid.len() {
                for b in 0..nb * nb {
                    let r = s.slab(li, slot, b);
                    if r == BLANK {
                        continue;
                    }
                    let dense = s.groups[r.group as usize].factors.reconstruct_block(r.z as usize).unwrap();
                    for (i, v) in dense.iter().enumerate() {
                        let x = (b % nb) * t + i % t;
                        let y = (b / nb) * t + i / t;
                        assert!((s.point_query_raw(li, slot, x, y) - v).abs() <= 1e-12 * v.abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn range_equals_mean_of_point_queries() {
        let s = store();
        let res = s.resolution();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let level = rng.gen_range(0..s.level_count());
            let slot = rng.gen_range(0..s.grids()[level].len());
            let (a, b) = (rng.gen_range(0..res), rng.gen_range(0..res));
            let (c, d) = (rng.gen_range(0..res), rng.gen_range(0..res));
            let range = AngularRange::new(a.min(b), a.max(b), c.min(d), c.max(d), res).unwrap();
            let mut sum = 0.0;
            let mut mag = 0.0;
            for y in range.y1..=range.y2 {
                for x in range.x1..=range.x2 {
                    let v = s.point_query_raw(level, slot, x, y);
                    sum += v;
                    mag += v.abs();
                }
            }
            let mean = sum / range.area() as f64;
            let scale = mag / range.area() as f64;
            let got = s.range_query_raw(level, slot, &range);
            assert!((got - mean).abs() <= 1e-9 * scale.max(1e-300), "{got} vs {mean}");
        }
    }

    #[test]
    fn single_pixel_range_is_point() {
        let s = store();
        for (x, y) in [(30, 31), (32, 32), (10, 40)] {
            let r = s.range_query(0, 5, &AngularRange::pixel(x, y)).unwrap();
            let p = s.point_query(0, 5, x, y).unwrap();
            assert!((r - p).abs() <= 1e-12 * p.max(1.0));
        }
    }

    #[test]
    fn constant_block_range_is_constant() {
        // one uniform slab compressed exactly
        let tensor = BlockTensor::new(8, vec![2.5; 64], vec![SlabOrigin { level: 0, center: 0, block: 0 }]).unwrap();
        let mut f = cp_als(&tensor, AlsOptions::rank(1)).unwrap();
        f.quantize_for_storage(&tensor);
        let m = f.range_mean(0, 7, 0, 7, 0);
        assert!((m - 2.5).abs() < 1e-5);
    }

    #[test]
    fn invalid_indices_are_rejected() {
        let s = store();
        assert!(s.point_query(99, 0, 0, 0).is_err());
        assert!(s.point_query(0, 9999, 0, 0).is_err());
        assert!(s.point_query(0, 0, 64, 0).is_err());
        assert!(AngularRange::new(5, 4, 0, 0, 64).is_err());
        assert!(s.range_query(0, 0, &AngularRange { x1: 0, x2: 64, y1: 0, y2: 0 }).is_err());
    }

    #[test]
    fn eval_at_sample_is_single_point_query() {
        let s = store();
        let grid = s.grids()[1];
        let slot = 5;
        let c = grid.center(slot);
        let fp = Footprint::new(c[0], c[1], grid.sigma);
        let blend = s.blend(&fp);
        assert_eq!(blend.terms().len(), 1);
        let h = pixel_center(33, 30, 64);
        assert_eq!(s.eval_ndf(&fp, h, None).unwrap(), s.point_query(1, slot, 33, 30).unwrap());
    }

    #[test]
    fn below_base_delegates_to_oracle() {
        let s = store();
        let fp = Footprint::new(20.3, 17.9, params().base_sigma * 0.5);
        let h = [0.05, -0.02];
        let oracle = crate::ndf::eval_pndf_point(map(), &fp, h, params().roughness(), 64).unwrap();
        assert_eq!(s.eval_ndf(&fp, h, Some(map())).unwrap(), oracle);
        // without a fallback map the base level answers
        assert!(s.eval_ndf(&fp, h, None).unwrap() >= 0.0);
    }

    #[test]
    fn compressed_eval_tracks_oracle() {
        let s = CompressedNdf::compress(pyramid(), &opts(16)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut errs = Vec::new();
        for _ in 0..20 {
            let fp = Footprint::new(
                rng.gen_range(0.0..64.0),
                rng.gen_range(0.0..64.0),
                params().base_sigma * rng.gen_range(1.0..3.0),
            );
            // compare against the uncompressed blend
            let blend = s.blend(&fp);
            let reference: Vec<f64> = (0..64 * 64).map(|i| pyramid().blended_pixel(&blend, i % 64, i / 64)).collect();
            let max = reference.iter().cloned().fold(0.0, f64::max);
            for (i, r) in reference.iter().enumerate() {
                if *r > 0.1 * max {
                    let got = s.blended_point(&blend, i % 64, i / 64);
                    errs.push((got - r).abs() / r);
                }
            }
        }
        errs.sort_by(f64::total_cmp);
        let p90 = errs[errs.len() * 9 / 10];
        assert!(p90 < 0.1, "90th percentile relative error {p90}");
    }

    #[test]
    fn full_range_matches_point_mean() {
        let s = store();
        let fp = Footprint::new(21.0, 40.0, params().base_sigma * 1.7);
        let blend = s.blend(&fp);
        let full = s.eval_ndf_range(&fp, &AngularRange::full(64), None).unwrap();
        // per-neighbor clamping happens on whole-image means vs per pixel;
        // compare against unclamped neighbor means
        let raw: f64 = blend
            .terms()
            .iter()
            .map(|t| {
                let mut m = 0.0;
                for y in 0..64 {
                    for x in 0..64 {
                        m += s.point_query_raw(t.level, t.slot, x, y);
                    }
                }
                t.weight * m / 4096.0
            })
            .sum();
        assert!((full - raw).abs() <= 1e-9 * raw.abs());
        // images are normalized over the disk: mean ≈ 1 / domain area
        assert!((full * 4.0 - 1.0).abs() < 0.05, "{full}");
    }

    #[test]
    fn range_downsample_equals_box_filter() {
        let s = store();
        let fp = Footprint::new(12.0, 50.0, params().base_sigma * 2.5);
        let blend = s.blend(&fp);
        for by in 0..16 {
            for bx in 0..16 {
                let range = AngularRange::new(bx * 4, bx * 4 + 3, by * 4, by * 4 + 3, 64).unwrap();
                let mut raw = vec![0.0; blend.terms().len()];
                for y in range.y1..=range.y2 {
                    for x in range.x1..=range.x2 {
                        for (k, t) in blend.terms().iter().enumerate() {
                            raw[k] += s.point_query_raw(t.level, t.slot, x, y) / 16.0;
                        }
                    }
                }
                let boxed: f64 = blend.terms().iter().zip(&raw).map(|(t, m)| t.weight * m.max(0.0)).sum();
                let got = s.blended_range(&blend, &range);
                assert!((got - boxed).abs() <= 1e-9 * boxed.max(1e-12));
            }
        }
    }

    #[test]
    fn single_pixel_range_eval_matches_point_eval() {
        let s = store();
        let fp = Footprint::new(33.0, 9.0, params().base_sigma * 1.2);
        for (x, y) in [(31, 33), (29, 30)] {
            let a = s.eval_ndf_range(&fp, &AngularRange::pixel(x, y), None).unwrap();
            let b = s.eval_ndf(&fp, pixel_center(x, y, 64), None).unwrap();
            assert!((a - b).abs() <= 1e-12 * b.max(1.0));
        }
    }

    #[test]
    fn higher_rank_is_closer_to_oracle() {
        let lo = CompressedNdf::compress(pyramid(), &opts(2)).unwrap();
        let hi = CompressedNdf::compress(pyramid(), &opts(12)).unwrap();
        let mut e = [0.0, 0.0];
        for k in 0..5 {
            let fp = Footprint::new(7.0 + 11.0 * k as f64, 50.0 - 9.0 * k as f64, params().base_sigma * 1.5);
            let oracle = eval_pndf_image(map(), &fp, params().roughness(), 64).unwrap();
            for (i, s) in [&lo, &hi].iter().enumerate() {
                for y in 0..64 {
                    for x in 0..64 {
                        let h = pixel_center(x, y, 64);
                        e[i] += (s.eval_ndf(&fp, h, None).unwrap() - oracle.get(x, y) as f64).powi(2);
                    }
                }
            }
        }
        assert!(e[1] < e[0], "{e:?}");
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let bytes = s.to_bytes();
        let t = CompressedNdf::from_bytes(&bytes).unwrap();
        assert_eq!(&t, s);
        let fp = Footprint::new(13.3, 44.1, params().base_sigma * 1.9);
        for (x, y) in [(30, 30), (33, 29), (0, 0)] {
            let h = pixel_center(x, y, 64);
            assert_eq!(
                s.eval_ndf(&fp, h, None).unwrap().to_bits(),
                t.eval_ndf(&fp, h, None).unwrap().to_bits()
            );
        }
        assert_eq!(t.to_bytes(), bytes);
        let c = Container::parse(&bytes, MAGIC, VERSION).unwrap();
        assert_eq!(c.declared_size(), bytes.len() as u64);
    }

    #[test]
    fn corrupt_payload_is_detected() {
        let mut bytes = store().to_bytes();
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        assert!(matches!(CompressedNdf::from_bytes(&bytes), Err(Error::Checksum { section: PAYLOAD })));
        let mut magic = store().to_bytes();
        magic[0] = b'X';
        assert!(matches!(CompressedNdf::from_bytes(&magic), Err(Error::BadMagic { .. })));
        let short = &store().to_bytes()[..100];
        assert!(CompressedNdf::from_bytes(short).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.cndf");
        store().save(&path).unwrap();
        assert_eq!(&CompressedNdf::load(&path).unwrap(), store());
        assert!(matches!(CompressedNdf::load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn centered_range_is_clipped() {
        let r = AngularRange::centered([0.0, 0.0], 5, 64).unwrap();
        assert_eq!((r.width(), r.height()), (5, 5));
        assert_eq!(r.x1, 30);
        let edge = AngularRange::centered([-0.999, 0.0], 9, 64).unwrap();
        assert_eq!(edge.x1, 0);
        assert_eq!(edge.width(), 5);
        assert!(AngularRange::centered([1.0, 1.0], 3, 64).is_none());
        let big = AngularRange::centered([0.1, 0.1], 1000, 64).unwrap();
        assert_eq!((big.x1, big.x2, big.y2), (4, 63, 63));
    }
}
