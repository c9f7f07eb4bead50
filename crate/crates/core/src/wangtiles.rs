//! Implicit Wang tiling: 16 edge-colored tiles cut from one exemplar, a
//! stateless hashed lattice that picks a tile for every cell of the plane,
//! and NDF queries whose footprints may straddle any number of cells.
//!
//! Edge colors come from lattice vertices: vertex `(i, j)` sits at the
//! top-left corner of cell `(i, j)` and owns the top (north) edge of that
//! cell, to its right, and the left (west) edge, below it.
//!
//! Archive layout (sectioned container, magic `WTIL`): section 1 is a JSON
//! manifest, sections `100 + k` hold tile `k`'s normals as f64 triples and
//! sections `200 + k` its compressed NDF store.

use std::f64::consts::FRAC_1_SQRT_2;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{ByteReader, ByteWriter, Container, ContainerWriter};
use crate::error::{Error, Result};
use crate::ndf::{Footprint, TRUNCATION};
use crate::pyramid::{build_pyramid_extended, LevelChoice, PyramidParams};
use crate::query::NdfQuery;
use crate::sampler::{FootprintSampler, SampleRecord};
use crate::store::{AngularRange, CompressOptions, CompressedNdf};
use crate::texture::{Normal, NormalMap};

pub const TILE_COUNT: usize = 16;
pub const DEFAULT_TILE_SIZE: usize = 512;
const COLOR_TABLE: usize = 256;
const MAGIC: &str = "WTIL";
const VERSION: u32 = 1;
const MANIFEST: u32 = 1;
const MAP_BASE: u32 = 100;
const STORE_BASE: u32 = 200;

/// Two-valued colors of a tile's four edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EdgeColors {
    pub n: u8,
    pub e: u8,
    pub s: u8,
    pub w: u8,
}

impl EdgeColors {
    /// Dense index of the color combination, `0..16`.
    pub fn code(&self) -> usize {
        ((self.n as usize) << 3) | ((self.e as usize) << 2) | ((self.s as usize) << 1) | self.w as usize
    }

    pub fn from_code(code: usize) -> Self {
        Self {
            n: ((code >> 3) & 1) as u8,
            e: ((code >> 2) & 1) as u8,
            s: ((code >> 1) & 1) as u8,
            w: (code & 1) as u8,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stateless infinite lattice of edge colors. A vertex hash is
/// `splitmix64(splitmix64(seed ^ splitmix64(i)) ^ j · 0x9e3779b97f4a7c15)`;
/// its low byte indexes a color table for the right edge, the next byte
/// for the bottom edge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileField {
    seed: u64,
    table: Vec<u8>,
}

impl TileField {
    /// Balanced table (half of each color), shuffled by the seed.
    pub fn new(seed: u64) -> Self {
        let mut table: Vec<u8> = (0..COLOR_TABLE).map(|k| (k % 2) as u8).collect();
        table.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix64(seed)));
        Self { seed, table }
    }

    /// Field with an explicit color table of 256 entries in `{0, 1}`.
    pub fn from_table(seed: u64, table: Vec<u8>) -> Result<Self> {
        if table.len() != COLOR_TABLE || table.iter().any(|&c| c > 1) {
            return Err(Error::param("color table needs 256 entries in {0, 1}"));
        }
        Ok(Self { seed, table })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vertex_hash(&self, v: [i64; 2]) -> u64 {
        let a = splitmix64(self.seed ^ splitmix64(v[0] as u64));
        splitmix64(a ^ (v[1] as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    /// Colors of the edges to the right of and below vertex `v`.
    pub fn vertex_edge_colors(&self, v: [i64; 2]) -> (u8, u8) {
        let h = self.vertex_hash(v);
        (self.table[(h & 0xff) as usize], self.table[((h >> 8) & 0xff) as usize])
    }

    pub fn cell_colors(&self, cell: [i64; 2]) -> EdgeColors {
        let [i, j] = cell;
        let (n, w) = self.vertex_edge_colors([i, j]);
        let (_, e) = self.vertex_edge_colors([i + 1, j]);
        let (s, _) = self.vertex_edge_colors([i, j + 1]);
        EdgeColors { n, e, s, w }
    }
}

/// How the tile set is cut from the exemplar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileCut {
    pub tile_size: usize,
    /// Width of the band along each edge copied from the shared edge patch;
    /// the next `band` texels fade to the tile interior.
    pub band: usize,
    pub seed: u64,
}

impl TileCut {
    pub fn new(tile_size: usize, seed: u64) -> Self {
        Self { tile_size, band: (tile_size / 16).max(1), seed }
    }
}

fn slopes(n: &Normal) -> [f64; 2] {
    [n.x / n.z, n.y / n.z]
}

fn from_slopes(p: [f64; 2]) -> Normal {
    Normal::new(p[0], p[1], 1.0).normalize()
}

/// Cuts the 16 tiles. Every edge color owns one source patch straddling the
/// edge; a tile copies its half of the patch in a band along the edge, so
/// tiles that meet on an equal color continue the same source texels.
/// Corners, where two bands overlap, are blended and do not match.
pub fn cut_tiles(exemplar: &NormalMap, cut: &TileCut) -> Result<Vec<(EdgeColors, NormalMap)>> {
    let (t, b) = (cut.tile_size, cut.band);
    if t < 4 || b == 0 || 4 * b > t {
        return Err(Error::param(format!("tile size {t} with band {b}")));
    }
    if !exemplar.tileable() {
        log::warn!("cutting tiles from a non-tileable exemplar; patch wraps will show seams");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cut.seed);
    let (ew, eh) = (exemplar.width() as i64, exemplar.height() as i64);
    let mut offset = || [rng.gen_range(0..ew), rng.gen_range(0..eh)];
    // horizontal edges (north/south): t × 2·2b patches
    let hp: Vec<NormalMap> = (0..2)
        .map(|_| {
            let o = offset();
            exemplar.crop_wrapped(o[0], o[1], t, 4 * b)
        })
        .collect();
    let vp: Vec<NormalMap> = (0..2)
        .map(|_| {
            let o = offset();
            exemplar.crop_wrapped(o[0], o[1], 4 * b, t)
        })
        .collect();
    let weight = |d: f64| ((2.0 * b as f64 - d) / b as f64).clamp(0.0, 1.0);
    (0..TILE_COUNT)
        .map(|code| {
            let c = EdgeColors::from_code(code);
            let o = offset();
            let interior = exemplar.crop_wrapped(o[0], o[1], t, t);
            let map = NormalMap::from_fn(t, t, false, |x, y| {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let (tt, bb) = (t as f64, 2 * b);
                let cand = [
                    (weight(fy), (y < bb).then(|| hp[c.n as usize].get(x, y + bb))),
                    (weight(tt - fy), (y >= t - bb).then(|| hp[c.s as usize].get(x, y + bb - t))),
                    (weight(fx), (x < bb).then(|| vp[c.w as usize].get(x + bb, y))),
                    (weight(tt - fx), (x >= t - bb).then(|| vp[c.e as usize].get(x + bb - t, y))),
                ];
                let mut acc = [0.0; 2];
                let mut wsum = 0.0;
                let mut wmax: f64 = 0.0;
                for (w, n) in cand {
                    if let (true, Some(n)) = (w > 0.0, n) {
                        let s = slopes(&n);
                        acc = [acc[0] + w * s[0], acc[1] + w * s[1]];
                        wsum += w;
                        wmax = wmax.max(w);
                    }
                }
                let wi = 1.0 - wmax;
                let s = slopes(&interior.get(x, y));
                let total = wsum + wi;
                from_slopes([(acc[0] + wi * s[0]) / total, (acc[1] + wi * s[1]) / total])
            })?;
            Ok((c, map.with_texel_extent(exemplar.texel_extent())))
        })
        .collect()
}

/// Tiles with their extended-support compressed NDFs.
#[derive(Debug, Clone, PartialEq)]
pub struct WangTile {
    pub colors: EdgeColors,
    pub map: NormalMap,
    pub store: CompressedNdf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WangTileSet {
    cut: TileCut,
    tiles: Vec<WangTile>,
    edge_to_tile: [usize; TILE_COUNT],
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    cut: TileCut,
    texel_extent: f64,
    colors: Vec<EdgeColors>,
    edge_to_tile: Vec<usize>,
}

impl WangTileSet {
    /// Cuts the tiles, then precomputes and compresses each one in turn so
    /// only one uncompressed pyramid is alive at a time.
    pub fn build(exemplar: &NormalMap, cut: &TileCut, params: &PyramidParams, opts: &CompressOptions) -> Result<Self> {
        let tiles = cut_tiles(exemplar, cut)?
            .into_iter()
            .enumerate()
            .map(|(k, (colors, map))| {
                let pyramid = build_pyramid_extended(&map, params)?;
                let store = CompressedNdf::compress(&pyramid, opts)?;
                log::info!("tile {k:2}: {} groups, fit error {:.3e}", store.groups().len(), store.fit_error());
                Ok(WangTile { colors, map, store })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_tiles(cut.clone(), tiles)
    }

    /// Checks that the 16 tiles cover every color combination once.
    pub fn from_tiles(cut: TileCut, tiles: Vec<WangTile>) -> Result<Self> {
        if tiles.len() != TILE_COUNT {
            return Err(Error::param(format!("need {TILE_COUNT} tiles, got {}", tiles.len())));
        }
        let mut edge_to_tile = [usize::MAX; TILE_COUNT];
        for (k, t) in tiles.iter().enumerate() {
            let slot = &mut edge_to_tile[t.colors.code()];
            if *slot != usize::MAX {
                return Err(Error::param(format!("edge colors {:?} appear twice", t.colors)));
            }
            if t.map.width() != cut.tile_size || t.map.height() != cut.tile_size {
                return Err(Error::param(format!("tile {k} is not {0}x{0}", cut.tile_size)));
            }
            *slot = k;
        }
        Ok(Self { cut, tiles, edge_to_tile })
    }

    pub fn tile_size(&self) -> usize {
        self.cut.tile_size
    }

    pub fn cut(&self) -> &TileCut {
        &self.cut
    }

    pub fn tiles(&self) -> &[WangTile] {
        &self.tiles
    }

    pub fn edge_to_tile(&self, c: EdgeColors) -> usize {
        self.edge_to_tile[c.code()]
    }

    pub fn tile_at(&self, field: &TileField, cell: [i64; 2]) -> usize {
        self.edge_to_tile(field.cell_colors(cell))
    }

    /// Bytes held by the tile maps and compressed stores.
    pub fn memory_bytes(&self) -> usize {
        self.tiles.iter().map(|t| t.map.memory_bytes() + t.store.memory_bytes()).sum()
    }

    /// Explicit map of `nx × ny` cells starting at `origin`.
    pub fn assemble(&self, field: &TileField, origin: [i64; 2], nx: usize, ny: usize) -> Result<NormalMap> {
        let t = self.cut.tile_size;
        let ids: Vec<usize> = (0..nx * ny)
            .map(|k| self.tile_at(field, [origin[0] + (k % nx) as i64, origin[1] + (k / nx) as i64]))
            .collect();
        NormalMap::from_fn(nx * t, ny * t, false, |x, y| {
            self.tiles[ids[(y / t) * nx + x / t]].map.get(x % t, y % t)
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            cut: self.cut.clone(),
            texel_extent: self.tiles[0].map.texel_extent(),
            colors: self.tiles.iter().map(|t| t.colors).collect(),
            edge_to_tile: self.edge_to_tile.to_vec(),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
        let mut w = ContainerWriter::new(*b"WTIL", VERSION);
        w.section(MANIFEST, json);
        for (k, t) in self.tiles.iter().enumerate() {
            let mut b = ByteWriter::default();
            for n in t.map.normals() {
                b.f64(n.x);
                b.f64(n.y);
                b.f64(n.z);
            }
            w.section(MAP_BASE + k as u32, b.buf);
            w.section(STORE_BASE + k as u32, t.store.to_bytes());
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = Container::parse(bytes, MAGIC, VERSION)?;
        let m: Manifest =
            serde_json::from_slice(c.section(MANIFEST)?).map_err(|e| Error::Parse(format!("tile manifest: {e}")))?;
        if m.colors.len() != TILE_COUNT {
            return Err(Error::Malformed(format!("{} tiles in manifest", m.colors.len())));
        }
        let t = m.cut.tile_size;
        let tiles = m
            .colors
            .iter()
            .enumerate()
            .map(|(k, &colors)| {
                let mut r = ByteReader::new(c.section(MAP_BASE + k as u32)?);
                let normals = (0..t * t)
                    .map(|_| Ok(Normal::new(r.f64()?, r.f64()?, r.f64()?)))
                    .collect::<Result<Vec<_>>>()?;
                let map = NormalMap::new(t, t, normals, false)?.with_texel_extent(m.texel_extent);
                let store = CompressedNdf::from_bytes(c.section(STORE_BASE + k as u32)?)?;
                Ok(WangTile { colors, map, store })
            })
            .collect::<Result<Vec<_>>>()?;
        let set = Self::from_tiles(m.cut, tiles)?;
        if set.edge_to_tile.to_vec() != m.edge_to_tile {
            return Err(Error::Malformed("edge-to-tile table disagrees with tile colors".into()));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Mass of a truncated Gaussian at `c` inside `[a, b)`.
fn interval_mass(c: f64, sigma: f64, a: f64, b: f64) -> f64 {
    let r = TRUNCATION * sigma;
    let (a, b) = (a.max(c - r), b.min(c + r));
    if b <= a {
        return 0.0;
    }
    let cdf = |x: f64| 0.5 * libm::erfc(-(x - c) / sigma * FRAC_1_SQRT_2);
    cdf(b) - cdf(a)
}

/// One cell touched by a footprint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellHit {
    pub cell: [i64; 2],
    pub tile: usize,
    /// Footprint relative to the cell's tile.
    pub local: Footprint,
    /// Positional mass of the footprint inside the cell.
    pub mass: f64,
}

/// NDF queries over the infinite implicit tiling, in world texel
/// coordinates.
pub struct TiledQuery<'a> {
    pub set: &'a WangTileSet,
    pub field: &'a TileField,
    /// Footprints finer than level 0 are evaluated on the tile maps.
    pub exact_below: bool,
}

impl TiledQuery<'_> {
    /// Cells whose interior the footprint support reaches.
    pub fn cells(&self, fp: &Footprint) -> Vec<CellHit> {
        let t = self.set.tile_size() as f64;
        let r = TRUNCATION * fp.sigma_p;
        let [cx, cy] = fp.center;
        let (i0, i1) = (((cx - r) / t).floor() as i64, ((cx + r) / t).floor() as i64);
        let (j0, j1) = (((cy - r) / t).floor() as i64, ((cy + r) / t).floor() as i64);
        let mut hits = Vec::with_capacity(((i1 - i0 + 1) * (j1 - j0 + 1)).max(0) as usize);
        for j in j0..=j1 {
            let my = interval_mass(cy, fp.sigma_p, j as f64 * t, (j + 1) as f64 * t);
            for i in i0..=i1 {
                let mass = my * interval_mass(cx, fp.sigma_p, i as f64 * t, (i + 1) as f64 * t);
                if mass > 0.0 {
                    hits.push(CellHit {
                        cell: [i, j],
                        tile: self.set.tile_at(self.field, [i, j]),
                        local: Footprint::new(cx - i as f64 * t, cy - j as f64 * t, fp.sigma_p),
                        mass,
                    });
                }
            }
        }
        hits
    }

    fn fallback(&self, tile: usize) -> Option<&NormalMap> {
        self.exact_below.then(|| &self.set.tiles[tile].map)
    }

    /// Integral of one cell's blended NDF; the clipped precomputation leaves
    /// it below one where neighbors miss the tile.
    fn cell_norm(&self, hit: &CellHit) -> f64 {
        let store = &self.set.tiles[hit.tile].store;
        let blend = store.blend(&hit.local);
        if blend.choice == LevelChoice::Below && self.exact_below {
            return 1.0;
        }
        let res = store.resolution();
        let full = store
            .eval_ndf_range(&hit.local, &AngularRange::full(res), None)
            .unwrap_or(0.0);
        full * 4.0
    }

    fn combine(&self, fp: &Footprint, value: impl Fn(&CellHit) -> f64) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for hit in self.cells(fp) {
            let norm = self.cell_norm(&hit);
            if norm > 0.0 {
                num += hit.mass * value(&hit) / norm;
                den += hit.mass;
            }
        }
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    }

    /// Density actually produced by [`NdfQuery::sample`]: cells are chosen
    /// with equal probability rather than by mass.
    pub fn sampling_density(&self, fp: &Footprint, h: [f64; 2]) -> f64 {
        let hits: Vec<(CellHit, f64)> = self
            .cells(fp)
            .into_iter()
            .map(|c| {
                let n = self.cell_norm(&c);
                (c, n)
            })
            .filter(|(_, n)| *n > 0.0)
            .collect();
        if hits.is_empty() {
            return 0.0;
        }
        let sum: f64 = hits
            .iter()
            .map(|(c, n)| {
                let store = &self.set.tiles[c.tile].store;
                store.eval_ndf(&c.local, h, self.fallback(c.tile)).unwrap_or(0.0) / n
            })
            .sum();
        sum / hits.len() as f64
    }

    /// Samples like [`NdfQuery::sample`] and also reports the chosen cell.
    pub fn sample_with_cell(&self, fp: &Footprint, u: [f64; 2]) -> Option<(SampleRecord, [i64; 2])> {
        let hits: Vec<CellHit> = self.cells(fp).into_iter().filter(|c| self.cell_norm(c) > 0.0).collect();
        if hits.is_empty() {
            return None;
        }
        let n = hits.len();
        let k = ((u[0] * n as f64) as usize).min(n - 1);
        let u0 = (u[0] * n as f64 - k as f64).clamp(0.0, 1.0 - f64::EPSILON / 2.0);
        let hit = &hits[k];
        let store = &self.set.tiles[hit.tile].store;
        let sampler = FootprintSampler::new(store, &hit.local, self.fallback(hit.tile)).ok()??;
        let mut rec = sampler.sample([u0, u[1]])?;
        rec.pdf = self.sampling_density(fp, rec.h);
        (rec.pdf > 0.0).then_some((rec, hit.cell))
    }
}

impl NdfQuery for TiledQuery<'_> {
    fn resolution(&self) -> usize {
        self.set.tiles[0].store.resolution()
    }

    /// Mass-weighted mixture of the per-cell NDFs.
    fn eval(&self, fp: &Footprint, h: [f64; 2]) -> f64 {
        self.combine(fp, |c| {
            self.set.tiles[c.tile]
                .store
                .eval_ndf(&c.local, h, self.fallback(c.tile))
                .unwrap_or(0.0)
        })
    }

    fn eval_range(&self, fp: &Footprint, range: &AngularRange) -> f64 {
        self.combine(fp, |c| {
            self.set.tiles[c.tile]
                .store
                .eval_ndf_range(&c.local, range, self.fallback(c.tile))
                .unwrap_or(0.0)
        })
    }

    /// Picks one overlapped cell with equal probability and samples its
    /// tile; the reported pdf is [`TiledQuery::sampling_density`], which
    /// differs from [`NdfQuery::eval`] when cell masses differ.
    fn sample(&self, fp: &Footprint, u: [f64; 2]) -> Option<SampleRecord> {
        self.sample_with_cell(fp, u).map(|(r, _)| r)
    }

    fn clamped(&self, fp: &Footprint) -> bool {
        self.set.tiles[0].store.blend(fp).choice == LevelChoice::Clamped
    }

    fn period(&self) -> Option<[f64; 2]> {
        None
    }

    fn sample_pdf_is_ndf(&self) -> bool {
        false
    }

    fn coarse_footprint(&self) -> Footprint {
        let t = self.set.tile_size() as f64;
        Footprint::new(0.5 * t, 0.5 * t, t)
    }
}
