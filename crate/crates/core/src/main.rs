use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use glintcache::envlight::SgEnvironment;
use glintcache::ndf::{Footprint, NdfImage};
use glintcache::pyramid::{build_pyramid, GridBorder, NdfPyramid, PyramidParams};
use glintcache::query::{eval_image, NdfQuery, StoreQuery};
use glintcache::render::{render, write_outputs, EnvDesc, Estimator, RenderSettings, Scene, SceneDesc};
use glintcache::store::{CompressOptions, CompressedNdf};
use glintcache::texture::{generate_exemplar, load_normal_map, Encoding, ExemplarKind, NormalMap};
use glintcache::wangtiles::{TileCut, TileField, TiledQuery, WangTileSet};
use glintcache::{Error, Result};

#[derive(Parser)]
#[command(name = "glintcache", version, about = "Precomputed, compressed glint NDFs")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Isotropic,
    Brushed,
    Flakes,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum Switch {
    On,
    Off,
}

#[derive(clap::Args)]
struct MapArgs {
    /// Normal map (PNG or .nraw).
    #[arg(long)]
    map: PathBuf,
    /// Read the map as a heightfield with this height scale in texels.
    #[arg(long)]
    height_scale: Option<f64>,
    /// Treat the map as periodic.
    #[arg(long)]
    tileable: bool,
}

impl MapArgs {
    fn load(&self) -> Result<NormalMap> {
        let enc = match self.height_scale {
            Some(scale) => Encoding::Heightfield { scale },
            None => Encoding::UnitVector,
        };
        Ok(load_normal_map(&self.map, enc)?.with_tileable(self.tileable))
    }
}

#[derive(clap::Args)]
struct PyramidArgs {
    /// Level-0 sample spacing in texels.
    #[arg(long, default_value_t = 32)]
    stride: usize,
    /// NDF image side in pixels.
    #[arg(long, default_value_t = 256)]
    ndf_res: usize,
    /// Intrinsic roughness of the per-texel lobes.
    #[arg(long)]
    sigma_r: Option<f64>,
}

impl PyramidArgs {
    fn params(&self) -> PyramidParams {
        let mut p = PyramidParams { ndf_resolution: self.ndf_res, ..PyramidParams::with_stride(self.stride) };
        if let Some(s) = self.sigma_r {
            p.sigma_r = s;
        }
        p
    }
}

#[derive(clap::Args)]
struct CompressArgs {
    #[arg(long, default_value_t = 16)]
    rank: usize,
    /// Angular block side in NDF pixels.
    #[arg(long, default_value_t = 16)]
    block: usize,
    /// Spatial region side in level-0 spacings.
    #[arg(long, default_value_t = 8)]
    region: usize,
}

impl CompressArgs {
    fn options(&self) -> CompressOptions {
        CompressOptions { block: self.block, region_centers: self.region, ..CompressOptions::rank(self.rank) }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural periodic exemplar.
    Generate {
        #[arg(long, value_enum, default_value = "isotropic")]
        kind: Kind,
        #[arg(long, default_value_t = 1024)]
        resolution: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output `.nraw` file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the NDF pyramid of a normal map into a directory.
    Precompute {
        #[command(flatten)]
        map: MapArgs,
        #[command(flatten)]
        pyramid: PyramidArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compress a pyramid directory into a store file.
    Compress {
        #[arg(long)]
        pyramid: PathBuf,
        #[command(flatten)]
        compress: CompressArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample one footprint and write the histogram next to the evaluated NDF.
    SampleTest {
        #[arg(long)]
        store: PathBuf,
        /// Footprint as `u,v,sigma` in texels.
        #[arg(long, value_parser = parse_footprint)]
        footprint: Footprint,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output prefix; writes `<prefix>.hist.ndf`, `<prefix>.eval.ndf`
        /// and PNG previews.
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut and compress a 16-tile edge-colored tile set from a periodic
    /// exemplar.
    TileBuild {
        #[arg(long)]
        exemplar: PathBuf,
        #[arg(long, default_value_t = 512)]
        tile_size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        pyramid: PyramidArgs,
        #[command(flatten)]
        compress: CompressArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a scene.
    Render {
        #[arg(long)]
        scene: PathBuf,
        /// Store (`CNDF`) or tile set (`WTIL`) file.
        #[arg(long)]
        store: PathBuf,
        /// Normal map for footprints finer than the store's first level.
        #[arg(long)]
        map: Option<PathBuf>,
        /// Spherical-Gaussian environment, replacing the scene's.
        #[arg(long)]
        env_sg: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        spp: usize,
        #[arg(long, value_enum, default_value = "mis")]
        estimator: Estimator,
        #[arg(long, value_enum, default_value = "off")]
        prefilter: Switch,
        #[arg(long, default_value_t = 1)]
        bounces: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Seed of the implicit tile layout.
        #[arg(long, default_value_t = 1)]
        tile_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_footprint(s: &str) -> std::result::Result<Footprint, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [u, w, sigma] => {
            let fp = Footprint::new(u, w, sigma);
            fp.validate().map_err(|e| e.to_string())?;
            Ok(fp)
        }
        _ => Err("expected u,v,sigma".into()),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Generate { kind, resolution, seed, out } => {
            let kind = match kind {
                Kind::Isotropic => ExemplarKind::isotropic_noise(),
                Kind::Brushed => ExemplarKind::brushed_metal(),
                Kind::Flakes => ExemplarKind::metallic_flakes(),
            };
            generate_exemplar(kind, resolution, seed)?.save_raw(&out)?;
            info!("wrote {}", out.display());
        }
        Command::Precompute { map, pyramid, out } => {
            let m = map.load()?;
            let p = build_pyramid(&m, &pyramid.params())?;
            info!("{} levels, {} images", p.levels.len(), p.image_count());
            p.save_dir(&out)?;
        }
        Command::Compress { pyramid, compress, out } => {
            let p = NdfPyramid::load_dir(&pyramid)?;
            let s = CompressedNdf::compress(&p, &compress.options())?;
            let st = s.stats();
            info!("{st:?}");
            s.save(&out)?;
        }
        Command::SampleTest { store, footprint, samples, seed, out } => sample_test(&store, &footprint, samples, seed, &out)?,
        Command::TileBuild { exemplar, tile_size, seed, pyramid, compress, out } => {
            let ex = load_normal_map(&exemplar, Encoding::UnitVector)?.with_tileable(true);
            let set = WangTileSet::build(&ex, &TileCut::new(tile_size, seed), &pyramid.params(), &compress.options())?;
            info!("{} tiles, {} bytes", set.tiles().len(), set.memory_bytes());
            set.save(&out)?;
        }
        Command::Render { scene, store, map, env_sg, spp, estimator, prefilter, bounces, seed, tile_seed, out } => {
            let mut desc = SceneDesc::load(&scene)?;
            if let Some(f) = env_sg {
                let eps = desc.environment.as_ref().map_or(glintcache::envlight::DEFAULT_EPSILON, |e| e.eps);
                SgEnvironment::load(&f)?;
                desc.environment = Some(EnvDesc { file: Some(f), lobes: Vec::new(), eps });
            }
            let settings = RenderSettings {
                spp,
                max_bounces: bounces,
                estimator,
                prefilter: prefilter == Switch::On,
                seed,
                jitter: true,
            };
            settings.validate()?;
            let magic = fs::read(&store).map_err(|e| Error::Io { path: store.clone(), source: e })?;
            let output = if magic.starts_with(b"WTIL") {
                let set = WangTileSet::from_bytes(&magic)?;
                let field = TileField::new(tile_seed);
                let q = TiledQuery { set: &set, field: &field, exact_below: true };
                let t = set.tile_size() as f64;
                render_with(desc, &q, [t, t], &settings)?
            } else {
                let s = CompressedNdf::from_bytes(&magic)?;
                let fallback = match map {
                    Some(m) => {
                        let m = load_normal_map(&m, Encoding::UnitVector)?.with_tileable(s.border() == GridBorder::Wrap);
                        if [m.width(), m.height()] != s.map_size() {
                            return Err(Error::InvalidParameter(format!(
                                "map is {}x{}, store was built from {:?}",
                                m.width(),
                                m.height(),
                                s.map_size()
                            )));
                        }
                        Some(m)
                    }
                    None => None,
                };
                let q = StoreQuery { store: &s, fallback: fallback.as_ref() };
                let [w, h] = s.map_size();
                render_with(desc, &q, [w as f64, h as f64], &settings)?
            };
            write_outputs(&output, &out)?;
            info!("{:?}", output.stats);
        }
    }
    Ok(())
}

fn render_with(
    desc: SceneDesc,
    q: &dyn NdfQuery,
    texels_per_uv: [f64; 2],
    settings: &RenderSettings,
) -> Result<glintcache::render::RenderOutput> {
    let scene = Scene::new(desc, q)?;
    render(&scene, q, texels_per_uv, settings)
}

fn sample_test(store: &Path, fp: &Footprint, samples: usize, seed: u64, out: &Path) -> Result<()> {
    let s = CompressedNdf::load(store)?;
    let q = StoreQuery { store: &s, fallback: None };
    let res = q.resolution();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hist = vec![0u64; res * res];
    let mut drawn = 0u64;
    for _ in 0..samples {
        if let Some(r) = q.sample(fp, [rng.gen(), rng.gen()]) {
            hist[r.pixel.1 * res + r.pixel.0] += 1;
            drawn += 1;
        }
    }
    if drawn == 0 {
        return Err(Error::Empty("footprint NDF"));
    }
    let da = 4.0 / (res * res) as f64;
    let hist: Vec<f32> = hist.iter().map(|&c| (c as f64 / (drawn as f64 * da)) as f32).collect();
    let eval: Vec<f32> = eval_image(&q, fp).iter().map(|&v| v as f32).collect();
    let l1: f64 = hist.iter().zip(&eval).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum::<f64>()
        / eval.iter().map(|v| v.abs() as f64).sum::<f64>();
    let with = |ext: &str| {
        let mut p = out.as_os_str().to_owned();
        p.push(ext);
        PathBuf::from(p)
    };
    let h = NdfImage::from_values(res, 1, hist)?;
    let e = NdfImage::from_values(res, 1, eval)?;
    h.save(&with(".hist.ndf"))?;
    e.save(&with(".eval.ndf"))?;
    h.save_png(&with(".hist.png"))?;
    e.save_png(&with(".eval.png"))?;
    println!("samples {drawn} relative_l1 {l1:.5}");
    Ok(())
}
