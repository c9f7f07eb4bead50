//! Spherical-Gaussian environment lighting and angularly prefiltered
//! shading: the compact support of a sampled lobe sets the side of an NDF
//! range query.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::microfacet::{add, half_vector, mul, project, scale, Frame, GlintMaterial, Rgb, Vec3};
use crate::ndf::Footprint;
use crate::pfm::RgbImage;
use crate::query::NdfQuery;
use crate::store::AngularRange;

/// Default threshold of the compact support.
pub const DEFAULT_EPSILON: f64 = 0.3;

/// `A · exp(λ (axis·d − 1))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalGaussian {
    axis: Vec3,
    lambda: f64,
    amplitude: Rgb,
}

impl SphericalGaussian {
    /// The axis is normalized; `lambda` and every amplitude channel must be
    /// positive and finite.
    pub fn new(axis: Vec3, lambda: f64, amplitude: Rgb) -> Result<Self> {
        let n = axis.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::param("SG axis must be a nonzero finite vector"));
        }
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::param(format!("SG bandwidth must be positive, got {lambda}")));
        }
        if amplitude.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::param(format!("SG amplitude must be positive, got {amplitude:?}")));
        }
        Ok(Self { axis: axis / n, lambda, amplitude })
    }

    pub fn axis(&self) -> Vec3 {
        self.axis
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn amplitude(&self) -> Rgb {
        self.amplitude
    }

    /// Largest amplitude channel, used for the support angle.
    pub fn peak(&self) -> f64 {
        self.amplitude.iter().copied().fold(0.0, f64::max)
    }

    pub fn eval(&self, d: &Vec3) -> Rgb {
        scale(self.amplitude, (self.lambda * (self.axis.dot(d) - 1.0)).exp())
    }

    /// `∫ exp(λ (axis·d − 1)) dω = 2π (1 − e^{−2λ}) / λ`.
    fn shape_integral(&self) -> f64 {
        -2.0 * PI * (-2.0 * self.lambda).exp_m1() / self.lambda
    }

    /// Integral over the sphere per channel.
    pub fn energy(&self) -> Rgb {
        scale(self.amplitude, self.shape_integral())
    }

    /// Direction with density proportional to the lobe shape.
    pub fn sample(&self, u: [f64; 2]) -> Vec3 {
        let l = self.lambda;
        let cos = (1.0 + (u[0] * (-2.0 * l).exp_m1()).ln_1p() / l).clamp(-1.0, 1.0);
        let sin = (1.0 - cos * cos).max(0.0).sqrt();
        let phi = 2.0 * PI * u[1];
        let frame = Frame::new(self.axis, Vec3::x());
        frame.to_world(&Vec3::new(sin * phi.cos(), sin * phi.sin(), cos))
    }

    /// Solid-angle density of [`SphericalGaussian::sample`].
    pub fn pdf(&self, d: &Vec3) -> f64 {
        (self.lambda * (self.axis.dot(d) - 1.0)).exp() / self.shape_integral()
    }

    pub fn support_angle(&self, eps: f64) -> Result<f64> {
        sg_support_angle(self.peak(), self.lambda, eps)
    }
}

/// Angle from the axis at which a lobe of peak `amplitude` and bandwidth
/// `lambda` falls to `eps`: `arccos((ln ε − ln A)/λ + 1)`. Lobes that never
/// fall below `eps` get `π`, lobes entirely below it get `0`.
pub fn sg_support_angle(amplitude: f64, lambda: f64, eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::param(format!("support threshold must be positive, got {eps}")));
    }
    if !(amplitude > 0.0 && amplitude.is_finite()) {
        return Err(Error::param(format!("amplitude must be positive, got {amplitude}")));
    }
    if !(lambda > 0.0) {
        return Err(Error::param(format!("bandwidth must be positive, got {lambda}")));
    }
    let arg = (eps.ln() - amplitude.ln()) / lambda + 1.0;
    Ok(if arg < -1.0 {
        PI
    } else if arg > 1.0 {
        0.0
    } else {
        arg.acos()
    })
}

/// Side in NDF pixels of the range matching support angle `theta`:
/// `resolution · θ / π`, clamped to `[1, resolution]`.
pub fn sg_query_side(theta: f64, resolution: usize) -> f64 {
    (resolution as f64 * theta / PI).clamp(1.0, resolution as f64)
}

/// [`sg_query_side`] rounded to whole pixels.
pub fn sg_query_pixels(theta: f64, resolution: usize) -> usize {
    (sg_query_side(theta, resolution).round() as usize).clamp(1, resolution)
}

/// Square NDF range for a direction drawn from `lobe`, centered at the
/// projected half vector `h`; `None` when `h` is off the disk.
pub fn prefilter_range(lobe: &SphericalGaussian, h: [f64; 2], resolution: usize, eps: f64) -> Option<AngularRange> {
    let theta = lobe.support_angle(eps).unwrap_or(PI);
    AngularRange::centered(h, sg_query_pixels(theta, resolution), resolution)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvSample {
    pub lobe: usize,
    pub dir: Vec3,
    /// Probability of picking `lobe`.
    pub select_pdf: f64,
    /// Density of `dir` under the picked lobe alone.
    pub lobe_pdf: f64,
    /// Density of `dir` under the whole mixture.
    pub pdf: f64,
}

/// Sum of lobes, sampled by lobe energy.
#[derive(Debug, Clone, PartialEq)]
pub struct SgEnvironment {
    lobes: Vec<SphericalGaussian>,
    cdf: Vec<f64>,
}

fn weight(e: Rgb) -> f64 {
    (e[0] + e[1] + e[2]) / 3.0
}

impl SgEnvironment {
    pub fn new(lobes: Vec<SphericalGaussian>) -> Result<Self> {
        if lobes.is_empty() {
            return Err(Error::Empty("environment has no lobes"));
        }
        let mut cdf = Vec::with_capacity(lobes.len());
        let mut acc = 0.0;
        for l in &lobes {
            acc += weight(l.energy());
            cdf.push(acc);
        }
        cdf.iter_mut().for_each(|c| *c /= acc);
        *cdf.last_mut().expect("nonempty") = 1.0;
        Ok(Self { lobes, cdf })
    }

    pub fn lobes(&self) -> &[SphericalGaussian] {
        &self.lobes
    }

    pub fn select_probability(&self, k: usize) -> f64 {
        self.cdf[k] - if k == 0 { 0.0 } else { self.cdf[k - 1] }
    }

    pub fn radiance(&self, d: &Vec3) -> Rgb {
        self.lobes.iter().fold([0.0; 3], |acc, l| add(acc, l.eval(d)))
    }

    /// Mixture density of [`SgEnvironment::sample`].
    pub fn pdf(&self, d: &Vec3) -> f64 {
        self.lobes
            .iter()
            .enumerate()
            .map(|(k, l)| self.select_probability(k) * l.pdf(d))
            .sum()
    }

    /// Picks a lobe with `u[0]` by energy, then a direction from it.
    pub fn sample(&self, u: [f64; 3]) -> EnvSample {
        let lobe = self.cdf.partition_point(|&c| c <= u[0]).min(self.lobes.len() - 1);
        let l = &self.lobes[lobe];
        let dir = l.sample([u[1], u[2]]);
        EnvSample {
            lobe,
            dir,
            select_pdf: self.select_probability(lobe),
            lobe_pdf: l.pdf(&dir),
            pdf: self.pdf(&dir),
        }
    }

    /// One lobe per line: `ax ay az lambda r g b`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lobes = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
            if v.len() != 7 {
                return Err(Error::Parse(format!("line {}: expected 7 numbers, got {}", n + 1, v.len())));
            }
            lobes.push(SphericalGaussian::new(Vec3::new(v[0], v[1], v[2]), v[3], [v[4], v[5], v[6]])?);
        }
        Self::new(lobes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# ax ay az lambda r g b\n");
        for l in &self.lobes {
            let (a, c) = (l.axis, l.amplitude);
            s += &format!("{} {} {} {} {} {} {}\n", a.x, a.y, a.z, l.lambda, c[0], c[1], c[2]);
        }
        s
    }

    /// Fits `k` lobes to an equirectangular image (`+z` up, `u` along
    /// azimuth) by luminance-weighted k-means on pixel directions. Each
    /// cluster's bandwidth comes from its mean resultant length and its
    /// amplitude matches the cluster energy.
    pub fn fit_equirect(img: &RgbImage, k: usize, seed: u64) -> Result<Self> {
        if k == 0 || img.width == 0 || img.height == 0 {
            return Err(Error::param("fit needs k > 0 and a nonempty image"));
        }
        let (w, h) = (img.width, img.height);
        let mut dirs = Vec::with_capacity(w * h);
        for y in 0..h {
            let theta = (y as f64 + 0.5) / h as f64 * PI;
            let dw = (2.0 * PI / w as f64) * (PI / h as f64) * theta.sin();
            for x in 0..w {
                let phi = (x as f64 + 0.5) / w as f64 * 2.0 * PI;
                let d = Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
                let c = img.get(x, y).map(|v| v.max(0.0) as f64 * dw);
                let lum = 0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2];
                if lum > 0.0 {
                    dirs.push((d, c, lum));
                }
            }
        }
        if dirs.is_empty() {
            return Err(Error::Empty("environment image is black"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total: f64 = dirs.iter().map(|p| p.2).sum();
        let mut centers: Vec<Vec3> = (0..k)
            .map(|_| {
                let mut t = rng.gen::<f64>() * total;
                dirs.iter()
                    .find(|p| {
                        t -= p.2;
                        t <= 0.0
                    })
                    .unwrap_or(&dirs[dirs.len() - 1])
                    .0
            })
            .collect();
        let mut assign = vec![0usize; dirs.len()];
        for _ in 0..50 {
            for (a, p) in assign.iter_mut().zip(&dirs) {
                *a = (0..k)
                    .max_by(|&i, &j| p.0.dot(&centers[i]).total_cmp(&p.0.dot(&centers[j])))
                    .unwrap_or(0);
            }
            let mut sums = vec![Vec3::zeros(); k];
            for (a, p) in assign.iter().zip(&dirs) {
                sums[*a] += p.0 * p.2;
            }
            let moved = centers
                .iter_mut()
                .zip(&sums)
                .filter(|(_, s)| s.norm() > 0.0)
                .map(|(c, s)| {
                    let n = s.normalize();
                    let d = (n - *c).norm();
                    *c = n;
                    d
                })
                .fold(0.0, f64::max);
            if moved < 1e-9 {
                break;
            }
        }
        let mut lobes = Vec::new();
        for c in 0..k {
            let mut m = Vec3::zeros();
            let mut wsum = 0.0;
            let mut energy = [0.0; 3];
            for (a, p) in assign.iter().zip(&dirs) {
                if *a == c {
                    m += p.0 * p.2;
                    wsum += p.2;
                    energy = add(energy, p.1);
                }
            }
            if wsum <= 0.0 || m.norm() <= 0.0 {
                continue;
            }
            let r = (m.norm() / wsum).min(0.999_999);
            let lambda = (r * (3.0 - r * r) / (1.0 - r * r)).max(1e-3);
            let shape = -2.0 * PI * (-2.0 * lambda).exp_m1() / lambda;
            let amp = energy.map(|e| (e / shape).max(1e-12));
            lobes.push(SphericalGaussian::new(m, lambda, amp)?);
        }
        Self::new(lobes)
    }
}

/// How the NDF is read for a sampled light direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvEstimator {
    /// Point query at the half vector.
    Point,
    /// Mean over a square sized by the sampled lobe's support.
    Prefiltered,
}

/// Shading inputs shared by both estimators.
pub struct EnvShading<'a> {
    pub ndf: &'a dyn NdfQuery,
    pub env: &'a SgEnvironment,
    pub material: &'a GlintMaterial,
    pub eps: f64,
}

impl EnvShading<'_> {
    /// One-sample estimate of reflected radiance toward world direction `wo`.
    pub fn shade(&self, fp: &Footprint, frame: &Frame, wo: &Vec3, est: EnvEstimator, u: [f64; 3]) -> Rgb {
        let s = self.env.sample(u);
        if s.pdf <= 0.0 {
            return [0.0; 3];
        }
        let i = frame.to_local(&s.dir);
        let o = frame.to_local(wo);
        if i.z <= 0.0 || o.z <= 0.0 {
            return [0.0; 3];
        }
        let Some(h) = half_vector(&i, &o) else { return [0.0; 3] };
        let hp = project(&h);
        let d = match est {
            EnvEstimator::Point => self.ndf.eval(fp, hp),
            EnvEstimator::Prefiltered => prefilter_range(&self.env.lobes()[s.lobe], hp, self.ndf.resolution(), self.eps)
                .map_or(0.0, |r| self.ndf.eval_range(fp, &r)),
        };
        let f = self.material.eval_with_d(&i, &o, d);
        scale(mul(f, self.env.radiance(&s.dir)), i.z / s.pdf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndf::Footprint;
    use crate::sampler::SampleRecord;

    fn sg(axis: [f64; 3], lambda: f64, a: f64) -> SphericalGaussian {
        SphericalGaussian::new(Vec3::new(axis[0], axis[1], axis[2]), lambda, [a; 3]).unwrap()
    }

    #[test]
    fn support_angle_values_and_clamps() {
        let t = sg_support_angle(1.0, 25.0, 0.3).unwrap();
        let expect = (1.0 + 0.3f64.ln() / 25.0).acos();
        assert!((t - expect).abs() < 1e-15);
        assert!((t - 0.3113).abs() < 1e-3);
        assert_eq!(sg_support_angle(1.0, 0.3, 0.3).unwrap(), PI);
        assert!(sg_support_angle(1.0, 1e9, 0.3).unwrap() < 1e-4);
        assert_eq!(sg_support_angle(0.1, 25.0, 0.3).unwrap(), 0.0);
        assert!(sg_support_angle(1.0, 25.0, 0.0).is_err());
        assert!(sg_support_angle(-1.0, 25.0, 0.3).is_err());
    }

    #[test]
    fn support_angle_monotone() {
        let lambdas: Vec<f64> = (0..20).map(|k| 2.0 * 1.4f64.powi(k)).collect();
        let th: Vec<f64> = lambdas.iter().map(|&l| sg_support_angle(1.0, l, 0.3).unwrap()).collect();
        assert!(th.windows(2).all(|w| w[1] < w[0]), "{th:?}");
        let by_a: Vec<f64> = [1.0, 1.5, 2.0, 4.0]
            .iter()
            .map(|&a| sg_support_angle(a, 25.0, 0.3).unwrap())
            .collect();
        assert!(by_a.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn query_side() {
        let t = sg_support_angle(1.0, 25.0, 0.3).unwrap();
        assert!((sg_query_side(t, 256) - 25.4).abs() < 0.1);
        assert_eq!(sg_query_pixels(t, 256), 25);
        assert_eq!(sg_query_side(PI, 256), 256.0);
        assert_eq!(sg_query_side(0.0, 256), 1.0);
        let q: Vec<f64> = (0..=10).map(|k| sg_query_side(k as f64 * 0.3, 256)).collect();
        assert!(q.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn lobe_pdf_integrates_to_one() {
        for lambda in [0.5, 4.0, 60.0] {
            let l = sg([0.3, -0.2, 1.0], lambda, 1.0);
            // quadrature in the lobe's own frame
            let n = 4000;
            let s: f64 = (0..n)
                .map(|k| {
                    let t = (k as f64 + 0.5) / n as f64 * PI;
                    let frame = Frame::new(l.axis(), Vec3::x());
                    let d = frame.to_world(&Vec3::new(t.sin(), 0.0, t.cos()));
                    l.pdf(&d) * 2.0 * PI * t.sin() * PI / n as f64
                })
                .sum();
            assert!((s - 1.0).abs() < 1e-4, "{lambda}: {s}");
        }
    }

    #[test]
    fn lobe_mass_inside_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (a, lambda) in [(1.0, 25.0), (2.0, 25.0), (1.0, 200.0)] {
            let l = sg([0.0, 1.0, 1.0], lambda, a);
            let cos_t = l.support_angle(0.3).unwrap().cos();
            // closed-form cap mass of the normalized lobe
            let mass = -(lambda * (cos_t - 1.0)).exp_m1() / -(-2.0 * lambda).exp_m1();
            assert!(mass >= 0.7 - 1e-12);
            let n = 200_000;
            let hit = (0..n).filter(|_| l.sample([rng.gen(), rng.gen()]).dot(&l.axis()) >= cos_t).count();
            let p = hit as f64 / n as f64;
            let sd = (mass * (1.0 - mass) / n as f64).sqrt();
            assert!((p - mass).abs() < 5.0 * sd, "{p} vs {mass}");
        }
    }

    #[test]
    fn selection_follows_energy() {
        let a = sg([0.0, 0.0, 1.0], 10.0, 3.0);
        let b = sg([1.0, 0.0, 0.0], 10.0, 1.0);
        let env = SgEnvironment::new(vec![a, b]).unwrap();
        assert!((env.select_probability(0) - 0.75).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1_000_000;
        let first = (0..n).filter(|_| env.sample([rng.gen(), 0.5, 0.5]).lobe == 0).count();
        let p = first as f64 / n as f64;
        assert!((p - 0.75).abs() < 5.0 * (0.75 * 0.25 / n as f64).sqrt(), "{p}");
        let single = SgEnvironment::new(vec![a]).unwrap();
        assert!((0..100).all(|k| single.sample([k as f64 / 100.0, 0.3, 0.3]).lobe == 0));
        assert!(SgEnvironment::new(vec![]).is_err());
    }

    #[test]
    fn parse_and_print() {
        let text = "# two lobes\n0 0 1 25 1 1 1\n1 0 0  4 0.5 0.2 0.1 # warm\n\n";
        let env = SgEnvironment::parse(text).unwrap();
        assert_eq!(env.lobes().len(), 2);
        assert_eq!(env.lobes()[1].lambda(), 4.0);
        let back = SgEnvironment::parse(&env.to_text()).unwrap();
        assert_eq!(back, env);
        assert!(SgEnvironment::parse("0 0 1 25 1 1").is_err());
        assert!(SgEnvironment::parse("0 0 1 -2 1 1 1").is_err());
        assert!(SgEnvironment::parse("# nothing").is_err());
    }

    #[test]
    fn fit_recovers_single_lobe() {
        let truth = sg([0.3, 0.2, 0.9], 30.0, 2.0);
        let (w, h) = (256, 128);
        let mut img = RgbImage::new(w, h);
        for y in 0..h {
            let theta = (y as f64 + 0.5) / h as f64 * PI;
            for x in 0..w {
                let phi = (x as f64 + 0.5) / w as f64 * 2.0 * PI;
                let d = Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
                img.pixels[y * w + x] = truth.eval(&d).map(|v| v as f32);
            }
        }
        let env = SgEnvironment::fit_equirect(&img, 1, 1).unwrap();
        let l = env.lobes()[0];
        assert!(l.axis().dot(&truth.axis()) > 0.999);
        assert!((l.lambda() / 30.0 - 1.0).abs() < 0.05, "{}", l.lambda());
        assert!((l.energy()[0] / truth.energy()[0] - 1.0).abs() < 0.02);
    }

    /// Uniform density over the projected disk.
    struct Uniform;

    impl NdfQuery for Uniform {
        fn resolution(&self) -> usize {
            64
        }
        fn eval(&self, _: &Footprint, h: [f64; 2]) -> f64 {
            if h[0] * h[0] + h[1] * h[1] <= 1.0 {
                1.0 / PI
            } else {
                0.0
            }
        }
        fn eval_range(&self, fp: &Footprint, r: &AngularRange) -> f64 {
            let res = self.resolution();
            let mut s = 0.0;
            for y in r.y1..=r.y2 {
                for x in r.x1..=r.x2 {
                    s += self.eval(fp, crate::ndf::pixel_center(x, y, res));
                }
            }
            s / r.area() as f64
        }
        fn sample(&self, _: &Footprint, _: [f64; 2]) -> Option<SampleRecord> {
            None
        }
        fn clamped(&self, _: &Footprint) -> bool {
            false
        }
        fn period(&self) -> Option<[f64; 2]> {
            None
        }
    }

    /// A density made of isolated spikes on a coarse grid of pixels.
    struct Spiky;

    impl NdfQuery for Spiky {
        fn resolution(&self) -> usize {
            64
        }
        fn eval(&self, _: &Footprint, h: [f64; 2]) -> f64 {
            match crate::ndf::pixel_of(h, 64) {
                Some((x, y)) if x % 5 == 0 && y % 5 == 0 => 20.0,
                _ => 0.0,
            }
        }
        fn eval_range(&self, fp: &Footprint, r: &AngularRange) -> f64 {
            let mut s = 0.0;
            for y in r.y1..=r.y2 {
                for x in r.x1..=r.x2 {
                    s += self.eval(fp, crate::ndf::pixel_center(x, y, 64));
                }
            }
            s / r.area() as f64
        }
        fn sample(&self, _: &Footprint, _: [f64; 2]) -> Option<SampleRecord> {
            None
        }
        fn clamped(&self, _: &Footprint) -> bool {
            false
        }
        fn period(&self) -> Option<[f64; 2]> {
            None
        }
    }

    fn stats(sh: &EnvShading, est: EnvEstimator, n: usize, seed: u64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fp = Footprint::new(0.0, 0.0, 20.0);
        let frame = Frame::new(Vec3::z(), Vec3::x());
        let wo = Vec3::new(0.2, 0.1, 1.0).normalize();
        let xs: Vec<f64> = (0..n)
            .map(|_| sh.shade(&fp, &frame, &wo, est, [rng.gen(), rng.gen(), rng.gen()])[1])
            .collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        (m, v)
    }

    fn env4() -> SgEnvironment {
        SgEnvironment::new(vec![
            sg([0.2, 0.1, 1.0], 40.0, 3.0),
            sg([-0.5, 0.3, 0.8], 15.0, 1.0),
            sg([0.1, -0.6, 0.7], 80.0, 5.0),
            sg([0.0, 0.0, 1.0], 2.0, 0.2),
        ])
        .unwrap()
    }

    #[test]
    fn uniform_ndf_estimators_agree() {
        let env = env4();
        let m = GlintMaterial::default();
        let sh = EnvShading { ndf: &Uniform, env: &env, material: &m, eps: DEFAULT_EPSILON };
        let (mp, vp) = stats(&sh, EnvEstimator::Point, 100_000, 1);
        let (mf, vf) = stats(&sh, EnvEstimator::Prefiltered, 100_000, 1);
        let se = ((vp + vf) / 100_000.0).sqrt();
        // the range mean dips only near the rim of the disk
        assert!((mp - mf).abs() < 4.0 * se + 0.01 * mp, "{mp} {mf} {se}");
        assert!(vf <= vp * 1.001, "{vf} > {vp}");
    }

    #[test]
    fn prefiltering_reduces_variance_on_spiky_ndf() {
        let env = env4();
        let m = GlintMaterial::default();
        let sh = EnvShading { ndf: &Spiky, env: &env, material: &m, eps: DEFAULT_EPSILON };
        let (_, vp) = stats(&sh, EnvEstimator::Point, 20_000, 2);
        let (_, vf) = stats(&sh, EnvEstimator::Prefiltered, 20_000, 2);
        assert!(vf < 0.5 * vp, "{vf} vs {vp}");
    }

    #[test]
    fn narrowing_lobes_converge_to_point_estimate() {
        let m = GlintMaterial::default();
        let mut gaps = Vec::new();
        for lambda in [50.0, 500.0, 5_000.0, 50_000.0, 5e6] {
            let env = SgEnvironment::new(vec![sg([0.1, 0.1, 1.0], lambda, 1.0)]).unwrap();
            let sh = EnvShading { ndf: &Spiky, env: &env, material: &m, eps: DEFAULT_EPSILON };
            let (mp, _) = stats(&sh, EnvEstimator::Point, 2_000, 5);
            let (mf, _) = stats(&sh, EnvEstimator::Prefiltered, 2_000, 5);
            gaps.push((mp - mf).abs() / mp.abs().max(mf.abs()).max(1e-300));
        }
        assert_eq!(*gaps.last().unwrap(), 0.0, "{gaps:?}");
    }
}
