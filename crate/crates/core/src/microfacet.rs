//! Microfacet BRDF assembly around a footprint NDF:
//! `f(i, o) = F(i·h) G(i, o) D(h) / (4 (i·n)(o·n))`, all vectors in the
//! local shading frame (`n = +z`).
//!
//! `D` is the projected-half-vector density of the glint NDF. Over the
//! hemisphere `dω_h = dA / cos θ_h`, so `∫ D cos θ_h dω_h = ∫ D dA = 1`,
//! the usual microfacet normalization, and the density can be used as `D`
//! directly.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;
pub type Rgb = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlintMaterial {
    /// Reflectance at normal incidence per channel.
    pub f0: Rgb,
    /// GGX-style roughness used only by the masking-shadowing term.
    pub alpha: f64,
    /// When false, `G = 1`.
    pub shadowing: bool,
}

impl Default for GlintMaterial {
    fn default() -> Self {
        Self {
            f0: [0.95, 0.64, 0.54],
            alpha: 0.17,
            shadowing: true,
        }
    }
}

/// Schlick's approximation per channel.
pub fn fresnel_schlick(f0: Rgb, cos: f64) -> Rgb {
    let m = (1.0 - cos.clamp(0.0, 1.0)).powi(5);
    f0.map(|f| f + (1.0 - f) * m)
}

fn lambda_ggx(cos: f64, alpha: f64) -> f64 {
    let c2 = (cos * cos).min(1.0);
    if c2 <= 0.0 {
        return f64::INFINITY;
    }
    let tan2 = (1.0 - c2) / c2;
    0.5 * (-1.0 + (1.0 + alpha * alpha * tan2).sqrt())
}

/// Height-correlated Smith masking-shadowing.
pub fn smith_g2(cos_i: f64, cos_o: f64, alpha: f64) -> f64 {
    1.0 / (1.0 + lambda_ggx(cos_i, alpha) + lambda_ggx(cos_o, alpha))
}

/// Normalized half vector of `i` and `o`; `None` if they cancel.
pub fn half_vector(i: &Vec3, o: &Vec3) -> Option<Vec3> {
    let h = i + o;
    let n = h.norm();
    (n > 1e-12).then(|| h / n)
}

/// Projected half vector `(h_x, h_y)`, the NDF image coordinate.
pub fn project(h: &Vec3) -> [f64; 2] {
    [h.x, h.y]
}

/// Lifts a projected half vector back to the upper hemisphere.
pub fn unproject(h: [f64; 2]) -> Option<Vec3> {
    let r2 = h[0] * h[0] + h[1] * h[1];
    (r2 <= 1.0).then(|| Vec3::new(h[0], h[1], (1.0 - r2).sqrt()))
}

/// Mirror `o` about `h`.
pub fn reflect(o: &Vec3, h: &Vec3) -> Vec3 {
    2.0 * o.dot(h) * h - o
}

impl GlintMaterial {
    fn g(&self, cos_i: f64, cos_o: f64) -> f64 {
        if self.shadowing {
            smith_g2(cos_i, cos_o, self.alpha)
        } else {
            1.0
        }
    }

    /// BRDF value given the NDF density `d` at the half vector of `i`, `o`.
    /// Zero below either horizon.
    pub fn eval_with_d(&self, i: &Vec3, o: &Vec3, d: f64) -> Rgb {
        let (ci, co) = (i.z, o.z);
        if ci <= 0.0 || co <= 0.0 || d <= 0.0 {
            return [0.0; 3];
        }
        let Some(h) = half_vector(i, o) else { return [0.0; 3] };
        let f = fresnel_schlick(self.f0, i.dot(&h));
        let s = self.g(ci, co) * d / (4.0 * ci * co);
        f.map(|x| x * s)
    }

    /// `f · cos_i / pdf_i` for an incident direction obtained by reflecting
    /// `o` about a half vector drawn with density `D` over projected area.
    pub fn sample_weight(&self, i: &Vec3, o: &Vec3, h: &Vec3) -> Rgb {
        let (ci, co) = (i.z, o.z);
        if ci <= 0.0 || co <= 0.0 || h.z <= 0.0 {
            return [0.0; 3];
        }
        let f = fresnel_schlick(self.f0, i.dot(h));
        let s = self.g(ci, co) * o.dot(h).abs() / (co * h.z);
        f.map(|x| x * s)
    }

    /// Solid-angle density of the incident direction when `h` is drawn with
    /// projected density `d`.
    pub fn incident_pdf(d: f64, o: &Vec3, h: &Vec3) -> f64 {
        let oh = o.dot(h).abs();
        if oh <= 0.0 {
            return 0.0;
        }
        d * h.z / (4.0 * oh)
    }
}

/// Orthonormal shading frame; local `z` is the normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub t: Vec3,
    pub b: Vec3,
    pub n: Vec3,
}

impl Frame {
    /// Frame from a normal and a tangent hint, Gram-Schmidt orthogonalized.
    pub fn new(n: Vec3, tangent: Vec3) -> Self {
        let n = n.normalize();
        let mut t = tangent - n * n.dot(&tangent);
        if t.norm() < 1e-9 {
            let a = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
            t = a - n * n.dot(&a);
        }
        let t = t.normalize();
        Self { t, b: n.cross(&t), n }
    }

    pub fn to_local(&self, v: &Vec3) -> Vec3 {
        Vec3::new(v.dot(&self.t), v.dot(&self.b), v.dot(&self.n))
    }

    pub fn to_world(&self, v: &Vec3) -> Vec3 {
        self.t * v.x + self.b * v.y + self.n * v.z
    }
}

pub fn scale(c: Rgb, s: f64) -> Rgb {
    c.map(|x| x * s)
}

pub fn add(a: Rgb, b: Rgb) -> Rgb {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn mul(a: Rgb, b: Rgb) -> Rgb {
    [a[0] * b[0], a[1] * b[1], a[2] * b[2]]
}
