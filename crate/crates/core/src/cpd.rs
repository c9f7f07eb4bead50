//! Rank-R canonical polyadic decomposition of `t × t × L` block tensors by
//! alternating least squares, with 1D prefix sums over the spatial factors.
//!
//! Convergence convention: sweeps stop once the relative residual norm
//! `‖D − D̂‖ / ‖D‖` changes by less than `tol` between consecutive sweeps, or
//! after `max_iter` sweeps.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_BLOCK: usize = 16;
pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_MAX_ITER: usize = 500;

/// Fixed-point step for stored X and Y entries. Unit-norm vectors of length
/// ≤ 64 have prefix sums below 8 in magnitude, so multiples of this step
/// sum exactly in f32 and the stored SATs reproduce the segment sums of the
/// stored vectors bit for bit.
pub const FACTOR_STEP: f64 = 1.0 / (1u64 << 20) as f64;

/// Where a slab came from in the pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlabOrigin {
    pub level: u32,
    pub center: u32,
    pub block: u32,
}

/// Stack of `L` non-blank `t × t` slabs, stored slab-major then row-major
/// (`values[(z · t + y) · t + x]`).
#[derive(Debug, Clone)]
pub struct BlockTensor {
    t: usize,
    values: Vec<f64>,
    origins: Vec<SlabOrigin>,
}

impl BlockTensor {
    pub fn new(t: usize, values: Vec<f64>, origins: Vec<SlabOrigin>) -> Result<Self> {
        if t == 0 || origins.is_empty() || values.len() != t * t * origins.len() {
            return Err(Error::param(format!(
                "tensor of {} values does not hold {} slabs of {t}x{t}",
                values.len(),
                origins.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { t, values, origins })
    }

    /// Builds a tensor from slabs, dropping all-zero ones.
    pub fn from_slabs<I>(t: usize, slabs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (SlabOrigin, Vec<f64>)>,
    {
        let mut values = Vec::new();
        let mut origins = Vec::new();
        for (origin, slab) in slabs {
            if slab.len() != t * t {
                return Err(Error::param("slab size mismatch"));
            }
            if slab.iter().all(|&v| v == 0.0) {
                continue;
            }
            values.extend_from_slice(&slab);
            origins.push(origin);
        }
        if origins.is_empty() {
            return Err(Error::Empty("every slab is blank"));
        }
        Self::new(t, values, origins)
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn origins(&self) -> &[SlabOrigin] {
        &self.origins
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[(z * self.t + y) * self.t + x]
    }

    pub fn slab(&self, z: usize) -> &[f64] {
        let n = self.t * self.t;
        &self.values[z * n..(z + 1) * n]
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlsOptions {
    pub rank: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl AlsOptions {
    pub fn rank(rank: usize) -> Self {
        Self {
            rank,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Rank-R model `D̂(x, y, z) = Σ_r C_r · X_r(x) · Y_r(y) · Z_r(z)`.
///
/// Factor matrices are row-major with the rank index innermost
/// (`x[i · R + r]`), so one query reads contiguous runs.
#[derive(Debug, Clone, PartialEq)]
pub struct CpFactors {
    rank: usize,
    t: usize,
    len: usize,
    pub c: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    x_sat: Vec<f64>,
    y_sat: Vec<f64>,
    /// `Σ (D − D̂)² / Σ D²` over the fitted tensor.
    pub fit_error: f64,
    pub iterations: usize,
    /// Objective `‖D − D̂‖² / ‖D‖²` after each sweep.
    pub history: Vec<f64>,
}

impl CpFactors {
    /// Assembles factors from parts (`x`, `y` of length `t · R`, `z` of
    /// length `L · R`), without SATs.
    pub fn from_parts(
        rank: usize,
        t: usize,
        len: usize,
        c: Vec<f64>,
        x: Vec<f64>,
        y: Vec<f64>,
        z: Vec<f64>,
    ) -> Result<Self> {
        if rank == 0 || c.len() != rank || x.len() != t * rank || y.len() != t * rank || z.len() != len * rank
        {
            return Err(Error::Malformed(format!(
                "factor shapes do not match rank {rank}, t {t}, L {len}"
            )));
        }
        Ok(Self {
            rank,
            t,
            len,
            c,
            x,
            y,
            z,
            x_sat: Vec::new(),
            y_sat: Vec::new(),
            fit_error: f64::NAN,
            iterations: 0,
            history: Vec::new(),
        })
    }

    /// Attaches stored prefix sums, each `(t + 1) · R` long.
    pub fn set_sats(&mut self, x_sat: Vec<f64>, y_sat: Vec<f64>) -> Result<()> {
        let n = (self.t + 1) * self.rank;
        if x_sat.len() != n || y_sat.len() != n {
            return Err(Error::Malformed(format!("SAT length must be {n}")));
        }
        self.x_sat = x_sat;
        self.y_sat = y_sat;
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn has_sats(&self) -> bool {
        !self.x_sat.is_empty()
    }

    /// `(t + 1) × R` exclusive prefix sums of X.
    pub fn x_sat(&self) -> &[f64] {
        &self.x_sat
    }

    pub fn y_sat(&self) -> &[f64] {
        &self.y_sat
    }

    pub fn x_col(&self, r: usize) -> Vec<f64> {
        (0..self.t).map(|i| self.x[i * self.rank + r]).collect()
    }

    pub fn y_col(&self, r: usize) -> Vec<f64> {
        (0..self.t).map(|i| self.y[i * self.rank + r]).collect()
    }

    pub fn z_col(&self, r: usize) -> Vec<f64> {
        (0..self.len).map(|i| self.z[i * self.rank + r]).collect()
    }

    /// Pre-clamp model value at one entry.
    pub fn value(&self, x: usize, y: usize, z: usize) -> f64 {
        let r = self.rank;
        let (xs, ys, zs) = (
            &self.x[x * r..(x + 1) * r],
            &self.y[y * r..(y + 1) * r],
            &self.z[z * r..(z + 1) * r],
        );
        let mut s = 0.0;
        for k in 0..r {
            s += self.c[k] * xs[k] * ys[k] * zs[k];
        }
        s
    }

    /// Pre-clamp mean of the model over `[x1, x2] × [y1, y2]` of slab `z`,
    /// from segment means of the SATs. Requires [`build_sats`].
    pub fn range_mean(&self, x1: usize, x2: usize, y1: usize, y2: usize, z: usize) -> f64 {
        debug_assert!(self.has_sats());
        let r = self.rank;
        let nx = (x2 - x1 + 1) as f64;
        let ny = (y2 - y1 + 1) as f64;
        let (xa, xb) = (&self.x_sat[x1 * r..], &self.x_sat[(x2 + 1) * r..]);
        let (ya, yb) = (&self.y_sat[y1 * r..], &self.y_sat[(y2 + 1) * r..]);
        let zs = &self.z[z * r..(z + 1) * r];
        let mut s = 0.0;
        for k in 0..r {
            s += self.c[k] * (xb[k] - xa[k]) * (yb[k] - ya[k]) * zs[k];
        }
        s / (nx * ny)
    }

    /// Dense pre-clamp reconstruction of slab `z`, row-major.
    pub fn reconstruct_block(&self, z: usize) -> Result<Vec<f64>> {
        if z >= self.len {
            return Err(Error::OutOfRange(format!("slab {z} of {}", self.len)));
        }
        let t = self.t;
        Ok((0..t * t).map(|i| self.value(i % t, i / t, z)).collect())
    }

    /// `Σ (D − D̂)² / Σ D²` against `tensor`, by explicit reconstruction.
    pub fn relative_error(&self, tensor: &BlockTensor) -> f64 {
        let t = self.t;
        let mut num = 0.0;
        for z in 0..self.len {
            for y in 0..t {
                for x in 0..t {
                    num += (tensor.get(x, y, z) - self.value(x, y, z)).powi(2);
                }
            }
        }
        num / tensor.norm_sq().max(f64::MIN_POSITIVE)
    }

    /// Rounds X and Y to multiples of [`FACTOR_STEP`] and C, Z to f32, so
    /// the values survive an f32 round trip exactly, then rebuilds SATs and
    /// re-measures the fit error.
    pub fn quantize_for_storage(&mut self, tensor: &BlockTensor) {
        let fixed = |v: &mut f64| *v = (*v / FACTOR_STEP).round() * FACTOR_STEP;
        self.x.iter_mut().for_each(fixed);
        self.y.iter_mut().for_each(fixed);
        for v in self.c.iter_mut().chain(self.z.iter_mut()) {
            *v = *v as f32 as f64;
        }
        build_sats(self);
        self.fit_error = self.relative_error(tensor);
    }

    /// Bytes as stored: C, X, Y, Z and both SATs as f32.
    pub fn storage_bytes(&self) -> usize {
        let r = self.rank;
        4 * (r + 2 * self.t * r + self.len * r + 2 * (self.t + 1) * r)
    }
}

/// Attaches exclusive prefix sums `sat[k] = Σ_{i<k} v[i]` of every X and Y
/// column.
pub fn build_sats(f: &mut CpFactors) {
    f.x_sat = prefix(&f.x, f.t, f.rank);
    f.y_sat = prefix(&f.y, f.t, f.rank);
}

fn prefix(m: &[f64], n: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; (n + 1) * r];
    for i in 0..n {
        for k in 0..r {
            out[(i + 1) * r + k] = out[i * r + k] + m[i * r + k];
        }
    }
    out
}

/// Mean of `v[a..=b]` from its exclusive prefix sums.
pub fn segment_mean(sat: &[f64], a: usize, b: usize) -> f64 {
    (sat[b + 1] - sat[a]) / (b - a + 1) as f64
}

/// Exclusive prefix sums of one vector.
pub fn sat_of(v: &[f64]) -> Vec<f64> {
    prefix(v, v.len(), 1)
}

/// Fits a rank-R CP model. Single-slab tensors use a truncated SVD instead
/// of ALS. The result carries SATs.
pub fn cp_als(tensor: &BlockTensor, opts: AlsOptions) -> Result<CpFactors> {
    if opts.rank == 0 {
        return Err(Error::param("rank must be at least 1"));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::param("tolerance must be positive"));
    }
    let (t, len) = (tensor.t(), tensor.len());
    let max_rank = t * t * len;
    let rank = if opts.rank > max_rank {
        log::warn!("rank {} exceeds tensor size {max_rank}; clamped", opts.rank);
        max_rank
    } else {
        opts.rank
    };
    let mut f = if len == 1 {
        svd_single(tensor, rank)
    } else {
        als(tensor, rank, opts)
    };
    build_sats(&mut f);
    f.fit_error = f.relative_error(tensor);
    Ok(f)
}

fn svd_single(tensor: &BlockTensor, rank: usize) -> CpFactors {
    let t = tensor.t();
    let m = DMatrix::from_fn(t, t, |x, y| tensor.get(x, y, 0));
    let svd = m.svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut c = vec![0.0; rank];
    let mut x = vec![0.0; t * rank];
    let mut y = vec![0.0; t * rank];
    let mut z = vec![0.0; rank];
    for (r, &k) in order.iter().take(rank).enumerate() {
        c[r] = svd.singular_values[k];
        for i in 0..t {
            x[i * rank + r] = u[(i, k)];
            y[i * rank + r] = vt[(k, i)];
        }
        z[r] = 1.0;
    }
    let mut f = CpFactors::from_parts(rank, t, 1, c, x, y, z).expect("consistent shapes");
    canonical_signs(&mut f);
    f.iterations = 0;
    f
}

/// Flips X and Y columns so their largest-magnitude entry is positive,
/// moving the sign into Z.
fn canonical_signs(f: &mut CpFactors) {
    let r = f.rank;
    for k in 0..r {
        for (m, n) in [(0usize, f.t), (1, f.t)] {
            let col = if m == 0 { &mut f.x } else { &mut f.y };
            let peak = (0..n)
                .map(|i| col[i * r + k])
                .max_by(|a, b| a.abs().total_cmp(&b.abs()))
                .unwrap_or(0.0);
            if peak < 0.0 {
                (0..n).for_each(|i| col[i * r + k] = -col[i * r + k]);
                (0..f.len).for_each(|i| f.z[i * r + k] = -f.z[i * r + k]);
            }
        }
    }
}

fn als(tensor: &BlockTensor, rank: usize, opts: AlsOptions) -> CpFactors {
    let (t, len) = (tensor.t(), tensor.len());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut init = |n: usize| DMatrix::<f64>::from_fn(n, rank, |_, _| rng.gen::<f64>());
    let mut a = init(t);
    let mut b = init(t);
    let mut c = init(len);
    let norm_sq = tensor.norm_sq();
    let mut history = Vec::new();
    let mut prev_residual = f64::INFINITY;
    let mut iterations = 0;
    for _ in 0..opts.max_iter {
        let previous = (a.clone(), b.clone(), c.clone());
        // mode X: Σ_{y,z} D[x,y,z] · B[y,r] · C[z,r]
        let w = contract_z(tensor, &c);
        let mx = DMatrix::from_fn(t, rank, |x, r| (0..t).map(|y| w[(x * t + y) * rank + r] * b[(y, r)]).sum());
        a = solve_mode(&mx, &b, &c);
        normalize_columns(&mut a);
        let my = DMatrix::from_fn(t, rank, |y, r| (0..t).map(|x| w[(x * t + y) * rank + r] * a[(x, r)]).sum());
        b = solve_mode(&my, &a, &c);
        normalize_columns(&mut b);
        let mz = contract_xy(tensor, &a, &b);
        c = solve_mode(&mz, &a, &b);
        // ‖D − D̂‖² = ‖D‖² − 2⟨D, D̂⟩ + ‖D̂‖²
        let inner: f64 = mz.component_mul(&c).sum();
        let gram = (a.transpose() * &a)
            .component_mul(&(b.transpose() * &b))
            .component_mul(&(c.transpose() * &c));
        let model_sq = gram.sum();
        let objective = ((norm_sq - 2.0 * inner + model_sq) / norm_sq).max(0.0);
        if history.last().is_some_and(|&last| objective > last) {
            // an ill-conditioned sweep made things worse: keep the last
            // iterate and stop
            (a, b, c) = previous;
            break;
        }
        iterations += 1;
        history.push(objective);
        let residual = objective.sqrt();
        if (prev_residual - residual).abs() < opts.tol {
            break;
        }
        prev_residual = residual;
    }
    // move column norms into the weights
    let mut weights = vec![1.0; rank];
    for m in [&mut a, &mut b, &mut c] {
        for r in 0..rank {
            let n = m.column(r).norm();
            if n > 0.0 {
                m.column_mut(r).scale_mut(1.0 / n);
            }
            weights[r] *= n;
        }
    }
    let flat = |m: &DMatrix<f64>| -> Vec<f64> {
        (0..m.nrows())
            .flat_map(|i| (0..rank).map(move |r| m[(i, r)]))
            .collect()
    };
    let mut f = CpFactors::from_parts(rank, t, len, weights, flat(&a), flat(&b), flat(&c))
        .expect("consistent shapes");
    canonical_signs(&mut f);
    f.iterations = iterations;
    f.history = history;
    f
}

fn normalize_columns(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col.scale_mut(1.0 / n);
        }
    }
}

/// `W[x, y, r] = Σ_z D[x, y, z] · C[z, r]`, laid out `(x · t + y) · R + r`.
fn contract_z(tensor: &BlockTensor, c: &DMatrix<f64>) -> Vec<f64> {
    let t = tensor.t();
    let rank = c.ncols();
    let mut w = vec![0.0; t * t * rank];
    for z in 0..tensor.len() {
        let crow: Vec<f64> = (0..rank).map(|r| c[(z, r)]).collect();
        for (i, &d) in tensor.slab(z).iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let (x, y) = (i % t, i / t);
            let out = &mut w[(x * t + y) * rank..(x * t + y + 1) * rank];
            for (o, &cr) in out.iter_mut().zip(&crow) {
                *o += d * cr;
            }
        }
    }
    w
}

/// `M[z, r] = Σ_{x,y} D[x, y, z] · A[x, r] · B[y, r]`.
fn contract_xy(tensor: &BlockTensor, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let t = tensor.t();
    let rank = a.ncols();
    let kr: Vec<f64> = (0..t * t)
        .flat_map(|i| (0..rank).map(move |r| (i, r)))
        .map(|(i, r)| a[(i % t, r)] * b[(i / t, r)])
        .collect();
    let mut m = DMatrix::zeros(tensor.len(), rank);
    for z in 0..tensor.len() {
        for (i, &d) in tensor.slab(z).iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            for r in 0..rank {
                m[(z, r)] += d * kr[i * rank + r];
            }
        }
    }
    m
}

/// Least-squares update `M · (PᵀP ∗ QᵀQ)⁺` for one factor matrix.
fn solve_mode(m: &DMatrix<f64>, p: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let v = (p.transpose() * p).component_mul(&(q.transpose() * q));
    let scale = v.amax().max(f64::MIN_POSITIVE);
    let pinv = v
        .svd(true, true)
        .pseudo_inverse(scale * 1e-13)
        .expect("SVD with U and V");
    m * pinv
}
