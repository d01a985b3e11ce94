//! Dense complex linear-algebra primitives shared by the factorization modules:
//! interpolative decomposition, randomized two-sided low-rank recovery,
//! orthonormal bases, pseudo-inverse, spectral-norm estimation and Cholesky.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FioError, Result};

pub type C64 = Complex<f64>;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

/// Default bound on interpolation-matrix entries in [`id_decompose`].
pub const ID_PIVOT_BOUND: f64 = 2.0;

/// Derive a per-call seed from a global seed and a call counter.
pub fn derive_seed(seed: u64, counter: u64) -> u64 {
    // splitmix64 step over the combined word
    let mut z = seed ^ counter.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard complex Gaussian matrix, entries (N(0,1) + i N(0,1)) / sqrt(2).
pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> CMat {
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    CMat::from_fn(rows, cols, |_, _| {
        let re: f64 = sample_normal(rng);
        let im: f64 = sample_normal(rng);
        Complex::new(re * scale, im * scale)
    })
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; avoids a rand_distr dependency for one distribution.
    loop {
        let u: f64 = rng.gen::<f64>();
        if u > 1e-300 {
            let v: f64 = rng.gen::<f64>();
            return (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos();
        }
    }
}

pub fn all_finite(m: &CMat) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// Result of an interpolative decomposition: a disjoint partition of the
/// column range into skeleton and redundant columns, with `interp` expressing
/// the redundant columns as bounded combinations of the skeleton ones.
#[derive(Debug, Clone)]
pub struct IdResult {
    pub skeleton: Vec<usize>,
    pub redundant: Vec<usize>,
    /// |skeleton| x |redundant| interpolation matrix T.
    pub interp: CMat,
}

impl IdResult {
    pub fn rank(&self) -> usize {
        self.skeleton.len()
    }

    /// The k x n operator P with P[:, skeleton] = I and P[:, redundant] = T,
    /// so that M ~= M[:, skeleton] * P.
    pub fn col_interp_operator(&self) -> CMat {
        let k = self.skeleton.len();
        let n = k + self.redundant.len();
        let mut p = CMat::zeros(k, n);
        for (local, &j) in self.skeleton.iter().enumerate() {
            p[(local, j)] = C64::new(1.0, 0.0);
        }
        for (local, &j) in self.redundant.iter().enumerate() {
            p.view_mut((0, j), (k, 1)).copy_from(&self.interp.column(local));
        }
        p
    }
}

/// Two-sided low-rank factor A ~= left * mid * right^*.
#[derive(Debug, Clone)]
pub struct LowRankFactor {
    pub left: CMat,
    pub mid: CMat,
    pub right: CMat,
}

impl LowRankFactor {
    pub fn zero(rows: usize, cols: usize) -> Self {
        LowRankFactor {
            left: CMat::zeros(rows, 0),
            mid: CMat::zeros(0, 0),
            right: CMat::zeros(cols, 0),
        }
    }

    pub fn nrows(&self) -> usize {
        self.left.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.right.nrows()
    }

    pub fn to_dense(&self) -> CMat {
        &self.left * &self.mid * self.right.adjoint()
    }

    /// left * mid * right^* * x
    pub fn apply(&self, x: &CMat) -> CMat {
        &self.left * (&self.mid * (self.right.adjoint() * x))
    }

    /// right * mid^* * left^* * x (the conjugate-transpose factor applied).
    pub fn apply_adjoint(&self, x: &CMat) -> CMat {
        &self.right * (self.mid.adjoint() * (self.left.adjoint() * x))
    }
}

/// Column-pivoted Householder QR, truncated at `tol` (relative to the largest
/// pivot) and `max_rank`.
pub struct PivotedQr {
    pub q: CMat,
    /// rank x n upper-trapezoidal factor in pivoted column order.
    pub r: CMat,
    /// Column permutation: `perm[i]` is the original index of pivot column i.
    pub perm: Vec<usize>,
    pub rank: usize,
    /// Diagonal magnitudes |R_kk| for the factored columns.
    pub diag: Vec<f64>,
}

/// Householder column-pivoted QR of `m`, factoring at most `hard_cap` columns.
///
/// The returned `rank` is the tolerance rank: the number of leading pivots
/// with |R_kk| > tol * |R_00|. The factorization itself is carried out to
/// `hard_cap` pivots so callers may extend the rank afterwards.
pub fn pivoted_qr(m: &CMat, tol: f64, hard_cap: Option<usize>) -> PivotedQr {
    let (nrows, ncols) = m.shape();
    let kmax = hard_cap
        .unwrap_or(usize::MAX)
        .min(nrows)
        .min(ncols);
    let mut a = m.clone();
    let mut perm: Vec<usize> = (0..ncols).collect();
    let mut col_norms2: Vec<f64> = (0..ncols)
        .map(|j| a.column(j).norm_squared())
        .collect();
    let mut col_norms2_ref = col_norms2.clone();
    let mut reflectors: Vec<(CVec, C64)> = Vec::new();
    let mut diag: Vec<f64> = Vec::new();

    let mut k = 0usize;
    while k < kmax {
        // pivot selection
        let (jmax, &nm) = col_norms2[k..]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        let jmax = jmax + k;
        if nm <= 0.0 {
            break;
        }
        if jmax != k {
            a.swap_columns(k, jmax);
            perm.swap(k, jmax);
            col_norms2.swap(k, jmax);
            col_norms2_ref.swap(k, jmax);
        }

        // Householder vector for a[k.., k]
        let x0 = a[(k, k)];
        let xnorm = a.view((k, k), (nrows - k, 1)).norm();
        if xnorm == 0.0 {
            break;
        }
        let phase = if x0.norm() > 0.0 {
            x0 / x0.norm()
        } else {
            C64::new(1.0, 0.0)
        };
        let alpha = -phase * xnorm;
        let mut v = CVec::zeros(nrows - k);
        for i in 0..nrows - k {
            v[i] = a[(k + i, k)];
        }
        v[0] -= alpha;
        let vn2 = v.norm_squared();
        let tau = if vn2 > 0.0 {
            C64::new(2.0 / vn2, 0.0)
        } else {
            C64::new(0.0, 0.0)
        };

        // apply reflector to trailing columns
        for j in k..ncols {
            let mut dot = C64::new(0.0, 0.0);
            for i in 0..nrows - k {
                dot += v[i].conj() * a[(k + i, j)];
            }
            let s = tau * dot;
            for i in 0..nrows - k {
                let upd = s * v[i];
                a[(k + i, j)] -= upd;
            }
        }
        a[(k, k)] = alpha;
        for i in k + 1..nrows {
            a[(i, k)] = C64::new(0.0, 0.0);
        }
        diag.push(alpha.norm());
        reflectors.push((v, tau));

        // downdate column norms, recomputing on cancellation
        for j in k + 1..ncols {
            let t = a[(k, j)].norm_sqr();
            col_norms2[j] -= t;
            if col_norms2[j] < 1e-12 * col_norms2_ref[j] || col_norms2[j] < 0.0 {
                let fresh = a.view((k + 1, j), (nrows - k - 1, 1)).norm_squared();
                col_norms2[j] = fresh;
                col_norms2_ref[j] = fresh;
            }
        }
        k += 1;
    }
    let factored = k;

    // tolerance rank
    let mut rank = factored;
    if let Some(&d0) = diag.first() {
        rank = diag.iter().take_while(|&&d| d > tol * d0).count();
    }

    // R: factored x ncols
    let mut r = CMat::zeros(factored, ncols);
    for i in 0..factored {
        for j in i..ncols {
            r[(i, j)] = a[(i, j)];
        }
    }

    // Q: nrows x factored, columns from applying reflectors to e_i in reverse
    let mut q = CMat::zeros(nrows, factored);
    for jcol in 0..factored {
        let mut e = CVec::zeros(nrows);
        e[jcol] = C64::new(1.0, 0.0);
        for kk in (0..=jcol.min(reflectors.len() - 1)).rev() {
            let (v, tau) = &reflectors[kk];
            let off = kk;
            let mut dot = C64::new(0.0, 0.0);
            for i in 0..nrows - off {
                dot += v[i].conj() * e[off + i];
            }
            let s = *tau * dot;
            for i in 0..nrows - off {
                let upd = s * v[i];
                e[off + i] -= upd;
            }
        }
        q.set_column(jcol, &e);
    }

    PivotedQr {
        q,
        r,
        perm,
        rank,
        diag,
    }
}

/// Interpolative decomposition of the columns of `m`: find skeleton columns
/// and an interpolation matrix T with `m[:, redundant] ~= m[:, skeleton] T`
/// and `max |T_ij|` kept below [`ID_PIVOT_BOUND`].
pub fn id_decompose(m: &CMat, tol: f64, max_rank: Option<usize>) -> Result<IdResult> {
    if m.is_empty() {
        return Err(FioError::invalid("id_decompose: empty matrix"));
    }
    if !all_finite(m) {
        return Err(FioError::invalid("id_decompose: non-finite entries"));
    }
    if !(tol > 0.0 && tol < 1.0) {
        return Err(FioError::invalid("id_decompose: tol must lie in (0, 1)"));
    }
    let ncols = m.ncols();
    let qr = pivoted_qr(m, tol, max_rank);
    let cap = qr.r.nrows();
    let mut k = qr.rank.min(cap);

    loop {
        let t = interp_from_r(&qr.r, k);
        let tmax = t.iter().map(|z| z.norm()).fold(0.0, f64::max);
        if tmax <= ID_PIVOT_BOUND || k >= cap {
            let skeleton = qr.perm[..k].to_vec();
            let redundant = qr.perm[k..].to_vec();
            debug_assert_eq!(skeleton.len() + redundant.len(), ncols);
            return Ok(IdResult {
                skeleton,
                redundant,
                interp: t,
            });
        }
        k += 1;
    }
}

/// T = R11^{-1} R12 for the leading k x k block of a pivoted R factor.
fn interp_from_r(r: &CMat, k: usize) -> CMat {
    let ncols = r.ncols();
    let nred = ncols - k;
    let mut t = CMat::zeros(k, nred);
    for j in 0..nred {
        // back substitution on R11 x = R12[:, j]
        for i in (0..k).rev() {
            let mut s = r[(i, k + j)];
            for l in i + 1..k {
                s -= r[(i, l)] * t[(l, j)];
            }
            let d = r[(i, i)];
            t[(i, j)] = if d.norm() > 0.0 { s / d } else { C64::new(0.0, 0.0) };
        }
    }
    t
}

/// Orthonormal basis for the range of `m`, truncated at relative tolerance
/// 1e-12.
pub fn orth_basis(m: &CMat) -> Result<CMat> {
    if m.is_empty() {
        return Err(FioError::invalid("orth_basis: empty matrix"));
    }
    if !all_finite(m) {
        return Err(FioError::invalid("orth_basis: non-finite entries"));
    }
    let qr = pivoted_qr(m, 1e-12, None);
    Ok(qr.q.columns(0, qr.rank).into_owned())
}

/// Randomized two-sided low-rank recovery of a linear operator from sketches:
/// with R1, R2 Gaussian, returns U1 (R2* U1)^+ (R2* A R1) (U2* R1)^+ U2*
/// reassembled as left/mid/right.
pub fn randomized_lowrank<F, G>(
    apply: F,
    apply_adj: G,
    n_rows: usize,
    n_cols: usize,
    rank: usize,
    oversample: usize,
    seed: u64,
) -> Result<LowRankFactor>
where
    F: Fn(&CMat) -> CMat,
    G: Fn(&CMat) -> CMat,
{
    let q = rank + oversample;
    if q > n_rows.min(n_cols) {
        return Err(FioError::invalid(
            "randomized_lowrank: rank + oversample exceeds matrix dimensions",
        ));
    }
    let mut rng = rng_from_seed(seed);
    let r1 = gaussian_matrix(n_cols, q, &mut rng);
    let r2 = gaussian_matrix(n_rows, q, &mut rng);
    let y1 = apply(&r1); // A R1, n_rows x q
    if y1.nrows() != n_rows || y1.ncols() != q {
        return Err(FioError::DimensionMismatch {
            expected: n_rows,
            got: y1.nrows(),
        });
    }
    let y2 = apply_adj(&r2); // A* R2, n_cols x q
    if y2.nrows() != n_cols || y2.ncols() != q {
        return Err(FioError::DimensionMismatch {
            expected: n_cols,
            got: y2.nrows(),
        });
    }
    lowrank_from_sketches(&y1, &y2, &r1, &r2, rank)
}

/// Assemble the low-rank factor from sketches Y1 = A R1 and Y2 = A* R2.
pub fn lowrank_from_sketches(
    y1: &CMat,
    y2: &CMat,
    r1: &CMat,
    r2: &CMat,
    rank: usize,
) -> Result<LowRankFactor> {
    let n_rows = y1.nrows();
    let n_cols = y2.nrows();
    let norm1 = y1.norm();
    let norm2 = y2.norm();
    if norm1 == 0.0 && norm2 == 0.0 {
        return Ok(LowRankFactor::zero(n_rows, n_cols));
    }
    let u1_full = orth_basis(y1)?;
    let u2_full = orth_basis(y2)?;
    let u1 = u1_full.columns(0, u1_full.ncols().min(rank)).into_owned();
    let u2 = u2_full.columns(0, u2_full.ncols().min(rank)).into_owned();
    // R2* A R1 = R2* Y1
    let core = r2.adjoint() * y1;
    let left_p = pinv(&(r2.adjoint() * &u1), 1e-12)?;
    let right_p = pinv(&(u2.adjoint() * r1), 1e-12)?;
    let mid = left_p * core * right_p;
    Ok(LowRankFactor {
        left: u1,
        mid,
        right: u2,
    })
}

/// Moore-Penrose pseudo-inverse with singular values below `tol * sigma_max`
/// discarded.
pub fn pinv(m: &CMat, tol: f64) -> Result<CMat> {
    if m.is_empty() {
        return Err(FioError::invalid("pinv: empty matrix"));
    }
    if m.ncols() == 0 || m.nrows() == 0 {
        return Ok(CMat::zeros(m.ncols(), m.nrows()));
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let k = svd.singular_values.len();
    let mut sinv = CMat::zeros(k, k);
    for i in 0..k {
        let s = svd.singular_values[i];
        if s > tol * smax && s > 0.0 {
            sinv[(i, i)] = C64::new(1.0 / s, 0.0);
        }
    }
    Ok(vt.adjoint() * sinv * u.adjoint())
}

/// Spectral-norm estimate from power iteration, with its convergence status.
#[derive(Debug, Clone, Copy)]
pub struct NormEstimate {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Estimate the spectral norm of a linear operator by power iteration on A*A,
/// stopping when successive estimates differ relatively by less than
/// `rel_prec` (iteration cap 200).
pub fn spectral_norm_est<F, G>(
    apply: F,
    apply_adj: G,
    n: usize,
    rel_prec: f64,
    seed: u64,
) -> Result<NormEstimate>
where
    F: Fn(&CVec) -> CVec,
    G: Fn(&CVec) -> CVec,
{
    if n == 0 {
        return Err(FioError::invalid("spectral_norm_est: dimension 0"));
    }
    const MAX_ITER: usize = 200;
    let mut rng = rng_from_seed(seed);
    let mut x = CVec::from_fn(n, |_, _| {
        C64::new(sample_normal(&mut rng), sample_normal(&mut rng))
    });
    let xn = x.norm();
    if xn == 0.0 {
        x[0] = C64::new(1.0, 0.0);
    } else {
        x /= C64::new(xn, 0.0);
    }
    let mut prev = f64::NAN;
    for it in 0..MAX_ITER {
        let y = apply(&x);
        let sigma = y.norm();
        if sigma == 0.0 {
            return Ok(NormEstimate {
                value: 0.0,
                converged: true,
                iterations: it,
            });
        }
        let z = apply_adj(&y);
        let zn = z.norm();
        if prev.is_finite() && (sigma - prev).abs() <= rel_prec * sigma {
            return Ok(NormEstimate {
                value: sigma,
                converged: true,
                iterations: it,
            });
        }
        prev = sigma;
        if zn == 0.0 {
            return Ok(NormEstimate {
                value: sigma,
                converged: true,
                iterations: it,
            });
        }
        x = z / C64::new(zn, 0.0);
    }
    Ok(NormEstimate {
        value: prev,
        converged: false,
        iterations: MAX_ITER,
    })
}

/// Dense spectral norm of an explicit matrix via power iteration.
pub fn spectral_norm_dense(m: &CMat, rel_prec: f64, seed: u64) -> f64 {
    spectral_norm_est(
        |v| m * v,
        |v| m.adjoint() * v,
        m.ncols(),
        rel_prec,
        seed,
    )
    .map(|e| e.value)
    .unwrap_or(0.0)
}

/// Lower-triangular Cholesky factor of a hermitian positive definite matrix.
pub fn cholesky(m: &CMat) -> Result<CMat> {
    let n = m.nrows();
    if n == 0 || m.ncols() != n {
        return Err(FioError::invalid("cholesky: matrix must be square and nonempty"));
    }
    let scale = m.iter().map(|z| z.norm()).fold(0.0, f64::max);
    for i in 0..n {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)].conj()).norm() > 1e-10 * scale.max(1.0) {
                return Err(FioError::invalid("cholesky: matrix is not hermitian"));
            }
        }
    }
    let mut l = CMat::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)].re;
        for k in 0..j {
            d -= l[(j, k)].norm_sqr();
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(FioError::NotPositiveDefinite {
                pivot: j,
                context: None,
            });
        }
        let djj = d.sqrt();
        l[(j, j)] = C64::new(djj, 0.0);
        for i in j + 1..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)].conj();
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Solve L x = b with L lower triangular.
pub fn solve_lower(l: &CMat, b: &CMat) -> CMat {
    let n = l.nrows();
    let mut x = b.clone();
    for col in 0..x.ncols() {
        for i in 0..n {
            let mut s = x[(i, col)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, col)];
            }
            x[(i, col)] = s / l[(i, i)];
        }
    }
    x
}

/// Solve L^* x = b with L lower triangular.
pub fn solve_lower_adjoint(l: &CMat, b: &CMat) -> CMat {
    let n = l.nrows();
    let mut x = b.clone();
    for col in 0..x.ncols() {
        for i in (0..n).rev() {
            let mut s = x[(i, col)];
            for k in i + 1..n {
                s -= l[(k, i)].conj() * x[(k, col)];
            }
            x[(i, col)] = s / l[(i, i)].conj();
        }
    }
    x
}
