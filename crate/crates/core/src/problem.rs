//! Discrete FIO problem definitions: Cartesian spatial/frequency grids, the
//! benchmark phase and amplitude functions, entrywise/block kernel evaluation
//! and the discrete Fourier transform pair used by the solver pipeline.

use num_complex::Complex;
use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::dense::{C64, CMat, CVec};
use crate::error::{FioError, Result};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Paired spatial and frequency Cartesian grids with n points per dimension.
///
/// Spatial points live on [0,1)^d, frequency points on the integer lattice
/// [-n/2, n/2)^d. Both are stored in row-major order over the per-dimension
/// indices, so index `i1 * n + i2` in 2D.
#[derive(Debug, Clone)]
pub struct Grid {
    pub dim: usize,
    pub n: usize,
    pub spatial_points: Vec<[f64; 2]>,
    pub freq_points: Vec<[i64; 2]>,
}

impl Grid {
    pub fn new(dim: usize, n: usize) -> Result<Grid> {
        if dim != 1 && dim != 2 {
            return Err(FioError::invalid("grid dimension must be 1 or 2"));
        }
        if n % 2 != 0 || n < 4 {
            return Err(FioError::invalid("points per dimension must be even and >= 4"));
        }
        let half = (n / 2) as i64;
        let (spatial_points, freq_points) = if dim == 1 {
            (
                (0..n).map(|i| [i as f64 / n as f64, 0.0]).collect(),
                (0..n).map(|j| [j as i64 - half, 0]).collect(),
            )
        } else {
            let mut xs = Vec::with_capacity(n * n);
            let mut fs = Vec::with_capacity(n * n);
            for a in 0..n {
                for b in 0..n {
                    xs.push([a as f64 / n as f64, b as f64 / n as f64]);
                    fs.push([a as i64 - half, b as i64 - half]);
                }
            }
            (xs, fs)
        };
        Ok(Grid {
            dim,
            n,
            spatial_points,
            freq_points,
        })
    }

    /// Total number of DOFs, n^dim.
    pub fn size(&self) -> usize {
        self.n.pow(self.dim as u32)
    }
}

/// Analytic kernel definition: phase and amplitude evaluated at (x, xi).
#[derive(Debug, Clone)]
pub enum Kernel {
    /// 1D phase x*xi + c(x)|xi| with c(x) = (2 + sin(2 pi x)) / 8 and constant
    /// amplitude.
    Uniform1d { amplitude: f64 },
    /// Same 1D phase with a periodic Gaussian-mixture amplitude. Frequencies
    /// are mapped to [0,1) via xi/n + 1/2 before entering the mixture so the
    /// amplitude is scale invariant in n.
    Gauss1d {
        sigma2: f64,
        centers: Vec<(f64, f64)>,
        floor: f64,
    },
    /// 2D ellipse-integration phase x.xi + sqrt(c1^2 xi1^2 + c2^2 xi2^2) with
    /// unit amplitude.
    Ellipse2d,
}

/// A discrete FIO problem: grid plus analytic phase/amplitude, defining the
/// dense kernel matrix K entrywise as a(x, xi) e^{2 pi i Phi(x, xi)}.
#[derive(Debug, Clone)]
pub struct FioProblem {
    pub grid: Grid,
    pub kernel: Kernel,
    pub label: String,
}

fn c_1d(x: f64) -> f64 {
    (2.0 + (TWO_PI * x).sin()) / 8.0
}

/// Distance on the unit circle.
fn torus_dist(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

impl FioProblem {
    /// 1D benchmark problem with uniform amplitude.
    pub fn uniform_1d(n: usize) -> Result<FioProblem> {
        Ok(FioProblem {
            grid: Grid::new(1, n)?,
            kernel: Kernel::Uniform1d { amplitude: 1.0 },
            label: "uniform1d".into(),
        })
    }

    /// 1D problem with Gaussian-mixture amplitude. `floor` keeps the
    /// amplitude bounded away from zero so K stays invertible.
    pub fn gaussian_1d(
        n: usize,
        sigma2: f64,
        centers: Vec<(f64, f64)>,
        floor: f64,
    ) -> Result<FioProblem> {
        if sigma2 <= 0.0 {
            return Err(FioError::invalid("sigma2 must be positive"));
        }
        if centers.is_empty() {
            return Err(FioError::invalid("at least one Gaussian center required"));
        }
        Ok(FioProblem {
            grid: Grid::new(1, n)?,
            kernel: Kernel::Gauss1d {
                sigma2,
                centers,
                floor,
            },
            label: "gauss1d".into(),
        })
    }

    /// Default Gaussian amplitude: a single bump centered in [0,1)^2 with
    /// no floor. The amplitude decays to `exp(-1/(2 sigma2))` at the far
    /// corner of the torus, so the operator becomes increasingly
    /// ill-conditioned as `sigma2` shrinks; this is the stress case for
    /// preconditioning.
    pub fn gaussian_1d_default(n: usize, sigma2: f64) -> Result<FioProblem> {
        FioProblem::gaussian_1d(n, sigma2, vec![(0.5, 0.5)], 0.0)
    }

    /// 2D generalized Radon transform problem (integration over ellipses).
    pub fn ellipse_2d(n: usize) -> Result<FioProblem> {
        Ok(FioProblem {
            grid: Grid::new(2, n)?,
            kernel: Kernel::Ellipse2d,
            label: "ellipse2d".into(),
        })
    }

    pub fn size(&self) -> usize {
        self.grid.size()
    }

    pub fn phase(&self, x: [f64; 2], xi: [i64; 2]) -> f64 {
        match &self.kernel {
            Kernel::Uniform1d { .. } | Kernel::Gauss1d { .. } => {
                let xi0 = xi[0] as f64;
                x[0] * xi0 + c_1d(x[0]) * xi0.abs()
            }
            Kernel::Ellipse2d => {
                let (x1, x2) = (x[0], x[1]);
                let (f1, f2) = (xi[0] as f64, xi[1] as f64);
                let c1 = (2.0 + (TWO_PI * x1).sin() * (TWO_PI * x2).sin()) / 16.0;
                let c2 = (2.0 + (TWO_PI * x1).cos() * (TWO_PI * x2).cos()) / 16.0;
                x1 * f1 + x2 * f2 + (c1 * c1 * f1 * f1 + c2 * c2 * f2 * f2).sqrt()
            }
        }
    }

    pub fn amplitude(&self, x: [f64; 2], xi: [i64; 2]) -> f64 {
        match &self.kernel {
            Kernel::Uniform1d { amplitude } => *amplitude,
            Kernel::Ellipse2d => 1.0,
            Kernel::Gauss1d {
                sigma2,
                centers,
                floor,
            } => {
                let x0 = x[0].rem_euclid(1.0);
                let xi_mapped = xi[0] as f64 / self.grid.n as f64 + 0.5;
                let mut a = *floor;
                for &(xk, fk) in centers {
                    let dx = torus_dist(x0, xk);
                    let df = torus_dist(xi_mapped.rem_euclid(1.0), fk);
                    a += (-(dx * dx + df * df) / sigma2).exp();
                }
                a
            }
        }
    }

    /// Kernel matrix entry K[i, j] = a(x_i, xi_j) e^{2 pi i Phi(x_i, xi_j)}.
    pub fn entry(&self, i: usize, j: usize) -> C64 {
        let x = self.grid.spatial_points[i];
        let xi = self.grid.freq_points[j];
        let a = self.amplitude(x, xi);
        Complex::from_polar(a, TWO_PI * self.phase(x, xi))
    }

    /// Assemble the dense block of K restricted to `row_idx` x `col_idx`.
    pub fn assemble_block(&self, row_idx: &[usize], col_idx: &[usize]) -> Result<CMat> {
        let nt = self.size();
        if row_idx.iter().chain(col_idx.iter()).any(|&i| i >= nt) {
            return Err(FioError::invalid("assemble_block: index out of range"));
        }
        let rows = row_idx.len();
        let cols = col_idx.len();
        let mut data = vec![C64::new(0.0, 0.0); rows * cols];
        if rows * cols >= 1 << 14 {
            data.par_chunks_mut(rows)
                .zip(col_idx.par_iter())
                .for_each(|(chunk, &j)| {
                    for (r, &i) in row_idx.iter().enumerate() {
                        chunk[r] = self.entry(i, j);
                    }
                });
        } else {
            for (c, &j) in col_idx.iter().enumerate() {
                for (r, &i) in row_idx.iter().enumerate() {
                    data[c * rows + r] = self.entry(i, j);
                }
            }
        }
        Ok(CMat::from_vec(rows, cols, data))
    }

    /// Dense K for small problems (oracle use only).
    pub fn assemble_dense(&self) -> CMat {
        let nt = self.size();
        let all: Vec<usize> = (0..nt).collect();
        self.assemble_block(&all, &all).unwrap()
    }

    /// y = K v by direct O(N^2) assembly-on-the-fly (oracle use only).
    pub fn apply_dense(&self, v: &CVec) -> CVec {
        let nt = self.size();
        assert_eq!(v.len(), nt);
        let mut out = vec![C64::new(0.0, 0.0); nt];
        out.par_iter_mut().enumerate().for_each(|(i, yi)| {
            let mut s = C64::new(0.0, 0.0);
            for j in 0..nt {
                s += self.entry(i, j) * v[j];
            }
            *yi = s;
        });
        CVec::from_vec(out)
    }

    /// y = K^* v by direct assembly-on-the-fly (oracle use only).
    pub fn apply_dense_adjoint(&self, v: &CVec) -> CVec {
        let nt = self.size();
        assert_eq!(v.len(), nt);
        let mut out = vec![C64::new(0.0, 0.0); nt];
        out.par_iter_mut().enumerate().for_each(|(j, yj)| {
            let mut s = C64::new(0.0, 0.0);
            for i in 0..nt {
                s += self.entry(i, j).conj() * v[i];
            }
            *yj = s;
        });
        CVec::from_vec(out)
    }
}

/// Forward discrete Fourier transform on a grid:
/// f_hat(xi) = n^{-d} sum_x e^{-2 pi i x.xi} f(x), returned in the grid's
/// frequency ordering (xi = k - n/2 per dimension).
pub fn apply_dft(f: &CVec, grid: &Grid) -> Result<CVec> {
    transform(f, grid, true)
}

/// Inverse of [`apply_dft`]: f(x) = sum_xi e^{2 pi i x.xi} f_hat(xi).
pub fn apply_inverse_dft(f_hat: &CVec, grid: &Grid) -> Result<CVec> {
    transform(f_hat, grid, false)
}

fn transform(v: &CVec, grid: &Grid, forward: bool) -> Result<CVec> {
    let nt = grid.size();
    if v.len() != nt {
        return Err(FioError::DimensionMismatch {
            expected: nt,
            got: v.len(),
        });
    }
    let n = grid.n;
    let mut planner = FftPlanner::<f64>::new();
    let fft = if forward {
        planner.plan_fft_forward(n)
    } else {
        planner.plan_fft_inverse(n)
    };
    let sign = |m: usize| if m % 2 == 0 { 1.0 } else { -1.0 };
    let mut buf: Vec<C64> = v.iter().cloned().collect();

    // The grid's frequency coordinate is shifted by n/2 relative to the FFT's
    // natural ordering; the shift becomes a (-1)^m twiddle in space.
    let run_dim = |data: &mut [C64], stride: usize, count: usize| {
        let mut line = vec![C64::new(0.0, 0.0); n];
        for c in 0..count {
            let base = (c / stride) * stride * n + (c % stride);
            for (k, slot) in line.iter_mut().enumerate() {
                *slot = data[base + k * stride];
            }
            if forward {
                for (m, slot) in line.iter_mut().enumerate() {
                    *slot *= sign(m);
                }
                fft.process(&mut line);
                for slot in line.iter_mut() {
                    *slot /= n as f64;
                }
            } else {
                fft.process(&mut line);
                for (m, slot) in line.iter_mut().enumerate() {
                    *slot *= sign(m);
                }
            }
            for (k, slot) in line.iter().enumerate() {
                data[base + k * stride] = *slot;
            }
        }
    };

    if grid.dim == 1 {
        run_dim(&mut buf, 1, 1);
    } else {
        // second coordinate is contiguous (stride 1), first has stride n
        run_dim(&mut buf, 1, n); // transform along coordinate 2 for each row
        run_dim(&mut buf, n, n); // transform along coordinate 1 for each col
    }
    Ok(CVec::from_vec(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::rng_from_seed;
    use rand::Rng;

    #[test]
    fn grid_layout_1d() {
        let p = FioProblem::uniform_1d(8).unwrap();
        assert_eq!(p.grid.spatial_points[0], [0.0, 0.0]);
        assert_eq!(p.grid.freq_points[0], [-4, 0]);
        assert_eq!(p.grid.freq_points[7], [3, 0]);
    }

    #[test]
    fn uniform_phase_hand_values() {
        let p = FioProblem::uniform_1d(8).unwrap();
        // x = 0, xi = 4: c(0) = 0.25, Phi = 0*4 + 0.25*4 = 1, K = e^{2 pi i} = 1
        let phi = p.phase([0.0, 0.0], [4, 0]);
        assert!((phi - 1.0).abs() < 1e-14);
        let k = Complex::from_polar(1.0, TWO_PI * phi);
        assert!((k - C64::new(1.0, 0.0)).norm() < 1e-12);
        // zero frequency
        assert_eq!(p.phase([0.0, 0.0], [0, 0]), 0.0);
        assert!((p.entry(0, 4) - C64::new(1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn uniform_entries_unit_modulus() {
        let p = FioProblem::uniform_1d(8).unwrap();
        let k = p.assemble_dense();
        for z in k.iter() {
            assert!((z.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_n_rejected() {
        assert!(FioProblem::uniform_1d(9).is_err());
        assert!(FioProblem::ellipse_2d(10).is_ok());
        assert!(FioProblem::ellipse_2d(7).is_err());
    }

    #[test]
    fn gaussian_peak_and_superposition() {
        let n = 16;
        let p = FioProblem::gaussian_1d(n, 0.1, vec![(0.5, 0.5)], 1.0).unwrap();
        // at x = 0.5 and the frequency mapping to 0.5 (xi = 0), a = floor + 1
        let a = p.amplitude([0.5, 0.0], [0, 0]);
        assert!((a - 2.0).abs() < 1e-14);
        let p2 = FioProblem::gaussian_1d(n, 0.1, vec![(0.5, 0.5), (0.5, 0.5)], 1.0).unwrap();
        let a2 = p2.amplitude([0.5, 0.0], [0, 0]);
        assert!((a2 - 3.0).abs() < 1e-14);
    }

    #[test]
    fn gaussian_three_sigma_decay() {
        let sigma2: f64 = 0.01;
        let sigma = sigma2.sqrt();
        let p = FioProblem::gaussian_1d(16, sigma2, vec![(0.5, 0.5)], 1.0).unwrap();
        // move 3 sigma away in x only, frequency pinned at the center
        let a = p.amplitude([0.5 + 3.0 * sigma, 0.0], [0, 0]);
        assert!((a - (1.0 + (-9.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn gaussian_amplitude_periodic_in_x() {
        let p = FioProblem::gaussian_1d_default(16, 0.1).unwrap();
        for xi in [-8i64, -3, 0, 5] {
            let a0 = p.amplitude([0.3, 0.0], [xi, 0]);
            let a1 = p.amplitude([1.3, 0.0], [xi, 0]);
            assert!((a0 - a1).abs() < 1e-13);
        }
    }

    #[test]
    fn gaussian_validation() {
        assert!(FioProblem::gaussian_1d(16, 0.0, vec![(0.5, 0.5)], 1.0).is_err());
        assert!(FioProblem::gaussian_1d(16, 0.1, vec![], 1.0).is_err());
    }

    #[test]
    fn ellipse_coefficients_at_origin() {
        let p = FioProblem::ellipse_2d(8).unwrap();
        // c1(0) = 2/16, c2(0) = 3/16
        assert_eq!(p.phase([0.0, 0.0], [0, 0]), 0.0);
        let phi = p.phase([0.0, 0.0], [1, 0]);
        assert!((phi - 0.125).abs() < 1e-14);
        let phi2 = p.phase([0.0, 0.0], [0, 1]);
        assert!((phi2 - 3.0 / 16.0).abs() < 1e-14);
    }

    #[test]
    fn assemble_block_basics() {
        let p = FioProblem::uniform_1d(8).unwrap();
        // 1x1 block at x=0 (row 0), xi=0 (col 4)
        let b = p.assemble_block(&[0], &[4]).unwrap();
        assert!((b[(0, 0)] - C64::new(1.0, 0.0)).norm() < 1e-12);
        assert!(p.assemble_block(&[9], &[0]).is_err());
    }

    #[test]
    fn assemble_block_consistent_with_submatrix() {
        let p = FioProblem::uniform_1d(8).unwrap();
        let full = p.assemble_dense();
        let rows = [1usize, 3, 6];
        let cols = [0usize, 2, 7];
        let blk = p.assemble_block(&rows, &cols).unwrap();
        for (r, &i) in rows.iter().enumerate() {
            for (c, &j) in cols.iter().enumerate() {
                assert_eq!(blk[(r, c)], full[(i, j)]);
            }
        }
    }

    #[test]
    fn dense_apply_matches_assembled() {
        let p = FioProblem::uniform_1d(8).unwrap();
        let k = p.assemble_dense();
        let mut rng = rng_from_seed(5);
        let v = CVec::from_fn(8, |_, _| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
        assert!((p.apply_dense(&v) - &k * &v).norm() < 1e-12);
        assert!((p.apply_dense_adjoint(&v) - k.adjoint() * &v).norm() < 1e-12);
    }

    #[test]
    fn dft_delta_round_trip() {
        let g = Grid::new(1, 8).unwrap();
        let mut delta = CVec::zeros(8);
        delta[0] = C64::new(1.0, 0.0);
        let hat = apply_dft(&delta, &g).unwrap();
        let back = apply_inverse_dft(&hat, &g).unwrap();
        assert!((back - &delta).norm() < 1e-12);
    }

    #[test]
    fn dft_constant_is_zero_frequency_spike() {
        let n = 8;
        let g = Grid::new(1, n).unwrap();
        let f = CVec::from_element(n, C64::new(1.0, 0.0));
        let hat = apply_dft(&f, &g).unwrap();
        // xi = 0 lives at index n/2
        assert!((hat[n / 2] - C64::new(1.0, 0.0)).norm() < 1e-12);
        for k in 0..n {
            if k != n / 2 {
                assert!(hat[k].norm() < 1e-12);
            }
        }
        let back = apply_inverse_dft(&hat, &g).unwrap();
        assert!((back - &f).norm() < 1e-12);
    }

    #[test]
    fn dft_matches_direct_sum_1d() {
        let n = 8;
        let g = Grid::new(1, n).unwrap();
        let mut rng = rng_from_seed(9);
        let f = CVec::from_fn(n, |_, _| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
        let hat = apply_dft(&f, &g).unwrap();
        for (k, xi) in g.freq_points.iter().enumerate() {
            let mut s = C64::new(0.0, 0.0);
            for (m, x) in g.spatial_points.iter().enumerate() {
                s += Complex::from_polar(1.0, -TWO_PI * x[0] * xi[0] as f64) * f[m];
            }
            s /= n as f64;
            assert!((hat[k] - s).norm() < 1e-12, "mismatch at k={k}");
        }
    }

    #[test]
    fn dft_round_trip_random() {
        for (dim, n) in [(1usize, 64usize), (2, 8)] {
            let g = Grid::new(dim, n).unwrap();
            let nt = g.size();
            let mut rng = rng_from_seed(11);
            let f = CVec::from_fn(nt, |_, _| {
                C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
            });
            let hat = apply_dft(&f, &g).unwrap();
            let back = apply_inverse_dft(&hat, &g).unwrap();
            assert!((back - &f).norm() < 1e-12);
        }
    }

    #[test]
    fn dft_matches_direct_sum_2d() {
        let n = 4;
        let g = Grid::new(2, n).unwrap();
        let nt = g.size();
        let mut rng = rng_from_seed(13);
        let f = CVec::from_fn(nt, |_, _| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
        let hat = apply_dft(&f, &g).unwrap();
        for (k, xi) in g.freq_points.iter().enumerate() {
            let mut s = C64::new(0.0, 0.0);
            for (m, x) in g.spatial_points.iter().enumerate() {
                let dot = x[0] * xi[0] as f64 + x[1] * xi[1] as f64;
                s += Complex::from_polar(1.0, -TWO_PI * dot) * f[m];
            }
            s /= nt as f64;
            assert!((hat[k] - s).norm() < 1e-12);
        }
    }

    #[test]
    fn dft_length_mismatch() {
        let g = Grid::new(1, 8).unwrap();
        let v = CVec::zeros(7);
        assert!(apply_inverse_dft(&v, &g).is_err());
    }
}
