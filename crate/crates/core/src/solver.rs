//! End-to-end solver pipeline: butterfly-compress the operator, peel its
//! normal matrix into a hierarchical form, invert that by skeletonization,
//! and compose the pieces into an approximate pseudo-inverse usable either
//! as a direct solver or as a preconditioner for conjugate gradient on the
//! normal equations.

use std::time::Instant;

use crate::butterfly::{
    bf_apply, bf_apply_adjoint, bf_apply_adjoint_block, bf_apply_block, bf_build_with, BfParams,
    ButterflyFactor,
};
use crate::dense::{spectral_norm_est, CMat, CVec};
use crate::error::{FioError, Result};
use crate::hif::{apply_inverse, invert_hmatrix2d, invert_hodlr, InverseFactorization};
use crate::peel::{peel_hmatrix2d, peel_hodlr};
use crate::problem::FioProblem;
use crate::tree::{CellLists, ClusterTree};

/// Tuning knobs for [`build_inverse`].
#[derive(Debug, Clone)]
pub struct BuildParams {
    /// Butterfly compression tolerance.
    pub eps_bff: f64,
    /// Peeling low-rank tolerance (drives the probe rank budget).
    pub eps_peel: f64,
    /// Skeletonization tolerance for the inversion.
    pub eps_hif: f64,
    /// Rank cap for the butterfly blocks.
    pub bf_rank: usize,
    /// Rank cap for the peeled off-diagonal/interaction blocks.
    pub peel_rank: usize,
    /// Extra random probes beyond the rank caps.
    pub oversample: usize,
    /// Target points per leaf for the peeling tree.
    pub leaf_size: usize,
    /// Use the diagonally pre-scaled skeletonization.
    pub scaled_hif: bool,
    pub seed: u64,
}

impl BuildParams {
    pub fn default_for_dim(dim: usize) -> BuildParams {
        if dim == 1 {
            BuildParams {
                eps_bff: 1e-6,
                eps_peel: 1e-8,
                eps_hif: 1e-8,
                bf_rank: 20,
                peel_rank: 40,
                oversample: 10,
                leaf_size: 32,
                scaled_hif: false,
                seed: 0,
            }
        } else {
            BuildParams {
                eps_bff: 1e-6,
                eps_peel: 1e-8,
                eps_hif: 1e-8,
                bf_rank: 30,
                peel_rank: 60,
                oversample: 10,
                leaf_size: 64,
                scaled_hif: false,
                seed: 0,
            }
        }
    }
}

/// Wall-clock seconds spent in each build stage.
#[derive(Debug, Clone, Copy, Default, serde::Serialize, serde::Deserialize)]
pub struct BuildTimings {
    pub butterfly: f64,
    pub peel: f64,
    pub invert: f64,
}

impl BuildTimings {
    pub fn total(&self) -> f64 {
        self.butterfly + self.peel + self.invert
    }
}

/// Composed approximate inverse: the butterfly factor of the operator and
/// the skeletonization inverse of its peeled normal matrix. The approximate
/// solve is `g ∘ adjoint(bf)`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FioInverse {
    pub bf: ButterflyFactor,
    pub g: InverseFactorization,
    /// (eps_bff, eps_peel, eps_hif) the factorization was built with.
    pub tolerances: (f64, f64, f64),
    pub build_timings: BuildTimings,
}

/// Outcome of an iterative or direct solve.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub iterations: usize,
    /// Relative residual after each iteration.
    pub residual_history: Vec<f64>,
    /// Wall-clock seconds spent in the solve.
    pub solve_time: f64,
    /// Relative forward (compression) error, when estimated.
    pub e_a: Option<f64>,
    /// Relative inverse error, when estimated.
    pub e_s: Option<f64>,
    pub converged: bool,
}

fn peel_depth(problem: &FioProblem, leaf_size: usize) -> usize {
    let grid = &problem.grid;
    let max_depth = (grid.n as f64).log2().floor() as usize;
    let mut best = (1usize, f64::INFINITY);
    for l in 1..=max_depth.max(1) {
        let per_leaf = ((grid.n >> l).max(1)).pow(grid.dim as u32);
        let score = ((per_leaf as f64 / leaf_size as f64).ln()).abs();
        if score < best.1 {
            best = (l, score);
        }
    }
    let min_depth = if grid.dim == 2 { 2 } else { 1 };
    best.0.max(min_depth).min(max_depth.max(min_depth))
}

/// Build the full approximate inverse of a discrete Fourier integral
/// operator: butterfly compression, peeling of the normal matrix, and
/// skeletonization-based inversion, with per-stage timings.
pub fn build_inverse(problem: &FioProblem, params: &BuildParams) -> Result<FioInverse> {
    let n = problem.size();
    let dim = problem.grid.dim;

    let t = Instant::now();
    let mut bfp = BfParams::default_for_dim(dim);
    bfp.rank = params.bf_rank;
    bfp.tol = params.eps_bff;
    bfp.oversample = params.oversample;
    if let Ok(d) = std::env::var("BF_DEPTH") {
        bfp.depth = Some(d.parse().unwrap());
    }
    let bf = bf_build_with(problem, &bfp, params.seed).map_err(|e| e.in_stage("butterfly"))?;
    let t_bf = t.elapsed().as_secs_f64();

    // oracle for the normal matrix of the compressed operator
    let apply_s = |block: &CMat| -> CMat {
        let kb = bf_apply_block(&bf, block).expect("dimension-checked apply");
        bf_apply_adjoint_block(&bf, &kb).expect("dimension-checked apply")
    };

    let t = Instant::now();
    let depth = peel_depth(problem, params.leaf_size);
    let tree = ClusterTree::with_depth(&problem.grid, depth).map_err(|e| e.in_stage("peel"))?;
    let peel_seed = params.seed.wrapping_add(1);
    enum Peeled {
        Hodlr(crate::peel::HodlrMatrix),
        H2d(crate::peel::HMatrix2D),
    }
    let peeled = if dim == 1 {
        Peeled::Hodlr(
            peel_hodlr(
                apply_s,
                n,
                &tree,
                params.peel_rank,
                params.oversample,
                peel_seed,
            )
            .map_err(|e| e.in_stage("peel"))?,
        )
    } else {
        let lists: Vec<CellLists> = (1..=tree.levels)
            .map(|l| tree.neighbor_and_interaction_lists(l, true))
            .collect();
        Peeled::H2d(
            peel_hmatrix2d(
                apply_s,
                &tree,
                &lists,
                params.peel_rank,
                params.oversample,
                peel_seed,
            )
            .map_err(|e| e.in_stage("peel"))?,
        )
    };
    let t_peel = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let g = match &peeled {
        Peeled::Hodlr(h) => invert_hodlr(h, params.eps_hif, params.scaled_hif),
        Peeled::H2d(h) => invert_hmatrix2d(h, params.eps_hif, params.scaled_hif),
    }
    .map_err(|e| e.in_stage("invert"))?;
    let t_inv = t.elapsed().as_secs_f64();

    Ok(FioInverse {
        bf,
        g,
        tolerances: (params.eps_bff, params.eps_peel, params.eps_hif),
        build_timings: BuildTimings {
            butterfly: t_bf,
            peel: t_peel,
            invert: t_inv,
        },
    })
}

/// Approximate direct solve of `K f = u` via the pseudo-inverse composition.
pub fn solve_direct(inv: &FioInverse, u: &CVec) -> Result<CVec> {
    if u.len() != inv.bf.n {
        return Err(FioError::DimensionMismatch {
            expected: inv.bf.n,
            got: u.len(),
        });
    }
    let ku = bf_apply_adjoint(&inv.bf, u)?;
    apply_inverse(&inv.g, &ku)
}

/// Preconditioned conjugate gradient for a hermitian positive definite
/// operator. Stops when the relative residual drops below `tol`; the
/// recurrence residual drives the iteration and the final value is verified
/// with an explicit recomputation.
pub fn pcg<A, M>(
    apply_a: A,
    b: &CVec,
    precond: Option<M>,
    tol: f64,
    max_iter: usize,
) -> (CVec, SolveReport)
where
    A: Fn(&CVec) -> CVec,
    M: Fn(&CVec) -> CVec,
{
    let t0 = Instant::now();
    let n = b.len();
    let bnorm = b.norm();
    let mut x = CVec::zeros(n);
    if bnorm == 0.0 {
        return (
            x,
            SolveReport {
                iterations: 0,
                residual_history: Vec::new(),
                solve_time: t0.elapsed().as_secs_f64(),
                e_a: None,
                e_s: None,
                converged: true,
            },
        );
    }
    let prec = |v: &CVec| -> CVec {
        match &precond {
            Some(m) => m(v),
            None => v.clone(),
        }
    };
    let mut r = b.clone();
    let mut z = prec(&r);
    let mut p = z.clone();
    let mut rz = r.dotc(&z).re;
    let mut history = Vec::new();
    let mut converged = false;
    let mut iters = 0;
    for _ in 0..max_iter {
        iters += 1;
        let ap = apply_a(&p);
        let pap = p.dotc(&ap).re;
        if pap <= 0.0 || !pap.is_finite() {
            break;
        }
        let alpha = crate::dense::C64::new(rz / pap, 0.0);
        x += &p * alpha;
        r -= &ap * alpha;
        let rel = r.norm() / bnorm;
        history.push(rel);
        if rel <= tol {
            converged = true;
            break;
        }
        z = prec(&r);
        let rz_new = r.dotc(&z).re;
        let beta = crate::dense::C64::new(rz_new / rz, 0.0);
        rz = rz_new;
        p = &z + &p * beta;
    }
    // explicit verification of the recurrence residual
    let true_rel = (b - apply_a(&x)).norm() / bnorm;
    if let Some(last) = history.last_mut() {
        *last = true_rel;
    } else {
        history.push(true_rel);
    }
    converged = converged && true_rel <= tol;
    (
        x,
        SolveReport {
            iterations: iters,
            residual_history: history,
            solve_time: t0.elapsed().as_secs_f64(),
            e_a: None,
            e_s: None,
            converged,
        },
    )
}

/// Which preconditioner [`solve_pcg`] uses on the normal equations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preconditioner {
    /// The full approximate inverse of the normal matrix.
    Inverse,
    /// Adjoint-only baseline: plain CG on the normal equations.
    Adjoint,
}

/// Iterative solve of `K f = u`: CG on the normal equations of the
/// compressed operator, optionally preconditioned by the skeletonization
/// inverse.
pub fn solve_pcg(
    inv: &FioInverse,
    u: &CVec,
    precond: Preconditioner,
    tol: f64,
    max_iter: usize,
) -> Result<(CVec, SolveReport)> {
    if u.len() != inv.bf.n {
        return Err(FioError::DimensionMismatch {
            expected: inv.bf.n,
            got: u.len(),
        });
    }
    let rhs = bf_apply_adjoint(&inv.bf, u)?;
    let apply_a = |v: &CVec| -> CVec {
        let kv = bf_apply(&inv.bf, v).expect("dimension-checked apply");
        bf_apply_adjoint(&inv.bf, &kv).expect("dimension-checked apply")
    };
    let m = match precond {
        Preconditioner::Inverse => Some(|v: &CVec| -> CVec {
            apply_inverse(&inv.g, v).expect("dimension-checked apply")
        }),
        Preconditioner::Adjoint => None,
    };
    Ok(pcg(apply_a, &rhs, m, tol, max_iter))
}

/// Estimate the relative compression error `e_a` of the butterfly factor and
/// the relative inverse error `e_s` of the composed pseudo-inverse, both by
/// randomized spectral-norm estimation against the dense operator apply.
pub fn estimate_errors(problem: &FioProblem, inv: &FioInverse, seed: u64) -> Result<(f64, f64)> {
    let n = problem.size();
    // Each power iteration needs the exact operator; below this size it is
    // far cheaper to assemble it once than to re-evaluate the oscillatory
    // kernel entrywise on every application.
    let cached = if n <= 6000 {
        Some(problem.assemble_dense())
    } else {
        None
    };
    let kv = |v: &CVec| match &cached {
        Some(k) => k * v,
        None => problem.apply_dense(v),
    };
    let kadj_v = |v: &CVec| match &cached {
        Some(k) => k.adjoint() * v,
        None => problem.apply_dense_adjoint(v),
    };
    let knorm = spectral_norm_est(|v| kv(v), |v| kadj_v(v), n, 1e-2, seed)?.value;
    let e_a = spectral_norm_est(
        |v| kv(v) - bf_apply(&inv.bf, v).expect("dimension-checked apply"),
        |v| kadj_v(v) - bf_apply_adjoint(&inv.bf, v).expect("dimension-checked apply"),
        n,
        1e-2,
        seed.wrapping_add(1),
    )?
    .value
        / knorm;
    let e_s = spectral_norm_est(
        |v| {
            let gk = apply_inverse(
                &inv.g,
                &bf_apply_adjoint(&inv.bf, &kv(v)).expect("dimension-checked apply"),
            )
            .expect("dimension-checked apply");
            v - gk
        },
        |v| {
            let gv = apply_inverse(&inv.g, v).expect("dimension-checked apply");
            let kg = bf_apply(&inv.bf, &gv).expect("dimension-checked apply");
            v - kadj_v(&kg)
        },
        n,
        1e-2,
        seed.wrapping_add(2),
    )?
    .value;
    Ok((e_a, e_s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{gaussian_matrix, rng_from_seed, C64};

    fn random_vec(n: usize, seed: u64) -> CVec {
        let mut rng = rng_from_seed(seed);
        CVec::from_column_slice(gaussian_matrix(n, 1, &mut rng).as_slice())
    }

    fn tight_params_1d() -> BuildParams {
        let mut p = BuildParams::default_for_dim(1);
        p.eps_bff = 1e-9;
        p.eps_hif = 1e-9;
        p.bf_rank = 40;
        p.peel_rank = 50;
        p.seed = 7;
        p
    }

    #[test]
    fn pcg_identity_converges_in_one_iteration() {
        let b = random_vec(16, 1);
        let (x, rep) = pcg(|v| v.clone(), &b, None::<fn(&CVec) -> CVec>, 1e-12, 50);
        assert!(rep.converged);
        assert_eq!(rep.iterations, 1);
        assert!((&x - &b).norm() <= 1e-12 * b.norm());
    }

    #[test]
    fn pcg_diagonal_finite_termination() {
        let n = 10;
        let b = random_vec(n, 2);
        let apply = |v: &CVec| {
            let mut w = v.clone();
            for i in 0..n {
                w[i] *= C64::new((i + 1) as f64, 0.0);
            }
            w
        };
        let (x, rep) = pcg(apply, &b, None::<fn(&CVec) -> CVec>, 1e-10, 20);
        assert!(rep.converged, "history {:?}", rep.residual_history);
        assert!(rep.iterations <= 10);
        for i in 0..n {
            let expect = b[i] / C64::new((i + 1) as f64, 0.0);
            assert!((x[i] - expect).norm() <= 1e-8);
        }
    }

    #[test]
    fn pcg_zero_rhs_returns_zero() {
        let (x, rep) = pcg(
            |v| v.clone(),
            &CVec::zeros(8),
            None::<fn(&CVec) -> CVec>,
            1e-10,
            10,
        );
        assert!(rep.converged);
        assert_eq!(rep.iterations, 0);
        assert_eq!(x.norm(), 0.0);
    }

    #[test]
    fn pcg_error_decreases_in_energy_norm() {
        let n = 24;
        let mut rng = rng_from_seed(3);
        let bmat = gaussian_matrix(n, n, &mut rng);
        let a = &bmat * bmat.adjoint() + CMat::identity(n, n);
        let b = random_vec(n, 4);
        let x_exact = a.clone().lu().solve(&b).unwrap();
        let mut prev = f64::INFINITY;
        for k in 1..=12 {
            let (x, _) = pcg(|v| &a * v, &b, None::<fn(&CVec) -> CVec>, 1e-30, k);
            let e = &x_exact - &x;
            let enorm = e.dotc(&(&a * &e)).re.max(0.0).sqrt();
            assert!(
                enorm <= prev * (1.0 + 1e-10),
                "energy-norm error grew at iteration {k}: {enorm} > {prev}"
            );
            prev = enorm;
        }
    }

    #[test]
    fn direct_solve_and_round_trip() {
        let p = FioProblem::uniform_1d(64).unwrap();
        let inv = build_inverse(&p, &tight_params_1d()).unwrap();
        let (_, e_s) = estimate_errors(&p, &inv, 9).unwrap();
        let f = random_vec(64, 10);
        let u = p.apply_dense(&f);
        let fhat = solve_direct(&inv, &u).unwrap();
        let rel = (&fhat - &f).norm() / f.norm();
        assert!(rel <= 10.0 * e_s.max(1e-12), "rel {rel} vs e_s {e_s}");
        // round trip through the compressed operator
        let u2 = bf_apply(&inv.bf, &fhat).unwrap();
        assert!((&u2 - &u).norm() / u.norm() <= 10.0 * e_s.max(1e-12));
        // zero right-hand side
        let z = solve_direct(&inv, &CVec::zeros(64)).unwrap();
        assert_eq!(z.norm(), 0.0);
    }

    #[test]
    fn build_inverse_dense_oracle_64() {
        let p = FioProblem::uniform_1d(64).unwrap();
        let inv = build_inverse(&p, &tight_params_1d()).unwrap();
        assert!(inv.build_timings.butterfly > 0.0);
        assert!(inv.build_timings.peel > 0.0);
        assert!(inv.build_timings.invert > 0.0);
        let k = p.assemble_dense();
        let n = 64;
        let mut resid = CMat::zeros(n, n);
        for j in 0..n {
            let kcol = CVec::from_column_slice(k.column(j).as_slice());
            let gk = solve_direct(&inv, &kcol).unwrap();
            let mut e = CVec::zeros(n);
            e[j] = C64::new(1.0, 0.0);
            resid.set_column(j, &(e - gk));
        }
        let err = crate::dense::spectral_norm_dense(&resid, 1e-3, 11);
        assert!(err < 1e-4, "|I - G K'* K| = {err}");
    }

    #[test]
    fn estimator_reports_small_errors_at_tight_tolerance() {
        let p = FioProblem::uniform_1d(64).unwrap();
        let inv = build_inverse(&p, &tight_params_1d()).unwrap();
        let (e_a, e_s) = estimate_errors(&p, &inv, 12).unwrap();
        assert!(e_a < 1e-6, "e_a = {e_a}");
        assert!(e_s < 1e-5, "e_s = {e_s}");
    }

    #[test]
    fn preconditioner_beats_adjoint_baseline() {
        let p = FioProblem::uniform_1d(256).unwrap();
        let mut params = BuildParams::default_for_dim(1);
        params.eps_bff = 1e-6;
        params.eps_hif = 1e-6;
        params.seed = 13;
        let inv = build_inverse(&p, &params).unwrap();
        let u = random_vec(256, 14);
        let (x_inv, rep_inv) = solve_pcg(&inv, &u, Preconditioner::Inverse, 1e-8, 5000).unwrap();
        let (x_adj, rep_adj) = solve_pcg(&inv, &u, Preconditioner::Adjoint, 1e-8, 5000).unwrap();
        assert!(rep_inv.converged, "history {:?}", rep_inv.residual_history);
        assert!(rep_adj.converged);
        assert!(
            rep_inv.iterations < rep_adj.iterations,
            "inverse {} vs adjoint {}",
            rep_inv.iterations,
            rep_adj.iterations
        );
        // both solve the same normal equations
        assert!((&x_inv - &x_adj).norm() <= 1e-5 * x_adj.norm().max(1.0));
    }

    #[test]
    fn solve_rejects_wrong_length() {
        let p = FioProblem::uniform_1d(64).unwrap();
        let inv = build_inverse(&p, &tight_params_1d()).unwrap();
        assert!(matches!(
            solve_direct(&inv, &CVec::zeros(32)),
            Err(FioError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            solve_pcg(&inv, &CVec::zeros(32), Preconditioner::Inverse, 1e-8, 10),
            Err(FioError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn build_inverse_2d_small() {
        let p = FioProblem::ellipse_2d(16).unwrap();
        let mut params = BuildParams::default_for_dim(2);
        params.eps_bff = 1e-9;
        params.eps_hif = 1e-8;
        params.bf_rank = 60;
        params.peel_rank = 40;
        params.leaf_size = 16;
        params.seed = 15;
        let inv = build_inverse(&p, &params).unwrap();
        let (e_a, e_s) = estimate_errors(&p, &inv, 16).unwrap();
        assert!(e_a < 1e-4, "e_a = {e_a}");
        assert!(e_s < 1e-3, "e_s = {e_s}");
        let f = random_vec(256, 17);
        let u = p.apply_dense(&f);
        let fhat = solve_direct(&inv, &u).unwrap();
        let rel = (&fhat - &f).norm() / f.norm();
        assert!(rel <= 10.0 * e_s.max(1e-12), "rel {rel} vs e_s {e_s}");
    }
}
