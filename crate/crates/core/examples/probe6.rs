use fio_core::butterfly::bf_apply_adjoint;
use fio_core::hif::apply_inverse;
use fio_core::problem::FioProblem;
use fio_core::solver::{build_inverse, BuildParams};
use nalgebra::DVector;
use num_complex::Complex64;
use std::time::Instant;

fn main() {
    let sizes: Vec<usize> = std::env::args()
        .skip(1)
        .map(|s| s.parse().unwrap())
        .collect();
    for (k, &n) in sizes.iter().enumerate() {
        let p = if std::env::var("UNIFORM").is_ok() {
            FioProblem::uniform_1d(n).unwrap()
        } else {
            FioProblem::gaussian_1d_default(n, 0.1).unwrap()
        };
        let mut params = BuildParams::default_for_dim(1);
        params.eps_bff = 1e-6;
        params.eps_hif = 1e-3;
        if let Ok(e) = std::env::var("EPS_BFF") {
            params.eps_bff = e.parse().unwrap();
        }
        if let Ok(o) = std::env::var("OS") {
            params.oversample = o.parse().unwrap();
        }
        if let Ok(r) = std::env::var("PEEL_RANK") {
            params.peel_rank = r.parse().unwrap();
        }
        if let Ok(r) = std::env::var("BF_RANK") {
            params.bf_rank = r.parse().unwrap();
        }
        if let Ok(e) = std::env::var("EPS_PEEL") {
            params.eps_peel = e.parse().unwrap();
        }
        params.seed = 601 + k as u64;
        let t0 = Instant::now();
        let inv = build_inverse(&p, &params).unwrap();
        let build = t0.elapsed().as_secs_f64();
        let u = DVector::from_fn(n, |i, _| {
            Complex64::new((i as f64 * 0.7).sin(), (i as f64 * 1.3).cos())
        });
        let w = bf_apply_adjoint(&inv.bf, &u).unwrap();
        let _ = apply_inverse(&inv.g, &w).unwrap();
        let t0 = Instant::now();
        let w = bf_apply_adjoint(&inv.bf, &u).unwrap();
        let t_bf = t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        let _ = apply_inverse(&inv.g, &w).unwrap();
        let t_g = t0.elapsed().as_secs_f64();
        eprintln!(
            "N={n}: build {build:.2}s bf_adj {t_bf:.4}s g_apply {t_g:.4}s midrank {} bfnnz {} root {} factors {} nnz {}",
            inv.bf.max_mid_rank(),
            inv.bf.nnz(),
            inv.g.root_indices.len(),
            inv.g.factors.len(),
            inv.g.nnz()
        );
        let (up, vp) = inv.bf.tower_profiles();
        eprintln!("  u stages (nnz,maxrank): {up:?}");
        eprintln!("  v stages (nnz,maxrank): {vp:?}");
    }
}
