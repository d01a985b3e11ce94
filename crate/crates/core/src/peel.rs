//! Matrix-free peeling: reconstruct a hierarchical representation of a
//! hermitian operator S (here S = K̇*K̇) from matvec probes only.
//!
//! In 1D the output is a HODLR matrix: per level, the sibling off-diagonal
//! blocks in low-rank form, plus dense leaf diagonal blocks. In 2D it is a
//! strongly admissible H-matrix: per level, low-rank factors for all
//! interaction-list pairs, plus dense leaf near-field blocks. Each level's
//! probes subtract the already peeled levels before recovery, and cells are
//! probed in groups (even/odd siblings in 1D, the 8x8 congruence coloring in
//! 2D) chosen so grouped cells cannot contaminate each other's sketches.

use std::collections::HashMap;

use crate::dense::{
    derive_seed, gaussian_matrix, lowrank_from_sketches, rng_from_seed, CMat, CVec, C64,
    LowRankFactor,
};
use crate::error::{FioError, Result};
use crate::tree::{CellLists, ClusterTree};

/// HODLR approximation of a hermitian matrix: only the lower sibling block
/// of each pair is stored; the upper block is its conjugate transpose.
#[derive(Debug, Clone)]
pub struct HodlrMatrix {
    pub tree: ClusterTree,
    /// offdiag[l-1][p]: factor for block (cell 2p+1, cell 2p) at level l.
    pub offdiag: Vec<Vec<LowRankFactor>>,
    /// Dense leaf diagonal blocks, hermitized.
    pub diag: Vec<CMat>,
    pub warnings: Vec<String>,
}

/// Strong-admissibility H-matrix for a hermitian operator on a quad tree.
#[derive(Debug, Clone)]
pub struct HMatrix2D {
    pub tree: ClusterTree,
    /// Neighbor/interaction lists per level (index l-1 for level l).
    pub lists: Vec<CellLists>,
    /// lowrank[l-2][(i, j)] with i < j, j in IL(i): factor for the block
    /// (rows cell i, cols cell j) at level l; (j, i) is its adjoint.
    pub lowrank: Vec<HashMap<(usize, usize), LowRankFactor>>,
    /// Dense leaf blocks for (i, j) with i <= j, j in NL(i).
    pub nearfield: HashMap<(usize, usize), CMat>,
    pub warnings: Vec<String>,
}

fn gather_rows(x: &CMat, idx: &[usize]) -> CMat {
    let mut out = CMat::zeros(idx.len(), x.ncols());
    for (p, &g) in idx.iter().enumerate() {
        for c in 0..x.ncols() {
            out[(p, c)] = x[(g, c)];
        }
    }
    out
}

fn scatter_add(dst: &mut CMat, idx: &[usize], src: &CMat) {
    for (p, &g) in idx.iter().enumerate() {
        for c in 0..src.ncols() {
            dst[(g, c)] += src[(p, c)];
        }
    }
}

/// Contribution of the stored HODLR levels (no diagonal) to S * x.
fn hodlr_levels_apply(tree: &ClusterTree, levels: &[Vec<LowRankFactor>], x: &CMat) -> CMat {
    let mut out = CMat::zeros(x.nrows(), x.ncols());
    for (li, factors) in levels.iter().enumerate() {
        let l = li + 1;
        let cells = tree.cells_at(l);
        for (p, f) in factors.iter().enumerate() {
            let lo = &cells[2 * p].indices;
            let hi = &cells[2 * p + 1].indices;
            let xlo = gather_rows(x, lo);
            let xhi = gather_rows(x, hi);
            scatter_add(&mut out, hi, &f.apply(&xlo));
            scatter_add(&mut out, lo, &f.apply_adjoint(&xhi));
        }
    }
    out
}

/// Contribution of the stored H-matrix low-rank levels to S * x.
fn hmatrix_levels_apply(
    tree: &ClusterTree,
    levels: &[HashMap<(usize, usize), LowRankFactor>],
    x: &CMat,
) -> CMat {
    let mut out = CMat::zeros(x.nrows(), x.ncols());
    for (li, blocks) in levels.iter().enumerate() {
        let l = li + 2;
        let cells = tree.cells_at(l);
        for (&(i, j), f) in blocks.iter() {
            let xi = gather_rows(x, &cells[i].indices);
            let xj = gather_rows(x, &cells[j].indices);
            scatter_add(&mut out, &cells[i].indices, &f.apply(&xj));
            scatter_add(&mut out, &cells[j].indices, &f.apply_adjoint(&xi));
        }
    }
    out
}

/// Peel a hermitian operator into HODLR form. `apply_s` must apply S to a
/// block of column vectors; it is called 2(k+c) times per level plus once
/// with max-leaf-width identity probes.
pub fn peel_hodlr<F>(
    apply_s: F,
    n: usize,
    tree: &ClusterTree,
    rank: usize,
    oversample: usize,
    seed: u64,
) -> Result<HodlrMatrix>
where
    F: Fn(&CMat) -> CMat,
{
    if tree.dim != 1 {
        return Err(FioError::invalid("peel_hodlr expects a 1D tree"));
    }
    if tree.cells_at(0)[0].indices.len() != n {
        return Err(FioError::DimensionMismatch {
            expected: tree.cells_at(0)[0].indices.len(),
            got: n,
        });
    }
    if rank == 0 {
        return Err(FioError::invalid("peeling rank must be at least 1"));
    }
    let q = rank + oversample;
    let big_l = tree.levels;
    let mut offdiag: Vec<Vec<LowRankFactor>> = Vec::with_capacity(big_l);
    let mut warnings = Vec::new();

    for l in 1..=big_l {
        let cells = tree.cells_at(l);
        let ncell = cells.len();
        // per-cell Gaussian blocks; even cells drive probe 1, odd probe 2
        let g: Vec<CMat> = (0..ncell)
            .map(|i| {
                let mut rng = rng_from_seed(derive_seed(seed, (l * 1_000_000 + i) as u64));
                gaussian_matrix(cells[i].indices.len(), q, &mut rng)
            })
            .collect();
        let mut r1 = CMat::zeros(n, q);
        let mut r2 = CMat::zeros(n, q);
        for i in 0..ncell {
            if i % 2 == 0 {
                scatter_add(&mut r1, &cells[i].indices, &g[i]);
            } else {
                scatter_add(&mut r2, &cells[i].indices, &g[i]);
            }
        }
        let y1 = apply_s(&r1) - hodlr_levels_apply(tree, &offdiag, &r1);
        let y2 = apply_s(&r2) - hodlr_levels_apply(tree, &offdiag, &r2);

        let mut level = Vec::with_capacity(ncell / 2);
        for p in 0..ncell / 2 {
            let lo = 2 * p;
            let hi = 2 * p + 1;
            let rows = cells[hi].indices.len();
            let cols = cells[lo].indices.len();
            let k_eff = rank.min(rows).min(cols);
            if k_eff < rank && level.is_empty() {
                warnings.push(format!(
                    "level {l}: rank {rank} clamped to {k_eff} (block {rows}x{cols})"
                ));
            }
            let sk1 = gather_rows(&y1, &cells[hi].indices);
            let sk2 = gather_rows(&y2, &cells[lo].indices);
            level.push(lowrank_from_sketches(&sk1, &sk2, &g[lo], &g[hi], k_eff)?);
        }
        offdiag.push(level);
    }

    // leaf diagonal by identity-block probing
    let leaves = tree.cells_at(big_l);
    let b = leaves.iter().map(|c| c.indices.len()).max().unwrap();
    let mut e = CMat::zeros(n, b);
    for cell in leaves {
        for (t, &gidx) in cell.indices.iter().enumerate() {
            e[(gidx, t)] = C64::new(1.0, 0.0);
        }
    }
    let y = apply_s(&e) - hodlr_levels_apply(tree, &offdiag, &e);
    let diag = leaves
        .iter()
        .map(|cell| {
            let block = gather_rows(&y, &cell.indices);
            let d = block.columns(0, cell.indices.len()).into_owned();
            (&d + d.adjoint()) * C64::new(0.5, 0.0)
        })
        .collect();

    Ok(HodlrMatrix {
        tree: tree.clone(),
        offdiag,
        diag,
        warnings,
    })
}

/// Apply the HODLR matrix to a vector.
pub fn hodlr_apply(h: &HodlrMatrix, v: &CVec) -> Result<CVec> {
    let n = h.tree.cells_at(0)[0].indices.len();
    if v.len() != n {
        return Err(FioError::DimensionMismatch {
            expected: n,
            got: v.len(),
        });
    }
    let x = CMat::from_column_slice(n, 1, v.as_slice());
    let mut out = hodlr_levels_apply(&h.tree, &h.offdiag, &x);
    for (cell, d) in h.tree.cells_at(h.tree.levels).iter().zip(&h.diag) {
        let xi = gather_rows(&x, &cell.indices);
        scatter_add(&mut out, &cell.indices, &(d * xi));
    }
    Ok(CVec::from_column_slice(out.as_slice()))
}

/// Peel a hermitian operator on a 2D quad tree into a strongly admissible
/// H-matrix. `lists` holds the neighbor/interaction lists for levels
/// 1..=depth (periodic).
pub fn peel_hmatrix2d<F>(
    apply_s: F,
    tree: &ClusterTree,
    lists: &[CellLists],
    rank: usize,
    oversample: usize,
    seed: u64,
) -> Result<HMatrix2D>
where
    F: Fn(&CMat) -> CMat,
{
    if tree.dim != 2 {
        return Err(FioError::invalid("peel_hmatrix2d expects a 2D tree"));
    }
    if tree.levels < 2 {
        return Err(FioError::invalid("peel_hmatrix2d needs tree depth >= 2"));
    }
    if lists.len() != tree.levels {
        return Err(FioError::DimensionMismatch {
            expected: tree.levels,
            got: lists.len(),
        });
    }
    if rank == 0 {
        return Err(FioError::invalid("peeling rank must be at least 1"));
    }
    let n = tree.cells_at(0)[0].indices.len();
    let q = rank + oversample;
    let big_l = tree.levels;
    let mut lowrank: Vec<HashMap<(usize, usize), LowRankFactor>> = Vec::new();
    let mut warnings = Vec::new();

    for l in 2..=big_l {
        let cells = tree.cells_at(l);
        let ncell = cells.len();
        let side = tree.side(l);
        let stride = side.min(8);
        let il = &lists[l - 1].interaction;
        let g: Vec<CMat> = (0..ncell)
            .map(|i| {
                let mut rng = rng_from_seed(derive_seed(seed, (l * 1_000_000 + i) as u64));
                gaussian_matrix(cells[i].indices.len(), q, &mut rng)
            })
            .collect();
        // sketches[(rows_cell, probed_cell)] = A_{rows,probed} * G_probed
        let mut sketches: HashMap<(usize, usize), CMat> = HashMap::new();
        for p in 0..stride {
            for r in 0..stride {
                let colored: Vec<usize> = (0..ncell)
                    .filter(|&i| {
                        cells[i].coords[0] % stride == p && cells[i].coords[1] % stride == r
                    })
                    .collect();
                let mut probe = CMat::zeros(n, q);
                for &i in &colored {
                    scatter_add(&mut probe, &cells[i].indices, &g[i]);
                }
                let y = apply_s(&probe) - hmatrix_levels_apply(tree, &lowrank, &probe);
                for &i in &colored {
                    for &j in &il[i] {
                        sketches.insert((j, i), gather_rows(&y, &cells[j].indices));
                    }
                }
            }
        }
        let mut level = HashMap::new();
        for i in 0..ncell {
            for &j in &il[i] {
                if j <= i {
                    continue;
                }
                let k_eff = rank
                    .min(cells[i].indices.len())
                    .min(cells[j].indices.len());
                if k_eff < rank && level.is_empty() {
                    warnings.push(format!("level {l}: rank {rank} clamped to {k_eff}"));
                }
                // block A_{ij}: Y1 = A_{ij} G_j, Y2 = A_{ij}^* G_i
                let y1 = &sketches[&(i, j)];
                let y2 = &sketches[&(j, i)];
                level.insert(
                    (i, j),
                    lowrank_from_sketches(y1, y2, &g[j], &g[i], k_eff)?,
                );
            }
        }
        lowrank.push(level);
    }

    // leaf near field via colored identity probes
    let leaves = tree.cells_at(big_l);
    let ncell = leaves.len();
    let side = tree.side(big_l);
    // Only neighbor blocks (distance <= 1) remain once every interaction
    // level has been subtracted, so probe cells 4 apart cannot reach a
    // common target and may safely share a color.
    let stride = side.min(4);
    let nl = &lists[big_l - 1].neighbor;
    let b = leaves.iter().map(|c| c.indices.len()).max().unwrap();
    let mut raw: HashMap<(usize, usize), CMat> = HashMap::new();
    for p in 0..stride {
        for r in 0..stride {
            let colored: Vec<usize> = (0..ncell)
                .filter(|&i| {
                    leaves[i].coords[0] % stride == p && leaves[i].coords[1] % stride == r
                })
                .collect();
            let mut probe = CMat::zeros(n, b);
            for &i in &colored {
                for (t, &gidx) in leaves[i].indices.iter().enumerate() {
                    probe[(gidx, t)] = C64::new(1.0, 0.0);
                }
            }
            let y = apply_s(&probe) - hmatrix_levels_apply(tree, &lowrank, &probe);
            for &i in &colored {
                for &j in &nl[i] {
                    let block = gather_rows(&y, &leaves[j].indices);
                    raw.insert((j, i), block.columns(0, leaves[i].indices.len()).into_owned());
                }
            }
        }
    }
    let mut nearfield = HashMap::new();
    for (&(i, j), block) in raw.iter() {
        if i > j {
            continue;
        }
        let mirror = raw[&(j, i)].adjoint();
        nearfield.insert((i, j), (block + mirror) * C64::new(0.5, 0.0));
    }

    Ok(HMatrix2D {
        tree: tree.clone(),
        lists: lists.to_vec(),
        lowrank,
        nearfield,
        warnings,
    })
}

/// Apply the 2D H-matrix to a vector.
pub fn hmatrix_apply(h: &HMatrix2D, v: &CVec) -> Result<CVec> {
    let n = h.tree.cells_at(0)[0].indices.len();
    if v.len() != n {
        return Err(FioError::DimensionMismatch {
            expected: n,
            got: v.len(),
        });
    }
    let x = CMat::from_column_slice(n, 1, v.as_slice());
    let mut out = hmatrix_levels_apply(&h.tree, &h.lowrank, &x);
    let leaves = h.tree.cells_at(h.tree.levels);
    for (&(i, j), block) in h.nearfield.iter() {
        let xj = gather_rows(&x, &leaves[j].indices);
        scatter_add(&mut out, &leaves[i].indices, &(block * xj));
        if i != j {
            let xi = gather_rows(&x, &leaves[i].indices);
            scatter_add(&mut out, &leaves[j].indices, &(block.adjoint() * xi));
        }
    }
    Ok(CVec::from_column_slice(out.as_slice()))
}

/// Dense reconstruction (testing/diagnostics).
pub fn hodlr_to_dense(h: &HodlrMatrix) -> CMat {
    let n = h.tree.cells_at(0)[0].indices.len();
    let mut m = CMat::zeros(n, n);
    for j in 0..n {
        let mut e = CVec::zeros(n);
        e[j] = C64::new(1.0, 0.0);
        m.set_column(j, &hodlr_apply(h, &e).unwrap());
    }
    m
}

/// Dense reconstruction (testing/diagnostics).
pub fn hmatrix_to_dense(h: &HMatrix2D) -> CMat {
    let n = h.tree.cells_at(0)[0].indices.len();
    let mut m = CMat::zeros(n, n);
    for j in 0..n {
        let mut e = CVec::zeros(n);
        e[j] = C64::new(1.0, 0.0);
        m.set_column(j, &hmatrix_apply(h, &e).unwrap());
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{rng_from_seed, spectral_norm_dense};
    use crate::problem::{FioProblem, Grid};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn dense_s(p: &FioProblem) -> CMat {
        let k = p.assemble_dense();
        k.adjoint() * k
    }

    fn random_vec(n: usize, seed: u64) -> CVec {
        let mut rng = rng_from_seed(seed);
        CVec::from_column_slice(gaussian_matrix(n, 1, &mut rng).as_slice())
    }

    #[test]
    fn identity_peels_to_identity() {
        let g = Grid::new(1, 64).unwrap();
        let tree = ClusterTree::with_depth(&g, 2).unwrap();
        let h = peel_hodlr(|x| x.clone(), 64, &tree, 8, 4, 1).unwrap();
        for level in &h.offdiag {
            for f in level {
                assert!(f.to_dense().norm() <= 1e-12);
            }
        }
        for d in &h.diag {
            assert!((d - CMat::identity(d.nrows(), d.ncols())).norm() <= 1e-12);
        }
    }

    #[test]
    fn hodlr_matches_dense_oracle() {
        let p = FioProblem::uniform_1d(64).unwrap();
        let s = dense_s(&p);
        let tree = ClusterTree::with_depth(&p.grid, 2).unwrap();
        let h = peel_hodlr(|x| &s * x, 64, &tree, 16, 8, 2).unwrap();
        let hd = hodlr_to_dense(&h);
        let err = spectral_norm_dense(&(&hd - &s), 1e-3, 3) / spectral_norm_dense(&s, 1e-3, 3);
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn block_diagonal_has_zero_coupling() {
        let mut rng = rng_from_seed(7);
        let a = gaussian_matrix(32, 32, &mut rng);
        let b = gaussian_matrix(32, 32, &mut rng);
        let mut s = CMat::zeros(64, 64);
        s.view_mut((0, 0), (32, 32)).copy_from(&(&a * a.adjoint()));
        s.view_mut((32, 32), (32, 32)).copy_from(&(&b * b.adjoint()));
        let g = Grid::new(1, 64).unwrap();
        let tree = ClusterTree::with_depth(&g, 2).unwrap();
        let h = peel_hodlr(|x| &s * x, 64, &tree, 16, 8, 3).unwrap();
        assert!(h.offdiag[0][0].to_dense().norm() < 1e-10 * s.norm());
    }

    #[test]
    fn oracle_call_budget() {
        let p = FioProblem::uniform_1d(128).unwrap();
        let s = dense_s(&p);
        let tree = ClusterTree::with_depth(&p.grid, 2).unwrap();
        let calls = AtomicUsize::new(0);
        let (k, c) = (8usize, 4usize);
        let _ = peel_hodlr(
            |x| {
                calls.fetch_add(x.ncols(), Ordering::SeqCst);
                &s * x
            },
            128,
            &tree,
            k,
            c,
            4,
        )
        .unwrap();
        let leaf = 128 / 4;
        assert_eq!(calls.load(Ordering::SeqCst), 2 * 2 * (k + c) + leaf);
    }

    #[test]
    fn hodlr_apply_is_hermitian() {
        let p = FioProblem::uniform_1d(64).unwrap();
        let s = dense_s(&p);
        let tree = ClusterTree::with_depth(&p.grid, 3).unwrap();
        let h = peel_hodlr(|x| &s * x, 64, &tree, 8, 4, 5).unwrap();
        let u = random_vec(64, 21);
        let v = random_vec(64, 22);
        let lhs = hodlr_apply(&h, &v).unwrap().dotc(&u);
        let rhs = hodlr_apply(&h, &u).unwrap().dotc(&v).conj();
        assert!((lhs - rhs).norm() <= 1e-12 * u.norm() * v.norm() * s.norm());
    }

    #[test]
    fn zero_vector() {
        let p = FioProblem::uniform_1d(64).unwrap();
        let s = dense_s(&p);
        let tree = ClusterTree::with_depth(&p.grid, 2).unwrap();
        let h = peel_hodlr(|x| &s * x, 64, &tree, 8, 4, 6).unwrap();
        assert_eq!(hodlr_apply(&h, &CVec::zeros(64)).unwrap().norm(), 0.0);
    }

    #[test]
    fn identity_peels_to_identity_2d() {
        let g = Grid::new(2, 16).unwrap();
        let tree = ClusterTree::with_depth(&g, 2).unwrap();
        let lists: Vec<CellLists> = (1..=2)
            .map(|l| tree.neighbor_and_interaction_lists(l, true))
            .collect();
        let h = peel_hmatrix2d(|x| x.clone(), &tree, &lists, 8, 4, 7).unwrap();
        for level in &h.lowrank {
            for f in level.values() {
                assert!(f.to_dense().norm() <= 1e-12);
            }
        }
        for (&(i, j), block) in &h.nearfield {
            if i == j {
                assert!((block - CMat::identity(block.nrows(), block.ncols())).norm() <= 1e-12);
            } else {
                assert!(block.norm() <= 1e-12);
            }
        }
    }

    #[test]
    fn hmatrix_matches_dense_oracle_2d() {
        let p = FioProblem::ellipse_2d(16).unwrap();
        let s = dense_s(&p);
        let tree = ClusterTree::with_depth(&p.grid, 2).unwrap();
        let lists: Vec<CellLists> = (1..=2)
            .map(|l| tree.neighbor_and_interaction_lists(l, true))
            .collect();
        let h = peel_hmatrix2d(|x| &s * x, &tree, &lists, 24, 8, 8).unwrap();
        let hd = hmatrix_to_dense(&h);
        let err = spectral_norm_dense(&(&hd - &s), 1e-3, 3) / spectral_norm_dense(&s, 1e-3, 3);
        assert!(err < 1e-3, "err = {err}");
    }

    #[test]
    fn coloring_never_overlaps_zones() {
        let g = Grid::new(2, 32).unwrap();
        let tree = ClusterTree::with_depth(&g, 4).unwrap();
        for l in 3..=4usize {
            let lists = tree.neighbor_and_interaction_lists(l, true);
            let side = tree.side(l);
            let stride = side.min(8);
            if side < 8 {
                continue;
            }
            let cells = tree.cells_at(l);
            for i in 0..cells.len() {
                for j in 0..cells.len() {
                    if i == j {
                        continue;
                    }
                    let same = cells[i].coords[0] % stride == cells[j].coords[0] % stride
                        && cells[i].coords[1] % stride == cells[j].coords[1] % stride;
                    if same {
                        assert!(!lists.neighbor[i].contains(&j));
                        assert!(!lists.interaction[i].contains(&j));
                    }
                }
            }
        }
    }

    #[test]
    fn kernel_decay_premise() {
        // entries of K*K decay away from the diagonal in |xi - eta|
        let p = FioProblem::uniform_1d(256).unwrap();
        let s = dense_s(&p);
        let n = 256usize;
        let mut max_diag: f64 = 0.0;
        let mut max_far: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v = s[(i, j)].norm();
                if i == j {
                    max_diag = max_diag.max(v);
                }
                // distance on the periodic frequency domain: the kernel's
                // x-dependence aliases at the +-N/2 wrap
                let d = i.abs_diff(j);
                if d.min(n - d) > n / 4 {
                    max_far = max_far.max(v);
                }
            }
        }
        assert!(
            max_far * 1e3 <= max_diag,
            "far {max_far} vs diag {max_diag}"
        );
    }

    #[test]
    fn offdiag_rank_grows_logarithmically() {
        let mut ranks = Vec::new();
        for n in [64usize, 128, 256, 512] {
            let p = FioProblem::uniform_1d(n).unwrap();
            let s = dense_s(&p);
            let block = s.view((n / 2, 0), (n / 2, n / 2)).into_owned();
            let sv = block.singular_values();
            let s0 = sv[0];
            ranks.push(sv.iter().filter(|&&x| x > 1e-6 * s0).count());
        }
        for w in ranks.windows(2) {
            assert!(
                w[1] <= w[0] + 8,
                "rank jump {} -> {} too steep ({ranks:?})",
                w[0],
                w[1]
            );
        }
    }
}
