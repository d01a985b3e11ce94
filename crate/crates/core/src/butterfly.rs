//! Butterfly factorization of discrete Fourier integral operator matrices.
//!
//! The factorization pairs row cells at level t of the spatial tree with
//! column cells at level L - t of the frequency tree; each such block is
//! numerically low-rank. Middle-level (t = L/2) blocks are factored as
//! U D V* by sampled interpolative decompositions; the outer levels are two
//! "towers" of transfer matrices that merge children bases level by level up
//! to the leaves. Applying the factor costs O(N log N); building it costs
//! O(N^{3/2}) thanks to the row/column sampling.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::dense::{
    derive_seed, id_decompose, pivoted_qr, rng_from_seed, CMat, CVec,
};
use crate::error::{FioError, Result};
use crate::problem::{FioProblem, Grid};
use crate::tree::ClusterTree;
use rand::Rng;

/// Tuning knobs for the butterfly build.
#[derive(Debug, Clone)]
pub struct BfParams {
    /// Per-block rank cap.
    pub rank: usize,
    /// Relative truncation tolerance for the local low-rank factorizations.
    pub tol: f64,
    /// Extra sampled rows/columns beyond `rank` for the middle-level IDs.
    pub oversample: usize,
    /// Target points per leaf when choosing the tree depth.
    pub leaf_size: usize,
    /// Explicit tree depth (must be even); chosen automatically when None.
    pub depth: Option<usize>,
    /// Factor middle blocks from the fully assembled block instead of
    /// sampled rows/columns (slow; for validation).
    pub dense_middle: bool,
}

impl BfParams {
    pub fn default_for_dim(dim: usize) -> BfParams {
        if dim == 1 {
            BfParams {
                rank: 20,
                tol: 1e-8,
                oversample: 10,
                leaf_size: 32,
                depth: None,
                dense_middle: false,
            }
        } else {
            BfParams {
                rank: 30,
                tol: 1e-8,
                oversample: 10,
                leaf_size: 64,
                depth: None,
                dense_middle: false,
            }
        }
    }
}

/// One merge step: coefficients of the children blocks (stacked in child
/// order, offsets in `seg`) map to coefficients of the merged basis via `r`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct Transfer {
    r: CMat,
    seg: Vec<usize>,
}

/// Half of the butterfly: a shared-basis hierarchy over one grid. Stores the
/// per-level transfer matrices and the leaf basis blocks; middle-level
/// coefficients are pushed up to leaves (`apply_from_mid`) or pulled down
/// from a vector (`project_to_mid`, the exact adjoint).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Tower {
    tree: ClusterTree,
    mid: usize,
    /// transfers[s][i][j]: row cell i at level mid+s+1, col cell j at level
    /// L-mid-s-1.
    transfers: Vec<Vec<Vec<Transfer>>>,
    /// Leaf basis blocks, one per leaf row cell (|cell| x rank).
    leaf: Vec<CMat>,
    /// ranks[s][i][j] for row level mid+s, col level L-mid-s.
    ranks: Vec<Vec<Vec<usize>>>,
}

impl Tower {
    fn build(tree: ClusterTree, mid_bases: Vec<Vec<CMat>>, tol: f64, cap: usize) -> Tower {
        let l = tree.levels;
        let mid = l / 2;
        let mut cur = mid_bases;
        let mut transfers = Vec::new();
        let mut ranks = vec![rank_table(&cur)];
        for s in 0..(l - mid) {
            let t = mid + s;
            let rl = t + 1;
            let cl = l - t - 1;
            let nrow = tree.num_cells(rl);
            let ncol = tree.num_cells(cl);
            let built: Vec<(Vec<Transfer>, Vec<CMat>)> = (0..nrow)
                .into_par_iter()
                .map(|ih| {
                    let i = tree.parent_index(rl, ih);
                    let parent_pos: HashMap<usize, usize> = tree.cells_at(t)[i]
                        .indices
                        .iter()
                        .enumerate()
                        .map(|(p, &g)| (g, p))
                        .collect();
                    let local: Vec<usize> = tree.cells_at(rl)[ih]
                        .indices
                        .iter()
                        .map(|g| parent_pos[g])
                        .collect();
                    let mut trow = Vec::with_capacity(ncol);
                    let mut brow = Vec::with_capacity(ncol);
                    for jh in 0..ncol {
                        let children = tree.child_indices(cl, jh);
                        let mut seg = vec![0usize];
                        for &j in &children {
                            seg.push(seg.last().unwrap() + cur[i][j].ncols());
                        }
                        let total = *seg.last().unwrap();
                        let mut m = CMat::zeros(local.len(), total);
                        for (p, &j) in children.iter().enumerate() {
                            let src = &cur[i][j];
                            for c in 0..src.ncols() {
                                for (rr, &lr) in local.iter().enumerate() {
                                    m[(rr, seg[p] + c)] = src[(lr, c)];
                                }
                            }
                        }
                        if total == 0 {
                            trow.push(Transfer {
                                r: CMat::zeros(0, 0),
                                seg,
                            });
                            brow.push(CMat::zeros(local.len(), 0));
                            continue;
                        }
                        let qr = pivoted_qr(&m, tol, Some(cap));
                        let rk = qr.rank.min(qr.q.ncols());
                        let q = qr.q.columns(0, rk).into_owned();
                        let mut rfull = CMat::zeros(rk, total);
                        for a in 0..rk {
                            for b in 0..total {
                                rfull[(a, qr.perm[b])] = qr.r[(a, b)];
                            }
                        }
                        trow.push(Transfer { r: rfull, seg });
                        brow.push(q);
                    }
                    (trow, brow)
                })
                .collect();
            let mut stage = Vec::with_capacity(nrow);
            let mut next = Vec::with_capacity(nrow);
            for (trow, brow) in built {
                stage.push(trow);
                next.push(brow);
            }
            transfers.push(stage);
            ranks.push(rank_table(&next));
            cur = next;
        }
        let leaf = cur.into_iter().map(|mut row| row.pop().unwrap()).collect();
        Tower {
            tree,
            mid,
            transfers,
            leaf,
            ranks,
        }
    }

    /// Push middle-level coefficient blocks y[i][j] (row cell i, col cell j,
    /// both at level L/2; one column per right-hand side) up to full columns
    /// on this tower's grid.
    fn apply_from_mid(&self, y: Vec<Vec<CMat>>, width: usize) -> CMat {
        let l = self.tree.levels;
        let mut cur = y;
        for s in 0..(l - self.mid) {
            let rl = self.mid + s + 1;
            let cl = l - self.mid - s - 1;
            let nrow = self.tree.num_cells(rl);
            let ncol = self.tree.num_cells(cl);
            cur = (0..nrow)
                .into_par_iter()
                .map(|ih| {
                    let i = self.tree.parent_index(rl, ih);
                    (0..ncol)
                        .map(|jh| {
                            let tr = &self.transfers[s][ih][jh];
                            let total = *tr.seg.last().unwrap();
                            let mut stacked = CMat::zeros(total, width);
                            for (p, &j) in
                                self.tree.child_indices(cl, jh).iter().enumerate()
                            {
                                let src = &cur[i][j];
                                stacked
                                    .view_mut((tr.seg[p], 0), (src.nrows(), width))
                                    .copy_from(src);
                            }
                            &tr.r * stacked
                        })
                        .collect()
                })
                .collect();
        }
        let n = self.tree.cells_at(0)[0].indices.len();
        let mut out = CMat::zeros(n, width);
        for (ih, cell) in self.tree.cells_at(l).iter().enumerate() {
            let contrib = &self.leaf[ih] * &cur[ih][0];
            for (p, &g) in cell.indices.iter().enumerate() {
                for c in 0..width {
                    out[(g, c)] = contrib[(p, c)];
                }
            }
        }
        out
    }

    /// Exact adjoint of [`Tower::apply_from_mid`]: project columns on this
    /// tower's grid down to middle-level coefficient blocks.
    fn project_to_mid(&self, b: &CMat) -> Vec<Vec<CMat>> {
        let l = self.tree.levels;
        let width = b.ncols();
        let mut cur: Vec<Vec<CMat>> = self
            .tree
            .cells_at(l)
            .par_iter()
            .map(|cell| {
                let mut local = CMat::zeros(cell.indices.len(), width);
                for (p, &g) in cell.indices.iter().enumerate() {
                    for c in 0..width {
                        local[(p, c)] = b[(g, c)];
                    }
                }
                local
            })
            .collect::<Vec<_>>()
            .into_iter()
            .enumerate()
            .map(|(ih, local)| vec![self.leaf[ih].adjoint() * local])
            .collect();
        for s in (0..(l - self.mid)).rev() {
            let rl = self.mid + s + 1;
            let cl = l - self.mid - s - 1;
            let nrow_hi = self.tree.num_cells(rl);
            let ncol_hi = self.tree.num_cells(cl);
            let w: Vec<Vec<CMat>> = (0..nrow_hi)
                .into_par_iter()
                .map(|ih| {
                    (0..ncol_hi)
                        .map(|jh| self.transfers[s][ih][jh].r.adjoint() * &cur[ih][jh])
                        .collect()
                })
                .collect();
            let nrow_lo = self.tree.num_cells(rl - 1);
            let ncol_lo = self.tree.num_cells(cl + 1);
            let mut next: Vec<Vec<CMat>> = (0..nrow_lo)
                .map(|i| {
                    (0..ncol_lo)
                        .map(|j| CMat::zeros(self.ranks[s][i][j], width))
                        .collect()
                })
                .collect();
            for ih in 0..nrow_hi {
                let i = self.tree.parent_index(rl, ih);
                for jh in 0..ncol_hi {
                    let tr = &self.transfers[s][ih][jh];
                    for (p, &j) in self.tree.child_indices(cl, jh).iter().enumerate() {
                        let len = tr.seg[p + 1] - tr.seg[p];
                        for r in 0..len {
                            for c in 0..width {
                                next[i][j][(r, c)] += w[ih][jh][(tr.seg[p] + r, c)];
                            }
                        }
                    }
                }
            }
            cur = next;
        }
        cur
    }

    fn nnz(&self) -> usize {
        let t: usize = self
            .transfers
            .iter()
            .flatten()
            .flatten()
            .map(|tr| tr.r.len())
            .sum();
        t + self.leaf.iter().map(|m| m.len()).sum::<usize>()
    }

    /// Per-stage (stored scalars, max transfer rank) from mid towards leaf.
    pub fn stage_profile(&self) -> Vec<(usize, usize)> {
        self.transfers
            .iter()
            .map(|stage| {
                let nnz = stage.iter().flatten().map(|tr| tr.r.len()).sum();
                let mx = stage
                    .iter()
                    .flatten()
                    .map(|tr| tr.r.nrows())
                    .max()
                    .unwrap_or(0);
                (nnz, mx)
            })
            .collect()
    }
}

fn rank_table(bases: &[Vec<CMat>]) -> Vec<Vec<usize>> {
    bases
        .iter()
        .map(|row| row.iter().map(|m| m.ncols()).collect())
        .collect()
}

/// The assembled butterfly factor: two towers around the middle weight
/// blocks. Immutable after construction; applies are thread safe.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ButterflyFactor {
    pub n: usize,
    pub dim: usize,
    pub levels: usize,
    u: Tower,
    v: Tower,
    /// Middle weight blocks d[i][j], row cell i of the spatial tree, column
    /// cell j of the frequency tree, both at level L/2.
    d: Vec<Vec<CMat>>,
    pub warnings: Vec<String>,
}

impl ButterflyFactor {
    /// Number of middle-level block pairs.
    pub fn mid_pairs(&self) -> usize {
        self.d.len() * self.d.first().map_or(0, |r| r.len())
    }

    /// Per-stage storage profiles of the two towers (mid to leaf).
    pub fn tower_profiles(&self) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
        (self.u.stage_profile(), self.v.stage_profile())
    }

    /// Largest rank chosen by the middle-level factorizations.
    pub fn max_mid_rank(&self) -> usize {
        self.d
            .iter()
            .flatten()
            .map(|m| m.nrows().max(m.ncols()))
            .max()
            .unwrap_or(0)
    }

    /// Total stored scalars across all factors.
    pub fn nnz(&self) -> usize {
        self.u.nnz()
            + self.v.nnz()
            + self
                .d
                .iter()
                .flatten()
                .map(|m| m.len())
                .sum::<usize>()
    }

    pub fn apply(&self, x: &CVec) -> Result<CVec> {
        let block = CMat::from_column_slice(x.len(), 1, x.as_slice());
        let out = self.apply_block(&block)?;
        Ok(CVec::from_column_slice(out.column(0).as_slice()))
    }

    pub fn apply_adjoint(&self, b: &CVec) -> Result<CVec> {
        let block = CMat::from_column_slice(b.len(), 1, b.as_slice());
        let out = self.apply_adjoint_block(&block)?;
        Ok(CVec::from_column_slice(out.column(0).as_slice()))
    }

    /// Apply the factored operator to several right-hand sides at once.
    pub fn apply_block(&self, x: &CMat) -> Result<CMat> {
        if x.nrows() != self.n {
            return Err(FioError::DimensionMismatch {
                expected: self.n,
                got: x.nrows(),
            });
        }
        let z = self.v.project_to_mid(x);
        let ncell = self.d.len();
        let y: Vec<Vec<CMat>> = (0..ncell)
            .into_par_iter()
            .map(|i| (0..ncell).map(|j| &self.d[i][j] * &z[j][i]).collect())
            .collect();
        Ok(self.u.apply_from_mid(y, x.ncols()))
    }

    /// Adjoint of [`ButterflyFactor::apply_block`].
    pub fn apply_adjoint_block(&self, b: &CMat) -> Result<CMat> {
        if b.nrows() != self.n {
            return Err(FioError::DimensionMismatch {
                expected: self.n,
                got: b.nrows(),
            });
        }
        let y = self.u.project_to_mid(b);
        let ncell = self.d.len();
        let z: Vec<Vec<CMat>> = (0..ncell)
            .into_par_iter()
            .map(|j| (0..ncell).map(|i| self.d[i][j].adjoint() * &y[i][j]).collect())
            .collect();
        Ok(self.v.apply_from_mid(z, b.ncols()))
    }
}

/// Choose an even tree depth matching the leaf-size target.
fn select_depth(grid: &Grid, params: &BfParams) -> Result<usize> {
    if let Some(l) = params.depth {
        if l % 2 != 0 {
            return Err(FioError::invalid(format!(
                "butterfly tree depth must be even, got {l}"
            )));
        }
        if l < 2 || (1usize << l) > grid.n {
            return Err(FioError::invalid(format!(
                "butterfly tree depth {l} out of range for n = {}",
                grid.n
            )));
        }
        return Ok(l);
    }
    // The per-level blocks of the factorization stay low-rank only when the
    // product of paired cell widths (n / 2^L per dimension) is O(1), so the
    // tree is nearly fully refined: cells of ~4 points in 1D, single points
    // in 2D, rounded down to an even depth.
    let m = (grid.n as f64).log2().floor() as usize;
    let target = if grid.dim == 1 { m.saturating_sub(2) } else { m };
    // round odd targets up so the paired cell-width product stays <= 4
    let mut l = (target + target % 2).max(2);
    while l > 2 && (1usize << l) > grid.n {
        l -= 2;
    }
    if (1usize << l) > grid.n {
        return Err(FioError::invalid(format!(
            "grid n = {} too small for a depth-{l} butterfly tree",
            grid.n
        )));
    }
    Ok(l)
}

fn gather(base: &[usize], picks: &[usize]) -> Vec<usize> {
    picks.iter().map(|&p| base[p]).collect()
}

/// `count` distinct sample indices in 0..n: half uniformly spaced, the rest
/// random.
fn sample_indices(n: usize, count: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    if count >= n {
        return (0..n).collect();
    }
    let mut set = std::collections::BTreeSet::new();
    let uni = (count / 2).max(1);
    for i in 0..uni {
        set.insert(i * n / uni);
    }
    while set.len() < count {
        set.insert(rng.gen_range(0..n));
    }
    set.into_iter().collect()
}

/// Middle-level factorization of one block K(rows, cols) ~= Wu * D * Wv^*.
fn middle_factor(
    problem: &FioProblem,
    rows: &[usize],
    cols: &[usize],
    params: &BfParams,
    seed: u64,
) -> Result<(CMat, CMat, CMat, bool)> {
    let nr = rows.len();
    let nc = cols.len();
    let ns = params.rank + params.oversample;
    let clamped = params.rank > nr.min(nc);
    let (row_id, col_id, d) = if params.dense_middle || 2 * ns >= nr.min(nc) {
        let a = problem.assemble_block(rows, cols)?;
        let cid = id_decompose(&a, params.tol, Some(params.rank))?;
        let rid = id_decompose(&a.adjoint(), params.tol, Some(params.rank))?;
        let mut d = CMat::zeros(rid.skeleton.len(), cid.skeleton.len());
        for (p, &ri) in rid.skeleton.iter().enumerate() {
            for (q, &cj) in cid.skeleton.iter().enumerate() {
                d[(p, q)] = a[(ri, cj)];
            }
        }
        (rid, cid, d)
    } else {
        // Three passes keep every interpolation anchored to exactly
        // assembled rows/columns: a sampled-row column ID proposes skeleton
        // columns, a full-height row ID on those columns picks skeleton
        // rows, and the final column ID is redone on the exact skeleton
        // rows so the interpolation operator matches the stored D block.
        let mut rng = rng_from_seed(seed);
        let srow = sample_indices(nr, ns, &mut rng);
        let arows = problem.assemble_block(&gather(rows, &srow), cols)?;
        let pre = id_decompose(&arows, params.tol, Some(params.rank))?;
        let mut scol = sample_indices(nc, ns, &mut rng);
        scol.extend_from_slice(&pre.skeleton);
        scol.sort_unstable();
        scol.dedup();
        let acols = problem.assemble_block(rows, &gather(cols, &scol))?;
        let rid = id_decompose(&acols.adjoint(), params.tol, Some(params.rank))?;
        let askel = problem.assemble_block(&gather(rows, &rid.skeleton), cols)?;
        let cid = id_decompose(&askel, params.tol, Some(params.rank))?;
        let mut d = CMat::zeros(rid.skeleton.len(), cid.skeleton.len());
        for (p, _) in rid.skeleton.iter().enumerate() {
            for (q, &cj) in cid.skeleton.iter().enumerate() {
                d[(p, q)] = askel[(p, cj)];
            }
        }
        (rid, cid, d)
    };
    let wu = row_id.col_interp_operator().adjoint();
    let wv = col_id.col_interp_operator().adjoint();
    Ok((wu, d, wv, clamped))
}

/// Build the butterfly factorization of the problem's kernel matrix.
pub fn bf_build(problem: &FioProblem, rank: usize, tol: f64, seed: u64) -> Result<ButterflyFactor> {
    let mut params = BfParams::default_for_dim(problem.grid.dim);
    params.rank = rank;
    params.tol = tol;
    bf_build_with(problem, &params, seed)
}

pub fn bf_build_with(
    problem: &FioProblem,
    params: &BfParams,
    seed: u64,
) -> Result<ButterflyFactor> {
    if params.rank == 0 {
        return Err(FioError::invalid("butterfly rank must be at least 1"));
    }
    if !(params.tol > 0.0 && params.tol < 1.0) {
        return Err(FioError::invalid("butterfly tol must lie in (0, 1)"));
    }
    let depth = select_depth(&problem.grid, params)?;
    let tree = ClusterTree::with_depth(&problem.grid, depth)?;
    let mid = depth / 2;
    let ncell = tree.num_cells(mid);
    let pairs: Vec<(usize, usize)> = (0..ncell)
        .flat_map(|i| (0..ncell).map(move |j| (i, j)))
        .collect();
    let factored: Result<Vec<(CMat, CMat, CMat, bool)>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            middle_factor(
                problem,
                &tree.cells_at(mid)[i].indices,
                &tree.cells_at(mid)[j].indices,
                params,
                derive_seed(seed, (i * ncell + j) as u64),
            )
        })
        .collect();
    let factored = factored.map_err(|e| e.in_stage("butterfly"))?;

    let mut u_mid: Vec<Vec<CMat>> = vec![vec![CMat::zeros(0, 0); ncell]; ncell];
    let mut v_mid: Vec<Vec<CMat>> = vec![vec![CMat::zeros(0, 0); ncell]; ncell];
    let mut d: Vec<Vec<CMat>> = vec![vec![CMat::zeros(0, 0); ncell]; ncell];
    let mut clamped_any = false;
    for (&(i, j), (wu, dij, wv, clamped)) in pairs.iter().zip(factored) {
        u_mid[i][j] = wu;
        v_mid[j][i] = wv;
        d[i][j] = dij;
        clamped_any |= clamped;
    }
    let mut warnings = Vec::new();
    if clamped_any {
        warnings.push(format!(
            "rank cap {} exceeds middle block size; clamped to block dimensions",
            params.rank
        ));
    }

    let u = Tower::build(tree.clone(), u_mid, params.tol, params.rank);
    let v = Tower::build(tree, v_mid, params.tol, params.rank);
    Ok(ButterflyFactor {
        n: problem.size(),
        dim: problem.grid.dim,
        levels: depth,
        u,
        v,
        d,
        warnings,
    })
}

/// Apply the factored operator to a vector.
pub fn bf_apply(bf: &ButterflyFactor, v: &CVec) -> Result<CVec> {
    bf.apply(v)
}

/// Apply the conjugate transpose of the factored operator.
pub fn bf_apply_adjoint(bf: &ButterflyFactor, v: &CVec) -> Result<CVec> {
    bf.apply_adjoint(v)
}

/// Apply the factored operator to a block of right-hand sides.
pub fn bf_apply_block(bf: &ButterflyFactor, x: &CMat) -> Result<CMat> {
    bf.apply_block(x)
}

/// Apply the conjugate transpose to a block of right-hand sides.
pub fn bf_apply_adjoint_block(bf: &ButterflyFactor, x: &CMat) -> Result<CMat> {
    bf.apply_adjoint_block(x)
}
