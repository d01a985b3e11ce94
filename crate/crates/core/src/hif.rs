//! Skeletonization-based inversion of the hierarchical representations built
//! by peeling: recursive skeletonization for 1D HODLR matrices and
//! cell-then-edge skeletonization for 2D strong-admissibility H-matrices.
//!
//! Both paths walk the cluster tree from the leaves to the root. At each node
//! an interpolative decomposition of the node's off-diagonal interactions —
//! represented through the stored low-rank bases rather than assembled
//! densely — splits the active degrees of freedom into skeleton and redundant
//! parts. The redundant part is decoupled by a zeroing transform followed by a
//! Cholesky elimination, siblings are merged, and the small dense block that
//! survives at the root is inverted directly. The result is an ordered list of
//! local triangular factors plus the root inverse, applyable in near-linear
//! time as an approximation of the inverse of the peeled matrix.
//!
//! A scaled variant pre-multiplies each node by the inverse Cholesky factor of
//! its diagonal block before the interpolative decomposition, which improves
//! robustness on ill-conditioned inputs; it is selected explicitly or entered
//! automatically when the plain elimination hits an indefinite pivot.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::dense::{cholesky, id_decompose, solve_lower, solve_lower_adjoint, CMat, CVec, C64};
use crate::error::{FioError, Result};
use crate::peel::{HMatrix2D, HodlrMatrix};
use crate::tree::ClusterTree;

/// What a skeletonization factor eliminated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FactorKind {
    /// A 1D tree node.
    Node,
    /// A 2D square cell.
    Cell,
    /// A 2D edge between two adjacent cells.
    Edge,
}

/// One skeletonization step: the interpolation matrix that zeroes the
/// redundant degrees of freedom of a target set plus the triangular
/// elimination data that decouples them.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SkeletonFactor {
    pub kind: FactorKind,
    pub level: usize,
    /// Global indices of the target set, in local order.
    pub indices: Vec<usize>,
    /// Local positions of the redundant degrees of freedom.
    pub redundant: Vec<usize>,
    /// Local positions of the skeleton degrees of freedom.
    pub skeleton: Vec<usize>,
    /// Interpolation matrix T (|skeleton| x |redundant|).
    pub interp: CMat,
    /// Cholesky factor of the zeroed redundant block.
    pub chol: CMat,
    /// Coupling W = A_rr^{-1} A_sr^* of the elimination (|redundant| x |skeleton|).
    pub coupling: CMat,
    /// Block lower-triangular pre-scaling factor (scaled variant only).
    pub scale: Option<CMat>,
}

/// Surviving global index set after one skeletonization stage.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ActiveSet {
    pub level: usize,
    pub kind: FactorKind,
    pub indices: Vec<usize>,
}

/// Applyable factorization of the inverse of a hierarchical matrix: ordered
/// skeletonization factors from the leaves to the root plus the dense inverse
/// of the final active block.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct InverseFactorization {
    pub n: usize,
    pub factors: Vec<SkeletonFactor>,
    pub root_indices: Vec<usize>,
    pub root: RootSolver,
    pub active_history: Vec<ActiveSet>,
    pub scaled: bool,
    pub warnings: Vec<String>,
}

/// Dense solver for the final active block. A Cholesky factor is preferred
/// (half the factorization cost of an explicit inverse and the same apply
/// cost up to a constant); the explicit inverse is kept as a fallback for
/// roots that are numerically indefinite.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub enum RootSolver {
    /// Lower Cholesky factor of the hermitized root block.
    Cholesky(CMat),
    /// Explicit dense inverse.
    Inverse(CMat),
}

impl RootSolver {
    fn solve(&self, x: &CMat) -> CMat {
        match self {
            RootSolver::Cholesky(l) => solve_lower_adjoint(l, &solve_lower(l, x)),
            RootSolver::Inverse(m) => m * x,
        }
    }

    fn len(&self) -> usize {
        match self {
            RootSolver::Cholesky(m) | RootSolver::Inverse(m) => m.len(),
        }
    }
}

fn hermitize(m: &CMat) -> CMat {
    (m + m.adjoint()) * C64::new(0.5, 0.0)
}

fn vstack(blocks: &[CMat], ncols: usize) -> CMat {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = CMat::zeros(rows, ncols);
    let mut r0 = 0;
    for b in blocks {
        out.view_mut((r0, 0), (b.nrows(), b.ncols())).copy_from(b);
        r0 += b.nrows();
    }
    out
}

fn gather_rows(m: &CMat, rows: &[usize]) -> CMat {
    let mut out = CMat::zeros(rows.len(), m.ncols());
    for (p, &r) in rows.iter().enumerate() {
        for c in 0..m.ncols() {
            out[(p, c)] = m[(r, c)];
        }
    }
    out
}

fn gather_cols(m: &CMat, cols: &[usize]) -> CMat {
    let mut out = CMat::zeros(m.nrows(), cols.len());
    for (p, &c) in cols.iter().enumerate() {
        for r in 0..m.nrows() {
            out[(r, p)] = m[(r, c)];
        }
    }
    out
}

fn submatrix(m: &CMat, rows: &[usize], cols: &[usize]) -> CMat {
    let mut out = CMat::zeros(rows.len(), cols.len());
    for (p, &r) in rows.iter().enumerate() {
        for (q, &c) in cols.iter().enumerate() {
            out[(p, q)] = m[(r, c)];
        }
    }
    out
}

fn gather_vec(x: &CVec, idx: &[usize]) -> CMat {
    let mut out = CMat::zeros(idx.len(), 1);
    for (p, &g) in idx.iter().enumerate() {
        out[(p, 0)] = x[g];
    }
    out
}

/// Local column transform mapping a node's pre-elimination coordinates to its
/// surviving coordinates: a plain index selection for the default variant, a
/// dense map for the scaled variant.
#[derive(Debug, Clone)]
enum Xform {
    Select(Vec<usize>),
    Dense(CMat),
}

impl Xform {
    /// m * X (restrict columns).
    fn cols(&self, m: &CMat) -> CMat {
        match self {
            Xform::Select(pos) => gather_cols(m, pos),
            Xform::Dense(x) => m * x,
        }
    }

    /// X^* m (restrict rows).
    fn rows(&self, m: &CMat) -> CMat {
        match self {
            Xform::Select(pos) => gather_rows(m, pos),
            Xform::Dense(x) => x.adjoint() * m,
        }
    }
}

/// Result of skeletonizing one target set against its off-diagonal stack.
struct Elim {
    redundant: Vec<usize>,
    skeleton: Vec<usize>,
    interp: CMat,
    chol: CMat,
    coupling: CMat,
    scale: Option<CMat>,
    /// Updated diagonal block over the skeleton, in post-transform coordinates.
    diag_new: CMat,
    /// Column transform from pre- to post-elimination coordinates.
    xform: Xform,
}

/// Cholesky with an escalating Hermitian jitter retry. Blocks whose smallest
/// eigenvalues sit below the compression noise of earlier stages can come
/// out numerically indefinite even though the underlying operator is
/// positive definite; a shift at the noise level restores factorability
/// while perturbing the factorization no more than the truncations already
/// have.
fn cholesky_jitter(a: &CMat) -> Result<CMat> {
    match cholesky(a) {
        Ok(l) => return Ok(l),
        Err(first) => {
            let m = a.nrows();
            let scale = (0..m)
                .map(|i| a[(i, i)].norm())
                .fold(0.0f64, f64::max)
                .max(f64::MIN_POSITIVE);
            for delta in [1e-12, 1e-8, 1e-4, 1e-2, 1.0, 1e2] {
                let shifted = a + CMat::identity(m, m) * C64::new(delta * scale, 0.0);
                if let Ok(l) = cholesky(&shifted) {
                    return Ok(l);
                }
            }
            Err(first)
        }
    }
}

fn annotate_npd(e: FioError, ctx: &str) -> FioError {
    match e {
        FioError::NotPositiveDefinite { pivot, .. } => FioError::NotPositiveDefinite {
            pivot,
            context: Some(ctx.to_string()),
        },
        other => other,
    }
}

/// Skeletonize one target set: interpolative decomposition of `stack` (whose
/// columns index the set and whose rows span all of its off-diagonal
/// interactions), zeroing update of the diagonal block and Cholesky
/// elimination of the redundant part. `parts` gives the sub-block sizes used
/// for the block-diagonal pre-scaling of the scaled variant.
fn eliminate(
    diag: &CMat,
    stack: &CMat,
    tol: f64,
    scaled: bool,
    parts: &[usize],
    ctx: &str,
) -> Result<Elim> {
    let m = diag.nrows();
    debug_assert_eq!(stack.ncols(), m);
    debug_assert_eq!(parts.iter().sum::<usize>(), m);

    let (scale, work_stack) = if scaled {
        let mut s = CMat::zeros(m, m);
        let mut off = 0;
        for &len in parts {
            let block = hermitize(&diag.view((off, off), (len, len)).into_owned());
            let l = cholesky_jitter(&block).map_err(|e| annotate_npd(e, ctx))?;
            s.view_mut((off, off), (len, len)).copy_from(&l);
            off += len;
        }
        // stack * (S^*)^{-1}
        let st = solve_lower(&s, &stack.adjoint()).adjoint();
        (Some(s), st)
    } else {
        (None, stack.clone())
    };

    let (skeleton, redundant, interp) = if work_stack.nrows() == 0 {
        (Vec::new(), (0..m).collect::<Vec<_>>(), CMat::zeros(0, m))
    } else {
        let id = id_decompose(&work_stack, tol, None)?;
        (id.skeleton, id.redundant, id.interp)
    };
    let k = skeleton.len();
    let r = redundant.len();

    let (at_rr, at_sr, a_ss) = if scaled {
        let at_rr = CMat::identity(r, r) + interp.adjoint() * &interp;
        let at_sr = -interp.clone();
        (at_rr, at_sr, CMat::identity(k, k))
    } else {
        let a_rr = submatrix(diag, &redundant, &redundant);
        let a_sr = submatrix(diag, &skeleton, &redundant);
        let a_ss = submatrix(diag, &skeleton, &skeleton);
        let at_sr = &a_sr - &a_ss * &interp;
        let at_rr = &a_rr
            - interp.adjoint() * &a_sr
            - a_sr.adjoint() * &interp
            + interp.adjoint() * &a_ss * &interp;
        (hermitize(&at_rr), at_sr, a_ss)
    };

    let chol = if r > 0 {
        cholesky_jitter(&at_rr).map_err(|e| annotate_npd(e, ctx))?
    } else {
        CMat::zeros(0, 0)
    };
    let coupling = if r > 0 && k > 0 {
        let x = solve_lower(&chol, &at_sr.adjoint());
        solve_lower_adjoint(&chol, &x)
    } else {
        CMat::zeros(r, k)
    };
    let diag_new = hermitize(&(&a_ss - &at_sr * &coupling));

    let xform = match &scale {
        None => Xform::Select(skeleton.clone()),
        Some(s) => {
            // columns of (S^*)^{-1} at the skeleton positions
            let mut e = CMat::zeros(m, k);
            for (c, &p) in skeleton.iter().enumerate() {
                e[(p, c)] = C64::new(1.0, 0.0);
            }
            Xform::Dense(solve_lower_adjoint(s, &e))
        }
    };

    Ok(Elim {
        redundant,
        skeleton,
        interp,
        chol,
        coupling,
        scale,
        diag_new,
        xform,
    })
}

impl SkeletonFactor {
    fn from_elim(kind: FactorKind, level: usize, indices: Vec<usize>, e: &Elim) -> SkeletonFactor {
        SkeletonFactor {
            kind,
            level,
            indices,
            redundant: e.redundant.clone(),
            skeleton: e.skeleton.clone(),
            interp: e.interp.clone(),
            chol: e.chol.clone(),
            coupling: e.coupling.clone(),
            scale: e.scale.clone(),
        }
    }

    fn split(&self, x: &CMat) -> (CMat, CMat) {
        (
            gather_rows(x, &self.redundant),
            gather_rows(x, &self.skeleton),
        )
    }

    fn join(&self, xr: &CMat, xs: &CMat) -> CMat {
        let mut out = CMat::zeros(self.indices.len(), 1);
        for (p, &l) in self.redundant.iter().enumerate() {
            out[(l, 0)] = xr[(p, 0)];
        }
        for (p, &l) in self.skeleton.iter().enumerate() {
            out[(l, 0)] = xs[(p, 0)];
        }
        out
    }

    /// F x with F = S Z M: elimination, zeroing, then un-scaling.
    pub fn apply_local(&self, x: &CMat) -> CMat {
        let (xr, xs) = self.split(x);
        let pr = if self.redundant.is_empty() {
            xr
        } else {
            solve_lower_adjoint(&self.chol, &xr) - &self.coupling * &xs
        };
        let ys = &xs - &self.interp * &pr;
        let y = self.join(&pr, &ys);
        match &self.scale {
            None => y,
            Some(s) => solve_lower_adjoint(s, &y),
        }
    }

    /// F^* x.
    pub fn apply_adjoint_local(&self, x: &CMat) -> CMat {
        let x = match &self.scale {
            None => x.clone(),
            Some(s) => solve_lower(s, x),
        };
        let (xr, xs) = self.split(&x);
        let zr = &xr - self.interp.adjoint() * &xs;
        let yr = if self.redundant.is_empty() {
            zr.clone()
        } else {
            solve_lower(&self.chol, &zr)
        };
        let ys = &xs - self.coupling.adjoint() * &zr;
        self.join(&yr, &ys)
    }

    /// F^{-1} x.
    pub fn apply_inverse_local(&self, x: &CMat) -> CMat {
        let x = match &self.scale {
            None => x.clone(),
            Some(s) => s.adjoint() * x,
        };
        let (xr, xs) = self.split(&x);
        let as_ = &xs + &self.interp * &xr;
        let yr = if self.redundant.is_empty() {
            xr
        } else {
            self.chol.adjoint() * (&xr + &self.coupling * &as_)
        };
        self.join(&yr, &as_)
    }

    /// F^{-*} x.
    pub fn apply_inverse_adjoint_local(&self, x: &CMat) -> CMat {
        let (xr, xs) = self.split(x);
        let ar = if self.redundant.is_empty() {
            xr
        } else {
            &self.chol * &xr
        };
        let as_ = &xs + self.coupling.adjoint() * &ar;
        let yr = &ar + self.interp.adjoint() * &as_;
        let y = self.join(&yr, &as_);
        match &self.scale {
            None => y,
            Some(s) => s * y,
        }
    }

    fn apply_global(&self, x: &mut CVec) {
        let local = gather_vec(x, &self.indices);
        let y = self.apply_local(&local);
        for (p, &g) in self.indices.iter().enumerate() {
            x[g] = y[(p, 0)];
        }
    }

    fn apply_adjoint_global(&self, x: &mut CVec) {
        let local = gather_vec(x, &self.indices);
        let y = self.apply_adjoint_local(&local);
        for (p, &g) in self.indices.iter().enumerate() {
            x[g] = y[(p, 0)];
        }
    }

    /// Dense local matrix of the combined transform (diagnostics/tests).
    pub fn to_dense_local(&self) -> CMat {
        let m = self.indices.len();
        let mut out = CMat::zeros(m, m);
        for j in 0..m {
            let mut e = CMat::zeros(m, 1);
            e[(j, 0)] = C64::new(1.0, 0.0);
            out.set_column(j, &CVec::from_column_slice(self.apply_local(&e).as_slice()));
        }
        out
    }
}

impl InverseFactorization {
    /// Total stored scalars across all factors and the root inverse.
    pub fn nnz(&self) -> usize {
        self.root.len()
            + self
                .factors
                .iter()
                .map(|f| {
                    f.interp.len()
                        + f.chol.len()
                        + f.coupling.len()
                        + f.scale.as_ref().map_or(0, |s| s.len())
                })
                .sum::<usize>()
    }
}

/// Apply the inverse factorization: R_L ... R_1 A_root^{-1} R_1^* ... R_L^*.
pub fn apply_inverse(g: &InverseFactorization, v: &CVec) -> Result<CVec> {
    if v.len() != g.n {
        return Err(FioError::DimensionMismatch {
            expected: g.n,
            got: v.len(),
        });
    }
    let mut w = v.clone();
    for f in &g.factors {
        f.apply_adjoint_global(&mut w);
    }
    if !g.root_indices.is_empty() {
        let local = gather_vec(&w, &g.root_indices);
        let block = CMat::from_column_slice(local.len(), 1, local.as_slice());
        let y = g.root.solve(&block);
        for (p, &gi) in g.root_indices.iter().enumerate() {
            w[gi] = y[(p, 0)];
        }
    }
    for f in g.factors.iter().rev() {
        f.apply_global(&mut w);
    }
    Ok(w)
}

fn invert_root(diag: &CMat, ctx: &str) -> Result<RootSolver> {
    if diag.nrows() == 0 {
        return Ok(RootSolver::Inverse(CMat::zeros(0, 0)));
    }
    let h = hermitize(diag);
    if let Ok(l) = cholesky_jitter(&h) {
        return Ok(RootSolver::Cholesky(l));
    }
    let inv = h
        .lu()
        .try_inverse()
        .ok_or_else(|| FioError::invalid(format!("{ctx}: root block is singular")))?;
    Ok(RootSolver::Inverse(hermitize(&inv)))
}

fn check_tol(tol: f64) -> Result<()> {
    if !(tol > 0.0 && tol < 1.0) {
        return Err(FioError::invalid(
            "skeletonization tolerance must lie in (0, 1)",
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 1D recursive skeletonization
// ---------------------------------------------------------------------------

struct Node1 {
    /// Global active indices, local order.
    idx: Vec<usize>,
    /// Current diagonal block over `idx`.
    diag: CMat,
    /// bases[j-1]: rows of the HODLR basis at ancestor level j restricted to
    /// the active set (right factor on the low side, left factor on the high
    /// side), in current coordinates.
    bases: Vec<CMat>,
}

/// Invert an HODLR matrix by recursive skeletonization. When the plain
/// elimination hits an indefinite pivot the scaled variant is retried
/// automatically.
pub fn invert_hodlr(h: &HodlrMatrix, tol: f64, scaled: bool) -> Result<InverseFactorization> {
    match invert_hodlr_inner(h, tol, scaled) {
        Err(FioError::NotPositiveDefinite { .. }) if !scaled => {
            let mut g = invert_hodlr_inner(h, tol, true)?;
            g.warnings.push(
                "plain elimination hit an indefinite pivot; retried with scaled skeletonization"
                    .to_string(),
            );
            Ok(g)
        }
        other => other,
    }
}

fn invert_hodlr_inner(h: &HodlrMatrix, tol: f64, scaled: bool) -> Result<InverseFactorization> {
    check_tol(tol)?;
    let tree = &h.tree;
    if tree.dim != 1 {
        return Err(FioError::invalid("invert_hodlr expects a 1D tree"));
    }
    let n = tree.cells_at(0)[0].indices.len();
    let big_l = tree.levels;

    // leaves
    let leaves = tree.cells_at(big_l);
    let mut nodes: Vec<Node1> = Vec::with_capacity(leaves.len());
    for (i, cell) in leaves.iter().enumerate() {
        let idx = cell.indices.clone();
        let mut bases = Vec::with_capacity(big_l);
        for j in 1..=big_l {
            let a = i >> (big_l - j);
            let f = &h.offdiag[j - 1][a >> 1];
            let start = tree.cells_at(j)[a].indices[0];
            let pos: Vec<usize> = idx.iter().map(|&g| g - start).collect();
            let basis = if a & 1 == 1 {
                gather_rows(&f.left, &pos)
            } else {
                gather_rows(&f.right, &pos)
            };
            bases.push(basis);
        }
        nodes.push(Node1 {
            idx,
            diag: h.diag[i].clone(),
            bases,
        });
    }

    let mut factors = Vec::new();
    let mut history = Vec::new();
    for l in (1..=big_l).rev() {
        for (i, node) in nodes.iter_mut().enumerate() {
            if node.idx.is_empty() {
                continue;
            }
            let m = node.idx.len();
            let blocks: Vec<CMat> = (1..=l)
                .rev()
                .map(|j| {
                    let a = i >> (l - j);
                    let f = &h.offdiag[j - 1][a >> 1];
                    let basis = &node.bases[j - 1];
                    if a & 1 == 1 {
                        f.mid.adjoint() * basis.adjoint()
                    } else {
                        &f.mid * basis.adjoint()
                    }
                })
                .collect();
            let stack = vstack(&blocks, m);
            let ctx = format!("skeletonization at level {l}, node {i}");
            let elim = eliminate(&node.diag, &stack, tol, scaled, &[m], &ctx)?;
            factors.push(SkeletonFactor::from_elim(
                FactorKind::Node,
                l,
                node.idx.clone(),
                &elim,
            ));
            node.idx = elim.skeleton.iter().map(|&p| node.idx[p]).collect();
            node.diag = elim.diag_new.clone();
            for b in node.bases.iter_mut() {
                *b = elim.xform.rows(b);
            }
        }
        history.push(ActiveSet {
            level: l,
            kind: FactorKind::Node,
            indices: nodes.iter().flat_map(|nd| nd.idx.iter().copied()).collect(),
        });

        // merge sibling pairs into their parents
        let mut parents = Vec::with_capacity(nodes.len() / 2);
        let mut it = nodes.into_iter();
        let mut p = 0usize;
        while let (Some(lo), Some(hi)) = (it.next(), it.next()) {
            let f = &h.offdiag[l - 1][p];
            // A_{hi, lo} restricted to the surviving coordinates
            let c = &hi.bases[l - 1] * &f.mid * lo.bases[l - 1].adjoint();
            let nl = lo.idx.len();
            let nh = hi.idx.len();
            let mut d = CMat::zeros(nl + nh, nl + nh);
            d.view_mut((0, 0), (nl, nl)).copy_from(&lo.diag);
            d.view_mut((nl, nl), (nh, nh)).copy_from(&hi.diag);
            d.view_mut((nl, 0), (nh, nl)).copy_from(&c);
            d.view_mut((0, nl), (nl, nh)).copy_from(&c.adjoint());
            let mut idx = lo.idx;
            idx.extend_from_slice(&hi.idx);
            let bases: Vec<CMat> = (1..l)
                .map(|j| {
                    let w = lo.bases[j - 1].ncols();
                    vstack(&[lo.bases[j - 1].clone(), hi.bases[j - 1].clone()], w)
                })
                .collect();
            parents.push(Node1 { idx, diag: d, bases });
            p += 1;
        }
        nodes = parents;
    }

    debug_assert_eq!(nodes.len(), 1);
    let root_node = nodes.pop().unwrap();
    let root = invert_root(&root_node.diag, "invert_hodlr")?;
    Ok(InverseFactorization {
        n,
        factors,
        root_indices: root_node.idx,
        root,
        active_history: history,
        scaled,
        warnings: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// 2D cell-then-edge skeletonization
// ---------------------------------------------------------------------------

type FarKey = (usize, usize, usize); // (level, row cell, col cell) with row < col

struct State2 {
    /// Active global indices per cell at the current level.
    act: Vec<Vec<usize>>,
    /// Dense blocks for neighbor pairs (i <= j).
    near: HashMap<(usize, usize), CMat>,
    /// Per cell: far-field basis rows in current coordinates, keyed by the
    /// interaction pair they belong to.
    fars: Vec<BTreeMap<FarKey, CMat>>,
}

fn cell_ranges(tree: &ClusterTree, level: usize, coords: [usize; 2]) -> (usize, usize, usize, usize) {
    let cells = 1usize << level;
    let n = tree.n;
    let a1 = coords[0] * n / cells;
    let b1 = (coords[0] + 1) * n / cells;
    let a2 = coords[1] * n / cells;
    let b2 = (coords[1] + 1) * n / cells;
    (a1, b1, a2, b2)
}

fn pos_in_cell(tree: &ClusterTree, level: usize, coords: [usize; 2], g: usize) -> usize {
    let (a1, _b1, a2, b2) = cell_ranges(tree, level, coords);
    let p = g / tree.n;
    let q = g % tree.n;
    (p - a1) * (b2 - a2) + (q - a2)
}

/// Current dense interaction block (rows cell `a`, cols cell `b`) at level
/// `level`, a != b: from the near map when adjacent, otherwise through the
/// far-field bases. Returns None when the pair carries no stored interaction.
fn block_between(h: &HMatrix2D, st: &State2, level: usize, a: usize, b: usize) -> Option<CMat> {
    debug_assert_ne!(a, b);
    let key = (a.min(b), a.max(b));
    if h.lists[level - 1].neighbor[a].contains(&b) {
        let blk = st.near.get(&key)?;
        return Some(if a < b { blk.clone() } else { blk.adjoint() });
    }
    let fkey = (level, key.0, key.1);
    let f = h.lowrank.get(level - 2)?.get(&(key.0, key.1))?;
    let ba = st.fars[a].get(&fkey)?;
    let bb = st.fars[b].get(&fkey)?;
    Some(if a < b {
        ba * &f.mid * bb.adjoint()
    } else {
        ba * f.mid.adjoint() * bb.adjoint()
    })
}

/// Invert a 2D H-matrix by cell-then-edge skeletonization. When the plain
/// elimination hits an indefinite pivot the scaled variant is retried
/// automatically.
pub fn invert_hmatrix2d(h: &HMatrix2D, tol: f64, scaled: bool) -> Result<InverseFactorization> {
    match invert_hmatrix2d_inner(h, tol, scaled) {
        Err(FioError::NotPositiveDefinite { .. }) if !scaled => {
            let mut g = invert_hmatrix2d_inner(h, tol, true)?;
            g.warnings.push(
                "plain elimination hit an indefinite pivot; retried with scaled skeletonization"
                    .to_string(),
            );
            Ok(g)
        }
        other => other,
    }
}

fn invert_hmatrix2d_inner(h: &HMatrix2D, tol: f64, scaled: bool) -> Result<InverseFactorization> {
    check_tol(tol)?;
    let tree = &h.tree;
    if tree.dim != 2 {
        return Err(FioError::invalid("invert_hmatrix2d expects a 2D tree"));
    }
    let big_l = tree.levels;
    if big_l < 2 {
        return Err(FioError::invalid("invert_hmatrix2d needs tree depth >= 2"));
    }
    let n = tree.cells_at(0)[0].indices.len();

    // initialize the state at the leaf level
    let leaves = tree.cells_at(big_l);
    let mut st = State2 {
        act: leaves.iter().map(|c| c.indices.clone()).collect(),
        near: h.nearfield.clone(),
        fars: vec![BTreeMap::new(); leaves.len()],
    };
    for (ci, cell) in leaves.iter().enumerate() {
        for j in 2..=big_l {
            let shift = big_l - j;
            let anc_coords = [cell.coords[0] >> shift, cell.coords[1] >> shift];
            let anc = tree.cell_index(j, anc_coords);
            for (&(a, b), f) in &h.lowrank[j - 2] {
                if a != anc && b != anc {
                    continue;
                }
                let pos: Vec<usize> = cell
                    .indices
                    .iter()
                    .map(|&g| pos_in_cell(tree, j, anc_coords, g))
                    .collect();
                let basis = if a == anc {
                    gather_rows(&f.left, &pos)
                } else {
                    gather_rows(&f.right, &pos)
                };
                st.fars[ci].insert((j, a, b), basis);
            }
        }
    }

    let mut factors = Vec::new();
    let mut history = Vec::new();
    let mut warnings = Vec::new();
    let mut level = big_l;
    loop {
        let ncell = tree.num_cells(level);
        let nl = &h.lists[level - 1].neighbor;

        // ---- phase A: cell skeletonization (stacks frozen at level entry)
        let mut cell_elims: Vec<Option<Elim>> = Vec::with_capacity(ncell);
        for i in 0..ncell {
            if st.act[i].is_empty() {
                cell_elims.push(None);
                continue;
            }
            let m = st.act[i].len();
            let mut blocks = Vec::new();
            for &b in &nl[i] {
                if b == i || st.act[b].is_empty() {
                    continue;
                }
                if let Some(blk) = block_between(h, &st, level, b, i) {
                    blocks.push(blk);
                }
            }
            for ((j, a, bb), basis) in &st.fars[i] {
                let f = &h.lowrank[j - 2][&(*a, *bb)];
                let anc_is_row = {
                    let shift = level - j;
                    let cc = tree.cells_at(level)[i].coords;
                    tree.cell_index(*j, [cc[0] >> shift, cc[1] >> shift]) == *a
                };
                blocks.push(if anc_is_row {
                    f.mid.adjoint() * basis.adjoint()
                } else {
                    &f.mid * basis.adjoint()
                });
            }
            let stack = vstack(&blocks, m);
            let ctx = format!("cell skeletonization at level {level}, cell {i}");
            cell_elims.push(Some(eliminate(
                &st.near[&(i, i)],
                &stack,
                tol,
                scaled,
                &[m],
                &ctx,
            )?));
        }
        // apply the cell transforms
        let xforms: Vec<Option<&Xform>> = cell_elims
            .iter()
            .map(|e| e.as_ref().map(|e| &e.xform))
            .collect();
        let mut new_near = HashMap::new();
        for (&(i, j), blk) in &st.near {
            if i == j {
                continue;
            }
            let mut b = blk.clone();
            if let Some(x) = xforms[i] {
                b = x.rows(&b);
            }
            if let Some(x) = xforms[j] {
                b = x.cols(&b);
            }
            new_near.insert((i, j), b);
        }
        for (i, elim) in cell_elims.iter().enumerate() {
            match elim {
                Some(e) => {
                    new_near.insert((i, i), e.diag_new.clone());
                    factors.push(SkeletonFactor::from_elim(
                        FactorKind::Cell,
                        level,
                        st.act[i].clone(),
                        e,
                    ));
                    st.act[i] = e.skeleton.iter().map(|&p| st.act[i][p]).collect();
                    for basis in st.fars[i].values_mut() {
                        *basis = e.xform.rows(basis);
                    }
                }
                None => {
                    if let Some(d) = st.near.get(&(i, i)) {
                        new_near.insert((i, i), d.clone());
                    }
                }
            }
        }
        st.near = new_near;
        history.push(ActiveSet {
            level,
            kind: FactorKind::Cell,
            indices: st.act.iter().flatten().copied().collect(),
        });

        // ---- phase B: edge skeletonization
        let side = tree.side(level);
        // edge key (axis, ex, ey): axis 0 separates cells (ex-1, ey) | (ex, ey)
        // along the first grid coordinate; axis 1 separates (ex, ey-1) | (ex, ey).
        let mut edges: BTreeMap<(usize, usize, usize), Vec<(usize, usize)>> = BTreeMap::new();
        for i in 0..ncell {
            let cc = tree.cells_at(level)[i].coords;
            let (a1, b1, a2, b2) = cell_ranges(tree, level, cc);
            for (pos, &g) in st.act[i].iter().enumerate() {
                let p = g / tree.n;
                let q = g % tree.n;
                let cands = [
                    (p - a1, (0usize, cc[0], cc[1])),
                    (b1 - 1 - p, (0, (cc[0] + 1) % side, cc[1])),
                    (q - a2, (1, cc[0], cc[1])),
                    (b2 - 1 - q, (1, cc[0], (cc[1] + 1) % side)),
                ];
                let best = cands
                    .iter()
                    .min_by_key(|(d, (ax, ex, ey))| (*d, *ax, *ex, *ey))
                    .unwrap();
                edges.entry(best.1).or_default().push((i, pos));
            }
        }

        struct EdgeWork {
            cells: Vec<usize>,
            /// members[c]: positions in act[cells[c]] assigned to this edge.
            members: Vec<Vec<usize>>,
            elim: Elim,
        }
        let in_edge: HashSet<(usize, usize)> = edges
            .values()
            .flat_map(|v| v.iter().copied())
            .collect();
        debug_assert_eq!(
            in_edge.len(),
            st.act.iter().map(|a| a.len()).sum::<usize>()
        );
        let mut edge_works: Vec<EdgeWork> = Vec::new();
        for (&(axis, ex, ey), raw) in &edges {
            // the two cells adjacent to this edge
            let (ca, cb) = if axis == 0 {
                (
                    tree.cell_index(level, [(ex + side - 1) % side, ey]),
                    tree.cell_index(level, [ex, ey]),
                )
            } else {
                (
                    tree.cell_index(level, [ex, (ey + side - 1) % side]),
                    tree.cell_index(level, [ex, ey]),
                )
            };
            let pair = if ca <= cb { [ca, cb] } else { [cb, ca] };
            let mut cells = Vec::new();
            let mut members: Vec<Vec<usize>> = Vec::new();
            for &c in &pair {
                let mine: Vec<usize> = raw
                    .iter()
                    .filter(|(cc, _)| *cc == c)
                    .map(|(_, pos)| *pos)
                    .collect();
                if !mine.is_empty() {
                    cells.push(c);
                    members.push(mine);
                }
            }
            if cells.is_empty() {
                continue;
            }
            let idx_local: Vec<(usize, usize)> = cells
                .iter()
                .zip(&members)
                .flat_map(|(&c, ms)| ms.iter().map(move |&p| (c, p)))
                .collect();
            let m = idx_local.len();
            // diagonal block of the edge set
            let mut d = CMat::zeros(m, m);
            for (r, &(cr, pr)) in idx_local.iter().enumerate() {
                for (c, &(cc2, pc)) in idx_local.iter().enumerate() {
                    let v = if cr == cc2 {
                        st.near[&(cr, cr)][(pr, pc)]
                    } else {
                        let key = (cr.min(cc2), cr.max(cc2));
                        let blk = &st.near[&key];
                        if cr < cc2 {
                            blk[(pr, pc)]
                        } else {
                            blk[(pc, pr)].conj()
                        }
                    };
                    d[(r, c)] = v;
                }
            }
            // stack: near-field plus interior rows, then far bases per cell
            let mut bcells: Vec<usize> = nl[pair[0]]
                .iter()
                .chain(nl[pair[1]].iter())
                .copied()
                .collect();
            bcells.sort_unstable();
            bcells.dedup();
            let mut blocks = Vec::new();
            for &b in &bcells {
                if st.act[b].is_empty() {
                    continue;
                }
                let rows: Vec<usize> = (0..st.act[b].len())
                    .filter(|&p| !idx_local.contains(&(b, p)))
                    .collect();
                if rows.is_empty() {
                    continue;
                }
                let mut blk = CMat::zeros(rows.len(), m);
                let mut col0 = 0usize;
                for (&c, ms) in cells.iter().zip(&members) {
                    let w = ms.len();
                    let full = if b == c {
                        Some(st.near[&(b, b)].clone())
                    } else {
                        block_between(h, &st, level, b, c)
                    };
                    if let Some(full) = full {
                        let sub = submatrix(&full, &rows, ms);
                        blk.view_mut((0, col0), (rows.len(), w)).copy_from(&sub);
                    }
                    col0 += w;
                }
                blocks.push(blk);
            }
            for (ci, (&c, ms)) in cells.iter().zip(&members).enumerate() {
                let col0: usize = members[..ci].iter().map(|v| v.len()).sum();
                for ((j, a, bb), basis) in &st.fars[c] {
                    let f = &h.lowrank[j - 2][&(*a, *bb)];
                    let cc = tree.cells_at(level)[c].coords;
                    let shift = level - j;
                    let anc_is_row = tree.cell_index(*j, [cc[0] >> shift, cc[1] >> shift]) == *a;
                    let restricted = gather_rows(basis, ms);
                    let part = if anc_is_row {
                        f.mid.adjoint() * restricted.adjoint()
                    } else {
                        &f.mid * restricted.adjoint()
                    };
                    let mut blk = CMat::zeros(part.nrows(), m);
                    blk.view_mut((0, col0), (part.nrows(), part.ncols()))
                        .copy_from(&part);
                    blocks.push(blk);
                }
            }
            let stack = vstack(&blocks, m);
            let parts: Vec<usize> = members.iter().map(|v| v.len()).collect();
            let ctx = format!(
                "edge skeletonization at level {level}, edge ({axis}, {ex}, {ey})"
            );
            let elim = eliminate(&d, &stack, tol, scaled, &parts, &ctx)?;
            let indices: Vec<usize> = idx_local.iter().map(|&(c, p)| st.act[c][p]).collect();
            factors.push(SkeletonFactor::from_elim(
                FactorKind::Edge,
                level,
                indices,
                &elim,
            ));
            edge_works.push(EdgeWork {
                cells,
                members,
                elim,
            });
        }

        // assemble the per-cell transforms from the edge eliminations
        // survivors keep their position order within each cell's active list
        let mut surv: Vec<Vec<usize>> = vec![Vec::new(); ncell]; // old positions
        let mut dense_cols: Vec<HashMap<usize, CVec>> = vec![HashMap::new(); ncell];
        for w in &edge_works {
            let e = &w.elim;
            let idx_local: Vec<(usize, usize)> = w
                .cells
                .iter()
                .zip(&w.members)
                .flat_map(|(&c, ms)| ms.iter().map(move |&p| (c, p)))
                .collect();
            for (srank, &sloc) in e.skeleton.iter().enumerate() {
                let (c, pos) = idx_local[sloc];
                surv[c].push(pos);
                if let Xform::Dense(x) = &e.xform {
                    // the column for this survivor, restricted to its own cell
                    let mut col = CVec::zeros(st.act[c].len());
                    for (r, &(cr, pr)) in idx_local.iter().enumerate() {
                        if cr == c {
                            col[pr] = x[(r, srank)];
                        }
                    }
                    dense_cols[c].insert(pos, col);
                }
            }
        }
        let mut edge_xforms: Vec<Option<Xform>> = Vec::with_capacity(ncell);
        for i in 0..ncell {
            surv[i].sort_unstable();
            if st.act[i].is_empty() {
                edge_xforms.push(None);
                continue;
            }
            if dense_cols[i].is_empty() {
                edge_xforms.push(Some(Xform::Select(surv[i].clone())));
            } else {
                let mut x = CMat::zeros(st.act[i].len(), surv[i].len());
                for (cidx, &pos) in surv[i].iter().enumerate() {
                    x.set_column(cidx, &dense_cols[i][&pos]);
                }
                edge_xforms.push(Some(Xform::Dense(x)));
            }
        }
        // transform all near blocks, then overwrite same-edge skeleton entries
        let mut new_near = HashMap::new();
        for (&(i, j), blk) in &st.near {
            let mut b = blk.clone();
            if let Some(x) = &edge_xforms[i] {
                b = x.rows(&b);
            }
            if let Some(x) = &edge_xforms[j] {
                b = x.cols(&b);
            }
            new_near.insert((i, j), b);
        }
        // new position of each survivor within its cell
        let new_pos: Vec<HashMap<usize, usize>> = surv
            .iter()
            .map(|s| s.iter().enumerate().map(|(q, &p)| (p, q)).collect())
            .collect();
        for w in &edge_works {
            let e = &w.elim;
            let idx_local: Vec<(usize, usize)> = w
                .cells
                .iter()
                .zip(&w.members)
                .flat_map(|(&c, ms)| ms.iter().map(move |&p| (c, p)))
                .collect();
            for (r, &lr) in e.skeleton.iter().enumerate() {
                let (cr, pr) = idx_local[lr];
                let qr = new_pos[cr][&pr];
                for (c, &lc) in e.skeleton.iter().enumerate() {
                    let (cc2, pc) = idx_local[lc];
                    let qc = new_pos[cc2][&pc];
                    let v = e.diag_new[(r, c)];
                    if cr <= cc2 {
                        if let Some(b) = new_near.get_mut(&(cr, cc2)) {
                            b[(qr, qc)] = v;
                        }
                    } else if let Some(b) = new_near.get_mut(&(cc2, cr)) {
                        b[(qc, qr)] = v.conj();
                    }
                }
            }
        }
        st.near = new_near;
        for i in 0..ncell {
            if let Some(x) = &edge_xforms[i] {
                for basis in st.fars[i].values_mut() {
                    *basis = x.rows(basis);
                }
                st.act[i] = surv[i].iter().map(|&p| st.act[i][p]).collect();
            }
        }
        history.push(ActiveSet {
            level,
            kind: FactorKind::Edge,
            indices: st.act.iter().flatten().copied().collect(),
        });

        if level == 2 {
            break;
        }

        // ---- merge four children into each parent cell
        let pl = level - 1;
        let pcount = tree.num_cells(pl);
        let plists = &h.lists[pl - 1].neighbor;
        let mut pact: Vec<Vec<usize>> = Vec::with_capacity(pcount);
        let mut offsets: Vec<Vec<usize>> = Vec::with_capacity(pcount); // child offsets
        for p in 0..pcount {
            let mut idx = Vec::new();
            let mut offs = Vec::new();
            for c in tree.child_indices(pl, p) {
                offs.push(idx.len());
                idx.extend_from_slice(&st.act[c]);
            }
            offsets.push(offs);
            pact.push(idx);
        }
        let mut pnear: HashMap<(usize, usize), CMat> = HashMap::new();
        for p in 0..pcount {
            for &q in &plists[p] {
                if q < p {
                    continue;
                }
                let rows = pact[p].len();
                let cols = pact[q].len();
                let mut blk = CMat::zeros(rows, cols);
                let pch = tree.child_indices(pl, p);
                let qch = tree.child_indices(pl, q);
                for (ai, &a) in pch.iter().enumerate() {
                    for (bi, &b) in qch.iter().enumerate() {
                        let sub = if a == b {
                            Some(st.near[&(a, a)].clone())
                        } else {
                            block_between(h, &st, level, a, b)
                        };
                        if let Some(sub) = sub {
                            blk.view_mut(
                                (offsets[p][ai], offsets[q][bi]),
                                (sub.nrows(), sub.ncols()),
                            )
                            .copy_from(&sub);
                        } else if !st.act[a].is_empty() && !st.act[b].is_empty() {
                            warnings.push(format!(
                                "missing interaction between cells {a} and {b} at level {level}"
                            ));
                        }
                    }
                }
                pnear.insert((p, q), if p == q { hermitize(&blk) } else { blk });
            }
        }
        let mut pfars: Vec<BTreeMap<FarKey, CMat>> = Vec::with_capacity(pcount);
        for p in 0..pcount {
            let mut map = BTreeMap::new();
            let pch = tree.child_indices(pl, p);
            let keys: Vec<FarKey> = st.fars[pch[0]]
                .keys()
                .filter(|(j, _, _)| *j <= pl)
                .copied()
                .collect();
            for key in keys {
                let blocks: Vec<CMat> = pch.iter().map(|&c| st.fars[c][&key].clone()).collect();
                let w = blocks[0].ncols();
                map.insert(key, vstack(&blocks, w));
            }
            pfars.push(map);
        }
        st = State2 {
            act: pact,
            near: pnear,
            fars: pfars,
        };
        level = pl;
    }

    // ---- root: every pair of level-2 cells is either near or far
    let ncell = tree.num_cells(2);
    let mut root_indices = Vec::new();
    let mut offs = Vec::with_capacity(ncell);
    for i in 0..ncell {
        offs.push(root_indices.len());
        root_indices.extend_from_slice(&st.act[i]);
    }
    let m = root_indices.len();
    let mut root = CMat::zeros(m, m);
    for i in 0..ncell {
        for j in 0..ncell {
            let sub = if i == j {
                Some(st.near[&(i, i)].clone())
            } else {
                block_between(h, &st, 2, i, j)
            };
            if let Some(sub) = sub {
                root.view_mut((offs[i], offs[j]), (sub.nrows(), sub.ncols()))
                    .copy_from(&sub);
            } else if !st.act[i].is_empty() && !st.act[j].is_empty() {
                warnings.push(format!(
                    "missing interaction between cells {i} and {j} at the root"
                ));
            }
        }
    }
    let root = invert_root(&root, "invert_hmatrix2d")?;
    Ok(InverseFactorization {
        n,
        factors,
        root_indices,
        root,
        active_history: history,
        scaled,
        warnings,
    })
}
