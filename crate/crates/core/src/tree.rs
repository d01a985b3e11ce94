//! Dyadic (1D) and quad (2D) cluster trees over the spatial and frequency
//! grids, admissibility tests and the periodic neighbor/interaction lists used
//! by the 2D H-matrix peeling.

use crate::error::{FioError, Result};
use crate::problem::Grid;

/// One cell of a cluster tree: an axis-aligned box of grid points at a level.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Cell {
    pub level: usize,
    /// Integer cell coordinates at this level (second component 0 in 1D).
    pub coords: [usize; 2],
    /// Grid indices covered by the cell, in grid ordering.
    pub indices: Vec<usize>,
    /// Normalized bounding box on the torus [0,1)^d.
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

/// Uniform cluster tree of depth `levels`; level 0 is the root, level
/// `levels` holds the leaves. In 2D level l has 2^l x 2^l cells stored
/// row-major.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ClusterTree {
    pub dim: usize,
    pub n: usize,
    pub levels: usize,
    /// cells[l] for l = 0..=levels.
    pub cells: Vec<Vec<Cell>>,
}

/// Per-cell neighbor and interaction lists at one level of a tree.
#[derive(Debug, Clone)]
pub struct CellLists {
    pub neighbor: Vec<Vec<usize>>,
    pub interaction: Vec<Vec<usize>>,
}

fn side_range(n: usize, cells: usize, i: usize) -> (usize, usize) {
    (i * n / cells, (i + 1) * n / cells)
}

impl ClusterTree {
    /// Build a tree with an explicit depth.
    pub fn with_depth(grid: &Grid, levels: usize) -> Result<ClusterTree> {
        let n = grid.n;
        if levels == 0 || (1usize << levels) > n {
            return Err(FioError::invalid(format!(
                "tree depth {levels} invalid for n = {n}"
            )));
        }
        let dim = grid.dim;
        let mut all = Vec::with_capacity(levels + 1);
        for l in 0..=levels {
            let m = 1usize << l;
            let mut lvl = Vec::new();
            if dim == 1 {
                for i in 0..m {
                    let (a, b) = side_range(n, m, i);
                    lvl.push(Cell {
                        level: l,
                        coords: [i, 0],
                        indices: (a..b).collect(),
                        lo: [a as f64 / n as f64, 0.0],
                        hi: [b as f64 / n as f64, 1.0],
                    });
                }
            } else {
                for i in 0..m {
                    for j in 0..m {
                        let (a1, b1) = side_range(n, m, i);
                        let (a2, b2) = side_range(n, m, j);
                        let mut idx = Vec::with_capacity((b1 - a1) * (b2 - a2));
                        for p in a1..b1 {
                            for q in a2..b2 {
                                idx.push(p * n + q);
                            }
                        }
                        lvl.push(Cell {
                            level: l,
                            coords: [i, j],
                            indices: idx,
                            lo: [a1 as f64 / n as f64, a2 as f64 / n as f64],
                            hi: [b1 as f64 / n as f64, b2 as f64 / n as f64],
                        });
                    }
                }
            }
            all.push(lvl);
        }
        Ok(ClusterTree {
            dim,
            n,
            levels,
            cells: all,
        })
    }

    /// Build a tree whose leaves hold roughly `leaf_size` points
    /// (between leaf_size/2 and 2*leaf_size).
    pub fn build(grid: &Grid, leaf_size: usize) -> Result<ClusterTree> {
        let total = grid.size();
        if leaf_size == 0 || total < 2 * leaf_size {
            return Err(FioError::invalid(format!(
                "grid of {total} points too small for leaf size {leaf_size}"
            )));
        }
        let dim = grid.dim as u32;
        let mut best: Option<(usize, f64)> = None;
        let mut l = 1usize;
        while (1usize << l) <= grid.n {
            let per_leaf = (grid.n / (1 << l)).pow(dim).max(1);
            let score = (per_leaf as f64 / leaf_size as f64).ln().abs();
            if best.map_or(true, |(_, s)| score < s) {
                best = Some((l, score));
            }
            l += 1;
        }
        let (levels, _) = best.unwrap();
        ClusterTree::with_depth(grid, levels)
    }

    pub fn cells_at(&self, level: usize) -> &[Cell] {
        &self.cells[level]
    }

    pub fn num_cells(&self, level: usize) -> usize {
        self.cells[level].len()
    }

    /// Cells per side at a level.
    pub fn side(&self, level: usize) -> usize {
        1usize << level
    }

    pub fn cell_index(&self, level: usize, coords: [usize; 2]) -> usize {
        if self.dim == 1 {
            coords[0]
        } else {
            coords[0] * self.side(level) + coords[1]
        }
    }

    pub fn parent_index(&self, level: usize, cell: usize) -> usize {
        let c = &self.cells[level][cell];
        self.cell_index(level - 1, [c.coords[0] / 2, c.coords[1] / 2])
    }

    /// Children cell indices at level + 1, in row-major order.
    pub fn child_indices(&self, level: usize, cell: usize) -> Vec<usize> {
        let c = &self.cells[level][cell];
        let [i, j] = c.coords;
        if self.dim == 1 {
            vec![2 * i, 2 * i + 1]
        } else {
            let mut out = Vec::with_capacity(4);
            for di in 0..2 {
                for dj in 0..2 {
                    out.push(self.cell_index(level + 1, [2 * i + di, 2 * j + dj]));
                }
            }
            out
        }
    }

    /// Combinatorial adjacency: index distance at most 1 per dimension,
    /// wrapped when `periodic`.
    pub fn adjacent(&self, level: usize, a: usize, b: usize, periodic: bool) -> bool {
        let m = self.side(level);
        let ca = self.cells[level][a].coords;
        let cb = self.cells[level][b].coords;
        let dims = self.dim;
        (0..dims).all(|d| {
            let delta = ca[d].abs_diff(cb[d]);
            let dist = if periodic { delta.min(m - delta) } else { delta };
            dist <= 1
        })
    }

    /// Neighbor and interaction lists at a level: NL(I) is I plus adjacent
    /// cells, IL(I) is children of NL(parent(I)) minus NL(I).
    pub fn neighbor_and_interaction_lists(&self, level: usize, periodic: bool) -> CellLists {
        assert!(level >= 1 && level <= self.levels);
        let count = self.num_cells(level);
        let neighbor: Vec<Vec<usize>> = (0..count)
            .map(|i| {
                let mut nl: Vec<usize> = (0..count)
                    .filter(|&j| self.adjacent(level, i, j, periodic))
                    .collect();
                nl.sort_unstable();
                nl
            })
            .collect();
        let parent_lists = if level == 1 {
            vec![vec![0usize]]
        } else {
            self.neighbor_and_interaction_lists(level - 1, periodic).neighbor
        };
        let interaction: Vec<Vec<usize>> = (0..count)
            .map(|i| {
                let p = self.parent_index(level, i);
                let mut il: Vec<usize> = parent_lists[p]
                    .iter()
                    .flat_map(|&q| self.child_indices(level - 1, q))
                    .filter(|c| !neighbor[i].contains(c))
                    .collect();
                il.sort_unstable();
                il.dedup();
                il
            })
            .collect();
        CellLists {
            neighbor,
            interaction,
        }
    }
}

/// Gap between two arcs [a1,b1) and [a2,b2) on the unit circle.
fn arc_gap(a1: f64, b1: f64, a2: f64, b2: f64) -> f64 {
    let g1 = (a2 - b1).rem_euclid(1.0);
    let g2 = (a1 - b2).rem_euclid(1.0);
    // arcs overlap when both wrapped gaps exceed the complementary spans
    let len1 = b1 - a1;
    let len2 = b2 - a2;
    if g1 + len1 + len2 > 1.0 && g2 + len1 + len2 > 1.0 {
        return 0.0;
    }
    g1.min(g2)
}

/// Strong admissibility test with the torus metric:
/// min(diam(A), diam(B)) <= alpha * dist(A, B).
pub fn admissible(a: &Cell, b: &Cell, dim: usize, alpha: f64) -> bool {
    let mut diam_a = 0.0;
    let mut diam_b = 0.0;
    let mut dist2 = 0.0;
    for d in 0..dim {
        let wa = a.hi[d] - a.lo[d];
        let wb = b.hi[d] - b.lo[d];
        diam_a += wa * wa;
        diam_b += wb * wb;
        let g = arc_gap(a.lo[d], a.hi[d], b.lo[d], b.hi[d]);
        dist2 += g * g;
    }
    let dist = dist2.sqrt();
    diam_a.sqrt().min(diam_b.sqrt()) <= alpha * dist && dist > 0.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::Grid;

    #[test]
    fn build_1d_depths() {
        let g = Grid::new(1, 16).unwrap();
        let t = ClusterTree::build(&g, 4).unwrap();
        assert_eq!(t.levels, 2);
        assert_eq!(t.num_cells(2), 4);
        for c in t.cells_at(2) {
            assert_eq!(c.indices.len(), 4);
        }
    }

    #[test]
    fn build_2d_depths() {
        let g = Grid::new(2, 8).unwrap();
        let t = ClusterTree::build(&g, 4).unwrap();
        assert_eq!(t.levels, 2);
        assert_eq!(t.num_cells(2), 16);
        for c in t.cells_at(2) {
            assert_eq!(c.indices.len(), 4);
        }
    }

    #[test]
    fn build_degenerate_minimum() {
        let g = Grid::new(1, 4).unwrap();
        // grid too small for leaf_size 4 (needs >= 8 points)
        assert!(ClusterTree::build(&g, 4).is_err());
        // depth 1 still available explicitly
        let t = ClusterTree::with_depth(&g, 1).unwrap();
        assert_eq!(t.num_cells(1), 2);
        assert_eq!(t.cells_at(1)[0].indices, vec![0, 1]);
    }

    #[test]
    fn children_partition_parent() {
        let g = Grid::new(2, 16).unwrap();
        let t = ClusterTree::build(&g, 16).unwrap();
        for l in 0..t.levels {
            for (ci, c) in t.cells_at(l).iter().enumerate() {
                let mut gathered: Vec<usize> = t
                    .child_indices(l, ci)
                    .iter()
                    .flat_map(|&k| t.cells_at(l + 1)[k].indices.clone())
                    .collect();
                gathered.sort_unstable();
                let mut own = c.indices.clone();
                own.sort_unstable();
                assert_eq!(gathered, own);
            }
        }
    }

    #[test]
    fn admissible_examples() {
        let g = Grid::new(1, 16).unwrap();
        let t = ClusterTree::with_depth(&g, 2).unwrap();
        let cells = t.cells_at(2);
        // identical cells: dist 0
        assert!(!admissible(&cells[0], &cells[0], 1, 1.0));
        // adjacent cells: dist 0
        assert!(!admissible(&cells[0], &cells[1], 1, 100.0));
        // diameter 0.25, separated by 0.25 with alpha = 1: 0.25 <= 0.25
        assert!(admissible(&cells[0], &cells[2], 1, 1.0));
        // periodic wrap: first and last cells are adjacent on the torus
        assert!(!admissible(&cells[0], &cells[3], 1, 1.0));
    }

    #[test]
    fn admissible_separated_cells() {
        let g = Grid::new(1, 64).unwrap();
        let t = ClusterTree::with_depth(&g, 2).unwrap();
        // cells of diameter 0.25; cells 0 and 2 are separated by 0.25
        let cells = t.cells_at(2);
        assert!(admissible(&cells[0], &cells[2], 1, 1.0));
        assert!(!admissible(&cells[0], &cells[2], 1, 0.5));
    }

    #[test]
    fn nl_counts_2d() {
        let g = Grid::new(2, 16).unwrap();
        let t = ClusterTree::with_depth(&g, 2).unwrap();
        let lists_np = t.neighbor_and_interaction_lists(2, false);
        // interior cell (1,1) has the full 3x3 stencil
        let interior = t.cell_index(2, [1, 1]);
        assert_eq!(lists_np.neighbor[interior].len(), 9);
        // non-periodic corner sees only 4
        let corner = t.cell_index(2, [0, 0]);
        assert_eq!(lists_np.neighbor[corner].len(), 4);
        // periodic corner recovers the full stencil through wrap
        let lists_p = t.neighbor_and_interaction_lists(2, true);
        assert_eq!(lists_p.neighbor[corner].len(), 9);
    }

    #[test]
    fn nl_1d_periodic_wrap() {
        let g = Grid::new(1, 16).unwrap();
        let t = ClusterTree::with_depth(&g, 3).unwrap();
        let lists = t.neighbor_and_interaction_lists(3, true);
        assert_eq!(lists.neighbor[0], vec![0, 1, 7]);
    }

    #[test]
    fn il_structure_2d() {
        let g = Grid::new(2, 32).unwrap();
        let t = ClusterTree::with_depth(&g, 3).unwrap();
        let lists = t.neighbor_and_interaction_lists(3, true);
        let count = t.num_cells(3);
        for i in 0..count {
            // NL and IL disjoint; self in NL
            assert!(lists.neighbor[i].contains(&i));
            for j in &lists.interaction[i] {
                assert!(!lists.neighbor[i].contains(j));
                // IL cells are never adjacent to I
                assert!(!t.adjacent(3, i, *j, true));
            }
            // coverage: NL + IL = children of NL(parent)
            let p = t.parent_index(3, i);
            let plists = t.neighbor_and_interaction_lists(2, true);
            let mut zone: Vec<usize> = plists.neighbor[p]
                .iter()
                .flat_map(|&q| t.child_indices(2, q))
                .collect();
            zone.sort_unstable();
            let mut both: Vec<usize> = lists.neighbor[i]
                .iter()
                .chain(lists.interaction[i].iter())
                .cloned()
                .collect();
            both.sort_unstable();
            assert_eq!(zone, both);
        }
        // symmetry
        for i in 0..count {
            for &j in &lists.neighbor[i] {
                assert!(lists.neighbor[j].contains(&i));
            }
            for &j in &lists.interaction[i] {
                assert!(lists.interaction[j].contains(&i));
            }
        }
    }
}
