use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::ViewTransform;

/// One retained correspondence between cell `p` of the source map and cell
/// `q` of the target map (flat row-major indices).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub p: usize,
    pub q: usize,
    /// Source-frame distance (location matching) or feature distance.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    /// Sorted by `(distance, p)`.
    pub pairs: Vec<MatchPair>,
    pub gamma: usize,
}

/// Nearest target for every source row, then the `gamma` closest pairs.
/// Ties in the nearest-target search go to the smaller target index; ties in
/// the retention order go to the smaller source index.
fn nearest_then_top(n_src: usize, n_dst: usize, gamma: usize, dist: impl Fn(usize, usize) -> f64) -> MatchSet {
    let mut pairs: Vec<MatchPair> = (0..n_src)
        .map(|p| {
            let mut best = MatchPair {
                p,
                q: 0,
                distance: dist(p, 0),
            };
            for q in 1..n_dst {
                let d = dist(p, q);
                if d < best.distance {
                    best.q = q;
                    best.distance = d;
                }
            }
            best
        })
        .collect();
    pairs.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.p.cmp(&b.p)));
    pairs.truncate(gamma);
    MatchSet { pairs, gamma }
}

/// View-pixel centers of the cells of an `h × w` grid laid over a
/// `view_size` square view.
pub fn cell_centers(grid: (usize, usize), view_size: usize) -> Vec<(f64, f64)> {
    let (h, w) = grid;
    let sy = view_size as f64 / h as f64;
    let sx = view_size as f64 / w as f64;
    (0..h)
        .flat_map(|i| (0..w).map(move |j| ((j as f64 + 0.5) * sx, (i as f64 + 0.5) * sy)))
        .collect()
}

/// Pairs every cell of view A with the cell of view B whose center lands
/// closest in the shared source frame, then keeps the `gamma` closest pairs.
pub fn location_matches(
    transform_a: &ViewTransform,
    transform_b: &ViewTransform,
    grid: (usize, usize),
    view_size: usize,
    gamma: usize,
) -> Result<MatchSet> {
    if gamma == 0 {
        return Err(Error::invalid("gamma must be >= 1"));
    }
    if grid.0 == 0 || grid.1 == 0 {
        return Err(Error::invalid("empty feature grid"));
    }
    if transform_a.affine.is_degenerate() || transform_b.affine.is_degenerate() {
        return Err(Error::invalid("degenerate view transform"));
    }
    let centers = cell_centers(grid, view_size);
    let pa: Vec<_> = centers.iter().map(|&(x, y)| transform_a.affine.apply(x, y)).collect();
    let pb: Vec<_> = centers.iter().map(|&(x, y)| transform_b.affine.apply(x, y)).collect();
    let n = centers.len();
    Ok(nearest_then_top(n, n, gamma, |p, q| (pa[p].0 - pb[q].0).hypot(pa[p].1 - pb[q].1)))
}

/// Feature-space counterpart: `z` and `z2` are `(HW, D)` row-major cell
/// vectors of one image each. Distances are Euclidean.
pub fn feature_matches(z: &[f64], z2: &[f64], dim: usize, gamma: usize) -> Result<MatchSet> {
    if gamma == 0 {
        return Err(Error::invalid("gamma must be >= 1"));
    }
    if dim == 0 || z.len() != z2.len() || z.len() % dim != 0 || z.is_empty() {
        return Err(Error::invalid(format!(
            "feature maps must share a non-empty (cells, {dim}) shape, got {} and {} values",
            z.len(),
            z2.len()
        )));
    }
    let n = z.len() / dim;
    let sq = |p: usize, q: usize| -> f64 {
        let a = &z[p * dim..(p + 1) * dim];
        let b = &z2[q * dim..(q + 1) * dim];
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let mut set = nearest_then_top(n, n, gamma, sq);
    for pair in &mut set.pairs {
        pair.distance = pair.distance.sqrt();
    }
    Ok(set)
}
