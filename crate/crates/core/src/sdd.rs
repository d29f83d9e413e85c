//! Sparse depth densification.
//!
//! The image is tiled into a `d x d` grid. Inside each cell, every pixel of a
//! semantic category receives the mean depth of that category's samples in
//! the cell. Cells where a category has no samples take the mean of the five
//! nearest samples of the same category anywhere in the image, queried from
//! the centroid of the category's pixels in that cell. Unlabeled pixels,
//! categories without samples and dynamic pixels stay invalid.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geom::Pixel;
use crate::kdtree::KdTree;
use crate::raster::{ensure_same_size, DepthMap, MaskMap, SegMap};
use crate::sparse::SparseDepth;

pub const DEFAULT_GRID_DIVISIONS: usize = 20;
pub const FILL_NEIGHBORS: usize = 5;

/// Uniform `d x d` tiling of an image; the last row and column of cells
/// absorb the remainder pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSpec {
    divisions: usize,
    width: usize,
    height: usize,
    cell_w: usize,
    cell_h: usize,
}

impl GridSpec {
    pub fn new(divisions: usize, width: usize, height: usize) -> Result<Self> {
        if divisions == 0 || divisions > width || divisions > height {
            return Err(Error::InvalidArgument(format!(
                "grid divisions {divisions} do not fit a {width}x{height} image"
            )));
        }
        Ok(Self {
            divisions,
            width,
            height,
            cell_w: width / divisions,
            cell_h: height / divisions,
        })
    }

    pub fn divisions(&self) -> usize {
        self.divisions
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Cell `(column, row)` containing integer pixel `(x, y)`.
    pub fn cell(&self, x: usize, y: usize) -> (usize, usize) {
        (
            (x / self.cell_w).min(self.divisions - 1),
            (y / self.cell_h).min(self.divisions - 1),
        )
    }

    /// Pixel bounds `[x0, x1) x [y0, y1)` of a cell.
    pub fn cell_bounds(&self, cx: usize, cy: usize) -> (usize, usize, usize, usize) {
        let x0 = cx * self.cell_w;
        let y0 = cy * self.cell_h;
        let x1 = if cx + 1 == self.divisions { self.width } else { x0 + self.cell_w };
        let y1 = if cy + 1 == self.divisions { self.height } else { y0 + self.cell_h };
        (x0, x1, y0, y1)
    }
}

pub fn cell_of(pixel: Pixel, grid: &GridSpec) -> Result<(usize, usize)> {
    let (x, y) = pixel.rounded();
    if x < 0 || y < 0 || x >= grid.width as i64 || y >= grid.height as i64 {
        return Err(Error::OutOfBounds {
            u: pixel.u,
            v: pixel.v,
        });
    }
    Ok(grid.cell(x as usize, y as usize))
}

pub(crate) fn is_dynamic(mask: Option<&MaskMap>, x: usize, y: usize) -> bool {
    mask.is_some_and(|m| m.get(x, y) < 0.5)
}

/// A sample kept for densification, in canonical `(v, u)` order.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Kept {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub label: u16,
    pub cell: (usize, usize),
}

/// Samples on labeled, non-dynamic pixels sorted by `(v, u)`, which makes
/// every downstream summation independent of input order.
pub(crate) fn collect_samples(
    sparse: &SparseDepth,
    seg: &SegMap,
    grid: &GridSpec,
    dynamic: Option<&MaskMap>,
) -> Result<Vec<Kept>> {
    let mut kept = Vec::with_capacity(sparse.len());
    for s in sparse.samples() {
        let (x, y) = s.pixel.rounded();
        if x < 0 || y < 0 || x >= seg.width() as i64 || y >= seg.height() as i64 {
            return Err(Error::OutOfBounds {
                u: s.pixel.u,
                v: s.pixel.v,
            });
        }
        let (x, y) = (x as usize, y as usize);
        let label = seg.label(x, y);
        if label == 0 || is_dynamic(dynamic, x, y) {
            continue;
        }
        kept.push(Kept {
            u: s.pixel.u,
            v: s.pixel.v,
            depth: s.depth,
            label,
            cell: grid.cell(x, y),
        });
    }
    kept.sort_by(|a, b| a.v.total_cmp(&b.v).then(a.u.total_cmp(&b.u)));
    Ok(kept)
}

pub fn densify(
    sparse: &SparseDepth,
    seg: &SegMap,
    grid: &GridSpec,
    dynamic_mask: Option<&MaskMap>,
) -> Result<DepthMap> {
    if sparse.is_empty() {
        return Err(Error::EmptySparseDepth);
    }
    ensure_same_size(grid.dims(), seg.dims())?;
    if let Some(m) = dynamic_mask {
        ensure_same_size(seg.dims(), m.dims())?;
    }
    let (width, height) = seg.dims();
    let kept = collect_samples(sparse, seg, grid, dynamic_mask)?;

    // (cell, label) -> (sum, count), summed in canonical order.
    let mut cell_sums: BTreeMap<((usize, usize), u16), (f64, usize)> = BTreeMap::new();
    let mut by_label: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, s) in kept.iter().enumerate() {
        let e = cell_sums.entry((s.cell, s.label)).or_insert((0.0, 0));
        e.0 += s.depth;
        e.1 += 1;
        by_label.entry(s.label).or_default().push(i);
    }
    let trees: BTreeMap<u16, KdTree> = by_label
        .iter()
        .map(|(&label, idx)| {
            let pts: Vec<(f64, f64)> = idx.iter().map(|&i| (kept[i].u, kept[i].v)).collect();
            (label, KdTree::build(&pts))
        })
        .collect();

    // Target regions: (cell, label) -> pixel indices in raster order.
    let mut regions: BTreeMap<((usize, usize), u16), Vec<usize>> = BTreeMap::new();
    for y in 0..height {
        for x in 0..width {
            let label = seg.label(x, y);
            if label == 0 || is_dynamic(dynamic_mask, x, y) || !by_label.contains_key(&label) {
                continue;
            }
            regions.entry((grid.cell(x, y), label)).or_default().push(y * width + x);
        }
    }

    let mut out = vec![0.0; width * height];
    for (key, pixels) in &regions {
        let value = match cell_sums.get(key) {
            Some(&(sum, n)) => sum / n as f64,
            None => {
                let label = key.1;
                let (qu, qv) = centroid(pixels, width);
                let nn = trees[&label].nearest(qu, qv, FILL_NEIGHBORS);
                let idx = &by_label[&label];
                let sum: f64 = nn.iter().fold(0.0, |acc, n| acc + kept[idx[n.item]].depth);
                sum / nn.len() as f64
            }
        };
        for &p in pixels {
            out[p] = value;
        }
    }
    DepthMap::new(width, height, out)
}

/// Mean pixel coordinate, summed in raster order.
pub(crate) fn centroid(pixels: &[usize], width: usize) -> (f64, f64) {
    let (mut su, mut sv) = (0.0, 0.0);
    for &p in pixels {
        su += (p % width) as f64;
        sv += (p / width) as f64;
    }
    (su / pixels.len() as f64, sv / pixels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::SparseSample;

    fn sample(u: f64, v: f64, depth: f64) -> SparseSample {
        SparseSample {
            pixel: Pixel::new(u, v),
            depth,
        }
    }

    fn sparse(w: usize, h: usize, s: Vec<SparseSample>) -> SparseDepth {
        SparseDepth::new(0, s, w, h).unwrap()
    }

    #[test]
    fn cell_of_examples() {
        let g = GridSpec::new(20, 100, 100).unwrap();
        assert_eq!(cell_of(Pixel::new(0.0, 0.0), &g).unwrap(), (0, 0));
        assert_eq!(cell_of(Pixel::new(99.0, 99.0), &g).unwrap(), (19, 19));
        let g = GridSpec::new(20, 103, 103).unwrap();
        assert_eq!(cell_of(Pixel::new(102.0, 102.0), &g).unwrap(), (19, 19));
        assert_eq!(g.cell_bounds(19, 19), (95, 103, 95, 103));
        assert!(cell_of(Pixel::new(103.0, 0.0), &g).is_err());
        assert!(GridSpec::new(0, 10, 10).is_err());
        assert!(GridSpec::new(11, 10, 10).is_err());
    }

    #[test]
    fn cells_tile_the_image() {
        let g = GridSpec::new(7, 64, 48).unwrap();
        let mut covered = vec![0u8; 64 * 48];
        for cy in 0..7 {
            for cx in 0..7 {
                let (x0, x1, y0, y1) = g.cell_bounds(cx, cy);
                for y in y0..y1 {
                    for x in x0..x1 {
                        covered[y * 64 + x] += 1;
                        assert_eq!(g.cell(x, y), (cx, cy));
                    }
                }
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
    }

    #[test]
    fn in_cell_samples_are_averaged() {
        // 4x4 image, 2x2 grid, category 7 everywhere.
        let seg = SegMap::new(4, 4, vec![7; 16], None).unwrap();
        let g = GridSpec::new(2, 4, 4).unwrap();
        let s = sparse(4, 4, vec![sample(0.0, 0.0, 2.0), sample(1.0, 1.0, 4.0)]);
        let d = densify(&s, &seg, &g, None).unwrap();
        for (x, y) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            assert_eq!(d.get(x, y), 3.0);
        }
    }

    #[test]
    fn empty_cells_use_five_nearest_same_category() {
        // 10x10 image, 2x2 grid; five samples of category 7 in the top-left
        // cell, bottom-right cell empty.
        let seg = SegMap::new(10, 10, vec![7; 100], None).unwrap();
        let g = GridSpec::new(2, 10, 10).unwrap();
        let s = sparse(
            10,
            10,
            (0..5).map(|i| sample(i as f64, 0.0, (i + 1) as f64)).collect(),
        );
        let d = densify(&s, &seg, &g, None).unwrap();
        assert_eq!(d.get(0, 0), 3.0);
        assert_eq!(d.get(9, 9), 3.0);
        assert_eq!(d.get(7, 2), 3.0);
    }

    #[test]
    fn fewer_than_five_samples_uses_all() {
        let seg = SegMap::new(10, 10, vec![3; 100], None).unwrap();
        let g = GridSpec::new(2, 10, 10).unwrap();
        let d = densify(&sparse(10, 10, vec![sample(1.0, 1.0, 2.0)]), &seg, &g, None).unwrap();
        assert!(d.values().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn invalid_regions() {
        // Left half category 1 with a sample, right half category 2 without,
        // top row unlabeled, one pixel dynamic.
        let mut labels = vec![0u16; 36];
        for y in 1..6 {
            for x in 0..6 {
                labels[y * 6 + x] = if x < 3 { 1 } else { 2 };
            }
        }
        let seg = SegMap::new(6, 6, labels, None).unwrap();
        let g = GridSpec::new(2, 6, 6).unwrap();
        let mut mask = vec![1.0; 36];
        mask[5 * 6] = 0.0;
        let mask = MaskMap::new(6, 6, mask).unwrap();
        let d = densify(&sparse(6, 6, vec![sample(1.0, 2.0, 5.0)]), &seg, &g, Some(&mask)).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                let expect = if y == 0 || x >= 3 || (x, y) == (0, 5) { 0.0 } else { 5.0 };
                assert_eq!(d.get(x, y), expect, "pixel ({x}, {y})");
            }
        }
    }

    #[test]
    fn dynamic_samples_are_ignored() {
        let seg = SegMap::new(4, 4, vec![1; 16], None).unwrap();
        let g = GridSpec::new(1, 4, 4).unwrap();
        let mut m = vec![1.0; 16];
        m[0] = 0.0;
        let mask = MaskMap::new(4, 4, m).unwrap();
        let s = sparse(4, 4, vec![sample(0.0, 0.0, 100.0), sample(3.0, 3.0, 1.0)]);
        let d = densify(&s, &seg, &g, Some(&mask)).unwrap();
        assert_eq!(d.get(0, 0), 0.0);
        assert_eq!(d.get(1, 1), 1.0);
    }

    #[test]
    fn errors() {
        let seg = SegMap::new(4, 4, vec![1; 16], None).unwrap();
        let g = GridSpec::new(2, 4, 4).unwrap();
        let empty = SparseDepth::new(0, vec![], 4, 4).unwrap();
        assert!(matches!(densify(&empty, &seg, &g, None), Err(Error::EmptySparseDepth)));
        let g5 = GridSpec::new(2, 5, 4).unwrap();
        let s = sparse(4, 4, vec![sample(0.0, 0.0, 1.0)]);
        assert!(matches!(densify(&s, &seg, &g5, None), Err(Error::DimensionMismatch { .. })));
    }
}
