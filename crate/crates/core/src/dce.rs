//! Dynamic consistency enhancement: depth-consistency weights, the semantic
//! region-tracking mask, the lowest-rank geometric mask and their product.
//!
//! Mask polarity: 1 keeps a pixel in the loss, 0 marks it dynamic.

use std::collections::{BTreeMap, HashSet};

use crate::error::{Error, Result};
use crate::geom::{warp_pixel, CameraIntrinsics, Pixel, Pose};
use crate::raster::{ensure_same_size, DepthMap, MaskMap, SegMap};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.85;
pub const DEFAULT_DYNAMIC_FRACTION: f64 = 0.20;

/// Depth of frame t warped into frame t-1 (`projected`) next to frame t-1's
/// depth bilinearly sampled at the warped location (`reference`), both laid
/// out on frame t's pixel grid. Pixels that do not warp into frame t-1 are
/// invalid (0) in both maps.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedDepths {
    pub reference: DepthMap,
    pub projected: DepthMap,
}

/// `t_prev_cur` maps frame-t camera coordinates into frame t-1.
pub fn align_depths(
    d_cur: &DepthMap,
    d_prev: &DepthMap,
    t_prev_cur: &Pose,
    k: &CameraIntrinsics,
) -> Result<AlignedDepths> {
    ensure_same_size(d_cur.dims(), d_prev.dims())?;
    let (w, h) = d_cur.dims();
    let mut reference = DepthMap::invalid(w, h);
    let mut projected = DepthMap::invalid(w, h);
    for y in 0..h {
        for x in 0..w {
            let d = d_cur.get(x, y);
            if d <= 0.0 {
                continue;
            }
            let Ok(wp) = warp_pixel(Pixel::new(x as f64, y as f64), d, t_prev_cur, k) else {
                continue;
            };
            if let Some(r) = d_prev.sample(wp.pixel) {
                reference.set(x, y, r);
                projected.set(x, y, wp.depth);
            }
        }
    }
    Ok(AlignedDepths {
        reference,
        projected,
    })
}

/// Self-discovered weights with the set of pixels where they are defined.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyWeights {
    /// Weight per pixel; 0 where invalid.
    pub weights: MaskMap,
    pub valid: Vec<bool>,
}

impl ConsistencyWeights {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// `W_s = 1 - |D_{t-1} - D_t^{t-1}| / (D_{t-1} + D_t^{t-1})` per pixel.
pub fn compute_ws(d_prev: &DepthMap, d_proj: &DepthMap) -> Result<ConsistencyWeights> {
    ensure_same_size(d_prev.dims(), d_proj.dims())?;
    let (w, h) = d_prev.dims();
    let mut weights = vec![0.0; w * h];
    let mut valid = vec![false; w * h];
    for (i, (&a, &b)) in d_prev.values().iter().zip(d_proj.values()).enumerate() {
        if a > 0.0 && b > 0.0 {
            weights[i] = (1.0 - (a - b).abs() / (a + b)).clamp(0.0, 1.0);
            valid[i] = true;
        }
    }
    Ok(ConsistencyWeights {
        weights: MaskMap::new(w, h, weights)?,
        valid,
    })
}

/// A segmented object: one instance, or one category when instance ids are
/// unavailable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectRegion {
    pub frame: u64,
    pub id: u32,
    pub category: u16,
    pub pixels: Vec<(usize, usize)>,
}

/// Splits a segmentation into object regions in ascending id order.
/// Unlabeled pixels belong to no region.
pub fn regions_from_seg(seg: &SegMap, frame: u64) -> Vec<ObjectRegion> {
    let mut groups: BTreeMap<(u32, u16), Vec<(usize, usize)>> = BTreeMap::new();
    for y in 0..seg.height() {
        for x in 0..seg.width() {
            let label = seg.label(x, y);
            if label == 0 {
                continue;
            }
            let id = match seg.instances() {
                Some(inst) => inst[y * seg.width() + x] as u32,
                None => label as u32,
            };
            groups.entry((id, label)).or_default().push((x, y));
        }
    }
    groups
        .into_iter()
        .map(|((id, category), pixels)| ObjectRegion {
            frame,
            id,
            category,
            pixels,
        })
        .collect()
}

pub type PixelSet = HashSet<(usize, usize)>;

/// Region pixels carried into frame t-1, rounded, in-bounds and deduplicated.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpedRegion {
    pub pixels: PixelSet,
    /// Pixels skipped for invalid depth.
    pub skipped: usize,
}

pub fn warp_region(
    region: &ObjectRegion,
    d_cur: &DepthMap,
    t_prev_cur: &Pose,
    k: &CameraIntrinsics,
) -> WarpedRegion {
    let (w, h) = d_cur.dims();
    let mut pixels = PixelSet::with_capacity(region.pixels.len());
    let mut skipped = 0;
    for &(x, y) in &region.pixels {
        let d = d_cur.get(x, y);
        if d <= 0.0 {
            skipped += 1;
            continue;
        }
        if let Ok(wp) = warp_pixel(Pixel::new(x as f64, y as f64), d, t_prev_cur, k) {
            let (u, v) = wp.pixel.rounded();
            if u >= 0 && v >= 0 && u < w as i64 && v < h as i64 {
                pixels.insert((u as usize, v as usize));
            }
        }
    }
    WarpedRegion { pixels, skipped }
}

pub fn region_iou(a: &PixelSet, b: &PixelSet) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Best IoU of a warped region against same-category regions of frame t-1.
pub fn best_match_iou(warped: &PixelSet, category: u16, regions_prev: &[ObjectRegion]) -> Option<f64> {
    regions_prev
        .iter()
        .filter(|r| r.category == category)
        .map(|r| {
            let set: PixelSet = r.pixels.iter().copied().collect();
            region_iou(warped, &set)
        })
        .max_by(f64::total_cmp)
}

/// Semantic consistency mask: a region of frame t stays (1) when its warp
/// into frame t-1 overlaps its best match with IoU ≥ `iou_threshold`.
/// Unmatched regions are excluded (0); unlabeled pixels stay 1.
pub fn compute_msc(
    regions_cur: &[ObjectRegion],
    regions_prev: &[ObjectRegion],
    d_cur: &DepthMap,
    t_prev_cur: &Pose,
    k: &CameraIntrinsics,
    iou_threshold: f64,
) -> Result<MaskMap> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!("IoU threshold {iou_threshold} outside (0, 1]")));
    }
    let (w, h) = d_cur.dims();
    let mut mask = vec![1.0; w * h];
    for region in regions_cur {
        let warped = warp_region(region, d_cur, t_prev_cur, k);
        let keep = !warped.pixels.is_empty()
            && best_match_iou(&warped.pixels, region.category, regions_prev).is_some_and(|iou| iou >= iou_threshold);
        if !keep {
            for &(x, y) in &region.pixels {
                if x >= w || y >= h {
                    return Err(Error::OutOfBounds {
                        u: x as f64,
                        v: y as f64,
                    });
                }
                mask[y * w + x] = 0.0;
            }
        }
    }
    MaskMap::new(w, h, mask)
}

/// Geometric mask: the lowest `fraction` of valid weights (ties broken in
/// raster order) and every invalid pixel are set to 0.
pub fn compute_mgc(ws: &ConsistencyWeights, fraction: f64) -> Result<MaskMap> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1)")));
    }
    let (w, h) = ws.weights.dims();
    let values = ws.weights.values();
    let mut order: Vec<usize> = (0..values.len()).filter(|&i| ws.valid[i]).collect();
    let cut = (fraction * order.len() as f64).floor() as usize;
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut mask: Vec<f64> = ws.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    for &i in &order[..cut] {
        mask[i] = 0.0;
    }
    MaskMap::new(w, h, mask)
}

/// Element-wise product of two masks.
pub fn compose_mask(a: &MaskMap, b: &MaskMap) -> Result<MaskMap> {
    ensure_same_size(a.dims(), b.dims())?;
    let values = a.values().iter().zip(b.values()).map(|(x, y)| x * y).collect();
    MaskMap::new(a.width(), a.height(), values)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub iou_threshold: f64,
    pub dynamic_fraction: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            dynamic_fraction: DEFAULT_DYNAMIC_FRACTION,
        }
    }
}

/// All masks for one frame pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyMasks {
    pub ws: ConsistencyWeights,
    pub msc: MaskMap,
    pub mgc: MaskMap,
    pub combined: MaskMap,
}

#[allow(clippy::too_many_arguments)]
pub fn compute_masks(
    d_cur: &DepthMap,
    d_prev: &DepthMap,
    seg_cur: &SegMap,
    seg_prev: &SegMap,
    frame_cur: u64,
    t_prev_cur: &Pose,
    k: &CameraIntrinsics,
    cfg: &MaskConfig,
) -> Result<ConsistencyMasks> {
    ensure_same_size(d_cur.dims(), seg_cur.dims())?;
    ensure_same_size(seg_cur.dims(), seg_prev.dims())?;
    let aligned = align_depths(d_cur, d_prev, t_prev_cur, k)?;
    let ws = compute_ws(&aligned.reference, &aligned.projected)?;
    let regions_cur = regions_from_seg(seg_cur, frame_cur);
    let regions_prev = regions_from_seg(seg_prev, frame_cur.saturating_sub(1));
    let msc = compute_msc(&regions_cur, &regions_prev, d_cur, t_prev_cur, k, cfg.iou_threshold)?;
    let mgc = compute_mgc(&ws, cfg.dynamic_fraction)?;
    let combined = compose_mask(&msc, &mgc)?;
    Ok(ConsistencyMasks {
        ws,
        msc,
        mgc,
        combined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(20.0, 20.0, 10.0, 10.0, 20, 20).unwrap()
    }

    fn set(px: &[(usize, usize)]) -> PixelSet {
        px.iter().copied().collect()
    }

    #[test]
    fn ws_examples() {
        let a = DepthMap::new(3, 1, vec![2.0, 1.0, 1.0]).unwrap();
        let b = DepthMap::new(3, 1, vec![2.0, 3.0, 1e12]).unwrap();
        let ws = compute_ws(&a, &b).unwrap();
        assert_eq!(ws.weights.values()[0], 1.0);
        assert_eq!(ws.weights.values()[1], 0.5);
        assert!(ws.weights.values()[2] >= 0.0 && ws.weights.values()[2] < 1e-11);
        let c = DepthMap::new(3, 1, vec![0.0, 3.0, 1.0]).unwrap();
        let ws = compute_ws(&c, &b).unwrap();
        assert_eq!(ws.valid, vec![false, true, true]);
        assert_eq!(ws.weights.values()[0], 0.0);
        assert!(compute_ws(&a, &DepthMap::constant(2, 1, 1.0)).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = set(&[(0, 0), (1, 0), (2, 0), (3, 0)]);
        assert_eq!(region_iou(&a, &a), 1.0);
        assert_eq!(region_iou(&a, &set(&[(9, 9)])), 0.0);
        let b = set(&[(2, 0), (3, 0), (4, 0), (5, 0)]);
        assert_eq!(region_iou(&a, &b), 2.0 / 6.0);
        assert_eq!(region_iou(&PixelSet::new(), &PixelSet::new()), 0.0);
    }

    #[test]
    fn identity_warp_keeps_region() {
        let r = ObjectRegion {
            frame: 1,
            id: 1,
            category: 2,
            pixels: vec![(3, 4), (4, 4), (5, 4)],
        };
        let d = DepthMap::constant(20, 20, 5.0);
        let w = warp_region(&r, &d, &Pose::identity(), &k());
        assert_eq!(w.pixels, set(&r.pixels));
        assert_eq!(w.skipped, 0);
        let mut dz = d.clone();
        dz.set(3, 4, 0.0);
        assert_eq!(warp_region(&r, &dz, &Pose::identity(), &k()).skipped, 1);
    }

    fn box_region(frame: u64, x0: usize, w: usize) -> ObjectRegion {
        let mut pixels = Vec::new();
        for y in 5..15 {
            for x in x0..x0 + w {
                pixels.push((x, y));
            }
        }
        ObjectRegion {
            frame,
            id: 1,
            category: 3,
            pixels,
        }
    }

    #[test]
    fn msc_threshold_against_enumerated_iou() {
        let d = DepthMap::constant(20, 20, 5.0);
        // Box 10 wide moved by 6 columns (60%): overlap 4/16 columns = 0.25.
        let cur = vec![box_region(1, 8, 10)];
        let prev = vec![box_region(0, 2, 10)];
        let warped = warp_region(&cur[0], &d, &Pose::identity(), &k());
        let prev_set = set(&prev[0].pixels);
        assert_eq!(region_iou(&warped.pixels, &prev_set), 40.0 / 160.0);
        let m = compute_msc(&cur, &prev, &d, &Pose::identity(), &k(), 0.85).unwrap();
        assert_eq!(m.zero_count(), 100);
        assert_eq!(m.get(8, 5), 0.0);
        assert_eq!(m.get(0, 0), 1.0);

        // Shift by one column: IoU = 9/11 = 0.818 < 0.85, masked.
        let prev1 = vec![box_region(0, 7, 10)];
        let m = compute_msc(&cur, &prev1, &d, &Pose::identity(), &k(), 0.85).unwrap();
        assert_eq!(m.zero_count(), 100);
        // A 20-column box shifted by one column: IoU = 19/21 = 0.905, kept.
        let cur20 = vec![box_region(1, 0, 19)];
        let prev20 = vec![box_region(0, 1, 19)];
        let iou = region_iou(&set(&cur20[0].pixels), &set(&prev20[0].pixels));
        assert_eq!(iou, 180.0 / 200.0);
        let m = compute_msc(&cur20, &prev20, &d, &Pose::identity(), &k(), 0.85).unwrap();
        assert_eq!(m.zero_count(), 0);
        // Exact threshold is inclusive.
        let m = compute_msc(&cur20, &prev20, &d, &Pose::identity(), &k(), 0.9).unwrap();
        assert_eq!(m.zero_count(), 0);
    }

    #[test]
    fn msc_unmatched_and_static() {
        let d = DepthMap::constant(20, 20, 5.0);
        let cur = vec![box_region(1, 4, 6)];
        let m = compute_msc(&cur, &[], &d, &Pose::identity(), &k(), 0.85).unwrap();
        assert_eq!(m.zero_count(), 60);
        let m = compute_msc(&cur, &[box_region(0, 4, 6)], &d, &Pose::identity(), &k(), 0.85).unwrap();
        assert_eq!(m.zero_count(), 0);
        // Category mismatch never matches.
        let mut other = box_region(0, 4, 6);
        other.category = 9;
        let m = compute_msc(&cur, &[other], &d, &Pose::identity(), &k(), 0.85).unwrap();
        assert_eq!(m.zero_count(), 60);
    }

    fn weights(values: Vec<f64>) -> ConsistencyWeights {
        let n = values.len();
        ConsistencyWeights {
            weights: MaskMap::new(n, 1, values).unwrap(),
            valid: vec![true; n],
        }
    }

    #[test]
    fn mgc_examples() {
        let m = compute_mgc(&weights(vec![0.7; 100]), 0.2).unwrap();
        assert_eq!(m.zero_count(), 20);
        assert!(m.values()[..20].iter().all(|&v| v == 0.0));
        let m = compute_mgc(&weights((0..100).map(|i| i as f64 / 100.0).collect()), 0.2).unwrap();
        assert!(m.values()[..20].iter().all(|&v| v == 0.0));
        assert!(m.values()[20..].iter().all(|&v| v == 1.0));
        let m = compute_mgc(&weights(vec![0.5; 10]), 1e-9).unwrap();
        assert_eq!(m.zero_count(), 0);
        assert!(compute_mgc(&weights(vec![0.5; 10]), 0.0).is_err());
        assert!(compute_mgc(&weights(vec![0.5; 10]), 1.0).is_err());

        let mut ws = weights(vec![0.9, 0.1, 0.5, 0.3, 0.2]);
        ws.valid[1] = false;
        ws.weights = MaskMap::new(5, 1, vec![0.9, 0.0, 0.5, 0.3, 0.2]).unwrap();
        let m = compute_mgc(&ws, 0.5).unwrap();
        assert_eq!(m.values(), &[1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn compose_is_logical_and_on_all_4x4_pairs() {
        // Exhaustive over a random sample of binary 4x4 maps.
        for a_bits in (0u32..65536).step_by(257) {
            for b_bits in (0u32..65536).step_by(1031) {
                let mk = |bits: u32| {
                    MaskMap::new(4, 4, (0..16).map(|i| ((bits >> i) & 1) as f64).collect()).unwrap()
                };
                let m = compose_mask(&mk(a_bits), &mk(b_bits)).unwrap();
                assert_eq!(m, mk(a_bits & b_bits));
            }
        }
    }

    proptest! {
        #[test]
        fn ws_bounded(a in 1e-6..1e6f64, b in 1e-6..1e6f64) {
            let ws = compute_ws(&DepthMap::new(1, 1, vec![a]).unwrap(), &DepthMap::new(1, 1, vec![b]).unwrap()).unwrap();
            let v = ws.weights.values()[0];
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v == 1.0, a == b);
        }

        #[test]
        fn mgc_count_is_exact(values in prop::collection::vec(0.0..1.0f64, 1..300), f in 0.01..0.99f64) {
            let n = values.len();
            let m = compute_mgc(&weights(values), f).unwrap();
            prop_assert_eq!(m.zero_count(), (f * n as f64).floor() as usize);
        }

        #[test]
        fn compose_commutes_and_is_idempotent(a in prop::collection::vec(0u8..2, 16), b in prop::collection::vec(0u8..2, 16)) {
            let ma = MaskMap::new(4, 4, a.iter().map(|&x| x as f64).collect()).unwrap();
            let mb = MaskMap::new(4, 4, b.iter().map(|&x| x as f64).collect()).unwrap();
            let ab = compose_mask(&ma, &mb).unwrap();
            prop_assert_eq!(&ab, &compose_mask(&mb, &ma).unwrap());
            prop_assert_eq!(&compose_mask(&ab, &mb).unwrap(), &ab);
        }
    }
}
