//! Anchor selection on attention maps and multi-scale region pooling.
//!
//! Coordinates follow image convention: `x` is the column (bounded by the
//! map width), `y` the row (bounded by the height). Maps are indexed `(y, x)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{Graph, NodeId, PoolWindow, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coord {
    pub x: usize,
    pub y: usize,
}

impl Coord {
    pub fn new(x: usize, y: usize) -> Self {
        Coord { x, y }
    }
}

/// Every map position, ordered by non-increasing attention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankedPositions(Vec<Coord>);

impl RankedPositions {
    pub fn as_slice(&self) -> &[Coord] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Crop centres for one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorSet(Vec<Coord>);

impl AnchorSet {
    pub fn new(anchors: Vec<Coord>) -> Self {
        AnchorSet(anchors)
    }

    pub fn as_slice(&self) -> &[Coord] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Odd square side lengths of the regions cropped around each anchor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct RegionSizes(Vec<usize>);

impl RegionSizes {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(invalid!("region size list is empty"));
        }
        if let Some(r) = sizes.iter().find(|&&r| r % 2 == 0) {
            return Err(invalid!("region size {r} is not odd"));
        }
        Ok(RegionSizes(sizes))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> usize {
        self.0.iter().copied().max().unwrap_or(1)
    }

    /// Fails unless every region fits inside an `h x w` map.
    pub fn check_fits(&self, h: usize, w: usize) -> Result<()> {
        if self.max() > h.min(w) {
            return Err(invalid!("region size {} exceeds {h}x{w} feature maps", self.max()));
        }
        Ok(())
    }
}

impl Default for RegionSizes {
    fn default() -> Self {
        RegionSizes(vec![3, 5, 7, 9])
    }
}

impl TryFrom<Vec<usize>> for RegionSizes {
    type Error = crate::error::Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        RegionSizes::new(v)
    }
}

impl From<RegionSizes> for Vec<usize> {
    fn from(r: RegionSizes) -> Self {
        r.0
    }
}

/// Inclusive bounds of a cropped region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x_tl: usize,
    pub y_tl: usize,
    pub x_br: usize,
    pub y_br: usize,
}

impl Region {
    pub fn window(&self) -> PoolWindow {
        PoolWindow {
            y0: self.y_tl,
            x0: self.x_tl,
            y1: self.y_br,
            x1: self.x_br,
        }
    }
}

/// Stable descending sort of a `[H, W]` map; equal values keep row-major
/// scan order.
pub fn rank_positions(attention: &Tensor) -> Result<RankedPositions> {
    let [h, w] = *attention.shape() else {
        return Err(invalid!("attention map must be [H, W], got {:?}", attention.shape()));
    };
    if !attention.is_finite() {
        return Err(invalid!("attention map contains non-finite values"));
    }
    let values = attention.data();
    let mut order: Vec<usize> = (0..h * w).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    Ok(RankedPositions(order.into_iter().map(|i| Coord::new(i % w, i / w)).collect()))
}

/// The first `k` ranked positions.
pub fn select_anchors(ranked: &RankedPositions, k: usize) -> Result<AnchorSet> {
    if k == 0 || k > ranked.len() {
        return Err(invalid!("anchor count {k} outside 1..={}", ranked.len()));
    }
    Ok(AnchorSet(ranked.0[..k].to_vec()))
}

/// Square region of odd side `r` centred on `center`, clamped to the map.
pub fn crop_region(center: Coord, r: usize, h: usize, w: usize) -> Result<Region> {
    if r % 2 == 0 {
        return Err(invalid!("region size {r} is not odd"));
    }
    if center.x >= w || center.y >= h {
        return Err(invalid!("centre ({}, {}) outside {h}x{w} map", center.x, center.y));
    }
    let half = (r - 1) / 2;
    Ok(Region {
        x_tl: center.x.saturating_sub(half),
        y_tl: center.y.saturating_sub(half),
        x_br: (center.x + half).min(w - 1),
        y_br: (center.y + half).min(h - 1),
    })
}

/// All regions, anchor-major then region-size order.
pub fn regions(anchors: &AnchorSet, sizes: &RegionSizes, h: usize, w: usize) -> Result<Vec<Region>> {
    let mut out = Vec::with_capacity(anchors.len() * sizes.len());
    for &a in anchors.as_slice() {
        for &r in sizes.as_slice() {
            out.push(crop_region(a, r, h, w)?);
        }
    }
    Ok(out)
}

/// Graph op: `[K * R, C]` region means of `features`.
pub fn pool_regions_node(g: &mut Graph, features: NodeId, anchors: &AnchorSet, sizes: &RegionSizes) -> Result<NodeId> {
    let (h, w) = match *g.shape(features) {
        [h, w, _] => (h, w),
        ref s => return Err(invalid!("features must be [H, W, C], got {s:?}")),
    };
    let windows = regions(anchors, sizes, h, w)?.iter().map(Region::window).collect();
    g.region_avg_pool(features, windows)
}

/// Pooled multi-view vectors `[K * R, C]` for plain tensors.
pub fn pool_regions(features: &Tensor, anchors: &AnchorSet, sizes: &RegionSizes) -> Result<Tensor> {
    let mut g = Graph::new();
    let f = g.input(features.clone());
    let p = pool_regions_node(&mut g, f, anchors, sizes)?;
    Ok(g.value(p).clone())
}

/// `side x side` evenly spaced anchors in row-major order.
pub fn even_grid_anchors(h: usize, w: usize, side: usize) -> Result<AnchorSet> {
    if side == 0 {
        return Err(invalid!("grid side must be positive"));
    }
    if side * side > h * w {
        return Err(invalid!("{side}x{side} grid does not fit a {h}x{w} map"));
    }
    let mut out = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            // floor((j + 0.5) * W / G) in exact integer arithmetic
            let x = ((2 * j + 1) * w) / (2 * side);
            let y = ((2 * i + 1) * h) / (2 * side);
            out.push(Coord::new(x, y));
        }
    }
    Ok(AnchorSet(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, values: &[f64]) -> Tensor {
        Tensor::new(vec![h, w], values.to_vec()).unwrap()
    }

    #[test]
    fn ranks_small_map() {
        let s = rank_positions(&map(2, 2, &[0.9, 0.1, 0.5, 0.7])).unwrap();
        let xy: Vec<(usize, usize)> = s.as_slice().iter().map(|c| (c.x, c.y)).collect();
        assert_eq!(xy, vec![(0, 0), (1, 1), (0, 1), (1, 0)]);
        let v = select_anchors(&s, 2).unwrap();
        assert_eq!(v.as_slice(), &[Coord::new(0, 0), Coord::new(1, 1)]);
        assert_eq!(select_anchors(&s, 4).unwrap().as_slice(), s.as_slice());
        assert!(select_anchors(&s, 0).is_err());
        assert!(select_anchors(&s, 5).is_err());
    }

    #[test]
    fn constant_map_ranks_in_scan_order() {
        let s = rank_positions(&Tensor::full(&[3, 4], 0.2)).unwrap();
        let expected: Vec<Coord> = (0..12).map(|i| Coord::new(i % 4, i / 4)).collect();
        assert_eq!(s.as_slice(), expected.as_slice());
        assert_eq!(rank_positions(&map(1, 1, &[3.0])).unwrap().as_slice(), &[Coord::new(0, 0)]);
    }

    #[test]
    fn single_anchor_is_first_argmax() {
        let s = rank_positions(&map(2, 3, &[0.0, 5.0, 1.0, 5.0, 2.0, 5.0])).unwrap();
        assert_eq!(select_anchors(&s, 1).unwrap().as_slice(), &[Coord::new(1, 0)]);
    }

    #[test]
    fn crop_clamps() {
        let r = crop_region(Coord::new(0, 0), 5, 14, 14).unwrap();
        assert_eq!((r.x_tl, r.y_tl, r.x_br, r.y_br), (0, 0, 2, 2));
        let r = crop_region(Coord::new(13, 13), 9, 14, 14).unwrap();
        assert_eq!((r.x_tl, r.y_tl, r.x_br, r.y_br), (9, 9, 13, 13));
        let r = crop_region(Coord::new(6, 6), 3, 14, 14).unwrap();
        assert_eq!((r.x_tl, r.y_tl, r.x_br, r.y_br), (5, 5, 7, 7));
        // x pairs with W, y with H
        let r = crop_region(Coord::new(9, 1), 5, 4, 10).unwrap();
        assert_eq!((r.x_tl, r.y_tl, r.x_br, r.y_br), (7, 0, 9, 3));
        assert!(crop_region(Coord::new(1, 1), 4, 14, 14).is_err());
        assert!(crop_region(Coord::new(14, 1), 3, 14, 14).is_err());
    }

    #[test]
    fn pool_hand_computed() {
        let f = Tensor::from_fn(&[4, 4, 1], |i| (i + 1) as f64);
        let sizes = RegionSizes::new(vec![3]).unwrap();
        let a = pool_regions(&f, &AnchorSet::new(vec![Coord::new(1, 1)]), &sizes).unwrap();
        assert_eq!(a.data(), &[6.0]);
    }

    #[test]
    fn full_region_equals_gap() {
        let f = Tensor::from_fn(&[5, 5, 3], |i| ((i * 13) % 7) as f64 - 2.5);
        let sizes = RegionSizes::new(vec![5]).unwrap();
        let a = pool_regions(&f, &AnchorSet::new(vec![Coord::new(2, 2)]), &sizes).unwrap();
        let mut g = Graph::new();
        let fi = g.input(f);
        let gap = g.global_avg_pool(fi).unwrap();
        for (x, y) in a.data().iter().zip(g.value(gap).data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn fifty_anchors_four_sizes_give_two_hundred_views() {
        let f = Tensor::from_fn(&[14, 14, 2], |i| i as f64);
        let s = rank_positions(&Tensor::from_fn(&[14, 14], |i| ((i * 31) % 17) as f64)).unwrap();
        let v = select_anchors(&s, 50).unwrap();
        let a = pool_regions(&f, &v, &RegionSizes::default()).unwrap();
        assert_eq!(a.shape(), &[200, 2]);
    }

    #[test]
    fn grid_anchors() {
        let v = even_grid_anchors(14, 14, 7).unwrap();
        assert_eq!(v.len(), 49);
        let odd = [1, 3, 5, 7, 9, 11, 13];
        let expected: Vec<Coord> = odd.iter().flat_map(|&y| odd.iter().map(move |&x| Coord::new(x, y))).collect();
        assert_eq!(v.as_slice(), expected.as_slice());

        let v = even_grid_anchors(16, 16, 4).unwrap();
        let side = [2, 6, 10, 14];
        let expected: Vec<Coord> = side.iter().flat_map(|&y| side.iter().map(move |&x| Coord::new(x, y))).collect();
        assert_eq!(v.as_slice(), expected.as_slice());

        assert_eq!(even_grid_anchors(15, 10, 1).unwrap().as_slice(), &[Coord::new(5, 7)]);
        assert!(even_grid_anchors(14, 14, 0).is_err());
        assert!(even_grid_anchors(3, 3, 4).is_err());
    }

    #[test]
    fn region_sizes_must_be_odd() {
        assert!(RegionSizes::new(vec![3, 4]).is_err());
        assert!(RegionSizes::new(vec![]).is_err());
        assert!(serde_json::from_str::<RegionSizes>("[3, 6]").is_err());
        assert_eq!(serde_json::from_str::<RegionSizes>("[3,5,7,9]").unwrap(), RegionSizes::default());
    }
}
