//! RoI pooling, batch pooling, channel concatenation and top-k RoI sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned rectangle in image pixels, `x0 < x1`, `y0 < y1`.
///
/// Serialized as `[x0, y0, x1, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) || x0 >= x1 || y0 >= y1 {
            return Err(Error::invalid(
                "bbox",
                format!("degenerate box ({}, {}, {}, {})", x0, y0, x1, y1),
            ));
        }
        Ok(BBox { x0, y0, x1, y1 })
    }

    /// Clips to `[0, width] x [0, height]` before validating.
    pub fn clipped(x0: f64, y0: f64, x1: f64, y1: f64, width: f64, height: f64) -> Result<Self> {
        Self::new(
            x0.clamp(0.0, width),
            y0.clamp(0.0, height),
            x1.clamp(0.0, width),
            y1.clamp(0.0, height),
        )
    }

    pub fn whole(width: f64, height: f64) -> Self {
        BBox {
            x0: 0.0,
            y0: 0.0,
            x1: width,
            y1: height,
        }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        if inter <= 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x0 >= 0.0 && self.y0 >= 0.0 && self.x1 <= width && self.y1 <= height
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from([x0, y0, x1, y1]: [f64; 4]) -> Result<Self> {
        BBox::new(x0, y0, x1, y1)
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

/// Per-RoI feature maps of one branch with their scores and source boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiBatch {
    maps: Vec<Tensor>,
    scores: Vec<f64>,
    source_boxes: Vec<BBox>,
}

impl RoiBatch {
    pub fn new(maps: Vec<Tensor>, scores: Vec<f64>, source_boxes: Vec<BBox>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::invalid(
                "roi_batch",
                "batch must hold at least one RoI",
            ));
        }
        if maps.len() != scores.len() || maps.len() != source_boxes.len() {
            return Err(Error::shape(
                "roi_batch",
                format!(
                    "{} maps, {} scores, {} boxes",
                    maps.len(),
                    scores.len(),
                    source_boxes.len()
                ),
            ));
        }
        let shape = maps[0].shape();
        if shape.len() != 3 {
            return Err(Error::shape(
                "roi_batch",
                format!("maps must be [C,h,w], got {:?}", shape),
            ));
        }
        if let Some(bad) = maps.iter().position(|m| m.shape() != shape) {
            return Err(Error::shape(
                "roi_batch",
                format!(
                    "map {} has shape {:?}, map 0 has {:?}",
                    bad,
                    maps[bad].shape(),
                    shape
                ),
            ));
        }
        Ok(RoiBatch {
            maps,
            scores,
            source_boxes,
        })
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn maps(&self) -> &[Tensor] {
        &self.maps
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn source_boxes(&self) -> &[BBox] {
        &self.source_boxes
    }
}

pub(crate) struct RoiPooled {
    pub output: Tensor,
    pub argmax: Vec<Option<usize>>,
    pub degenerate: usize,
}

/// Map-space cell range `[start, end)` covered by `[lo, hi)` image coordinates.
fn cell_range(lo: f64, hi: f64, scale: f64, extent: usize) -> Option<(usize, usize, bool)> {
    let start = (lo * scale).floor().max(0.0);
    let end = (hi * scale).ceil().min(extent as f64);
    if start >= extent as f64 || hi * scale <= 0.0 {
        return None;
    }
    let start = start as usize;
    let end = end as usize;
    if end <= start {
        return Some((start, start + 1, true));
    }
    Some((start, end, false))
}

/// Pools every RoI of a `[C,H,W]` map into a `[N,C,out_h,out_w]` tensor.
pub(crate) fn roi_pool_many(
    feature_map: &Tensor,
    rois: &[BBox],
    spatial_scale: f64,
    out_h: usize,
    out_w: usize,
) -> Result<RoiPooled> {
    let [c, h, w] = *feature_map.shape() else {
        return Err(Error::shape(
            "roi_pool",
            format!("feature map must be [C,H,W], got {:?}", feature_map.shape()),
        ));
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(
            "roi_pool",
            "output grid must be at least 1x1",
        ));
    }
    if !(spatial_scale.is_finite() && spatial_scale > 0.0) {
        return Err(Error::invalid("roi_pool", "spatial scale must be positive"));
    }
    let x = feature_map.data();
    let cells = out_h * out_w;
    let mut out = Vec::with_capacity(rois.len() * c * cells);
    let mut argmax = Vec::with_capacity(rois.len() * c * cells);
    let mut degenerate = 0;
    for roi in rois {
        let rows = cell_range(roi.y0, roi.y1, spatial_scale, h);
        let cols = cell_range(roi.x0, roi.x1, spatial_scale, w);
        let (Some((sy, ey, dy)), Some((sx, ex, dx))) = (rows, cols) else {
            return Err(Error::invalid(
                "roi_pool",
                format!("roi {:?} does not intersect the {}x{} map", roi, h, w),
            ));
        };
        if dy || dx {
            degenerate += 1;
        }
        let (rh, rw) = (ey - sy, ex - sx);
        // bin i spans [floor(i*r/out), ceil((i+1)*r/out)) within the roi
        let bins_y: Vec<(usize, usize)> = (0..out_h)
            .map(|i| {
                (
                    sy + i * rh / out_h,
                    (sy + ((i + 1) * rh).div_ceil(out_h)).min(h),
                )
            })
            .collect();
        let bins_x: Vec<(usize, usize)> = (0..out_w)
            .map(|j| {
                (
                    sx + j * rw / out_w,
                    (sx + ((j + 1) * rw).div_ceil(out_w)).min(w),
                )
            })
            .collect();
        for ch in 0..c {
            let base = ch * h * w;
            for &(y0, y1) in &bins_y {
                for &(x0, x1) in &bins_x {
                    let mut best: Option<usize> = None;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            let idx = base + yy * w + xx;
                            if best.is_none_or(|b| x[idx] > x[b]) {
                                best = Some(idx);
                            }
                        }
                    }
                    out.push(best.map_or(0.0, |b| x[b]));
                    argmax.push(best);
                }
            }
        }
    }
    if degenerate > 0 {
        log::warn!(
            "roi_pool: {} roi(s) clamped to a single map cell",
            degenerate
        );
    }
    Ok(RoiPooled {
        output: Tensor::new(vec![rois.len(), c, out_h, out_w], out)?,
        argmax,
        degenerate,
    })
}

/// Pools one RoI into `[C,out_h,out_w]`. `spatial_scale` maps image
/// coordinates to map cells.
pub fn roi_pool(
    feature_map: &Tensor,
    roi: &BBox,
    spatial_scale: f64,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor> {
    let pooled = roi_pool_many(
        feature_map,
        std::slice::from_ref(roi),
        spatial_scale,
        out_h,
        out_w,
    )?;
    let [_, c, oh, ow] = *pooled.output.shape() else {
        unreachable!()
    };
    pooled.output.reshape(vec![c, oh, ow])
}

/// Elementwise max across the leading axis of `[N,C,h,w]`.
pub(crate) fn batch_pool_stacked(maps: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = *maps.shape() else {
        return Err(Error::shape(
            "batch_pool",
            format!("expected stacked maps [N,C,h,w], got {:?}", maps.shape()),
        ));
    };
    if n == 0 {
        return Err(Error::invalid("batch_pool", "batch must be nonempty"));
    }
    let len = c * h * w;
    let mut out = maps.data()[..len].to_vec();
    for map in maps.data().chunks_exact(len.max(1)).skip(1) {
        for (o, &v) in out.iter_mut().zip(map) {
            if v > *o {
                *o = v;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Collapses a batch of maps into one map holding, at every position and
/// channel, the largest activation across the batch.
pub fn batch_pool(batch: &RoiBatch) -> Result<Tensor> {
    let shape = batch.maps[0].shape().to_vec();
    let len = batch.maps[0].numel();
    let mut out = batch.maps[0].data().to_vec();
    for map in &batch.maps[1..] {
        for (o, &v) in out.iter_mut().zip(&map.data()[..len]) {
            if v > *o {
                *o = v;
            }
        }
    }
    Tensor::new(shape, out)
}

/// Channel axis and per-input channel counts for a concat of equal-rank maps.
fn concat_layout(shapes: &[&[usize]]) -> Result<(usize, Vec<usize>)> {
    let first = shapes
        .first()
        .ok_or_else(|| Error::invalid("channel_concat", "no inputs"))?;
    let axis = match first.len() {
        3 => 0,
        4 => 1,
        _ => {
            return Err(Error::shape(
                "channel_concat",
                format!("expected [C,h,w] or [N,C,h,w], got {:?}", first),
            ))
        }
    };
    let mut channels = Vec::with_capacity(shapes.len());
    for (i, s) in shapes.iter().enumerate() {
        let same_rank = s.len() == first.len();
        let same_rest = same_rank
            && s.iter()
                .zip(first.iter())
                .enumerate()
                .all(|(ax, (a, b))| ax == axis || a == b);
        if !same_rest {
            return Err(Error::shape(
                "channel_concat",
                format!("input {} has shape {:?}, input 0 has {:?}", i, s, first),
            ));
        }
        channels.push(s[axis]);
    }
    Ok((axis, channels))
}

pub fn channel_concat(maps: &[&Tensor]) -> Result<Tensor> {
    let shapes: Vec<&[usize]> = maps.iter().map(|m| m.shape()).collect();
    let (axis, channels) = concat_layout(&shapes)?;
    let first = shapes[0];
    let n = if axis == 1 { first[0] } else { 1 };
    let plane = first[axis + 1] * first[axis + 2];
    let total: usize = channels.iter().sum();
    let mut out = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for (m, &c) in maps.iter().zip(&channels) {
            out.extend_from_slice(&m.data()[b * c * plane..][..c * plane]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    Tensor::new(shape, out)
}

/// Inverse of [`channel_concat`] on a flat buffer: one slice per input shape.
pub fn split_channels(data: &[f64], shapes: &[&[usize]]) -> Vec<Vec<f64>> {
    let (axis, channels) = concat_layout(shapes).expect("shapes validated in forward");
    let first = shapes[0];
    let n = if axis == 1 { first[0] } else { 1 };
    let plane = first[axis + 1] * first[axis + 2];
    let total: usize = channels.iter().sum();
    let mut parts: Vec<Vec<f64>> = channels
        .iter()
        .map(|&c| Vec::with_capacity(n * c * plane))
        .collect();
    for b in 0..n {
        let mut offset = b * total * plane;
        for (part, &c) in parts.iter_mut().zip(&channels) {
            part.extend_from_slice(&data[offset..][..c * plane]);
            offset += c * plane;
        }
    }
    parts
}

/// Indices of the `min(k, N)` highest scores, descending, lower index first
/// on ties.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps the lower original index ahead on equal scores
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(k.min(scores.len()));
    order
}

/// Keeps the `k` RoIs with the highest scores.
pub fn roi_sampler(batch: &RoiBatch, k: usize) -> Result<RoiBatch> {
    if k == 0 {
        return Err(Error::invalid("roi_sampler", "k must be >= 1"));
    }
    let keep = top_k_indices(&batch.scores, k);
    RoiBatch::new(
        keep.iter().map(|&i| batch.maps[i].clone()).collect(),
        keep.iter().map(|&i| batch.scores[i]).collect(),
        keep.iter().map(|&i| batch.source_boxes[i]).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn bbox_validation_and_clipping() {
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
        let b = BBox::clipped(-3.0, 2.0, 70.0, 10.0, 64.0, 64.0).unwrap();
        assert_eq!(b, BBox::new(0.0, 2.0, 64.0, 10.0).unwrap());
        assert!(BBox::clipped(70.0, 0.0, 80.0, 4.0, 64.0, 64.0).is_err());
    }

    #[test]
    fn roi_pool_whole_map_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let map = random(&[3, 6, 6], &mut rng);
        let out = roi_pool(&map, &BBox::whole(6.0, 6.0), 1.0, 6, 6).unwrap();
        assert_eq!(out, map);
        // image coordinates at scale 1/4
        let out = roi_pool(&map, &BBox::whole(24.0, 24.0), 0.25, 6, 6).unwrap();
        assert_eq!(out, map);
    }

    #[test]
    fn roi_pool_constant_map() {
        let map = Tensor::full(&[2, 5, 7], 3.25);
        for roi in [
            BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            BBox::new(2.5, 1.0, 6.0, 4.5).unwrap(),
            BBox::new(0.0, 0.0, 7.0, 5.0).unwrap(),
        ] {
            let out = roi_pool(&map, &roi, 1.0, 6, 6).unwrap();
            assert!(out.data().iter().all(|&v| v == 3.25));
        }
    }

    #[test]
    fn roi_pool_matches_subwindow_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let map = random(&[1, 7, 7], &mut rng);
        let out = roi_pool(&map, &BBox::whole(7.0, 7.0), 1.0, 6, 6).unwrap();
        // with a 7-cell roi and 6 bins, bin i covers cells floor(7i/6)..ceil(7(i+1)/6)
        let bounds = |i: usize| ((7 * i) / 6, (7 * (i + 1)).div_ceil(6));
        for i in 0..6 {
            for j in 0..6 {
                let (y0, y1) = bounds(i);
                let (x0, x1) = bounds(j);
                let mut m = f64::NEG_INFINITY;
                for y in y0..y1 {
                    for x in x0..x1 {
                        m = m.max(map.data()[y * 7 + x]);
                    }
                }
                assert_eq!(out.data()[i * 6 + j], m, "bin ({}, {})", i, j);
            }
        }
    }

    #[test]
    fn roi_pool_rejects_disjoint_roi() {
        let map = Tensor::zeros(&[1, 4, 4]);
        let roi = BBox::new(20.0, 20.0, 30.0, 30.0).unwrap();
        assert!(roi_pool(&map, &roi, 1.0, 2, 2).is_err());
    }

    #[test]
    fn roi_pool_sliver_covers_one_cell() {
        let map = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // a sliver at the map edge still owns the cell it touches
        let roi = BBox::new(-1.0, 0.0, 0.001, 2.0).unwrap();
        let pooled = roi_pool_many(&map, &[roi], 1.0, 1, 1).unwrap();
        assert_eq!(pooled.degenerate, 0);
        let roi = BBox::new(1.999, 0.0, 4.0, 2.0).unwrap();
        let pooled = roi_pool_many(&map, &[roi], 1.0, 1, 1).unwrap();
        assert_eq!(pooled.output.data(), &[4.0]);
    }

    #[test]
    fn batch_pool_small_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[4, 3, 3], &mut rng);
        let box0 = BBox::whole(1.0, 1.0);
        let single = RoiBatch::new(vec![a.clone()], vec![0.5], vec![box0]).unwrap();
        assert_eq!(batch_pool(&single).unwrap(), a);

        let big = Tensor::new(
            a.shape().to_vec(),
            a.data().iter().map(|v| v + 5.0).collect(),
        )
        .unwrap();
        let b = RoiBatch::new(vec![a.clone(), big.clone()], vec![0.1, 0.2], vec![box0; 2]).unwrap();
        assert_eq!(batch_pool(&b).unwrap(), big);

        assert!(RoiBatch::new(
            vec![a.clone(), Tensor::zeros(&[4, 3, 2])],
            vec![0.0; 2],
            vec![box0; 2]
        )
        .is_err());
        assert!(RoiBatch::new(vec![], vec![], vec![]).is_err());
    }

    #[test]
    fn concat_counts_and_roundtrip() {
        let maps: Vec<Tensor> = (0..3)
            .map(|i| Tensor::full(&[256, 6, 6], i as f64))
            .collect();
        let refs: Vec<&Tensor> = maps.iter().collect();
        let cat = channel_concat(&refs).unwrap();
        assert_eq!(cat.shape(), &[768, 6, 6]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&[2, 3, 2, 2], &mut rng);
        let b = random(&[2, 1, 2, 2], &mut rng);
        let cat = channel_concat(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 4, 2, 2]);
        let parts = split_channels(cat.data(), &[a.shape(), b.shape()]);
        assert_eq!(parts[0], a.data());
        assert_eq!(parts[1], b.data());

        assert_eq!(channel_concat(&[&a]).unwrap(), a);
        assert!(channel_concat(&[&a, &Tensor::zeros(&[2, 1, 2, 3])]).is_err());
    }

    #[test]
    fn sampler_examples() {
        let scores = [0.9, 0.1, 0.8, 0.8, 0.2];
        assert_eq!(top_k_indices(&scores, 3), vec![0, 2, 3]);
        assert_eq!(top_k_indices(&scores, 5), vec![0, 2, 3, 4, 1]);
        assert_eq!(top_k_indices(&[0.3, 0.7], 3), vec![1, 0]);

        let maps: Vec<Tensor> = (0..5).map(|i| Tensor::full(&[1, 1, 1], i as f64)).collect();
        let boxes = vec![BBox::whole(1.0, 1.0); 5];
        let batch = RoiBatch::new(maps, scores.to_vec(), boxes).unwrap();
        let top = roi_sampler(&batch, 3).unwrap();
        assert_eq!(top.scores(), &[0.9, 0.8, 0.8]);
        assert_eq!(top.maps()[2].data(), &[3.0]);
        assert!(roi_sampler(&batch, 0).is_err());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn maps(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Tensor>> {
        (1usize..4, 1usize..4, 1usize..4, n).prop_flat_map(|(c, h, w, n)| {
            prop::collection::vec(
                prop::collection::vec(-3i8..3, c * h * w).prop_map(move |d| {
                    Tensor::new(vec![c, h, w], d.into_iter().map(f64::from).collect()).unwrap()
                }),
                n,
            )
        })
    }

    proptest! {
        #[test]
        fn batch_pool_is_attained_upper_bound(maps in maps(1..6)) {
            let n = maps.len();
            let batch = RoiBatch::new(maps.clone(), vec![0.0; n], vec![BBox::whole(1.0, 1.0); n]).unwrap();
            let out = batch_pool(&batch).unwrap();
            for (i, &v) in out.data().iter().enumerate() {
                prop_assert!(maps.iter().all(|m| m.data()[i] <= v));
                prop_assert!(maps.iter().any(|m| m.data()[i] == v));
            }
        }

        #[test]
        fn sampler_picks_top_scores_under_permutation(
            scores in prop::collection::vec(0u8..6, 1..12),
            k in 1usize..8,
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let mut sorted = scores.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let top = top_k_indices(&scores, k);
            let picked: Vec<f64> = top.iter().map(|&i| scores[i]).collect();
            prop_assert_eq!(&picked[..], &sorted[..k.min(scores.len())]);

            let mut perm: Vec<usize> = (0..scores.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
            let again: Vec<f64> = top_k_indices(&shuffled, k).iter().map(|&i| shuffled[i]).collect();
            prop_assert_eq!(again, picked);
        }

        #[test]
        fn concat_then_split_is_identity(maps in maps(1..4), extra in 1usize..3) {
            // vary the channel count per part by repeating the first map
            let mut parts = maps.clone();
            let first = &maps[0];
            let (c, h, w) = (first.shape()[0], first.shape()[1], first.shape()[2]);
            let mut data = Vec::new();
            for _ in 0..extra {
                data.extend_from_slice(first.data());
            }
            parts.push(Tensor::new(vec![c * extra, h, w], data).unwrap());
            let refs: Vec<&Tensor> = parts.iter().collect();
            let cat = channel_concat(&refs).unwrap();
            let shapes: Vec<&[usize]> = parts.iter().map(|p| p.shape()).collect();
            for (got, want) in split_channels(cat.data(), &shapes).iter().zip(&parts) {
                prop_assert_eq!(&got[..], want.data());
            }
        }
    }
}
