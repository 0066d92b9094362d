//! Multi-source pseudo-labels from the teacher and the strong augmentation
//! shared by target images and their labels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::label::{LabelMap, IGNORE};
use crate::tensor::Tensor;

/// Default confidence threshold for pseudo-labels and the weight map.
pub const DEFAULT_TAU: f64 = 0.968;

/// Union class space, the target subset and the union → target remap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRegistry {
    names: Vec<String>,
    target: Vec<u8>,
}

impl ClassRegistry {
    pub fn new(names: Vec<String>, target: Vec<u8>) -> Result<Self> {
        if names.is_empty() || names.len() > IGNORE as usize {
            return Err(Error::Contract(format!(
                "union class count {} must be in 1..=255",
                names.len()
            )));
        }
        let mut target = target;
        target.sort_unstable();
        target.dedup();
        if target.is_empty() {
            return Err(Error::Contract("target class set is empty".into()));
        }
        if let Some(&c) = target.iter().find(|&&c| c as usize >= names.len()) {
            return Err(Error::InvalidLabel {
                label: c,
                index: 0,
                classes: names.len(),
            });
        }
        Ok(Self { names, target })
    }

    /// Registry whose target set is the whole union.
    pub fn equality(names: Vec<String>) -> Result<Self> {
        let all = (0..names.len() as u8).collect();
        Self::new(names, all)
    }

    pub fn num_union(&self) -> usize {
        self.names.len()
    }

    pub fn num_target(&self) -> usize {
        self.target.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn target_classes(&self) -> &[u8] {
        &self.target
    }

    pub fn outliers(&self) -> Vec<u8> {
        (0..self.names.len() as u8)
            .filter(|c| !self.is_target(*c))
            .collect()
    }

    pub fn is_target(&self, c: u8) -> bool {
        self.target.binary_search(&c).is_ok()
    }

    pub fn is_equality(&self) -> bool {
        self.target.len() == self.names.len()
    }

    /// Target index of a union class, `None` for outliers.
    pub fn remap(&self, c: u8) -> Option<u8> {
        self.target.binary_search(&c).ok().map(|i| i as u8)
    }

    /// Union class of a target index.
    pub fn unmap(&self, t: u8) -> Option<u8> {
        self.target.get(t as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Per pixel, the branch with the highest max-probability wins.
    #[default]
    MaxConfidence,
    /// Per image, the branch with the highest mean confidence labels every pixel.
    BestExpert,
    /// Branch probabilities are averaged before the argmax.
    Summation,
}

/// Fuses per-branch class probabilities (each `B×C×H×W`) into one label map
/// and a confidence per pixel. Ties go to the lower branch index.
pub fn fuse_probabilities(probs: &[Tensor], mode: FusionMode) -> Result<(LabelMap, Vec<f64>)> {
    let first = probs
        .first()
        .ok_or_else(|| Error::Contract("fusion needs at least one branch".into()))?;
    let shape = first.shape().to_vec();
    if shape.len() != 4 {
        return shape_err("fuse", &shape, &[4]);
    }
    for p in probs {
        if p.shape() != shape.as_slice() {
            return shape_err("fuse", &shape, p.shape());
        }
    }
    let (b, h, w) = (shape[0], shape[2], shape[3]);
    if shape[1] > IGNORE as usize {
        return shape_err("fuse", &shape, &[IGNORE as usize]);
    }
    let plane = h * w;
    let per_branch: Vec<(Tensor, Vec<usize>)> = match mode {
        FusionMode::Summation => {
            let mut avg = Tensor::zeros(&shape);
            for p in probs {
                for (a, v) in avg.data_mut().iter_mut().zip(p.data()) {
                    *a += v;
                }
            }
            let k = probs.len() as f64;
            avg.data_mut().iter_mut().for_each(|a| *a /= k);
            vec![avg.max_with_index(1)?]
        }
        _ => probs
            .iter()
            .map(|p| p.max_with_index(1))
            .collect::<Result<_>>()?,
    };

    let mut labels = vec![0u8; b * plane];
    let mut conf = vec![0.0; b * plane];
    for s in 0..b {
        let range = s * plane..(s + 1) * plane;
        let pick_image = match mode {
            FusionMode::BestExpert => {
                let mut best = 0;
                let mut best_mean = f64::NEG_INFINITY;
                for (i, (m, _)) in per_branch.iter().enumerate() {
                    let mean = m.data()[range.clone()].iter().sum::<f64>() / plane as f64;
                    if mean > best_mean {
                        best_mean = mean;
                        best = i;
                    }
                }
                Some(best)
            }
            _ => None,
        };
        for p in range {
            let branch = pick_image.unwrap_or_else(|| {
                let mut best = 0;
                for i in 1..per_branch.len() {
                    if per_branch[i].0.data()[p] > per_branch[best].0.data()[p] {
                        best = i;
                    }
                }
                best
            });
            conf[p] = per_branch[branch].0.data()[p];
            labels[p] = per_branch[branch].1[p] as u8;
        }
    }
    Ok((LabelMap::new(b, h, w, labels)?, conf))
}

/// Softmax over the class axis of each branch's logits, then
/// [`fuse_probabilities`].
pub fn fuse_logits(logits: &[Tensor], mode: FusionMode) -> Result<(LabelMap, Vec<f64>)> {
    let probs: Vec<Tensor> = logits.iter().map(|l| l.softmax(1)).collect::<Result<_>>()?;
    fuse_probabilities(&probs, mode)
}

/// Replaces outlier classes with 255; target classes keep their union index.
pub fn class_filter(fused: &LabelMap, registry: &ClassRegistry) -> Result<LabelMap> {
    fused.validate(registry.num_union())?;
    let mut out = fused.clone();
    for v in out.data_mut() {
        if *v != IGNORE && !registry.is_target(*v) {
            *v = IGNORE;
        }
    }
    Ok(out)
}

/// Maps union indices to target indices; outliers become 255.
pub fn remap_to_target(labels: &LabelMap, registry: &ClassRegistry) -> Result<LabelMap> {
    labels.validate(registry.num_union())?;
    let mut out = labels.clone();
    for v in out.data_mut() {
        if *v != IGNORE {
            *v = registry.remap(*v).unwrap_or(IGNORE);
        }
    }
    Ok(out)
}

/// 1 where `confidence > tau`, else 0.
pub fn confidence_gate(confidence: &[f64], tau: f64) -> Vec<f64> {
    confidence
        .iter()
        .map(|&c| if c > tau { 1.0 } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrongTransformConfig {
    pub flip_prob: f64,
    pub rotate: bool,
    pub crop_scale: (f64, f64),
    pub gain: (f64, f64),
    pub bias: (f64, f64),
    pub blur_sigma: (f64, f64),
}

impl Default for StrongTransformConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rotate: true,
            crop_scale: (0.6, 1.0),
            gain: (0.8, 1.2),
            bias: (-0.1, 0.1),
            blur_sigma: (0.0, 1.0),
        }
    }
}

/// Smallest crop side accepted before a crop is redrawn.
const MIN_CROP: usize = 8;

/// One draw of the strong augmentation for an `height × width` image.
///
/// Geometric order: crop then resize back, flips, then clockwise quarter
/// turns. Labels follow the geometric part only.
#[derive(Debug, Clone, PartialEq)]
pub struct StrongTransform {
    pub height: usize,
    pub width: usize,
    /// `(top, left, rows, cols)` of the crop window.
    pub crop: (usize, usize, usize, usize),
    pub flip_h: bool,
    pub flip_v: bool,
    pub quarter_turns: u8,
    pub gain: [f64; 3],
    pub bias: [f64; 3],
    pub blur_sigma: f64,
}

impl StrongTransform {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            crop: (0, 0, height, width),
            flip_h: false,
            flip_v: false,
            quarter_turns: 0,
            gain: [1.0; 3],
            bias: [0.0; 3],
            blur_sigma: 0.0,
        }
    }

    pub fn sample<R: Rng>(cfg: &StrongTransformConfig, height: usize, width: usize, rng: &mut R) -> Self {
        let uniform = |rng: &mut R, (lo, hi): (f64, f64)| {
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        };
        let min_side = MIN_CROP.min(height).min(width);
        let crop = loop {
            let s = uniform(rng, cfg.crop_scale).clamp(0.0, 1.0);
            let rows = ((s * height as f64).round() as usize).clamp(1, height);
            let cols = ((s * width as f64).round() as usize).clamp(1, width);
            if rows >= min_side && cols >= min_side {
                let top = rng.random_range(0..=height - rows);
                let left = rng.random_range(0..=width - cols);
                break (top, left, rows, cols);
            }
        };
        let flip_h = rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0));
        let flip_v = rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0));
        let quarter_turns = if !cfg.rotate {
            0
        } else if height == width {
            rng.random_range(0..4u8)
        } else {
            2 * rng.random_range(0..2u8)
        };
        let mut gain = [1.0; 3];
        let mut bias = [0.0; 3];
        for c in 0..3 {
            gain[c] = uniform(rng, cfg.gain);
            bias[c] = uniform(rng, cfg.bias);
        }
        let blur_sigma = uniform(rng, cfg.blur_sigma).max(0.0);
        Self {
            height,
            width,
            crop,
            flip_h,
            flip_v,
            quarter_turns,
            gain,
            bias,
            blur_sigma,
        }
    }

    /// Source pixel feeding output pixel `(r, c)`, or `None` when it falls
    /// outside the input grid.
    pub fn source_coord(&self, r: usize, c: usize) -> Option<(usize, usize)> {
        let (h, w) = (self.height, self.width);
        // undo clockwise quarter turns; one turn maps in(i, j) to out(j, n-1-i)
        let (mut r, mut c) = match self.quarter_turns % 4 {
            0 => (r, c),
            1 => (h - 1 - c, r),
            2 => (h - 1 - r, w - 1 - c),
            _ => (c, w - 1 - r),
        };
        if self.flip_v {
            r = h - 1 - r;
        }
        if self.flip_h {
            c = w - 1 - c;
        }
        let (top, left, rows, cols) = self.crop;
        let sr = top + r * rows / h;
        let sc = left + c * cols / w;
        (sr < h && sc < w).then_some((sr, sc))
    }

    fn geometric_map(&self) -> Vec<Option<usize>> {
        let w = self.width;
        (0..self.height * w)
            .map(|p| self.source_coord(p / w, p % w).map(|(r, c)| r * w + c))
            .collect()
    }
}

/// Applies geometric and photometric parts to a `C×H×W` image (or `1×C×H×W`).
pub fn apply_strong_transform(t: &StrongTransform, x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let ok = match s.len() {
        3 => s[1] == t.height && s[2] == t.width,
        4 => s[0] == 1 && s[2] == t.height && s[3] == t.width,
        _ => false,
    };
    if !ok {
        return shape_err("apply_strong_transform", s, &[t.height, t.width]);
    }
    let plane = t.height * t.width;
    let channels = x.numel() / plane;
    let map = t.geometric_map();
    let mut out = vec![0.0; x.numel()];
    for ch in 0..channels {
        let src = &x.data()[ch * plane..(ch + 1) * plane];
        let dst = &mut out[ch * plane..(ch + 1) * plane];
        for (d, m) in dst.iter_mut().zip(&map) {
            *d = m.map_or(0.0, |i| src[i]);
        }
        let (g, b) = (t.gain[ch % 3], t.bias[ch % 3]);
        dst.iter_mut().for_each(|v| *v = *v * g + b);
        if t.blur_sigma > 0.0 {
            gaussian_blur(dst, t.height, t.width, t.blur_sigma);
        }
        dst.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Tensor::new(s, out)
}

/// Applies one transform per sample of a `B×C×H×W` batch.
pub fn apply_strong_transforms(ts: &[StrongTransform], x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 || ts.len() != x.shape()[0] {
        return shape_err("apply_strong_transforms", x.shape(), &[ts.len()]);
    }
    let parts = ts
        .iter()
        .enumerate()
        .map(|(i, t)| apply_strong_transform(t, &x.narrow_batch(i, 1)?))
        .collect::<Result<Vec<_>>>()?;
    Tensor::cat_batch(&parts.iter().collect::<Vec<_>>())
}

/// Geometric part only, nearest neighbour, for one label grid and its pixel
/// weights. Pixels with no source become 255 with weight 0.
pub fn trans_labels(t: &StrongTransform, y: &LabelMap, w: &[f64]) -> Result<(LabelMap, Vec<f64>)> {
    if y.batch() != 1 || y.height() != t.height || y.width() != t.width || w.len() != y.plane() {
        return shape_err(
            "trans_labels",
            &[y.batch(), y.height(), y.width(), w.len()],
            &[1, t.height, t.width, t.height * t.width],
        );
    }
    let map = t.geometric_map();
    let labels = map.iter().map(|m| m.map_or(IGNORE, |i| y.data()[i])).collect();
    let weights = map.iter().map(|m| m.map_or(0.0, |i| w[i])).collect();
    Ok((LabelMap::new(1, t.height, t.width, labels)?, weights))
}

fn gaussian_blur(data: &mut [f64], h: usize, w: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; data.len()];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * data[r * w + clamp(c as isize + k as isize - radius, w)])
                .sum();
        }
    }
    for r in 0..h {
        for c in 0..w {
            data[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clamp(r as isize + k as isize - radius, h) * w + c])
                .sum();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn probs(rows: &[[f64; 3]]) -> Tensor {
        // one pixel per entry of `rows`, laid out as 1×3×1×n
        let n = rows.len();
        Tensor::from_fn(&[1, 3, 1, n], |i| rows[i % n][i / n])
    }

    fn registry(n: usize, target: &[u8]) -> ClassRegistry {
        let names = (0..n).map(|i| format!("c{i}")).collect();
        ClassRegistry::new(names, target.to_vec()).unwrap()
    }

    #[test]
    fn fusion_picks_most_confident_branch() {
        let a = probs(&[[0.7, 0.2, 0.1]]);
        let b = probs(&[[0.4, 0.5, 0.1]]);
        let (l, c) = fuse_probabilities(&[a, b], FusionMode::MaxConfidence).unwrap();
        assert_eq!(l.data(), &[0]);
        assert_eq!(c, vec![0.7]);
    }

    #[test]
    fn fusion_tie_goes_to_lower_branch() {
        let a = probs(&[[0.6, 0.3, 0.1]]);
        let b = probs(&[[0.3, 0.1, 0.6]]);
        let (l, _) = fuse_probabilities(&[a.clone(), b.clone()], FusionMode::MaxConfidence).unwrap();
        assert_eq!(l.data(), &[0]);
        let (l, _) = fuse_probabilities(&[b, a], FusionMode::MaxConfidence).unwrap();
        assert_eq!(l.data(), &[2]);
    }

    #[test]
    fn identical_branches_fuse_to_argmax() {
        let a = probs(&[[0.2, 0.5, 0.3], [0.1, 0.1, 0.8]]);
        let (l, c) = fuse_probabilities(&[a.clone(), a.clone(), a], FusionMode::MaxConfidence).unwrap();
        assert_eq!(l.data(), &[1, 2]);
        assert_eq!(c, vec![0.5, 0.8]);
    }

    #[test]
    fn best_expert_uses_one_branch_per_image() {
        let a = probs(&[[0.9, 0.05, 0.05], [0.4, 0.3, 0.3]]);
        let b = probs(&[[0.1, 0.8, 0.1], [0.1, 0.8, 0.1]]);
        let (l, _) = fuse_probabilities(&[a, b], FusionMode::BestExpert).unwrap();
        // branch b has mean confidence 0.8 against 0.65
        assert_eq!(l.data(), &[1, 1]);
    }

    #[test]
    fn summation_averages_probabilities() {
        let a = probs(&[[0.7, 0.3, 0.0]]);
        let b = probs(&[[0.0, 0.2, 0.8]]);
        let (l, c) = fuse_probabilities(&[a, b], FusionMode::Summation).unwrap();
        assert_eq!(l.data(), &[2]);
        assert!((c[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn class_filter_equality_is_identity() {
        let reg = registry(3, &[0, 1, 2]);
        let l = LabelMap::new(1, 1, 4, vec![0, 1, 2, 255]).unwrap();
        assert_eq!(class_filter(&l, &reg).unwrap(), l);
    }

    #[test]
    fn class_filter_drops_outlier() {
        let reg = registry(6, &[0, 1, 2, 3, 4]);
        let l = LabelMap::new(1, 2, 3, vec![5, 0, 4, 5, 3, 1]).unwrap();
        let f = class_filter(&l, &reg).unwrap();
        assert_eq!(f.data(), &[255, 0, 4, 255, 3, 1]);
        let bad = LabelMap::new(1, 1, 1, vec![6]).unwrap();
        assert!(matches!(class_filter(&bad, &reg), Err(Error::InvalidLabel { .. })));
    }

    #[test]
    fn remap_is_bijective_on_target() {
        let reg = registry(6, &[0, 2, 3, 5]);
        let l = LabelMap::new(1, 1, 6, vec![0, 1, 2, 3, 4, 5]).unwrap();
        let r = remap_to_target(&l, &reg).unwrap();
        assert_eq!(r.data(), &[0, 255, 1, 2, 255, 3]);
        for t in 0..4u8 {
            assert_eq!(reg.remap(reg.unmap(t).unwrap()), Some(t));
        }
        assert_eq!(reg.outliers(), vec![1, 4]);
    }

    #[test]
    fn gate_is_strict() {
        assert_eq!(confidence_gate(&[0.969, 0.968, 1.0, 0.5], 0.968), vec![1.0, 0.0, 1.0, 0.0]);
        let grid = [0.99, 0.97, 0.968, 0.1, 0.9681, 0.5, 1.0, 0.96, 0.98];
        let kept: f64 = confidence_gate(&grid, DEFAULT_TAU).iter().sum();
        assert_eq!(kept, 5.0);
    }

    fn ramp(h: usize, w: usize) -> LabelMap {
        LabelMap::new(1, h, w, (0..h * w).map(|i| (i % 200) as u8).collect()).unwrap()
    }

    #[test]
    fn identity_transform_changes_nothing() {
        let t = StrongTransform::identity(5, 7);
        let y = ramp(5, 7);
        let w: Vec<f64> = (0..35).map(|i| i as f64 / 35.0).collect();
        let (y2, w2) = trans_labels(&t, &y, &w).unwrap();
        assert_eq!(y2, y);
        assert_eq!(w2, w);
        let x = Tensor::from_fn(&[3, 5, 7], |i| (i % 11) as f64 / 11.0);
        assert_eq!(apply_strong_transform(&t, &x).unwrap(), x);
    }

    #[test]
    fn half_turn_twice_restores_labels() {
        let mut t = StrongTransform::identity(6, 6);
        t.quarter_turns = 2;
        let y = ramp(6, 6);
        let w = vec![1.0; 36];
        let (once, _) = trans_labels(&t, &y, &w).unwrap();
        assert_ne!(once, y);
        let (twice, _) = trans_labels(&t, &once, &w).unwrap();
        assert_eq!(twice, y);
    }

    #[test]
    fn quarter_turn_four_times_restores_labels() {
        let mut t = StrongTransform::identity(5, 5);
        t.quarter_turns = 1;
        let mut y = ramp(5, 5);
        let w = vec![1.0; 25];
        let (first, _) = trans_labels(&t, &y, &w).unwrap();
        // clockwise: top-left corner moves to the top-right
        assert_eq!(first.get(0, 0, 4), y.get(0, 0, 0));
        for _ in 0..4 {
            y = trans_labels(&t, &y, &w).unwrap().0;
        }
        assert_eq!(y, ramp(5, 5));
    }

    #[test]
    fn horizontal_flip_mirrors_columns() {
        let mut t = StrongTransform::identity(4, 6);
        t.flip_h = true;
        let y = ramp(4, 6);
        let (f, _) = trans_labels(&t, &y, &[1.0; 24]).unwrap();
        for r in 0..4 {
            for c in 0..6 {
                assert_eq!(f.get(0, r, 5 - c), y.get(0, r, c));
            }
        }
    }

    #[test]
    fn crop_resizes_back_by_nearest() {
        let mut t = StrongTransform::identity(4, 4);
        t.crop = (2, 2, 2, 2);
        let y = ramp(4, 4);
        let (c, _) = trans_labels(&t, &y, &[1.0; 16]).unwrap();
        assert_eq!(c.get(0, 0, 0), y.get(0, 2, 2));
        assert_eq!(c.get(0, 3, 3), y.get(0, 3, 3));
        assert_eq!(c.get(0, 1, 2), y.get(0, 2, 3));
    }

    #[test]
    fn photometric_part_leaves_labels_alone() {
        let mut t = StrongTransform::identity(4, 4);
        t.gain = [0.5, 1.1, 0.9];
        t.bias = [0.1, -0.1, 0.0];
        t.blur_sigma = 0.8;
        let y = ramp(4, 4);
        assert_eq!(trans_labels(&t, &y, &[1.0; 16]).unwrap().0, y);
        let x = Tensor::full(&[3, 4, 4], 0.5);
        let out = apply_strong_transform(&t, &x).unwrap();
        assert!((out.data()[0] - 0.35).abs() < 1e-12);
        assert!((out.data()[16] - 0.45).abs() < 1e-12);
    }

    #[test]
    fn sampled_crops_are_never_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = StrongTransformConfig {
            crop_scale: (0.05, 1.0),
            ..Default::default()
        };
        for _ in 0..200 {
            let t = StrongTransform::sample(&cfg, 32, 32, &mut rng);
            assert!(t.crop.2 >= 8 && t.crop.3 >= 8);
            assert!(t.crop.0 + t.crop.2 <= 32 && t.crop.1 + t.crop.3 <= 32);
        }
    }

    proptest! {
        #[test]
        fn filter_output_in_target_or_ignore(data in proptest::collection::vec(0u8..6, 1..64)) {
            let reg = registry(6, &[0, 1, 3, 4]);
            let n = data.len();
            let l = LabelMap::new(1, 1, n, data).unwrap();
            let f = class_filter(&l, &reg).unwrap();
            prop_assert!(f.data().iter().all(|&v| v == IGNORE || reg.is_target(v)));
        }

        #[test]
        fn trans_commutes_with_filter(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let reg = registry(6, &[0, 2, 4, 5]);
            let y = LabelMap::new(1, 8, 8, (0..64).map(|_| rng.random_range(0..6u8)).collect()).unwrap();
            let t = StrongTransform::sample(&StrongTransformConfig::default(), 8, 8, &mut rng);
            let w = vec![1.0; 64];
            let a = class_filter(&trans_labels(&t, &y, &w).unwrap().0, &reg).unwrap();
            let b = trans_labels(&t, &class_filter(&y, &reg).unwrap(), &w).unwrap().0;
            prop_assert_eq!(a, b);
        }

        #[test]
        fn adding_a_branch_never_lowers_confidence(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng| {
                Tensor::from_fn(&[1, 4, 2, 2], |_| rng.random_range(-3.0..3.0)).softmax(1).unwrap()
            };
            let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let (_, two) = fuse_probabilities(&[a.clone(), b.clone()], FusionMode::MaxConfidence).unwrap();
            let (_, three) = fuse_probabilities(&[a, b, c], FusionMode::MaxConfidence).unwrap();
            prop_assert!(two.iter().zip(&three).all(|(x, y)| y >= x));
        }
    }
}
