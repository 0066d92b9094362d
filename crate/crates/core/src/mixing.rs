//! Source-to-target mixing at class and region level, and the confidence
//! weight map that down-weights pasted target pixels.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::label::{LabelMap, IGNORE};
use crate::pseudo::DEFAULT_TAU;
use crate::segnet::MultiBranchModel;
use crate::tensor::{Bound, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Class,
    Region,
}

/// Binary `H×W` grid: 1 keeps the source pixel, 0 takes the target pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
    kind: MaskKind,
}

impl MixMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>, kind: MaskKind) -> Result<Self> {
        if data.len() != height * width {
            return shape_err("MixMask::new", &[height, width], &[data.len()]);
        }
        if let Some(&v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Contract(format!("mask value {v} is not binary")));
        }
        Ok(Self {
            height,
            width,
            data,
            kind,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool, kind: MaskKind) -> Self {
        Self {
            height,
            width,
            data: vec![value as u8; height * width],
            kind,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn complement(&self) -> Self {
        Self {
            data: self.data.iter().map(|v| 1 - v).collect(),
            ..self.clone()
        }
    }

    /// Inclusive `(top, left, bottom, right)` of the set pixels.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for (i, &v) in self.data.iter().enumerate() {
            if v == 1 {
                let (r, c) = (i / self.width, i % self.width);
                bb = Some(match bb {
                    None => (r, c, r, c),
                    Some((t, l, b, rr)) => (t.min(r), l.min(c), b.max(r), rr.max(c)),
                });
            }
        }
        bb
    }
}

/// `⌈n·ratio⌉` guarded against representation error in the product.
fn ceil_fraction(n: usize, ratio: f64) -> usize {
    ((n as f64 * ratio - 1e-9).ceil() as usize).clamp(1, n)
}

/// Picks `⌈|P|·ratio⌉` of the classes present in `label` uniformly without
/// replacement; the mask is 1 exactly on their pixels.
pub fn make_class_mask<R: Rng>(label: &LabelMap, ratio: f64, rng: &mut R) -> Result<MixMask> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Contract(format!("class ratio {ratio} outside (0, 1]")));
    }
    if label.batch() != 1 {
        return shape_err("make_class_mask", &[label.batch()], &[1]);
    }
    let present = label.classes_present();
    if present.is_empty() {
        return Err(Error::Degenerate("source tile has no labelled class".into()));
    }
    let take = ceil_fraction(present.len(), ratio);
    let mut selected = [false; 256];
    for i in sample(rng, present.len(), take) {
        selected[present[i] as usize] = true;
    }
    let data = label
        .data()
        .iter()
        .map(|&v| (v != IGNORE && selected[v as usize]) as u8)
        .collect();
    MixMask::new(label.height(), label.width(), data, MaskKind::Class)
}

/// One axis-aligned rectangle of area close to `area_ratio·h·w`, aspect ratio
/// log-uniform in `[0.5, 2]`, placed uniformly.
pub fn make_region_mask<R: Rng>(h: usize, w: usize, area_ratio: f64, rng: &mut R) -> Result<MixMask> {
    if !(area_ratio > 0.0 && area_ratio < 1.0) {
        return Err(Error::Contract(format!("area ratio {area_ratio} outside (0, 1)")));
    }
    let area = area_ratio * (h * w) as f64;
    let aspect = rng.random_range(0.5f64.ln()..=2f64.ln()).exp();
    let mut rh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
    let rw = ((area / rh as f64).round() as usize).clamp(1, w);
    if rw == w {
        rh = ((area / w as f64).round() as usize).clamp(1, h);
    }
    let top = rng.random_range(0..=h - rh);
    let left = rng.random_range(0..=w - rw);
    let mut data = vec![0u8; h * w];
    for r in top..top + rh {
        data[r * w + left..r * w + left + rw].fill(1);
    }
    MixMask::new(h, w, data, MaskKind::Region)
}

/// Pixelwise selection between a source and a target sample. Images are
/// `C×H×W` (or `1×C×H×W`), labels single-sample.
pub fn apply_mix(
    x_src: &Tensor,
    y_src: &LabelMap,
    x_tgt: &Tensor,
    y_donor: &LabelMap,
    mask: &MixMask,
) -> Result<(Tensor, LabelMap)> {
    let plane = mask.height * mask.width;
    if x_src.shape() != x_tgt.shape() || x_src.numel() % plane != 0 {
        return shape_err("apply_mix", x_src.shape(), x_tgt.shape());
    }
    for y in [y_src, y_donor] {
        if y.batch() != 1 || y.height() != mask.height || y.width() != mask.width {
            return shape_err("apply_mix", &[y.batch(), y.height(), y.width()], &[1, mask.height, mask.width]);
        }
    }
    let x = x_src
        .data()
        .iter()
        .zip(x_tgt.data())
        .enumerate()
        .map(|(i, (s, t))| if mask.data[i % plane] == 1 { *s } else { *t })
        .collect();
    let y = (0..plane)
        .map(|p| if mask.data[p] == 1 { y_src.data()[p] } else { y_donor.data()[p] })
        .collect();
    Ok((
        Tensor::new(x_src.shape(), x)?,
        LabelMap::new(1, mask.height, mask.width, y)?,
    ))
}

/// Share of pixels whose max probability exceeds `tau`.
pub fn fraction_above(max_probs: &[f64], tau: f64) -> f64 {
    if max_probs.is_empty() {
        return 0.0;
    }
    max_probs.iter().filter(|&&p| p > tau).count() as f64 / max_probs.len() as f64
}

/// `w_t` for every sample of a `B×C×H×W` logit batch.
pub fn confidence_fractions(target_logits: &Tensor, tau: f64) -> Result<Vec<f64>> {
    if target_logits.rank() != 4 {
        return shape_err("confidence_fractions", target_logits.shape(), &[4]);
    }
    let (maxp, _) = target_logits.softmax(1)?.max_with_index(1)?;
    let plane = target_logits.shape()[2] * target_logits.shape()[3];
    Ok(maxp.data().chunks(plane).map(|c| fraction_above(c, tau)).collect())
}

/// Weight grid: 1 where the mask keeps the source, `w_t` elsewhere.
pub fn weight_map(mask: &MixMask, w_t: f64) -> Vec<f64> {
    mask.data.iter().map(|&m| if m == 1 { 1.0 } else { w_t }).collect()
}

/// Weight grid from the unmixed target prediction of one sample
/// (`1×C×H×W` logits).
pub fn confidence_weight_map(target_logits: &Tensor, mask: &MixMask, tau: f64) -> Result<Vec<f64>> {
    if target_logits.rank() != 4 || target_logits.shape()[0] != 1 {
        return shape_err("confidence_weight_map", target_logits.shape(), &[1]);
    }
    let w_t = confidence_fractions(target_logits, tau)?[0];
    Ok(weight_map(mask, w_t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixConfig {
    pub class_ratio: f64,
    pub region_ratio: f64,
    pub tau: f64,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            class_ratio: 0.5,
            region_ratio: 0.4,
            tau: DEFAULT_TAU,
        }
    }
}

/// Mixed images, labels and pixel weights for one source branch.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub image: Tensor,
    pub labels: LabelMap,
    pub weights: Vec<f64>,
    pub masks: Vec<MixMask>,
}

/// Mixes source sample `j` into target sample `j` for the whole batch. The
/// first `B/2` samples use region masks and the rest class masks. `w_t[j]`
/// weights the target pixels of sample `j`.
pub fn mix_batch<R: Rng>(
    x_src: &Tensor,
    y_src: &LabelMap,
    x_tgt: &Tensor,
    y_donor: &LabelMap,
    w_t: &[f64],
    cfg: &MixConfig,
    rng: &mut R,
) -> Result<MixedBatch> {
    let b = y_src.batch();
    if x_src.rank() != 4 || x_src.shape()[0] != b || x_tgt.shape() != x_src.shape() || y_donor.batch() != b || w_t.len() != b {
        return shape_err("mix_batch", x_src.shape(), x_tgt.shape());
    }
    let (h, w) = (y_src.height(), y_src.width());
    let mut images = Vec::with_capacity(b);
    let mut labels = Vec::with_capacity(b);
    let mut weights = Vec::with_capacity(b * h * w);
    let mut masks = Vec::with_capacity(b);
    for j in 0..b {
        let ys = y_src.sample(j);
        let mask = if j < b / 2 {
            make_region_mask(h, w, cfg.region_ratio, rng)?
        } else {
            make_class_mask(&ys, cfg.class_ratio, rng)?
        };
        let (x, y) = apply_mix(
            &x_src.narrow_batch(j, 1)?,
            &ys,
            &x_tgt.narrow_batch(j, 1)?,
            &y_donor.sample(j),
            &mask,
        )?;
        weights.extend(weight_map(&mask, w_t[j]));
        images.push(x);
        labels.push(y);
        masks.push(mask);
    }
    Ok(MixedBatch {
        image: Tensor::cat_batch(&images.iter().collect::<Vec<_>>())?,
        labels: LabelMap::stack(&labels)?,
        weights,
        masks,
    })
}

/// Weighted cross-entropy of branch `i` on a mixed batch.
pub fn branch_ssl_loss(
    g: &mut Graph,
    model: &MultiBranchModel,
    p: &Bound,
    i: usize,
    mixed: &MixedBatch,
) -> Result<Var> {
    let x = g.constant(mixed.image.clone());
    let logits = model.forward_branch(g, p, i, x)?;
    g.masked_weighted_cross_entropy(logits, &mixed.labels, &mixed.weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::ModelConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(h: usize, w: usize, data: Vec<u8>) -> LabelMap {
        LabelMap::new(1, h, w, data).unwrap()
    }

    #[test]
    fn class_mask_full_ratio_covers_labelled_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = labels(2, 3, vec![0, 1, 255, 2, 1, 0]);
        let m = make_class_mask(&y, 1.0, &mut rng).unwrap();
        assert_eq!(m.data(), &[1, 1, 0, 1, 1, 1]);
        assert_eq!(m.kind(), MaskKind::Class);
    }

    #[test]
    fn class_mask_two_classes_selects_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = labels(2, 2, vec![0, 1, 1, 0]);
        for _ in 0..20 {
            let m = make_class_mask(&y, 0.5, &mut rng).unwrap();
            let chosen: Vec<u8> = (0..4).filter(|&p| m.data()[p] == 1).map(|p| y.data()[p]).collect();
            assert_eq!(chosen.len(), 2);
            assert_eq!(chosen[0], chosen[1]);
        }
    }

    #[test]
    fn class_mask_selection_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = labels(1, 4, vec![0, 1, 2, 3]);
        let mut hits = [0usize; 4];
        for _ in 0..1000 {
            let m = make_class_mask(&y, 0.5, &mut rng).unwrap();
            assert_eq!(m.count(), 2);
            for c in 0..4 {
                hits[c] += m.data()[c] as usize;
            }
        }
        for h in hits {
            let f = h as f64 / 1000.0;
            assert!((f - 0.5).abs() <= 0.05, "{f}");
        }
    }

    #[test]
    fn class_mask_rejects_empty_tile() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = labels(2, 2, vec![255; 4]);
        assert!(matches!(make_class_mask(&y, 0.5, &mut rng), Err(Error::Degenerate(_))));
    }

    #[test]
    fn region_mask_area_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let m = make_region_mask(32, 32, 0.4, &mut rng).unwrap();
            let s = m.count() as f64;
            assert!((s - 0.4 * 1024.0).abs() <= 32.0, "{s}");
            let (t, l, b, r) = m.bounding_box().unwrap();
            assert_eq!((b - t + 1) * (r - l + 1), m.count());
        }
    }

    #[test]
    fn region_mask_large_ratio_never_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let m = make_region_mask(32, 32, 0.9, &mut rng).unwrap();
            assert!((m.count() as f64 - 0.9 * 1024.0).abs() <= 32.0);
        }
        assert!(make_region_mask(32, 32, 1.0, &mut rng).is_err());
    }

    #[test]
    fn region_centres_reach_every_quadrant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut quadrants = [0usize; 4];
        for _ in 0..1000 {
            let m = make_region_mask(32, 32, 0.4, &mut rng).unwrap();
            let (t, l, b, r) = m.bounding_box().unwrap();
            let (cy, cx) = ((t + b) as f64 / 2.0, (l + r) as f64 / 2.0);
            quadrants[(cy >= 15.5) as usize * 2 + (cx >= 15.5) as usize] += 1;
        }
        assert!(quadrants.iter().all(|&q| q > 0), "{quadrants:?}");
    }

    #[test]
    fn mix_extremes_and_interleave() {
        let xs = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let xt = Tensor::new(&[1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let ys = labels(2, 2, vec![0, 1, 2, 3]);
        let yt = labels(2, 2, vec![4, 5, 255, 5]);
        let (x, y) = apply_mix(&xs, &ys, &xt, &yt, &MixMask::filled(2, 2, true, MaskKind::Region)).unwrap();
        assert_eq!((x, y), (xs.clone(), ys.clone()));
        let (x, y) = apply_mix(&xs, &ys, &xt, &yt, &MixMask::filled(2, 2, false, MaskKind::Region)).unwrap();
        assert_eq!((x, y), (xt.clone(), yt.clone()));
        let m = MixMask::new(2, 2, vec![1, 0, 0, 1], MaskKind::Class).unwrap();
        let (x, y) = apply_mix(&xs, &ys, &xt, &yt, &m).unwrap();
        assert_eq!(x.data(), &[1.0, 6.0, 7.0, 4.0]);
        assert_eq!(y.data(), &[0, 5, 255, 3]);
    }

    #[test]
    fn weight_map_cases() {
        assert_eq!(fraction_above(&[0.99, 0.5, 0.97, 0.2], 0.968), 0.5);
        let m = MixMask::new(2, 2, vec![1, 0, 0, 1], MaskKind::Class).unwrap();
        assert_eq!(weight_map(&m, 0.5), vec![1.0, 0.5, 0.5, 1.0]);
        assert_eq!(weight_map(&MixMask::filled(2, 2, true, MaskKind::Class), 0.1), vec![1.0; 4]);
        // peaked logits give probabilities of 1 in double precision
        let peaked = Tensor::from_fn(&[1, 2, 2, 2], |i| if i < 4 { 50.0 } else { -50.0 });
        let w = confidence_weight_map(&peaked, &m, DEFAULT_TAU).unwrap();
        assert_eq!(w, vec![1.0; 4]);
        let flat = Tensor::zeros(&[1, 2, 2, 2]);
        assert_eq!(confidence_weight_map(&flat, &m, DEFAULT_TAU).unwrap(), vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn batch_uses_both_mask_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = 4;
        let ys = LabelMap::new(b, 4, 4, (0..64).map(|i| (i % 3) as u8).collect()).unwrap();
        let yd = LabelMap::filled(b, 4, 4, 5);
        let xs = Tensor::zeros(&[b, 3, 4, 4]);
        let xt = Tensor::full(&[b, 3, 4, 4], 1.0);
        let mixed = mix_batch(&xs, &ys, &xt, &yd, &[0.25; 4], &MixConfig::default(), &mut rng).unwrap();
        let kinds: Vec<MaskKind> = mixed.masks.iter().map(|m| m.kind()).collect();
        assert_eq!(kinds, [MaskKind::Region, MaskKind::Region, MaskKind::Class, MaskKind::Class]);
        for (j, m) in mixed.masks.iter().enumerate() {
            for p in 0..16 {
                let (y, w) = (mixed.labels.data()[j * 16 + p], mixed.weights[j * 16 + p]);
                if m.data()[p] == 1 {
                    assert_eq!((y, w), (ys.data()[j * 16 + p], 1.0));
                } else {
                    assert_eq!((y, w), (5, 0.25));
                }
            }
        }
    }

    fn tiny_model() -> MultiBranchModel {
        let cfg = ModelConfig {
            backbone_channels: 3,
            backbone_depth: 1,
            expert_channels: 2,
            num_union_classes: 3,
            num_target_classes: 3,
            height: 8,
            width: 8,
            ..Default::default()
        };
        MultiBranchModel::init(&cfg, 0).unwrap()
    }

    fn loss_of(model: &MultiBranchModel, mixed: &MixedBatch) -> f64 {
        let mut g = Graph::new();
        let p = model.bind(&mut g, false);
        let l = branch_ssl_loss(&mut g, model, &p, 0, mixed).unwrap();
        g.value(l).item()
    }

    #[test]
    fn ssl_loss_reduces_to_supervised_and_respects_ignore() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xs = Tensor::from_fn(&[1, 3, 8, 8], |_| rng.random_range(0.0..1.0));
        let xt = Tensor::from_fn(&[1, 3, 8, 8], |_| rng.random_range(0.0..1.0));
        let ys = LabelMap::new(1, 8, 8, (0..64).map(|i| (i % 3) as u8).collect()).unwrap();
        let mut g = Graph::new();
        let p = model.bind(&mut g, false);
        let xv = g.constant(xs.clone());
        let logits = model.forward_branch(&mut g, &p, 0, xv).unwrap();
        let sup = g.masked_weighted_cross_entropy(logits, &ys, &[1.0; 64]).unwrap();
        let sup = g.value(sup).item();

        let all = MixMask::filled(8, 8, true, MaskKind::Region);
        let (x, y) = apply_mix(&xs, &ys, &xt, &LabelMap::filled(1, 8, 8, 0), &all).unwrap();
        let mixed = MixedBatch {
            image: x,
            labels: y,
            weights: weight_map(&all, 0.3),
            masks: vec![all],
        };
        assert!((loss_of(&model, &mixed) - sup).abs() < 1e-14);

        // ignored donor pixels: only the source rectangle contributes
        let mask = make_region_mask(8, 8, 0.4, &mut rng).unwrap();
        let (x, y) = apply_mix(&xs, &ys, &xt, &LabelMap::filled(1, 8, 8, IGNORE), &mask).unwrap();
        let mixed = MixedBatch {
            image: x.clone(),
            labels: y.clone(),
            weights: weight_map(&mask, 0.7),
            masks: vec![mask.clone()],
        };
        let mut g = Graph::new();
        let p = model.bind(&mut g, false);
        let xv = g.constant(x);
        let logits = model.forward_branch(&mut g, &p, 0, xv).unwrap();
        let region = g.masked_weighted_cross_entropy(logits, &y, &[1.0; 64]).unwrap();
        assert!((loss_of(&model, &mixed) - g.value(region).item()).abs() < 1e-14);
    }

    #[test]
    fn ssl_loss_hand_case() {
        // 2×2 grid, two classes, straight through the loss kernel
        let logits = Tensor::new(&[1, 2, 2, 2], vec![0.0, 1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let y = labels(2, 2, vec![0, 1, 1, 255]);
        let m = MixMask::new(2, 2, vec![1, 0, 1, 0], MaskKind::Class).unwrap();
        let w = weight_map(&m, 0.5);
        let mut g = Graph::new();
        let l = g.constant(logits);
        let loss = g.masked_weighted_cross_entropy(l, &y, &w).unwrap();
        let ln2 = 2f64.ln();
        let e = 1f64.exp();
        // pixel 0: class 0 of (0,0); pixel 1: class 1 of (1,0); pixel 2: class 1 of (0,1)
        let expected = (ln2 + 0.5 * (1.0 + e).ln() + (1.0 + 1.0 / e).ln()) / 3.0;
        assert!((g.value(loss).item() - expected).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn complement_reconstructs_source(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs = Tensor::from_fn(&[3, 6, 6], |_| rng.random_range(0.0..1.0));
            let xt = Tensor::from_fn(&[3, 6, 6], |_| rng.random_range(0.0..1.0));
            let ys = LabelMap::new(1, 6, 6, (0..36).map(|_| rng.random_range(0..4u8)).collect()).unwrap();
            let yt = LabelMap::new(1, 6, 6, (0..36).map(|_| rng.random_range(0..4u8)).collect()).unwrap();
            let m = make_region_mask(6, 6, 0.4, &mut rng).unwrap();
            let (xm, ym) = apply_mix(&xs, &ys, &xt, &yt, &m).unwrap();
            let (xc, yc) = apply_mix(&xs, &ys, &xt, &yt, &m.complement()).unwrap();
            let (xr, yr) = apply_mix(&xm, &ym, &xc, &yc, &m).unwrap();
            prop_assert_eq!(xr, xs);
            prop_assert_eq!(yr, ys);
        }

        #[test]
        fn mixed_labels_stay_in_union(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ys = LabelMap::new(2, 5, 5, (0..50).map(|_| rng.random_range(0..6u8)).collect()).unwrap();
            let yd = LabelMap::new(2, 5, 5, (0..50).map(|i| if i % 7 == 0 { IGNORE } else { rng.random_range(0..6u8) }).collect()).unwrap();
            let x = Tensor::zeros(&[2, 3, 5, 5]);
            let mixed = mix_batch(&x, &ys, &x, &yd, &[0.5, 0.5], &MixConfig::default(), &mut rng).unwrap();
            prop_assert!(mixed.labels.data().iter().all(|&v| v == IGNORE || v < 6));
        }

        #[test]
        fn weight_fraction_ignores_pixel_order(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p: Vec<f64> = (0..40).map(|_| rng.random_range(0.9..1.0)).collect();
            let a = fraction_above(&p, DEFAULT_TAU);
            for i in (1..p.len()).rev() {
                p.swap(i, rng.random_range(0..=i));
            }
            prop_assert_eq!(a, fraction_above(&p, DEFAULT_TAU));
        }
    }
}
