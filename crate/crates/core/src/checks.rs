//! Central-difference gradient checks over every differentiable operation.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::hgcn::{hypergraph_conv, multi_domain_loss, Hypergraph};
use crate::label::{LabelMap, IGNORE};
use crate::pseudo::{StrongTransform, StrongTransformConfig};
use crate::segnet::{ModelConfig, MultiBranchModel};
use crate::tensor::{gradient_check, Graph, Tensor, Var};

/// Largest relative error any check may report.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-5;
pub const DEFAULT_SEEDS: u64 = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub seeds: u64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOLERANCE
    }
}

type Check = fn(u64) -> Result<f64>;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(salt);
    r
}

/// Contracts `y` with a fixed random probe so every output element matters.
fn probe_sum(g: &mut Graph, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let p = g.constant(random(&g.shape(y).to_vec(), rng));
    let z = g.mul(y, p)?;
    Ok(g.sum(z))
}

fn check_matmul(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 1);
    let (a, b) = (random(&[4, 5], &mut r), random(&[5, 3], &mut r));
    let probe = random(&[4, 3], &mut r);
    let lhs = gradient_check(
        |g, v| {
            let bv = g.constant(b.clone());
            let y = g.matmul(v, bv)?;
            let p = g.constant(probe.clone());
            let y = g.mul(y, p)?;
            Ok(g.sum(y))
        },
        &a,
        GRADCHECK_STEP,
    )?;
    let rhs = gradient_check(
        |g, v| {
            let av = g.constant(a.clone());
            let y = g.matmul(av, v)?;
            let p = g.constant(probe.clone());
            let y = g.mul(y, p)?;
            Ok(g.sum(y))
        },
        &b,
        GRADCHECK_STEP,
    )?;
    Ok(lhs.max(rhs))
}

fn check_conv2d(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 2);
    let x = random(&[2, 3, 5, 4], &mut r);
    let w = random(&[2, 3, 3, 3], &mut r);
    let w1 = random(&[3, 3, 1, 1], &mut r);
    let probe = random(&[2, 2, 5, 4], &mut r);
    let run = |g: &mut Graph, xv: Var, wv: Var| -> Result<Var> {
        let y = g.conv2d(xv, wv)?;
        let p = g.constant(probe.clone());
        let y = g.mul(y, p)?;
        Ok(g.sum(y))
    };
    let wrt_x = gradient_check(
        |g, v| {
            let wv = g.constant(w.clone());
            run(g, v, wv)
        },
        &x,
        GRADCHECK_STEP,
    )?;
    let wrt_w = gradient_check(
        |g, v| {
            let xv = g.constant(x.clone());
            run(g, xv, v)
        },
        &w,
        GRADCHECK_STEP,
    )?;
    let pointwise = gradient_check(
        |g, v| {
            let xv = g.constant(x.clone());
            let y = g.conv2d(xv, v)?;
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        },
        &w1,
        GRADCHECK_STEP,
    )?;
    Ok(wrt_x.max(wrt_w).max(pointwise))
}

fn check_elementwise(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 3);
    let x = random(&[3, 4], &mut r);
    let other = random(&[3, 4], &mut r);
    gradient_check(
        |g, v| {
            let o = g.constant(other.clone());
            let a = g.add(v, o)?;
            let m = g.mul(a, v)?;
            let s = g.scale(m, -0.7);
            let y = g.relu(s);
            let y = g.add(y, v)?;
            Ok(g.mean(y))
        },
        &x,
        GRADCHECK_STEP,
    )
}

fn check_bias(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 4);
    let x = random(&[2, 3, 2, 2], &mut r);
    let b = random(&[3], &mut r);
    let run = |g: &mut Graph, xv: Var, bv: Var| -> Result<Var> {
        let y = g.channel_bias(xv, bv)?;
        probe_sum(g, y, &mut r.clone())
    };
    let wrt_x = gradient_check(
        |g, v| {
            let bv = g.constant(b.clone());
            run(g, v, bv)
        },
        &x,
        GRADCHECK_STEP,
    )?;
    let wrt_b = gradient_check(
        |g, v| {
            let xv = g.constant(x.clone());
            run(g, xv, v)
        },
        &b,
        GRADCHECK_STEP,
    )?;
    Ok(wrt_x.max(wrt_b))
}

fn check_structural(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 5);
    let x = random(&[2, 3, 4, 4], &mut r);
    gradient_check(
        |g, v| {
            let a = g.slice(v, 1, 1, 2)?;
            let b = g.permute(v, &[0, 1, 3, 2])?;
            let c = g.concat(&[a, b], 1)?;
            let c = g.reshape(c, &[2, 5, 16])?;
            let c = g.reshape(c, &[2, 5, 4, 4])?;
            let c = g.avg_pool(c, 2)?;
            let c = g.upsample(c, 2)?;
            let c = g.upsample_bilinear(c, 2)?;
            probe_sum(g, c, &mut r.clone())
        },
        &x,
        GRADCHECK_STEP,
    )
}

fn check_softmax_max(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 6);
    let x = random(&[2, 4, 3], &mut r);
    gradient_check(
        |g, v| {
            let s = g.softmax(v, 1)?;
            let (m, _) = g.max_with_index(v, 2)?;
            let y = probe_sum(g, s, &mut r.clone())?;
            let m = g.mul(m, m)?;
            let m = g.sum(m);
            g.add(y, m)
        },
        &x,
        GRADCHECK_STEP,
    )
}

fn check_cross_entropy(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 7);
    let x = random(&[2, 4, 3, 3], &mut r);
    let labels: Vec<u8> = (0..18)
        .map(|_| if r.random_bool(0.2) { IGNORE } else { r.random_range(0..4) })
        .collect();
    let labels = LabelMap::new(2, 3, 3, labels)?;
    let weights: Vec<f64> = (0..18).map(|_| r.random_range(0.0..1.0)).collect();
    gradient_check(
        |g, v| g.masked_weighted_cross_entropy(v, &labels, &weights),
        &x,
        GRADCHECK_STEP,
    )
}

/// Two layers on the spatial view and two on the feature view of one input.
fn check_two_view_hypergraph(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 8);
    let (b, c, n) = (2, 4, 9);
    let x = random(&[b, c, n], &mut r);
    let ts = [random(&[c, 5], &mut r), random(&[5, 3], &mut r)];
    let tf = [random(&[n, 6], &mut r), random(&[6, 4], &mut r)];
    let graphs = |t: &Tensor, k: usize| -> Result<Vec<Arc<Hypergraph>>> {
        let (rows, cols) = (t.shape()[1], t.shape()[2]);
        (0..b)
            .map(|i| {
                let xi = Tensor::new(&[rows, cols], t.data()[i * rows * cols..(i + 1) * rows * cols].to_vec())?;
                Hypergraph::knn(&xi, k).map(Arc::new)
            })
            .collect()
    };
    let mut g0 = Graph::new();
    let xv = g0.constant(x.clone());
    let spatial = g0.permute(xv, &[0, 2, 1])?;
    let gs = graphs(g0.value(spatial), 3)?;
    let gf = graphs(&x, 2)?;
    let path = |g: &mut Graph, v: Var, thetas: [Var; 4]| -> Result<Var> {
        let x1 = g.permute(v, &[0, 2, 1])?;
        let y = hypergraph_conv(g, &gs, x1, thetas[0])?;
        let y = hypergraph_conv(g, &gs, y, thetas[1])?;
        let z = hypergraph_conv(g, &gf, v, thetas[2])?;
        let z = hypergraph_conv(g, &gf, z, thetas[3])?;
        let y = g.reshape(y, &[b, n * 3])?;
        let z = g.reshape(z, &[b, c * 4])?;
        let cat = g.concat(&[y, z], 1)?;
        let sq = g.mul(cat, cat)?;
        Ok(g.sum(sq))
    };
    let consts = |g: &mut Graph| -> [Var; 4] {
        [
            g.constant(ts[0].clone()),
            g.constant(ts[1].clone()),
            g.constant(tf[0].clone()),
            g.constant(tf[1].clone()),
        ]
    };
    let mut worst = gradient_check(
        |g, v| {
            let t = consts(g);
            path(g, v, t)
        },
        &x,
        GRADCHECK_STEP,
    )?;
    for which in 0..4 {
        let target = [&ts[0], &ts[1], &tf[0], &tf[1]][which];
        let err = gradient_check(
            |g, v| {
                let xv = g.constant(x.clone());
                let mut t = consts(g);
                t[which] = v;
                path(g, xv, t)
            },
            target,
            GRADCHECK_STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn tiny_model(seed: u64) -> Result<MultiBranchModel> {
    let mut cfg = ModelConfig {
        num_sources: 2,
        backbone_channels: 3,
        backbone_depth: 2,
        expert_channels: 3,
        num_union_classes: 4,
        num_target_classes: 3,
        height: 8,
        width: 8,
        ..ModelConfig::default()
    };
    cfg.head.spatial_channels = 3;
    cfg.head.k_spatial = 4;
    cfg.head.k_feature = 2;
    cfg.head.pool = 2;
    MultiBranchModel::init(&cfg, seed)
}

/// Branch cross-entropy through backbone, expert and classifier, checked
/// against one parameter tensor per module.
fn check_branch_parameters(seed: u64) -> Result<f64> {
    let m = tiny_model(seed)?;
    let mut r = rng(seed, 9);
    let x = Tensor::from_fn(&[1, 3, 8, 8], |_| r.random_range(0.0..1.0));
    let labels = LabelMap::new(1, 8, 8, (0..64).map(|_| r.random_range(0..4)).collect())?;
    let mut worst = 0.0f64;
    for name in ["backbone.conv0.w", "expert.1.w", "classifier.1.b"] {
        let id = m.params().id(name).expect("parameter exists");
        let err = gradient_check(
            |g, v| {
                let p = m.bind(g, false).with_var(id, v);
                let xv = g.constant(x.clone());
                let y = m.forward_branch(g, &p, 1, xv)?;
                g.masked_weighted_cross_entropy(y, &labels, &[1.0; 64])
            },
            m.params().get(id),
            GRADCHECK_STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Head loss on a strongly transformed input, differentiated with respect to
/// the compressed feature map.
fn check_head_loss(seed: u64) -> Result<f64> {
    let m = tiny_model(seed)?;
    let mut r = rng(seed, 10);
    let feats: Vec<Tensor> = (0..3)
        .map(|_| Tensor::from_fn(&[1, 3, 8, 8], |_| r.random_range(0.0..1.0)))
        .collect();
    let pseudo = LabelMap::new(1, 8, 8, (0..64).map(|_| r.random_range(0..3)).collect())?;
    let gate: Vec<f64> = (0..64).map(|_| r.random_bool(0.7) as u8 as f64).collect();
    let t = StrongTransform::sample(&StrongTransformConfig::default(), 8, 8, &mut r);
    gradient_check(
        |g, v| {
            let p = m.bind(g, false);
            let a = g.constant(feats[0].clone());
            let b = g.constant(feats[1].clone());
            let logits = m.head().integrate(g, &p, &[a, b, v])?;
            multi_domain_loss(g, logits, &pseudo, &gate, std::slice::from_ref(&t))
        },
        &feats[2],
        GRADCHECK_STEP,
    )
}

pub const CHECKS: [(&str, Check); 10] = [
    ("matmul", check_matmul),
    ("conv2d", check_conv2d),
    ("add_mul_scale_relu_mean", check_elementwise),
    ("channel_bias", check_bias),
    ("slice_permute_concat_reshape_pool_upsample", check_structural),
    ("softmax_max_sum", check_softmax_max),
    ("masked_weighted_cross_entropy", check_cross_entropy),
    ("hypergraph_two_view_two_layer", check_two_view_hypergraph),
    ("branch_parameters", check_branch_parameters),
    ("integration_head_loss", check_head_loss),
];

/// Runs every check for seeds `0..seeds` and keeps the worst error of each.
pub fn gradient_suite(seeds: u64) -> Result<Vec<CheckResult>> {
    CHECKS
        .iter()
        .map(|&(name, check)| {
            let mut worst = 0.0f64;
            for s in 0..seeds {
                worst = worst.max(check(s)?);
            }
            Ok(CheckResult {
                name,
                max_rel_err: worst,
                seeds,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_two_seeds() {
        for r in gradient_suite(2).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }
}
