//! Multi-branch segmentation network: a shared stride-1 CNN backbone, one
//! expert and classifier per source, a compressor for backbone features, and
//! the integration head. [`EmaTeacher`] is the slow copy used for
//! pseudo-labels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::hgcn::{HeadConfig, IntegrationHead};
use crate::tensor::{Bound, Graph, ParamStore, Tensor, Var};

/// Image channels fed to the backbone.
pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_sources: usize,
    pub backbone_channels: usize,
    pub backbone_depth: usize,
    pub expert_channels: usize,
    pub num_union_classes: usize,
    pub num_target_classes: usize,
    pub height: usize,
    pub width: usize,
    pub ema_decay: f64,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_sources: 2,
            backbone_channels: 64,
            backbone_depth: 4,
            expert_channels: 64,
            num_union_classes: 6,
            num_target_classes: 6,
            height: 32,
            width: 32,
            ema_decay: 0.999,
            head: HeadConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Checks structural limits. A single source is accepted so the
    /// combined-source baseline can reuse the same network.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_sources == 0 {
            return bad("num_sources must be at least 1".into());
        }
        if self.num_target_classes == 0 || self.num_target_classes > self.num_union_classes {
            return bad(format!(
                "need 1 <= num_target_classes ({}) <= num_union_classes ({})",
                self.num_target_classes, self.num_union_classes
            ));
        }
        if self.num_union_classes >= 255 {
            return bad("at most 254 union classes".into());
        }
        if self.height < 8 || self.width < 8 {
            return bad(format!("input {}x{} is below 8x8", self.height, self.width));
        }
        if self.backbone_depth == 0 || self.backbone_channels == 0 {
            return bad("backbone needs at least one layer and channel".into());
        }
        if self.expert_channels < 2 {
            return bad("expert_channels must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay {} outside [0, 1)", self.ema_decay));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Layout {
    backbone: Vec<(usize, usize)>,
    experts: Vec<(usize, usize)>,
    classifiers: Vec<(usize, usize)>,
    compressor: (usize, usize),
    head: IntegrationHead,
}

#[derive(Debug, Clone)]
pub struct MultiBranchModel {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

fn conv_layer(
    params: &mut ParamStore,
    name: &str,
    out: usize,
    inp: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> (usize, usize) {
    let w = params.push_he(format!("{name}.w"), &[out, inp, k, k], inp * k * k, rng);
    let b = params.push(format!("{name}.b"), Tensor::zeros(&[out]));
    (w, b)
}

impl MultiBranchModel {
    /// He-uniform weights and zero biases, drawn from a ChaCha stream seeded
    /// by `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = config.backbone_channels;
        let nf = config.expert_channels;
        let backbone = (0..config.backbone_depth)
            .map(|l| {
                let inp = if l == 0 { INPUT_CHANNELS } else { c };
                conv_layer(&mut params, &format!("backbone.conv{l}"), c, inp, 3, &mut rng)
            })
            .collect();
        let experts = (0..config.num_sources)
            .map(|i| conv_layer(&mut params, &format!("expert.{i}"), nf, c, 3, &mut rng))
            .collect();
        let classifiers = (0..config.num_sources)
            .map(|i| {
                conv_layer(&mut params, &format!("classifier.{i}"), config.num_union_classes, nf, 1, &mut rng)
            })
            .collect();
        let compressor = conv_layer(&mut params, "compressor", nf, c, 3, &mut rng);
        let head = IntegrationHead::init(
            &mut params,
            &config.head,
            config.num_sources,
            nf,
            (config.height, config.width),
            config.num_target_classes,
            &mut rng,
        )?;
        Ok(Self {
            config: config.clone(),
            params,
            layout: Layout {
                backbone,
                experts,
                classifiers,
                compressor,
                head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn head(&self) -> &IntegrationHead {
        &self.layout.head
    }

    pub fn num_sources(&self) -> usize {
        self.config.num_sources
    }

    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Bound {
        self.params.bind(g, requires_grad)
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        let want = [s.first().copied().unwrap_or(0), INPUT_CHANNELS, self.config.height, self.config.width];
        if s.len() != 4 || s != want {
            return shape_err("model input", s, &want);
        }
        Ok(())
    }

    fn branch_index(&self, i: usize) -> Result<()> {
        if i >= self.config.num_sources {
            return Err(Error::IndexOutOfRange {
                what: "source branch",
                index: i,
                len: self.config.num_sources,
            });
        }
        Ok(())
    }

    fn conv_relu(g: &mut Graph, p: &Bound, (w, b): (usize, usize), x: Var) -> Result<Var> {
        let y = g.conv2d(x, p.var(w))?;
        let y = g.channel_bias(y, p.var(b))?;
        Ok(g.relu(y))
    }

    /// Shared features `B×C×H×W`.
    pub fn backbone(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let mut h = x;
        for &layer in &self.layout.backbone {
            h = Self::conv_relu(g, p, layer, h)?;
        }
        Ok(h)
    }

    /// Expert `i` on backbone features, `B×N_f×H×W`.
    pub fn expert(&self, g: &mut Graph, p: &Bound, i: usize, features: Var) -> Result<Var> {
        self.branch_index(i)?;
        Self::conv_relu(g, p, self.layout.experts[i], features)
    }

    /// Classifier `i` on expert features, `B×N_CS×H×W`.
    pub fn classify(&self, g: &mut Graph, p: &Bound, i: usize, expert: Var) -> Result<Var> {
        self.branch_index(i)?;
        let (w, b) = self.layout.classifiers[i];
        let y = g.conv2d(expert, p.var(w))?;
        g.channel_bias(y, p.var(b))
    }

    pub fn compress(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<Var> {
        Self::conv_relu(g, p, self.layout.compressor, features)
    }

    /// Branch `i` logits from precomputed backbone features.
    pub fn branch_from_features(&self, g: &mut Graph, p: &Bound, i: usize, features: Var) -> Result<Var> {
        let e = self.expert(g, p, i, features)?;
        self.classify(g, p, i, e)
    }

    /// `F_i(E_i(G(x)))` for 0-based source index `i`.
    pub fn forward_branch(&self, g: &mut Graph, p: &Bound, i: usize, x: Var) -> Result<Var> {
        self.branch_index(i)?;
        let f = self.backbone(g, p, x)?;
        self.branch_from_features(g, p, i, f)
    }

    /// Expert features of every branch plus the compressed backbone features.
    pub fn features_from_backbone(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<(Vec<Var>, Var)> {
        let experts = (0..self.config.num_sources)
            .map(|i| self.expert(g, p, i, features))
            .collect::<Result<_>>()?;
        let compressed = self.compress(g, p, features)?;
        Ok((experts, compressed))
    }

    pub fn forward_features(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<(Vec<Var>, Var)> {
        let f = self.backbone(g, p, x)?;
        self.features_from_backbone(g, p, f)
    }

    /// Integration-head logits over the target classes.
    pub fn head_logits(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let (mut maps, compressed) = self.forward_features(g, p, x)?;
        maps.push(compressed);
        self.layout.head.integrate(g, p, &maps)
    }

    /// Value-only logits of every branch for a batch, sharing one backbone pass.
    pub fn predict_branches(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let f = self.backbone(&mut g, &p, xv)?;
        let outs = (0..self.config.num_sources)
            .map(|i| self.branch_from_features(&mut g, &p, i, f))
            .collect::<Result<Vec<_>>>()?;
        Ok(outs.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Value-only logits of one branch.
    pub fn predict_branch(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward_branch(&mut g, &p, i, xv)?;
        Ok(g.value(y).clone())
    }

    /// Value-only integration-head logits.
    pub fn predict_head(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.head_logits(&mut g, &p, xv)?;
        Ok(g.value(y).clone())
    }
}

/// Slow-moving copy of the student; never bound with gradients.
#[derive(Debug, Clone)]
pub struct EmaTeacher {
    model: MultiBranchModel,
}

impl EmaTeacher {
    pub fn from_student(student: &MultiBranchModel) -> Self {
        Self {
            model: student.clone(),
        }
    }

    pub fn model(&self) -> &MultiBranchModel {
        &self.model
    }

    /// Replaces the teacher's parameters, e.g. from a checkpoint.
    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.model.params
    }

    /// `θ' ← m·θ' + (1−m)·θ` for every parameter.
    pub fn update(&mut self, student: &MultiBranchModel, m: f64) -> Result<()> {
        ema_update(&mut self.model.params, &student.params, m)
    }
}

/// EMA step over two mirrored parameter stores.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Contract(format!("EMA decay {m} outside [0, 1]")));
    }
    teacher.check_mirrors(student)?;
    for id in 0..teacher.len() {
        let s = student.get(id).data();
        for (t, v) in teacher.get_mut(id).data_mut().iter_mut().zip(s) {
            *t = m * *t + (1.0 - m) * v;
        }
    }
    Ok(())
}
