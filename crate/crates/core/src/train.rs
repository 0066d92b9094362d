//! The adaptation loop: supervised source losses, per-branch losses on mixed
//! images, and the head loss on strongly augmented targets, optimized jointly
//! with Adam while an EMA teacher supplies pseudo-labels.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, LossDump, Result};
use crate::hgcn::{multi_domain_loss, HeadConfig, HeadKind};
use crate::label::LabelMap;
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::mixing::{confidence_fractions, mix_batch, MixConfig};
use crate::optim::Adam;
use crate::pseudo::{
    apply_strong_transforms, class_filter, confidence_gate, fuse_logits, remap_to_target, ClassRegistry,
    FusionMode, StrongTransform, StrongTransformConfig, DEFAULT_TAU,
};
use crate::segnet::{EmaTeacher, ModelConfig, MultiBranchModel};
use crate::synthdata::{scenario_preset, GenConfig, ScenarioData};
use crate::tensor::{read_checkpoint, write_checkpoint, Bound, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalModel {
    #[default]
    Student,
    Teacher,
}

/// Training configuration; the JSON form uses these field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Built-in scenario generated in memory when `data` is unset.
    pub scenario: Option<String>,
    /// Dataset directory written by `gen-data`.
    pub data: Option<PathBuf>,
    pub data_seed: u64,
    pub samples: GenConfig,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub class_ratio: f64,
    pub region_ratio: f64,
    pub ema_decay: f64,
    pub k_spatial: usize,
    pub k_feature: usize,
    pub expert_channels: usize,
    pub backbone_channels: usize,
    pub backbone_depth: usize,
    pub spatial_channels: usize,
    pub head_pool: usize,
    pub seed: u64,
    /// Iterations between metric rows; the final iteration always logs.
    pub eval_every: usize,
    pub eval_model: EvalModel,
    pub no_mixing: bool,
    pub no_hgcn: bool,
    pub combined_source: bool,
    pub fusion: FusionMode,
    pub strong: StrongTransformConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scenario: None,
            data: None,
            data_seed: 0,
            samples: GenConfig::default(),
            iterations: 2000,
            batch_size: 4,
            lr_backbone: 6e-5,
            lr_head: 6e-4,
            alpha: 1.0,
            beta: 1.0,
            tau: DEFAULT_TAU,
            class_ratio: 0.5,
            region_ratio: 0.4,
            ema_decay: 0.999,
            k_spatial: 64,
            k_feature: 8,
            expert_channels: 64,
            backbone_channels: 64,
            backbone_depth: 4,
            spatial_channels: 64,
            head_pool: 1,
            seed: 0,
            eval_every: 200,
            eval_model: EvalModel::Student,
            no_mixing: false,
            no_hgcn: false,
            combined_source: false,
            fusion: FusionMode::MaxConfidence,
            strong: StrongTransformConfig::default(),
        }
    }
}

/// Named switches accepted by `--ablation`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    NoMixing,
    NoHgcn,
    CombinedSource,
    BestExpert,
    Summation,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::None,
        Ablation::NoMixing,
        Ablation::NoHgcn,
        Ablation::CombinedSource,
        Ablation::BestExpert,
        Ablation::Summation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoMixing => "no_mixing",
            Ablation::NoHgcn => "no_hgcn",
            Ablation::CombinedSource => "combined_source",
            Ablation::BestExpert => "best_expert",
            Ablation::Summation => "summation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|a| a.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }

    pub fn apply(self, cfg: &mut TrainConfig) {
        match self {
            Ablation::None => {}
            Ablation::NoMixing => cfg.no_mixing = true,
            Ablation::NoHgcn => cfg.no_hgcn = true,
            Ablation::CombinedSource => cfg.combined_source = true,
            Ablation::BestExpert => cfg.fusion = FusionMode::BestExpert,
            Ablation::Summation => cfg.fusion = FusionMode::Summation,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [("lr_backbone", self.lr_backbone), ("lr_head", self.lr_head)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative".into());
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau {} outside (0, 1)", self.tau));
        }
        if !(self.class_ratio > 0.0 && self.class_ratio <= 1.0) {
            return bad(format!("class_ratio {} outside (0, 1]", self.class_ratio));
        }
        if !(self.region_ratio > 0.0 && self.region_ratio < 1.0) {
            return bad(format!("region_ratio {} outside (0, 1)", self.region_ratio));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size and eval_every must be positive".into());
        }
        if self.combined_source && self.fusion != FusionMode::MaxConfidence {
            return bad("combined_source has a single branch; fusion switches do not apply".into());
        }
        Ok(())
    }

    pub fn apply_ablation(&mut self, a: Ablation) {
        a.apply(self);
    }

    /// Loads the dataset named by `data` or generates `scenario`.
    pub fn load_data(&self) -> Result<ScenarioData> {
        match (&self.data, &self.scenario) {
            (Some(dir), _) => ScenarioData::read(dir),
            (None, Some(name)) => ScenarioData::generate(&scenario_preset(name)?, &self.samples, self.data_seed),
            (None, None) => Err(Error::Config("set either `data` or `scenario`".into())),
        }
    }

    pub fn mix(&self) -> MixConfig {
        MixConfig {
            class_ratio: self.class_ratio,
            region_ratio: self.region_ratio,
            tau: self.tau,
        }
    }

    /// Network shape for a dataset with `sources` domains.
    pub fn model_config(&self, registry: &ClassRegistry, sources: usize, height: usize, width: usize) -> ModelConfig {
        ModelConfig {
            num_sources: if self.combined_source { 1 } else { sources },
            backbone_channels: self.backbone_channels,
            backbone_depth: self.backbone_depth,
            expert_channels: self.expert_channels,
            num_union_classes: registry.num_union(),
            num_target_classes: registry.num_target(),
            height,
            width,
            ema_decay: self.ema_decay,
            head: HeadConfig {
                kind: if self.no_hgcn { HeadKind::Cnn } else { HeadKind::Hgcn },
                spatial_channels: self.spatial_channels,
                k_spatial: self.k_spatial,
                k_feature: self.k_feature,
                pool: self.head_pool,
            },
        }
    }
}

/// One iteration's inputs: a labelled batch per source and a target batch.
#[derive(Debug, Clone)]
pub struct Batches {
    pub sources: Vec<(Tensor, LabelMap)>,
    pub target: Tensor,
}

/// Loss components of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup_terms: Vec<f64>,
    pub ssl_terms: Vec<f64>,
    pub sup: f64,
    pub ssl: f64,
    pub ssl_multi: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn dump(&self) -> LossDump {
        LossDump {
            sup: self.sup,
            ssl: self.ssl,
            ssl_multi: self.ssl_multi,
            total: self.total,
        }
    }
}

/// Teacher outputs on the clean target batch.
#[derive(Debug, Clone)]
pub struct TeacherTargets {
    /// Per-branch argmax in union space, used as donor labels for mixing.
    pub donor_labels: Vec<LabelMap>,
    /// Fused, filtered and remapped labels in target space.
    pub pseudo: LabelMap,
    pub confidence: Vec<f64>,
    pub gate: Vec<f64>,
}

fn argmax_labels(logits: &Tensor) -> Result<LabelMap> {
    let s = logits.shape();
    let (_, idx) = logits.max_with_index(1)?;
    LabelMap::new(s[0], s[2], s[3], idx.into_iter().map(|i| i as u8).collect())
}

fn gather(x: &Tensor, y: Option<&LabelMap>, idx: &[usize]) -> Result<(Tensor, Option<LabelMap>)> {
    let parts = idx.iter().map(|&i| x.narrow_batch(i, 1)).collect::<Result<Vec<_>>>()?;
    let xs = Tensor::cat_batch(&parts.iter().collect::<Vec<_>>())?;
    let ys = match y {
        Some(y) => Some(LabelMap::stack(&idx.iter().map(|&i| y.sample(i)).collect::<Vec<_>>())?),
        None => None,
    };
    Ok((xs, ys))
}


/// Cross-entropy of branch `i` on source `i` with unit weights, one term per
/// source.
pub fn supervised_losses(
    g: &mut Graph,
    model: &MultiBranchModel,
    p: &Bound,
    sources: &[(Tensor, LabelMap)],
) -> Result<Vec<Var>> {
    if sources.len() != model.num_sources() {
        return Err(Error::Contract(format!(
            "{} source batches for {} branches",
            sources.len(),
            model.num_sources()
        )));
    }
    sources
        .iter()
        .enumerate()
        .map(|(i, (x, y))| {
            let xv = g.constant(x.clone());
            let logits = model.forward_branch(g, p, i, xv)?;
            g.masked_weighted_cross_entropy(logits, y, &vec![1.0; y.data().len()])
        })
        .collect()
}

/// Teacher labels for a clean target batch: per-branch argmax for mixing and
/// fused, filtered, remapped pseudo-labels with their gate for the head.
pub fn teacher_targets(
    teacher: &MultiBranchModel,
    target: &Tensor,
    registry: &ClassRegistry,
    fusion: FusionMode,
    tau: f64,
) -> Result<TeacherTargets> {
    let logits = teacher.predict_branches(target)?;
    let donor_labels = logits.iter().map(argmax_labels).collect::<Result<Vec<_>>>()?;
    let (fused, confidence) = fuse_logits(&logits, fusion)?;
    let pseudo = remap_to_target(&class_filter(&fused, registry)?, registry)?;
    let gate = confidence_gate(&confidence, tau);
    Ok(TeacherTargets {
        donor_labels,
        pseudo,
        confidence,
        gate,
    })
}

/// Head predictions on a labelled set, scored over the target classes.
/// Ground truth is given in union indices.
pub fn evaluate(
    model: &MultiBranchModel,
    images: &Tensor,
    labels: &LabelMap,
    registry: &ClassRegistry,
) -> Result<MetricsReport> {
    let n = images.shape()[0];
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < n {
        let len = EVAL_CHUNK.min(n - start);
        let logits = model.predict_head(&images.narrow_batch(start, len)?)?;
        chunks.push(argmax_labels(&logits)?);
        start += len;
    }
    if chunks.is_empty() {
        return Ok(MetricsReport::from_confusion(ConfusionMatrix::new(registry.num_target())));
    }
    let pred = LabelMap::stack(&chunks)?;
    score_predictions(labels, &pred, registry)
}

/// Scores target-index predictions against union-index ground truth.
pub fn score_predictions(labels: &LabelMap, pred: &LabelMap, registry: &ClassRegistry) -> Result<MetricsReport> {
    let truth = remap_to_target(labels, registry)?;
    let mut cm = ConfusionMatrix::new(registry.num_target());
    cm.accumulate(truth.data(), pred.data())?;
    Ok(MetricsReport::from_confusion(cm))
}

const EVAL_CHUNK: usize = 16;

/// Pixel counts per union class of every branch's argmax on `images`.
pub fn branch_histograms(model: &MultiBranchModel, images: &Tensor) -> Result<Vec<Vec<u64>>> {
    let classes = model.config().num_union_classes;
    let mut hist = vec![vec![0u64; classes]; model.num_sources()];
    let n = images.shape()[0];
    let mut start = 0;
    while start < n {
        let len = EVAL_CHUNK.min(n - start);
        let logits = model.predict_branches(&images.narrow_batch(start, len)?)?;
        for (h, l) in hist.iter_mut().zip(&logits) {
            for &c in argmax_labels(l)?.data() {
                h[c as usize] += 1;
            }
        }
        start += len;
    }
    Ok(hist)
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: usize,
    pub loss_sup: f64,
    pub loss_ssl: f64,
    pub loss_ssl_multi: f64,
    pub miou: f64,
    pub mf1: f64,
}

pub const CSV_HEADER: &str = "iter,loss_sup,loss_ssl,loss_sslM,mIoU,mF1";

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iter, self.loss_sup, self.loss_ssl, self.loss_ssl_multi, self.miou, self.mf1
        )
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.msct";
pub const CONFIG_FILE: &str = "config.json";
const TEACHER_PREFIX: &str = "teacher.";
const ITERATION_ENTRY: &str = "iteration";

/// Outcome of [`Trainer::run`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub rows: Vec<MetricsRow>,
    pub report: MetricsReport,
    pub losses: Vec<LossBreakdown>,
}

/// Student, teacher, optimizer and data for one run.
pub struct Trainer {
    config: TrainConfig,
    registry: ClassRegistry,
    original_sources: usize,
    sources: Vec<(Tensor, LabelMap)>,
    target_train: Tensor,
    target_test: (Tensor, LabelMap),
    student: MultiBranchModel,
    teacher: EmaTeacher,
    adam: Adam,
    rng: ChaCha8Rng,
    iteration: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: ScenarioData) -> Result<Self> {
        config.validate()?;
        let registry = data.scenario.registry.clone();
        let k = data.sources.len();
        if k < 2 && !config.combined_source {
            return Err(Error::Config(format!("need at least 2 sources, found {k}")));
        }
        let shape = data.target_train.shape().to_vec();
        let (h, w) = (shape[2], shape[3]);
        let sources = if config.combined_source {
            let xs: Vec<&Tensor> = data.sources.iter().map(|s| &s.0).collect();
            let ys: Vec<LabelMap> = data.sources.iter().map(|s| s.1.clone()).collect();
            vec![(Tensor::cat_batch(&xs)?, LabelMap::stack(&ys)?)]
        } else {
            data.sources
        };
        let student = MultiBranchModel::init(&config.model_config(&registry, k, h, w), config.seed)?;
        let teacher = EmaTeacher::from_student(&student);
        let adam = Adam::new(student.params(), config.lr_backbone, config.lr_head);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config,
            registry,
            original_sources: k,
            sources,
            target_train: data.target_train,
            target_test: data.target_test,
            student,
            teacher,
            adam,
            rng,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn registry(&self) -> &ClassRegistry {
        &self.registry
    }

    pub fn student(&self) -> &MultiBranchModel {
        &self.student
    }

    pub fn teacher(&self) -> &EmaTeacher {
        &self.teacher
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn target_test(&self) -> &(Tensor, LabelMap) {
        &self.target_test
    }

    pub fn target_train(&self) -> &Tensor {
        &self.target_train
    }

    fn mixing_active(&self) -> bool {
        !self.config.no_mixing && self.student.num_sources() >= 2
    }

    /// Draws a random batch from every source and from the target images.
    /// The merged pool of the combined-source baseline contributes as many
    /// samples as all original sources together.
    pub fn draw_batches(&mut self) -> Result<Batches> {
        let b = self.config.batch_size;
        let per_source = if self.config.combined_source { b * self.original_sources } else { b };
        let mut sources = Vec::with_capacity(self.sources.len());
        for (x, y) in &self.sources {
            let n = x.shape()[0];
            let idx: Vec<usize> = (0..per_source).map(|_| self.rng.random_range(0..n)).collect();
            let (xs, ys) = gather(x, Some(y), &idx)?;
            sources.push((xs, ys.expect("labels gathered")));
        }
        let n = self.target_train.shape()[0];
        let idx: Vec<usize> = (0..b).map(|_| self.rng.random_range(0..n)).collect();
        let (target, _) = gather(&self.target_train, None, &idx)?;
        Ok(Batches { sources, target })
    }

    /// Draws batches and runs one iteration.
    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let batches = self.draw_batches()?;
        self.step_on(&batches)
    }

    /// One iteration on given batches: teacher pseudo-labels, mixing,
    /// strong augmentation, the weighted objective, one Adam step on the
    /// student and one EMA step on the teacher.
    pub fn step_on(&mut self, batches: &Batches) -> Result<LossBreakdown> {
        let k = self.student.num_sources();
        if batches.sources.len() != k {
            return Err(Error::Contract(format!("{} source batches for {k} branches", batches.sources.len())));
        }
        let cfg = self.config.clone();
        let target = &batches.target;
        let (b, h, w) = (target.shape()[0], target.shape()[2], target.shape()[3]);
        let tt = teacher_targets(self.teacher.model(), target, &self.registry, cfg.fusion, cfg.tau)?;

        let mixed = if self.mixing_active() {
            let student_logits = self.student.predict_branches(target)?;
            let mut out = Vec::with_capacity(k);
            for (i, (xs, ys)) in batches.sources.iter().enumerate() {
                let w_t = confidence_fractions(&student_logits[i], cfg.tau)?;
                // donor expert drawn uniformly from the other branches
                let mut j = self.rng.random_range(0..k - 1);
                if j >= i {
                    j += 1;
                }
                out.push(mix_batch(xs, ys, target, &tt.donor_labels[j], &w_t, &cfg.mix(), &mut self.rng)?);
            }
            out
        } else {
            Vec::new()
        };

        let transforms: Vec<StrongTransform> = (0..b)
            .map(|_| StrongTransform::sample(&cfg.strong, h, w, &mut self.rng))
            .collect();
        let strong = apply_strong_transforms(&transforms, target)?;

        let mut g = Graph::new();
        let p = self.student.bind(&mut g, true);
        let mut parts: Vec<&Tensor> = Vec::with_capacity(2 * k + 1);
        for (i, (xs, _)) in batches.sources.iter().enumerate() {
            parts.push(xs);
            if let Some(m) = mixed.get(i) {
                parts.push(&m.image);
            }
        }
        parts.push(&strong);
        let input = g.constant(Tensor::cat_batch(&parts)?);
        let features = self.student.backbone(&mut g, &p, input)?;

        let mut offset = 0;
        let mut sup_vars = Vec::with_capacity(k);
        let mut ssl_vars = Vec::with_capacity(k);
        for (i, (xs, ys)) in batches.sources.iter().enumerate() {
            let n = xs.shape()[0];
            let f = g.slice(features, 0, offset, n)?;
            offset += n;
            let logits = self.student.branch_from_features(&mut g, &p, i, f)?;
            sup_vars.push(g.masked_weighted_cross_entropy(logits, ys, &vec![1.0; ys.data().len()])?);
            if let Some(m) = mixed.get(i) {
                let f = g.slice(features, 0, offset, b)?;
                offset += b;
                let logits = self.student.branch_from_features(&mut g, &p, i, f)?;
                ssl_vars.push(g.masked_weighted_cross_entropy(logits, &m.labels, &m.weights)?);
            }
        }
        let f = g.slice(features, 0, offset, b)?;
        let (mut maps, compressed) = self.student.features_from_backbone(&mut g, &p, f)?;
        maps.push(compressed);
        let head = self.student.head().integrate(&mut g, &p, &maps)?;
        let ssl_multi = multi_domain_loss(&mut g, head, &tt.pseudo, &tt.gate, &transforms)?;

        let sup = sum_vars(&mut g, &sup_vars)?;
        let mut total = sup;
        let ssl = if ssl_vars.is_empty() {
            None
        } else {
            let s = sum_vars(&mut g, &ssl_vars)?;
            let a = g.scale(s, cfg.alpha);
            total = g.add(total, a)?;
            Some(s)
        };
        let bm = g.scale(ssl_multi, cfg.beta);
        total = g.add(total, bm)?;

        let value = |v: Var| g.value(v).item();
        let breakdown = LossBreakdown {
            sup_terms: sup_vars.iter().map(|&v| value(v)).collect(),
            ssl_terms: ssl_vars.iter().map(|&v| value(v)).collect(),
            sup: value(sup),
            ssl: ssl.map_or(0.0, value),
            ssl_multi: value(ssl_multi),
            total: value(total),
        };
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite {
                iteration: self.iteration,
                breakdown: breakdown.dump(),
            });
        }

        let mut grads = g.backward(total)?;
        let grads: Vec<Option<Vec<f64>>> = p.vars().iter().map(|&v| grads.take(v)).collect();
        self.adam.step(self.student.params_mut(), &grads)?;
        self.teacher.update(&self.student, cfg.ema_decay)?;
        self.iteration += 1;
        Ok(breakdown)
    }

    pub fn eval_model(&self) -> &MultiBranchModel {
        match self.config.eval_model {
            EvalModel::Student => &self.student,
            EvalModel::Teacher => self.teacher.model(),
        }
    }

    /// Metrics of the configured evaluation model on the target test set.
    pub fn evaluate(&self) -> Result<MetricsReport> {
        let (x, y) = &self.target_test;
        let mut r = evaluate(self.eval_model(), x, y, &self.registry)?;
        r.iteration = self.iteration;
        Ok(r)
    }

    /// Student and teacher parameters; teacher names carry a `teacher.` prefix.
    pub fn checkpoint_entries(&self) -> Vec<(String, Tensor)> {
        let mut e = self.student.params().to_entries("");
        e.extend(self.teacher.model().params().to_entries(TEACHER_PREFIX));
        e.push((ITERATION_ENTRY.to_string(), Tensor::scalar(self.iteration as f64)));
        e
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(path, &self.checkpoint_entries())
    }

    /// Restores student and teacher weights and the iteration count.
    /// Optimizer moments start fresh.
    pub fn load_checkpoint(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let mut entries = read_checkpoint(path)?;
        if let Some(i) = entries.iter().position(|(n, _)| n == ITERATION_ENTRY) {
            self.iteration = entries.remove(i).1.data()[0] as usize;
        }
        let (teacher, student): (Vec<_>, Vec<_>) = entries.into_iter().partition(|(n, _)| n.starts_with(TEACHER_PREFIX));
        self.student.params_mut().load_entries(&student, "")?;
        if teacher.is_empty() {
            self.teacher = EmaTeacher::from_student(&self.student);
        } else {
            self.teacher.params_mut().load_entries(&teacher, TEACHER_PREFIX)?;
        }
        Ok(())
    }

    /// Runs the remaining iterations, logging a metrics row every
    /// `eval_every` iterations and at the end. With `out` set, writes
    /// `config.json`, `metrics.csv` and a checkpoint refreshed at every row.
    pub fn run(&mut self, out: Option<&Path>, mut on_row: impl FnMut(&MetricsRow)) -> Result<RunSummary> {
        let mut csv = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&self.config)?)?;
                let mut f = fs::File::create(dir.join(METRICS_FILE))?;
                writeln!(f, "{CSV_HEADER}")?;
                Some(f)
            }
            None => None,
        };
        let started = Instant::now();
        let mut rows = Vec::new();
        let mut losses = Vec::with_capacity(self.config.iterations);
        let mut report = None;
        while self.iteration < self.config.iterations {
            let l = self.train_step()?;
            let it = self.iteration;
            if it % self.config.eval_every == 0 || it == self.config.iterations {
                let mut r = self.evaluate()?;
                r.wall_clock_secs = started.elapsed().as_secs_f64();
                let row = MetricsRow {
                    iter: it,
                    loss_sup: l.sup,
                    loss_ssl: l.ssl,
                    loss_ssl_multi: l.ssl_multi,
                    miou: r.miou,
                    mf1: r.mf1,
                };
                if let (Some(f), Some(dir)) = (csv.as_mut(), out) {
                    writeln!(f, "{}", row.csv())?;
                    f.flush()?;
                    self.save_checkpoint(dir.join(CHECKPOINT_FILE))?;
                }
                on_row(&row);
                rows.push(row);
                report = Some(r);
            }
            losses.push(l);
        }
        let report = match report {
            Some(r) => r,
            None => self.evaluate()?,
        };
        Ok(RunSummary { rows, report, losses })
    }
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

/// Which grid `sweep` walks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepGrid {
    /// Class-mask ratio × region-mask ratio.
    Mix,
    /// α × β.
    Loss,
}

impl SweepGrid {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mix" => Ok(SweepGrid::Mix),
            "loss" => Ok(SweepGrid::Loss),
            _ => Err(Error::Config(format!("unknown grid `{s}` (expected mix or loss)"))),
        }
    }

    pub fn header(self) -> &'static str {
        match self {
            SweepGrid::Mix => "class_ratio,region_ratio,mIoU,mF1",
            SweepGrid::Loss => "alpha,beta,mIoU,mF1",
        }
    }

    pub fn points(self) -> Vec<(f64, f64)> {
        let (xs, ys): (&[f64], &[f64]) = match self {
            SweepGrid::Mix => (&[0.25, 0.5, 0.75, 1.0], &[0.2, 0.4, 0.6]),
            SweepGrid::Loss => (&[0.0, 0.5, 1.0], &[0.0, 0.5, 1.0]),
        };
        xs.iter().flat_map(|&x| ys.iter().map(move |&y| (x, y))).collect()
    }

    pub fn configure(self, base: &TrainConfig, (x, y): (f64, f64)) -> TrainConfig {
        let mut c = base.clone();
        match self {
            SweepGrid::Mix => {
                c.class_ratio = x;
                c.region_ratio = y;
            }
            SweepGrid::Loss => {
                c.alpha = x;
                c.beta = y;
            }
        }
        c
    }
}

/// One full training run per grid point; yields `(x, y, report)` rows.
pub fn sweep(
    grid: SweepGrid,
    base: &TrainConfig,
    data: &ScenarioData,
    mut on_point: impl FnMut((f64, f64), &MetricsReport),
) -> Result<Vec<((f64, f64), MetricsReport)>> {
    let mut out = Vec::new();
    for pt in grid.points() {
        let mut t = Trainer::new(grid.configure(base, pt), data.clone())?;
        let r = t.run(None, |_| {})?.report;
        on_point(pt, &r);
        out.push((pt, r));
    }
    Ok(out)
}

/// Builds a model for `config` and `data` and loads a checkpoint into it.
pub fn load_trained(config: &TrainConfig, data: ScenarioData, checkpoint: impl AsRef<Path>) -> Result<Trainer> {
    let mut t = Trainer::new(config.clone(), data)?;
    t.load_checkpoint(checkpoint)?;
    Ok(t)
}

#[cfg(test)]
mod tests;
