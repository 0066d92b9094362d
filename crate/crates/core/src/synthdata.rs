//! Procedural multi-domain segmentation scenes and their on-disk layout.
//!
//! Geometry and appearance draw from separate per-sample ChaCha streams, so
//! two domains that share a geometry seed and class set rasterize identical
//! labels while their images differ.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::pseudo::ClassRegistry;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    /// Full-length axis-aligned band.
    Stripe,
    Rectangle,
    Disc,
    /// A few overlapping discs.
    Blob,
    /// Small elongated rectangle.
    Bar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainRole {
    /// 0-based source index.
    Source(usize),
    Target,
}

/// Global colour transform applied after rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub gain: [f64; 3],
    pub bias: [f64; 3],
    /// Amplitude of uniform per-pixel sensor noise.
    pub noise: f64,
}

impl DomainShift {
    pub fn none() -> Self {
        Self {
            gain: [1.0; 3],
            bias: [0.0; 3],
            noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub role: DomainRole,
    /// Union indices drawn in this domain, sorted.
    pub classes: Vec<u8>,
    /// Base colour per union class.
    pub palette: Vec<[f64; 3]>,
    /// Per-instance colour jitter amplitude.
    pub jitter: f64,
    /// Per-pixel texture amplitude per union class.
    pub texture: Vec<f64>,
    pub shapes: Vec<ShapeKind>,
    pub shift: DomainShift,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.palette.len();
        if self.texture.len() != n || self.shapes.len() != n {
            return Err(Error::Config(format!(
                "domain {}: palette, texture and shapes must all cover {n} classes",
                self.name
            )));
        }
        if self.classes.len() < 2 {
            return Err(Error::Config(format!(
                "domain {} needs at least 2 classes, has {}",
                self.name,
                self.classes.len()
            )));
        }
        if let Some(&c) = self.classes.iter().find(|&&c| c as usize >= n) {
            return Err(Error::InvalidLabel {
                label: c,
                index: 0,
                classes: n,
            });
        }
        Ok(())
    }

    fn background(&self) -> u8 {
        if self.classes.contains(&LOW_VEGETATION) {
            LOW_VEGETATION
        } else {
            self.classes[0]
        }
    }
}

/// One rendered tile: a `3×H×W` image in `[0, 1]` and its union-space labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image: Tensor,
    pub label: LabelMap,
}

pub const UNION_CLASSES: [&str; 6] = ["impervious", "building", "low_vegetation", "tree", "car", "clutter"];
const LOW_VEGETATION: u8 = 2;

fn union_names() -> Vec<String> {
    UNION_CLASSES.iter().map(|s| s.to_string()).collect()
}

/// A named set of source domains plus the target domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub registry: ClassRegistry,
    pub sources: Vec<DomainSpec>,
    pub target: DomainSpec,
}

impl Scenario {
    pub fn domains(&self) -> Vec<&DomainSpec> {
        self.sources.iter().chain(std::iter::once(&self.target)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut union = vec![false; self.registry.num_union()];
        for d in self.domains() {
            d.validate()?;
            if d.palette.len() != self.registry.num_union() {
                return Err(Error::Config(format!("domain {} palette size", d.name)));
            }
        }
        for s in &self.sources {
            s.classes.iter().for_each(|&c| union[c as usize] = true);
            if !s.classes.iter().any(|&c| self.registry.is_target(c)) {
                return Err(Error::Config(format!("source {} shares no class with the target", s.name)));
            }
        }
        if let Some(c) = union.iter().position(|u| !u) {
            return Err(Error::Config(format!("union class {c} is drawn by no source")));
        }
        if self.target.classes != self.registry.target_classes() {
            return Err(Error::Config("target domain classes differ from the registry".into()));
        }
        Ok(())
    }
}

// Colours and textures for the six union classes.
const BASE_PALETTE: [[f64; 3]; 6] = [
    [0.62, 0.62, 0.60],
    [0.66, 0.50, 0.44],
    [0.50, 0.64, 0.36],
    [0.26, 0.46, 0.26],
    [0.82, 0.78, 0.30],
    [0.58, 0.38, 0.56],
];
const BASE_TEXTURE: [f64; 6] = [0.03, 0.05, 0.06, 0.12, 0.03, 0.10];
const BASE_SHAPES: [ShapeKind; 6] = [
    ShapeKind::Stripe,
    ShapeKind::Rectangle,
    ShapeKind::Blob,
    ShapeKind::Disc,
    ShapeKind::Bar,
    ShapeKind::Blob,
];

fn domain(name: &str, role: DomainRole, classes: &[u8], tint: [f64; 3], shift: DomainShift) -> DomainSpec {
    let palette = BASE_PALETTE
        .iter()
        .map(|c| [c[0] + tint[0], c[1] + tint[1], c[2] + tint[2]])
        .collect();
    DomainSpec {
        name: name.into(),
        role,
        classes: classes.to_vec(),
        palette,
        jitter: 0.04,
        texture: BASE_TEXTURE.to_vec(),
        shapes: BASE_SHAPES.to_vec(),
        shift,
    }
}

fn shift(gain: [f64; 3], bias: [f64; 3], noise: f64) -> DomainShift {
    DomainShift { gain, bias, noise }
}

pub const SCENARIOS: [&str; 3] = ["equality2", "equality3", "inclusion2"];

/// Built-in class-asymmetric scenarios over the six union classes.
pub fn scenario_preset(name: &str) -> Result<Scenario> {
    let s1_shift = shift([1.0, 1.0, 1.0], [0.0, 0.0, 0.0], 0.02);
    let s2_shift = shift([0.85, 0.95, 1.15], [0.06, 0.02, -0.04], 0.03);
    let s3_shift = shift([1.1, 0.9, 0.9], [-0.03, 0.05, 0.05], 0.03);
    let t_shift = shift([0.6, 0.7, 0.55], [0.25, 0.2, 0.3], 0.06);
    let s1_tint = [0.0, 0.0, 0.0];
    let s2_tint = [0.02, -0.02, 0.03];
    let s3_tint = [-0.03, 0.02, 0.0];
    let t_tint = [0.03, 0.03, -0.03];
    let all: Vec<u8> = (0..6).collect();
    let without = |c: u8| -> Vec<u8> { all.iter().copied().filter(|&x| x != c).collect() };
    let scenario = match name {
        "equality2" => Scenario {
            name: name.into(),
            registry: ClassRegistry::equality(union_names())?,
            sources: vec![
                domain("source1", DomainRole::Source(0), &without(1), s1_tint, s1_shift),
                domain("source2", DomainRole::Source(1), &without(0), s2_tint, s2_shift),
            ],
            target: domain("target", DomainRole::Target, &all, t_tint, t_shift),
        },
        "equality3" => Scenario {
            name: name.into(),
            registry: ClassRegistry::equality(union_names())?,
            sources: vec![
                domain("source1", DomainRole::Source(0), &without(3), s1_tint, s1_shift),
                domain("source2", DomainRole::Source(1), &without(4), s2_tint, s2_shift),
                domain("source3", DomainRole::Source(2), &without(5), s3_tint, s3_shift),
            ],
            target: domain("target", DomainRole::Target, &all, t_tint, t_shift),
        },
        "inclusion2" => {
            let target = without(5);
            Scenario {
                name: name.into(),
                registry: ClassRegistry::new(union_names(), target.clone())?,
                sources: vec![
                    domain("source1", DomainRole::Source(0), &without(1), s1_tint, s1_shift),
                    domain("source2", DomainRole::Source(1), &without(0), s2_tint, s2_shift),
                ],
                target: domain("target", DomainRole::Target, &target, t_tint, t_shift),
            }
        }
        other => return Err(Error::UnknownScenario(other.into())),
    };
    scenario.validate()?;
    Ok(scenario)
}

fn stream(seed: u64, salt: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index as u64);
    rng
}

fn name_salt(name: &str) -> u64 {
    // FNV-1a
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

const GEOMETRY_SALT: u64 = 0x6765_6f6d;

fn rasterize(spec: &DomainSpec, h: usize, w: usize, rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<u32>) {
    let background = spec.background();
    let mut label = vec![background; h * w];
    let mut instance = vec![0u32; h * w];
    let fg: Vec<u8> = spec.classes.iter().copied().filter(|&c| c != background).collect();
    let count = rng.random_range(8..=14);
    let dim = h.min(w) as f64;
    for k in 1..=count {
        let class = fg[rng.random_range(0..fg.len())];
        let mut paint = |r: i64, c: i64| {
            if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
                label[r as usize * w + c as usize] = class;
                instance[r as usize * w + c as usize] = k;
            }
        };
        let scale = |f: f64| ((f * dim).round() as i64).max(1);
        match spec.shapes[class as usize] {
            ShapeKind::Stripe => {
                let width = rng.random_range(scale(0.07)..=scale(0.14));
                if rng.random_bool(0.5) {
                    let top = rng.random_range(0..h as i64);
                    for r in top..top + width {
                        (0..w as i64).for_each(|c| paint(r, c));
                    }
                } else {
                    let left = rng.random_range(0..w as i64);
                    for c in left..left + width {
                        (0..h as i64).for_each(|r| paint(r, c));
                    }
                }
            }
            ShapeKind::Rectangle | ShapeKind::Bar => {
                let (rh, rw) = if spec.shapes[class as usize] == ShapeKind::Bar {
                    let long = rng.random_range(scale(0.22)..=scale(0.34));
                    let short = rng.random_range(scale(0.09)..=scale(0.13));
                    if rng.random_bool(0.5) { (long, short) } else { (short, long) }
                } else {
                    (
                        rng.random_range(scale(0.16)..=scale(0.38)),
                        rng.random_range(scale(0.16)..=scale(0.38)),
                    )
                };
                let top = rng.random_range(-rh / 2..h as i64 - rh / 2);
                let left = rng.random_range(-rw / 2..w as i64 - rw / 2);
                for r in top..top + rh {
                    (left..left + rw).for_each(|c| paint(r, c));
                }
            }
            ShapeKind::Disc | ShapeKind::Blob => {
                let parts = if spec.shapes[class as usize] == ShapeKind::Blob {
                    rng.random_range(2..=4)
                } else {
                    1
                };
                let cy = rng.random_range(0..h) as f64;
                let cx = rng.random_range(0..w) as f64;
                for _ in 0..parts {
                    let rad = rng.random_range(0.06 * dim..=0.16 * dim);
                    let (oy, ox) = if parts > 1 {
                        (rng.random_range(-rad..=rad), rng.random_range(-rad..=rad))
                    } else {
                        (0.0, 0.0)
                    };
                    let (py, px) = (cy + oy, cx + ox);
                    let r0 = (py - rad).floor() as i64;
                    let c0 = (px - rad).floor() as i64;
                    for r in r0..=(py + rad).ceil() as i64 {
                        for c in c0..=(px + rad).ceil() as i64 {
                            let (dy, dx) = (r as f64 - py, c as f64 - px);
                            if dy * dy + dx * dx <= rad * rad {
                                paint(r, c);
                            }
                        }
                    }
                }
            }
        }
    }
    (label, instance)
}

fn render(spec: &DomainSpec, label: &[u8], instance: &[u32], h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let plane = h * w;
    let max_instance = instance.iter().copied().max().unwrap_or(0) as usize;
    // instance 0 is the background; each instance gets its own colour jitter
    let jitter: Vec<[f64; 3]> = (0..=max_instance)
        .map(|_| std::array::from_fn(|_| rng.random_range(-spec.jitter..=spec.jitter)))
        .collect();
    let mut image = vec![0.0; 3 * plane];
    for p in 0..plane {
        let class = label[p] as usize;
        let amp = spec.texture[class];
        let grain = if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 };
        for ch in 0..3 {
            let mut v = spec.palette[class][ch] + jitter[instance[p] as usize][ch] + grain;
            v = v * spec.shift.gain[ch] + spec.shift.bias[ch];
            if spec.shift.noise > 0.0 {
                v += rng.random_range(-spec.shift.noise..=spec.shift.noise);
            }
            image[ch * plane + p] = v.clamp(0.0, 1.0);
        }
    }
    image
}

/// Renders one sample from explicit geometry and appearance streams.
pub fn generate_sample(
    spec: &DomainSpec,
    height: usize,
    width: usize,
    geometry: &mut ChaCha8Rng,
    appearance: &mut ChaCha8Rng,
) -> Result<SceneSample> {
    spec.validate()?;
    let (label, instance) = rasterize(spec, height, width, geometry);
    let image = render(spec, &label, &instance, height, width, appearance);
    Ok(SceneSample {
        image: Tensor::new(&[3, height, width], image)?,
        label: LabelMap::new(1, height, width, label)?,
    })
}

/// `n` samples of a domain. Sample `i` uses geometry stream `i` of `seed` and
/// an appearance stream additionally keyed by the domain name.
pub fn generate_domain(spec: &DomainSpec, n: usize, height: usize, width: usize, seed: u64) -> Result<Vec<SceneSample>> {
    if n == 0 {
        return Err(Error::Contract("sample count must be at least 1".into()));
    }
    spec.validate()?;
    let salt = name_salt(&spec.name);
    with_workers(|| {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut geometry = stream(seed, GEOMETRY_SALT, i);
                let mut appearance = stream(seed, salt, i);
                generate_sample(spec, height, width, &mut geometry, &mut appearance)
            })
            .collect()
    })
}

/// Runs `f` on a rayon pool sized by `MSCADA_THREADS` (default: all cores).
pub fn with_workers<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    let threads = std::env::var("MSCADA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Sample counts and size for a generated scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub source_samples: usize,
    pub target_train_samples: usize,
    pub target_test_samples: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            source_samples: 200,
            target_train_samples: 100,
            target_test_samples: 100,
        }
    }
}

pub const TARGET_TRAIN: &str = "target_train";
pub const TARGET_TEST: &str = "target_test";

/// In-memory scenario data. Target training images carry no labels.
#[derive(Debug, Clone)]
pub struct ScenarioData {
    pub scenario: Scenario,
    /// Per source: `N×3×H×W` images and labels.
    pub sources: Vec<(Tensor, LabelMap)>,
    pub target_train: Tensor,
    pub target_test: (Tensor, LabelMap),
}

fn stack(samples: &[SceneSample]) -> Result<(Tensor, LabelMap)> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let (c, h, w) = (3, samples[0].label.height(), samples[0].label.width());
    let x = Tensor::cat_batch(
        &images
            .iter()
            .map(|t| (*t).clone().reshape(&[1, c, h, w]))
            .collect::<Result<Vec<_>>>()?
            .iter()
            .collect::<Vec<_>>(),
    )?;
    let labels: Vec<LabelMap> = samples.iter().map(|s| s.label.clone()).collect();
    Ok((x, LabelMap::stack(&labels)?))
}

fn domain_seed(seed: u64, slot: u64) -> u64 {
    seed.wrapping_mul(1000).wrapping_add(slot)
}

/// Generates every domain of a scenario. Target train and test share the
/// target spec but use different seeds.
pub fn generate_scenario(scenario: &Scenario, cfg: &GenConfig, seed: u64) -> Result<(Vec<Vec<SceneSample>>, Vec<SceneSample>, Vec<SceneSample>)> {
    scenario.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let sources = scenario
        .sources
        .iter()
        .enumerate()
        .map(|(i, s)| generate_domain(s, cfg.source_samples, h, w, domain_seed(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let train = generate_domain(&scenario.target, cfg.target_train_samples, h, w, domain_seed(seed, 100))?;
    let test = generate_domain(&scenario.target, cfg.target_test_samples, h, w, domain_seed(seed, 101))?;
    Ok((sources, train, test))
}

impl ScenarioData {
    pub fn generate(scenario: &Scenario, cfg: &GenConfig, seed: u64) -> Result<Self> {
        let (sources, train, test) = generate_scenario(scenario, cfg, seed)?;
        Ok(Self {
            scenario: scenario.clone(),
            sources: sources.iter().map(|s| stack(s)).collect::<Result<_>>()?,
            target_train: stack(&train)?.0,
            target_test: stack(&test)?,
        })
    }

    /// Loads a dataset written by [`write_scenario`]. Target training labels
    /// are never opened.
    pub fn read(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let scenario: Scenario = serde_json::from_str(&fs::read_to_string(root.join("scenario.json"))?)?;
        let sources = scenario
            .sources
            .iter()
            .map(|s| read_labeled(root, &s.name).and_then(|v| stack(&v)))
            .collect::<Result<_>>()?;
        let train = read_images(root, TARGET_TRAIN)?;
        let target_train = Tensor::cat_batch(&train.iter().collect::<Vec<_>>())?;
        let target_test = stack(&read_labeled(root, TARGET_TEST)?)?;
        Ok(Self {
            scenario,
            sources,
            target_train,
            target_test,
        })
    }
}

/// Per-domain manifest stored next to the images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub domain: String,
    pub role: DomainRole,
    pub classes: Vec<u8>,
    pub count: usize,
    pub height: usize,
    pub width: usize,
}

/// Writes every domain plus `scenario.json` under `root`.
pub fn write_scenario(root: impl AsRef<Path>, scenario: &Scenario, cfg: &GenConfig, seed: u64) -> Result<()> {
    let root = root.as_ref();
    let (sources, train, test) = generate_scenario(scenario, cfg, seed)?;
    fs::create_dir_all(root)?;
    fs::write(root.join("scenario.json"), serde_json::to_string_pretty(scenario)?)?;
    for (spec, samples) in scenario.sources.iter().zip(&sources) {
        write_dataset(root, &spec.name, spec, samples)?;
    }
    write_dataset(root, TARGET_TRAIN, &scenario.target, &train)?;
    write_dataset(root, TARGET_TEST, &scenario.target, &test)?;
    Ok(())
}

fn domain_dirs(root: &Path, domain: &str) -> (PathBuf, PathBuf) {
    (root.join(domain).join("images"), root.join(domain).join("labels"))
}

/// `<root>/<domain>/{images,labels}/<idx>.ppm|.pgm` plus `manifest.json`.
pub fn write_dataset(root: impl AsRef<Path>, domain: &str, spec: &DomainSpec, samples: &[SceneSample]) -> Result<()> {
    let root = root.as_ref();
    let (images, labels) = domain_dirs(root, domain);
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&labels)?;
    let first = samples
        .first()
        .ok_or_else(|| Error::Contract("no samples to write".into()))?;
    for (i, s) in samples.iter().enumerate() {
        fs::write(images.join(format!("{i}.ppm")), encode_ppm(&s.image)?)?;
        fs::write(labels.join(format!("{i}.pgm")), encode_pgm(&s.label)?)?;
    }
    let manifest = Manifest {
        domain: domain.into(),
        role: spec.role,
        classes: spec.classes.clone(),
        count: samples.len(),
        height: first.label.height(),
        width: first.label.width(),
    };
    let mut f = fs::File::create(root.join(domain).join("manifest.json"))?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(())
}

pub fn read_manifest(root: impl AsRef<Path>, domain: &str) -> Result<Manifest> {
    let text = fs::read_to_string(root.as_ref().join(domain).join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

/// Images only, each `1×3×H×W`.
pub fn read_images(root: impl AsRef<Path>, domain: &str) -> Result<Vec<Tensor>> {
    let root = root.as_ref();
    let m = read_manifest(root, domain)?;
    let (images, _) = domain_dirs(root, domain);
    (0..m.count)
        .map(|i| decode_ppm(&fs::read(images.join(format!("{i}.ppm")))?)?.reshape(&[1, 3, m.height, m.width]))
        .collect()
}

/// Images with their labels.
pub fn read_labeled(root: impl AsRef<Path>, domain: &str) -> Result<Vec<SceneSample>> {
    let root = root.as_ref();
    let m = read_manifest(root, domain)?;
    let (images, labels) = domain_dirs(root, domain);
    (0..m.count)
        .map(|i| {
            Ok(SceneSample {
                image: decode_ppm(&fs::read(images.join(format!("{i}.ppm")))?)?,
                label: decode_pgm(&fs::read(labels.join(format!("{i}.pgm")))?)?,
            })
        })
        .collect()
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (P6, maxval 255) from a `3×H×W` image in `[0, 1]`.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return crate::error::shape_err("encode_ppm", s, &[3]);
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..plane {
        for ch in 0..3 {
            out.push(quantize(image.data()[ch * plane + p]));
        }
    }
    Ok(out)
}

/// Binary PGM (P5, maxval 255) holding class indices.
pub fn encode_pgm(label: &LabelMap) -> Result<Vec<u8>> {
    if label.batch() != 1 {
        return crate::error::shape_err("encode_pgm", &[label.batch()], &[1]);
    }
    let mut out = format!("P5\n{} {}\n255\n", label.width(), label.height()).into_bytes();
    out.extend_from_slice(label.data());
    Ok(out)
}

struct Header {
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    let err = |offset: usize, msg: &str| Error::Parse {
        offset,
        msg: msg.into(),
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(err(0, &format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments before each field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(err(pos, &format!("expected header field {i}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(start, "header number out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(err(pos, "expected whitespace after max value"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(err(pos - 1, &format!("max value {maxval} is not 255")));
    }
    if width == 0 || height == 0 {
        return Err(err(pos - 1, "zero image extent"));
    }
    Ok(Header {
        width,
        height,
        data_offset: pos,
    })
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes, b"P6")?;
    let plane = h.width * h.height;
    let body = &bytes[h.data_offset..];
    if body.len() < 3 * plane {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!("pixel data truncated: need {} bytes", 3 * plane),
        });
    }
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        for ch in 0..3 {
            data[ch * plane + p] = body[3 * p + ch] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h.height, h.width], data)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let h = parse_header(bytes, b"P5")?;
    let plane = h.width * h.height;
    let body = &bytes[h.data_offset..];
    if body.len() < plane {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!("pixel data truncated: need {plane} bytes"),
        });
    }
    LabelMap::new(1, h.height, h.width, body[..plane].to_vec())
}
