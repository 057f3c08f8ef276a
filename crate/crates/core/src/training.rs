//! Synthetic corpora, dataset splits, training examples for the two
//! referring tasks and the maximum-likelihood training loop with a task
//! curriculum.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    encode_image, generate_scene, Annotation, PatchGrid, SceneSpec, SyntheticDomain, VisionParams,
    ATTRIBUTE_NAMES,
};
use crate::model::{lookup_grid, meanpool_embedding, OliveModel};
use crate::numerics::Var;
use crate::object_encoder::ObjectMask;
use crate::params::{ParamGrads, ParamStore, Session};
use crate::prompt::{normalize, PromptLayout, BOS, CAPTION, CAPTION_RAG, CLASSIFY, CLASSIFY_RAG, EOS};
use crate::retrieval::RetrievalIndex;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Captioning,
}

/// Prompting variant a model is trained or evaluated with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Retrieval vote only.
    R,
    /// Generation from the object alone.
    G,
    /// Generation with retrieved examples in context.
    RG,
}

impl Task {
    pub fn template(self, variant: Variant) -> Result<&'static str> {
        match (self, variant) {
            (Task::Classification, Variant::G) => Ok(CLASSIFY),
            (Task::Classification, Variant::RG) => Ok(CLASSIFY_RAG),
            (Task::Captioning, Variant::G) => Ok(CAPTION),
            (Task::Captioning, Variant::RG) => Ok(CAPTION_RAG),
            (_, Variant::R) => Err(Error::Usage("the retrieval variant has no prompt".into())),
        }
    }
}

// ---------------------------------------------------------------------------
// Corpus

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    /// Number of default class names to use when `labels` is empty.
    pub classes: usize,
    pub labels: Vec<String>,
    pub objects_per_class: usize,
    pub n: usize,
    pub dim: usize,
    pub noise_sigma: f32,
    /// Offset scale of colour attributes; 0 disables them.
    pub attribute_scale: f32,
    pub pos_std: f64,
    pub max_region: Option<usize>,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            classes: 10,
            labels: Vec::new(),
            objects_per_class: 60,
            n: 8,
            dim: 64,
            noise_sigma: 0.05,
            attribute_scale: 0.5,
            pos_std: 0.02,
            max_region: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub domain: SyntheticDomain,
    pub features: BTreeMap<String, PatchGrid>,
    pub annotations: Vec<Annotation>,
}

/// One single-object scene per annotation; classes cycle so every class
/// gets exactly `objects_per_class` objects.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    let mut domain = if spec.labels.is_empty() {
        SyntheticDomain::with_default_labels(spec.classes, spec.dim, spec.seed)?
    } else {
        SyntheticDomain::new(spec.labels.clone(), spec.dim, spec.seed)
    };
    let classes = domain.labels.len();
    if spec.attribute_scale > 0.0 {
        domain = domain.with_attributes(ATTRIBUTE_NAMES, spec.attribute_scale, spec.seed);
    }
    let vision = VisionParams::identity(spec.n, spec.dim, spec.pos_std, spec.seed ^ 0x5EED);
    let total = classes * spec.objects_per_class;
    let mut features = BTreeMap::new();
    let mut annotations = Vec::with_capacity(total);
    for i in 0..total {
        let image_id = format!("img{i:05}");
        let scene_spec = SceneSpec {
            n: spec.n,
            num_objects: 1,
            classes: vec![i % classes],
            noise_sigma: spec.noise_sigma,
            max_region: spec.max_region,
        };
        let seed = spec.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let (scene, ann) = generate_scene(&domain, &scene_spec, seed, &image_id)?;
        features.insert(image_id.clone(), encode_image(&scene.as_image(), &vision, &image_id)?);
        annotations.extend(ann);
    }
    Ok(Corpus {
        domain,
        features,
        annotations,
    })
}

// ---------------------------------------------------------------------------
// Labels and splits

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    classes: Vec<String>,
    unseen: BTreeSet<String>,
}

impl LabelSet {
    pub fn new(classes: Vec<String>, unseen: &[String]) -> Result<Self> {
        let unique: BTreeSet<&String> = classes.iter().collect();
        if classes.is_empty() || unique.len() != classes.len() {
            return Err(Error::Config("class names must be non-empty and unique".into()));
        }
        if let Some(u) = unseen.iter().find(|u| !unique.contains(u)) {
            return Err(Error::Config(format!("unseen class {u} is not in the label set")));
        }
        Ok(LabelSet {
            classes,
            unseen: unseen.iter().cloned().collect(),
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn unseen(&self) -> &BTreeSet<String> {
        &self.unseen
    }

    pub fn seen(&self) -> Vec<String> {
        self.classes.iter().filter(|c| !self.unseen.contains(*c)).cloned().collect()
    }

    pub fn is_seen(&self, label: &str) -> bool {
        self.classes.iter().any(|c| c == label) && !self.unseen.contains(label)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub retrieval_per_class: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    /// Seen classes only.
    pub train: Vec<Annotation>,
    /// Seen classes only.
    pub val: Vec<Annotation>,
    pub test: Vec<Annotation>,
    pub retrieval: Vec<Annotation>,
}

/// Splits annotations by image. Retrieval images are drawn in shuffled
/// order while they fit the per-class quota, which must be met exactly
/// for every class. The remaining images are divided into val, test and
/// train; unseen-class objects are dropped from train and val.
pub fn build_datasets(annotations: &[Annotation], labels: &LabelSet, spec: &SplitSpec, seed: u64) -> Result<Splits> {
    if !(0.0..1.0).contains(&(spec.val_fraction + spec.test_fraction)) || spec.val_fraction < 0.0 || spec.test_fraction < 0.0
    {
        return Err(Error::Config("val and test fractions must be non-negative and sum below 1".into()));
    }
    let mut by_image: BTreeMap<&str, Vec<&Annotation>> = BTreeMap::new();
    for a in annotations {
        if !labels.classes.contains(&a.label) {
            return Err(Error::Config(format!("label {} is not in the label set", a.label)));
        }
        by_image.entry(a.image_id.as_str()).or_default().push(a);
    }
    let mut images: Vec<&str> = by_image.keys().copied().collect();
    images.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut filled: BTreeMap<&str, usize> = labels.classes.iter().map(|c| (c.as_str(), 0)).collect();
    let mut rest = Vec::new();
    let mut splits = Splits::default();
    for img in images {
        let objs = &by_image[img];
        let mut need: BTreeMap<&str, usize> = BTreeMap::new();
        for a in objs {
            *need.entry(a.label.as_str()).or_default() += 1;
        }
        let fits = need.iter().all(|(c, n)| filled[c] + n <= spec.retrieval_per_class);
        if fits && spec.retrieval_per_class > 0 {
            for (c, n) in need {
                *filled.get_mut(c).expect("known class") += n;
            }
            splits.retrieval.extend(objs.iter().map(|a| (*a).clone()));
        } else {
            rest.push(img);
        }
    }
    if let Some((c, n)) = filled.iter().find(|(_, &n)| n < spec.retrieval_per_class) {
        return Err(Error::Config(format!(
            "class {c} has {n} retrieval examples, {} required",
            spec.retrieval_per_class
        )));
    }
    let n_val = (rest.len() as f64 * spec.val_fraction).round() as usize;
    let n_test = (rest.len() as f64 * spec.test_fraction).round() as usize;
    for (i, img) in rest.into_iter().enumerate() {
        for a in &by_image[img] {
            let a = (*a).clone();
            if i < n_val {
                if labels.is_seen(&a.label) {
                    splits.val.push(a);
                }
            } else if i < n_val + n_test {
                splits.test.push(a);
            } else if labels.is_seen(&a.label) {
                splits.train.push(a);
            }
        }
    }
    Ok(splits)
}

/// Mean-pooled index over `annotations`; captions become descriptions.
pub fn build_index(annotations: &[Annotation], features: &BTreeMap<String, PatchGrid>) -> Result<RetrievalIndex> {
    let mut index = RetrievalIndex::new();
    for a in annotations {
        let mask = a.mask()?;
        let emb = meanpool_embedding(lookup_grid(features, &a.image_id)?, &mask)?;
        let description = a.caption.clone().unwrap_or_else(|| a.label.clone());
        index.add_record(&mask, description, a.image_id.clone(), emb, Some(a.label.clone()))?;
    }
    Ok(index)
}

// ---------------------------------------------------------------------------
// Examples

/// A retrieved object placed in a prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextItem {
    pub record_id: u64,
    pub image_id: String,
    pub mask: ObjectMask,
    pub label: String,
    pub similarity: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub image_id: String,
    pub mask: ObjectMask,
    pub task: Task,
    pub template_id: String,
    pub target: String,
    /// Ascending similarity; the most similar item sits last.
    pub context: Option<Vec<ContextItem>>,
    /// Record ids withheld from retrieval for this example.
    pub excluded: BTreeSet<u64>,
}

pub fn target_text(a: &Annotation, task: Task) -> String {
    match task {
        Task::Classification => a.label.clone(),
        Task::Captioning => a.caption.clone().unwrap_or_else(|| format!("a {}", a.label)),
    }
}

/// Records of `index` describing the same region as `a`.
pub fn own_records(index: &RetrievalIndex, a: &Annotation) -> BTreeSet<u64> {
    index
        .records()
        .iter()
        .filter(|r| r.image_id == a.image_id && r.mask == a.mask_rle)
        .map(|r| r.record_id)
        .collect()
}

/// Examples for one task and variant. Retrieval-augmented examples carry
/// their top-`k` context from `index`, with the example's own records
/// withheld when `leakage_exclusion` is set.
pub fn make_examples(
    samples: &[Annotation],
    task: Task,
    variant: Variant,
    index: Option<&RetrievalIndex>,
    features: &BTreeMap<String, PatchGrid>,
    k: usize,
    leakage_exclusion: bool,
) -> Result<Vec<TrainExample>> {
    let template_id = task.template(variant)?.to_string();
    let mut out = Vec::with_capacity(samples.len());
    for a in samples {
        let mask = a.mask()?;
        let target = normalize(&target_text(a, task));
        if target.is_empty() {
            return Err(Error::Usage(format!("empty target for an object in {}", a.image_id)));
        }
        let (context, excluded) = match variant {
            Variant::RG => {
                let index = index.ok_or_else(|| Error::Usage("retrieval-augmented examples need an index".into()))?;
                let excluded = if leakage_exclusion { own_records(index, a) } else { BTreeSet::new() };
                let grid = lookup_grid(features, &a.image_id)?;
                let hits = index.query_topk(&meanpool_embedding(grid, &mask)?, k, &excluded)?;
                let mut items = Vec::with_capacity(hits.hits.len());
                for h in hits.hits.iter().rev() {
                    let r = index.get(h.record_id).ok_or_else(|| Error::NotFound(format!("record {}", h.record_id)))?;
                    items.push(ContextItem {
                        record_id: r.record_id,
                        image_id: r.image_id.clone(),
                        mask: ObjectMask::from_rle(&r.mask)?,
                        label: r.label.clone().unwrap_or_else(|| r.description.clone()),
                        similarity: h.similarity,
                    });
                }
                (Some(items), excluded)
            }
            _ => (None, BTreeSet::new()),
        };
        out.push(TrainExample {
            image_id: a.image_id.clone(),
            mask,
            task,
            template_id: template_id.clone(),
            target,
            context,
            excluded,
        });
    }
    Ok(out)
}

/// Fails if any unseen class name occurs as a word of a training target.
pub fn check_hygiene(examples: &[TrainExample], labels: &LabelSet) -> Result<()> {
    for ex in examples {
        for w in ex.target.split(|c: char| !c.is_alphanumeric()) {
            if labels.unseen.contains(w) {
                return Err(Error::Config(format!("unseen class {w} in a training target")));
            }
        }
    }
    Ok(())
}

/// Placeholder label words for label-agnostic episodes.
pub fn nonce_words(count: usize) -> Vec<String> {
    (0..count).map(|i| format!("nonce{i}")).collect()
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub task: Task,
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub stages: Vec<StageConfig>,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Momentum for SGD, first-moment decay for Adam.
    pub momentum: f64,
    pub beta2: f64,
    pub warmup_steps: usize,
    /// Cosine decay floor as a fraction of the stage learning rate.
    pub min_lr_fraction: f64,
    pub clip_norm: Option<f64>,
    /// Retrieved examples per retrieval-augmented prompt.
    pub k: usize,
    pub leakage_exclusion: bool,
    pub variants: Vec<Variant>,
    /// Probability that a retrieval-augmented classification example has
    /// its labels replaced by placeholder words.
    pub nonce_fraction: f64,
    pub nonce_words: usize,
    /// Parameter-name prefixes kept frozen.
    pub freeze: Vec<String>,
    /// Cap on validation examples per variant.
    pub val_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            stages: vec![
                StageConfig {
                    task: Task::Classification,
                    epochs: 10,
                    lr: 1e-3,
                },
                StageConfig {
                    task: Task::Captioning,
                    epochs: 4,
                    lr: 5e-4,
                },
            ],
            batch_size: 8,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            beta2: 0.999,
            warmup_steps: 20,
            min_lr_fraction: 0.05,
            clip_norm: Some(1.0),
            k: 5,
            leakage_exclusion: true,
            variants: vec![Variant::G, Variant::RG],
            nonce_fraction: 0.8,
            nonce_words: 128,
            freeze: vec!["decoder.embed".into()],
            val_limit: Some(200),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("at least one training stage required".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.variants.is_empty() || self.variants.contains(&Variant::R) {
            return Err(Error::Config("variants must be a non-empty subset of G and RG".into()));
        }
        if self.variants.contains(&Variant::RG) && self.k == 0 {
            return Err(Error::Config("retrieval-augmented training needs k >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.nonce_fraction) {
            return Err(Error::Config("nonce_fraction must lie in [0, 1]".into()));
        }
        if self.stages.iter().any(|s| !(s.lr.is_finite() && s.lr > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Sequences and losses

/// Token sequence and loss targets for one example. `remap` substitutes
/// label words in context and target.
struct Sequence {
    tokens: Vec<u32>,
    targets: Vec<Option<u32>>,
    objects: Vec<(String, ObjectMask)>,
}

fn build_sequence(model: &OliveModel, ex: &TrainExample, remap: Option<&BTreeMap<String, String>>) -> Result<Sequence> {
    let map = |s: &str| -> String {
        remap.and_then(|m| m.get(s)).cloned().unwrap_or_else(|| s.to_string())
    };
    let labels: Option<Vec<(String, f32)>> = ex
        .context
        .as_ref()
        .map(|c| c.iter().map(|i| (map(&i.label), i.similarity)).collect());
    let items: Option<Vec<(&str, f32)>> = labels.as_ref().map(|l| l.iter().map(|(s, v)| (s.as_str(), *v)).collect());
    let layout = PromptLayout::build(&model.vocab, &model.templates, &ex.template_id, None, items.as_deref())?;
    let target = match ex.task {
        Task::Classification => map(&ex.target),
        Task::Captioning => ex.target.clone(),
    };
    let mut tokens = Vec::with_capacity(layout.len() + 8);
    tokens.push(BOS);
    tokens.extend_from_slice(&layout.tokens);
    let start = tokens.len();
    tokens.extend(model.vocab.tokenize(&target));
    tokens.push(EOS);
    let t = tokens.len();
    let targets = (0..t)
        .map(|i| (i + 1 >= start && i + 1 < t).then(|| tokens[i + 1]))
        .collect();
    let mut objects: Vec<(String, ObjectMask)> = ex
        .context
        .iter()
        .flatten()
        .map(|c| (c.image_id.clone(), c.mask.clone()))
        .collect();
    objects.push((ex.image_id.clone(), ex.mask.clone()));
    Ok(Sequence {
        tokens,
        targets,
        objects,
    })
}

/// Next-token loss of one example on `s`, averaged over target tokens
/// and the closing `EOS`.
pub fn example_loss(
    model: &OliveModel,
    s: &mut Session<f32>,
    features: &BTreeMap<String, PatchGrid>,
    ex: &TrainExample,
    remap: Option<&BTreeMap<String, String>>,
) -> Result<Var> {
    let seq = build_sequence(model, ex, remap)?;
    let mut objs = Vec::with_capacity(seq.objects.len());
    for (img, mask) in &seq.objects {
        objs.push(model.object_var(s, lookup_grid(features, img)?, mask)?);
    }
    let rows = model.decoder.embed_tokens(s, &seq.tokens, &objs)?;
    model.decoder.loss(s, rows, &seq.targets, model.lora.as_ref())
}

/// Random placeholder words for every label in an example's context and
/// target. Classification with context only; the target keeps its real
/// label when no context item shares it.
fn nonce_remap<R: Rng>(ex: &TrainExample, pool: &[String], rng: &mut R) -> Option<BTreeMap<String, String>> {
    let ctx = ex.context.as_ref()?;
    if ex.task != Task::Classification || !ctx.iter().any(|c| c.label == ex.target) {
        return None;
    }
    let names: BTreeSet<&str> = ctx.iter().map(|c| c.label.as_str()).collect();
    if names.len() > pool.len() {
        return None;
    }
    let picks: Vec<&String> = pool.choose_multiple(rng, names.len()).collect();
    Some(names.into_iter().map(String::from).zip(picks.into_iter().cloned()).collect())
}

/// Mean per-example loss without gradients.
pub fn mean_loss(
    model: &OliveModel,
    features: &BTreeMap<String, PatchGrid>,
    examples: &[TrainExample],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Usage("no examples to score".into()));
    }
    let mut total = 0.0;
    for ex in examples {
        let mut s = Session::inference(&model.store);
        let l = example_loss(model, &mut s, features, ex, None)?;
        total += s.g.value(l).item() as f64;
    }
    Ok(total / examples.len() as f64)
}

// ---------------------------------------------------------------------------
// Optimizer

struct Optimizer {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    steps: u64,
    m: Vec<Option<Vec<f32>>>,
    v: Vec<Option<Vec<f32>>>,
}

impl Optimizer {
    fn new(cfg: &TrainConfig, params: usize) -> Self {
        Optimizer {
            kind: cfg.optimizer,
            beta1: cfg.momentum,
            beta2: cfg.beta2,
            steps: 0,
            m: vec![None; params],
            v: vec![None; params],
        }
    }

    fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads<f32>, lr: f64) {
        self.steps += 1;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let w = store.get_mut(id).data_mut();
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    let mu = self.beta1 as f32;
                    for ((w, m), &g) in w.iter_mut().zip(m.iter_mut()).zip(g) {
                        *m = mu * *m + g;
                        *w -= lr as f32 * *m;
                    }
                }
                OptimizerKind::Adam => {
                    let v = self.v[i].get_or_insert_with(|| vec![0.0; g.len()]);
                    let (b1, b2) = (self.beta1, self.beta2);
                    let c1 = 1.0 - b1.powi(self.steps as i32);
                    let c2 = 1.0 - b2.powi(self.steps as i32);
                    let step = (lr * c2.sqrt() / c1) as f32;
                    for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                        *m = b1 as f32 * *m + (1.0 - b1 as f32) * g;
                        *v = b2 as f32 * *v + (1.0 - b2 as f32) * g * g;
                        *w -= step * *m / (v.sqrt() + 1e-8);
                    }
                }
            }
        }
    }
}

/// Learning rate at `step` of `total`: linear warmup, then cosine decay
/// to `min_fraction · lr`.
pub fn lr_at(lr: f64, step: usize, total: usize, warmup: usize, min_fraction: f64) -> f64 {
    if step < warmup {
        return lr * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    lr * (min_fraction + (1.0 - min_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

// ---------------------------------------------------------------------------
// Training loop

/// Inputs shared by all stages.
pub struct TrainData<'a> {
    pub features: &'a BTreeMap<String, PatchGrid>,
    pub train: &'a [Annotation],
    pub val: &'a [Annotation],
    /// Train-time retrieval index; seen classes only.
    pub retrieval: Option<&'a RetrievalIndex>,
    pub labels: &'a LabelSet,
}

/// One line of the metrics log. `step` counts optimizer updates and
/// orders the log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: usize,
    pub task: Task,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub step: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<MetricRecord>,
    /// Best validation loss and its epoch, per stage.
    pub best: Vec<(f64, usize)>,
}

fn emit(log: &mut Option<&mut dyn Write>, report: &mut TrainReport, rec: MetricRecord) -> Result<()> {
    if let Some(w) = log.as_mut() {
        serde_json::to_writer(&mut **w, &rec)?;
        w.write_all(b"\n")?;
    }
    report.metrics.push(rec);
    Ok(())
}

fn stage_examples(cfg: &TrainConfig, data: &TrainData, task: Task, samples: &[Annotation]) -> Result<Vec<TrainExample>> {
    let mut out = Vec::new();
    for &v in &cfg.variants {
        out.extend(make_examples(samples, task, v, data.retrieval, data.features, cfg.k, cfg.leakage_exclusion)?);
    }
    Ok(out)
}

/// Runs every stage in order, each resuming from the previous one's best
/// validation parameters. Validation loss is logged before the first
/// epoch (epoch 0) and after each epoch.
pub fn train(
    model: &mut OliveModel,
    cfg: &TrainConfig,
    data: &TrainData,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    for prefix in &cfg.freeze {
        model.store.set_trainable(prefix, false);
    }
    let pool = nonce_words(cfg.nonce_words);
    if cfg.nonce_fraction > 0.0 {
        if let Some(w) = pool.iter().find(|w| model.vocab.id(w).is_none()) {
            return Err(Error::Config(format!("placeholder word {w} missing from the vocabulary")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    let mut step: u64 = 0;
    for (si, stage) in cfg.stages.iter().enumerate() {
        let examples = stage_examples(cfg, data, stage.task, data.train)?;
        if examples.is_empty() {
            return Err(Error::Config(format!("stage {si} has no training examples")));
        }
        check_hygiene(&examples, data.labels)?;
        let val_samples: Vec<Annotation> = match cfg.val_limit {
            Some(n) => data.val.iter().take(n).cloned().collect(),
            None => data.val.to_vec(),
        };
        let val = stage_examples(cfg, data, stage.task, &val_samples)?;

        let mut opt = Optimizer::new(cfg, model.store.len());
        let batches_per_epoch = examples.len().div_ceil(cfg.batch_size);
        let total = batches_per_epoch * stage.epochs;
        let mut best = (f64::INFINITY, 0usize);
        let mut best_store = model.store.clone();
        if !val.is_empty() {
            let l = mean_loss(model, data.features, &val)?;
            best = (l, 0);
            emit(&mut log, &mut report, MetricRecord { stage: si, task: stage.task, epoch: 0, split: "val".into(), loss: l, step })?;
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut local = 0usize;
        for epoch in 1..=stage.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let mut grads = ParamGrads::empty(model.store.len());
                for &i in batch {
                    let ex = &examples[i];
                    let remap = if rng.random::<f64>() < cfg.nonce_fraction {
                        nonce_remap(ex, &pool, &mut rng)
                    } else {
                        None
                    };
                    let mut s = Session::training(&model.store);
                    let l = example_loss(model, &mut s, data.features, ex, remap.as_ref()).map_err(|e| match e {
                        Error::Numeric(what) => Error::Divergence(format!(
                            "non-finite {what} at stage {si}, epoch {epoch}, step {step}"
                        )),
                        other => other,
                    })?;
                    let lv = s.g.value(l).item() as f64;
                    if !lv.is_finite() {
                        return Err(Error::Divergence(format!(
                            "non-finite loss at stage {si}, epoch {epoch}, step {step}"
                        )));
                    }
                    epoch_loss += lv;
                    grads.accumulate(&s.backward(l)?);
                }
                grads.scale(1.0 / batch.len() as f32);
                if !grads.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite gradient at stage {si}, epoch {epoch}, step {step}"
                    )));
                }
                if let Some(c) = cfg.clip_norm {
                    let n = grads.global_norm();
                    if n > c {
                        grads.scale((c / n) as f32);
                    }
                }
                let lr = lr_at(stage.lr, local, total, cfg.warmup_steps, cfg.min_lr_fraction);
                opt.step(&mut model.store, &grads, lr);
                local += 1;
                step += 1;
            }
            emit(
                &mut log,
                &mut report,
                MetricRecord {
                    stage: si,
                    task: stage.task,
                    epoch,
                    split: "train".into(),
                    loss: epoch_loss / examples.len() as f64,
                    step,
                },
            )?;
            if !val.is_empty() {
                let l = mean_loss(model, data.features, &val)?;
                emit(&mut log, &mut report, MetricRecord { stage: si, task: stage.task, epoch, split: "val".into(), loss: l, step })?;
                if l < best.0 {
                    best = (l, epoch);
                    best_store = model.store.clone();
                }
            }
        }
        if !val.is_empty() {
            model.store = best_store;
        }
        report.best.push(best);
    }
    Ok(report)
}
