use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use olive_core::analysis::{
    object_representation, pca_top2, sweep_csv, sweep_plot_data, sweep_retrieval, best_over_k, Probe, SweepSpec,
};
use olive_core::eval::{context_length, evaluate, ContextModel, EvalInputs, EvalReport};
use olive_core::features::{load_feature_dir, read_annotations, save_features, write_annotations, Annotation, PatchGrid};
use olive_core::model::{lookup_grid, ModelConfig, OliveModel};
use olive_core::prompt::Vocabulary;
use olive_core::retrieval::RetrievalIndex;
use olive_core::training::{
    build_datasets, build_index, generate_corpus, nonce_words, train, CorpusSpec, LabelSet, SplitSpec, Task,
    TrainConfig, TrainData, Variant,
};
use olive_core::{Error, Result};
use olive_service::{AppState, ServiceConfig};

const FEATURES: &str = "features";
const ANNOTATIONS: &str = "annotations.jsonl";
const LABELS: &str = "labels.json";
const SPLITS: [&str; 4] = ["train", "val", "test", "retrieval"];

#[derive(Parser)]
#[command(name = "olive", version, about = "Object-level in-context prompting on patch features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic single-object corpus and its splits.
    GenData(GenData),
    /// Build a retrieval index from an annotation split.
    BuildIndex(BuildIndex),
    /// Train the resampler and decoder.
    Train(TrainArgs),
    /// Evaluate R, G or RG on a split.
    Eval(EvalArgs),
    #[command(subcommand)]
    Analyze(Analyze),
    /// Run the HTTP service.
    Serve(Serve),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    /// Corpus settings as TOML; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    sigma: Option<f32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// How many trailing labels are held out of training.
    #[arg(long, default_value_t = 2)]
    unseen: usize,
    #[arg(long, default_value_t = 20)]
    retrieval_per_class: usize,
    #[arg(long, default_value_t = 0.1)]
    val: f64,
    #[arg(long, default_value_t = 0.2)]
    test: f64,
}

#[derive(Args)]
struct BuildIndex {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "retrieval")]
    split: String,
    /// Keep only classes seen in training.
    #[arg(long)]
    seen_only: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Training settings as TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model settings as TOML.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Metrics log (JSON lines).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Defaults to an index over the full retrieval split.
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long, value_parser = parse_variant)]
    variant: Variant,
    #[arg(long, value_parser = parse_task, default_value = "classification")]
    task: Task,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 16)]
    max_new: usize,
    /// Per-prediction JSON lines.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Appends one summary row.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Analyze {
    /// Prompt token counts against k for each system.
    ContextLength {
        #[arg(long, default_value_t = 32)]
        max_k: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-2 principal components of object representations.
    Pca {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `object` or `layer:N`.
        #[arg(long, default_value = "object", value_parser = parse_probe)]
        probe: Probe,
        #[arg(long, default_value = "annotations")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Projection plot data (x, y, series).
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Retrieval-vote accuracy over set sizes and k.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "2,10,20")]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,10")]
        ks: Vec<usize>,
        #[arg(long, default_value = "retrieval")]
        pool: String,
        #[arg(long, default_value = "test")]
        queries: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Serve {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    features_dir: Option<PathBuf>,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    match s.to_ascii_uppercase().as_str() {
        "R" => Ok(Variant::R),
        "G" => Ok(Variant::G),
        "RG" => Ok(Variant::RG),
        _ => Err(format!("unknown variant {s}; expected R, G or RG")),
    }
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    match s {
        "classification" | "classify" => Ok(Task::Classification),
        "captioning" | "caption" => Ok(Task::Captioning),
        _ => Err(format!("unknown task {s}")),
    }
}

fn parse_probe(s: &str) -> std::result::Result<Probe, String> {
    if s == "object" {
        return Ok(Probe::ObjectVector);
    }
    s.strip_prefix("layer:")
        .and_then(|n| n.parse().ok())
        .map(Probe::DecoderLayer)
        .ok_or_else(|| format!("unknown probe {s}; expected object or layer:N"))
}

#[derive(Serialize, Deserialize)]
struct LabelsFile {
    classes: Vec<String>,
    unseen: Vec<String>,
}

struct Dataset {
    features: BTreeMap<String, PatchGrid>,
    labels: LabelSet,
    dir: PathBuf,
}

impl Dataset {
    fn open(dir: &Path) -> Result<Self> {
        let lf: LabelsFile = serde_json::from_slice(&fs::read(dir.join(LABELS))?)?;
        Ok(Dataset {
            features: load_feature_dir(&dir.join(FEATURES))?,
            labels: LabelSet::new(lf.classes, &lf.unseen)?,
            dir: dir.to_path_buf(),
        })
    }

    fn split(&self, name: &str) -> Result<Vec<Annotation>> {
        if name != "annotations" && !SPLITS.contains(&name) {
            return Err(Error::Usage(format!("unknown split {name}")));
        }
        read_annotations(&self.dir.join(format!("{name}.jsonl")))
    }
}

fn read_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => toml::from_str(&fs::read_to_string(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display()))),
        None => Ok(T::default()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn gen_data(a: GenData) -> Result<()> {
    let mut spec: CorpusSpec = read_toml(a.config.as_deref())?;
    if let Some(c) = a.classes {
        spec.classes = c;
    }
    if let Some(p) = a.per_class {
        spec.objects_per_class = p;
    }
    if let Some(s) = a.sigma {
        spec.noise_sigma = s;
    }
    if a.config.is_none() || a.seed != 0 {
        spec.seed = a.seed;
    }
    let corpus = generate_corpus(&spec)?;
    let classes = corpus.domain.labels.clone();
    if a.unseen >= classes.len() {
        return Err(Error::Config(format!("{} unseen of {} classes", a.unseen, classes.len())));
    }
    let unseen = classes[classes.len() - a.unseen..].to_vec();
    let labels = LabelSet::new(classes.clone(), &unseen)?;
    let splits = build_datasets(
        &corpus.annotations,
        &labels,
        &SplitSpec {
            retrieval_per_class: a.retrieval_per_class,
            val_fraction: a.val,
            test_fraction: a.test,
        },
        spec.seed,
    )?;
    let fdir = a.out.join(FEATURES);
    fs::create_dir_all(&fdir)?;
    for (id, g) in &corpus.features {
        save_features(g, &fdir.join(format!("{id}.olvf")))?;
    }
    write_annotations(&a.out.join(ANNOTATIONS), &corpus.annotations)?;
    for (name, part) in SPLITS.iter().zip([&splits.train, &splits.val, &splits.test, &splits.retrieval]) {
        write_annotations(&a.out.join(format!("{name}.jsonl")), part)?;
    }
    fs::write(a.out.join(LABELS), serde_json::to_vec_pretty(&LabelsFile { classes, unseen })?)?;
    write_text(
        &a.out.join("corpus.toml"),
        &toml::to_string(&spec).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    println!(
        "{} objects: train {} val {} test {} retrieval {}",
        corpus.annotations.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        splits.retrieval.len()
    );
    Ok(())
}

fn index_for(ds: &Dataset, split: &str, seen_only: bool) -> Result<RetrievalIndex> {
    let mut anns = ds.split(split)?;
    if seen_only {
        anns.retain(|a| ds.labels.is_seen(&a.label));
    }
    build_index(&anns, &ds.features)
}

fn build_index_cmd(a: BuildIndex) -> Result<()> {
    let ds = Dataset::open(&a.data)?;
    let index = index_for(&ds, &a.split, a.seen_only)?;
    index.save(&a.out)?;
    println!("{} records, revision {}", index.len(), index.revision());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let ds = Dataset::open(&a.data)?;
    let cfg = match &a.config {
        Some(p) => TrainConfig::from_toml(&fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    let model_cfg: ModelConfig = read_toml(a.model_config.as_deref())?;
    let all = ds.split("annotations")?;
    let mut texts: Vec<String> = all.iter().filter_map(|a| a.caption.clone()).collect();
    texts.extend(nonce_words(cfg.nonce_words));
    let vocab = Vocabulary::standard(ds.labels.classes(), &texts);
    let mut model = OliveModel::init(model_cfg, vocab, cfg.seed)?;
    let (tr, val) = (ds.split("train")?, ds.split("val")?);
    let index = index_for(&ds, "retrieval", true)?;
    let data = TrainData {
        features: &ds.features,
        train: &tr,
        val: &val,
        retrieval: Some(&index),
        labels: &ds.labels,
    };
    let mut sink: Option<BufWriter<File>> = a.metrics.as_deref().map(File::create).transpose()?.map(BufWriter::new);
    let report = train(&mut model, &cfg, &data, sink.as_mut().map(|w| w as &mut dyn Write))?;
    if let Some(mut w) = sink {
        w.flush()?;
    }
    model.save(&a.out)?;
    for (stage, (loss, epoch)) in report.best.iter().enumerate() {
        println!("stage {stage}: best val loss {loss:.4} at epoch {epoch}");
    }
    Ok(())
}

fn wire_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

fn summary_csv_row(r: &EvalReport, k: usize) -> String {
    let f = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{},{}\n",
        wire_name(&r.task),
        wire_name(&r.variant),
        k,
        r.count,
        f(r.accuracy),
        f(r.map),
        f(r.cider),
        f(r.meteor_lite)
    )
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ds = Dataset::open(&a.data)?;
    let model = a.checkpoint.as_deref().map(OliveModel::load).transpose()?;
    let index = match &a.index {
        Some(p) => RetrievalIndex::load(p)?,
        None => index_for(&ds, "retrieval", false)?,
    };
    let samples = ds.split(&a.split)?;
    let inputs = EvalInputs {
        model: model.as_ref(),
        index: Some(&index),
        features: &ds.features,
        k: a.k,
        max_new: a.max_new,
    };
    let report = evaluate(&inputs, &samples, a.task, a.variant)?;
    if let Some(p) = &a.out {
        let mut w = BufWriter::new(File::create(p)?);
        for pred in &report.predictions {
            serde_json::to_writer(&mut w, pred)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    if let Some(p) = &a.csv {
        let fresh = !p.exists();
        let mut f = fs::OpenOptions::new().create(true).append(true).open(p)?;
        if fresh {
            f.write_all(b"task,variant,k,count,accuracy,map,cider,meteor_lite\n")?;
        }
        f.write_all(summary_csv_row(&report, a.k).as_bytes())?;
    }
    let mut summary = serde_json::to_value(&report)?;
    summary.as_object_mut().map(|o| o.remove("predictions"));
    println!("{summary}");
    Ok(())
}

fn context_length_cmd(max_k: u64, out: Option<PathBuf>) -> Result<()> {
    let m = ContextModel::default();
    let mut csv = String::from("x,y,series\n");
    for system in m.image_cost.keys() {
        for k in 0..=max_k {
            csv.push_str(&format!("{k},{},{system}\n", context_length(&m, system, k)?));
        }
    }
    for system in m.image_cost.keys() {
        println!(
            "{system}: {} tokens per example, k=4 in-context {}",
            m.slope(system)?,
            m.incontext_tokens(system, 4)?
        );
    }
    match out {
        Some(p) => write_text(&p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn pca_cmd(
    data: PathBuf,
    checkpoint: PathBuf,
    probe: Probe,
    split: String,
    out: Option<PathBuf>,
    plot: Option<PathBuf>,
) -> Result<()> {
    let ds = Dataset::open(&data)?;
    let model = OliveModel::load(&checkpoint)?;
    let anns = ds.split(&split)?;
    let mut vectors = Vec::with_capacity(anns.len());
    for a in &anns {
        vectors.push(object_representation(&model, lookup_grid(&ds.features, &a.image_id)?, &a.mask()?, probe)?);
    }
    let labels: Vec<String> = anns.iter().map(|a| a.label.clone()).collect();
    let res = pca_top2(&vectors, &labels)?;
    println!(
        "explained {:.4} {:.4}; mean cosine intra {:.4} inter {:.4}",
        res.explained[0], res.explained[1], res.mean_intra_cosine, res.mean_inter_cosine
    );
    if let Some(p) = out {
        write_text(&p, &serde_json::to_string_pretty(&res)?)?;
    }
    if let Some(p) = plot {
        let mut csv = String::from("x,y,series\n");
        for (xy, l) in res.projections.iter().zip(&labels) {
            csv.push_str(&format!("{},{},{l}\n", xy[0], xy[1]));
        }
        write_text(&p, &csv)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sweep_cmd(
    data: PathBuf,
    sizes: Vec<usize>,
    ks: Vec<usize>,
    pool: String,
    queries: String,
    seed: u64,
    out: Option<PathBuf>,
    plot: Option<PathBuf>,
) -> Result<()> {
    let ds = Dataset::open(&data)?;
    let cells = sweep_retrieval(
        &SweepSpec { sizes, ks },
        &ds.split(&pool)?,
        &ds.split(&queries)?,
        &ds.features,
        seed,
    )?;
    for (size, acc) in best_over_k(&cells) {
        println!("size {size}: best accuracy {acc:.4}");
    }
    match out {
        Some(p) => write_text(&p, &sweep_csv(&cells))?,
        None => print!("{}", sweep_csv(&cells)),
    }
    if let Some(p) = plot {
        write_text(&p, &sweep_plot_data(&cells))?;
    }
    Ok(())
}

fn serve_cmd(a: Serve) -> Result<()> {
    let config = ServiceConfig::resolve(
        a.index,
        a.checkpoint,
        a.features_dir,
        |k| std::env::var(k).ok(),
        Path::new("index.jsonl"),
    );
    let state = Arc::new(AppState::load(&config)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port)).await?;
        println!("listening on {}", listener.local_addr()?);
        olive_service::serve(listener, state).await
    })?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::BuildIndex(a) => build_index_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Analyze(Analyze::ContextLength { max_k, out }) => context_length_cmd(max_k, out),
        Command::Analyze(Analyze::Pca {
            data,
            checkpoint,
            probe,
            split,
            out,
            plot,
        }) => pca_cmd(data, checkpoint, probe, split, out, plot),
        Command::Analyze(Analyze::Sweep {
            data,
            sizes,
            ks,
            pool,
            queries,
            seed,
            out,
            plot,
        }) => sweep_cmd(data, sizes, ks, pool, queries, seed, out, plot),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
