//! Command-line front end.
//!
//! Settings resolve as defaults, then an optional `--config` JSON file, then
//! explicit flags. Exit codes: 0 success, 2 configuration error, 3 data
//! error, 4 numerical failure, 1 anything else.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::detect::{self, CvaMethod};
use crate::error::{Error, Result};
use crate::metrics::{self, LayerScore, Report};
use crate::nn::{self, PretextTask};
use crate::raster::{self, DatasetManifest, ManifestEntry, RasterPair, Split, SyntheticSceneSpec};
use crate::rng::{self, streams};
use crate::tensor::Tensor;
use crate::trainer::{self, CvConfig, FoldPlan, LinearClassifier, LinearTrainConfig, PretrainConfig};

#[derive(Parser, Debug)]
#[command(name = "sscd", version, about = "Self-supervised change detection on multitemporal rasters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic labelled image pairs and a dataset manifest.
    GenSynthetic(GenArgs),
    /// Pre-train a pretext model.
    Pretrain(PretrainArgs),
    /// Cross-validate a linear classifier on every feature layer.
    SelectLayer(SelectArgs),
    /// Train the per-pixel linear change classifier on one layer.
    TrainLinear(TrainLinearArgs),
    /// Produce a change map for one pair.
    Detect(DetectArgs),
    /// Score predicted maps against ground truth.
    Evaluate(EvaluateArgs),
    /// Colour-code a prediction against ground truth.
    RenderMap(RenderArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    size: Option<Vec<usize>>,
    #[arg(long)]
    bands: Option<usize>,
    #[arg(long)]
    change_blobs: Option<usize>,
    /// Inclusive side-length range of change blobs.
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    blob_size: Option<Vec<usize>>,
    #[arg(long)]
    texture_scale: Option<usize>,
    /// Half-width of the uniform sensor noise.
    #[arg(long)]
    noise: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct GenConfig {
    count: usize,
    scene: SyntheticSceneSpec,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            count: 20,
            scene: SyntheticSceneSpec::default(),
        }
    }
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    pairs_per_image: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    gamma: Option<f32>,
    #[arg(long)]
    margin: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Filters in each of the three layers.
    #[arg(long)]
    filters: Option<usize>,
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Overlap,
    Triplet,
}

impl From<TaskArg> for PretextTask {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Overlap => PretextTask::Overlap,
            TaskArg::Triplet => PretextTask::Triplet,
        }
    }
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    labeled_manifest: PathBuf,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    patches_per_image: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct SelectConfig {
    folds: usize,
    cv: CvConfig,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            folds: 3,
            cv: CvConfig::default(),
        }
    }
}

#[derive(Args, Debug)]
struct TrainLinearArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    layer: usize,
    #[arg(long)]
    labeled_manifest: PathBuf,
    #[arg(long)]
    patches_per_image: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    layer: usize,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    pair_id: String,
    #[arg(long, value_enum)]
    classifier: ClassifierArg,
    #[arg(long)]
    linear_model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ClassifierArg {
    CvaOtsu,
    CvaTriangle,
    Linear,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Linear classifier plus the context it was trained in.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearModelFile {
    pub task: PretextTask,
    pub layer: usize,
    pub feature_dim: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    /// F1-tuned decision threshold on P(changed).
    pub threshold: f64,
}

impl LinearModelFile {
    pub fn classifier(&self) -> Result<LinearClassifier> {
        LinearClassifier::from_parts(
            Tensor::new(&[2, self.feature_dim], self.weight.clone())?,
            Tensor::new(&[2], self.bias.clone())?,
        )
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_bytes(bytes: &[u8], path: &Path) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn gen_synthetic(a: GenArgs) -> Result<()> {
    let mut cfg: GenConfig = load_config(a.config.as_deref())?;
    set(&mut cfg.count, a.count);
    if let Some(s) = a.size {
        cfg.scene.height = s[0];
        cfg.scene.width = s[1];
    }
    set(&mut cfg.scene.bands, a.bands);
    set(&mut cfg.scene.change_blobs, a.change_blobs);
    if let Some(b) = a.blob_size {
        cfg.scene.blob_size = (b[0], b[1]);
    }
    set(&mut cfg.scene.texture_scale, a.texture_scale);
    set(&mut cfg.scene.noise_amplitude, a.noise);
    set(&mut cfg.scene.seed, a.seed);
    if cfg.count == 0 {
        return Err(Error::config("--count must be positive"));
    }
    cfg.scene.validate()?;

    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let (n_train, n_val, _) = raster::split_counts(cfg.count);
    let mut order: Vec<usize> = (0..cfg.count).collect();
    order.shuffle(&mut rng::substream(cfg.scene.seed, streams::SPLIT));
    let mut splits = vec![Split::Test; cfg.count];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mut entries = Vec::with_capacity(cfg.count);
    for (i, split) in splits.into_iter().enumerate() {
        let id = format!("pair_{i:04}");
        let spec = SyntheticSceneSpec {
            seed: rng::derive_seed(cfg.scene.seed, streams::SCENE, i as u64),
            ..cfg.scene.clone()
        };
        let pair = raster::generate_synthetic_pair(&spec, id.clone())?;
        let entry = ManifestEntry {
            path_t1: format!("{id}_t1.raster").into(),
            path_t2: format!("{id}_t2.raster").into(),
            path_labels: Some(format!("{id}_labels.raster").into()),
            id,
            split,
        };
        raster::write_raster(&pair.t1, a.out.join(&entry.path_t1))?;
        raster::write_raster(&pair.t2, a.out.join(&entry.path_t2))?;
        if let (Some(l), Some(p)) = (&pair.labels, &entry.path_labels) {
            raster::write_raster(l, a.out.join(p))?;
        }
        entries.push(entry);
    }
    let manifest = DatasetManifest {
        band_count: cfg.scene.bands,
        entries,
        creation: serde_json::json!({ "generator": "synthetic", "count": cfg.count, "scene": cfg.scene }),
        base_dir: a.out.clone(),
    };
    manifest.save(a.out.join("manifest.json"))?;
    println!(
        "wrote {} pairs to {} (train {n_train}, val {n_val}, test {})",
        cfg.count,
        a.out.display(),
        cfg.count - n_train - n_val
    );
    Ok(())
}

fn load_normalized(m: &DatasetManifest, split: Split) -> Result<Vec<RasterPair>> {
    m.load_split(split)?.iter().map(raster::normalize_pair).collect()
}

fn load_labeled(m: &DatasetManifest) -> Result<Vec<RasterPair>> {
    let pairs: Vec<RasterPair> = m
        .entries
        .iter()
        .map(|e| m.load_pair(e).and_then(|p| raster::normalize_pair(&p)))
        .collect::<Result<_>>()?;
    for p in &pairs {
        p.require_labels()?;
    }
    Ok(pairs)
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg: PretrainConfig = load_config(a.config.as_deref())?;
    set(&mut cfg.task, a.task.map(Into::into));
    set(&mut cfg.patch_size, a.patch_size);
    set(&mut cfg.pairs_per_image, a.pairs_per_image);
    set(&mut cfg.lr, a.lr);
    set(&mut cfg.weight_decay, a.weight_decay);
    set(&mut cfg.gamma, a.gamma);
    set(&mut cfg.margin, a.margin);
    set(&mut cfg.batch_size, a.batch_size);
    set(&mut cfg.max_epochs, a.max_epochs);
    set(&mut cfg.filters_per_layer, a.filters.map(|f| [f; nn::DEPTH]));
    set(&mut cfg.seed, a.seed);
    if a.no_augment {
        cfg.augmentation = false;
    }
    cfg.validate()?;

    let m = DatasetManifest::load(&a.manifest)?;
    let train = load_normalized(&m, Split::Train)?;
    let val = load_normalized(&m, Split::Val)?;
    let test = load_normalized(&m, Split::Test)?;
    let out = trainer::pretrain(&train, &val, &test, &cfg, Some(&a.out))?;
    write_json(&cfg, &a.out.join("pretrain_config.json"))?;

    let pct = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
    println!("task {}  stopped at epoch {}  best epoch {}", cfg.task, out.stop_epoch, out.best_epoch);
    println!("{:<10} {:>10} {:>10}", "split", "loss", "accuracy");
    println!("{:<10} {:>10.4} {:>10}", "val", out.val.loss, pct(out.val.accuracy));
    if let Some(t) = out.test {
        println!("{:<10} {:>10.4} {:>10}", "test", t.loss, pct(t.accuracy));
    }
    Ok(())
}

#[derive(Serialize)]
struct SelectReport {
    task: PretextTask,
    folds: FoldPlan,
    per_layer: Vec<LayerScore>,
    fold_aa: Vec<Vec<Option<f64>>>,
    flagged_layers: Vec<usize>,
    selected_layer: usize,
}

fn select_layer(a: SelectArgs) -> Result<()> {
    let mut cfg: SelectConfig = load_config(a.config.as_deref())?;
    set(&mut cfg.folds, a.folds);
    set(&mut cfg.cv.patches_per_image, a.patches_per_image);
    set(&mut cfg.cv.patch_size, a.patch_size);
    set(&mut cfg.cv.seed, a.seed);
    cfg.cv.linear.validate()?;

    let (model, _) = nn::load_checkpoint(&a.ckpt)?;
    let m = DatasetManifest::load(&a.labeled_manifest)?;
    let pairs = load_labeled(&m)?;
    let plan = FoldPlan::new(pairs.len(), cfg.folds)?;
    let mut per_layer = Vec::new();
    let mut fold_aa = Vec::new();
    let mut flagged_layers = Vec::new();
    for layer in 1..=model.max_layer() {
        let r = trainer::run_cv(&plan, layer, &model, &pairs, &cfg.cv)?;
        if r.flagged {
            flagged_layers.push(layer);
        }
        per_layer.push(LayerScore {
            layer,
            mean_aa: r.mean_aa,
        });
        fold_aa.push(r.fold_aa);
    }
    let selected_layer = metrics::rank_layers(&per_layer)?;

    let cells: Vec<String> = per_layer
        .iter()
        .map(|s| s.mean_aa.map(|v| format!("{v:.2}")).unwrap_or_else(|| "undef".into()))
        .collect();
    println!("{:<8} {}", "layer", (1..=per_layer.len()).map(|l| format!("{l:>8}")).collect::<String>());
    println!("{:<8} {}", model.task(), cells.iter().map(|c| format!("{c:>8}")).collect::<String>());
    println!("selected layer {selected_layer}");
    write_json(
        &SelectReport {
            task: model.task(),
            folds: plan,
            per_layer,
            fold_aa,
            flagged_layers,
            selected_layer,
        },
        &a.out,
    )
}

fn train_linear(a: TrainLinearArgs) -> Result<()> {
    let mut cfg: CvConfig = load_config(a.config.as_deref())?;
    // Change-detection training uses the lower rate unless told otherwise.
    if a.config.is_none() {
        cfg.linear.lr = 1e-5;
    }
    set(&mut cfg.patches_per_image, a.patches_per_image);
    set(&mut cfg.patch_size, a.patch_size);
    set(&mut cfg.linear.lr, a.lr);
    set(&mut cfg.seed, a.seed);
    cfg.linear.validate()?;

    let (model, _) = nn::load_checkpoint(&a.ckpt)?;
    let d = model.feature_channels(a.layer)?;
    let m = DatasetManifest::load(&a.labeled_manifest)?;
    let mut train: Vec<RasterPair> = load_normalized(&m, Split::Train)?;
    train.extend(load_normalized(&m, Split::Val)?);
    if train.is_empty() {
        return Err(Error::data("labelled manifest has no train or val pairs"));
    }
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (i, p) in train.iter().enumerate() {
        let (xi, yi) = trainer::labeled_pixels(&model, a.layer, p, i, cfg.patches_per_image, cfg.patch_size, cfg.seed)?;
        x.extend(xi);
        y.extend(yi);
    }
    let lin_cfg = LinearTrainConfig {
        seed: cfg.seed,
        ..cfg.linear.clone()
    };
    let out = trainer::train_linear(&x, d, &y, &lin_cfg)?;
    let scores: Vec<f32> = x.chunks_exact(d).map(|r| out.model.predict_proba(r) as f32).collect();
    let t = detect::f1_tuned_threshold(&scores, &y)?;
    let file = LinearModelFile {
        task: model.task(),
        layer: a.layer,
        feature_dim: d,
        weight: out.model.weight().data().to_vec(),
        bias: out.model.bias().data().to_vec(),
        threshold: t.threshold,
    };
    write_json(&file, &a.out)?;
    println!(
        "trained on {} pixels, best epoch {} of {}, threshold {:.4}",
        y.len(),
        out.best_epoch,
        out.epochs_run,
        t.threshold
    );
    Ok(())
}

fn detect(a: DetectArgs) -> Result<()> {
    let (model, _) = nn::load_checkpoint(&a.ckpt)?;
    let m = DatasetManifest::load(&a.manifest)?;
    let pair = raster::normalize_pair(&m.load_pair(m.entry(&a.pair_id)?)?)?;
    let map = match a.classifier {
        ClassifierArg::CvaOtsu => detect::detect_cva(&pair, &model, a.layer, CvaMethod::Otsu)?,
        ClassifierArg::CvaTriangle => detect::detect_cva(&pair, &model, a.layer, CvaMethod::Triangle)?,
        ClassifierArg::Linear => {
            let path = a
                .linear_model
                .as_ref()
                .ok_or_else(|| Error::config("--classifier linear needs --linear-model"))?;
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: LinearModelFile =
                serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
            if file.layer != a.layer || file.task != model.task() {
                return Err(Error::config(format!(
                    "linear model was trained on layer {} of a {} model",
                    file.layer, file.task
                )));
            }
            detect::detect_linear(&pair, &model, a.layer, &file.classifier()?, file.threshold)?
        }
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_bytes(&detect::encode_pgm(&map.binary)?, &a.out.join(format!("{}.pgm", pair.id)))?;
    raster::write_raster(&map.score, a.out.join(format!("{}_score.raster", pair.id)))?;
    if map.no_change {
        println!("{}: no-change scene (constant score map)", pair.id);
    }
    if let Some(labels) = &pair.labels {
        let c = metrics::confusion(&map.binary, labels)?;
        let report = Report::from_pairs(vec![(pair.id.clone(), c)]);
        write_json(&report, &a.out.join(format!("{}_metrics.json", pair.id)))?;
        let f = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "undef".into());
        let mm = report.aggregate;
        println!(
            "{}: sens {} spec {} prec {} F1 {}",
            pair.id,
            f(mm.sensitivity),
            f(mm.specificity),
            f(mm.precision),
            f(mm.f1)
        );
    }
    Ok(())
}

/// Reads a binary map from a P5 graymap or a raster file.
fn read_map(path: &Path) -> Result<Tensor> {
    if path.extension().is_some_and(|e| e == "pgm") {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        detect::decode_pgm(&bytes).map_err(|e| match e {
            Error::Data(reason) => Error::format(path, reason),
            other => other,
        })
    } else {
        raster::read_raster(path)
    }
}

fn truth_for(dir: &Path, id: &str) -> Result<PathBuf> {
    [format!("{id}.pgm"), format!("{id}_labels.raster"), format!("{id}.raster")]
        .into_iter()
        .map(|f| dir.join(f))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::data(format!("no ground truth for {id} in {}", dir.display())))
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let mut ids: Vec<(String, PathBuf)> = fs::read_dir(&a.pred)
        .map_err(|e| Error::io(&a.pred, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .filter_map(|p| Some((p.file_stem()?.to_str()?.to_owned(), p)))
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::data(format!("no .pgm predictions in {}", a.pred.display())));
    }
    let mut counts = Vec::with_capacity(ids.len());
    for (id, path) in ids {
        let pred = read_map(&path)?;
        let truth = read_map(&truth_for(&a.truth, &id)?)?;
        counts.push((id, metrics::confusion(&pred, &truth)?));
    }
    let report = Report::from_pairs(counts);
    write_json(&report, &a.out)?;
    let f = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "undef".into());
    let m = report.aggregate;
    println!(
        "{} pairs (micro-averaged): sens {} spec {} prec {} F1 {} AA {}",
        report.per_pair.len(),
        f(m.sensitivity),
        f(m.specificity),
        f(m.precision),
        f(m.f1),
        f(m.average_accuracy)
    );
    Ok(())
}

fn render_map(a: RenderArgs) -> Result<()> {
    let pred = read_map(&a.pred)?;
    let truth = read_map(&a.truth)?;
    write_bytes(&detect::render_comparison(&pred, &truth)?, &a.out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::Pretrain(a) => pretrain(a),
        Command::SelectLayer(a) => select_layer(a),
        Command::TrainLinear(a) => train_linear(a),
        Command::Detect(a) => detect(a),
        Command::Evaluate(a) => evaluate(a),
        Command::RenderMap(a) => render_map(a),
    }
}

/// Runs the command line and returns the process exit code.
pub fn main() -> i32 {
    main_from(std::env::args_os())
}

pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
