//! Training loops: pretext pre-training with the 1% early-stop rule, the
//! per-pixel linear classifier, and k-fold layer evaluation.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionCounts};
use crate::nn::{self, BranchConfig, CheckpointMeta, PretextModel, PretextTask};
use crate::raster::RasterPair;
use crate::rng::{self, streams};
use crate::sampler::{self, PatchExample, SamplerConfig};
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor};

/// True when `current` improves on `previous` by at least `threshold` relative.
pub fn improved_enough(previous: f64, current: f64, threshold: f64) -> bool {
    previous - current >= threshold * previous.abs()
}

/// 1-based epoch at which the consecutive-epoch rule stops training on this
/// loss sequence (the last epoch when it never fires).
pub fn stopping_epoch(val_losses: &[f64], threshold: f64) -> usize {
    for e in 1..val_losses.len() {
        if !improved_enough(val_losses[e - 1], val_losses[e], threshold) {
            return e + 1;
        }
    }
    val_losses.len()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub task: PretextTask,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f32,
    pub margin: f32,
    pub batch_size: usize,
    pub pairs_per_image: usize,
    pub patch_size: usize,
    pub early_stop_threshold: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub filters_per_layer: [usize; nn::DEPTH],
    pub kernel_size: usize,
    pub augmentation: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            task: PretextTask::Overlap,
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            gamma: 1.0,
            margin: 1.0,
            batch_size: 32,
            pairs_per_image: 5,
            patch_size: 64,
            early_stop_threshold: 0.01,
            max_epochs: 100,
            seed: 0,
            filters_per_layer: [32; nn::DEPTH],
            kernel_size: 3,
            augmentation: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::config("learning rate must be positive and weight decay non-negative"));
        }
        if !(0.0..1.0).contains(&self.early_stop_threshold) || self.early_stop_threshold == 0.0 {
            return Err(Error::config("early-stop threshold must lie in (0, 1)"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.pairs_per_image == 0 {
            return Err(Error::config("batch size, epochs and pairs per image must be positive"));
        }
        if !(self.margin > 0.0) || self.gamma < 0.0 {
            return Err(Error::config("margin must be positive and gamma non-negative"));
        }
        self.adam().validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    fn sampler(&self, augmentation: bool) -> SamplerConfig {
        SamplerConfig {
            patch_size: self.patch_size,
            pairs_per_image: self.pairs_per_image,
            seed: self.seed,
            augmentation_enabled: augmentation,
        }
    }

    pub fn branch(&self, bands: usize) -> BranchConfig {
        BranchConfig {
            in_channels: bands,
            filters_per_layer: self.filters_per_layer,
            kernel_size: self.kernel_size,
        }
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Overlap task only: validation accuracy at threshold 0.5, in percent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    /// Wall-clock time; the only field that varies between identical runs.
    pub elapsed_seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: PretextModel,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_epoch: usize,
    pub val: EvalStats,
    pub test: Option<EvalStats>,
}

fn example_loss(
    model: &PretextModel,
    tape: &mut Tape,
    vars: &[crate::tensor::Var],
    ex: &PatchExample,
    cfg: &PretrainConfig,
) -> Result<(crate::tensor::Var, Option<f32>)> {
    match model {
        PretextModel::Overlap(m) => {
            let label = ex
                .pseudo_label
                .ok_or_else(|| Error::Internal("overlap example without a pseudo-label".into()))?;
            let a = tape.constant(ex.patches[0].clone());
            let b = tape.constant(ex.patches[1].clone());
            let (_, prob) = m.forward_tape(tape, vars, a, b)?;
            let p = tape.value(prob).data()[0];
            let l = tape.bce(prob, label as f32)?;
            let correct = ((p > 0.5) as u8 == label) as u8 as f32;
            Ok((l, Some(correct)))
        }
        PretextModel::Triplet(m) => {
            if ex.patches.len() != 3 {
                return Err(Error::Internal("triplet example without three patches".into()));
            }
            let mut emb = Vec::with_capacity(3);
            for p in &ex.patches {
                let v = tape.constant(p.clone());
                emb.push(m.embed_tape(tape, vars, v)?);
            }
            let l = nn::triplet_l1_on_tape(tape, emb[0], emb[1], emb[2], cfg.margin, cfg.gamma)?;
            Ok((l, None))
        }
    }
}

/// Mean loss (and accuracy in percent for the overlap task) over fixed examples.
pub fn evaluate_pretext(model: &PretextModel, examples: &[PatchExample], cfg: &PretrainConfig) -> Result<EvalStats> {
    if examples.is_empty() {
        return Err(Error::data("no examples to evaluate"));
    }
    let (mut loss, mut correct, mut counted) = (0.0f64, 0.0f64, false);
    for ex in examples {
        let mut tape = Tape::new();
        let vars = model.register(&mut tape);
        let (l, c) = example_loss(model, &mut tape, &vars, ex, cfg)?;
        loss += tape.value(l).data()[0] as f64;
        if let Some(c) = c {
            correct += c as f64;
            counted = true;
        }
    }
    let n = examples.len() as f64;
    Ok(EvalStats {
        loss: loss / n,
        accuracy: counted.then(|| 100.0 * correct / n),
    })
}

fn fixed_examples(images: &[RasterPair], cfg: &PretrainConfig, stream: &str) -> Result<Vec<PatchExample>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let mut r = rng::substream(cfg.seed, stream);
    let s = cfg.sampler(false);
    match cfg.task {
        PretextTask::Overlap => sampler::overlap_epoch(images, &s, &mut r),
        PretextTask::Triplet => sampler::triplet_epoch(images, &s, &mut r),
    }
}

/// Pre-trains a pretext model on normalized image pairs.
///
/// Validation and test examples are drawn once and reused every epoch. Training
/// stops at the first epoch whose validation loss is not at least
/// `early_stop_threshold` (relative) below the previous epoch's. When `out` is
/// given, the best model so far is checkpointed there after every improvement
/// and each epoch is appended to `out/train_log.jsonl`.
pub fn pretrain(
    train: &[RasterPair],
    val: &[RasterPair],
    test: &[RasterPair],
    cfg: &PretrainConfig,
    out: Option<&Path>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let first = train
        .first()
        .ok_or_else(|| Error::data("training split is empty"))?;
    if val.is_empty() {
        return Err(Error::data("validation split is empty"));
    }
    let bands = first.bands();
    if let Some(p) = train.iter().chain(val).chain(test).find(|p| p.bands() != bands) {
        return Err(Error::data(format!(
            "pair {} has {} bands, expected {bands}",
            p.id,
            p.bands()
        )));
    }

    let mut model = PretextModel::init(cfg.task, cfg.branch(bands), cfg.seed)?;
    let mut adam = AdamState::new(cfg.adam(), &model.params())?;
    let val_examples = fixed_examples(val, cfg, streams::VAL_SAMPLES)?;
    let test_examples = fixed_examples(test, cfg, streams::TEST_SAMPLES)?;

    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train_log.jsonl");
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };

    let start = Instant::now();
    let mut log: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(f64, usize, PretextModel, EvalStats)> = None;
    let mut stop_epoch = cfg.max_epochs;
    for epoch in 1..=cfg.max_epochs {
        let mut r = rng::child(cfg.seed, streams::TRAIN_SAMPLES, epoch as u64);
        let s = cfg.sampler(cfg.augmentation);
        let examples = match cfg.task {
            PretextTask::Overlap => sampler::overlap_epoch(train, &s, &mut r)?,
            PretextTask::Triplet => sampler::triplet_epoch(train, &s, &mut r)?,
        };

        let mut epoch_loss = 0.0f64;
        for batch in examples.chunks(cfg.batch_size) {
            model.zero_grads();
            let scale = 1.0 / batch.len() as f32;
            for ex in batch {
                let mut tape = Tape::new();
                let vars = model.register(&mut tape);
                let (l, _) = example_loss(&model, &mut tape, &vars, ex, cfg)?;
                let value = tape.value(l).data()[0] as f64;
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
                }
                epoch_loss += value;
                let scaled = tape.scale(l, scale)?;
                tape.backward(scaled)?;
                model.accumulate_grads(&tape, &vars)?;
            }
            let mut params = model.params_mut();
            adam_step(&mut params, &mut adam).map_err(|e| {
                log::error!("epoch {epoch}: optimizer rejected the update: {e}");
                e
            })?;
        }
        model.zero_grads();

        let v = evaluate_pretext(&model, &val_examples, cfg)?;
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / examples.len() as f64,
            val_loss: v.loss,
            val_accuracy: v.accuracy,
            elapsed_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.5} val {:.5}{}",
            record.train_loss,
            record.val_loss,
            v.accuracy.map(|a| format!(" acc {a:.2}%")).unwrap_or_default()
        );
        if let Some((f, path)) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(path.as_path(), e))?;
        }

        if best.as_ref().is_none_or(|b| v.loss < b.0) {
            if let Some(dir) = out {
                let meta = CheckpointMeta {
                    seed: cfg.seed,
                    epoch,
                    patch_size: Some(cfg.patch_size),
                };
                nn::save_checkpoint(&model, &meta, dir)?;
            }
            best = Some((v.loss, epoch, model.clone(), v));
        }
        let prev = log.last().map(|r| r.val_loss);
        log.push(record);
        if let Some(prev) = prev {
            if !improved_enough(prev, v.loss, cfg.early_stop_threshold) {
                stop_epoch = epoch;
                break;
            }
        }
    }

    let (_, best_epoch, model, val_stats) = best.expect("at least one epoch ran");
    let test = if test_examples.is_empty() {
        None
    } else {
        Some(evaluate_pretext(&model, &test_examples, cfg)?)
    };
    Ok(PretrainOutcome {
        model,
        log,
        best_epoch,
        stop_epoch,
        val: val_stats,
        test,
    })
}

/// Two-class softmax regression over per-pixel feature vectors.
/// Class 0 is "unchanged", class 1 "changed".
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    weight: Tensor,
    bias: Tensor,
}

impl LinearClassifier {
    pub fn zeros(feature_dim: usize) -> Self {
        LinearClassifier {
            weight: Tensor::zeros(&[2, feature_dim]).with_grad(),
            bias: Tensor::zeros(&[2]).with_grad(),
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        match (weight.shape(), bias.shape()) {
            ([2, _], [2]) => Ok(LinearClassifier {
                weight: weight.with_grad(),
                bias: bias.with_grad(),
            }),
            (w, b) => Err(Error::shape(format!(
                "linear classifier needs weight [2, D] and bias [2], got {w:?} and {b:?}"
            ))),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    fn logits(&self, x: &[f32]) -> (f64, f64) {
        let d = self.feature_dim();
        let w = self.weight.data();
        let dot = |row: &[f32]| row.iter().zip(x).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>();
        (
            dot(&w[..d]) + self.bias.data()[0] as f64,
            dot(&w[d..]) + self.bias.data()[1] as f64,
        )
    }

    /// P(changed) for one feature vector.
    pub fn predict_proba(&self, x: &[f32]) -> f64 {
        let (z0, z1) = self.logits(x);
        1.0 / (1.0 + (z0 - z1).exp())
    }

    /// P(changed) for every pixel of a `[D, H, W]` feature map.
    pub fn predict_map(&self, features: &Tensor) -> Result<Tensor> {
        let (d, h, w) = features.chw()?;
        if d != self.feature_dim() {
            return Err(Error::shape(format!(
                "feature map has {d} channels, classifier expects {}",
                self.feature_dim()
            )));
        }
        let hw = h * w;
        let data = features.data();
        let mut x = vec![0.0f32; d];
        let mut out = Vec::with_capacity(hw);
        for p in 0..hw {
            for (c, v) in x.iter_mut().enumerate() {
                *v = data[c * hw + p];
            }
            out.push(self.predict_proba(&x) as f32);
        }
        Tensor::new(&[1, h, w], out)
    }

    /// Weighted cross-entropy `sum_i w[y_i] * -log p_i[y_i] / sum_i w[y_i]`
    /// over rows of `x` (row-major `[N, D]`), with gradients.
    pub fn loss_and_grad(&self, x: &[f32], labels: &[u8], class_weights: [f64; 2]) -> (f64, Vec<f64>, [f64; 2]) {
        let d = self.feature_dim();
        let mut gw = vec![0.0f64; 2 * d];
        let mut gb = [0.0f64; 2];
        let (mut loss, mut norm) = (0.0f64, 0.0f64);
        for (row, &y) in x.chunks_exact(d).zip(labels) {
            let (z0, z1) = self.logits(row);
            let m = z0.max(z1);
            let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
            let p = [(z0 - lse).exp(), (z1 - lse).exp()];
            let wy = class_weights[y as usize];
            loss += wy * (lse - if y == 1 { z1 } else { z0 });
            norm += wy;
            for k in 0..2 {
                let g = wy * (p[k] - (k == y as usize) as u8 as f64);
                gb[k] += g;
                for (acc, &v) in gw[k * d..(k + 1) * d].iter_mut().zip(row) {
                    *acc += g * v as f64;
                }
            }
        }
        if norm > 0.0 {
            loss /= norm;
            gw.iter_mut().for_each(|g| *g /= norm);
            gb.iter_mut().for_each(|g| *g /= norm);
        }
        (loss, gw, gb)
    }

    pub fn loss(&self, x: &[f32], labels: &[u8], class_weights: [f64; 2]) -> f64 {
        self.loss_and_grad(x, labels, class_weights).0
    }
}

/// Inverse class frequencies scaled to mean 1. Errors when a class is absent.
pub fn class_weights(labels: &[u8]) -> Result<[f64; 2]> {
    let n1 = labels.iter().filter(|&&l| l == 1).count();
    let n0 = labels.len() - n1;
    if n0 == 0 || n1 == 0 {
        return Err(Error::data(format!(
            "training data holds a single class ({n0} unchanged, {n1} changed)"
        )));
    }
    let n = labels.len() as f64;
    let inv = [n / n0 as f64, n / n1 as f64];
    let mean = 0.5 * (inv[0] + inv[1]);
    Ok([inv[0] / mean, inv[1] / mean])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearTrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction of samples held out for early stopping.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for LinearTrainConfig {
    fn default() -> Self {
        LinearTrainConfig {
            max_epochs: 250,
            patience: 50,
            lr: 1e-3,
            batch_size: 256,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

impl LinearTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience >= self.max_epochs {
            return Err(Error::config("patience must be smaller than max_epochs"));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::config("linear training needs lr > 0 and a positive batch size"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::config("holdout fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LinearTrainOutcome {
    pub model: LinearClassifier,
    pub class_weights: [f64; 2],
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// (train, holdout) loss per epoch.
    pub losses: Vec<(f64, f64)>,
}

fn gather(x: &[f32], d: usize, idx: &[usize], labels: &[u8]) -> (Vec<f32>, Vec<u8>) {
    let mut rows = Vec::with_capacity(idx.len() * d);
    let mut ys = Vec::with_capacity(idx.len());
    for &i in idx {
        rows.extend_from_slice(&x[i * d..(i + 1) * d]);
        ys.push(labels[i]);
    }
    (rows, ys)
}

/// Trains the linear classifier on row-major `[N, D]` features.
pub fn train_linear(x: &[f32], d: usize, labels: &[u8], cfg: &LinearTrainConfig) -> Result<LinearTrainOutcome> {
    cfg.validate()?;
    let n = labels.len();
    if d == 0 || x.len() != n * d {
        return Err(Error::shape(format!("{} values do not form {n} rows of {d}", x.len())));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::data("labels must be 0 or 1"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("linear classifier features".into()));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::substream(cfg.seed, streams::LINEAR_SPLIT));
    let n_hold = (n as f64 * cfg.holdout_fraction).round() as usize;
    let (hold_idx, train_idx) = order.split_at(n_hold.min(n.saturating_sub(1)));
    let mut train_idx = train_idx.to_vec();
    let (hold_x, hold_y) = gather(x, d, hold_idx, labels);
    let train_labels: Vec<u8> = train_idx.iter().map(|&i| labels[i]).collect();
    let weights = class_weights(&train_labels)?;

    let mut model = LinearClassifier::zeros(d);
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_cfg, &[&model.weight, &model.bias])?;
    let mut best = (f64::INFINITY, 0usize, model.clone());
    let mut losses = Vec::new();
    let mut shuffle = rng::substream(cfg.seed, streams::SHUFFLE);
    for epoch in 1..=cfg.max_epochs {
        train_idx.shuffle(&mut shuffle);
        let mut train_loss = 0.0;
        for batch in train_idx.chunks(cfg.batch_size) {
            let (bx, by) = gather(x, d, batch, labels);
            let (l, gw, gb) = model.loss_and_grad(&bx, &by, weights);
            train_loss += l * batch.len() as f64;
            model.weight.zero_grad();
            model.bias.zero_grad();
            model.weight.accumulate_grad(&gw.iter().map(|&g| g as f32).collect::<Vec<_>>())?;
            model.bias.accumulate_grad(&[gb[0] as f32, gb[1] as f32])?;
            adam_step(&mut [&mut model.weight, &mut model.bias], &mut adam)?;
        }
        train_loss /= train_idx.len() as f64;
        let hold_loss = if hold_y.is_empty() {
            train_loss
        } else {
            model.loss(&hold_x, &hold_y, weights)
        };
        if !hold_loss.is_finite() {
            return Err(Error::NonFinite(format!("linear classifier loss at epoch {epoch}")));
        }
        losses.push((train_loss, hold_loss));
        if hold_loss < best.0 {
            best = (hold_loss, epoch, model.clone());
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }
    let epochs_run = losses.len();
    Ok(LinearTrainOutcome {
        model: best.2,
        class_weights: weights,
        best_epoch: best.1,
        epochs_run,
        losses,
    })
}

/// Assignment of labelled pairs to cross-validation folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    /// Contiguous blocks in pair order; sizes differ by at most one.
    pub fn new(n: usize, k: usize) -> Result<Self> {
        if k < 2 || n < k {
            return Err(Error::config(format!("cannot split {n} pairs into {k} folds")));
        }
        let mut folds = Vec::with_capacity(k);
        let mut start = 0;
        for f in 0..k {
            let size = n / k + usize::from(f < n % k);
            folds.push((start..start + size).collect());
            start += size;
        }
        Ok(FoldPlan { folds })
    }

    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Folds are non-empty, disjoint and cover `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for f in &self.folds {
            if f.is_empty() {
                return Err(Error::config("empty fold"));
            }
            for &i in f {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::config(format!("pair {i} is out of range or in two folds")));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::config("fold plan does not cover every pair"));
        }
        Ok(())
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(f, _)| *f != fold)
            .flat_map(|(_, v)| v.iter().copied())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub patches_per_image: usize,
    pub patch_size: usize,
    pub linear: LinearTrainConfig,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            patches_per_image: 100,
            patch_size: 64,
            linear: LinearTrainConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub layer: usize,
    /// Held-out AA per fold in percent; `None` when the fold has no changed pixels.
    pub fold_aa: Vec<Option<f64>>,
    /// Mean over defined folds.
    pub mean_aa: Option<f64>,
    /// Set when at least one fold was excluded.
    pub flagged: bool,
}

/// Per-pixel training rows drawn from labelled patches of one pair.
///
/// Patch positions depend only on the seed and the pair's index, so every
/// layer and every model sees the same pixels in the same order.
pub fn labeled_pixels(
    model: &PretextModel,
    layer: usize,
    pair: &RasterPair,
    index: usize,
    patches_per_image: usize,
    patch_size: usize,
    seed: u64,
) -> Result<(Vec<f32>, Vec<u8>)> {
    let mut r = rng::child(seed, streams::LABELED_PATCHES, index as u64);
    let patches = sampler::sample_labeled_patches(pair, patches_per_image, patch_size, &mut r)?;
    let diff = model.difference_features(&pair.t1, &pair.t2, layer)?;
    let (c, h, w) = diff.chw()?;
    let hw = h * w;
    let labels = pair.require_labels()?.data();
    let mut x = Vec::with_capacity(patches.len() * patch_size * patch_size * c);
    let mut y = Vec::with_capacity(patches.len() * patch_size * patch_size);
    for lp in &patches {
        for dy in 0..patch_size {
            for dx in 0..patch_size {
                let p = (lp.rect.top + dy) * w + lp.rect.left + dx;
                x.extend((0..c).map(|ch| diff.data()[ch * hw + p]));
                y.push(labels[p] as u8);
            }
        }
    }
    Ok((x, y))
}

/// Confusion counts of `p > 0.5` over every pixel of a pair.
pub fn linear_confusion(model: &PretextModel, layer: usize, linear: &LinearClassifier, pair: &RasterPair) -> Result<ConfusionCounts> {
    let diff = model.difference_features(&pair.t1, &pair.t2, layer)?;
    let prob = linear.predict_map(&diff)?;
    let truth = pair.require_labels()?;
    Ok(ConfusionCounts::from_pairs(
        prob.data().iter().zip(truth.data()).map(|(&p, &t)| (p > 0.5, t == 1.0)),
    ))
}

/// k-fold evaluation of the layer-`layer` difference features.
///
/// Each fold trains a linear classifier on labelled patches of the other
/// folds' pairs and scores AA over every pixel of its own pairs.
pub fn run_cv(plan: &FoldPlan, layer: usize, model: &PretextModel, pairs: &[RasterPair], cfg: &CvConfig) -> Result<CvResult> {
    plan.validate(pairs.len())?;
    let d = model.feature_channels(layer)?;
    let mut rows: Vec<(Vec<f32>, Vec<u8>)> = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        rows.push(labeled_pixels(model, layer, pair, i, cfg.patches_per_image, cfg.patch_size, cfg.seed)?);
    }
    let mut fold_aa = Vec::with_capacity(plan.k());
    for (f, held_out) in plan.folds.iter().enumerate() {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in plan.train_indices(f) {
            x.extend_from_slice(&rows[i].0);
            y.extend_from_slice(&rows[i].1);
        }
        let lin_cfg = LinearTrainConfig {
            seed: rng::derive_seed(cfg.seed, streams::LINEAR_INIT, f as u64),
            ..cfg.linear.clone()
        };
        let trained = train_linear(&x, d, &y, &lin_cfg)?;
        let mut counts = ConfusionCounts::default();
        for &i in held_out {
            counts.add(&linear_confusion(model, layer, &trained.model, &pairs[i])?);
        }
        let aa = metrics::metrics(&counts).average_accuracy;
        if aa.is_none() {
            log::warn!("layer {layer}, fold {f}: no changed pixels held out; fold excluded");
        }
        fold_aa.push(aa);
    }
    let defined: Vec<f64> = fold_aa.iter().flatten().copied().collect();
    let mean_aa = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(CvResult {
        layer,
        flagged: defined.len() < fold_aa.len(),
        fold_aa,
        mean_aa,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consecutive_epoch_rule() {
        assert_eq!(stopping_epoch(&[1.0, 0.95, 0.945], 0.01), 3);
        assert_eq!(stopping_epoch(&[1.0, 0.9, 0.8, 0.7], 0.01), 4);
        assert_eq!(stopping_epoch(&[1.0, 1.2], 0.01), 2);
        assert!(improved_enough(1.0, 0.99, 0.01));
        assert!(!improved_enough(1.0, 0.991, 0.01));
    }

    #[test]
    fn weight_ratio_on_imbalanced_labels() {
        let mut y = vec![0u8; 90];
        y.extend(vec![1u8; 10]);
        let w = class_weights(&y).unwrap();
        assert!((w[1] / w[0] - 9.0).abs() < 1e-12);
        assert!((0.5 * (w[0] + w[1]) - 1.0).abs() < 1e-12);
        assert!(class_weights(&[1, 1]).is_err());
    }

    #[test]
    fn separable_toy_features_reach_full_accuracy() {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..200 {
            let t = i as f32 / 200.0;
            let label = (i % 3 == 0) as u8;
            let s = if label == 1 { 1.0 } else { -1.0 };
            x.extend([s * (0.5 + t), t - 0.5]);
            y.push(label);
        }
        let out = train_linear(&x, 2, &y, &LinearTrainConfig { lr: 1e-2, ..Default::default() }).unwrap();
        let acc = x
            .chunks(2)
            .zip(&y)
            .filter(|(r, &l)| (out.model.predict_proba(r) > 0.5) as u8 == l)
            .count();
        assert_eq!(acc, 200);
    }

    #[test]
    fn single_class_is_rejected() {
        let x = vec![0.0f32; 20];
        assert!(matches!(
            train_linear(&x, 2, &[0; 10], &LinearTrainConfig::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn folds_partition() {
        let p = FoldPlan::new(12, 3).unwrap();
        assert_eq!(p.folds.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 4]);
        p.validate(12).unwrap();
        assert_eq!(p.train_indices(1), vec![0, 1, 2, 3, 8, 9, 10, 11]);
        let q = FoldPlan::new(7, 3).unwrap();
        assert_eq!(q.folds.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 2, 2]);
        assert!(FoldPlan::new(2, 3).is_err());
        let bad = FoldPlan { folds: vec![vec![0, 1], vec![1, 2]] };
        assert!(bad.validate(3).is_err());
    }
}
