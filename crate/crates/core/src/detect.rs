//! Change maps from per-pixel features: CVA magnitude with Otsu or triangle
//! thresholding, or the supervised linear classifier with an F1-tuned cut.
//!
//! Histogram thresholds work on min-max normalized scores s' in [0, 1] with 256
//! bins. Bin 0 holds [0, 1/256] and bin i > 0 holds (i/256, (i+1)/256], so
//! "bin >= k" is the same as "s' > k/256" and a binary map is always exactly
//! `score > threshold`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionCounts};
use crate::nn::PretextModel;
use crate::raster::RasterPair;
use crate::tensor::Tensor;
use crate::trainer::LinearClassifier;

pub const BINS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMethod {
    Otsu,
    Triangle,
    F1Tuned,
}

impl fmt::Display for ThresholdMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThresholdMethod::Otsu => "otsu",
            ThresholdMethod::Triangle => "triangle",
            ThresholdMethod::F1Tuned => "f1-tuned",
        })
    }
}

/// Per-pixel CVA magnitude.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangeMagnitudeMap {
    /// `[1, H, W]`, finite and non-negative.
    pub rho: Tensor,
    pub layer: usize,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    /// In normalized score units for histogram methods, raw score units for F1 tuning.
    pub threshold: f64,
    pub method: ThresholdMethod,
    pub histogram: Vec<u64>,
    /// Raw score range the histogram spans.
    pub range: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChangeMap {
    /// `[1, H, W]` of 0/1, equal to `score > threshold`.
    pub binary: Tensor,
    /// `[1, H, W]` continuous map the decision was made on.
    pub score: Tensor,
    pub classifier: String,
    pub threshold: f64,
    /// Set when the score map was constant and no threshold could be placed.
    pub no_change: bool,
}

impl ChangeMap {
    fn from_scores(score: Tensor, threshold: f64, classifier: String) -> Result<Self> {
        let binary = score
            .data()
            .iter()
            .map(|&s| (s as f64 > threshold) as u8 as f32)
            .collect();
        Ok(ChangeMap {
            binary: Tensor::new(score.shape(), binary)?,
            score,
            classifier,
            threshold,
            no_change: false,
        })
    }
}

/// Euclidean norm of the per-pixel feature difference.
pub fn cva_magnitude(f1: &Tensor, f2: &Tensor) -> Result<Tensor> {
    if f1.shape() != f2.shape() {
        return Err(Error::shape(format!(
            "feature maps differ: {:?} vs {:?}",
            f1.shape(),
            f2.shape()
        )));
    }
    let (c, h, w) = f1.chw()?;
    let hw = h * w;
    let mut acc = vec![0.0f64; hw];
    for ch in 0..c {
        let (a, b) = (&f1.data()[ch * hw..(ch + 1) * hw], &f2.data()[ch * hw..(ch + 1) * hw]);
        for ((s, x), y) in acc.iter_mut().zip(a).zip(b) {
            let d = (*x - *y) as f64;
            *s += d * d;
        }
    }
    let rho = Tensor::new(&[1, h, w], acc.into_iter().map(|s| s.sqrt() as f32).collect())?;
    if !rho.is_finite() {
        return Err(Error::NonFinite("CVA magnitude".into()));
    }
    Ok(rho)
}

fn finite_range(scores: &[f32]) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &s in scores {
        if !s.is_finite() {
            return Err(Error::NonFinite("score map".into()));
        }
        lo = lo.min(s as f64);
        hi = hi.max(s as f64);
    }
    if !(hi > lo) {
        return Err(Error::Degenerate(
            "score map is constant; no threshold can be placed".into(),
        ));
    }
    Ok((lo, hi))
}

/// Min-max normalized scores in [0, 1], computed in f64 and stored as f32.
///
/// Histograms and binary decisions both read these stored values, so a map
/// is reproducible from its saved score alone.
pub fn normalize_scores(scores: &[f32]) -> Result<(Vec<f32>, (f64, f64))> {
    let (lo, hi) = finite_range(scores)?;
    let span = hi - lo;
    Ok((scores.iter().map(|&s| ((s as f64 - lo) / span) as f32).collect(), (lo, hi)))
}

pub fn bin_of(normalized: f64) -> usize {
    let b = (normalized * BINS as f64).ceil() as i64 - 1;
    b.clamp(0, BINS as i64 - 1) as usize
}

/// 256-bin histogram of min-max normalized scores.
pub fn histogram(scores: &[f32]) -> Result<(Vec<u64>, (f64, f64))> {
    let (norm, range) = normalize_scores(scores)?;
    let mut h = vec![0u64; BINS];
    for s in norm {
        h[bin_of(s as f64)] += 1;
    }
    Ok((h, range))
}

/// Bin index k in 1..=255 maximizing between-class variance when bins < k form
/// one class; the first maximum wins.
pub fn otsu_bin(hist: &[u64]) -> usize {
    let total: f64 = hist.iter().map(|&c| c as f64).sum();
    let centre = |i: usize| (i as f64 + 0.5) / hist.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| c as f64 * centre(i)).sum();
    let (mut w0, mut sum0) = (0.0f64, 0.0f64);
    let (mut best_k, mut best) = (1, f64::NEG_INFINITY);
    for k in 1..hist.len() {
        w0 += hist[k - 1] as f64;
        sum0 += hist[k - 1] as f64 * centre(k - 1);
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let var = (w0 / total) * (w1 / total) * (m0 - m1) * (m0 - m1);
        if var > best {
            best = var;
            best_k = k;
        }
    }
    best_k
}

/// Triangle knee bin: the bin farthest from the line joining the histogram
/// peak to the last non-empty bin on the side with longer support (the high
/// side on a tie). Ties go toward the tail.
pub fn triangle_bin(hist: &[u64]) -> usize {
    let n = hist.len();
    let peak = (0..n).fold(0, |b, i| if hist[i] > hist[b] { i } else { b });
    let first = hist.iter().position(|&c| c > 0).unwrap_or(0);
    let last = hist.iter().rposition(|&c| c > 0).unwrap_or(n - 1);
    let right = last - peak >= peak - first;
    let end = if right { last } else { first };
    let (px, py) = (peak as f64, hist[peak] as f64);
    let (ex, ey) = (end as f64, hist[end] as f64);
    let (dx, dy) = (ex - px, ey - py);
    let norm = (dx * dx + dy * dy).sqrt();
    let dist = |i: usize| {
        if norm == 0.0 {
            0.0
        } else {
            (dy * (i as f64 - px) - dx * (hist[i] as f64 - py)).abs() / norm
        }
    };
    let mut best = peak;
    let mut best_d = f64::NEG_INFINITY;
    let mut visit = |i: usize| {
        let d = dist(i);
        // `>=` walking from the peak outward hands ties to the tail.
        if d >= best_d {
            best_d = d;
            best = i;
        }
    };
    if right {
        (peak..=end).for_each(&mut visit);
    } else {
        (end..=peak).rev().for_each(&mut visit);
    }
    best
}

pub fn otsu_threshold(scores: &Tensor) -> Result<ThresholdResult> {
    let (histogram, range) = histogram(scores.data())?;
    let k = otsu_bin(&histogram);
    Ok(ThresholdResult {
        threshold: k as f64 / BINS as f64,
        method: ThresholdMethod::Otsu,
        histogram,
        range,
    })
}

/// Pixels in bins above the knee are changed.
pub fn triangle_threshold(scores: &Tensor) -> Result<ThresholdResult> {
    let (histogram, range) = histogram(scores.data())?;
    let k = triangle_bin(&histogram);
    Ok(ThresholdResult {
        threshold: (k + 1) as f64 / BINS as f64,
        method: ThresholdMethod::Triangle,
        histogram,
        range,
    })
}

/// Threshold among 256 evenly spaced candidates over the observed score
/// range that maximizes F1 of `score > t` against `labels`; the lowest
/// candidate wins ties.
pub fn f1_tuned_threshold(scores: &[f32], labels: &[u8]) -> Result<ThresholdResult> {
    if scores.len() != labels.len() {
        return Err(Error::shape("scores and labels differ in length"));
    }
    let (lo, hi) = finite_range(scores)?;
    let mut best = (lo, f64::NEG_INFINITY);
    let mut sorted: Vec<(f32, bool)> = scores.iter().zip(labels).map(|(&s, &l)| (s, l == 1)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let positives = sorted.iter().filter(|p| p.1).count() as u64;
    // Sweep candidates upward, moving pixels at or below each cut to the negative side.
    let (mut idx, mut tp, mut fp) = (0usize, positives, sorted.len() as u64 - positives);
    for j in 0..BINS {
        let t = lo + (hi - lo) * j as f64 / (BINS - 1) as f64;
        while idx < sorted.len() && sorted[idx].0 as f64 <= t {
            if sorted[idx].1 {
                tp -= 1;
            } else {
                fp -= 1;
            }
            idx += 1;
        }
        let c = ConfusionCounts {
            tp,
            fp,
            tn: 0,
            fn_: positives - tp,
        };
        let f1 = metrics::metrics(&c).f1.unwrap_or(-1.0);
        if f1 > best.1 {
            best = (t, f1);
        }
    }
    let (histogram, _) = histogram(scores)?;
    Ok(ThresholdResult {
        threshold: best.0,
        method: ThresholdMethod::F1Tuned,
        histogram,
        range: (lo, hi),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CvaMethod {
    Otsu,
    Triangle,
}

/// CVA on the layer-`l` features of both dates with a per-pair threshold.
///
/// A constant magnitude map (e.g. identical dates) yields an all-zero map
/// flagged `no_change` instead of an error.
pub fn detect_cva(pair: &RasterPair, model: &PretextModel, layer: usize, method: CvaMethod) -> Result<ChangeMap> {
    let (f1, f2) = model.pair_features(&pair.t1, &pair.t2, layer)?;
    let rho = cva_magnitude(&f1, &f2)?;
    cva_change_map(&rho, method)
}

/// Thresholds a CVA magnitude map; the score is the min-max normalized magnitude.
pub fn cva_change_map(rho: &Tensor, method: CvaMethod) -> Result<ChangeMap> {
    let name = match method {
        CvaMethod::Otsu => "cva-otsu",
        CvaMethod::Triangle => "cva-triangle",
    };
    let t = match method {
        CvaMethod::Otsu => otsu_threshold(rho),
        CvaMethod::Triangle => triangle_threshold(rho),
    };
    let t = match t {
        Ok(t) => t,
        Err(Error::Degenerate(msg)) => {
            log::warn!("no-change scene: {msg}");
            return Ok(ChangeMap {
                binary: Tensor::zeros(rho.shape()),
                score: Tensor::zeros(rho.shape()),
                classifier: name.into(),
                threshold: 1.0,
                no_change: true,
            });
        }
        Err(e) => return Err(e),
    };
    let (norm, _) = normalize_scores(rho.data())?;
    ChangeMap::from_scores(Tensor::new(rho.shape(), norm)?, t.threshold, name.into())
}

/// Linear-classifier change map thresholded at `threshold` on P(changed).
pub fn detect_linear(
    pair: &RasterPair,
    model: &PretextModel,
    layer: usize,
    linear: &LinearClassifier,
    threshold: f64,
) -> Result<ChangeMap> {
    let channels = model.feature_channels(layer)?;
    if channels != linear.feature_dim() {
        return Err(Error::shape(format!(
            "layer {layer} yields {channels} features, linear model expects {}",
            linear.feature_dim()
        )));
    }
    let diff = model.difference_features(&pair.t1, &pair.t2, layer)?;
    let prob = linear.predict_map(&diff)?;
    ChangeMap::from_scores(prob, threshold, "linear".into())
}

/// Binary portable graymap (P5) with values 0 and 255.
pub fn encode_pgm(binary: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = spatial(binary)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(binary.data().iter().map(|&v| if v > 0.5 { 255u8 } else { 0 }));
    Ok(out)
}

/// Reads an 8-bit P5 image as a `[1, H, W]` map of 0/1 (non-zero = 1).
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let (header, pos) = pnm_header(bytes, b"P5")?;
    let [w, h, maxval] = header;
    if maxval != 255 {
        return Err(Error::data(format!("only 8-bit graymaps are supported, maxval {maxval}")));
    }
    let payload = &bytes[pos..];
    if payload.len() != w * h {
        return Err(Error::data(format!(
            "graymap payload has {} bytes, expected {}",
            payload.len(),
            w * h
        )));
    }
    Tensor::new(&[1, h, w], payload.iter().map(|&b| (b != 0) as u8 as f32).collect())
}

fn pnm_header(bytes: &[u8], magic: &[u8]) -> Result<([usize; 3], usize)> {
    if !bytes.starts_with(magic) {
        return Err(Error::data("not a binary portable anymap of the expected kind"));
    }
    let mut pos = magic.len();
    let mut vals = [0usize; 3];
    for v in vals.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *v = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::data("malformed anymap header"))?;
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::data("malformed anymap header"));
    }
    Ok((vals, pos + 1))
}

/// Colour-coded comparison (P6): TP white, FN green, FP magenta, TN black.
pub fn render_comparison(pred: &Tensor, truth: &Tensor) -> Result<Vec<u8>> {
    metrics::confusion(pred, truth)?;
    let (h, w) = spatial(pred)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let rgb: [u8; 3] = match (p == 1.0, t == 1.0) {
            (true, true) => [255, 255, 255],
            (false, true) => [0, 255, 0],
            (true, false) => [255, 0, 255],
            (false, false) => [0, 0, 0],
        };
        out.extend(rgb);
    }
    Ok(out)
}

fn spatial(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [1, h, w] | [h, w] => Ok((*h, *w)),
        s => Err(Error::shape(format!("expected a single-channel map, got {s:?}"))),
    }
}
