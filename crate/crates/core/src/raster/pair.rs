use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean and standard deviation of one band.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub mean: f64,
    pub std: f64,
}

/// Statistics removed by [`normalize_pair`], kept for reproducibility.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub t1: Vec<BandStats>,
    pub t2: Vec<BandStats>,
    /// One message per zero-variance band that was only mean-centred.
    pub warnings: Vec<String>,
}

/// Co-registered image pair with optional dense change labels (1 = changed).
#[derive(Clone, Debug, PartialEq)]
pub struct RasterPair {
    pub id: String,
    pub t1: Tensor,
    pub t2: Tensor,
    pub labels: Option<Tensor>,
    pub normalization: Option<Normalization>,
}

impl RasterPair {
    pub fn new(id: impl Into<String>, t1: Tensor, t2: Tensor, labels: Option<Tensor>) -> Result<Self> {
        let (_, h, w) = t1.chw()?;
        if t1.shape() != t2.shape() {
            return Err(Error::shape(format!(
                "pair images differ in shape: {:?} vs {:?}",
                t1.shape(),
                t2.shape()
            )));
        }
        if let Some(l) = &labels {
            if l.shape() != [1, h, w] {
                return Err(Error::shape(format!(
                    "labels {:?} do not match image size {h}x{w}",
                    l.shape()
                )));
            }
            if l.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::data("labels must be 0 or 1"));
            }
        }
        Ok(RasterPair {
            id: id.into(),
            t1,
            t2,
            labels,
            normalization: None,
        })
    }

    pub fn bands(&self) -> usize {
        self.t1.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.t1.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.t1.shape()[2]
    }

    /// Image for acquisition time 1 or 2.
    pub fn image(&self, time: u8) -> &Tensor {
        if time == 1 {
            &self.t1
        } else {
            &self.t2
        }
    }

    pub fn require_labels(&self) -> Result<&Tensor> {
        self.labels
            .as_ref()
            .ok_or_else(|| Error::data(format!("pair {} has no change labels", self.id)))
    }
}

fn standardize(t: &Tensor, warnings: &mut Vec<String>, id: &str, time: u8) -> Result<(Tensor, Vec<BandStats>)> {
    let (c, h, w) = t.chw()?;
    let hw = h * w;
    let mut out = t.data().to_vec();
    let mut stats = Vec::with_capacity(c);
    for b in 0..c {
        let band = &mut out[b * hw..(b + 1) * hw];
        let mean = band.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
        let var = band.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / hw as f64;
        let mut std = var.sqrt();
        if !(std > 1e-12) {
            let msg = format!("pair {id}, t{time}, band {b}: zero variance, std left at 1");
            log::warn!("{msg}");
            warnings.push(msg);
            std = 1.0;
        }
        band.iter_mut()
            .for_each(|v| *v = ((*v as f64 - mean) / std) as f32);
        stats.push(BandStats { mean, std });
    }
    Ok((Tensor::new(t.shape(), out)?, stats))
}

/// Standardizes every band of each image to zero mean and unit deviation.
pub fn normalize_pair(pair: &RasterPair) -> Result<RasterPair> {
    let mut warnings = Vec::new();
    let (t1, s1) = standardize(&pair.t1, &mut warnings, &pair.id, 1)?;
    let (t2, s2) = standardize(&pair.t2, &mut warnings, &pair.id, 2)?;
    Ok(RasterPair {
        id: pair.id.clone(),
        t1,
        t2,
        labels: pair.labels.clone(),
        normalization: Some(Normalization {
            t1: s1,
            t2: s2,
            warnings,
        }),
    })
}

/// Medians of the per-pixel spectral distance between dates, outside and inside
/// the change mask. `None` when either region is empty.
pub fn change_contrast(pair: &RasterPair) -> Result<Option<(f64, f64)>> {
    let labels = pair.require_labels()?;
    let (c, h, w) = pair.t1.chw()?;
    let hw = h * w;
    let (a, b) = (pair.t1.data(), pair.t2.data());
    let mut inside = Vec::new();
    let mut outside = Vec::new();
    for p in 0..hw {
        let d: f64 = (0..c)
            .map(|ch| (a[ch * hw + p] as f64 - b[ch * hw + p] as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        if labels.data()[p] > 0.5 {
            inside.push(d);
        } else {
            outside.push(d);
        }
    }
    if inside.is_empty() || outside.is_empty() {
        return Ok(None);
    }
    Ok(Some((median(&mut outside), median(&mut inside))))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
