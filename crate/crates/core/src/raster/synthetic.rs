//! Procedural multitemporal scenes with known change masks.
//!
//! The first date is a smooth multiband value-noise texture: one large-scale
//! field per band plus finer fractal detail partly shared across bands. The
//! second date applies a per-band gain and bias to it, both dates receive
//! bounded i.i.d. sensor noise, and a number of rectangular or elliptical blobs
//! get fresh band values in the second date. The blob union is the label map.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::pair::RasterPair;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// Lattice spacing in pixels of the large-scale field.
    pub texture_scale: usize,
    /// Weight of the fine fractal detail relative to the large-scale field.
    pub detail_amplitude: f32,
    pub gain_range: (f32, f32),
    pub bias_range: (f32, f32),
    /// Half-width of the uniform sensor noise added to each date.
    pub noise_amplitude: f32,
    pub change_blobs: usize,
    /// Inclusive side-length range of change blobs.
    pub blob_size: (usize, usize),
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            height: 600,
            width: 600,
            bands: 13,
            texture_scale: 48,
            detail_amplitude: 0.3,
            gain_range: (0.8, 1.2),
            bias_range: (-0.1, 0.1),
            noise_amplitude: 0.02,
            change_blobs: 6,
            blob_size: (12, 40),
            seed: 0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.bands == 0 {
            return Err(Error::config("scene size and band count must be positive"));
        }
        if self.texture_scale == 0 {
            return Err(Error::config("texture_scale must be positive"));
        }
        let (lo, hi) = self.blob_size;
        if self.change_blobs > 0 && (lo == 0 || lo > hi || hi > self.height || hi > self.width) {
            return Err(Error::config(format!(
                "blob size range {lo}..={hi} does not fit a {}x{} scene",
                self.height, self.width
            )));
        }
        if self.change_blobs * hi * hi > self.height * self.width {
            return Err(Error::config(format!(
                "change budget of {} blobs up to {hi}x{hi} exceeds the {}x{} scene",
                self.change_blobs, self.height, self.width
            )));
        }
        if self.gain_range.0 > self.gain_range.1
            || self.bias_range.0 > self.bias_range.1
            || self.noise_amplitude < 0.0
            || self.detail_amplitude < 0.0
        {
            return Err(Error::config("invalid radiometric ranges"));
        }
        Ok(())
    }
}

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinear value noise with smoothstep easing on a random lattice of the given spacing.
fn value_noise(h: usize, w: usize, scale: usize, rng: &mut Rng) -> Vec<f32> {
    let scale = scale.max(1);
    let (gh, gw) = (h / scale + 2, w / scale + 2);
    let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.random::<f32>()).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f32 / scale as f32;
        let y0 = fy.floor() as usize;
        let sy = smoothstep(fy - y0 as f32);
        for x in 0..w {
            let fx = x as f32 / scale as f32;
            let x0 = fx.floor() as usize;
            let sx = smoothstep(fx - x0 as f32);
            let a = lattice[y0 * gw + x0];
            let b = lattice[y0 * gw + x0 + 1];
            let c = lattice[(y0 + 1) * gw + x0];
            let d = lattice[(y0 + 1) * gw + x0 + 1];
            let top = a + (b - a) * sx;
            let bot = c + (d - c) * sx;
            out.push(top + (bot - top) * sy);
        }
    }
    out
}

/// Four octaves starting at `scale`, normalized back to roughly [0, 1].
fn fractal(h: usize, w: usize, scale: usize, rng: &mut Rng) -> Vec<f32> {
    let mut acc = vec![0.0f32; h * w];
    let mut amp = 1.0f32;
    let mut total = 0.0f32;
    for octave in 0..4 {
        let layer = value_noise(h, w, scale >> octave, rng);
        acc.iter_mut().zip(&layer).for_each(|(a, v)| *a += amp * v);
        total += amp;
        amp *= 0.5;
    }
    acc.iter_mut().for_each(|a| *a /= total);
    acc
}

fn uniform(rng: &mut Rng, (lo, hi): (f32, f32)) -> f32 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Generates one labelled pair; a pure function of `spec`.
pub fn generate_synthetic_pair(spec: &SyntheticSceneSpec, id: impl Into<String>) -> Result<RasterPair> {
    spec.validate()?;
    let (h, w, bands) = (spec.height, spec.width, spec.bands);
    let hw = h * w;
    let mut rng = rng::substream(spec.seed, rng::streams::SCENE);

    let detail_scale = (spec.texture_scale / 3).max(1);
    let shared = fractal(h, w, detail_scale, &mut rng);
    let mut t1 = Vec::with_capacity(bands * hw);
    for _ in 0..bands {
        let base = value_noise(h, w, spec.texture_scale, &mut rng);
        let own = fractal(h, w, detail_scale, &mut rng);
        t1.extend(
            base.iter()
                .zip(&own)
                .zip(&shared)
                .map(|((b, o), s)| b + spec.detail_amplitude * 0.5 * (o + s)),
        );
    }

    let gains: Vec<f32> = (0..bands).map(|_| uniform(&mut rng, spec.gain_range)).collect();
    let biases: Vec<f32> = (0..bands).map(|_| uniform(&mut rng, spec.bias_range)).collect();
    let a = spec.noise_amplitude;
    let noise = |rng: &mut Rng| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };

    let mut t2 = Vec::with_capacity(bands * hw);
    for b in 0..bands {
        for p in 0..hw {
            t2.push(gains[b] * t1[b * hw + p] + biases[b] + noise(&mut rng));
        }
    }
    for v in t1.iter_mut() {
        *v += noise(&mut rng);
    }

    let mut labels = vec![0.0f32; hw];
    let (lo, hi) = spec.blob_size;
    for _ in 0..spec.change_blobs {
        let bh = rng.random_range(lo..=hi);
        let bw = rng.random_range(lo..=hi);
        let top = rng.random_range(0..=h - bh);
        let left = rng.random_range(0..=w - bw);
        let ellipse = rng.random_bool(0.5);
        let values: Vec<f32> = (0..bands).map(|_| rng.random::<f32>()).collect();
        let (cy, cx) = (top as f32 + (bh as f32 - 1.0) / 2.0, left as f32 + (bw as f32 - 1.0) / 2.0);
        let (ry, rx) = (bh as f32 / 2.0, bw as f32 / 2.0);
        for y in top..top + bh {
            for x in left..left + bw {
                if ellipse {
                    let dy = (y as f32 - cy) / ry;
                    let dx = (x as f32 - cx) / rx;
                    if dy * dy + dx * dx > 1.0 {
                        continue;
                    }
                }
                let p = y * w + x;
                labels[p] = 1.0;
                for b in 0..bands {
                    t2[b * hw + p] = gains[b] * values[b] + biases[b] + noise(&mut rng);
                }
            }
        }
    }

    RasterPair::new(
        id,
        Tensor::new(&[bands, h, w], t1)?,
        Tensor::new(&[bands, h, w], t2)?,
        Some(Tensor::new(&[1, h, w], labels)?),
    )
}
