//! Patch sampling for the pretext tasks and for the labelled linear stage.
//!
//! An overlapping pair shares a rectangle up to an offset drawn uniformly from
//! [-P/2, P/2]^2, so the two squares always share at least a quarter of their
//! area. A disjoint pair is rejection-sampled until the squares do not touch.
//! Every patch independently comes from t1 or t2 with equal probability.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterPair;
use crate::rng::Rng;
use crate::tensor::Tensor;

const MAX_TRIES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub patch_size: usize,
    pub pairs_per_image: usize,
    pub seed: u64,
    pub augmentation_enabled: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            patch_size: 64,
            pairs_per_image: 5,
            seed: 0,
            augmentation_enabled: true,
        }
    }
}

impl SamplerConfig {
    /// Checks the patch size against an `h x w` image.
    pub fn validate_for(&self, h: usize, w: usize) -> Result<()> {
        if self.patch_size == 0 || self.pairs_per_image == 0 {
            return Err(Error::config("patch_size and pairs_per_image must be positive"));
        }
        if 2 * self.patch_size > h.min(w) {
            return Err(Error::config(format!(
                "patch size {} exceeds half of the {h}x{w} image",
                self.patch_size
            )));
        }
        Ok(())
    }
}

/// Square source window `[top, top+size) x [left, left+size)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl Rect {
    pub fn intersection_area(&self, other: &Rect) -> usize {
        let span = |a: usize, b: usize| {
            let lo = a.max(b);
            let hi = (a + self.size).min(b + other.size);
            hi.saturating_sub(lo)
        };
        span(self.top, other.top) * span(self.left, other.left)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub rect: Rect,
    /// Acquisition the pixels came from: 1 or 2.
    pub time: u8,
}

/// One element of the dihedral group of the square: a horizontal flip (when
/// `flip`) followed by `rot` counter-clockwise quarter turns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct D4 {
    pub rot: u8,
    pub flip: bool,
}

impl D4 {
    pub const IDENTITY: D4 = D4 { rot: 0, flip: false };

    pub fn all() -> [D4; 8] {
        let mut out = [D4::IDENTITY; 8];
        for (i, e) in out.iter_mut().enumerate() {
            *e = D4 {
                rot: (i % 4) as u8,
                flip: i >= 4,
            };
        }
        out
    }

    pub fn random(rng: &mut Rng) -> D4 {
        D4::all()[rng.random_range(0..8)]
    }

    pub fn inverse(self) -> D4 {
        if self.flip {
            // Reflections are involutions.
            self
        } else {
            D4 {
                rot: (4 - self.rot % 4) % 4,
                flip: false,
            }
        }
    }

    /// Applies the transform to every channel of a square `[C, P, P]` tensor.
    pub fn apply(self, t: &Tensor) -> Result<Tensor> {
        let (c, h, w) = t.chw()?;
        if h != w {
            return Err(Error::shape(format!("augmentation needs square patches, got {h}x{w}")));
        }
        let p = h;
        let src = t.data();
        let mut out = vec![0.0f32; src.len()];
        for ch in 0..c {
            let plane = &src[ch * p * p..(ch + 1) * p * p];
            let dst = &mut out[ch * p * p..(ch + 1) * p * p];
            for y in 0..p {
                for x in 0..p {
                    // Walk the quarter turns backwards to find the source pixel.
                    let (mut sy, mut sx) = (y, x);
                    for _ in 0..self.rot % 4 {
                        (sy, sx) = (sx, p - 1 - sy);
                    }
                    if self.flip {
                        sx = p - 1 - sx;
                    }
                    dst[y * p + x] = plane[sy * p + sx];
                }
            }
        }
        Tensor::new(t.shape(), out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchExample {
    /// Two patches for the overlap task, three for triplets.
    pub patches: Vec<Tensor>,
    /// 0 = overlapping, 1 = disjoint; `None` for triplets.
    pub pseudo_label: Option<u8>,
    pub geometry: Vec<PatchGeometry>,
    pub source_pair_id: String,
    pub transform: D4,
}

/// Co-located patches of both dates with their change mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPatch {
    pub rect: Rect,
    pub t1: Tensor,
    pub t2: Tensor,
    pub mask: Tensor,
}

fn random_rect(rng: &mut Rng, h: usize, w: usize, p: usize) -> Rect {
    Rect {
        top: rng.random_range(0..=h - p),
        left: rng.random_range(0..=w - p),
        size: p,
    }
}

fn overlapping_rect(rng: &mut Rng, anchor: Rect, h: usize, w: usize) -> Result<Rect> {
    let p = anchor.size as i64;
    let half = p / 2;
    for _ in 0..MAX_TRIES {
        let top = anchor.top as i64 + rng.random_range(-half..=half);
        let left = anchor.left as i64 + rng.random_range(-half..=half);
        if top >= 0 && left >= 0 && top + p <= h as i64 && left + p <= w as i64 {
            return Ok(Rect {
                top: top as usize,
                left: left as usize,
                size: anchor.size,
            });
        }
    }
    Err(Error::Internal("no in-bounds overlapping patch after 1000 tries".into()))
}

fn disjoint_rect(rng: &mut Rng, anchor: Rect, h: usize, w: usize) -> Result<Rect> {
    for _ in 0..MAX_TRIES {
        let r = random_rect(rng, h, w, anchor.size);
        if r.intersection_area(&anchor) == 0 {
            return Ok(r);
        }
    }
    Err(Error::Internal("no disjoint patch after 1000 tries".into()))
}

fn take(pair: &RasterPair, rect: Rect, rng: &mut Rng) -> Result<(Tensor, PatchGeometry)> {
    let time = if rng.random_bool(0.5) { 1 } else { 2 };
    let patch = pair.image(time).crop(rect.top, rect.left, rect.size, rect.size)?;
    Ok((patch, PatchGeometry { rect, time }))
}

/// Draws one Task-1 example with the requested pseudo-label.
pub fn sample_pair(pair: &RasterPair, cfg: &SamplerConfig, label: u8, rng: &mut Rng) -> Result<PatchExample> {
    let (h, w) = (pair.height(), pair.width());
    cfg.validate_for(h, w)?;
    let a = random_rect(rng, h, w, cfg.patch_size);
    let b = match label {
        0 => overlapping_rect(rng, a, h, w)?,
        1 => disjoint_rect(rng, a, h, w)?,
        _ => return Err(Error::Contract(format!("pseudo-label must be 0 or 1, got {label}"))),
    };
    let (p1, g1) = take(pair, a, rng)?;
    let (p2, g2) = take(pair, b, rng)?;
    Ok(PatchExample {
        patches: vec![p1, p2],
        pseudo_label: Some(label),
        geometry: vec![g1, g2],
        source_pair_id: pair.id.clone(),
        transform: D4::IDENTITY,
    })
}

/// Draws one Task-2 triplet: p2 overlaps p1, p3 is disjoint from it.
pub fn sample_triplet(pair: &RasterPair, cfg: &SamplerConfig, rng: &mut Rng) -> Result<PatchExample> {
    let (h, w) = (pair.height(), pair.width());
    cfg.validate_for(h, w)?;
    let a = random_rect(rng, h, w, cfg.patch_size);
    let b = overlapping_rect(rng, a, h, w)?;
    let c = disjoint_rect(rng, a, h, w)?;
    let mut patches = Vec::with_capacity(3);
    let mut geometry = Vec::with_capacity(3);
    for r in [a, b, c] {
        let (p, g) = take(pair, r, rng)?;
        patches.push(p);
        geometry.push(g);
    }
    Ok(PatchExample {
        patches,
        pseudo_label: None,
        geometry,
        source_pair_id: pair.id.clone(),
        transform: D4::IDENTITY,
    })
}

/// `count` co-located patch pairs with their label crops, in draw order.
pub fn sample_labeled_patches(pair: &RasterPair, count: usize, p: usize, rng: &mut Rng) -> Result<Vec<LabeledPatch>> {
    let labels = pair.require_labels()?;
    let (h, w) = (pair.height(), pair.width());
    if p == 0 || p > h || p > w {
        return Err(Error::config(format!("patch size {p} does not fit a {h}x{w} image")));
    }
    (0..count)
        .map(|_| {
            let rect = random_rect(rng, h, w, p);
            Ok(LabeledPatch {
                rect,
                t1: pair.t1.crop(rect.top, rect.left, p, p)?,
                t2: pair.t2.crop(rect.top, rect.left, p, p)?,
                mask: labels.crop(rect.top, rect.left, p, p)?,
            })
        })
        .collect()
}

/// Applies one random D4 element identically to every patch of the example.
pub fn augment(example: &PatchExample, rng: &mut Rng) -> Result<PatchExample> {
    let t = D4::random(rng);
    apply_transform(example, t)
}

pub fn apply_transform(example: &PatchExample, t: D4) -> Result<PatchExample> {
    let patches = example.patches.iter().map(|p| t.apply(p)).collect::<Result<_>>()?;
    let prev = example.transform;
    Ok(PatchExample {
        patches,
        transform: if prev == D4::IDENTITY { t } else { prev },
        ..example.clone()
    })
}

/// One Task-1 epoch: `pairs_per_image` examples per image, exactly half of
/// each class, in shuffled order.
pub fn overlap_epoch(images: &[RasterPair], cfg: &SamplerConfig, rng: &mut Rng) -> Result<Vec<PatchExample>> {
    let total = images.len() * cfg.pairs_per_image;
    if !total.is_multiple_of(2) {
        return Err(Error::config(format!(
            "an epoch of {total} pairs cannot be split evenly between the two classes"
        )));
    }
    let mut labels: Vec<u8> = (0..total).map(|i| (i >= total / 2) as u8).collect();
    labels.shuffle(rng);
    let mut out = Vec::with_capacity(total);
    for (i, pair) in images.iter().enumerate() {
        for j in 0..cfg.pairs_per_image {
            let mut ex = sample_pair(pair, cfg, labels[i * cfg.pairs_per_image + j], rng)?;
            if cfg.augmentation_enabled {
                ex = augment(&ex, rng)?;
            }
            out.push(ex);
        }
    }
    out.shuffle(rng);
    Ok(out)
}

/// One Task-2 epoch of `pairs_per_image` triplets per image, shuffled.
pub fn triplet_epoch(images: &[RasterPair], cfg: &SamplerConfig, rng: &mut Rng) -> Result<Vec<PatchExample>> {
    let mut out = Vec::with_capacity(images.len() * cfg.pairs_per_image);
    for pair in images {
        for _ in 0..cfg.pairs_per_image {
            let mut ex = sample_triplet(pair, cfg, rng)?;
            if cfg.augmentation_enabled {
                ex = augment(&ex, rng)?;
            }
            out.push(ex);
        }
    }
    out.shuffle(rng);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn scene(h: usize, w: usize) -> RasterPair {
        let t1 = Tensor::from_fn(&[2, h, w], |i| i as f32);
        let t2 = Tensor::from_fn(&[2, h, w], |i| -(i as f32));
        let labels = Tensor::from_fn(&[1, h, w], |i| (i / w + i % w).is_multiple_of(3) as u8 as f32);
        RasterPair::new("s", t1, t2, Some(labels)).unwrap()
    }

    fn cfg(p: usize) -> SamplerConfig {
        SamplerConfig {
            patch_size: p,
            pairs_per_image: 4,
            ..Default::default()
        }
    }

    #[test]
    fn intersection_geometry() {
        let a = Rect { top: 0, left: 0, size: 4 };
        assert_eq!(a.intersection_area(&a), 16);
        assert_eq!(a.intersection_area(&Rect { top: 2, left: 2, size: 4 }), 4);
        assert_eq!(a.intersection_area(&Rect { top: 4, left: 0, size: 4 }), 0);
    }

    #[test]
    fn zero_offset_same_time_gives_identical_patches() {
        let pair = scene(32, 32);
        let mut r = rng::substream(1, "t");
        let mut seen = false;
        for _ in 0..5000 {
            let ex = sample_pair(&pair, &cfg(8), 0, &mut r).unwrap();
            let (g1, g2) = (ex.geometry[0], ex.geometry[1]);
            if g1.rect == g2.rect && g1.time == g2.time {
                assert_eq!(ex.patches[0], ex.patches[1]);
                seen = true;
            }
        }
        assert!(seen);
    }

    #[test]
    fn disjoint_pairs_do_not_intersect() {
        let pair = scene(40, 48);
        let mut r = rng::substream(2, "t");
        for _ in 0..2000 {
            let ex = sample_pair(&pair, &cfg(12), 1, &mut r).unwrap();
            assert_eq!(ex.geometry[0].rect.intersection_area(&ex.geometry[1].rect), 0);
            assert_eq!(ex.pseudo_label, Some(1));
        }
    }

    #[test]
    fn patches_are_copies_of_their_sources() {
        let pair = scene(20, 20);
        let mut r = rng::substream(3, "t");
        let ex = sample_triplet(&pair, &cfg(6), &mut r).unwrap();
        for (p, g) in ex.patches.iter().zip(&ex.geometry) {
            let direct = pair.image(g.time).crop(g.rect.top, g.rect.left, 6, 6).unwrap();
            assert_eq!(p, &direct);
        }
    }

    #[test]
    fn oversized_patch_is_a_config_error() {
        let pair = scene(20, 30);
        let mut r = rng::substream(4, "t");
        assert!(matches!(sample_pair(&pair, &cfg(11), 0, &mut r), Err(Error::Config(_))));
        assert!(sample_pair(&pair, &cfg(10), 1, &mut r).is_ok());
    }

    #[test]
    fn d4_inverse_round_trip() {
        let t = Tensor::from_fn(&[2, 5, 5], |i| i as f32);
        for g in D4::all() {
            assert_eq!(g.inverse().apply(&g.apply(&t).unwrap()).unwrap(), t);
        }
        assert_eq!(D4::IDENTITY.apply(&t).unwrap(), t);
        // Quarter turn counter-clockwise moves the top-right corner to the top-left.
        let q = D4 { rot: 1, flip: false }.apply(&t).unwrap();
        assert_eq!(q.data()[0], t.data()[4]);
    }

    #[test]
    fn d4_elements_are_distinct() {
        let t = Tensor::from_fn(&[1, 3, 3], |i| i as f32);
        let images: Vec<Tensor> = D4::all().iter().map(|g| g.apply(&t).unwrap()).collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(images[i], images[j], "{i} vs {j}");
            }
        }
    }

    #[test]
    fn epochs_are_balanced() {
        let images = vec![scene(32, 32), scene(32, 32), scene(32, 32)];
        let mut r = rng::substream(5, "t");
        let ex = overlap_epoch(&images, &cfg(8), &mut r).unwrap();
        assert_eq!(ex.len(), 12);
        assert_eq!(ex.iter().filter(|e| e.pseudo_label == Some(0)).count(), 6);
        let odd = SamplerConfig { pairs_per_image: 3, ..cfg(8) };
        assert!(overlap_epoch(&images, &odd, &mut r).is_err());
    }

    #[test]
    fn labelled_patches_match_direct_indexing() {
        let pair = scene(16, 24);
        let mut r = rng::substream(6, "t");
        let patches = sample_labeled_patches(&pair, 50, 16, &mut r).unwrap();
        let labels = pair.labels.as_ref().unwrap();
        for lp in &patches {
            assert_eq!(lp.rect.top, 0);
            assert!(lp.rect.left + 16 <= 24);
            for y in 0..16 {
                for x in 0..16 {
                    let direct = labels.data()[(lp.rect.top + y) * 24 + lp.rect.left + x];
                    assert_eq!(lp.mask.data()[y * 16 + x], direct);
                }
            }
        }
        let unlabeled = RasterPair::new("u", pair.t1.clone(), pair.t2.clone(), None).unwrap();
        assert!(sample_labeled_patches(&unlabeled, 1, 4, &mut r).is_err());
    }
}
