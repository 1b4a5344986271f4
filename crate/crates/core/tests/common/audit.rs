//! Geometry audit of the Task-1 sampler.

use sscd::raster::RasterPair;
use sscd::rng::substream;
use sscd::sampler::{overlap_epoch, SamplerConfig};
use sscd::Tensor;

#[derive(Debug)]
pub struct Audit {
    pub samples: usize,
    pub overlapping: usize,
    pub disjoint: usize,
    /// Smallest intersection among label-0 pairs, in pixels.
    pub min_overlap: usize,
    /// Largest intersection among label-1 pairs, in pixels.
    pub max_disjoint: usize,
    /// Patches whose pixels differ from their recorded source window.
    pub content_mismatches: usize,
}

impl Audit {
    pub fn passed(&self, p: usize) -> bool {
        self.overlapping == self.disjoint
            && self.overlapping + self.disjoint == self.samples
            && 4 * self.min_overlap >= p * p
            && self.max_disjoint == 0
            && self.content_mismatches == 0
    }
}

fn scene(id: usize, size: usize) -> RasterPair {
    let t1 = Tensor::from_fn(&[2, size, size], |i| (i * 7 + id) as f32);
    let t2 = Tensor::from_fn(&[2, size, size], |i| -((i * 3 + id) as f32));
    RasterPair::new(format!("s{id}"), t1, t2, None).unwrap()
}

/// Draws `images * per_image` augmented Task-1 examples at patch size `p`.
pub fn sampler_audit(seed: u64, p: usize, images: usize, per_image: usize) -> Audit {
    let scenes: Vec<RasterPair> = (0..images).map(|i| scene(i, 4 * p)).collect();
    let cfg = SamplerConfig {
        patch_size: p,
        pairs_per_image: per_image,
        seed,
        augmentation_enabled: true,
    };
    let epoch = overlap_epoch(&scenes, &cfg, &mut substream(seed, "sampler-audit")).unwrap();
    let mut a = Audit {
        samples: epoch.len(),
        overlapping: 0,
        disjoint: 0,
        min_overlap: usize::MAX,
        max_disjoint: 0,
        content_mismatches: 0,
    };
    for ex in &epoch {
        let (g1, g2) = (ex.geometry[0], ex.geometry[1]);
        let inter = g1.rect.intersection_area(&g2.rect);
        match ex.pseudo_label {
            Some(0) => {
                a.overlapping += 1;
                a.min_overlap = a.min_overlap.min(inter);
            }
            Some(1) => {
                a.disjoint += 1;
                a.max_disjoint = a.max_disjoint.max(inter);
            }
            other => panic!("unexpected label {other:?}"),
        }
        let src = scenes.iter().find(|s| s.id == ex.source_pair_id).unwrap();
        for (patch, g) in ex.patches.iter().zip(&ex.geometry) {
            let crop = src.image(g.time).crop(g.rect.top, g.rect.left, p, p).unwrap();
            if ex.transform.inverse().apply(patch).unwrap() != crop {
                a.content_mismatches += 1;
            }
        }
    }
    a
}
