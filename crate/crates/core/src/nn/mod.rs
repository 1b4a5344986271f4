//! Pretext-task architectures: a three-layer convolutional branch shared by
//! both inputs of a Siamese pair, the overlap classifier built on top of it,
//! and the triplet embedding model.

mod checkpoint;
mod loss;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_for, save_checkpoint, CheckpointManifest, CheckpointMeta,
    TensorEntry, NORMALIZATION_SCHEME,
};
pub use loss::{bce_loss, triplet_l1_loss, triplet_l1_on_tape};

use std::fmt;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::{Tape, Tensor, Var};

/// Number of convolutional layers in a branch.
pub const DEPTH: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub in_channels: usize,
    pub filters_per_layer: [usize; DEPTH],
    pub kernel_size: usize,
}

impl BranchConfig {
    pub fn new(in_channels: usize) -> Self {
        BranchConfig {
            in_channels,
            filters_per_layer: [32; DEPTH],
            kernel_size: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.filters_per_layer.contains(&0) {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::config(format!(
                "kernel size {} must be odd",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// Channels produced by layer `l` (1-based).
    pub fn channels(&self, layer: usize) -> usize {
        self.filters_per_layer[layer - 1]
    }

    fn layer_shapes(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        let k = self.kernel_size;
        let mut c_in = self.in_channels;
        self.filters_per_layer
            .iter()
            .map(|&c_out| {
                let s = (vec![c_out, c_in, k, k], vec![c_out]);
                c_in = c_out;
                s
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretextTask {
    /// Classify whether two patches overlap.
    Overlap,
    /// Pull overlapping patches together, push disjoint ones apart.
    Triplet,
}

impl fmt::Display for PretextTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PretextTask::Overlap => "overlap",
            PretextTask::Triplet => "triplet",
        })
    }
}

impl std::str::FromStr for PretextTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overlap" => Ok(PretextTask::Overlap),
            "triplet" => Ok(PretextTask::Triplet),
            other => Err(Error::config(format!("unknown pretext task {other:?}"))),
        }
    }
}

/// The shared convolutional branch: three same-padded conv + ReLU layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    config: BranchConfig,
    /// Alternating weight, bias for each layer.
    params: Vec<Tensor>,
}

impl Branch {
    /// He-normal weights, zero biases.
    pub fn init(config: BranchConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::with_capacity(2 * DEPTH);
        for (wshape, bshape) in config.layer_shapes() {
            let fan_in = (wshape[1] * wshape[2] * wshape[3]) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let w = Tensor::from_fn(&wshape, |_| normal.sample(rng) as f32).with_grad();
            params.push(w);
            params.push(Tensor::zeros(&bshape).with_grad());
        }
        Ok(Branch { config, params })
    }

    pub(crate) fn from_params(config: BranchConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let expected: Vec<Vec<usize>> = config
            .layer_shapes()
            .into_iter()
            .flat_map(|(w, b)| [w, b])
            .collect();
        if params.len() != expected.len()
            || params.iter().zip(&expected).any(|(p, e)| p.shape() != e.as_slice())
        {
            return Err(Error::shape("branch parameters do not match the configuration"));
        }
        let params = params.into_iter().map(Tensor::with_grad).collect();
        Ok(Branch { config, params })
    }

    pub fn config(&self) -> &BranchConfig {
        &self.config
    }

    pub fn weight(&self, layer: usize) -> &Tensor {
        &self.params[2 * (layer - 1)]
    }

    pub fn bias(&self, layer: usize) -> &Tensor {
        &self.params[2 * (layer - 1) + 1]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.params[2 * (layer - 1)]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.params[2 * (layer - 1) + 1]
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (c, h, w) = x.chw()?;
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "model expects {} bands, input has {c}",
                self.config.in_channels
            )));
        }
        if h < self.config.kernel_size || w < self.config.kernel_size {
            return Err(Error::shape(format!(
                "input {h}x{w} is smaller than the {0}x{0} kernel",
                self.config.kernel_size
            )));
        }
        Ok(())
    }

    /// Activations of layers `1..=depth` for `image`, without recording a graph.
    pub fn activations(&self, image: &Tensor, depth: usize) -> Result<Vec<Tensor>> {
        self.check_input(image)?;
        let (_, h, w) = image.chw()?;
        let mut out: Vec<Tensor> = Vec::with_capacity(depth);
        for l in 1..=depth.min(DEPTH) {
            let input = out.last().unwrap_or(image);
            let (wt, b) = (self.weight(l), self.bias(l));
            let geom = ConvGeom::new(input.shape(), wt.shape(), b.shape())?;
            let mut y = kernels::conv2d_forward(&geom, input.data(), wt.data(), b.data());
            y.iter_mut().for_each(|v| *v = v.max(0.0));
            let t = Tensor::new(&[geom.c_out, h, w], y)?;
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("activation of layer {l}")));
            }
            out.push(t);
        }
        Ok(out)
    }

    /// Records the branch on `tape` up to `depth` layers.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &[Var], x: Var, depth: usize) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let mut h = x;
        for l in 0..depth.min(DEPTH) {
            let y = tape.conv2d(h, vars[2 * l], vars[2 * l + 1])?;
            h = tape.relu(y);
        }
        Ok(h)
    }
}

/// Siamese overlap classifier.
///
/// Both patches pass through the same branch; the layer-3 maps are fused by
/// signed subtraction, globally average-pooled, rectified by absolute value
/// and fed to a single logistic unit. The output is P(y = 1), i.e. the
/// probability that the patches do *not* overlap.
#[derive(Clone, Debug, PartialEq)]
pub struct SiameseOverlapModel {
    pub branch: Branch,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

impl SiameseOverlapModel {
    /// Random branch, zero head (so an untrained model outputs exactly 0.5).
    pub fn init(config: BranchConfig, rng: &mut Rng) -> Result<Self> {
        let c3 = config.channels(DEPTH);
        Ok(SiameseOverlapModel {
            branch: Branch::init(config, rng)?,
            head_weight: Tensor::zeros(&[1, c3]).with_grad(),
            head_bias: Tensor::zeros(&[1]).with_grad(),
        })
    }

    /// Records the fused map `f3(p1) - f3(p2)` and the head; returns (fusion, probability).
    pub fn forward_tape(&self, tape: &mut Tape, vars: &[Var], p1: Var, p2: Var) -> Result<(Var, Var)> {
        if tape.shape(p1) != tape.shape(p2) {
            return Err(Error::shape(format!(
                "patch shapes differ: {:?} vs {:?}",
                tape.shape(p1),
                tape.shape(p2)
            )));
        }
        let f1 = self.branch.forward_tape(tape, vars, p1, DEPTH)?;
        let f2 = self.branch.forward_tape(tape, vars, p2, DEPTH)?;
        let fused = tape.sub(f1, f2)?;
        let pooled = tape.global_avg_pool(fused)?;
        let rectified = tape.abs(pooled);
        let n = 2 * DEPTH;
        let logit = tape.linear(rectified, vars[n], vars[n + 1])?;
        let prob = tape.sigmoid(logit);
        Ok((fused, prob))
    }
}

/// Triplet embedding model: the branch alone, embedding = flattened layer-3 map.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletEmbeddingModel {
    pub branch: Branch,
}

impl TripletEmbeddingModel {
    pub fn init(config: BranchConfig, rng: &mut Rng) -> Result<Self> {
        Ok(TripletEmbeddingModel {
            branch: Branch::init(config, rng)?,
        })
    }

    pub fn embed_tape(&self, tape: &mut Tape, vars: &[Var], p: Var) -> Result<Var> {
        let f = self.branch.forward_tape(tape, vars, p, DEPTH)?;
        tape.flatten(f)
    }
}

/// A pre-trained (or freshly initialized) model of either pretext task.
#[derive(Clone, Debug, PartialEq)]
pub enum PretextModel {
    Overlap(SiameseOverlapModel),
    Triplet(TripletEmbeddingModel),
}

impl PretextModel {
    /// Initializes a model from the `model-init` sub-stream of `seed`.
    pub fn init(task: PretextTask, config: BranchConfig, seed: u64) -> Result<Self> {
        let mut rng = rng::substream(seed, rng::streams::INIT);
        Ok(match task {
            PretextTask::Overlap => PretextModel::Overlap(SiameseOverlapModel::init(config, &mut rng)?),
            PretextTask::Triplet => PretextModel::Triplet(TripletEmbeddingModel::init(config, &mut rng)?),
        })
    }

    pub fn task(&self) -> PretextTask {
        match self {
            PretextModel::Overlap(_) => PretextTask::Overlap,
            PretextModel::Triplet(_) => PretextTask::Triplet,
        }
    }

    pub fn branch(&self) -> &Branch {
        match self {
            PretextModel::Overlap(m) => &m.branch,
            PretextModel::Triplet(m) => &m.branch,
        }
    }

    /// Highest selectable feature layer: 4 (the fusion map) for the overlap model.
    pub fn max_layer(&self) -> usize {
        match self {
            PretextModel::Overlap(_) => DEPTH + 1,
            PretextModel::Triplet(_) => DEPTH,
        }
    }

    /// Parameters in canonical order (branch layers, then head).
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            PretextModel::Overlap(m) => m
                .branch
                .params
                .iter()
                .chain([&m.head_weight, &m.head_bias])
                .collect(),
            PretextModel::Triplet(m) => m.branch.params.iter().collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            PretextModel::Overlap(m) => m
                .branch
                .params
                .iter_mut()
                .chain([&mut m.head_weight, &mut m.head_bias])
                .collect(),
            PretextModel::Triplet(m) => m.branch.params.iter_mut().collect(),
        }
    }

    /// Canonical tensor names, matching [`params`](Self::params).
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=DEPTH)
            .flat_map(|l| [format!("conv{l}.weight"), format!("conv{l}.bias")])
            .collect();
        if let PretextModel::Overlap(_) = self {
            names.push("head.weight".into());
            names.push("head.bias".into());
        }
        names
    }

    /// Puts every parameter on `tape` once; all uses share these handles.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.param(p)).collect()
    }

    /// Adds the gradients recorded on `tape` into the parameters' buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape, vars: &[Var]) -> Result<()> {
        for (p, v) in self.params_mut().into_iter().zip(vars) {
            if let Some(g) = tape.grad(*v) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.max_layer() {
            return Err(Error::Config(format!(
                "layer {layer} is not available for the {} model (1..={})",
                self.task(),
                self.max_layer()
            )));
        }
        Ok(())
    }

    /// Activation map `[C_l, H, W]` of layer `l` in 1..=3 for a single image.
    ///
    /// Layer 4 is the fusion of two images and needs [`pair_features`](Self::pair_features).
    pub fn extract_features(&self, image: &Tensor, layer: usize) -> Result<Tensor> {
        self.check_layer(layer)?;
        if layer > DEPTH {
            return Err(Error::Config(
                "layer 4 is the fusion of two images; use pair_features".into(),
            ));
        }
        Ok(self
            .branch()
            .activations(image, layer)?
            .pop()
            .expect("depth >= 1"))
    }

    /// Per-date features for change detection.
    ///
    /// For layers 1..=3 these are the two activation maps. For layer 4 the
    /// first map is the fusion output `f3(I1) - f3(I2)` and the second is zero,
    /// so that differences and magnitudes computed downstream see the fusion
    /// map itself.
    pub fn pair_features(&self, t1: &Tensor, t2: &Tensor, layer: usize) -> Result<(Tensor, Tensor)> {
        self.check_layer(layer)?;
        if t1.shape() != t2.shape() {
            return Err(Error::shape(format!(
                "pair images differ: {:?} vs {:?}",
                t1.shape(),
                t2.shape()
            )));
        }
        let depth = layer.min(DEPTH);
        let f1 = self.branch().activations(t1, depth)?.pop().expect("depth >= 1");
        let f2 = self.branch().activations(t2, depth)?.pop().expect("depth >= 1");
        if layer <= DEPTH {
            return Ok((f1, f2));
        }
        let fused: Vec<f32> = f1.data().iter().zip(f2.data()).map(|(a, b)| a - b).collect();
        let zero = Tensor::zeros(f1.shape());
        Ok((Tensor::new(f1.shape(), fused)?, zero))
    }

    /// Signed feature difference `f_l(I1) - f_l(I2)` (the fusion map for layer 4).
    pub fn difference_features(&self, t1: &Tensor, t2: &Tensor, layer: usize) -> Result<Tensor> {
        let (a, b) = self.pair_features(t1, t2, layer)?;
        let d = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        Tensor::new(a.shape(), d)
    }

    /// Channels of the difference features at `layer`.
    pub fn feature_channels(&self, layer: usize) -> Result<usize> {
        self.check_layer(layer)?;
        Ok(self.branch().config().channels(layer.min(DEPTH)))
    }
}

/// Probability that `p1` and `p2` do not overlap.
pub fn forward_overlap(model: &SiameseOverlapModel, p1: &Tensor, p2: &Tensor) -> Result<f32> {
    let mut tape = Tape::new();
    let vars = PretextModel::Overlap(model.clone()).register(&mut tape);
    let a = tape.constant(p1.clone());
    let b = tape.constant(p2.clone());
    let (_, prob) = model.forward_tape(&mut tape, &vars, a, b)?;
    Ok(tape.value(prob).data()[0])
}

/// Flattened layer-3 embedding of one patch.
pub fn forward_embed(model: &TripletEmbeddingModel, p: &Tensor) -> Result<Tensor> {
    let f = model.branch.activations(p, DEPTH)?.pop().expect("depth >= 1");
    let n = f.len();
    f.reshape(&[n])
}
