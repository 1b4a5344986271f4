//! Checkpoint directories: `manifest.json` plus one raster file per tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Branch, BranchConfig, PretextModel, PretextTask, SiameseOverlapModel, TripletEmbeddingModel};
use crate::error::{Error, Result};
use crate::raster::{read_raster, write_raster};

const FORMAT: &str = "sscd-checkpoint";
const VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

/// Input standardization every checkpointed model expects.
pub const NORMALIZATION_SCHEME: &str = "per-image-per-band-zscore";

/// Training provenance stored next to the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    #[serde(default)]
    pub patch_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub task: PretextTask,
    pub architecture: BranchConfig,
    pub band_count: usize,
    pub normalization: String,
    #[serde(flatten)]
    pub meta: CheckpointMeta,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(model: &PretextModel, meta: &CheckpointMeta, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for (name, t) in model.param_names().into_iter().zip(model.params()) {
        let file = format!("{name}.raster");
        write_raster(t, dir.join(&file))?;
        tensors.push(TensorEntry {
            name,
            file,
            shape: t.shape().to_vec(),
        });
    }
    let config = model.branch().config().clone();
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: VERSION,
        task: model.task(),
        band_count: config.in_channels,
        architecture: config,
        normalization: NORMALIZATION_SCHEME.into(),
        meta: meta.clone(),
        tensors,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(PretextModel, CheckpointMeta)> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, format!("checkpoint manifest: {e}")))?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported checkpoint {} v{}", m.format, m.version),
        ));
    }
    if m.band_count != m.architecture.in_channels {
        return Err(Error::format(&path, "band_count disagrees with the architecture"));
    }
    if m.normalization != NORMALIZATION_SCHEME {
        return Err(Error::format(
            &path,
            format!("unknown normalization scheme {:?}", m.normalization),
        ));
    }
    m.architecture.validate()?;

    // A template model of the declared architecture fixes names and shapes.
    let template = PretextModel::init(m.task, m.architecture.clone(), 0)?;
    let names = template.param_names();
    if m.tensors.len() != names.len() {
        return Err(Error::format(
            &path,
            format!("expected {} tensors, manifest lists {}", names.len(), m.tensors.len()),
        ));
    }
    let mut params = Vec::with_capacity(names.len());
    for ((entry, name), expected) in m.tensors.iter().zip(&names).zip(template.params()) {
        if &entry.name != name || entry.shape != expected.shape() {
            return Err(Error::format(
                &path,
                format!(
                    "tensor {} {:?} does not match architecture ({name} {:?})",
                    entry.name,
                    entry.shape,
                    expected.shape()
                ),
            ));
        }
        if entry.file.contains(['/', '\\']) {
            return Err(Error::format(&path, format!("tensor file {:?} escapes the directory", entry.file)));
        }
        let t = read_raster(dir.join(&entry.file))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::format(
                dir.join(&entry.file),
                format!("shape {:?} differs from manifest {:?}", t.shape(), entry.shape),
            ));
        }
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("checkpoint tensor {}", entry.name)));
        }
        params.push(t.with_grad());
    }

    let branch_params: Vec<_> = params.drain(..2 * super::DEPTH).collect();
    let branch = Branch::from_params(m.architecture, branch_params)?;
    let model = match m.task {
        PretextTask::Overlap => {
            let mut head = params.into_iter();
            PretextModel::Overlap(SiameseOverlapModel {
                branch,
                head_weight: head.next().expect("checked count"),
                head_bias: head.next().expect("checked count"),
            })
        }
        PretextTask::Triplet => PretextModel::Triplet(TripletEmbeddingModel { branch }),
    };
    Ok((model, m.meta))
}

/// Loads a checkpoint and insists on the given pretext task.
pub fn load_checkpoint_for(dir: impl AsRef<Path>, task: PretextTask) -> Result<(PretextModel, CheckpointMeta)> {
    let (model, meta) = load_checkpoint(dir)?;
    if model.task() != task {
        return Err(Error::TaskMismatch {
            expected: task.to_string(),
            found: model.task().to_string(),
        });
    }
    Ok((model, meta))
}
