//! Segmentation network: a 5-stage strided encoder, a 5-stage decoder with
//! skip connections, a per-pixel sigmoid head and an optional single-unit
//! classifier on the pooled deepest feature map.
//!
//! The network runs on a small CPU engine ([`tensor`], [`layers`]) with
//! hand-written backward passes. Forward/backward on one [`ModelBundle`] is a
//! single stream; [`forward`] takes `&self` so several read-only models can
//! predict concurrently.

pub mod layers;
pub mod tensor;
mod unet;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use tensor::Tensor;
pub use unet::{ForwardOutput, Tape, UNet};

use crate::error::{Error, Result};
use crate::fsio;

pub const ENCODER_STAGES: usize = 5;
/// Total encoder downsampling factor.
pub const DOWNSAMPLE: usize = 1 << ENCODER_STAGES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub input_px: usize,
    pub input_channels: usize,
    /// Output channels of the five encoder stages (efficientnet-b0's widths
    /// at the 1/2 … 1/32 resolutions by default).
    pub stage_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub classifier: bool,
    /// Standard deviation multiplier for the batch-normalized convolutions,
    /// relative to `1/sqrt(fan_in)`.
    pub init_gain: f64,
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        Self {
            input_px: 256,
            input_channels: 3,
            stage_widths: vec![16, 24, 40, 80, 112],
            decoder_widths: vec![80, 40, 24, 16, 16],
            classifier: false,
            init_gain: 0.05,
        }
    }
}

impl ArchitectureSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.input_px == 0 || !self.input_px.is_multiple_of(DOWNSAMPLE) {
            return bad(format!("input {} not divisible by 32", self.input_px));
        }
        if self.input_channels == 0 {
            return bad("input_channels must be ≥ 1".into());
        }
        if self.stage_widths.len() != ENCODER_STAGES {
            return bad(format!(
                "expected {ENCODER_STAGES} encoder widths, got {}",
                self.stage_widths.len()
            ));
        }
        if self.decoder_widths.len() != ENCODER_STAGES {
            return bad(format!(
                "expected {ENCODER_STAGES} decoder widths, got {}",
                self.decoder_widths.len()
            ));
        }
        if self
            .stage_widths
            .iter()
            .chain(&self.decoder_widths)
            .any(|&w| w == 0)
        {
            return bad("channel widths must be positive".into());
        }
        if !(self.init_gain.is_finite() && self.init_gain > 0.0) {
            return bad(format!("init_gain {} must be positive", self.init_gain));
        }
        Ok(())
    }

    /// Spatial extent of the deepest encoder feature map.
    pub fn latent_px(&self) -> usize {
        self.input_px / DOWNSAMPLE
    }
}

/// A network with its architecture and provenance fingerprint.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub spec: ArchitectureSpec,
    pub net: UNet,
    pub fingerprint: String,
}

/// Builds a freshly initialized model; identical `(spec, seed)` pairs give
/// bitwise-identical parameters.
pub fn build_model(spec: &ArchitectureSpec, init_seed: u64) -> Result<ModelBundle> {
    spec.validate()?;
    let fingerprint = fingerprint_of(&serde_json::json!({
        "spec": spec,
        "init_seed": init_seed,
    }));
    Ok(ModelBundle {
        spec: spec.clone(),
        net: UNet::new(spec, init_seed),
        fingerprint,
    })
}

/// SHA-256 of a JSON value's compact serialization.
pub fn fingerprint_of(value: &serde_json::Value) -> String {
    fsio::sha256_hex(value.to_string().as_bytes())
}

fn check_batch(spec: &ArchitectureSpec, batch: &Tensor) -> Result<()> {
    let [b, c, h, w] = batch.shape;
    if b == 0 {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    if c != spec.input_channels {
        return Err(Error::ShapeMismatch(format!(
            "batch has {c} channels, model expects {}",
            spec.input_channels
        )));
    }
    if h == 0 || w == 0 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
        return Err(Error::ShapeMismatch(format!(
            "spatial size {h}x{w} is not a positive multiple of {DOWNSAMPLE}"
        )));
    }
    Ok(())
}

/// Evaluation-mode forward pass on a `B×C×H×W` batch in [0, 1].
pub fn forward(model: &ModelBundle, batch: &Tensor) -> Result<ForwardOutput> {
    check_batch(&model.spec, batch)?;
    Ok(model.net.predict(batch))
}

impl ModelBundle {
    /// Training-mode forward pass; see [`UNet::forward_train`].
    pub fn forward_train(&mut self, batch: &Tensor) -> Result<Tape> {
        check_batch(&self.spec, batch)?;
        Ok(self.net.forward_train(batch))
    }

    /// SHA-256 over every parameter and buffer value.
    pub fn param_checksum(&self) -> String {
        let mut bytes = Vec::new();
        for (p, _) in self.net.tensors() {
            for v in &p.value {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fsio::sha256_hex(&bytes)
    }

    pub fn param_count(&self) -> usize {
        self.net
            .tensors()
            .iter()
            .filter(|(_, buffer)| !buffer)
            .map(|(p, _)| p.value.len())
            .sum()
    }
}

const CKPT_MAGIC: &[u8; 8] = b"SSEGCKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub buffer: bool,
}

/// JSON sidecar written next to every checkpoint blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ArchitectureSpec,
    pub fingerprint: String,
    pub epoch: usize,
    pub fold: usize,
    pub params_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

/// Writes `<path>` (little-endian f32 blob) and its `.json` sidecar.
pub fn save_checkpoint(
    model: &ModelBundle,
    path: &Path,
    epoch: usize,
    fold: usize,
) -> Result<CheckpointMeta> {
    let tensors = model.net.tensors();
    let total: usize = tensors.iter().map(|(p, _)| p.value.len()).sum();
    let mut blob = Vec::with_capacity(16 + total * 4);
    blob.extend_from_slice(CKPT_MAGIC);
    blob.extend_from_slice(&(total as u64).to_le_bytes());
    for (p, _) in &tensors {
        for v in &p.value {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = CheckpointMeta {
        spec: model.spec.clone(),
        fingerprint: model.fingerprint.clone(),
        epoch,
        fold,
        params_sha256: model.param_checksum(),
        tensors: tensors
            .iter()
            .map(|(p, buffer)| TensorEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                buffer: *buffer,
            })
            .collect(),
    };
    fsio::write_bytes(path, &blob)?;
    fsio::write_json(&sidecar_path(path), &meta)?;
    Ok(meta)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelBundle, CheckpointMeta)> {
    let meta: CheckpointMeta = fsio::read_json(&sidecar_path(path))?;
    let blob = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |m: &str| Error::Schema {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    if blob.len() < 16 || &blob[..8] != CKPT_MAGIC {
        return Err(corrupt("not a checkpoint blob"));
    }
    let total = u64::from_le_bytes(blob[8..16].try_into().unwrap()) as usize;
    if blob.len() != 16 + total * 4 {
        return Err(corrupt("truncated checkpoint blob"));
    }
    let mut model = build_model(&meta.spec, 0)?;
    let mut offset = 16;
    {
        let tensors = model.net.tensors_mut();
        if tensors.len() != meta.tensors.len() {
            return Err(corrupt("tensor count does not match architecture"));
        }
        for ((p, _), entry) in tensors.into_iter().zip(&meta.tensors) {
            if p.name != entry.name || p.shape != entry.shape {
                return Err(corrupt(&format!("unexpected tensor {}", entry.name)));
            }
            for v in p.value.iter_mut() {
                *v = f32::from_le_bytes(blob[offset..offset + 4].try_into().unwrap());
                offset += 4;
            }
        }
    }
    if offset != blob.len() {
        return Err(corrupt("checkpoint blob size does not match architecture"));
    }
    model.fingerprint = meta.fingerprint.clone();
    if model.param_checksum() != meta.params_sha256 {
        return Err(corrupt("parameter checksum mismatch"));
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_spec(classifier: bool) -> ArchitectureSpec {
        ArchitectureSpec {
            input_px: 32,
            stage_widths: vec![4, 6, 8, 10, 12],
            decoder_widths: vec![10, 8, 6, 4, 4],
            classifier,
            init_gain: 1.0,
            ..ArchitectureSpec::default()
        }
    }

    fn random_batch(b: usize, p: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..b * 3 * p * p).map(|_| rng.random::<f32>()).collect();
        Tensor::from_vec([b, 3, p, p], data).unwrap()
    }

    #[test]
    fn invalid_input_size_rejected() {
        let spec = ArchitectureSpec {
            input_px: 250,
            ..ArchitectureSpec::default()
        };
        let e = build_model(&spec, 0).unwrap_err();
        assert!(e.to_string().contains("input 250 not divisible by 32"));
    }

    #[test]
    fn latent_extent_is_input_over_32() {
        assert_eq!(ArchitectureSpec::default().latent_px(), 8);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model(&small_spec(true), 7).unwrap();
        let b = build_model(&small_spec(true), 7).unwrap();
        let c = build_model(&small_spec(true), 8).unwrap();
        assert_eq!(a.param_checksum(), b.param_checksum());
        assert_ne!(a.param_checksum(), c.param_checksum());
    }

    #[test]
    fn output_shapes_and_ranges() {
        let m = build_model(&small_spec(true), 1).unwrap();
        let x = random_batch(3, 64, 0);
        let out = forward(&m, &x).unwrap();
        assert_eq!(out.seg.shape, [3, 1, 64, 64]);
        assert_eq!(out.cls.as_ref().unwrap().len(), 3);
        assert!(out.seg.data.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(out, forward(&m, &x).unwrap());
        let bad = Tensor::zeros([1, 3, 48, 48]);
        assert!(matches!(forward(&m, &bad), Err(Error::ShapeMismatch(_))));
        let no_cls = build_model(&small_spec(false), 1).unwrap();
        assert!(forward(&no_cls, &x).unwrap().cls.is_none());
    }

    #[test]
    fn eval_output_independent_of_batch_composition() {
        let m = build_model(&small_spec(true), 3).unwrap();
        let x = random_batch(4, 32, 5);
        let all = forward(&m, &x).unwrap();
        let one = Tensor::from_vec([1, 3, 32, 32], x.item(2).to_vec()).unwrap();
        let single = forward(&m, &one).unwrap();
        assert_eq!(single.seg.data, all.seg.item(2));
        assert_eq!(single.cls.unwrap()[0], all.cls.unwrap()[2]);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = build_model(&small_spec(true), 9).unwrap();
        m.fingerprint = "abc".into();
        let path = dir.path().join("epoch_1.ckpt");
        let meta = save_checkpoint(&m, &path, 1, 2).unwrap();
        let (loaded, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(loaded.fingerprint, "abc");
        assert_eq!(loaded.param_checksum(), m.param_checksum());
        let x = random_batch(2, 32, 1);
        assert_eq!(forward(&m, &x).unwrap(), forward(&loaded, &x).unwrap());
    }
}
