//! Self-describing JSON checkpoints.
//!
//! A checkpoint holds a format version, the encoder configuration, the input
//! pipeline (normalization statistics and patching), an optional head
//! description, and every parameter array in declaration order. Floats are
//! written in shortest round-trip form, so a save/load cycle is exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{FtpHead, Head, HeadKind, InputPipeline, MlpHead};
use crate::nn::{EncoderConfig, Mat, Parameters, PatchEncoder};
use crate::pretrain::PretrainModel;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    /// Output width: `H_max` for FTP, class count for FR, 1 for AD.
    pub outputs: usize,
    /// Hidden width of FR and AD heads.
    pub hidden: usize,
    #[serde(default)]
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub encoder: EncoderConfig,
    pub pipeline: InputPipeline,
    pub head: Option<HeadSpec>,
    pub tensors: Vec<NamedArray>,
}

fn export<P: Parameters>(p: &P, prefix: &str, out: &mut Vec<NamedArray>) {
    let mut named = Vec::new();
    p.collect(prefix, &mut named);
    out.extend(named.into_iter().map(|(name, t)| NamedArray {
        name,
        shape: [t.nrows(), t.ncols()],
        data: t.iter().copied().collect(),
    }));
}

fn import<P: Parameters>(p: &mut P, prefix: &str, tensors: &mut std::slice::Iter<'_, NamedArray>) -> Result<()> {
    let mut names = Vec::new();
    p.collect(prefix, &mut names);
    let names: Vec<(String, (usize, usize))> = names.into_iter().map(|(n, t)| (n, t.dim())).collect();
    for ((name, dim), dst) in names.into_iter().zip(p.tensors_mut()) {
        let src = tensors
            .next()
            .ok_or_else(|| Error::Config(format!("checkpoint is missing tensor {name}")))?;
        if src.name != name || (src.shape[0], src.shape[1]) != dim || src.data.len() != dim.0 * dim.1 {
            return Err(Error::Shape(format!(
                "checkpoint tensor {} {:?} does not match {name} {dim:?}",
                src.name, src.shape
            )));
        }
        *dst = Mat::from_shape_vec(dim, src.data.clone()).expect("length checked");
    }
    Ok(())
}

fn blank_encoder(config: EncoderConfig) -> Result<PatchEncoder> {
    PatchEncoder::new(config, &mut ChaCha8Rng::seed_from_u64(0))
}

impl Checkpoint {
    pub fn from_pretrain(model: &PretrainModel, pipeline: &InputPipeline) -> Self {
        let mut tensors = Vec::new();
        export(model, "", &mut tensors);
        Self {
            format_version: FORMAT_VERSION,
            encoder: model.encoder.config,
            pipeline: *pipeline,
            head: None,
            tensors,
        }
    }

    pub fn from_head(encoder: &PatchEncoder, head: &Head, pipeline: &InputPipeline, class_names: &[String]) -> Self {
        let mut tensors = Vec::new();
        export(encoder, "encoder", &mut tensors);
        export(head, "head", &mut tensors);
        let (outputs, hidden) = match head {
            Head::Ftp(h) => (h.h_max, 0),
            Head::Fr(h) | Head::Ad(h) => (h.outputs(), h.hidden.output_dim()),
        };
        Self {
            format_version: FORMAT_VERSION,
            encoder: encoder.config,
            pipeline: *pipeline,
            head: Some(HeadSpec {
                kind: head.kind(),
                outputs,
                hidden,
                class_names: class_names.to_vec(),
            }),
            tensors,
        }
    }

    pub fn to_pretrain(&self) -> Result<PretrainModel> {
        if self.head.is_some() {
            return Err(Error::Config("checkpoint holds a task head, not a pretraining model".into()));
        }
        let mut model = PretrainModel::new(self.encoder, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut it = self.tensors.iter();
        import(&mut model, "", &mut it)?;
        Ok(model)
    }

    /// Encoder from either kind of checkpoint.
    pub fn to_encoder(&self) -> Result<PatchEncoder> {
        if self.head.is_none() {
            return Ok(self.to_pretrain()?.encoder);
        }
        let mut encoder = blank_encoder(self.encoder)?;
        import(&mut encoder, "encoder", &mut self.tensors.iter())?;
        Ok(encoder)
    }

    pub fn to_head(&self) -> Result<(PatchEncoder, Head)> {
        let spec = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Config("checkpoint holds no task head".into()))?;
        let d = self.encoder.d_model;
        let mut encoder = blank_encoder(self.encoder)?;
        let mut head = match spec.kind {
            HeadKind::Ftp => Head::Ftp(FtpHead::zeros(d, spec.outputs)),
            HeadKind::Fr => Head::Fr(MlpHead::zeros(d, spec.hidden, spec.outputs)),
            HeadKind::Ad => Head::Ad(MlpHead::zeros(d, spec.hidden, 1)),
        };
        let mut it = self.tensors.iter();
        import(&mut encoder, "encoder", &mut it)?;
        import(&mut head, "head", &mut it)?;
        if it.next().is_some() {
            return Err(Error::Config("checkpoint has trailing tensors".into()));
        }
        Ok((encoder, head))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parses a checkpoint, rejecting any other format version before
    /// looking at the rest of the document.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Config("checkpoint without format_version".into()))? as u32;
        if found != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found,
                expected: FORMAT_VERSION,
            });
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        Self::from_json(&value.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::PatchingConfig;
    use crate::trajectory::NormStats;

    fn pipeline() -> InputPipeline {
        InputPipeline {
            norm: NormStats {
                mean: [1.0, 2.0, 3.0, 0.1, 0.2, 0.3],
                std: [0.5, 0.25, 100.0, 1.0 / 3.0, 0.7, 0.9],
            },
            patching: PatchingConfig::with_geometry(4, 3),
        }
    }

    fn config() -> EncoderConfig {
        EncoderConfig {
            patch_size: 4,
            num_patches: 3,
            d_model: 8,
            heads: 2,
            layers: 2,
            d_ff: 16,
            dropout: 0.1,
        }
    }

    #[test]
    fn pretrain_round_trip_is_exact() {
        let model = PretrainModel::new(config(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let ck = Checkpoint::from_pretrain(&model, &pipeline());
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_pretrain().unwrap(), model);
        assert_eq!(back.to_encoder().unwrap(), model.encoder);
    }

    #[test]
    fn head_round_trip_through_file() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let enc = PatchEncoder::new(config(), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for head in [
            Head::Ftp(FtpHead::new(8, 6, &mut rng)),
            Head::Fr(MlpHead::new(8, 5, 4, &mut rng)),
            Head::Ad(MlpHead::new(8, 5, 1, &mut rng)),
        ] {
            let path = dir.path().join(format!("{}.json", head.kind().as_str()));
            Checkpoint::from_head(&enc, &head, &pipeline(), &[]).save(&path).unwrap();
            let (e, h) = Checkpoint::load(&path).unwrap().to_head().unwrap();
            assert_eq!(e, enc);
            assert_eq!(h, head);
        }
    }

    #[test]
    fn version_mismatch_fails() {
        let model = PretrainModel::new(config(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut ck = Checkpoint::from_pretrain(&model, &pipeline());
        ck.format_version = FORMAT_VERSION + 1;
        let text = serde_json::to_string(&ck).unwrap();
        assert!(matches!(
            Checkpoint::from_json(&text),
            Err(Error::CheckpointVersion { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn shape_mismatch_fails() {
        let model = PretrainModel::new(config(), &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let mut ck = Checkpoint::from_pretrain(&model, &pipeline());
        ck.encoder.d_ff = 32;
        assert!(matches!(ck.to_pretrain(), Err(Error::Shape(_))));
    }
}
