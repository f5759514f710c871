//! Checkpoint files.
//!
//! Layout: magic `EMCK`, format version `u32`, header length `u64`, a JSON
//! header, then every tensor listed in the header as little-endian scalars of
//! the header's dtype, row-major, in header order. All integers are
//! little-endian.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::MelConfig;
use crate::error::{Error, Result};
use crate::frontend::Frontend;
use crate::model::{Model, ModelConfig, NPC_PREFIX};
use crate::nn::Adam;
use crate::npc::Codebook;
use crate::scalar::Scalar;
use crate::tensor_io::atomic_write;
use crate::training::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"EMCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub dtype: String,
    pub config_hash: String,
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub state: TrainState,
    pub frontend: Option<Frontend>,
    pub emotions: Vec<String>,
    #[serde(default)]
    pub mel: Option<MelConfig>,
    pub workers: usize,
    pub npc_present: bool,
    pub adam_step: Option<u64>,
    pub tensors: Vec<TensorEntry>,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone)]
pub struct Checkpoint<F: Scalar> {
    pub model: Model<F>,
    pub train_config: Option<TrainConfig>,
    pub state: TrainState,
    pub adam: Option<Adam<F>>,
    pub frontend: Option<Frontend>,
    pub emotions: Vec<String>,
    /// Feature settings of the training corpus, used for waveform output.
    pub mel: Option<MelConfig>,
    /// False once the NPC weights and codebooks have been stripped.
    pub npc_present: bool,
}

fn is_npc(name: &str) -> bool {
    name.starts_with(&format!("{NPC_PREFIX}.")) || name.starts_with("codebook/")
}

impl<F: Scalar> Checkpoint<F> {
    pub fn capture(
        model: &Model<F>,
        train_config: Option<&TrainConfig>,
        state: TrainState,
        adam: Option<&Adam<F>>,
        frontend: Option<Frontend>,
        emotions: Vec<String>,
    ) -> Self {
        Self {
            model: model.clone(),
            train_config: train_config.cloned(),
            state,
            adam: adam.cloned(),
            frontend,
            emotions,
            mel: None,
            npc_present: true,
        }
    }

    /// Inference-only copy without NPC weights, codebooks or optimizer state.
    pub fn strip_npc(&self) -> Self {
        let mut c = self.clone();
        c.npc_present = false;
        c.adam = None;
        c
    }

    fn tensors(&self) -> Vec<(String, Vec<usize>, Vec<F>)> {
        let mut out = Vec::new();
        let m2 = |a: &Array2<F>| (vec![a.nrows(), a.ncols()], a.iter().copied().collect::<Vec<_>>());
        let m1 = |a: &Array1<F>| (vec![a.len()], a.to_vec());
        for (_, name, v) in self.model.store.iter() {
            if !self.npc_present && is_npc(name) {
                continue;
            }
            let (s, d) = m2(v);
            out.push((format!("param/{name}"), s, d));
        }
        if self.npc_present {
            for (i, b) in self.model.codebooks.iter().enumerate() {
                let (s, d) = m2(&b.vectors);
                out.push((format!("codebook/{i}/vectors"), s, d));
                let (s, d) = m1(&b.cluster_size);
                out.push((format!("codebook/{i}/cluster_size"), s, d));
                let (s, d) = m2(&b.embed_sum);
                out.push((format!("codebook/{i}/embed_sum"), s, d));
            }
        }
        if let Some(adam) = &self.adam {
            for (id, name, _) in self.model.store.iter() {
                for (kind, buf) in [("m", &adam.m), ("v", &adam.v)] {
                    if let Some(a) = &buf[id.0] {
                        let (s, d) = m2(a);
                        out.push((format!("adam_{kind}/{name}"), s, d));
                    }
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.tensors();
        let header = Header {
            format_version: FORMAT_VERSION,
            dtype: F::DTYPE.to_string(),
            config_hash: self.model.cfg.hash(),
            model_config: self.model.cfg.clone(),
            train_config: self.train_config.clone(),
            state: self.state,
            frontend: self.frontend.clone(),
            emotions: self.emotions.clone(),
            mel: self.mel.clone(),
            workers: 1,
            npc_present: self.npc_present,
            adam_step: self.adam.as_ref().map(|a| a.step),
            tensors: tensors
                .iter()
                .map(|(name, shape, _)| TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &tensors {
            for &v in data {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        atomic_write(path.as_ref(), &self.to_bytes()?)
    }

    pub fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing EMCK magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Migration {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let end = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..end])?;
        Ok((header, end))
    }

    /// Decodes a checkpoint. With `expected`, the stored architecture must
    /// hash identically.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self> {
        let (header, mut pos) = Self::read_header(bytes)?;
        if header.dtype != F::DTYPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, loader expects {}",
                header.dtype,
                F::DTYPE
            )));
        }
        if header.config_hash != header.model_config.hash() {
            return Err(Error::Checkpoint("header config does not match its hash".into()));
        }
        if let Some(exp) = expected {
            if exp.hash() != header.config_hash {
                return Err(Error::Checkpoint(format!(
                    "config hash {} does not match the requested model {}",
                    header.config_hash,
                    exp.hash()
                )));
            }
        }
        let mut model = Model::<F>::new(&header.model_config)?;
        let n = model.store.len();
        let mut adam = header.adam_step.map(|step| {
            let mut a = Adam::new(header.train_config.as_ref().map(|c| c.adam).unwrap_or_default(), n);
            a.step = step;
            a
        });
        let mut seen = vec![false; n];
        for entry in &header.tensors {
            let count: usize = entry.shape.iter().product();
            let need = count * F::BYTES;
            if bytes.len() < pos + need {
                return Err(Error::Checkpoint(format!("tensor {} is truncated", entry.name)));
            }
            let data: Vec<F> = bytes[pos..pos + need].chunks_exact(F::BYTES).map(F::read_le).collect();
            pos += need;
            let as2 = || -> Result<Array2<F>> {
                match entry.shape[..] {
                    [r, c] => Ok(Array2::from_shape_vec((r, c), data.clone()).expect("shape checked")),
                    _ => Err(Error::Checkpoint(format!("tensor {} must be rank 2", entry.name))),
                }
            };
            let (kind, rest) = entry
                .name
                .split_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("bad tensor name {}", entry.name)))?;
            match kind {
                "param" => {
                    model.store.assign(rest, as2()?)?;
                    seen[model.store.find(rest).unwrap().0] = true;
                }
                "adam_m" | "adam_v" => {
                    let id = model
                        .store
                        .find(rest)
                        .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {}", entry.name)))?;
                    let a = adam
                        .as_mut()
                        .ok_or_else(|| Error::Checkpoint("optimizer moments without a step".into()))?;
                    let slot = if kind == "adam_m" { &mut a.m } else { &mut a.v };
                    slot[id.0] = Some(as2()?);
                }
                "codebook" => {
                    let (gi, field) = rest
                        .split_once('/')
                        .and_then(|(g, f)| g.parse::<usize>().ok().map(|g| (g, f)))
                        .ok_or_else(|| Error::Checkpoint(format!("bad tensor name {}", entry.name)))?;
                    let book: &mut Codebook<F> = model
                        .codebooks
                        .get_mut(gi)
                        .ok_or_else(|| Error::Checkpoint(format!("codebook {gi} out of range")))?;
                    match field {
                        "vectors" => book.vectors = as2()?,
                        "embed_sum" => book.embed_sum = as2()?,
                        "cluster_size" => book.cluster_size = Array1::from(data),
                        _ => return Err(Error::Checkpoint(format!("bad tensor name {}", entry.name))),
                    }
                }
                _ => return Err(Error::Checkpoint(format!("unexpected tensor {}", entry.name))),
            }
        }
        if pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        if let Some(id) = model
            .store
            .ids()
            .find(|&id| !seen[id.0] && (header.npc_present || !is_npc(model.store.name(id))))
        {
            return Err(Error::Checkpoint(format!("missing tensor {}", model.store.name(id))));
        }
        let mut frontend = header.frontend;
        if let Some(f) = frontend.as_mut() {
            f.reindex();
        }
        Ok(Self {
            model,
            train_config: header.train_config,
            state: header.state,
            adam,
            frontend,
            emotions: header.emotions,
            mel: header.mel,
            npc_present: header.npc_present,
        })
    }

    pub fn load(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected)
    }

    /// Splits into the parts a trainer needs, after checking the architecture.
    pub fn into_training_parts(self, expected: &ModelConfig) -> Result<(Model<F>, TrainState, Option<Adam<F>>)> {
        if expected.hash() != self.model.cfg.hash() {
            return Err(Error::Checkpoint(format!(
                "config hash {} does not match the requested model {}",
                self.model.cfg.hash(),
                expected.hash()
            )));
        }
        if !self.npc_present {
            return Err(Error::Checkpoint(
                "NPC weights were stripped; cannot train from this file".into(),
            ));
        }
        Ok((self.model, self.state, self.adam))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tiny_config;
    use crate::training::Stage;

    fn sample() -> Checkpoint<f32> {
        let model = Model::<f32>::new(&tiny_config()).unwrap();
        let mut adam = Adam::new(Default::default(), model.store.len());
        adam.step = 3;
        adam.m[1] = Some(Array2::from_elem(model.store.get(crate::nn::ParamId(1)).dim(), 0.25));
        adam.v[1] = Some(Array2::from_elem(model.store.get(crate::nn::ParamId(1)).dim(), 1e-7));
        Checkpoint::capture(
            &model,
            Some(&TrainConfig::default()),
            TrainState::new(Stage::Joint),
            Some(&adam),
            None,
            vec!["a".into(), "b".into(), "c".into()],
        )
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes, Some(&tiny_config())).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.adam.as_ref().unwrap().step, 3);
        assert_eq!(back.train_config, c.train_config);
    }

    #[test]
    fn config_mismatch_is_reported() {
        let bytes = sample().to_bytes().unwrap();
        let mut other = tiny_config();
        other.npc.mask_size = 3;
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes, Some(&other)),
            Err(Error::Checkpoint(_))
        ));
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bytes, None),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn version_and_truncation_are_checked() {
        let mut bytes = sample().to_bytes().unwrap();
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&wrong, None),
            Err(Error::Migration { found: 9, supported: 1 })
        ));
        bytes.pop();
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes, None),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn stripped_file_keeps_inference_weights() {
        let c = sample();
        let s = c.strip_npc();
        let bytes = s.to_bytes().unwrap();
        assert!(bytes.len() < c.to_bytes().unwrap().len());
        let back = Checkpoint::<f32>::from_bytes(&bytes, None).unwrap();
        assert!(!back.npc_present);
        for (id, name, v) in c.model.store.iter() {
            if !is_npc(name) {
                assert_eq!(back.model.store.get(id), v);
            }
        }
        assert!(back.into_training_parts(&tiny_config()).is_err());
    }
}
