//! The full system: acoustic backbone, emotion encoder and NPC module
//! sharing one parameter store, plus the NPC codebooks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acoustic::{AcousticModel, BackboneConfig};
use crate::emotion::{HierarchicalEmotionEncoder, ReferenceEncoderConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::npc::{Codebook, Npc, NpcConfig, NpcInput};
use crate::scalar::Scalar;

pub const AM_PREFIX: &str = "am";
pub const EMO_PREFIX: &str = "emo";
pub const NPC_PREFIX: &str = "npc";

/// Architecture description; its hash guards checkpoint compatibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct ModelConfig {
    pub init_seed: u64,
    pub backbone: BackboneConfig,
    pub emotion: ReferenceEncoderConfig,
    pub npc: NpcConfig,
}


impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.emotion.validate()?;
        self.npc.validate()?;
        if self.emotion.emotion_dim != self.backbone.emotion_dim {
            return Err(Error::Config(format!(
                "emotion encoder outputs {} dims, backbone expects {}",
                self.emotion.emotion_dim, self.backbone.emotion_dim
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex(&Sha256::digest(json.as_bytes()))
    }

    pub fn npc_input_dim(&self) -> usize {
        match self.npc.input {
            NpcInput::Hidden => self.backbone.hidden_dim,
            NpcInput::Mel => self.backbone.n_mels,
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct Model<F: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<F>,
    pub acoustic: AcousticModel,
    pub emotion: HierarchicalEmotionEncoder,
    pub npc: Npc,
    pub codebooks: Vec<Codebook<F>>,
}

impl<F: Scalar> Model<F> {
    /// Builds every module in a fixed order (backbone, emotion, NPC) so
    /// parameter ids do not depend on whether NPC weights are later loaded.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let acoustic = AcousticModel::new(&mut store, &mut rng, AM_PREFIX, &cfg.backbone)?;
        let emotion = HierarchicalEmotionEncoder::new(&mut store, &mut rng, EMO_PREFIX, &cfg.emotion)?;
        let npc = Npc::new(
            &mut store,
            &mut rng,
            NPC_PREFIX,
            &cfg.npc,
            cfg.npc_input_dim(),
            cfg.backbone.n_mels,
        )?;
        let codebooks = npc.new_codebooks(&mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            acoustic,
            emotion,
            npc,
            codebooks,
        })
    }

    /// Parameter-name prefixes that the gradient probe expects to be reached.
    pub fn parameter_groups(&self) -> Vec<String> {
        let mut groups = AcousticModel::parameter_groups(AM_PREFIX);
        for s in [
            "shallow_layer_logits",
            "deep_layer_logits",
            "shallow_encoder",
            "deep_encoder",
            "shallow_classifier",
            "deep_classifier",
        ] {
            groups.push(format!("{EMO_PREFIX}.{s}"));
        }
        for s in ["causal", "anticausal", "to_code", "head"] {
            groups.push(format!("{NPC_PREFIX}.{s}"));
        }
        groups
    }
}

/// Very small configuration for unit tests.
#[cfg(test)]
pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        init_seed: 3,
        backbone: BackboneConfig {
            hidden_dim: 16,
            ff_dim: 32,
            conv_kernel: 3,
            predictor_channels: 8,
            vocab_size: 10,
            n_speakers: 2,
            n_languages: 2,
            n_mels: 6,
            emotion_dim: 4,
            ..BackboneConfig::default()
        },
        emotion: ReferenceEncoderConfig {
            input_dim: 3,
            conv_channels: 8,
            emotion_dim: 4,
            n_layers: 4,
            n_classes: 3,
            ..ReferenceEncoderConfig::default()
        },
        npc: NpcConfig {
            channels: 8,
            code_dim: 4,
            codebook_size: 4,
            ..NpcConfig::default()
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_tracks_architecture() {
        let a = tiny_config();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.backbone.hidden_dim = 32;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn mismatched_emotion_dim_is_rejected() {
        let mut c = tiny_config();
        c.emotion.emotion_dim = 5;
        assert!(matches!(Model::<f32>::new(&c), Err(Error::Config(_))));
    }

    #[test]
    fn npc_parameters_come_last() {
        let m = Model::<f64>::new(&tiny_config()).unwrap();
        let names: Vec<&str> = m.store.iter().map(|(_, n, _)| n).collect();
        let first_npc = names.iter().position(|n| n.starts_with("npc.")).unwrap();
        assert!(names[first_npc..].iter().all(|n| n.starts_with("npc.")));
        for g in m.parameter_groups() {
            assert!(names.iter().any(|n| n.starts_with(&g)), "group {g} has no parameters");
        }
    }
}
