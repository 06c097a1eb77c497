//! Model checkpoints: JSON holding the resolved config and every parameter.
//! Floats round-trip exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::HmoeModel;

pub const FORMAT: &str = "hmoe-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ExperimentConfig,
    pub model: HmoeModel,
}

impl Checkpoint {
    pub fn new(config: ExperimentConfig, model: HmoeModel) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            config,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        if value.get("format").and_then(|f| f.as_str()) != Some(FORMAT) {
            return Err(Error::config("checkpoint", "not an hmoe checkpoint"));
        }
        if value.get("version").and_then(|v| v.as_u64()) != Some(VERSION as u64) {
            return Err(Error::config(
                "checkpoint",
                format!("unsupported version (expected {VERSION})"),
            ));
        }
        let ckpt: Checkpoint = serde_json::from_value(value)
            .map_err(|e| Error::config("checkpoint", e.to_string()))?;
        ckpt.model
            .spec
            .validate()
            .map_err(|e| Error::config("checkpoint", format!("inconsistent model: {e}")))?;
        check_shapes(&ckpt.model)?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn check_shapes(model: &HmoeModel) -> Result<()> {
    let nets = [
        Some(&model.featurizer),
        Some(&model.encoder),
        Some(&model.hypernetwork),
        model.adversary.as_ref(),
    ];
    for net in nets.into_iter().flatten() {
        let expected: Vec<Vec<usize>> = net
            .spec
            .layers()
            .flat_map(|(i, o)| [vec![i, o], vec![o]])
            .collect();
        let actual: Vec<Vec<usize>> = net.params.iter().map(|p| p.shape().to_vec()).collect();
        if expected != actual {
            return Err(Error::config(
                "checkpoint",
                "parameter shapes do not match the network spec",
            ));
        }
    }
    let e = &model.embeddings;
    if e.k() != model.spec.k || e.dim() != model.spec.embedding_dim() {
        return Err(Error::config(
            "checkpoint",
            "embedding table does not match k and d",
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Task, Variant};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let cfg = ExperimentConfig::defaults(Task::SyntheticDg, Variant::ND);
        let spec = cfg.model_spec(16, 3).unwrap();
        let model = HmoeModel::init(spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        Checkpoint::new(cfg, model)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = sample();
        let back = Checkpoint::from_json(&ckpt.to_json().unwrap()).unwrap();
        assert_eq!(back, ckpt);
        for (a, b) in back.model.params().iter().zip(ckpt.model.params()) {
            let bits = |t: &crate::Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn foreign_or_tampered_files_are_rejected() {
        assert!(matches!(
            Checkpoint::from_json("{\"format\":\"other\"}"),
            Err(Error::Config { .. })
        ));
        let mut value: serde_json::Value =
            serde_json::from_str(&sample().to_json().unwrap()).unwrap();
        value["version"] = 99.into();
        assert!(Checkpoint::from_json(&value.to_string()).is_err());

        let mut value: serde_json::Value =
            serde_json::from_str(&sample().to_json().unwrap()).unwrap();
        value["model"]["spec"]["k"] = 5.into();
        assert!(matches!(
            Checkpoint::from_json(&value.to_string()),
            Err(Error::Config { .. })
        ));
    }
}
