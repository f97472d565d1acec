use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rvae_autodiff::ParameterStore;
use serde::{Deserialize, Serialize};

use super::{ElboWeights, RvaeConfig, RvaeModel};
use crate::datasets::Standardization;
use crate::error::{Error, Result};

const FORMAT: &str = "rvae-checkpoint";
const VERSION: u32 = 1;

/// Architecture, parameters (with optimizer state), ELBO weights, the seed
/// of the run that produced them and the state statistics the model was
/// trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RvaeConfig,
    pub weights: ElboWeights,
    pub seed: u64,
    pub params: ParameterStore,
    pub scale: Option<Standardization>,
}

#[derive(Serialize, Deserialize)]
struct Wire {
    format: String,
    version: u32,
    config: RvaeConfig,
    weights: ElboWeights,
    seed: u64,
    params: serde_json::Value,
    #[serde(default)]
    scale: Option<Standardization>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let wire = Wire {
            format: FORMAT.into(),
            version: VERSION,
            config: self.config.clone(),
            weights: self.weights,
            seed: self.seed,
            params: serde_json::from_str(&self.params.to_json())?,
            scale: self.scale.clone(),
        };
        Ok(serde_json::to_string(&wire)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let wire: Wire = serde_json::from_str(text)?;
        if wire.format != FORMAT || wire.version != VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                wire.format, wire.version
            )));
        }
        Ok(Self {
            config: wire.config,
            weights: wire.weights,
            seed: wire.seed,
            params: ParameterStore::from_json(&wire.params.to_string())?,
            scale: wire.scale,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound("checkpoint", path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_json(&text)
    }

    /// Rebuilds the model and checks that the stored parameters match it.
    pub fn model(&self) -> Result<RvaeModel> {
        let model = RvaeModel::new(self.config.clone())?;
        let mut expected = ParameterStore::new();
        model.init(&mut expected, &mut ChaCha8Rng::seed_from_u64(0));
        for (name, t) in expected.iter() {
            match self.params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(Error::Config(format!("checkpoint does not match architecture at {name}"))),
            }
        }
        Ok(model)
    }
}
