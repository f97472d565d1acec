//! Model configurations used by the experiments and the command line.

use serde::{Deserialize, Serialize};

use crate::datasets::farm::farm_partition;
use crate::datasets::gp::GpFeatures;
use crate::graphnet::{Aggregator, GlobalFlow, GraphDims};
use crate::rvae::{Architecture, NetSpec, ObservationNoise, PriorKind, ReconScope, RvaeConfig};

/// An encode-process-decode stack with hidden width equal to `width`.
pub fn net(width: usize, steps: usize, aggregator: Aggregator) -> NetSpec {
    NetSpec {
        hidden: width,
        width,
        steps,
        aggregator,
        global_flow: GlobalFlow::Full,
    }
}

/// The GP regression models compared in the translation experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GpModel {
    /// Graph encoder and decoder conditioned on relative-position edges.
    EdgeConditioned { steps: usize },
    /// Graph encoder and decoder conditioned on absolute node positions,
    /// edges without attributes.
    NodeOnly { steps: usize },
    /// Deep-set neural process with absolute positions.
    NeuralProcess,
}

impl GpModel {
    pub fn features(&self) -> GpFeatures {
        match self {
            Self::EdgeConditioned { .. } => GpFeatures::Relative,
            Self::NodeOnly { .. } | Self::NeuralProcess => GpFeatures::NodeOnly,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::EdgeConditioned { steps } => format!("crvae-edge-{steps}mp"),
            Self::NodeOnly { steps } => format!("crvae-node-{steps}mp"),
            Self::NeuralProcess => "np".into(),
        }
    }

    /// Arbitrary-conditioning configuration with `latent` channels on the
    /// node and global levels.
    pub fn config(&self, width: usize, latent: usize) -> RvaeConfig {
        let (architecture, latent) = match *self {
            Self::EdgeConditioned { steps } | Self::NodeOnly { steps } => {
                let n = net(width, steps, Aggregator::Mean);
                (
                    Architecture::Graph {
                        encoder: n.clone(),
                        decoder: n,
                    },
                    GraphDims::new(latent, 0, latent),
                )
            }
            Self::NeuralProcess => (Architecture::DeepSet { hidden: width }, GraphDims::new(0, 0, latent)),
        };
        RvaeConfig {
            partition: self.features().partition(),
            latent,
            architecture,
            prior: PriorKind::MaskedEncoder,
            recon: ReconScope::Targets,
            noise: ObservationNoise::Learned,
            zero_init_heads: false,
        }
    }
}

/// Farm model with `steps` message-passing steps in the encoder and the
/// decoder and `latent` channels on every level. With `steps = 0` it is
/// the non-relational baseline of the same size.
pub fn farm_config(steps: usize, width: usize, latent: usize, global_conditioning: bool) -> RvaeConfig {
    let n = net(width, steps, Aggregator::Mean);
    RvaeConfig {
        partition: farm_partition(global_conditioning),
        latent: GraphDims::new(latent, latent, latent),
        architecture: Architecture::Graph {
            encoder: n.clone(),
            decoder: n,
        },
        prior: PriorKind::MaskedEncoder,
        recon: ReconScope::All,
        noise: ObservationNoise::Learned,
        zero_init_heads: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rvae::RvaeModel;

    #[test]
    fn presets_build() {
        for m in [GpModel::EdgeConditioned { steps: 2 }, GpModel::NodeOnly { steps: 1 }, GpModel::NeuralProcess] {
            let model = RvaeModel::new(m.config(8, 4)).unwrap();
            assert_eq!(model.is_deepset(), m == GpModel::NeuralProcess);
        }
        assert_eq!(GpModel::EdgeConditioned { steps: 0 }.label(), "crvae-edge-0mp");
        for steps in [0, 1] {
            let model = RvaeModel::new(farm_config(steps, 8, 4, true)).unwrap();
            assert_eq!(model.receptive_steps(), 2 * steps);
        }
    }

    #[test]
    fn node_only_edges_still_carry_messages() {
        for steps in [0, 2] {
            let model = RvaeModel::new(GpModel::NodeOnly { steps }.config(8, 4)).unwrap();
            let store = crate::training::init_store(&model, 0);
            let edge_mlps = store.names().filter(|n| n.contains("core") && n.contains("/edge/")).count();
            assert_eq!(edge_mlps > 0, steps > 0, "steps {steps}");
        }
    }
}
