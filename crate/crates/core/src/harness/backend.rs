//! Encoder selection shared by the command line and the service.

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::encoder::external::ExternalEncoder;
use crate::encoder::EncoderPair;
use crate::error::Result;
use crate::world::{generate_world, ToyEncoder, World, WorldConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    /// Toy encoder over a generated synthetic world.
    Toy { world: WorldConfig },
    /// External adapter program.
    Command { program: PathBuf, args: Vec<String> },
}

/// An active encoder, plus the synthetic world when there is one.
pub struct Backend {
    pub encoder: Box<dyn EncoderPair<f64>>,
    pub world: Option<Arc<World>>,
}

impl Backend {
    pub fn open(spec: &EncoderSpec) -> Result<Self> {
        match spec {
            EncoderSpec::Toy { world } => Ok(Self::toy(Arc::new(generate_world(world)?))),
            EncoderSpec::Command { program, args } => Ok(Self {
                encoder: Box::new(ExternalEncoder::spawn(program.clone(), args.clone())?),
                world: None,
            }),
        }
    }

    pub fn toy(world: Arc<World>) -> Self {
        Self {
            encoder: Box::new(ToyEncoder::<f64>::new(world.clone())),
            world: Some(world),
        }
    }

    pub fn encoder_id(&self) -> &str {
        self.encoder.encoder_id()
    }
}
