//! Early-exit code completion: a decoder-only transformer trained so every
//! designated exit layer decodes through one shared LM head, plus a learned
//! controller that decides per token and per exit point whether to stop.

pub mod controller;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod exitenv;
pub mod lite;
pub mod model;
pub mod optim;
pub mod ppo;
pub mod serve;
pub mod synth;

pub use error::{Error, Result};
pub use controller::{ControllerConfig, GenerationResult};
pub use corpus::{Corpus, TokenId, Tokenizer};
pub use evalkit::{EvalConfig, EvalReport};
pub use exitenv::{Action, Environment, RewardConfig};
pub use lite::{ExitSchedule, WeightSchedule};
pub use model::{Checkpoint, ModelConfig, Transformer};
pub use ppo::{ExitPolicy, PPOConfig, PolicyArtifact};
