pub mod closed_loop;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod kinematics;
pub mod nn;
pub mod protocol;

pub use closed_loop::{FullLoopOutput, LoopConfig, LoopMetrics, SessionState};
pub use dataset::{BinnedTrial, Dataset, Split, SpikeTrain, TuningModel};
pub use decoder::{DecoderConfig, DecoderModel};
pub use encoder::{EncoderConfig, EncoderModel, GenerationState};
pub use error::{Error, Result};
pub use kinematics::{ArmState, JointAngles, KinematicChain};
pub use protocol::{ClientMessage, ServerMessage};
