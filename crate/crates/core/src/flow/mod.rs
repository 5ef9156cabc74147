//! Invertible layers and the multi-scale flow model.

pub mod layers;
pub mod model;
pub mod params;

pub use layers::{actnorm_apply, squeeze, ActNorm, AffineCoupling, ContextEncoder, Conv, Direction, InvConv1x1, Mode};
pub use model::{Decoded, Encoded, EncoderKind, FlowConfig, FlowModel, LatentStack};
pub use params::{Bound, Param, ParamId, ParamStore};
