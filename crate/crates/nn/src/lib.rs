//! Differentiable numeric substrate for the driving world model.
//!
//! A tape of 2-D `f64` array operations with reverse-mode gradients, named
//! parameter stores, dense and gated-recurrent layers, probability
//! distributions, Adam with gradient-norm clipping, EMA mirroring, and a
//! central finite-difference oracle.

pub mod dist;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use dist::{DistKind, DistributionSpec, LogStdRange};
pub use error::NnError;
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use layers::{Activation, GatedRecurrentCell, Linear, Mlp};
pub use optim::{Adam, AdamConfig};
pub use params::{ema_update, Bound, Init, ParamEntry, ParamStore, Precision};
pub use tape::{Gradients, Shape, Tape, Var};
