//! Parameterized layers, parameter storage and checkpoints.

pub mod checkpoint;
pub mod layers;
pub mod params;

pub use checkpoint::{Checkpoint, CheckpointMeta, Record};
pub use layers::{swish1, BatchNorm, Conv2d, ConvUnit, BN_EPS, BN_MOMENTUM};
pub use params::{Param, ParamId, ParamKind, ParamStore, Session, StatUpdate};
