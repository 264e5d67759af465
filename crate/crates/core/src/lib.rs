//! Self-supervised audio-visual representation learning with a student
//! encoder regressing contextualized targets from an EMA teacher.
//!
//! The crate is organized bottom-up: [`tensor`] provides dense tensors and a
//! reverse-mode tape; [`frontends`], [`fusion`] and [`encoder`] build the
//! shared model; [`targets`] and [`pretrain`] implement the teacher-student
//! objective; [`finetune`] adds a sequence-to-sequence decoder; [`synth`]
//! generates correlated audio-visual corpora; [`config`] and [`harness`]
//! back the `avd2v` command line.

pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod frontends;
pub mod fusion;
pub mod harness;
pub mod model;
pub mod nn;
pub mod optim;
pub mod par;
pub mod params;
pub mod pretrain;
pub mod rng;
pub mod synth;
pub mod targets;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tensor::{Real, Tape, Tensor, Var};
