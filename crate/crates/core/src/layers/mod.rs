//! Network building blocks and their parameter bookkeeping.
//!
//! Layers own [`ParamId`]s into a shared [`ParamStore`]; a forward pass binds
//! the parameters it touches as leaves on the tape held by a [`Ctx`].

mod basic;
mod check;
mod params;
mod rnn;
mod transformer;

pub use basic::{BatchNorm, ConvBlock, LayerNorm, Linear};
pub use check::grad_check_params;
pub use params::{BnUpdate, Ctx, Mode, ParamId, ParamStore, BN_MOMENTUM};
pub use rnn::{Direction, Rnn, RnnPass, RnnState};
pub use transformer::{feature_map, head_count, multi_head_attention, TransformerLayer};
