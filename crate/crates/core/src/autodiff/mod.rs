//! Reverse-mode automatic differentiation over batched matrix computations.
//!
//! A [`Tape`](tape::Tape) records matrix-valued nodes as a forward pass runs;
//! [`Tape::backward`](tape::Tape::backward) then walks the record once in
//! reverse, accumulating gradients into a [`ParamSet`](params::ParamSet).
//! Parameters live in the set under string paths (`"encoder.l0.w"`), which
//! also drive Adam filtering, EMA target blending and serialization.

pub mod fd;
pub mod params;
pub mod tape;

pub use fd::{fd_grad, max_rel_err};
pub use params::{init_mlp, Mlp, MlpSpec, OutAct, ParamSet};
pub use tape::{NodeId, Tape};
