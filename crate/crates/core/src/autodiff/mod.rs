//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! Operations record eagerly onto a [`tape::Tape`]; [`tape::Tape::backward`]
//! replays the records in reverse and accumulates adjoints for every named
//! parameter. Input-derivative penalties are handled upstream by finite
//! differences in the graph (two forward passes through shifted inputs), so
//! only first-order gradients are ever needed here.

pub mod tape;
pub mod tensor;
